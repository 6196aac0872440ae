//! Prompt rendering for the generator and guidance roles. Output is a pure
//! function of the inputs.

use std::fmt::Write;

use super::guidance::GuidanceReport;
use crate::dsl::builtin_reference_text;
use crate::eval::EvalResult;
use crate::library::{ContextWindow, LibraryEntry};
use crate::metrics::list_baselines;
use crate::strategy::StrategySpec;

/// Default per-section character budget for guidance text.
pub const DEFAULT_GUIDANCE_BUDGET: usize = 800;

pub const GENERATION_SYSTEM: &str = "You are an MIA metric generation agent. You design \
membership inference metrics that read only per-token model outputs and decide whether a \
sample was part of a model's training data.";

pub const GUIDANCE_SYSTEM: &str = "You are an expert in model privacy attacks and evaluation. \
Your task is to comprehensively assess the performance of different MIA metrics generated in \
a single experimental round and provide structured feedback to guide subsequent strategy \
refinement.";

/// Cuts `text` to at most `budget` characters, marking the cut.
pub fn clip(text: &str, budget: usize) -> String {
    if text.chars().count() <= budget {
        return text.to_string();
    }
    let mut s: String = text.chars().take(budget).collect();
    s.push_str(" [...]");
    s
}

fn entry_block(out: &mut String, e: &LibraryEntry) {
    let _ = writeln!(
        out,
        "- name: {}\n  category: {}\n  score: Q {:.4}, AUC {:.4}, Accuracy {:.4}, TPR@5%FPR {:.4}\n  expected_behavior: {}\n  code: {}",
        e.spec.name, e.category, e.q, e.r.auc, e.r.acc, e.r.tpr_at_5fpr, e.spec.direction, e.spec.code
    );
    if !e.spec.description.is_empty() {
        let _ = writeln!(out, "  description: {}", e.spec.description);
    }
}

pub fn render_generation_prompt(
    context: &ContextWindow,
    guidance: Option<&GuidanceReport>,
    k: usize,
    budget: usize,
) -> String {
    let mut out = String::new();
    out.push_str(
        "## Inputs\n\
         For every sample you get, per token position i (N positions, vocabulary V):\n\
         - P: N x V probabilities after softmax (64-bit)\n\
         - LP: N x V log-probabilities\n\
         - Y: the ground-truth token id at each position\n\
         - TP, TLP: probability and log-probability of the ground-truth token, length N\n\n\
         Metrics are written in a small expression language, not in a general programming \
         language. A program must reduce to one scalar per sample.\n\n",
    );
    out.push_str("## Language reference\n");
    out.push_str(
        "Operators: + - * / and unary minus, parentheses, numeric literals, `inf`. \
         Matrices combine elementwise with matrices, and with length-N sequences row by row. \
         Literal-only arguments: alpha of renyi_v, the exponent of pow, the bounds of clamp, \
         and k of min_k_mean / max_k_mean.\n",
    );
    out.push_str(&builtin_reference_text());
    out.push_str(
        "\nHard constraints: at most 4 vocabulary passes per program; no sorting, ranking or \
         loops (there are none in the language). Programs that fail to parse or type-check \
         are discarded.\n\n",
    );

    out.push_str("## Existing system metrics (do not recreate)\n");
    for spec in list_baselines() {
        let _ = writeln!(out, "- {}: {}", spec.name, spec.code);
    }
    out.push('\n');

    if !context.is_empty() {
        out.push_str("## Strategies from earlier rounds\n");
        if !context.strong.is_empty() {
            out.push_str("Strong (build on these):\n");
            context.strong.iter().for_each(|e| entry_block(&mut out, e));
        }
        if !context.weak.is_empty() {
            out.push_str("Weak (avoid these directions):\n");
            context.weak.iter().for_each(|e| entry_block(&mut out, e));
        }
        out.push('\n');
    }

    if let Some(g) = guidance {
        let n = &g.next_round_strategy;
        let ins = &g.useful_insights;
        out.push_str("## Guidance from the previous round\n");
        let _ = writeln!(out, "Focus metrics: {}", clip(&n.focus_metrics, budget));
        let _ = writeln!(out, "New ideas: {}", clip(&n.new_ideas, budget));
        let _ = writeln!(
            out,
            "Experiment suggestions: {}",
            clip(&n.experiment_suggestions, budget)
        );
        let _ = writeln!(
            out,
            "Strong families: {}",
            clip(&ins.strong_metric_families.join(", "), budget)
        );
        let _ = writeln!(
            out,
            "Weak families: {}",
            clip(&ins.weak_metric_families.join(", "), budget)
        );
        let _ = writeln!(out, "Notes: {}\n", clip(&ins.notes, budget));
    }

    let _ = write!(
        out,
        "## Task\n\
         Propose {k} novel metrics that separate member from non-member samples, use only \
         token-level features, are numerically stable and have a clear statistical meaning.\n\n\
         ## Output format (JSON)\n\
         {{\n  \"metrics\": [\n    {{\n      \"name\": \"metric name\",\n      \
         \"formula\": \"optional math expression\",\n      \
         \"description\": \"meaning and rationale\",\n      \
         \"code\": \"an expression in the language above\",\n      \
         \"expected_behavior\": \"higher/lower for members\"\n    }}\n  ]\n}}\n"
    );
    out
}

/// One line per strategy: `name   AUC 0.xxxx, Accuracy 0.xxxx, TPR@5%FPR 0.xxxx`.
pub fn metric_table(results: &[(StrategySpec, EvalResult)]) -> String {
    let mut out = String::new();
    for (spec, r) in results {
        if r.failed() {
            let _ = writeln!(out, "{}   FAILED", spec.name);
        } else {
            let _ = writeln!(
                out,
                "{}   AUC {:.4}, Accuracy {:.4}, TPR@5%FPR {:.4}",
                spec.name, r.r.auc, r.r.acc, r.r.tpr_at_5fpr
            );
        }
    }
    out
}

pub fn render_guidance_prompt(results: &[(StrategySpec, EvalResult)]) -> String {
    let mut out = String::new();
    out.push_str(
        "## Input\n\
         Each line is a metric and its evaluation results. AUC is overall discriminative \
         power, Accuracy is classification correctness at the best threshold, and TPR@5%FPR \
         is recall under a strict false-positive constraint.\n\n",
    );
    out.push_str(&metric_table(results));
    out.push_str("\nPrograms:\n");
    for (spec, _) in results {
        let _ = writeln!(out, "- {} ({}): {}", spec.name, spec.direction, spec.code);
    }
    out.push_str(
        "\n## Tasks\n\
         1. Rank all metrics jointly on AUC, Accuracy and TPR@5%FPR; explain the top three \
         and point out metrics that are close to random.\n\
         2. Assess whether this round as a whole beats random guessing and whether its best \
         metrics should be saved.\n\
         3. Categorize every metric as strong, mid or weak and speculate from its form why.\n\
         4. Propose directions for the next round.\n\n\
         ## Output format (JSON, no additional fields)\n\
         {\n  \"summary\": {\"overall_quality\": \"...\", \"should_save_best_strategy\": true, \
         \"best_metrics_to_save\": [\"...\"]},\n  \
         \"ranking\": [{\"name\": \"...\", \"auc\": 0.0, \"accuracy\": 0.0, \
         \"tpr_at_5_fpr\": 0.0, \"category\": \"strong|mid|weak\", \"comment\": \"...\"}],\n  \
         \"useful_insights\": {\"strong_metric_families\": [\"...\"], \
         \"weak_metric_families\": [\"...\"], \"notes\": \"...\"},\n  \
         \"next_round_strategy\": {\"focus_metrics\": \"...\", \"new_ideas\": \"...\", \
         \"experiment_suggestions\": \"...\"}\n}\n",
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::EvalTuple;
    use crate::library::{categorize, select_context, Library, Scored};
    use crate::orchestrator::guidance::rule_based;
    use crate::strategy::Direction;

    fn library(n: usize) -> Library {
        let mut lib = Library::new();
        let scored = (0..n)
            .map(|i| Scored {
                spec: StrategySpec::new(
                    format!("cand_{i}"),
                    "mean(TLP)",
                    Direction::HigherForMembers,
                ),
                r: EvalTuple {
                    auc: 0.5,
                    acc: 0.5,
                    tpr_at_5fpr: 0.0,
                },
                q: i as f64 / 10.0,
                failed: false,
            })
            .collect();
        lib.insert(categorize(scored, 1)).unwrap();
        lib
    }

    #[test]
    fn empty_context_has_no_context_section() {
        let p = render_generation_prompt(&ContextWindow::default(), None, 5, 800);
        assert!(!p.contains("Strategies from earlier rounds"));
        assert!(!p.contains("Guidance from the previous round"));
        assert!(p.contains("min_k_mean(seq, k"));
        assert!(p.contains("perplexity: exp(-mean(TLP))"));
    }

    #[test]
    fn window_entries_appear() {
        let lib = library(8);
        let w = select_context(&lib, 5);
        let p = render_generation_prompt(&w, None, 5, 800);
        for e in w.entries() {
            assert!(p.contains(&format!("name: {}", e.spec.name)));
        }
        assert_eq!(w.len(), 5);
        assert_eq!(p, render_generation_prompt(&w, None, 5, 800));
    }

    #[test]
    fn guidance_section_is_clipped() {
        let g = rule_based(&[]);
        let mut g = g;
        g.next_round_strategy.new_ideas = "x".repeat(2000);
        let p = render_generation_prompt(&ContextWindow::default(), Some(&g), 5, 100);
        assert!(p.contains("Guidance from the previous round"));
        assert!(p.contains(&format!("New ideas: {} [...]", "x".repeat(100))));
        assert!(!p.contains(&"x".repeat(101)));
    }
}
