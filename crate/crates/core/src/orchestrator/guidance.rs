//! The guidance report: schema, the mechanical rule-based producer, and
//! parsing of model-written reports.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::parse::extract_json_object;
use crate::dsl::parse_expr;
use crate::eval::EvalResult;
use crate::library::{categories, Category};
use crate::strategy::StrategySpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub overall_quality: String,
    pub should_save_best_strategy: bool,
    pub best_metrics_to_save: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingEntry {
    pub name: String,
    pub auc: f64,
    pub accuracy: f64,
    pub tpr_at_5_fpr: f64,
    pub category: Category,
    pub comment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsefulInsights {
    pub strong_metric_families: Vec<String>,
    pub weak_metric_families: Vec<String>,
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextRoundStrategy {
    pub focus_metrics: String,
    pub new_ideas: String,
    pub experiment_suggestions: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceReport {
    pub summary: Summary,
    pub ranking: Vec<RankingEntry>,
    pub useful_insights: UsefulInsights,
    pub next_round_strategy: NextRoundStrategy,
}

impl GuidanceReport {
    pub fn comment_for(&self, name: &str) -> Option<&str> {
        self.ranking
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.comment.as_str())
    }
}

/// Family of a program: the outermost function of its source, looking
/// through negation.
pub fn family(spec: &StrategySpec) -> String {
    parse_expr(&spec.code)
        .map(|e| e.head_symbol())
        .unwrap_or_else(|_| "unparsed".into())
}

fn push_unique(list: &mut Vec<String>, item: String) {
    if !list.contains(&item) {
        list.push(item);
    }
}

/// Builds the report mechanically: rank by Q, categories from the round's
/// percentiles, families from program heads.
pub fn rule_based(round: &[(StrategySpec, EvalResult)]) -> GuidanceReport {
    let mut order: Vec<usize> = (0..round.len()).collect();
    order.sort_by(|&a, &b| {
        round[b]
            .1
            .q
            .total_cmp(&round[a].1.q)
            .then_with(|| round[a].0.name.cmp(&round[b].0.name))
    });
    let qs: Vec<f64> = round.iter().map(|(_, r)| r.q).collect();
    let cats = categories(&qs);

    let mut ranking = Vec::new();
    let (mut strong_fam, mut weak_fam) = (Vec::new(), Vec::new());
    for &i in &order {
        let (spec, res) = &round[i];
        let comment = match &res.status {
            crate::eval::EvalStatus::Ok => {
                let vs_random = if res.r.auc >= 0.6 {
                    "clearly above random"
                } else if res.r.auc > 0.5 {
                    "slightly above random"
                } else {
                    "at or below random"
                };
                format!("Q {:.4}; {vs_random}; declared {}", res.q, spec.direction)
            }
            crate::eval::EvalStatus::Failed { reason }
            | crate::eval::EvalStatus::NotApplicable { reason } => format!("failed: {reason}"),
        };
        match cats[i] {
            Category::Strong => push_unique(&mut strong_fam, family(spec)),
            Category::Weak => push_unique(&mut weak_fam, family(spec)),
            Category::Mid => {}
        }
        ranking.push(RankingEntry {
            name: spec.name.clone(),
            auc: res.r.auc,
            accuracy: res.r.acc,
            tpr_at_5_fpr: res.r.tpr_at_5fpr,
            category: cats[i],
            comment,
        });
    }
    // A family that is both strong and weak is not a reliable signal.
    let strong_set: HashSet<&String> = strong_fam.iter().collect();
    weak_fam.retain(|f| !strong_set.contains(f));

    let best_auc = round
        .iter()
        .filter(|(_, r)| !r.failed())
        .map(|(_, r)| r.r.auc)
        .fold(0.0, f64::max);
    let overall_quality = if best_auc >= 0.7 {
        "strong"
    } else if best_auc >= 0.6 {
        "medium"
    } else {
        "weak"
    };
    let best_metrics_to_save: Vec<String> = ranking
        .iter()
        .filter(|r| r.category == Category::Strong && r.auc >= 0.6)
        .take(2)
        .map(|r| r.name.clone())
        .collect();
    let failed = round.iter().filter(|(_, r)| r.failed()).count();

    GuidanceReport {
        summary: Summary {
            overall_quality: overall_quality.into(),
            should_save_best_strategy: !best_metrics_to_save.is_empty(),
            best_metrics_to_save,
        },
        ranking,
        useful_insights: UsefulInsights {
            strong_metric_families: strong_fam.clone(),
            weak_metric_families: weak_fam.clone(),
            notes: format!(
                "{} strategies evaluated, {failed} failed; best AUC {best_auc:.4}",
                round.len()
            ),
        },
        next_round_strategy: NextRoundStrategy {
            focus_metrics: if strong_fam.is_empty() {
                "no family stood out".into()
            } else {
                format!("variants of {}", strong_fam.join(", "))
            },
            new_ideas: "combine the strongest signal with a complementary one; try other pooling \
                        (min_k_mean, max_k_mean) and Rényi orders"
                .into(),
            experiment_suggestions: if weak_fam.is_empty() {
                "vary k in {0, 10, 20, 50, 100} on the strongest programs".into()
            } else {
                format!(
                    "vary k and alpha on the strongest programs; deprioritize {}",
                    weak_fam.join(", ")
                )
            },
        },
    }
}

/// Parses a model-written report and checks it against the round.
pub fn parse_guidance(text: &str, expected_names: &[String]) -> Result<GuidanceReport, String> {
    let value = extract_json_object(text, "ranking").ok_or("no JSON object with a ranking")?;
    let report: GuidanceReport =
        serde_json::from_value(value).map_err(|e| format!("guidance schema: {e}"))?;
    let mut got: Vec<&str> = report.ranking.iter().map(|r| r.name.as_str()).collect();
    let mut want: Vec<&str> = expected_names.iter().map(String::as_str).collect();
    got.sort_unstable();
    want.sort_unstable();
    if got != want {
        return Err(format!(
            "ranking names {got:?} do not match the round's strategies {want:?}"
        ));
    }
    Ok(report)
}
