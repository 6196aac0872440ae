//! The closed discovery loop: generate, evaluate, assess, archive.

pub mod guidance;
pub mod mutation;
pub mod parse;
pub mod prompts;
pub mod transport;

use std::cell::OnceCell;
use std::collections::HashMap;
use std::path::PathBuf;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate_strategies, CompiledStrategy, EvalResult, ResultLine, Weights};
use crate::library::{categorize, select_context, Library, LibraryError, Scored, DEFAULT_WINDOW};
use crate::logits::Dataset;
use crate::metrics::baseline_kinds;
use crate::strategy::StrategySpec;
use guidance::{parse_guidance, rule_based, GuidanceReport};
use parse::{parse_generation, Rejection};
use prompts::{
    render_generation_prompt, render_guidance_prompt, DEFAULT_GUIDANCE_BUDGET, GENERATION_SYSTEM,
    GUIDANCE_SYSTEM,
};
use transport::{ChatRequest, ChatTransport, Role, TransportError, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// A chat-completions endpoint.
    LlmChat,
    /// Canned responses from a fixture directory.
    #[serde(rename = "replay_fixtures")]
    Replay,
    /// Deterministic program mutations, no model.
    OfflineMutation,
}

impl Backend {
    pub fn needs_transport(self) -> bool {
        self != Backend::OfflineMutation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    RuleBased,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnTransportError {
    Abort,
    OfflineMutation,
}

fn d_rounds() -> u32 {
    10
}
fn d_candidates() -> usize {
    5
}
fn d_window() -> usize {
    DEFAULT_WINDOW
}
fn d_true() -> bool {
    true
}
fn d_model() -> String {
    "deepseek-chat".into()
}
fn d_temperature() -> f64 {
    0.6
}
fn d_seed() -> u64 {
    2024
}
fn d_budget() -> usize {
    DEFAULT_GUIDANCE_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_rounds")]
    pub rounds: u32,
    #[serde(default = "d_candidates")]
    pub candidates: usize,
    #[serde(default = "d_window")]
    pub window: usize,
    #[serde(default)]
    pub weights: Weights,
    #[serde(default = "d_true")]
    pub guidance_enabled: bool,
    #[serde(default = "rule_based_mode")]
    pub guidance_mode: GuidanceMode,
    #[serde(default = "offline_backend")]
    pub backend: Backend,
    #[serde(default = "d_model")]
    pub model_id: String,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "abort_policy")]
    pub on_transport_error: OnTransportError,
    /// Fixture directory for the replay backend.
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    /// Characters per guidance section in the generation prompt.
    #[serde(default = "d_budget")]
    pub guidance_budget: usize,
}

fn rule_based_mode() -> GuidanceMode {
    GuidanceMode::RuleBased
}
fn offline_backend() -> Backend {
    Backend::OfflineMutation
}
fn abort_policy() -> OnTransportError {
    OnTransportError::Abort
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl RunConfig {
    /// Every problem with the config, not just the first.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.window == 0 {
            errs.push("window must be at least 1".to_string());
        }
        let w = &self.weights;
        if Weights::new(w.w_auc, w.w_acc, w.w_tpr).is_err() {
            errs.push("weights must be finite and non-negative".into());
        }
        if !(self.temperature.is_finite() && (0.0..=2.0).contains(&self.temperature)) {
            errs.push(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.backend == Backend::Replay && self.fixtures.is_none() {
            errs.push("the replay backend needs a fixtures directory".into());
        }
        if self.backend.needs_transport() && self.model_id.trim().is_empty() {
            errs.push("model_id is empty".into());
        }
        if self.guidance_enabled
            && self.guidance_mode == GuidanceMode::Llm
            && !self.backend.needs_transport()
        {
            errs.push("llm guidance needs the llm_chat or replay backend".into());
        }
        if self.guidance_budget == 0 {
            errs.push("guidance_budget must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("invalid run config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("backend {0:?} needs a transport")]
    MissingTransport(Backend),
    #[error(transparent)]
    Library(#[from] LibraryError),
}

/// What happened in one round, written out verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub candidates: Vec<StrategySpec>,
    pub rejected: Vec<Rejection>,
    pub results: Vec<ResultLine>,
    pub guidance: Option<GuidanceReport>,
    /// Why the model's guidance was replaced by the rule-based report.
    pub guidance_fallback: Option<String>,
    /// Why the generator fell back to offline mutation.
    pub generator_fallback: Option<String>,
    pub token_usage: Usage,
    pub barren: bool,
    pub best_q_so_far: Option<f64>,
    pub generation_prompt: String,
}

#[derive(Debug)]
pub struct LoopOutcome {
    pub library: Library,
    pub rounds: Vec<RoundReport>,
    /// Set when a transport failure stopped the loop early.
    pub aborted: Option<String>,
}

impl LoopOutcome {
    pub fn total_usage(&self) -> Usage {
        let mut u = Usage::default();
        self.rounds.iter().for_each(|r| u += r.token_usage);
        u
    }
}

struct Generated {
    specs: Vec<StrategySpec>,
    rejected: Vec<Rejection>,
    usage: Usage,
    fallback: Option<String>,
}

/// Runs `config.rounds` rounds on `dataset`, continuing from `initial`.
/// `on_round` sees each round as soon as it is archived.
pub fn run_loop(
    dataset: &Dataset,
    config: &RunConfig,
    transport: Option<&dyn ChatTransport>,
    initial: Library,
    mut on_round: impl FnMut(&RoundReport, &Library),
) -> Result<LoopOutcome, LoopError> {
    config.validate().map_err(LoopError::Config)?;
    if config.backend.needs_transport() && transport.is_none() {
        return Err(LoopError::MissingTransport(config.backend));
    }
    let mut library = initial;
    let mut rounds = Vec::new();
    let mut last_guidance: Option<GuidanceReport> = None;
    let baseline_q = OnceCell::new();

    // Barren rounds archive nothing, so numbering cannot come from the library.
    let first = library.next_round();
    for t in (0..config.rounds).map(|i| first + i) {
        let context = select_context(&library, config.window);
        let guidance_in = if config.guidance_enabled {
            last_guidance.as_ref()
        } else {
            None
        };
        let prompt = render_generation_prompt(
            &context,
            guidance_in,
            config.candidates,
            config.guidance_budget,
        );

        let offline = |library: &Library| {
            let baseline_q = baseline_q.get_or_init(|| baseline_fitness(dataset, &config.weights));
            mutation::generate(&mutation::MutationInput {
                context: &context,
                guidance: guidance_in,
                library,
                baseline_q,
                round: t,
                k: config.candidates,
                seed: config.seed,
            })
        };
        let generated = match (config.backend, transport) {
            (Backend::OfflineMutation, _) | (_, None) => Generated {
                specs: offline(&library),
                rejected: Vec::new(),
                usage: Usage::default(),
                fallback: None,
            },
            (_, Some(tr)) => match chat(tr, config, Role::Generation, GENERATION_SYSTEM, &prompt) {
                Ok(resp) => {
                    let parsed = parse_generation(&resp.text, config.candidates);
                    Generated {
                        specs: parsed.specs,
                        rejected: parsed.rejected,
                        usage: resp.usage,
                        fallback: None,
                    }
                }
                Err(e) if config.on_transport_error == OnTransportError::Abort => {
                    warn!("round {t}: generation failed, aborting: {e}");
                    return Ok(LoopOutcome {
                        library,
                        rounds,
                        aborted: Some(format!("round {t}: {e}")),
                    });
                }
                Err(e) => {
                    warn!("round {t}: generation failed, using offline mutation: {e}");
                    Generated {
                        specs: offline(&library),
                        rejected: Vec::new(),
                        usage: Usage::default(),
                        fallback: Some(e.to_string()),
                    }
                }
            },
        };
        let mut usage = generated.usage;
        let mut rejected = generated.rejected;

        let mut compiled = Vec::new();
        for spec in generated.specs {
            match CompiledStrategy::compile(spec.clone()) {
                Ok(c) => compiled.push(c),
                Err(e) => rejected.push(Rejection {
                    name: Some(spec.name),
                    reason: format!("invalid program: {e}"),
                }),
            }
        }
        let results = evaluate_strategies(&compiled, dataset, &config.weights);
        let evaluated: Vec<(StrategySpec, EvalResult)> = compiled
            .iter()
            .map(|c| c.spec.clone())
            .zip(results)
            .collect();
        let barren = evaluated.is_empty();

        let mut guidance_fallback = None;
        let mut report = None;
        if config.guidance_enabled {
            let rb = || rule_based(&evaluated);
            report = Some(match (config.guidance_mode, transport) {
                (GuidanceMode::Llm, Some(tr)) if !barren => {
                    let names: Vec<String> =
                        evaluated.iter().map(|(s, _)| s.name.clone()).collect();
                    let p = render_guidance_prompt(&evaluated);
                    match chat(tr, config, Role::Guidance, GUIDANCE_SYSTEM, &p) {
                        Ok(resp) => {
                            usage += resp.usage;
                            parse_guidance(&resp.text, &names).unwrap_or_else(|e| {
                                guidance_fallback = Some(e);
                                rb()
                            })
                        }
                        Err(e) if config.on_transport_error == OnTransportError::Abort => {
                            warn!("round {t}: guidance failed, aborting: {e}");
                            return Ok(LoopOutcome {
                                library,
                                rounds,
                                aborted: Some(format!("round {t} guidance: {e}")),
                            });
                        }
                        Err(e) => {
                            guidance_fallback = Some(e.to_string());
                            rb()
                        }
                    }
                }
                _ => rb(),
            });
        }

        let scored = evaluated
            .iter()
            .map(|(spec, r)| Scored {
                spec: spec.clone(),
                r: r.r,
                q: r.q,
                failed: r.failed(),
            })
            .collect();
        let mut entries = categorize(scored, t);
        if let Some(g) = &report {
            for e in &mut entries {
                e.analysis = g.comment_for(&e.spec.name).unwrap_or_default().to_string();
            }
        }
        library.insert(entries)?;

        let best_q_so_far = library.best().map(|e| e.q);
        info!(
            "round {t}: {} candidates, {} rejected, best q so far {:?}",
            evaluated.len(),
            rejected.len(),
            best_q_so_far
        );
        let round = RoundReport {
            round: t,
            candidates: evaluated.iter().map(|(s, _)| s.clone()).collect(),
            rejected,
            results: evaluated.iter().map(|(_, r)| r.to_json_line()).collect(),
            guidance: report.clone(),
            guidance_fallback,
            generator_fallback: generated.fallback,
            token_usage: usage,
            barren,
            best_q_so_far,
            generation_prompt: prompt,
        };
        on_round(&round, &library);
        rounds.push(round);
        if !barren {
            last_guidance = report;
        }
    }
    Ok(LoopOutcome {
        library,
        rounds,
        aborted: None,
    })
}

/// Q of every baseline on the dataset, for offline parent selection.
fn baseline_fitness(dataset: &Dataset, weights: &Weights) -> HashMap<String, f64> {
    let kinds: Vec<CompiledStrategy> = baseline_kinds()
        .into_iter()
        .map(CompiledStrategy::native)
        .collect();
    evaluate_strategies(&kinds, dataset, weights)
        .into_iter()
        .map(|r| (r.name.clone(), if r.failed() { 0.0 } else { r.q }))
        .collect()
}

fn chat(
    tr: &dyn ChatTransport,
    config: &RunConfig,
    role: Role,
    system: &str,
    user: &str,
) -> Result<transport::ChatResponse, TransportError> {
    tr.complete(&ChatRequest {
        role,
        model: config.model_id.clone(),
        temperature: config.temperature,
        system: system.to_string(),
        user: user.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.rounds, c.candidates, c.window), (10, 5, 5));
        assert_eq!(c.temperature, 0.6);
        assert_eq!(c.weights, Weights::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn validation_lists_every_problem() {
        let c: RunConfig = serde_json::from_str(
            r#"{"window": 0, "temperature": 5.0, "backend": "replay_fixtures", "guidance_budget": 0}"#,
        )
        .unwrap();
        assert_eq!(c.validate().unwrap_err().len(), 4);
        assert!(serde_json::from_str::<RunConfig>(r#"{"rounds_": 3}"#).is_err());
    }
}
