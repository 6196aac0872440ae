//! Controlled memorization testbed: standard-normal logits, with members
//! getting a boost `delta` on the true-token logit at every position.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::eval::{roc_auc, score_matrix, CompiledStrategy, EvalError, ScoreSet};
use crate::logits::{Dataset, Distributions, Label, LogitsRecord, Slice};
use crate::strategy::{Direction, ScoreOutcome, StrategySpec};

/// Average positive gap between the top log-probability and the target's.
pub const GAP_PROGRAM: &str = "mean(relu(max_v(LP) - TLP))";
/// Gradient helicity over target probabilities, dropping the last entry.
pub const HELICITY_PROB_PROGRAM: &str =
    "mean(drop_last(abs(gradient(TP) * gradient(gradient(TP)))))";
/// The same over target log-probabilities.
pub const HELICITY_LOG_PROGRAM: &str =
    "mean(drop_last(abs(gradient(TLP) * gradient(gradient(TLP)))))";

pub const DEFAULT_TARGET_AUC: f64 = 0.915;
pub const DELTA_BRACKET: (f64, f64) = (0.0, 10.0);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("metric `{name}` could not score the dataset: {reason}")]
    Unscorable { name: String, reason: String },
    #[error("AUC is not monotone in delta over the bisection trace")]
    NotMonotone,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_member: usize,
    pub n_nonmember: usize,
    pub vocab: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_member: 500,
            n_nonmember: 500,
            vocab: 1000,
            seq_len: 64,
            delta: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("n_member", self.n_member),
            ("n_nonmember", self.n_nonmember),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.vocab > u32::MAX as usize {
            problems.push("vocab does not fit u32 token ids".into());
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            problems.push(format!("delta must be finite and >= 0, got {}", self.delta));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    fn total(&self) -> usize {
        self.n_member + self.n_nonmember
    }

    fn is_member(&self, index: usize) -> bool {
        index < self.n_member
    }
}

/// Unboosted targets and logits for sample `index`. Every sample has its
/// own stream, so output does not depend on generation order.
fn raw_sample(cfg: &SimConfig, index: usize) -> (Vec<u32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let targets: Vec<u32> = (0..cfg.seq_len)
        .map(|_| rng.random_range(0..cfg.vocab as u32))
        .collect();
    let logits: Vec<f32> = (0..cfg.seq_len * cfg.vocab)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    (targets, logits)
}

pub fn simulate_record(cfg: &SimConfig, index: usize) -> LogitsRecord {
    let (targets, mut logits) = raw_sample(cfg, index);
    let member = cfg.is_member(index);
    if member {
        let boost = cfg.delta as f32;
        for (i, &y) in targets.iter().enumerate() {
            logits[i * cfg.vocab + y as usize] += boost;
        }
    }
    let label = if member {
        Label::Member
    } else {
        Label::NonMember
    };
    LogitsRecord::new(
        format!("sim-{index:06}"),
        label,
        Slice::Text,
        targets,
        logits,
    )
}

/// Members first, then non-members.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<Dataset, SimError> {
    cfg.validate()?;
    let records: Vec<LogitsRecord> = (0..cfg.total())
        .into_par_iter()
        .map(|i| simulate_record(cfg, i))
        .collect();
    Ok(Dataset::new(cfg.vocab, records).with_provenance(format!(
        "synthetic: delta={} seed={} V={} N={}",
        cfg.delta, cfg.seed, cfg.vocab, cfg.seq_len
    )))
}

/// `(1/N) sum_i max(0, max_j log p_ij - log p(y_i))`.
pub fn avg_true_max_log_gap(d: &Distributions) -> f64 {
    let tlp = d.target_log_probs();
    let total: f64 = (0..d.seq_len)
        .map(|i| {
            let top = d
                .log_prob_row(i)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            (top - tlp[i]).max(0.0)
        })
        .sum();
    total / d.seq_len as f64
}

pub fn gap_spec() -> StrategySpec {
    StrategySpec::new(
        "avg_true_max_log_gap",
        GAP_PROGRAM,
        Direction::LowerForMembers,
    )
    .with_formula("(1/N) sum_i max(0, max_j log p(j|i) - log p(y_i|i))")
    .with_description(
        "Average positive gap between the most confident prediction and the true token.",
    )
}

pub fn helicity_prob_spec() -> StrategySpec {
    StrategySpec::new(
        "log_probability_gradient_field_helicity",
        HELICITY_PROB_PROGRAM,
        Direction::HigherForMembers,
    )
    .with_formula("mean |g1 * g2| over all but the last position, g1 = grad p(y), g2 = grad g1")
    .with_description("Second-order structure of the true-token probability along the sequence.")
}

pub fn helicity_log_spec() -> StrategySpec {
    StrategySpec::new(
        "log_probability_gradient_helicity_log",
        HELICITY_LOG_PROGRAM,
        Direction::HigherForMembers,
    )
    .with_formula("mean |g1 * g2| over all but the last position, g1 = grad log p(y), g2 = grad g1")
    .with_description(
        "Second-order structure of the true-token log-probability along the sequence.",
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationStats {
    pub auc: f64,
    /// `None` when both classes have zero variance and equal means.
    pub cohens_d: Option<f64>,
    pub welch_p: f64,
}

pub fn cohens_d(members: &[f64], nonmembers: &[f64]) -> Option<f64> {
    let (m1, v1) = mean_var(members);
    let (m2, v2) = mean_var(nonmembers);
    let (n1, n2) = (members.len() as f64, nonmembers.len() as f64);
    let pooled = (((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / (n1 + n2 - 2.0)).sqrt();
    if pooled == 0.0 || !pooled.is_finite() {
        if m1 == m2 {
            return None;
        }
        return Some(if m1 > m2 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        });
    }
    Some((m1 - m2) / pooled)
}

/// Sample mean and unbiased variance.
fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Two-sided Welch t-test p-value, kept strictly positive.
pub fn welch_p(members: &[f64], nonmembers: &[f64]) -> f64 {
    let (m1, v1) = mean_var(members);
    let (m2, v2) = mean_var(nonmembers);
    let (n1, n2) = (members.len() as f64, nonmembers.len() as f64);
    let (a, b) = (v1 / n1, v2 / n2);
    let se2 = a + b;
    if se2 == 0.0 {
        return if m1 == m2 { 1.0 } else { f64::MIN_POSITIVE };
    }
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / (a * a / (n1 - 1.0).max(1.0) + b * b / (n2 - 1.0).max(1.0));
    let p = match StudentsT::new(0.0, 1.0, df) {
        Ok(dist) => 2.0 * dist.sf(t.abs()),
        Err(_) => 1.0,
    };
    p.clamp(f64::MIN_POSITIVE, 1.0)
}

pub fn separation_from_scores(
    members: &[f64],
    nonmembers: &[f64],
    direction: Direction,
) -> Result<SeparationStats, SimError> {
    let set = ScoreSet::new(members.to_vec(), nonmembers.to_vec(), direction)?;
    Ok(SeparationStats {
        auc: roc_auc(&set),
        cohens_d: cohens_d(members, nonmembers),
        welch_p: welch_p(members, nonmembers),
    })
}

/// Raw per-class scores of one strategy.
pub fn class_scores(
    strategy: &CompiledStrategy,
    dataset: &Dataset,
) -> Result<(Vec<f64>, Vec<f64>), SimError> {
    let matrix = score_matrix(std::slice::from_ref(strategy), dataset);
    let (mut members, mut nonmembers) = (Vec::new(), Vec::new());
    for (row, rec) in matrix.iter().zip(&dataset.records) {
        let s = match row[0] {
            ScoreOutcome::NotApplicable | ScoreOutcome::NonFinite => {
                return Err(SimError::Unscorable {
                    name: strategy.spec.name.clone(),
                    reason: format!("{:?} on {}", row[0], rec.sample_id),
                })
            }
            other => other.score().expect("scored outcome"),
        };
        if rec.label.is_member() {
            members.push(s);
        } else {
            nonmembers.push(s);
        }
    }
    Ok((members, nonmembers))
}

/// AUC (with the declared direction), Cohen's d and Welch p of a metric.
pub fn separation(
    strategy: &CompiledStrategy,
    dataset: &Dataset,
) -> Result<SeparationStats, SimError> {
    let (m, n) = class_scores(strategy, dataset)?;
    separation_from_scores(&m, &n, strategy.spec.direction)
}

/// Per-position `max_{j != y} z_j - z_y` for every sample, from the
/// unboosted logits. A member's gap at boost `delta` is
/// `mean(relu(m - delta))`; a non-member's is `mean(relu(m))`.
pub struct GapMargins {
    pub n_member: usize,
    pub margins: Vec<Vec<f64>>,
}

impl GapMargins {
    pub fn compute(cfg: &SimConfig) -> Self {
        let margins = (0..cfg.total())
            .into_par_iter()
            .map(|idx| {
                let (targets, logits) = raw_sample(cfg, idx);
                targets
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| {
                        let row = &logits[i * cfg.vocab..(i + 1) * cfg.vocab];
                        let other = row
                            .iter()
                            .enumerate()
                            .filter(|&(j, _)| j != y as usize)
                            .map(|(_, &z)| z)
                            .fold(f32::NEG_INFINITY, f32::max);
                        other as f64 - row[y as usize] as f64
                    })
                    .collect()
            })
            .collect();
        Self {
            n_member: cfg.n_member,
            margins,
        }
    }

    /// Gap-metric AUC (lower for members) at boost `delta`.
    pub fn auc(&self, delta: f64) -> f64 {
        let gap =
            |m: &[f64], d: f64| m.iter().map(|&x| (x - d).max(0.0)).sum::<f64>() / m.len() as f64;
        let members: Vec<f64> = self.margins[..self.n_member]
            .iter()
            .map(|m| gap(m, delta))
            .collect();
        let nonmembers: Vec<f64> = self.margins[self.n_member..]
            .iter()
            .map(|m| gap(m, 0.0))
            .collect();
        let set = ScoreSet::new(members, nonmembers, Direction::LowerForMembers)
            .expect("both classes are non-empty");
        roc_auc(&set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub target_auc: f64,
    pub delta: f64,
    /// Gap AUC at `delta` on the calibration sample.
    pub auc: f64,
    /// (delta, auc) pairs in evaluation order.
    pub trace: Vec<(f64, f64)>,
    pub clamped: bool,
    pub seed: u64,
}

/// Bisects `delta` in [0, 10] until the gap metric's AUC is within
/// `tolerance` of `target_auc`. `base.delta` is ignored.
pub fn calibrate_delta(
    target_auc: f64,
    base: &SimConfig,
    tolerance: f64,
) -> Result<Calibration, SimError> {
    base.validate()?;
    let margins = GapMargins::compute(base);
    let (mut lo, mut hi) = DELTA_BRACKET;
    let mut trace = vec![(lo, margins.auc(lo)), (hi, margins.auc(hi))];
    let finish = |delta: f64,
                  auc: f64,
                  clamped: bool,
                  trace: Vec<(f64, f64)>|
     -> Result<Calibration, SimError> {
        let mut sorted = trace.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if sorted.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(SimError::NotMonotone);
        }
        Ok(Calibration {
            target_auc,
            delta,
            auc,
            trace,
            clamped,
            seed: base.seed,
        })
    };
    let (auc_lo, auc_hi) = (trace[0].1, trace[1].1);
    if target_auc <= auc_lo {
        return finish(lo, auc_lo, false, trace);
    }
    if target_auc > auc_hi {
        warn!("target AUC {target_auc} is above {auc_hi} reached at delta={hi}; clamping");
        return finish(hi, auc_hi, true, trace);
    }
    let mut best = (hi, auc_hi);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let auc = margins.auc(mid);
        trace.push((mid, auc));
        if (auc - target_auc).abs() < (best.1 - target_auc).abs() {
            best = (mid, auc);
        }
        if (auc - target_auc).abs() <= tolerance / 4.0 || hi - lo < 1e-9 {
            break;
        }
        if auc < target_auc {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    finish(best.0, best.1, false, trace)
}
