//! Handcrafted token-level membership metrics.
//!
//! Every metric works on the 64-bit [`Distributions`] of one record and
//! returns a raw score. Orientation is not applied here: each baseline
//! carries a [`Direction`] and the evaluation engine orients scores.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

use crate::logits::Distributions;
use crate::strategy::{Direction, StrategySpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("{metric} needs ground-truth target ids, which this slice does not carry")]
    NotApplicable { metric: &'static str },
    #[error("unsupported Rényi order {0}")]
    UnsupportedAlpha(f64),
    #[error("vocabulary of size {0} is too small for this metric")]
    VocabTooSmall(usize),
}

/// Rényi orders used by the baseline grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RenyiOrder {
    Half,
    One,
    Two,
    Infinity,
}

impl RenyiOrder {
    pub const ALL: [RenyiOrder; 4] = [
        RenyiOrder::Half,
        RenyiOrder::One,
        RenyiOrder::Two,
        RenyiOrder::Infinity,
    ];

    pub fn value(self) -> f64 {
        match self {
            RenyiOrder::Half => 0.5,
            RenyiOrder::One => 1.0,
            RenyiOrder::Two => 2.0,
            RenyiOrder::Infinity => f64::INFINITY,
        }
    }

    pub fn from_value(alpha: f64) -> Result<Self, MetricError> {
        match alpha {
            a if a == 0.5 => Ok(RenyiOrder::Half),
            a if a == 1.0 => Ok(RenyiOrder::One),
            a if a == 2.0 => Ok(RenyiOrder::Two),
            a if a == f64::INFINITY => Ok(RenyiOrder::Infinity),
            a => Err(MetricError::UnsupportedAlpha(a)),
        }
    }
}

impl fmt::Display for RenyiOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RenyiOrder::Infinity => f.write_str("inf"),
            other => write!(f, "{}", other.value()),
        }
    }
}

/// How per-token values are pooled into one score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolingRule {
    /// Mean of the lowest `k`% values (at least one).
    MinK(f64),
    /// Mean of the highest `k`% values (at least one).
    MaxK(f64),
    Mean,
    SingleMin,
    SingleMax,
}

impl PoolingRule {
    pub fn apply(&self, values: &[f64]) -> f64 {
        match *self {
            PoolingRule::MinK(k) => extreme_k_mean(values, k, false),
            PoolingRule::MaxK(k) => extreme_k_mean(values, k, true),
            PoolingRule::Mean => mean(values),
            PoolingRule::SingleMin => values.iter().copied().fold(f64::INFINITY, f64::min),
            PoolingRule::SingleMax => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Nearest-rank selection count: `max(1, floor(k/100 * n))`, capped at `n`.
pub fn selection_count(k_percent: f64, n: usize) -> usize {
    let raw = (k_percent * n as f64 / 100.0).floor();
    (raw.max(1.0) as usize).min(n.max(1))
}

/// Mean of the `k`% smallest (or largest) values. Uses partial selection,
/// never a full sort; ties are ordered by position.
pub fn extreme_k_mean(values: &[f64], k_percent: f64, largest: bool) -> f64 {
    extreme_k_mean_by(values, k_percent, largest, |a, b| a.total_cmp(b))
}

pub(crate) fn extreme_k_mean_by<F>(values: &[f64], k_percent: f64, largest: bool, mut cmp: F) -> f64
where
    F: FnMut(&f64, &f64) -> Ordering,
{
    if values.is_empty() {
        return f64::NAN;
    }
    let count = selection_count(k_percent, values.len());
    let mut keyed: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
    if count < keyed.len() {
        keyed.select_nth_unstable_by(count - 1, |a, b| {
            let ord = if largest {
                cmp(&b.0, &a.0)
            } else {
                cmp(&a.0, &b.0)
            };
            ord.then(a.1.cmp(&b.1))
        });
    }
    keyed[..count].iter().map(|(v, _)| v).sum::<f64>() / count as f64
}

/// Largest and second-largest value in one pass.
pub fn top_two<I: IntoIterator<Item = f64>>(values: I) -> (f64, f64) {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for x in values {
        if x > first {
            second = first;
            first = x;
        } else if x > second {
            second = x;
        }
    }
    (first, second)
}

fn require_targets(d: &Distributions, metric: &'static str) -> Result<(), MetricError> {
    if d.has_targets {
        Ok(())
    } else {
        Err(MetricError::NotApplicable { metric })
    }
}

/// `exp(mean(-log p(y_i)))`.
pub fn perplexity(d: &Distributions) -> Result<f64, MetricError> {
    require_targets(d, "perplexity")?;
    Ok((-mean(&d.target_log_probs())).exp())
}

/// Mean over positions of `max log p - second max log p`.
pub fn max_prob_gap(d: &Distributions) -> Result<f64, MetricError> {
    if d.vocab < 2 {
        return Err(MetricError::VocabTooSmall(d.vocab));
    }
    let gaps: Vec<f64> = (0..d.seq_len)
        .map(|i| {
            let (a, b) = top_two(d.log_prob_row(i).iter().copied());
            a - b
        })
        .collect();
    Ok(mean(&gaps))
}

/// Mean of the lowest `k`% target log-probabilities; `k = 0` is the single
/// minimum.
pub fn min_k_prob(d: &Distributions, k_percent: f64) -> Result<f64, MetricError> {
    require_targets(d, "min_k_prob")?;
    Ok(extreme_k_mean(&d.target_log_probs(), k_percent, false))
}

/// Rényi entropy of a single distribution given its probabilities and
/// log-probabilities.
pub fn renyi_entropy(probs: &[f64], log_probs: &[f64], order: RenyiOrder) -> f64 {
    match order {
        RenyiOrder::One => -probs
            .iter()
            .zip(log_probs)
            .filter(|(&p, _)| p > 0.0)
            .map(|(p, lp)| p * lp)
            .sum::<f64>(),
        RenyiOrder::Infinity => -log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        RenyiOrder::Half | RenyiOrder::Two => {
            let alpha = order.value();
            let shift = alpha * log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = log_probs.iter().map(|lp| (alpha * lp - shift).exp()).sum();
            (shift + sum.ln()) / (1.0 - alpha)
        }
    }
}

/// Per-token Rényi entropies pooled with the Max-k% rule.
pub fn renyi_entropy_metric(
    d: &Distributions,
    alpha: f64,
    pool: PoolingRule,
) -> Result<f64, MetricError> {
    let order = RenyiOrder::from_value(alpha)?;
    let per_token: Vec<f64> = (0..d.seq_len)
        .map(|i| renyi_entropy(d.prob_row(i), d.log_prob_row(i), order))
        .collect();
    Ok(pool.apply(&per_token))
}

/// Target-aware modified Rényi entropy of one position.
///
/// With `e = |alpha - 1|`:
/// `-(1/e) [ (1-p_y)(p_y^e - 1) + sum_{j != y} p_j ((1-p_j)^e - 1) ]`,
/// which tends to the modified Shannon entropy
/// `-(1-p_y) log p_y - sum_{j != y} p_j log(1-p_j)` as `alpha -> 1`.
pub fn modified_renyi_entropy(probs: &[f64], log_probs: &[f64], target: usize, alpha: f64) -> f64 {
    // log(1 - p) from the log-probability, exact for tiny and near-one p.
    let log_complement = |lp: f64| (-lp.exp_m1()).ln();
    let p_y = probs[target];
    let lp_y = log_probs[target];
    let others = probs
        .iter()
        .zip(log_probs)
        .enumerate()
        .filter(|(j, (&p, _))| *j != target && p > 0.0);
    if alpha == 1.0 {
        let rest: f64 = others.map(|(_, (p, lp))| p * log_complement(*lp)).sum();
        -(1.0 - p_y) * lp_y - rest
    } else {
        let e = (alpha - 1.0).abs();
        let head = (1.0 - p_y) * (e * lp_y).exp_m1();
        let rest: f64 = others
            .map(|(_, (p, lp))| p * (e * log_complement(*lp)).exp_m1())
            .sum();
        -(head + rest) / e
    }
}

pub fn mod_renyi_metric(d: &Distributions, alpha: f64) -> Result<f64, MetricError> {
    require_targets(d, "mod_renyi")?;
    if !(alpha == 0.5 || alpha == 1.0 || alpha == 2.0) {
        return Err(MetricError::UnsupportedAlpha(alpha));
    }
    let per_token: Vec<f64> = (0..d.seq_len)
        .map(|i| {
            modified_renyi_entropy(
                d.prob_row(i),
                d.log_prob_row(i),
                d.targets[i] as usize,
                alpha,
            )
        })
        .collect();
    Ok(mean(&per_token))
}

/// The handcrafted baseline families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineKind {
    Perplexity,
    MaxProbGap,
    MinK { k: f64 },
    Renyi { order: RenyiOrder, k: f64 },
    ModRenyi { alpha: f64 },
}

impl BaselineKind {
    pub fn compute(&self, d: &Distributions) -> Result<f64, MetricError> {
        match *self {
            BaselineKind::Perplexity => perplexity(d),
            BaselineKind::MaxProbGap => max_prob_gap(d),
            BaselineKind::MinK { k } => min_k_prob(d, k),
            BaselineKind::Renyi { order, k } => {
                renyi_entropy_metric(d, order.value(), PoolingRule::MaxK(k))
            }
            BaselineKind::ModRenyi { alpha } => mod_renyi_metric(d, alpha),
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            BaselineKind::MaxProbGap | BaselineKind::MinK { .. } => Direction::HigherForMembers,
            BaselineKind::Perplexity
            | BaselineKind::Renyi { .. }
            | BaselineKind::ModRenyi { .. } => Direction::LowerForMembers,
        }
    }

    /// Whether the metric reads the ground-truth target ids.
    pub fn uses_targets(&self) -> bool {
        !matches!(self, BaselineKind::MaxProbGap | BaselineKind::Renyi { .. })
    }

    pub fn name(&self) -> String {
        match self {
            BaselineKind::Perplexity => "perplexity".into(),
            BaselineKind::MaxProbGap => "max_prob_gap".into(),
            BaselineKind::MinK { k } => format!("min_k_{k}"),
            BaselineKind::Renyi { order, k } => format!("renyi_{order}_max_{k}"),
            BaselineKind::ModRenyi { alpha } => format!("mod_renyi_{alpha}"),
        }
    }

    /// The same metric written in the strategy DSL.
    pub fn dsl(&self) -> String {
        match *self {
            BaselineKind::Perplexity => "exp(-mean(TLP))".into(),
            BaselineKind::MaxProbGap => "mean(max_v(LP) - max2_v(LP))".into(),
            BaselineKind::MinK { k } => format!("min_k_mean(TLP, {k})"),
            BaselineKind::Renyi { order, k } => {
                let entropy = match order {
                    RenyiOrder::One => "entropy_v(P)".to_string(),
                    other => format!("renyi_v(P, {other})"),
                };
                format!("max_k_mean({entropy}, {k})")
            }
            BaselineKind::ModRenyi { alpha } if alpha == 1.0 => {
                "mean(-(1 - TP) * TLP - sum_v(P * log(1 - P)) + TP * log(1 - TP))".into()
            }
            BaselineKind::ModRenyi { alpha } => {
                let e = (alpha - 1.0).abs();
                format!(
                    "mean(-((1 - TP) * (pow(TP, {e}) - 1) + sum_v(P * (pow(1 - P, {e}) - 1)) \
                     - TP * (pow(1 - TP, {e}) - 1)) / {e})"
                )
            }
        }
    }

    fn formula(&self) -> String {
        match self {
            BaselineKind::Perplexity => "exp(-(1/N) sum_i log p(y_i))".into(),
            BaselineKind::MaxProbGap => "(1/N) sum_i (max_j log p_ij - max2_j log p_ij)".into(),
            BaselineKind::MinK { k } => format!("mean of lowest {k}% of log p(y_i)"),
            BaselineKind::Renyi { order, k } => {
                format!("mean of highest {k}% of H_{order}(p_i)")
            }
            BaselineKind::ModRenyi { alpha } => format!("(1/N) sum_i ModH_{alpha}(p_i, y_i)"),
        }
    }

    fn description(&self) -> &'static str {
        match self {
            BaselineKind::Perplexity => {
                "Exponentiated mean negative log-likelihood of the targets."
            }
            BaselineKind::MaxProbGap => "Confidence margin between the top two predictions.",
            BaselineKind::MinK { .. } => {
                "Average log-likelihood of the least likely target tokens."
            }
            BaselineKind::Renyi { .. } => {
                "Rényi entropy of the predictive distribution, Max-k% pooled."
            }
            BaselineKind::ModRenyi { .. } => "Target-aware modified Rényi entropy.",
        }
    }

    pub fn spec(&self) -> StrategySpec {
        StrategySpec::new(self.name(), self.dsl(), self.direction())
            .with_formula(self.formula())
            .with_description(self.description())
    }
}

/// The full baseline grid in table order.
pub fn baseline_kinds() -> Vec<BaselineKind> {
    let mut kinds = vec![BaselineKind::Perplexity, BaselineKind::MaxProbGap];
    kinds.extend([0.0, 10.0, 20.0].map(|k| BaselineKind::MinK { k }));
    for order in RenyiOrder::ALL {
        kinds.extend([0.0, 10.0, 100.0].map(|k| BaselineKind::Renyi { order, k }));
    }
    kinds.extend([0.5, 1.0, 2.0].map(|alpha| BaselineKind::ModRenyi { alpha }));
    kinds
}

pub fn list_baselines() -> Vec<StrategySpec> {
    baseline_kinds().iter().map(BaselineKind::spec).collect()
}
