//! Rank metrics, the composite score and whole-dataset strategy evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{self, DslError, Program};
use crate::logits::{derive_distributions, Dataset, Distributions};
use crate::metrics::BaselineKind;
use crate::strategy::{Direction, ScoreOutcome, StrategySpec};

/// A strategy fails when more than this fraction of records are non-finite.
pub const MAX_NON_FINITE_FRACTION: f64 = 0.10;
pub const DEFAULT_FPR_CAP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("score set needs at least one member and one non-member")]
    EmptyClass,
    #[error("score set contains NaN")]
    NanScore,
    #[error("need at least 2 members and 2 non-members to split, got {members} and {nonmembers}")]
    TooFewSamples { members: usize, nonmembers: usize },
    #[error("holdout fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("weights must be finite and non-negative")]
    BadWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
    pub direction: Direction,
}

impl ScoreSet {
    pub fn new(
        member_scores: Vec<f64>,
        nonmember_scores: Vec<f64>,
        direction: Direction,
    ) -> Result<Self, EvalError> {
        if member_scores.is_empty() || nonmember_scores.is_empty() {
            return Err(EvalError::EmptyClass);
        }
        if member_scores
            .iter()
            .chain(&nonmember_scores)
            .any(|x| x.is_nan())
        {
            return Err(EvalError::NanScore);
        }
        Ok(Self {
            member_scores,
            nonmember_scores,
            direction,
        })
    }

    /// Negates lower-for-members scores so that larger always means member.
    pub fn orient(mut self) -> Self {
        if self.direction == Direction::LowerForMembers {
            self.member_scores.iter_mut().for_each(|x| *x = -*x);
            self.nonmember_scores.iter_mut().for_each(|x| *x = -*x);
            self.direction = Direction::HigherForMembers;
        }
        self
    }

    fn oriented(&self) -> (Vec<f64>, Vec<f64>) {
        let o = self.clone().orient();
        (o.member_scores, o.nonmember_scores)
    }

    /// (score, is_member), highest score first.
    fn sorted_desc(&self) -> Vec<(f64, bool)> {
        let (m, n) = self.oriented();
        let mut all: Vec<(f64, bool)> = m
            .into_iter()
            .map(|s| (s, true))
            .chain(n.into_iter().map(|s| (s, false)))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0));
        all
    }
}

/// Walks distinct thresholds from high to low. After each group of equal
/// scores `v`, the counts are those of the rule `score >= v`, which is the
/// same as `score > tau` for any tau just below `v`.
fn sweep(set: &ScoreSet, mut visit: impl FnMut(usize, usize, f64, f64)) {
    let all = set.sorted_desc();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let next = all.get(i).map(|x| x.0).unwrap_or(f64::NEG_INFINITY);
        let tau = if next == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            (v + next) / 2.0
        };
        visit(tp, fp, tau, v);
    }
}

/// Mann-Whitney AUC via average ranks.
pub fn roc_auc(set: &ScoreSet) -> f64 {
    let (m, n) = set.oriented();
    let mut all: Vec<(f64, bool)> = m
        .iter()
        .map(|&s| (s, true))
        .chain(n.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (nm, nn) = (m.len() as f64, n.len() as f64);
    (rank_sum - nm * (nm + 1.0) / 2.0) / (nm * nn)
}

/// Accuracy at the threshold maximizing Youden's J, with decisions
/// `score > tau`. Ties in J keep the larger threshold.
pub fn accuracy_youden(set: &ScoreSet) -> (f64, f64) {
    let nm = set.member_scores.len();
    let nn = set.nonmember_scores.len();
    let total = (nm + nn) as f64;
    let top = set
        .sorted_desc()
        .first()
        .map(|x| x.0)
        .unwrap_or(f64::INFINITY);
    // Predict nothing: J = 0.
    let mut best = (0.0, nn as f64 / total, top);
    sweep(set, |tp, fp, tau, _| {
        let j = tp as f64 / nm as f64 - fp as f64 / nn as f64;
        if j > best.0 {
            best = (j, (tp + nn - fp) as f64 / total, tau);
        }
    });
    (best.1, best.2)
}

/// Largest empirical TPR over thresholds whose FPR is at most `fpr_cap`.
pub fn tpr_at_fpr(set: &ScoreSet, fpr_cap: f64) -> f64 {
    let nm = set.member_scores.len() as f64;
    let nn = set.nonmember_scores.len() as f64;
    let mut best = 0.0_f64;
    sweep(set, |tp, fp, _, _| {
        if fp as f64 / nn <= fpr_cap {
            best = best.max(tp as f64 / nm);
        }
    });
    best
}

/// Empirical ROC points (fpr, tpr) from (0, 0) to (1, 1).
pub fn roc_curve(set: &ScoreSet) -> Vec<(f64, f64)> {
    let nm = set.member_scores.len() as f64;
    let nn = set.nonmember_scores.len() as f64;
    let mut pts = vec![(0.0, 0.0)];
    sweep(set, |tp, fp, _, _| {
        pts.push((fp as f64 / nn, tp as f64 / nm))
    });
    pts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalTuple {
    pub auc: f64,
    pub acc: f64,
    pub tpr_at_5fpr: f64,
}

impl EvalTuple {
    pub fn compute(set: &ScoreSet) -> Self {
        Self {
            auc: roc_auc(set),
            acc: accuracy_youden(set).0,
            tpr_at_5fpr: tpr_at_fpr(set, DEFAULT_FPR_CAP),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w_auc: f64,
    pub w_acc: f64,
    pub w_tpr: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            w_auc: 0.6,
            w_acc: 0.3,
            w_tpr: 0.1,
        }
    }
}

impl Weights {
    pub fn new(w_auc: f64, w_acc: f64, w_tpr: f64) -> Result<Self, EvalError> {
        let w = Self {
            w_auc,
            w_acc,
            w_tpr,
        };
        if [w_auc, w_acc, w_tpr]
            .iter()
            .all(|x| x.is_finite() && *x >= 0.0)
        {
            Ok(w)
        } else {
            Err(EvalError::BadWeights)
        }
    }
}

pub fn composite_q(r: &EvalTuple, w: &Weights) -> f64 {
    w.w_auc * r.auc + w.w_acc * r.acc + w.w_tpr * r.tpr_at_5fpr
}

/// How a strategy turns a record into a score.
#[derive(Debug, Clone)]
pub enum Scorer {
    Program(Program),
    Native(BaselineKind),
}

impl Scorer {
    pub fn score(&self, d: &Distributions) -> ScoreOutcome {
        match self {
            Scorer::Program(p) => dsl::evaluate(p, d),
            Scorer::Native(kind) => match kind.compute(d) {
                Ok(v) => ScoreOutcome::from_value(v),
                Err(_) => ScoreOutcome::NotApplicable,
            },
        }
    }
}

/// A strategy ready to run.
#[derive(Debug, Clone)]
pub struct CompiledStrategy {
    pub spec: StrategySpec,
    pub scorer: Scorer,
}

impl CompiledStrategy {
    pub fn compile(spec: StrategySpec) -> Result<Self, DslError> {
        let program = Program::compile(&spec.code)?;
        Ok(Self {
            spec,
            scorer: Scorer::Program(program),
        })
    }

    pub fn native(kind: BaselineKind) -> Self {
        Self {
            spec: kind.spec(),
            scorer: Scorer::Native(kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EvalStatus {
    Ok,
    Failed { reason: String },
    NotApplicable { reason: String },
}

/// One strategy's evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub name: String,
    pub r: EvalTuple,
    pub q: f64,
    pub status: EvalStatus,
    pub n_member: usize,
    pub n_nonmember: usize,
    /// Oriented scores as used for the metrics.
    pub scores: Option<ScoreSet>,
}

impl EvalResult {
    pub fn failed(&self) -> bool {
        self.status != EvalStatus::Ok
    }

    fn unscored(name: &str, status: EvalStatus, nm: usize, nn: usize) -> Self {
        Self {
            name: name.to_string(),
            r: EvalTuple {
                auc: 0.0,
                acc: 0.0,
                tpr_at_5fpr: 0.0,
            },
            q: 0.0,
            status,
            n_member: nm,
            n_nonmember: nn,
            scores: None,
        }
    }

    pub fn to_json_line(&self) -> ResultLine {
        ResultLine {
            name: self.name.clone(),
            auc: self.r.auc,
            accuracy: self.r.acc,
            tpr_at_5_fpr: self.r.tpr_at_5fpr,
            q: self.q,
            failed: self.failed(),
            n_member: self.n_member,
            n_nonmember: self.n_nonmember,
            reason: match &self.status {
                EvalStatus::Ok => None,
                EvalStatus::Failed { reason } | EvalStatus::NotApplicable { reason } => {
                    Some(reason.clone())
                }
            },
        }
    }
}

/// The external per-strategy result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub name: String,
    pub auc: f64,
    pub accuracy: f64,
    pub tpr_at_5_fpr: f64,
    pub q: f64,
    pub failed: bool,
    pub n_member: usize,
    pub n_nonmember: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Scores every record with every strategy. Distributions are derived once
/// per record; records are processed in parallel.
pub fn score_matrix(strategies: &[CompiledStrategy], dataset: &Dataset) -> Vec<Vec<ScoreOutcome>> {
    dataset
        .records
        .par_iter()
        .map(|rec| match derive_distributions(rec) {
            Ok(d) => strategies.iter().map(|s| s.scorer.score(&d)).collect(),
            Err(_) => vec![ScoreOutcome::NonFinite; strategies.len()],
        })
        .collect()
}

fn summarize(
    strategy: &CompiledStrategy,
    outcomes: impl Iterator<Item = (ScoreOutcome, bool)>,
    weights: &Weights,
) -> EvalResult {
    let name = &strategy.spec.name;
    let (mut members, mut nonmembers) = (Vec::new(), Vec::new());
    let (mut total, mut non_finite, mut not_applicable) = (0usize, 0usize, 0usize);
    for (outcome, is_member) in outcomes {
        total += 1;
        match outcome {
            ScoreOutcome::NotApplicable => not_applicable += 1,
            ScoreOutcome::NonFinite => non_finite += 1,
            other => {
                let s = other.score().expect("scored outcome");
                if is_member {
                    members.push(s);
                } else {
                    nonmembers.push(s);
                }
            }
        }
    }
    let (nm, nn) = (members.len(), nonmembers.len());
    if not_applicable > 0 {
        let reason = format!("needs target ids; {not_applicable} of {total} records carry none");
        return EvalResult::unscored(name, EvalStatus::NotApplicable { reason }, nm, nn);
    }
    if non_finite as f64 > MAX_NON_FINITE_FRACTION * total as f64 {
        let reason = format!("non-finite score on {non_finite} of {total} records");
        return EvalResult::unscored(name, EvalStatus::Failed { reason }, nm, nn);
    }
    let set = match ScoreSet::new(members, nonmembers, strategy.spec.direction) {
        Ok(set) => set.orient(),
        Err(e) => {
            let reason = e.to_string();
            return EvalResult::unscored(name, EvalStatus::Failed { reason }, nm, nn);
        }
    };
    let r = EvalTuple::compute(&set);
    EvalResult {
        name: name.clone(),
        r,
        q: composite_q(&r, weights),
        status: EvalStatus::Ok,
        n_member: nm,
        n_nonmember: nn,
        scores: Some(set),
    }
}

pub fn evaluate_strategies(
    strategies: &[CompiledStrategy],
    dataset: &Dataset,
    weights: &Weights,
) -> Vec<EvalResult> {
    let matrix = score_matrix(strategies, dataset);
    strategies
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let outcomes = matrix
                .iter()
                .zip(&dataset.records)
                .map(|(row, rec)| (row[k], rec.label.is_member()));
            summarize(s, outcomes, weights)
        })
        .collect()
}

pub fn evaluate_strategy(
    strategy: &CompiledStrategy,
    dataset: &Dataset,
    weights: &Weights,
) -> EvalResult {
    evaluate_strategies(std::slice::from_ref(strategy), dataset, weights)
        .pop()
        .expect("one result per strategy")
}

/// Stratified split into (validation, holdout). `fraction` goes to
/// validation.
pub fn split_holdout(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), EvalError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EvalError::BadFraction(fraction));
    }
    let (members, nonmembers) = dataset.class_counts();
    if members < 2 || nonmembers < 2 {
        return Err(EvalError::TooFewSamples {
            members,
            nonmembers,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut val, mut hold) = (Vec::new(), Vec::new());
    for want_member in [true, false] {
        let mut idx: Vec<usize> = (0..dataset.records.len())
            .filter(|&i| dataset.records[i].label.is_member() == want_member)
            .collect();
        idx.shuffle(&mut rng);
        let take = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..take]);
        hold.extend_from_slice(&idx[take..]);
    }
    val.sort_unstable();
    hold.sort_unstable();
    Ok((dataset.subset(&val), dataset.subset(&hold)))
}
