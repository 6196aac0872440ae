//! The append-only strategy archive, percentile categories and the
//! sliding context window.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalTuple;
use crate::strategy::StrategySpec;

pub const DEFAULT_WINDOW: usize = 5;
pub const STRONG_PERCENTILE: u32 = 70;
pub const WEAK_PERCENTILE: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Strong,
    Mid,
    Weak,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Strong => "strong",
            Category::Mid => "mid",
            Category::Weak => "weak",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub spec: StrategySpec,
    pub r: EvalTuple,
    pub q: f64,
    pub category: Category,
    pub round: u32,
    #[serde(default)]
    pub analysis: String,
    #[serde(default)]
    pub failed: bool,
}

/// One evaluated candidate before categorization.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub spec: StrategySpec,
    pub r: EvalTuple,
    pub q: f64,
    pub failed: bool,
}

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("strategy `{name}` already archived for round {round}")]
    Duplicate { name: String, round: u32 },
    #[error("library line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 * n)`, at least the first.
pub fn nearest_rank(sorted: &[f64], percentile: u32) -> f64 {
    let n = sorted.len();
    let rank = (percentile as usize * n).div_ceil(100).max(1);
    sorted[rank - 1]
}

/// (p70, p30) thresholds over a round's scores.
pub fn thresholds(qs: &[f64]) -> (f64, f64) {
    let mut sorted = qs.to_vec();
    sorted.sort_by(f64::total_cmp);
    (
        nearest_rank(&sorted, STRONG_PERCENTILE),
        nearest_rank(&sorted, WEAK_PERCENTILE),
    )
}

pub fn category_for(q: f64, strong_at: f64, weak_at: f64) -> Category {
    // Strong is checked first so degenerate rounds keep a strong exemplar.
    if q >= strong_at {
        Category::Strong
    } else if q <= weak_at {
        Category::Weak
    } else {
        Category::Mid
    }
}

/// Categories for each q, in input order.
pub fn categories(qs: &[f64]) -> Vec<Category> {
    if qs.is_empty() {
        return Vec::new();
    }
    let (strong_at, weak_at) = thresholds(qs);
    qs.iter()
        .map(|&q| category_for(q, strong_at, weak_at))
        .collect()
}

/// Categorizes one round's candidates against that round's percentiles.
pub fn categorize(round_entries: Vec<Scored>, round: u32) -> Vec<LibraryEntry> {
    let qs: Vec<f64> = round_entries.iter().map(|e| e.q).collect();
    round_entries
        .into_iter()
        .zip(categories(&qs))
        .map(|(e, category)| LibraryEntry {
            spec: e.spec,
            r: e.r,
            q: e.q,
            category,
            round,
            analysis: String::new(),
            failed: e.failed,
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextWindow {
    /// Highest q first.
    pub strong: Vec<LibraryEntry>,
    /// Lowest q first.
    pub weak: Vec<LibraryEntry>,
}

impl ContextWindow {
    pub fn is_empty(&self) -> bool {
        self.strong.is_empty() && self.weak.is_empty()
    }

    pub fn len(&self) -> usize {
        self.strong.len() + self.weak.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = &LibraryEntry> {
        self.strong.iter().chain(&self.weak)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Library {
    entries: Vec<LibraryEntry>,
}

impl Library {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Round number that follows the newest archived round.
    pub fn next_round(&self) -> u32 {
        self.entries
            .iter()
            .map(|e| e.round)
            .max()
            .map_or(1, |r| r + 1)
    }

    pub fn best(&self) -> Option<&LibraryEntry> {
        self.entries.iter().max_by(|a, b| {
            a.q.total_cmp(&b.q)
                .then_with(|| b.round.cmp(&a.round))
                .then_with(|| b.spec.name.cmp(&a.spec.name))
        })
    }

    /// Appends entries. Nothing is inserted if any (name, round) pair is
    /// already present.
    pub fn insert(&mut self, entries: Vec<LibraryEntry>) -> Result<(), LibraryError> {
        let mut seen: HashSet<(&str, u32)> = self
            .entries
            .iter()
            .map(|e| (e.spec.name.as_str(), e.round))
            .collect();
        for e in &entries {
            if !seen.insert((e.spec.name.as_str(), e.round)) {
                return Err(LibraryError::Duplicate {
                    name: e.spec.name.clone(),
                    round: e.round,
                });
            }
        }
        self.entries.extend(entries);
        Ok(())
    }

    /// Top strategies by q, ties to the earlier round then the name.
    pub fn top(&self, n: usize) -> Vec<&LibraryEntry> {
        let mut all: Vec<&LibraryEntry> = self.entries.iter().collect();
        all.sort_by(|a, b| rank_desc(a, b));
        all.truncate(n);
        all
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("library entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LibraryError> {
        Self::read(text.as_bytes())
    }

    fn read(reader: impl io::Read) -> Result<Self, LibraryError> {
        let mut lib = Library::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LibraryEntry =
                serde_json::from_str(&line).map_err(|e| LibraryError::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            lib.insert(vec![entry])
                .map_err(|e| LibraryError::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                })?;
        }
        Ok(lib)
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), LibraryError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LibraryError> {
        Self::read(fs::File::open(path)?)
    }
}

fn rank_desc(a: &LibraryEntry, b: &LibraryEntry) -> std::cmp::Ordering {
    b.q.total_cmp(&a.q)
        .then(a.round.cmp(&b.round))
        .then_with(|| a.spec.name.cmp(&b.spec.name))
}

fn rank_asc(a: &LibraryEntry, b: &LibraryEntry) -> std::cmp::Ordering {
    a.q.total_cmp(&b.q)
        .then(a.round.cmp(&b.round))
        .then_with(|| a.spec.name.cmp(&b.spec.name))
}

/// The context subset shown to the generator: three strong and two weak
/// entries from the whole archive, or the whole archive when it fits.
pub fn select_context(library: &Library, w: usize) -> ContextWindow {
    let m = library.len().min(w);
    let n_weak = m * 2 / 5;
    let n_strong = m - n_weak;
    let mut by_q: Vec<&LibraryEntry> = library.entries.iter().collect();
    by_q.sort_by(|a, b| rank_desc(a, b));
    let strong: Vec<LibraryEntry> = by_q[..n_strong].iter().map(|e| (*e).clone()).collect();
    let mut rest: Vec<&LibraryEntry> = by_q[n_strong..].to_vec();
    rest.sort_by(|a, b| rank_asc(a, b));
    let weak = rest[..n_weak].iter().map(|e| (*e).clone()).collect();
    ContextWindow { strong, weak }
}

fn fmt_metric(x: f64) -> String {
    let s = format!("{x:.5}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.into()
    }
}

/// Human-readable record for one entry.
pub fn entry_markdown(index: usize, e: &LibraryEntry) -> String {
    let mut s = String::new();
    s.push_str(&format!("### Strategy {index}: {}\n\n", e.spec.name));
    s.push_str(&format!("*Category:* {}  \n", e.category));
    s.push_str(&format!("*Round:* {}\n\n", e.round));
    s.push_str("**Performance.**\n\n");
    s.push_str(&format!("- **Dynamic Score:** {}\n", fmt_metric(e.q)));
    s.push_str(&format!("- **AUC:** {}\n", fmt_metric(e.r.auc)));
    s.push_str(&format!("- **Accuracy:** {}\n", fmt_metric(e.r.acc)));
    s.push_str(&format!(
        "- **TPR@5%FPR:** {}\n\n",
        fmt_metric(e.r.tpr_at_5fpr)
    ));
    s.push_str("**Core Idea.**\n\n");
    let idea = if e.spec.description.is_empty() {
        "(none given)"
    } else {
        e.spec.description.as_str()
    };
    s.push_str(&format!("{idea} Expected to be {}.\n\n", e.spec.direction));
    s.push_str("**Formal Definition.**\n\n");
    let formula = if e.spec.formula.is_empty() {
        e.spec.code.as_str()
    } else {
        e.spec.formula.as_str()
    };
    s.push_str(&format!("```\n{formula}\n```\n\n"));
    s.push_str("**Executable Implementation.**\n\n");
    s.push_str(&format!("```\n{}\n```\n\n", e.spec.code));
    s.push_str("**Analysis.**\n\n");
    let analysis = if e.analysis.is_empty() {
        "(no analysis recorded)"
    } else {
        e.analysis.as_str()
    };
    s.push_str(analysis);
    s.push('\n');
    s
}

/// Markdown report of the given entries, separated by rules.
pub fn export_markdown<'a>(
    title: &str,
    entries: impl IntoIterator<Item = &'a LibraryEntry>,
) -> String {
    let mut out = format!("# {title}\n\n");
    for (i, e) in entries.into_iter().enumerate() {
        if i > 0 {
            out.push_str("\n---\n\n");
        }
        out.push_str(&entry_markdown(i + 1, e));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::Direction;
    use proptest::prelude::*;

    fn scored(name: &str, q: f64) -> Scored {
        Scored {
            spec: StrategySpec::new(name, "mean(TLP)", Direction::HigherForMembers),
            r: EvalTuple {
                auc: q,
                acc: q,
                tpr_at_5fpr: q,
            },
            q,
            failed: false,
        }
    }

    fn entry(name: &str, q: f64, round: u32) -> LibraryEntry {
        categorize(vec![scored(name, q)], round).pop().unwrap()
    }

    #[test]
    fn deciles_split_four_three_three() {
        let qs: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(thresholds(&qs), (0.7, 0.3));
        let cats = categories(&qs);
        let count = |c| cats.iter().filter(|&&x| x == c).count();
        assert_eq!(
            (
                count(Category::Strong),
                count(Category::Mid),
                count(Category::Weak)
            ),
            (4, 3, 3)
        );
        assert_eq!(cats[6], Category::Strong);
        assert_eq!(cats[2], Category::Weak);
    }

    #[test]
    fn degenerate_rounds_are_strong() {
        assert!(categories(&[0.4; 6]).iter().all(|&c| c == Category::Strong));
        assert_eq!(categories(&[0.1]), vec![Category::Strong]);
        assert!(categories(&[]).is_empty());
    }

    #[test]
    fn two_strategy_round() {
        assert_eq!(
            categories(&[0.69682, 0.4165]),
            vec![Category::Strong, Category::Weak]
        );
    }

    #[test]
    fn context_window_cases() {
        let mut lib = Library::new();
        assert!(select_context(&lib, 5).is_empty());
        lib.insert(
            (1..=4)
                .map(|i| entry(&format!("s{i}"), i as f64 / 10.0, 1))
                .collect(),
        )
        .unwrap();
        let w = select_context(&lib, 5);
        assert_eq!(w.len(), 4);
        let mut lib = Library::new();
        for i in 1..=20 {
            lib.insert(vec![entry(&format!("s{i:02}"), i as f64 / 100.0, i)])
                .unwrap();
        }
        let w = select_context(&lib, 5);
        let qs = |v: &[LibraryEntry]| v.iter().map(|e| e.q).collect::<Vec<_>>();
        assert_eq!(qs(&w.strong), vec![0.20, 0.19, 0.18]);
        assert_eq!(qs(&w.weak), vec![0.01, 0.02]);
    }

    #[test]
    fn ties_prefer_earlier_round_then_name() {
        let mut lib = Library::new();
        lib.insert(vec![entry("b", 0.5, 2), entry("a", 0.5, 2)])
            .unwrap();
        lib.insert(vec![entry("z", 0.5, 1)]).unwrap();
        for i in 0..5 {
            lib.insert(vec![entry(&format!("low{i}"), 0.1, 3)]).unwrap();
        }
        let w = select_context(&lib, 5);
        let names: Vec<&str> = w.strong.iter().map(|e| e.spec.name.as_str()).collect();
        assert_eq!(names, vec!["z", "a", "b"]);
        let names: Vec<&str> = w.weak.iter().map(|e| e.spec.name.as_str()).collect();
        assert_eq!(names, vec!["low0", "low1"]);
    }

    #[test]
    fn insert_rejects_duplicates_atomically() {
        let mut lib = Library::new();
        lib.insert(vec![entry("a", 0.5, 1)]).unwrap();
        let snapshot = lib.to_jsonl();
        let err = lib
            .insert(vec![entry("b", 0.2, 1), entry("a", 0.3, 1)])
            .unwrap_err();
        assert!(matches!(err, LibraryError::Duplicate { .. }));
        assert_eq!(lib.to_jsonl(), snapshot);
        lib.insert(vec![entry("a", 0.3, 2)]).unwrap();
        assert!(lib.to_jsonl().starts_with(&snapshot));
        assert_eq!(lib.next_round(), 3);
    }

    #[test]
    fn empty_library_is_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lib.jsonl");
        Library::new().persist(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        assert!(Library::load(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let mut lib = Library::new();
        lib.insert(vec![
            entry("a", 0.5, 1),
            entry("b", 0.25, 1),
            entry("c", 0.125, 1),
        ])
        .unwrap();
        let text = lib.to_jsonl();
        let cut = text.len() - 20;
        match Library::from_jsonl(&text[..cut]) {
            Err(LibraryError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn markdown_has_every_section() {
        let md = export_markdown("Best", [&entry("helicity", 0.69682, 1)]);
        for heading in [
            "Category:",
            "Performance.",
            "Dynamic Score:** 0.69682",
            "Core Idea.",
            "Formal Definition.",
            "Executable Implementation.",
            "Analysis.",
        ] {
            assert!(md.contains(heading), "{heading}");
        }
    }

    proptest! {
        #[test]
        fn persist_load_identity(qs in prop::collection::vec(-1.0e3f64..1.0e3, 0..30)) {
            let mut lib = Library::new();
            for (i, q) in qs.iter().enumerate() {
                let mut e = entry(&format!("s{i}"), *q, (i % 4) as u32 + 1);
                e.r.auc = q / 7.0;
                e.analysis = format!("note {q}\n\"quoted\"");
                lib.insert(vec![e]).unwrap();
            }
            prop_assert_eq!(Library::from_jsonl(&lib.to_jsonl()).unwrap(), lib);
        }

        #[test]
        fn categories_are_permutation_invariant(mut qs in prop::collection::vec(0.0f64..1.0, 1..20), seed in 0u64..1000) {
            let before: Vec<(u64, Category)> = qs.iter().map(|q| q.to_bits()).zip(categories(&qs)).collect();
            use rand::{seq::SliceRandom, SeedableRng};
            qs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let after: Vec<(u64, Category)> = qs.iter().map(|q| q.to_bits()).zip(categories(&qs)).collect();
            for pair in &after {
                prop_assert!(before.contains(pair));
            }
        }

        #[test]
        fn strong_dominates_weak(qs in prop::collection::vec(0.0f64..1.0, 0..40)) {
            let mut lib = Library::new();
            for (i, q) in qs.iter().enumerate() {
                lib.insert(vec![entry(&format!("s{i}"), *q, 1)]).unwrap();
            }
            let w = select_context(&lib, 5);
            prop_assert!(w.strong.len() <= 3 && w.weak.len() <= 2);
            prop_assert_eq!(w.len(), qs.len().min(5));
            if let (Some(min_s), Some(max_w)) = (
                w.strong.iter().map(|e| e.q).reduce(f64::min),
                w.weak.iter().map(|e| e.q).reduce(f64::max),
            ) {
                prop_assert!(min_s >= max_w);
            }
        }
    }
}
