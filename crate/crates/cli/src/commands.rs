use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::{info, warn};
use mia_core::eval::{
    evaluate_strategies, roc_curve, split_holdout, CompiledStrategy, EvalResult, ResultLine,
    Weights,
};
use mia_core::library::{export_markdown, Library, LibraryEntry};
use mia_core::logits::{decode_container, encode_container, Dataset, Slice};
use mia_core::metrics::baseline_kinds;
use mia_core::orchestrator::transport::{
    ChatTransport, HttpTransport, MeteredTransport, ReplayTransport,
};
use mia_core::orchestrator::{run_loop, Backend, LoopOutcome, RoundReport, RunConfig};
use mia_core::simulate::{
    calibrate_delta, gap_spec, helicity_log_spec, helicity_prob_spec, separation, simulate_dataset,
    Calibration, SeparationStats, SimConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::args::{Cli, Command, DataArgs, ExportArgs, HoldoutArgs, RunLoopArgs, SimulateArgs};
use crate::config::CliConfig;
use crate::output::{
    file_sha256, prepare_out_dir, sha256_hex, write_json, write_jsonl, RunManifest,
};
use crate::tables::{
    baselines_csv, baselines_markdown, holdout_csv, holdout_markdown, roc_csv, HoldoutRow,
    SliceResults,
};
use crate::CliError;

pub const DATASET_FILE: &str = "dataset.amia";
pub const LIBRARY_FILE: &str = "library.jsonl";
const CALIBRATION_TOLERANCE: f64 = 0.01;

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let config = CliConfig::load(cli.config.as_deref())?;
    let out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    match &cli.command {
        Command::Simulate(a) => simulate(cli, &config, a, &out),
        Command::EvalBaselines(a) => eval_baselines(cli, a, &out),
        Command::RunLoop(a) => run_loop_cmd(cli, &config, a, &out),
        Command::HoldoutEval(a) => holdout_eval(cli, &config, a, &out),
        Command::ExportReport(a) => export_report(cli, a, &out),
    }
}

/// A container read from disk, with the hash of its bytes.
pub struct LoadedData {
    pub dataset: Dataset,
    pub sha256: String,
}

/// Reads a container and checks both classes are present.
pub fn load_dataset(path: &Path) -> Result<LoadedData, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let dataset =
        decode_container(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    check_classes(&dataset, &path.display().to_string())?;
    Ok(LoadedData {
        sha256: sha256_hex(&bytes),
        dataset,
    })
}

fn check_classes(dataset: &Dataset, what: &str) -> Result<(), CliError> {
    let (m, n) = dataset.class_counts();
    if m == 0 || n == 0 {
        return Err(CliError::Data(format!(
            "{what}: needs both classes, found {m} members and {n} non-members"
        )));
    }
    Ok(())
}

fn load_library(path: &Path) -> Result<(Library, String), CliError> {
    let lib =
        Library::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let sha = file_sha256(path)?;
    Ok((lib, sha))
}

fn baselines() -> Vec<CompiledStrategy> {
    baseline_kinds()
        .into_iter()
        .map(CompiledStrategy::native)
        .collect()
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct SimulationReport {
    config: SimConfig,
    calibration: Option<Calibration>,
    gap: SeparationStats,
    helicity_prob: SeparationStats,
    helicity_log: SeparationStats,
}

fn simulate(cli: &Cli, config: &CliConfig, a: &SimulateArgs, out: &Path) -> Result<(), CliError> {
    let s = &config.simulation;
    let mut cfg = SimConfig {
        n_member: a.members.unwrap_or(s.n_member),
        n_nonmember: a.nonmembers.unwrap_or(s.n_nonmember),
        vocab: a.vocab.unwrap_or(s.vocab),
        seq_len: a.seq_len.unwrap_or(s.seq_len),
        delta: 0.0,
        seed: cli.seed.unwrap_or(config.run.seed),
    };
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let target = a.target_auc.unwrap_or(s.target_auc);
    let fixed = a.delta.or(if a.target_auc.is_some() {
        None
    } else {
        s.delta
    });
    prepare_out_dir(out, cli.force)?;
    let manifest = RunManifest::begin(
        "simulate",
        json!({"simulation": cfg, "delta": fixed, "target_auc": target}),
        Some(cfg.seed),
    );

    let calibration = match fixed {
        Some(d) => {
            cfg.delta = d;
            None
        }
        None => {
            let c = calibrate_delta(target, &cfg, CALIBRATION_TOLERANCE)
                .map_err(|e| CliError::Data(e.to_string()))?;
            if c.clamped {
                warn!(
                    "calibration clamped at delta {}; target AUC {target} not reached",
                    c.delta
                );
            }
            cfg.delta = c.delta;
            Some(c)
        }
    };
    let dataset = simulate_dataset(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let bytes = encode_container(&dataset).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(out.join(DATASET_FILE), &bytes)?;

    let sep = |spec| {
        let s = CompiledStrategy::compile(spec).map_err(|e| CliError::Other(e.to_string()))?;
        separation(&s, &dataset).map_err(|e| CliError::Data(e.to_string()))
    };
    let report = SimulationReport {
        config: cfg,
        calibration,
        gap: sep(gap_spec())?,
        helicity_prob: sep(helicity_prob_spec())?,
        helicity_log: sep(helicity_log_spec())?,
    };
    info!(
        "simulated {} records at delta {:.4}: gap AUC {:.4}, d {:?}, p {:.3e}",
        dataset.len(),
        cfg.delta,
        report.gap.auc,
        report.gap.cohens_d,
        report.gap.welch_p
    );
    write_json(&out.join("simulation.json"), &report)?;
    let mut manifest = manifest;
    manifest.dataset = Some(out.join(DATASET_FILE));
    manifest.dataset_sha256 = Some(sha256_hex(&bytes));
    manifest.finish(out, "ok")
}

// ----------------------------------------------------------- eval-baselines

#[derive(Serialize)]
struct SliceLine<'a> {
    slice: String,
    #[serde(flatten)]
    line: &'a ResultLine,
}

/// Baseline results per slice present in the dataset, in slice-code order.
pub fn evaluate_baselines_by_slice(
    dataset: &Dataset,
    weights: &Weights,
) -> Result<Vec<SliceResults>, CliError> {
    let mut by_slice: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records.iter().enumerate() {
        by_slice.entry(r.slice.code()).or_default().push(i);
    }
    let subsets: Vec<(Slice, Dataset)> = by_slice
        .into_iter()
        .map(|(code, idx)| {
            (
                Slice::from_code(code).expect("decoded slice"),
                dataset.subset(&idx),
            )
        })
        .collect();
    for (slice, sub) in &subsets {
        check_classes(sub, &format!("slice {slice}"))?;
    }
    let strategies = baselines();
    Ok(subsets
        .into_iter()
        .map(|(slice, sub)| SliceResults {
            slice,
            results: evaluate_strategies(&strategies, &sub, weights),
        })
        .collect())
}

fn eval_baselines(cli: &Cli, a: &DataArgs, out: &Path) -> Result<(), CliError> {
    let data = load_dataset(&a.data)?;
    let weights = Weights::default();
    let groups = evaluate_baselines_by_slice(&data.dataset, &weights)?;
    prepare_out_dir(out, cli.force)?;
    let mut manifest = RunManifest::begin("eval-baselines", json!({"weights": weights}), None);
    manifest.dataset = Some(a.data.clone());
    manifest.dataset_sha256 = Some(data.sha256);

    let mut lines = Vec::new();
    for g in &groups {
        for r in &g.results {
            lines.push((g.slice.to_string(), r.to_json_line()));
        }
    }
    let rows: Vec<SliceLine> = lines
        .iter()
        .map(|(slice, line)| SliceLine {
            slice: slice.clone(),
            line,
        })
        .collect();
    write_jsonl(&out.join("results.jsonl"), &rows)?;
    fs::write(out.join("baselines.csv"), baselines_csv(&groups))?;
    fs::write(out.join("baselines.md"), baselines_markdown(&groups))?;
    for g in &groups {
        let dir = out.join("roc").join(g.slice.to_string());
        fs::create_dir_all(&dir)?;
        for r in &g.results {
            if let Some(set) = &r.scores {
                fs::write(
                    dir.join(format!("{}.csv", r.name)),
                    roc_csv(&roc_curve(set)),
                )?;
            }
        }
    }
    manifest.finish(out, "ok")
}

// ---------------------------------------------------------------- run-loop

/// The effective run config: file, then flags.
pub fn effective_run_config(
    cli: &Cli,
    config: &CliConfig,
    a: &RunLoopArgs,
) -> Result<RunConfig, CliError> {
    let mut run = config.run.clone();
    if let Some(s) = cli.seed {
        run.seed = s;
    }
    if cli.no_guidance {
        run.guidance_enabled = false;
    }
    if let Some(b) = cli.backend {
        run.backend = b.into();
    }
    if let Some(f) = &a.fixtures {
        run.fixtures = Some(f.clone());
    }
    if let Some(t) = a.rounds {
        run.rounds = t;
    }
    if let Some(k) = a.candidates {
        run.candidates = k;
    }
    run.validate().map_err(|errs| {
        CliError::Config(format!("invalid run config:\n  {}", errs.join("\n  ")))
    })?;
    Ok(run)
}

fn transport_for(run: &RunConfig) -> Result<Option<Box<dyn ChatTransport>>, CliError> {
    Ok(match run.backend {
        Backend::OfflineMutation => None,
        Backend::LlmChat => Some(Box::new(
            HttpTransport::from_env().map_err(|e| CliError::Config(e.to_string()))?,
        )),
        Backend::Replay => {
            let dir = run.fixtures.as_ref().expect("validated");
            Some(Box::new(
                ReplayTransport::from_dir(dir).map_err(|e| CliError::Config(e.to_string()))?,
            ))
        }
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BestLine {
    pub name: String,
    pub code: String,
    pub q: f64,
    pub auc: f64,
    pub accuracy: f64,
    pub tpr_at_5_fpr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LoopSummary {
    pub rounds: usize,
    pub library_size: usize,
    pub barren_rounds: usize,
    pub best_q_by_round: Vec<Option<f64>>,
    pub best_discovered: Option<BestLine>,
    pub best_baseline: Option<BestLine>,
    /// Best discovered Q minus best baseline Q.
    pub margin: Option<f64>,
    pub aborted: Option<String>,
}

fn best_line_entry(e: &LibraryEntry) -> BestLine {
    BestLine {
        name: e.spec.name.clone(),
        code: e.spec.code.clone(),
        q: e.q,
        auc: e.r.auc,
        accuracy: e.r.acc,
        tpr_at_5_fpr: e.r.tpr_at_5fpr,
    }
}

/// Best non-failed baseline, ties to the earlier one.
pub fn best_baseline(results: &[EvalResult]) -> Option<&EvalResult> {
    results
        .iter()
        .filter(|r| !r.failed())
        .reduce(|a, b| if b.q > a.q { b } else { a })
}

pub fn summarize_loop(outcome: &LoopOutcome, baseline_results: &[EvalResult]) -> LoopSummary {
    let best_discovered = outcome.library.best().map(best_line_entry);
    let best_baseline = best_baseline(baseline_results).map(|r| {
        let kind = baseline_kinds().into_iter().find(|k| k.name() == r.name);
        BestLine {
            name: r.name.clone(),
            code: kind.map(|k| k.dsl()).unwrap_or_default(),
            q: r.q,
            auc: r.r.auc,
            accuracy: r.r.acc,
            tpr_at_5_fpr: r.r.tpr_at_5fpr,
        }
    });
    LoopSummary {
        rounds: outcome.rounds.len(),
        library_size: outcome.library.len(),
        barren_rounds: outcome.rounds.iter().filter(|r| r.barren).count(),
        best_q_by_round: outcome.rounds.iter().map(|r| r.best_q_so_far).collect(),
        margin: match (&best_discovered, &best_baseline) {
            (Some(d), Some(b)) => Some(d.q - b.q),
            _ => None,
        },
        best_discovered,
        best_baseline,
        aborted: outcome.aborted.clone(),
    }
}

fn summary_markdown(s: &LoopSummary) -> String {
    let mut out = String::from("# Best discovered strategy vs best baseline\n\n");
    out.push_str("| | Strategy | Q | AUC | Acc | TPR@5%FPR |\n|---|---|---:|---:|---:|---:|\n");
    for (label, b) in [
        ("discovered", &s.best_discovered),
        ("baseline", &s.best_baseline),
    ] {
        match b {
            Some(b) => out.push_str(&format!(
                "| {label} | {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                b.name, b.q, b.auc, b.accuracy, b.tpr_at_5_fpr
            )),
            None => out.push_str(&format!("| {label} | N/A | N/A | N/A | N/A | N/A |\n")),
        }
    }
    if let Some(m) = s.margin {
        out.push_str(&format!("\nMargin in Q: {m:+.6}\n"));
    }
    out.push_str(&format!(
        "\nRounds: {}, archived strategies: {}, barren rounds: {}\n",
        s.rounds, s.library_size, s.barren_rounds
    ));
    if let Some(a) = &s.aborted {
        out.push_str(&format!("\nRun aborted: {a}\n"));
    }
    out
}

pub fn usage_csv(rounds: &[RoundReport]) -> String {
    let mut out = String::from("round,input_tokens,output_tokens\n");
    let (mut i, mut o) = (0u64, 0u64);
    for r in rounds {
        out.push_str(&format!(
            "{},{},{}\n",
            r.round, r.token_usage.input_tokens, r.token_usage.output_tokens
        ));
        i += r.token_usage.input_tokens;
        o += r.token_usage.output_tokens;
    }
    out.push_str(&format!("total,{i},{o}\n"));
    out
}

fn run_loop_cmd(
    cli: &Cli,
    config: &CliConfig,
    a: &RunLoopArgs,
    out: &Path,
) -> Result<(), CliError> {
    let run = effective_run_config(cli, config, a)?;
    let data = load_dataset(&a.data)?;
    let (initial, library_sha) = match &a.library {
        Some(p) => {
            let (l, sha) = load_library(p)?;
            (l, Some(sha))
        }
        None => (Library::new(), None),
    };
    let transport = transport_for(&run)?.map(MeteredTransport::new);
    prepare_out_dir(out, cli.force)?;
    let mut manifest = RunManifest::begin(
        "run-loop",
        json!({"run": run, "resumed_from": a.library}),
        Some(run.seed),
    );
    manifest.dataset = Some(a.data.clone());
    manifest.dataset_sha256 = Some(data.sha256.clone());
    manifest.library_sha256 = library_sha;

    let rounds_dir = out.join("rounds");
    fs::create_dir_all(&rounds_dir)?;
    let mut write_err = None;
    let outcome = run_loop(
        &data.dataset,
        &run,
        transport.as_ref().map(|t| t as &dyn ChatTransport),
        initial,
        |report, library| {
            let res = write_json(&rounds_dir.join(format!("{}.json", report.round)), report)
                .and_then(|_| {
                    library
                        .persist(out.join(LIBRARY_FILE))
                        .map_err(|e| CliError::Other(e.to_string()))
                });
            if let Err(e) = res {
                write_err.get_or_insert(e);
            }
        },
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(e) = write_err {
        return Err(e);
    }

    write_loop_artifacts(&data.dataset, &run, &outcome, out)?;
    if let Some(t) = &transport {
        let recorded = t.total();
        let summed = outcome.total_usage();
        if recorded != summed {
            warn!("usage mismatch: transport {recorded:?} vs rounds {summed:?}");
        }
    }
    match &outcome.aborted {
        None => manifest.finish(out, "ok"),
        Some(reason) => {
            manifest.finish(out, &format!("aborted: {reason}"))?;
            Err(CliError::Transport(reason.clone()))
        }
    }
}

/// Library, usage, markdown and summary files for a finished (or aborted)
/// loop.
pub fn write_loop_artifacts(
    dataset: &Dataset,
    run: &RunConfig,
    outcome: &LoopOutcome,
    out: &Path,
) -> Result<(), CliError> {
    outcome
        .library
        .persist(out.join(LIBRARY_FILE))
        .map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(out.join("usage.csv"), usage_csv(&outcome.rounds))?;
    fs::write(
        out.join("best_strategies.md"),
        export_markdown("Best strategies", outcome.library.top(5)),
    )?;
    let baseline_results = evaluate_strategies(&baselines(), dataset, &run.weights);
    let summary = summarize_loop(outcome, &baseline_results);
    write_json(&out.join("summary.json"), &summary)?;
    fs::write(out.join("summary.md"), summary_markdown(&summary))?;
    Ok(())
}

// ------------------------------------------------------------ holdout-eval

#[derive(Debug, Clone, Serialize)]
pub struct HoldoutReport {
    pub fraction: f64,
    pub seed: u64,
    pub n_validation: usize,
    pub n_holdout: usize,
    pub rows: Vec<HoldoutRow>,
    pub note: Option<String>,
}

pub fn holdout_rows(
    validation: &Dataset,
    holdout: &Dataset,
    entries: &[&LibraryEntry],
    weights: &Weights,
) -> Result<Vec<HoldoutRow>, CliError> {
    let compiled: Vec<CompiledStrategy> = entries
        .iter()
        .map(|e| {
            CompiledStrategy::compile(e.spec.clone())
                .map_err(|err| CliError::Data(format!("library strategy {}: {err}", e.spec.name)))
        })
        .collect::<Result<_, _>>()?;
    let v = evaluate_strategies(&compiled, validation, weights);
    let h = evaluate_strategies(&compiled, holdout, weights);
    let ok = |r: &EvalResult| (!r.failed()).then_some((r.r, r.q));
    Ok(entries
        .iter()
        .zip(v.iter().zip(&h))
        .map(|(e, (v, h))| HoldoutRow {
            name: e.spec.name.clone(),
            code: e.spec.code.clone(),
            validation: ok(v).map(|x| x.0),
            validation_q: ok(v).map(|x| x.1),
            holdout: ok(h).map(|x| x.0),
            holdout_q: ok(h).map(|x| x.1),
        })
        .collect())
}

fn holdout_eval(
    cli: &Cli,
    config: &CliConfig,
    a: &HoldoutArgs,
    out: &Path,
) -> Result<(), CliError> {
    let fraction = a.fraction.unwrap_or(config.holdout.fraction);
    let top = a.top.unwrap_or(config.holdout.top);
    let seed = cli.seed.unwrap_or(config.run.seed);
    if top == 0 {
        return Err(CliError::Config("--top must be at least 1".into()));
    }
    let data = load_dataset(&a.data)?;
    let (library, library_sha) = load_library(&a.library)?;
    if library.is_empty() {
        return Err(CliError::Data(format!(
            "{} holds no strategies",
            a.library.display()
        )));
    }
    let (validation, holdout) = split_holdout(&data.dataset, fraction, seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let entries = library.top(top);
    let note = (library.len() < top).then(|| {
        let n = library.len();
        info!("library has {n} strategies, fewer than {top}; evaluating all");
        format!("library has {n} strategies, fewer than {top}; all were evaluated")
    });
    let rows = holdout_rows(&validation, &holdout, &entries, &config.run.weights)?;

    prepare_out_dir(out, cli.force)?;
    let mut manifest = RunManifest::begin(
        "holdout-eval",
        json!({"fraction": fraction, "top": top, "weights": config.run.weights}),
        Some(seed),
    );
    manifest.dataset = Some(a.data.clone());
    manifest.dataset_sha256 = Some(data.sha256.clone());
    manifest.library_sha256 = Some(library_sha);

    let ids = |d: &Dataset| {
        d.records
            .iter()
            .map(|r| r.sample_id.clone())
            .collect::<Vec<_>>()
    };
    write_json(
        &out.join("split.json"),
        &json!({"seed": seed, "fraction": fraction, "validation": ids(&validation), "holdout": ids(&holdout)}),
    )?;
    fs::write(out.join("holdout.csv"), holdout_csv(&rows))?;
    let mut md = String::from("# Generalization to held-out samples\n\n");
    md.push_str(&holdout_markdown(&rows, validation.len(), holdout.len()));
    if let Some(n) = &note {
        md.push_str(&format!("\nNote: {n}\n"));
    }
    fs::write(out.join("holdout.md"), md)?;
    write_json(
        &out.join("holdout.json"),
        &HoldoutReport {
            fraction,
            seed,
            n_validation: validation.len(),
            n_holdout: holdout.len(),
            rows,
            note,
        },
    )?;
    manifest.finish(out, "ok")
}

// ----------------------------------------------------------- export-report

fn export_report(cli: &Cli, a: &ExportArgs, out: &Path) -> Result<(), CliError> {
    let (library, sha) = load_library(&a.library)?;
    prepare_out_dir(out, cli.force)?;
    let mut manifest = RunManifest::begin(
        "export-report",
        json!({"top": a.top, "library": a.library}),
        None,
    );
    manifest.library_sha256 = Some(sha);
    fs::write(
        out.join("best_strategies.md"),
        export_markdown("Best strategies", library.top(a.top)),
    )?;
    fs::write(
        out.join("library.md"),
        export_markdown("Strategy library", library.entries()),
    )?;
    manifest.finish(out, "ok")
}
