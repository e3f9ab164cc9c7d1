use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use neqsim::frame::SymbolFrame;
use neqsim::metrics::{self, Accounting, ComplexityReport, RnnCost};
use neqsim::rnn::{CellKind, RnnEqualizer};
use neqsim::volterra::VolterraEqualizer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{dataset_key, ExperimentConfig, Point};
use crate::engine::{read_csv, write_atomic, write_csv, Engine, Model, PositionRow, ResultRow};
use crate::error::CliError;
use crate::plot::{LogPlot, Series, FEC_LIMIT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub beta2: f64,
    pub power_dbm: f64,
    pub seed: u64,
    pub error: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub beta2: f64,
    pub power_dbm: f64,
    pub equalizer: String,
    pub hidden: Option<usize>,
    pub errors: u64,
    pub bits: u64,
    pub ber: f64,
    pub config_hash: String,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config_hash: &'a str,
    name: &'a str,
    command: &'a str,
    seeds: &'a [u64],
    summary: &'a [SummaryRow],
    failures: &'a [FailureRow],
    artifacts: Vec<String>,
}

type PointResults<T> = Vec<(Point, Result<T, CliError>)>;

/// Runs `work` on every point in a pool of `workers` threads; results come
/// back in point order.
fn run_points<T: Send>(workers: usize, points: &[Point], work: impl Fn(&Point) -> Result<T, CliError> + Sync) -> Result<PointResults<T>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(pool.install(|| points.par_iter().map(|p| (*p, work(p))).collect()))
}

/// Splits outcomes into values and failure rows; config errors abort.
fn partition<T>(engine: &Engine<'_>, outcomes: PointResults<T>) -> Result<(Vec<T>, Vec<FailureRow>), CliError> {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (p, r) in outcomes {
        match r {
            Ok(v) => ok.push(v),
            Err(e @ CliError::Config(_)) => return Err(e),
            Err(e) => {
                eprintln!("[{}] failed: {e}", p.tag());
                failed.push(FailureRow {
                    beta2: p.beta2,
                    power_dbm: p.power_dbm,
                    seed: p.seed,
                    error: e.to_string(),
                    config_hash: engine.hash.clone(),
                });
            }
        }
    }
    Ok((ok, failed))
}

fn finish(engine: &Engine<'_>, command: &str, summary: &[SummaryRow], failures: &[FailureRow], total: usize) -> Result<(), CliError> {
    let out = &engine.cfg.output_dir;
    let failures_path = out.join("failures.csv");
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path)?;
        }
    } else {
        write_csv(&failures_path, failures)?;
    }
    let mut artifacts: Vec<String> = list_files(out)?
        .into_iter()
        .filter(|p| !p.starts_with(out.join("cache")) && p.file_name().is_some_and(|n| n != "run.log" && n != "record.json"))
        .filter_map(|p| p.strip_prefix(out).ok().map(|r| r.to_string_lossy().into_owned()))
        .collect();
    artifacts.sort();
    let record = RunRecord {
        config_hash: &engine.hash,
        name: &engine.cfg.name,
        command,
        seeds: &engine.cfg.seeds,
        summary,
        failures,
        artifacts,
    };
    let bytes = serde_json::to_vec_pretty(&record).map_err(|e| CliError::Runtime(e.to_string()))?;
    let path = out.join("record.json");
    write_atomic(&path, |tmp| Ok(fs::write(tmp, &bytes)?))?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            failed: failures.len(),
            total,
        })
    }
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn generate(cfg: &ExperimentConfig, force: bool, workers: usize) -> Result<(), CliError> {
    let engine = Engine::new(cfg, force);
    let points = cfg.points();
    let outcomes = run_points(workers, &points, |p| {
        let frame = engine.frame(p)?;
        engine.dataset_row(p, &frame)
    })?;
    let (rows, failures) = partition(&engine, outcomes)?;
    write_csv(&cfg.output_dir.join("datasets.csv"), &rows)?;
    for r in &rows {
        println!(
            "beta2 {} power {} dBm seed {}: FDE-only BER {:e} ({} / {})",
            r.beta2, r.power_dbm, r.seed, r.fde_ber, r.fde_errors, r.fde_bits
        );
    }
    finish(&engine, "generate", &[], &failures, points.len())
}

fn train_point(engine: &Engine<'_>, p: &Point, frame: &SymbolFrame) -> Result<(), CliError> {
    for model in engine.trainable() {
        let epochs = engine.train(&model, p, frame)?;
        eprintln!("[{}] {} ready after {epochs} epochs", p.tag(), model.label());
    }
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, force: bool, workers: usize) -> Result<(), CliError> {
    let engine = Engine::new(cfg, force);
    if engine.trainable().is_empty() {
        return Err(CliError::Config("equalizers: nothing to train (only fde selected)".into()));
    }
    let points = cfg.points();
    let outcomes = run_points(workers, &points, |p| {
        // the dataset is reused even under --force; only the models are redone
        let frame = Engine::new(cfg, false).frame(p)?;
        train_point(&engine, p, &frame)
    })?;
    let (_, failures) = partition(&engine, outcomes)?;
    finish(&engine, "train", &[], &failures, points.len())
}

fn evaluate_point(engine: &Engine<'_>, p: &Point, frame: &SymbolFrame) -> Result<Vec<ResultRow>, CliError> {
    engine.models().iter().map(|m| engine.evaluate(m, p, frame)).collect()
}

fn summarize(engine: &Engine<'_>, rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, Option<usize>, String)> = Vec::new();
    let mut pooled: BTreeMap<(String, String, Option<usize>, String), (f64, f64, u64, u64)> = BTreeMap::new();
    for r in rows {
        let key = (r.beta2.to_string(), r.power_dbm.to_string(), r.hidden, r.equalizer.clone());
        let e = pooled.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (r.beta2, r.power_dbm, 0, 0)
        });
        e.2 += r.errors;
        e.3 += r.bits;
    }
    order
        .into_iter()
        .map(|k| {
            let (beta2, power_dbm, errors, bits) = pooled[&k];
            SummaryRow {
                beta2,
                power_dbm,
                equalizer: k.3,
                hidden: k.2,
                errors,
                bits,
                ber: errors as f64 / bits as f64,
                config_hash: engine.hash.clone(),
            }
        })
        .collect()
}

fn plot_summary(engine: &Engine<'_>, summary: &[SummaryRow]) -> Result<(), CliError> {
    let multi_beta = engine.cfg.beta2_values().len() > 1;
    let mut series: Vec<Series> = Vec::new();
    for r in summary {
        let mut label = match r.hidden {
            Some(h) => format!("{} H={h}", r.equalizer),
            None => r.equalizer.clone(),
        };
        if multi_beta {
            label = format!("{label} β2={}", r.beta2);
        }
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((r.power_dbm, r.ber)),
            None => series.push(Series {
                label,
                points: vec![(r.power_dbm, r.ber)],
            }),
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let svg = LogPlot {
        title: &engine.cfg.name,
        x_label: "total launch power (dBm)",
        y_label: "BER",
        series: &series,
        references: &[(FEC_LIMIT, "HD-FEC 3.8e-3")],
        config_hash: &engine.hash,
    }
    .render();
    let path = engine.cfg.output_dir.join("ber_vs_power.svg");
    write_atomic(&path, |tmp| Ok(fs::write(tmp, svg.as_bytes())?))
}

fn write_results(engine: &Engine<'_>, command: &str, rows: Vec<Vec<ResultRow>>, failures: &[FailureRow], total: usize) -> Result<(), CliError> {
    let rows: Vec<ResultRow> = rows.into_iter().flatten().collect();
    let out = &engine.cfg.output_dir;
    write_csv(&out.join("results.csv"), &rows)?;
    let summary = summarize(engine, &rows);
    write_csv(&out.join("summary.csv"), &summary)?;
    plot_summary(engine, &summary)?;
    for r in &summary {
        let hidden = r.hidden.map(|h| format!(" H={h}")).unwrap_or_default();
        println!(
            "beta2 {} power {} dBm {}{hidden}: BER {:e} ({} / {})",
            r.beta2, r.power_dbm, r.equalizer, r.ber, r.errors, r.bits
        );
    }
    finish(engine, command, &summary, failures, total)
}

pub fn evaluate(cfg: &ExperimentConfig, workers: usize) -> Result<(), CliError> {
    let engine = Engine::new(cfg, false);
    let points = cfg.points();
    let outcomes = run_points(workers, &points, |p| evaluate_point(&engine, p, &engine.frame(p)?))?;
    let (rows, failures) = partition(&engine, outcomes)?;
    write_results(&engine, "evaluate", rows, &failures, points.len())
}

pub fn sweep(cfg: &ExperimentConfig, force: bool, workers: usize) -> Result<(), CliError> {
    let engine = Engine::new(cfg, force);
    let points = cfg.points();
    let outcomes = run_points(workers, &points, |p| {
        let frame = engine.frame(p)?;
        train_point(&engine, p, &frame)?;
        evaluate_point(&engine, p, &frame)
    })?;
    let (rows, failures) = partition(&engine, outcomes)?;
    write_results(&engine, "sweep", rows, &failures, points.len())
}

pub fn per_position(cfg: &ExperimentConfig, force: bool, workers: usize) -> Result<(), CliError> {
    if !cfg.has_rnn() {
        return Err(CliError::Config("equalizers: per-position needs a recurrent equalizer".into()));
    }
    if cfg.rnn.span != cfg.rnn.window {
        return Err(CliError::Config(format!(
            "rnn.span = {} must equal rnn.window = {} for per-position analysis",
            cfg.rnn.span, cfg.rnn.window
        )));
    }
    let engine = Engine::new(cfg, force);
    let models: Vec<Model> = engine.models().into_iter().filter(|m| m.kind.cell().is_some()).collect();
    let points = cfg.points();
    let outcomes = run_points(workers, &points, |p| {
        let frame = engine.frame(p)?;
        models
            .iter()
            .map(|m| {
                engine.train(m, p, &frame)?;
                Ok((*p, *m, engine.per_position(m, p, &frame)?))
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    let (reports, failures) = partition(&engine, outcomes)?;

    let mut groups: Vec<(f64, f64, Model, Vec<(u64, u64)>)> = Vec::new();
    for (p, m, report) in reports.into_iter().flatten() {
        let slot = match groups.iter().position(|g| g.0 == p.beta2 && g.1 == p.power_dbm && g.2 == m) {
            Some(i) => i,
            None => {
                groups.push((p.beta2, p.power_dbm, m, vec![(0, 0); report.per_position.len()]));
                groups.len() - 1
            }
        };
        for (acc, pos) in groups[slot].3.iter_mut().zip(&report.per_position) {
            acc.0 += pos.0;
            acc.1 += pos.1;
        }
    }
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (beta2, power_dbm, model, counts) in &groups {
        let bers: Vec<f64> = counts.iter().map(|&(e, n)| e as f64 / n as f64).collect();
        for (i, (&(errors, bits), &ber)) in counts.iter().zip(&bers).enumerate() {
            rows.push(PositionRow {
                beta2: *beta2,
                power_dbm: *power_dbm,
                equalizer: model.kind.label().into(),
                hidden: model.hidden,
                position: i,
                errors,
                bits,
                ber,
                config_hash: engine.hash.clone(),
            });
        }
        for &t in &cfg.per_position.thresholds {
            let n = bers.iter().filter(|b| **b < t).count();
            println!(
                "beta2 {beta2} power {power_dbm} dBm {}: {n} of {} positions below {t:e}",
                model.label(),
                bers.len()
            );
        }
        series.push(Series {
            label: format!("{} {power_dbm} dBm", model.label()),
            points: bers.iter().enumerate().map(|(i, b)| (i as f64, *b)).collect(),
        });
    }
    let out = &cfg.output_dir;
    write_csv(&out.join("per_position.csv"), &rows)?;
    let svg = LogPlot {
        title: &cfg.name,
        x_label: "symbol position in the word",
        y_label: "BER",
        series: &series,
        references: &[(FEC_LIMIT, "HD-FEC 3.8e-3"), (1e-3, "1e-3")],
        config_hash: &engine.hash,
    }
    .render();
    write_atomic(&out.join("per_position.svg"), |tmp| Ok(fs::write(tmp, svg.as_bytes())?))?;
    finish(&engine, "per-position", &[], &failures, points.len())
}

/// Arguments of the complexity calculator.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ComplexityArgs {
    pub kind: Option<CellKind>,
    pub hidden: usize,
    pub features: usize,
    pub window: usize,
    pub bits: usize,
    pub span: usize,
    pub as_printed: bool,
    pub volterra: Vec<u64>,
    pub lanes: u64,
}

#[derive(Serialize)]
struct ComplexityRow<'a> {
    table: &'a str,
    equalizer: &'a str,
    memory: &'a str,
    hidden: Option<u64>,
    output_symbols: u64,
    params: Option<u64>,
    total_mults: u64,
    per_symbol_exact: &'a str,
    per_symbol: u64,
    config_hash: &'a str,
}

impl<'a> ComplexityRow<'a> {
    fn new(r: &'a ComplexityReport, config_hash: &'a str) -> Self {
        Self {
            table: &r.table,
            equalizer: &r.equalizer,
            memory: &r.memory,
            hidden: r.hidden,
            output_symbols: r.output_symbols,
            params: r.params,
            total_mults: r.total_mults,
            per_symbol_exact: &r.per_symbol_exact,
            per_symbol: r.per_symbol,
            config_hash,
        }
    }
}

pub fn complexity(args: &ComplexityArgs, out: Option<&Path>) -> Result<(), CliError> {
    let mut rows = Vec::new();
    if let Some(kind) = args.kind {
        let accounting = if args.as_printed {
            Accounting::AsPrinted
        } else {
            Accounting::TableReconciled
        };
        let cost = RnnCost {
            gates: kind.gates() as u64,
            hidden: args.hidden as u64,
            features: args.features as u64,
            window: args.window as u64,
            bits: args.bits as u64,
            span: args.span as u64,
        };
        rows.push(metrics::rnn_report("custom", kind, &cost, accounting)?);
    }
    if !args.volterra.is_empty() {
        rows.push(metrics::volterra_report("custom", &args.volterra, args.lanes)?);
    }
    if rows.is_empty() {
        rows = metrics::emit_table_ii()?;
    }
    println!(
        "{:<6} {:<16} {:>10} {:>4} {:>4} {:>8} {:>12} {:>14}",
        "table", "equalizer", "memory", "H", "S", "params", "mults", "mults/symbol"
    );
    for r in &rows {
        println!(
            "{:<6} {:<16} {:>10} {:>4} {:>4} {:>8} {:>12} {:>14}",
            r.table,
            r.equalizer,
            r.memory,
            r.hidden.map(|h| h.to_string()).unwrap_or_else(|| "-".into()),
            r.output_symbols,
            r.params.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
            r.total_mults,
            format!("{} ({})", r.per_symbol, r.per_symbol_exact)
        );
    }
    if let Some(dir) = out {
        let hash = hex::encode(Sha256::digest(serde_json::to_vec(args).map_err(|e| CliError::Runtime(e.to_string()))?));
        let path = dir.join("complexity.csv");
        write_atomic(&path, |tmp| {
            let mut w = csv::Writer::from_path(tmp)?;
            for r in &rows {
                w.serialize(ComplexityRow::new(r, &hash))?;
            }
            Ok(w.flush()?)
        })?;
    }
    Ok(())
}

/// Re-hashes the config and checks every artifact of the output directory
/// and every cached frame; returns the number of files checked.
pub fn verify(cfg: &ExperimentConfig) -> Result<usize, CliError> {
    let hash = cfg.hash();
    let mut problems = Vec::new();
    let mut checked = 0;
    for path in list_files(&cfg.output_dir)? {
        let name = path.to_string_lossy().into_owned();
        if path.starts_with(cfg.cache_dir()) || name.ends_with(".tmp") || path.file_name().is_some_and(|n| n == "run.log") {
            continue;
        }
        let found: Vec<String> = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => {
                let mut r = csv::Reader::from_path(&path)?;
                let col = r.headers()?.iter().position(|h| h == "config_hash");
                match col {
                    Some(c) => r.records().map(|rec| rec.map(|rec| rec[c].to_string())).collect::<Result<_, _>>()?,
                    None => vec![String::new()],
                }
            }
            Some("svg") => {
                let text = fs::read_to_string(&path)?;
                vec![text
                    .lines()
                    .find_map(|l| l.strip_prefix("<!-- config_hash: "))
                    .map(|l| l.trim_end_matches(" -->").to_string())
                    .unwrap_or_default()]
            }
            Some("json") => {
                let v: serde_json::Value = serde_json::from_slice(&fs::read(&path)?).map_err(|e| CliError::Runtime(e.to_string()))?;
                vec![v["config_hash"].as_str().unwrap_or_default().to_string()]
            }
            Some("nqsr") => vec![RnnEqualizer::load(&path)?.meta.config_hash.unwrap_or_default()],
            Some("nqsv") => vec![VolterraEqualizer::load(&path)?.config_hash.unwrap_or_default()],
            _ => continue,
        };
        checked += 1;
        if found.iter().any(|h| *h != hash) {
            problems.push(format!("{name}: config hash mismatch"));
        }
    }
    for path in list_files(&cfg.cache_dir().join("frames"))? {
        if path.extension().is_none_or(|e| e != "nqsf") {
            continue;
        }
        let frame = SymbolFrame::load(&path)?;
        let key = dataset_key(&frame.meta.tx, &frame.meta.link, frame.meta.seed);
        checked += 1;
        let named = path.file_stem().and_then(|s| s.to_str()) == Some(key.as_str());
        if !named || frame.meta.config_hash.as_deref() != Some(key.as_str()) {
            problems.push(format!("{}: dataset content does not match its address", path.display()));
        }
    }
    if problems.is_empty() {
        println!("verified {checked} files against config hash {hash}");
        Ok(checked)
    } else {
        for p in &problems {
            eprintln!("{p}");
        }
        Err(CliError::Runtime(format!("{} of {checked} files failed verification", problems.len())))
    }
}

/// Pooled summary rows of a finished sweep or evaluation.
pub fn read_summary(dir: &Path) -> Result<Vec<SummaryRow>, CliError> {
    read_csv(&dir.join("summary.csv"))
}
