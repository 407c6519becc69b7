//! Command-line front end: scenario documents in, CSV time series and JSON
//! metric summaries out, plus the canned desk-case suite with pass/fail
//! evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scenario::cases::{self, CaseId};
use crate::scenario::criteria::{evaluate_case, CriterionOutcome};
use crate::scenario::metrics::{compute_metrics, detect_events, Metrics};
use crate::scenario::{column_names, run, RunResult, Scenario};

#[derive(Debug, Parser)]
#[command(
    name = "svc-sim",
    about = "Deterministic secondary voltage control simulator",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario document and write timeseries.csv + metrics.json.
    Run {
        /// Path to a scenario document (JSON).
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Dotted-path override applied onto the document before parsing,
        /// e.g. --set duration=200 --set inner.k_p=1.5. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run canned desk cases and print one pass/fail line per criterion.
    Cases {
        /// Comma-separated case ids: 1,2,...,6 or case1,...,case6.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<CaseId>,
        /// Output root; each case writes under <out>/caseN/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics.json from existing timeseries.csv trees.
    Report {
        /// Directory holding timeseries.csv, or a root of caseN/ directories.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Dispatches a parsed command line. Returns whether every executed check
/// passed; the binary turns `false` into a nonzero exit status.
pub fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { scenario, out, set } => {
            let text = fs::read_to_string(&scenario)?;
            let sc = parse_scenario_with_overrides(&text, &set)?;
            let result = run(&sc)?;
            write_outputs(&result, &out)?;
            println!(
                "{}: {} rows, final error {:.3e}",
                out.display(),
                result.rows.len(),
                result.metrics.final_v_pp_error
            );
            Ok(true)
        }
        Command::Cases { ids, out } => run_cases(&ids, &out),
        Command::Report { out } => {
            report(&out)?;
            Ok(true)
        }
    }
}

/// Parses and validates a scenario document. Syntax problems carry the
/// line and column; schema and invariant problems name the offending field.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut sc: Scenario = serde_json::from_str(text).map_err(json_error)?;
    sc.normalize();
    sc.validate()?;
    Ok(sc)
}

/// `parse_scenario` with `--set` overrides spliced into the document first.
pub fn parse_scenario_with_overrides(text: &str, sets: &[String]) -> Result<Scenario> {
    if sets.is_empty() {
        return parse_scenario(text);
    }
    let mut doc: serde_json::Value = serde_json::from_str(text).map_err(json_error)?;
    for spec in sets {
        apply_override(&mut doc, spec)?;
    }
    let rendered = serde_json::to_string(&doc).expect("rendering a JSON value cannot fail");
    parse_scenario(&rendered)
}

fn json_error(e: serde_json::Error) -> Error {
    let (line, column) = (e.line(), e.column());
    let full = e.to_string();
    // serde_json appends its own " at line L column C"; the position is
    // carried structurally instead.
    let message = match full.rsplit_once(" at line ") {
        Some((m, _)) => m.to_string(),
        None => full,
    };
    match e.classify() {
        serde_json::error::Category::Data => Error::Validation {
            field: "scenario".to_string(),
            reason: format!("{message} (line {line}, column {column})"),
        },
        _ => Error::Parse {
            line,
            column,
            message,
        },
    }
}

/// Applies one `key.path=value` override. Values parse as JSON, falling
/// back to a plain string; numeric segments index into arrays.
fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::validation("--set", format!("expected KEY=VALUE, got {spec:?}")))?;
    if path.is_empty() {
        return Err(Error::validation("--set", "empty key"));
    }
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    let (last, init) = segments.split_last().expect("split produced no segments");
    let mut cur = doc;
    for seg in init {
        cur = if let Ok(idx) = seg.parse::<usize>() {
            cur.as_array_mut()
                .ok_or_else(|| {
                    Error::validation("--set", format!("{path}: {seg:?} indexes a non-array"))
                })?
                .get_mut(idx)
                .ok_or_else(|| {
                    Error::validation("--set", format!("{path}: index {idx} out of bounds"))
                })?
        } else {
            cur.as_object_mut()
                .ok_or_else(|| {
                    Error::validation("--set", format!("{path}: {seg:?} indexes a non-object"))
                })?
                .entry(seg.to_string())
                .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()))
        };
    }
    if let Ok(idx) = last.parse::<usize>() {
        let slot = cur
            .as_array_mut()
            .ok_or_else(|| Error::validation("--set", format!("{path}: {last:?} indexes a non-array")))?
            .get_mut(idx)
            .ok_or_else(|| Error::validation("--set", format!("{path}: index {idx} out of bounds")))?;
        *slot = value;
    } else {
        cur.as_object_mut()
            .ok_or_else(|| Error::validation("--set", format!("{path}: {last:?} indexes a non-object")))?
            .insert(last.to_string(), value);
    }
    Ok(())
}

/// Renders the time series. Numbers carry 13 significant digits, the
/// connected/participation masks print as bare 0/1. The byte stream is a
/// pure function of the result.
pub fn write_csv(result: &RunResult) -> String {
    let int_cols: Vec<bool> = result
        .columns
        .iter()
        .map(|c| c.starts_with("connected_") || c.starts_with("svc_active_"))
        .collect();
    let mut out = String::with_capacity(32 * result.columns.len() * (result.rows.len() + 1));
    out.push_str(&result.columns.join(","));
    out.push('\n');
    for row in &result.rows {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            if int_cols[j] {
                out.push(if *v != 0.0 { '1' } else { '0' });
            } else {
                out.push_str(&format!("{v:.12e}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `timeseries.csv` and `metrics.json` under `dir`, creating it.
pub fn write_outputs(result: &RunResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("timeseries.csv"), write_csv(result))?;
    fs::write(dir.join("metrics.json"), render_metrics(&result.metrics))?;
    Ok(())
}

fn render_metrics(metrics: &Metrics) -> String {
    let mut json =
        serde_json::to_string_pretty(metrics).expect("metrics serialization cannot fail");
    json.push('\n');
    json
}

/// Runs the selected cases (in parallel, one worker per case), writes
/// `<out>/caseN/` outputs and prints one line per acceptance criterion.
/// Returns whether every criterion of every case passed.
pub fn run_cases(ids: &[CaseId], out: &Path) -> Result<bool> {
    if ids.is_empty() {
        return Err(Error::validation("--ids", "at least one case id is required"));
    }
    let mut unique: Vec<CaseId> = Vec::new();
    for &id in ids {
        if !unique.contains(&id) {
            unique.push(id);
        }
    }
    let evaluated: Vec<(CaseId, Result<Vec<CriterionOutcome>>)> = unique
        .par_iter()
        .map(|&id| {
            let outcome = cases_worker(id, out)
                .map_err(|e| Error::validation(id.to_string(), e.to_string()));
            (id, outcome)
        })
        .collect();

    let mut all_passed = true;
    for (id, outcome) in evaluated {
        match outcome {
            Err(e) => return Err(e),
            Ok(criteria) => {
                for c in criteria {
                    println!(
                        "{id} {}: {} ({})",
                        c.name,
                        if c.passed { "PASS" } else { "FAIL" },
                        c.detail
                    );
                    all_passed &= c.passed;
                }
            }
        }
    }
    Ok(all_passed)
}

fn cases_worker(id: CaseId, out: &Path) -> Result<Vec<CriterionOutcome>> {
    let sc = cases::scenario(id);
    let result = run(&sc)?;
    write_outputs(&result, &out.join(id.dir_name()))?;
    evaluate_case(id, &result)
}

/// Re-summarizes existing CSV trees: for `out` itself and each direct child
/// directory holding a `timeseries.csv`, recomputes the metrics from the
/// series alone and rewrites `metrics.json`. Participation factors are not
/// recorded in the CSV, so ratio spreads assume uniform weights, and only
/// events visible in the logged columns are recovered.
pub fn report(out: &Path) -> Result<()> {
    let mut targets = Vec::new();
    if out.join("timeseries.csv").is_file() {
        targets.push(out.to_path_buf());
    }
    if out.is_dir() {
        let mut subs: Vec<PathBuf> = fs::read_dir(out)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.join("timeseries.csv").is_file())
            .collect();
        subs.sort();
        targets.extend(subs);
    }
    if targets.is_empty() {
        return Err(Error::validation(
            "--out",
            format!("no timeseries.csv found under {}", out.display()),
        ));
    }
    for dir in targets {
        let mut result = read_csv(&dir.join("timeseries.csv"))?;
        let events = detect_events(&result)?;
        let pf = vec![1.0; result.n_generators];
        result.metrics = compute_metrics(&result, &events, &pf)?;
        fs::write(dir.join("metrics.json"), render_metrics(&result.metrics))?;
        println!(
            "{}: final error {:.3e}, settling {}, {} detected events",
            dir.display(),
            result.metrics.final_v_pp_error,
            match result.metrics.v_pp_settling_time_2pct {
                Some(t) => format!("{t:.1} s"),
                None => "never".to_string(),
            },
            result.metrics.events.len()
        );
    }
    Ok(())
}

/// Reads a `timeseries.csv` back into a result. Firing counters are not
/// part of the CSV and come back as zero.
pub fn read_csv(path: &Path) -> Result<RunResult> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let columns: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if columns.len() < 13 || (columns.len() - 5) % 8 != 0 {
        return Err(Error::validation(
            "timeseries.csv",
            format!("{} columns do not form 5 + 8n", columns.len()),
        ));
    }
    let n = (columns.len() - 5) / 8;
    if columns != column_names(n) {
        return Err(Error::validation(
            "timeseries.csv",
            "unexpected column layout".to_string(),
        ));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row: Vec<f64> = record
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::validation("timeseries.csv", format!("{s:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != columns.len() {
            return Err(Error::validation(
                "timeseries.csv",
                format!("row has {} fields, expected {}", row.len(), columns.len()),
            ));
        }
        rows.push(row);
    }
    Ok(RunResult {
        columns,
        rows,
        n_generators: n,
        inner_firings: 0,
        outer_firings: 0,
        metrics: Metrics::default(),
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::validation("timeseries.csv", format!("{}: {e}", path.display()))
}
