//! Subcommand bodies. Each returns the process exit code.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use halvingpool::checkpoint;
use halvingpool::complexity::{attn_mults, compare, pyramid_memory, pyramid_memory_closed_form, Architecture};
use halvingpool::model::Model;
use halvingpool::train::{train_toy, TrainReport};

use crate::bench;
use crate::config::{BenchConfig, ComplexityConfig, GradCheckConfig, TrainToyConfig};
use crate::suite::{self, SuiteConfig};

pub type CmdResult = Result<i32, Box<dyn std::error::Error>>;

fn write_output(path: Option<&Path>, text: &str) -> std::io::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text),
        None => std::io::stdout().lock().write_all(text.as_bytes()),
    }
}

fn fail_on_write(path: &Path, e: std::io::Error) -> Box<dyn std::error::Error> {
    format!("cannot write {}: {e}", path.display()).into()
}

/// Creates (truncates) the output file before any work so that an
/// unwritable path fails fast.
fn probe_output(path: Option<&Path>) -> CmdResult {
    if let Some(p) = path {
        std::fs::write(p, "").map_err(|e| fail_on_write(p, e))?;
    }
    Ok(0)
}

fn emit(path: Option<&Path>, text: &str) -> CmdResult {
    write_output(path, text).map_err(|e| match path {
        Some(p) => fail_on_write(p, e),
        None => e.into(),
    })?;
    Ok(0)
}

pub fn topk_bench(cfg: &BenchConfig) -> CmdResult {
    probe_output(cfg.out.as_deref())?;
    let rows = bench::run(cfg)?;
    emit(cfg.out.as_deref(), &bench::to_csv(&rows))
}

pub fn grad_check(cfg: &GradCheckConfig) -> CmdResult {
    probe_output(cfg.out.as_deref())?;
    let reports = suite::run(&SuiteConfig {
        seeds: cfg.seeds,
        op_tolerance: cfg.op_tolerance,
        model_tolerance: cfg.tolerance,
        seed: cfg.seed,
        inject_fault: cfg.inject_fault.clone(),
    })?;
    let csv = suite::to_csv(&reports);
    if let Some(p) = &cfg.out {
        emit(Some(p), &csv)?;
    }
    if cfg.csv {
        emit(None, &csv)?;
    } else {
        let mut table = format!("{:<22} {:>6} {:>7} {:>12} {:>10}  result\n", "check", "seeds", "skipped", "max error", "tolerance");
        for r in &reports {
            let _ = writeln!(
                table,
                "{:<22} {:>6} {:>7} {:>12.3e} {:>10.0e}  {}",
                r.name,
                r.seeds_checked,
                r.seeds_skipped,
                r.max_rel_error,
                r.tolerance,
                if r.pass() { "ok" } else { "FAIL" }
            );
        }
        emit(None, &table)?;
    }
    let failures: Vec<_> = reports.iter().filter(|r| !r.pass()).collect();
    for r in &failures {
        eprintln!(
            "gradient check failed: {} max relative error {:e} (tolerance {:e})",
            r.name, r.max_rel_error, r.tolerance
        );
    }
    Ok(if failures.is_empty() { 0 } else { 1 })
}

pub const COMPLEXITY_HEADER: &str = "section,item,value";

/// Long-format rows: both itemized reports, their ratios and, for a
/// pyramidion variant with power-of-two sizes, the memory footprint.
pub fn complexity_rows(cfg: &ComplexityConfig) -> halvingpool::Result<Vec<(String, String, String)>> {
    let base = attn_mults(&cfg.baseline)?;
    let var = attn_mults(&cfg.variant)?;
    let mut rows = Vec::new();
    for (section, report) in [("baseline", &base), ("variant", &var)] {
        for (item, value) in report.items() {
            rows.push((section.to_string(), item.to_string(), value.to_string()));
        }
    }
    for r in compare(&base, &var) {
        rows.push(("ratio".to_string(), r.item.to_string(), r.ratio.to_string()));
    }
    let v = &cfg.variant;
    if v.arch == Architecture::Pyramidion && v.n.is_power_of_two() && v.k.is_power_of_two() && v.m.is_power_of_two() {
        rows.push(("memory".into(), "pyramid_sum".into(), pyramid_memory(v.n, v.k, v.m, v.d)?.to_string()));
        rows.push((
            "memory".into(),
            "pyramid_closed_form".into(),
            pyramid_memory_closed_form(v.n, v.k, v.m, v.d).to_string(),
        ));
    }
    Ok(rows)
}

pub fn complexity(cfg: &ComplexityConfig) -> CmdResult {
    let rows = complexity_rows(cfg)?;
    let mut csv = format!("{COMPLEXITY_HEADER}\n");
    for (s, i, v) in &rows {
        let _ = writeln!(csv, "{s},{i},{v}");
    }
    if let Some(p) = &cfg.out {
        emit(Some(p), &csv)?;
    }
    if cfg.csv {
        return emit(None, &csv);
    }
    let name = |a: Architecture| format!("{a:?}").to_lowercase();
    let mut table = format!(
        "{:<24} {:>22} {:>22} {:>10}\n",
        "item",
        name(cfg.baseline.arch),
        name(cfg.variant.arch),
        "ratio"
    );
    let base = attn_mults(&cfg.baseline)?;
    let var = attn_mults(&cfg.variant)?;
    for r in compare(&base, &var) {
        let _ = writeln!(table, "{:<24} {:>22} {:>22} {:>10.4}", r.item, r.baseline, r.variant, r.ratio);
    }
    for (_, item, value) in rows.iter().filter(|r| r.0 == "memory") {
        let _ = writeln!(table, "{item:<24} {value:>22}");
    }
    emit(None, &table)
}

pub const TRAIN_HEADER: &str = "step,loss,auc,seq_accuracy";

pub fn train_csv(report: &TrainReport) -> String {
    let mut out = format!("{TRAIN_HEADER}\n");
    for row in &report.log {
        let auc = row.eval.auc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", row.step, row.eval.loss, auc, row.eval.seq_accuracy);
    }
    out
}

pub fn train(cfg: &TrainToyConfig) -> CmdResult {
    probe_output(cfg.out.as_deref())?;
    let mut model = Model::new(cfg.model.clone())?;
    let report = train_toy(&mut model, &cfg.task, &cfg.train)?;
    if let Some(p) = &cfg.checkpoint {
        checkpoint::save(&model, p)?;
    }
    emit(cfg.out.as_deref(), &train_csv(&report))
}
