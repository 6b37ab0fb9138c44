//! Per-layer parameter/FLOP tables and the `report` subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use phm_core::allocator::{accounting, AllocationPlan, LayerKind, ModelManifest};
use phm_core::model::train::Stage;
use phm_core::model::LogRecord;
use phm_core::phm::{dense_flops, phm_combine_constant, phm_flops};
use serde::{Deserialize, Serialize};

use crate::train::{RunSummary, LOG, MANIFEST, PLAN, SUMMARY};
use crate::{emit, read_json, Format, Globals};

/// One row of a [`RunReport`]. FLOP columns are counted; wall-time columns
/// are measured medians (with 10th/90th percentiles) and empty when the row
/// was not timed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: String,
    pub kind: String,
    #[serde(rename = "B")]
    pub b: Option<usize>,
    pub d_in: usize,
    pub d_out: usize,
    pub tokens: usize,
    pub params_dense: usize,
    pub params_phm: usize,
    pub flops_dense: usize,
    pub flops_phm: usize,
    /// `c` in the combine term `c·N·(d_in + d_out)` of `flops_phm`.
    pub combine_c: f64,
    pub wall_ns_dense: Option<f64>,
    pub wall_ns_phm: Option<f64>,
    pub wall_ns_dense_p10: Option<f64>,
    pub wall_ns_dense_p90: Option<f64>,
    pub wall_ns_phm_p10: Option<f64>,
    pub wall_ns_phm_p90: Option<f64>,
}

impl ReportRow {
    /// Untimed row for a linear map of the given shape; `b = None` keeps it dense.
    pub fn counted(layer: String, kind: &str, b: Option<usize>, d_in: usize, d_out: usize, tokens: usize) -> Self {
        let dense = d_in * d_out;
        let fd = dense_flops(tokens, d_in, d_out);
        let (params_phm, flops_phm, combine_c) = match b {
            Some(b) => (b * (d_in / 2) * (d_out / 2), phm_flops(b, tokens, d_in, d_out), phm_combine_constant(b, d_in, d_out)),
            None => (dense, fd, 0.0),
        };
        Self {
            layer,
            kind: kind.to_string(),
            b,
            d_in,
            d_out,
            tokens,
            params_dense: dense,
            params_phm,
            flops_dense: fd,
            flops_phm,
            combine_c,
            wall_ns_dense: None,
            wall_ns_phm: None,
            wall_ns_dense_p10: None,
            wall_ns_dense_p90: None,
            wall_ns_phm_p10: None,
            wall_ns_phm_p90: None,
        }
    }

    pub fn flops_ratio(&self) -> f64 {
        ratio(self.flops_phm, self.flops_dense)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub params_dense: usize,
    pub params_phm: usize,
    pub flops_dense: usize,
    pub flops_phm: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Kernel threads used for the wall-time columns.
    pub threads: usize,
    pub rows: Vec<ReportRow>,
    pub totals: Totals,
    /// `Σ params_phm / Σ params_dense`
    pub rho: f64,
    pub flops_ratio: f64,
}

const CSV_HEADER: &str = "layer,kind,B,d_in,d_out,tokens,params_dense,params_phm,flops_dense,flops_phm,combine_c,\
wall_ns_dense,wall_ns_phm,wall_ns_dense_p10,wall_ns_dense_p90,wall_ns_phm_p10,wall_ns_phm_p90,params_ratio,flops_ratio";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl RunReport {
    pub fn new(rows: Vec<ReportRow>, threads: usize) -> Self {
        let mut t = Totals::default();
        for r in &rows {
            t.params_dense += r.params_dense;
            t.params_phm += r.params_phm;
            t.flops_dense += r.flops_dense;
            t.flops_phm += r.flops_phm;
        }
        Self {
            threads,
            rows,
            totals: t,
            rho: ratio(t.params_phm, t.params_dense),
            flops_ratio: ratio(t.flops_phm, t.flops_dense),
        }
    }

    /// One line per row plus a `total` line whose ratio columns hold `ρ` and
    /// the overall FLOP ratio. Floats use the shortest exact representation,
    /// so the numbers match the JSON rendering.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.layer,
                r.kind,
                opt(r.b),
                r.d_in,
                r.d_out,
                r.tokens,
                r.params_dense,
                r.params_phm,
                r.flops_dense,
                r.flops_phm,
                r.combine_c,
                opt(r.wall_ns_dense),
                opt(r.wall_ns_phm),
                opt(r.wall_ns_dense_p10),
                opt(r.wall_ns_dense_p90),
                opt(r.wall_ns_phm_p10),
                opt(r.wall_ns_phm_p90),
                ratio(r.params_phm, r.params_dense),
                r.flops_ratio(),
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "total,total,,,,,{},{},{},{},,,,,,,,{},{}",
            t.params_dense, t.params_phm, t.flops_dense, t.flops_phm, self.rho, self.flops_ratio
        );
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Csv => Ok(self.to_csv()),
            Format::Json => self.to_json(),
        }
    }
}

fn kind_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Ffn => "ffn",
        LayerKind::Attention => "attention",
        LayerKind::Embedding => "embedding",
        LayerKind::Head => "head",
        LayerKind::Projector => "projector",
    }
}

/// Table for a trained model: one row per linear map (embedding lookups
/// count zero FLOPs), plus `lora` and `other` rows so that the totals
/// reproduce the accounting exactly.
pub fn model_report(plan: &AllocationPlan, manifest: &ModelManifest, summary: &RunSummary) -> RunReport {
    let n = summary.flop_tokens;
    let mut rows = Vec::new();
    for l in &manifest.layers {
        let mut row = ReportRow::counted(l.index.to_string(), kind_name(l.kind), plan.basis_for(l.index), l.d_in, l.d_out, n);
        if l.kind == LayerKind::Embedding {
            row.flops_dense = 0;
            row.flops_phm = 0;
        }
        rows.push(row);
    }
    let extra = |name: &str, dense: usize, phm: usize| ReportRow {
        params_dense: dense,
        params_phm: phm,
        flops_dense: 0,
        flops_phm: 0,
        ..ReportRow::counted(name.to_string(), name, None, 0, 0, n)
    };
    rows.push(extra("lora", 0, summary.extras.lora));
    rows.push(extra("other", summary.extras.other, summary.extras.other));
    RunReport::new(rows, 1)
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Finished (or diverged) run directory written by `phm train`.
    #[arg(long)]
    pub run: PathBuf,
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l).map_err(phm_core::error::PhmError::from)?))
        .collect()
}

fn fmt_count(v: usize) -> String {
    if v >= 1_000_000 {
        format!("{:.3}M", v as f64 / 1e6)
    } else if v >= 10_000 {
        format!("{:.1}k", v as f64 / 1e3)
    } else {
        v.to_string()
    }
}

pub fn markdown(report: &RunReport, summary: &RunSummary, log: &[LogRecord]) -> String {
    let mut s = String::new();
    let t = &report.totals;
    let _ = writeln!(s, "# Run summary\n");
    let _ = writeln!(s, "status: {}", summary.status);
    if let Some(e) = &summary.error {
        let _ = writeln!(s, "error: {e}");
    }
    let _ = writeln!(s, "\n| | base → ours |\n|---|---|");
    let _ = writeln!(s, "| params | {} → {} |", fmt_count(t.params_dense), fmt_count(t.params_phm));
    let _ = writeln!(s, "| FLOPs ({} tokens) | {} → {} |", summary.flop_tokens, fmt_count(t.flops_dense), fmt_count(t.flops_phm));
    let _ = writeln!(s, "| ρ | {} |", report.rho);
    let _ = writeln!(s, "| FLOP ratio | {:.4} |", report.flops_ratio);

    let _ = writeln!(s, "\n## Swapped layers\n");
    let _ = writeln!(s, "| layer | d_out × d_in | B | params base → ours | FLOPs base → ours |\n|---|---|---|---|---|");
    for r in report.rows.iter().filter(|r| r.b.is_some()) {
        let _ = writeln!(
            s,
            "| {} | {} × {} | {} | {} → {} | {} → {} |",
            r.layer,
            r.d_out,
            r.d_in,
            opt(r.b),
            fmt_count(r.params_dense),
            fmt_count(r.params_phm),
            fmt_count(r.flops_dense),
            fmt_count(r.flops_phm)
        );
    }
    let _ = writeln!(s, "\nPHM FLOPs count `B·N·d_in·d_out` for the block products plus `(B−1)·N·d_out` additions to combine them.");

    let _ = writeln!(s, "\n## Validation\n");
    for (name, st) in [("Stage A", &summary.stage_a), ("Stage B", &summary.stage_b)] {
        if let Some(st) = st {
            let _ = writeln!(
                s,
                "{name}: {} steps, PHM-only val CE {} → {}, selected step {} ({})",
                st.steps,
                opt(st.initial_val_ce_phm.map(|v| format!("{v:.4}"))),
                opt(st.final_val_ce_phm.map(|v| format!("{v:.4}"))),
                opt(st.selected_step),
                opt(st.selected_val_ce_phm.map(|v| format!("{v:.4}"))),
            );
        }
    }
    let evals: Vec<&LogRecord> = log.iter().filter(|r| r.val_ce_phm.is_some()).collect();
    if !evals.is_empty() {
        let _ = writeln!(s, "\n| stage | step | α | λ | CE | KD | recon | val CE (PHM) | val CE (blend) |\n|---|---|---|---|---|---|---|---|---|");
        for r in evals {
            let stage = match r.stage {
                Stage::Pretrain => "pretrain",
                Stage::A => "A",
                Stage::B => "B",
            };
            let _ = writeln!(
                s,
                "| {stage} | {} | {:.3} | {:.3} | {:.4} | {:.4} | {:.4} | {} | {} |",
                r.step + 1,
                r.alpha,
                r.lambda,
                r.ce,
                r.kd,
                r.recon,
                opt(r.val_ce_phm.map(|v| format!("{v:.4}"))),
                opt(r.val_ce_blend.map(|v| format!("{v:.4}"))),
            );
        }
    }
    s
}

/// Prints the markdown summary and writes the table to `--out`, or to
/// `report.csv` / `report.json` inside the run directory.
pub fn run(args: &ReportArgs, g: &Globals) -> Result<()> {
    let summary: RunSummary = read_json(&args.run.join(SUMMARY))?;
    let plan: AllocationPlan = read_json(&args.run.join(PLAN))?;
    let manifest: ModelManifest = read_json(&args.run.join(MANIFEST))?;
    let log = read_log(&args.run.join(LOG))?;
    let report = model_report(&plan, &manifest, &summary);
    let check = accounting(&plan, &manifest.layers, summary.extras);
    if check.params_after != report.totals.params_phm || check.params_before != report.totals.params_dense {
        anyhow::bail!("run report totals disagree with the plan accounting");
    }
    print!("{}", markdown(&report, &summary, &log));
    let table = report.render(g.format)?;
    let default = args.run.join(match g.format {
        Format::Csv => "report.csv",
        Format::Json => "report.json",
    });
    emit(Some(g.out.as_deref().unwrap_or(&default)), &table)
}
