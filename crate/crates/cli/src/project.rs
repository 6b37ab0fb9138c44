use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use phm_core::linalg::frobenius;
use phm_core::phm::BasisSet;
use phm_core::projection::project;
use phm_core::tensor_file::{self, Tensor};
use serde::{Deserialize, Serialize};

use crate::{publish, require_out, staging_dir, write_json, Globals};

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Dense weight, a rank-2 tensor file of shape `d_out × d_in`.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of bases, 2 or 3.
    #[arg(long = "bases", short = 'B', default_value_t = 2)]
    pub bases: usize,
}

/// `projection.json` in the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    #[serde(rename = "B")]
    pub bases: usize,
    pub d_out: usize,
    pub d_in: usize,
    pub cores: Vec<String>,
    pub frobenius_error: f64,
    pub relative_error: f64,
}

pub fn core_file(b: usize) -> String {
    format!("core_{b}.phmt")
}

/// Writes `core_{b}.phmt` (in the input's dtype) and `projection.json` to
/// the `--out` directory. Nothing is written when the input is rejected.
pub fn run(args: &ProjectArgs, g: &Globals) -> Result<()> {
    let out = require_out(g, "project")?;
    let (tensor, dtype) =
        tensor_file::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let w = tensor.into_matrix()?;
    let basis = BasisSet::new(args.bases)?;
    let result = project(&w, basis)?;
    let norm = frobenius(&w);
    let report = ProjectionReport {
        bases: args.bases,
        d_out: w.rows(),
        d_in: w.cols(),
        cores: (0..args.bases).map(core_file).collect(),
        frobenius_error: result.residual_error,
        relative_error: if norm > 0.0 { result.residual_error / norm } else { 0.0 },
    };

    let tmp = staging_dir(out)?;
    let written = (|| {
        for (b, core) in result.cores.iter().enumerate() {
            tensor_file::write(&tmp.join(core_file(b)), &Tensor::from_matrix(core), dtype)?;
        }
        write_json(&tmp.join("projection.json"), &report)?;
        publish(&tmp, out)
    })();
    if written.is_err() {
        let _ = std::fs::remove_dir_all(&tmp);
    }
    written?;
    eprintln!(
        "projected {}x{} onto B={}: frobenius error {:e}, relative {:e}",
        report.d_out, report.d_in, report.bases, report.frobenius_error, report.relative_error
    );
    Ok(())
}
