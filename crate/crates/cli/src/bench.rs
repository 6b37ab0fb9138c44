use std::hint::black_box;
use std::time::Instant;

use anyhow::Result;
use clap::Args;
use phm_core::error::PhmError;
use phm_core::linalg::SeededRng;
use phm_core::phm::{dense_apply, BasisSet, PhmOperator};

use crate::report::{ReportRow, RunReport};
use crate::{emit, Globals};

pub const WARMUP: usize = 3;

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Shapes as `d` (square) or `d_inxd_out`, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
    pub dims: Vec<String>,
    #[arg(long = "bases", short = 'B', value_delimiter = ',', default_value = "2,3")]
    pub bases: Vec<usize>,
    /// Token counts `N`, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "128")]
    pub tokens: Vec<usize>,
    /// Timed repetitions after the warmup runs.
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
}

pub fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let bad = || PhmError::Dimension(format!("bad shape {s:?}: expected d or d_inxd_out with even sizes"));
    let (a, b) = match s.split_once('x') {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let d: usize = s.trim().parse().map_err(|_| bad())?;
            (d, d)
        }
    };
    if a == 0 || b == 0 || a % 2 != 0 || b % 2 != 0 {
        return Err(bad().into());
    }
    Ok((a, b))
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// `(median, p10, p90)` in nanoseconds over `repeats` runs after the warmup.
fn time(repeats: usize, mut f: impl FnMut()) -> (f64, f64, f64) {
    for _ in 0..WARMUP {
        f();
    }
    let mut ns: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as f64
        })
        .collect();
    ns.sort_by(f64::total_cmp);
    (median(&ns), percentile(&ns, 0.1), percentile(&ns, 0.9))
}

/// One row per `(shape, B, N)`. Rows with `N = 0` are counted but not timed.
pub fn bench(dims: &[(usize, usize)], bases: &[usize], tokens: &[usize], repeats: usize, seed: u64, threads: usize) -> Result<RunReport> {
    let mut rng = SeededRng::new(seed);
    let mut rows = Vec::new();
    for &(d_in, d_out) in dims {
        let w = rng.normal_matrix(d_out, d_in, 1.0 / (d_in as f64).sqrt());
        for &b in bases {
            let basis = BasisSet::new(b)?;
            let cores = (0..b).map(|_| rng.normal_matrix(d_out / 2, d_in / 2, 1.0)).collect();
            let op = PhmOperator::new(basis, cores)?;
            for &n in tokens {
                let mut row = ReportRow::counted(rows.len().to_string(), "bench", Some(b), d_in, d_out, n);
                if n > 0 {
                    let x = rng.normal_matrix(n, d_in, 1.0);
                    let (dm, d10, d90) = time(repeats, || {
                        black_box(dense_apply(black_box(&w), None, black_box(&x)).expect("shapes checked"));
                    });
                    let (pm, p10, p90) = time(repeats, || {
                        black_box(op.apply(black_box(&x)).expect("shapes checked"));
                    });
                    row.wall_ns_dense = Some(dm);
                    row.wall_ns_dense_p10 = Some(d10);
                    row.wall_ns_dense_p90 = Some(d90);
                    row.wall_ns_phm = Some(pm);
                    row.wall_ns_phm_p10 = Some(p10);
                    row.wall_ns_phm_p90 = Some(p90);
                }
                rows.push(row);
            }
        }
    }
    Ok(RunReport::new(rows, threads))
}

pub fn run(args: &BenchArgs, g: &Globals) -> Result<()> {
    let dims = args.dims.iter().map(|s| parse_dims(s)).collect::<Result<Vec<_>>>()?;
    let report = bench(&dims, &args.bases, &args.tokens, args.repeats, g.seed.unwrap_or(0), 1)?;
    if g.threads > 1 {
        eprintln!("note: PHM_THREADS={} requested; kernels run on one thread", g.threads);
    }
    for r in &report.rows {
        if let (Some(d), Some(p)) = (r.wall_ns_dense, r.wall_ns_phm) {
            eprintln!(
                "{}x{} B={} N={}: FLOP ratio {:.4}, measured median {:.3} ms dense / {:.3} ms PHM",
                r.d_out,
                r.d_in,
                r.b.unwrap_or(0),
                r.tokens,
                r.flops_ratio(),
                d / 1e6,
                p / 1e6
            );
        }
    }
    emit(g.out.as_deref(), &report.render(g.format)?)
}
