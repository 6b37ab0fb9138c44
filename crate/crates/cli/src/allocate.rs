use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use phm_core::allocator::{allocate_budgeted, heuristic_plan, select_layers, AllocationPlan, ModelManifest, SensitivityProfile};
use phm_core::error::PhmError;
use phm_core::model::{RunConfig, ToyModel};

use crate::{emit, read_json, Globals};

#[derive(Debug, Args)]
pub struct AllocateArgs {
    /// Layer manifest (`model_manifest.json` of a run).
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    /// Run configuration; the manifest of its toy model is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Minimum `d_out·d_in` for a layer to be swapped.
    #[arg(long, default_value_t = 0)]
    pub tau: usize,
    /// Number of top language layers that get `B = 3`.
    #[arg(long = "k", short = 'K', default_value_t = 0)]
    pub k: usize,
    /// Core parameter budget `Σ B·n·m`; needs `--profile`.
    #[arg(long, requires = "profile")]
    pub budget: Option<usize>,
    /// Sensitivity profile (`profile.json` of a run).
    #[arg(long)]
    pub profile: Option<PathBuf>,
}

pub fn load_manifest(args: &AllocateArgs, g: &Globals) -> Result<ModelManifest> {
    match (&args.manifest, &args.config) {
        (Some(p), _) => read_json(p),
        (None, Some(p)) => {
            let mut cfg: RunConfig = read_json(p)?;
            if let Some(seed) = g.seed {
                cfg.model.seed = seed;
            }
            Ok(ToyModel::dense(&cfg.model)?.descriptors())
        }
        (None, None) => bail!(PhmError::Config("allocate needs --manifest or --config".into())),
    }
}

/// Heuristic plan, or the budgeted optimum over the selected layers when
/// `budget` and `profile` are given.
pub fn plan(
    manifest: &ModelManifest,
    tau: usize,
    k: usize,
    budget: Option<usize>,
    profile: Option<&SensitivityProfile>,
) -> Result<AllocationPlan> {
    let mut plan = heuristic_plan(manifest, tau, k)?;
    if let Some(budget) = budget {
        let profile = profile.ok_or_else(|| PhmError::Config("--budget needs --profile".into()))?;
        let selection = select_layers(&manifest.layers, tau);
        let layers: Vec<_> = manifest.layers.iter().filter(|l| selection.contains(&l.index)).cloned().collect();
        plan.assignments = allocate_budgeted(profile, &layers, budget)?;
        plan.budget_total = Some(budget);
    }
    plan.validate(&manifest.layers)?;
    Ok(plan)
}

pub fn run(args: &AllocateArgs, g: &Globals) -> Result<()> {
    let manifest = load_manifest(args, g)?;
    let profile: Option<SensitivityProfile> = args.profile.as_deref().map(read_json).transpose()?;
    let plan = plan(&manifest, args.tau, args.k, args.budget, profile.as_ref())?;
    emit(g.out.as_deref(), &(serde_json::to_string_pretty(&plan)? + "\n"))
}
