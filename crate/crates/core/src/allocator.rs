//! Which layers become PHM, and with how many bases.
//!
//! Three pieces: the eligibility filter (FFN linears above a size threshold),
//! the top-K heuristic that gives `B = 3` to the layers closest to the output
//! head, and a budgeted program that trades approximation risk
//! `Φ_ℓ(B) = tr(F_ℓ)·ε_ℓ(B)` against parameters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{PhmError, Result};
use crate::linalg::Matrix;
use crate::phm::BasisSet;
use crate::projection::projection_error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Ffn,
    Attention,
    Embedding,
    Head,
    Projector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    /// Unique id of the linear map.
    pub index: usize,
    /// Transformer block the map belongs to (0 = closest to the input).
    pub depth: usize,
    pub kind: LayerKind,
    pub d_in: usize,
    pub d_out: usize,
    #[serde(default)]
    pub is_language_mlp: bool,
}

impl LayerDescriptor {
    pub fn weight_params(&self) -> usize {
        self.d_in * self.d_out
    }

    pub fn is_even(&self) -> bool {
        self.d_in % 2 == 0 && self.d_out % 2 == 0 && self.d_in > 0 && self.d_out > 0
    }

    /// `n·m`, the cost of one basis.
    pub fn core_size(&self) -> usize {
        (self.d_in / 2) * (self.d_out / 2)
    }
}

/// Layer list plus the depth of the language stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub l_lang: usize,
    pub layers: Vec<LayerDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub tau: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub l_lang: usize,
    pub t_star: usize,
    #[serde(rename = "budget")]
    pub budget_total: Option<usize>,
    #[serde(with = "assignments")]
    pub assignments: BTreeMap<usize, usize>,
}

mod assignments {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        layer: usize,
        #[serde(rename = "B")]
        b: usize,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<usize, usize>, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Entry> = map.iter().map(|(&layer, &b)| Entry { layer, b }).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, usize>, D::Error> {
        let v = Vec::<Entry>::deserialize(d)?;
        Ok(v.into_iter().map(|e| (e.layer, e.b)).collect())
    }
}

impl AllocationPlan {
    /// Plan that swaps nothing.
    pub fn empty(l_lang: usize) -> Self {
        Self { tau: usize::MAX, k: 0, l_lang, t_star: l_lang, budget_total: None, assignments: BTreeMap::new() }
    }

    pub fn selection(&self) -> BTreeSet<usize> {
        self.assignments.keys().copied().collect()
    }

    pub fn basis_for(&self, layer: usize) -> Option<usize> {
        self.assignments.get(&layer).copied()
    }

    /// Checks selection eligibility, basis counts and the budget.
    pub fn validate(&self, layers: &[LayerDescriptor]) -> Result<()> {
        let by_index: BTreeMap<usize, &LayerDescriptor> = layers.iter().map(|l| (l.index, l)).collect();
        let mut cost = 0;
        for (&idx, &b) in &self.assignments {
            let l = by_index
                .get(&idx)
                .ok_or_else(|| PhmError::Config(format!("plan references unknown layer {idx}")))?;
            BasisSet::new(b)?;
            if l.kind != LayerKind::Ffn || !l.is_even() || l.weight_params() < self.tau {
                return Err(PhmError::Config(format!("layer {idx} is not eligible for PHM")));
            }
            cost += b * l.core_size();
        }
        if let Some(budget) = self.budget_total {
            if cost > budget {
                return Err(PhmError::Infeasible(format!("plan uses {cost} > budget {budget}")));
            }
        }
        Ok(())
    }
}

/// `{ℓ : d_out·d_in ≥ τ, ℓ is FFN, dims even}`
pub fn select_layers(layers: &[LayerDescriptor], tau: usize) -> BTreeSet<usize> {
    layers
        .iter()
        .filter(|l| l.kind == LayerKind::Ffn && l.is_even() && l.weight_params() >= tau)
        .map(|l| l.index)
        .collect()
}

/// `B = 3` for selected language MLPs with depth `≥ L_lang − K`, else `B = 2`.
pub fn assign_bases_heuristic(
    layers: &[LayerDescriptor],
    selection: &BTreeSet<usize>,
    l_lang: usize,
    k: usize,
) -> Result<BTreeMap<usize, usize>> {
    if k > l_lang {
        return Err(PhmError::Config(format!("K = {k} exceeds L_lang = {l_lang}")));
    }
    let t_star = l_lang - k;
    Ok(layers
        .iter()
        .filter(|l| selection.contains(&l.index))
        .map(|l| {
            let b = if l.is_language_mlp && l.depth >= t_star { 3 } else { 2 };
            (l.index, b)
        })
        .collect())
}

/// Threshold selection followed by the top-K heuristic.
pub fn heuristic_plan(manifest: &ModelManifest, tau: usize, k: usize) -> Result<AllocationPlan> {
    let selection = select_layers(&manifest.layers, tau);
    let assignments = assign_bases_heuristic(&manifest.layers, &selection, manifest.l_lang, k)?;
    Ok(AllocationPlan {
        tau,
        k,
        l_lang: manifest.l_lang,
        t_star: manifest.l_lang - k,
        budget_total: None,
        assignments,
    })
}

/// Per-layer Fisher traces and best-subspace errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub traces: BTreeMap<usize, f64>,
    /// `ε_ℓ(2)` and `ε_ℓ(3)`
    pub errors: BTreeMap<usize, [f64; 2]>,
}

impl SensitivityProfile {
    /// Fills in `ε_ℓ(B)` by projecting each dense weight.
    pub fn from_weights(traces: BTreeMap<usize, f64>, weights: &BTreeMap<usize, &Matrix>) -> Result<Self> {
        let mut errors = BTreeMap::new();
        for (&idx, w) in weights {
            let e2 = projection_error(w, BasisSet::new(2)?)?;
            let e3 = projection_error(w, BasisSet::new(3)?)?;
            errors.insert(idx, [e2, e3]);
        }
        Ok(Self { traces, errors })
    }

    /// `Φ_ℓ(B) = tr(F_ℓ)·ε_ℓ(B)`
    pub fn phi(&self, layer: usize, b: usize) -> Result<f64> {
        let trace = self
            .traces
            .get(&layer)
            .ok_or_else(|| PhmError::Config(format!("no Fisher trace for layer {layer}")))?;
        let e = self
            .errors
            .get(&layer)
            .ok_or_else(|| PhmError::Config(format!("no projection error for layer {layer}")))?;
        match b {
            2 => Ok(trace * e[0]),
            3 => Ok(trace * e[1]),
            _ => Err(PhmError::Basis(format!("no surrogate for B = {b}"))),
        }
    }

    pub fn objective(&self, assignment: &BTreeMap<usize, usize>) -> Result<f64> {
        assignment.iter().map(|(&l, &b)| self.phi(l, b)).sum()
    }
}

/// Diagonal empirical-Fisher trace: mean over samples of `Σ g²` for each
/// layer, where `grads(s)` returns the per-layer log-likelihood gradients of
/// sample `s`.
pub fn fisher_trace_estimate<F>(samples: usize, mut grads: F) -> Result<BTreeMap<usize, f64>>
where
    F: FnMut(usize) -> Result<Vec<(usize, Matrix)>>,
{
    if samples == 0 {
        return Err(PhmError::Config("Fisher estimation needs at least one sample".into()));
    }
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for s in 0..samples {
        for (layer, g) in grads(s)? {
            *acc.entry(layer).or_insert(0.0) += g.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    for v in acc.values_mut() {
        *v /= samples as f64;
    }
    Ok(acc)
}

struct Item {
    layer: usize,
    gain: f64,
    cost: usize,
}

/// Solves `min Σ Φ_ℓ(B_ℓ) s.t. Σ B_ℓ n_ℓ m_ℓ ≤ 𝓑` over the given layers.
///
/// Starts from all `B = 2` and upgrades layers in decreasing order of
/// `(Φ_ℓ(2) − Φ_ℓ(3)) / (n_ℓ m_ℓ)` while they fit. With equal upgrade costs
/// (the usual case: every FFN linear of a stack has the same shape) this is
/// optimal. For mixed costs the greedy result is checked against an exact
/// branch-and-bound solve and replaced when it is beaten.
pub fn allocate_budgeted(
    profile: &SensitivityProfile,
    layers: &[LayerDescriptor],
    budget: usize,
) -> Result<BTreeMap<usize, usize>> {
    let floor: usize = layers.iter().map(|l| 2 * l.core_size()).sum();
    if budget < floor {
        return Err(PhmError::Infeasible(format!(
            "budget {budget} is below the all-B=2 cost {floor}"
        )));
    }
    let mut items = Vec::with_capacity(layers.len());
    for l in layers {
        if !l.is_even() {
            return Err(PhmError::Config(format!("layer {} has odd dimensions", l.index)));
        }
        let gain = profile.phi(l.index, 2)? - profile.phi(l.index, 3)?;
        items.push(Item { layer: l.index, gain: gain.max(0.0), cost: l.core_size() });
    }
    // ratio order, ties broken by layer index for determinism
    items.sort_by(|a, b| {
        let ra = a.gain / a.cost as f64;
        let rb = b.gain / b.cost as f64;
        rb.total_cmp(&ra).then(a.layer.cmp(&b.layer))
    });
    let spare = budget - floor;

    let mut remaining = spare;
    let mut greedy = vec![false; items.len()];
    for (i, it) in items.iter().enumerate() {
        if it.cost <= remaining {
            greedy[i] = true;
            remaining -= it.cost;
        }
    }
    let greedy_gain: f64 = items.iter().zip(&greedy).filter(|(_, &t)| t).map(|(it, _)| it.gain).sum();

    let uniform = items.windows(2).all(|w| w[0].cost == w[1].cost);
    let chosen = if uniform {
        greedy
    } else {
        let (best_gain, best) = knapsack_exact(&items, spare);
        let tol = 1e-12 * best_gain.abs().max(1.0);
        if best_gain > greedy_gain + tol {
            best
        } else {
            greedy
        }
    };
    Ok(items.iter().zip(chosen).map(|(it, up)| (it.layer, if up { 3 } else { 2 })).collect())
}

/// Exact 0/1 knapsack by depth-first branch and bound with the fractional
/// relaxation as the bound. `items` must be sorted by decreasing ratio.
fn knapsack_exact(items: &[Item], capacity: usize) -> (f64, Vec<bool>) {
    struct Search<'a> {
        items: &'a [Item],
        best_gain: f64,
        best: Vec<bool>,
        current: Vec<bool>,
    }

    impl Search<'_> {
        fn bound(&self, from: usize, mut cap: usize, gain: f64) -> f64 {
            let mut g = gain;
            for it in &self.items[from..] {
                if it.cost <= cap {
                    cap -= it.cost;
                    g += it.gain;
                } else {
                    g += it.gain * cap as f64 / it.cost as f64;
                    break;
                }
            }
            g
        }

        fn dfs(&mut self, i: usize, cap: usize, gain: f64) {
            if gain > self.best_gain {
                self.best_gain = gain;
                self.best.clone_from(&self.current);
            }
            if i == self.items.len() || self.bound(i, cap, gain) <= self.best_gain {
                return;
            }
            let it = &self.items[i];
            if it.cost <= cap {
                self.current[i] = true;
                self.dfs(i + 1, cap - it.cost, gain + it.gain);
                self.current[i] = false;
            }
            self.dfs(i + 1, cap, gain);
        }
    }

    let mut s = Search { items, best_gain: 0.0, best: vec![false; items.len()], current: vec![false; items.len()] };
    s.dfs(0, capacity, 0.0);
    (s.best_gain, s.best)
}

/// Parameters outside the swappable linears.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtraParams {
    /// LoRA factors, `r·(d_in + d_out)` per adapted projection.
    pub lora: usize,
    /// Biases, norms and anything else that is never factorized.
    pub other: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingRow {
    pub layer: usize,
    pub kind: LayerKind,
    pub b: Option<usize>,
    pub params_dense: usize,
    pub params_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub rows: Vec<AccountingRow>,
    pub params_before: usize,
    pub params_after: usize,
    pub rho: f64,
}

/// `|Θ′| = Σ_{ℓ∉𝒮} 4n_ℓm_ℓ + Σ_{ℓ∈𝒮} B_ℓ n_ℓ m_ℓ + LoRA + rest`, and
/// `ρ = |Θ′| / |Θ|` where `|Θ|` is the unadapted dense model.
pub fn accounting(plan: &AllocationPlan, layers: &[LayerDescriptor], extras: ExtraParams) -> Accounting {
    let mut rows = Vec::with_capacity(layers.len());
    let (mut before, mut after) = (extras.other, extras.other + extras.lora);
    for l in layers {
        let dense = l.weight_params();
        let b = plan.basis_for(l.index);
        let now = match b {
            Some(b) => b * l.core_size(),
            None => dense,
        };
        before += dense;
        after += now;
        rows.push(AccountingRow { layer: l.index, kind: l.kind, b, params_dense: dense, params_after: now });
    }
    let rho = if before == 0 { 1.0 } else { after as f64 / before as f64 };
    Accounting { rows, params_before: before, params_after: after, rho }
}
