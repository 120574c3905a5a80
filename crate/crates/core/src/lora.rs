//! Low-rank adapters on FFN weights and their sparsity groups.
//!
//! Each adapted weight `W` (shape `rows × cols`, applied as `x·W`) gets a pair
//! `B ∈ rows×r`, `A ∈ r×cols` with `ΔW = B·A`. `B` starts at zero so injection
//! never changes the model's outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{FreezeSelector, MicroTransformer};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Weight matrix an adapter edits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Site {
    FfnW1,
    FfnW2,
    AttnQ,
    AttnV,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::FfnW1 => "ffn1",
            Site::FfnW2 => "ffn2",
            Site::AttnQ => "attn_q",
            Site::AttnV => "attn_v",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraPair {
    pub site: Site,
    pub rank: usize,
    /// `rows × r`, zero at creation.
    pub b: ParamId,
    /// `r × cols`, random at creation.
    pub a: ParamId,
}

/// All pairs one task attached to one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub task_id: u32,
    pub block: usize,
    pub pairs: Vec<LoraPair>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingStrategy {
    /// One group per block.
    #[default]
    Block,
    /// One group per adapted weight (`{B, A}` pair).
    Module,
    /// One group per matrix.
    Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    B,
    A,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupTag {
    Block,
    Module(Site),
    Matrix(Site, Factor),
}

/// Unit of sparsity selection. The group norm is `Σ_term ‖concat(term)‖_F`:
/// for the block strategy the terms are all `B`s and all `A`s, which is
/// exactly `‖blockdiag(B₁,B₂)‖_F + ‖[A₁; A₂]‖_F`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraGroup {
    pub task_id: u32,
    pub block: usize,
    pub tag: GroupTag,
    pub terms: Vec<Vec<ParamId>>,
}

impl LoraGroup {
    pub fn label(&self) -> String {
        match self.tag {
            GroupTag::Block => format!("t{}.block{}", self.task_id, self.block),
            GroupTag::Module(s) => format!("t{}.block{}.{}", self.task_id, self.block, s.name()),
            GroupTag::Matrix(s, f) => {
                format!("t{}.block{}.{}.{:?}", self.task_id, self.block, s.name(), f)
            }
        }
    }

    pub fn members(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.terms.iter().flatten().copied()
    }
}

/// Adapter placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default)]
    pub strategy: GroupingStrategy,
    /// Also adapt the attention query/value projections.
    #[serde(default)]
    pub attention: bool,
}

fn default_rank() -> usize {
    8
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: default_rank(),
            strategy: GroupingStrategy::Block,
            attention: false,
        }
    }
}

impl LoraConfig {
    pub fn sites(&self) -> Vec<Site> {
        let mut s = vec![Site::FfnW1, Site::FfnW2];
        if self.attention {
            s.extend([Site::AttnQ, Site::AttnV]);
        }
        s
    }
}

/// Attaches fresh adapters for `task_id` to every block and makes them the
/// only trainable tensors.
pub fn inject_lora(model: &mut MicroTransformer, cfg: &LoraConfig, task_id: u32, seed: u64) -> Result<Vec<LoraGroup>> {
    if model.adapters.iter().any(|a| a.task_id == task_id) || model.merged_tasks.contains(&task_id) {
        return Err(Error::Conflict(format!("task {task_id} already has LoRA groups")));
    }
    let sites = cfg.sites();
    for &site in &sites {
        let shape = model.params().value(model.site_weight(0, site)).shape().to_vec();
        let max = shape[0].min(shape[1]);
        if cfg.rank == 0 || cfg.rank > max {
            return Err(Error::invalid(format!(
                "rank {} out of bounds [1, {max}] for {}",
                cfg.rank,
                site.name()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(task_id) << 32));
    let blocks = model.config().blocks;
    for l in 0..blocks {
        let mut pairs = Vec::with_capacity(sites.len());
        for &site in &sites {
            let shape = model.params().value(model.site_weight(l, site)).shape().to_vec();
            let (rows, cols) = (shape[0], shape[1]);
            let bound = 1.0 / (rows as f64).sqrt();
            let a: Vec<f64> = (0..cfg.rank * cols).map(|_| rng.random_range(-bound..bound)).collect();
            let prefix = format!("lora.t{task_id}.blocks.{l}.{}", site.name());
            let store = model.params_mut();
            let b = store.insert(format!("{prefix}.b"), Tensor::zeros(&[rows, cfg.rank]))?;
            let a = store.insert(format!("{prefix}.a"), Tensor::new(&[cfg.rank, cols], a)?)?;
            pairs.push(LoraPair {
                site,
                rank: cfg.rank,
                b,
                a,
            });
        }
        model.adapters.push(Adapter {
            task_id,
            block: l,
            pairs,
        });
    }
    model.set_freeze(FreezeSelector::LoraOnly);
    Ok(groups_for_task(model, task_id, cfg.strategy))
}

/// Sparsity groups over the unmerged adapters of `task_id`.
pub fn groups_for_task(model: &MicroTransformer, task_id: u32, strategy: GroupingStrategy) -> Vec<LoraGroup> {
    let mut out = Vec::new();
    for ad in model.adapters.iter().filter(|a| a.task_id == task_id) {
        let group = |tag, terms| LoraGroup {
            task_id,
            block: ad.block,
            tag,
            terms,
        };
        match strategy {
            GroupingStrategy::Block => out.push(group(
                GroupTag::Block,
                vec![
                    ad.pairs.iter().map(|p| p.b).collect(),
                    ad.pairs.iter().map(|p| p.a).collect(),
                ],
            )),
            GroupingStrategy::Module => {
                for p in &ad.pairs {
                    out.push(group(GroupTag::Module(p.site), vec![vec![p.b], vec![p.a]]));
                }
            }
            GroupingStrategy::Matrix => {
                for p in &ad.pairs {
                    out.push(group(GroupTag::Matrix(p.site, Factor::B), vec![vec![p.b]]));
                    out.push(group(GroupTag::Matrix(p.site, Factor::A), vec![vec![p.a]]));
                }
            }
        }
    }
    out
}

/// `‖B‖_F + ‖A‖_F` in the blocked layout (exact, unsmoothed).
pub fn group_norm(store: &ParamStore, group: &LoraGroup) -> f64 {
    group
        .terms
        .iter()
        .map(|term| term.iter().map(|id| store.value(*id).sum_sq()).sum::<f64>().sqrt())
        .sum()
}

/// Smoothed group norm recorded in a graph; returns the scalar node.
pub fn group_norm_var(g: &mut Graph, store: &ParamStore, group: &LoraGroup, eps: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for term in &group.terms {
        let vars: Vec<Var> = term.iter().map(|id| g.param(store, *id)).collect();
        let joined = if vars.len() == 1 {
            vars[0]
        } else {
            let flat = vars
                .iter()
                .map(|v| {
                    let n = g.value(*v).len();
                    g.reshape(*v, &[n])
                })
                .collect::<Result<Vec<_>>>()?;
            g.concat(&flat, 0)?
        };
        let n = g.smoothed_l2_norm(joined, eps)?;
        total = Some(match total {
            Some(t) => g.add(t, n)?,
            None => n,
        });
    }
    total.ok_or_else(|| Error::invalid("group has no terms"))
}

/// Fraction of groups whose norm is below `tau`.
pub fn zero_group_ratio(store: &ParamStore, groups: &[LoraGroup], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("zero-group threshold must be > 0, got {tau}")));
    }
    if groups.is_empty() {
        return Ok(0.0);
    }
    let zero = groups.iter().filter(|g| group_norm(store, g) < tau).count();
    Ok(zero as f64 / groups.len() as f64)
}

/// Same as [`zero_group_ratio`] but over precomputed norms.
pub fn zero_ratio_of_norms(norms: &[f64], tau: f64) -> f64 {
    if norms.is_empty() {
        return 0.0;
    }
    norms.iter().filter(|&&n| n < tau).count() as f64 / norms.len() as f64
}

/// Trainable parameter count over total parameter count (adapters included).
pub fn tunable_ratio(model: &MicroTransformer) -> f64 {
    let store = model.params();
    store.trainable_count() as f64 / store.total_count() as f64
}

/// `W + Σ Bᵢ·Aᵢ`, summed in the given order.
pub fn accumulate_low_rank(w: &Tensor, deltas: &[(&Tensor, &Tensor)]) -> Result<Tensor> {
    let mut acc = w.clone();
    for (b, a) in deltas {
        let ba = b.matmul(a)?;
        acc = acc.add(&ba).map_err(|_| Error::Shape {
            op: "effective_weight",
            lhs: w.shape().to_vec(),
            rhs: ba.shape().to_vec(),
        })?;
    }
    Ok(acc)
}

/// Effective `(W1, W2)` of a block's FFN with every unmerged adapter applied
/// in task order.
pub fn effective_weight(model: &MicroTransformer, block: usize) -> Result<(Tensor, Tensor)> {
    let one = |site: Site| {
        let store = model.params();
        let mut ads: Vec<&Adapter> = model.adapters.iter().filter(|a| a.block == block).collect();
        ads.sort_by_key(|a| a.task_id);
        let deltas: Vec<(&Tensor, &Tensor)> = ads
            .iter()
            .flat_map(|a| a.pairs.iter().filter(|p| p.site == site))
            .map(|p| (store.value(p.b), store.value(p.a)))
            .collect();
        accumulate_low_rank(store.value(model.site_weight(block, site)), &deltas)
    };
    Ok((one(Site::FfnW1)?, one(Site::FfnW2)?))
}

/// Folds task `task_id`'s adapters into the base weights and removes them.
pub fn merge_task(model: &mut MicroTransformer, task_id: u32) -> Result<()> {
    if model.merged_tasks.contains(&task_id) {
        return Err(Error::Conflict(format!("task {task_id} is already merged")));
    }
    if !model.adapters.iter().any(|a| a.task_id == task_id) {
        return Err(Error::Conflict(format!("task {task_id} has no LoRA groups to merge")));
    }
    let (mine, rest): (Vec<Adapter>, Vec<Adapter>) = std::mem::take(&mut model.adapters)
        .into_iter()
        .partition(|a| a.task_id == task_id);
    model.adapters = rest;
    for ad in &mine {
        for p in &ad.pairs {
            let w_id = model.site_weight(ad.block, p.site);
            let store = model.params_mut();
            let merged = accumulate_low_rank(store.value(w_id), &[(store.value(p.b), store.value(p.a))])?;
            *store.value_mut(w_id) = merged;
            store.remove(p.b);
            store.remove(p.a);
        }
    }
    model.merged_tasks.push(task_id);
    model.set_freeze(FreezeSelector::All);
    Ok(())
}
