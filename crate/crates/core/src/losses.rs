//! Objective terms for forgetting: bounded forgetting, retention, group
//! sparsity, prototype regularization, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, softmax_rows, Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lora::{group_norm_var, LoraGroup};
use crate::model::MicroTransformer;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Smoothing constant inside the group norm.
pub const GROUP_NORM_EPS: f64 = 1e-12;

/// Argument order of the prototype divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(σ(P) ‖ σ(h))`
    #[default]
    PrototypeFirst,
    /// `KL(σ(h) ‖ σ(P))`
    LogitFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Group-sparsity weight.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    /// Forgetting-loss weight.
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    /// Weight of the forgotten-class prototype term.
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    /// Bound of the forgetting loss; `2·ln C` when absent.
    #[serde(default)]
    pub bnd_data: Option<f64>,
    /// Bound of the prototype forgetting term; `2·ln C` when absent.
    #[serde(default)]
    pub bnd_pro: Option<f64>,
    #[serde(default)]
    pub prototypes: bool,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

mod defaults {
    pub fn alpha() -> f64 {
        0.01
    }
    pub fn beta() -> f64 {
        0.15
    }
    pub fn gamma() -> f64 {
        0.15
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: defaults::alpha(),
            beta: defaults::beta(),
            gamma: defaults::gamma(),
            bnd_data: None,
            bnd_pro: None,
            prototypes: false,
            kl_direction: KlDirection::PrototypeFirst,
        }
    }
}

impl LossConfig {
    pub fn bnd_data(&self, num_classes: usize) -> f64 {
        self.bnd_data.unwrap_or(2.0 * (num_classes as f64).ln())
    }

    pub fn bnd_pro(&self, num_classes: usize) -> f64 {
        self.bnd_pro.unwrap_or(2.0 * (num_classes as f64).ln())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("loss.{name} must be a finite value >= 0")));
            }
        }
        for (name, v) in [("bnd_data", self.bnd_data), ("bnd_pro", self.bnd_pro)] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::invalid(format!("loss.{name} must be > 0")));
                }
            }
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
    }
    Ok(())
}

/// Mean negative log-softmax probability of the true class.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(labels, g.value(logits).last_dim())?;
    let ls = g.log_softmax(logits);
    let picked = g.pick(ls, labels)?;
    let m = g.mean(picked);
    Ok(g.neg(m))
}

/// `ReLU(bnd − CE)`; lies in `[0, bnd]`.
pub fn forgetting_loss(g: &mut Graph, logits: Var, labels: &[usize], bnd: f64) -> Result<Var> {
    let ce = cross_entropy(g, logits, labels)?;
    let neg = g.neg(ce);
    let shifted = g.add_scalar(neg, bnd);
    Ok(g.relu(shifted))
}

/// Cross-entropy on rehearsal data.
pub fn retention_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    cross_entropy(g, logits, labels)
}

/// `Σ_groups group_norm`, smoothed.
pub fn group_sparse_loss(g: &mut Graph, store: &ParamStore, groups: &[LoraGroup]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for grp in groups {
        let n = group_norm_var(g, store, grp, GROUP_NORM_EPS)?;
        total = Some(match total {
            Some(t) => g.add(t, n)?,
            None => n,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

/// Per-class mean logits of the original model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    prototypes: Vec<Option<Vec<f64>>>,
    counts: Vec<usize>,
}

impl PrototypeTable {
    pub fn new(prototypes: Vec<Option<Vec<f64>>>, counts: Vec<usize>) -> Self {
        PrototypeTable { prototypes, counts }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn get(&self, class: usize) -> Result<&[f64]> {
        self.prototypes
            .get(class)
            .and_then(|p| p.as_deref())
            .ok_or(Error::MissingPrototype(class))
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts.get(class).copied().unwrap_or(0)
    }

    pub fn missing(&self) -> Vec<usize> {
        (0..self.prototypes.len())
            .filter(|&c| self.prototypes[c].is_none())
            .collect()
    }
}

/// `P_c = mean_{x∈S_c} h(x)` over the model's logits. Classes without
/// samples get a missing entry.
pub fn compute_prototypes(model: &MicroTransformer, data: &Dataset) -> Result<PrototypeTable> {
    let c = model.num_classes();
    let mut sums = vec![vec![0.0; c]; c];
    let mut counts = vec![0usize; c];
    if !data.is_empty() {
        let logits = model.logits(&data.to_tensor())?;
        for (r, &y) in data.labels().iter().enumerate() {
            if y >= c {
                return Err(Error::invalid(format!("label {y} outside [0, {c})")));
            }
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(logits.row(r)) {
                *s += v;
            }
        }
    }
    let prototypes = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    Ok(PrototypeTable { prototypes, counts })
}

/// Closed-form `KL(softmax(p) ‖ softmax(q))` for two logit vectors.
pub fn kl_softmax(p: &[f64], q: &[f64]) -> f64 {
    let lp = log_softmax_rows(&Tensor::from_vec(p.to_vec()));
    let lq = log_softmax_rows(&Tensor::from_vec(q.to_vec()));
    lp.data().iter().zip(lq.data()).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Per-row KL between prototype distributions and the model's logits, as a
/// `[n]` node.
fn kl_rows(g: &mut Graph, logits: Var, protos: &Tensor, dir: KlDirection) -> Result<Var> {
    let logq = g.log_softmax(logits);
    let logp = log_softmax_rows(protos);
    match dir {
        KlDirection::PrototypeFirst => {
            let p = softmax_rows(protos);
            let c = protos.last_dim();
            let plogp: Vec<f64> = (0..protos.rows())
                .map(|r| p.row(r).iter().zip(logp.row(r)).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            debug_assert_eq!(p.len(), plogp.len() * c);
            let pv = g.constant(p);
            let cross = g.mul(pv, logq)?;
            let cross = g.sum_axis(cross, 1)?;
            let ent = g.constant(Tensor::from_vec(plogp));
            g.sub(ent, cross)
        }
        KlDirection::LogitFirst => {
            let q = g.exp(logq);
            let lp = g.constant(logp);
            let diff = g.sub(logq, lp)?;
            let prod = g.mul(q, diff)?;
            g.sum_axis(prod, 1)
        }
    }
}

/// Logits for one side of the prototype loss, with their labels.
#[derive(Clone, Copy, Debug)]
pub struct LabeledLogits<'a> {
    pub logits: Var,
    pub labels: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct PrototypeTerms {
    /// Mean KL over retained samples.
    pub retain: Option<Var>,
    /// Mean bounded divergence over forgotten samples (unweighted).
    pub forget: Option<Var>,
    /// `retain + γ·forget`.
    pub total: Var,
}

fn rows_with_prototypes(
    g: &mut Graph,
    side: LabeledLogits<'_>,
    table: &PrototypeTable,
) -> Result<Option<(Var, Tensor)>> {
    let keep: Vec<usize> = side
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| table.get(y).is_ok())
        .map(|(i, _)| i)
        .collect();
    if keep.len() < side.labels.len() {
        log::warn!(
            "skipping {} sample(s) whose class has no prototype",
            side.labels.len() - keep.len()
        );
    }
    if keep.is_empty() {
        return Ok(None);
    }
    let c = g.value(side.logits).last_dim();
    let mut protos = Vec::with_capacity(keep.len() * c);
    for &i in &keep {
        let p = table.get(side.labels[i])?;
        if p.len() != c {
            return Err(Error::Shape {
                op: "prototype_loss",
                lhs: vec![c],
                rhs: vec![p.len()],
            });
        }
        protos.extend_from_slice(p);
    }
    let rows = if keep.len() == side.labels.len() {
        side.logits
    } else {
        g.gather_rows(side.logits, &keep)?
    };
    Ok(Some((rows, Tensor::new(&[keep.len(), c], protos)?)))
}

/// Prototype regularization: pull retained logits toward their prototypes and
/// push forgotten logits away up to `bnd_pro`.
pub fn prototype_loss(
    g: &mut Graph,
    forget: Option<LabeledLogits<'_>>,
    retain: Option<LabeledLogits<'_>>,
    table: &PrototypeTable,
    cfg: &LossConfig,
) -> Result<PrototypeTerms> {
    let mut terms = PrototypeTerms {
        retain: None,
        forget: None,
        total: g.constant(Tensor::scalar(0.0)),
    };
    if let Some(side) = retain {
        if let Some((rows, protos)) = rows_with_prototypes(g, side, table)? {
            let kl = kl_rows(g, rows, &protos, cfg.kl_direction)?;
            terms.retain = Some(g.mean(kl));
        }
    }
    if let Some(side) = forget {
        if let Some((rows, protos)) = rows_with_prototypes(g, side, table)? {
            let bnd = cfg.bnd_pro(protos.last_dim());
            let kl = kl_rows(g, rows, &protos, cfg.kl_direction)?;
            let neg = g.neg(kl);
            let shifted = g.add_scalar(neg, bnd);
            let hinge = g.relu(shifted);
            terms.forget = Some(g.mean(hinge));
        }
    }
    let mut total: Option<Var> = terms.retain;
    if let Some(f) = terms.forget {
        let wf = g.scale(f, cfg.gamma);
        total = Some(match total {
            Some(t) => g.add(t, wf)?,
            None => wf,
        });
    }
    if let Some(t) = total {
        terms.total = t;
    }
    Ok(terms)
}

/// Raw and weighted loss components of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub retain: f64,
    pub forget: f64,
    pub pro_retain: f64,
    pub pro_forget: f64,
    pub structure: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Combines raw terms with the configured weights.
    pub fn from_terms(
        retain: f64,
        forget: f64,
        pro_retain: f64,
        pro_forget: f64,
        structure: f64,
        cfg: &LossConfig,
    ) -> Self {
        let mut b = LossBreakdown {
            retain,
            forget,
            pro_retain,
            pro_forget,
            structure,
            total: 0.0,
        };
        b.total = b.components(cfg).iter().sum();
        b
    }

    pub fn prototype(&self, cfg: &LossConfig) -> f64 {
        if cfg.prototypes {
            self.pro_retain + cfg.gamma * self.pro_forget
        } else {
            0.0
        }
    }

    /// `[ℒ_retain, β·ℒ_forget, ℒ_pro, α·ℒ_structure]`.
    pub fn components(&self, cfg: &LossConfig) -> [f64; 4] {
        [
            self.retain,
            cfg.beta * self.forget,
            self.prototype(cfg),
            cfg.alpha * self.structure,
        ]
    }
}

/// Model outputs that feed the total objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossInputs<'a> {
    pub forget: Option<LabeledLogits<'a>>,
    pub retain: Option<LabeledLogits<'a>>,
}

/// `ℒ_retain + β·ℒ_forget + ℒ_pro + α·ℒ_structure`, as a graph scalar plus the
/// per-term breakdown.
pub fn total_loss(
    g: &mut Graph,
    inputs: LossInputs<'_>,
    store: &ParamStore,
    groups: &[LoraGroup],
    table: Option<&PrototypeTable>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if cfg.prototypes && table.is_none() {
        return Err(Error::invalid("prototype loss enabled but no prototype table given"));
    }
    let mut terms: Vec<Var> = Vec::new();
    let val = |g: &Graph, v: Option<Var>| v.map(|v| g.value(v).item()).unwrap_or(0.0);

    let retain = match inputs.retain {
        Some(side) => Some(retention_loss(g, side.logits, side.labels)?),
        None => None,
    };
    if let Some(r) = retain {
        terms.push(r);
    }
    let forget = match inputs.forget {
        Some(side) => {
            let c = g.value(side.logits).last_dim();
            Some(forgetting_loss(g, side.logits, side.labels, cfg.bnd_data(c))?)
        }
        None => None,
    };
    if let Some(f) = forget {
        terms.push(g.scale(f, cfg.beta));
    }
    let mut pro = None;
    if cfg.prototypes {
        let t = prototype_loss(g, inputs.forget, inputs.retain, table.expect("checked"), cfg)?;
        terms.push(t.total);
        pro = Some(t);
    }
    let structure = if groups.is_empty() {
        None
    } else {
        Some(group_sparse_loss(g, store, groups)?)
    };
    if let Some(s) = structure {
        terms.push(g.scale(s, cfg.alpha));
    }

    let breakdown = LossBreakdown::from_terms(
        val(g, retain),
        val(g, forget),
        val(g, pro.and_then(|p| p.retain)),
        val(g, pro.and_then(|p| p.forget)),
        val(g, structure),
        cfg,
    );
    let mut total = match terms.first() {
        Some(t) => *t,
        None => return Err(Error::invalid("total_loss: no terms to combine")),
    };
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    Ok((total, breakdown))
}
