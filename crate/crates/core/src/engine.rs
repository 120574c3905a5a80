//! Task sequencer: per-task adapter injection, mixed-batch optimization,
//! merge, and evaluation, plus the comparison baselines.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{sample_batch, Dataset, ForgettingScenario};
use crate::error::{Error, Result};
use crate::lora::{group_norm, inject_lora, merge_task, tunable_ratio, zero_ratio_of_norms, LoraConfig, LoraGroup};
use crate::losses::{
    compute_prototypes, cross_entropy, forgetting_loss, total_loss, LabeledLogits, LossBreakdown, LossConfig,
    LossInputs, PrototypeTable,
};
use crate::metrics::{h_mean, old_accuracy, MetricRecord, Predictions};
use crate::model::{FreezeSelector, MicroTransformer};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// How the group-sparsity term is optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsityMode {
    /// After each optimizer step, shrink every group term by
    /// `prox_step·α` in norm (block soft-thresholding). The penalty is left
    /// out of the gradient.
    #[default]
    Proximal,
    /// Differentiate the smoothed penalty along with the other terms.
    Subgradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityConfig {
    #[serde(default)]
    pub mode: SparsityMode,
    #[serde(default = "task_defaults::prox_step")]
    pub prox_step: f64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        SparsityConfig {
            mode: SparsityMode::Proximal,
            prox_step: task_defaults::prox_step(),
        }
    }
}

/// Settings shared by every task of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default = "task_defaults::iterations")]
    pub iterations: usize,
    #[serde(default = "task_defaults::batch")]
    pub batch_forget: usize,
    #[serde(default = "task_defaults::batch")]
    pub batch_retain: usize,
    #[serde(default = "task_defaults::optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub sparsity: SparsityConfig,
    /// Groups with norm below this count as zero.
    #[serde(default = "task_defaults::zero_threshold")]
    pub zero_threshold: f64,
}

mod task_defaults {
    use crate::optim::OptimizerConfig;
    pub fn iterations() -> usize {
        100
    }
    pub fn batch() -> usize {
        16
    }
    pub fn optimizer() -> OptimizerConfig {
        OptimizerConfig::adam(1e-2)
    }
    pub fn zero_threshold() -> f64 {
        1e-3
    }
    pub fn prox_step() -> f64 {
        1.0
    }
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            iterations: task_defaults::iterations(),
            batch_forget: task_defaults::batch(),
            batch_retain: task_defaults::batch(),
            optimizer: task_defaults::optimizer(),
            lora: LoraConfig::default(),
            loss: LossConfig::default(),
            sparsity: SparsityConfig::default(),
            zero_threshold: task_defaults::zero_threshold(),
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.batch_forget == 0 {
            return Err(Error::invalid("forget batch size must be at least 1"));
        }
        if !(self.zero_threshold > 0.0) {
            return Err(Error::invalid("zero threshold must be positive"));
        }
        if !(self.sparsity.prox_step >= 0.0) || !self.sparsity.prox_step.is_finite() {
            return Err(Error::invalid("prox_step must be finite and >= 0"));
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

/// Loss breakdown of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskResult {
    pub task_id: u32,
    pub log: Vec<IterationLog>,
    /// `(label, norm)` of each group just before merging.
    pub group_norms: Vec<(String, f64)>,
    pub zero_group_ratio: f64,
    pub tunable_ratio: f64,
    pub checksum_before: String,
    pub checksum_after: String,
    pub wall_ms: u64,
}

fn task_rng(seed: u64, task_id: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ u64::from(task_id))
}

/// Stacks two `[n, d]` batches row-wise.
fn stack(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = a.last_dim();
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(&[a.rows() + b.rows(), d], data)
}

/// Mixed batch: `bf` forget samples then `br` retain samples.
struct MixedBatch {
    x: Tensor,
    yf: Vec<usize>,
    yr: Vec<usize>,
}

fn draw(forget: &Dataset, retain: &Dataset, bf: usize, br: usize, rng: &mut ChaCha8Rng) -> Result<MixedBatch> {
    let (xf, yf) = sample_batch(forget, bf, rng)?;
    if br == 0 {
        return Ok(MixedBatch {
            x: xf,
            yf,
            yr: Vec::new(),
        });
    }
    let (xr, yr) = sample_batch(retain, br, rng)?;
    Ok(MixedBatch {
        x: stack(&xf, &xr)?,
        yf,
        yr,
    })
}

/// Block soft-threshold of each group term: `v ← v·max(0, 1 − λ/‖v‖)`.
pub fn group_prox(store: &mut ParamStore, groups: &[LoraGroup], lambda: f64) {
    if lambda <= 0.0 {
        return;
    }
    for grp in groups {
        for term in &grp.terms {
            let norm = term.iter().map(|id| store.value(*id).sum_sq()).sum::<f64>().sqrt();
            let keep = if norm > lambda { 1.0 - lambda / norm } else { 0.0 };
            for id in term {
                store.value_mut(*id).data_mut().iter_mut().for_each(|v| *v *= keep);
            }
        }
    }
}

fn check_task_inputs(forget: &Dataset, retain: &Dataset, cfg: &TaskConfig) -> Result<()> {
    cfg.validate()?;
    if forget.is_empty() {
        return Err(Error::invalid("forget set D_f is empty"));
    }
    if retain.is_empty() && cfg.batch_retain > 0 {
        return Err(Error::invalid(
            "rehearsal set D_r is empty but the retain batch size is nonzero",
        ));
    }
    Ok(())
}

/// Runs one forgetting task: inject adapters, take `K` steps on the total
/// loss, then merge. The model ends with no trainable parameters.
pub fn run_task(
    model: &mut MicroTransformer,
    forget: &Dataset,
    retain: &Dataset,
    task_id: u32,
    cfg: &TaskConfig,
    table: Option<&PrototypeTable>,
    seed: u64,
) -> Result<TaskResult> {
    check_task_inputs(forget, retain, cfg)?;
    if !model.adapters().is_empty() {
        return Err(Error::Conflict("model still has unmerged adapters".into()));
    }
    if cfg.loss.prototypes && table.is_none() {
        return Err(Error::invalid("prototype loss enabled but no prototype table given"));
    }
    let start = Instant::now();
    let checksum_before = model.checksum();
    let groups = inject_lora(model, &cfg.lora, task_id, seed)?;
    let mut opt = cfg.optimizer.build()?;
    let mut rng = task_rng(seed, task_id);
    let (bf, br) = (cfg.batch_forget, cfg.batch_retain);
    let proximal = cfg.sparsity.mode == SparsityMode::Proximal;
    let grad_cfg = if proximal {
        LossConfig {
            alpha: 0.0,
            ..cfg.loss.clone()
        }
    } else {
        cfg.loss.clone()
    };
    let lambda = cfg.sparsity.prox_step * cfg.loss.alpha;

    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = draw(forget, retain, bf, br, &mut rng)?;
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &batch.x)?;
        let lf = g.gather_rows(logits, &(0..bf).collect::<Vec<_>>())?;
        let lr = if br > 0 {
            Some(g.gather_rows(logits, &(bf..bf + br).collect::<Vec<_>>())?)
        } else {
            None
        };
        let inputs = LossInputs {
            forget: Some(LabeledLogits {
                logits: lf,
                labels: &batch.yf,
            }),
            retain: lr.map(|v| LabeledLogits {
                logits: v,
                labels: &batch.yr,
            }),
        };
        let (loss, mut breakdown) = total_loss(&mut g, inputs, model.params(), &groups, table, &grad_cfg)?;
        let grads = g.backward(loss)?;
        opt.step(model.params_mut(), grads.params())?;
        if proximal {
            // report the penalty that is being minimized
            let structure: f64 = groups.iter().map(|grp| group_norm(model.params(), grp)).sum();
            breakdown = LossBreakdown::from_terms(
                breakdown.retain,
                breakdown.forget,
                breakdown.pro_retain,
                breakdown.pro_forget,
                structure,
                &cfg.loss,
            );
            group_prox(model.params_mut(), &groups, lambda);
        }
        log.push(IterationLog {
            iteration: it + 1,
            loss: breakdown,
        });
    }

    let norms: Vec<f64> = groups.iter().map(|grp| group_norm(model.params(), grp)).collect();
    let zero_group_ratio = zero_ratio_of_norms(&norms, cfg.zero_threshold);
    let tunable = tunable_ratio(model);
    let group_norms = groups.iter().map(|g| g.label()).zip(norms).collect();
    merge_task(model, task_id)?;
    Ok(TaskResult {
        task_id,
        log,
        group_norms,
        zero_group_ratio,
        tunable_ratio: tunable,
        checksum_before,
        checksum_after: model.checksum(),
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Forgetting method or baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "gslora")]
    GsLora,
    #[serde(rename = "gslora++")]
    GsLoraPlusPlus,
    #[serde(rename = "retrain")]
    Retrain,
    #[serde(rename = "naive-negative")]
    NaiveNegative,
    #[serde(rename = "lora-no-sparsity")]
    LoraNoSparsity,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::GsLora,
        Method::GsLoraPlusPlus,
        Method::Retrain,
        Method::NaiveNegative,
        Method::LoraNoSparsity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::GsLora => "gslora",
            Method::GsLoraPlusPlus => "gslora++",
            Method::Retrain => "retrain",
            Method::NaiveNegative => "naive-negative",
            Method::LoraNoSparsity => "lora-no-sparsity",
        }
    }

    /// Task settings as this method uses them.
    pub fn task_config(self, base: &TaskConfig) -> TaskConfig {
        let mut cfg = base.clone();
        match self {
            Method::GsLora => cfg.loss.prototypes = false,
            Method::GsLoraPlusPlus => cfg.loss.prototypes = true,
            Method::LoraNoSparsity => {
                cfg.loss.prototypes = false;
                cfg.loss.alpha = 0.0;
            }
            Method::Retrain | Method::NaiveNegative => {
                cfg.loss.prototypes = false;
                cfg.loss.alpha = 0.0;
            }
        }
        cfg
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub method: Method,
    pub seed: u64,
    /// Fill `wall_ms` in metric rows; off by default so rows are reproducible.
    pub record_timing: bool,
}

#[derive(Clone, Debug)]
pub struct SequenceOutput {
    pub results: Vec<TaskResult>,
    pub records: Vec<MetricRecord>,
    /// Test accuracy on each task's forgotten classes before forgetting.
    pub origin_acc_f: Vec<f64>,
}

/// Called after every task with its result and the model it produced.
pub type TaskObserver<'a> = dyn FnMut(&TaskResult, &MicroTransformer) -> Result<()> + 'a;

/// Training data available to the forgetting procedure, for prototypes:
/// every task's `D_f` plus the first task's `D_r`.
pub fn prototype_source(scenario: &ForgettingScenario) -> Result<Dataset> {
    let first = &scenario.tasks[0];
    let mut all = first.retain.clone();
    for t in &scenario.tasks {
        all = all.concat(&t.forget)?;
    }
    Ok(all)
}

fn evaluate(
    model: &MicroTransformer,
    scenario: &ForgettingScenario,
    t: usize,
    test: &Dataset,
    origin_acc_f: f64,
    result: &TaskResult,
    opts: &RunOptions,
) -> Result<MetricRecord> {
    let task = &scenario.tasks[t];
    let preds = Predictions::new(model, test)?;
    let missing = scenario.missing();
    let available: Vec<usize> = task
        .remaining_classes
        .iter()
        .copied()
        .filter(|c| !missing.contains(c))
        .collect();
    let acc_r = preds.accuracy(Some(&available))?;
    let acc_f = preds.accuracy(Some(&task.forget_classes))?;
    let acc_o = old_accuracy(&preds, scenario, task.task_id)?;
    let acc_m = if missing.is_empty() {
        None
    } else {
        Some(preds.accuracy(Some(missing))?)
    };
    let record = MetricRecord {
        task_id: task.task_id,
        method: opts.method.name().to_string(),
        seed: opts.seed,
        acc_r,
        acc_f,
        acc_o,
        acc_m,
        h_mean: h_mean(acc_r, origin_acc_f, acc_f),
        zero_group_ratio: result.zero_group_ratio,
        tunable_ratio: result.tunable_ratio,
        wall_ms: opts.record_timing.then_some(result.wall_ms),
    };
    record.validate()?;
    Ok(record)
}

fn origin_accuracies(model: &MicroTransformer, scenario: &ForgettingScenario, test: &Dataset) -> Result<Vec<f64>> {
    let preds = Predictions::new(model, test)?;
    scenario
        .tasks
        .iter()
        .map(|t| preds.accuracy(Some(&t.forget_classes)))
        .collect()
}

/// Runs every task of `scenario` in order with the given method, evaluating
/// on `test` after each task.
pub fn run_sequence(
    model: &mut MicroTransformer,
    scenario: &ForgettingScenario,
    test: &Dataset,
    base: &TaskConfig,
    opts: &RunOptions,
    mut observer: Option<&mut TaskObserver<'_>>,
) -> Result<SequenceOutput> {
    if scenario.is_empty() {
        return Err(Error::invalid("scenario has no tasks"));
    }
    scenario.spec.validate(scenario.num_classes)?;
    let cfg = opts.method.task_config(base);
    cfg.validate()?;
    let origin_acc_f = origin_accuracies(model, scenario, test)?;
    let table = if cfg.loss.prototypes {
        Some(compute_prototypes(model, &prototype_source(scenario)?)?)
    } else {
        None
    };

    let mut out = SequenceOutput {
        results: Vec::new(),
        records: Vec::new(),
        origin_acc_f: origin_acc_f.clone(),
    };
    for (t, task) in scenario.tasks.iter().enumerate() {
        log::info!(
            "{} task {}: forgetting {:?} ({} forget / {} rehearsal samples)",
            opts.method,
            task.task_id,
            task.forget_classes,
            task.forget.len(),
            task.retain.len()
        );
        let result = match opts.method {
            Method::GsLora | Method::GsLoraPlusPlus | Method::LoraNoSparsity => run_task(
                model,
                &task.forget,
                &task.retain,
                task.task_id,
                &cfg,
                table.as_ref(),
                opts.seed,
            )?,
            Method::NaiveNegative => {
                naive_negative_task(model, &task.forget, &task.retain, task.task_id, &cfg, opts.seed)?
            }
            Method::Retrain => retrain_task(model, &task.retain, task.task_id, &cfg, opts.seed)?,
        };
        let record = evaluate(model, scenario, t, test, origin_acc_f[t], &result, opts)?;
        log::info!(
            "task {}: acc_r {:.2} acc_f {:.2} h {:.2} zero groups {:.3}",
            record.task_id,
            record.acc_r,
            record.acc_f,
            record.h_mean,
            record.zero_group_ratio
        );
        if let Some(obs) = observer.as_mut() {
            obs(&result, model)?;
        }
        out.results.push(result);
        out.records.push(record);
    }
    Ok(out)
}

/// Full fine-tune (head frozen) on the data loss alone.
fn naive_negative_task(
    model: &mut MicroTransformer,
    forget: &Dataset,
    retain: &Dataset,
    task_id: u32,
    cfg: &TaskConfig,
    seed: u64,
) -> Result<TaskResult> {
    check_task_inputs(forget, retain, cfg)?;
    let start = Instant::now();
    let checksum_before = model.checksum();
    model.set_freeze(FreezeSelector::Head);
    let tunable = tunable_ratio(model);
    let mut opt = cfg.optimizer.build()?;
    let mut rng = task_rng(seed, task_id);
    let (bf, br) = (cfg.batch_forget, cfg.batch_retain);
    let data_cfg = LossConfig {
        alpha: 0.0,
        prototypes: false,
        ..cfg.loss.clone()
    };
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = draw(forget, retain, bf, br, &mut rng)?;
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &batch.x)?;
        let lf = g.gather_rows(logits, &(0..bf).collect::<Vec<_>>())?;
        let lr = if br > 0 {
            Some(g.gather_rows(logits, &(bf..bf + br).collect::<Vec<_>>())?)
        } else {
            None
        };
        let inputs = LossInputs {
            forget: Some(LabeledLogits {
                logits: lf,
                labels: &batch.yf,
            }),
            retain: lr.map(|v| LabeledLogits {
                logits: v,
                labels: &batch.yr,
            }),
        };
        let (loss, breakdown) = total_loss(&mut g, inputs, model.params(), &[], None, &data_cfg)?;
        let grads = g.backward(loss)?;
        opt.step(model.params_mut(), grads.params())?;
        log.push(IterationLog {
            iteration: it + 1,
            loss: breakdown,
        });
    }
    model.set_freeze(FreezeSelector::All);
    Ok(TaskResult {
        task_id,
        log,
        group_norms: Vec::new(),
        zero_group_ratio: 0.0,
        tunable_ratio: tunable,
        checksum_before,
        checksum_after: model.checksum(),
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Replaces the model with a freshly initialized one trained only on `D_r`
/// for the same number of steps, each on `batch_forget + batch_retain`
/// rehearsal samples.
fn retrain_task(
    model: &mut MicroTransformer,
    retain: &Dataset,
    task_id: u32,
    cfg: &TaskConfig,
    seed: u64,
) -> Result<TaskResult> {
    cfg.validate()?;
    if retain.is_empty() {
        return Err(Error::invalid("retrain needs a nonempty rehearsal set"));
    }
    let start = Instant::now();
    let checksum_before = model.checksum();
    let init_seed = seed ^ 0x7e7a_1a1e ^ (u64::from(task_id) << 20);
    let mut fresh = MicroTransformer::new(model.config().clone(), init_seed)?;
    fresh.set_freeze(FreezeSelector::Nothing);
    let tunable = tunable_ratio(&fresh);
    let mut opt: Optimizer = cfg.optimizer.build()?;
    let mut rng = task_rng(seed, task_id);
    let bsz = cfg.batch_forget + cfg.batch_retain;
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (x, y) = sample_batch(retain, bsz, &mut rng)?;
        let mut g = Graph::new();
        let logits = fresh.forward(&mut g, &x)?;
        let loss = cross_entropy(&mut g, logits, &y)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?;
        opt.step(fresh.params_mut(), grads.params())?;
        log.push(IterationLog {
            iteration: it + 1,
            loss: LossBreakdown::from_terms(value, 0.0, 0.0, 0.0, 0.0, &cfg.loss),
        });
    }
    fresh.set_freeze(FreezeSelector::All);
    *model = fresh;
    Ok(TaskResult {
        task_id,
        log,
        group_norms: Vec::new(),
        zero_group_ratio: 0.0,
        tunable_ratio: tunable,
        checksum_before,
        checksum_after: model.checksum(),
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Bounded forgetting loss of `model` on `data`, without recording.
pub fn forgetting_value(model: &MicroTransformer, data: &Dataset, bnd: f64) -> Result<f64> {
    let mut g = Graph::inference();
    let logits = model.forward(&mut g, &data.to_tensor())?;
    let f = forgetting_loss(&mut g, logits, data.labels(), bnd)?;
    Ok(g.value(f).item())
}
