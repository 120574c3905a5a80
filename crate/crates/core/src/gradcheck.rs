//! Central finite differences for checking analytic gradients, and a
//! ready-made suite that checks every loss term against them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::lora::{inject_lora, GroupingStrategy, LoraConfig, LoraGroup};
use crate::losses::{
    compute_prototypes, cross_entropy, forgetting_loss, group_sparse_loss, prototype_loss, total_loss, KlDirection,
    LabeledLogits, LossConfig, LossInputs, PrototypeTable,
};
use crate::model::{MicroTransformer, ModelConfig};
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Tensor::new(x.shape(), out).expect("same shape as x")
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`; the floor keeps all-zero gradients from
/// dividing by zero.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Loss terms covered by [`loss_gradient_suite`].
pub const LOSS_TERMS: [&str; 8] = [
    "forgetting",
    "retention",
    "data",
    "group-sparse",
    "prototype-retain",
    "prototype-forget",
    "prototype",
    "total",
];

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct TermCheck {
    pub config: usize,
    pub term: &'static str,
    pub rel_error: f64,
}

struct Micro {
    model: MicroTransformer,
    x: Tensor,
    yf: Vec<usize>,
    yr: Vec<usize>,
    groups: Vec<LoraGroup>,
    table: PrototypeTable,
    loss: LossConfig,
    lora_ids: Vec<ParamId>,
}

fn random_micro(rng: &mut ChaCha8Rng) -> Result<Micro> {
    let heads = rng.random_range(1..=2usize);
    let tokens = rng.random_range(1..=2usize);
    let classes = rng.random_range(3..=5usize);
    let config = ModelConfig {
        input_dim: tokens * rng.random_range(2..=3usize),
        num_classes: classes,
        blocks: rng.random_range(1..=2),
        d_model: 4 * heads,
        d_ff: rng.random_range(5..=8),
        heads,
        tokens,
    };
    let mut model = MicroTransformer::new(config.clone(), rng.random())?;
    let strategy = [
        GroupingStrategy::Block,
        GroupingStrategy::Module,
        GroupingStrategy::Matrix,
    ][rng.random_range(0..3)];
    let lora = LoraConfig {
        rank: rng.random_range(1..=2),
        strategy,
        attention: rng.random_bool(0.3),
    };
    let groups = inject_lora(&mut model, &lora, 1, rng.random())?;
    let lora_ids = model.params().trainable_ids();
    // B starts at zero; move it off zero so A receives gradient
    for id in &lora_ids {
        for v in model.params_mut().value_mut(*id).data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let (nf, nr) = (3, 3);
    let n = nf + nr;
    let x = Tensor::new(
        &[n, config.input_dim],
        (0..n * config.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )?;
    let yf: Vec<usize> = (0..nf).map(|i| i % 2).collect();
    let yr: Vec<usize> = (0..nr).map(|i| 2 + i % (classes - 2)).collect();
    let mut labels = yf.clone();
    labels.extend(&yr);
    let source = Dataset::new(
        (0..n * config.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        labels,
        config.input_dim,
        classes,
        Split::Train,
    )?;
    let table = compute_prototypes(&model, &source)?;
    let loss = LossConfig {
        alpha: rng.random_range(0.01..0.5),
        beta: rng.random_range(0.1..1.0),
        gamma: rng.random_range(0.1..1.0),
        // large bounds keep both hinges in their linear region
        bnd_data: Some(50.0),
        bnd_pro: Some(50.0),
        prototypes: true,
        kl_direction: if rng.random_bool(0.5) {
            KlDirection::PrototypeFirst
        } else {
            KlDirection::LogitFirst
        },
    };
    Ok(Micro {
        model,
        x,
        yf,
        yr,
        groups,
        table,
        loss,
        lora_ids,
    })
}

fn term_value(m: &Micro, g: &mut Graph, term: &str) -> Result<Var> {
    let logits = m.model.forward(g, &m.x)?;
    let nf = m.yf.len();
    let lf = g.gather_rows(logits, &(0..nf).collect::<Vec<_>>())?;
    let lr = g.gather_rows(logits, &(nf..nf + m.yr.len()).collect::<Vec<_>>())?;
    let f = LabeledLogits {
        logits: lf,
        labels: &m.yf,
    };
    let r = LabeledLogits {
        logits: lr,
        labels: &m.yr,
    };
    let store = m.model.params();
    Ok(match term {
        "forgetting" => forgetting_loss(g, lf, &m.yf, 50.0)?,
        "retention" => cross_entropy(g, lr, &m.yr)?,
        "data" => {
            let cfg = LossConfig {
                alpha: 0.0,
                prototypes: false,
                ..m.loss.clone()
            };
            total_loss(
                g,
                LossInputs {
                    forget: Some(f),
                    retain: Some(r),
                },
                store,
                &[],
                None,
                &cfg,
            )?
            .0
        }
        "group-sparse" => {
            let s = group_sparse_loss(g, store, &m.groups)?;
            // tie in the logits so every parameter is reached
            let z = g.sum(logits);
            let z = g.scale(z, 0.0);
            g.add(s, z)?
        }
        "prototype-retain" => prototype_loss(g, None, Some(r), &m.table, &m.loss)?
            .retain
            .expect("retain rows"),
        "prototype-forget" => prototype_loss(g, Some(f), None, &m.table, &m.loss)?
            .forget
            .expect("forget rows"),
        "prototype" => prototype_loss(g, Some(f), Some(r), &m.table, &m.loss)?.total,
        "total" => {
            total_loss(
                g,
                LossInputs {
                    forget: Some(f),
                    retain: Some(r),
                },
                store,
                &m.groups,
                Some(&m.table),
                &m.loss,
            )?
            .0
        }
        other => return Err(crate::Error::invalid(format!("unknown loss term `{other}`"))),
    })
}

fn flat(m: &Micro) -> Vec<f64> {
    m.lora_ids
        .iter()
        .flat_map(|id| m.model.params().value(*id).data().to_vec())
        .collect()
}

fn set_flat(m: &mut Micro, v: &[f64]) {
    let mut off = 0;
    for id in m.lora_ids.clone() {
        let t = m.model.params_mut().value_mut(id).data_mut();
        let n = t.len();
        t.copy_from_slice(&v[off..off + n]);
        off += n;
    }
}

/// Compares analytic LoRA-parameter gradients of every term in
/// [`LOSS_TERMS`] with central differences on `configs` random micro models.
pub fn loss_gradient_suite(configs: usize, seed: u64) -> Result<Vec<TermCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for config in 0..configs {
        let mut m = random_micro(&mut rng)?;
        for term in LOSS_TERMS {
            let mut g = Graph::new();
            let v = term_value(&m, &mut g, term)?;
            let grads = g.backward(v)?;
            let analytic: Vec<f64> = m
                .lora_ids
                .iter()
                .flat_map(|id| grads.param(*id).map(|t| t.data().to_vec()).unwrap_or_default())
                .collect();
            let x0 = Tensor::from_vec(flat(&m));
            let cell = std::cell::RefCell::new(&mut m);
            let numeric = central_difference(
                |t| {
                    let mut mm = cell.borrow_mut();
                    set_flat(&mut mm, t.data());
                    let mut g = Graph::inference();
                    let v = term_value(&mm, &mut g, term).expect("term evaluates");
                    g.value(v).item()
                },
                &x0,
                1e-5,
            );
            set_flat(&mut cell.borrow_mut(), x0.data());
            out.push(TermCheck {
                config,
                term,
                rel_error: relative_error(&analytic, numeric.data(), 1e-8),
            });
        }
    }
    Ok(out)
}
