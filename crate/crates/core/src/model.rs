//! Micro-transformer classifier with editable FFN sites.
//!
//! Layout: the input feature vector is cut into `tokens` equal chunks, each
//! chunk is projected to `d_model` by a shared linear map and offset by a
//! learned positional embedding. Pre-norm blocks (attention, then FFN, both
//! residual) follow; tokens are mean-pooled, normalized, and fed to a linear
//! classification head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::lora::{Adapter, Site};
use crate::optim::OptimizerConfig;
use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "defaults::blocks")]
    pub blocks: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::d_ff")]
    pub d_ff: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::tokens")]
    pub tokens: usize,
}

mod defaults {
    pub fn blocks() -> usize {
        6
    }
    pub fn d_model() -> usize {
        64
    }
    pub fn d_ff() -> usize {
        128
    }
    pub fn heads() -> usize {
        4
    }
    pub fn tokens() -> usize {
        8
    }
}

impl ModelConfig {
    /// Default geometry for a given input width and class count.
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            num_classes,
            blocks: defaults::blocks(),
            d_model: defaults::d_model(),
            d_ff: defaults::d_ff(),
            heads: defaults::heads(),
            tokens: defaults::tokens(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
            ("blocks", self.blocks),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("tokens", self.tokens),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model.{name} must be positive")));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("model needs at least two classes"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.input_dim.is_multiple_of(self.tokens) {
            return Err(Error::invalid(format!(
                "input_dim {} not divisible by tokens {}",
                self.input_dim, self.tokens
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn chunk(&self) -> usize {
        self.input_dim / self.tokens
    }
}

/// Which parameters are frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeSelector {
    /// Everything trainable (pretraining).
    Nothing,
    All,
    /// Backbone frozen, classification head trainable.
    Backbone,
    /// Head frozen, everything else trainable.
    Head,
    /// Only LoRA adapter matrices trainable.
    LoraOnly,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockParams {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

/// Graph handles for one FFN layer.
#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// A low-rank term `B·A` living in a graph.
#[derive(Clone, Copy, Debug)]
pub struct LowRankDelta {
    pub b: Var,
    pub a: Var,
}

/// `W + Σ B·A` inside the graph.
pub fn effective_weight_var(g: &mut Graph, w: Var, deltas: &[LowRankDelta]) -> Result<Var> {
    let mut acc = w;
    for d in deltas {
        let ba = g.matmul(d.b, d.a)?;
        acc = g.add(acc, ba)?;
    }
    Ok(acc)
}

/// `max(0, x·W1_eff + b1)·W2_eff + b2` with `W_eff = W + Σ B·A`.
pub fn ffn_forward(
    g: &mut Graph,
    x: Var,
    layer: &FfnVars,
    delta1: &[LowRankDelta],
    delta2: &[LowRankDelta],
) -> Result<Var> {
    let w1 = effective_weight_var(g, layer.w1, delta1)?;
    let w2 = effective_weight_var(g, layer.w2, delta2)?;
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, layer.b1)?;
    let h = g.relu(h);
    let y = g.matmul(h, w2)?;
    g.add_bias(y, layer.b2)
}

#[derive(Clone, Debug)]
pub struct MicroTransformer {
    config: ModelConfig,
    seed: u64,
    pub(crate) store: ParamStore,
    embed: Linear,
    pos: ParamId,
    pub(crate) blocks: Vec<BlockParams>,
    final_ln: Norm,
    head: Linear,
    pub(crate) adapters: Vec<Adapter>,
    pub(crate) merged_tasks: Vec<u32>,
    freeze: FreezeSelector,
}

impl MicroTransformer {
    /// Freshly initialized model; all parameters trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;

        let mut linear = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let w = store.insert(format!("{name}.w"), Tensor::new(&[fan_in, fan_out], w)?)?;
            let b = store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
            Ok::<_, Error>(Linear { w, b })
        };
        let norm = |store: &mut ParamStore, name: &str| {
            let g = store.insert(format!("{name}.g"), Tensor::full(&[d], 1.0))?;
            let b = store.insert(format!("{name}.b"), Tensor::zeros(&[d]))?;
            Ok::<_, Error>(Norm { g, b })
        };

        let embed = linear(&mut store, "embed", config.chunk(), d)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let p = format!("blocks.{l}");
            let ln1 = norm(&mut store, &format!("{p}.ln1"))?;
            let q = linear(&mut store, &format!("{p}.attn.q"), d, d)?;
            let k = linear(&mut store, &format!("{p}.attn.k"), d, d)?;
            let v = linear(&mut store, &format!("{p}.attn.v"), d, d)?;
            let o = linear(&mut store, &format!("{p}.attn.o"), d, d)?;
            let ln2 = norm(&mut store, &format!("{p}.ln2"))?;
            let ffn1 = linear(&mut store, &format!("{p}.ffn.1"), d, config.d_ff)?;
            let ffn2 = linear(&mut store, &format!("{p}.ffn.2"), config.d_ff, d)?;
            blocks.push(BlockParams {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                ffn1,
                ffn2,
            });
        }
        let final_ln = norm(&mut store, "final_ln")?;
        let head = linear(&mut store, "head", d, config.num_classes)?;

        let pos: Vec<f64> = (0..config.tokens * d).map(|_| rng.random_range(-0.1..0.1)).collect();
        let pos = store.insert("embed.pos", Tensor::new(&[config.tokens, d], pos)?)?;

        Ok(MicroTransformer {
            config,
            seed,
            store,
            embed,
            pos,
            blocks,
            final_ln,
            head,
            adapters: Vec::new(),
            merged_tasks: Vec::new(),
            freeze: FreezeSelector::Nothing,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn merged_tasks(&self) -> &[u32] {
        &self.merged_tasks
    }

    pub fn freeze_state(&self) -> FreezeSelector {
        self.freeze
    }

    pub(crate) fn head_ids(&self) -> [ParamId; 2] {
        [self.head.w, self.head.b]
    }

    pub(crate) fn is_lora(&self, id: ParamId) -> bool {
        self.adapters
            .iter()
            .flat_map(|a| a.pairs.iter())
            .any(|p| p.b == id || p.a == id)
    }

    /// Base weight matrix that an adapter site edits.
    pub fn site_weight(&self, block: usize, site: Site) -> ParamId {
        let b = &self.blocks[block];
        match site {
            Site::FfnW1 => b.ffn1.w,
            Site::FfnW2 => b.ffn2.w,
            Site::AttnQ => b.q.w,
            Site::AttnV => b.v.w,
        }
    }

    /// FFN parameter ids of one block: `[w1, b1, w2, b2]`.
    pub fn ffn_params(&self, block: usize) -> [ParamId; 4] {
        let b = &self.blocks[block];
        [b.ffn1.w, b.ffn1.b, b.ffn2.w, b.ffn2.b]
    }

    /// Classification head `[weight d_model×C, bias C]`.
    pub fn head_params(&self) -> [ParamId; 2] {
        self.head_ids()
    }

    pub fn set_freeze(&mut self, selector: FreezeSelector) {
        let head = self.head_ids();
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let lora = self.is_lora(id);
            let is_head = head.contains(&id);
            let on = match selector {
                FreezeSelector::Nothing => true,
                FreezeSelector::All => false,
                FreezeSelector::Backbone => is_head,
                FreezeSelector::Head => !is_head,
                FreezeSelector::LoraOnly => lora,
            };
            self.store.set_requires_grad(id, on);
        }
        self.freeze = selector;
    }

    fn linear(&self, g: &mut Graph, x: Var, lin: Linear, w: Option<Var>) -> Result<Var> {
        let w = match w {
            Some(w) => w,
            None => g.param(&self.store, lin.w),
        };
        let b = g.param(&self.store, lin.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    fn deltas(&self, g: &mut Graph, block: usize, site: Site) -> Vec<LowRankDelta> {
        let mut pairs: Vec<(u32, ParamId, ParamId)> = self
            .adapters
            .iter()
            .filter(|a| a.block == block)
            .flat_map(|a| {
                a.pairs
                    .iter()
                    .filter(|p| p.site == site)
                    .map(move |p| (a.task_id, p.b, p.a))
            })
            .collect();
        pairs.sort_by_key(|p| p.0);
        pairs
            .into_iter()
            .map(|(_, b, a)| LowRankDelta {
                b: g.param(&self.store, b),
                a: g.param(&self.store, a),
            })
            .collect()
    }

    fn site_effective(&self, g: &mut Graph, block: usize, site: Site) -> Result<Var> {
        let w = g.param(&self.store, self.site_weight(block, site));
        let deltas = self.deltas(g, block, site);
        effective_weight_var(g, w, &deltas)
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        match x.shape() {
            [n, d] if *d == self.config.input_dim => Ok(*n),
            s => Err(Error::Shape {
                op: "classify",
                lhs: s.to_vec(),
                rhs: vec![0, self.config.input_dim],
            }),
        }
    }

    /// Pooled, normalized features that feed the head: `[B, d_model]`.
    pub fn features(&self, g: &mut Graph, x: &Tensor) -> Result<Var> {
        let n = self.check_input(x)?;
        let cfg = &self.config;
        let (s, d) = (cfg.tokens, cfg.d_model);
        let tokens = g.constant(x.reshape(&[n * s, cfg.chunk()])?);
        let mut h = self.linear(g, tokens, self.embed, None)?;
        let pos = g.param(&self.store, self.pos);
        let pos_idx: Vec<usize> = (0..n).flat_map(|_| 0..s).collect();
        let pos = g.gather_rows(pos, &pos_idx)?;
        h = g.add(h, pos)?;

        for l in 0..cfg.blocks {
            h = self.block_forward(g, h, n, l)?;
        }

        let pooled = g.reshape(h, &[n, s, d])?;
        let pooled = g.mean_axis(pooled, 1)?;
        let fg = g.param(&self.store, self.final_ln.g);
        let fb = g.param(&self.store, self.final_ln.b);
        g.layer_norm(pooled, fg, fb)
    }

    /// Head applied to pooled features.
    pub fn head_forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        self.linear(g, features, self.head, None)
    }

    /// Logits `[B, C]` for a batch `[B, input_dim]`.
    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Var> {
        let f = self.features(g, x)?;
        self.head_forward(g, f)
    }

    fn block_forward(&self, g: &mut Graph, h: Var, n: usize, l: usize) -> Result<Var> {
        let cfg = &self.config;
        let (s, d, heads, dh) = (cfg.tokens, cfg.d_model, cfg.heads, cfg.head_dim());
        let bp = self.blocks[l];

        let ln1g = g.param(&self.store, bp.ln1.g);
        let ln1b = g.param(&self.store, bp.ln1.b);
        let a = g.layer_norm(h, ln1g, ln1b)?;
        let wq = self.site_effective(g, l, Site::AttnQ)?;
        let wv = self.site_effective(g, l, Site::AttnV)?;
        let q = self.linear(g, a, bp.q, Some(wq))?;
        let k = self.linear(g, a, bp.k, None)?;
        let v = self.linear(g, a, bp.v, Some(wv))?;

        let split = |g: &mut Graph, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[n, s, heads, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[n * heads, s, dh])
        };
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax(scores);
        let ctx = g.bmm(att, v, false)?;
        let ctx = g.reshape(ctx, &[n, heads, s, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n * s, d])?;
        let o = self.linear(g, ctx, bp.o, None)?;
        let h = g.add(h, o)?;

        let ln2g = g.param(&self.store, bp.ln2.g);
        let ln2b = g.param(&self.store, bp.ln2.b);
        let f_in = g.layer_norm(h, ln2g, ln2b)?;
        let layer = FfnVars {
            w1: g.param(&self.store, bp.ffn1.w),
            b1: g.param(&self.store, bp.ffn1.b),
            w2: g.param(&self.store, bp.ffn2.w),
            b2: g.param(&self.store, bp.ffn2.b),
        };
        let d1 = self.deltas(g, l, Site::FfnW1);
        let d2 = self.deltas(g, l, Site::FfnW2);
        let f = ffn_forward(g, f_in, &layer, &d1, &d2)?;
        g.add(h, f)
    }

    /// Logits for one feature vector, evaluated without recording.
    pub fn classify(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::new(&[1, x.len()], x.to_vec())?;
        Ok(self.logits(&t)?.into_data())
    }

    /// Logits for a batch, evaluated without recording; rows are split into
    /// chunks that run in parallel under the `parallel` feature.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 64;
        let n = self.check_input(x)?;
        let d = self.config.input_dim;
        let chunks = n.div_ceil(CHUNK);
        let parts = par::map_range(chunks, |c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let xs = Tensor::new(&[hi - lo, d], x.data()[lo * d..hi * d].to_vec())?;
            let mut g = Graph::inference();
            let out = self.forward(&mut g, &xs)?;
            Ok::<_, Error>(g.value(out).data().to_vec())
        });
        let mut data = Vec::with_capacity(n * self.config.num_classes);
        for p in parts {
            data.extend(p?);
        }
        Tensor::new(&[n, self.config.num_classes], data)
    }

    /// Pooled features without recording.
    pub fn feature_matrix(&self, x: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 64;
        let n = self.check_input(x)?;
        let d = self.config.input_dim;
        let parts = par::map_range(n.div_ceil(CHUNK), |c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let xs = Tensor::new(&[hi - lo, d], x.data()[lo * d..hi * d].to_vec())?;
            let mut g = Graph::inference();
            let out = self.features(&mut g, &xs)?;
            Ok::<_, Error>(g.value(out).data().to_vec())
        });
        let mut data = Vec::with_capacity(n * self.config.d_model);
        for p in parts {
            data.extend(p?);
        }
        Tensor::new(&[n, self.config.d_model], data)
    }

    /// Argmax over all `C` logits for each row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// SHA-256 over parameter names and values, in store order.
    pub fn checksum(&self) -> String {
        checksum_of(self.store.iter().map(|(_, p)| (p.name.as_str(), &p.value)))
    }

    /// Checksum restricted to the given parameters.
    pub fn checksum_params(&self, ids: &[ParamId]) -> String {
        checksum_of(ids.iter().map(|id| {
            let p = self.store.get(*id);
            (p.name.as_str(), &p.value)
        }))
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        seed: u64,
        store: ParamStore,
        adapters: Vec<Adapter>,
        merged_tasks: Vec<u32>,
        freeze: FreezeSelector,
    ) -> Result<Self> {
        let mut fresh = MicroTransformer::new(config, seed)?;
        for (id, p) in fresh
            .store
            .iter()
            .map(|(id, p)| (id, p.name.clone()))
            .collect::<Vec<_>>()
        {
            let src = store
                .id(&p)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter `{p}`")))?;
            let v = store.value(src).clone();
            if v.shape() != fresh.store.value(id).shape() {
                return Err(Error::Shape {
                    op: "load",
                    lhs: fresh.store.value(id).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            let dst = fresh.store.get_mut(id);
            dst.value = v;
            dst.requires_grad = store.get(src).requires_grad;
        }
        for a in adapters {
            let mut pairs = Vec::new();
            for p in a.pairs {
                let bn = &store.get(p.b).name;
                let an = &store.get(p.a).name;
                let b = fresh.store.insert(bn.clone(), store.value(p.b).clone())?;
                let av = fresh.store.insert(an.clone(), store.value(p.a).clone())?;
                fresh.store.set_requires_grad(b, store.get(p.b).requires_grad);
                fresh.store.set_requires_grad(av, store.get(p.a).requires_grad);
                pairs.push(crate::lora::LoraPair { b, a: av, ..p });
            }
            fresh.adapters.push(Adapter { pairs, ..a });
        }
        fresh.merged_tasks = merged_tasks;
        fresh.freeze = freeze;
        Ok(fresh)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn checksum_of<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        for s in t.shape() {
            h.update((*s as u64).to_le_bytes());
        }
        h.update(t.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Pretraining schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    #[serde(default = "pretrain_defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "pretrain_defaults::optimizer")]
    pub optimizer: OptimizerConfig,
    /// Stop once the running epoch accuracy (fraction) reaches this value.
    #[serde(default = "pretrain_defaults::target_accuracy")]
    pub target_accuracy: f64,
    /// Extra epochs to run after the target is first reached.
    #[serde(default)]
    pub extra_epochs: usize,
}

mod pretrain_defaults {
    use crate::optim::OptimizerConfig;
    pub fn batch_size() -> usize {
        32
    }
    pub fn optimizer() -> OptimizerConfig {
        OptimizerConfig::adam(1e-3)
    }
    pub fn target_accuracy() -> f64 {
        0.95
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 200,
            batch_size: pretrain_defaults::batch_size(),
            optimizer: pretrain_defaults::optimizer(),
            target_accuracy: pretrain_defaults::target_accuracy(),
            extra_epochs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Running accuracy over the epoch's minibatches, as a fraction.
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainLog {
    pub epochs: Vec<EpochLog>,
    pub reached_target: bool,
    pub warning: Option<String>,
}

impl MicroTransformer {
    /// Trains every parameter with cross-entropy on `data`.
    pub fn pretrain(&mut self, data: &crate::data::Dataset, cfg: &PretrainConfig, seed: u64) -> Result<PretrainLog> {
        use rand::seq::SliceRandom;
        if data.is_empty() {
            return Err(Error::invalid("pretrain: empty dataset"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::invalid("pretrain: batch_size must be positive"));
        }
        if let Some(&bad) = data.labels().iter().find(|&&y| y >= self.config.num_classes) {
            return Err(Error::invalid(format!("pretrain: label {bad} out of range")));
        }
        let mut log = PretrainLog::default();
        if cfg.epochs == 0 {
            return Ok(log);
        }
        self.set_freeze(FreezeSelector::Nothing);
        let mut opt = cfg.optimizer.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut extra_left: Option<usize> = None;

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                let (x, y) = data.subset_tensor(batch)?;
                let mut g = Graph::new();
                let logits = self.forward(&mut g, &x)?;
                for (r, &label) in y.iter().enumerate() {
                    if argmax(g.value(logits).row(r)) == label {
                        correct += 1;
                    }
                }
                let loss = crate::losses::cross_entropy(&mut g, logits, &y)?;
                loss_sum += g.value(loss).item() * batch.len() as f64;
                let grads: Gradients = g.backward(loss)?;
                opt.step(&mut self.store, grads.params())?;
            }
            let acc = correct as f64 / data.len() as f64;
            log.epochs.push(EpochLog {
                epoch: epoch + 1,
                loss: loss_sum / data.len() as f64,
                train_accuracy: acc,
            });
            log::debug!(
                "pretrain epoch {} loss {:.4} acc {:.4}",
                epoch + 1,
                loss_sum / data.len() as f64,
                acc
            );
            if acc >= cfg.target_accuracy && extra_left.is_none() {
                log.reached_target = true;
                extra_left = Some(cfg.extra_epochs);
            }
            if let Some(left) = extra_left.as_mut() {
                if *left == 0 {
                    break;
                }
                *left -= 1;
            }
        }
        if !log.reached_target {
            let msg = format!(
                "pretraining did not reach target accuracy {:.3} in {} epochs",
                cfg.target_accuracy, cfg.epochs
            );
            log::warn!("{msg}");
            log.warning = Some(msg);
        }
        Ok(log)
    }
}
