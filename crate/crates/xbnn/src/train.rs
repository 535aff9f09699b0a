//! Desk-scale BNN training and retraining.
//!
//! Forward passes use binarized weights and activations; gradients pass
//! through the sign nodes via the straight-through estimator, clipped at
//! |x| <= 1. Real-valued shadow weights are clipped to [-1, 1] after every
//! update. Training is generic over the float type: f32 for speed, f64 for
//! gradient checks against central finite differences (in surrogate mode,
//! where sign is replaced by its hard-tanh surrogate so the loss is
//! differentiable).
//!
//! Retraining a reconstructed network follows the split-layer protocol:
//! only block weights and block batch-norm parameters train; merge weights
//! stay +1 and merge thresholds stay 0 (they are not even representable as
//! parameters); all other layers are frozen.

use ndarray::{Array1, Array2, Axis, NdFloat};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::bn::BatchNormParams;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::network::{reference_forward, Layer, LayerGeom, NetInput, Network, PlainLayer};
use crate::reconstruct::SplitPlan;
use crate::tensor::BinaryTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size; decays by `lr_decay` each epoch.
    pub lr: f64,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub seed: u64,
    /// Dropout ratio on hidden activations (inverted dropout).
    pub dropout: f64,
    /// Training samples held out for best-snapshot selection.
    pub val_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 100,
            lr: 1e-3,
            lr_decay: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            seed: 42,
            dropout: 0.0,
            val_size: 5_000,
        }
    }
}

/// How binarization nodes behave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinMode {
    /// Deterministic sign with sign(0) = +1 (the inference semantics).
    Sign,
    /// Hard-tanh surrogate: forward clip(x, -1, 1); used so the training
    /// loss is differentiable for finite-difference gradient checks.
    Surrogate,
}

/// Integer-feature dataset view consumed by the trainer.
#[derive(Debug, Clone)]
pub struct TensorDataset {
    /// samples x features, already on the signed pixel grid.
    pub x: Array2<i32>,
    pub y: Vec<u8>,
    pub classes: usize,
}

impl TensorDataset {
    pub fn from_split(split: &Split, classes: usize) -> Self {
        TensorDataset {
            x: split.scaled_flat(0, split.len()),
            y: split.labels.clone(),
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Adam<F> {
    m: Array2<F>,
    v: Array2<F>,
    t: i32,
}

impl<F: NdFloat> Adam<F> {
    fn new(rows: usize, cols: usize) -> Self {
        Adam {
            m: Array2::zeros((rows, cols)),
            v: Array2::zeros((rows, cols)),
            t: 0,
        }
    }

    fn step(&mut self, param: &mut Array2<F>, grad: &Array2<F>, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let b1 = F::from(cfg.beta1).unwrap();
        let b2 = F::from(cfg.beta2).unwrap();
        let eps = F::from(cfg.eps_opt).unwrap();
        let one = F::one();
        self.m.zip_mut_with(grad, |m, &g| *m = b1 * *m + (one - b1) * g);
        self.v.zip_mut_with(grad, |v, &g| *v = b2 * *v + (one - b2) * g * g);
        let c1 = one - F::from(cfg.beta1.powi(self.t)).unwrap();
        let c2 = one - F::from(cfg.beta2.powi(self.t)).unwrap();
        let lr = F::from(lr).unwrap();
        ndarray::Zip::from(param)
            .and(&self.m)
            .and(&self.v)
            .for_each(|p, &m, &v| {
                let mhat = m / c1;
                let vhat = v / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
    }
}

#[derive(Debug, Clone)]
struct DenseParams<F> {
    /// Real-valued shadow weights, clipped to [-1, 1].
    shadow: Array2<F>,
    adam: Adam<F>,
}

impl<F: NdFloat> DenseParams<F> {
    fn glorot(rng: &mut StdRng, fan_in: usize, fan_out: usize) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let shadow = Array2::from_shape_fn((fan_in, fan_out), |_| {
            F::from(rng.gen_range(-bound..bound)).unwrap()
        });
        DenseParams {
            shadow,
            adam: Adam::new(fan_in, fan_out),
        }
    }

    fn from_binary(w: &BinaryTensor) -> Self {
        let (k, m) = (w.shape()[0], w.shape()[1]);
        let shadow = Array2::from_shape_fn((k, m), |(r, c)| F::from(w.get_pm1(r, c)).unwrap());
        DenseParams {
            shadow,
            adam: Adam::new(k, m),
        }
    }

    /// Weights seen by the forward pass: sign(shadow) in Sign mode, the
    /// shadow itself in surrogate mode (already inside [-1, 1]).
    fn effective(&self, mode: BinMode) -> Array2<F> {
        match mode {
            BinMode::Sign => self.shadow.mapv(sign::<F>),
            BinMode::Surrogate => self.shadow.clone(),
        }
    }

    fn update(&mut self, grad: &Array2<F>, cfg: &TrainConfig, lr: f64) {
        self.adam.step(&mut self.shadow, grad, cfg, lr);
        let one = F::one();
        self.shadow.mapv_inplace(|w| w.max(-one).min(one));
    }

    fn export(&self) -> BinaryTensor {
        let (k, m) = self.shadow.dim();
        let mut bits = BinaryTensor::zeros(&[k, m]);
        for r in 0..k {
            for c in 0..m {
                bits.set_bit(r, c, self.shadow[(r, c)] >= F::zero());
            }
        }
        bits
    }
}

#[derive(Debug, Clone)]
struct BnParams<F> {
    gamma: Array2<F>,
    beta: Array2<F>,
    running_mean: Array1<F>,
    running_var: Array1<F>,
    adam_gamma: Adam<F>,
    adam_beta: Adam<F>,
    eps: f64,
    momentum: f64,
}

impl<F: NdFloat> BnParams<F> {
    fn fresh(n: usize) -> Self {
        BnParams {
            gamma: Array2::ones((1, n)),
            beta: Array2::zeros((1, n)),
            running_mean: Array1::zeros(n),
            running_var: Array1::ones(n),
            adam_gamma: Adam::new(1, n),
            adam_beta: Adam::new(1, n),
            eps: crate::bn::DEFAULT_EPSILON,
            momentum: 0.9,
        }
    }

    /// Import inference parameters: the pre-BN bias b folds into the mean
    /// (y = gamma((x+b)-mu)/s + beta == gamma(x-(mu-b))/s + beta).
    fn from_inference(bn: &BatchNormParams) -> Self {
        let n = bn.len();
        BnParams {
            gamma: Array2::from_shape_fn((1, n), |(_, i)| F::from(bn.gamma[i]).unwrap()),
            beta: Array2::from_shape_fn((1, n), |(_, i)| F::from(bn.beta[i]).unwrap()),
            running_mean: Array1::from_shape_fn(n, |i| F::from(bn.mu[i] - bn.bias[i]).unwrap()),
            running_var: Array1::from_shape_fn(n, |i| F::from(bn.sigma[i] * bn.sigma[i]).unwrap()),
            adam_gamma: Adam::new(1, n),
            adam_beta: Adam::new(1, n),
            eps: bn.epsilon,
            momentum: 0.9,
        }
    }

    fn export(&self) -> Result<BatchNormParams> {
        let n = self.running_mean.len();
        BatchNormParams::new(
            vec![0.0; n],
            self.running_mean.iter().map(|&v| v.to_f64().unwrap()).collect(),
            // sqrt in training precision so the exported value stays
            // representable in that precision (the model file stores f32)
            self.running_var.iter().map(|&v| v.max(F::zero()).sqrt().to_f64().unwrap()).collect(),
            self.gamma.row(0).iter().map(|&v| v.to_f64().unwrap()).collect(),
            self.beta.row(0).iter().map(|&v| v.to_f64().unwrap()).collect(),
            self.eps,
        )
    }
}

fn sign<F: NdFloat>(x: F) -> F {
    if x >= F::zero() {
        F::one()
    } else {
        -F::one()
    }
}

/// Forward cache of one batch-norm application.
struct BnCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
    /// Whether batch statistics were used (trainable layer) or the fixed
    /// running statistics (frozen layer).
    batch_stats: bool,
}

impl<F: NdFloat> BnParams<F> {
    /// Trainable path: normalize with batch statistics and update the
    /// running averages. Frozen path: normalize with the running statistics
    /// and leave every parameter untouched.
    fn forward_train(&mut self, s: &Array2<F>, frozen: bool) -> (Array2<F>, BnCache<F>) {
        let eps = F::from(self.eps).unwrap();
        if frozen {
            let inv_std = self.running_var.mapv(|v| F::one() / (v + eps).sqrt());
            let xhat = (s - &self.running_mean) * &inv_std;
            let y = &xhat * &self.gamma + &self.beta;
            return (y, BnCache { xhat, inv_std, batch_stats: false });
        }
        let b = F::from(s.nrows() as f64).unwrap();
        let mean = s.sum_axis(Axis(0)) / b;
        let centered = s - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / b;
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        let mom = F::from(self.momentum).unwrap();
        let one = F::one();
        ndarray::Zip::from(&mut self.running_mean)
            .and(&mean)
            .for_each(|r, &m| *r = mom * *r + (one - mom) * m);
        ndarray::Zip::from(&mut self.running_var)
            .and(&var)
            .for_each(|r, &v| *r = mom * *r + (one - mom) * v);
        (y, BnCache { xhat, inv_std, batch_stats: true })
    }

    /// Gradient of the normalization. Returns d_loss/d_s and (if trainable)
    /// applies parameter updates.
    fn backward(
        &mut self,
        dy: &Array2<F>,
        cache: &BnCache<F>,
        cfg: &TrainConfig,
        lr: f64,
        trainable: bool,
    ) -> Array2<F> {
        if !cache.batch_stats {
            // fixed affine transform: dx = dy * gamma * inv_std
            return dy * &self.gamma * &cache.inv_std.view().insert_axis(Axis(0));
        }
        let b = F::from(dy.nrows() as f64).unwrap();
        let dgamma = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let mut ds = dxhat * b;
        ds = ds - &sum_dxhat;
        ds = ds - &(&cache.xhat * &sum_dxhat_xhat);
        ds = ds * &cache.inv_std.view().insert_axis(Axis(0));
        ds = ds / b;
        if trainable {
            self.adam_gamma.step(&mut self.gamma, &dgamma, cfg, lr);
            self.adam_beta.step(&mut self.beta, &dbeta, cfg, lr);
        }
        ds
    }

    fn all_finite(&self) -> bool {
        self.gamma.iter().all(|v| v.is_finite())
            && self.beta.iter().all(|v| v.is_finite())
            && self.running_mean.iter().all(|v| v.is_finite())
            && self.running_var.iter().all(|v| v.is_finite())
    }
}

/// One split block under training.
#[derive(Debug, Clone)]
struct TrainBlock<F> {
    w: DenseParams<F>,
    bn: BnParams<F>,
}

#[derive(Debug, Clone)]
enum TrainLayer<F> {
    /// Dense layer; hidden layers carry batch norm, the output layer none.
    Dense {
        w: DenseParams<F>,
        bn: Option<BnParams<F>>,
        frozen: bool,
    },
    /// Input-split layer: blocks train, the merge stage has no parameters
    /// (weights fixed +1, threshold fixed 0 in the +-1 domain).
    Split {
        blocks: Vec<TrainBlock<F>>,
        plan: SplitPlan,
        out_dim: usize,
    },
}

impl<F: NdFloat> TrainLayer<F> {
}

/// A trainable network mirroring the inference [`Network`]: multi-bit first
/// layer, binary hidden activations, raw scores out of the last layer.
#[derive(Debug, Clone)]
pub struct TrainNet<F> {
    layers: Vec<TrainLayer<F>>,
    mode: BinMode,
}

struct DenseCache<F> {
    x: Array2<F>,
    w_eff: Array2<F>,
    bn: Option<BnCache<F>>,
    /// STE mask of the activation sign node (1 where |y| <= 1).
    ste: Option<Array2<F>>,
    dropout: Option<Array2<F>>,
}

struct BlockCache<F> {
    x_slice: Array2<F>,
    w_eff: Array2<F>,
    bn: BnCache<F>,
    ste: Array2<F>,
}

enum LayerCache<F> {
    Dense(DenseCache<F>),
    Split {
        blocks: Vec<BlockCache<F>>,
        merge_ste: Array2<F>,
        dropout: Option<Array2<F>>,
    },
}

fn binarize_act<F: NdFloat>(y: &Array2<F>, mode: BinMode) -> (Array2<F>, Array2<F>) {
    let one = F::one();
    let a = match mode {
        BinMode::Sign => y.mapv(sign::<F>),
        BinMode::Surrogate => y.mapv(|v| v.max(-one).min(one)),
    };
    let ste = y.mapv(|v| if v.abs() <= one { one } else { F::zero() });
    (a, ste)
}

fn dropout_mask<F: NdFloat>(
    shape: (usize, usize),
    ratio: f64,
    rng: &mut StdRng,
) -> Option<Array2<F>> {
    if ratio <= 0.0 {
        return None;
    }
    let keep = F::from(1.0 / (1.0 - ratio)).unwrap();
    Some(Array2::from_shape_fn(shape, |_| {
        if rng.gen::<f64>() < ratio {
            F::zero()
        } else {
            keep
        }
    }))
}

impl<F: NdFloat> TrainNet<F> {
    /// Fresh dense MLP: dims\[0\] inputs through hidden widths to
    /// dims\[last\] classes.
    pub fn new_mlp(dims: &[usize], seed: u64, mode: BinMode) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            layers.push(TrainLayer::Dense {
                w: DenseParams::glorot(&mut rng, dims[i], dims[i + 1]),
                bn: (!last).then(|| BnParams::fresh(dims[i + 1])),
                frozen: false,
            });
        }
        TrainNet { layers, mode }
    }

    /// Import a reconstructed inference network for retraining: split-layer
    /// blocks are trainable, everything else is frozen.
    pub fn from_network(net: &Network, mode: BinMode) -> Result<Self> {
        if !net.first_multibit {
            return Err(Error::Config("retraining expects a multi-bit first layer".into()));
        }
        let last = net.layers.len() - 1;
        let mut layers = Vec::new();
        for (i, layer) in net.layers.iter().enumerate() {
            match layer {
                Layer::Plain(p) => {
                    if !matches!(p.geom, LayerGeom::Dense { .. }) {
                        return Err(Error::Config("only dense networks are retrainable".into()));
                    }
                    layers.push(TrainLayer::Dense {
                        w: DenseParams::from_binary(&p.weights),
                        bn: (i != last).then(|| BnParams::from_inference(&p.bn)),
                        frozen: true,
                    });
                }
                Layer::Split(s) => {
                    let blocks = s
                        .blocks
                        .iter()
                        .map(|b| TrainBlock {
                            w: DenseParams::from_binary(&b.weights),
                            bn: BnParams::from_inference(&b.bn),
                        })
                        .collect();
                    layers.push(TrainLayer::Split {
                        blocks,
                        plan: s.plan.clone(),
                        out_dim: s.geom.out_dim(),
                    });
                }
            }
        }
        Ok(TrainNet { layers, mode })
    }

    /// Merge weights and thresholds are frozen by construction; asking to
    /// train them is a configuration error.
    pub fn set_trainable(&mut self, group: &str, trainable: bool) -> Result<()> {
        match group {
            "merge-weights" | "merge-thresholds" => {
                if trainable {
                    Err(Error::FrozenGroup(group.to_string()))
                } else {
                    Ok(())
                }
            }
            "dense" => {
                for layer in &mut self.layers {
                    if let TrainLayer::Dense { frozen, .. } = layer {
                        *frozen = !trainable;
                    }
                }
                Ok(())
            }
            g => Err(Error::Config(format!("unknown parameter group `{g}`"))),
        }
    }

    /// Forward pass caching everything the backward pass needs. Input is
    /// the raw integer features as F. `rng` drives dropout; pass None at
    /// evaluation time.
    fn forward(
        &mut self,
        x: &Array2<F>,
        dropout: f64,
        rng: Option<&mut StdRng>,
    ) -> (Array2<F>, Vec<LayerCache<F>>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        let last = self.layers.len() - 1;
        let mut local_rng = rng;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                TrainLayer::Dense { w, bn, frozen } => {
                    let w_eff = w.effective(self.mode);
                    let s = act.dot(&w_eff);
                    if i == last {
                        caches.push(LayerCache::Dense(DenseCache {
                            x: act,
                            w_eff,
                            bn: None,
                            ste: None,
                            dropout: None,
                        }));
                        act = s;
                    } else {
                        let bn = bn.as_mut().expect("hidden dense layer has batch norm");
                        let (y, bn_cache) = bn.forward_train(&s, *frozen);
                        let (mut a, ste) = binarize_act(&y, self.mode);
                        let mask = local_rng
                            .as_deref_mut()
                            .and_then(|r| dropout_mask::<F>(a.dim(), dropout, r));
                        if let Some(m) = &mask {
                            a = a * m;
                        }
                        caches.push(LayerCache::Dense(DenseCache {
                            x: act,
                            w_eff,
                            bn: Some(bn_cache),
                            ste: Some(ste),
                            dropout: mask,
                        }));
                        act = a;
                    }
                }
                TrainLayer::Split { blocks, plan, out_dim } => {
                    let batch = act.nrows();
                    let mut m_sum = Array2::<F>::zeros((batch, *out_dim));
                    let mut block_caches = Vec::with_capacity(blocks.len());
                    for (bi, block) in blocks.iter_mut().enumerate() {
                        let (a0, b0) = plan.block_range(bi);
                        let x_slice = act.slice(ndarray::s![.., a0..b0]).to_owned();
                        let w_eff = block.w.effective(self.mode);
                        let s = x_slice.dot(&w_eff);
                        let (y, bn_cache) = block.bn.forward_train(&s, false);
                        let (a, ste) = binarize_act(&y, self.mode);
                        m_sum = m_sum + &a;
                        block_caches.push(BlockCache { x_slice, w_eff, bn: bn_cache, ste });
                    }
                    // merge: sign of the intermediate sum, pass-through STE
                    // (clipping at |m| <= 1 would zero nearly every gradient
                    // since |m| counts up to n votes)
                    let (mut out, _) = binarize_act(&m_sum, self.mode);
                    if self.mode == BinMode::Surrogate {
                        // keep the surrogate differentiable: identity merge
                        out = m_sum.clone();
                    }
                    let merge_ste = Array2::ones(m_sum.dim());
                    let mask = local_rng
                        .as_deref_mut()
                        .and_then(|r| dropout_mask::<F>(out.dim(), dropout, r));
                    if let Some(m) = &mask {
                        out = out * m;
                    }
                    caches.push(LayerCache::Split {
                        blocks: block_caches,
                        merge_ste,
                        dropout: mask,
                    });
                    act = out;
                }
            }
        }
        (act, caches)
    }

    /// Softmax cross-entropy on scaled logits. Returns the mean loss and the
    /// gradient w.r.t. the raw scores.
    fn loss_grad(scores: &Array2<F>, labels: &[u8], scale: F) -> (f64, Array2<F>) {
        let (batch, classes) = scores.dim();
        let logits = scores * scale;
        let mut grad = Array2::<F>::zeros((batch, classes));
        let mut loss = 0.0f64;
        for r in 0..batch {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: F = exps.iter().cloned().fold(F::zero(), |a, b| a + b);
            let label = labels[r] as usize;
            let logp = (logits[(r, label)] - max).to_f64().unwrap() - z.to_f64().unwrap().ln();
            loss -= logp;
            for c in 0..classes {
                let p = exps[c] / z;
                let target = if c == label { F::one() } else { F::zero() };
                grad[(r, c)] = (p - target) * scale / F::from(batch as f64).unwrap();
            }
        }
        (loss / batch as f64, grad)
    }

    /// One SGD step on a mini-batch. Returns the mean loss.
    fn train_step(
        &mut self,
        x: &Array2<F>,
        labels: &[u8],
        cfg: &TrainConfig,
        lr: f64,
        rng: &mut StdRng,
    ) -> f64 {
        let scale = F::from(1.0 / (self.last_fanin() as f64).sqrt()).unwrap();
        let (scores, caches) = self.forward(x, cfg.dropout, Some(rng));
        let (loss, dscores) = Self::loss_grad(&scores, labels, scale);
        self.backward(dscores, caches, cfg, lr);
        loss
    }

    fn last_fanin(&self) -> usize {
        match self.layers.last().expect("network has layers") {
            TrainLayer::Dense { w, .. } => w.shadow.nrows(),
            TrainLayer::Split { plan, .. } => plan.fanin(),
        }
    }

    fn backward(
        &mut self,
        mut delta: Array2<F>,
        caches: Vec<LayerCache<F>>,
        cfg: &TrainConfig,
        lr: f64,
    ) {
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            match (layer, cache) {
                (TrainLayer::Dense { w, bn, frozen }, LayerCache::Dense(c)) => {
                    if let Some(mask) = &c.dropout {
                        delta = delta * mask;
                    }
                    if let Some(ste) = &c.ste {
                        delta = delta * ste;
                    }
                    let ds = match (&c.bn, bn.as_mut()) {
                        (Some(bn_cache), Some(bn)) => {
                            bn.backward(&delta, bn_cache, cfg, lr, !*frozen)
                        }
                        _ => delta,
                    };
                    let dw = c.x.t().dot(&ds);
                    let dx = ds.dot(&c.w_eff.t());
                    if !*frozen {
                        w.update(&dw, cfg, lr);
                    }
                    delta = dx;
                }
                (TrainLayer::Split { blocks, plan, .. }, LayerCache::Split { blocks: bc, merge_ste, dropout }) => {
                    if let Some(mask) = &dropout {
                        delta = delta * mask;
                    }
                    let dm = delta * &merge_ste;
                    let batch = dm.nrows();
                    let fanin = plan.fanin();
                    let mut dx = Array2::<F>::zeros((batch, fanin));
                    for (bi, (block, c)) in blocks.iter_mut().zip(bc).enumerate() {
                        let mut db = dm.clone();
                        db = db * &c.ste;
                        let ds = block.bn.backward(&db, &c.bn, cfg, lr, true);
                        let dw = c.x_slice.t().dot(&ds);
                        let dxb = ds.dot(&c.w_eff.t());
                        block.w.update(&dw, cfg, lr);
                        let (a0, b0) = plan.block_range(bi);
                        dx.slice_mut(ndarray::s![.., a0..b0]).assign(&dxb);
                    }
                    delta = dx;
                }
                _ => unreachable!("cache kinds track layer kinds"),
            }
        }
    }

    /// Export the inference-form network: binarized weights, running batch
    /// statistics, integer threshold folds for split blocks.
    pub fn export(&self) -> Result<Network> {
        let last = self.layers.len() - 1;
        let mut layers = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                TrainLayer::Dense { w, bn, .. } => {
                    let weights = w.export();
                    let (in_dim, out_dim) = w.shadow.dim();
                    let bn = match bn {
                        Some(b) => b.export()?,
                        None => BatchNormParams::identity(out_dim),
                    };
                    layers.push(Layer::Plain(PlainLayer {
                        geom: LayerGeom::Dense { in_dim, out_dim },
                        weights,
                        bn,
                    }));
                }
                TrainLayer::Split { blocks, plan, out_dim } => {
                    let mut out_blocks = Vec::new();
                    for (bi, b) in blocks.iter().enumerate() {
                        let (a0, b0) = plan.block_range(bi);
                        let bn = b.bn.export()?;
                        let thresholds = crate::bn::fold_bn_to_thresholds(&bn, b0 - a0);
                        out_blocks.push(crate::network::SplitBlock {
                            weights: b.w.export(),
                            bn,
                            thresholds,
                        });
                    }
                    layers.push(Layer::Split(crate::network::SplitLayer {
                        geom: LayerGeom::Dense { in_dim: plan.fanin(), out_dim: *out_dim },
                        plan: plan.clone(),
                        blocks: out_blocks,
                        merge_threshold: crate::reconstruct::merge_threshold(plan.n),
                    }));
                }
            }
            let _ = i == last;
        }
        Ok(Network { layers, first_multibit: true })
    }

    /// Every parameter is finite (divergence canary; sign nodes swallow
    /// NaN activations, so the loss alone cannot detect blown-up params).
    pub fn params_finite(&self) -> bool {
        let wf = |w: &DenseParams<F>| w.shadow.iter().all(|v| v.is_finite());
        self.layers.iter().all(|l| match l {
            TrainLayer::Dense { w, bn, .. } => {
                wf(w) && bn.as_ref().map_or(true, BnParams::all_finite)
            }
            TrainLayer::Split { blocks, .. } => {
                blocks.iter().all(|b| wf(&b.w) && b.bn.all_finite())
            }
        })
    }

    /// All shadow weights lie in [-1, 1].
    pub fn shadows_clipped(&self) -> bool {
        let one = F::one();
        let ok = |w: &Array2<F>| w.iter().all(|&v| v >= -one && v <= one);
        self.layers.iter().all(|l| match l {
            TrainLayer::Dense { w, .. } => ok(&w.shadow),
            TrainLayer::Split { blocks, .. } => blocks.iter().all(|b| ok(&b.w.shadow)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Training-log CSV (epoch, train loss, val accuracy).
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_accuracy\n");
    for e in log {
        out.push_str(&format!("{},{:.6},{:.4}\n", e.epoch, e.train_loss, e.val_accuracy));
    }
    out
}

/// Integer-exact evaluation via the exported network and the reference
/// engine; trainer and simulator agree by construction.
pub fn evaluate(net: &Network, x: &Array2<i32>, labels: &[u8], classes: usize) -> Result<(f64, Array2<usize>)> {
    let mut confusion = Array2::<usize>::zeros((classes, classes));
    let mut correct = 0usize;
    let n = labels.len();
    let chunk = 1000usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + chunk).min(n);
        let batch = x.slice(ndarray::s![start..end, ..]).to_owned();
        let fr = reference_forward(net, &NetInput::Flat(batch), false)?;
        for (i, pred) in fr.predictions().into_iter().enumerate() {
            let truth = labels[start + i] as usize;
            confusion[(truth, pred)] += 1;
            if pred == truth {
                correct += 1;
            }
        }
        start = end;
    }
    Ok((correct as f64 / n as f64, confusion))
}

fn batch_features<F: NdFloat>(x: &Array2<i32>, idx: &[usize]) -> Array2<F> {
    Array2::from_shape_fn((idx.len(), x.ncols()), |(r, c)| {
        F::from(x[(idx[r], c)]).unwrap()
    })
}

/// Shared training loop: epochs of shuffled mini-batches, best-validation
/// snapshot, divergence detection.
fn fit<F: NdFloat>(
    net: &mut TrainNet<F>,
    data: &TensorDataset,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochLog>)> {
    let n = data.len();
    let val_size = cfg.val_size.min(n / 5);
    let train_n = n - val_size;
    let val_x = data.x.slice(ndarray::s![train_n.., ..]).to_owned();
    let val_y = &data.y[train_n..];
    let mut rng = StdRng::seed_from_u64(cfg.seed);

    let mut best: Option<(f64, Network)> = None;
    let mut log = Vec::new();
    let mut lr = cfg.lr;
    let mut order: Vec<usize> = (0..train_n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // batch statistics need at least 2 samples
            }
            let x = batch_features::<F>(&data.x, chunk);
            let y: Vec<u8> = chunk.iter().map(|&i| data.y[i]).collect();
            let loss = net.train_step(&x, &y, cfg, lr, &mut rng);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            loss_sum += loss;
            batches += 1;
        }
        if !net.params_finite() {
            return Err(Error::Diverged { epoch, batch: batches });
        }
        let exported = net.export()?;
        let val_accuracy = if val_size > 0 {
            evaluate(&exported, &val_x, val_y, data.classes)?.0
        } else {
            f64::NAN
        };
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_accuracy,
        });
        let better = match &best {
            Some((acc, _)) => val_size > 0 && val_accuracy > *acc,
            None => true,
        };
        if better {
            best = Some((val_accuracy, exported));
        }
        lr *= cfg.lr_decay;
    }
    let (_, snapshot) = best.expect("at least one epoch ran");
    Ok((snapshot, log))
}

/// Train a fresh binary MLP (`dims[0]` features .. `dims[last]` classes).
pub fn train_baseline(
    dims: &[usize],
    data: &TensorDataset,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochLog>)> {
    if dims.len() < 2 {
        return Err(Error::Config("architecture needs at least input and output dims".into()));
    }
    let mut net = TrainNet::<f32>::new_mlp(dims, cfg.seed, BinMode::Sign);
    fit(&mut net, data, cfg)
}

/// Retrain a reconstructed network: split-layer block parameters only.
pub fn retrain_split(
    net: &Network,
    data: &TensorDataset,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochLog>)> {
    if !net.layers.iter().any(Layer::is_split) {
        return Err(Error::Config("retraining expects a reconstructed (split) network".into()));
    }
    let mut tnet = TrainNet::<f32>::from_network(net, BinMode::Sign)?;
    fit(&mut tnet, data, cfg)
}

/// Linearly separable synthetic dataset shared by the training and
/// model-format tests.
#[cfg(test)]
pub(crate) fn toy_two_class_for_tests(n: usize, seed: u64) -> TensorDataset {
    // linearly separable: class = sign of the mean of the first half of
    // the features vs the second half
    let mut rng = StdRng::seed_from_u64(seed);
    let d = 16usize;
    let mut x = Array2::<i32>::zeros((n, d));
    let mut y = Vec::with_capacity(n);
    for r in 0..n {
        let label = rng.gen::<bool>() as u8;
        for c in 0..d {
            let high = (c < d / 2) == (label == 1);
            let base = if high { 120 } else { -120 };
            x[(r, c)] = base + rng.gen_range(-40..=40);
        }
        y.push(label);
    }
    TensorDataset { x, y, classes: 2 }
}
