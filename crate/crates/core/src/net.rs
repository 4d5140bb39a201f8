//! The rescoring network: instance encoder, shared neighbor encoder with
//! symmetric max pooling, fusion head, losses, exact reverse-mode gradients
//! and Adam.
//!
//! All arithmetic is `f64`. Model files hold `f32` parameters; trained
//! models are rounded to `f32` precision before they are returned, so an
//! in-memory model and its reloaded copy score identically.

use std::hash::{Hash, Hasher};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{ablation_mask, FeatureGroups, FrameFeatures, NormConfig};

/// Clamp applied to the confidence output before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: expected {expected} inputs, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("cannot compute a loss over an empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Logistic,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Logistic => 3,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Logistic,
            _ => return None,
        })
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Logistic => logistic(z),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Logistic => a * (1.0 - a),
        }
    }
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One affine layer followed by an activation. `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
            activation,
        }
    }

    /// Weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn uniform<R: Rng>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let weight = Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..bound));
        let bias = Array1::from_shape_fn(output, |_| rng.random_range(-bound..bound));
        Self {
            weight,
            bias,
            activation,
        }
    }

    pub fn input_len(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_len(&self) -> usize {
        self.weight.nrows()
    }

    fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        let act = self.activation;
        z.mapv_inplace(|v| act.apply(v));
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`, one activation per layer.
    pub fn uniform<R: Rng>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert_eq!(dims.len(), activations.len() + 1);
        Self {
            layers: dims
                .windows(2)
                .zip(activations)
                .map(|(w, a)| Layer::uniform(w[0], w[1], *a, rng))
                .collect(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].input_len()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().expect("non-empty mlp").output_len()
    }

    /// Forward pass over a batch, keeping every layer's output.
    fn forward_cached(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut outs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let y = if l == 0 {
                layer.forward_batch(x)
            } else {
                layer.forward_batch(outs[l - 1].view())
            };
            outs.push(y);
        }
        outs
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_cached(x).pop().expect("non-empty mlp")
    }

    /// Reverse pass. `d_out` is the gradient w.r.t. the final activation
    /// output; parameter gradients are accumulated into `grads`, and the
    /// gradient w.r.t. `x` is returned.
    fn backward(
        &self,
        x: ArrayView2<f64>,
        outs: &[Array2<f64>],
        d_out: Array2<f64>,
        grads: &mut [LayerGrad],
    ) -> Array2<f64> {
        let mut delta = d_out;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let act = layer.activation;
            ndarray::Zip::from(&mut delta)
                .and(&outs[l])
                .for_each(|d, &a| *d *= act.derivative_from_output(a));
            let input = if l == 0 { x } else { outs[l - 1].view() };
            grads[l].weight += &delta.t().dot(&input);
            grads[l].bias += &delta.sum_axis(Axis(0));
            delta = delta.dot(&layer.weight);
        }
        delta
    }
}

/// Applies an MLP to a single vector.
pub fn mlp_forward(p: &Mlp, x: &[f64]) -> Result<Vec<f64>, NetError> {
    if x.len() != p.input_len() {
        return Err(NetError::ShapeMismatch {
            expected: p.input_len(),
            got: x.len(),
        });
    }
    let xv = ArrayView2::from_shape((1, x.len()), x).expect("row view");
    Ok(p.forward_batch(xv).into_raw_vec_and_offset().0)
}

/// Element-wise maximum. An empty list pools to the zero vector of `dim`.
pub fn max_pool(vectors: &[Vec<f64>], dim: usize) -> Result<Vec<f64>, NetError> {
    let Some(first) = vectors.first() else {
        return Ok(vec![0.0; dim]);
    };
    let mut out = first.clone();
    for v in &vectors[1..] {
        if v.len() != out.len() {
            return Err(NetError::ShapeMismatch {
                expected: out.len(),
                got: v.len(),
            });
        }
        for (o, x) in out.iter_mut().zip(v) {
            if *x > *o {
                *o = *x;
            }
        }
    }
    Ok(out)
}

/// Network widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub hidden: usize,
    pub instance_embed: usize,
    pub context_embed: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            hidden: 256,
            instance_embed: 128,
            context_embed: 64,
        }
    }
}

/// Which parts of the graph are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    /// Contextual branch on; when off the pooled vector is all zeros.
    pub context: bool,
    /// Stop gradients from the neighbor encoder into neighbor embeddings.
    pub detach_neighbors: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            context: true,
            detach_neighbors: false,
        }
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GaceModel {
    /// Instance encoder: instance vector -> `instance_embed`.
    pub instance: Mlp,
    /// Shared neighbor encoder: relational entries ++ neighbor embedding -> `context_embed`.
    pub context: Mlp,
    /// Fusion head: `[f_i, f_c]` -> (confidence, IoU estimate).
    pub fusion: Mlp,
    pub norm: NormConfig,
    pub groups: FeatureGroups,
    pub branches: Branches,
    pub seed: u64,
}

impl GaceModel {
    pub fn new(
        norm: NormConfig,
        dims: ModelDims,
        groups: FeatureGroups,
        branches: Branches,
        seed: u64,
    ) -> Self {
        use Activation::*;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let instance = Mlp::uniform(
            &[norm.instance_len(), dims.hidden, dims.instance_embed],
            &[Relu, Tanh],
            &mut rng,
        );
        let context = Mlp::uniform(
            &[
                norm.neighbor_geometry_len() + dims.instance_embed,
                dims.hidden,
                dims.context_embed,
            ],
            &[Relu, Relu],
            &mut rng,
        );
        let fusion = Mlp::uniform(
            &[dims.instance_embed + dims.context_embed, dims.hidden, 2],
            &[Relu, Logistic],
            &mut rng,
        );
        Self {
            instance,
            context,
            fusion,
            norm,
            groups,
            branches,
            seed,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            hidden: self.instance.layers[0].output_len(),
            instance_embed: self.instance.output_len(),
            context_embed: self.context.output_len(),
        }
    }

    pub fn mask(&self) -> Vec<f64> {
        ablation_mask(self.groups, &self.norm)
    }

    fn mlps(&self) -> [&Mlp; 3] {
        [&self.instance, &self.context, &self.fusion]
    }

    /// Parameter tensors in a fixed order: per network, per layer, weight then bias.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.mlps()
            .into_iter()
            .flat_map(|m| m.layers.iter())
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("contiguous"),
                    l.bias.as_slice().expect("contiguous"),
                ]
            })
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for m in [&mut self.instance, &mut self.context, &mut self.fusion] {
            for l in m.layers.iter_mut() {
                out.push(l.weight.as_slice_mut().expect("contiguous"));
                out.push(l.bias.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for s in self.param_slices_mut() {
            for v in s.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradient of a loss w.r.t. every model parameter, same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub instance: Vec<LayerGrad>,
    pub context: Vec<LayerGrad>,
    pub fusion: Vec<LayerGrad>,
}

impl ModelGrads {
    pub fn zeros_like(model: &GaceModel) -> Self {
        let z = |m: &Mlp| {
            m.layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect::<Vec<_>>()
        };
        Self {
            instance: z(&model.instance),
            context: z(&model.context),
            fusion: z(&model.fusion),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        [&self.instance, &self.context, &self.fusion]
            .into_iter()
            .flat_map(|v| v.iter())
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("contiguous"),
                    l.bias.as_slice().expect("contiguous"),
                ]
            })
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for v in [&mut self.instance, &mut self.context, &mut self.fusion] {
            for l in v.iter_mut() {
                out.push(l.weight.as_slice_mut().expect("contiguous"));
                out.push(l.bias.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in self.slices_mut() {
            for x in a.iter_mut() {
                *x *= k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Focal and IoU-guidance loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_iou: f64,
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_iou: 0.5,
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// `-alpha_t (1 - p_t)^gamma ln p_t` with the prediction clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn focal_loss(s_hat: f64, u: bool, gamma: f64, alpha: f64) -> f64 {
    let p = s_hat.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (pt, at) = if u {
        (p, alpha)
    } else {
        (1.0 - p, 1.0 - alpha)
    };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Derivative of [`focal_loss`] w.r.t. `s_hat` (zero where the clamp is active).
pub fn focal_loss_grad(s_hat: f64, u: bool, gamma: f64, alpha: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&s_hat) {
        return 0.0;
    }
    let (pt, at, sign) = if u {
        (s_hat, alpha, 1.0)
    } else {
        (1.0 - s_hat, 1.0 - alpha, -1.0)
    };
    let q = 1.0 - pt;
    let pow_term = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0)
    };
    let d_pt = at * (pow_term * pt.ln() - q.powf(gamma) / pt);
    sign * d_pt
}

pub fn iou_l1_loss(v_hat: f64, v: f64) -> f64 {
    (v_hat - v).abs()
}

/// Per-detection training targets of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameLabels {
    pub u: Vec<bool>,
    pub v: Vec<f64>,
}

impl FrameLabels {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Loss components summed (not averaged) over detections.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossSums {
    pub focal: f64,
    pub l1: f64,
    pub count: usize,
}

impl LossSums {
    pub fn add(&mut self, o: &LossSums) {
        self.focal += o.focal;
        self.l1 += o.l1;
        self.count += o.count;
    }

    pub fn mean_focal(&self) -> f64 {
        self.focal / self.count as f64
    }

    pub fn mean_l1(&self) -> f64 {
        self.l1 / self.count as f64
    }

    pub fn total(&self, lambda_iou: f64) -> f64 {
        self.mean_focal() + lambda_iou * self.mean_l1()
    }
}

/// Mean focal loss plus `lambda_iou` times mean L1 IoU loss.
pub fn total_loss(
    s_hat: &[f64],
    v_hat: &[f64],
    labels: &FrameLabels,
    cfg: &LossConfig,
) -> Result<f64, NetError> {
    Ok(loss_sums(s_hat, v_hat, labels, cfg)?.total(cfg.lambda_iou))
}

pub fn loss_sums(
    s_hat: &[f64],
    v_hat: &[f64],
    labels: &FrameLabels,
    cfg: &LossConfig,
) -> Result<LossSums, NetError> {
    if labels.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    if s_hat.len() != labels.len() || v_hat.len() != labels.len() {
        return Err(NetError::ShapeMismatch {
            expected: labels.len(),
            got: s_hat.len(),
        });
    }
    let mut sums = LossSums::default();
    for i in 0..labels.len() {
        sums.focal += focal_loss(s_hat[i], labels.u[i], cfg.gamma, cfg.alpha);
        sums.l1 += iou_l1_loss(v_hat[i], labels.v[i]);
    }
    sums.count = labels.len();
    Ok(sums)
}

const NO_ARGMAX: u32 = u32::MAX;

/// Intermediate values of one frame's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x_inst: Array2<f64>,
    inst_outs: Vec<Array2<f64>>,
    /// `f_i . W_f^T`: each detection's embedding through the embedding block
    /// of the neighbor encoder's first layer.
    ctx_hidden: Array2<f64>,
    ctx_out: Array2<f64>,
    pooled: Array2<f64>,
    argmax: Vec<u32>,
    fusion_in: Array2<f64>,
    fusion_outs: Vec<Array2<f64>>,
    pub s_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
}

impl ForwardCache {
    pub fn instance_embeddings(&self) -> &Array2<f64> {
        self.inst_outs.last().expect("instance output")
    }

    pub fn pooled(&self) -> &Array2<f64> {
        &self.pooled
    }

    /// Hash of every non-differentiable decision taken by the pass:
    /// rectifier signs, pooling winners, clamp activity and the L1 sign.
    /// Finite-difference checks are only valid where this is unchanged.
    pub fn kink_signature(&self, labels: &FrameLabels) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let mut signs = |a: &Array2<f64>| {
            for v in a.iter() {
                (*v > 0.0).hash(&mut h);
            }
        };
        signs(&self.inst_outs[0]);
        signs(&self.ctx_hidden);
        signs(&self.ctx_out);
        signs(&self.fusion_outs[0]);
        self.argmax.hash(&mut h);
        for (i, s) in self.s_hat.iter().enumerate() {
            (PROB_EPS..=1.0 - PROB_EPS).contains(s).hash(&mut h);
            if i < labels.len() {
                (self.v_hat[i] - labels.v[i]).total_cmp(&0.0).hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Masked instance matrix.
fn masked_input(model: &GaceModel, feats: &FrameFeatures) -> Array2<f64> {
    let mask = Array1::from(model.mask());
    let mut x = feats.instance.clone();
    x *= &mask;
    x
}

/// Instance encoder over every detection of the frame.
pub fn instance_stage(model: &GaceModel, feats: &FrameFeatures) -> (Array2<f64>, Vec<Array2<f64>>) {
    let x = masked_input(model, feats);
    let outs = model.instance.forward_cached(x.view());
    (x, outs)
}

/// Neighbor encoder over all pairs followed by max pooling per subject.
///
/// The first layer acts on `[relational entries, f_i_n]`; its embedding block
/// is applied once per detection and gathered per pair, which is the same
/// affine map as applying the full layer to each concatenated pair vector.
pub fn context_stage(
    model: &GaceModel,
    feats: &FrameFeatures,
    f_i: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Vec<u32>) {
    let n = f_i.nrows();
    let e_c = model.context.output_len();
    let pairs = &feats.pairs;
    let p = pairs.len();
    let l0 = &model.context.layers[0];
    let l1 = &model.context.layers[1];
    let g = pairs.geometry.ncols();
    if !model.branches.context || p == 0 {
        return (
            Array2::zeros((p, l0.output_len())),
            Array2::zeros((p, e_c)),
            Array2::zeros((n, e_c)),
            vec![NO_ARGMAX; n * e_c],
        );
    }
    let w_geo = l0.weight.slice(s![.., ..g]);
    let w_emb = l0.weight.slice(s![.., g..]);
    let proj = f_i.dot(&w_emb.t());
    let mut hidden = pairs.geometry.dot(&w_geo.t());
    for (k, mut row) in hidden.axis_iter_mut(Axis(0)).enumerate() {
        let j = pairs.neighbor[k] as usize;
        row += &proj.row(j);
        row += &l0.bias;
        let act = l0.activation;
        row.mapv_inplace(|v| act.apply(v));
    }
    let out = l1.forward_batch(hidden.view());
    let mut pooled = Array2::zeros((n, e_c));
    let mut argmax = vec![NO_ARGMAX; n * e_c];
    for i in 0..n {
        let range = pairs.range(i);
        if range.is_empty() {
            continue;
        }
        let mut best = out.row(range.start).to_owned();
        let mut arg = vec![range.start as u32; e_c];
        for q in range.start + 1..range.end {
            for (k, v) in out.row(q).iter().enumerate() {
                if *v > best[k] {
                    best[k] = *v;
                    arg[k] = q as u32;
                }
            }
        }
        pooled.row_mut(i).assign(&best);
        argmax[i * e_c..(i + 1) * e_c].copy_from_slice(&arg);
    }
    (hidden, out, pooled, argmax)
}

/// Fusion head over `[f_i, f_c]`.
pub fn fusion_stage(
    model: &GaceModel,
    f_i: &Array2<f64>,
    pooled: &Array2<f64>,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let fusion_in =
        ndarray::concatenate(Axis(1), &[f_i.view(), pooled.view()]).expect("fusion concat");
    let outs = model.fusion.forward_cached(fusion_in.view());
    (fusion_in, outs)
}

/// Forward pass over one frame; returns the cache with `(s_hat, v_hat)`.
pub fn gace_forward(model: &GaceModel, feats: &FrameFeatures) -> ForwardCache {
    let (x_inst, inst_outs) = instance_stage(model, feats);
    let f_i = inst_outs.last().expect("instance output");
    let (ctx_hidden, ctx_out, pooled, argmax) = context_stage(model, feats, f_i);
    let (fusion_in, fusion_outs) = fusion_stage(model, f_i, &pooled);
    let y = fusion_outs.last().expect("fusion output");
    let s_hat = y.column(0).to_vec();
    let v_hat = y.column(1).to_vec();
    ForwardCache {
        x_inst,
        inst_outs,
        ctx_hidden,
        ctx_out,
        pooled,
        argmax,
        fusion_in,
        fusion_outs,
        s_hat,
        v_hat,
    }
}

/// Gradients of one frame's summed loss.
#[derive(Debug, Clone)]
pub struct FrameGrad {
    pub params: ModelGrads,
    /// Gradient w.r.t. the unmasked instance vectors.
    pub instance_input: Array2<f64>,
    pub loss: LossSums,
}

/// Reverse pass of `sum_i focal_i + lambda_iou * |v_hat_i - v_i|` for one
/// frame. Divide by the number of detections for the mean objective.
pub fn backward(
    model: &GaceModel,
    feats: &FrameFeatures,
    cache: &ForwardCache,
    labels: &FrameLabels,
    cfg: &LossConfig,
) -> FrameGrad {
    let n = feats.len();
    let mut grads = ModelGrads::zeros_like(model);
    let e_i = model.instance.output_len();
    let e_c = model.context.output_len();
    let mut loss = LossSums::default();
    let mut d_y = Array2::zeros((n, 2));
    for i in 0..n {
        let (s, v) = (cache.s_hat[i], cache.v_hat[i]);
        loss.focal += focal_loss(s, labels.u[i], cfg.gamma, cfg.alpha);
        loss.l1 += iou_l1_loss(v, labels.v[i]);
        d_y[[i, 0]] = focal_loss_grad(s, labels.u[i], cfg.gamma, cfg.alpha);
        let diff = v - labels.v[i];
        d_y[[i, 1]] = cfg.lambda_iou
            * if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
    }
    loss.count = n;

    let d_fusion_in = model.fusion.backward(
        cache.fusion_in.view(),
        &cache.fusion_outs,
        d_y,
        &mut grads.fusion,
    );
    let mut d_f_i = d_fusion_in.slice(s![.., ..e_i]).to_owned();
    let d_pooled = d_fusion_in.slice(s![.., e_i..]);

    let pairs = &feats.pairs;
    if model.branches.context && !pairs.is_empty() {
        let f_i = cache.instance_embeddings();
        let l0 = &model.context.layers[0];
        let l1 = &model.context.layers[1];
        let g = pairs.geometry.ncols();
        // route pooled gradients to the winning pair per channel
        let mut d_out = Array2::zeros(cache.ctx_out.raw_dim());
        for i in 0..n {
            for k in 0..e_c {
                let q = cache.argmax[i * e_c + k];
                if q != NO_ARGMAX {
                    d_out[[q as usize, k]] += d_pooled[[i, k]];
                }
            }
        }
        ndarray::Zip::from(&mut d_out)
            .and(&cache.ctx_out)
            .for_each(|d, &a| *d *= l1.activation.derivative_from_output(a));
        grads.context[1].weight += &d_out.t().dot(&cache.ctx_hidden);
        grads.context[1].bias += &d_out.sum_axis(Axis(0));
        let mut d_pre = d_out.dot(&l1.weight);
        ndarray::Zip::from(&mut d_pre)
            .and(&cache.ctx_hidden)
            .for_each(|d, &a| *d *= l0.activation.derivative_from_output(a));
        // scatter per-pair gradients onto the neighbor they came from
        let mut d_proj = Array2::zeros((n, l0.output_len()));
        for (q, row) in d_pre.axis_iter(Axis(0)).enumerate() {
            let j = pairs.neighbor[q] as usize;
            let mut t = d_proj.row_mut(j);
            t += &row;
        }
        {
            let gw = &mut grads.context[0].weight;
            let mut geo = gw.slice_mut(s![.., ..g]);
            geo += &d_pre.t().dot(&pairs.geometry);
            let mut emb = gw.slice_mut(s![.., g..]);
            emb += &d_proj.t().dot(f_i);
        }
        grads.context[0].bias += &d_pre.sum_axis(Axis(0));
        if !model.branches.detach_neighbors {
            d_f_i += &d_proj.dot(&l0.weight.slice(s![.., g..]));
        }
    }

    let d_x = model.instance.backward(
        cache.x_inst.view(),
        &cache.inst_outs,
        d_f_i,
        &mut grads.instance,
    );
    let mask = Array1::from(model.mask());
    let instance_input = d_x * &mask;
    FrameGrad {
        params: grads,
        instance_input,
        loss,
    }
}

/// Mean loss of one frame (the value [`backward`] differentiates, divided by
/// the detection count).
pub fn frame_loss(
    model: &GaceModel,
    feats: &FrameFeatures,
    labels: &FrameLabels,
    cfg: &LossConfig,
) -> Result<f64, NetError> {
    let c = gace_forward(model, feats);
    total_loss(&c.s_hat, &c.v_hat, labels, cfg)
}

/// Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of one tensor at step `t >= 1`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    t: u64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        params[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam over every tensor of a [`GaceModel`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(model: &GaceModel, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            states: model
                .param_slices()
                .iter()
                .map(|s| AdamState::zeros(s.len()))
                .collect(),
        }
    }

    pub fn step(&mut self, model: &mut GaceModel, grads: &ModelGrads) {
        self.t += 1;
        for ((p, g), st) in model
            .param_slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.states.iter_mut())
        {
            adam_step(p, g, st, &self.cfg, self.t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::PairSet;

    #[test]
    fn forward_examples() {
        let mut layer = Layer::zeros(2, 2, Activation::Identity);
        layer.bias = Array1::from(vec![0.3, -0.2]);
        let m = Mlp {
            layers: vec![layer],
        };
        assert_eq!(mlp_forward(&m, &[5.0, 7.0]).unwrap(), vec![0.3, -0.2]);

        let mut relu = Layer::zeros(2, 2, Activation::Relu);
        relu.weight = Array2::eye(2);
        let m = Mlp { layers: vec![relu] };
        assert_eq!(mlp_forward(&m, &[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
        assert_eq!(
            mlp_forward(&m, &[1.0]).unwrap_err(),
            NetError::ShapeMismatch {
                expected: 2,
                got: 1
            }
        );
    }

    #[test]
    fn pooling() {
        assert_eq!(
            max_pool(&[vec![1.0, 5.0], vec![3.0, 2.0]], 2).unwrap(),
            vec![3.0, 5.0]
        );
        assert_eq!(max_pool(&[vec![1.0, 5.0]], 2).unwrap(), vec![1.0, 5.0]);
        assert_eq!(max_pool(&[], 3).unwrap(), vec![0.0; 3]);
        assert!(max_pool(&[vec![1.0], vec![1.0, 2.0]], 2).is_err());
    }

    #[test]
    fn focal_values() {
        let ce_half = focal_loss(0.5, true, 0.0, 0.5);
        assert!((ce_half - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(focal_loss(1.0 - PROB_EPS, true, 2.0, 0.25) < 1e-12);
        let v = focal_loss(0.9, true, 2.0, 0.25);
        assert!((v - 0.25 * 0.01 * -(0.9f64.ln())).abs() < 1e-15);
        assert!((v - 2.6341e-4).abs() < 1e-8);
        assert!(focal_loss(0.0, false, 2.0, 0.25).is_finite());
        assert!(focal_loss(0.0, true, 2.0, 0.25).is_finite());
    }

    #[test]
    fn focal_derivative_matches_differences() {
        for &u in &[true, false] {
            for &gamma in &[0.0, 0.5, 2.0] {
                for &s in &[0.05, 0.3, 0.5, 0.8, 0.97] {
                    let h = 1e-6;
                    let fd = (focal_loss(s + h, u, gamma, 0.25)
                        - focal_loss(s - h, u, gamma, 0.25))
                        / (2.0 * h);
                    let an = focal_loss_grad(s, u, gamma, 0.25);
                    assert!(
                        (fd - an).abs() < 1e-6 * (1.0 + an.abs()),
                        "u={u} g={gamma} s={s}"
                    );
                }
            }
        }
    }

    #[test]
    fn l1_and_total() {
        assert_eq!(iou_l1_loss(0.4, 0.4), 0.0);
        assert!((iou_l1_loss(0.3, 0.8) - 0.5).abs() < 1e-15);
        assert_eq!(iou_l1_loss(0.1, 0.3), iou_l1_loss(0.3, 0.1));
        let labels = FrameLabels {
            u: vec![true],
            v: vec![0.9],
        };
        let cfg0 = LossConfig {
            lambda_iou: 0.0,
            ..Default::default()
        };
        let t = total_loss(&[0.6], &[0.1], &labels, &cfg0).unwrap();
        assert_eq!(t, focal_loss(0.6, true, 2.0, 0.25));
        let perfect =
            total_loss(&[1.0 - PROB_EPS], &[0.9], &labels, &LossConfig::default()).unwrap();
        assert!(perfect < 1e-12);
        assert_eq!(LossConfig::default().lambda_iou, 0.5);
        assert_eq!(
            total_loss(&[], &[], &FrameLabels::default(), &cfg0).unwrap_err(),
            NetError::EmptyBatch
        );
    }

    #[test]
    fn adam_single_step_and_zero_grad() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::zeros(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &cfg, 1);
        assert_eq!(p, vec![1.0, -2.0]);
        let mut st = AdamState::zeros(2);
        adam_step(&mut p, &[3.0, -0.5], &mut st, &cfg, 1);
        // m_hat = g and v_hat = g^2 at t = 1
        assert!((p[0] - (1.0 - 1e-3 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 1e-3 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }

    fn single_detection_features(model: &GaceModel) -> FrameFeatures {
        let n = model.norm.instance_len();
        let mut x = Array2::zeros((1, n));
        x[[0, 8]] = 0.7;
        x[[0, n - 3]] = 1.0;
        FrameFeatures {
            instance: x,
            pairs: PairSet {
                offsets: vec![0, 0],
                neighbor: vec![],
                geometry: Array2::zeros((0, model.norm.neighbor_geometry_len())),
            },
        }
    }

    #[test]
    fn lone_detection_pools_to_zero() {
        let model = GaceModel::new(
            NormConfig::default(),
            ModelDims::default(),
            FeatureGroups::all(),
            Branches::default(),
            3,
        );
        let f = single_detection_features(&model);
        let c = gace_forward(&model, &f);
        assert!(c.pooled().iter().all(|v| *v == 0.0));
        assert!(c.s_hat[0] > 0.0 && c.s_hat[0] < 1.0);
        assert!(c.v_hat[0] > 0.0 && c.v_hat[0] < 1.0);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let mk = || {
            GaceModel::new(
                NormConfig::default(),
                ModelDims::default(),
                FeatureGroups::all(),
                Branches::default(),
                11,
            )
        };
        assert_eq!(mk(), mk());
        assert_eq!(
            mk().param_count(),
            mk().param_slices().iter().map(|s| s.len()).sum::<usize>()
        );
    }
}
