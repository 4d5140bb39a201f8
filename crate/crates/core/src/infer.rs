//! Single-precision inference. Trained parameters are already `f32` values,
//! so this path reads them without rounding; activations are kept in `f32`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::features::FrameFeatures;
use crate::net::{logistic, Activation, GaceModel, Layer};

#[derive(Debug, Clone)]
struct Dense {
    /// `in x out`, so a batch multiplies on the right without a transpose.
    w: Array2<f32>,
    b: Array1<f32>,
    act: Activation,
}

#[inline]
fn act32(a: Activation, z: f32) -> f32 {
    match a {
        Activation::Identity => z,
        Activation::Relu => z.max(0.0),
        Activation::Tanh => z.tanh(),
        Activation::Logistic => logistic(z as f64) as f32,
    }
}

impl Dense {
    fn from_layer(l: &Layer) -> Self {
        Self {
            w: l.weight.t().mapv(|v| v as f32),
            b: l.bias.mapv(|v| v as f32),
            act: l.activation,
        }
    }

    fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.w);
        let act = self.act;
        for mut row in y.axis_iter_mut(Axis(0)) {
            ndarray::Zip::from(&mut row)
                .and(&self.b)
                .for_each(|v, b| *v = act32(act, *v + b));
        }
        y
    }
}

fn forward_all(layers: &[Dense], x: ArrayView2<f32>) -> Array2<f32> {
    let mut y = layers[0].forward(x);
    for l in &layers[1..] {
        y = l.forward(y.view());
    }
    y
}

/// A trained model prepared for scoring.
#[derive(Debug, Clone)]
pub struct Rescorer {
    instance: Vec<Dense>,
    ctx_geo: Array2<f32>,
    ctx_emb: Array2<f32>,
    ctx_bias: Array1<f32>,
    ctx_act: Activation,
    ctx_rest: Vec<Dense>,
    fusion: Vec<Dense>,
    mask: Array1<f32>,
    context: bool,
    context_embed: usize,
}

impl Rescorer {
    pub fn new(model: &GaceModel) -> Self {
        let l0 = &model.context.layers[0];
        let g = model.norm.neighbor_geometry_len();
        Self {
            instance: model
                .instance
                .layers
                .iter()
                .map(Dense::from_layer)
                .collect(),
            ctx_geo: l0.weight.slice(s![.., ..g]).t().mapv(|v| v as f32),
            ctx_emb: l0.weight.slice(s![.., g..]).t().mapv(|v| v as f32),
            ctx_bias: l0.bias.mapv(|v| v as f32),
            ctx_act: l0.activation,
            ctx_rest: model.context.layers[1..]
                .iter()
                .map(Dense::from_layer)
                .collect(),
            fusion: model.fusion.layers.iter().map(Dense::from_layer).collect(),
            mask: model.mask().into_iter().map(|v| v as f32).collect(),
            context: model.branches.context,
            context_embed: model.context.output_len(),
        }
    }

    pub fn instance_embeddings(&self, feats: &FrameFeatures) -> Array2<f32> {
        let mut x = feats.instance.mapv(|v| v as f32);
        x *= &self.mask;
        forward_all(&self.instance, x.view())
    }

    /// Max-pooled neighbor embeddings, zero for detections without neighbors.
    pub fn pooled_context(&self, feats: &FrameFeatures, f_i: &Array2<f32>) -> Array2<f32> {
        let n = f_i.nrows();
        let e_c = self.context_embed;
        let pairs = &feats.pairs;
        let mut pooled = Array2::zeros((n, e_c));
        if !self.context || pairs.is_empty() {
            return pooled;
        }
        let proj = f_i.dot(&self.ctx_emb);
        let mut hidden = pairs.geometry.mapv(|v| v as f32).dot(&self.ctx_geo);
        let act = self.ctx_act;
        for (k, mut row) in hidden.axis_iter_mut(Axis(0)).enumerate() {
            let pj = proj.row(pairs.neighbor[k] as usize);
            ndarray::Zip::from(&mut row)
                .and(&pj)
                .and(&self.ctx_bias)
                .for_each(|v, p, b| *v = act32(act, *v + p + b));
        }
        let out = forward_all(&self.ctx_rest, hidden.view());
        for (i, mut dst) in pooled.axis_iter_mut(Axis(0)).enumerate() {
            let range = pairs.range(i);
            if range.is_empty() {
                continue;
            }
            dst.assign(&out.row(range.start));
            for q in range.start + 1..range.end {
                ndarray::Zip::from(&mut dst)
                    .and(&out.row(q))
                    .for_each(|d, v| {
                        if *v > *d {
                            *d = *v
                        }
                    });
            }
        }
        pooled
    }

    /// `(n, 2)` outputs: confidence and IoU estimate.
    pub fn fuse(&self, f_i: &Array2<f32>, pooled: &Array2<f32>) -> Array2<f32> {
        let x = ndarray::concatenate(Axis(1), &[f_i.view(), pooled.view()]).expect("fusion concat");
        forward_all(&self.fusion, x.view())
    }

    pub fn outputs(&self, feats: &FrameFeatures) -> Array2<f32> {
        let f_i = self.instance_embeddings(feats);
        let pooled = self.pooled_context(feats, &f_i);
        self.fuse(&f_i, &pooled)
    }

    pub fn scores(&self, feats: &FrameFeatures) -> Vec<f64> {
        if feats.is_empty() {
            return Vec::new();
        }
        self.outputs(feats)
            .column(0)
            .iter()
            .map(|v| *v as f64)
            .collect()
    }
}
