use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::layers::{rms_norm_rows, rms_norm_rows_backward, MlpCache};
use super::{Ablation, FusionConfig, FusionError, FusionOutput, FusionParams, InputDims, Projected, Projection};

/// Encoder features for one item query.
#[derive(Debug, Clone)]
pub struct FusionInput {
    pub before: Arc<Array2<f64>>,
    pub after: Arc<Array2<f64>>,
    pub text: Arc<Array1<f64>>,
}

impl FusionInput {
    pub fn new(before: Arc<Array2<f64>>, after: Arc<Array2<f64>>, text: Arc<Array1<f64>>) -> Self {
        Self { before, after, text }
    }

    /// Stage-1 input: the before image fills both slots.
    pub fn single(before: Arc<Array2<f64>>, text: Arc<Array1<f64>>) -> Self {
        Self { after: Arc::clone(&before), before, text }
    }

    pub fn duplicated(&self) -> bool {
        Arc::ptr_eq(&self.before, &self.after) || *self.before == *self.after
    }
}

/// Activations kept from a forward pass for [`FusionModel::backward`].
#[derive(Debug, Clone)]
pub struct FusionCache {
    duplicated: bool,
    x_img: Array2<f64>,
    img_mlp: Option<MlpCache>,
    h: Array2<f64>,
    h_inv: Option<Array1<f64>>,
    x_text: Array2<f64>,
    text_mlp: Option<MlpCache>,
    q: Array1<f64>,
    q_inv: Option<Array1<f64>>,
    attn: Array2<f64>,
    z_cat: Array1<f64>,
    z: Array1<f64>,
    ffn: MlpCache,
    h_res: Array1<f64>,
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Scaled dot-product attention with one query over `kv` rows (keys = values).
///
/// Returns per-head attention (heads x rows) and the concatenated head outputs.
pub fn cross_attend(q: &ArrayView1<f64>, kv: &ArrayView2<f64>, heads: usize) -> (Array2<f64>, Array1<f64>) {
    let (rows, d) = kv.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn = Array2::zeros((heads, rows));
    let mut z = Array1::zeros(d);
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let v = kv.slice(s![.., r.clone()]);
        let mut logits = v.dot(&q.slice(s![r.clone()])) * scale;
        softmax_in_place(logits.as_slice_mut().expect("contiguous"));
        z.slice_mut(s![r]).assign(&logits.dot(&v));
        attn.row_mut(h).assign(&logits);
    }
    (attn, z)
}

/// Backward of [`cross_attend`]: returns (dL/dq, dL/dkv) given dL/dz.
pub fn cross_attend_backward(
    q: &ArrayView1<f64>,
    kv: &ArrayView2<f64>,
    attn: &Array2<f64>,
    dz: &ArrayView1<f64>,
) -> (Array1<f64>, Array2<f64>) {
    let (rows, d) = kv.dim();
    let heads = attn.nrows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array1::zeros(d);
    let mut dkv = Array2::zeros((rows, d));
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let a = attn.row(h);
        let v = kv.slice(s![.., r.clone()]);
        let dzh = dz.slice(s![r.clone()]);
        let da = v.dot(&dzh);
        let mean = a.dot(&da);
        let dlogit = &a * &(da - mean) * scale;
        dq.slice_mut(s![r.clone()]).assign(&v.t().dot(&dlogit));
        let qh = q.slice(s![r.clone()]);
        let a_col = a.insert_axis(Axis(1));
        let g_col = dlogit.view().insert_axis(Axis(1));
        let block = a_col.dot(&dzh.insert_axis(Axis(0))) + g_col.dot(&qh.insert_axis(Axis(0)));
        dkv.slice_mut(s![.., r]).assign(&block);
    }
    (dq, dkv)
}

/// Splits a 2N attention vector into before/after `side x side` grids.
pub fn attention_halves(attention: &Array1<f64>, side: usize) -> Result<(Array2<f64>, Array2<f64>), FusionError> {
    let n = side * side;
    if attention.len() != 2 * n {
        return Err(FusionError::ShapeMismatch(format!("attention has {} entries, expected {}", attention.len(), 2 * n)));
    }
    let grid = |a: ArrayView1<f64>| a.to_owned().into_shape_with_order((side, side)).expect("square grid");
    Ok((grid(attention.slice(s![..n])), grid(attention.slice(s![n..]))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub dims: InputDims,
    pub params: FusionParams,
}

impl FusionModel {
    pub fn new(config: FusionConfig, dims: InputDims) -> Result<Self, FusionError> {
        config.check_dims(dims)?;
        let params = FusionParams::init(&config, dims);
        Ok(Self { config, dims, params })
    }

    fn check_input(&self, input: &FusionInput) -> Result<(), FusionError> {
        let want = (self.dims.num_patches, self.dims.image_dim);
        for (name, m) in [("before", &input.before), ("after", &input.after)] {
            if m.dim() != want {
                return Err(FusionError::ShapeMismatch(format!("{name} patches are {:?}, expected {want:?}", m.dim())));
            }
        }
        if input.text.len() != self.dims.text_dim {
            return Err(FusionError::ShapeMismatch(format!(
                "text feature has {} entries, expected {}",
                input.text.len(),
                self.dims.text_dim
            )));
        }
        Ok(())
    }

    /// H_img (2N x d_k, source embeddings included) and q_text.
    pub fn project(&self, input: &FusionInput) -> Result<Projected, FusionError> {
        let (out, cache) = self.forward_train(input)?;
        let n = self.dims.num_patches;
        let mut h_img = cache.h.clone();
        if let Some(inv) = &cache.h_inv {
            // undo the normalization so callers see the projection itself
            for (mut row, s) in h_img.axis_iter_mut(Axis(0)).zip(inv.iter()) {
                row /= *s;
            }
        }
        debug_assert_eq!(h_img.nrows(), 2 * n);
        Ok(Projected { h_img, q_text: out.q_text })
    }

    pub fn forward(&self, input: &FusionInput) -> Result<FusionOutput, FusionError> {
        Ok(self.forward_train(input)?.0)
    }

    pub fn forward_train(&self, input: &FusionInput) -> Result<(FusionOutput, FusionCache), FusionError> {
        self.check_input(input)?;
        let p = &self.params;
        let cfg = &self.config;
        let n = self.dims.num_patches;
        let d = cfg.d_k;

        let duplicated = input.duplicated();
        let x_img = if duplicated {
            (*input.before).clone()
        } else {
            concatenate![Axis(0), *input.before, *input.after]
        };
        let (proj, img_mlp) = match cfg.projection {
            Projection::Mlp => {
                let (o, c) = p.phi_img.forward(&x_img.view());
                (o, Some(c))
            }
            Projection::Identity => (x_img.clone(), None),
            Projection::Residual => {
                let (o, c) = p.phi_img.forward(&x_img.view());
                (o + &x_img, Some(c))
            }
        };
        let mut h = Array2::zeros((2 * n, d));
        if duplicated {
            h.slice_mut(s![..n, ..]).assign(&proj);
            h.slice_mut(s![n.., ..]).assign(&proj);
        } else {
            h.assign(&proj);
        }
        {
            let mut top = h.slice_mut(s![..n, ..]);
            top += &p.source.row(0);
        }
        {
            let mut bottom = h.slice_mut(s![n.., ..]);
            bottom += &p.source.row(1);
        }
        let mut h_inv = None;
        if cfg.pre_norm {
            let (y, inv) = rms_norm_rows(&h);
            h = y;
            h_inv = Some(inv);
        }

        let x_text = input.text.view().insert_axis(Axis(0)).to_owned();
        let (q_raw, text_mlp) = match (cfg.ablation, cfg.projection) {
            (Ablation::ImageOnly, _) => (p.query.clone().expect("image_only has a query"), None),
            (_, Projection::Mlp) => {
                let (o, c) = p.phi_text.forward(&x_text.view());
                (o.row(0).to_owned(), Some(c))
            }
            (_, Projection::Identity) => ((*input.text).clone(), None),
            (_, Projection::Residual) => {
                let (o, c) = p.phi_text.forward(&x_text.view());
                (&o.row(0) + &*input.text, Some(c))
            }
        };
        let (q, q_inv) = if cfg.pre_norm {
            let (y, inv) = rms_norm_rows(&q_raw.view().insert_axis(Axis(0)).to_owned());
            (y.row(0).to_owned(), Some(inv))
        } else {
            (q_raw.clone(), None)
        };

        let (attn, z_cat, z) = if cfg.ablation == Ablation::TextOnly {
            let uniform = Array2::from_elem((cfg.heads, 2 * n), 1.0 / (2 * n) as f64);
            (uniform, q_raw.clone(), q_raw.clone())
        } else {
            let (attn, z_cat) = cross_attend(&q.view(), &h.view(), cfg.heads);
            let z = match &p.out_proj {
                Some(o) => o.forward_vec(&z_cat.view()),
                None => z_cat.clone(),
            };
            (attn, z_cat, z)
        };

        let (f, ffn) = p.ffn.forward(&z.view().insert_axis(Axis(0)));
        let h_res = &f.row(0) + &z;
        let prediction = cfg.output_gain * (h_res.dot(&p.head.w.column(0)) + p.head.b[0]);
        let attention = attn.mean_axis(Axis(0)).expect("at least one head");

        let out = FusionOutput { attention, z_attn: z.clone(), h_res: h_res.clone(), q_text: q_raw, prediction };
        let cache =
            FusionCache { duplicated, x_img, img_mlp, h, h_inv, x_text, text_mlp, q, q_inv, attn, z_cat, z, ffn, h_res };
        Ok((out, cache))
    }

    /// Accumulates into `grad` the gradient of
    /// `d_pred * prediction + <d_z, z_attn> + <d_q, q_text>`.
    pub fn backward(
        &self,
        cache: &FusionCache,
        d_pred: f64,
        d_z: Option<&Array1<f64>>,
        d_q: Option<&Array1<f64>>,
        grad: &mut FusionParams,
    ) {
        let p = &self.params;
        let cfg = &self.config;
        let n = self.dims.num_patches;
        let g = cfg.output_gain * d_pred;

        grad.head.w.column_mut(0).scaled_add(g, &cache.h_res);
        grad.head.b[0] += g;
        let d_h_res = p.head.w.column(0).to_owned() * g;

        let z2 = cache.z.view().insert_axis(Axis(0));
        let d_ffn_in = p.ffn.backward(&z2, &cache.ffn, &d_h_res.clone().insert_axis(Axis(0)), &mut grad.ffn);
        let mut dz = d_h_res + &d_ffn_in.row(0);
        if let Some(e) = d_z {
            dz += e;
        }
        let mut dq_raw = match d_q {
            Some(e) => e.clone(),
            None => Array1::zeros(cfg.d_k),
        };

        if cfg.ablation == Ablation::TextOnly {
            dq_raw += &dz;
        } else {
            let dz_cat = match (&p.out_proj, grad.out_proj.as_mut()) {
                (Some(o), Some(go)) => o.backward_vec(&cache.z_cat.view(), &dz, go),
                _ => dz,
            };
            let (dq, dh) = cross_attend_backward(&cache.q.view(), &cache.h.view(), &cache.attn, &dz_cat.view());
            match &cache.q_inv {
                Some(inv) => {
                    let q2 = cache.q.view().insert_axis(Axis(0)).to_owned();
                    let back = rms_norm_rows_backward(&q2, inv, &dq.insert_axis(Axis(0)));
                    dq_raw += &back.row(0);
                }
                None => dq_raw += &dq,
            }
            let dh = match &cache.h_inv {
                Some(inv) => rms_norm_rows_backward(&cache.h, inv, &dh),
                None => dh,
            };
            let top = dh.slice(s![..n, ..]);
            let bottom = dh.slice(s![n.., ..]);
            {
                let mut r = grad.source.row_mut(0);
                r += &top.sum_axis(Axis(0));
            }
            {
                let mut r = grad.source.row_mut(1);
                r += &bottom.sum_axis(Axis(0));
            }
            if let Some(c) = &cache.img_mlp {
                let d_proj = if cache.duplicated { &top + &bottom } else { dh.clone() };
                p.phi_img.backward(&cache.x_img.view(), c, &d_proj, &mut grad.phi_img);
            }
        }

        match cfg.ablation {
            Ablation::ImageOnly => {
                if let Some(gq) = grad.query.as_mut() {
                    *gq += &dq_raw;
                }
            }
            _ => {
                if let Some(c) = &cache.text_mlp {
                    let dq2 = dq_raw.insert_axis(Axis(0));
                    p.phi_text.backward(&cache.x_text.view(), c, &dq2, &mut grad.phi_text);
                }
            }
        }
    }

    /// Gradient of `d_pred * prediction` for one input.
    pub fn prediction_gradient(&self, input: &FusionInput) -> Result<(f64, FusionParams), FusionError> {
        let (out, cache) = self.forward_train(input)?;
        let mut grad = self.params.zeros_like();
        self.backward(&cache, 1.0, None, None, &mut grad);
        Ok((out.prediction, grad))
    }
}
