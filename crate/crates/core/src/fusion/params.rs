use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::layers::{Linear, Mlp};
use super::{Ablation, FusionConfig, InputDims, Projection};

/// Every trainable tensor of the fusion network.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub phi_img: Mlp,
    pub phi_text: Mlp,
    /// Row 0 is added to before-patches, row 1 to after-patches.
    pub source: Array2<f64>,
    /// Learned constant query, image-only ablation.
    pub query: Option<Array1<f64>>,
    /// Head-mixing projection, only when `heads > 1`.
    pub out_proj: Option<Linear>,
    pub ffn: Mlp,
    pub head: Linear,
}

fn identity(d: usize) -> Mlp {
    // GELU is not invertible, so identity mode bypasses the MLP; the
    // parameters exist only to keep tensor names stable.
    Mlp { l1: Linear::zeros(d, d), l2: Linear::zeros(d, d) }
}

impl FusionParams {
    pub fn init(config: &FusionConfig, dims: InputDims) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.d_k;
        let (phi_img, phi_text) = match config.projection {
            Projection::Mlp => (
                Mlp::new_uniform(&mut rng, dims.image_dim, d, d),
                Mlp::new_uniform(&mut rng, dims.text_dim, d, d),
            ),
            Projection::Identity => (identity(d), identity(d)),
            Projection::Residual => {
                let residual = |rng: &mut ChaCha8Rng| {
                    let mut m = Mlp::new_uniform(rng, d, d, d);
                    m.l2 = Linear::zeros(d, d);
                    m
                };
                (residual(&mut rng), residual(&mut rng))
            }
        };
        let query = (config.ablation == Ablation::ImageOnly).then(|| {
            let bound = 1.0 / (d as f64).sqrt();
            Array1::from_shape_fn(d, |_| rng.random_range(-bound..bound))
        });
        let out_proj = (config.heads > 1).then(|| Linear::new_uniform(&mut rng, d, d));
        let ffn = Mlp::new_uniform(&mut rng, d, config.ffn_hidden, d);
        let mut head = Linear::new_uniform(&mut rng, d, 1);
        head.b.fill(0.0);
        Self { phi_img, phi_text, source: Array2::zeros((2, d)), query, out_proj, ffn, head }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            phi_img: self.phi_img.zeros_like(),
            phi_text: self.phi_text.zeros_like(),
            source: Array2::zeros(self.source.raw_dim()),
            query: self.query.as_ref().map(|q| Array1::zeros(q.len())),
            out_proj: self.out_proj.as_ref().map(Linear::zeros_like),
            ffn: self.ffn.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// (name, shape, values) in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        type Entry<'a> = (String, Vec<usize>, &'a [f64]);
        fn lin<'a>(prefix: &str, l: &'a Linear, out: &mut Vec<Entry<'a>>) {
            out.push((format!("{prefix}.w"), l.w.shape().to_vec(), l.w.as_slice().expect("contiguous")));
            out.push((format!("{prefix}.b"), l.b.shape().to_vec(), l.b.as_slice().expect("contiguous")));
        }
        let mut out = Vec::new();
        lin("phi_img.l1", &self.phi_img.l1, &mut out);
        lin("phi_img.l2", &self.phi_img.l2, &mut out);
        lin("phi_text.l1", &self.phi_text.l1, &mut out);
        lin("phi_text.l2", &self.phi_text.l2, &mut out);
        out.push(("source".into(), self.source.shape().to_vec(), self.source.as_slice().expect("contiguous")));
        if let Some(q) = &self.query {
            out.push(("query".into(), q.shape().to_vec(), q.as_slice().expect("contiguous")));
        }
        if let Some(o) = &self.out_proj {
            lin("out_proj", o, &mut out);
        }
        lin("ffn.l1", &self.ffn.l1, &mut out);
        lin("ffn.l2", &self.ffn.l2, &mut out);
        lin("head", &self.head, &mut out);
        out
    }

    /// Mutable views in the same order as [`FusionParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn lin<'a>(l: &'a mut Linear, out: &mut Vec<&'a mut [f64]>) {
            out.push(l.w.as_slice_mut().expect("contiguous"));
            out.push(l.b.as_slice_mut().expect("contiguous"));
        }
        let mut out = Vec::new();
        lin(&mut self.phi_img.l1, &mut out);
        lin(&mut self.phi_img.l2, &mut out);
        lin(&mut self.phi_text.l1, &mut out);
        lin(&mut self.phi_text.l2, &mut out);
        out.push(self.source.as_slice_mut().expect("contiguous"));
        if let Some(q) = &mut self.query {
            out.push(q.as_slice_mut().expect("contiguous"));
        }
        if let Some(o) = &mut self.out_proj {
            lin(o, &mut out);
        }
        lin(&mut self.ffn.l1, &mut out);
        lin(&mut self.ffn.l2, &mut out);
        lin(&mut self.head, &mut out);
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &FusionParams) {
        let src: Vec<&[f64]> = other.tensors().into_iter().map(|(_, _, v)| v).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, _, v)| v.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape, values) in self.tensors() {
            h.update(name.as_bytes());
            for s in shape {
                h.update((s as u64).to_le_bytes());
            }
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
