//! CLIP ViT backbone read from a HuggingFace-layout checkpoint directory.
//!
//! Expected files: `model.safetensors`, `vocab.json`, `merges.txt` and an
//! optional `config.json` (only the attention head counts are read from it;
//! every width comes from the tensors). Patch features are the final encoder
//! layer's token outputs without the class token; the text feature is the
//! projected end-of-text embedding.

use std::collections::BTreeMap;
use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{s, Array1, Array2, Axis};
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use super::{fit_square, ClipTokenizer, Encoder, EncoderError, EncoderInfo, ImageSource, PatchFeatures, TextFeature};

const MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];
const LN_EPS: f32 = 1e-5;

/// Named f32 tensors with their shapes.
pub type ClipTensors = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

struct Linear {
    w: Array2<f32>,
    b: Option<Array1<f32>>,
}

impl Linear {
    fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.w.t());
        if let Some(b) = &self.b {
            y += b;
        }
        y
    }
}

struct LayerNorm {
    g: Array1<f32>,
    b: Array1<f32>,
}

impl LayerNorm {
    fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.clone();
        for mut row in y.axis_iter_mut(Axis(0)) {
            let n = row.len() as f32;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.g).zip(&self.b) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        y
    }
}

struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct Tower {
    blocks: Vec<Block>,
    heads: usize,
}

fn quick_gelu(x: f32) -> f32 {
    x / (1.0 + (-1.702 * x).exp())
}

fn softmax_rows(m: &mut Array2<f32>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl Tower {
    fn forward(&self, mut x: Array2<f32>, causal: bool) -> Array2<f32> {
        let (n, d) = x.dim();
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f32).sqrt();
        for blk in &self.blocks {
            let h = blk.ln1.forward(&x);
            let (q, k, v) = (blk.q.forward(&h), blk.k.forward(&h), blk.v.forward(&h));
            let mut ctx = Array2::<f32>::zeros((n, d));
            for head in 0..self.heads {
                let cols = s![.., head * hd..(head + 1) * hd];
                let mut logits = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                if causal {
                    for i in 0..n {
                        for j in i + 1..n {
                            logits[[i, j]] = f32::NEG_INFINITY;
                        }
                    }
                }
                softmax_rows(&mut logits);
                ctx.slice_mut(cols).assign(&logits.dot(&v.slice(cols)));
            }
            x += &blk.o.forward(&ctx);
            let h = blk.ln2.forward(&x);
            let mid = blk.fc1.forward(&h).mapv(quick_gelu);
            x += &blk.fc2.forward(&mid);
        }
        x
    }
}

pub struct ClipEncoder {
    tokenizer: ClipTokenizer,
    patch_w: Array2<f32>,
    class_emb: Array1<f32>,
    vis_pos: Array2<f32>,
    pre_ln: LayerNorm,
    vision: Tower,
    tok_emb: Array2<f32>,
    txt_pos: Array2<f32>,
    text: Tower,
    final_ln: LayerNorm,
    text_proj: Array2<f32>,
    patch_side: u32,
    image_side: u32,
    digest: String,
}

fn to_f32(dtype: Dtype, bytes: &[u8]) -> Result<Vec<f32>, EncoderError> {
    let half = |b: &[u8]| u16::from_le_bytes([b[0], b[1]]);
    Ok(match dtype {
        Dtype::F32 => bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
        Dtype::BF16 => bytes.chunks_exact(2).map(|b| f32::from_bits((half(b) as u32) << 16)).collect(),
        Dtype::F16 => bytes.chunks_exact(2).map(|b| f16_to_f32(half(b))).collect(),
        other => return Err(EncoderError::Weights(format!("unsupported dtype {other:?}"))),
    })
}

fn f16_to_f32(h: u16) -> f32 {
    let sign = ((h >> 15) as u32) << 31;
    let exp = ((h >> 10) & 0x1f) as u32;
    let frac = (h & 0x3ff) as u32;
    let bits = match (exp, frac) {
        (0, 0) => sign,
        (0, f) => {
            // subnormal: renormalize
            let shift = f.leading_zeros() - 21;
            sign | ((127 - 15 - shift + 1) << 23) | (((f << shift) & 0x3ff) << 13)
        }
        (0x1f, f) => sign | 0x7f80_0000 | (f << 13),
        (e, f) => sign | ((e + 127 - 15) << 23) | (f << 13),
    };
    f32::from_bits(bits)
}

/// Reads every tensor of a safetensors buffer as f32.
pub fn read_safetensors(bytes: &[u8]) -> Result<ClipTensors, EncoderError> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| EncoderError::Weights(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        out.insert(name, (view.shape().to_vec(), to_f32(view.dtype(), view.data())?));
    }
    Ok(out)
}

struct Loader<'a> {
    tensors: &'a ClipTensors,
}

impl Loader<'_> {
    fn raw(&self, name: &str) -> Result<&(Vec<usize>, Vec<f32>), EncoderError> {
        self.tensors.get(name).ok_or_else(|| EncoderError::Weights(format!("missing tensor `{name}`")))
    }

    fn vec(&self, name: &str) -> Result<Array1<f32>, EncoderError> {
        let (_, data) = self.raw(name)?;
        Ok(Array1::from(data.clone()))
    }

    fn mat(&self, name: &str) -> Result<Array2<f32>, EncoderError> {
        let (shape, data) = self.raw(name)?;
        let rows = shape.first().copied().unwrap_or(1);
        let cols = data.len() / rows.max(1);
        Array2::from_shape_vec((rows, cols), data.clone()).map_err(|e| EncoderError::Weights(format!("{name}: {e}")))
    }

    fn linear(&self, prefix: &str, bias: bool) -> Result<Linear, EncoderError> {
        Ok(Linear {
            w: self.mat(&format!("{prefix}.weight"))?,
            b: if bias { Some(self.vec(&format!("{prefix}.bias"))?) } else { None },
        })
    }

    fn ln(&self, prefix: &str) -> Result<LayerNorm, EncoderError> {
        Ok(LayerNorm { g: self.vec(&format!("{prefix}.weight"))?, b: self.vec(&format!("{prefix}.bias"))? })
    }

    fn tower(&self, prefix: &str, heads: Option<usize>) -> Result<Tower, EncoderError> {
        let mut blocks = Vec::new();
        loop {
            let p = format!("{prefix}.encoder.layers.{}", blocks.len());
            if !self.tensors.contains_key(&format!("{p}.layer_norm1.weight")) {
                break;
            }
            blocks.push(Block {
                ln1: self.ln(&format!("{p}.layer_norm1"))?,
                q: self.linear(&format!("{p}.self_attn.q_proj"), true)?,
                k: self.linear(&format!("{p}.self_attn.k_proj"), true)?,
                v: self.linear(&format!("{p}.self_attn.v_proj"), true)?,
                o: self.linear(&format!("{p}.self_attn.out_proj"), true)?,
                ln2: self.ln(&format!("{p}.layer_norm2"))?,
                fc1: self.linear(&format!("{p}.mlp.fc1"), true)?,
                fc2: self.linear(&format!("{p}.mlp.fc2"), true)?,
            });
        }
        if blocks.is_empty() {
            return Err(EncoderError::Weights(format!("no encoder layers under `{prefix}`")));
        }
        let width = blocks[0].q.w.nrows();
        let heads = heads.unwrap_or_else(|| (width / 64).max(1));
        if width % heads != 0 {
            return Err(EncoderError::Weights(format!("{prefix}: width {width} not divisible by {heads} heads")));
        }
        Ok(Tower { blocks, heads })
    }
}

impl ClipEncoder {
    /// Loads `model.safetensors` (+ tokenizer files) from `dir`.
    pub fn load(dir: &Path) -> Result<Self, EncoderError> {
        let weights = dir.join("model.safetensors");
        let bytes = std::fs::read(&weights)
            .map_err(|e| EncoderError::BackendUnavailable(format!("{}: {e}", weights.display())))?;
        let tensors = read_safetensors(&bytes)?;
        let tokenizer = ClipTokenizer::from_dir(dir)?;
        let heads = std::fs::read_to_string(dir.join("config.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .map(|cfg| {
                let get = |k: &str| cfg[k]["num_attention_heads"].as_u64().map(|h| h as usize);
                (get("vision_config"), get("text_config"))
            })
            .unwrap_or((None, None));
        Self::from_tensors(&tensors, tokenizer, heads)
    }

    pub fn from_tensors(
        tensors: &ClipTensors,
        tokenizer: ClipTokenizer,
        (vision_heads, text_heads): (Option<usize>, Option<usize>),
    ) -> Result<Self, EncoderError> {
        let ld = Loader { tensors };
        let (pshape, _) = ld.raw("vision_model.embeddings.patch_embedding.weight")?;
        if pshape.len() != 4 || pshape[1] != 3 || pshape[2] != pshape[3] {
            return Err(EncoderError::Weights(format!("unexpected patch embedding shape {pshape:?}")));
        }
        let patch_side = pshape[2] as u32;
        let vis_pos = ld.mat("vision_model.embeddings.position_embedding.weight")?;
        let n = vis_pos.nrows() - 1;
        let grid = (n as f64).sqrt().round() as usize;
        if grid * grid != n {
            return Err(EncoderError::Weights(format!("{n} patch positions do not form a square grid")));
        }
        let mut digest = Sha256::new();
        for (name, (shape, data)) in tensors {
            digest.update(name.as_bytes());
            for d in shape {
                digest.update((*d as u64).to_le_bytes());
            }
            for v in data {
                digest.update(v.to_le_bytes());
            }
        }
        Ok(Self {
            tokenizer,
            patch_w: ld.mat("vision_model.embeddings.patch_embedding.weight")?,
            class_emb: ld.vec("vision_model.embeddings.class_embedding")?,
            vis_pos,
            pre_ln: ld.ln("vision_model.pre_layrnorm")?,
            vision: ld.tower("vision_model", vision_heads)?,
            tok_emb: ld.mat("text_model.embeddings.token_embedding.weight")?,
            txt_pos: ld.mat("text_model.embeddings.position_embedding.weight")?,
            text: ld.tower("text_model", text_heads)?,
            final_ln: ld.ln("text_model.final_layer_norm")?,
            text_proj: ld.mat("text_projection.weight")?,
            patch_side,
            image_side: grid as u32 * patch_side,
            digest: hex::encode(digest.finalize()),
        })
    }

    fn pixel_patches(&self, img: &RgbImage) -> Array2<f32> {
        let p = self.patch_side;
        let grid = self.image_side / p;
        let cols = (3 * p * p) as usize;
        let mut out = Array2::zeros(((grid * grid) as usize, cols));
        for gy in 0..grid {
            for gx in 0..grid {
                let row = (gy * grid + gx) as usize;
                for c in 0..3 {
                    for ky in 0..p {
                        for kx in 0..p {
                            let px = img.get_pixel(gx * p + kx, gy * p + ky).0[c] as f32 / 255.0;
                            out[[row, (c as u32 * p * p + ky * p + kx) as usize]] = (px - MEAN[c]) / STD[c];
                        }
                    }
                }
            }
        }
        out
    }
}

impl Encoder for ClipEncoder {
    fn info(&self) -> EncoderInfo {
        EncoderInfo {
            name: "clip".into(),
            image_dim: self.class_emb.len(),
            text_dim: self.text_proj.nrows(),
            num_patches: self.vis_pos.nrows() - 1,
            image_side: self.image_side,
            patch_side: self.patch_side,
            frozen: true,
        }
    }

    fn encode_image(&self, image: &RgbImage, source: ImageSource) -> Result<PatchFeatures, EncoderError> {
        let img = fit_square(image, self.image_side, FilterType::CatmullRom)?;
        let patches = self.pixel_patches(&img).dot(&self.patch_w.t());
        let n = patches.nrows();
        let mut x = Array2::zeros((n + 1, self.class_emb.len()));
        x.row_mut(0).assign(&self.class_emb);
        x.slice_mut(s![1.., ..]).assign(&patches);
        x += &self.vis_pos;
        let out = self.vision.forward(self.pre_ln.forward(&x), false);
        Ok(PatchFeatures { matrix: out.slice(s![1.., ..]).mapv(f64::from), source })
    }

    fn encode_text(&self, prompt: &str) -> Result<TextFeature, EncoderError> {
        if prompt.trim().is_empty() {
            return Err(EncoderError::EmptyPrompt);
        }
        let ids = self.tokenizer.encode(prompt, self.txt_pos.nrows());
        let mut x = Array2::zeros((ids.len(), self.tok_emb.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.tok_emb.nrows() {
                return Err(EncoderError::Weights(format!("token id {id} outside embedding table")));
            }
            let row = &self.tok_emb.row(id) + &self.txt_pos.row(i);
            x.row_mut(i).assign(&row);
        }
        let h = self.final_ln.forward(&self.text.forward(x, true));
        let eos = ids.iter().position(|&i| i == self.tokenizer.end_id()).unwrap_or(ids.len() - 1);
        let pooled = h.row(eos);
        Ok(TextFeature { vector: self.text_proj.dot(&pooled).mapv(f64::from) })
    }

    fn parameter_digest(&self) -> String {
        self.digest.clone()
    }
}
