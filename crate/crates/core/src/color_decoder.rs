//! Query-based color decoder.
//!
//! `K` learnable color queries, zero at initialisation, are refined by a
//! stack of color decoder blocks. Each block attends from the queries to one
//! scale of pixel-decoder features (cross-attention with residual, no norm),
//! then runs pre-norm multi-head self-attention and a pre-norm MLP, both with
//! residuals, and ends with a layer norm. Blocks consume the scale schedule
//! in order, and the whole group repeats round-robin.
//!
//! No positional encodings are used, so cross-attention treats the feature
//! positions as a set. Positions are flattened row-major.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};

use crate::config::{Attention, ColorDecoderConfig, Scale};
use crate::error::{Error, Result};
use crate::fusion::fuse;
use crate::nn::{ensure_finite, softmax_last, Init, LayerNorm, Linear, ParamStore};

const INIT: Init = Init::Xavier;
const LN_EPS: f64 = 1e-5;

/// `(B, N, C)` -> `(B, heads, N, C / heads)`.
fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    Ok(x.reshape((b, n, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, n, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * d))?)
}

/// Multi-head scaled (or unscaled) dot-product attention. Returns the
/// attended values `(B, Nq, C)` and the attention weights `(B, h, Nq, Nk)`.
fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, scaled: bool, what: &str) -> Result<(Tensor, Tensor)> {
    let c = q.dim(2)?;
    let (q, k, v) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let mut logits = q.matmul(&k.transpose(2, 3)?.contiguous()?)?;
    if scaled {
        logits = (logits / ((c / heads) as f64).sqrt())?;
    }
    ensure_finite(&logits, what)?;
    let weights = softmax_last(&logits)?;
    let out = weights.matmul(&v)?;
    Ok((merge_heads(&out)?, weights))
}

/// `Z' = softmax(f_Q(Z) f_K(F)^T) f_V(F) + Z` with affine projections.
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub heads: usize,
    pub scaled: bool,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, scaled: bool) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, INIT)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, INIT)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, INIT)?,
            heads,
            scaled,
        })
    }

    /// `z` is `(B, K, C)`, `features` is `(B, N, C)` (already projected).
    pub fn forward_with_weights(&self, z: &Tensor, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, _, c) = z.dims3()?;
        let (bf, _, cf) = features.dims3()?;
        if (bf, cf) != (b, c) {
            return Err(Error::shape(
                "cross-attention features",
                (b, "N", c),
                features.dims().to_vec(),
            ));
        }
        let q = self.q.forward(z)?;
        let k = self.k.forward(features)?;
        let v = self.v.forward(features)?;
        let (attended, weights) = attend(&q, &k, &v, self.heads, self.scaled, "cross-attention logits")?;
        Ok(((attended + z)?, weights))
    }

    pub fn forward(&self, z: &Tensor, features: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(z, features)?.0)
    }
}

/// `Z'' = MSA(LN(Z')) + Z'`.
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim, LN_EPS)?,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, INIT)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, INIT)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, INIT)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, INIT)?,
            heads,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let x = self.norm.forward(z)?;
        let (q, k, v) = (self.q.forward(&x)?, self.k.forward(&x)?, self.v.forward(&x)?);
        let (attended, _) = attend(&q, &k, &v, self.heads, true, "self-attention logits")?;
        Ok((self.out.forward(&attended)? + z)?)
    }
}

/// `Z''' = MLP(LN(Z'')) + Z''`.
pub struct Mlp {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim, LN_EPS)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, INIT)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, INIT)?,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(&self.norm.forward(z)?)?.relu()?;
        Ok((self.fc2.forward(&h)? + z)?)
    }
}

pub enum Sublayer {
    Cross(CrossAttention),
    Self_(SelfAttention),
}

impl Sublayer {
    fn forward(&self, z: &Tensor, features: &Tensor) -> Result<Tensor> {
        match self {
            Sublayer::Cross(ca) => ca.forward(z, features),
            Sublayer::Self_(sa) => sa.forward(z),
        }
    }
}

/// One color decoder block.
pub struct ColorDecoderBlock {
    pub sublayers: [Sublayer; 2],
    pub mlp: Mlp,
    pub norm: LayerNorm,
}

impl ColorDecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ColorDecoderConfig) -> Result<Self> {
        let c = cfg.embed_dim;
        let make = |store: &mut ParamStore, kind: Attention, slot: usize| -> Result<Sublayer> {
            Ok(match kind {
                Attention::Cross => Sublayer::Cross(CrossAttention::new(
                    store,
                    &format!("{name}.attn{slot}.cross"),
                    c,
                    cfg.cross_heads(),
                    cfg.cross_attention_scaled,
                )?),
                Attention::Self_ => Sublayer::Self_(SelfAttention::new(
                    store,
                    &format!("{name}.attn{slot}.self"),
                    c,
                    cfg.heads,
                )?),
            })
        };
        let [first, second] = cfg.block_order.sublayers();
        let sublayers = [make(store, first, 0)?, make(store, second, 1)?];
        Ok(Self {
            sublayers,
            mlp: Mlp::new(store, &format!("{name}.mlp"), c, cfg.ffn_dim)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), c, LN_EPS)?,
        })
    }

    /// `z` is `(B, K, C)`, `features` is `(B, N, C)`; returns `(B, K, C)`.
    pub fn forward(&self, z: &Tensor, features: &Tensor) -> Result<Tensor> {
        let mut z = z.clone();
        for sub in &self.sublayers {
            z = sub.forward(&z, features)?;
        }
        let z = self.mlp.forward(&z)?;
        self.norm.forward(&z)
    }
}

/// Pixel-decoder maps keyed by scale, each `(B, C_s, H/s, W/s)`.
pub struct ScaleFeatures<'a> {
    pub f16: &'a Tensor,
    pub f8: &'a Tensor,
    pub f4: &'a Tensor,
}

impl ScaleFeatures<'_> {
    fn get(&self, scale: Scale) -> &Tensor {
        match scale {
            Scale::Sixteenth => self.f16,
            Scale::Eighth => self.f8,
            Scale::Quarter => self.f4,
        }
    }
}

/// Color embedding plus, per executed block, the scale it consumed and the
/// spatial size of that feature map.
pub struct ColorDecoderOutput {
    pub embedding: Tensor,
    pub trace: Vec<(Scale, (usize, usize))>,
}

pub struct ColorDecoder {
    pub queries: Var,
    pub projections: BTreeMap<Scale, Linear>,
    pub blocks: Vec<ColorDecoderBlock>,
    cfg: ColorDecoderConfig,
    feature_widths: BTreeMap<Scale, usize>,
}

impl ColorDecoder {
    /// `feature_widths` gives the channel count of the 1/16, 1/8 and 1/4
    /// pixel-decoder maps.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ColorDecoderConfig,
        feature_widths: [usize; 3],
    ) -> Result<Self> {
        cfg.validate()?;
        let available: BTreeMap<Scale, usize> = [Scale::Sixteenth, Scale::Eighth, Scale::Quarter]
            .into_iter()
            .zip(feature_widths)
            .collect();
        let mut projections = BTreeMap::new();
        for &scale in &cfg.scale_schedule {
            let width = *available
                .get(&scale)
                .ok_or_else(|| Error::Config(format!("no feature map at scale 1/{}", scale.stride())))?;
            if let std::collections::btree_map::Entry::Vacant(e) = projections.entry(scale) {
                e.insert(Linear::new(
                    store,
                    &format!("{name}.proj{}", scale.stride()),
                    width,
                    cfg.embed_dim,
                    INIT,
                )?);
            }
        }
        let queries = store.zeros(&format!("{name}.queries"), &[cfg.queries, cfg.embed_dim])?;
        let blocks = (0..cfg.num_blocks())
            .map(|i| ColorDecoderBlock::new(store, &format!("{name}.block{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries,
            projections,
            blocks,
            cfg: cfg.clone(),
            feature_widths: available,
        })
    }

    pub fn config(&self) -> &ColorDecoderConfig {
        &self.cfg
    }

    /// Flattens `(B, C_s, h, w)` row-major to `(B, h*w, C_s)` and projects
    /// to the embedding width.
    fn project(&self, scale: Scale, f: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = f.dims4()?;
        let expected = self.feature_widths[&scale];
        if c != expected {
            return Err(Error::shape("color decoder feature width", expected, c));
        }
        let flat = f.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        self.projections[&scale].forward(&flat)
    }

    pub fn forward(&self, features: &ScaleFeatures<'_>) -> Result<ColorDecoderOutput> {
        let b = features.f4.dim(0)?;
        let mut projected = BTreeMap::new();
        for &scale in self.projections.keys() {
            projected.insert(scale, self.project(scale, features.get(scale))?);
        }
        let mut z = self.queries.as_tensor().broadcast_left(b)?.contiguous()?;
        let mut trace = Vec::with_capacity(self.blocks.len());
        for (block, scale) in self.blocks.iter().zip(self.cfg.block_scales()) {
            z = block.forward(&z, &projected[&scale])?;
            let (_, _, h, w) = features.get(scale).dims4()?;
            trace.push((scale, (h, w)));
        }
        Ok(ColorDecoderOutput { embedding: z, trace })
    }
}

/// Per-query activation maps `sigmoid(<query_k, E_i[:, h, w]>)`, shape
/// `(B, K, H, W)`.
pub fn query_attention_maps(queries: &Tensor, image_embedding: &Tensor) -> Result<Tensor> {
    sigmoid(&fuse(queries, image_embedding)?)
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}
