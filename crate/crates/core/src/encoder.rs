//! One-stream ViT over `[TIT | template | search]` tokens.

use jn_autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{trunc_normal, Activation, LayerNorm, Linear, Mlp, INIT_STD};

const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TitSource {
    Cxcywh,
    Wh,
}

impl TitSource {
    pub fn len(self) -> usize {
        match self {
            Self::Cxcywh => 4,
            Self::Wh => 2,
        }
    }

    /// Network inputs for a template box normalized to the template crop.
    pub fn values(self, b: &BBox) -> Vec<f64> {
        match self {
            Self::Cxcywh => vec![b.cx(), b.cy(), b.w, b.h],
            Self::Wh => vec![b.w, b.h],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TitAttention {
    All,
    TemplateOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TitTokens {
    /// No target-indicating token at all (ablation baseline).
    None,
    OneMlp,
    FourScalar,
    Sincos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub template_res: usize,
    pub search_res: usize,
    pub tit_source: TitSource,
    pub tit_attention: TitAttention,
    pub tit_token_count: TitTokens,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            patch_size: 8,
            template_res: 32,
            search_res: 64,
            tit_source: TitSource::Cxcywh,
            tit_attention: TitAttention::All,
            tit_token_count: TitTokens::OneMlp,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.patch_size == 0 {
            return bad("embed_dim, num_heads and patch_size must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        for (name, res) in [("template_res", self.template_res), ("search_res", self.search_res)] {
            if res == 0 || res % self.patch_size != 0 {
                return bad(format!("{name} {res} not a positive multiple of patch_size {}", self.patch_size));
            }
        }
        if self.tit_token_count == TitTokens::Sincos && self.embed_dim % (2 * self.tit_source.len()) != 0 {
            return bad(format!(
                "sincos token needs embed_dim divisible by {}",
                2 * self.tit_source.len()
            ));
        }
        Ok(())
    }

    pub fn template_grid(&self) -> usize {
        self.template_res / self.patch_size
    }

    pub fn search_grid(&self) -> usize {
        self.search_res / self.patch_size
    }

    pub fn num_template_tokens(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn num_search_tokens(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn num_tit_tokens(&self) -> usize {
        match self.tit_token_count {
            TitTokens::None => 0,
            TitTokens::OneMlp | TitTokens::Sincos => 1,
            TitTokens::FourScalar => self.tit_source.len(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tit_tokens() + self.num_template_tokens() + self.num_search_tokens()
    }
}

/// Fixed sine/cosine code of each number at frequencies `2^k π`.
pub fn sincos_encoding(values: &[f64], dim: usize) -> Vec<f64> {
    let freqs = dim / (2 * values.len());
    let mut out = Vec::with_capacity(dim);
    for &v in values {
        for k in 0..freqs {
            let a = (1u64 << k) as f64 * std::f64::consts::PI * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Rows of `(c, dy, dx)`-flattened patches, row-major over the patch grid.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] || s[1] % patch != 0 {
        return Err(Error::Config(format!("cannot patchify image of shape {s:?} with patch {patch}")));
    }
    let (res, g) = (s[1], s[1] / patch);
    let d = image.data();
    let cols = 3 * patch * patch;
    let mut out = Vec::with_capacity(g * g * cols);
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for dy in 0..patch {
                    let row = (c * res + gy * patch + dy) * res + gx * patch;
                    out.extend_from_slice(&d[row..row + patch]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![g * g, cols], out)?)
}

#[derive(Clone, Debug)]
enum TitModule {
    None,
    OneMlp(Mlp),
    FourScalar { mlp: Mlp, slots: ParamId },
    Sincos,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    patch_embed: Linear,
    pos_template: ParamId,
    pos_search: ParamId,
    tit: TitModule,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

pub struct EncoderOutput {
    /// Search tokens `[H_f * W_f, D]`, row-major over the feature grid.
    pub features: Var,
    /// Per layer, head-averaged attention `[T, T]` when requested.
    pub attention: Vec<Tensor>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let patch_embed = Linear::new(store, "encoder.patch_embed", 3 * p * p, d, rng)?;
        let pos_template = store.add(
            "encoder.pos_template",
            trunc_normal(rng, &[cfg.num_template_tokens(), d], INIT_STD),
            false,
        )?;
        let pos_search = store.add(
            "encoder.pos_search",
            trunc_normal(rng, &[cfg.num_search_tokens(), d], INIT_STD),
            false,
        )?;
        let src = cfg.tit_source.len();
        let tit = match cfg.tit_token_count {
            TitTokens::None => TitModule::None,
            TitTokens::OneMlp => TitModule::OneMlp(Mlp::new(store, "tit.mlp", (src, d, d), Activation::Gelu, rng)?),
            TitTokens::FourScalar => TitModule::FourScalar {
                mlp: Mlp::new(store, "tit.mlp", (1, d, d), Activation::Gelu, rng)?,
                slots: store.add("tit.slots", trunc_normal(rng, &[src, d], INIT_STD), false)?,
            },
            TitTokens::Sincos => TitModule::Sincos,
        };
        let blocks = (0..cfg.num_layers)
            .map(|l| {
                let n = format!("encoder.blocks.{l}");
                Ok(Block {
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d)?,
                    qkv: Linear::new(store, &format!("{n}.qkv"), d, 3 * d, rng)?,
                    proj: Linear::new(store, &format!("{n}.proj"), d, d, rng)?,
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d)?,
                    mlp: Mlp::new(store, &format!("{n}.mlp"), (d, 4 * d, d), Activation::Gelu, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "encoder.norm", d)?;
        Ok(Self {
            cfg,
            patch_embed,
            pos_template,
            pos_search,
            tit,
            blocks,
            norm,
        })
    }

    /// Patch tokens plus the stream's positional table.
    pub fn patch_embed(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, search: bool) -> Result<Var> {
        let (res, pos) = if search {
            (self.cfg.search_res, self.pos_search)
        } else {
            (self.cfg.template_res, self.pos_template)
        };
        if image.shape() != [3, res, res] {
            return Err(Error::Config(format!(
                "{} image has shape {:?}, expected [3, {res}, {res}]",
                if search { "search" } else { "template" },
                image.shape()
            )));
        }
        let patches = tape.constant(patchify(image, self.cfg.patch_size)?);
        let tokens = self.patch_embed.forward(tape, store, patches)?;
        let pos = tape.param(store, pos);
        Ok(tape.add(tokens, pos)?)
    }

    /// Target-indicating tokens `[t, D]` for a template box normalized to [0, 1].
    pub fn make_tit(&self, tape: &mut Tape, store: &ParamStore, box_z: &BBox) -> Result<Option<Var>> {
        let vals = self.cfg.tit_source.values(box_z);
        let all = [box_z.x, box_z.y, box_z.x1(), box_z.y1()];
        if all.iter().any(|v| !(-1e-6..=1.0 + 1e-6).contains(v)) {
            return Err(Error::Config(format!("template box {box_z:?} is not normalized to [0, 1]")));
        }
        let d = self.cfg.embed_dim;
        let tok = match &self.tit {
            TitModule::None => return Ok(None),
            TitModule::OneMlp(mlp) => {
                let x = tape.constant(Tensor::new(vec![1, vals.len()], vals)?);
                mlp.forward(tape, store, x)?
            }
            TitModule::FourScalar { mlp, slots } => {
                let x = tape.constant(Tensor::new(vec![vals.len(), 1], vals)?);
                let h = mlp.forward(tape, store, x)?;
                let s = tape.param(store, *slots);
                tape.add(h, s)?
            }
            TitModule::Sincos => tape.constant(Tensor::new(vec![1, d], sincos_encoding(&vals, d))?),
        };
        Ok(Some(tok))
    }

    fn attention_mask(&self) -> Option<Tensor> {
        let t = self.cfg.num_tit_tokens();
        if self.cfg.tit_attention != TitAttention::TemplateOnly || t == 0 {
            return None;
        }
        let n = self.cfg.num_tokens();
        let search_start = t + self.cfg.num_template_tokens();
        let h = self.cfg.num_heads;
        Some(Tensor::from_fn(vec![h, n, n], |i| {
            let (row, col) = ((i / n) % n, i % n);
            if row < t && col >= search_start {
                MASK_VALUE
            } else {
                0.0
            }
        }))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        template: &Tensor,
        search: &Tensor,
        box_z: &BBox,
        keep_attention: bool,
    ) -> Result<EncoderOutput> {
        let z = self.patch_embed(tape, store, template, false)?;
        let x = self.patch_embed(tape, store, search, true)?;
        let mut parts = Vec::with_capacity(3);
        if let Some(tit) = self.make_tit(tape, store, box_z)? {
            parts.push(tit);
        }
        parts.push(z);
        parts.push(x);
        let mut h = tape.concat(&parts, 0)?;
        let mask = self.attention_mask().map(|m| tape.constant(m));
        let mut attention = Vec::new();
        for block in &self.blocks {
            let a = block.norm1.forward(tape, store, h)?;
            let a = self.attend(tape, store, block, a, mask, keep_attention.then_some(&mut attention))?;
            h = tape.add(h, a)?;
            let m = block.norm2.forward(tape, store, h)?;
            let m = block.mlp.forward(tape, store, m)?;
            h = tape.add(h, m)?;
        }
        let h = self.norm.forward(tape, store, h)?;
        let n = self.cfg.num_tokens();
        let features = tape.slice(h, 0, n - self.cfg.num_search_tokens(), n)?;
        Ok(EncoderOutput { features, attention })
    }

    fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: &Block,
        x: Var,
        mask: Option<Var>,
        keep: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let (n, d, heads) = (self.cfg.num_tokens(), self.cfg.embed_dim, self.cfg.num_heads);
        let dh = d / heads;
        let qkv = block.qkv.forward(tape, store, x)?;
        let qkv = tape.reshape(qkv, &[n, 3, heads, dh])?;
        let qkv = tape.permute(qkv, &[1, 2, 0, 3])?;
        let q = tape.slice(qkv, 0, 0, 1)?;
        let q = tape.reshape(q, &[heads, n, dh])?;
        let k = tape.slice(qkv, 0, 1, 2)?;
        let k = tape.reshape(k, &[heads, n, dh])?;
        let v = tape.slice(qkv, 0, 2, 3)?;
        let v = tape.reshape(v, &[heads, n, dh])?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let attn = tape.softmax(scores, 2)?;
        if let Some(keep) = keep {
            let a = tape.data(attn);
            keep.push(Tensor::from_fn(vec![n, n], |i| {
                (0..heads).map(|hd| a[hd * n * n + i]).sum::<f64>() / heads as f64
            }));
        }
        let out = tape.matmul(attn, v)?;
        let out = tape.permute(out, &[1, 0, 2])?;
        let out = tape.reshape(out, &[n, d])?;
        block.proj.forward(tape, store, out)
    }
}
