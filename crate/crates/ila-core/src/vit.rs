//! Vision Transformer backbone: patch embedding, CLS token, positional
//! embeddings, pre-norm encoder blocks, classification head.
//!
//! Forward pieces are free functions over a tape + bound parameters so the
//! model assembly in [`crate::model`] can interleave adapter hooks between
//! encoder groups.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViTConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of encoder blocks; must divide into three equal groups.
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// PWFFN expansion factor.
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl ViTConfig {
    /// The ViT B-16 backbone configuration.
    pub fn vit_b16(num_classes: usize) -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            depth: 12,
            hidden_dim: 768,
            num_heads: 12,
            mlp_ratio: 4,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.depth == 0 || self.depth % 3 != 0 {
            return Err(Error::Config(format!(
                "depth {} must split into three encoder groups",
                self.depth
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Initial sequence length including CLS.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Token sequence `[B, N+1, D]` with CLS at index 0 and spatial tokens
/// forming a `grid x grid` square.
#[derive(Debug, Clone, Copy)]
pub struct TokenSeq {
    pub var: Var,
    pub grid: usize,
}

impl TokenSeq {
    /// Check the square-grid invariant against the tape shape.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        let s = g.shape(self.var);
        if s.len() != 3 || s[1] != self.grid * self.grid + 1 {
            return Err(Error::Shape(format!(
                "token sequence {:?} does not match grid side {}",
                s, self.grid
            )));
        }
        Ok(())
    }

    pub fn seq_len(&self, g: &Graph) -> usize {
        g.shape(self.var)[1]
    }
}

/// Name + shape + kind of every backbone parameter. The backbone is frozen;
/// only the classification head and its final LayerNorm train.
pub fn backbone_layout(cfg: &ViTConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let d = cfg.hidden_dim;
    let p = cfg.patch_size;
    let mut out = vec![
        ("patch_embed.weight".into(), vec![d, 3 * p * p], ParamKind::Frozen),
        ("patch_embed.bias".into(), vec![d], ParamKind::Frozen),
        ("cls_token".into(), vec![d], ParamKind::Frozen),
        ("pos_embed".into(), vec![cfg.seq_len(), d], ParamKind::Frozen),
    ];
    for l in 0..cfg.depth {
        let pre = format!("blocks.{l}");
        let md = cfg.mlp_ratio * d;
        for (suffix, shape) in [
            ("norm1.gamma", vec![d]),
            ("norm1.beta", vec![d]),
            ("attn.qkv.weight", vec![3 * d, d]),
            ("attn.qkv.bias", vec![3 * d]),
            ("attn.out.weight", vec![d, d]),
            ("attn.out.bias", vec![d]),
            ("norm2.gamma", vec![d]),
            ("norm2.beta", vec![d]),
            ("mlp.fc1.weight", vec![md, d]),
            ("mlp.fc1.bias", vec![md]),
            ("mlp.fc2.weight", vec![d, md]),
            ("mlp.fc2.bias", vec![d]),
        ] {
            out.push((format!("{pre}.{suffix}"), shape, ParamKind::Frozen));
        }
    }
    out.push(("head.norm.gamma".into(), vec![d], ParamKind::Trainable));
    out.push(("head.norm.beta".into(), vec![d], ParamKind::Trainable));
    out.push(("head.fc.weight".into(), vec![cfg.num_classes, d], ParamKind::Trainable));
    out.push(("head.fc.bias".into(), vec![cfg.num_classes], ParamKind::Trainable));
    out
}

/// Conventional init: truncated normal (std 0.02) for weights and
/// embeddings, ones for norm gains, zeros for biases.
pub fn init_tensor(name: &str, shape: &[usize], rng: &mut Rng) -> Tensor {
    if name.ends_with(".gamma") {
        Tensor::full(shape, 1.0)
    } else if name.ends_with(".beta") || name.ends_with(".bias") {
        Tensor::zeros(shape)
    } else {
        Tensor::from_fn(shape, |_| rng.trunc_normal(0.02))
    }
}

pub fn init_backbone(store: &mut ParamStore, cfg: &ViTConfig, rng: &mut Rng) {
    for (name, shape, kind) in backbone_layout(cfg) {
        let t = init_tensor(&name, &shape, rng);
        store.insert(&name, t, kind);
    }
}

/// Patchify + linear embed + CLS prepend + positional embeddings.
pub fn patchify_embed(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ViTConfig,
    images: Var,
) -> Result<TokenSeq> {
    let shape = g.shape(images).to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.image_size || shape[3] != cfg.image_size
    {
        return Err(Error::Shape(format!(
            "expected images [B,3,{0},{0}], got {shape:?}",
            cfg.image_size
        )));
    }
    let b = shape[0];
    let d = cfg.hidden_dim;
    let patches = g.im2col(images, cfg.patch_size, cfg.patch_size, 0)?;
    let tokens = g.linear(
        patches,
        bound.var("patch_embed.weight")?,
        Some(bound.var("patch_embed.bias")?),
    )?;
    // broadcast the CLS token over the batch and prepend
    let cls = bound.var("cls_token")?;
    let cls_row = g.reshape(cls, &[1, d])?;
    let zeros = g.constant(&Tensor::zeros(&[b, 1, d]));
    let cls_b = g.add_bcast(zeros, cls_row)?;
    let seq = g.cat2(cls_b, tokens, 1)?;
    let seq = g.add_bcast(seq, bound.var("pos_embed")?)?;
    Ok(TokenSeq {
        var: seq,
        grid: cfg.grid_side(),
    })
}

/// Pre-norm multi-head self-attention with residual. Attention
/// probabilities are pushed into `capture` when provided.
pub fn mhsa_forward(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ViTConfig,
    layer: usize,
    seq: TokenSeq,
    capture: Option<&mut Vec<Tensor>>,
) -> Result<TokenSeq> {
    let pre = format!("blocks.{layer}");
    let shape = g.shape(seq.var).to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();

    let h = g.layer_norm(
        seq.var,
        bound.var(&format!("{pre}.norm1.gamma"))?,
        bound.var(&format!("{pre}.norm1.beta"))?,
        LN_EPS,
    )?;
    let qkv = g.linear(
        h,
        bound.var(&format!("{pre}.attn.qkv.weight"))?,
        Some(bound.var(&format!("{pre}.attn.qkv.bias"))?),
    )?;
    let split_head = |g: &mut Graph, x: Var| -> Result<Var> {
        let x = g.reshape(x, &[b, s, heads, dh])?;
        g.transpose(x, &[0, 2, 1, 3]) // [B, heads, S, dh]
    };
    let q = g.narrow(qkv, 2, 0, d)?;
    let k = g.narrow(qkv, 2, d, d)?;
    let v = g.narrow(qkv, 2, 2 * d, d)?;
    let q = split_head(g, q)?;
    let q = g.scale(q, 1.0 / libm::sqrt(dh as f64));
    let k = split_head(g, k)?;
    let v = split_head(g, v)?;
    let kt = g.transpose(k, &[0, 1, 3, 2])?;
    let scores = g.batch_matmul(q, kt)?;
    let attn = g.softmax_last(scores);
    if let Some(sink) = capture {
        sink.push(g.tensor(attn));
    }
    let ctx = g.batch_matmul(attn, v)?;
    let ctx = g.transpose(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, s, d])?;
    let out = g.linear(
        ctx,
        bound.var(&format!("{pre}.attn.out.weight"))?,
        Some(bound.var(&format!("{pre}.attn.out.bias"))?),
    )?;
    let res = g.add(seq.var, out)?;
    Ok(TokenSeq {
        var: res,
        grid: seq.grid,
    })
}

/// Pre-norm position-wise feed-forward with residual.
pub fn pwffn_forward(
    g: &mut Graph,
    bound: &Bound,
    _cfg: &ViTConfig,
    layer: usize,
    seq: TokenSeq,
) -> Result<TokenSeq> {
    let pre = format!("blocks.{layer}");
    let h = g.layer_norm(
        seq.var,
        bound.var(&format!("{pre}.norm2.gamma"))?,
        bound.var(&format!("{pre}.norm2.beta"))?,
        LN_EPS,
    )?;
    let h = g.linear(
        h,
        bound.var(&format!("{pre}.mlp.fc1.weight"))?,
        Some(bound.var(&format!("{pre}.mlp.fc1.bias"))?),
    )?;
    let h = g.gelu(h);
    let h = g.linear(
        h,
        bound.var(&format!("{pre}.mlp.fc2.weight"))?,
        Some(bound.var(&format!("{pre}.mlp.fc2.bias"))?),
    )?;
    let res = g.add(seq.var, h)?;
    Ok(TokenSeq {
        var: res,
        grid: seq.grid,
    })
}

/// MHSA then PWFFN; shape preserving.
pub fn encoder_block_forward(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ViTConfig,
    layer: usize,
    seq: TokenSeq,
    capture: Option<&mut Vec<Tensor>>,
) -> Result<TokenSeq> {
    let seq = mhsa_forward(g, bound, cfg, layer, seq, capture)?;
    pwffn_forward(g, bound, cfg, layer, seq)
}

/// Final LayerNorm on the CLS token, then linear to class logits.
pub fn classify_head(g: &mut Graph, bound: &Bound, _cfg: &ViTConfig, seq: TokenSeq) -> Result<Var> {
    let shape = g.shape(seq.var).to_vec();
    let (b, d) = (shape[0], shape[2]);
    let cls = g.narrow(seq.var, 1, 0, 1)?;
    let cls = g.reshape(cls, &[b, d])?;
    let cls = g.layer_norm(
        cls,
        bound.var("head.norm.gamma")?,
        bound.var("head.norm.beta")?,
        LN_EPS,
    )?;
    g.linear(
        cls,
        bound.var("head.fc.weight")?,
        Some(bound.var("head.fc.bias")?),
    )
}
