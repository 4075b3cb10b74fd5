//! Inter-layer adapters: the dual-branch spatial down-sampling adapter, its
//! non-down-sampling variant, Houlsby-style intra-layer adapters, and the
//! placement plan over a frozen backbone.
//!
//! The main branch follows
//! `CUS(PWConv(GELU(BN(DWConv(CDS(z))))))`; the residual branch is a
//! depthwise convolution initialized near one, which at K=1 is a learnable
//! identity and for larger K starts out as a sum-pooling. The CLS token has
//! no spatial coordinate: it takes the channel path only in the main branch
//! and a per-channel near-one gate in the residual branch.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::{TokenSeq, ViTConfig};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IlaVariant {
    /// Frozen backbone, head-only fine-tuning (linear probe).
    None,
    /// Down-sampling adapters after the first two encoder groups.
    Ila,
    /// Additionally, plain adapters at alternating layers.
    IlaPlus,
    /// Additionally, intra-layer adapters in every block.
    IlaPlusPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsdsMode {
    /// Depthwise kernel initialized near one (learnable identity/pooling).
    DwcNearOnes,
    /// Depthwise kernel with truncated-normal init.
    DwcNormal,
    /// Fixed average pooling, not learnable.
    AvgPool,
    /// Full (non-depthwise) convolution, standard init.
    FullConv,
    /// No residual branch.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IlaConfig {
    pub variant: IlaVariant,
    /// Bottleneck width of the CDS/CUS projections.
    pub bottleneck_dim: usize,
    /// Spatial kernel of both branches' down-sampling convolutions.
    pub kernel: usize,
    pub stride: usize,
    pub rsds_mode: RsdsMode,
    /// Std of the near-one init `1 + N(0, eps^2)`.
    pub near_ones_std: f64,
    /// Bottleneck of the intra-layer adapters (ILA++ only).
    pub intra_adapter_dim: usize,
}

impl Default for IlaConfig {
    fn default() -> Self {
        IlaConfig {
            variant: IlaVariant::Ila,
            bottleneck_dim: 48,
            kernel: 3,
            stride: 1,
            rsds_mode: RsdsMode::DwcNearOnes,
            near_ones_std: 0.02,
            intra_adapter_dim: 48,
        }
    }
}

impl IlaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant != IlaVariant::None {
            if self.bottleneck_dim == 0 {
                return Err(Error::Config("bottleneck_dim must be positive".into()));
            }
            if self.kernel == 0 || self.stride == 0 {
                return Err(Error::Config("kernel and stride must be positive".into()));
            }
        }
        if self.near_ones_std < 0.0 {
            return Err(Error::Config("near_ones_std must be nonnegative".into()));
        }
        if self.variant == IlaVariant::IlaPlusPlus && self.intra_adapter_dim == 0 {
            return Err(Error::Config("intra_adapter_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Downsampling,
    Plain,
    IntraLayer,
}

/// One adapter site: applied after `after_layer` blocks have run
/// (1-based; `IntraLayer` sites hook inside the block itself).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub after_layer: usize,
    pub kind: AdapterKind,
}

#[derive(Debug, Clone)]
pub struct AdapterPlan {
    pub placements: Vec<Placement>,
    /// Grid side before the network and after each down-sampling stage.
    pub grid_chain: Vec<usize>,
}

impl AdapterPlan {
    pub fn downsampling_layers(&self) -> Vec<usize> {
        self.placements
            .iter()
            .filter(|p| p.kind == AdapterKind::Downsampling)
            .map(|p| p.after_layer)
            .collect()
    }

    pub fn plain_layers(&self) -> Vec<usize> {
        self.placements
            .iter()
            .filter(|p| p.kind == AdapterKind::Plain)
            .map(|p| p.after_layer)
            .collect()
    }

    pub fn has_intra(&self) -> bool {
        self.placements.iter().any(|p| p.kind == AdapterKind::IntraLayer)
    }
}

fn square_side(n: usize) -> Option<usize> {
    let mut s = 0;
    while s * s < n {
        s += 1;
    }
    (s * s == n).then_some(s)
}

fn down_out(grid: usize, k: usize, s: usize) -> Option<usize> {
    if grid < k {
        return None;
    }
    Some((grid - k) / s + 1)
}

/// Resolve variant placements and verify the grid arithmetic end to end.
///
/// Down-sampling adapters go after layers L/3 and 2L/3; plain adapters
/// (ILA+) at the remaining even layers below L; intra-layer adapters
/// (ILA++) in every block.
pub fn build_adapter_plan(vit: &ViTConfig, ila: &IlaConfig) -> Result<AdapterPlan> {
    vit.validate()?;
    ila.validate()?;
    let l = vit.depth;
    let mut placements = Vec::new();
    let mut grid_chain = vec![vit.grid_side()];
    if ila.variant == IlaVariant::None {
        return Ok(AdapterPlan {
            placements,
            grid_chain,
        });
    }
    let ds_layers = [l / 3, 2 * l / 3];
    let mut grid = vit.grid_side();
    for (stage, &layer) in ds_layers.iter().enumerate() {
        grid = down_out(grid, ila.kernel, ila.stride).ok_or_else(|| {
            Error::Config(format!(
                "down-sampling stage {stage} (after layer {layer}): grid {grid} \
                 smaller than kernel {}",
                ila.kernel
            ))
        })?;
        grid_chain.push(grid);
        placements.push(Placement {
            after_layer: layer,
            kind: AdapterKind::Downsampling,
        });
    }
    if ila.variant == IlaVariant::IlaPlus {
        if ila.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "plain adapters need an odd kernel for symmetric padding, got {}",
                ila.kernel
            )));
        }
        for layer in (2..l).step_by(2) {
            if !ds_layers.contains(&layer) {
                placements.push(Placement {
                    after_layer: layer,
                    kind: AdapterKind::Plain,
                });
            }
        }
    }
    if ila.variant == IlaVariant::IlaPlusPlus {
        // two sites per block: after MHSA and after PWFFN
        for layer in 1..=l {
            for _ in 0..2 {
                placements.push(Placement {
                    after_layer: layer,
                    kind: AdapterKind::IntraLayer,
                });
            }
        }
    }
    placements.sort_by_key(|p| (p.after_layer, p.kind as usize));
    Ok(AdapterPlan {
        placements,
        grid_chain,
    })
}

/// Entries drawn `1 + N(0, eps^2)`.
pub fn init_near_ones(shape: &[usize], eps: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| 1.0 + if eps == 0.0 { 0.0 } else { eps * rng.normal() })
}

/// Name + shape + kind of every adapter parameter for this plan.
pub fn adapter_layout(
    vit: &ViTConfig,
    ila: &IlaConfig,
    plan: &AdapterPlan,
) -> Vec<(String, Vec<usize>, ParamKind)> {
    let d = vit.hidden_dim;
    let dhat = ila.bottleneck_dim;
    let k = ila.kernel;
    let mut out = Vec::new();
    let push_branching = |prefix: &str, spatial_k: usize, out: &mut Vec<(String, Vec<usize>, ParamKind)>| {
        // main SDS branch
        out.push((format!("{prefix}.main.cds.weight"), vec![dhat, d], ParamKind::Trainable));
        out.push((format!("{prefix}.main.cds.bias"), vec![dhat], ParamKind::Trainable));
        out.push((format!("{prefix}.main.dw.weight"), vec![dhat, spatial_k, spatial_k], ParamKind::Trainable));
        out.push((format!("{prefix}.main.bn.gamma"), vec![dhat], ParamKind::Trainable));
        out.push((format!("{prefix}.main.bn.beta"), vec![dhat], ParamKind::Trainable));
        out.push((format!("{prefix}.main.bn.running_mean"), vec![dhat], ParamKind::Buffer));
        out.push((format!("{prefix}.main.bn.running_var"), vec![dhat], ParamKind::Buffer));
        out.push((format!("{prefix}.main.pw.weight"), vec![dhat, dhat], ParamKind::Trainable));
        out.push((format!("{prefix}.main.pw.bias"), vec![dhat], ParamKind::Trainable));
        out.push((format!("{prefix}.main.cus.weight"), vec![d, dhat], ParamKind::Trainable));
        out.push((format!("{prefix}.main.cus.bias"), vec![d], ParamKind::Trainable));
    };
    let push_rsds = |prefix: &str, spatial_k: usize, out: &mut Vec<(String, Vec<usize>, ParamKind)>| match ila.rsds_mode {
        RsdsMode::DwcNearOnes | RsdsMode::DwcNormal => {
            out.push((format!("{prefix}.rsds.dw.weight"), vec![d, spatial_k, spatial_k], ParamKind::Trainable));
            out.push((format!("{prefix}.rsds.cls_gate"), vec![d], ParamKind::Trainable));
        }
        RsdsMode::FullConv => {
            out.push((format!("{prefix}.rsds.conv.weight"), vec![d, d * spatial_k * spatial_k], ParamKind::Trainable));
            out.push((format!("{prefix}.rsds.conv.bias"), vec![d], ParamKind::Trainable));
            out.push((format!("{prefix}.rsds.cls_gate"), vec![d], ParamKind::Trainable));
        }
        RsdsMode::AvgPool | RsdsMode::None => {}
    };
    for (i, _) in plan.downsampling_layers().iter().enumerate() {
        let prefix = format!("ila.{i}");
        push_branching(&prefix, k, &mut out);
        push_rsds(&prefix, k, &mut out);
    }
    for layer in plan.plain_layers() {
        let prefix = format!("plain.{layer}");
        push_branching(&prefix, k, &mut out);
        // plain adapters keep the grid; their residual degenerates to a
        // K=1 learnable gate regardless of mode
        out.push((format!("{prefix}.rsds.dw.weight"), vec![d, 1, 1], ParamKind::Trainable));
        out.push((format!("{prefix}.rsds.cls_gate"), vec![d], ParamKind::Trainable));
    }
    if plan.has_intra() {
        let a = ila.intra_adapter_dim;
        for layer in 1..=vit.depth {
            for site in ["attn", "mlp"] {
                let prefix = format!("intra.{layer}.{site}");
                out.push((format!("{prefix}.down.weight"), vec![a, d], ParamKind::Trainable));
                out.push((format!("{prefix}.down.bias"), vec![a], ParamKind::Trainable));
                out.push((format!("{prefix}.up.weight"), vec![d, a], ParamKind::Trainable));
                out.push((format!("{prefix}.up.bias"), vec![d], ParamKind::Trainable));
            }
        }
    }
    out
}

/// Adapter init: near-ones for residual depthwise kernels and CLS gates,
/// zeros for CUS (each adapter starts as its residual branch alone),
/// truncated normal std 0.02 elsewhere.
pub fn init_adapters(
    store: &mut ParamStore,
    vit: &ViTConfig,
    ila: &IlaConfig,
    plan: &AdapterPlan,
    rng: &mut Rng,
) {
    for (name, shape, kind) in adapter_layout(vit, ila, plan) {
        let t = if name.contains(".cus.") {
            Tensor::zeros(&shape)
        } else if name.ends_with("rsds.dw.weight") || name.ends_with("rsds.cls_gate") {
            if ila.rsds_mode == RsdsMode::DwcNormal && name.ends_with("rsds.dw.weight") {
                Tensor::from_fn(&shape, |_| rng.trunc_normal(0.02))
            } else {
                init_near_ones(&shape, ila.near_ones_std, rng)
            }
        } else if name.ends_with("bn.running_var") {
            Tensor::full(&shape, 1.0)
        } else if name.ends_with("bn.running_mean") {
            Tensor::zeros(&shape)
        } else {
            crate::vit::init_tensor(&name, &shape, rng)
        };
        store.insert(&name, t, kind);
    }
}

/// Statistics produced by BatchNorm layers in train mode; the caller folds
/// them into the running buffers with [`apply_bn_updates`].
pub type BnUpdates = Vec<(String, Tensor, Tensor)>;

pub fn apply_bn_updates(store: &mut ParamStore, updates: &BnUpdates, momentum: f64) -> Result<()> {
    for (prefix, mean, var) in updates {
        for (suffix, stat) in [("running_mean", mean), ("running_var", var)] {
            let p = store.get_mut(&format!("{prefix}.{suffix}"))?;
            for (r, &b) in p.value.data_mut().iter_mut().zip(stat.data()) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
    Ok(())
}

fn split_cls(g: &mut Graph, seq: TokenSeq) -> Result<(Var, Var)> {
    let n = seq.grid * seq.grid;
    let cls = g.narrow(seq.var, 1, 0, 1)?;
    let spatial = g.narrow(seq.var, 1, 1, n)?;
    Ok((cls, spatial))
}

/// `[B, g*g, C] -> [B, C, g, g]`
fn tokens_to_grid(g: &mut Graph, spatial: Var, grid: usize) -> Result<Var> {
    let shape = g.shape(spatial).to_vec();
    let (b, c) = (shape[0], shape[2]);
    let t = g.transpose(spatial, &[0, 2, 1])?;
    g.reshape(t, &[b, c, grid, grid])
}

/// `[B, C, g, g] -> [B, g*g, C]`
fn grid_to_tokens(g: &mut Graph, gridv: Var) -> Result<Var> {
    let shape = g.shape(gridv).to_vec();
    let (b, c, side) = (shape[0], shape[1], shape[2]);
    let t = g.reshape(gridv, &[b, c, side * side])?;
    g.transpose(t, &[0, 2, 1])
}

/// Main SDS branch. `padding` is 0 for down-sampling adapters and
/// `(K-1)/2` with stride 1 for plain ones.
#[allow(clippy::too_many_arguments)]
pub fn sds_main_forward(
    g: &mut Graph,
    bound: &Bound,
    store: &ParamStore,
    prefix: &str,
    seq: TokenSeq,
    stride: usize,
    padding: usize,
    training: bool,
    bn_updates: &mut BnUpdates,
) -> Result<TokenSeq> {
    seq.validate(g)?;
    let (cls, spatial) = split_cls(g, seq)?;
    let cds_w = bound.var(&format!("{prefix}.main.cds.weight"))?;
    let cds_b = bound.var(&format!("{prefix}.main.cds.bias"))?;
    let pw_w = bound.var(&format!("{prefix}.main.pw.weight"))?;
    let pw_b = bound.var(&format!("{prefix}.main.pw.bias"))?;
    let cus_w = bound.var(&format!("{prefix}.main.cus.weight"))?;
    let cus_b = bound.var(&format!("{prefix}.main.cus.bias"))?;

    // CLS has no spatial coordinate: channel path only
    let c = g.linear(cls, cds_w, Some(cds_b))?;
    let c = g.gelu(c);
    let c = g.linear(c, pw_w, Some(pw_b))?;
    let cls_out = g.linear(c, cus_w, Some(cus_b))?;

    // spatial path: CDS -> DWConv -> BN -> GELU -> PWConv -> CUS
    let s = g.linear(spatial, cds_w, Some(cds_b))?;
    let grid = tokens_to_grid(g, s, seq.grid)?;
    let dw_w = bound.var(&format!("{prefix}.main.dw.weight"))?;
    let conv = g.depthwise_conv2d(grid, dw_w, stride, padding)?;
    let bn_gamma = bound.var(&format!("{prefix}.main.bn.gamma"))?;
    let bn_beta = bound.var(&format!("{prefix}.main.bn.beta"))?;
    let normed = if training {
        let (y, mean, var) = g.batch_norm_train(conv, bn_gamma, bn_beta, BN_EPS)?;
        bn_updates.push((format!("{prefix}.main.bn"), mean, var));
        y
    } else {
        g.batch_norm_eval(
            conv,
            bn_gamma,
            bn_beta,
            store.value(&format!("{prefix}.main.bn.running_mean"))?,
            store.value(&format!("{prefix}.main.bn.running_var"))?,
            BN_EPS,
        )?
    };
    let new_grid = g.shape(normed)[2];
    let toks = grid_to_tokens(g, normed)?;
    let toks = g.gelu(toks);
    let toks = g.linear(toks, pw_w, Some(pw_b))?;
    let spa_out = g.linear(toks, cus_w, Some(cus_b))?;

    let out = g.cat2(cls_out, spa_out, 1)?;
    Ok(TokenSeq {
        var: out,
        grid: new_grid,
    })
}

/// Residual spatial down-sampling branch: depthwise convolution over
/// spatial tokens, per-channel gate on CLS. Output grid matches the main
/// branch exactly.
pub fn rsds_forward(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    ila: &IlaConfig,
    seq: TokenSeq,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<TokenSeq> {
    seq.validate(g)?;
    let (cls, spatial) = split_cls(g, seq)?;
    let shape = g.shape(spatial).to_vec();
    let (b, d) = (shape[0], shape[2]);
    let grid = tokens_to_grid(g, spatial, seq.grid)?;
    let (pooled, gated_cls) = match ila.rsds_mode {
        RsdsMode::DwcNearOnes | RsdsMode::DwcNormal => {
            let w = bound.var(&format!("{prefix}.rsds.dw.weight"))?;
            let pooled = g.depthwise_conv2d(grid, w, stride, padding)?;
            let gate = bound.var(&format!("{prefix}.rsds.cls_gate"))?;
            (pooled, g.mul_bcast(cls, gate)?)
        }
        RsdsMode::AvgPool => {
            let w = g.constant(&Tensor::full(
                &[d, kernel, kernel],
                1.0 / (kernel * kernel) as f64,
            ));
            let pooled = g.depthwise_conv2d(grid, w, stride, padding)?;
            (pooled, cls)
        }
        RsdsMode::FullConv => {
            let cols = g.im2col(grid, kernel, stride, padding)?;
            let w = bound.var(&format!("{prefix}.rsds.conv.weight"))?;
            let bias = bound.var(&format!("{prefix}.rsds.conv.bias"))?;
            let toks = g.linear(cols, w, Some(bias))?; // [B, g'*g', D]
            let side = square_side(g.shape(toks)[1]).ok_or_else(|| {
                Error::Shape("full-conv output is not a square grid".into())
            })?;
            let gate = bound.var(&format!("{prefix}.rsds.cls_gate"))?;
            let gated = g.mul_bcast(cls, gate)?;
            let out = g.cat2(gated, toks, 1)?;
            return Ok(TokenSeq {
                var: out,
                grid: side,
            });
        }
        RsdsMode::None => {
            return Err(Error::Config("rsds_forward called with rsds_mode=None".into()))
        }
    };
    let new_grid = g.shape(pooled)[2];
    let toks = grid_to_tokens(g, pooled)?;
    debug_assert_eq!(g.shape(toks), &[b, new_grid * new_grid, d]);
    let out = g.cat2(gated_cls, toks, 1)?;
    Ok(TokenSeq {
        var: out,
        grid: new_grid,
    })
}

/// Dual-branch adapter: elementwise sum of the SDS main branch and the RSDS
/// branch (or the main branch alone when the residual is disabled).
#[allow(clippy::too_many_arguments)]
pub fn ila_forward(
    g: &mut Graph,
    bound: &Bound,
    store: &ParamStore,
    prefix: &str,
    ila: &IlaConfig,
    seq: TokenSeq,
    training: bool,
    bn_updates: &mut BnUpdates,
) -> Result<TokenSeq> {
    let main = sds_main_forward(
        g, bound, store, prefix, seq, ila.stride, 0, training, bn_updates,
    )?;
    if ila.rsds_mode == RsdsMode::None {
        return Ok(main);
    }
    let res = rsds_forward(g, bound, prefix, ila, seq, ila.kernel, ila.stride, 0)?;
    debug_assert_eq!(main.grid, res.grid, "branch grids must align");
    let sum = g.add(main.var, res.var)?;
    Ok(TokenSeq {
        var: sum,
        grid: main.grid,
    })
}

/// Adapter without down-sampling: symmetric padding keeps the grid, the
/// residual degenerates to a K=1 learnable gate.
#[allow(clippy::too_many_arguments)]
pub fn plain_ila_forward(
    g: &mut Graph,
    bound: &Bound,
    store: &ParamStore,
    prefix: &str,
    ila: &IlaConfig,
    seq: TokenSeq,
    training: bool,
    bn_updates: &mut BnUpdates,
) -> Result<TokenSeq> {
    if ila.kernel % 2 == 0 {
        return Err(Error::Config(format!(
            "plain adapter needs odd kernel, got {}",
            ila.kernel
        )));
    }
    let padding = (ila.kernel - 1) / 2;
    let main = sds_main_forward(
        g, bound, store, prefix, seq, 1, padding, training, bn_updates,
    )?;
    // K=1 residual: per-channel scale of every token
    let gate_cfg = IlaConfig {
        rsds_mode: RsdsMode::DwcNearOnes,
        ..*ila
    };
    let res = rsds_forward(g, bound, prefix, &gate_cfg, seq, 1, 1, 0)?;
    debug_assert_eq!(main.grid, res.grid);
    let sum = g.add(main.var, res.var)?;
    Ok(TokenSeq {
        var: sum,
        grid: main.grid,
    })
}

/// Houlsby-style bottleneck with residual: `x + up(gelu(down(x)))`.
pub fn intra_adapter_forward(g: &mut Graph, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = g.linear(
        x,
        bound.var(&format!("{prefix}.down.weight"))?,
        Some(bound.var(&format!("{prefix}.down.bias"))?),
    )?;
    let h = g.gelu(h);
    let h = g.linear(
        h,
        bound.var(&format!("{prefix}.up.weight"))?,
        Some(bound.var(&format!("{prefix}.up.bias"))?),
    )?;
    g.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vit() -> ViTConfig {
        ViTConfig {
            image_size: 24,
            patch_size: 4,
            depth: 6,
            hidden_dim: 32,
            num_heads: 4,
            mlp_ratio: 2,
            num_classes: 5,
        }
    }

    #[test]
    fn plan_vit_b_ila_sites() {
        let vit = ViTConfig::vit_b16(200);
        let plan = build_adapter_plan(&vit, &IlaConfig::default()).unwrap();
        assert_eq!(plan.downsampling_layers(), vec![4, 8]);
        assert_eq!(plan.placements.len(), 2);
        assert_eq!(plan.grid_chain, vec![14, 12, 10]);
    }

    #[test]
    fn plan_vit_b_ila_plus_sites() {
        let vit = ViTConfig::vit_b16(200);
        let cfg = IlaConfig {
            variant: IlaVariant::IlaPlus,
            ..IlaConfig::default()
        };
        let plan = build_adapter_plan(&vit, &cfg).unwrap();
        assert_eq!(plan.downsampling_layers(), vec![4, 8]);
        assert_eq!(plan.plain_layers(), vec![2, 6, 10]);
    }

    #[test]
    fn plan_vit_b_ila_plus_plus_sites() {
        let vit = ViTConfig::vit_b16(200);
        let cfg = IlaConfig {
            variant: IlaVariant::IlaPlusPlus,
            ..IlaConfig::default()
        };
        let plan = build_adapter_plan(&vit, &cfg).unwrap();
        assert_eq!(plan.downsampling_layers(), vec![4, 8]);
        let intra = plan
            .placements
            .iter()
            .filter(|p| p.kind == AdapterKind::IntraLayer)
            .count();
        assert_eq!(intra, 24); // two sites per block
        assert_eq!(plan.placements.len(), 26);
    }

    #[test]
    fn plan_toy_depth_scales() {
        let plan = build_adapter_plan(&toy_vit(), &IlaConfig::default()).unwrap();
        assert_eq!(plan.downsampling_layers(), vec![2, 4]);
        assert_eq!(plan.grid_chain, vec![6, 4, 2]);
    }

    #[test]
    fn infeasible_grid_names_stage() {
        let mut vit = toy_vit();
        vit.image_size = 16; // grid 4 -> 2, second stage 2 < kernel 3
        let err = build_adapter_plan(&vit, &IlaConfig::default()).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("stage 1"), "{msg}");
    }

    #[test]
    fn near_ones_init_properties() {
        let mut rng = Rng::new(3);
        let t = init_near_ones(&[100], 0.0, &mut rng);
        assert!(t.data().iter().all(|&v| v == 1.0));

        let mut rng = Rng::new(3);
        let t = init_near_ones(&[10_000], 0.02, &mut rng);
        let mean: f64 = t.data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 3.0 * 0.02 / 100.0, "mean {mean}");

        let mut r1 = Rng::new(9);
        let mut r2 = Rng::new(9);
        assert_eq!(
            init_near_ones(&[64], 0.05, &mut r1).data(),
            init_near_ones(&[64], 0.05, &mut r2).data()
        );
    }

    #[test]
    fn intra_adapter_param_count() {
        let vit = toy_vit();
        let cfg = IlaConfig {
            variant: IlaVariant::IlaPlusPlus,
            intra_adapter_dim: 8,
            ..IlaConfig::default()
        };
        let plan = build_adapter_plan(&vit, &cfg).unwrap();
        let layout = adapter_layout(&vit, &cfg, &plan);
        let one_site: usize = layout
            .iter()
            .filter(|(n, _, _)| n.starts_with("intra.1.attn."))
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum();
        // 2*D*a + D + a
        assert_eq!(one_site, 2 * 32 * 8 + 32 + 8);
    }

    #[test]
    fn even_kernel_rejected_for_plain() {
        let cfg = IlaConfig {
            variant: IlaVariant::IlaPlus,
            kernel: 2,
            ..IlaConfig::default()
        };
        assert!(build_adapter_plan(&ViTConfig::vit_b16(10), &cfg).is_err());
    }
}
