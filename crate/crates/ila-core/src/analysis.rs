//! Representation similarity (linear CKA) and cost accounting.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flops;
use crate::ila::{AdapterKind, IlaConfig, RsdsMode};
use crate::model::Model;
use crate::params::ParamKind;
use crate::tensor::Tensor;
use crate::vit::ViTConfig;

/// Linear CKA between two feature matrices `[n, p]` and `[n, q]` over the
/// same n examples. Computed through n-by-n Gram matrices so the cost does
/// not depend on feature width.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "linear_cka expects rank-2 inputs, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let n = x.shape()[0];
    if y.shape()[0] != n {
        return Err(Error::Shape(format!(
            "linear_cka row mismatch: {} vs {}",
            n,
            y.shape()[0]
        )));
    }
    if n < 2 {
        return Err(Error::Input("linear_cka needs at least 2 rows".into()));
    }
    let kx = centered_gram(x);
    let ky = centered_gram(y);
    let hsic_xy = frob_inner(&kx, &ky);
    let hsic_xx = frob_inner(&kx, &kx);
    let hsic_yy = frob_inner(&ky, &ky);
    if hsic_xx <= 0.0 || hsic_yy <= 0.0 {
        return Err(Error::Numeric(
            "linear_cka: zero-variance features".into(),
        ));
    }
    Ok(hsic_xy / libm::sqrt(hsic_xx * hsic_yy))
}

/// Gram matrix of row features, then double-centered: HKH with
/// H = I - 11^T/n. Equivalent to the Gram matrix of column-centered X.
fn centered_gram(x: &Tensor) -> Vec<f64> {
    let n = x.shape()[0];
    let p = x.shape()[1];
    let d = x.data();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for c in 0..p {
                s += d[i * p + c] * d[j * p + c];
            }
            k[i * n + j] = s;
            k[j * n + i] = s;
        }
    }
    let mut row_mean = vec![0.0; n];
    for i in 0..n {
        row_mean[i] = k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
    }
    let total_mean = row_mean.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] += total_mean - row_mean[i] - row_mean[j];
        }
    }
    k
}

fn frob_inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric layer-by-layer CKA matrix with a unit diagonal.
#[derive(Debug, Clone)]
pub struct CkaMatrix {
    pub labels: Vec<String>,
    /// Row-major `labels.len() x labels.len()`.
    pub values: Vec<f64>,
}

impl CkaMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.labels.len() + j]
    }
}

/// CKA between per-layer feature maps. Each entry of `features` is
/// `[B, S_l, D]` (or any rank >= 2); rows are flattened to `[B, S_l * D]`
/// examples-by-features. Sequence lengths may differ across layers, which
/// is the point: CKA only needs the example axis to match.
pub fn feature_cka_matrix(features: &[(String, Tensor)]) -> Result<CkaMatrix> {
    let flat: Vec<Tensor> = features
        .iter()
        .map(|(_, t)| {
            let b = t.shape()[0];
            t.clone().reshaped(&[b, t.numel() / b])
        })
        .collect::<Result<_>>()?;
    let m = flat.len();
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        values[i * m + i] = 1.0;
        for j in (i + 1)..m {
            let v = linear_cka(&flat[i], &flat[j])?;
            values[i * m + j] = v;
            values[j * m + i] = v;
        }
    }
    Ok(CkaMatrix {
        labels: features.iter().map(|(n, _)| n.clone()).collect(),
        values,
    })
}

/// CKA matrix over captured attention maps, one label per encoder layer.
pub fn attention_cka_matrix(attention: &[Tensor]) -> Result<CkaMatrix> {
    let named: Vec<(String, Tensor)> = attention
        .iter()
        .enumerate()
        .map(|(l, t)| (format!("layer{}", l + 1), t.clone()))
        .collect();
    feature_cka_matrix(&named)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub params_total: u64,
    pub params_trainable: u64,
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub params_total: u64,
    pub params_trainable: u64,
    /// Analytic FLOPs of one forward pass at batch 1.
    pub flops: u64,
}

/// Group store entries by their top-level prefix and count elements.
/// Buffers (BatchNorm running stats) are excluded, matching the
/// trainable/frozen partition reported elsewhere.
pub fn count_params(model: &Model) -> CostReport {
    let mut layers: Vec<LayerCost> = Vec::new();
    for (name, p) in model.store.iter() {
        if p.kind == ParamKind::Buffer {
            continue;
        }
        let group = layer_group(name);
        let n = p.value.numel() as u64;
        let entry = match layers.iter_mut().find(|l| l.name == group) {
            Some(e) => e,
            None => {
                layers.push(LayerCost {
                    name: group,
                    params_total: 0,
                    params_trainable: 0,
                    flops: 0,
                });
                layers.last_mut().unwrap()
            }
        };
        entry.params_total += n;
        if p.kind == ParamKind::Trainable {
            entry.params_trainable += n;
        }
    }
    layers.sort_by(|a, b| a.name.cmp(&b.name));
    let params_total = layers.iter().map(|l| l.params_total).sum();
    let params_trainable = layers.iter().map(|l| l.params_trainable).sum();
    CostReport {
        layers,
        params_total,
        params_trainable,
        flops: 0,
    }
}

fn layer_group(name: &str) -> String {
    let mut parts = name.split('.');
    let head = parts.next().unwrap_or(name);
    match head {
        "blocks" | "ila" | "plain" => match parts.next() {
            Some(idx) => format!("{head}.{idx}"),
            None => head.into(),
        },
        "intra" => match parts.next() {
            Some(idx) => format!("intra.{idx}"),
            None => head.into(),
        },
        _ => head.into(),
    }
}

/// Analytic FLOPs of one batch-1 forward pass, mirroring the forward
/// graph op by op with the shared per-op cost conventions.
pub fn count_flops(vit: &ViTConfig, ila: &IlaConfig) -> Result<CostReport> {
    let plan = crate::ila::build_adapter_plan(vit, ila)?;
    let d = vit.hidden_dim;
    let p = vit.patch_size;
    let heads = vit.num_heads;
    let dh = d / heads;
    let mlp = vit.mlp_ratio * d;
    let mut layers: Vec<LayerCost> = Vec::new();
    let mut push = |name: String, f: u64| {
        layers.push(LayerCost {
            name,
            params_total: 0,
            params_trainable: 0,
            flops: f,
        })
    };

    let n0 = vit.num_patches();
    // patch embedding: linear over patches, plus positional add
    let embed = flops::linear(n0, 3 * p * p, d, true) + flops::elementwise((n0 + 1) * d);
    push("embed".into(), embed);

    let mut grid = vit.grid_side();
    let mut grid_stage = 0usize;
    let mut ds_index = 0usize;
    for layer in 0..vit.depth {
        let s = grid * grid + 1;
        let mut f = 0u64;
        // MHSA: LN, qkv, scores, softmax, mix, out proj, residual
        f += flops::layer_norm(s * d);
        f += flops::linear(s, d, 3 * d, true);
        f += heads as u64 * flops::matmul(s, dh, s); // q k^T
        f += flops::softmax(heads * s * s);
        f += heads as u64 * flops::matmul(s, s, dh); // attn v
        f += flops::linear(s, d, d, true);
        f += flops::elementwise(s * d) * 2; // scale + residual
        if plan.has_intra() {
            f += intra_flops(s, d, ila.intra_adapter_dim);
        }
        // PWFFN
        f += flops::layer_norm(s * d);
        f += flops::linear(s, d, mlp, true);
        f += flops::gelu(s * mlp);
        f += flops::linear(s, mlp, d, true);
        f += flops::elementwise(s * d);
        if plan.has_intra() {
            f += intra_flops(s, d, ila.intra_adapter_dim);
        }
        push(format!("block.{}", layer + 1), f);

        for pl in &plan.placements {
            if pl.after_layer != layer + 1 {
                continue;
            }
            match pl.kind {
                AdapterKind::Downsampling => {
                    let out_grid = plan.grid_chain[grid_stage + 1];
                    push(
                        format!("ila.{ds_index}"),
                        ds_adapter_flops(ila, d, grid, out_grid),
                    );
                    grid = out_grid;
                    grid_stage += 1;
                    ds_index += 1;
                }
                AdapterKind::Plain => {
                    push(
                        format!("plain.{}", pl.after_layer),
                        ds_adapter_flops(ila, d, grid, grid),
                    );
                }
                AdapterKind::IntraLayer => {}
            }
        }
    }
    let s_final = grid * grid + 1;
    let _ = s_final;
    push(
        "head".into(),
        flops::layer_norm(d) + flops::linear(1, d, vit.num_classes, true),
    );
    let flops_total = layers.iter().map(|l| l.flops).sum();
    Ok(CostReport {
        layers,
        params_total: 0,
        params_trainable: 0,
        flops: flops_total,
    })
}

fn intra_flops(s: usize, d: usize, a: usize) -> u64 {
    flops::linear(s, d, a, true) + flops::gelu(s * a) + flops::linear(s, a, d, true) + flops::elementwise(s * d)
}

/// One dual-branch adapter: main down-sampling path plus the residual
/// branch, over a `grid x grid` token map shrinking to `out x out`.
fn ds_adapter_flops(ila: &IlaConfig, d: usize, grid: usize, out: usize) -> u64 {
    let k = if out == grid { ila.kernel } else { ila.kernel };
    let dh = ila.bottleneck_dim;
    let n_in = grid * grid;
    let n_out = out * out;
    let mut f = 0u64;
    // main: CDS on all tokens incl CLS, DWConv+BN on spatial, GELU, PW, CUS
    f += flops::linear(n_in + 1, d, dh, true);
    f += flops::depthwise_conv(dh, out, out, k);
    f += flops::batch_norm(n_out * dh);
    f += flops::gelu((n_out + 1) * dh);
    f += flops::linear(n_out + 1, dh, dh, true);
    f += flops::linear(n_out + 1, dh, d, true);
    // residual branch
    match ila.rsds_mode {
        RsdsMode::DwcNearOnes | RsdsMode::DwcNormal | RsdsMode::AvgPool => {
            f += flops::depthwise_conv(d, out, out, k);
            f += flops::elementwise(d); // CLS gate
        }
        RsdsMode::FullConv => {
            f += flops::linear(n_out, d * k * k, d, true);
            f += flops::elementwise(d);
        }
        RsdsMode::None => {}
    }
    if ila.rsds_mode != RsdsMode::None {
        f += flops::elementwise((n_out + 1) * d); // branch sum
    }
    f
}

/// Full cost report: per-group params from the store plus analytic FLOPs.
pub fn cost_report(model: &Model) -> Result<CostReport> {
    let params = count_params(model);
    let fl = count_flops(&model.vit, &model.ila)?;
    let mut layers = params.layers;
    for lc in &fl.layers {
        match layers.iter_mut().find(|l| l.name == lc.name) {
            Some(e) => e.flops += lc.flops,
            None => layers.push(lc.clone()),
        }
    }
    layers.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(CostReport {
        layers,
        params_total: params.params_total,
        params_trainable: params.params_trainable,
        flops: fl.flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn cka_self_is_one() {
        let mut rng = Rng::derive(0, "cka");
        let x = Tensor::from_fn(&[8, 5], |_| rng.normal());
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cka_invariant_to_isotropic_scale_and_orthogonal_maps() {
        let mut rng = Rng::derive(1, "cka");
        let x = Tensor::from_fn(&[10, 4], |_| rng.normal());
        let scaled = Tensor::new(x.shape(), x.data().iter().map(|v| v * 3.5).collect()).unwrap();
        assert!((linear_cka(&x, &scaled).unwrap() - 1.0).abs() < 1e-12);
        // permute columns: an orthogonal transform
        let n = x.shape()[0];
        let p = x.shape()[1];
        let mut perm = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                perm[i * p + (j + 1) % p] = x.data()[i * p + j];
            }
        }
        let y = Tensor::new(&[n, p], perm).unwrap();
        assert!((linear_cka(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cka_matches_cross_covariance_definition() {
        // ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on centered columns
        let mut rng = Rng::derive(2, "cka");
        let n = 7;
        let (p, q) = (3, 5);
        let x = Tensor::from_fn(&[n, p], |_| rng.normal());
        let y = Tensor::from_fn(&[n, q], |_| rng.normal());
        let center = |t: &Tensor| {
            let (n, c) = (t.shape()[0], t.shape()[1]);
            let mut out = t.data().to_vec();
            for j in 0..c {
                let m: f64 = (0..n).map(|i| out[i * c + j]).sum::<f64>() / n as f64;
                for i in 0..n {
                    out[i * c + j] -= m;
                }
            }
            out
        };
        let xc = center(&x);
        let yc = center(&y);
        let gram_cross = |a: &[f64], pa: usize, b: &[f64], pb: usize| {
            let mut s = 0.0;
            for i in 0..pa {
                for j in 0..pb {
                    let mut v = 0.0;
                    for r in 0..n {
                        v += a[r * pa + i] * b[r * pb + j];
                    }
                    s += v * v;
                }
            }
            s
        };
        let num = gram_cross(&yc, q, &xc, p);
        let dx = gram_cross(&xc, p, &xc, p);
        let dy = gram_cross(&yc, q, &yc, q);
        let reference = num / (libm::sqrt(dx) * libm::sqrt(dy));
        let got = linear_cka(&x, &y).unwrap();
        assert!((got - reference).abs() < 1e-10, "{got} vs {reference}");
    }

    #[test]
    fn cka_bounds() {
        let mut rng = Rng::derive(3, "cka");
        for _ in 0..20 {
            let x = Tensor::from_fn(&[6, 4], |_| rng.normal());
            let y = Tensor::from_fn(&[6, 9], |_| rng.normal());
            let v = linear_cka(&x, &y).unwrap();
            assert!((0.0..=1.0 + 1e-12).contains(&v), "{v}");
        }
    }

    #[test]
    fn cka_rejects_constant_features() {
        let x = Tensor::full(&[4, 3], 2.0);
        let y = Tensor::full(&[4, 3], 1.0);
        assert!(matches!(linear_cka(&x, &y), Err(Error::Numeric(_))));
    }

    #[test]
    fn cka_matrix_symmetric_unit_diagonal() {
        let mut rng = Rng::derive(4, "cka");
        let feats: Vec<(String, Tensor)> = (0..3)
            .map(|i| {
                (
                    format!("f{i}"),
                    Tensor::from_fn(&[5, 2, 3], |_| rng.normal()),
                )
            })
            .collect();
        let m = feature_cka_matrix(&feats).unwrap();
        for i in 0..3 {
            assert_eq!(m.get(i, i), 1.0);
            for j in 0..3 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }
}
