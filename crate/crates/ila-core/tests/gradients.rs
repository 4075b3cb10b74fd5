//! Finite-difference checks for every differentiable op and for full
//! models. The numeric side re-runs the forward pass from raw buffers, so
//! it shares nothing with the tape's backward rules.

use ila_core::gradcheck;
use ila_core::graph::{Graph, Var};
use ila_core::ila::{IlaConfig, IlaVariant, RsdsMode};
use ila_core::model::{ForwardOptions, Model};
use ila_core::params::ParamKind;
use ila_core::rng::Rng;
use ila_core::tensor::Tensor;
use ila_core::vit::ViTConfig;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() * 0.7)
}

/// Weighted sum of the output so symmetric outputs (softmax rows, norms)
/// still produce nonzero, asymmetric gradients.
fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Var {
    let wv = g.constant(w);
    let p = g.mul_bcast(y, wv).unwrap();
    g.sum(p)
}

/// Check d(loss)/d(inputs[wrt]) where `build` maps leaves to the op output.
fn check_op(shapes: &[&[usize]], wrt: usize, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = Rng::derive(shapes.len() as u64, "gradients");
    let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t, i == wrt))
        .collect();
    let y = build(&mut g, &vars);
    let w = rand_tensor(g.shape(y), &mut rng);
    let loss = weighted_sum(&mut g, y, &w);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.wrt(vars[wrt]).unwrap().to_vec();

    let mut scalar = |buf: &[f64]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == wrt {
                    g.leaf(&Tensor::new(t.shape(), buf.to_vec()).unwrap(), false)
                } else {
                    g.leaf(t, false)
                }
            })
            .collect();
        let y = build(&mut g, &vars);
        let loss = weighted_sum(&mut g, y, &w);
        g.data(loss)[0]
    };
    gradcheck::check(&mut scalar, inputs[wrt].data(), &analytic, EPS, TOL).unwrap();
}

#[test]
fn grad_add() {
    check_op(&[&[2, 3], &[2, 3]], 0, |g, v| g.add(v[0], v[1]).unwrap());
    check_op(&[&[2, 3], &[2, 3]], 1, |g, v| g.add(v[0], v[1]).unwrap());
}

#[test]
fn grad_add_bcast() {
    check_op(&[&[2, 4, 3], &[3]], 0, |g, v| g.add_bcast(v[0], v[1]).unwrap());
    check_op(&[&[2, 4, 3], &[3]], 1, |g, v| g.add_bcast(v[0], v[1]).unwrap());
}

#[test]
fn grad_mul_bcast() {
    check_op(&[&[2, 4, 3], &[3]], 0, |g, v| g.mul_bcast(v[0], v[1]).unwrap());
    check_op(&[&[2, 4, 3], &[3]], 1, |g, v| g.mul_bcast(v[0], v[1]).unwrap());
}

#[test]
fn grad_scale() {
    check_op(&[&[3, 2]], 0, |g, v| g.scale(v[0], -1.7));
}

#[test]
fn grad_reshape_transpose() {
    check_op(&[&[2, 3, 4]], 0, |g, v| {
        let r = g.reshape(v[0], &[6, 4]).unwrap();
        g.transpose(r, &[1, 0]).unwrap()
    });
}

#[test]
fn grad_narrow_cat() {
    check_op(&[&[2, 5], &[2, 2]], 0, |g, v| {
        let n = g.narrow(v[0], 1, 1, 3).unwrap();
        g.cat2(n, v[1], 1).unwrap()
    });
    check_op(&[&[2, 5], &[2, 2]], 1, |g, v| {
        let n = g.narrow(v[0], 1, 1, 3).unwrap();
        g.cat2(n, v[1], 1).unwrap()
    });
}

#[test]
fn grad_matmul() {
    check_op(&[&[3, 4], &[4, 2]], 0, |g, v| g.matmul(v[0], v[1]).unwrap());
    check_op(&[&[3, 4], &[4, 2]], 1, |g, v| g.matmul(v[0], v[1]).unwrap());
}

#[test]
fn grad_batch_matmul() {
    check_op(&[&[2, 2, 3, 4], &[2, 2, 4, 2]], 0, |g, v| {
        g.batch_matmul(v[0], v[1]).unwrap()
    });
    check_op(&[&[2, 2, 3, 4], &[2, 2, 4, 2]], 1, |g, v| {
        g.batch_matmul(v[0], v[1]).unwrap()
    });
}

#[test]
fn grad_linear() {
    for wrt in 0..3 {
        check_op(&[&[2, 3, 4], &[5, 4], &[5]], wrt, |g, v| {
            g.linear(v[0], v[1], Some(v[2])).unwrap()
        });
    }
}

#[test]
fn grad_gelu() {
    check_op(&[&[3, 5]], 0, |g, v| g.gelu(v[0]));
}

#[test]
fn grad_softmax() {
    check_op(&[&[2, 3, 4]], 0, |g, v| g.softmax_last(v[0]));
}

#[test]
fn grad_layer_norm() {
    for wrt in 0..3 {
        check_op(&[&[2, 3, 6], &[6], &[6]], wrt, |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()
        });
    }
}

#[test]
fn grad_batch_norm_train() {
    for wrt in 0..3 {
        check_op(&[&[2, 3, 4, 4], &[3], &[3]], wrt, |g, v| {
            g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0
        });
    }
}

#[test]
fn grad_batch_norm_eval() {
    let mean = Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap();
    let var = Tensor::new(&[3], vec![0.9, 1.1, 0.7]).unwrap();
    for wrt in 0..3 {
        let (m, v2) = (mean.clone(), var.clone());
        check_op(&[&[2, 3, 4, 4], &[3], &[3]], wrt, move |g, v| {
            g.batch_norm_eval(v[0], v[1], v[2], &m, &v2, 1e-5).unwrap()
        });
    }
}

#[test]
fn grad_depthwise_conv() {
    // strided, padded amd unpadded cases, both inputs
    for wrt in 0..2 {
        check_op(&[&[2, 3, 5, 5], &[3, 3, 3]], wrt, |g, v| {
            g.depthwise_conv2d(v[0], v[1], 1, 0).unwrap()
        });
        check_op(&[&[2, 3, 5, 5], &[3, 3, 3]], wrt, |g, v| {
            g.depthwise_conv2d(v[0], v[1], 2, 1).unwrap()
        });
    }
}

#[test]
fn grad_pointwise_conv() {
    for wrt in 0..3 {
        check_op(&[&[2, 3, 4, 4], &[5, 3], &[5]], wrt, |g, v| {
            g.pointwise_conv2d(v[0], v[1], Some(v[2])).unwrap()
        });
    }
}

#[test]
fn grad_im2col() {
    check_op(&[&[2, 3, 4, 4]], 0, |g, v| g.im2col(v[0], 2, 2, 0).unwrap());
    check_op(&[&[1, 2, 5, 5]], 0, |g, v| g.im2col(v[0], 3, 1, 1).unwrap());
}

#[test]
fn grad_cross_entropy() {
    check_op(&[&[4, 5]], 0, |g, v| g.cross_entropy(v[0], &[0, 3, 2, 4]).unwrap());
}

// ---- full-model checks ----

fn tiny_vit() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        depth: 3,
        hidden_dim: 16,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
    }
}

fn tiny_ila(variant: IlaVariant, rsds: RsdsMode) -> IlaConfig {
    IlaConfig {
        variant,
        rsds_mode: rsds,
        bottleneck_dim: 4,
        kernel: 1, // 2x2 patch grid leaves no room for larger kernels
        intra_adapter_dim: 4,
        ..IlaConfig::default()
    }
}

/// Check d(loss)/d(theta) for every trainable tensor against finite
/// differences through the whole network.
fn check_model(variant: IlaVariant, rsds: RsdsMode, training: bool) {
    let mut rng = Rng::derive(11, "model-grad");
    let model = Model::build(tiny_vit(), tiny_ila(variant, rsds), 5).unwrap();
    let images = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.uniform());
    let labels = [0usize, 2];
    let opts = ForwardOptions {
        training,
        ..Default::default()
    };

    let run = |store_override: Option<(&str, &[f64])>| -> (f64, Option<Vec<f64>>) {
        let mut m = model.clone();
        if let Some((name, buf)) = store_override {
            let p = m.store.get_mut(name).unwrap();
            p.value = Tensor::new(p.value.shape(), buf.to_vec()).unwrap();
        }
        let mut g = Graph::new();
        let out = m.forward(&mut g, &images, opts).unwrap();
        let loss = g.cross_entropy(out.logits, &labels).unwrap();
        let lv = g.data(loss)[0];
        if store_override.is_none() {
            let grads = g.backward(loss).unwrap();
            let all: Vec<f64> = m
                .store
                .trainable_names()
                .iter()
                .flat_map(|n| grads.wrt(out.bound.var(n).unwrap()).unwrap().to_vec())
                .collect();
            (lv, Some(all))
        } else {
            (lv, None)
        }
    };

    let (_, analytic) = run(None);
    let analytic = analytic.unwrap();
    let mut offset = 0;
    for name in model.store.trainable_names() {
        let base = model.store.value(&name).unwrap().data().to_vec();
        let slice = &analytic[offset..offset + base.len()];
        let mut scalar = |buf: &[f64]| run(Some((&name, buf))).0;
        let numeric = gradcheck::central_diff(&mut scalar, &base, 1e-6);
        for (i, (&a, &n)) in slice.iter().zip(&numeric).enumerate() {
            // relative bound plus an absolute floor for finite-difference noise
            let bound = 1e-4 * a.abs().max(n.abs()) + 1e-8;
            assert!(
                (a - n).abs() <= bound,
                "{name} index {i}: analytic {a} vs numeric {n}"
            );
        }
        offset += base.len();
    }
    assert_eq!(offset, analytic.len());
}

#[test]
fn model_grads_ila_near_ones() {
    check_model(IlaVariant::Ila, RsdsMode::DwcNearOnes, false);
}

#[test]
fn model_grads_ila_training_mode() {
    check_model(IlaVariant::Ila, RsdsMode::DwcNearOnes, true);
}

#[test]
fn model_grads_rsds_modes() {
    check_model(IlaVariant::Ila, RsdsMode::DwcNormal, false);
    check_model(IlaVariant::Ila, RsdsMode::AvgPool, false);
    check_model(IlaVariant::Ila, RsdsMode::FullConv, false);
    check_model(IlaVariant::Ila, RsdsMode::None, false);
}

#[test]
fn model_grads_intra_adapters() {
    check_model(IlaVariant::IlaPlusPlus, RsdsMode::DwcNearOnes, false);
}

#[test]
fn model_grads_vanilla() {
    check_model(IlaVariant::None, RsdsMode::DwcNearOnes, false);
}

#[test]
fn frozen_backbone_gets_no_gradient() {
    let model = Model::build(tiny_vit(), tiny_ila(IlaVariant::Ila, RsdsMode::DwcNearOnes), 5).unwrap();
    let mut rng = Rng::derive(1, "frozen");
    let images = Tensor::from_fn(&[1, 3, 8, 8], |_| rng.uniform());
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, &images, ForwardOptions::default())
        .unwrap();
    let loss = g.cross_entropy(out.logits, &[1]).unwrap();
    let grads = g.backward(loss).unwrap();
    for name in model.store.names_with_kind(ParamKind::Frozen) {
        assert!(grads.wrt(out.bound.var(&name).unwrap()).is_none(), "{name}");
    }
    for name in model.store.trainable_names() {
        assert!(grads.wrt(out.bound.var(&name).unwrap()).is_some(), "{name}");
    }
}
