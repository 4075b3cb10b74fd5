//! SGD with momentum over the trainable subset of a [`ParamStore`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};

/// `v <- mu * v + g; w <- w - lr * v`, applied to trainable tensors only.
pub struct SgdMomentum {
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let names = store.trainable_names();
        for name in names {
            let p = store.get_mut(&name)?;
            debug_assert_eq!(p.kind, ParamKind::Trainable);
            let grad = p.grad.as_ref().ok_or_else(|| {
                Error::Input(format!("sgd step: trainable `{name}` has no gradient"))
            })?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.value.numel()]);
            for ((w, vel), &g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *vel = self.momentum * *vel + g;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[1], w), ParamKind::Trainable);
        s.insert("frozen", Tensor::full(&[1], 5.0), ParamKind::Frozen);
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        s.get_mut("w").unwrap().grad = Some(Tensor::full(&[1], g));
    }

    #[test]
    fn two_hand_iterated_steps() {
        let mut store = store_with(1.0);
        let mut opt = SgdMomentum::new(0.9);

        set_grad(&mut store, 1.0);
        opt.step(&mut store, 0.1).unwrap();
        assert!((store.value("w").unwrap().data()[0] - 0.9).abs() < 1e-15);

        set_grad(&mut store, 1.0);
        opt.step(&mut store, 0.1).unwrap();
        // v = 0.9*1 + 1 = 1.9; w = 0.9 - 0.19 = 0.71
        assert!((store.value("w").unwrap().data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn frozen_untouched() {
        let mut store = store_with(1.0);
        set_grad(&mut store, 1.0);
        let mut opt = SgdMomentum::new(0.9);
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.value("frozen").unwrap().data()[0], 5.0);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut store = store_with(1.0);
        let mut opt = SgdMomentum::new(0.9);
        assert!(opt.step(&mut store, 0.1).is_err());
    }
}
