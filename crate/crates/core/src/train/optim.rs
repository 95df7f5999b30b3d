use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub rho: f64,
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            rho: 0.9,
            momentum: 0.0,
            epsilon: 1e-7,
        }
    }
}

/// Squared-gradient accumulators (and momentum buffers when momentum is
/// nonzero), keyed like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub v: BTreeMap<String, Tensor<T>>,
    pub m: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for OptimizerState<T> {
    fn default() -> Self {
        Self {
            v: BTreeMap::new(),
            m: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> OptimizerState<T> {
    pub fn zeros_like(params: &BTreeMap<String, Tensor<T>>) -> Self {
        Self {
            v: params
                .iter()
                .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape())))
                .collect(),
            m: BTreeMap::new(),
        }
    }
}

/// One RMSprop update of every parameter that has a gradient:
/// `v <- rho v + (1 - rho) g^2`, `theta <- theta - lr g / (sqrt(v) + eps)`.
/// With momentum `mu > 0` the step is accumulated as
/// `m <- mu m + lr g / (sqrt(v) + eps)`, `theta <- theta - m`.
pub fn rmsprop_step<T: Scalar>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &RmsPropConfig,
) -> Result<(), TrainError> {
    let rho = T::of(cfg.rho);
    let one_minus = T::of(1.0 - cfg.rho);
    let eps = T::of(cfg.epsilon);
    let lr = T::of(lr);
    let mu = T::of(cfg.momentum);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| TrainError::Shape(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(TrainError::Shape(format!(
                "`{name}`: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        if v.shape() != g.shape() {
            return Err(TrainError::Shape(format!(
                "`{name}`: accumulator {:?} vs gradient {:?}",
                v.shape(),
                g.shape()
            )));
        }
        if cfg.momentum == 0.0 {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = rho * *vv + one_minus * *gv * *gv;
                *pv -= lr * *gv / (vv.sqrt() + eps);
            }
        } else {
            let m = state
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, vv), mv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(m.data_mut())
                .zip(g.data())
            {
                *vv = rho * *vv + one_minus * *gv * *gv;
                *mv = mu * *mv + lr * *gv / (vv.sqrt() + eps);
                *pv -= *mv;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn analytic_scalar_step() {
        let mut p = single(0.0);
        let mut st = OptimizerState::zeros_like(&p);
        rmsprop_step(&mut p, &single(1.0), &mut st, 0.001, &RmsPropConfig::default()).unwrap();
        assert!((st.v["w"].data()[0] - 0.1).abs() < 1e-15);
        let delta = p["w"].data()[0];
        let expect = -0.001 / (0.1f64.sqrt() + 1e-7);
        assert!((delta - expect).abs() < 1e-15);
        assert!((delta + 3.1623e-3).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init: Vec<f64> = (0..10).map(|_| rng.gen()).collect();
        let mut p = BTreeMap::from([("a".to_string(), Tensor::new(vec![10], init.clone()).unwrap())]);
        let g = BTreeMap::from([("a".to_string(), Tensor::zeros(&[10]))]);
        let mut st = OptimizerState::zeros_like(&p);
        for _ in 0..5 {
            rmsprop_step(&mut p, &g, &mut st, 0.01, &RmsPropConfig::default()).unwrap();
        }
        assert_eq!(p["a"].data(), init.as_slice());
    }

    #[test]
    fn matches_reference_update_over_many_steps() {
        let cfg = RmsPropConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 17;
        let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut p = BTreeMap::from([("x".to_string(), Tensor::new(vec![n], init.clone()).unwrap())]);
        let mut st = OptimizerState::default();
        let (mut theta, mut v) = (init, vec![0.0f64; n]);
        for step in 0..100 {
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lr = if step < 50 { 1e-3 } else { 1e-4 };
            for i in 0..n {
                v[i] = 0.9 * v[i] + 0.1 * g[i] * g[i];
                theta[i] -= lr * g[i] / (v[i].sqrt() + 1e-7);
            }
            let gm = BTreeMap::from([("x".to_string(), Tensor::new(vec![n], g).unwrap())]);
            rmsprop_step(&mut p, &gm, &mut st, lr, &cfg).unwrap();
        }
        for (a, b) in p["x"].data().iter().zip(&theta) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn updates_are_bounded_after_first_step() {
        let cfg = RmsPropConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lr = 0.01;
        let bound = lr * (1.0 / (1.0f64 - cfg.rho).sqrt() + 1e-6);
        let mut p = BTreeMap::from([("x".to_string(), Tensor::<f64>::zeros(&[50]))]);
        let mut st = OptimizerState::default();
        for _ in 0..40 {
            let g = Tensor::from_fn(&[50], |_| rng.gen_range(-1e3..1e3) * rng.gen::<f64>().powi(4));
            let before = p["x"].clone();
            rmsprop_step(&mut p, &BTreeMap::from([("x".to_string(), g)]), &mut st, lr, &cfg).unwrap();
            for (a, b) in p["x"].data().iter().zip(before.data()) {
                assert!((a - b).abs() < bound);
            }
        }
    }

    #[test]
    fn permuting_parameter_names_permutes_updates() {
        let cfg = RmsPropConfig::default();
        let a = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let ga = Tensor::new(vec![3], vec![0.5, 0.0, -1.5]).unwrap();
        let gb = Tensor::new(vec![2], vec![-0.25, 3.0]).unwrap();
        let run = |n1: &str, n2: &str| {
            let mut p = BTreeMap::from([(n1.to_string(), a.clone()), (n2.to_string(), b.clone())]);
            let g = BTreeMap::from([(n1.to_string(), ga.clone()), (n2.to_string(), gb.clone())]);
            let mut st = OptimizerState::default();
            rmsprop_step(&mut p, &g, &mut st, 0.01, &cfg).unwrap();
            (p[n1].clone(), p[n2].clone())
        };
        assert_eq!(run("p", "q"), run("z", "a"));
    }

    #[test]
    fn momentum_accumulates() {
        let cfg = RmsPropConfig {
            momentum: 0.5,
            ..RmsPropConfig::default()
        };
        let mut p = single(0.0);
        let mut st = OptimizerState::default();
        rmsprop_step(&mut p, &single(1.0), &mut st, 0.001, &cfg).unwrap();
        let first = p["w"].data()[0];
        rmsprop_step(&mut p, &single(1.0), &mut st, 0.001, &cfg).unwrap();
        let v2: f64 = 0.9 * 0.1 + 0.1;
        let m2 = 0.5 * -first + 0.001 / (v2.sqrt() + 1e-7);
        assert!((p["w"].data()[0] - (first - m2)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_fails() {
        let mut p = single(0.0);
        let g = BTreeMap::from([("w".to_string(), Tensor::<f64>::zeros(&[2]))]);
        let mut st = OptimizerState::default();
        assert!(matches!(
            rmsprop_step(&mut p, &g, &mut st, 0.1, &RmsPropConfig::default()),
            Err(TrainError::Shape(_))
        ));
    }
}
