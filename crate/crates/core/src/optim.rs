//! Plain stochastic gradient descent and the central-difference gradient
//! checker used throughout the test suites.

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::tensor::Tensor;

/// Optimizer state for plain SGD (no momentum).
#[derive(Clone, Debug)]
pub struct SgdState {
    pub learning_rate: f64,
    pub step_count: u64,
}

impl SgdState {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::validation(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(SgdState {
            learning_rate,
            step_count: 0,
        })
    }

    /// `param <- param - lr * grad` for every parameter, then zeroes the
    /// gradients and bumps the step counter. Every parameter must carry a
    /// populated gradient.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        let params: Vec<&'a mut Tensor> = params.into_iter().collect();
        for p in &params {
            match &p.grad {
                None => return Err(Error::state("sgd step on a parameter without a gradient")),
                Some(g) if g.len() != p.numel() => {
                    return Err(Error::state("gradient buffer does not match parameter shape"))
                }
                Some(_) => {}
            }
        }
        for p in params {
            let grad = p.grad.take().expect("checked above");
            for (v, g) in p.data_mut().iter_mut().zip(&grad) {
                *v -= self.learning_rate * g;
            }
            p.grad = Some(vec![0.0; grad.len()]);
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Compares the analytic gradient of `f` at `point` against central finite
/// differences with the given step, returning the worst relative error
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
///
/// `f` receives a fresh tape and the leaf holding the (possibly perturbed)
/// point, and must return a scalar root built on that tape.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::validation(format!("step must be positive, got {step}")));
    }

    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let t = Tensor::new(point.shape().to_vec(), data.to_vec())?;
        let leaf = tape.leaf(t);
        let root = f(&mut tape, leaf)?;
        let v = tape.value(root).item()?;
        if !v.is_finite() {
            return Err(Error::numeric(format!("function returned {v}")));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let mut p = point.clone();
    p.requires_grad = true;
    let leaf = tape.leaf(p);
    let root = f(&mut tape, leaf)?;
    if !tape.value(root).item()?.is_finite() {
        return Err(Error::numeric("function returned a non-finite value"));
    }
    tape.backward(root)?;
    let analytic = tape.grad(leaf).expect("leaf requires grad").to_vec();

    let mut worst: f64 = 0.0;
    let mut data = point.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + step;
        let plus = eval(&data)?;
        data[i] = orig - step;
        let minus = eval(&data)?;
        data[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::numeric("non-finite difference quotient"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_examples() {
        let mut sgd = SgdState::new(0.1).unwrap();
        let mut w = Tensor::param(vec![1], vec![1.0]).unwrap();
        w.grad = Some(vec![0.5]);
        sgd.step([&mut w]).unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(w.grad.as_deref(), Some(&[0.0][..]));
        assert_eq!(sgd.step_count, 1);

        // zero gradient leaves weights unchanged
        w.grad = Some(vec![0.0]);
        sgd.step([&mut w]).unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-15);

        let mut v = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        v.grad = Some(vec![1.0, -1.0]);
        let mut sgd = SgdState::new(0.5).unwrap();
        sgd.step([&mut v]).unwrap();
        assert_eq!(v.data(), &[0.5, 2.5]);
    }

    #[test]
    fn sgd_requires_grads() {
        let mut sgd = SgdState::new(0.1).unwrap();
        let mut w = Tensor::param(vec![1], vec![1.0]).unwrap();
        let err = sgd.step([&mut w]).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        assert_eq!(sgd.step_count, 0);
    }

    #[test]
    fn sgd_rejects_bad_learning_rate() {
        assert!(SgdState::new(0.0).is_err());
        assert!(SgdState::new(-1.0).is_err());
    }

    #[test]
    fn finite_diff_quadratic_is_exact() {
        let x = Tensor::new(vec![1], vec![2.0]).unwrap();
        let err = finite_diff_check(|tape, x| tape.mul(x, x), &x, 1e-5).unwrap();
        assert!(err <= 1e-8, "err {err}");
    }

    #[test]
    fn finite_diff_constant_function() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(
            |tape, x| {
                let z = tape.scale(x, 0.0);
                Ok(tape.sum(z))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "err {err}");
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(|tape, x| Ok(tape.sum(x)), &x, 0.0).is_err());
    }

    /// dense -> sigmoid -> bce chain on a random 4-vector.
    #[test]
    fn dense_sigmoid_bce_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let point = Tensor::new(vec![4], x).unwrap();
        let w: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();
        let err = finite_diff_check(
            move |tape, x| {
                let wt = tape.leaf(Tensor::new(vec![1, 4], w.clone()).unwrap());
                let b = tape.leaf(Tensor::new(vec![1], vec![0.1]).unwrap());
                let z = tape.dense(x, wt, b)?;
                let s = tape.sigmoid(z);
                tape.bce_loss(s, 1.0)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    /// Every differentiable op, checked over random seeds.
    #[test]
    fn gradient_soundness_all_ops() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point = Tensor::new(
                vec![2, 4, 4],
                (0..32).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            )
            .unwrap();
            let kd: Vec<f64> = (0..2 * 2 * 9).map(|_| rng.random::<f64>() - 0.5).collect();
            let wd: Vec<f64> = (0..2).map(|_| rng.random::<f64>() - 0.5).collect();
            let mask_seed = seed;
            let err = finite_diff_check(
                move |tape, x| {
                    let k = tape.leaf(Tensor::new(vec![2, 2, 3, 3], kd.clone()).unwrap());
                    let b = tape.leaf(Tensor::new(vec![2], vec![0.05, -0.02]).unwrap());
                    let c = tape.conv2d(x, k, b, 1, 1)?;
                    let r = tape.relu(c);
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                    let d = tape.dropout(r, 0.2, true, &mut mask_rng)?;
                    let g = tape.global_avg_pool(d)?;
                    let w = tape.leaf(Tensor::new(vec![1, 2], wd.clone()).unwrap());
                    let b2 = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
                    let z = tape.dense(g, w, b2)?;
                    let s = tape.sigmoid(z);
                    tape.bce_loss(s, 0.0)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: relative error {err}");
        }
    }
}
