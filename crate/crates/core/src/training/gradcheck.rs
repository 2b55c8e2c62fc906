//! Central finite-difference verification of graph gradients.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, as a fraction of the largest
/// analytic gradient magnitude (and never below this absolute value).
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(name, flat index, analytic, numeric)` per checked coordinate.
    pub samples: Vec<(String, usize, f64, f64)>,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn floor_for<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    let peak = grads
        .into_iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    REL_FLOOR * peak.max(1.0)
}

/// `Σ out ⊙ R` for fixed standard-normal `R` drawn from `seed`.
pub fn probe_loss(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::dim(format!(
            "loss must be a scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Compares parameter gradients of `loss` against central differences on
/// `samples` coordinates drawn from parameters named with `prefix`.
pub fn gradient_check<F>(
    ps: &ParamStore,
    prefix: &str,
    loss: F,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::with_trainable([prefix]);
    let out = loss(&mut g, ps)?;
    scalar(&g, out)?;
    g.backward(out)?;
    let grads = g.param_grads();
    if grads.is_empty() {
        return Err(Error::arg(format!(
            "no parameter under `{prefix}` reaches the loss"
        )));
    }
    let floor = floor_for(grads.iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        scalar(&g, out)
    };
    let mut store = ps.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        samples: Vec::with_capacity(samples),
    };
    for _ in 0..samples {
        let (name, grad) = grads.choose(&mut rng).expect("non-empty");
        let i = rng.random_range(0..grad.numel());
        let x0 = ps.require(name)?.data()[i];
        store.get_mut(name).expect("cloned").data_mut()[i] = x0 + eps;
        let up = eval(&store)?;
        store.get_mut(name).expect("cloned").data_mut()[i] = x0 - eps;
        let down = eval(&store)?;
        store.get_mut(name).expect("cloned").data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grad.data()[i];
        report.max_rel_error = report
            .max_rel_error
            .max(relative_error(analytic, numeric, floor));
        report.samples.push((name.clone(), i, analytic, numeric));
    }
    Ok(report)
}

/// Same check for gradients with respect to graph inputs; samples are
/// named `input{k}`.
pub fn input_gradient_check<F>(
    inputs: &[Tensor],
    loss: F,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = loss(&mut g, &vars)?;
    scalar(&g, out)?;
    g.backward(out)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    let floor = floor_for(&grads);
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = loss(&mut g, &vs)?;
        scalar(&g, out)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        samples: Vec::with_capacity(samples),
    };
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::arg("no input coordinates to check"));
    }
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let k = sizes
            .iter()
            .position(|&n| {
                if flat < n {
                    true
                } else {
                    flat -= n;
                    false
                }
            })
            .expect("in range");
        let x0 = inputs[k].data()[flat];
        work[k].data_mut()[flat] = x0 + eps;
        let up = eval(&work)?;
        work[k].data_mut()[flat] = x0 - eps;
        let down = eval(&work)?;
        work[k].data_mut()[flat] = x0;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads[k].data()[flat];
        report.max_rel_error = report
            .max_rel_error
            .max(relative_error(analytic, numeric, floor));
        report
            .samples
            .push((format!("input{k}"), flat, analytic, numeric));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{linear, Init};

    #[test]
    fn linear_head_is_exact() {
        let mut ps = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Init {
            store: &mut ps,
            rng: &mut rng,
        }
        .linear("head", 5, 3, 1.0);
        let x = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let report = gradient_check(
            &ps,
            "head",
            |g, ps| {
                let xv = g.constant(x.clone());
                let y = linear(g, ps, "head", xv)?;
                probe_loss(g, y, 9)
            },
            20,
            1e-6,
            2,
        )
        .unwrap();
        assert_eq!(report.samples.len(), 20);
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn input_check_on_smooth_function() {
        let a = Tensor::from_fn(vec![3], |i| 0.3 + i as f64);
        let report = input_gradient_check(
            &[a],
            |g, v| {
                let t = g.tanh(v[0]);
                let s = g.mul(t, v[0])?;
                Ok(g.sum(s))
            },
            10,
            1e-6,
            3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7);
    }

    #[test]
    fn unreachable_prefix_is_reported() {
        let ps = ParamStore::default();
        let r = gradient_check(
            &ps,
            "nothing",
            |g, _| Ok(g.constant(Tensor::scalar(1.0))),
            1,
            1e-6,
            0,
        );
        assert!(r.is_err());
    }
}
