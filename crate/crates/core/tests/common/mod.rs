//! Shared oracles for the integration tests.
#![allow(dead_code)]

pub mod attention;

use posbench::model::{Model, SequenceRow};
use posbench::numeric::{finite_difference, max_relative_error, Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Denominator floor for relative gradient errors, so entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn random_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.uniform_in(-1.0, 1.0))
}

/// Weighted sum with fixed pseudo-random weights, so every output entry
/// contributes a distinct amount to the scalar loss.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = Rng::new(seed, 99);
    let w = g.constant(random_tensor(g.shape(x), &mut rng, 1.0));
    let y = g.mul(x, w).unwrap();
    g.sum(y).unwrap()
}

/// Max relative error between backprop gradients of `loss` with respect to
/// the parameters `ids` and central finite differences of step `h`.
pub fn param_grad_error<F>(store: &ParamStore, ids: &[ParamId], h: f64, loss: F) -> f64
where
    F: for<'p> Fn(&mut Graph<'p>, &'p ParamStore) -> Var,
{
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::new();
        let l = loss(&mut g, store);
        g.backward(l).unwrap();
        let grads = g.param_grads();
        ids.iter()
            .map(|id| {
                let grad = grads
                    .iter()
                    .find(|(p, _)| p == id)
                    .map(|(_, v)| v.to_vec())
                    .unwrap_or_else(|| vec![0.0; store.value(*id).numel()]);
                (*id, grad)
            })
            .collect()
    };
    let mut worst: f64 = 0.0;
    for (id, grad) in analytic {
        let base = store.value(id).data().to_vec();
        let numeric = finite_difference(&base, h, |probe| {
            let mut s = store.clone();
            s.value_mut(id).data_mut().copy_from_slice(probe);
            let mut g = Graph::new();
            let l = loss(&mut g, &s);
            g.scalar(l)
        });
        worst = worst.max(max_relative_error(&grad, &numeric, GRAD_FLOOR));
    }
    worst
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Max relative error between backprop and central differences (step
/// 1e-5) of the model's batch loss, over every parameter, with the name of
/// the worst parameter.
pub fn model_grad_error(model: &Model, rows: &[SequenceRow]) -> (f64, String) {
    let loss_at = |m: &Model| {
        let mut g = Graph::new();
        let l = m.batch_loss(&mut g, rows, None).unwrap();
        g.scalar(l)
    };
    let mut g = Graph::new();
    let l = model.batch_loss(&mut g, rows, None).unwrap();
    g.backward(l).unwrap();
    let grads: Vec<_> = g.param_grads().into_iter().map(|(id, v)| (id, v.to_vec())).collect();
    let mut worst = (0.0, String::new());
    for (id, param) in model.store.iter() {
        let analytic = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| vec![0.0; param.value.numel()]);
        let numeric = finite_difference(param.value.data(), 1e-5, |probe| {
            let mut m = model.clone();
            m.store.value_mut(id).data_mut().copy_from_slice(probe);
            loss_at(&m)
        });
        let err = max_relative_error(&analytic, &numeric, GRAD_FLOOR);
        if err > worst.0 {
            worst = (err, param.name.clone());
        }
    }
    worst
}
