//! Shared test oracles. Everything here is independent of the reverse-mode
//! path it is used to check.
#![allow(dead_code)]

use timed_core::networks::MaskedTransformer;
use timed_core::numerics::{grad, ParamStore, Rng, Tensor};
use timed_core::Result;

/// Central finite differences of scalar `f` with respect to every entry of
/// every input.
pub fn finite_diff(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for (k, x) in inputs.iter().enumerate() {
        let mut gk = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut args: Vec<Tensor> = inputs.to_vec();
                let mut d = x.to_vec();
                d[i] += delta;
                args[k] = Tensor::new(d, x.shape()).unwrap();
                f(&args).unwrap().item()
            };
            gk.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        out.push(gk);
    }
    out
}

/// Largest per-entry relative error between two gradient sets.
pub fn max_rel_err(a: &[Vec<f64>], b: &[Vec<f64>], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (ga, gb) in a.iter().zip(b) {
        assert_eq!(ga.len(), gb.len());
        for (&x, &y) in ga.iter().zip(gb) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Reverse-mode gradients of `f` at `inputs` (made leaves here).
pub fn reverse_grads(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.leaf()).collect();
    let y = f(&leaves).unwrap();
    grad(&y, &leaves, false).unwrap().into_iter().map(|g| g.to_vec()).collect()
}

/// Relative error of reverse-mode vs finite differences (call in check mode).
pub fn gradcheck(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor]) -> f64 {
    let analytic = reverse_grads(f, inputs);
    let numeric = finite_diff(f, inputs, 1e-5);
    max_rel_err(&analytic, &numeric, 1e-6)
}

pub fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.normal_tensor(shape)
}

/// Cyclic Jacobi eigensolver for small symmetric matrices.
pub fn jacobi(mut a: Vec<f64>, d: usize) -> Vec<(f64, Vec<f64>)> {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _ in 0..100 {
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..d).map(|i| (a[i * d + i], (0..d).map(|k| v[k * d + i]).collect())).collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    pairs
}

/// Sample covariance (n - 1 denominator) of equal-length points.
pub fn covariance(points: &[Vec<f64>]) -> Vec<f64> {
    let (n, d) = (points.len(), points[0].len());
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![0.0; d * d];
    for p in points {
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] += (p[i] - mean[i]) * (p[j] - mean[j]) / (n - 1) as f64;
            }
        }
    }
    c
}

pub fn weight(m: &MaskedTransformer, name: &str) -> Tensor {
    m.params.iter().find(|(k, _)| *k == name).unwrap().1.clone()
}

pub fn randomize(m: &mut MaskedTransformer, rng: &mut Rng) {
    let names: Vec<String> = m.params.names().to_vec();
    for n in names {
        let shape = weight(m, &n).shape().to_vec();
        let v = rng.normal_tensor(&shape).scale(0.5).unwrap();
        m.params.set(&n, v).unwrap();
    }
}

pub fn assert_causal(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, rng: &mut Rng) {
    let (b, t, fe) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let base = f(x);
    for pos in 0..t {
        let mut d = x.to_vec();
        for bi in 0..b {
            for p in pos..t {
                for c in 0..fe {
                    d[(bi * t + p) * fe + c] += rng.normal();
                }
            }
        }
        let out = f(&Tensor::new(d, x.shape()).unwrap());
        let of = out.shape()[2];
        let mut changed_later = false;
        for bi in 0..b {
            for p in 0..t {
                for c in 0..of {
                    let i = (bi * t + p) * of + c;
                    if p < pos {
                        assert_eq!(out.data()[i].to_bits(), base.data()[i].to_bits(), "leak into {p} from {pos}");
                    } else if out.data()[i] != base.data()[i] {
                        changed_later = true;
                    }
                }
            }
        }
        assert!(changed_later, "perturbation at {pos} had no effect");
    }
}

/// Reverse-mode gradients through the model's own parameter leaves against
/// finite differences of a copy with perturbed parameters.
pub fn store_gradcheck(
    params: &ParamStore,
    input: &Tensor,
    out: &dyn Fn(&ParamStore, &Tensor) -> Result<Tensor>,
) -> f64 {
    let weights = |y: &Tensor| Rng::new(99).normal_tensor(y.shape());
    let x = input.leaf();
    let y = out(params, &x).unwrap();
    let loss = y.mul(&weights(&y)).unwrap().sum().unwrap();
    let mut wrt = vec![x];
    wrt.extend(params.tensors().iter().cloned());
    let analytic: Vec<Vec<f64>> = grad(&loss, &wrt, false).unwrap().iter().map(|g| g.to_vec()).collect();

    let names = params.names().to_vec();
    let f = |xs: &[Tensor]| -> Result<Tensor> {
        let mut p = params.clone();
        for (n, t) in names.iter().zip(&xs[1..]) {
            p.set(n, t.clone())?;
        }
        let y = out(&p, &xs[0])?;
        y.mul(&weights(&y))?.sum()
    };
    let mut inputs = vec![input.clone()];
    inputs.extend(params.tensors().iter().map(|t| t.detach()));
    max_rel_err(&analytic, &finite_diff(&f, &inputs, 1e-5), 1e-6)
}

pub fn model_gradcheck(model: &MaskedTransformer, input: Tensor, out: &dyn Fn(&MaskedTransformer, &Tensor) -> Result<Tensor>) -> f64 {
    store_gradcheck(&model.params, &input, &|p, x| {
        let mut m = model.clone();
        m.params = p.clone();
        out(&m, x)
    })
}
