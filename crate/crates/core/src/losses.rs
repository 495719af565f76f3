//! Training objectives beyond the denoising loss: autoregressive
//! supervision, the Wasserstein critic with gradient penalty, RBF-kernel MMD
//! and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{grad, Rng, Tensor};

/// A differentiable map from a `(B, T, F)` batch to something else, usually
/// a trained network's forward pass.
pub type SeqFn<'a> = dyn Fn(&Tensor) -> Result<Tensor> + 'a;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ar: f64,
    pub lambda_mmd: f64,
    pub lambda_w: f64,
    pub gp_lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ar: 1.0,
            lambda_mmd: 1.0,
            lambda_w: 0.1,
            gp_lambda: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ar", self.lambda_ar),
            ("lambda_mmd", self.lambda_mmd),
            ("lambda_w", self.lambda_w),
            ("gp_lambda", self.gp_lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which positions the autoregressive loss averages over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArWindow {
    /// Every position that has a target `delta` steps later.
    Full,
    /// Only the final `delta` target positions (the ones hidden from the
    /// supervisor during pretraining).
    LastDelta,
}

/// Target positions (0-based) covered by `window`; the prediction for
/// target `j` is read from position `j - delta`.
pub fn ar_targets(seq_len: usize, delta: usize, window: ArWindow) -> Result<std::ops::Range<usize>> {
    if delta == 0 || delta >= seq_len {
        return Err(invalid(format!("lookahead {delta} outside 1..{seq_len}")));
    }
    Ok(match window {
        ArWindow::Full => delta..seq_len,
        ArWindow::LastDelta => (seq_len - delta).max(delta)..seq_len,
    })
}

/// Mean squared error between `pred[:, j - delta]` and `target[:, j]` over
/// the window's target positions, averaged over batch, positions and features.
pub fn ar_loss_from_predictions(pred: &Tensor, target: &Tensor, delta: usize, window: ArWindow) -> Result<Tensor> {
    if pred.shape() != target.shape() || pred.rank() != 3 {
        return Err(Error::Shape {
            op: "ar_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let range = ar_targets(pred.shape()[1], delta, window)?;
    let len = range.end - range.start;
    let p = pred.slice(1, range.start - delta, len)?;
    let y = target.slice(1, range.start, len)?;
    p.sub(&y)?.square()?.mean()
}

/// Autoregressive loss of `supervisor` run on `input`, scored against `target`.
pub fn ar_loss(supervisor: &SeqFn, target: &Tensor, input: &Tensor, delta: usize, window: ArWindow) -> Result<Tensor> {
    ar_loss_from_predictions(&supervisor(input)?, target, delta, window)
}

/// `alpha_b * real_b + (1 - alpha_b) * fake_b` with one coefficient per
/// sample. The result is a constant: the penalty differentiates with respect
/// to the interpolate itself, never through it.
pub fn interpolate_with(real: &Tensor, fake: &Tensor, alpha: &[f64]) -> Result<Tensor> {
    if real.shape() != fake.shape() || real.rank() == 0 {
        return Err(Error::Shape {
            op: "interpolate",
            lhs: real.shape().to_vec(),
            rhs: fake.shape().to_vec(),
        });
    }
    let b = real.shape()[0];
    if alpha.len() != b {
        return Err(invalid(format!("{} interpolation weights for a batch of {b}", alpha.len())));
    }
    let per = real.len() / b.max(1);
    let mut out = Vec::with_capacity(real.len());
    for (i, (r, f)) in real.data().iter().zip(fake.data()).enumerate() {
        let a = alpha[i / per];
        out.push(if r == f { *r } else { a * r + (1.0 - a) * f });
    }
    Tensor::new(out, real.shape())
}

/// Random points on the segments between paired real and fake samples.
pub fn interpolate_samples(real: &Tensor, fake: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let b = real.shape().first().copied().unwrap_or(0);
    let alpha: Vec<f64> = (0..b).map(|_| rng.uniform()).collect();
    interpolate_with(real, fake, &alpha)
}

/// `gp_lambda * mean_b (||grad_x critic(x)_b|| - 1)^2` at `x_interp`. The result
/// stays differentiable with respect to the critic's parameters.
pub fn gradient_penalty(critic: &SeqFn, x_interp: &Tensor, gp_lambda: f64) -> Result<Tensor> {
    let x = x_interp.detach().leaf();
    let scores = critic(&x)?;
    let g = grad(&scores.sum()?, std::slice::from_ref(&x), true)?.remove(0);
    let norm = g.sq_norm_per_sample()?.sqrt()?;
    norm.affine(1.0, -1.0)?.square()?.mean()?.scale(gp_lambda)
}

pub struct CriticTerms {
    /// Objective the critic minimizes.
    pub loss: Tensor,
    /// Detached estimate `mean critic(real) - mean critic(fake)`.
    pub wasserstein: f64,
    pub penalty: f64,
}

/// `mean critic(fake) - mean critic(real) + penalty` on interpolates. `fake`
/// is detached so only the critic is trained through this loss.
pub fn critic_loss(critic: &SeqFn, real: &Tensor, fake: &Tensor, gp_lambda: f64, rng: &mut Rng) -> Result<CriticTerms> {
    let fake = fake.detach();
    let real = real.detach();
    let x_interp = interpolate_samples(&real, &fake, rng)?;
    let gap = critic(&fake)?.mean()?.sub(&critic(&real)?.mean()?)?;
    let penalty = gradient_penalty(critic, &x_interp, gp_lambda)?;
    Ok(CriticTerms {
        wasserstein: -gap.item(),
        penalty: penalty.item(),
        loss: gap.add(&penalty)?,
    })
}

/// Generator-side Wasserstein term `-mean critic(fake)`.
pub fn generator_w_term(critic: &SeqFn, fake: &Tensor) -> Result<Tensor> {
    critic(fake)?.mean()?.neg()
}

fn flatten(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(invalid("mmd needs a batch axis"));
    }
    let n = x.shape()[0];
    x.reshape(&[n, x.len() / n.max(1)])
}

/// `exp(-||a_i - b_j||^2 / (2 sigma^2))` for every pair of rows.
fn rbf_gram(a: &Tensor, b: &Tensor, sigma: f64) -> Result<Tensor> {
    let (n, m, d) = (a.shape()[0], b.shape()[0], a.shape()[1]);
    let diff = a.reshape(&[n, 1, d])?.sub(&b.reshape(&[1, m, d])?)?;
    diff.square()?.sum_axis(2, false)?.scale(-0.5 / (sigma * sigma))?.exp()
}

/// Squared MMD between two equally sized sample sets with an RBF kernel of
/// bandwidth `sigma`: unbiased within-set averages (`i != j`) and the plain
/// cross average. Samples are flattened to vectors first.
pub fn mmd_rbf(x: &Tensor, y: &Tensor, sigma: f64) -> Result<Tensor> {
    let (xf, yf) = (flatten(x)?, flatten(y)?);
    let n = xf.shape()[0];
    if n < 2 || yf.shape()[0] != n || xf.shape()[1] != yf.shape()[1] {
        return Err(invalid(format!(
            "mmd needs two sets of equal size >= 2 and equal width, got {:?} and {:?}",
            xf.shape(),
            yf.shape()
        )));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(invalid(format!("rbf bandwidth must be > 0, got {sigma}")));
    }
    let mut off = vec![1.0; n * n];
    for i in 0..n {
        off[i * n + i] = 0.0;
    }
    let off = Tensor::new(off, &[n, n])?;
    let within = (n * (n - 1)) as f64;
    let kxx = rbf_gram(&xf, &xf, sigma)?.mul(&off)?.sum()?.scale(1.0 / within)?;
    let kyy = rbf_gram(&yf, &yf, sigma)?.mul(&off)?.sum()?.scale(1.0 / within)?;
    let kxy = rbf_gram(&xf, &yf, sigma)?.sum()?.scale(-2.0 / (n * n) as f64)?;
    kxx.add(&kyy)?.add(&kxy)
}

/// Value of [`mmd_rbf`] computed pair by pair without building the graph;
/// memory stays linear in the set size.
pub fn mmd_rbf_value(x: &Tensor, y: &Tensor, sigma: f64) -> Result<f64> {
    let (xf, yf) = (flatten(x)?, flatten(y)?);
    let (n, d) = (xf.shape()[0], xf.shape()[1]);
    if n < 2 || yf.shape()[0] != n || yf.shape()[1] != d {
        return Err(invalid(format!(
            "mmd needs two sets of equal size >= 2 and equal width, got {:?} and {:?}",
            xf.shape(),
            yf.shape()
        )));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(invalid(format!("rbf bandwidth must be > 0, got {sigma}")));
    }
    let gamma = 0.5 / (sigma * sigma);
    let rows = |t: &Tensor| t.data().chunks(d.max(1)).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let (a, b) = (rows(&xf), rows(&yf));
    let k = |p: &[f64], q: &[f64]| {
        let s: f64 = p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum();
        (-gamma * s).exp()
    };
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i < j {
                sxx += 2.0 * k(&a[i], &a[j]);
                syy += 2.0 * k(&b[i], &b[j]);
            }
            sxy += k(&a[i], &b[j]);
        }
    }
    let within = (n * (n - 1)) as f64;
    Ok(sxx / within + syy / within - 2.0 * sxy / (n * n) as f64)
}

/// Median pairwise Euclidean distance over the union of both flattened sets.
/// Falls back to 1 when the median is zero (e.g. all samples identical).
pub fn median_bandwidth(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (xf, yf) = (flatten(x)?, flatten(y)?);
    let d = xf.shape()[1];
    if yf.shape()[1] != d {
        return Err(invalid("mmd sets differ in sample width"));
    }
    let rows: Vec<&[f64]> = xf.data().chunks(d.max(1)).chain(yf.data().chunks(d.max(1))).collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let s: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            dists.push(s.sqrt());
        }
    }
    if dists.is_empty() {
        return Err(invalid("median bandwidth needs at least two samples"));
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let med = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    Ok(if med > 0.0 { med } else { 1.0 })
}

/// Unweighted loss terms of one generator step. Terms that were not computed
/// are `None`.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub ddpm: Tensor,
    pub ar: Option<Tensor>,
    pub mmd: Option<Tensor>,
    pub w: Option<Tensor>,
}

/// `ddpm + lambda_ar*ar + lambda_mmd*mmd + lambda_w*w`. A term whose weight is
/// zero never enters the graph.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<Tensor> {
    let mut total = parts.ddpm.clone();
    for (name, lambda, term) in [
        ("ar", weights.lambda_ar, &parts.ar),
        ("mmd", weights.lambda_mmd, &parts.mmd),
        ("w", weights.lambda_w, &parts.w),
    ] {
        if lambda == 0.0 {
            continue;
        }
        let term = term
            .as_ref()
            .ok_or_else(|| invalid(format!("loss term `{name}` has weight {lambda} but was not computed")))?;
        total = total.add(&term.scale(lambda)?)?;
    }
    Ok(total)
}
