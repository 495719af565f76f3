//! Sample-quality metrics: the discriminative score, the train-on-synthetic
//! predictive score, an MMD report metric and a 2-D PCA projection.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Dataset};
use crate::error::{invalid, Error, Result};
use crate::losses::{median_bandwidth, mmd_rbf_value};
use crate::networks::{GruHead, GruNetwork};
use crate::numerics::{backward, no_grad, Adam, AdamConfig, Rng, Tensor};

/// Budget of the GRU networks and sample caps used by the metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub repeats: usize,
    pub gru_steps: usize,
    pub gru_lr: f64,
    pub gru_batch: usize,
    /// Cap on samples per set for the MMD metric (its cost is quadratic).
    pub mmd_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            repeats: 4,
            gru_steps: 2000,
            gru_lr: 1e-3,
            gru_batch: 128,
            mmd_samples: 1000,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.gru_steps == 0 || self.gru_batch == 0 || self.mmd_samples < 2 {
            return Err(Error::Config(format!("eval budget must be positive: {self:?}")));
        }
        if !(self.gru_lr.is_finite() && self.gru_lr > 0.0) {
            return Err(Error::Config(format!("gru_lr must be > 0, got {}", self.gru_lr)));
        }
        Ok(())
    }
}

/// Hidden width of the metric GRUs for `features` input channels.
pub fn gru_hidden(features: usize) -> usize {
    features.max(8)
}

fn same_layout(real: &Dataset, synth: &Dataset) -> Result<()> {
    if real.is_empty() || synth.is_empty() {
        return Err(invalid("metrics need nonempty real and synthetic sets"));
    }
    if real.seq_len() != synth.seq_len() || real.features() != synth.features() {
        return Err(invalid(format!(
            "real (T={}, F={}) and synthetic (T={}, F={}) layouts differ",
            real.seq_len(),
            real.features(),
            synth.seq_len(),
            synth.features()
        )));
    }
    Ok(())
}

/// Subsamples the larger set so both hold the same count.
fn equalize(real: &Dataset, synth: &Dataset, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    let m = real.len().min(synth.len());
    Ok((real.subsample(m, rng)?, synth.subsample(m, rng)?))
}

/// Endless stream of shuffled index batches of `min(batch, n)`.
struct Sampler {
    n: usize,
    batch: usize,
    queue: std::vec::IntoIter<Vec<usize>>,
}

impl Sampler {
    fn new(n: usize, batch: usize) -> Sampler {
        Sampler {
            n,
            batch: batch.min(n),
            queue: Vec::new().into_iter(),
        }
    }

    fn next(&mut self, rng: &mut Rng) -> Result<Vec<usize>> {
        if let Some(b) = self.queue.next() {
            return Ok(b);
        }
        self.queue = epoch_batches(self.n, self.batch, rng)?.into_iter();
        self.queue.next().ok_or_else(|| invalid("empty sampler"))
    }
}

/// `mean(softplus(z) - y z)`, written to stay finite for large `|z|`.
fn bce_with_logits(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let pos = logits.relu()?;
    let abs = pos.add(&logits.neg()?.relu()?)?;
    let softplus = pos.add(&abs.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?;
    softplus.sub(&logits.mul(labels)?)?.mean()
}

/// Trains a GRU classifier on `(x, labels)` and returns it.
pub fn train_classifier(x: &Dataset, labels: &[f64], cfg: &EvalConfig, rng: &mut Rng) -> Result<GruNetwork> {
    let mut net = GruNetwork::new(x.features(), gru_hidden(x.features()), GruHead::Classifier, rng)?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.gru_lr), &net.params);
    let mut sampler = Sampler::new(x.len(), cfg.gru_batch);
    for _ in 0..cfg.gru_steps {
        let idx = sampler.next(rng)?;
        let xb = x.gather(&idx)?;
        let yb = Tensor::new(idx.iter().map(|&i| labels[i]).collect(), &[idx.len()])?;
        let loss = bce_with_logits(&net.classify(&xb)?, &yb)?;
        let grads = backward(&loss, net.params.tensors())?;
        opt.step(&mut net.params, &grads)?;
    }
    Ok(net)
}

/// `|accuracy - 0.5|` of a GRU telling real (label 1) from synthetic (label
/// 0) samples, trained on 80% of the pooled, equalized, shuffled set and
/// scored on the rest.
pub fn discriminative_score(real: &Dataset, synth: &Dataset, cfg: &EvalConfig, rng: &mut Rng) -> Result<f64> {
    same_layout(real, synth)?;
    let (real, synth) = equalize(real, synth, rng)?;
    let m = real.len();
    let pooled = Tensor::concat(&[real.samples.clone(), synth.samples.clone()], 0)?;
    let pooled = Dataset::new(pooled, "pooled", real.feature_names.clone(), real.stats.clone())?;
    let labels: Vec<f64> = (0..2 * m).map(|i| if i < m { 1.0 } else { 0.0 }).collect();

    let perm = rng.permutation(2 * m);
    let cut = (0.8 * (2 * m) as f64).round() as usize;
    let (train_idx, test_idx) = perm.split_at(cut);
    let test_real = test_idx.iter().filter(|&&i| i < m).count();
    let test_synth = test_idx.len() - test_real;
    if test_real < 5 || test_synth < 5 {
        return Err(invalid(format!(
            "held-out split has {test_real} real and {test_synth} synthetic samples; need at least 5 of each"
        )));
    }
    let train = pooled.select(train_idx)?;
    let train_labels: Vec<f64> = train_idx.iter().map(|&i| labels[i]).collect();
    let net = train_classifier(&train, &train_labels, cfg, rng)?;

    let _g = no_grad();
    let logits = net.classify(&pooled.gather(test_idx)?)?;
    let correct = logits
        .data()
        .iter()
        .zip(test_idx)
        .filter(|(z, &i)| (**z > 0.0) == (labels[i] == 1.0))
        .count();
    Ok(score_from_accuracy(correct as f64 / test_idx.len() as f64))
}

pub fn score_from_accuracy(accuracy: f64) -> f64 {
    (accuracy - 0.5).abs()
}

/// Trains a GRU to map steps `..T-1` of `x` to steps `1..` (every feature).
pub fn train_forecaster(x: &Dataset, cfg: &EvalConfig, rng: &mut Rng) -> Result<GruNetwork> {
    let (t, f) = (x.seq_len(), x.features());
    if t < 2 {
        return Err(invalid("forecasting needs sequences of length >= 2"));
    }
    let mut net = GruNetwork::new(f, gru_hidden(f), GruHead::Forecaster { outputs: f }, rng)?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.gru_lr), &net.params);
    let mut sampler = Sampler::new(x.len(), cfg.gru_batch);
    for _ in 0..cfg.gru_steps {
        let xb = x.gather(&sampler.next(rng)?)?;
        let pred = net.forecast(&xb.slice(1, 0, t - 1)?)?;
        let loss = pred.sub(&xb.slice(1, 1, t - 1)?)?.square()?.mean()?;
        let grads = backward(&loss, net.params.tensors())?;
        opt.step(&mut net.params, &grads)?;
    }
    Ok(net)
}

/// Mean absolute one-step-ahead error of `net` over every position of `x`.
pub fn forecast_mae(net: &GruNetwork, x: &Dataset) -> Result<f64> {
    let t = x.seq_len();
    let _g = no_grad();
    let mut total = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..x.len()).collect();
    for chunk in idx.chunks(512) {
        let xb = x.gather(chunk)?;
        let pred = net.forecast(&xb.slice(1, 0, t - 1)?)?;
        let target = xb.slice(1, 1, t - 1)?;
        total += pred.data().iter().zip(target.data()).map(|(p, y)| (p - y).abs()).sum::<f64>();
        count += pred.len();
    }
    Ok(total / count as f64)
}

/// Train on synthetic, test on real: MAE of a GRU forecaster trained on
/// `synth` and evaluated on `real`.
pub fn predictive_score(real: &Dataset, synth: &Dataset, cfg: &EvalConfig, rng: &mut Rng) -> Result<f64> {
    same_layout(real, synth)?;
    let net = train_forecaster(synth, cfg, rng)?;
    forecast_mae(&net, real)
}

/// Squared MMD between equal-size seeded subsamples of the two sets, with the
/// median-heuristic bandwidth.
pub fn mmd_metric(real: &Dataset, synth: &Dataset, max_samples: usize, rng: &mut Rng) -> Result<f64> {
    same_layout(real, synth)?;
    let m = real.len().min(synth.len()).min(max_samples);
    let a = real.subsample(m, rng)?;
    let b = synth.subsample(m, rng)?;
    let sigma = median_bandwidth(&a.samples, &b.samples)?;
    mmd_rbf_value(&a.samples, &b.samples, sigma)
}

/// Mean and spread of one metric over repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation (zero for a single run).
    pub std: f64,
    pub repeats: usize,
    pub fingerprint: String,
}

impl ScoreReport {
    pub fn from_values(metric: impl Into<String>, values: &[f64], fingerprint: impl Into<String>) -> Result<ScoreReport> {
        if values.is_empty() {
            return Err(invalid("a score report needs at least one value"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(ScoreReport {
            metric: metric.into(),
            mean,
            std,
            repeats: values.len(),
            fingerprint: fingerprint.into(),
        })
    }
}

pub fn write_scores_csv(path: &Path, reports: &[ScoreReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["metric", "mean", "std", "repeats"]).map_err(csv_io)?;
    for r in reports {
        w.write_record([r.metric.clone(), r.mean.to_string(), r.std.to_string(), r.repeats.to_string()])
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(csv_io)
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Real,
    Synthetic,
}

impl Source {
    pub fn label(&self) -> &'static str {
        match self {
            Source::Real => "real",
            Source::Synthetic => "synthetic",
        }
    }
}

/// Both sets projected onto the top two principal axes of the pooled data.
#[derive(Clone, Debug)]
pub struct Projection {
    pub points: Vec<(Source, f64, f64)>,
    /// Unit principal axes in flattened `T * F` coordinates.
    pub components: [Vec<f64>; 2],
    /// Variance along each axis.
    pub variances: [f64; 2],
    pub mean: Vec<f64>,
}

pub const PCA_TOLERANCE: f64 = 1e-8;
pub const PCA_MAX_ITERATIONS: usize = 10_000;

fn mat_vec(a: &[f64], v: &[f64]) -> Vec<f64> {
    a.chunks(v.len()).map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn orthogonalize(v: &mut [f64], against: &[Vec<f64>]) {
    for u in against {
        let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        for (x, y) in v.iter_mut().zip(u) {
            *x -= dot * y;
        }
    }
}

/// Leading eigenpairs of the symmetric `d x d` matrix `a` by power iteration
/// with deflation. Iterates stop once `||A v - lambda v|| <= tol * max(1, |lambda_1|)`.
pub fn top_eigenpairs(a: &[f64], d: usize, k: usize, tol: f64, max_iter: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    if a.len() != d * d || d == 0 || k > d {
        return Err(invalid(format!("eigenpairs of a {} entry matrix with d = {d}, k = {k}", a.len())));
    }
    let mut found: Vec<(f64, Vec<f64>)> = Vec::with_capacity(k);
    let mut scale = 1.0f64;
    for _ in 0..k {
        let basis: Vec<Vec<f64>> = found.iter().map(|(_, v)| v.clone()).collect();
        // fixed, generic start vector
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7919) % 101) as f64 / 101.0).collect();
        orthogonalize(&mut v, &basis);
        let mut n = norm(&v);
        if n == 0.0 {
            v = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 }).collect();
            orthogonalize(&mut v, &basis);
            n = norm(&v);
        }
        v.iter_mut().for_each(|x| *x /= n);
        let mut residual = f64::INFINITY;
        let mut lambda = 0.0;
        for _ in 0..max_iter {
            let mut w = mat_vec(a, &v);
            orthogonalize(&mut w, &basis);
            lambda = v.iter().zip(&w).map(|(x, y)| x * y).sum();
            residual = norm(&w.iter().zip(&v).map(|(x, y)| x - lambda * y).collect::<Vec<_>>());
            if residual <= tol * scale.max(lambda.abs()) {
                break;
            }
            let wn = norm(&w);
            if wn == 0.0 {
                residual = 0.0;
                break;
            }
            v = w.iter().map(|x| x / wn).collect();
        }
        if residual > tol * scale.max(lambda.abs()) {
            return Err(Error::NoConvergence { residual });
        }
        scale = scale.max(lambda.abs());
        found.push((lambda, v));
    }
    Ok(found)
}

/// Flattens every sequence, centers by the pooled mean and projects both sets
/// on the two leading eigenvectors of the pooled covariance.
pub fn pca_project(real: &Dataset, synth: &Dataset) -> Result<Projection> {
    same_layout(real, synth)?;
    let d = real.seq_len() * real.features();
    let rows: Vec<(Source, &[f64])> = real
        .samples
        .data()
        .chunks(d)
        .map(|r| (Source::Real, r))
        .chain(synth.samples.data().chunks(d).map(|r| (Source::Synthetic, r)))
        .collect();
    let n = rows.len();
    if n < 3 {
        return Err(invalid(format!("projection needs at least 3 pooled samples, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for (_, r) in &rows {
        for (m, x) in mean.iter_mut().zip(*r) {
            *m += x / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for (_, r) in &rows {
        for (c, (x, m)) in centered.iter_mut().zip(r.iter().zip(&mean)) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for (j, cj) in centered.iter().enumerate().skip(i) {
                cov[i * d + j] += ci * cj;
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let pairs = top_eigenpairs(&cov, d, 2.min(d), PCA_TOLERANCE, PCA_MAX_ITERATIONS)?;
    let pc = |k: usize| pairs.get(k).map(|p| p.1.clone()).unwrap_or_else(|| vec![0.0; d]);
    let components = [pc(0), pc(1)];
    let variances = [pairs[0].0, pairs.get(1).map(|p| p.0).unwrap_or(0.0)];
    let project = |r: &[f64], c: &[f64]| r.iter().zip(&mean).zip(c).map(|((x, m), v)| (x - m) * v).sum::<f64>();
    let points = rows
        .iter()
        .map(|(s, r)| (*s, project(r, &components[0]), project(r, &components[1])))
        .collect();
    Ok(Projection {
        points,
        components,
        variances,
        mean,
    })
}

pub fn write_projection_csv(path: &Path, proj: &Projection) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["source", "pc1", "pc2"]).map_err(csv_io)?;
    for (s, x, y) in &proj.points {
        w.write_record([s.label().to_string(), x.to_string(), y.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Scatter plot of a projection: real points blue, synthetic points orange.
pub fn projection_svg(proj: &Projection) -> String {
    let (w, h, pad) = (480.0, 480.0, 24.0);
    let bounds = |f: fn(&(Source, f64, f64)) -> f64| {
        let lo = proj.points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = proj.points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, lo + 1.0)
        }
    };
    let (x0, x1) = bounds(|p| p.1);
    let (y0, y1) = bounds(|p| p.2);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (s, x, y) in &proj.points {
        let cx = pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
        let cy = h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
        let color = match s {
            Source::Real => "#1f77b4",
            Source::Synthetic => "#ff7f0e",
        };
        let _ = writeln!(
            svg,
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2\" fill=\"{color}\" fill-opacity=\"0.6\"><title>{}</title></circle>",
            s.label()
        );
    }
    svg.push_str("</svg>\n");
    svg
}
