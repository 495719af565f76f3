//! Datasets: synthetic sines and ECG-like beats, windowed CSV corpora,
//! min–max scaling, splitting and seeded batching.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Rng, Tensor};

/// Per-feature range of the raw values a dataset was scaled with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub min: f64,
    pub max: f64,
}

impl FeatureStats {
    /// `[0, 1]`, for data that needs no scaling.
    pub const UNIT: FeatureStats = FeatureStats { min: 0.0, max: 1.0 };

    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

/// `N` sequences of `T` steps with `F` features, scaled into `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Tensor,
    pub name: String,
    pub feature_names: Vec<String>,
    pub stats: Vec<FeatureStats>,
}

impl Dataset {
    pub fn new(samples: Tensor, name: impl Into<String>, feature_names: Vec<String>, stats: Vec<FeatureStats>) -> Result<Dataset> {
        if samples.rank() != 3 {
            return Err(invalid(format!("dataset samples must be (N, T, F), got {:?}", samples.shape())));
        }
        let f = samples.shape()[2];
        if feature_names.len() != f || stats.len() != f {
            return Err(invalid(format!(
                "{f} features but {} names and {} stats",
                feature_names.len(),
                stats.len()
            )));
        }
        Ok(Dataset {
            samples: samples.detach(),
            name: name.into(),
            feature_names,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.samples.shape()[2]
    }

    /// Samples at `idx`, in that order, as a `(len, T, F)` tensor.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        let (n, t, f) = (self.len(), self.seq_len(), self.features());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(invalid(format!("sample {bad} out of {n}")));
        }
        self.samples
            .reshape(&[n, t * f])?
            .index_select_rows(Arc::new(idx.to_vec()))?
            .reshape(&[idx.len(), t, f])
    }

    /// A dataset holding the samples at `idx`, sharing names and stats.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            samples: self.gather(idx)?,
            name: self.name.clone(),
            feature_names: self.feature_names.clone(),
            stats: self.stats.clone(),
        })
    }

    /// Seeded subsample of `n` samples without replacement (all of them,
    /// reordered, when `n >= len`).
    pub fn subsample(&self, n: usize, rng: &mut Rng) -> Result<Dataset> {
        let mut perm = rng.permutation(self.len());
        perm.truncate(n.min(self.len()));
        self.select(&perm)
    }
}

fn feature_names(prefix: &str, f: usize) -> Vec<String> {
    (0..f).map(|i| format!("{prefix}{i}")).collect()
}

fn check_extents(n: usize, t: usize, f: usize) -> Result<()> {
    if n == 0 || t == 0 || f == 0 {
        return Err(invalid(format!("dataset extents must be >= 1, got ({n}, {t}, {f})")));
    }
    Ok(())
}

/// `0.5 * (sin(eta * t + theta) + 1)` at `t = 0, 1, .., len - 1`.
pub fn sine_channel(eta: f64, theta: f64, len: usize) -> Vec<f64> {
    (0..len).map(|t| 0.5 * ((eta * t as f64 + theta).sin() + 1.0)).collect()
}

/// Sinusoids with independent frequency `U[0.1, 0.2]` and phase `U[0, 0.1]`
/// per sample and channel. Values already lie in `[0, 1]`, so the data is
/// left unscaled and the stats are the unit range.
pub fn gen_sines(n: usize, t: usize, f: usize, rng: &mut Rng) -> Result<Dataset> {
    check_extents(n, t, f)?;
    let mut data = vec![0.0; n * t * f];
    for i in 0..n {
        for k in 0..f {
            let eta = rng.uniform_range(0.1, 0.2)?;
            let theta = rng.uniform_range(0.0, 0.1)?;
            for (s, v) in sine_channel(eta, theta, t).into_iter().enumerate() {
                data[(i * t + s) * f + k] = v;
            }
        }
    }
    Dataset::new(Tensor::new(data, &[n, t, f])?, "sines", feature_names("sine", f), vec![FeatureStats::UNIT; f])
}

/// Amplitude, width and offset (relative to the beat center) ranges of one
/// wave, all in samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveRange {
    pub amplitude: (f64, f64),
    pub width: (f64, f64),
    pub offset: (f64, f64),
}

/// Randomized P, Q, R, S, T morphology. Q and S are drawn as positive
/// amplitudes and subtracted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcgSpec {
    pub waves: [WaveRange; 5],
    /// Inclusive range of beats per window.
    pub beats: (usize, usize),
    /// One value for every feature, or one per feature.
    pub noise_std: Vec<f64>,
}

/// Signs of the P, Q, R, S, T bumps.
pub const WAVE_SIGNS: [f64; 5] = [1.0, -1.0, 1.0, -1.0, 1.0];

impl Default for EcgSpec {
    fn default() -> Self {
        let w = |amplitude, offset| WaveRange {
            amplitude,
            width: (0.5, 1.5),
            offset,
        };
        EcgSpec {
            waves: [
                w((0.1, 0.25), (-6.0, -4.0)),
                w((0.1, 0.2), (-1.5, -1.0)),
                w((0.8, 1.2), (0.0, 0.0)),
                w((0.1, 0.2), (1.0, 1.5)),
                w((0.1, 0.25), (4.0, 6.0)),
            ],
            beats: (1, 2),
            noise_std: vec![0.02],
        }
    }
}

impl EcgSpec {
    pub fn validate(&self, t: usize, f: usize) -> Result<()> {
        for (i, w) in self.waves.iter().enumerate() {
            for (what, (lo, hi)) in [("amplitude", w.amplitude), ("width", w.width), ("offset", w.offset)] {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(invalid(format!("wave {i} {what} range ({lo}, {hi}) is invalid")));
                }
            }
            if w.width.0 <= 0.0 {
                return Err(invalid(format!("wave {i} widths must be > 0")));
            }
        }
        let (lo, hi) = self.offset_span();
        if hi - lo > t.saturating_sub(1) as f64 {
            return Err(invalid(format!(
                "wave offsets span {} samples, more than a {t}-step window holds",
                hi - lo
            )));
        }
        if self.beats.0 == 0 || self.beats.0 > self.beats.1 {
            return Err(invalid(format!("beats range {:?} is invalid", self.beats)));
        }
        if !(self.noise_std.len() == 1 || self.noise_std.len() == f) || self.noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(invalid(format!("noise_std needs 1 or {f} nonnegative values")));
        }
        Ok(())
    }

    fn offset_span(&self) -> (f64, f64) {
        let lo = self.waves.iter().map(|w| w.offset.0).fold(f64::INFINITY, f64::min);
        let hi = self.waves.iter().map(|w| w.offset.1).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// One drawn wave: `sign * amplitude * exp(-(t - center)^2 / (2 width^2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

/// Sum of signed Gaussian bumps at `t = 0, .., len - 1`. `bumps` holds whole
/// beats: five consecutive entries per beat in P, Q, R, S, T order.
pub fn bump_sum(bumps: &[Bump], len: usize) -> Vec<f64> {
    (0..len)
        .map(|t| {
            bumps
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let z = t as f64 - b.center;
                    WAVE_SIGNS[i % 5] * b.amplitude * (-z * z / (2.0 * b.width * b.width)).exp()
                })
                .sum()
        })
        .collect()
}

fn draw(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

/// Unscaled ECG-like windows. Beat count and beat centers are shared by the
/// features of a sample; wave morphology and noise are drawn per feature.
pub fn gen_ecg_raw(n: usize, t: usize, f: usize, spec: &EcgSpec, rng: &mut Rng) -> Result<Tensor> {
    check_extents(n, t, f)?;
    spec.validate(t, f)?;
    let (lo, hi) = spec.offset_span();
    let centers = (-lo, (t - 1) as f64 - hi);
    let mut data = vec![0.0; n * t * f];
    for i in 0..n {
        let beats = spec.beats.0 + rng.below(spec.beats.1 - spec.beats.0 + 1);
        let beat_centers: Vec<f64> = (0..beats).map(|_| draw(rng, centers)).collect();
        for k in 0..f {
            let mut bumps = Vec::with_capacity(5 * beats);
            for &c in &beat_centers {
                for w in &spec.waves {
                    bumps.push(Bump {
                        amplitude: draw(rng, w.amplitude),
                        center: c + draw(rng, w.offset),
                        width: draw(rng, w.width),
                    });
                }
            }
            let sd = spec.noise_std[if spec.noise_std.len() == 1 { 0 } else { k }];
            for (s, v) in bump_sum(&bumps, t).into_iter().enumerate() {
                let noise = if sd > 0.0 { sd * rng.normal() } else { 0.0 };
                data[(i * t + s) * f + k] = v + noise;
            }
        }
    }
    Tensor::new(data, &[n, t, f])
}

/// ECG-like windows scaled per feature into `[0, 1]`.
pub fn gen_ecg(n: usize, t: usize, f: usize, spec: &EcgSpec, rng: &mut Rng) -> Result<Dataset> {
    let raw = gen_ecg_raw(n, t, f, spec, rng)?;
    let stats = feature_stats(&raw)?;
    Dataset::new(minmax_normalize(&raw, &stats)?, "ecg", feature_names("lead", f), stats)
}

/// Per-feature min and max over every sample and step of `(.., F)` data.
pub fn feature_stats(x: &Tensor) -> Result<Vec<FeatureStats>> {
    let f = *x.shape().last().ok_or_else(|| invalid("feature stats of a scalar"))?;
    if x.is_empty() {
        return Err(invalid("feature stats of empty data"));
    }
    let mut stats = vec![
        FeatureStats {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY
        };
        f
    ];
    for row in x.data().chunks(f) {
        for (s, &v) in stats.iter_mut().zip(row) {
            s.min = s.min.min(v);
            s.max = s.max.max(v);
        }
    }
    Ok(stats)
}

fn map_features(x: &Tensor, stats: &[FeatureStats], g: impl Fn(f64, &FeatureStats) -> f64) -> Result<Tensor> {
    let f = *x.shape().last().ok_or_else(|| invalid("scaling a scalar"))?;
    if stats.len() != f {
        return Err(invalid(format!("{} feature stats for {f} features", stats.len())));
    }
    if stats.iter().any(|s| !(s.min.is_finite() && s.max.is_finite())) {
        return Err(invalid("feature stats must be finite"));
    }
    let data: Vec<f64> = x
        .data()
        .chunks(f)
        .flat_map(|row| row.iter().zip(stats).map(|(&v, s)| g(v, s)).collect::<Vec<_>>())
        .collect();
    Tensor::new(data, x.shape())
}

/// `(x - min) / (max - min)` per feature; a zero-range feature maps to 0.
pub fn minmax_normalize(x: &Tensor, stats: &[FeatureStats]) -> Result<Tensor> {
    map_features(x, stats, |v, s| if s.range() > 0.0 { (v - s.min) / s.range() } else { 0.0 })
}

/// Inverse of [`minmax_normalize`]; a zero-range feature maps back to its min.
pub fn denormalize(x: &Tensor, stats: &[FeatureStats]) -> Result<Tensor> {
    map_features(x, stats, |v, s| s.min + v * s.range())
}

/// Sliding windows of `t` rows at `stride` over a headed CSV file. With
/// `columns` the named columns are used, in that order; otherwise all of
/// them. Scaling statistics cover the whole file.
pub fn load_csv_windowed(path: &Path, t: usize, stride: usize, columns: Option<&[String]>) -> Result<Dataset> {
    if t == 0 || stride == 0 {
        return Err(invalid("window length and stride must be >= 1"));
    }
    let csv_err = |row: usize, column: String, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(0, String::new(), e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(1, String::new(), e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let picked: Vec<usize> = match columns {
        Some(names) => names
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| csv_err(1, c.clone(), "no such column in the header".into()))
            })
            .collect::<Result<_>>()?,
        None => (0..header.len()).collect(),
    };
    if picked.is_empty() {
        return Err(csv_err(1, String::new(), "no columns selected".into()));
    }
    let f = picked.len();
    let mut rows: Vec<f64> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // 1-based file line: the header is line 1
        let line = i + 2;
        let record = record.map_err(|e| csv_err(line, String::new(), e.to_string()))?;
        for &c in &picked {
            let cell = record.get(c).unwrap_or("");
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| csv_err(line, header[c].clone(), format!("`{cell}` is not a number")))?;
            rows.push(v);
        }
    }
    let count = rows.len() / f;
    if count < t {
        return Err(csv_err(0, String::new(), format!("{count} data rows, fewer than the window length {t}")));
    }
    let raw = Tensor::new(rows, &[count, f])?;
    let stats = feature_stats(&raw)?;
    let scaled = minmax_normalize(&raw, &stats)?;
    let windows = (count - t) / stride + 1;
    let mut data = Vec::with_capacity(windows * t * f);
    for k in 0..windows {
        data.extend_from_slice(&scaled.data()[k * stride * f..(k * stride + t) * f]);
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    let names = picked.iter().map(|&c| header[c].clone()).collect();
    Dataset::new(Tensor::new(data, &[windows, t, f])?, name, names, stats)
}

/// Seeded disjoint split; the first part holds `round(train_fraction * N)`
/// samples.
pub fn shuffle_split(ds: &Dataset, train_fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n = ds.len();
    let k = (train_fraction * n as f64).round() as usize;
    if k == 0 || k == n {
        return Err(invalid(format!("a {train_fraction} split of {n} samples leaves one side empty")));
    }
    let perm = rng.permutation(n);
    Ok((ds.select(&perm[..k])?, ds.select(&perm[k..])?))
}

/// Index batches for one epoch: a fresh permutation cut into full batches,
/// dropping the short remainder.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(invalid(format!("batch size {batch_size} with {n} samples")));
    }
    let perm = rng.permutation(n);
    Ok(perm.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// One epoch of shuffled full batches.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = Result<Tensor>;

    fn next(&mut self) -> Option<Result<Tensor>> {
        self.order.next().map(|idx| self.ds.gather(&idx))
    }
}

pub fn batch_iter<'a>(ds: &'a Dataset, batch_size: usize, rng: &mut Rng) -> Result<Batches<'a>> {
    Ok(Batches {
        ds,
        order: epoch_batches(ds.len(), batch_size, rng)?.into_iter(),
    })
}
