//! Dataset synthesis, CSV ingestion, scaling and batching.

use std::collections::HashSet;
use std::io::Write;

use timed_core::data::{
    batch_iter, bump_sum, denormalize, feature_stats, gen_ecg, gen_ecg_raw, gen_sines, load_csv_windowed,
    minmax_normalize, shuffle_split, sine_channel, Bump, EcgSpec, WaveRange,
};
use timed_core::numerics::Rng;
use timed_core::Error;

/// Expected value of one sine channel averaged over `t = 0..len`, by
/// midpoint quadrature over the frequency and phase distributions.
fn expected_sine_mean(len: usize) -> f64 {
    let m = 400;
    let mut acc = 0.0;
    for i in 0..m {
        let eta = 0.1 + 0.1 * (i as f64 + 0.5) / m as f64;
        for j in 0..m {
            let theta = 0.1 * (j as f64 + 0.5) / m as f64;
            for t in 0..len {
                acc += 0.5 * ((eta * t as f64 + theta).sin() + 1.0);
            }
        }
    }
    acc / (m * m * len) as f64
}

#[test]
fn sines_benchmark_shape_and_center() {
    let ds = gen_sines(10_000, 24, 4, &mut Rng::new(1)).unwrap();
    assert_eq!(ds.samples.shape(), &[10_000, 24, 4]);
    // less than one period fits in 24 steps, so the mass sits well above 0.5
    let expected = expected_sine_mean(24);
    assert!(expected > 0.7);
    for k in 0..4 {
        let vals: Vec<f64> = ds.samples.data().iter().skip(k).step_by(4).copied().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - expected).abs() < 0.02, "channel {k} mean {mean}, expected {expected}");
    }
    assert!(ds.samples.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn sine_channel_known_values() {
    let c = sine_channel(0.1, 0.0, 24);
    assert_eq!(c[0], 0.5);
    assert!((c[1] - 0.54992).abs() < 1e-5);
    for (t, v) in c.iter().enumerate() {
        assert!((v - 0.5 * ((0.1 * t as f64).sin() + 1.0)).abs() < 1e-15);
    }
}

fn gaussian(t: f64, a: f64, c: f64, w: f64) -> f64 {
    a * (-(t - c).powi(2) / (2.0 * w * w)).exp()
}

#[test]
fn ecg_fixed_parameters_match_closed_form() {
    let fixed = |a: f64, w: f64, o: f64| WaveRange {
        amplitude: (a, a),
        width: (w, w),
        offset: (o, o),
    };
    // offsets span the whole window, which pins the beat center at 10
    let spec = EcgSpec {
        waves: [
            fixed(0.2, 1.2, -10.0),
            fixed(0.15, 0.7, -1.0),
            fixed(1.0, 0.9, 0.0),
            fixed(0.12, 0.6, 1.3),
            fixed(0.22, 1.4, 13.0),
        ],
        beats: (1, 1),
        noise_std: vec![0.0],
    };
    let raw = gen_ecg_raw(2, 24, 2, &spec, &mut Rng::new(2)).unwrap();
    let params = [(0.2, 1.2, 0.0), (-0.15, 0.7, 9.0), (1.0, 0.9, 10.0), (-0.12, 0.6, 11.3), (0.22, 1.4, 23.0)];
    for t in 0..24 {
        let want: f64 = params.iter().map(|&(a, w, c)| gaussian(t as f64, a, c, w)).sum();
        for s in 0..2 {
            for k in 0..2 {
                assert!((raw.data()[(s * 24 + t) * 2 + k] - want).abs() < 1e-5);
            }
        }
    }
    let bumps: Vec<Bump> = params
        .iter()
        .map(|&(a, w, c)| Bump {
            amplitude: a.abs(),
            center: c,
            width: w,
        })
        .collect();
    let direct = bump_sum(&bumps, 24);
    for t in 0..24 {
        assert!((direct[t] - raw.data()[t * 2]).abs() < 1e-5);
    }
}

#[test]
fn ecg_benchmark_shape_and_range() {
    let ds = gen_ecg(15_000, 24, 3, &EcgSpec::default(), &mut Rng::new(3)).unwrap();
    assert_eq!(ds.samples.shape(), &[15_000, 24, 3]);
    assert!(ds.samples.data().iter().all(|v| (0.0..=1.0).contains(v) && v.is_finite()));
    let mut infeasible = EcgSpec::default();
    infeasible.waves[0].offset = (-20.0, -20.0);
    assert!(gen_ecg(4, 24, 3, &infeasible, &mut Rng::new(3)).is_err());
}

fn write_csv(lines: &[String]) -> tempfile::NamedTempFile {
    let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f.flush().unwrap();
    f
}

#[test]
fn csv_windows() {
    let mut lines = vec!["price,flat".to_string()];
    for i in 0..30 {
        lines.push(format!("{},{}", 10.0 + i as f64, 4.0));
    }
    let file = write_csv(&lines);
    let ds = load_csv_windowed(file.path(), 24, 1, None).unwrap();
    assert_eq!(ds.samples.shape(), &[7, 24, 2]);
    assert_eq!(ds.feature_names, vec!["price", "flat"]);
    // window k, row j is raw row k * stride + j
    for k in 0..7 {
        for j in 0..24 {
            let v = ds.samples.data()[(k * 24 + j) * 2];
            assert!((v - (k + j) as f64 / 29.0).abs() < 1e-6);
            assert_eq!(ds.samples.data()[(k * 24 + j) * 2 + 1], 0.0);
        }
    }
    let strided = load_csv_windowed(file.path(), 24, 3, Some(&["price".to_string()])).unwrap();
    assert_eq!(strided.samples.shape(), &[3, 24, 1]);
    assert!((strided.samples.data()[24] - 3.0 / 29.0).abs() < 1e-6);

    assert!(load_csv_windowed(file.path(), 31, 1, None).is_err());
    assert!(load_csv_windowed(file.path(), 4, 1, Some(&["volume".to_string()])).is_err());
}

#[test]
fn csv_bad_cell_names_row_and_column() {
    let file = write_csv(&["a,b".into(), "1,2".into(), "3,x".into(), "5,6".into()]);
    match load_csv_windowed(file.path(), 2, 1, None) {
        Err(Error::Csv { row, column, .. }) => {
            assert_eq!(row, 3);
            assert_eq!(column, "b");
        }
        other => panic!("expected a csv error, got {other:?}"),
    }
}

#[test]
fn scaling_round_trip() {
    let x = Rng::new(4).normal_tensor(&[5, 6, 3]).scale(40.0).unwrap();
    let stats = feature_stats(&x).unwrap();
    let y = minmax_normalize(&x, &stats).unwrap();
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let back = denormalize(&y, &stats).unwrap();
    for (a, b) in back.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-6 * b.abs().max(1.0) * 40.0);
    }
}

#[test]
fn split_is_disjoint_and_covering() {
    let ds = gen_sines(37, 3, 1, &mut Rng::new(5)).unwrap();
    let (a, b) = shuffle_split(&ds, 0.7, &mut Rng::new(6)).unwrap();
    // the first sample value identifies each sine draw
    let key = |d: &timed_core::data::Dataset| -> Vec<u64> {
        (0..d.len()).map(|i| d.samples.data()[i * 3 + 1].to_bits()).collect()
    };
    let (ka, kb): (HashSet<u64>, HashSet<u64>) = (key(&a).into_iter().collect(), key(&b).into_iter().collect());
    assert!(ka.is_disjoint(&kb));
    let all: HashSet<u64> = key(&ds).into_iter().collect();
    assert_eq!(ka.union(&kb).copied().collect::<HashSet<_>>(), all);
    assert_eq!(a.len() + b.len(), 37);
}

#[test]
fn batch_order_is_seeded() {
    let ds = gen_sines(50, 4, 2, &mut Rng::new(7)).unwrap();
    let run = |seed| -> Vec<Vec<f64>> {
        let mut rng = Rng::new(seed);
        let mut out = Vec::new();
        for _ in 0..2 {
            for b in batch_iter(&ds, 16, &mut rng).unwrap() {
                out.push(b.unwrap().to_vec());
            }
        }
        out
    };
    let first = run(8);
    assert_eq!(first.len(), 6);
    assert_eq!(first, run(8));
    assert_ne!(first, run(9));
    // epochs reshuffle
    assert_ne!(first[0], first[3]);
}
