use crate::container::{bytes_to_values, f32s_to_u64, u64_to_f32s, values_to_bytes, Container};
use crate::data::{Dataset, FeatureStats};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, ParamStore, Rng, RngState};

use super::config::RunConfig;
use super::train::{Models, Progress, Trainer, TrainRngs};

const NETWORKS: [&str; 3] = ["supervisor", "denoiser", "critic"];

fn text_entry(c: &mut Container, name: &str, s: &str) -> Result<()> {
    c.push_values(name, bytes_to_values(s.as_bytes()))
}

fn read_text(c: &Container, name: &str) -> Result<String> {
    let bytes = values_to_bytes(c.require(name)?.data())?;
    String::from_utf8(bytes).map_err(|_| Error::Format {
        offset: 0,
        message: format!("`{name}` is not UTF-8"),
    })
}

fn push_u64s(c: &mut Container, name: &str, vs: &[u64]) -> Result<()> {
    c.push_values(name, vs.iter().flat_map(|&v| u64_to_f32s(v)).collect())
}

fn read_u64s(c: &Container, name: &str) -> Result<Vec<u64>> {
    c.require(name)?.data().chunks(4).map(f32s_to_u64).collect()
}

/// Rng state as 28 exact values: 16 for the seed, 4 for the stream, 8 for
/// the word position.
fn rng_values(state: RngState) -> Vec<f64> {
    let mut v: Vec<f64> = state
        .seed
        .chunks(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
        .collect();
    v.extend(u64_to_f32s(state.stream));
    v.extend(u64_to_f32s(state.word_pos as u64));
    v.extend(u64_to_f32s((state.word_pos >> 64) as u64));
    v
}

fn rng_from_values(v: &[f64]) -> Result<Rng> {
    if v.len() != 28 {
        return Err(Error::Format {
            offset: 0,
            message: format!("rng state has {} values, expected 28", v.len()),
        });
    }
    let mut seed = [0u8; 32];
    for (i, &x) in v[..16].iter().enumerate() {
        if !(0.0..65536.0).contains(&x) || x.fract() != 0.0 {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad rng seed word {x}"),
            });
        }
        seed[2 * i..2 * i + 2].copy_from_slice(&(x as u16).to_le_bytes());
    }
    let stream = f32s_to_u64(&v[16..20])?;
    let lo = f32s_to_u64(&v[20..24])? as u128;
    let hi = f32s_to_u64(&v[24..28])? as u128;
    Ok(Rng::from_state(RngState {
        seed,
        stream,
        word_pos: lo | (hi << 64),
    }))
}

fn push_params(c: &mut Container, prefix: &str, ps: &ParamStore) {
    for (name, t) in ps.iter() {
        c.push(format!("{prefix}/{name}"), t.clone());
    }
}

fn load_params(c: &Container, prefix: &str, ps: &mut ParamStore) -> Result<()> {
    let names: Vec<String> = ps.names().to_vec();
    for name in names {
        let key = format!("{prefix}/{name}");
        let t = c.require(&key)?;
        ps.set(&name, t.clone()).map_err(|e| Error::Format {
            offset: 0,
            message: format!("`{key}`: {e}"),
        })?;
    }
    let expected = ps.len();
    let found = c.with_prefix(&format!("{prefix}/")).count();
    if found != expected {
        return Err(Error::Format {
            offset: 0,
            message: format!("{prefix} has {found} tensors, expected {expected}"),
        });
    }
    Ok(())
}

fn push_stats(c: &mut Container, stats: &[FeatureStats]) -> Result<()> {
    c.push_values("data/min", stats.iter().map(|s| s.min).collect())?;
    c.push_values("data/max", stats.iter().map(|s| s.max).collect())
}

fn read_stats(c: &Container) -> Result<Vec<FeatureStats>> {
    let lo = c.require("data/min")?.data();
    let hi = c.require("data/max")?.data();
    if lo.len() != hi.len() {
        return Err(Error::Format {
            offset: 0,
            message: "data/min and data/max differ in length".into(),
        });
    }
    Ok(lo.iter().zip(hi).map(|(&min, &max)| FeatureStats { min, max }).collect())
}

fn check_fingerprint(c: &Container, name: &str, expected: &str) -> Result<()> {
    let found = read_text(c, name)?;
    if found != expected {
        return Err(Error::FingerprintMismatch {
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

/// Everything needed to resume `trainer` bit-exactly.
pub fn save_trainer(trainer: &Trainer) -> Result<Container> {
    let cfg = &trainer.config;
    let features = trainer.train_data().features();
    let mut c = Container::new();
    text_entry(&mut c, "meta/fingerprint", &cfg.fingerprint())?;
    text_entry(&mut c, "meta/model_fingerprint", &cfg.model_fingerprint(features))?;
    push_stats(&mut c, &trainer.train_data().stats)?;
    text_entry(&mut c, "data/feature_names", &trainer.train_data().feature_names.join("\n"))?;
    c.push_values("schedule/betas", trainer.schedule.betas().to_vec())?;
    let Models {
        denoiser,
        supervisor,
        critic,
    } = &trainer.models;
    for (name, net) in NETWORKS.iter().zip([supervisor, denoiser, critic]) {
        push_params(&mut c, name, &net.params);
    }
    for (name, opt) in NETWORKS.iter().zip(&trainer.optimizers) {
        push_u64s(&mut c, &format!("adam/{name}/step"), &[opt.step_count()])?;
        let (m, v) = opt.moments();
        let net = match *name {
            "supervisor" => supervisor,
            "denoiser" => denoiser,
            _ => critic,
        };
        for ((pname, mi), vi) in net.params.names().iter().zip(m).zip(v) {
            c.push(format!("adam/{name}/m/{pname}"), mi.clone());
            c.push(format!("adam/{name}/v/{pname}"), vi.clone());
        }
    }
    let p = trainer.progress;
    push_u64s(
        &mut c,
        "progress",
        &[p.epochs[0] as u64, p.epochs[1] as u64, p.epochs[2] as u64, p.log_rows],
    )?;
    for (name, rng) in trainer.rngs.named() {
        c.push_values(format!("rng/{name}"), rng_values(rng.state()))?;
    }
    Ok(c)
}

/// Restores a trainer for `config` and its training split from a
/// checkpoint. Fails with a fingerprint mismatch when the checkpoint was
/// written under a different configuration.
pub fn load_trainer(config: RunConfig, train: Dataset, c: &Container) -> Result<Trainer> {
    check_fingerprint(c, "meta/fingerprint", &config.fingerprint())?;
    let mut models = Models::init(&config, train.features())?;
    load_params(c, "supervisor", &mut models.supervisor.params)?;
    load_params(c, "denoiser", &mut models.denoiser.params)?;
    load_params(c, "critic", &mut models.critic.params)?;
    let adam = AdamConfig::with_lr(config.lr);
    let mut opts = Vec::with_capacity(3);
    for (name, net) in NETWORKS.iter().zip([&models.supervisor, &models.denoiser, &models.critic]) {
        let step = read_u64s(c, &format!("adam/{name}/step"))?
            .first()
            .copied()
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("empty step counter for {name}"),
            })?;
        let mut m = Vec::with_capacity(net.params.len());
        let mut v = Vec::with_capacity(net.params.len());
        for (pname, p) in net.params.iter() {
            for (which, out) in [("m", &mut m), ("v", &mut v)] {
                let key = format!("adam/{name}/{which}/{pname}");
                let t = c.require(&key)?;
                if t.shape() != p.shape() {
                    return Err(Error::Format {
                        offset: 0,
                        message: format!("`{key}` has shape {:?}, expected {:?}", t.shape(), p.shape()),
                    });
                }
                out.push(t.clone());
            }
        }
        opts.push(Adam::from_parts(adam, step, m, v));
    }
    let optimizers: [Adam; 3] = opts.try_into().map_err(|_| Error::Format {
        offset: 0,
        message: "optimizer count".into(),
    })?;
    let pv = read_u64s(c, "progress")?;
    if pv.len() != 4 {
        return Err(Error::Format {
            offset: 0,
            message: "progress entry has the wrong length".into(),
        });
    }
    let progress = Progress {
        epochs: [pv[0] as usize, pv[1] as usize, pv[2] as usize],
        log_rows: pv[3],
    };
    let mut rngs = TrainRngs::new(config.seed);
    for (name, rng) in rngs.named_mut() {
        *rng = rng_from_values(c.require(&format!("rng/{name}"))?.data())?;
    }
    Trainer::from_parts(config, train, models, optimizers, progress, Some(rngs))
}

/// Weights and data scaling needed for sampling.
pub struct Generator {
    pub models: Models,
    pub stats: Vec<FeatureStats>,
    pub feature_names: Vec<String>,
}

/// Loads the networks from a checkpoint, checking that they fit `config`.
pub fn load_generator(config: &RunConfig, c: &Container) -> Result<Generator> {
    let stats = read_stats(c)?;
    check_fingerprint(c, "meta/model_fingerprint", &config.model_fingerprint(stats.len()))?;
    let mut models = Models::init(config, stats.len())?;
    load_params(c, "supervisor", &mut models.supervisor.params)?;
    load_params(c, "denoiser", &mut models.denoiser.params)?;
    load_params(c, "critic", &mut models.critic.params)?;
    let feature_names = read_text(c, "data/feature_names")?.split('\n').map(str::to_string).collect();
    Ok(Generator {
        models,
        stats,
        feature_names,
    })
}

/// Dataset cache: samples, scaling, names, plus a key identifying the
/// dataset recipe it was built from.
pub fn save_dataset(ds: &Dataset, key: &str) -> Result<Container> {
    let mut c = Container::new();
    text_entry(&mut c, "meta/dataset_key", key)?;
    text_entry(&mut c, "meta/name", &ds.name)?;
    text_entry(&mut c, "meta/feature_names", &ds.feature_names.join("\n"))?;
    push_stats(&mut c, &ds.stats)?;
    c.push("samples", ds.samples.clone());
    Ok(c)
}

/// Reads a dataset cache; `None` when it was built from another recipe.
pub fn load_dataset(c: &Container, key: &str) -> Result<Option<Dataset>> {
    if read_text(c, "meta/dataset_key")? != key {
        return Ok(None);
    }
    let names = read_text(c, "meta/feature_names")?;
    let ds = Dataset::new(
        c.require("samples")?.clone(),
        read_text(c, "meta/name")?,
        names.split('\n').map(str::to_string).collect(),
        read_stats(c)?,
    )?;
    Ok(Some(ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_state_survives_the_container() {
        let mut r = Rng::with_stream(123, 9);
        for _ in 0..37 {
            r.next_u64();
        }
        let back = rng_from_values(&rng_values(r.state())).unwrap();
        assert_eq!(back.state(), r.state());
        let vals = rng_values(r.state());
        assert!(vals.iter().all(|&v| (v as f32) as f64 == v));
    }
}
