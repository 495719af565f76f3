use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::container::Container;
use crate::data::{denormalize, Dataset};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::eval::{
    discriminative_score, mmd_metric, pca_project, predictive_score, projection_svg, write_projection_csv, write_scores_csv,
    ScoreReport,
};
use crate::numerics::Rng;

use super::checkpoint::{load_dataset, load_generator, load_trainer, save_dataset, save_trainer, Generator};
use super::config::{Ablation, RunConfig};
use super::streams;
use super::train::{generate, split_dataset, LogRow, Stage, Trainer};

/// File layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> RunPaths {
        RunPaths { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.bin")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples.csv")
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.csv")
    }

    pub fn scores_json(&self) -> PathBuf {
        self.root.join("scores.json")
    }

    pub fn projection(&self) -> PathBuf {
        self.root.join("projection.csv")
    }

    pub fn projection_svg(&self) -> PathBuf {
        self.root.join("projection.svg")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.csv")
    }

    fn ensure(&self) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        Ok(())
    }
}

/// Identifies the recipe a cached dataset was built from.
pub fn dataset_key(config: &RunConfig) -> String {
    let v = serde_json::json!({ "dataset": config.dataset, "seed": config.seed });
    v.to_string()
}

/// Builds the full normalized corpus, seeded from the config.
pub fn build_dataset(config: &RunConfig, base: &Path) -> Result<Dataset> {
    config.dataset.build(base, &mut Rng::with_stream(config.seed, streams::DATA))
}

/// The run's corpus: read from the cache when it matches the config,
/// otherwise built and cached.
pub fn prepare_dataset(config: &RunConfig, paths: &RunPaths, base: &Path) -> Result<Dataset> {
    let key = dataset_key(config);
    let cache = paths.dataset();
    if cache.exists() {
        if let Some(ds) = load_dataset(&Container::load(&cache)?, &key)? {
            return Ok(ds);
        }
    }
    let ds = build_dataset(config, base)?;
    paths.ensure()?;
    save_dataset(&ds, &key)?.save(&cache)?;
    Ok(ds)
}

/// Which stages a `train` invocation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelect {
    One(Stage),
    All,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub stages: StageSelect,
    /// Allow the joint stage without completed pretraining.
    pub from_scratch: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            stages: StageSelect::All,
            from_scratch: false,
        }
    }
}

fn write_log_header(path: &Path) -> Result<()> {
    fs::write(path, format!("{}\n", LogRow::HEADER))?;
    Ok(())
}

/// Cuts the log back to the rows a checkpoint accounts for.
fn truncate_log(path: &Path, rows: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::Stage(format!("cannot read {}: {e}", path.display())))?;
    let keep = rows as usize + 1;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < keep {
        return Err(Error::Stage(format!(
            "{} has {} rows but the checkpoint expects {rows}",
            path.display(),
            lines.len().saturating_sub(1)
        )));
    }
    let mut out = lines[..keep].join("\n");
    out.push('\n');
    fs::write(path, out)?;
    Ok(())
}

fn append_rows(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}

/// Trains in `paths`, resuming from its checkpoint when one exists. Every
/// epoch appends to `train_log.csv` and rewrites the checkpoint.
pub fn train(config: &RunConfig, paths: &RunPaths, base: &Path, opts: TrainOptions) -> Result<Trainer> {
    paths.ensure()?;
    let ds = prepare_dataset(config, paths, base)?;
    let (train_set, _) = split_dataset(config, &ds)?;
    let ckpt = paths.checkpoint();
    let log = paths.log();
    let mut trainer = if ckpt.exists() {
        let t = load_trainer(config.clone(), train_set, &Container::load(&ckpt)?)?;
        truncate_log(&log, t.progress.log_rows)?;
        t
    } else {
        write_log_header(&log)?;
        Trainer::new(config.clone(), train_set)?
    };
    fs::write(paths.config(), config.to_json())?;

    let stages: Vec<Stage> = match opts.stages {
        StageSelect::All => Stage::ALL.to_vec(),
        StageSelect::One(s) => vec![s],
    };
    for stage in stages {
        if stage == Stage::Joint && !opts.from_scratch {
            for pre in [Stage::Supervisor, Stage::Diffusion] {
                if !trainer.stage_complete(pre) {
                    return Err(Error::Stage(format!(
                        "stage 3 needs completed stage {} ({} of {} epochs done); run it first or pass --from-scratch",
                        pre.number(),
                        trainer.completed_epochs(pre),
                        trainer.planned_epochs(pre)
                    )));
                }
            }
        }
        trainer.run_stage(stage, |t, rows| {
            append_rows(&log, rows)?;
            save_trainer(t)?.save(&ckpt)
        })?;
    }
    Ok(trainer)
}

fn load_checkpoint(paths: &RunPaths) -> Result<Container> {
    let ckpt = paths.checkpoint();
    if !ckpt.exists() {
        return Err(Error::Stage(format!("no checkpoint at {}; train first", ckpt.display())));
    }
    Container::load(&ckpt)
}

fn schedule(config: &RunConfig) -> Result<NoiseSchedule> {
    let d = config.diffusion;
    NoiseSchedule::linear(d.steps, d.beta_start, d.beta_end)
}

/// Draws `n` sequences from the run's checkpoint. Values are in `[0, 1]`
/// unless `denormalized`, in which case the stored scaling is undone.
pub fn sample(config: &RunConfig, paths: &RunPaths, n: usize, denormalized: bool) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let g = load_generator(config, &load_checkpoint(paths)?)?;
    let mut rng = Rng::with_stream(config.seed, streams::SAMPLING);
    synth_dataset(config, &g, n, &mut rng, denormalized)
}

fn synth_dataset(config: &RunConfig, g: &Generator, n: usize, rng: &mut Rng, denormalized: bool) -> Result<Dataset> {
    let x = generate(config, &schedule(config)?, &g.models, n, rng)?;
    let x = if denormalized { denormalize(&x, &g.stats)? } else { x };
    Dataset::new(x, "synthetic", g.feature_names.clone(), g.stats.clone())
}

/// One row per (sample, timestep): `sample_id,t,<features>`.
pub fn write_samples_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let (n, t, f) = (ds.len(), ds.seq_len(), ds.features());
    let mut out = String::with_capacity(n * t * (f * 12 + 8));
    out.push_str("sample_id,t");
    for name in &ds.feature_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let d = ds.samples.data();
    for i in 0..n {
        for j in 0..t {
            out.push_str(&format!("{i},{j}"));
            for v in &d[(i * t + j) * f..(i * t + j + 1) * f] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-repeat metric values and their summaries.
#[derive(Clone, Debug, Serialize)]
pub struct EvalOutcome {
    pub discriminative: Vec<f64>,
    pub predictive: Vec<f64>,
    pub mmd: Vec<f64>,
    pub reports: Vec<ScoreReport>,
}

impl EvalOutcome {
    pub fn report(&self, metric: &str) -> Option<&ScoreReport> {
        self.reports.iter().find(|r| r.metric == metric)
    }
}

/// Scores `synth` against `real` over the configured repeats.
pub fn score_repeats(config: &RunConfig, real: &Dataset, synth: &Dataset) -> Result<EvalOutcome> {
    let mut out = EvalOutcome {
        discriminative: Vec::new(),
        predictive: Vec::new(),
        mmd: Vec::new(),
        reports: Vec::new(),
    };
    for r in 0..config.eval.repeats {
        let mut rng = Rng::with_stream(config.seed, streams::METRICS + r as u64);
        out.discriminative.push(discriminative_score(real, synth, &config.eval, &mut rng)?);
        out.predictive.push(predictive_score(real, synth, &config.eval, &mut rng)?);
        out.mmd.push(mmd_metric(real, synth, config.eval.mmd_samples, &mut rng)?);
    }
    let fp = config.eval_fingerprint();
    out.reports = vec![
        ScoreReport::from_values("discriminative", &out.discriminative, &fp)?,
        ScoreReport::from_values("predictive", &out.predictive, &fp)?,
        ScoreReport::from_values("mmd", &out.mmd, &fp)?,
    ];
    Ok(out)
}

/// Scores the trained generator against the held-out real split and writes
/// `scores.csv`, `scores.json`, `projection.csv` and `projection.svg`.
/// As many sequences are generated as there are held-out samples.
pub fn evaluate(config: &RunConfig, paths: &RunPaths, base: &Path) -> Result<EvalOutcome> {
    let g = load_generator(config, &load_checkpoint(paths)?)?;
    let ds = prepare_dataset(config, paths, base)?;
    let (_, holdout) = split_dataset(config, &ds)?;
    let mut rng = Rng::with_stream(config.seed, streams::EVAL_SAMPLING);
    let synth = synth_dataset(config, &g, holdout.len(), &mut rng, false)?;
    let outcome = score_repeats(config, &holdout, &synth)?;
    write_scores_csv(&paths.scores(), &outcome.reports)?;
    fs::write(
        paths.scores_json(),
        serde_json::to_string_pretty(&outcome).map_err(|e| Error::Stage(e.to_string()))?,
    )?;
    let proj = pca_project(&holdout, &synth)?;
    write_projection_csv(&paths.projection(), &proj)?;
    fs::write(paths.projection_svg(), projection_svg(&proj))?;
    Ok(outcome)
}

/// Discriminative score of two disjoint real halves: the floor a perfect
/// generator would reach.
pub fn real_null_score(config: &RunConfig, base: &Path, paths: &RunPaths) -> Result<EvalOutcome> {
    let ds = prepare_dataset(config, paths, base)?;
    let (train, holdout) = split_dataset(config, &ds)?;
    let mut rng = Rng::with_stream(config.seed, streams::NULL);
    let other = train.subsample(holdout.len().min(train.len()), &mut rng)?;
    score_repeats(config, &holdout, &other)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub discriminative_mean: f64,
    pub discriminative_std: f64,
    pub predictive_mean: f64,
    pub predictive_std: f64,
}

/// Trains and scores the full model and each single-component removal in
/// its own subdirectory, in parallel, then writes `ablation.csv`.
pub fn ablate(config: &RunConfig, paths: &RunPaths, base: &Path) -> Result<Vec<AblationRow>> {
    paths.ensure()?;
    let variants = Ablation::variants();
    let results: Vec<Result<AblationRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|&(label, flags)| {
                let mut cfg = config.clone();
                cfg.ablation = flags;
                let sub = RunPaths::new(paths.root.join(label));
                cfg.output_dir = sub.root.clone();
                s.spawn(move || -> Result<AblationRow> {
                    train(&cfg, &sub, base, TrainOptions::default())?;
                    let out = evaluate(&cfg, &sub, base)?;
                    let get = |m: &str| out.report(m).map(|r| (r.mean, r.std)).unwrap_or((f64::NAN, f64::NAN));
                    let (dm, ds) = get("discriminative");
                    let (pm, ps) = get("predictive");
                    Ok(AblationRow {
                        variant: label.to_string(),
                        discriminative_mean: dm,
                        discriminative_std: ds,
                        predictive_mean: pm,
                        predictive_std: ps,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Stage("ablation worker panicked".into()))))
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(paths.ablation()).map_err(crate::eval::csv_io)?;
    for r in &rows {
        w.serialize(r).map_err(crate::eval::csv_io)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Rows of a written training log, header excluded.
pub fn read_log(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().skip(1).map(str::to_string).collect())
}

