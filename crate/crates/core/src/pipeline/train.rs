use std::fmt;

use crate::data::{epoch_batches, shuffle_split, Dataset};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::losses::{ar_loss, critic_loss, generator_w_term, median_bandwidth, mmd_rbf, total_loss, ArWindow, LossParts};
use crate::networks::MaskedTransformer;
use crate::numerics::{backward, no_grad, Adam, AdamConfig, Rng, Tensor};

use super::config::RunConfig;
use super::streams;

/// Training phases, run in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Supervisor pretraining under teacher forcing.
    Supervisor = 1,
    /// Denoiser pretraining on the noise-prediction loss.
    Diffusion = 2,
    /// Joint training of every network.
    Joint = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Supervisor, Stage::Diffusion, Stage::Joint];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Result<Stage> {
        match n {
            1 => Ok(Stage::Supervisor),
            2 => Ok(Stage::Diffusion),
            3 => Ok(Stage::Joint),
            _ => Err(Error::Config(format!("no training stage {n}"))),
        }
    }

    fn index(self) -> usize {
        self as usize - 1
    }
}

/// How a zero-weighted loss term is handled in the joint stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TermPolicy {
    /// Terms with weight zero are never built.
    #[default]
    Omit,
    /// Every term is built and added with its (possibly zero) weight, and
    /// the critic is trained even when its term is switched off.
    ZeroWeighted,
}

/// The three networks of a run.
#[derive(Clone, Debug)]
pub struct Models {
    pub denoiser: MaskedTransformer,
    pub supervisor: MaskedTransformer,
    pub critic: MaskedTransformer,
}

impl Models {
    /// Fresh networks for data with `features` channels.
    pub fn init(config: &RunConfig, features: usize) -> Result<Models> {
        let tc = config.transformer(features);
        let mut rng = Rng::with_stream(config.seed, streams::INIT);
        let causal = !config.ablation.disable_mask;
        Ok(Models {
            denoiser: MaskedTransformer::denoiser(tc, config.diffusion.steps, &mut rng)?.with_causal(causal),
            supervisor: MaskedTransformer::supervisor(tc, &mut rng)?.with_causal(causal),
            critic: MaskedTransformer::critic(tc, &mut rng)?.with_causal(causal),
        })
    }
}

/// Supervisor refinement aligned with the input: position `t` becomes the
/// supervisor's forecast made from positions `<= t - delta`; the first
/// `delta` positions have no history and pass through unchanged.
pub fn refine(supervisor: &MaskedTransformer, x: &Tensor, delta: usize) -> Result<Tensor> {
    let t = x.shape()[1];
    let pred = supervisor.supervise(x)?;
    Tensor::concat(&[x.slice(1, 0, delta)?, pred.slice(1, 0, t - delta)?], 1)
}

/// One row of the training log: the mean of each term over an epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogRow {
    pub stage: u8,
    /// 0 for the pre-training baseline.
    pub epoch: usize,
    /// Optimizer steps taken in this stage so far.
    pub step: u64,
    pub loss: f64,
    pub ddpm: Option<f64>,
    pub ar: Option<f64>,
    pub mmd: Option<f64>,
    pub w: Option<f64>,
    pub critic: Option<f64>,
    pub critic_w: Option<f64>,
    pub critic_gp: Option<f64>,
}

impl LogRow {
    pub const HEADER: &'static str = "stage,epoch,step,loss,ddpm,ar,mmd,w,critic,critic_w,critic_gp";
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.stage, self.epoch, self.step, self.loss)?;
        for v in [self.ddpm, self.ar, self.mmd, self.w, self.critic, self.critic_w, self.critic_gp] {
            match v {
                Some(v) => write!(f, ",{v}")?,
                None => write!(f, ",")?,
            }
        }
        Ok(())
    }
}

/// Running sums for one epoch's log row.
#[derive(Default)]
struct Means {
    n: usize,
    sums: [f64; 8],
    seen: [bool; 8],
}

impl Means {
    fn add(&mut self, slot: usize, v: f64) {
        self.sums[slot] += v;
        self.seen[slot] = true;
    }

    fn row(&self, stage: Stage, epoch: usize, step: u64) -> LogRow {
        let n = self.n.max(1) as f64;
        let get = |i: usize| self.seen[i].then(|| self.sums[i] / n);
        LogRow {
            stage: stage.number(),
            epoch,
            step,
            loss: get(0).unwrap_or(0.0),
            ddpm: get(1),
            ar: get(2),
            mmd: get(3),
            w: get(4),
            critic: get(5),
            critic_w: get(6),
            critic_gp: get(7),
        }
    }
}

const LOSS: usize = 0;
const DDPM: usize = 1;
const AR: usize = 2;
const MMD: usize = 3;
const W: usize = 4;
const CRITIC: usize = 5;
const CRITIC_W: usize = 6;
const CRITIC_GP: usize = 7;

/// Completed work, used to resume.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    /// Completed epochs per stage.
    pub epochs: [usize; 3],
    /// Log rows emitted so far.
    pub log_rows: u64,
}

/// Random streams consumed during training, one per purpose.
#[derive(Clone, Debug)]
pub struct TrainRngs {
    pub supervisor_batches: Rng,
    pub diffusion_batches: Rng,
    pub diffusion_noise: Rng,
    pub joint_batches: Rng,
    pub joint_noise: Rng,
    pub critic: Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> TrainRngs {
        let r = |s| Rng::with_stream(seed, s);
        TrainRngs {
            supervisor_batches: r(streams::STAGE1_BATCHES),
            diffusion_batches: r(streams::STAGE2_BATCHES),
            diffusion_noise: r(streams::STAGE2_NOISE),
            joint_batches: r(streams::STAGE3_BATCHES),
            joint_noise: r(streams::STAGE3_NOISE),
            critic: r(streams::CRITIC),
        }
    }

    pub fn named(&self) -> [(&'static str, &Rng); 6] {
        [
            ("supervisor_batches", &self.supervisor_batches),
            ("diffusion_batches", &self.diffusion_batches),
            ("diffusion_noise", &self.diffusion_noise),
            ("joint_batches", &self.joint_batches),
            ("joint_noise", &self.joint_noise),
            ("critic", &self.critic),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Rng); 6] {
        [
            ("supervisor_batches", &mut self.supervisor_batches),
            ("diffusion_batches", &mut self.diffusion_batches),
            ("diffusion_noise", &mut self.diffusion_noise),
            ("joint_batches", &mut self.joint_batches),
            ("joint_noise", &mut self.joint_noise),
            ("critic", &mut self.critic),
        ]
    }
}

/// Seeded train / holdout split of the full corpus.
pub fn split_dataset(config: &RunConfig, ds: &Dataset) -> Result<(Dataset, Dataset)> {
    shuffle_split(ds, config.train_fraction, &mut Rng::with_stream(config.seed, streams::SPLIT))
}

/// Rows processed per forward pass when scoring a whole dataset.
const EVAL_CHUNK: usize = 256;

/// Full training state of one run.
pub struct Trainer {
    pub config: RunConfig,
    pub schedule: NoiseSchedule,
    pub models: Models,
    pub optimizers: [Adam; 3],
    pub progress: Progress,
    pub rngs: TrainRngs,
    pub policy: TermPolicy,
    train: Dataset,
}

fn diverged(term: &'static str, step: u64, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { term, step: step as usize })
    }
}

impl Trainer {
    /// Fresh state for `train`, the training part of the split.
    pub fn new(config: RunConfig, train: Dataset) -> Result<Trainer> {
        config.validate()?;
        let models = Models::init(&config, train.features())?;
        let adam = AdamConfig::with_lr(config.lr);
        let optimizers = [
            Adam::new(adam, &models.supervisor.params),
            Adam::new(adam, &models.denoiser.params),
            Adam::new(adam, &models.critic.params),
        ];
        Trainer::from_parts(config, train, models, optimizers, Progress::default(), None)
    }

    /// Reassembles a trainer from saved pieces.
    pub fn from_parts(
        config: RunConfig,
        train: Dataset,
        models: Models,
        optimizers: [Adam; 3],
        progress: Progress,
        rngs: Option<TrainRngs>,
    ) -> Result<Trainer> {
        if train.seq_len() != config.dataset.seq_len() {
            return Err(Error::Config(format!(
                "data has sequence length {}, config says {}",
                train.seq_len(),
                config.dataset.seq_len()
            )));
        }
        if config.batch_size > train.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} training samples",
                config.batch_size,
                train.len()
            )));
        }
        let d = config.diffusion;
        Ok(Trainer {
            schedule: NoiseSchedule::linear(d.steps, d.beta_start, d.beta_end)?,
            rngs: rngs.unwrap_or_else(|| TrainRngs::new(config.seed)),
            config,
            models,
            optimizers,
            progress,
            policy: TermPolicy::Omit,
            train,
        })
    }

    pub fn with_policy(mut self, policy: TermPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn train_data(&self) -> &Dataset {
        &self.train
    }

    /// Epochs a stage runs for; zero for a stage the ablation removes.
    pub fn planned_epochs(&self, stage: Stage) -> usize {
        let e = self.config.epochs;
        match stage {
            Stage::Supervisor if self.config.ablation.disable_asl => 0,
            Stage::Supervisor => e.stage1,
            Stage::Diffusion => e.stage2,
            Stage::Joint => e.stage3,
        }
    }

    pub fn completed_epochs(&self, stage: Stage) -> usize {
        self.progress.epochs[stage.index()]
    }

    pub fn stage_complete(&self, stage: Stage) -> bool {
        self.completed_epochs(stage) >= self.planned_epochs(stage)
    }

    /// Runs the next epoch of `stage` and returns its log rows: the epoch
    /// row, preceded by the baseline row when this is the stage's first
    /// epoch. Returns no rows once the stage is complete.
    pub fn run_epoch(&mut self, stage: Stage) -> Result<Vec<LogRow>> {
        if self.stage_complete(stage) {
            return Ok(Vec::new());
        }
        let epoch = self.completed_epochs(stage) + 1;
        let mut rows = Vec::with_capacity(2);
        if epoch == 1 {
            if let Some(b) = self.baseline(stage)? {
                rows.push(b);
            }
        }
        let means = match stage {
            Stage::Supervisor => self.supervisor_epoch()?,
            Stage::Diffusion => self.diffusion_epoch()?,
            Stage::Joint => self.joint_epoch()?,
        };
        self.progress.epochs[stage.index()] = epoch;
        rows.push(means.row(stage, epoch, self.stage_steps(stage, epoch)));
        self.progress.log_rows += rows.len() as u64;
        Ok(rows)
    }

    /// Runs every remaining epoch of `stage`, calling `each` after every
    /// epoch with the new rows.
    pub fn run_stage(&mut self, stage: Stage, mut each: impl FnMut(&Trainer, &[LogRow]) -> Result<()>) -> Result<()> {
        while !self.stage_complete(stage) {
            let rows = self.run_epoch(stage)?;
            each(self, &rows)?;
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len() / self.config.batch_size
    }

    fn stage_steps(&self, _stage: Stage, epochs: usize) -> u64 {
        (epochs * self.steps_per_epoch()) as u64
    }

    /// Loss of the untrained networks, logged as epoch 0.
    fn baseline(&self, stage: Stage) -> Result<Option<LogRow>> {
        let mut m = Means { n: 1, ..Means::default() };
        match stage {
            Stage::Supervisor => {
                let v = self.supervisor_ar_baseline()?;
                m.add(LOSS, v);
                m.add(AR, v);
            }
            Stage::Diffusion => {
                let v = self.ddpm_baseline()?;
                m.add(LOSS, v);
                m.add(DDPM, v);
            }
            Stage::Joint => return Ok(None),
        }
        Ok(Some(m.row(stage, 0, 0)))
    }

    /// Teacher-forced last-delta AR loss of the current supervisor over the
    /// whole training set.
    pub fn supervisor_ar_baseline(&self) -> Result<f64> {
        let sup = &self.models.supervisor;
        let f = |x: &Tensor| sup.supervise(x);
        self.chunked_mean(|x| ar_loss(&f, x, x, self.config.delta, ArWindow::LastDelta))
    }

    /// Noise-prediction loss of the current denoiser over the whole training
    /// set, with noise from a dedicated stream.
    pub fn ddpm_baseline(&self) -> Result<f64> {
        let mut rng = Rng::with_stream(self.config.seed, streams::BASELINE);
        self.chunked_mean(|x| self.schedule.ddpm_loss(&self.models.denoiser, x, &mut rng))
    }

    fn chunked_mean(&self, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<f64> {
        let _ng = no_grad();
        let n = self.train.len();
        let mut acc = 0.0;
        let mut start = 0;
        while start < n {
            let len = EVAL_CHUNK.min(n - start);
            let idx: Vec<usize> = (start..start + len).collect();
            acc += f(&self.train.gather(&idx)?)?.item() * len as f64;
            start += len;
        }
        Ok(acc / n as f64)
    }


    fn supervisor_epoch(&mut self) -> Result<Means> {
        let order = epoch_batches(self.train.len(), self.config.batch_size, &mut self.rngs.supervisor_batches)?;
        let mut m = Means::default();
        for idx in order {
            let x = self.train.gather(&idx)?;
            let sup = &self.models.supervisor;
            let f = |x: &Tensor| sup.supervise(x);
            let loss = ar_loss(&f, &x, &x, self.config.delta, ArWindow::LastDelta)?;
            let v = loss.item();
            diverged("ar", self.optimizers[0].step_count() + 1, v)?;
            let grads = backward(&loss, sup.params.tensors())?;
            self.optimizers[0].step(&mut self.models.supervisor.params, &grads)?;
            m.n += 1;
            m.add(LOSS, v);
            m.add(AR, v);
        }
        Ok(m)
    }

    fn diffusion_epoch(&mut self) -> Result<Means> {
        let order = epoch_batches(self.train.len(), self.config.batch_size, &mut self.rngs.diffusion_batches)?;
        let mut m = Means::default();
        for idx in order {
            let x = self.train.gather(&idx)?;
            let den = &self.models.denoiser;
            let loss = self.schedule.ddpm_loss(den, &x, &mut self.rngs.diffusion_noise)?;
            let v = loss.item();
            diverged("ddpm", self.optimizers[1].step_count() + 1, v)?;
            let grads = backward(&loss, den.params.tensors())?;
            self.optimizers[1].step(&mut self.models.denoiser.params, &grads)?;
            m.n += 1;
            m.add(LOSS, v);
            m.add(DDPM, v);
        }
        Ok(m)
    }

    fn joint_epoch(&mut self) -> Result<Means> {
        let order = epoch_batches(self.train.len(), self.config.batch_size, &mut self.rngs.joint_batches)?;
        let mut m = Means::default();
        for idx in order {
            let x = self.train.gather(&idx)?;
            self.joint_step(&x, &mut m)?;
            m.n += 1;
        }
        Ok(m)
    }

    fn joint_step(&mut self, x0: &Tensor, m: &mut Means) -> Result<()> {
        let cfg = &self.config;
        let weights = cfg.effective_weights();
        let keep_all = self.policy == TermPolicy::ZeroWeighted;
        let asl = !cfg.ablation.disable_asl;
        let delta = cfg.delta;
        let step = self.optimizers[1].step_count() + 1;

        let terms = self
            .schedule
            .ddpm_terms(&self.models.denoiser, x0, &mut self.rngs.joint_noise)?;
        diverged("ddpm", step, terms.loss.item())?;
        let x0_hat = self.schedule.predict_x0_from_eps(&terms.x_tau, &terms.taus, &terms.eps_hat)?;
        let x_sup = if asl {
            refine(&self.models.supervisor, &x0_hat, delta)?
        } else {
            x0_hat.clone()
        };

        if !cfg.ablation.disable_wc || keep_all {
            let fake = x_sup.detach();
            for _ in 0..cfg.critic_updates_per_step {
                let critic = &self.models.critic;
                let f = |x: &Tensor| critic.score(x);
                let ct = critic_loss(&f, x0, &fake, weights.gp_lambda, &mut self.rngs.critic)?;
                diverged("critic", step, ct.loss.item())?;
                let grads = backward(&ct.loss, critic.params.tensors())?;
                self.optimizers[2].step(&mut self.models.critic.params, &grads)?;
                let k = cfg.critic_updates_per_step as f64;
                m.add(CRITIC, ct.loss.item() / k);
                m.add(CRITIC_W, ct.wasserstein / k);
                m.add(CRITIC_GP, ct.penalty / k);
            }
        }

        let keep = |lambda: f64| keep_all || lambda != 0.0;
        let sup = &self.models.supervisor;
        let sup_fn = |x: &Tensor| sup.supervise(x);
        let ar = if keep(weights.lambda_ar) {
            let t = ar_loss(&sup_fn, x0, &x0_hat, delta, ArWindow::Full)?;
            diverged("ar", step, t.item())?;
            Some(t)
        } else {
            None
        };
        let mmd = if keep(weights.lambda_mmd) {
            let sigma = match cfg.mmd_sigma {
                Some(s) => s,
                None => median_bandwidth(x0, &x_sup.detach())?,
            };
            let t = mmd_rbf(x0, &x_sup, sigma)?;
            diverged("mmd", step, t.item())?;
            Some(t)
        } else {
            None
        };
        let critic = &self.models.critic;
        let critic_fn = |x: &Tensor| critic.score(x);
        let w = if keep(weights.lambda_w) {
            let t = generator_w_term(&critic_fn, &x_sup)?;
            diverged("w", step, t.item())?;
            Some(t)
        } else {
            None
        };
        let parts = LossParts {
            ddpm: terms.loss,
            ar,
            mmd,
            w,
        };
        let total = if keep_all {
            let mut total = parts.ddpm.clone();
            for (lambda, term) in [
                (weights.lambda_ar, &parts.ar),
                (weights.lambda_mmd, &parts.mmd),
                (weights.lambda_w, &parts.w),
            ] {
                if let Some(t) = term {
                    total = total.add(&t.scale(lambda)?)?;
                }
            }
            total
        } else {
            total_loss(&parts, &weights)?
        };
        diverged("total", step, total.item())?;

        let train_sup = asl || parts.ar.is_some();
        let mut leaves = self.models.denoiser.params.tensors().to_vec();
        if train_sup {
            leaves.extend_from_slice(self.models.supervisor.params.tensors());
        }
        let grads = backward(&total, &leaves)?;
        self.optimizers[1].step(&mut self.models.denoiser.params, &grads)?;
        if train_sup {
            self.optimizers[0].step(&mut self.models.supervisor.params, &grads)?;
        }

        m.add(LOSS, total.item());
        m.add(DDPM, parts.ddpm.item());
        for (slot, t) in [(AR, &parts.ar), (MMD, &parts.mmd), (W, &parts.w)] {
            if let Some(t) = t {
                m.add(slot, t.item());
            }
        }
        Ok(())
    }
}

/// Samples from the trained generator: reverse chain, supervisor
/// refinement (unless the supervisor is ablated), clipping to `[0, 1]`.
/// Draws in chunks of at most `chunk` sequences; the result depends on the
/// chunk size only through the order of random draws.
pub fn generate(config: &RunConfig, schedule: &NoiseSchedule, models: &Models, n: usize, rng: &mut Rng) -> Result<Tensor> {
    const CHUNK: usize = 256;
    let _ng = no_grad();
    let tc = models.denoiser.config();
    let (t, f) = (tc.seq_len, tc.features);
    let mut data = Vec::with_capacity(n * t * f);
    let mut done = 0;
    while done < n {
        let b = CHUNK.min(n - done);
        let x0 = schedule.sample_loop(&models.denoiser, &[b, t, f], rng)?;
        let out = if config.ablation.disable_asl {
            x0
        } else {
            refine(&models.supervisor, &x0, config.delta)?
        };
        data.extend(out.data().iter().map(|v| v.clamp(0.0, 1.0)));
        done += b;
    }
    Tensor::new(data, &[n, t, f])
}
