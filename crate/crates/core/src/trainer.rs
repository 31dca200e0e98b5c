//! Unsupervised training loop, checkpointing and resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedTensor, RngState, CHECKPOINT_VERSION};
use crate::datasets::batching::batch_indices;
use crate::datasets::{pair_marginals, BatchMode, ChannelStats, Image, ImageBatch};
use crate::error::{Error, Result};
use crate::mi_objectives::{iic_mi_loss, mi_step_loss, score_summary, AssignmentMode, EstimatorKind, PairTransform};
use crate::network::{batch_tensor, Network, NetworkConfig, Precision};
use crate::optim::Adam;
use crate::segmenter::{class_scores, prob_volume, ClassProbVolume, DEFAULT_TEMPERATURE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Local-to-global MI with a neural estimator.
    #[default]
    Infoseg,
    /// Discrete MI between class distributions of two views of each image.
    IicMi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub name: String,
    pub objective: Objective,
    pub estimator: EstimatorKind,
    pub assignment: AssignmentMode,
    pub lr: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub block_a_widths: [usize; 4],
    pub block_b_stages: usize,
    pub precision: Precision,
    pub max_steps: u64,
    pub seed: u64,
    /// 0 disables intermediate checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    /// Standardize inputs with per-channel statistics of the training set.
    pub standardize: bool,
    /// Largest translation of the second view, in feature cells.
    pub iic_max_shift: i32,
    pub iic_jitter: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        Self {
            name: "infoseg".into(),
            objective: Objective::Infoseg,
            estimator: EstimatorKind::Jsd,
            assignment: AssignmentMode::Soft,
            lr: 1e-4,
            batch_size: 64,
            temperature: DEFAULT_TEMPERATURE,
            feature_dim: net.feature_dim,
            num_classes: net.num_classes,
            block_a_widths: net.block_a_widths,
            block_b_stages: net.block_b_stages,
            precision: Precision::F32,
            max_steps: 10_000,
            seed: 0,
            checkpoint_every: 1_000,
            standardize: true,
            iic_max_shift: 1,
            iic_jitter: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2 to form marginal pairs, got {}",
                self.batch_size
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Config(format!(
                "run name '{}' is not a plain directory name",
                self.name
            )));
        }
        if self.iic_max_shift < 0 || !(0.0..1.0).contains(&self.iic_jitter) {
            return Err(Error::Config("IIC shift must be >= 0 and jitter in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn network_config(&self, in_channels: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels,
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            block_a_widths: self.block_a_widths,
            block_b_stages: self.block_b_stages,
            init_seed: self.seed,
            precision: self.precision,
        }
    }

    /// True when `other` describes the same run up to its length and checkpoint cadence.
    pub fn resumable_from(&self, other: &TrainConfig) -> bool {
        let mut a = self.clone();
        a.max_steps = other.max_steps;
        a.checkpoint_every = other.checkpoint_every;
        a == *other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    /// Estimator joint term, or I(y; y') for the IIC objective.
    pub joint_term: f64,
    pub marginal_term: Option<f64>,
    pub marginal_entropy: Option<f64>,
    pub conditional_entropy: Option<f64>,
    pub wall_ms: f64,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(state: &RngState) -> Result<ChaCha8Rng> {
    let pos: u128 = state
        .word_pos
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad RNG position '{}'", state.word_pos)))?;
    let mut rng = ChaCha8Rng::from_seed(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Image order for the given step: a fresh seeded shuffle per epoch, last partial batch dropped.
pub fn batch_for_step(n: usize, batch_size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if n < batch_size {
        return Err(Error::Config(format!(
            "training set has {n} images, fewer than one batch of {batch_size}"
        )));
    }
    let per_epoch = (n / batch_size) as u64;
    let epoch = step / per_epoch;
    let epoch_seed = seed ^ (epoch + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut groups = batch_indices(n, batch_size, epoch_seed, BatchMode::Train)?;
    Ok(groups.swap_remove((step % per_epoch) as usize))
}

pub struct Trainer {
    config: TrainConfig,
    network: Network,
    vars: Vec<Var>,
    optimizer: Adam,
    stats: ChannelStats,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, in_channels: usize, stats: ChannelStats) -> Result<Self> {
        config.validate()?;
        if stats.mean.len() != in_channels {
            return Err(Error::Shape(format!(
                "statistics cover {} channels, images have {in_channels}",
                stats.mean.len()
            )));
        }
        let network = Network::init(&config.network_config(in_channels))?;
        let vars = network.vars();
        let optimizer = Adam::new(config.lr, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            network,
            vars,
            optimizer,
            stats,
            rng,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.train_config.validate()?;
        let network = ckpt.network()?;
        let named = network.named_vars();
        let moments = |saved: &[NamedTensor]| -> Result<Vec<Tensor>> {
            if saved.len() != named.len() {
                return Err(Error::Checkpoint(
                    "optimizer state does not cover every parameter".into(),
                ));
            }
            named
                .iter()
                .zip(saved)
                .map(|((name, var), t)| {
                    if *name != t.name || var.dims() != t.shape.as_slice() {
                        return Err(Error::Checkpoint(format!(
                            "optimizer moment {} does not fit {name}",
                            t.name
                        )));
                    }
                    Ok(t.to_tensor()?.to_dtype(var.dtype())?)
                })
                .collect()
        };
        let optimizer = Adam::from_state(
            ckpt.train_config.lr,
            ckpt.optimizer_steps,
            moments(&ckpt.first_moments)?,
            moments(&ckpt.second_moments)?,
        );
        Ok(Self {
            config: ckpt.train_config.clone(),
            vars: network.vars(),
            network,
            optimizer,
            stats: ckpt.stats.clone(),
            rng: restore_rng(&ckpt.rng)?,
            step: ckpt.step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Overrides the step budget, e.g. to extend a resumed run.
    pub fn set_max_steps(&mut self, max_steps: u64) {
        self.config.max_steps = max_steps;
    }

    pub fn train_step(&mut self, batch: &ImageBatch) -> Result<StepRecord> {
        let started = Instant::now();
        let x = batch_tensor(batch, &self.stats, self.config.precision)?;
        self.network.config().check_input(x.dims())?;
        let b = batch.len();
        let (loss, mut record) = match self.config.objective {
            Objective::Infoseg => {
                let pairing = pair_marginals(b, &mut self.rng)?;
                let (local, global) = self.network.forward_train(&x)?;
                let volume = prob_volume(&class_scores(&local, &global)?, self.config.temperature)?;
                let out = mi_step_loss(
                    &local,
                    &volume,
                    &global,
                    &pairing,
                    self.config.assignment,
                    self.config.estimator,
                )?;
                if !out.report.total.is_finite() {
                    let (jmin, jmax, jmean) = score_summary(&out.joint_scores)?;
                    let (mmin, mmax, mmean) = score_summary(&out.marginal_scores)?;
                    return Err(Error::Numerical(format!(
                        "non-finite loss at step {}: joint term {}, marginal term {}; \
                         joint scores min {jmin:.4e} max {jmax:.4e} mean {jmean:.4e}; \
                         marginal scores min {mmin:.4e} max {mmax:.4e} mean {mmean:.4e}",
                        self.step, out.report.joint_term, out.report.marginal_term
                    )));
                }
                let record = StepRecord {
                    step: 0,
                    loss: out.report.total,
                    joint_term: out.report.joint_term,
                    marginal_term: Some(out.report.marginal_term),
                    marginal_entropy: None,
                    conditional_entropy: None,
                    wall_ms: 0.0,
                };
                (out.loss, record)
            }
            Objective::IicMi => {
                let c = x.dim(1)?;
                let transform =
                    PairTransform::sample(&mut self.rng, c, self.config.iic_max_shift, self.config.iic_jitter);
                let cell = self.network.config().downsampling();
                let both = Tensor::cat(&[&x, &transform.apply(&x, cell)?], 0)?;
                let (local, global) = self.network.forward_train(&both)?;
                let volume = prob_volume(&class_scores(&local, &global)?, self.config.temperature)?;
                let grid = volume.grid();
                let tau = volume.temperature();
                let first = ClassProbVolume::from_probs(volume.tensor().narrow(0, 0, b)?, grid, tau)?;
                let second = ClassProbVolume::from_probs(volume.tensor().narrow(0, b, b)?, grid, tau)?;
                let (loss, report) = iic_mi_loss(&first, &transform.align(&second)?)?;
                if !report.mutual_information.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite IIC objective at step {}: H(y) {}, H(y|y') {}",
                        self.step, report.marginal_entropy, report.conditional_entropy
                    )));
                }
                let record = StepRecord {
                    step: 0,
                    loss: -report.mutual_information,
                    joint_term: report.mutual_information,
                    marginal_term: None,
                    marginal_entropy: Some(report.marginal_entropy),
                    conditional_entropy: Some(report.conditional_entropy),
                    wall_ms: 0.0,
                };
                (loss, record)
            }
        };
        let grads = loss.backward()?;
        self.optimizer.step(&self.vars, &grads)?;
        self.step += 1;
        record.step = self.step;
        record.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(record)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let named = self.network.named_vars();
        let params = named
            .iter()
            .map(|(name, var)| NamedTensor::from_tensor(name.clone(), var.as_tensor()))
            .collect::<Result<Vec<_>>>()?;
        let buffers = self
            .network
            .named_buffers()
            .iter()
            .map(|(name, t)| NamedTensor::from_tensor(name.clone(), t))
            .collect::<Result<Vec<_>>>()?;
        let (first, second) = self.optimizer.moments();
        let wrap = |ts: &[Tensor]| -> Result<Vec<NamedTensor>> {
            named
                .iter()
                .zip(ts)
                .map(|((name, _), t)| NamedTensor::from_tensor(name.clone(), t))
                .collect()
        };
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            train_config: self.config.clone(),
            network_config: self.network.config().clone(),
            step: self.step,
            stats: self.stats.clone(),
            rng: rng_state(&self.rng),
            params,
            buffers,
            optimizer_steps: self.optimizer.steps_taken(),
            first_moments: wrap(first)?,
            second_moments: wrap(second)?,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub run_dir: PathBuf,
    /// Continue from the newest checkpoint in `run_dir` if one exists.
    pub resume: bool,
    /// Print one line per this many steps through the `log` facade; 0 is silent.
    pub log_every: u64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub records: Vec<StepRecord>,
    pub resumed_from: Option<u64>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("step-{step:08}.ckpt"))
}

/// Newest `step-*.ckpt` in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    if !run_dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(run_dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let step = name
            .strip_prefix("step-")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(s, _)| step > *s) {
                best = Some((step, path));
            }
        }
    }
    Ok(best)
}

fn read_records(path: &Path, up_to: u64) -> Result<Vec<StepRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let record: StepRecord = serde_json::from_str(line)?;
        if record.step <= up_to {
            out.push(record);
        }
    }
    Ok(out)
}

fn write_records(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Trains on unlabeled images until `config.max_steps`, checkpointing into `options.run_dir`.
pub fn fit(images: &[Image], config: &TrainConfig, options: &FitOptions) -> Result<FitOutcome> {
    config.validate()?;
    let first = images
        .first()
        .ok_or_else(|| Error::Config("no training images".into()))?;
    let channels = first.channels();
    fs::create_dir_all(&options.run_dir)?;
    let metrics_path = options.run_dir.join(METRICS_FILE);

    let mut resumed_from = None;
    let (mut trainer, mut records) = match latest_checkpoint(&options.run_dir)? {
        Some((step, path)) if options.resume => {
            let ckpt = Checkpoint::load(&path)?;
            if !config.resumable_from(&ckpt.train_config) {
                return Err(Error::Config(format!(
                    "{} was written with a different configuration",
                    path.display()
                )));
            }
            let mut trainer = Trainer::from_checkpoint(&ckpt)?;
            trainer.set_max_steps(config.max_steps);
            trainer.config.checkpoint_every = config.checkpoint_every;
            resumed_from = Some(step);
            (trainer, read_records(&metrics_path, step)?)
        }
        Some((_, path)) => {
            return Err(Error::Config(format!(
                "run directory already holds {}; resume or pick a new run",
                path.display()
            )))
        }
        None => {
            let stats = if config.standardize {
                ChannelStats::compute(images)?
            } else {
                ChannelStats::identity(channels)
            };
            (Trainer::new(config.clone(), channels, stats)?, Vec::new())
        }
    };
    write_records(&metrics_path, &records)?;

    if trainer.step() == 0 && config.max_steps == 0 {
        let path = checkpoint_path(&options.run_dir, 0);
        trainer.to_checkpoint()?.save(&path)?;
        return Ok(FitOutcome {
            final_checkpoint: path,
            records,
            resumed_from,
        });
    }

    let mut metrics = fs::OpenOptions::new().append(true).open(&metrics_path)?;
    let mut last_saved = resumed_from;
    while trainer.step() < config.max_steps {
        let idx = batch_for_step(images.len(), config.batch_size, config.seed, trainer.step())?;
        let refs: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
        let record = trainer.train_step(&ImageBatch::from_images(&refs)?)?;
        writeln!(metrics, "{}", serde_json::to_string(&record)?)?;
        if options.log_every > 0 && record.step % options.log_every == 0 {
            log::info!(
                "step {} loss {:.5} ({:.0} ms)",
                record.step,
                record.loss,
                record.wall_ms
            );
        }
        let step = record.step;
        records.push(record);
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            trainer
                .to_checkpoint()?
                .save(&checkpoint_path(&options.run_dir, step))?;
            last_saved = Some(step);
        }
    }
    let final_step = trainer.step();
    let path = checkpoint_path(&options.run_dir, final_step);
    if last_saved != Some(final_step) {
        trainer.to_checkpoint()?.save(&path)?;
    }
    Ok(FitOutcome {
        final_checkpoint: path,
        records,
        resumed_from,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, SyntheticSceneConfig};

    fn images(n: usize) -> Vec<Image> {
        let cfg = SyntheticSceneConfig {
            height: 16,
            width: 16,
            ..Default::default()
        };
        generate_synthetic(&cfg, n)
            .unwrap()
            .items
            .into_iter()
            .map(|a| a.image)
            .collect()
    }

    fn tiny() -> TrainConfig {
        TrainConfig {
            name: "tiny".into(),
            lr: 1e-3,
            batch_size: 4,
            feature_dim: 8,
            num_classes: 2,
            block_a_widths: [4, 6, 8, 8],
            block_b_stages: 1,
            max_steps: 6,
            checkpoint_every: 3,
            ..Default::default()
        }
    }

    fn params(trainer: &Trainer) -> Vec<f32> {
        trainer
            .to_checkpoint()
            .unwrap()
            .params
            .iter()
            .flat_map(|t| match &t.data {
                crate::checkpoint::TensorData::F32(v) => v.clone(),
                crate::checkpoint::TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let data = images(8);
        let config = TrainConfig { lr: 0.0, ..tiny() };
        let mut trainer = Trainer::new(config, 3, ChannelStats::compute(&data).unwrap()).unwrap();
        let before = params(&trainer);
        let refs: Vec<&Image> = data.iter().take(4).collect();
        trainer.train_step(&ImageBatch::from_images(&refs).unwrap()).unwrap();
        assert_eq!(before, params(&trainer));
        assert_eq!(trainer.step(), 1);
    }

    #[test]
    fn every_objective_variant_takes_a_step() {
        let data = images(4);
        let refs: Vec<&Image> = data.iter().collect();
        let batch = ImageBatch::from_images(&refs).unwrap();
        for (objective, estimator, assignment) in [
            (Objective::Infoseg, EstimatorKind::Jsd, AssignmentMode::Soft),
            (Objective::Infoseg, EstimatorKind::Jsd, AssignmentMode::Hard),
            (Objective::Infoseg, EstimatorKind::Dv, AssignmentMode::Soft),
            (Objective::Infoseg, EstimatorKind::Dv, AssignmentMode::Hard),
            (Objective::IicMi, EstimatorKind::Jsd, AssignmentMode::Soft),
        ] {
            let config = TrainConfig {
                objective,
                estimator,
                assignment,
                ..tiny()
            };
            let mut trainer = Trainer::new(config, 3, ChannelStats::identity(3)).unwrap();
            let before = params(&trainer);
            let record = trainer.train_step(&batch).unwrap();
            assert!(record.loss.is_finite());
            assert_ne!(before, params(&trainer), "{objective:?} {estimator} {assignment}");
            if objective == Objective::IicMi {
                assert!(record.marginal_term.is_none());
                assert!(record.marginal_entropy.unwrap() <= (2f64).ln() + 1e-9);
            }
        }
    }

    #[test]
    fn batch_schedule_covers_each_epoch_once() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_for_step(22, 4, 9, s).unwrap()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 20);
        assert_ne!(
            batch_for_step(22, 4, 9, 0).unwrap(),
            batch_for_step(22, 4, 9, 5).unwrap()
        );
        assert!(batch_for_step(3, 4, 0, 0).is_err());
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let data = images(12);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let run = |dir: &Path| {
            let out = fit(
                &data,
                &tiny(),
                &FitOptions {
                    run_dir: dir.into(),
                    ..Default::default()
                },
            )
            .unwrap();
            Checkpoint::load(&out.final_checkpoint).unwrap()
        };
        let (ca, cb) = (run(a.path()), run(b.path()));
        assert_eq!(ca.param_bytes(), cb.param_bytes());
        assert_eq!(ca.step, 6);
        assert!(checkpoint_path(a.path(), 3).exists());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = images(12);
        let full = tempfile::tempdir().unwrap();
        let split = tempfile::tempdir().unwrap();
        let reference = fit(
            &data,
            &tiny(),
            &FitOptions {
                run_dir: full.path().into(),
                ..Default::default()
            },
        )
        .unwrap();

        let half = TrainConfig { max_steps: 3, ..tiny() };
        fit(
            &data,
            &half,
            &FitOptions {
                run_dir: split.path().into(),
                ..Default::default()
            },
        )
        .unwrap();
        let resumed = fit(
            &data,
            &tiny(),
            &FitOptions {
                run_dir: split.path().into(),
                resume: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.resumed_from, Some(3));
        assert_eq!(resumed.records.len(), 6);
        for (x, y) in reference.records.iter().zip(&resumed.records) {
            assert!((x.loss - y.loss).abs() < 1e-6, "{} vs {}", x.loss, y.loss);
        }
        let a = Checkpoint::load(&reference.final_checkpoint).unwrap().param_bytes();
        let b = Checkpoint::load(&resumed.final_checkpoint).unwrap().param_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn existing_run_needs_resume_flag() {
        let data = images(8);
        let dir = tempfile::tempdir().unwrap();
        let opts = FitOptions {
            run_dir: dir.path().into(),
            ..Default::default()
        };
        let config = TrainConfig { max_steps: 1, ..tiny() };
        fit(&data, &config, &opts).unwrap();
        assert!(matches!(fit(&data, &config, &opts), Err(Error::Config(_))));
        let other = TrainConfig {
            lr: 0.5,
            max_steps: 2,
            ..tiny()
        };
        let resume = FitOptions { resume: true, ..opts };
        assert!(matches!(fit(&data, &other, &resume), Err(Error::Config(_))));
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint() {
        let data = images(4);
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig { max_steps: 0, ..tiny() };
        let out = fit(
            &data,
            &config,
            &FitOptions {
                run_dir: dir.path().into(),
                ..Default::default()
            },
        )
        .unwrap();
        let ckpt = Checkpoint::load(&out.final_checkpoint).unwrap();
        assert_eq!(ckpt.step, 0);
        let fresh = Network::init(&config.network_config(3)).unwrap();
        let expected: Vec<NamedTensor> = fresh
            .named_vars()
            .iter()
            .map(|(n, v)| NamedTensor::from_tensor(n.clone(), v.as_tensor()).unwrap())
            .collect();
        assert_eq!(ckpt.params, expected);
    }

    #[test]
    fn loss_falls_when_overfitting_one_batch() {
        let data = images(4);
        let refs: Vec<&Image> = data.iter().collect();
        let batch = ImageBatch::from_images(&refs).unwrap();
        let config = TrainConfig { lr: 1e-2, ..tiny() };
        let mut trainer = Trainer::new(config, 3, ChannelStats::compute(&data).unwrap()).unwrap();
        let losses: Vec<f64> = (0..40).map(|_| trainer.train_step(&batch).unwrap().loss).collect();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[35..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss went from {head} to {tail}");
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            TrainConfig {
                batch_size: 1,
                ..tiny()
            },
            TrainConfig { lr: f64::NAN, ..tiny() },
            TrainConfig {
                temperature: 0.0,
                ..tiny()
            },
            TrainConfig {
                name: "../x".into(),
                ..tiny()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn config_parses_with_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"estimator": "dv", "assignment": "hard"}"#).unwrap();
        assert_eq!(c.estimator, EstimatorKind::Dv);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.batch_size, 64);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr_typo": 1}"#).is_err());
    }
}
