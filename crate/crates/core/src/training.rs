//! Two-stage adversarial training with per-sample random gating.
//!
//! Coarse epochs train the global network on 2x average-pooled tiles; fine
//! epochs switch the generator to its full form at patch resolution. Every
//! iteration draws a fresh gate per sample, takes one discriminator step and
//! then one generator step against the updated discriminators.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{avg_pool2, Graph, Tensor};
use crate::checkpoint::{checkpoint_path, write_checkpoint, ModelBundle};
use crate::config::config_hash;
use crate::dataset::{NormStats, PatchRecord};
use crate::discriminator::{build_discriminators, DiscriminatorConfig, Discriminators};
use crate::error::{Error, Result};
use crate::evaluation::{run_missing_one_matrix, SsimParams};
use crate::gating::{batch_mask, gate_tensor, invert, sample_gate, GatePolicy, GateVector};
use crate::generator::{build_generator, ForwardMode, GeneratorConfig, GeneratorState, Stage};
use crate::losses::{
    discriminator_objective_graph, generator_objective_graph, GeneratorLoss, LossConfig,
};
use crate::optim::{Adam, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub resolution: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub checkpoint_every: usize,
    /// Coarse-only epochs; `None` means the first half of the run.
    pub coarse_epochs: Option<usize>,
    pub coarse: StageConfig,
    pub fine: StageConfig,
    pub optimizer: OptimizerConfig,
    /// `None` means random gating with up to `N - 1` closed channels.
    pub gate_policy: Option<GatePolicy>,
    pub loss: LossConfig,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            checkpoint_every: 10,
            coarse_epochs: None,
            coarse: StageConfig {
                resolution: 512,
                batch_size: 4,
            },
            fine: StageConfig {
                resolution: 1024,
                batch_size: 1,
            },
            optimizer: OptimizerConfig::default(),
            gate_policy: None,
            loss: LossConfig::default(),
            seed: 0,
            generator: GeneratorConfig::reference(11),
            discriminator: DiscriminatorConfig::reference(11),
        }
    }
}

impl TrainConfig {
    /// Reduced-width preset for `n`-channel tiles of side `patch`.
    pub fn desk(n: usize, patch: usize, epochs: usize) -> Self {
        TrainConfig {
            epochs,
            checkpoint_every: 10,
            coarse: StageConfig {
                resolution: patch / 2,
                batch_size: 4,
            },
            fine: StageConfig {
                resolution: patch,
                batch_size: 1,
            },
            generator: GeneratorConfig::desk(n),
            discriminator: DiscriminatorConfig::desk(n),
            ..TrainConfig::default()
        }
    }

    pub fn n_channels(&self) -> usize {
        self.generator.n_channels
    }

    pub fn coarse_epochs(&self) -> usize {
        self.coarse_epochs.unwrap_or(self.epochs / 2).min(self.epochs)
    }

    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch <= self.coarse_epochs() {
            Stage::CoarseOnly
        } else {
            Stage::Full
        }
    }

    pub fn resolved_gate_policy(&self) -> GatePolicy {
        self.gate_policy.clone().unwrap_or(GatePolicy::Random {
            max_closed: self.n_channels().saturating_sub(1),
        })
    }

    /// Epochs after which a checkpoint is written: every `checkpoint_every`, plus the last.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        (1..=self.epochs)
            .filter(|&e| e % self.checkpoint_every == 0 || e == self.epochs)
            .collect()
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every must be >= 1"));
        }
        if self.coarse.batch_size == 0 || self.fine.batch_size == 0 {
            return Err(Error::invalid("batch sizes must be >= 1"));
        }
        if self.coarse.resolution * 2 != self.fine.resolution {
            return Err(Error::invalid(format!(
                "coarse resolution {} must be half of fine resolution {}",
                self.coarse.resolution, self.fine.resolution
            )));
        }
        if self.generator.n_channels != self.discriminator.n_channels {
            return Err(Error::invalid("generator and discriminator arities differ"));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.resolved_gate_policy().validate(self.n_channels())?;
        let d = self.generator.divisor();
        if self.fine.resolution % d != 0 || self.fine.resolution < 2 * d {
            return Err(Error::Divisibility {
                height: self.fine.resolution,
                width: self.fine.resolution,
                divisor: d,
            });
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub g_loss: f64,
    pub adv_loss: f64,
    pub fm_loss: f64,
    pub d_loss: f64,
    pub gates: Vec<String>,
}

/// Objective value and parameter gradients; `None` where no gradient flowed.
#[derive(Clone, Debug)]
pub struct ObjectiveGrads {
    pub generator: Vec<Option<Tensor>>,
    pub discriminators: Vec<Vec<Option<Tensor>>>,
}

/// Generator objective for the gated batch and its gradients. Discriminator
/// gradients are only recorded with `disc_trainable`; training keeps them constant.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective_grads(
    gen: &GeneratorState,
    discs: &Discriminators,
    x: &Tensor,
    y_real: &Tensor,
    inverse_gates: &[GateVector],
    mode: ForwardMode,
    loss: &LossConfig,
    disc_trainable: bool,
) -> Result<(GeneratorLoss, ObjectiveGrads)> {
    let mut g = Graph::new();
    let pg = gen.params.bind(&mut g, true);
    let pd = discs.bind(&mut g, disc_trainable);
    let xv = g.constant(x.clone());
    let yv = g.constant(y_real.clone());
    let out = gen.forward_graph(&mut g, &pg, xv, mode)?;
    let fake = g.channel_mask(out, batch_mask(inverse_gates, gen.n_channels())?)?;
    let vars = generator_objective_graph(&mut g, discs, &pd, xv, yv, fake, loss)?;
    let value = GeneratorLoss {
        total: g.value(vars.total).item(),
        adversarial: g.value(vars.adversarial).item(),
        feature_matching: g.value(vars.feature_matching).item(),
    };
    let mut grads = g.backward(vars.total);
    let generator = pg.vars().iter().map(|&v| grads.take(v)).collect();
    let discriminators = pd
        .iter()
        .map(|b| b.vars().iter().map(|&v| grads.take(v)).collect())
        .collect();
    Ok((
        value,
        ObjectiveGrads {
            generator,
            discriminators,
        },
    ))
}

/// Discriminator objective on a real pair and an already synthesized, gated fake.
pub fn discriminator_objective_grads(
    discs: &Discriminators,
    x: &Tensor,
    y_real: &Tensor,
    y_fake: &Tensor,
) -> Result<(f64, Vec<Vec<Option<Tensor>>>)> {
    let mut g = Graph::new();
    let pd = discs.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let yv = g.constant(y_real.clone());
    let fv = g.constant(y_fake.clone());
    let obj = discriminator_objective_graph(&mut g, discs, &pd, xv, yv, fv)?;
    let value = g.value(obj).item();
    let mut grads = g.backward(obj);
    let out = pd
        .iter()
        .map(|b| b.vars().iter().map(|&v| grads.take(v)).collect())
        .collect();
    Ok((value, out))
}

/// Losses of one D-then-G update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub generator: GeneratorLoss,
    pub discriminator: f64,
}

impl StepLosses {
    fn finite(&self) -> bool {
        self.generator.total.is_finite()
            && self.generator.adversarial.is_finite()
            && self.generator.feature_matching.is_finite()
            && self.discriminator.is_finite()
    }
}

/// Per-epoch RNG so that a run resumed at an epoch boundary replays exactly.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Build a fresh bundle: generator and discriminators initialized from the seed.
pub fn init_bundle(
    cfg: &TrainConfig,
    markers: Vec<String>,
    stats: Option<NormStats>,
) -> Result<ModelBundle> {
    cfg.validate()?;
    if markers.len() != cfg.n_channels() {
        return Err(Error::invalid(format!(
            "{} markers for a {}-channel model",
            markers.len(),
            cfg.n_channels()
        )));
    }
    let generator = build_generator(&cfg.generator, cfg.seed)?;
    let discriminators = build_discriminators(&cfg.discriminator, cfg.seed.wrapping_add(1))?;
    let gen_opt = Adam::new(&generator.params);
    let disc_opt = discriminators.scales.iter().map(|s| Adam::new(&s.params)).collect();
    Ok(ModelBundle {
        config_hash: cfg.hash()?,
        train_config: cfg.clone(),
        epoch: 0,
        iteration: 0,
        gate_policy: cfg.resolved_gate_policy(),
        markers,
        stats,
        generator,
        discriminators,
        gen_opt,
        disc_opt,
    })
}

/// What a call to [`Trainer::run`] produced.
#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<(usize, PathBuf)>,
}

pub struct Trainer {
    bundle: ModelBundle,
    ids: Vec<String>,
    full: Vec<Tensor>,
    half: Vec<Tensor>,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    /// Wrap a fresh or resumed bundle around the training patches.
    pub fn new(bundle: ModelBundle, train: &[PatchRecord]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("training patches"));
        }
        let cfg = &bundle.train_config;
        cfg.validate()?;
        let mut full = Vec::with_capacity(train.len());
        for p in train {
            if p.n_channels() != cfg.n_channels() {
                return Err(Error::invalid(format!(
                    "patch {} has {} channels, model expects {}",
                    p.id,
                    p.n_channels(),
                    cfg.n_channels()
                )));
            }
            if p.size() != cfg.fine.resolution {
                return Err(Error::invalid(format!(
                    "patch {} is {} px, fine stage expects {}",
                    p.id,
                    p.size(),
                    cfg.fine.resolution
                )));
            }
            full.push(p.to_tensor());
        }
        let half = full.iter().map(avg_pool2).collect::<Result<_>>()?;
        Ok(Trainer {
            bundle,
            ids: train.iter().map(|p| p.id.clone()).collect(),
            full,
            half,
            out_dir: None,
        })
    }

    /// Write checkpoints, the JSONL log and non-finite dumps under `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> ModelBundle {
        self.bundle
    }

    pub fn is_finished(&self) -> bool {
        self.bundle.epoch >= self.bundle.train_config.epochs
    }

    /// Train until `until_epoch` (default: the configured total) is completed.
    pub fn run(&mut self, until_epoch: Option<usize>) -> Result<TrainOutcome> {
        let total = self.bundle.train_config.epochs;
        let stop = until_epoch.unwrap_or(total).min(total);
        let mut outcome = TrainOutcome::default();
        while self.bundle.epoch < stop {
            let records = self.run_epoch()?;
            self.append_log(&records)?;
            outcome.log.extend(records);
            let e = self.bundle.epoch;
            if let Some(dir) = &self.out_dir {
                if self.bundle.train_config.checkpoint_epochs().contains(&e) {
                    let path = checkpoint_path(dir, e);
                    write_checkpoint(&path, &self.bundle)?;
                    outcome.checkpoints.push((e, path));
                }
            }
        }
        Ok(outcome)
    }

    fn append_log(&self, records: &[LogRecord]) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        fs::create_dir_all(dir)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("train_log.jsonl"))?;
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r)?);
            buf.push('\n');
        }
        f.write_all(buf.as_bytes())?;
        Ok(())
    }

    /// One pass over the training patches.
    pub fn run_epoch(&mut self) -> Result<Vec<LogRecord>> {
        let cfg = self.bundle.train_config.clone();
        let epoch = self.bundle.epoch + 1;
        let stage = cfg.stage_of(epoch);
        if stage == Stage::Full && self.bundle.generator.stage == Stage::CoarseOnly {
            // start the enhancer from an exact copy of the coarse output
            self.bundle.generator.zero_enhancer_head();
            self.bundle.generator.stage = Stage::Full;
        }
        let (mode, batch_size) = match stage {
            Stage::CoarseOnly => (ForwardMode::GlobalNative, cfg.coarse.batch_size),
            Stage::Full => (ForwardMode::Full, cfg.fine.batch_size),
        };
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
        let n = cfg.n_channels();
        let policy = self.bundle.gate_policy.clone();

        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..self.full.len()).collect();
        order.shuffle(&mut rng);

        let mut records = Vec::new();
        for chunk in order.chunks(batch_size) {
            let gates = chunk
                .iter()
                .map(|_| sample_gate(n, &policy, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let source = match stage {
                Stage::CoarseOnly => &self.half,
                Stage::Full => &self.full,
            };
            let items: Vec<Tensor> = chunk.iter().map(|&i| source[i].clone()).collect();
            let batch = Tensor::stack(&items)?;
            let losses = self.step(&batch, &gates, mode, lr)?;
            self.bundle.iteration += 1;
            if !losses.finite() {
                let dump = self.dump_nonfinite(epoch, chunk, &gates, &batch, &losses)?;
                return Err(Error::NonFiniteLoss {
                    epoch,
                    iter: self.bundle.iteration as usize,
                    dump,
                });
            }
            records.push(LogRecord {
                iter: self.bundle.iteration,
                epoch,
                stage,
                lr,
                g_loss: losses.generator.total,
                adv_loss: losses.generator.adversarial,
                fm_loss: losses.generator.feature_matching,
                d_loss: losses.discriminator,
                gates: gates.iter().map(GateVector::to_string).collect(),
            });
        }
        self.bundle.epoch = epoch;
        Ok(records)
    }

    /// One discriminator update followed by one generator update. Parameters
    /// are left untouched when either loss is non-finite.
    fn step(
        &mut self,
        batch: &Tensor,
        gates: &[GateVector],
        mode: ForwardMode,
        lr: f64,
    ) -> Result<StepLosses> {
        let cfg = &self.bundle.train_config;
        let inverse: Vec<GateVector> = gates.iter().map(invert).collect();
        let x = gate_tensor(batch, gates)?;
        let y_real = gate_tensor(batch, &inverse)?;

        let fake = self.bundle.generator.forward_tensor_mode(&x, mode)?;
        let y_fake = gate_tensor(&fake, &inverse)?;
        let (d_loss, d_grads) =
            discriminator_objective_grads(&self.bundle.discriminators, &x, &y_real, &y_fake)?;
        if !d_loss.is_finite() {
            return Ok(StepLosses {
                generator: GeneratorLoss {
                    total: f64::NAN,
                    adversarial: f64::NAN,
                    feature_matching: f64::NAN,
                },
                discriminator: d_loss,
            });
        }
        for ((scale, opt), grads) in self
            .bundle
            .discriminators
            .scales
            .iter_mut()
            .zip(&mut self.bundle.disc_opt)
            .zip(&d_grads)
        {
            opt.step(&mut scale.params, grads, &cfg.optimizer, lr)?;
        }

        let (g_loss, grads) = generator_objective_grads(
            &self.bundle.generator,
            &self.bundle.discriminators,
            &x,
            &y_real,
            &inverse,
            mode,
            &cfg.loss,
            false,
        )?;
        let losses = StepLosses {
            generator: g_loss,
            discriminator: d_loss,
        };
        if losses.finite() {
            self.bundle.gen_opt.step(
                &mut self.bundle.generator.params,
                &grads.generator,
                &cfg.optimizer,
                lr,
            )?;
        }
        Ok(losses)
    }

    fn dump_nonfinite(
        &self,
        epoch: usize,
        chunk: &[usize],
        gates: &[GateVector],
        batch: &Tensor,
        losses: &StepLosses,
    ) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.out_dir else {
            return Ok(None);
        };
        fs::create_dir_all(dir)?;
        let path = dir.join(format!(
            "nonfinite_epoch{epoch}_iter{}.json",
            self.bundle.iteration
        ));
        let dump = serde_json::json!({
            "epoch": epoch,
            "iter": self.bundle.iteration,
            "patch_ids": chunk.iter().map(|&i| self.ids[i].clone()).collect::<Vec<_>>(),
            "gates": gates.iter().map(GateVector::to_string).collect::<Vec<_>>(),
            "g_loss": format!("{}", losses.generator.total),
            "d_loss": format!("{}", losses.discriminator),
            "batch_shape": batch.shape(),
            "batch": batch.data().iter().map(|v| format!("{v}")).collect::<Vec<_>>(),
        });
        fs::write(&path, serde_json::to_vec_pretty(&dump)?)?;
        Ok(Some(path))
    }
}

/// Mean validation SSIM over every single-missing scenario.
pub fn validation_score(bundle: &ModelBundle, val: &[PatchRecord]) -> Result<f64> {
    let report = run_missing_one_matrix(
        &bundle.generator,
        val,
        &bundle.markers,
        &SsimParams::default(),
    )?;
    Ok(report.overall_mean())
}

/// Index of the checkpoint with the best validation score; ties go to the later epoch.
pub fn select_best_checkpoint(
    checkpoints: &[ModelBundle],
    val: &[PatchRecord],
) -> Result<(usize, Vec<f64>)> {
    if checkpoints.is_empty() {
        return Err(Error::Empty("checkpoints"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation patches"));
    }
    let scores = checkpoints
        .iter()
        .map(|c| validation_score(c, val))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for i in 1..scores.len() {
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best] && checkpoints[i].epoch >= checkpoints[best].epoch);
        if better {
            best = i;
        }
    }
    Ok((best, scores))
}

/// Load every checkpoint in `<dir>/ckpt` (sorted by epoch).
pub fn load_run_checkpoints(dir: &Path, expected_hash: Option<&str>) -> Result<Vec<ModelBundle>> {
    crate::checkpoint::list_checkpoints(dir)?
        .iter()
        .map(|(_, p)| crate::checkpoint::read_checkpoint(p, expected_hash))
        .collect()
}
