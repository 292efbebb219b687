use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use super::adam::{adam_step, AdamState};
use super::config::{TrainConfig, TrainMode};
use super::log::{EpochRecord, StepRecord, TrainLog};
use super::TrainError;
use crate::datakit::{Batch, BatchStream, DatasetManifest, ImageRgb8, Split};
use crate::losses::{
    adversarial_pair_with_grad, build_feature_extractor, generator_total_loss, FeatureExtractor, LossTerms,
};
use crate::metrics::{psnr, ssim};
use crate::model::{
    build_discriminator, build_generator, condition_from_lr, Discriminator, DiscriminatorConfig, Generator,
    GeneratorConfig, Tape,
};
use crate::tensor::{BnMode, Tensor4};

/// Consecutive fully saturated discriminator steps that abort a run.
pub const COLLAPSE_STEPS: usize = 100;

const DISCRIMINATOR_SEED_MIX: u64 = 0xD15C_0000;
const BATCH_SEED_MIX: u64 = 0xBA7C_0000;

/// Discriminator losses and mean outputs of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorStats {
    pub d_loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
    /// Every output was exactly 0 or 1.
    pub saturated: bool,
}

/// Models, optimiser state and step counter of one run.
pub struct Trainer {
    config: TrainConfig,
    generator: Generator<f32>,
    g_state: AdamState,
    discriminator: Option<Discriminator<f32>>,
    d_state: AdamState,
    extractor: FeatureExtractor<f32>,
    step: usize,
    saturated_run: usize,
}

fn trainable_sizes(state: Vec<crate::model::StateEntry<'_, f32>>) -> Vec<usize> {
    state.iter().filter(|e| e.trainable).map(|e| e.values.len()).collect()
}

fn map_stats(map: &Tensor4<f32>) -> (f64, bool) {
    let d = map.data();
    let mean = d.iter().map(|&v| f64::from(v)).sum::<f64>() / d.len() as f64;
    (mean, d.iter().all(|&v| v == 0.0 || v == 1.0))
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let exp = config.scale_exp();
        let g_cfg = if config.tiny {
            GeneratorConfig::tiny(exp)
        } else {
            GeneratorConfig::full(exp)
        };
        let generator = build_generator(&g_cfg, config.seed)?;
        let g_state = AdamState::new(trainable_sizes(generator.net().state()));
        let discriminator = match config.mode {
            TrainMode::Gen => None,
            TrainMode::Gan => {
                let d_cfg = if config.tiny {
                    DiscriminatorConfig::tiny()
                } else {
                    DiscriminatorConfig::default()
                };
                Some(build_discriminator(&d_cfg, config.seed ^ DISCRIMINATOR_SEED_MIX)?)
            }
        };
        let d_state = discriminator
            .as_ref()
            .map(|d| AdamState::new(trainable_sizes(d.net().state())))
            .unwrap_or_default();
        let extractor = build_feature_extractor(&config.extractor_source())?;
        Ok(Trainer {
            config: config.clone(),
            generator,
            g_state,
            discriminator,
            d_state,
            extractor,
            step: 0,
            saturated_run: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator<f32> {
        &self.generator
    }

    pub fn discriminator(&self) -> Option<&Discriminator<f32>> {
        self.discriminator.as_ref()
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn adversarial_generator(&self) -> bool {
        self.discriminator.is_some() && self.config.weights.lambda_adv > 0.0
    }

    fn non_finite(&self, what: &str) -> TrainError {
        TrainError::NonFinite {
            step: self.step + 1,
            what: what.to_string(),
        }
    }

    /// Generator update from a recorded forward pass. Both training modes go
    /// through here; the adversarial term is included only in `gan` mode
    /// with a positive `lambda_adv`.
    fn generator_update(
        &mut self,
        batch: &Batch,
        fake: &Tensor4<f32>,
        tape: &Tape<f32>,
    ) -> Result<LossTerms, TrainError> {
        let adversarial = if self.adversarial_generator() {
            let d = self
                .discriminator
                .as_ref()
                .expect("adversarial mode has a discriminator");
            let cond = condition_from_lr(&batch.lr, fake.shape().height, fake.shape().width)?;
            let (validity, d_tape, _) = d.forward_recorded(fake, &cond, BnMode::Infer)?;
            if !validity.is_finite() {
                return Err(self.non_finite("discriminator output in generator step"));
            }
            Some((validity, d_tape))
        } else {
            None
        };
        let loss = generator_total_loss(
            &self.config.weights,
            &self.extractor,
            fake,
            &batch.hr,
            adversarial.as_ref().map(|(v, _)| v),
        )?;
        if !loss.terms.total.is_finite() {
            return Err(self.non_finite(&format!("generator loss {}", loss.terms.total)));
        }
        let mut upstream = loss.d_generated;
        if let (Some((_, d_tape)), Some(d_validity)) = (&adversarial, &loss.d_validity) {
            let d = self
                .discriminator
                .as_ref()
                .expect("adversarial mode has a discriminator");
            let (d_fake, _) = d.backward(d_tape, d_validity, false)?;
            upstream.add_scaled(&d_fake, 1.0)?;
        }
        let grads = self.generator.backward(tape, &upstream)?;
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(self.non_finite("generator gradient"));
        }
        adam_step(
            &mut self.generator.net_mut().params_mut(),
            &grads,
            &mut self.g_state,
            &self.config.adam(),
        )?;
        Ok(loss.terms)
    }

    /// One discriminator update on the real pair and the (detached) generated pair.
    fn discriminator_update(&mut self, batch: &Batch, fake: &Tensor4<f32>) -> Result<DiscriminatorStats, TrainError> {
        let d = self.discriminator.as_ref().expect("gan mode has a discriminator");
        let s = batch.hr.shape();
        let cond = condition_from_lr(&batch.lr, s.height, s.width)?;
        let freeze = self.config.freeze_discriminator;
        let (real_map, fake_map, record) = if freeze {
            (d.forward(&batch.hr, &cond)?, d.forward(fake, &cond)?, None)
        } else {
            // Real and generated samples share one batch-norm batch.
            let candidates = Tensor4::stack(&[batch.hr.clone(), fake.clone()])?;
            let conds = Tensor4::stack(&[cond.clone(), cond])?;
            let (maps, tape, updates) = d.forward_train(&candidates, &conds)?;
            let n = maps.shape().batch / 2;
            let real = Tensor4::stack(&(0..n).map(|i| maps.select(i)).collect::<Vec<_>>())?;
            let gen = Tensor4::stack(&(n..2 * n).map(|i| maps.select(i)).collect::<Vec<_>>())?;
            (real, gen, Some((tape, updates)))
        };
        if !real_map.is_finite() || !fake_map.is_finite() {
            return Err(self.non_finite("discriminator output"));
        }
        let loss = adversarial_pair_with_grad(&real_map, &fake_map)?;
        if let Some((tape, updates)) = record {
            let upstream = Tensor4::stack(&[loss.d_loss_wrt_real.clone(), loss.d_loss_wrt_fake.clone()])?;
            let (_, grads) = d.backward(&tape, &upstream, true)?;
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(self.non_finite("discriminator gradient"));
            }
            let d = self.discriminator.as_mut().expect("gan mode has a discriminator");
            adam_step(
                &mut d.net_mut().params_mut(),
                &grads,
                &mut self.d_state,
                &self.config.adam(),
            )?;
            d.net_mut().apply_bn_updates(&updates)?;
        }
        let (d_real, sat_real) = map_stats(&real_map);
        let (d_fake, sat_fake) = map_stats(&fake_map);
        Ok(DiscriminatorStats {
            d_loss: loss.d_loss,
            d_real,
            d_fake,
            saturated: sat_real && sat_fake,
        })
    }

    /// One training step: in `gan` mode a discriminator update followed by a
    /// generator update, otherwise a generator update only.
    pub fn train_step(&mut self, batch: &Batch, epoch: usize) -> Result<StepRecord, TrainError> {
        let (fake, tape, bn) = self.generator.forward_train(&batch.lr)?;
        if !fake.is_finite() {
            return Err(self.non_finite("generator output"));
        }
        let d_stats = if self.discriminator.is_some() {
            let stats = self.discriminator_update(batch, &fake)?;
            self.saturated_run = if stats.saturated { self.saturated_run + 1 } else { 0 };
            if self.saturated_run >= COLLAPSE_STEPS {
                return Err(TrainError::Collapse { step: self.step + 1 });
            }
            Some(stats)
        } else {
            None
        };
        let terms = self.generator_update(batch, &fake, &tape)?;
        self.generator.net_mut().apply_bn_updates(&bn)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch,
            terms,
            d_loss: d_stats.map(|s| s.d_loss),
            d_real: d_stats.map(|s| s.d_real),
            d_fake: d_stats.map(|s| s.d_fake),
        })
    }

    /// Mean PSNR and SSIM of the current generator over `pairs` of `(lr, hr)` images.
    pub fn validate(&self, pairs: &[(ImageRgb8, ImageRgb8)]) -> Result<Option<(f64, f64)>, TrainError> {
        if pairs.is_empty() {
            return Ok(None);
        }
        let (mut p, mut s) = (0.0, 0.0);
        for (lr, hr) in pairs {
            let out = ImageRgb8::from_tensor(&self.generator.forward(&lr.to_tensor())?, 0)?;
            p += psnr(&out, hr)?;
            s += ssim(&out, hr)?;
        }
        let n = pairs.len() as f64;
        Ok(Some((p / n, s / n)))
    }
}

/// Files and log of a finished run.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Generator checkpoints in the order written; the last is the final one.
    pub checkpoints: Vec<PathBuf>,
    pub discriminator: Option<PathBuf>,
    pub log: TrainLog,
    pub generator: Generator<f32>,
}

/// Generator-only training; the adversarial term is never used.
pub fn train_generative(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: impl AsRef<Path>,
) -> Result<TrainOutcome, TrainError> {
    if config.mode != TrainMode::Gen {
        return Err(TrainError::Config("train_generative needs mode = \"gen\"".into()));
    }
    run(config, manifest, out_dir.as_ref())
}

/// Alternating discriminator / generator training.
pub fn train_adversarial(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: impl AsRef<Path>,
) -> Result<TrainOutcome, TrainError> {
    if config.mode != TrainMode::Gan {
        return Err(TrainError::Config("train_adversarial needs mode = \"gan\"".into()));
    }
    run(config, manifest, out_dir.as_ref())
}

/// Runs whichever mode `config` names.
pub fn train(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: impl AsRef<Path>,
) -> Result<TrainOutcome, TrainError> {
    run(config, manifest, out_dir.as_ref())
}

fn load_pairs(
    manifest: &DatasetManifest,
    split: Split,
    scale: usize,
) -> Result<Vec<(ImageRgb8, ImageRgb8)>, TrainError> {
    manifest
        .pairs(split, scale)?
        .iter()
        .map(|(lr, hr)| Ok((ImageRgb8::load(lr)?, ImageRgb8::load(hr)?)))
        .collect()
}

fn run(config: &TrainConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(config)?;
    let mut batches = BatchStream::new(
        manifest,
        Split::Train,
        config.scale,
        config.batch_size,
        config.seed ^ BATCH_SEED_MIX,
    )?
    .cached();
    let val = load_pairs(manifest, Split::Val, config.scale)?;
    fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;
    let cfg_path = out_dir.join("config.toml");
    fs::write(&cfg_path, config.to_toml()).map_err(|e| TrainError::io(&cfg_path, e))?;

    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    let result = (|| -> Result<(), TrainError> {
        for epoch in 1..=config.epochs {
            for indices in batches.next_order() {
                let batch = batches.load(&indices)?;
                let started = Instant::now();
                let record = trainer.train_step(&batch, epoch)?;
                log.push_step(record, started.elapsed().as_secs_f64() * 1e3)?;
            }
            let scores = trainer.validate(&val)?;
            log.epochs.push(EpochRecord {
                epoch,
                val_psnr: scores.map(|s| s.0),
                val_ssim: scores.map(|s| s.1),
            });
            if let Some(last) = log.steps.last() {
                info!(
                    "epoch {epoch}/{}: step {} total {:.5} global {:.5}{}",
                    config.epochs,
                    last.step,
                    last.terms.total,
                    last.terms.global,
                    scores.map_or(String::new(), |(p, s)| format!(" val psnr {p:.3} ssim {s:.4}"))
                );
            }
            if epoch % config.checkpoint_every == 0 {
                let path = out_dir.join(format!("generator_epoch_{epoch:04}.ckpt"));
                trainer.generator().save(&path)?;
                checkpoints.push(path);
            }
        }
        Ok(())
    })();
    log.write(out_dir)?;
    result?;

    let final_path = out_dir.join("generator_final.ckpt");
    trainer.generator().save(&final_path)?;
    checkpoints.push(final_path);
    let discriminator = match trainer.discriminator() {
        Some(d) => {
            let path = out_dir.join("discriminator_final.ckpt");
            d.save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        checkpoints,
        discriminator,
        log,
        generator: trainer.generator,
    })
}
