//! Adam with warmup + cosine schedule, and the training loop over a manifest.

pub mod config;
pub mod data;
pub mod optim;

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

pub use config::{MaskKind, TrainConfig};
pub use data::{assemble_audio, caption_sampler, AudioBatch, BatchRngs, FeatureStore};
pub use optim::{adam_step, clip_grad_norm, lr_at, AdamConfig, OptimizerState};

use crate::audio::{tokenize, FeatureConfig, Manifest, TokenizedCaption, Vocab};
use crate::error::{FlapError, Result};
use crate::masking::{plan, MaskPlan, Mode};
use crate::model::{FlapModel, AUDIO_BLOCKS_SCOPE};
use crate::numerics::{checkpoint, seeded, Bound, Graph, Stream};
use crate::objectives::{combined_loss, info_nce, reconstruction_mse, LossReport, LossVars, MIN_TEMPERATURE};

pub const LOG_HEADER: &str = "step,epoch,lr,contrastive,reconstruction,total,tau";

/// Loss settings shared by training and gradient checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub recon_weight: f64,
    pub symmetric: bool,
}

/// Full forward pass to the combined loss on an existing graph.
pub fn forward_loss(
    model: &FlapModel,
    g: &mut Graph,
    b: &Bound,
    batch: &AudioBatch,
    captions: &[TokenizedCaption],
    plan: &MaskPlan,
    loss: LossConfig,
) -> Result<(LossVars, LossReport)> {
    let tokens = model.audio_tokens(g, b, &batch.input)?;
    let enc = model.encode_audio(g, b, tokens, plan)?;
    let text = model.encode_text(g, b, captions)?;
    let log_tau = b.var("loss.log_tau")?;
    let contrastive = info_nce(g, enc.pooled, text, log_tau, loss.symmetric)?;
    let recon = if loss.recon_weight > 0.0 && !plan.is_keep_all() {
        let rec = model.decode_audio(g, b, enc.per_token, plan)?;
        Some(reconstruction_mse(g, rec, &batch.target, plan)?)
    } else {
        None
    };
    combined_loss(g, contrastive, recon, log_tau, loss.recon_weight)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
    /// Matmul FLOPs in the audio encoder blocks for this step.
    pub encoder_flops: u64,
    pub total_flops: u64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6},{:.6},{:.6},{:.6}",
            self.step,
            self.epoch,
            self.lr,
            self.loss.contrastive,
            self.loss.reconstruction,
            self.loss.total,
            self.loss.temperature
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
    pub skipped: Vec<String>,
}

impl TrainOutcome {
    pub fn totals(&self) -> Vec<f64> {
        self.logs.iter().map(|l| l.loss.total).collect()
    }
}

/// One optimizer step on a prepared batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut FlapModel,
    state: &mut OptimizerState,
    batch: &AudioBatch,
    captions: &[TokenizedCaption],
    plan: &MaskPlan,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(LossReport, u64, u64)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let loss_cfg = LossConfig {
        recon_weight: cfg.recon_weight,
        symmetric: cfg.symmetric_loss,
    };
    let (vars, report) = forward_loss(model, &mut g, &b, batch, captions, plan, loss_cfg)?;
    if !report.total.is_finite() {
        return Err(FlapError::Numeric {
            op: "train_step",
            detail: format!("loss is {}", report.total),
        });
    }
    g.backward(vars.total)?;
    let mut grads = b.grads(&g);
    if let Some(max) = cfg.grad_clip {
        clip_grad_norm(&mut grads, max);
    }
    let adam = AdamConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };
    adam_step(&mut model.params, &grads, state, lr, adam)?;
    let log_tau = model.params.get_mut("loss.log_tau")?;
    let floor = MIN_TEMPERATURE.ln();
    log_tau.data_mut().iter_mut().for_each(|v| *v = v.max(floor));
    Ok((report, g.flops_in(AUDIO_BLOCKS_SCOPE), g.flops_total()))
}

/// Shuffled batches of store indices; a trailing batch of one is folded into
/// the previous batch so every batch has a contrastive negative.
fn epoch_batches(count: usize, batch_size: usize, rng: &mut crate::numerics::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.flap"))
}

/// Trains `model` in place on every readable record of `manifest`.
pub fn train(model: &mut FlapModel, manifest: &Manifest, vocab: &Vocab, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.fusion != model.config.fusion {
        return Err(FlapError::Config(format!(
            "fusion is {} in the training config but {} in the model",
            cfg.fusion, model.config.fusion
        )));
    }
    if vocab.len() > model.config.vocab_size {
        return Err(FlapError::Config(format!(
            "vocabulary of {} exceeds the model's {} embeddings",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let features = FeatureConfig {
        n_mels: model.config.mels,
        ..FeatureConfig::default()
    };
    let store = FeatureStore::build(manifest, &features, cfg.feature_mean, cfg.feature_std)?;
    if store.is_empty() {
        return Err(FlapError::Input("no readable audio in the manifest".into()));
    }
    let grid = model.config.grid()?;
    let strategy = cfg.mask_strategy(grid.time);
    strategy.kept_count(grid.num_patches())?;

    let mut shuffle_rng = seeded(cfg.seed, Stream::Shuffle);
    let mut caption_rng = seeded(cfg.seed, Stream::Caption);
    let mut mask_rng = seeded(cfg.seed, Stream::Mask);
    let mut batch_rngs = BatchRngs::new(cfg.seed);

    let per_epoch = epoch_batches(store.len(), cfg.batch_size, &mut seeded(cfg.seed, Stream::Shuffle)).len();
    let mut total = cfg.epochs * per_epoch;
    if let Some(max) = cfg.max_steps {
        total = total.min(max);
    }
    let warmup = cfg.warmup_for(total);

    let mut log_file = match &cfg.log_path {
        Some(p) => {
            let f = fs::File::create(p).map_err(|e| FlapError::io(p, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{LOG_HEADER}").map_err(|e| FlapError::io(p, e))?;
            Some((p.clone(), w))
        }
        None => None,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| FlapError::io(dir, e))?;
    }

    let mut state = OptimizerState::default();
    let mut outcome = TrainOutcome {
        skipped: store.skipped.clone(),
        ..TrainOutcome::default()
    };
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        if step >= total {
            break;
        }
        for batch_idx in epoch_batches(store.len(), cfg.batch_size, &mut shuffle_rng) {
            if step >= total {
                break;
            }
            let specs: Vec<_> = batch_idx.iter().map(|&i| &store.items[i].1).collect();
            let captions: Vec<TokenizedCaption> = batch_idx
                .iter()
                .map(|&i| {
                    tokenize(
                        caption_sampler(&manifest.records[store.items[i].0], &mut caption_rng),
                        vocab,
                    )
                })
                .collect();
            let batch = assemble_audio(&specs, &model.config, cfg.spec_augment_config(), Some(&mut batch_rngs))?;
            let plan = plan(strategy, grid.num_patches(), specs.len(), Mode::Train, &mut mask_rng)?;
            let lr = lr_at(step + 1, warmup, total, cfg.peak_lr);
            let (loss, encoder_flops, total_flops) = train_step(model, &mut state, &batch, &captions, &plan, cfg, lr)?;
            step += 1;
            let entry = StepLog {
                step,
                epoch,
                lr,
                loss,
                encoder_flops,
                total_flops,
            };
            if let Some((p, w)) = log_file.as_mut() {
                writeln!(w, "{}", entry.csv_row()).map_err(|e| FlapError::io(p.as_path(), e))?;
            }
            log::debug!("step {step}/{total} loss {:.4}", entry.loss.total);
            outcome.logs.push(entry);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            let path = checkpoint_path(dir, epoch);
            checkpoint::save(&path, &model.params)?;
            outcome.checkpoints.push(path);
            while outcome.checkpoints.len() > cfg.keep_checkpoints {
                let old = outcome.checkpoints.remove(0);
                fs::remove_file(&old).map_err(|e| FlapError::io(&old, e))?;
            }
        }
        if step >= total {
            break 'epochs;
        }
    }
    if let Some((p, mut w)) = log_file {
        w.flush().map_err(|e| FlapError::io(&p, e))?;
    }
    Ok(outcome)
}
