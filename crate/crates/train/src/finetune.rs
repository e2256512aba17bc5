//! Supervised fine-tuning with periodic validation and best-checkpoint
//! selection.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use volseg_core::rng::{stream_rng, Domain};
use volseg_core::{augment, extract_patch, AugmentConfig, LabelMap, Volume};
use volseg_metrics::{dice, FOREGROUND_CLASSES};
use volseg_model::checkpoint;
use volseg_model::net::SwinEncoder;
use volseg_model::{
    init_model, DropoutMode, Graph, GradStore, ModelConfig, ModelState, SwinUnet, Tensor,
};

use crate::loss::{seg_loss_graph, LossWeights};
use crate::optimizer::{AdamW, OptimizerConfig};
use crate::sliding::sliding_window_predict;
use crate::{Result, TrainError};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub validate_every: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_iters: u64,
    pub weight_decay: f64,
    pub patch_shape: [usize; 3],
    /// Probability that a training patch is centred on a foreground voxel.
    pub fg_bias: f64,
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub seed: u64,
    /// Run the augmentation pipeline on the full volume before patching.
    pub augment: bool,
    /// Sliding-window overlap used for validation inference.
    pub overlap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            validate_every: 100,
            batch_size: 2,
            learning_rate: 1e-4,
            warmup_iters: 100,
            weight_decay: 1e-5,
            patch_shape: [32, 32, 32],
            fg_bias: 0.7,
            dice_weight: 1.0,
            ce_weight: 1.0,
            seed: 0,
            augment: true,
            overlap: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.validate_every == 0 || self.iterations < self.validate_every {
            return Err(TrainError::Validation(format!(
                "need iterations >= validate_every >= 1, got {} and {}",
                self.iterations, self.validate_every
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Validation("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Validation("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            return Err(TrainError::Validation("fg_bias must lie in [0, 1]".into()));
        }
        if !(0.0..=0.9).contains(&self.overlap) {
            return Err(TrainError::Validation("overlap must lie in [0, 0.9]".into()));
        }
        Ok(())
    }

    fn weights(&self) -> LossWeights {
        LossWeights { dice: self.dice_weight, ce: self.ce_weight }
    }
}

/// Weight initialization for fine-tuning.
#[derive(Clone, Debug)]
pub enum InitMode {
    Random,
    /// Load encoder weights from a pretraining checkpoint; decoder and head
    /// stay freshly initialized.
    Pretrained(PathBuf),
}

/// Build the starting model: fresh initialization, with the encoder
/// overwritten from a pretraining checkpoint when requested.
pub fn build_initial_state(config: &ModelConfig, seed: u64, init: &InitMode) -> Result<ModelState> {
    let mut state = init_model(config, seed)?;
    if let InitMode::Pretrained(path) = init {
        let (ckpt_config, meta, ckpt_store) = checkpoint::load(path)?;
        if &ckpt_config != config {
            return Err(TrainError::Model(volseg_model::ModelError::Checkpoint(format!(
                "pretraining checkpoint config disagrees with the model config: \
                 checkpoint {ckpt_config:?} vs requested {config:?}"
            ))));
        }
        let is_encoder =
            |name: &str| SwinEncoder::param_prefixes().iter().any(|p| name.starts_with(p));
        let mut copied = 0usize;
        for p in state.params.iter_mut() {
            if !is_encoder(&p.name) {
                continue;
            }
            let src = ckpt_store.index_of(&p.name).ok_or_else(|| {
                TrainError::Model(volseg_model::ModelError::Checkpoint(format!(
                    "encoder parameter {} missing from the pretraining checkpoint",
                    p.name
                )))
            })?;
            let src = &ckpt_store.get(src).value;
            if src.shape != p.value.shape {
                return Err(TrainError::Model(volseg_model::ModelError::Checkpoint(format!(
                    "encoder parameter {} shape mismatch: {:?} vs {:?}",
                    p.name, src.shape, p.value.shape
                ))));
            }
            p.value = src.clone();
            copied += 1;
        }
        // Every encoder-prefixed parameter in the checkpoint must have landed.
        let ckpt_encoder = ckpt_store.iter().filter(|p| is_encoder(&p.name)).count();
        if copied != ckpt_encoder || copied == 0 {
            return Err(TrainError::Model(volseg_model::ModelError::Checkpoint(format!(
                "encoder parameter sets disagree: copied {copied}, checkpoint has {ckpt_encoder}"
            ))));
        }
        state.meta.pretrained = meta.pretrained;
    }
    Ok(state)
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// `(iteration, training loss)`
    pub losses: Vec<(u64, f64)>,
    /// `(iteration, validation mean foreground Dice)`
    pub validations: Vec<(u64, f64)>,
    pub best_iteration: u64,
    pub best_val_dice: f64,
}

impl TrainLog {
    /// CSV with one row per iteration; validation rows carry a Dice value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,val_mean_dice\n");
        let mut v = 0usize;
        for &(iter, loss) in &self.losses {
            let val = if v < self.validations.len() && self.validations[v].0 == iter {
                let s = format!("{:.6}", self.validations[v].1);
                v += 1;
                s
            } else {
                String::new()
            };
            out.push_str(&format!("{iter},{loss:.6},{val}\n"));
        }
        out
    }

    /// Smoothed mean loss over a window at the start and end of training.
    pub fn loss_window_means(&self, window: usize) -> Option<(f64, f64)> {
        if self.losses.len() < window * 2 {
            return None;
        }
        let first: f64 =
            self.losses[..window].iter().map(|(_, l)| l).sum::<f64>() / window as f64;
        let last: f64 = self.losses[self.losses.len() - window..]
            .iter()
            .map(|(_, l)| l)
            .sum::<f64>()
            / window as f64;
        Some((first, last))
    }
}

pub struct FinetuneRun {
    /// Best-validation checkpoint (falls back to the final state when no
    /// validation ever ran).
    pub best: ModelState,
    pub log: TrainLog,
    /// Set on numeric abort; `best` then holds the last good parameters.
    pub abort: Option<String>,
}

/// Mean foreground Dice of predictions against ground truth, averaged over
/// the five foreground classes and the given cases.
pub fn mean_foreground_dice(cases: &[(LabelMap, &LabelMap)]) -> Result<f64> {
    let mut total = 0.0;
    for (pred, gt) in cases {
        let mut case_mean = 0.0;
        for &c in &FOREGROUND_CLASSES {
            case_mean += dice(pred, gt, c)?;
        }
        total += case_mean / FOREGROUND_CLASSES.len() as f64;
    }
    Ok(total / cases.len() as f64)
}

/// Fine-tune for segmentation. Each iteration samples a patch batch
/// (augment + extract), steps AdamW, and every `validate_every` iterations
/// runs full-volume sliding-window validation, keeping the checkpoint with
/// the best mean foreground Dice (ties resolved to the earliest iteration).
pub fn finetune(
    train_set: &[(Volume, LabelMap)],
    val_set: &[(Volume, LabelMap)],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    aug_cfg: &AugmentConfig,
    init: &InitMode,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Validation("train and val splits must be nonempty".into()));
    }
    for (v, l) in train_set.iter().chain(val_set) {
        if !l.is_aligned_with(v) {
            return Err(TrainError::Validation("volume/label pair is misaligned".into()));
        }
    }

    let mut state = build_initial_state(model_config, cfg.seed, init)?;
    let net = SwinUnet::build(model_config)?.0;
    let mut opt = AdamW::new(
        &state.params,
        OptimizerConfig {
            learning_rate: cfg.learning_rate,
            warmup_iters: cfg.warmup_iters,
            weight_decay: cfg.weight_decay,
            total_iters: cfg.iterations,
            ..OptimizerConfig::default()
        },
    );

    let patch_voxels: usize = cfg.patch_shape.iter().product();
    let mut log = TrainLog::default();
    let mut best_params: Option<volseg_model::ParamStore> = None;
    let mut best_dice = f64::NEG_INFINITY;
    let mut best_iter = 0u64;

    for iter in 1..=cfg.iterations {
        let mut step_rng = stream_rng(cfg.seed, Domain::TrainStep, iter);
        let mut drng = stream_rng(cfg.seed, Domain::Dropout, iter);

        let mut grads = GradStore::zeros_like(&state.params);
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = step_rng.gen_range(0..train_set.len());
            let (vol, lab) = &train_set[idx];
            let (pv, pl) = if cfg.augment {
                let aug_seed = step_rng.gen::<u64>();
                let (av, al) = augment(vol, lab, aug_cfg, aug_seed)?;
                let patch_seed = step_rng.gen::<u64>();
                extract_patch(&av, &al, cfg.patch_shape, patch_seed, cfg.fg_bias)?
            } else {
                let patch_seed = step_rng.gen::<u64>();
                extract_patch(vol, lab, cfg.patch_shape, patch_seed, cfg.fg_bias)?
            };

            let mut g = Graph::new(&state.params);
            let input = g.input(Tensor::new(
                vec![patch_voxels, 1],
                pv.data().iter().map(|&v| v as f64).collect(),
            ));
            let logits = net.forward_graph(&mut g, input, cfg.patch_shape, true, &mut drng)?;
            let labels: Arc<Vec<u32>> =
                Arc::new(pl.data().iter().map(|&l| l as u32).collect());
            let loss = seg_loss_graph(&mut g, logits, labels, cfg.weights(), model_config.head);
            let lv = g.value(loss).data[0];
            if !lv.is_finite() {
                let best = finalize(state, best_params, best_iter, best_dice, cfg, &log);
                return Ok(FinetuneRun {
                    best,
                    log,
                    abort: Some(format!("non-finite training loss {lv} at iteration {iter}")),
                });
            }
            loss_sum += lv;
            g.backward(loss, &mut grads);
        }
        grads.scale(1.0 / cfg.batch_size as f64);
        opt.step(&mut state.params, &grads);
        log.losses.push((iter, loss_sum / cfg.batch_size as f64));

        if iter % cfg.validate_every == 0 {
            let snapshot = ModelState {
                config: state.config.clone(),
                params: state.params.clone(),
                meta: state.meta.clone(),
            };
            let mut cases = Vec::with_capacity(val_set.len());
            for (vol, lab) in val_set {
                let mut vrng = stream_rng(cfg.seed, Domain::McSample, iter);
                let grid = sliding_window_predict(
                    &snapshot,
                    vol,
                    cfg.patch_shape,
                    cfg.overlap,
                    DropoutMode::Off,
                    &mut vrng,
                )?;
                cases.push((grid.argmax_labels(), lab));
            }
            let mean = mean_foreground_dice(&cases)?;
            log.validations.push((iter, mean));
            if mean > best_dice {
                best_dice = mean;
                best_iter = iter;
                best_params = Some(state.params.clone());
            }
        }
    }

    let best = finalize(state, best_params, best_iter, best_dice, cfg, &log);
    log.best_iteration = best.meta.best_iteration.unwrap_or(0);
    log.best_val_dice = best.meta.best_val_dice.unwrap_or(f64::NAN);
    Ok(FinetuneRun { best, log, abort: None })
}

fn finalize(
    state: ModelState,
    best_params: Option<volseg_model::ParamStore>,
    best_iter: u64,
    best_dice: f64,
    cfg: &TrainConfig,
    _log: &TrainLog,
) -> ModelState {
    let mut out = state;
    if let Some(params) = best_params {
        out.params = params;
        out.meta.best_iteration = Some(best_iter);
        out.meta.best_val_dice = Some(best_dice);
    }
    out.meta.iteration = cfg.iterations;
    out
}

/// Write the TrainLog CSV next to a checkpoint.
pub fn write_train_log(log: &TrainLog, path: &Path) -> Result<()> {
    std::fs::write(path, log.to_csv())?;
    Ok(())
}
