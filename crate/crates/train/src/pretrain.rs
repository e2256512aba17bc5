//! Self-supervised pretraining loop.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use volseg_core::rng::{stream_rng, Domain};
use volseg_core::Volume;
use volseg_model::checkpoint::{self, StateMeta};
use volseg_model::{Graph, ModelConfig, ParamStore, PretrainNet};

use crate::optimizer::{AdamW, OptimizerConfig};
use crate::pretext::{make_pretext_batch, pretext_loss_graph, PretextConfig};
use crate::{Result, TrainError};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: u64,
    pub learning_rate: f64,
    pub warmup_iters: u64,
    pub weight_decay: f64,
    pub pretext: PretextConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            learning_rate: 3e-4,
            warmup_iters: 30,
            weight_decay: 1e-5,
            pretext: PretextConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(TrainError::Validation("iterations must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Validation("learning rate must be positive".into()));
        }
        self.pretext.validate()
    }
}

/// Per-iteration pretext loss values.
#[derive(Clone, Debug, Default)]
pub struct PretrainLog {
    /// `(iteration, L_rot, L_inpaint, L_contrast, L_total)`
    pub rows: Vec<(u64, f64, f64, f64, f64)>,
}

impl PretrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,l_rot,l_inpaint,l_contrast,l_total\n");
        for (i, r, p, c, t) in &self.rows {
            out.push_str(&format!("{i},{r:.6},{p:.6},{c:.6},{t:.6}\n"));
        }
        out
    }

    pub fn final_total(&self) -> Option<f64> {
        self.rows.last().map(|r| r.4)
    }
}

pub struct PretrainRun {
    pub model_config: ModelConfig,
    pub params: ParamStore,
    pub log: PretrainLog,
    pub iterations_done: u64,
    pub subvol: [usize; 3],
    pub contrast_dim: usize,
    /// Set when the loop aborted on a non-finite loss; `params` then hold
    /// the last good state.
    pub abort: Option<String>,
}

impl PretrainRun {
    /// Write a pretraining checkpoint (encoder weights marked pretrained).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = StateMeta {
            pretrained: true,
            iteration: self.iterations_done,
            pretrain_subvol: Some(self.subvol),
            contrast_dim: Some(self.contrast_dim),
            ..StateMeta::default()
        };
        checkpoint::save(path, &self.model_config, &meta, &self.params)?;
        Ok(())
    }
}

/// Run pretext optimization over unlabeled volumes. Deterministic in
/// `(volumes, configs, seed)`.
pub fn pretrain(
    volumes: &[Volume],
    model_config: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainRun> {
    cfg.validate()?;
    if volumes.len() < 2 {
        return Err(TrainError::Validation(format!(
            "pretraining needs at least 2 unlabeled volumes, got {}",
            volumes.len()
        )));
    }
    let (net, mut store) =
        PretrainNet::build(model_config, cfg.pretext.subvol_shape, cfg.pretext.contrast_dim)?;
    let mut rng = stream_rng(seed, Domain::ModelInit, 0);
    store.init(&mut rng);

    let mut opt = AdamW::new(
        &store,
        OptimizerConfig {
            learning_rate: cfg.learning_rate,
            warmup_iters: cfg.warmup_iters,
            weight_decay: cfg.weight_decay,
            total_iters: cfg.iterations,
            ..OptimizerConfig::default()
        },
    );

    let mut log = PretrainLog::default();
    for iter in 1..=cfg.iterations {
        // Per-iteration seeds come from dedicated streams so the run is a
        // pure function of (seed, iter).
        let batch_seed = stream_rng(seed, Domain::TrainStep, iter).gen::<u64>();
        let batch = make_pretext_batch(volumes, &cfg.pretext, batch_seed)?;
        let mut drng = stream_rng(seed, Domain::Dropout, iter);

        let mut g = Graph::new(&store);
        let losses = pretext_loss_graph(&mut g, &net, &batch, &cfg.pretext, true, &mut drng)?;
        let l_rot = g.value(losses.rotation).data[0];
        let l_inp = g.value(losses.inpaint).data[0];
        let l_con = losses.contrast.map(|c| g.value(c).data[0]).unwrap_or(0.0);
        let l_total = g.value(losses.total).data[0];
        if !l_total.is_finite() {
            return Ok(PretrainRun {
                model_config: model_config.clone(),
                params: store,
                log,
                iterations_done: iter - 1,
                subvol: cfg.pretext.subvol_shape,
                contrast_dim: cfg.pretext.contrast_dim,
                abort: Some(format!(
                    "non-finite pretext loss at iteration {iter}: \
                     rot {l_rot}, inpaint {l_inp}, contrast {l_con}"
                )),
            });
        }
        let mut grads = volseg_model::GradStore::zeros_like(&store);
        g.backward(losses.total, &mut grads);
        opt.step(&mut store, &grads);
        log.rows.push((iter, l_rot, l_inp, l_con, l_total));
    }

    Ok(PretrainRun {
        model_config: model_config.clone(),
        params: store,
        log,
        iterations_done: cfg.iterations,
        subvol: cfg.pretext.subvol_shape,
        contrast_dim: cfg.pretext.contrast_dim,
        abort: None,
    })
}
