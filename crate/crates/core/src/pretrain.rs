//! Optional central pre-training of the frozen backbone on a pretext task.
//!
//! The pretext task uses the same vocabulary and sequence length as the
//! downstream task and its own label count. A random permutation of a
//! `scramble` fraction of the non-CLS tokens controls how far its topic
//! groups drift from the downstream ones. Pre-training runs full
//! fine-tuning with a throwaway head; only the embedding and block weights
//! are kept.

use serde::{Deserialize, Serialize};

use crate::data::{generate_task, SyntheticTaskSpec, CLS_TOKEN};
use crate::error::{Error, Result};
use crate::model::{evaluate, ModelInput, ModelState, TuningMode};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainParams {
    /// Passes over the pretext set. Zero keeps the random backbone.
    pub epochs: usize,
    pub num_labels: usize,
    pub samples_per_label: usize,
    pub signal: f64,
    /// Fraction of non-CLS tokens whose identities are permuted.
    pub scramble: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainParams {
    fn default() -> Self {
        Self {
            epochs: 0,
            num_labels: 8,
            samples_per_label: 100,
            signal: 0.5,
            scramble: 1.0,
            learning_rate: 0.05,
            batch_size: 8,
        }
    }
}

impl PretrainParams {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.epochs == 0 {
            return Ok(());
        }
        if self.num_labels < 2 {
            return Err(format!("num_labels must be at least 2, got {}", self.num_labels));
        }
        if self.batch_size == 0 || self.samples_per_label == 0 {
            return Err("batch_size and samples_per_label must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return Err(format!("signal {} must lie in [0, 1]", self.signal));
        }
        if !(0.0..=1.0).contains(&self.scramble) {
            return Err(format!("scramble {} must lie in [0, 1]", self.scramble));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Accuracy of the pretext head on the pretext set.
    pub accuracy: f64,
}

/// Train `backbone`'s embedding and blocks on a fresh pretext task. The
/// downstream head, adapters, and tuning mode are left untouched.
pub fn pretrain_backbone(
    backbone: &mut ModelState,
    params: &PretrainParams,
    rng: &mut SeededRng,
) -> Result<PretrainReport> {
    params.validate().map_err(Error::Config)?;
    if params.epochs == 0 {
        return Ok(PretrainReport {
            steps: 0,
            final_loss: f64::NAN,
            accuracy: f64::NAN,
        });
    }
    let spec = backbone.spec();
    let task = SyntheticTaskSpec {
        vocab: spec.vocab,
        seqlen: spec.seqlen,
        num_labels: params.num_labels,
        teacher_seed: rng.next_u64(),
        samples_per_label: params.samples_per_label,
        noise_rate: 0.0,
        signal: params.signal,
    };
    let mut data = generate_task(&task, &mut rng.fork("pretext"))?;
    let mut moved: Vec<usize> = (CLS_TOKEN + 1..spec.vocab).collect();
    rng.shuffle(&mut moved);
    moved.truncate((params.scramble * moved.len() as f64).round() as usize);
    let mut targets = moved.clone();
    rng.shuffle(&mut targets);
    let mut relabel: Vec<usize> = (0..spec.vocab).collect();
    for (&from, &to) in moved.iter().zip(&targets) {
        relabel[from] = to;
    }
    for s in &mut data {
        for t in &mut s.tokens {
            *t = relabel[*t];
        }
    }

    let mut model = backbone.clone();
    model.replace_classifier(params.num_labels, &mut rng.fork("head"))?;
    model.set_tuning_mode(TuningMode::Full)?;
    let mut steps = 0;
    let mut final_loss = f64::NAN;
    for _ in 0..params.epochs {
        rng.shuffle(&mut data);
        let mut total = 0.0;
        for batch in data.chunks(params.batch_size) {
            let tokens: Vec<Vec<usize>> = batch.iter().map(|s| s.tokens.clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let loss = model.loss_and_grads(ModelInput::Tokens(&tokens), &labels)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("pre-training diverged after {steps} steps")));
            }
            model.sgd_step(params.learning_rate)?;
            total += loss * batch.len() as f64;
            steps += 1;
        }
        final_loss = total / data.len() as f64;
    }
    let accuracy = evaluate(&model, &data)?;
    backbone.adopt_backbone(&model)?;
    Ok(PretrainReport {
        steps,
        final_loss,
        accuracy,
    })
}
