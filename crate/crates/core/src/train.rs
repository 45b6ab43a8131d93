//! Mini-batch training with Adam, per-epoch validation and best-epoch
//! selection, plus evaluation.
//!
//! Dialogs in a batch are processed in parallel, each on its own tape. Their
//! gradients are then summed in batch order, so results do not depend on the
//! thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{score, Convention, Metrics};
use crate::model::{Darer, EncodedDialog};
use crate::objectives::LossReport;
use crate::optim::{clip_global_norm, Adam};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// mean of the two tasks' F1
    #[default]
    AvgF1,
    SentimentF1,
    ActF1,
}

impl Selection {
    pub fn value(self, m: &Metrics) -> f64 {
        match self {
            Selection::AvgF1 => m.avg_f1(),
            Selection::SentimentF1 => m.sentiment.f1,
            Selection::ActF1 => m.act.f1,
        }
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    100
}
fn default_clip() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eval_convention: Convention,
    #[serde(default)]
    pub selection: Selection,
    /// global gradient-norm ceiling; 0 disables clipping
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(Error::Config(format!(
                "clip_norm must be non-negative, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_estimate_S: f64,
    pub loss_margin_S: f64,
    pub loss_constraint_S: f64,
    pub loss_pred_S: f64,
    pub loss_estimate_A: f64,
    pub loss_margin_A: f64,
    pub loss_constraint_A: f64,
    pub loss_pred_A: f64,
    pub valid_f1_S: f64,
    pub valid_f1_A: f64,
}

impl EpochRecord {
    /// Losses are per-dialog means over the epoch.
    fn new(epoch: usize, loss: &LossReport, valid: &Metrics) -> Self {
        Self {
            epoch,
            loss_total: loss.grand,
            loss_estimate_S: loss.sentiment.estimate_sum(),
            loss_margin_S: loss.sentiment.margin_sum(),
            loss_constraint_S: loss.sentiment.constraint,
            loss_pred_S: loss.sentiment.prediction,
            loss_estimate_A: loss.act.estimate_sum(),
            loss_margin_A: loss.act.margin_sum(),
            loss_constraint_A: loss.act.constraint,
            loss_pred_A: loss.act.prediction,
            valid_f1_S: valid.sentiment.f1,
            valid_f1_A: valid.act.f1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// parameters of the best validation epoch (initial ones if no epoch ran)
    pub model: Darer,
    pub log: Vec<EpochRecord>,
    /// 1-based
    pub best_epoch: Option<usize>,
    pub best_metrics: Option<Metrics>,
    /// set when training stopped on a non-finite loss or gradient; `model`
    /// then holds the last good parameters
    pub diverged: Option<String>,
}

/// Loss and summed gradient of one dialog.
fn dialog_gradient(
    model: &Darer,
    dialog: &EncodedDialog,
    seed: u64,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut tape = Tape::with_params(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_mode = model.config().dropout > 0.0;
    let rng: Option<&mut dyn rand::RngCore> = if train_mode { Some(&mut rng) } else { None };
    let (_, loss) = model.loss(&mut tape, dialog, rng)?;
    let report = loss.report(&tape);
    if !report.grand.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let grads = tape.backward(loss.grand)?;
    let mut buf = model.params.zeros_like();
    grads.accumulate_into(&mut buf, 1.0)?;
    Ok((report, buf))
}

fn dialog_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1);
    x = x.wrapping_add((position as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    x ^ (x >> 31)
}

/// Mean loss over `batch` and the matching mean gradient.
pub fn batch_gradient(
    model: &Darer,
    batch: &[&EncodedDialog],
    seeds: &[u64],
) -> Result<(LossReport, Vec<Tensor>)> {
    let results: Vec<Result<(LossReport, Vec<Tensor>)>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(d, &s)| dialog_gradient(model, d, s))
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut report = LossReport::default();
    let mut grads = model.params.zeros_like();
    for r in results {
        let (rep, g) = r?;
        report.add_scaled(&rep, scale);
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_scaled(gi, scale)?;
        }
    }
    Ok((report, grads))
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

pub fn train(
    model: Darer,
    train_set: &[EncodedDialog],
    valid_set: &[EncodedDialog],
    config: &TrainConfig,
    neutral: Option<usize>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if valid_set.is_empty() {
        return Err(Error::Validation("validation set is empty".into()));
    }
    let mut model = model;
    let mut adam = Adam::new(&model.params, config.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore, Metrics)> = None;
    let mut diverged = None;

    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = LossReport::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedDialog> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|k| dialog_seed(config.seed, epoch, b * config.batch_size + k))
                .collect();
            let (report, mut grads) = match batch_gradient(&model, &batch, &seeds) {
                Ok(r) => r,
                Err(e) if is_divergence(&e) => {
                    diverged = Some(format!("epoch {epoch}, batch {}: {e}", b + 1));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if grads.iter().any(|g| !g.is_finite()) {
                diverged = Some(format!(
                    "epoch {epoch}, batch {}: non-finite gradient",
                    b + 1
                ));
                break 'epochs;
            }
            if config.clip_norm > 0.0 {
                clip_global_norm(&mut grads, config.clip_norm)?;
            }
            adam.step(&mut model.params, &grads)?;
            epoch_loss.add_scaled(&report, chunk.len() as f64 / train_set.len() as f64);
        }
        let valid = evaluate(&model, valid_set, config.eval_convention, neutral)?;
        let value = config.selection.value(&valid);
        log::info!(
            "epoch {epoch}: loss {:.4} valid F1 S {:.4} A {:.4}",
            epoch_loss.grand,
            valid.sentiment.f1,
            valid.act.f1
        );
        log.push(EpochRecord::new(epoch, &epoch_loss, &valid));
        if best.as_ref().is_none_or(|(v, ..)| value > *v) {
            best = Some((value, epoch, model.params.clone(), valid));
        }
    }

    let (best_epoch, best_metrics) = match best {
        Some((_, epoch, params, metrics)) => {
            model.params = params;
            (Some(epoch), Some(metrics))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_metrics,
        diverged,
    })
}

/// Predicted `(sentiments, acts)` for each dialog, in order.
pub fn predict_all(
    model: &Darer,
    dialogs: &[EncodedDialog],
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    dialogs.par_iter().map(|d| model.predict(d)).collect()
}

/// Predicts every dialog in evaluation mode and scores the concatenated
/// utterance stream.
pub fn evaluate(
    model: &Darer,
    dialogs: &[EncodedDialog],
    convention: Convention,
    neutral: Option<usize>,
) -> Result<Metrics> {
    if dialogs.is_empty() {
        return Err(Error::Validation(
            "cannot evaluate on an empty corpus".into(),
        ));
    }
    let preds = predict_all(model, dialogs)?;
    let (mut ps, mut gs, mut pa, mut ga) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (d, (s, a)) in dialogs.iter().zip(preds) {
        ps.extend(s);
        pa.extend(a);
        gs.extend_from_slice(&d.sentiments);
        ga.extend_from_slice(&d.acts);
    }
    score(
        convention,
        &ps,
        &gs,
        &pa,
        &ga,
        neutral,
        model.n_sentiments(),
        model.n_acts(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_token_vocab;
    use crate::metrics::macro_prf;
    use crate::model::DarerConfig;
    use crate::synth::{gen_synthetic, SynthConfig};

    fn setup(n: usize, config: DarerConfig) -> (Darer, Vec<EncodedDialog>) {
        let corpus = gen_synthetic(&SynthConfig {
            n_dialogs: n,
            min_utterances: 3,
            max_utterances: 5,
            vocab_size: 40,
            ..Default::default()
        })
        .unwrap();
        let vocab = build_token_vocab(&corpus.dialogs, 1).unwrap();
        let model = Darer::new(config, vocab.len(), 3, 4, 1).unwrap();
        let enc = corpus
            .dialogs
            .iter()
            .map(|d| model.encode_dialog(d, &vocab).unwrap())
            .collect();
        (model, enc)
    }

    fn tiny() -> DarerConfig {
        DarerConfig {
            hidden_dim: 8,
            embed_dim: 6,
            steps: 1,
            gamma: 1.0,
            dropout: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let (model, data) = setup(3, tiny());
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(model.clone(), &data, &data, &cfg, None).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.best_epoch, None);
        for (id, p) in model.params.iter() {
            assert_eq!(out.model.params.get(id), &p.value);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (model, data) = setup(3, tiny());
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.0,
            ..Default::default()
        };
        let out = train(model.clone(), &data, &data, &cfg, None).unwrap();
        for (id, p) in model.params.iter() {
            assert_eq!(out.model.params.get(id), &p.value);
        }
    }

    #[test]
    fn single_dialog_batch_equals_dialog_loss() {
        let (model, data) = setup(2, tiny());
        let (rep, grads) = batch_gradient(&model, &[&data[0]], &[0]).unwrap();
        let (single, g1) = dialog_gradient(&model, &data[0], 0).unwrap();
        assert_eq!(rep, single);
        assert_eq!(grads, g1);
    }

    #[test]
    fn training_is_reproducible_and_logs_every_epoch() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 4,
            ..Default::default()
        };
        let run = || {
            let (model, data) = setup(
                5,
                DarerConfig {
                    dropout: 0.2,
                    ..tiny()
                },
            );
            train(model, &data, &data[..2], &cfg, None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log.len(), 3);
        assert_eq!(a.log, b.log);
        for (id, p) in a.model.params.iter() {
            assert_eq!(b.model.params.get(id), &p.value);
        }
        let best = a.best_epoch.unwrap();
        let top = a
            .log
            .iter()
            .map(|r| (r.valid_f1_S + r.valid_f1_A) / 2.0)
            .fold(f64::NEG_INFINITY, f64::max);
        let first_top = a
            .log
            .iter()
            .position(|r| (r.valid_f1_S + r.valid_f1_A) / 2.0 == top)
            .unwrap();
        assert_eq!(best, first_top + 1);
    }

    #[test]
    fn evaluate_matches_concatenated_stream() {
        let (model, data) = setup(4, tiny());
        assert!(evaluate(&model, &[], Convention::Macro, None).is_err());
        let m = evaluate(&model, &data, Convention::Macro, None).unwrap();
        assert_eq!(m, evaluate(&model, &data, Convention::Macro, None).unwrap());
        let (mut ps, mut gs) = (Vec::new(), Vec::new());
        for d in &data {
            ps.extend(model.predict(d).unwrap().0);
            gs.extend_from_slice(&d.sentiments);
        }
        assert_eq!(m.sentiment, macro_prf(&ps, &gs, 3).unwrap());
    }

    #[test]
    fn empty_sets_rejected() {
        let (model, data) = setup(2, tiny());
        let cfg = TrainConfig::default();
        assert!(train(model.clone(), &[], &data, &cfg, None).is_err());
        assert!(train(model, &data, &[], &cfg, None).is_err());
    }

    #[test]
    fn epoch_record_key_order() {
        let r = EpochRecord::new(1, &LossReport::default(), &Metrics::default());
        let text = serde_json::to_string(&r).unwrap();
        assert!(
            text.starts_with(r#"{"epoch":1,"loss_total":0.0,"loss_estimate_S""#),
            "{text}"
        );
        assert!(
            text.ends_with(r#""valid_f1_S":0.0,"valid_f1_A":0.0}"#),
            "{text}"
        );
    }
}
