//! Minibatch training shared by every `MultiLabelNet`.
//!
//! Samples inside a batch run on independent tapes in parallel against a
//! read-only parameter snapshot; their gradients are merged in sample order
//! by a single writer, so results do not depend on the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::RngState;
use super::config::{Precision, RunConfig};
use crate::data::MultiLabelSample;
use crate::error::{Error, Result};
use crate::losses::{total_loss, total_loss_value};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::MultiLabelNet;
use crate::numerics::{AdamW, Gradients, Tape};

/// Keeps the shuffle stream apart from the parameter-init stream.
const SHUFFLE_SALT: u64 = 0x5eed_0f5a_4d1e;

/// One line of the JSON-lines training log. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// Mean over the epoch's samples of the loss at the time each was seen;
    /// for epoch 0, the loss of the initial parameters over the training set.
    pub train_loss: f64,
    pub val_map: f64,
    pub val_cf1: f64,
    pub val_of1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub initial_val: MetricsReport,
    pub final_val: MetricsReport,
    pub best_epoch: usize,
}

impl TrainSummary {
    pub fn initial_loss(&self) -> f64 {
        self.records[0].train_loss
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().expect("records").train_loss
    }
}

/// Scores of every sample, in order.
pub fn predict<M: MultiLabelNet>(model: &M, samples: &[MultiLabelSample]) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::no_grad();
            let z = model.logits(&mut tape, &s.image)?;
            Ok(tape.value(z).data().iter().map(|&v| crate::numerics::tensor::sigmoid_scalar(v)).collect())
        })
        .collect()
}

pub fn evaluate_model<M: MultiLabelNet>(model: &M, samples: &[MultiLabelSample]) -> Result<MetricsReport> {
    let scores = predict(model, samples)?;
    let targets: Vec<Vec<bool>> = samples.iter().map(|s| s.labels.clone()).collect();
    evaluate(&scores, &targets, 0.5)
}

/// Mean loss over `samples` without touching parameters.
pub fn mean_loss<M: MultiLabelNet>(model: &M, samples: &[MultiLabelSample], cfg: &RunConfig) -> Result<f64> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::no_grad();
            let z = model.logits(&mut tape, &s.image)?;
            total_loss_value(tape.value(z).data(), &s.targets(), &cfg.loss)
        })
        .collect::<Result<_>>()?;
    finite_mean(&losses)
}

fn finite_mean(xs: &[f64]) -> Result<f64> {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if !m.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {m}")));
    }
    Ok(m)
}

fn sample_grad<M: MultiLabelNet>(
    model: &M,
    s: &MultiLabelSample,
    cfg: &RunConfig,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let z = model.logits(&mut tape, &s.image)?;
    let loss = total_loss(&mut tape, z, &s.targets(), &cfg.loss)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    Ok((value, tape.backward(loss)?))
}

/// Mean loss of one batch; leaves the batch-mean gradient in the store.
pub fn batch_gradient<M: MultiLabelNet>(
    model: &mut M,
    batch: &[&MultiLabelSample],
    cfg: &RunConfig,
) -> Result<Vec<f64>> {
    let results: Vec<(f64, Gradients)> = {
        let m = &*model;
        batch
            .par_iter()
            .map(|s| sample_grad(m, s, cfg))
            .collect::<Result<_>>()?
    };
    let store = model.store_mut();
    store.zero_grads();
    let scale = 1.0 / batch.len() as f64;
    let mut losses = Vec::with_capacity(results.len());
    for (loss, g) in &results {
        store.accumulate(g, scale);
        losses.push(*loss);
    }
    Ok(losses)
}

/// Called after every epoch (including epoch 0) with the model and its record.
pub trait EpochSink<M> {
    fn epoch_end(&mut self, model: &M, record: &EpochRecord, rng: &RngState, is_best: bool) -> Result<()>;
}

impl<M, F> EpochSink<M> for F
where
    F: FnMut(&M, &EpochRecord, &RngState, bool) -> Result<()>,
{
    fn epoch_end(&mut self, model: &M, record: &EpochRecord, rng: &RngState, is_best: bool) -> Result<()> {
        self(model, record, rng, is_best)
    }
}

fn rng_state(seed: u64, rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed,
        word_pos: rng.get_word_pos().to_string(),
    }
}

pub fn fit<M: MultiLabelNet>(
    model: &mut M,
    cfg: &RunConfig,
    train: &[MultiLabelSample],
    val: &[MultiLabelSample],
    sink: &mut impl EpochSink<M>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument("empty training or validation set".into()));
    }
    if cfg.precision == Precision::F32 {
        model.store_mut().round_to_f32();
    }
    let shuffle_seed = cfg.seed ^ SHUFFLE_SALT;
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let o = &cfg.optim;
    let mut opt = AdamW::new(o.beta1, o.beta2, o.weight_decay);

    let initial_val = evaluate_model(model, val)?;
    let mut records = vec![EpochRecord {
        epoch: 0,
        step: 0,
        lr: 0.0,
        train_loss: mean_loss(model, train, cfg)?,
        val_map: initial_val.map,
        val_cf1: initial_val.cf1,
        val_of1: initial_val.of1,
    }];
    log::info!("epoch 0: loss {:.5} mAP {:.4}", records[0].train_loss, initial_val.map);
    let mut best_map = initial_val.map;
    let mut best_epoch = 0;
    sink.epoch_end(model, &records[0], &rng_state(shuffle_seed, &rng), true)?;

    let mut final_val = initial_val.clone();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=o.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(train.len());
        let mut lr = 0.0;
        for chunk in order.chunks(o.batch_size) {
            let batch: Vec<&MultiLabelSample> = chunk.iter().map(|&i| &train[i]).collect();
            losses.extend(batch_gradient(model, &batch, cfg)?);
            step += 1;
            lr = o.lr_at(step, epoch);
            // A zero rate is a no-op, not an optimizer error.
            if lr > 0.0 {
                opt.step(model.store_mut(), lr, step)?;
                if cfg.precision == Precision::F32 {
                    model.store_mut().round_to_f32();
                }
            }
        }
        let train_loss = finite_mean(&losses)?;
        final_val = evaluate_model(model, val)?;
        let rec = EpochRecord {
            epoch,
            step,
            lr,
            train_loss,
            val_map: final_val.map,
            val_cf1: final_val.cf1,
            val_of1: final_val.of1,
        };
        log::info!("epoch {epoch}: loss {train_loss:.5} mAP {:.4}", final_val.map);
        let is_best = final_val.map > best_map;
        if is_best {
            best_map = final_val.map;
            best_epoch = epoch;
        }
        sink.epoch_end(model, &rec, &rng_state(shuffle_seed, &rng), is_best)?;
        records.push(rec);
    }
    Ok(TrainSummary {
        records,
        initial_val,
        final_val,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_shapes_dataset;
    use crate::model::{GkgModel, ModelConfig};

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig {
            model: ModelConfig::micro(),
            ..RunConfig::default()
        };
        cfg.data.train_size = 8;
        cfg.data.val_size = 4;
        cfg.optim.epochs = 1;
        cfg.optim.batch_size = 4;
        cfg
    }

    fn no_sink<M>(_: &M, _: &EpochRecord, _: &RngState, _: bool) -> Result<()> {
        Ok(())
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut cfg = tiny_cfg();
        cfg.optim.lr = 0.0;
        let train = generate_shapes_dataset(&cfg.train_data()).unwrap();
        let val = generate_shapes_dataset(&cfg.val_data()).unwrap();
        let mut model = GkgModel::new(cfg.model.clone(), 1).unwrap();
        model.params.round_to_f32();
        let before = model.params.clone();
        let s = fit(&mut model, &cfg, &train, &val, &mut no_sink).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(model.params.iter()) {
            assert_eq!(a.value, b.value);
        }
        // Same parameters all epoch, so the running mean equals the full pass.
        assert!((s.final_loss() - s.initial_loss()).abs() < 1e-12);
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let cfg = tiny_cfg();
        let train = generate_shapes_dataset(&cfg.train_data()).unwrap();
        let mut model = GkgModel::new(cfg.model.clone(), 1).unwrap();
        let batch: Vec<&MultiLabelSample> = train.iter().take(2).collect();
        batch_gradient(&mut model, &batch, &cfg).unwrap();
        let both: Vec<_> = model.params.iter().map(|(_, p)| p.grad.clone()).collect();
        let mut sum: Vec<Vec<f64>> = both.iter().map(|g| vec![0.0; g.numel()]).collect();
        for s in &batch {
            batch_gradient(&mut model, &[*s], &cfg).unwrap();
            for (acc, (_, p)) in sum.iter_mut().zip(model.params.iter()) {
                for (a, g) in acc.iter_mut().zip(p.grad.data()) {
                    *a += g / 2.0;
                }
            }
        }
        for (g, s) in both.iter().zip(&sum) {
            for (a, b) in g.data().iter().zip(s) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
