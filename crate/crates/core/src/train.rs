//! Teacher-forced training with Adam and global-norm clipping.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, Batch, Triplet};
use crate::error::{Error, Result};
use crate::model::Seq2Seq;
use crate::rng::Lcg64;
use crate::tensor::{AdamConfig, AdamState, Gradients, Graph, Real};

/// Samples processed concurrently before their gradients are summed in order.
const WINDOW: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Global L2 clip threshold; `0` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            clip_norm: 5.0,
            seed: 0,
            shuffle: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub seconds: f64,
}

fn sample_pass<F: Real, M: Seq2Seq<F> + ?Sized>(
    model: &M,
    batch: &Batch,
    i: usize,
    dropout: Option<Lcg64>,
) -> Result<(f64, Gradients<F>)> {
    let mut g = Graph::new(model.params());
    let mut rng = dropout;
    let loss = model.sample_loss(&mut g, batch.sample(i), rng.as_mut())?;
    let value = g.value(loss).item().as_f64();
    Ok((value, g.backward(loss)?))
}

/// Mean batch loss; adds the gradient of that mean into the parameter grad slots.
///
/// Per-sample passes run in parallel, and their gradients are summed in sample
/// order, so the result does not depend on the thread count.
pub fn accumulate_batch<F: Real, M: Seq2Seq<F> + ?Sized>(model: &mut M, batch: &Batch, dropout_stream: Option<u64>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let scale = F::of(1.0 / batch.len() as f64);
    let mut total = 0.0;
    for start in (0..batch.len()).step_by(WINDOW) {
        let end = (start + WINDOW).min(batch.len());
        let shared: &M = model;
        let results: Vec<Result<(f64, Gradients<F>)>> = (start..end)
            .into_par_iter()
            .map(|i| sample_pass(shared, batch, i, dropout_stream.map(|s| Lcg64::fork(s, batch.indices[i] as u64))))
            .collect();
        for r in results {
            let (loss, grads) = r?;
            total += loss;
            model.params_mut().accumulate_scaled(&grads, scale);
        }
    }
    Ok(total / batch.len() as f64)
}

/// Mean per-sample loss without gradients.
pub fn evaluate_loss<F: Real, M: Seq2Seq<F> + ?Sized>(model: &M, triplets: &[Triplet], batch_size: usize) -> Result<f64> {
    let usable: Vec<Triplet> = triplets.iter().filter(|t| t.tip.len() >= 2).cloned().collect();
    if usable.is_empty() {
        return Err(Error::Data("no records with a tip".into()));
    }
    let batches = make_batches(&usable, batch_size.max(1), None)?;
    let mut total = 0.0;
    for b in &batches {
        let losses: Vec<Result<f64>> = (0..b.len())
            .into_par_iter()
            .map(|i| {
                let mut g = Graph::inference(model.params());
                let l = model.sample_loss(&mut g, b.sample(i), None)?;
                Ok(g.value(l).item().as_f64())
            })
            .collect();
        for l in losses {
            total += l?;
        }
    }
    Ok(total / usable.len() as f64)
}

/// Runs the configured number of epochs; `on_epoch` sees each log as it is produced.
pub fn train<F: Real, M: Seq2Seq<F> + ?Sized>(
    model: &mut M,
    train_set: &[Triplet],
    valid_set: &[Triplet],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &M) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if let Some(i) = train_set.iter().position(|t| t.tip.len() < 2) {
        return Err(Error::Data(format!("training record {i} has no tip")));
    }
    if train_set.is_empty() && config.epochs > 0 {
        return Err(Error::Data("empty training set".into()));
    }
    let mut adam = AdamState::new(config.adam, model.params());
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let shuffle = config.shuffle.then(|| Lcg64::fork(config.seed, epoch as u64).next_u64());
        let batches = make_batches(train_set, config.batch_size, shuffle)?;
        let mut sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            model.params_mut().zero_grad();
            let stream = Lcg64::fork(config.seed ^ 0x5eed, (epoch as u64) << 32 | b as u64).next_u64();
            let loss = accumulate_batch(model, batch, Some(stream))?;
            if config.clip_norm > 0.0 {
                model.params_mut().clip_grad_norm(config.clip_norm);
            }
            adam.step(model.params_mut());
            sum += loss * batch.len() as f64;
        }
        let valid_loss = if valid_set.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, valid_set, config.batch_size)?)
        };
        let log = EpochLog {
            epoch,
            train_loss: sum / train_set.len() as f64,
            valid_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LengthCaps, RawRecord, TokenizeMode, Vocabulary};
    use crate::model::Variant;
    use crate::rnn::{RnnConfig, RnnModel};
    use crate::transformer::{TransformerConfig, TransformerModel};

    fn data() -> (Vocabulary, Vec<Triplet>) {
        let recs: Vec<RawRecord> = (0..6)
            .map(|i| RawRecord {
                id: None,
                review: format!("w{} w{} w{}", i, i + 1, i + 2),
                query: format!("w{i}"),
                tip: Some(format!("w{} w{}", i + 1, i)),
            })
            .collect();
        let vocab = crate::corpus::build_vocab(&recs, TokenizeMode::Whitespace, 1, 100).unwrap();
        let t = recs
            .iter()
            .map(|r| Triplet::encode(r, &vocab, TokenizeMode::Whitespace, LengthCaps::default()))
            .collect();
        (vocab, t)
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let (vocab, t) = data();
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 3,
            adam: AdamConfig { lr: 0.01, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = TransformerModel::<f32>::new(TransformerConfig::small(1, 16, 2, Variant::Both), vocab.len(), 3).unwrap();
            train(&mut m, &t, &t[..2], &cfg, |_, _| Ok(())).unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.last().unwrap().train_loss < 0.5 * a[0].train_loss);
        let la: Vec<_> = a.iter().map(|l| (l.train_loss, l.valid_loss)).collect();
        let lb: Vec<_> = b.iter().map(|l| (l.train_loss, l.valid_loss)).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn zero_epochs_leaves_parameters() {
        let (vocab, t) = data();
        let mut m = RnnModel::<f32>::new(RnnConfig::small(4, 4, Variant::Both), vocab.len(), 1).unwrap();
        let before = m.params().clone();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(train(&mut m, &t, &[], &cfg, |_, _| Ok(())).unwrap().is_empty());
        for (a, b) in before.iter().zip(m.params().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let (vocab, t) = data();
        let mut m = RnnModel::<f64>::new(RnnConfig::small(3, 4, Variant::Both), vocab.len(), 2).unwrap();
        let batch = Batch::from_triplets(&t, vec![0, 1, 2]);
        m.params_mut().zero_grad();
        accumulate_batch(&mut m, &batch, None).unwrap();
        let combined = m.params().clone();
        let mut g = Graph::new(m.params());
        let loss = crate::model::forward_loss(&mut g, &m, &batch).unwrap();
        let grads = g.backward(loss).unwrap();
        for (id, grad) in grads.params() {
            let got = &combined.get(id).grad;
            assert!(got.max_abs_diff(grad) < 1e-12);
        }
    }

    #[test]
    fn rejects_records_without_tips() {
        let (vocab, mut t) = data();
        t[2].tip.clear();
        let mut m = RnnModel::<f32>::new(RnnConfig::small(4, 4, Variant::Both), vocab.len(), 1).unwrap();
        assert!(train(&mut m, &t, &[], &TrainConfig::default(), |_, _| Ok(())).is_err());
    }
}
