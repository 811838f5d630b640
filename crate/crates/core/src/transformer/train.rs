use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::backward::batch_gradient;
use super::{Model, RunOutput};
use crate::dynamics::Tokenized;
use crate::error::{Error, Result};
use crate::seed::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// What one training epoch means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpochMode {
    /// One Adam update on the next `batch` series of a seeded shuffle; the
    /// order is reshuffled each time the dataset is exhausted.
    Batch,
    /// One Adam update per chunk of a fresh seeded shuffle of the whole set.
    FullPass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub adam: AdamSettings,
    pub epoch_mode: EpochMode,
    pub shuffle_seed: u64,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainHyper {
    /// Desk-scale defaults: 2000 epochs, lr 1e-3, batch 64.
    pub fn desk(shuffle_seed: u64) -> Self {
        Self {
            epochs: 2000,
            lr: 1e-3,
            batch: 64,
            adam: AdamSettings::default(),
            epoch_mode: EpochMode::Batch,
            shuffle_seed,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }

    /// Full-length training: 20000 epochs, otherwise as [`TrainHyper::desk`].
    pub fn full_length(shuffle_seed: u64) -> Self {
        Self {
            epochs: 20_000,
            ..Self::desk(shuffle_seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub train_mse_by_ctx: Vec<f64>,
    pub ood_mse_by_ctx: Option<Vec<f64>>,
    pub epochs: usize,
    pub updates: usize,
    pub lr: f64,
    pub batch: usize,
    pub adam: AdamSettings,
    pub epoch_mode: EpochMode,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Masked mean squared error. `predictions` and `targets` are
/// `len × dim`, `mask` has `len` entries.
pub fn loss(predictions: &[f64], targets: &[f64], mask: &[bool], dim: usize) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.len() != mask.len() * dim {
        return Err(Error::usage("prediction, target and mask shapes disagree"));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::usage("empty loss mask"));
    }
    let mut sum = 0.0;
    for (t, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for k in 0..dim {
            let e = predictions[t * dim + k] - targets[t * dim + k];
            sum += e * e;
        }
    }
    Ok(sum / (count * dim) as f64)
}

/// `MSE_M(c)` from a run: mean over series and output dimensions of the
/// squared error of the prediction made at context index `c`.
pub fn mse_by_context(out: &RunOutput, tok: &Tokenized) -> Vec<f64> {
    let ctx_pos = tok.ctx_positions();
    let d = tok.token_dim;
    let mut acc = vec![0.0; ctx_pos.len()];
    for s in 0..out.n_series {
        for (c, &pos) in ctx_pos.iter().enumerate() {
            let target = tok.target(s, pos);
            acc[c] += out
                .pred(s, c)
                .iter()
                .zip(target)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>();
        }
    }
    let denom = (out.n_series * d) as f64;
    acc.iter().map(|v| v / denom).collect()
}

pub fn evaluate(model: &Model, tok: &Tokenized) -> Result<Vec<f64>> {
    let out = model.run(tok, None, None)?;
    Ok(mse_by_context(&out, tok))
}

struct Adam {
    settings: AdamSettings,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(settings: AdamSettings, n: usize) -> Self {
        Self {
            settings,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let AdamSettings { beta1, beta2, eps } = self.settings;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Seeded order of series, regenerated for each pass over the data.
struct Shuffler {
    n: usize,
    seed: u64,
    pass: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Shuffler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            n,
            seed,
            pass: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order
            .shuffle(&mut seed::rng_for(self.seed, streams::SHUFFLE, self.pass, 0));
        self.pass += 1;
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.n);
        if self.cursor + size > self.n {
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        out
    }

    fn full_pass(&mut self, size: usize) -> Vec<Vec<usize>> {
        if self.cursor != 0 {
            self.reshuffle();
        }
        let out = self.order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
        self.reshuffle();
        out
    }
}

const DIVERGENCE_LIMIT: f64 = 1e6;

/// Train in place with Adam at a fixed learning rate.
pub fn train(
    model: &mut Model,
    data: &Tokenized,
    ood: Option<&Tokenized>,
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    if hyper.batch == 0 || !(hyper.lr >= 0.0) {
        return Err(Error::usage("batch must be positive and lr non-negative"));
    }
    if data.n_series == 0 {
        return Err(Error::usage("empty training set"));
    }
    let start = Instant::now();
    let mut adam = Adam::new(hyper.adam, model.n_params());
    let mut shuffler = Shuffler::new(data.n_series, hyper.shuffle_seed);
    let mut loss_curve = Vec::with_capacity(hyper.epochs);
    let mut updates = 0;
    let mut checkpoint = None;

    for epoch in 1..=hyper.epochs {
        let batches = match hyper.epoch_mode {
            EpochMode::Batch => vec![shuffler.next_batch(hyper.batch)],
            EpochMode::FullPass => shuffler.full_pass(hyper.batch),
        };
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let g = batch_gradient(model, data, batch)?;
            if !g.loss.is_finite() || g.loss > DIVERGENCE_LIMIT {
                return Err(Error::Training {
                    epoch,
                    loss: g.loss,
                    batch: batch.clone(),
                });
            }
            adam.step(&mut model.params, &g.grad, hyper.lr);
            epoch_loss += g.loss;
            updates += 1;
        }
        loss_curve.push(epoch_loss / batches.len() as f64);
        if epoch % 250 == 0 {
            log::info!("epoch {epoch}: loss {:.3e}", loss_curve[epoch - 1]);
        }
        if let (Some(every), Some(dir)) = (hyper.checkpoint_every, &hyper.checkpoint_dir) {
            if every > 0 && epoch % every == 0 {
                model.save(&dir.join(format!("epoch_{epoch}.json")), epoch)?;
            }
        }
    }
    if let Some(dir) = &hyper.checkpoint_dir {
        let path = dir.join("final.json");
        model.save(&path, hyper.epochs)?;
        checkpoint = Some(path);
    }
    let train_mse_by_ctx = evaluate(model, data)?;
    let ood_mse_by_ctx = ood.map(|o| evaluate(model, o)).transpose()?;
    Ok(TrainReport {
        loss_curve,
        train_mse_by_ctx,
        ood_mse_by_ctx,
        epochs: hyper.epochs,
        updates,
        lr: hyper.lr,
        batch: hyper.batch,
        adam: hyper.adam,
        epoch_mode: hyper.epoch_mode,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use crate::dynamics::{generate_linreg, tokenize, LinregConfig};

    #[test]
    fn loss_edge_cases() {
        let mask = [true, false, true];
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(loss(&y, &y, &mask, 2).unwrap(), 0.0);
        let shifted: Vec<f64> = y.iter().map(|v| v + 0.5).collect();
        assert_eq!(loss(&shifted, &y, &mask, 2).unwrap(), 0.25);
        assert!(loss(&y, &y, &[false; 3], 2).is_err());
    }

    #[test]
    fn loss_matches_double_loop() {
        let preds: Vec<f64> = (0..40).map(|i| (i as f64 * 0.71).sin()).collect();
        let targets: Vec<f64> = (0..40).map(|i| (i as f64 * 0.13).cos()).collect();
        let mask: Vec<bool> = (0..20).map(|t| t % 3 != 1).collect();
        let mut sum = 0.0;
        let mut n = 0;
        for t in 0..20 {
            for k in 0..2 {
                if mask[t] {
                    sum += (preds[2 * t + k] - targets[2 * t + k]).powi(2);
                    n += 1;
                }
            }
        }
        let got = loss(&preds, &targets, &mask, 2).unwrap();
        assert!((got - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let tok = tokenize(&generate_linreg(&LinregConfig::train(16, 4), 1).unwrap());
        let mut model = Model::init(ModelConfig::new(1, 4, 1, tok.seq_len, 1)).unwrap();
        let before = model.params.clone();
        let hyper = TrainHyper {
            epochs: 5,
            lr: 0.0,
            batch: 4,
            ..TrainHyper::desk(0)
        };
        let report = train(&mut model, &tok, None, &hyper).unwrap();
        assert_eq!(model.params, before);
        assert_eq!(report.loss_curve.len(), 5);
    }

    #[test]
    fn shuffler_covers_each_pass() {
        let mut s = Shuffler::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let pass = s.full_pass(4);
        assert_eq!(pass.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let tok = tokenize(&generate_linreg(&LinregConfig::train(64, 6), 4).unwrap());
        let cfg = ModelConfig::new(1, 8, 1, tok.seq_len, 4);
        let hyper = TrainHyper {
            epochs: 60,
            batch: 16,
            lr: 3e-3,
            ..TrainHyper::desk(9)
        };
        let mut a = Model::init(cfg).unwrap();
        let mut b = Model::init(cfg).unwrap();
        let ra = train(&mut a, &tok, None, &hyper).unwrap();
        let rb = train(&mut b, &tok, None, &hyper).unwrap();
        assert_eq!(ra.loss_curve, rb.loss_curve);
        let head: f64 = ra.loss_curve[..10].iter().sum();
        let tail: f64 = ra.loss_curve[50..].iter().sum();
        assert!(tail < head);
    }
}
