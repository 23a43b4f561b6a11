use std::time::Instant;

use rand::seq::SliceRandom;

use super::forward::{build, loss, TokenSeq};
use super::{HyperParams, ModelParams};
use crate::diffcore::{adam_step, clip_global_norm, forward_backward, AdamConfig, AdamState, Graph, ParamSet, Real};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::simenv::OfflineDataset;

const SPLIT_STREAM: u64 = 0x5B11;
const SHUFFLE_STREAM: u64 = 0x5B00_0000;
const DROPOUT_STREAM: u64 = 0xD800_0000;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch loss; absent for epoch 0 (the initialization).
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub steps: u64,
    pub n_train: usize,
    pub n_val: usize,
}

impl TrainingLog {
    /// `epoch,train_loss,val_loss` rows; wall times are left out so the
    /// file is reproducible.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let tl = e.train_loss.map(|x| format!("{x:.9}")).unwrap_or_default();
            s.push_str(&format!("{},{},{:.9}\n", e.epoch, tl, e.val_loss));
        }
        s
    }

    pub fn best_val_loss(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn wall_seconds(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.wall_seconds)
    }
}

fn adam_config(hp: &HyperParams) -> AdamConfig {
    AdamConfig {
        lr: hp.lr,
        weight_decay: hp.weight_decay,
        ..AdamConfig::default()
    }
}

/// Mean loss over `seqs`, evaluated in mini-batches without dropout.
pub fn evaluate_loss(params: &ModelParams<f32>, seqs: &[TokenSeq]) -> Result<f64> {
    let hp = &params.hp;
    let lay = params.layout();
    let mut frozen = params.tensors.clone();
    for t in frozen.tensors_mut() {
        t.set_requires_grad(false);
    }
    let mut total = 0.0;
    for chunk in seqs.chunks(hp.batch_size) {
        let mut g = Graph::new();
        let p = g.params(&frozen);
        let built = build(&mut g, &p, hp, &lay, chunk, None)?;
        let l = loss(&mut g, &built, chunk, hp.bottleneck_enabled)?;
        total += g.scalar(l) as f64 * chunk.len() as f64;
    }
    Ok(total / seqs.len() as f64)
}

/// Training loss on `seqs` (without dropout) and its gradient with respect
/// to every parameter.
pub fn loss_and_grads<T: Real>(params: &ModelParams<T>, seqs: &[TokenSeq]) -> Result<(f64, ParamSet<T>)> {
    let lay = params.layout();
    let (value, grads) = forward_backward(&params.tensors, |g, p| {
        let built = build(g, p, &params.hp, &lay, seqs, None)?;
        loss(g, &built, seqs, params.hp.bottleneck_enabled)
    })?;
    Ok((value.as_f64(), grads))
}

/// One optimizer step on `batch`. Returns the pre-update loss.
pub(crate) fn train_step(
    params: &mut ModelParams<f32>,
    state: &mut AdamState<f32>,
    batch: &[TokenSeq],
    dropout_stream: u64,
) -> Result<f64> {
    let hp = params.hp.clone();
    let lay = params.layout();
    let mut rng = (hp.dropout > 0.0).then(|| stream(hp.seed, dropout_stream));
    let (value, mut grads) = forward_backward(&params.tensors, |g, p| {
        let built = build(g, p, &hp, &lay, batch, rng.as_mut())?;
        loss(g, &built, batch, hp.bottleneck_enabled)
    })?;
    let value = value as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    clip_global_norm(&mut grads, hp.clip_norm)?;
    adam_step(&mut params.tensors, &grads, state, &adam_config(&hp))?;
    Ok(value)
}

/// Splits users into training and validation sets by a seeded shuffle.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, SPLIT_STREAM));
    let n_val = ((n as f64) * val_fraction).floor() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    (train, val)
}

/// Trains on `dataset` with teacher forcing and returns the parameters of
/// the epoch with the lowest validation loss (epoch 0 is the
/// initialization). `on_epoch` observes every logged epoch.
pub fn train_model_with(
    dataset: &OfflineDataset,
    hp: &HyperParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams<f32>, TrainingLog)> {
    hp.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if dataset.n_items != hp.n_items {
        return Err(Error::Config(format!(
            "dataset has {} items but the model expects {}",
            dataset.n_items, hp.n_items
        )));
    }
    if dataset.seq_len > hp.max_timesteps {
        return Err(Error::Config(format!(
            "seq_len {} exceeds max_timesteps {}",
            dataset.seq_len, hp.max_timesteps
        )));
    }
    let seqs: Vec<TokenSeq> = dataset.sequences.iter().map(TokenSeq::from_history).collect();
    let (train_idx, val_idx) = split_indices(seqs.len(), hp.val_fraction, hp.seed);
    let val: Vec<TokenSeq> = if val_idx.is_empty() {
        train_idx.iter().map(|&i| seqs[i].clone()).collect()
    } else {
        val_idx.iter().map(|&i| seqs[i].clone()).collect()
    };

    let start = Instant::now();
    let mut params = ModelParams::<f32>::init(hp)?;
    let mut state = AdamState::new(&params.tensors);
    let mut log = TrainingLog {
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        ..TrainingLog::default()
    };
    let first = EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: evaluate_loss(&params, &val)?,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    on_epoch(&first);
    let mut best = (first.val_loss, params.clone());
    log.epochs.push(first);

    let mut order = train_idx.clone();
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut stream(hp.seed, SHUFFLE_STREAM + epoch as u64));
        let mut sum = 0.0;
        let mut n_batches = 0usize;
        for (bi, chunk) in order.chunks(hp.batch_size).enumerate() {
            let batch: Vec<TokenSeq> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let l = train_step(&mut params, &mut state, &batch, DROPOUT_STREAM + log.steps)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::NanLoss { epoch, batch: bi },
                    other => other,
                })?;
            log.steps += 1;
            sum += l;
            n_batches += 1;
        }
        let rec = EpochRecord {
            epoch,
            train_loss: Some(sum / n_batches as f64),
            val_loss: evaluate_loss(&params, &val)?,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        if rec.val_loss < best.0 {
            best = (rec.val_loss, params.clone());
            log.best_epoch = epoch;
        }
        log.epochs.push(rec);
    }
    Ok((best.1, log))
}

pub fn train_model(dataset: &OfflineDataset, hp: &HyperParams) -> Result<(ModelParams<f32>, TrainingLog)> {
    train_model_with(dataset, hp, |_| {})
}

/// Full-batch training on a handful of sequences for `steps` steps;
/// returns the loss before the first and after the last update.
pub fn overfit(hp: &HyperParams, seqs: &[TokenSeq], steps: usize) -> Result<(ModelParams<f32>, f64, f64)> {
    let mut params = ModelParams::<f32>::init(hp)?;
    let mut state = AdamState::new(&params.tensors);
    let initial = evaluate_loss(&params, seqs)?;
    for s in 0..steps {
        train_step(&mut params, &mut state, seqs, DROPOUT_STREAM + s as u64)?;
    }
    let last = evaluate_loss(&params, seqs)?;
    Ok((params, initial, last))
}
