//! Probing the bottleneck representation for the Bayesian group belief.
//!
//! A small MLP is trained on frozen `ŝ_t` activations to reproduce the
//! exact posterior over groups. Accuracy close to the exact-posterior
//! ceiling means the model has learned the information state; a randomly
//! initialized model gives the chance-level baseline.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_step, forward_backward, AdamConfig, AdamState, Graph, ParamSet, Target, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams, TokenSeq};
use crate::policies::{posterior_update, PosteriorState};
use crate::rng::stream;
use crate::simenv::{sample_user, GroupModel, InteractionHistory};

const USERS_PER_FORWARD: usize = 64;

/// One frozen activation with the belief it should encode.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    /// `ŝ_t`: bottleneck output at the latest item token.
    pub activation: Vec<f64>,
    pub true_posterior: Vec<f64>,
    pub true_group: usize,
    /// Number of items rated so far.
    pub t: usize,
    /// Simulated user the sample came from.
    pub user: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub users_per_group: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Share of each group's users used to fit the probe; the rest score it.
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            users_per_group: 200,
            horizon: 10,
            hidden: 64,
            epochs: 100,
            lr: 1e-3,
            batch_size: 64,
            train_fraction: 0.8,
        }
    }
}

/// Two-layer MLP `d -> hidden -> n_groups` with a GELU between.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub tensors: ParamSet<f64>,
}

impl ProbeParams {
    fn init(d: usize, hidden: usize, n_groups: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, 0xB0BE);
        let mut gauss = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let mut tensors = ParamSet::new();
        tensors.push("w1", Tensor::new(vec![d, hidden], gauss(d * hidden, d))?.with_grad());
        tensors.push("b1", Tensor::zeros(&[hidden]).with_grad());
        tensors.push("w2", Tensor::new(vec![hidden, n_groups], gauss(hidden * n_groups, hidden))?.with_grad());
        tensors.push("b2", Tensor::zeros(&[n_groups]).with_grad());
        Ok(Self { tensors })
    }

    pub fn n_inputs(&self) -> usize {
        self.tensors.get(0).shape()[0]
    }

    pub fn n_groups(&self) -> usize {
        self.tensors.get(3).shape()[0]
    }

    /// Predicted group distribution for each activation.
    pub fn predict(&self, activations: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if activations.is_empty() {
            return Ok(Vec::new());
        }
        let mut frozen = self.tensors.clone();
        for t in frozen.tensors_mut() {
            t.set_requires_grad(false);
        }
        let mut g = Graph::new();
        let p = g.params(&frozen);
        let x = batch_input(&mut g, activations, self.n_inputs())?;
        let logits = mlp(&mut g, &p, x)?;
        let probs = g.softmax(logits);
        Ok(g.value(probs)
            .chunks(self.n_groups())
            .map(<[f64]>::to_vec)
            .collect())
    }
}

fn batch_input(g: &mut Graph<f64>, rows: &[&[f64]], d: usize) -> Result<Var> {
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::invalid(format!("activation of width {} fed to a {d}-input probe", r.len())));
        }
        data.extend_from_slice(r);
    }
    Ok(g.constant(Tensor::new(vec![rows.len(), d], data)?))
}

fn mlp(g: &mut Graph<f64>, p: &[Var], x: Var) -> Result<Var> {
    let h = g.matmul(x, p[0])?;
    let h = g.add(h, p[1])?;
    let h = g.gelu(h);
    let o = g.matmul(h, p[2])?;
    g.add(o, p[3])
}

/// Simulates `users_per_group` users per group, shows each `horizon`
/// uniformly random distinct items, and records `ŝ_t` with the exact
/// posterior after every step. Users and items depend only on `seed`, so
/// two models probed with one seed see identical sessions.
pub fn collect_probe_data(
    params: &ModelParams<f32>,
    gm: &GroupModel,
    users_per_group: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<ProbeSample>> {
    if params.hp.n_items != gm.n_items {
        return Err(Error::invalid(format!(
            "model has {} items, group model {}",
            params.hp.n_items, gm.n_items
        )));
    }
    if horizon == 0 || horizon > gm.n_items || horizon > params.hp.max_timesteps {
        return Err(Error::invalid(format!(
            "probe horizon {horizon} must be in 1..={}",
            gm.n_items.min(params.hp.max_timesteps)
        )));
    }
    let total = gm.n_groups * users_per_group;
    let sessions: Vec<(usize, InteractionHistory)> = (0..total)
        .map(|u| {
            let group = u / users_per_group;
            let mut rng = stream(seed, u as u64);
            let user = sample_user(gm, Some(group), &mut rng)?;
            let mut items: Vec<usize> = (0..gm.n_items).collect();
            let (shown, _) = items.partial_shuffle(&mut rng, horizon);
            let pairs = shown.iter().map(|&v| (v, user.rating(v))).collect();
            Ok((group, InteractionHistory::from_pairs(pairs)))
        })
        .collect::<Result<_>>()?;

    let chunks: Vec<Vec<ProbeSample>> = sessions
        .par_chunks(USERS_PER_FORWARD)
        .enumerate()
        .map(|(ci, chunk)| {
            let seqs: Vec<TokenSeq> = chunk.iter().map(|(_, h)| TokenSeq::from_history(h)).collect();
            let out = forward(params, &seqs)?;
            let d = params.hp.d;
            let emb = out.user_embeddings.data();
            let mut samples = Vec::with_capacity(chunk.len() * horizon);
            for (k, (group, hist)) in chunk.iter().enumerate() {
                let mut post = PosteriorState::new(gm);
                for (i, &(v, r)) in hist.pairs().iter().enumerate() {
                    post = posterior_update(&post, gm, v, r)?;
                    let row = &emb[(k * horizon + i) * d..(k * horizon + i + 1) * d];
                    samples.push(ProbeSample {
                        activation: row.iter().map(|&x| x as f64).collect(),
                        true_posterior: post.probs().to_vec(),
                        true_group: *group,
                        t: i + 1,
                        user: ci * USERS_PER_FORWARD + k,
                    });
                }
            }
            Ok(samples)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Splits samples by user, keeping `train_fraction` of each group's users
/// on the training side.
pub fn split_by_user(samples: &[ProbeSample], train_fraction: f64, seed: u64) -> (Vec<ProbeSample>, Vec<ProbeSample>) {
    let n_groups = samples.iter().map(|s| s.true_group + 1).max().unwrap_or(0);
    let mut train_users = std::collections::HashSet::new();
    for g in 0..n_groups {
        let mut users: Vec<usize> = samples.iter().filter(|s| s.true_group == g).map(|s| s.user).collect();
        users.sort_unstable();
        users.dedup();
        users.shuffle(&mut stream(seed, 0x5B17 + g as u64));
        let n_train = ((users.len() as f64) * train_fraction).round() as usize;
        train_users.extend(users.into_iter().take(n_train));
    }
    samples.iter().cloned().partition(|s| train_users.contains(&s.user))
}

/// Fits the probe by mini-batch Adam on cross-entropy against the soft
/// posterior targets.
pub fn train_probe(samples: &[ProbeSample], cfg: &ProbeConfig, seed: u64) -> Result<ProbeParams> {
    let first = samples.first().ok_or_else(|| Error::invalid("no probe samples"))?;
    if cfg.hidden == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("probe needs hidden, batch_size and lr > 0".into()));
    }
    let (d, n_groups) = (first.activation.len(), first.true_posterior.len());
    let mut probe = ProbeParams::init(d, cfg.hidden, n_groups, seed)?;
    let mut state = AdamState::new(&probe.tensors);
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut stream(seed, 0xB0BE_0000 + epoch as u64));
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].activation.as_slice()).collect();
            let targets: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| samples[i].true_posterior.iter().copied())
                .collect();
            let (loss, grads) = forward_backward(&probe.tensors, |g, p| {
                let x = batch_input(g, &rows, d)?;
                let logits = mlp(g, p, x)?;
                g.cross_entropy(logits, Target::Soft(targets.clone()))
            })?;
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, batch: bi });
            }
            adam_step(&mut probe.tensors, &grads, &mut state, &adam)?;
        }
    }
    Ok(probe)
}

/// Per-timestep probe quality.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeMetrics {
    pub t: usize,
    pub n: usize,
    /// Mean over samples of the group-averaged absolute error.
    pub mae: f64,
    pub accuracy: f64,
    /// Accuracy of the exact posterior's argmax: the ceiling.
    pub true_posterior_accuracy: f64,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn probe_metrics(probe: &ProbeParams, samples: &[ProbeSample]) -> Result<Vec<ProbeMetrics>> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.activation.as_slice()).collect();
    score_predictions(&probe.predict(&rows)?, samples)
}

/// Per-timestep metrics of arbitrary predicted group distributions.
pub fn score_predictions(preds: &[Vec<f64>], samples: &[ProbeSample]) -> Result<Vec<ProbeMetrics>> {
    if preds.len() != samples.len() {
        return Err(Error::invalid(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let horizon = samples.iter().map(|s| s.t).max().unwrap_or(0);
    let mut out = Vec::new();
    for t in 1..=horizon {
        let (mut n, mut mae, mut hit, mut hit_true) = (0usize, 0.0, 0usize, 0usize);
        for (s, p) in samples.iter().zip(preds).filter(|(s, _)| s.t == t) {
            n += 1;
            let g = s.true_posterior.len() as f64;
            mae += s.true_posterior.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / g;
            hit += usize::from(argmax(p) == s.true_group);
            hit_true += usize::from(argmax(&s.true_posterior) == s.true_group);
        }
        if n == 0 {
            continue;
        }
        out.push(ProbeMetrics {
            t,
            n,
            mae: mae / n as f64,
            accuracy: hit as f64 / n as f64,
            true_posterior_accuracy: hit_true as f64 / n as f64,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub t: usize,
    pub n: usize,
    pub mae_trained: f64,
    pub mae_random: f64,
    pub acc_probe: f64,
    pub acc_random: f64,
    pub acc_true_posterior: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["t", "mae_trained", "mae_random", "acc_probe", "acc_true_posterior"])?;
        for r in &self.rows {
            w.write_record([
                r.t.to_string(),
                format!("{:.6}", r.mae_trained),
                format!("{:.6}", r.mae_random),
                format!("{:.6}", r.acc_probe),
                format!("{:.6}", r.acc_true_posterior),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn probe_one(params: &ModelParams<f32>, gm: &GroupModel, cfg: &ProbeConfig, seed: u64) -> Result<Vec<ProbeMetrics>> {
    let samples = collect_probe_data(params, gm, cfg.users_per_group, cfg.horizon, seed)?;
    let (train, test) = split_by_user(&samples, cfg.train_fraction, seed);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "{} users per group cannot be split {:.0}/{:.0}",
            cfg.users_per_group,
            100.0 * cfg.train_fraction,
            100.0 * (1.0 - cfg.train_fraction)
        )));
    }
    let probe = train_probe(&train, cfg, seed)?;
    probe_metrics(&probe, &test)
}

/// Probes `trained` and a fresh initialization with the same
/// hyperparameters on identical sessions.
pub fn run_probe(trained: &ModelParams<f32>, gm: &GroupModel, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    let random = ModelParams::<f32>::init(&trained.hp)?;
    let a = probe_one(trained, gm, cfg, seed)?;
    let b = probe_one(&random, gm, cfg, seed)?;
    let rows = a
        .iter()
        .zip(&b)
        .map(|(a, b)| ProbeRow {
            t: a.t,
            n: a.n,
            mae_trained: a.mae,
            mae_random: b.mae,
            acc_probe: a.accuracy,
            acc_random: b.accuracy,
            acc_true_posterior: a.true_posterior_accuracy,
        })
        .collect();
    Ok(ProbeReport { rows })
}

#[cfg(test)]
mod tests;
