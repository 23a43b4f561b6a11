//! Episode simulation, cohort metrics and report files.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{next_item_dist, tokenize, ModelParams};
use crate::policies::{
    bayes_greedy_next, bayes_scores, best_star_next, mcts_next, mcts_search, random_popular_next,
    random_uniform_next, rlt4rec_next_batch, MctsConfig, PolicyContext, PolicyKind, PosteriorState,
};
use crate::rng::stream;
use crate::simenv::{sample_user, GroupModel, UserRatings};

/// Sessions advanced together through one batched forward pass.
const MODEL_CHUNK: usize = 64;
const SEARCH_CHUNK: usize = 4;

/// A policy together with everything it needs to act.
#[derive(Debug, Clone, Copy)]
pub struct Agent<'a> {
    pub kind: PolicyKind,
    pub model: Option<&'a ModelParams<f32>>,
    /// Rating the model is prompted to achieve.
    pub target: f64,
    pub mcts: MctsConfig,
}

impl<'a> Agent<'a> {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            model: None,
            target: 5.0,
            mcts: MctsConfig::default(),
        }
    }

    pub fn with_model(kind: PolicyKind, model: &'a ModelParams<f32>, target: f64) -> Self {
        Self {
            model: Some(model),
            target,
            ..Self::new(kind)
        }
    }

    fn check(&self, gm: &GroupModel) -> Result<()> {
        if self.kind.uses_model() {
            let m = self
                .model
                .ok_or_else(|| Error::invalid(format!("policy {} needs a model checkpoint", self.kind)))?;
            if m.hp.n_items != gm.n_items {
                return Err(Error::invalid(format!(
                    "checkpoint covers {} items but the group model has {}",
                    m.hp.n_items, gm.n_items
                )));
            }
            if !self.target.is_finite() {
                return Err(Error::invalid("target rating must be finite"));
            }
        }
        if self.kind == PolicyKind::RandomPopular && gm.item_popularity.is_none() {
            // Surface the policy's own message before any work starts.
            random_popular_next(gm, &PolicyContext::new(gm.n_items), &mut stream(0, 0))?;
        }
        Ok(())
    }

    fn model(&self) -> &'a ModelParams<f32> {
        self.model.expect("checked by Agent::check")
    }
}

/// One simulated session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub group: usize,
    pub items: Vec<usize>,
    pub ratings: Vec<f64>,
    pub policy: String,
    pub seed: u64,
}

impl EpisodeLog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `R̄@t` for every `t`.
    pub fn prefix_means(&self) -> Vec<f64> {
        let mut sum = 0.0;
        self.ratings
            .iter()
            .enumerate()
            .map(|(i, r)| {
                sum += r;
                sum / (i + 1) as f64
            })
            .collect()
    }
}

struct Session {
    user: UserRatings,
    ctx: PolicyContext,
    rng: ChaCha8Rng,
}

impl Session {
    fn new(gm: &GroupModel, user: UserRatings, rng: ChaCha8Rng, horizon: usize) -> Self {
        Self {
            user,
            ctx: PolicyContext::with_posterior(gm).with_episode_len(horizon),
            rng,
        }
    }

    fn posterior(&self) -> &PosteriorState {
        self.ctx.posterior().expect("sessions track the posterior")
    }

    fn choose(&mut self, agent: &Agent, gm: &GroupModel) -> Result<usize> {
        match agent.kind {
            PolicyKind::Rlt4rec | PolicyKind::Rlt4recNoBottleneck => {
                Ok(rlt4rec_next_batch(agent.model(), &[&self.ctx], agent.target)?[0])
            }
            PolicyKind::BestStar => best_star_next(gm, self.user.group, &self.ctx),
            PolicyKind::RandomUniform => random_uniform_next(&self.ctx, &mut self.rng),
            PolicyKind::RandomPopular => random_popular_next(gm, &self.ctx, &mut self.rng),
            PolicyKind::BayesGreedy => bayes_greedy_next(self.posterior(), gm, &self.ctx),
            PolicyKind::Mcts => {
                let p = self.posterior().clone();
                mcts_next(&p, gm, &self.ctx, &agent.mcts, &mut self.rng)
            }
        }
    }

    fn show(&mut self, gm: &GroupModel, item: usize) -> Result<()> {
        let r = self.user.rating(item);
        self.ctx.observe(gm, item, r)
    }

    /// Relevance scores used to rank unseen items for precision.
    fn scores(&mut self, agent: &Agent, gm: &GroupModel) -> Result<Vec<f64>> {
        match agent.kind {
            PolicyKind::Rlt4rec | PolicyKind::Rlt4recNoBottleneck => {
                let prompt = tokenize(self.ctx.history(), agent.target, &agent.model().hp)?;
                Ok(next_item_dist(agent.model(), &[prompt])?.remove(0))
            }
            _ => self.non_model_scores(agent, gm),
        }
    }

    fn non_model_scores(&mut self, agent: &Agent, gm: &GroupModel) -> Result<Vec<f64>> {
        let post = self.posterior().clone();
        Ok(match agent.kind {
            PolicyKind::BestStar => gm.group_means(self.user.group).to_vec(),
            PolicyKind::RandomUniform => (0..gm.n_items).map(|_| self.rng.random::<f64>()).collect(),
            PolicyKind::RandomPopular => gm
                .item_popularity
                .clone()
                .ok_or_else(|| Error::Policy("random_popular needs item popularity counts".into()))?,
            PolicyKind::BayesGreedy => bayes_scores(&post, gm),
            PolicyKind::Mcts => {
                let out = mcts_search(&post, gm, &self.ctx, &agent.mcts, &mut self.rng)?;
                if out.root.is_empty() {
                    bayes_scores(&post, gm)
                } else {
                    let mut s = vec![f64::NEG_INFINITY; gm.n_items];
                    for a in &out.root {
                        s[a.item] = a.mean_reward;
                    }
                    s
                }
            }
            PolicyKind::Rlt4rec | PolicyKind::Rlt4recNoBottleneck => unreachable!("handled by scores"),
        })
    }

    fn into_log(self, agent: &Agent, seed: u64) -> EpisodeLog {
        let pairs = self.ctx.history().pairs();
        EpisodeLog {
            group: self.user.group,
            items: pairs.iter().map(|p| p.0).collect(),
            ratings: pairs.iter().map(|p| p.1).collect(),
            policy: agent.kind.name().to_string(),
            seed,
        }
    }
}

fn check_horizon(gm: &GroupModel, horizon: usize, agent: &Agent) -> Result<()> {
    if horizon > gm.n_items {
        return Err(Error::invalid(format!(
            "horizon {horizon} exceeds the {} available items",
            gm.n_items
        )));
    }
    if let Some(m) = agent.model.filter(|_| agent.kind.uses_model()) {
        if horizon > m.hp.max_timesteps {
            return Err(Error::invalid(format!(
                "horizon {horizon} exceeds the model's max_timesteps {}",
                m.hp.max_timesteps
            )));
        }
    }
    Ok(())
}

/// Runs one session of `horizon` recommendations for `user`. `rng` drives
/// the policy's own randomness.
pub fn run_episode(
    agent: &Agent,
    user: &UserRatings,
    gm: &GroupModel,
    horizon: usize,
    rng: ChaCha8Rng,
    seed: u64,
) -> Result<EpisodeLog> {
    agent.check(gm)?;
    check_horizon(gm, horizon, agent)?;
    let mut s = Session::new(gm, user.clone(), rng, horizon);
    for _ in 0..horizon {
        let v = s.choose(agent, gm)?;
        s.show(gm, v)?;
    }
    Ok(s.into_log(agent, seed))
}

/// Fraction of the `k` best-scored unseen items (ties to the lowest id)
/// whose true rating exceeds `threshold`.
pub fn precision_at_k(scores: &[f64], user: &UserRatings, seen: &[bool], k: usize, threshold: f64) -> Result<f64> {
    if scores.len() != user.ratings.len() || seen.len() != user.ratings.len() {
        return Err(Error::invalid("scores, ratings and seen flags must cover the same items"));
    }
    let mut unseen: Vec<usize> = (0..scores.len()).filter(|&v| !seen[v]).collect();
    if k == 0 || k > unseen.len() {
        return Err(Error::invalid(format!("K = {k} must be in 1..={}", unseen.len())));
    }
    unseen.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let hits = unseen[..k].iter().filter(|&&v| user.rating(v) > threshold).count();
    Ok(hits as f64 / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub users_per_group: usize,
    pub horizon: usize,
    pub ks: Vec<usize>,
    pub threshold: f64,
    /// Items rated before precision is measured.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            users_per_group: 200,
            horizon: 25,
            ks: vec![5, 10, 15, 20],
            threshold: 4.0,
            warmup: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub t: usize,
    /// Cohort mean of `R̄@t`.
    pub mean_rating: f64,
    pub stderr: f64,
    /// Cohort mean of the rating at step `t` alone.
    pub instant_rating: f64,
    pub instant_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecisionPoint {
    pub k: usize,
    pub precision: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub policy: String,
    pub dataset: String,
    pub seed: u64,
    pub target: Option<f64>,
    pub n_episodes: usize,
    pub curve: Vec<CurvePoint>,
    pub precision: Vec<PrecisionPoint>,
    pub fingerprint: String,
}

/// Mean and standard error (sample sd / sqrt(n)).
fn mean_stderr(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Cohort curve of prefix means and instantaneous ratings.
pub fn mean_rating_curve(logs: &[EpisodeLog]) -> Result<Vec<CurvePoint>> {
    let first = logs.first().ok_or_else(|| Error::invalid("no episodes to summarize"))?;
    let horizon = first.len();
    if logs.iter().any(|l| l.len() != horizon || l.ratings.len() != horizon) {
        return Err(Error::invalid("episodes differ in length"));
    }
    let prefix: Vec<Vec<f64>> = logs.iter().map(EpisodeLog::prefix_means).collect();
    Ok((0..horizon)
        .map(|i| {
            let (mean_rating, stderr) = mean_stderr(prefix.iter().map(|p| p[i]));
            let (instant_rating, instant_stderr) = mean_stderr(logs.iter().map(|l| l.ratings[i]));
            CurvePoint {
                t: i + 1,
                mean_rating,
                stderr,
                instant_rating,
                instant_stderr,
            }
        })
        .collect())
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Advances `sessions` in lock step; model policies share one forward pass
/// per step. Returns precision scores taken once `warmup` items are rated.
fn drive(
    agent: &Agent,
    gm: &GroupModel,
    sessions: &mut [Session],
    horizon: usize,
    warmup: Option<usize>,
) -> Result<Vec<Option<Vec<f64>>>> {
    let mut scores = vec![None; sessions.len()];
    for t in 0..=horizon {
        if warmup == Some(t) {
            if agent.kind.uses_model() {
                let prompts = sessions
                    .iter()
                    .map(|s| tokenize(s.ctx.history(), agent.target, &agent.model().hp))
                    .collect::<Result<Vec<_>>>()?;
                for (slot, d) in scores.iter_mut().zip(next_item_dist(agent.model(), &prompts)?) {
                    *slot = Some(d);
                }
            } else {
                for (slot, s) in scores.iter_mut().zip(sessions.iter_mut()) {
                    *slot = Some(s.scores(agent, gm)?);
                }
            }
        }
        if t == horizon {
            break;
        }
        if agent.kind.uses_model() {
            let ctxs: Vec<&PolicyContext> = sessions.iter().map(|s| &s.ctx).collect();
            let picks = rlt4rec_next_batch(agent.model(), &ctxs, agent.target)?;
            for (s, v) in sessions.iter_mut().zip(picks) {
                s.show(gm, v)?;
            }
        } else {
            for s in sessions.iter_mut() {
                let v = s.choose(agent, gm)?;
                s.show(gm, v)?;
            }
        }
    }
    Ok(scores)
}

/// Simulated cohort: user `u` belongs to group `u / users_per_group` and
/// draws both its ratings and the policy's randomness from stream `u`.
pub fn cohort_users(gm: &GroupModel, users_per_group: usize, seed: u64) -> Result<Vec<(UserRatings, ChaCha8Rng)>> {
    (0..gm.n_groups * users_per_group)
        .map(|u| {
            let mut rng = stream(seed, u as u64);
            let user = sample_user(gm, Some(u / users_per_group), &mut rng)?;
            Ok((user, rng))
        })
        .collect()
}

/// Runs every cohort episode (in parallel, deterministically) and
/// aggregates the curve and precision.
pub fn evaluate_cohort(
    agent: &Agent,
    gm: &GroupModel,
    spec: &CohortSpec,
    dataset: &str,
) -> Result<(Report, Vec<EpisodeLog>)> {
    agent.check(gm)?;
    check_horizon(gm, spec.horizon, agent)?;
    if spec.users_per_group == 0 {
        return Err(Error::invalid("users_per_group must be positive"));
    }
    let warmup = (!spec.ks.is_empty() && spec.horizon >= spec.warmup).then_some(spec.warmup);
    if warmup.is_some() {
        let unseen = gm.n_items - spec.warmup;
        if let Some(&k) = spec.ks.iter().find(|&&k| k == 0 || k > unseen) {
            return Err(Error::invalid(format!("K = {k} must be in 1..={unseen}")));
        }
    }
    let mut sessions: Vec<Session> = cohort_users(gm, spec.users_per_group, spec.seed)?
        .into_iter()
        .map(|(u, rng)| Session::new(gm, u, rng, spec.horizon))
        .collect();
    let chunk = if agent.kind.uses_model() { MODEL_CHUNK } else { SEARCH_CHUNK };
    let scores: Vec<Option<Vec<f64>>> = sessions
        .par_chunks_mut(chunk)
        .map(|c| drive(agent, gm, c, spec.horizon, warmup))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut precision = Vec::new();
    if warmup.is_some() {
        for &k in &spec.ks {
            let vals = sessions
                .iter()
                .zip(&scores)
                .map(|(s, sc)| {
                    let sc = sc.as_ref().expect("scored at warmup");
                    // Seen flags as of the warmup step.
                    let mut seen = vec![false; gm.n_items];
                    for &(v, _) in &s.ctx.history().pairs()[..spec.warmup] {
                        seen[v] = true;
                    }
                    precision_at_k(sc, &s.user, &seen, k, spec.threshold)
                })
                .collect::<Result<Vec<f64>>>()?;
            let (p, se) = mean_stderr(vals.iter().copied());
            precision.push(PrecisionPoint {
                k,
                precision: p,
                stderr: se,
            });
        }
    }

    let logs: Vec<EpisodeLog> = sessions.into_iter().map(|s| s.into_log(agent, spec.seed)).collect();
    let curve = if spec.horizon == 0 { Vec::new() } else { mean_rating_curve(&logs)? };
    let target = agent.kind.uses_model().then_some(agent.target);
    #[derive(Serialize)]
    struct Fingerprint<'a> {
        policy: &'a str,
        target: Option<f64>,
        mcts: Option<&'a MctsConfig>,
        spec: &'a CohortSpec,
        dataset: &'a str,
        group_model: &'a GroupModel,
    }
    let fingerprint = config_hash(&Fingerprint {
        policy: agent.kind.name(),
        target,
        mcts: (agent.kind == PolicyKind::Mcts).then_some(&agent.mcts),
        spec,
        dataset,
        group_model: gm,
    })?;
    Ok((
        Report {
            policy: agent.kind.name().to_string(),
            dataset: dataset.to_string(),
            seed: spec.seed,
            target,
            n_episodes: logs.len(),
            curve,
            precision,
            fingerprint,
        },
        logs,
    ))
}

/// One cohort per prompted target rating.
pub fn target_sweep(
    kind: PolicyKind,
    model: &ModelParams<f32>,
    targets: &[f64],
    gm: &GroupModel,
    spec: &CohortSpec,
    dataset: &str,
) -> Result<Vec<Report>> {
    targets
        .iter()
        .map(|&t| Ok(evaluate_cohort(&Agent::with_model(kind, model, t), gm, spec, dataset)?.0))
        .collect()
}

fn label(report: &Report) -> String {
    match report.target {
        Some(t) => format!("{}@{}", report.policy, t),
        None => report.policy.clone(),
    }
}

impl Report {
    /// `t,mean_rating,stderr,policy,dataset,seed` plus the instantaneous
    /// columns.
    pub fn write_curve_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "t",
            "mean_rating",
            "stderr",
            "policy",
            "dataset",
            "seed",
            "instant_rating",
            "instant_stderr",
        ])?;
        let policy = label(self);
        for p in &self.curve {
            w.write_record([
                p.t.to_string(),
                format!("{:.6}", p.mean_rating),
                format!("{:.6}", p.stderr),
                policy.clone(),
                self.dataset.clone(),
                self.seed.to_string(),
                format!("{:.6}", p.instant_rating),
                format!("{:.6}", p.instant_stderr),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_precision_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["K", "precision", "stderr", "policy", "dataset", "seed"])?;
        let policy = label(self);
        for p in &self.precision {
            w.write_record([
                p.k.to_string(),
                format!("{:.6}", p.precision),
                format!("{:.6}", p.stderr),
                policy.clone(),
                self.dataset.clone(),
                self.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub wall_seconds: f64,
    pub outputs: Vec<String>,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config_hash: String, started: Instant, outputs: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config_hash,
            wall_seconds: started.elapsed().as_secs_f64(),
            outputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
