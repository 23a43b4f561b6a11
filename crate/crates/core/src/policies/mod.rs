//! Recommendation policies and the Bayesian group belief they share.

mod mcts;
mod posterior;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{next_item_dist, tokenize, ModelParams};
use crate::simenv::{GroupModel, InteractionHistory};

pub use mcts::{mcts_next, mcts_search, MctsConfig, MctsOutcome, RootStats};
pub use posterior::{posterior_update, PosteriorState};

/// What a policy may know about the current session.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyContext {
    history: InteractionHistory,
    seen: Vec<bool>,
    posterior: Option<PosteriorState>,
    episode_len: Option<usize>,
}

impl PolicyContext {
    pub fn new(n_items: usize) -> Self {
        Self {
            history: InteractionHistory::new(),
            seen: vec![false; n_items],
            posterior: None,
            episode_len: None,
        }
    }

    /// Context that also tracks the group belief under `gm`.
    pub fn with_posterior(gm: &GroupModel) -> Self {
        Self {
            posterior: Some(PosteriorState::new(gm)),
            ..Self::new(gm.n_items)
        }
    }

    /// Declares how many recommendations the session will make in total, so
    /// planners do not look past its end.
    pub fn with_episode_len(mut self, len: usize) -> Self {
        self.episode_len = Some(len);
        self
    }

    /// Recommendations left in the session, if its length is known.
    pub fn steps_left(&self) -> Option<usize> {
        self.episode_len.map(|n| n.saturating_sub(self.history.len()))
    }

    pub fn history(&self) -> &InteractionHistory {
        &self.history
    }

    pub fn seen(&self) -> &[bool] {
        &self.seen
    }

    pub fn is_seen(&self, item: usize) -> bool {
        self.seen.get(item).copied().unwrap_or(false)
    }

    pub fn unseen_count(&self) -> usize {
        self.seen.iter().filter(|s| !**s).count()
    }

    pub fn posterior(&self) -> Option<&PosteriorState> {
        self.posterior.as_ref()
    }

    /// Records that `item` was shown and rated.
    pub fn observe(&mut self, gm: &GroupModel, item: usize, rating: f64) -> Result<()> {
        if item >= self.seen.len() {
            return Err(Error::invalid(format!("item {item} outside catalogue of {}", self.seen.len())));
        }
        if self.seen[item] {
            return Err(Error::Policy(format!("item {item} was recommended twice")));
        }
        if let Some(p) = &self.posterior {
            self.posterior = Some(posterior_update(p, gm, item, rating)?);
        }
        self.seen[item] = true;
        self.history.push(item, rating);
        Ok(())
    }

    fn require_unseen(&self) -> Result<()> {
        if self.unseen_count() == 0 {
            return Err(Error::Policy("every item has already been shown".into()));
        }
        Ok(())
    }
}

/// Highest-scoring unseen item; ties to the lowest id.
pub fn argmax_unseen(scores: &[f64], ctx: &PolicyContext) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (v, &s) in scores.iter().enumerate() {
        if !ctx.is_seen(v) && best.is_none_or(|b| s > scores[b]) {
            best = Some(v);
        }
    }
    best.ok_or_else(|| Error::Policy("every item has already been shown".into()))
}

/// Oracle that knows the user's group.
pub fn best_star_next(gm: &GroupModel, group: usize, ctx: &PolicyContext) -> Result<usize> {
    if group >= gm.n_groups {
        return Err(Error::invalid(format!("group {group} out of range")));
    }
    argmax_unseen(gm.group_means(group), ctx)
}

pub fn random_uniform_next<R: Rng + ?Sized>(ctx: &PolicyContext, rng: &mut R) -> Result<usize> {
    ctx.require_unseen()?;
    let k = rng.random_range(0..ctx.unseen_count());
    Ok(ctx
        .seen
        .iter()
        .enumerate()
        .filter(|(_, s)| !**s)
        .nth(k)
        .map(|(v, _)| v)
        .expect("k < unseen count"))
}

/// Samples an unseen item with probability proportional to its rating count.
pub fn random_popular_next<R: Rng + ?Sized>(gm: &GroupModel, ctx: &PolicyContext, rng: &mut R) -> Result<usize> {
    let pop = gm.item_popularity.as_ref().ok_or_else(|| {
        Error::Policy(
            "random_popular needs item popularity counts; build the group model with `ingest` \
             from rating triples"
                .into(),
        )
    })?;
    ctx.require_unseen()?;
    let total: f64 = pop
        .iter()
        .enumerate()
        .filter(|(v, _)| !ctx.is_seen(*v))
        .map(|(_, &p)| p)
        .sum();
    if !(total > 0.0) {
        return Err(Error::Policy("no unseen item has positive popularity".into()));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (v, &p) in pop.iter().enumerate() {
        if ctx.is_seen(v) || p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some(v);
        if u < acc {
            return Ok(v);
        }
    }
    Ok(last.expect("positive total"))
}

/// Posterior-expected rating of every item.
pub fn bayes_scores(posterior: &PosteriorState, gm: &GroupModel) -> Vec<f64> {
    let mut scores = vec![0.0; gm.n_items];
    for (g, &p) in posterior.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (s, &m) in scores.iter_mut().zip(gm.group_means(g)) {
            *s += p * m;
        }
    }
    scores
}

/// Myopic choice: the unseen item with the highest posterior-expected rating.
pub fn bayes_greedy_next(posterior: &PosteriorState, gm: &GroupModel, ctx: &PolicyContext) -> Result<usize> {
    argmax_unseen(&bayes_scores(posterior, gm), ctx)
}

/// Most probable unseen item under the model prompted with `target`.
pub fn rlt4rec_next(params: &ModelParams<f32>, ctx: &PolicyContext, target: f64) -> Result<usize> {
    Ok(rlt4rec_next_batch(params, &[ctx], target)?[0])
}

/// [`rlt4rec_next`] for many sessions of equal history length in one pass.
pub fn rlt4rec_next_batch(params: &ModelParams<f32>, ctxs: &[&PolicyContext], target: f64) -> Result<Vec<usize>> {
    let prompts = ctxs
        .iter()
        .map(|c| tokenize(c.history(), target, &params.hp))
        .collect::<Result<Vec<_>>>()?;
    let dists = next_item_dist(params, &prompts)?;
    ctxs.iter()
        .zip(&dists)
        .map(|(c, d)| argmax_unseen(d, c))
        .collect()
}

/// Policy selector used by configuration and the evaluation harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Rlt4rec,
    Rlt4recNoBottleneck,
    BestStar,
    RandomUniform,
    RandomPopular,
    BayesGreedy,
    Mcts,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Rlt4rec,
        PolicyKind::Rlt4recNoBottleneck,
        PolicyKind::BestStar,
        PolicyKind::RandomUniform,
        PolicyKind::RandomPopular,
        PolicyKind::BayesGreedy,
        PolicyKind::Mcts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Rlt4rec => "rlt4rec",
            PolicyKind::Rlt4recNoBottleneck => "rlt4rec_no_bottleneck",
            PolicyKind::BestStar => "best_star",
            PolicyKind::RandomUniform => "random_uniform",
            PolicyKind::RandomPopular => "random_popular",
            PolicyKind::BayesGreedy => "bayes_greedy",
            PolicyKind::Mcts => "mcts",
        }
    }

    pub fn uses_model(self) -> bool {
        matches!(self, PolicyKind::Rlt4rec | PolicyKind::Rlt4recNoBottleneck)
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = PolicyKind::ALL.iter().map(|p| p.name()).collect();
                Error::invalid(format!("unknown policy '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
