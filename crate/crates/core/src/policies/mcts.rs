use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::posterior::{update_in_place, PosteriorState};
use super::{bayes_scores, PolicyContext};
use crate::error::{Error, Result};
use crate::simenv::{sample_group, GroupModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MctsConfig {
    /// Simulations per decision; 0 falls back to the myopic Bayes choice.
    pub budget: usize,
    /// Lookahead depth in recommendations, capped by the steps left in the
    /// session when the context knows its length.
    pub horizon: usize,
    pub c_ucb: f64,
    /// Ratings landing in the same bucket of this width share a subtree.
    pub bucket_width: f64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            budget: 2000,
            horizon: 10,
            c_ucb: std::f64::consts::SQRT_2,
            bucket_width: 0.5,
        }
    }
}

/// Statistics of one root action after the search.
#[derive(Debug, Clone, PartialEq)]
pub struct RootStats {
    pub item: usize,
    pub visits: u64,
    /// Mean simulated return from this action to the horizon.
    pub mean_return: f64,
    /// Mean simulated immediate rating.
    pub mean_reward: f64,
}

#[derive(Debug, Clone)]
pub struct MctsOutcome {
    pub item: usize,
    pub root: Vec<RootStats>,
}

struct Action {
    item: usize,
    visits: u64,
    total: f64,
    reward_sum: f64,
    children: Vec<(i64, usize)>,
}

struct Node {
    posterior: PosteriorState,
    /// Untried items, best Bayes score last.
    untried: Vec<usize>,
    actions: Vec<Action>,
    visits: u64,
}

struct Search<'a, R> {
    gm: &'a GroupModel,
    cfg: &'a MctsConfig,
    rng: &'a mut R,
    nodes: Vec<Node>,
    seen: Vec<bool>,
    horizon: usize,
}

/// Items not in `seen`, ordered so that `pop()` yields the highest Bayes
/// score (lowest id among ties).
fn ordered_unseen(gm: &GroupModel, posterior: &PosteriorState, seen: &[bool]) -> Vec<usize> {
    let scores = bayes_scores(posterior, gm);
    let mut items: Vec<usize> = (0..gm.n_items).filter(|&v| !seen[v]).collect();
    items.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    items
}

impl<R: Rng> Search<'_, R> {
    fn new_node(&mut self, posterior: PosteriorState) -> usize {
        let untried = ordered_unseen(self.gm, &posterior, &self.seen);
        self.nodes.push(Node {
            posterior,
            untried,
            actions: Vec::new(),
            visits: 0,
        });
        self.nodes.len() - 1
    }

    fn rate(&mut self, group: usize, item: usize) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        self.gm.mean(group, item) + self.gm.stddev(group, item) * z
    }

    fn bucket(&self, rating: f64) -> i64 {
        (rating / self.cfg.bucket_width).round() as i64
    }

    /// Myopic Bayes rollout for `steps` steps; returns the summed ratings.
    fn rollout(&mut self, mut posterior: PosteriorState, group: usize, steps: usize) -> f64 {
        let mut marked = Vec::with_capacity(steps);
        let mut total = 0.0;
        for _ in 0..steps {
            let scores = bayes_scores(&posterior, self.gm);
            let Some(v) = best_unseen(&scores, &self.seen) else { break };
            let r = self.rate(group, v);
            total += r;
            self.seen[v] = true;
            marked.push(v);
            update_in_place(&mut posterior, self.gm, v, r);
        }
        for v in marked {
            self.seen[v] = false;
        }
        total
    }

    fn select(&self, node: &Node) -> usize {
        let ln_n = (node.visits as f64).ln();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, a) in node.actions.iter().enumerate() {
            let n = a.visits as f64;
            let s = a.total / n + self.cfg.c_ucb * (ln_n / n).sqrt();
            if s > best_score {
                best_score = s;
                best = i;
            }
        }
        best
    }

    fn simulate(&mut self) {
        let group = sample_group(self.nodes[0].posterior.probs(), self.rng);
        let mut path: Vec<(usize, usize, f64)> = Vec::new();
        let mut marked = Vec::new();
        let mut node = 0;
        let mut depth = 0;
        let mut tail = 0.0;
        while depth < self.horizon {
            let ai = match self.nodes[node].untried.pop() {
                Some(item) => {
                    self.nodes[node].actions.push(Action {
                        item,
                        visits: 0,
                        total: 0.0,
                        reward_sum: 0.0,
                        children: Vec::new(),
                    });
                    self.nodes[node].actions.len() - 1
                }
                None if self.nodes[node].actions.is_empty() => break,
                None => self.select(&self.nodes[node]),
            };
            let item = self.nodes[node].actions[ai].item;
            let r = self.rate(group, item);
            path.push((node, ai, r));
            self.seen[item] = true;
            marked.push(item);
            depth += 1;
            let key = self.bucket(r);
            let existing = self.nodes[node].actions[ai]
                .children
                .iter()
                .find(|(k, _)| *k == key)
                .map(|&(_, c)| c);
            match existing {
                Some(child) => node = child,
                None if depth == self.horizon => break,
                None => {
                    let mut post = self.nodes[node].posterior.clone();
                    update_in_place(&mut post, self.gm, item, r);
                    let child = self.new_node(post.clone());
                    self.nodes[node].actions[ai].children.push((key, child));
                    tail = self.rollout(post, group, self.horizon - depth);
                    break;
                }
            }
        }
        for v in marked {
            self.seen[v] = false;
        }
        let mut ret = tail;
        for &(n, a, r) in path.iter().rev() {
            ret += r;
            let act = &mut self.nodes[n].actions[a];
            act.visits += 1;
            act.total += ret;
            act.reward_sum += r;
            self.nodes[n].visits += 1;
        }
    }
}

fn best_unseen(scores: &[f64], seen: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (v, &s) in scores.iter().enumerate() {
        if !seen[v] && best.is_none_or(|b| s > scores[b]) {
            best = Some(v);
        }
    }
    best
}

/// UCT search over future recommendations. Each simulation draws a group
/// from the current belief, samples that group's ratings along the path and
/// conditions the belief on them; beyond the tree, the myopic Bayes policy
/// rolls out to the horizon. Returns the most visited root action.
pub fn mcts_search<R: Rng>(
    posterior: &PosteriorState,
    gm: &GroupModel,
    ctx: &PolicyContext,
    cfg: &MctsConfig,
    rng: &mut R,
) -> Result<MctsOutcome> {
    if cfg.horizon == 0 {
        return Err(Error::invalid("MCTS horizon must be at least 1"));
    }
    if !(cfg.bucket_width > 0.0) || !(cfg.c_ucb >= 0.0) {
        return Err(Error::invalid("MCTS needs bucket_width > 0 and c_ucb >= 0"));
    }
    let unseen = ctx.unseen_count();
    if unseen == 0 {
        return Err(Error::Policy("every item has already been shown".into()));
    }
    if cfg.budget == 0 {
        let item = super::bayes_greedy_next(posterior, gm, ctx)?;
        return Ok(MctsOutcome { item, root: Vec::new() });
    }
    let mut search = Search {
        gm,
        cfg,
        rng,
        nodes: Vec::with_capacity(cfg.budget + 1),
        seen: ctx.seen().to_vec(),
        horizon: cfg.horizon.min(unseen).min(ctx.steps_left().map_or(usize::MAX, |n| n.max(1))),
    };
    search.new_node(posterior.clone());
    for _ in 0..cfg.budget {
        search.simulate();
    }
    let root: Vec<RootStats> = search.nodes[0]
        .actions
        .iter()
        .map(|a| RootStats {
            item: a.item,
            visits: a.visits,
            mean_return: a.total / a.visits as f64,
            mean_reward: a.reward_sum / a.visits as f64,
        })
        .collect();
    let best = root
        .iter()
        .max_by(|a, b| {
            a.visits
                .cmp(&b.visits)
                .then(a.mean_return.total_cmp(&b.mean_return))
                .then(b.item.cmp(&a.item))
        })
        .expect("budget > 0 expands a root action");
    Ok(MctsOutcome { item: best.item, root })
}

pub fn mcts_next<R: Rng>(
    posterior: &PosteriorState,
    gm: &GroupModel,
    ctx: &PolicyContext,
    cfg: &MctsConfig,
    rng: &mut R,
) -> Result<usize> {
    Ok(mcts_search(posterior, gm, ctx, cfg, rng)?.item)
}
