use crate::error::{Error, Result};
use crate::simenv::GroupModel;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Bayesian belief over which group the current user belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    log_prior: Vec<f64>,
    log_likelihoods: Vec<f64>,
    probs: Vec<f64>,
}

impl PosteriorState {
    pub fn uniform(n_groups: usize) -> Self {
        Self::from_prior(&vec![1.0 / n_groups as f64; n_groups])
    }

    pub fn from_prior(prior: &[f64]) -> Self {
        let log_prior: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
        let mut s = Self {
            log_likelihoods: vec![0.0; prior.len()],
            probs: vec![0.0; prior.len()],
            log_prior,
        };
        s.normalize();
        s
    }

    /// Prior of the group model, before any observation.
    pub fn new(gm: &GroupModel) -> Self {
        Self::from_prior(&gm.group_prior)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Accumulated log densities of all observations under each group.
    pub fn log_likelihoods(&self) -> &[f64] {
        &self.log_likelihoods
    }

    pub fn n_groups(&self) -> usize {
        self.probs.len()
    }

    /// Most probable group; ties to the lowest index.
    pub fn map_group(&self) -> usize {
        argmax(&self.probs)
    }

    fn normalize(&mut self) {
        let logits: Vec<f64> = self
            .log_prior
            .iter()
            .zip(&self.log_likelihoods)
            .map(|(a, b)| a + b)
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (p, l) in self.probs.iter_mut().zip(&logits) {
            *p = (l - m).exp() / z;
        }
    }
}

pub(crate) fn log_density(gm: &GroupModel, group: usize, item: usize, rating: f64) -> f64 {
    let (mu, sd) = (gm.mean(group, item), gm.stddev(group, item));
    let z = (rating - mu) / sd;
    -HALF_LN_2PI - sd.ln() - 0.5 * z * z
}

/// Conditions the belief on one observed `(item, rating)` pair.
pub fn posterior_update(state: &PosteriorState, gm: &GroupModel, item: usize, rating: f64) -> Result<PosteriorState> {
    if item >= gm.n_items {
        return Err(Error::invalid(format!("item {item} outside catalogue of {}", gm.n_items)));
    }
    if state.n_groups() != gm.n_groups {
        return Err(Error::invalid(format!(
            "posterior over {} groups used with a {}-group model",
            state.n_groups(),
            gm.n_groups
        )));
    }
    if !rating.is_finite() {
        return Err(Error::invalid(format!("non-finite rating {rating}")));
    }
    let mut next = state.clone();
    for (g, ll) in next.log_likelihoods.iter_mut().enumerate() {
        *ll += log_density(gm, g, item, rating);
    }
    next.normalize();
    Ok(next)
}

/// In-place variant used on hot paths.
pub(crate) fn update_in_place(state: &mut PosteriorState, gm: &GroupModel, item: usize, rating: f64) {
    for (g, ll) in state.log_likelihoods.iter_mut().enumerate() {
        *ll += log_density(gm, g, item, rating);
    }
    state.normalize();
}

/// Index of the largest value; ties to the lowest index.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
