//! Group-Gaussian user simulator.
//!
//! Users belong to one of `n_groups` groups. A user in group `g` rates item
//! `v` with a single Gaussian draw from `N(mean(g, v), stddev(g, v)^2)`,
//! fixed for the user's lifetime.

mod dataset;
mod ingest;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{gen_offline_dataset, InteractionHistory, OfflineDataset};
pub use ingest::{fit_group_model, parse_triples, Triples};

/// Ground truth of the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupModel {
    pub n_groups: usize,
    pub n_items: usize,
    pub rating_max: f64,
    /// Row-major `n_groups x n_items`.
    pub mean: Vec<f64>,
    /// Row-major `n_groups x n_items`, strictly positive.
    pub stddev: Vec<f64>,
    pub group_prior: Vec<f64>,
    #[serde(default)]
    pub item_popularity: Option<Vec<f64>>,
}

impl GroupModel {
    #[inline]
    pub fn mean(&self, group: usize, item: usize) -> f64 {
        self.mean[group * self.n_items + item]
    }

    #[inline]
    pub fn stddev(&self, group: usize, item: usize) -> f64 {
        self.stddev[group * self.n_items + item]
    }

    /// Means of one group over all items.
    pub fn group_means(&self, group: usize) -> &[f64] {
        &self.mean[group * self.n_items..(group + 1) * self.n_items]
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.n_groups * self.n_items;
        if self.n_groups == 0 || self.n_items == 0 {
            return Err(Error::invalid("group model needs n_groups > 0 and n_items > 0"));
        }
        if self.mean.len() != cells || self.stddev.len() != cells {
            return Err(Error::invalid(format!(
                "mean/stddev must have {} entries, got {}/{}",
                cells,
                self.mean.len(),
                self.stddev.len()
            )));
        }
        if let Some(bad) = self.stddev.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!(
                "stddev must be positive; cell ({}, {}) is {}",
                bad / self.n_items,
                bad % self.n_items,
                self.stddev[bad]
            )));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("non-finite mean"));
        }
        if self.group_prior.len() != self.n_groups
            || self.group_prior.iter().any(|&p| !(p >= 0.0))
            || (self.group_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid("group_prior must be a probability vector over groups"));
        }
        if let Some(pop) = &self.item_popularity {
            if pop.len() != self.n_items || pop.iter().any(|&c| !(c >= 0.0)) {
                return Err(Error::invalid("item_popularity must be n_items non-negative counts"));
            }
        }
        Ok(())
    }

    /// JSON document with every real written to 17 significant digits.
    pub fn to_json(&self) -> String {
        fn reals(xs: &[f64]) -> String {
            let body: Vec<String> = xs.iter().map(|x| fmt17(*x)).collect();
            format!("[{}]", body.join(", "))
        }
        let pop = match &self.item_popularity {
            Some(p) => reals(p),
            None => "null".to_string(),
        };
        format!(
            "{{\n  \"n_groups\": {},\n  \"n_items\": {},\n  \"rating_max\": {},\n  \"mean\": {},\n  \"stddev\": {},\n  \"group_prior\": {},\n  \"item_popularity\": {}\n}}\n",
            self.n_groups,
            self.n_items,
            fmt17(self.rating_max),
            reals(&self.mean),
            reals(&self.stddev),
            reals(&self.group_prior),
            pop
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let gm: GroupModel = serde_json::from_str(text)?;
        gm.validate()?;
        Ok(gm)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `x` in scientific notation with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Polarised dataset with one high-rating block per group.
///
/// Item `v` belongs to block `v / block`; group `g` rates its own block
/// `high` and every other block `low`.
pub fn make_pd1(n_groups: usize, block: usize, high: f64, low: f64, sigma: f64) -> Result<GroupModel> {
    if n_groups < 2 || block < 1 {
        return Err(Error::invalid(format!(
            "PD1 needs n_groups >= 2 and block >= 1, got {n_groups} and {block}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma must be positive"));
    }
    let n_items = n_groups * block;
    let mut mean = Vec::with_capacity(n_groups * n_items);
    for g in 0..n_groups {
        mean.extend((0..n_items).map(|v| if v / block == g { high } else { low }));
    }
    let gm = GroupModel {
        n_groups,
        n_items,
        rating_max: high.max(low),
        mean,
        stddev: vec![sigma; n_groups * n_items],
        group_prior: vec![1.0 / n_groups as f64; n_groups],
        item_popularity: None,
    };
    gm.validate()?;
    Ok(gm)
}

/// Polarised dataset where each block is rated highly by several groups:
/// group `g` gives block `b` mean `5 - ((g - b) mod n_groups)`.
pub fn make_pd2(n_groups: usize, block: usize, sigma: f64) -> Result<GroupModel> {
    if n_groups < 2 || block < 1 {
        return Err(Error::invalid(format!(
            "PD2 needs n_groups >= 2 and block >= 1, got {n_groups} and {block}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma must be positive"));
    }
    let n_items = n_groups * block;
    let mut mean = Vec::with_capacity(n_groups * n_items);
    for g in 0..n_groups {
        mean.extend((0..n_items).map(|v| {
            let b = v / block;
            let shift = (g + n_groups - b % n_groups) % n_groups;
            5.0 - shift as f64
        }));
    }
    let gm = GroupModel {
        n_groups,
        n_items,
        rating_max: 5.0,
        mean,
        stddev: vec![sigma; n_groups * n_items],
        group_prior: vec![1.0 / n_groups as f64; n_groups],
        item_popularity: None,
    };
    gm.validate()?;
    Ok(gm)
}

pub fn pd1() -> GroupModel {
    make_pd1(4, 25, 5.0, 1.0, 0.25).expect("default PD1 parameters are valid")
}

pub fn pd2() -> GroupModel {
    make_pd2(5, 25, 0.5).expect("default PD2 parameters are valid")
}

/// One simulated user with a fully materialized rating vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRatings {
    pub group: usize,
    pub ratings: Vec<f64>,
}

impl UserRatings {
    #[inline]
    pub fn rating(&self, item: usize) -> f64 {
        self.ratings[item]
    }
}

/// Draws a group index from `prior`.
pub fn sample_group<R: Rng + ?Sized>(prior: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (g, &p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return g;
        }
    }
    prior.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples a user; the group is drawn from the prior unless given.
/// Ratings are unclamped Gaussian draws.
pub fn sample_user<R: Rng + ?Sized>(gm: &GroupModel, group: Option<usize>, rng: &mut R) -> Result<UserRatings> {
    let group = match group {
        Some(g) if g >= gm.n_groups => {
            return Err(Error::invalid(format!(
                "group {g} out of range for {} groups",
                gm.n_groups
            )))
        }
        Some(g) => g,
        None => sample_group(&gm.group_prior, rng),
    };
    let ratings = (0..gm.n_items)
        .map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            gm.mean(group, v) + gm.stddev(group, v) * z
        })
        .collect();
    Ok(UserRatings { group, ratings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn pd1_matches_table_entries() {
        let gm = pd1();
        assert_eq!((gm.n_groups, gm.n_items), (4, 100));
        assert_eq!(gm.mean(0, 0), 5.0);
        assert_eq!(gm.mean(1, 0), 1.0);
        assert_eq!(gm.mean(1, 25), 5.0);
        assert_eq!(gm.mean(2, 50), 5.0);
        assert!(gm.stddev.iter().all(|&s| s == 0.25));
        for v in 0..gm.n_items {
            let highs = (0..4).filter(|&g| gm.mean(g, v) == 5.0).count();
            let lows = (0..4).filter(|&g| gm.mean(g, v) == 1.0).count();
            assert_eq!((highs, lows), (1, 3), "item {v}");
        }
    }

    #[test]
    fn pd2_matches_table_entries() {
        let gm = pd2();
        assert_eq!((gm.n_groups, gm.n_items), (5, 125));
        assert_eq!(gm.mean(1, 25), 5.0);
        assert_eq!(gm.mean(0, 100), 4.0);
        assert_eq!(gm.mean(4, 0), 1.0);
        // Row g1 of the table: 5 1 2 3 4
        let row: Vec<f64> = (0..5).map(|b| gm.mean(0, b * 25)).collect();
        assert_eq!(row, vec![5.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(gm.stddev.iter().all(|&s| s == 0.5));
        for g in 0..5 {
            let mut blocks: Vec<f64> = (0..5).map(|b| gm.mean(g, b * 25)).collect();
            blocks.sort_by(f64::total_cmp);
            assert_eq!(blocks, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        }
    }

    #[test]
    fn constructors_reject_bad_shapes() {
        assert!(make_pd1(1, 25, 5.0, 1.0, 0.25).is_err());
        assert!(make_pd1(4, 0, 5.0, 1.0, 0.25).is_err());
        assert!(make_pd2(1, 25, 0.5).is_err());
    }

    #[test]
    fn degenerate_stddev_gives_means() {
        let mut gm = pd1();
        gm.stddev.iter_mut().for_each(|s| *s = 1e-300);
        let u = sample_user(&gm, Some(2), &mut stream(1, 0)).unwrap();
        assert_eq!(u.ratings, gm.group_means(2).to_vec());
    }

    #[test]
    fn sampling_is_deterministic_and_fixed() {
        let gm = pd1();
        let a = sample_user(&gm, Some(0), &mut stream(9, 3)).unwrap();
        let b = sample_user(&gm, Some(0), &mut stream(9, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rating(17), a.rating(17));
        assert!(sample_user(&gm, Some(4), &mut stream(9, 3)).is_err());
    }

    #[test]
    fn block_mean_law_of_large_numbers() {
        let gm = pd1();
        let mut rng = stream(11, 0);
        let mut sum = 0.0;
        let users = 10_000;
        for _ in 0..users {
            let u = sample_user(&gm, Some(0), &mut rng).unwrap();
            sum += u.ratings[..25].iter().sum::<f64>();
        }
        let mean = sum / (users * 25) as f64;
        assert!((mean - 5.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn prior_sampling_follows_prior() {
        let mut gm = pd1();
        gm.group_prior = vec![0.7, 0.1, 0.1, 0.1];
        let mut rng = stream(5, 0);
        let n = 20_000;
        let zeros = (0..n)
            .filter(|_| sample_user(&gm, None, &mut rng).unwrap().group == 0)
            .count();
        let p = zeros as f64 / n as f64;
        assert!((p - 0.7).abs() < 3.0 * (0.21f64 / n as f64).sqrt() + 1e-3, "{p}");
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut gm = pd2();
        gm.mean[3] = 1.0 / 3.0;
        gm.item_popularity = Some((0..125).map(|i| i as f64).collect());
        let text = gm.to_json();
        assert!(text.contains("3.3333333333333331e-1"));
        assert_eq!(GroupModel::from_json(&text).unwrap(), gm);
    }

    #[test]
    fn validation_catches_bad_models() {
        let mut gm = pd1();
        gm.stddev[5] = 0.0;
        assert!(gm.validate().is_err());
        let mut gm = pd1();
        gm.group_prior[0] = 0.5;
        assert!(gm.validate().is_err());
    }
}
