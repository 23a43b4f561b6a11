//! Group-model estimation from `(user, item, rating)` triples via k-means.

use std::collections::HashMap;

use rand::Rng;

use super::GroupModel;
use crate::error::{Error, Result};
use crate::rng::stream;

const RESTARTS: usize = 20;
const MAX_ITERS: usize = 100;
const STDDEV_FLOOR: f64 = 0.25;
const MIN_CELL_RATINGS: usize = 3;

/// Densely re-indexed rating triples.
#[derive(Debug, Clone, PartialEq)]
pub struct Triples {
    /// Original user ids in first-appearance order.
    pub user_ids: Vec<String>,
    /// Original item ids in first-appearance order; index = dense item id.
    pub item_ids: Vec<String>,
    /// `(user, item, rating)` in dense ids.
    pub records: Vec<(usize, usize, f64)>,
}

impl Triples {
    /// `item,item_id` rows mapping dense ids back to the original ones.
    pub fn write_item_map<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["item", "item_id"])?;
        for (i, id) in self.item_ids.iter().enumerate() {
            w.write_record([i.to_string().as_str(), id])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parses `user_id,item_id,rating` lines. A first line whose rating field
/// is not numeric is treated as a header. Errors carry 1-based line numbers.
pub fn parse_triples(text: &str, source: &str) -> Result<Triples> {
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut out = Triples {
        user_ids: Vec::new(),
        item_ids: Vec::new(),
        records: Vec::new(),
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(err(format!("expected user_id,item_id,rating; got {} fields", fields.len())));
        }
        let rating = match fields[2].parse::<f64>() {
            Ok(r) if r.is_finite() => r,
            Ok(_) => return Err(err(format!("non-finite rating {:?}", fields[2]))),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(err(format!("rating {:?} is not a number", fields[2]))),
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(err("empty user or item id".into()));
        }
        let u = *users.entry(fields[0].to_string()).or_insert_with(|| {
            out.user_ids.push(fields[0].to_string());
            out.user_ids.len() - 1
        });
        let v = *items.entry(fields[1].to_string()).or_insert_with(|| {
            out.item_ids.push(fields[1].to_string());
            out.item_ids.len() - 1
        });
        out.records.push((u, v, rating));
    }
    if out.records.is_empty() {
        return Err(Error::Parse {
            path: source.to_string(),
            line: 0,
            msg: "no rating records".into(),
        });
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; empty clusters are reseeded
/// to the point farthest from its centroid. Returns labels and inertia.
fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> (Vec<usize>, f64) {
    let n = points.len();
    let dim = points[0].len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centroids[a]).total_cmp(&sq_dist(p, &centroids[b])))
                .unwrap();
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[labels[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[labels[b]]))
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
                counts[labels[far]] -= 1;
                labels[far] = c;
                counts[c] = 1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum();
    (labels, inertia)
}

/// Clusters users with k-means over mean-imputed rating vectors and
/// estimates per-(group, item) Gaussian statistics.
///
/// Cells with no ratings take the item's global mean; cells with fewer
/// than three ratings take the group's pooled stddev; every stddev is
/// floored at 0.25.
pub fn fit_group_model(triples: &Triples, n_groups: usize, seed: u64) -> Result<GroupModel> {
    if n_groups == 0 {
        return Err(Error::invalid("n_groups must be >= 1"));
    }
    let n_users = triples.user_ids.len();
    let n_items = triples.item_ids.len();
    if n_groups > n_users {
        return Err(Error::invalid(format!(
            "{n_groups} groups requested but only {n_users} users"
        )));
    }

    let mut item_sum = vec![0.0; n_items];
    let mut item_cnt = vec![0usize; n_items];
    for &(_, v, r) in &triples.records {
        item_sum[v] += r;
        item_cnt[v] += 1;
    }
    let item_mean: Vec<f64> = item_sum.iter().zip(&item_cnt).map(|(s, &c)| s / c as f64).collect();

    // Duplicate (user, item) records are averaged.
    let mut dense = vec![item_mean.clone(); n_users];
    let mut seen: HashMap<(usize, usize), (f64, usize)> = HashMap::new();
    for &(u, v, r) in &triples.records {
        let e = seen.entry((u, v)).or_insert((0.0, 0));
        e.0 += r;
        e.1 += 1;
    }
    for (&(u, v), &(s, c)) in &seen {
        dense[u][v] = s / c as f64;
    }

    let mut best: Option<(Vec<usize>, f64)> = None;
    for restart in 0..RESTARTS {
        let mut rng = stream(seed, restart as u64);
        let (labels, inertia) = kmeans(&dense, n_groups, &mut rng);
        if best.as_ref().map_or(true, |b| inertia < b.1) {
            best = Some((labels, inertia));
        }
    }
    let labels = best.expect("at least one restart").0;

    let cells = n_groups * n_items;
    let mut sum = vec![0.0; cells];
    let mut sumsq = vec![0.0; cells];
    let mut cnt = vec![0usize; cells];
    let mut group_sum = vec![0.0; n_groups];
    let mut group_sumsq = vec![0.0; n_groups];
    let mut group_cnt = vec![0usize; n_groups];
    for &(u, v, r) in &triples.records {
        let g = labels[u];
        let c = g * n_items + v;
        sum[c] += r;
        sumsq[c] += r * r;
        cnt[c] += 1;
        group_sum[g] += r;
        group_sumsq[g] += r * r;
        group_cnt[g] += 1;
    }
    let group_sd: Vec<f64> = (0..n_groups)
        .map(|g| {
            let n = group_cnt[g] as f64;
            if group_cnt[g] < 2 {
                return STDDEV_FLOOR;
            }
            let m = group_sum[g] / n;
            let var = (group_sumsq[g] - n * m * m).max(0.0) / (n - 1.0);
            var.sqrt().max(STDDEV_FLOOR)
        })
        .collect();

    let mut mean = vec![0.0; cells];
    let mut stddev = vec![0.0; cells];
    for g in 0..n_groups {
        for v in 0..n_items {
            let c = g * n_items + v;
            let n = cnt[c] as f64;
            mean[c] = if cnt[c] == 0 { item_mean[v] } else { sum[c] / n };
            stddev[c] = if cnt[c] < MIN_CELL_RATINGS {
                group_sd[g]
            } else {
                let var = (sumsq[c] - n * mean[c] * mean[c]).max(0.0) / (n - 1.0);
                var.sqrt().max(STDDEV_FLOOR)
            };
        }
    }
    let mut sizes = vec![0usize; n_groups];
    for &l in &labels {
        sizes[l] += 1;
    }
    let rating_max = triples.records.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let gm = GroupModel {
        n_groups,
        n_items,
        rating_max,
        mean,
        stddev,
        group_prior: sizes.iter().map(|&s| s as f64 / n_users as f64).collect(),
        item_popularity: Some(item_cnt.iter().map(|&c| c as f64).collect()),
    };
    gm.validate()?;
    Ok(gm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_user_single_group() {
        let t = parse_triples("u1,7,4.0\n", "mem").unwrap();
        assert_eq!(t.item_ids, vec!["7"]);
        let gm = fit_group_model(&t, 1, 0).unwrap();
        assert_eq!(gm.mean(0, 0), 4.0);
        assert_eq!(gm.stddev(0, 0), 0.25);
        assert_eq!(gm.group_prior, vec![1.0]);
    }

    #[test]
    fn header_and_dense_reindexing() {
        let t = parse_triples("user,item,rating\na,x,1\nb,y,2\na,y,3\n", "mem").unwrap();
        assert_eq!(t.user_ids, vec!["a", "b"]);
        assert_eq!(t.item_ids, vec!["x", "y"]);
        assert_eq!(t.records, vec![(0, 0, 1.0), (1, 1, 2.0), (0, 1, 3.0)]);
        let mut buf = Vec::new();
        t.write_item_map(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "item,item_id\n0,x\n1,y\n");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_triples("a,x,1\nb,y\n", "ratings.csv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_triples("a,x,1\nb,y,zz\n", "ratings.csv").unwrap_err();
        assert!(err.to_string().contains("ratings.csv:2"), "{err}");
    }

    #[test]
    fn popularity_counts_ratings() {
        let t = parse_triples("a,i,5\nb,i,4\nc,i,3\nc,j,1\n", "mem").unwrap();
        let gm = fit_group_model(&t, 1, 0).unwrap();
        assert_eq!(gm.item_popularity, Some(vec![3.0, 1.0]));
    }

    #[test]
    fn two_orthogonal_users_recover_their_means() {
        let mut text = String::new();
        for v in 0..10 {
            let (ra, rb) = if v < 5 { (5.0, 1.0) } else { (1.0, 5.0) };
            text.push_str(&format!("A,{v},{ra}\nB,{v},{rb}\n"));
        }
        let t = parse_triples(&text, "mem").unwrap();
        let gm = fit_group_model(&t, 2, 3).unwrap();
        // Brute force over the two possible labelings: the k-means fixed
        // point separates the users, so each group's means equal one user's.
        let a: Vec<f64> = (0..10).map(|v| if v < 5 { 5.0 } else { 1.0 }).collect();
        let b: Vec<f64> = (0..10).map(|v| if v < 5 { 1.0 } else { 5.0 }).collect();
        let (g0, g1) = (gm.group_means(0).to_vec(), gm.group_means(1).to_vec());
        assert!((g0 == a && g1 == b) || (g0 == b && g1 == a), "{g0:?} {g1:?}");
        assert_eq!(gm.group_prior, vec![0.5, 0.5]);
    }

    #[test]
    fn planted_clusters_recovered() {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = stream(1, 0);
        let mut text = String::new();
        for u in 0..60 {
            let g = u % 2;
            for v in 0..20 {
                let mu = if (v < 10) == (g == 0) { 4.5 } else { 1.5 };
                let z: f64 = rng.sample(StandardNormal);
                text.push_str(&format!("u{u},{v},{}\n", mu + 0.3 * z));
            }
        }
        let t = parse_triples(&text, "mem").unwrap();
        let gm = fit_group_model(&t, 2, 0).unwrap();
        let hi = if gm.mean(0, 0) > 3.0 { 0 } else { 1 };
        for v in 0..20 {
            let expect = if v < 10 { 4.5 } else { 1.5 };
            assert!((gm.mean(hi, v) - expect).abs() < 0.3, "item {v}");
            assert!(gm.stddev(hi, v) >= 0.25);
        }
    }
}
