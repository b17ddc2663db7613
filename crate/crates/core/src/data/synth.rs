//! Semi-synthetic data: known relevance and exposure fields, Bernoulli feedback.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use super::{Dataset, Interaction, PairUniverse};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::scalar::{sigmoid, Scalar};

/// Dense per-cell relevance (`gamma`) and exposure (`m`) Bernoulli parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGroundTruth<T> {
    n_users: usize,
    n_items: usize,
    gamma: Vec<T>,
    m: Vec<T>,
}

impl<T: Scalar> SyntheticGroundTruth<T> {
    pub fn new(n_users: usize, n_items: usize, gamma: Vec<T>, m: Vec<T>) -> Result<Self> {
        let n = n_users * n_items;
        if gamma.len() != n || m.len() != n {
            return Err(Error::InvalidArgument(format!(
                "ground truth needs {n} cells, got gamma {} / m {}",
                gamma.len(),
                m.len()
            )));
        }
        let unit = |v: &T| *v >= T::zero() && *v <= T::one();
        if !gamma.iter().all(unit) {
            return Err(Error::InvalidArgument("gamma outside [0, 1]".into()));
        }
        if !m.iter().all(|v| unit(v) && *v > T::zero()) {
            return Err(Error::InvalidArgument("exposure outside (0, 1]".into()));
        }
        Ok(SyntheticGroundTruth {
            n_users,
            n_items,
            gamma,
            m,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    #[inline]
    pub fn gamma(&self, u: usize, i: usize) -> T {
        self.gamma[u * self.n_items + i]
    }

    #[inline]
    pub fn exposure(&self, u: usize, i: usize) -> T {
        self.m[u * self.n_items + i]
    }

    /// Row-major N x M exposure matrix.
    pub fn exposure_matrix(&self) -> &[T] {
        &self.m
    }

    pub fn relevance_matrix(&self) -> &[T] {
        &self.gamma
    }
}

/// How true relevance is derived from the base ratings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RelevanceRecipe {
    Constant(f64),
    /// `sigmoid(scale * (rating - offset))` on rated cells; unrated cells get
    /// the base dataset's positive rate over the whole grid.
    FromRatings { scale: f64, offset: f64 },
}

/// How true exposure is derived from the base dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExposureRecipe {
    Constant(f64),
    /// `theta_i^item_power * act_u^user_power`, where `theta` is square-root
    /// normalized item popularity and `act_u` is square-root normalized user
    /// positive count floored at `activity_floor`. The product is floored at
    /// `min_exposure` so every cell stays strictly positive.
    Popularity {
        item_power: f64,
        user_power: f64,
        activity_floor: f64,
        min_exposure: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
    pub max_users: usize,
    pub max_items: usize,
    pub relevance: RelevanceRecipe,
    pub exposure: ExposureRecipe,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            min_user_interactions: 10,
            min_item_interactions: 8,
            max_users: 3000,
            max_items: 3000,
            relevance: RelevanceRecipe::FromRatings {
                scale: 1.0,
                offset: 3.5,
            },
            exposure: ExposureRecipe::Popularity {
                item_power: 1.0,
                user_power: 0.5,
                activity_floor: 0.01,
                min_exposure: 1e-3,
            },
        }
    }
}

/// Filters `base`, builds relevance and exposure fields, and draws observed
/// feedback `R~ = R * O` with `R ~ Bernoulli(gamma)` and `O ~ Bernoulli(m)` on every cell.
///
/// The returned dataset records every grid cell.
pub fn generate_semi_synthetic<T: Scalar>(
    base: &Dataset,
    config: &SynthConfig,
    seed: u64,
) -> Result<(Dataset, SyntheticGroundTruth<T>)> {
    let filtered = filter_base(base, config)?;
    let (n, m) = (filtered.n_users(), filtered.n_items());

    let item_pos = filtered.item_positive_counts();
    let user_pos = filtered.user_positive_counts();
    let total_pos: usize = item_pos.iter().sum();

    let gamma: Vec<f64> = match config.relevance {
        RelevanceRecipe::Constant(g) => vec![g; n * m],
        RelevanceRecipe::FromRatings { scale, offset } => {
            let ratings = filtered.ratings().ok_or_else(|| {
                Error::InvalidArgument("rating-based relevance needs a base with raw ratings".into())
            })?;
            let base_rate = total_pos as f64 / (n * m) as f64;
            let mut g = vec![base_rate; n * m];
            for (x, r) in filtered.interactions().iter().zip(ratings) {
                g[x.user * m + x.item] = sigmoid(scale * (r - offset));
            }
            g
        }
    };

    let exposure: Vec<f64> = match config.exposure {
        ExposureRecipe::Constant(e) => vec![e; n * m],
        ExposureRecipe::Popularity {
            item_power,
            user_power,
            activity_floor,
            min_exposure,
        } => {
            let max_item = *item_pos.iter().max().unwrap_or(&0);
            let max_user = *user_pos.iter().max().unwrap_or(&0);
            if max_item == 0 {
                return Err(Error::NoPositiveFeedback);
            }
            let theta: Vec<f64> = item_pos
                .iter()
                .map(|&c| (c as f64 / max_item as f64).sqrt())
                .collect();
            let act: Vec<f64> = user_pos
                .iter()
                .map(|&c| (c as f64 / max_user as f64).sqrt().max(activity_floor))
                .collect();
            let mut e = Vec::with_capacity(n * m);
            for a in &act {
                for t in &theta {
                    e.push((t.powf(item_power) * a.powf(user_power)).clamp(min_exposure, 1.0));
                }
            }
            e
        }
    };

    let truth = SyntheticGroundTruth::new(
        n,
        m,
        gamma.into_iter().map(T::of).collect(),
        exposure.into_iter().map(T::of).collect(),
    )?;
    let mut rng = rng::stream(seed, Stream::Synthesis);
    let interactions = simulate_feedback(&truth, &mut rng);
    let mut ds = Dataset::with_ids(
        interactions,
        None,
        filtered.user_ids().to_vec(),
        filtered.item_ids().to_vec(),
        1.0,
    )?;
    ds.pair_universe = PairUniverse::Full;
    Ok((ds, truth))
}

/// Draws `R~ = R * O` on every cell in row-major order. Two uniforms are
/// consumed per cell regardless of outcome.
pub fn simulate_feedback<T: Scalar, R: Rng>(truth: &SyntheticGroundTruth<T>, rng: &mut R) -> Vec<Interaction> {
    let mut out = Vec::with_capacity(truth.n_users() * truth.n_items());
    for u in 0..truth.n_users() {
        for i in 0..truth.n_items() {
            let relevant = rng.random::<f64>() < truth.gamma(u, i).as_f64();
            let exposed = rng.random::<f64>() < truth.exposure(u, i).as_f64();
            out.push(Interaction::new(u, i, relevant && exposed));
        }
    }
    out
}

/// Random-exposure test set: `items_per_user` distinct items per user, each
/// labeled by a fresh draw of `R ~ Bernoulli(gamma)`.
pub fn sample_relevance_test<T: Scalar>(
    truth: &SyntheticGroundTruth<T>,
    items_per_user: usize,
    seed: u64,
) -> Result<Vec<Interaction>> {
    if items_per_user == 0 || items_per_user > truth.n_items() {
        return Err(Error::InvalidArgument(format!(
            "items per user must lie in [1, {}], got {items_per_user}",
            truth.n_items()
        )));
    }
    let mut rng = rng::stream(seed, Stream::Split);
    let mut out = Vec::with_capacity(truth.n_users() * items_per_user);
    for u in 0..truth.n_users() {
        let mut items = index::sample(&mut rng, truth.n_items(), items_per_user).into_vec();
        items.sort_unstable();
        for i in items {
            let liked = rng.random::<f64>() < truth.gamma(u, i).as_f64();
            out.push(Interaction::new(u, i, liked));
        }
    }
    Ok(out)
}

fn filter_base(base: &Dataset, config: &SynthConfig) -> Result<Dataset> {
    let mut user_count = vec![0usize; base.n_users()];
    for x in base.interactions() {
        user_count[x.user] += 1;
    }
    let keep_user: Vec<bool> = user_count
        .iter()
        .map(|&c| c >= config.min_user_interactions)
        .collect();
    let mut item_count = vec![0usize; base.n_items()];
    for x in base.interactions().iter().filter(|x| keep_user[x.user]) {
        item_count[x.item] += 1;
    }
    let keep_item: Vec<bool> = item_count
        .iter()
        .map(|&c| c >= config.min_item_interactions)
        .collect();

    let user_map = first_k(&keep_user, config.max_users);
    let item_map = first_k(&keep_item, config.max_items);
    if user_map.is_empty() || item_map.is_empty() {
        return Err(Error::Empty(
            "semi-synthetic filtering removed every user or item".into(),
        ));
    }

    let mut interactions = Vec::new();
    let mut ratings = base.ratings().map(|_| Vec::new());
    for (k, x) in base.interactions().iter().enumerate() {
        if let (Some(&u), Some(&i)) = (user_map.get(&x.user), item_map.get(&x.item)) {
            interactions.push(Interaction::new(u, i, x.feedback));
            if let (Some(out), Some(src)) = (ratings.as_mut(), base.ratings()) {
                out.push(src[k]);
            }
        }
    }
    let remap_ids = |map: &HashMap<usize, usize>, ids: &[String]| {
        let mut out = vec![String::new(); map.len()];
        for (&old, &new) in map {
            out[new] = ids[old].clone();
        }
        out
    };
    Dataset::with_ids(
        interactions,
        ratings,
        remap_ids(&user_map, base.user_ids()),
        remap_ids(&item_map, base.item_ids()),
        base.positive_threshold(),
    )
}

/// Old index -> new dense index for the first `cap` kept entries.
fn first_k(keep: &[bool], cap: usize) -> HashMap<usize, usize> {
    keep.iter()
        .enumerate()
        .filter(|(_, k)| **k)
        .map(|(idx, _)| idx)
        .take(cap)
        .enumerate()
        .map(|(new, old)| (old, new))
        .collect()
}

/// Parameters for a synthetic ratings table that stands in for a real base dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseRatingsConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    /// Mean fraction of the grid that is rated.
    pub density: f64,
    /// Zipf exponent of item rating propensity.
    pub item_skew: f64,
    /// Log-normal sigma of user activity.
    pub user_spread: f64,
    pub positive_threshold: f64,
}

impl Default for BaseRatingsConfig {
    fn default() -> Self {
        BaseRatingsConfig {
            n_users: 600,
            n_items: 600,
            latent_dim: 8,
            density: 0.06,
            item_skew: 0.9,
            user_spread: 0.6,
            positive_threshold: 4.0,
        }
    }
}

/// Generates a 1..=5 ratings table from a low-rank preference model with
/// popularity-skewed, activity-skewed rating propensities.
pub fn generate_base_ratings(config: &BaseRatingsConfig, seed: u64) -> Result<Dataset> {
    if config.n_users == 0 || config.n_items == 0 || config.latent_dim == 0 {
        return Err(Error::InvalidArgument("base ratings need a nonempty grid".into()));
    }
    if !(config.density > 0.0 && config.density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density must lie in (0, 1], got {}",
            config.density
        )));
    }
    let mut rng = rng::stream(seed, Stream::Synthesis);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let lognormal = LogNormal::new(0.0, config.user_spread).map_err(|e| {
        Error::InvalidArgument(format!("user spread: {e}"))
    })?;
    let d = config.latent_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let users: Vec<f64> = (0..config.n_users * d).map(|_| normal.sample(&mut rng)).collect();
    let items: Vec<f64> = (0..config.n_items * d).map(|_| normal.sample(&mut rng)).collect();
    let quality: Vec<f64> = (0..config.n_items).map(|_| 0.5 * normal.sample(&mut rng)).collect();

    // item propensity by a random popularity rank
    let mut rank: Vec<usize> = (0..config.n_items).collect();
    for k in (1..rank.len()).rev() {
        let j = rng.random_range(0..=k);
        rank.swap(k, j);
    }
    let item_prop: Vec<f64> = rank
        .iter()
        .map(|&r| (r as f64 + 1.0).powf(-config.item_skew))
        .collect();
    let user_act: Vec<f64> = (0..config.n_users).map(|_| lognormal.sample(&mut rng)).collect();
    let mean_item = item_prop.iter().sum::<f64>() / config.n_items as f64;
    let mean_user = user_act.iter().sum::<f64>() / config.n_users as f64;
    let c = config.density / (mean_item * mean_user);

    let mut interactions = Vec::new();
    let mut ratings = Vec::new();
    for u in 0..config.n_users {
        for i in 0..config.n_items {
            let p_rate = (c * user_act[u] * item_prop[i]).min(1.0);
            let draw_rate: f64 = rng.random();
            let noise = 0.5 * normal.sample(&mut rng);
            if draw_rate >= p_rate {
                continue;
            }
            let affinity = scale
                * users[u * d..(u + 1) * d]
                    .iter()
                    .zip(&items[i * d..(i + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            let r = (3.0 + 1.2 * affinity + quality[i] + noise).round().clamp(1.0, 5.0);
            interactions.push(Interaction::new(u, i, r >= config.positive_threshold));
            ratings.push(r);
        }
    }
    Dataset::with_ids(
        interactions,
        Some(ratings),
        (0..config.n_users).map(|u| format!("u{u}")).collect(),
        (0..config.n_items).map(|i| format!("i{i}")).collect(),
        config.positive_threshold,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_config(g: f64, e: f64) -> SynthConfig {
        SynthConfig {
            min_user_interactions: 0,
            min_item_interactions: 0,
            relevance: RelevanceRecipe::Constant(g),
            exposure: ExposureRecipe::Constant(e),
            ..Default::default()
        }
    }

    fn grid_base(n: usize, m: usize) -> Dataset {
        Dataset::new(n, m, vec![Interaction::new(0, 0, true)]).unwrap()
    }

    #[test]
    fn certain_relevance_and_exposure_give_all_positive() {
        let (ds, truth) = generate_semi_synthetic::<f64>(&grid_base(20, 30), &constant_config(1.0, 1.0), 3).unwrap();
        assert_eq!(ds.interactions().len(), 600);
        assert!(ds.interactions().iter().all(|x| x.feedback));
        assert_eq!(truth.gamma(3, 4), 1.0);
    }

    #[test]
    fn half_exposure_halves_positive_rate() {
        let (ds, _) =
            generate_semi_synthetic::<f64>(&grid_base(1000, 1000), &constant_config(1.0, 0.5), 11).unwrap();
        let rate = ds.n_positive() as f64 / ds.interactions().len() as f64;
        // 4 sigma of Binomial(1e6, 0.5) / 1e6 is 0.002
        assert!((rate - 0.5).abs() < 0.002, "rate {rate}");
    }

    #[test]
    fn filtering_drops_sparse_users_and_items() {
        let mut xs = Vec::new();
        let mut rs = Vec::new();
        // users 0..3 rate items 0..10; user 3 rates only item 0; item 10 rated once
        for u in 0..3 {
            for i in 0..10 {
                xs.push(Interaction::new(u, i, i % 2 == 0));
                rs.push(if i % 2 == 0 { 5.0 } else { 2.0 });
            }
        }
        xs.push(Interaction::new(3, 0, true));
        rs.push(5.0);
        xs.push(Interaction::new(0, 10, true));
        rs.push(5.0);
        let ids = |n: usize| (0..n).map(|k| k.to_string()).collect::<Vec<_>>();
        let base = Dataset::with_ids(xs, Some(rs), ids(4), ids(11), 4.0).unwrap();
        let cfg = SynthConfig {
            min_user_interactions: 5,
            min_item_interactions: 2,
            ..Default::default()
        };
        let (ds, truth) = generate_semi_synthetic::<f64>(&base, &cfg, 0).unwrap();
        assert_eq!(ds.n_users(), 3);
        assert_eq!(ds.n_items(), 10);
        assert!((truth.gamma(0, 0) - sigmoid(1.5)).abs() < 1e-12);
        assert!((truth.gamma(0, 1) - sigmoid(-1.5)).abs() < 1e-12);
        // items with no positives floor at the minimum exposure
        assert!((truth.exposure(0, 1) - 1e-3).abs() < 1e-15);
        // the most popular item with the most active user has exposure 1
        assert!((truth.exposure(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_filter_result_is_an_error() {
        let base = generate_base_ratings(&BaseRatingsConfig { n_users: 5, n_items: 5, ..Default::default() }, 0).unwrap();
        let cfg = SynthConfig {
            min_user_interactions: 1000,
            ..Default::default()
        };
        assert!(generate_semi_synthetic::<f64>(&base, &cfg, 0).is_err());
    }

    #[test]
    fn relevance_test_set_has_fixed_size_per_user() {
        let truth = SyntheticGroundTruth::new(4, 12, vec![0.5; 48], vec![1.0; 48]).unwrap();
        let t = sample_relevance_test(&truth, 5, 1).unwrap();
        assert_eq!(t.len(), 20);
        for u in 0..4 {
            let mut items: Vec<_> = t.iter().filter(|x| x.user == u).map(|x| x.item).collect();
            items.dedup();
            assert_eq!(items.len(), 5);
        }
        assert!(sample_relevance_test(&truth, 13, 1).is_err());
    }

    #[test]
    fn base_ratings_are_reproducible() {
        let cfg = BaseRatingsConfig { n_users: 50, n_items: 40, ..Default::default() };
        let a = generate_base_ratings(&cfg, 4).unwrap();
        let b = generate_base_ratings(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.ratings().unwrap().iter().all(|r| (1.0..=5.0).contains(r)));
    }
}
