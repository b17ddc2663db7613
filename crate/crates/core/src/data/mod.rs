//! Implicit-feedback datasets, split construction, and semi-synthetic generation.

mod io;
mod split;
mod synth;

use std::collections::HashSet;

pub use io::{
    format_sig9, load_ratings, parse_ratings, read_ground_truth, read_rating_records, read_split_manifest,
    write_ground_truth, write_ratings, write_split_manifest, RatingRecord,
};
pub use split::{build_unbiased_validation, prepare_splits, SplitAssignment, SplitTag};
pub use synth::{
    generate_base_ratings, generate_semi_synthetic, sample_relevance_test, simulate_feedback,
    BaseRatingsConfig, ExposureRecipe, RelevanceRecipe, SynthConfig, SyntheticGroundTruth,
};

use crate::error::{Error, Result};

/// Observed feedback between one user and one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    /// `true` for positive feedback.
    pub feedback: bool,
}

impl Interaction {
    pub fn new(user: usize, item: usize, feedback: bool) -> Self {
        Interaction {
            user,
            item,
            feedback,
        }
    }

    #[inline]
    pub fn pair(&self) -> (usize, usize) {
        (self.user, self.item)
    }

    #[inline]
    pub fn label(&self) -> u8 {
        self.feedback as u8
    }
}

/// Which (user, item) pairs the training loss sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairUniverse {
    /// Every cell of the user x item grid; cells without a record count as feedback 0.
    #[default]
    Full,
    /// Only the recorded interactions.
    Observed,
}

impl std::str::FromStr for PairUniverse {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PairUniverse::Full),
            "observed" => Ok(PairUniverse::Observed),
            other => Err(Error::InvalidArgument(format!(
                "pair universe must be `full` or `observed`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_users: usize,
    n_items: usize,
    interactions: Vec<Interaction>,
    /// Raw ratings parallel to `interactions`, when the data came from a ratings file.
    ratings: Option<Vec<f64>>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    /// Threshold under which the raw ratings were binarized; 1 for 0/1 data.
    positive_threshold: f64,
    pub pair_universe: PairUniverse,
}

impl Dataset {
    /// Builds a dataset with ids equal to the decimal indices.
    pub fn new(n_users: usize, n_items: usize, interactions: Vec<Interaction>) -> Result<Self> {
        let user_ids = (0..n_users).map(|u| u.to_string()).collect();
        let item_ids = (0..n_items).map(|i| i.to_string()).collect();
        Self::with_ids(interactions, None, user_ids, item_ids, 1.0)
    }

    pub(crate) fn with_ids(
        interactions: Vec<Interaction>,
        ratings: Option<Vec<f64>>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        positive_threshold: f64,
    ) -> Result<Self> {
        let n_users = user_ids.len();
        let n_items = item_ids.len();
        let mut seen = HashSet::with_capacity(interactions.len());
        for x in &interactions {
            if x.user >= n_users || x.item >= n_items {
                return Err(Error::InvalidArgument(format!(
                    "interaction ({}, {}) outside {}x{} index space",
                    x.user, x.item, n_users, n_items
                )));
            }
            if !seen.insert(x.pair()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate interaction ({}, {})",
                    x.user, x.item
                )));
            }
        }
        if let Some(r) = &ratings {
            if r.len() != interactions.len() {
                return Err(Error::InvalidArgument(
                    "ratings length differs from interactions".into(),
                ));
            }
        }
        Ok(Dataset {
            n_users,
            n_items,
            interactions,
            ratings,
            user_ids,
            item_ids,
            positive_threshold,
            pair_universe: PairUniverse::default(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn ratings(&self) -> Option<&[f64]> {
        self.ratings.as_deref()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn positive_threshold(&self) -> f64 {
        self.positive_threshold
    }

    pub fn n_positive(&self) -> usize {
        self.interactions.iter().filter(|x| x.feedback).count()
    }

    /// Positive-feedback count per item.
    pub fn item_positive_counts(&self) -> Vec<usize> {
        positive_counts(self.n_items, self.interactions.iter(), |x| x.item)
    }

    /// Positive-feedback count per user.
    pub fn user_positive_counts(&self) -> Vec<usize> {
        positive_counts(self.n_users, self.interactions.iter(), |x| x.user)
    }

    /// Copy of the dataset without the given (user, item) pairs.
    pub fn without_pairs(&self, pairs: &[Interaction]) -> Dataset {
        let drop: HashSet<_> = pairs.iter().map(Interaction::pair).collect();
        let keep: Vec<bool> = self
            .interactions
            .iter()
            .map(|x| !drop.contains(&x.pair()))
            .collect();
        let interactions = self
            .interactions
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(x, _)| *x)
            .collect();
        let ratings = self.ratings.as_ref().map(|r| {
            r.iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(v, _)| *v)
                .collect()
        });
        Dataset {
            interactions,
            ratings,
            ..self.clone()
        }
    }
}

pub(crate) fn positive_counts<'a>(
    n: usize,
    xs: impl Iterator<Item = &'a Interaction>,
    key: impl Fn(&Interaction) -> usize,
) -> Vec<usize> {
    let mut counts = vec![0usize; n];
    for x in xs.filter(|x| x.feedback) {
        counts[key(x)] += 1;
    }
    counts
}
