use std::collections::HashSet;

use rand::seq::index;

use super::{Dataset, Interaction, PairUniverse};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    UnbiasedVal,
    HyperVal,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 4] = [
        SplitTag::Train,
        SplitTag::UnbiasedVal,
        SplitTag::HyperVal,
        SplitTag::Test,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::UnbiasedVal => "unbiased_val",
            SplitTag::HyperVal => "hyper_val",
            SplitTag::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        SplitTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or(())
    }
}

/// Labeled pair sets for one experiment. All four sets are pairwise disjoint.
///
/// `train` holds the recorded training interactions; under
/// [`PairUniverse::Full`] the trainer additionally treats every unrecorded
/// cell outside the other sets as feedback 0 (see [`SplitAssignment::training_pairs`]).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitAssignment {
    pub train: Vec<Interaction>,
    /// Pairs whose exposure is taken to be 1.
    pub unbiased_val: Vec<Interaction>,
    pub hyper_val: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

/// Moves, for each of the most active users, their most popular positive and
/// most popular negative item out of the training pool.
///
/// Activity is the user's positive count; popularity is the global positive
/// count of the item. Ties go to the lower index.
pub fn build_unbiased_validation(ds: &Dataset, active_fraction: f64) -> Result<SplitAssignment> {
    if !(active_fraction > 0.0 && active_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "active fraction must lie in (0, 1], got {active_fraction}"
        )));
    }
    let popularity = ds.item_positive_counts();
    let activity = ds.user_positive_counts();
    let n_active = ((active_fraction * ds.n_users() as f64) + 1e-9).floor() as usize;

    let mut users: Vec<usize> = (0..ds.n_users()).collect();
    users.sort_by(|&a, &b| activity[b].cmp(&activity[a]).then(a.cmp(&b)));
    let active: HashSet<usize> = users.into_iter().take(n_active).collect();

    // (user) -> best positive / negative record so far
    let mut best_pos: Vec<Option<Interaction>> = vec![None; ds.n_users()];
    let mut best_neg: Vec<Option<Interaction>> = vec![None; ds.n_users()];
    let better = |cand: &Interaction, cur: &Option<Interaction>| match cur {
        None => true,
        Some(c) => {
            let (pc, pk) = (popularity[cand.item], popularity[c.item]);
            pc > pk || (pc == pk && cand.item < c.item)
        }
    };
    for x in ds.interactions().iter().filter(|x| active.contains(&x.user)) {
        let slot = if x.feedback {
            &mut best_pos[x.user]
        } else {
            &mut best_neg[x.user]
        };
        if better(x, slot) {
            *slot = Some(*x);
        }
    }

    let mut unbiased_val: Vec<Interaction> = best_pos
        .into_iter()
        .chain(best_neg)
        .flatten()
        .collect();
    unbiased_val.sort();
    let chosen: HashSet<_> = unbiased_val.iter().map(Interaction::pair).collect();
    let train = ds
        .interactions()
        .iter()
        .filter(|x| !chosen.contains(&x.pair()))
        .copied()
        .collect();
    Ok(SplitAssignment {
        train,
        unbiased_val,
        ..Default::default()
    })
}

/// Full split pipeline: holds out `test`, builds the unbiased validation set
/// from the remaining records, then optionally samples hyper-validation.
pub fn prepare_splits(
    ds: &Dataset,
    test: Vec<Interaction>,
    active_fraction: f64,
    hyper_fraction: Option<f64>,
    seed: u64,
) -> Result<SplitAssignment> {
    let pool = ds.without_pairs(&test);
    let mut splits = build_unbiased_validation(&pool, active_fraction)?;
    if let Some(f) = hyper_fraction {
        splits = splits.split_hyper_validation(f, seed)?;
    }
    splits.with_test(test)
}

impl SplitAssignment {
    /// Samples `fraction` of the current training records into the hyper-validation set.
    pub fn split_hyper_validation(mut self, fraction: f64, seed: u64) -> Result<SplitAssignment> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "hyper-validation fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let n = self.train.len();
        let k = (fraction * n as f64).round() as usize;
        let mut rng = rng::stream(seed, Stream::Split);
        let mut picked: Vec<usize> = index::sample(&mut rng, n, k).into_vec();
        picked.sort_unstable();
        let mut mask = vec![false; n];
        for &p in &picked {
            mask[p] = true;
        }
        let mut hyper: Vec<Interaction> = picked.iter().map(|&p| self.train[p]).collect();
        hyper.sort();
        let train = self
            .train
            .iter()
            .zip(&mask)
            .filter(|(_, m)| !**m)
            .map(|(x, _)| *x)
            .collect();
        self.train = train;
        self.hyper_val.extend(hyper);
        Ok(self)
    }

    /// Attaches a test set, removing any overlapping pairs from the training records.
    pub fn with_test(mut self, test: Vec<Interaction>) -> Result<SplitAssignment> {
        let test_pairs: HashSet<_> = test.iter().map(Interaction::pair).collect();
        if test_pairs.len() != test.len() {
            return Err(Error::InvalidArgument("test set repeats a pair".into()));
        }
        if self
            .unbiased_val
            .iter()
            .chain(&self.hyper_val)
            .any(|x| test_pairs.contains(&x.pair()))
        {
            return Err(Error::InvalidArgument(
                "test pairs overlap a validation set".into(),
            ));
        }
        self.train.retain(|x| !test_pairs.contains(&x.pair()));
        self.test = test;
        Ok(self)
    }

    pub fn set(&self, tag: SplitTag) -> &[Interaction] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::UnbiasedVal => &self.unbiased_val,
            SplitTag::HyperVal => &self.hyper_val,
            SplitTag::Test => &self.test,
        }
    }

    pub(crate) fn set_mut(&mut self, tag: SplitTag) -> &mut Vec<Interaction> {
        match tag {
            SplitTag::Train => &mut self.train,
            SplitTag::UnbiasedVal => &mut self.unbiased_val,
            SplitTag::HyperVal => &mut self.hyper_val,
            SplitTag::Test => &mut self.test,
        }
    }

    pub fn tagged(&self) -> impl Iterator<Item = (SplitTag, &[Interaction])> {
        SplitTag::ALL.into_iter().map(move |t| (t, self.set(t)))
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (tag, set) in self.tagged() {
            for x in set {
                if !seen.insert(x.pair()) {
                    return Err(Error::InvalidArgument(format!(
                        "pair ({}, {}) appears twice (last in {})",
                        x.user,
                        x.item,
                        tag.as_str()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Pairs the training loss sums over.
    ///
    /// Under [`PairUniverse::Full`] this is every grid cell not held out in a
    /// validation or test set, labeled by its training record or 0 when there
    /// is none. Order is row-major for the full grid and record order otherwise.
    pub fn training_pairs(&self, ds: &Dataset) -> Vec<Interaction> {
        match ds.pair_universe {
            PairUniverse::Observed => self.train.clone(),
            PairUniverse::Full => {
                let (n, m) = (ds.n_users(), ds.n_items());
                // 0 = unrecorded, 1 = train negative, 2 = train positive, 3 = held out
                let mut state = vec![0u8; n * m];
                for x in &self.train {
                    state[x.user * m + x.item] = 1 + x.feedback as u8;
                }
                for x in self.unbiased_val.iter().chain(&self.hyper_val).chain(&self.test) {
                    state[x.user * m + x.item] = 3;
                }
                let mut out = Vec::with_capacity(n * m);
                for u in 0..n {
                    for i in 0..m {
                        match state[u * m + i] {
                            3 => {}
                            s => out.push(Interaction::new(u, i, s == 2)),
                        }
                    }
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ia(u: usize, i: usize, f: bool) -> Interaction {
        Interaction::new(u, i, f)
    }

    /// User 0 (A) likes i1 (5 positives overall) and i2 (2), dislikes i3 (4).
    fn popularity_instance() -> Dataset {
        let mut xs = vec![ia(0, 1, true), ia(0, 2, true), ia(0, 3, false)];
        // other users give item popularity: i1 -> 5, i2 -> 2, i3 -> 4
        for u in 1..5 {
            xs.push(ia(u, 1, true));
        }
        xs.push(ia(1, 2, true));
        for u in 1..5 {
            xs.push(ia(u, 3, true));
        }
        Dataset::new(5, 4, xs).unwrap()
    }

    #[test]
    fn picks_most_popular_positive_and_negative() {
        let ds = popularity_instance();
        // user 0 has 2 positives, user 1 has 3 -> top-1 is user 1, so use 1.0
        let s = build_unbiased_validation(&ds, 1.0).unwrap();
        let for_a: Vec<_> = s.unbiased_val.iter().filter(|x| x.user == 0).copied().collect();
        assert_eq!(for_a, vec![ia(0, 1, true), ia(0, 3, false)]);
        assert!(!s.train.contains(&ia(0, 1, true)));
        assert!(!s.train.contains(&ia(0, 3, false)));
        assert!(s.train.contains(&ia(0, 2, true)));
    }

    #[test]
    fn zero_active_users_leaves_train_intact() {
        let ds = popularity_instance();
        let s = build_unbiased_validation(&ds, 0.1).unwrap();
        assert!(s.unbiased_val.is_empty());
        assert_eq!(s.train, ds.interactions());
    }

    #[test]
    fn popularity_ties_go_to_lowest_item() {
        // items 2 and 5 both have popularity 2 among user 0's positives;
        // items 1 and 4 have popularity 0 among user 0's negatives.
        let xs = vec![
            ia(0, 5, true),
            ia(0, 2, true),
            ia(0, 4, false),
            ia(0, 1, false),
            ia(1, 5, true),
            ia(1, 2, true),
        ];
        let ds = Dataset::new(2, 6, xs).unwrap();
        let s = build_unbiased_validation(&ds, 0.5).unwrap();
        assert_eq!(s.unbiased_val, vec![ia(0, 1, false), ia(0, 2, true)]);
    }

    #[test]
    fn users_missing_one_side_contribute_what_exists() {
        let xs = vec![ia(0, 0, true), ia(0, 1, true), ia(1, 0, false)];
        let ds = Dataset::new(2, 2, xs).unwrap();
        let s = build_unbiased_validation(&ds, 1.0).unwrap();
        assert_eq!(s.unbiased_val, vec![ia(0, 0, true), ia(1, 0, false)]);
    }

    #[test]
    fn rejects_fraction_out_of_range() {
        let ds = popularity_instance();
        assert!(build_unbiased_validation(&ds, 0.0).is_err());
        assert!(build_unbiased_validation(&ds, 1.5).is_err());
    }

    fn thousand() -> SplitAssignment {
        SplitAssignment {
            train: (0..1000).map(|k| ia(k / 40, k % 40, k % 3 == 0)).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn hyper_split_is_exact_and_reproducible() {
        let a = thousand().split_hyper_validation(0.1, 9).unwrap();
        let b = thousand().split_hyper_validation(0.1, 9).unwrap();
        assert_eq!(a.hyper_val.len(), 100);
        assert_eq!(a.train.len(), 900);
        assert_eq!(a, b);
        a.check_disjoint().unwrap();
    }

    #[test]
    fn hyper_split_depends_on_seed() {
        let a = thousand().split_hyper_validation(0.1, 1).unwrap();
        let b = thousand().split_hyper_validation(0.1, 2).unwrap();
        assert_ne!(a.hyper_val, b.hyper_val);
    }

    #[test]
    fn hyper_split_rejects_degenerate_fractions() {
        assert!(thousand().split_hyper_validation(0.0, 1).is_err());
        assert!(thousand().split_hyper_validation(1.0, 1).is_err());
    }

    #[test]
    fn full_universe_fills_unrecorded_cells_and_skips_held_out() {
        let xs = vec![ia(0, 0, true), ia(1, 1, false)];
        let ds = Dataset::new(2, 2, xs).unwrap();
        let s = SplitAssignment {
            train: vec![ia(0, 0, true)],
            unbiased_val: vec![ia(1, 1, false)],
            ..Default::default()
        }
        .with_test(vec![ia(0, 1, true)])
        .unwrap();
        let pairs = s.training_pairs(&ds);
        assert_eq!(pairs, vec![ia(0, 0, true), ia(1, 0, false)]);
    }
}
