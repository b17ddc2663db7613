//! Ranking metrics, the self-normalized IPS tuning score, and per-user
//! Pearson correlation between estimated and true exposure.
//!
//! DCG@K is `sum_k label_k / log2(k + 1)`; MAP@K divides the summed
//! precision at hit positions by `min(K, positives)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::model::FactorModel;
use crate::scalar::Scalar;

pub const DEFAULT_KS: [usize; 3] = [1, 2, 3];

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    Ok(())
}

/// Discount of rank `k` (1-based).
#[inline]
pub fn discount(k: usize) -> f64 {
    1.0 / ((k + 1) as f64).log2()
}

pub fn dcg_at_k(labels: &[bool], k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(labels
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &l)| l)
        .map(|(idx, _)| discount(idx + 1))
        .sum())
}

pub fn map_at_k(labels: &[bool], k: usize) -> Result<f64> {
    check_k(k)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (idx, _) in labels.iter().take(k).enumerate().filter(|(_, &l)| l) {
        hits += 1;
        sum += hits as f64 / (idx + 1) as f64;
    }
    Ok(sum / k.min(positives) as f64)
}

/// `sum(w v) / sum(w)` with `w = label / max(m_bar, clip_floor)`.
pub fn snips_metric(values: &[f64], m_bar: &[f64], labels: &[bool], clip_floor: f64) -> Result<f64> {
    if values.len() != m_bar.len() || values.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "snips inputs differ in length: {} values, {} propensities, {} labels",
            values.len(),
            m_bar.len(),
            labels.len()
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for ((&v, &m), &l) in values.iter().zip(m_bar).zip(labels) {
        if l {
            let w = 1.0 / m.max(clip_floor);
            num += w * v;
            den += w;
        }
    }
    if den == 0.0 {
        return Err(Error::Precondition("snips total weight is zero (no positive pairs)".into()));
    }
    Ok(num / den)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Mean over users of the Pearson correlation between the row-major
/// `n_users x n_items` matrices. Users with a constant row are skipped.
pub fn mean_user_pcc<T: Scalar>(m_bar: &[T], m: &[T], n_users: usize, n_items: usize) -> Result<f64> {
    let n = n_users * n_items;
    if m_bar.len() != n || m.len() != n {
        return Err(Error::InvalidArgument(format!(
            "pcc expects {n_users}x{n_items} matrices, got {} and {}",
            m_bar.len(),
            m.len()
        )));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut a = vec![0.0; n_items];
    let mut b = vec![0.0; n_items];
    for u in 0..n_users {
        let row = u * n_items..(u + 1) * n_items;
        for (dst, src) in a.iter_mut().zip(&m_bar[row.clone()]) {
            *dst = src.as_f64();
        }
        for (dst, src) in b.iter_mut().zip(&m[row]) {
            *dst = src.as_f64();
        }
        match pearson(&a, &b) {
            Some(r) => {
                total += r;
                used += 1;
            }
            None => log::warn!("pcc: user {u} has a constant exposure row; skipped"),
        }
    }
    if used == 0 {
        return Err(Error::Precondition("pcc: every user has a constant exposure row".into()));
    }
    Ok(total / used as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dcg,
    Map,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Dcg => "dcg",
            Metric::Map => "map",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcg" => Ok(Metric::Dcg),
            "map" => Ok(Metric::Map),
            other => Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

/// Metric values averaged over users, keyed by (metric, K).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    pub n_users: usize,
    pub values: BTreeMap<(Metric, usize), f64>,
}

impl Evaluation {
    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        self.values.get(&(metric, k)).copied()
    }

    /// Flat names such as `dcg@3`.
    pub fn named(&self) -> BTreeMap<String, f64> {
        self.values
            .iter()
            .map(|(&(m, k), &v)| (format!("{m}@{k}"), v))
            .collect()
    }
}

/// Labels of `items` ordered by descending score, ties by ascending item index.
pub fn ranked_labels<T: Scalar>(model: &FactorModel<T>, user: usize, items: &[(usize, bool)]) -> Vec<bool> {
    let mut scored: Vec<(f64, usize, bool)> = items
        .iter()
        .map(|&(i, l)| (model.relevance_score(user, i).as_f64(), i, l))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, _, l)| l).collect()
}

/// Ranks each user's test items and averages DCG@K and MAP@K over users.
pub fn evaluate<T: Scalar>(model: &FactorModel<T>, test: &[Interaction], ks: &[usize]) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    if ks.is_empty() {
        return Err(Error::InvalidArgument("no cutoffs given".into()));
    }
    for &k in ks {
        check_k(k)?;
    }
    let mut per_user: BTreeMap<usize, Vec<(usize, bool)>> = BTreeMap::new();
    for x in test {
        per_user.entry(x.user).or_default().push((x.item, x.feedback));
    }
    let mut values: BTreeMap<(Metric, usize), f64> = BTreeMap::new();
    for (&u, items) in &per_user {
        let labels = ranked_labels(model, u, items);
        for &k in ks {
            *values.entry((Metric::Dcg, k)).or_default() += dcg_at_k(&labels, k)?;
            *values.entry((Metric::Map, k)).or_default() += map_at_k(&labels, k)?;
        }
    }
    let n = per_user.len();
    for v in values.values_mut() {
        *v /= n as f64;
    }
    Ok(Evaluation { n_users: n, values })
}

/// One metric value with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// `None` for aggregate rows.
    pub seed: Option<u64>,
    pub metric: String,
    pub k: usize,
    pub value: f64,
}

/// Per-seed metric values plus their mean and standard deviation across seeds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn push(&mut self, method: &str, seed: u64, eval: &Evaluation) {
        for (&(m, k), &v) in &eval.values {
            self.rows.push(ReportRow {
                method: method.to_owned(),
                seed: Some(seed),
                metric: m.as_str().to_owned(),
                k,
                value: v,
            });
        }
    }

    /// A single per-seed value outside the ranking metrics (for example exposure PCC with `k = 0`).
    pub fn push_value(&mut self, method: &str, seed: u64, metric: &str, k: usize, value: f64) {
        self.rows.push(ReportRow {
            method: method.to_owned(),
            seed: Some(seed),
            metric: metric.to_owned(),
            k,
            value,
        });
    }

    /// Appends `mean` and `std` rows (sample standard deviation, 0 for one seed)
    /// for every (method, metric, K) group of per-seed rows.
    pub fn add_summary(&mut self) {
        let mut groups: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.seed.is_some()) {
            groups
                .entry((r.method.clone(), r.metric.clone(), r.k))
                .or_default()
                .push(r.value);
        }
        for ((method, metric, k), vals) in groups {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            for (suffix, value) in [("mean", mean), ("std", std)] {
                self.rows.push(ReportRow {
                    method: method.clone(),
                    seed: None,
                    metric: format!("{metric}_{suffix}"),
                    k,
                    value,
                });
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,seed,metric,K,value\n");
        for r in &self.rows {
            let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "all".into());
            out.push_str(&format!("{},{},{},{},{}\n", r.method, seed, r.metric, r.k, r.value));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn find(&self, method: &str, seed: Option<u64>, metric: &str, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.seed == seed && r.metric == metric && r.k == k)
            .map(|r| r.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn dcg_reference_values() {
        assert!(close(dcg_at_k(&[true], 1).unwrap(), 1.0));
        assert!(close(dcg_at_k(&[true, false, true], 3).unwrap(), 1.5));
        assert!(close(dcg_at_k(&[false; 3], 2).unwrap(), 0.0));
        assert!(close(dcg_at_k(&[true], 5).unwrap(), 1.0));
        assert!(dcg_at_k(&[true], 0).is_err());
    }

    #[test]
    fn map_reference_values() {
        assert!((map_at_k(&[true, false, true], 3).unwrap() - 0.833333).abs() < 1e-6);
        assert!(close(map_at_k(&[true], 1).unwrap(), 1.0));
        assert!(close(map_at_k(&[false, true], 2).unwrap(), 0.5));
        assert!(close(map_at_k(&[false, false], 2).unwrap(), 0.0));
        // normalizer counts positives beyond the cutoff
        assert!(close(map_at_k(&[true, false, true, true], 2).unwrap(), 0.5));
    }

    #[test]
    fn snips_reference_values() {
        let v = [0.2, 0.9, 0.5];
        assert!(close(snips_metric(&v, &[1.0; 3], &[true, false, true], 0.01).unwrap(), 0.35));
        assert!(close(snips_metric(&[0.7], &[0.3], &[true], 0.01).unwrap(), 0.7));
        // weights 2:1
        let got = snips_metric(&[1.0, 4.0], &[0.5, 1.0], &[true, true], 0.01).unwrap();
        assert!(close(got, (2.0 * 1.0 + 4.0) / 3.0));
        assert!(snips_metric(&[1.0], &[0.5], &[false], 0.01).is_err());
    }

    #[test]
    fn pcc_reference_values() {
        let m = [0.1, 0.5, 0.3, 0.9, 0.2, 0.4];
        assert!(close(mean_user_pcc(&m, &m, 2, 3).unwrap(), 1.0));
        let neg: Vec<f64> = m.iter().map(|x| 1.0 - x).collect();
        assert!(close(mean_user_pcc(&neg, &m, 2, 3).unwrap(), -1.0));
        let aff: Vec<f64> = m.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!(close(mean_user_pcc(&aff, &m, 2, 3).unwrap(), 1.0));
    }

    #[test]
    fn pcc_skips_constant_rows() {
        let est = [0.1, 0.2, 0.3, 0.5, 0.5, 0.5];
        let truth = [0.2, 0.4, 0.6, 0.1, 0.2, 0.3];
        assert!(close(mean_user_pcc(&est, &truth, 2, 3).unwrap(), 1.0));
        assert!(mean_user_pcc(&[0.5; 4], &truth[..4], 2, 2).is_err());
    }

    fn model_with_scores(scores: &[f64]) -> FactorModel<f64> {
        // d = 1, user embedding 1, item embedding = score
        let mut params = vec![1.0];
        params.extend_from_slice(scores);
        FactorModel::from_params(1, scores.len(), 1, params).unwrap()
    }

    #[test]
    fn evaluate_single_hit_ranked_first() {
        let model = model_with_scores(&[2.0, -1.0]);
        let test = [Interaction::new(0, 0, true), Interaction::new(0, 1, false)];
        let e = evaluate(&model, &test, &DEFAULT_KS).unwrap();
        for k in DEFAULT_KS {
            assert!(close(e.get(Metric::Dcg, k).unwrap(), 1.0));
            assert!(close(e.get(Metric::Map, k).unwrap(), 1.0));
        }
    }

    #[test]
    fn ties_fall_back_to_item_index() {
        let model = model_with_scores(&[0.5, 0.5, 0.5]);
        assert_eq!(ranked_labels(&model, 0, &[(2, true), (0, false), (1, true)]), vec![false, true, true]);
    }

    #[test]
    fn identical_users_average_to_single_user_value() {
        let params = vec![1.0, 1.0, 0.3, 2.0, -0.4];
        let model = FactorModel::from_params(2, 3, 1, params).unwrap();
        let one = [Interaction::new(0, 0, true), Interaction::new(0, 1, false), Interaction::new(0, 2, true)];
        let two: Vec<Interaction> = one
            .iter()
            .flat_map(|x| [*x, Interaction::new(1, x.item, x.feedback)])
            .collect();
        assert_eq!(evaluate(&model, &one, &DEFAULT_KS).unwrap().values, evaluate(&model, &two, &DEFAULT_KS).unwrap().values);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let model = model_with_scores(&[1.0]);
        assert!(evaluate(&model, &[], &DEFAULT_KS).is_err());
    }

    #[test]
    fn report_summary_and_csv() {
        let mut report = MetricReport::default();
        for (seed, v) in [(1, 0.5), (2, 0.7)] {
            let mut e = Evaluation::default();
            e.values.insert((Metric::Dcg, 1), v);
            report.push("ubo", seed, &e);
        }
        report.add_summary();
        assert!(close(report.find("ubo", None, "dcg_mean", 1).unwrap(), 0.6));
        assert!(close(report.find("ubo", None, "dcg_std", 1).unwrap(), 0.02f64.sqrt()));
        let csv = report.to_csv();
        assert!(csv.starts_with("method,seed,metric,K,value\nubo,1,dcg,1,0.5\n"));
        let back: MetricReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
