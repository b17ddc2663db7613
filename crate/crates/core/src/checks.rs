//! Seeded verification instances and sweeps: hypergradient against finite
//! differences, the zero exposure gradient of positive-only batches, the
//! closed-form scenario derivative, estimator unbiasedness and gradient
//! variances.

use rand::Rng as _;
use rand::seq::SliceRandom;

use crate::bilevel::{closed_form_val_grad, hypergradient, inner_step, OuterLoss, ValGradScenario};
use crate::data::Interaction;
use crate::error::Result;
use crate::estimators::{
    mean_loss, minimize_expected_loss, monte_carlo_gradient_variance, var_ips, var_ubo, EstimatorKind, McSampling,
};
use crate::exposure::{ExposureParams, LearnedExposure, PairwiseExposure, PopularityTable, UnitExposure};
use crate::model::FactorModel;
use crate::numeric::{approx_eq, central_difference};
use crate::rng::{self, Stream};

pub const FD_STEP: f64 = 1e-5;
/// Absolute slack for components that vanish up to finite-difference noise.
pub const FD_ATOL: f64 = 1e-9;
const CLIP: f64 = 0.01;

/// Largest discrepancy found by a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub passed: bool,
    /// `|a - f| / max(|a|, |f|)` at the worst component.
    pub worst_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn compare(analytic: &[f64], numeric: &[f64], rtol: f64) -> Comparison {
    let mut out = Comparison {
        passed: true,
        worst_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut worst_excess = f64::NEG_INFINITY;
    for (k, (&a, &f)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(f.abs());
        let excess = (a - f).abs() - (rtol * scale + FD_ATOL);
        if !approx_eq(a, f, rtol, FD_ATOL) {
            out.passed = false;
        }
        if excess > worst_excess {
            worst_excess = excess;
            out.worst_index = k;
            out.analytic = a;
            out.numeric = f;
            out.worst_rel_err = if scale > 0.0 { (a - f).abs() / scale } else { 0.0 };
        }
    }
    out
}

/// A small bi-level problem with a learned exposure model.
#[derive(Debug, Clone)]
pub struct HyperInstance {
    pub model: FactorModel<f64>,
    pub exposure: ExposureParams<f64>,
    pub theta: PopularityTable<f64>,
    pub train: Vec<Interaction>,
    pub val: Vec<Interaction>,
    pub eta: f64,
    pub weight_decay: f64,
}

/// `n` users and items, dimension `d`, embeddings at scale 0.5, a random
/// gate, about 60% of cells in the training batch and four validation pairs.
pub fn hyper_instance(seed: u64, n: usize, d: usize) -> Result<HyperInstance> {
    let mut rng = rng::stream(seed, Stream::Synthesis);
    let model = FactorModel::init(n, n, d, seed, 0.5)?;
    let mut exposure = ExposureParams::init(n, d, seed, 0.5)?;
    for g in exposure.gate_weight_mut() {
        *g = rng.random_range(-0.8..0.8);
    }
    exposure.set_gate_bias(rng.random_range(-0.5..0.5));
    let counts: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let mut counts = counts;
    counts[0] += 1;
    let theta = PopularityTable::from_counts(&counts)?;

    let mut cells: Vec<(usize, usize)> = (0..n).flat_map(|u| (0..n).map(move |i| (u, i))).collect();
    cells.shuffle(&mut rng);
    let n_train = (cells.len() * 3) / 5;
    let train = cells[..n_train]
        .iter()
        .map(|&(u, i)| Interaction::new(u, i, rng.random_bool(0.4)))
        .collect();
    let val = cells[n_train..n_train + 4]
        .iter()
        .map(|&(u, i)| Interaction::new(u, i, rng.random_bool(0.5)))
        .collect();
    Ok(HyperInstance {
        model,
        exposure,
        theta,
        train,
        val,
        eta: rng.random_range(0.5..1.5),
        weight_decay: 0.0,
    })
}

impl HyperInstance {
    pub fn analytic(&self) -> Result<Vec<f64>> {
        let e = LearnedExposure {
            params: &self.exposure,
            theta: &self.theta,
        };
        hypergradient(&self.model, &e, &self.train, OuterLoss::Validation(&self.val), self.eta, self.weight_decay, CLIP)
    }

    /// Validation loss after the unrolled step, as a function of the flat
    /// exposure parameters.
    pub fn composed_loss(&self, alpha: &[f64]) -> Result<f64> {
        let p = ExposureParams::from_params(self.exposure.n_users(), self.exposure.dim(), alpha.to_vec())?;
        let e = LearnedExposure {
            params: &p,
            theta: &self.theta,
        };
        let stepped = inner_step(&self.model, &e, &self.train, self.eta, self.weight_decay, CLIP)?;
        mean_loss(&self.val, &stepped, &UnitExposure, EstimatorKind::Naive, CLIP)
    }

    pub fn numeric(&self) -> Result<Vec<f64>> {
        let mut err = None;
        let g = central_difference(self.exposure.params(), FD_STEP, |a| {
            self.composed_loss(a).unwrap_or_else(|e| {
                err.get_or_insert(e);
                f64::NAN
            })
        });
        match err {
            Some(e) => Err(e),
            None => Ok(g),
        }
    }

    pub fn check(&self, rtol: f64) -> Result<Comparison> {
        Ok(compare(&self.analytic()?, &self.numeric()?, rtol))
    }
}

/// Positive-only training batch with one free exposure value per pair.
/// Returns the analytic hypergradient and its finite-difference counterpart.
pub fn positive_only_hypergradient(seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let inst = hyper_instance(seed, 5, 3)?;
    let mut rng = rng::stream(seed, Stream::Sampling);
    let train: Vec<Interaction> = inst
        .train
        .iter()
        .map(|x| Interaction::new(x.user, x.item, true))
        .collect();
    let ex = PairwiseExposure::new(train.iter().map(|x| (x.pair(), rng.random_range(0.05..1.0))))?;
    let analytic = hypergradient(&inst.model, &ex, &train, OuterLoss::Validation(&inst.val), inst.eta, 0.0, CLIP)?;
    let numeric = central_difference(ex.values(), FD_STEP, |vals| {
        let mut e = ex.clone();
        e.values_mut().copy_from_slice(vals);
        let stepped = inner_step(&inst.model, &e, &train, inst.eta, 0.0, CLIP).expect("nonempty batch");
        mean_loss(&inst.val, &stepped, &UnitExposure, EstimatorKind::Naive, CLIP).expect("nonempty val")
    });
    Ok((analytic, numeric))
}

/// Random scenario on a 6 x 6 model with embeddings at scale 0.6.
pub fn random_scenario(seed: u64) -> Result<ValGradScenario<f64>> {
    let mut rng = rng::stream(seed, Stream::Synthesis);
    let model = FactorModel::init(6, 6, 4, seed, 0.6)?;
    let user = rng.random_range(0..6);
    let item = rng.random_range(0..6);
    let other = |rng: &mut rng::Rng, not: usize| loop {
        let k = rng.random_range(0..6);
        if k != not {
            break k;
        }
    };
    Ok(ValGradScenario {
        user,
        item,
        liked_item: other(&mut rng, item),
        disliked_item: other(&mut rng, item),
        liking_user: other(&mut rng, user),
        disliking_user: other(&mut rng, user),
        m_bar: rng.random_range(0.05..0.95),
        eta: rng.random_range(0.2..1.5),
        model,
    })
}

/// Finite-difference derivative of the unrolled validation loss in `m_bar`.
pub fn scenario_numeric(s: &ValGradScenario<f64>) -> Result<f64> {
    let hi = s.unrolled_val_loss(s.m_bar + FD_STEP)?;
    let lo = s.unrolled_val_loss(s.m_bar - FD_STEP)?;
    Ok((hi - lo) / (2.0 * FD_STEP))
}

/// Scenario where only the liked-item term of the bracket is nonzero:
/// `w_i1 . w_i > 0`, while `w_i2`, `w_u1` and `w_u2` are zero.
pub fn sign_case() -> ValGradScenario<f64> {
    let mut model = FactorModel::zeros(3, 3, 2);
    model.user_mut(0).copy_from_slice(&[0.4, -0.3]);
    model.item_mut(0).copy_from_slice(&[0.6, 0.2]);
    model.item_mut(1).copy_from_slice(&[0.5, 0.5]);
    ValGradScenario {
        model,
        user: 0,
        item: 0,
        liked_item: 1,
        disliked_item: 2,
        liking_user: 1,
        disliking_user: 2,
        m_bar: 0.3,
        eta: 0.5,
    }
}

pub fn closed_form_check(seed: u64, rtol: f64) -> Result<Comparison> {
    let s = random_scenario(seed)?;
    Ok(compare(&[closed_form_val_grad(&s)?], &[scenario_numeric(&s)?], rtol))
}

/// Worst `|argmin - gamma|` of the expected loss over the product grid.
pub fn unbiasedness_sweep(kind: EstimatorKind, gammas: &[f64], ms: &[f64], p_inits: &[f64]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &g in gammas {
        for &m in ms {
            for &p0 in p_inits {
                worst = worst.max((minimize_expected_loss(kind, g, m, p0)? - g).abs());
            }
        }
    }
    Ok(worst)
}

/// One row of the variance study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceRow {
    pub gamma: f64,
    pub m_bar: f64,
    pub p: f64,
    pub var_ips_closed: f64,
    pub var_ips_mc: f64,
    pub var_ubo_closed: f64,
    pub var_ubo_mc: f64,
    pub n_samples: usize,
}

impl VarianceRow {
    pub const CSV_HEADER: &'static str = "gamma,m_bar,p,var_ips_closed,var_ips_mc,var_ubo_closed,var_ubo_mc,n_samples";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.gamma,
            self.m_bar,
            self.p,
            self.var_ips_closed,
            self.var_ips_mc,
            self.var_ubo_closed,
            self.var_ubo_mc,
            self.n_samples
        )
    }

    /// Largest relative deviation of a Monte Carlo column from its closed form.
    pub fn max_rel_err(&self) -> f64 {
        let rel = |mc: f64, cf: f64| (mc - cf).abs() / cf.abs();
        rel(self.var_ips_mc, self.var_ips_closed).max(rel(self.var_ubo_mc, self.var_ubo_closed))
    }
}

pub const VARIANCE_GAMMAS: [f64; 3] = [0.2, 0.5, 0.8];
pub const VARIANCE_MS: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];
pub const VARIANCE_PS: [f64; 3] = [0.3, 0.5, 0.7];

/// Closed-form and Monte Carlo gradient variances over the product grid.
/// Grid point `k` draws from seed `seed + k`.
pub fn variance_study(
    gammas: &[f64],
    ms: &[f64],
    ps: &[f64],
    n_samples: usize,
    sampling: McSampling,
    seed: u64,
) -> Result<Vec<VarianceRow>> {
    let mut rows = Vec::with_capacity(gammas.len() * ms.len() * ps.len());
    for &gamma in gammas {
        for &m_bar in ms {
            for &p in ps {
                let mc = monte_carlo_gradient_variance(gamma, m_bar, p, n_samples, sampling, seed + rows.len() as u64)?;
                rows.push(VarianceRow {
                    gamma,
                    m_bar,
                    p,
                    var_ips_closed: var_ips(gamma, m_bar, p),
                    var_ips_mc: mc.ips,
                    var_ubo_closed: var_ubo(gamma, m_bar, p),
                    var_ubo_mc: mc.ubo,
                    n_samples,
                });
            }
        }
    }
    Ok(rows)
}
