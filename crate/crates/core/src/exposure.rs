//! Item popularity and the learned exposure model
//! `m(u, i) = r(w_i) * sigmoid(e_u . w_i) + (1 - r(w_i)) * theta_i`,
//! with the gate `r(x) = sigmoid(g . x + b)`.
//!
//! [`ExposureModel`] abstracts over where exposure values come from so the
//! same loss and hypergradient code serves fixed propensities, the learned
//! model, and free per-pair parameters.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::model::FactorModel;
use crate::rng::{self, Stream};
use crate::scalar::{axpy, dot, sigmoid, Scalar};

/// Square-root normalized positive count per item; the most popular item has 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityTable<T> {
    theta: Vec<T>,
}

impl<T: Scalar> PopularityTable<T> {
    pub fn from_pairs(n_items: usize, pairs: &[Interaction]) -> Result<Self> {
        let mut counts = vec![0usize; n_items];
        for x in pairs.iter().filter(|x| x.feedback) {
            counts[x.item] += 1;
        }
        Self::from_counts(&counts)
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let max = *counts.iter().max().unwrap_or(&0);
        if max == 0 {
            return Err(Error::NoPositiveFeedback);
        }
        let max = T::of(max as f64);
        Ok(PopularityTable {
            theta: counts
                .iter()
                .map(|&c| (T::of(c as f64) / max).sqrt())
                .collect(),
        })
    }

    #[inline]
    pub fn theta(&self, i: usize) -> T {
        self.theta[i]
    }

    pub fn values(&self) -> &[T] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

pub fn compute_popularity<T: Scalar>(ds: &Dataset) -> Result<PopularityTable<T>> {
    PopularityTable::from_pairs(ds.n_items(), ds.interactions())
}

/// Exposure parameters stored contiguously: user exposure embeddings
/// (`N x d`), gate weight (`d`), gate bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureParams<T> {
    n_users: usize,
    dim: usize,
    params: Vec<T>,
}

impl<T: Scalar> ExposureParams<T> {
    pub fn param_count(n_users: usize, dim: usize) -> usize {
        n_users * dim + dim + 1
    }

    /// User embeddings drawn like relevance embeddings; gate weight and bias
    /// start at zero, so the gate opens at 0.5.
    pub fn init(n_users: usize, dim: usize, seed: u64, scale: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be at least 1".into()));
        }
        let mut params = vec![T::zero(); Self::param_count(n_users, dim)];
        if scale > 0.0 {
            let normal = Normal::new(0.0, scale)
                .map_err(|e| Error::InvalidArgument(format!("init scale: {e}")))?;
            let mut rng = rng::stream(seed, Stream::ExposureInit);
            for p in &mut params[..n_users * dim] {
                *p = T::of(normal.sample(&mut rng));
            }
        }
        Ok(ExposureParams {
            n_users,
            dim,
            params,
        })
    }

    pub fn from_params(n_users: usize, dim: usize, params: Vec<T>) -> Result<Self> {
        if dim == 0 || params.len() != Self::param_count(n_users, dim) {
            return Err(Error::InvalidArgument(format!(
                "expected {} exposure parameters for {n_users}x{dim}, got {}",
                Self::param_count(n_users, dim),
                params.len()
            )));
        }
        Ok(ExposureParams {
            n_users,
            dim,
            params,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn user_emb(&self, u: usize) -> &[T] {
        &self.params[u * self.dim..(u + 1) * self.dim]
    }

    pub fn user_emb_mut(&mut self, u: usize) -> &mut [T] {
        &mut self.params[u * self.dim..(u + 1) * self.dim]
    }

    #[inline]
    pub fn gate_weight(&self) -> &[T] {
        let off = self.n_users * self.dim;
        &self.params[off..off + self.dim]
    }

    pub fn gate_weight_mut(&mut self) -> &mut [T] {
        let off = self.n_users * self.dim;
        &mut self.params[off..off + self.dim]
    }

    #[inline]
    pub fn gate_bias(&self) -> T {
        self.params[self.params.len() - 1]
    }

    pub fn set_gate_bias(&mut self, b: T) {
        let last = self.params.len() - 1;
        self.params[last] = b;
    }

    #[inline]
    pub(crate) fn user_offset(&self, u: usize) -> usize {
        u * self.dim
    }

    #[inline]
    pub(crate) fn gate_offset(&self) -> usize {
        self.n_users * self.dim
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Trade-off gate `sigmoid(g . x + b)` over an item embedding.
pub fn gate<T: Scalar>(params: &ExposureParams<T>, item_emb: &[T]) -> T {
    sigmoid(dot(params.gate_weight(), item_emb) + params.gate_bias())
}

/// Learned exposure estimate for (u, i).
pub fn estimate_exposure<T: Scalar>(
    params: &ExposureParams<T>,
    model: &FactorModel<T>,
    theta: &PopularityTable<T>,
    u: usize,
    i: usize,
) -> T {
    LearnedParts::new(params, model, theta, u, i).m
}

/// Source of exposure values `m(u, i)` and their derivatives.
///
/// Parameter gradients are written into flat slices of length
/// [`ExposureModel::n_params`]; models with no trainable parameters keep the
/// default no-op derivative methods.
pub trait ExposureModel<T: Scalar> {
    fn n_params(&self) -> usize {
        0
    }

    fn value(&self, model: &FactorModel<T>, u: usize, i: usize) -> T;

    /// Whether the value depends on the relevance item embedding.
    fn depends_on_item(&self) -> bool {
        false
    }

    /// `out += scale * dm/dw_i`.
    fn add_item_partial(&self, _model: &FactorModel<T>, _u: usize, _i: usize, _scale: T, _out: &mut [T]) {}

    /// `v . dm/dw_i`.
    fn item_partial_dot(&self, _model: &FactorModel<T>, _u: usize, _i: usize, _v: &[T]) -> T {
        T::zero()
    }

    /// `grad += scale * dm/dalpha`.
    fn add_param_grad(&self, _model: &FactorModel<T>, _u: usize, _i: usize, _scale: T, _grad: &mut [T]) {}

    /// `grad += scale * d(v . dm/dw_i)/dalpha`.
    fn add_param_grad_of_item_partial_dot(
        &self,
        _model: &FactorModel<T>,
        _u: usize,
        _i: usize,
        _v: &[T],
        _scale: T,
        _grad: &mut [T],
    ) {
    }
}

/// Exposure fixed at 1, as assumed on the unbiased validation set.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitExposure;

impl<T: Scalar> ExposureModel<T> for UnitExposure {
    fn value(&self, _: &FactorModel<T>, _: usize, _: usize) -> T {
        T::one()
    }
}

/// Item popularity used directly as the propensity, floored at `floor`.
#[derive(Debug, Clone, Copy)]
pub struct PopularityExposure<'a, T> {
    pub theta: &'a PopularityTable<T>,
    pub floor: T,
}

impl<T: Scalar> ExposureModel<T> for PopularityExposure<'_, T> {
    fn value(&self, _: &FactorModel<T>, _: usize, i: usize) -> T {
        self.theta.theta(i).max(self.floor)
    }
}

/// Known exposure matrix (row-major `N x M`), e.g. semi-synthetic ground truth.
#[derive(Debug, Clone, Copy)]
pub struct FixedExposure<'a, T> {
    pub m: &'a [T],
    pub n_items: usize,
}

impl<T: Scalar> ExposureModel<T> for FixedExposure<'_, T> {
    fn value(&self, _: &FactorModel<T>, u: usize, i: usize) -> T {
        self.m[u * self.n_items + i]
    }
}

/// The learned exposure model.
#[derive(Debug, Clone, Copy)]
pub struct LearnedExposure<'a, T> {
    pub params: &'a ExposureParams<T>,
    pub theta: &'a PopularityTable<T>,
}

/// Intermediate quantities of the learned model at one (u, i).
struct LearnedParts<'a, T> {
    e_u: &'a [T],
    w_i: &'a [T],
    g: &'a [T],
    theta: T,
    r: T,
    dr: T,
    q: T,
    dq: T,
    m: T,
}

impl<'a, T: Scalar> LearnedParts<'a, T> {
    #[inline]
    fn new(
        params: &'a ExposureParams<T>,
        model: &'a FactorModel<T>,
        theta: &PopularityTable<T>,
        u: usize,
        i: usize,
    ) -> Self {
        let w_i = model.item(i);
        let e_u = params.user_emb(u);
        let g = params.gate_weight();
        let r = sigmoid(dot(g, w_i) + params.gate_bias());
        let q = sigmoid(dot(e_u, w_i));
        let t = theta.theta(i);
        let one = T::one();
        LearnedParts {
            e_u,
            w_i,
            g,
            theta: t,
            r,
            dr: r * (one - r),
            q,
            dq: q * (one - q),
            m: r * q + (one - r) * t,
        }
    }
}

impl<T: Scalar> ExposureModel<T> for LearnedExposure<'_, T> {
    fn n_params(&self) -> usize {
        self.params.params().len()
    }

    fn value(&self, model: &FactorModel<T>, u: usize, i: usize) -> T {
        LearnedParts::new(self.params, model, self.theta, u, i).m
    }

    fn depends_on_item(&self) -> bool {
        true
    }

    fn add_item_partial(&self, model: &FactorModel<T>, u: usize, i: usize, scale: T, out: &mut [T]) {
        let p = LearnedParts::new(self.params, model, self.theta, u, i);
        axpy(scale * p.dr * (p.q - p.theta), p.g, out);
        axpy(scale * p.r * p.dq, p.e_u, out);
    }

    fn item_partial_dot(&self, model: &FactorModel<T>, u: usize, i: usize, v: &[T]) -> T {
        let p = LearnedParts::new(self.params, model, self.theta, u, i);
        p.dr * (p.q - p.theta) * dot(v, p.g) + p.r * p.dq * dot(v, p.e_u)
    }

    fn add_param_grad(&self, model: &FactorModel<T>, u: usize, i: usize, scale: T, grad: &mut [T]) {
        let p = LearnedParts::new(self.params, model, self.theta, u, i);
        let d = self.params.dim();
        let eo = self.params.user_offset(u);
        axpy(scale * p.r * p.dq, p.w_i, &mut grad[eo..eo + d]);
        let go = self.params.gate_offset();
        let dz = scale * p.dr * (p.q - p.theta);
        axpy(dz, p.w_i, &mut grad[go..go + d]);
        grad[go + d] += dz;
    }

    fn add_param_grad_of_item_partial_dot(
        &self,
        model: &FactorModel<T>,
        u: usize,
        i: usize,
        v: &[T],
        scale: T,
        grad: &mut [T],
    ) {
        let p = LearnedParts::new(self.params, model, self.theta, u, i);
        let one = T::one();
        let two = one + one;
        let vg = dot(v, p.g);
        let ve = dot(v, p.e_u);
        let gap = p.q - p.theta;
        let d = self.params.dim();

        // user exposure embedding
        let eo = self.params.user_offset(u);
        let coef_w = p.dr * vg * p.dq + p.r * p.dq * (one - two * p.q) * ve;
        axpy(scale * coef_w, p.w_i, &mut grad[eo..eo + d]);
        axpy(scale * p.r * p.dq, v, &mut grad[eo..eo + d]);

        // gate pre-activation z = g . w_i + b
        let dk_dz = p.dr * (one - two * p.r) * gap * vg + p.dr * p.dq * ve;
        let go = self.params.gate_offset();
        axpy(scale * dk_dz, p.w_i, &mut grad[go..go + d]);
        axpy(scale * p.dr * gap, v, &mut grad[go..go + d]);
        grad[go + d] += scale * dk_dz;
    }
}

/// One free exposure parameter per registered (user, item) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseExposure<T> {
    index: HashMap<(usize, usize), usize>,
    values: Vec<T>,
}

impl<T: Scalar> PairwiseExposure<T> {
    pub fn new(entries: impl IntoIterator<Item = ((usize, usize), T)>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut values = Vec::new();
        for (pair, v) in entries {
            if !(v > T::zero() && v <= T::one()) {
                return Err(Error::InvalidArgument(format!(
                    "free exposure for {pair:?} must lie in (0, 1], got {v}"
                )));
            }
            if index.insert(pair, values.len()).is_some() {
                return Err(Error::InvalidArgument(format!("pair {pair:?} registered twice")));
            }
            values.push(v);
        }
        Ok(PairwiseExposure { index, values })
    }

    /// Parameter slot of a registered pair.
    pub fn slot(&self, u: usize, i: usize) -> Option<usize> {
        self.index.get(&(u, i)).copied()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    fn expect_slot(&self, u: usize, i: usize) -> usize {
        self.slot(u, i)
            .unwrap_or_else(|| panic!("pair ({u}, {i}) has no free exposure parameter"))
    }
}

impl<T: Scalar> ExposureModel<T> for PairwiseExposure<T> {
    fn n_params(&self) -> usize {
        self.values.len()
    }

    fn value(&self, _: &FactorModel<T>, u: usize, i: usize) -> T {
        self.values[self.expect_slot(u, i)]
    }

    fn add_param_grad(&self, _: &FactorModel<T>, u: usize, i: usize, scale: T, grad: &mut [T]) {
        grad[self.expect_slot(u, i)] += scale;
    }
}
