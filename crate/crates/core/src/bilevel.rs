//! Training: single-level baselines, joint and alternating exposure fitting,
//! and bi-level fitting of the exposure parameters through an exact
//! hypergradient of a one-step unrolled inner update.
//!
//! With `w' = w - eta (G(a) + lambda w)`, `G = dL_train/dw`, the hypergradient
//! of an outer loss `L_out(w')` is `-eta d(v . G)/da` with `v = dL_out/dw`
//! at `w'` held fixed. Per training pair `v . G` is
//! `l_s (v_u . w_i + v_i . w_u) + l_m (v_i . dm/dw_i)`, so its derivative in
//! the exposure parameters needs the second derivatives `l_sm`, `l_mm` and
//! the derivative of `v_i . dm/dw_i`, all available in closed form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Interaction, SplitAssignment, SyntheticGroundTruth};
use crate::error::{Error, Result};
use crate::estimators::{batch_loss, mean_loss, pair_derivatives, EstimatorKind, DEFAULT_CLIP_FLOOR};
use crate::exposure::{
    estimate_exposure, ExposureModel, ExposureParams, LearnedExposure, PairwiseExposure, PopularityExposure,
    PopularityTable, UnitExposure,
};
use crate::metrics::{discount, evaluate, mean_user_pcc, snips_metric, DEFAULT_KS};
use crate::model::FactorModel;
use crate::rng::{self, Stream};
use crate::scalar::{dot, sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Naive,
    RelMf,
    Umf,
    Ubo,
    JointOpt,
    AlterOpt,
    BiOpt2,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Naive,
        Method::RelMf,
        Method::Umf,
        Method::Ubo,
        Method::JointOpt,
        Method::AlterOpt,
        Method::BiOpt2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::RelMf => "relmf",
            Method::Umf => "umf",
            Method::Ubo => "ubo",
            Method::JointOpt => "jointopt",
            Method::AlterOpt => "alteropt",
            Method::BiOpt2 => "biopt2",
        }
    }

    /// Whether the method fits exposure parameters.
    pub fn learns_exposure(self) -> bool {
        matches!(self, Method::Ubo | Method::JointOpt | Method::AlterOpt | Method::BiOpt2)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilevelConfig {
    /// Relevance learning rate; also the step of the unrolled inner update.
    pub inner_lr: f64,
    /// Exposure learning rate.
    pub outer_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// L2 penalty on the relevance parameters only.
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub dim: usize,
    pub init_scale: f64,
    pub clip_floor: f64,
    pub ks: Vec<usize>,
    /// Record exposure PCC after each of the first this many mini-batches.
    pub pcc_iterations: usize,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            inner_lr: 1e-3,
            outer_lr: 1e-3,
            batch_size: 1024,
            epochs: 100,
            seed: 0,
            weight_decay: 0.0,
            optimizer: OptimizerKind::Adam,
            dim: 50,
            init_scale: 0.1,
            clip_floor: DEFAULT_CLIP_FLOOR,
            ks: DEFAULT_KS.to_vec(),
            pcc_iterations: 100,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return bad(format!("inner_lr must be nonnegative, got {}", self.inner_lr));
        }
        if !(self.outer_lr >= 0.0 && self.outer_lr.is_finite()) {
            return bad(format!("outer_lr must be nonnegative, got {}", self.outer_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if !(self.clip_floor > 0.0 && self.clip_floor <= 1.0) {
            return bad(format!("clip_floor must lie in (0, 1], got {}", self.clip_floor));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be a nonempty list of positive cutoffs".into());
        }
        Ok(())
    }
}

/// Plain SGD or Adam over a flat parameter slice.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => n_params,
        };
        Optimizer {
            kind,
            lr: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            m: vec![T::zero(); moments],
            v: vec![T::zero(); moments],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let one = T::one();
                let c1 = one - self.beta1.powi(self.t);
                let c2 = one - self.beta2.powi(self.t);
                for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = self.beta1 * *m + (one - self.beta1) * g;
                    *v = self.beta2 * *v + (one - self.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
    pub pcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub pcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum TraceRecord {
    Epoch(EpochRecord),
    Iteration(IterationRecord),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Epoch(e) => Some(e),
            TraceRecord::Iteration(_) => None,
        })
    }

    pub fn iterations(&self) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Iteration(i) => Some(i),
            TraceRecord::Epoch(_) => None,
        })
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(n, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::InvalidArgument(format!("trace line {}: {e}", n + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(TrainTrace { records })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    pub model: FactorModel<T>,
    pub exposure: Option<ExposureParams<T>>,
    pub trace: TrainTrace,
}

/// `w - eta (dL_train/dw + lambda w)` with the low-variance loss.
pub fn inner_step<T: Scalar, E: ExposureModel<T> + ?Sized>(
    model: &FactorModel<T>,
    exposure: &E,
    batch: &[Interaction],
    eta: T,
    weight_decay: T,
    clip_floor: T,
) -> Result<FactorModel<T>> {
    let g = batch_loss(batch, model, exposure, EstimatorKind::Ubo, clip_floor)?;
    let mut next = model.clone();
    for ((p, &w), &gw) in next.params_mut().iter_mut().zip(model.params()).zip(&g.omega) {
        *p = w - eta * (gw + weight_decay * w);
    }
    Ok(next)
}

/// Outer objective evaluated at the unrolled parameters.
#[derive(Debug, Clone, Copy)]
pub enum OuterLoss<'a> {
    /// Cross-entropy on pairs whose exposure is taken to be 1.
    Validation(&'a [Interaction]),
    /// The training loss on the same batch, exposure still learned.
    TrainBatch,
}

/// Exact gradient of the outer loss at `w'(alpha)` with respect to the
/// exposure parameters.
pub fn hypergradient<T: Scalar, E: ExposureModel<T> + ?Sized>(
    model: &FactorModel<T>,
    exposure: &E,
    batch: &[Interaction],
    outer: OuterLoss<'_>,
    eta: T,
    weight_decay: T,
    clip_floor: T,
) -> Result<Vec<T>> {
    let stepped = inner_step(model, exposure, batch, eta, weight_decay, clip_floor)?;
    let (v, mut grad) = match outer {
        OuterLoss::Validation(val) => {
            if val.is_empty() {
                return Err(Error::Empty("validation batch".into()));
            }
            let g = batch_loss(val, &stepped, &UnitExposure, EstimatorKind::Naive, clip_floor)?;
            (g.omega, vec![T::zero(); exposure.n_params()])
        }
        OuterLoss::TrainBatch => {
            let g = batch_loss(batch, &stepped, exposure, EstimatorKind::Ubo, clip_floor)?;
            (g.omega, g.alpha)
        }
    };
    let d = model.dim();
    let through_item = exposure.depends_on_item();
    let scale = -eta / T::of(batch.len() as f64);
    for x in batch {
        let (u, i) = x.pair();
        let m = exposure.value(model, u, i);
        let pd = pair_derivatives(EstimatorKind::Ubo, x.feedback, model.relevance_score(u, i), m, clip_floor);
        let (uo, io) = (model.user_offset(u), model.item_offset(i));
        let v_u = &v[uo..uo + d];
        let v_i = &v[io..io + d];
        let cross = dot(v_u, model.item(i)) + dot(v_i, model.user(u));
        let k = if through_item {
            exposure.item_partial_dot(model, u, i, v_i)
        } else {
            T::zero()
        };
        let c = pd.d_sm * cross + pd.d_mm * k;
        if c != T::zero() {
            exposure.add_param_grad(model, u, i, scale * c, &mut grad);
        }
        if through_item && pd.d_m != T::zero() {
            exposure.add_param_grad_of_item_partial_dot(model, u, i, v_i, scale * pd.d_m, &mut grad);
        }
    }
    Ok(grad)
}

/// One negative training pair `(user, item)` with a free exposure value and
/// four validation pairs: `user` likes `liked_item` and dislikes
/// `disliked_item`; `liking_user` likes `item`, `disliking_user` dislikes it.
#[derive(Debug, Clone, PartialEq)]
pub struct ValGradScenario<T> {
    pub model: FactorModel<T>,
    pub user: usize,
    pub item: usize,
    pub liked_item: usize,
    pub disliked_item: usize,
    pub liking_user: usize,
    pub disliking_user: usize,
    pub m_bar: T,
    pub eta: T,
}

impl<T: Scalar> ValGradScenario<T> {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.model.n_users(), self.model.n_items());
        let users = [self.user, self.liking_user, self.disliking_user];
        let items = [self.item, self.liked_item, self.disliked_item];
        if users.iter().any(|&u| u >= n) || items.iter().any(|&i| i >= m) {
            return Err(Error::InvalidArgument("scenario index out of range".into()));
        }
        if self.liked_item == self.item || self.disliked_item == self.item {
            return Err(Error::Precondition("validation items must differ from the training item".into()));
        }
        if self.liking_user == self.user || self.disliking_user == self.user {
            return Err(Error::Precondition("validation users must differ from the training user".into()));
        }
        if !(self.m_bar > T::zero() && self.m_bar <= T::one()) {
            return Err(Error::InvalidArgument(format!("m_bar must lie in (0, 1], got {}", self.m_bar)));
        }
        Ok(())
    }

    pub fn train_pair(&self) -> Interaction {
        Interaction::new(self.user, self.item, false)
    }

    pub fn val_pairs(&self) -> [Interaction; 4] {
        [
            Interaction::new(self.user, self.liked_item, true),
            Interaction::new(self.user, self.disliked_item, false),
            Interaction::new(self.liking_user, self.item, true),
            Interaction::new(self.disliking_user, self.item, false),
        ]
    }

    fn stepped(&self, m_bar: T) -> Result<FactorModel<T>> {
        let ex = PairwiseExposure::new([((self.user, self.item), m_bar)])?;
        inner_step(&self.model, &ex, &[self.train_pair()], self.eta, T::zero(), T::of(DEFAULT_CLIP_FLOOR))
    }

    /// Summed validation cross-entropy after one inner step taken with `m_bar`.
    pub fn unrolled_val_loss(&self, m_bar: T) -> Result<T> {
        self.validate()?;
        let stepped = self.stepped(m_bar)?;
        let val = self.val_pairs();
        let mean = mean_loss(&val, &stepped, &UnitExposure, EstimatorKind::Naive, T::of(DEFAULT_CLIP_FLOOR))?;
        Ok(mean * T::of(val.len() as f64))
    }
}

/// Closed-form derivative of [`ValGradScenario::unrolled_val_loss`] in `m_bar`.
///
/// The prefactor uses the pre-step score of the training pair; the bracket's
/// sigmoids use post-step scores, which makes the expression exact rather
/// than first-order in `eta`.
pub fn closed_form_val_grad<T: Scalar>(s: &ValGradScenario<T>) -> Result<T> {
    s.validate()?;
    let one = T::one();
    let w = &s.model;
    let r = w.relevance_score(s.user, s.item);
    let sig = sigmoid(r);
    let den = one - s.m_bar * sig;
    let prefactor = s.eta * sig * sigmoid(-r) / (den * den);

    let after = s.stepped(s.m_bar)?;
    let (wu, wi) = (w.user(s.user), w.item(s.item));
    let bracket = dot(w.item(s.liked_item), wi) * sigmoid(-after.relevance_score(s.user, s.liked_item))
        - dot(w.item(s.disliked_item), wi) * sigmoid(after.relevance_score(s.user, s.disliked_item))
        + dot(w.user(s.liking_user), wu) * sigmoid(-after.relevance_score(s.liking_user, s.item))
        - dot(w.user(s.disliking_user), wu) * sigmoid(after.relevance_score(s.disliking_user, s.item));
    Ok(prefactor * bracket)
}

/// Method-independent pieces of a training run.
struct RunData<'a, T> {
    train: Vec<Interaction>,
    val: &'a [Interaction],
    test: &'a [Interaction],
    theta: PopularityTable<T>,
    clip: T,
    truth: Option<&'a SyntheticGroundTruth<T>>,
}

struct RunState<T> {
    model: FactorModel<T>,
    exposure: Option<ExposureParams<T>>,
    opt_w: Optimizer<T>,
    opt_a: Optimizer<T>,
    step: usize,
}

impl<T: Scalar> RunState<T> {
    fn learned<'a>(&'a self, theta: &'a PopularityTable<T>) -> LearnedExposure<'a, T> {
        LearnedExposure {
            params: self.exposure.as_ref().expect("method learns exposure"),
            theta,
        }
    }

    fn step_omega(&mut self, mut grad: Vec<T>, weight_decay: T) {
        if weight_decay != T::zero() {
            for (g, &w) in grad.iter_mut().zip(self.model.params()) {
                *g += weight_decay * w;
            }
        }
        self.opt_w.step(self.model.params_mut(), &grad);
    }

    fn step_alpha(&mut self, grad: &[T]) {
        let ex = self.exposure.as_mut().expect("method learns exposure");
        self.opt_a.step(ex.params_mut(), grad);
    }
}

/// Popularity as a propensity, floored at the clip floor so items without
/// training positives keep a nonzero exposure.
fn popularity<T: Scalar>(theta: &PopularityTable<T>, floor: T) -> PopularityExposure<'_, T> {
    PopularityExposure { theta, floor }
}

/// Estimated exposure over the full grid (row-major), if the method has one.
/// Popularity methods use `max(theta_i, floor)`; learned methods need `exposure`.
pub fn estimated_exposure_matrix<T: Scalar>(
    method: Method,
    model: &FactorModel<T>,
    exposure: Option<&ExposureParams<T>>,
    theta: &PopularityTable<T>,
    floor: T,
) -> Option<Vec<T>> {
    let (n, m) = (model.n_users(), model.n_items());
    match method {
        Method::Naive => None,
        Method::RelMf | Method::Umf => Some((0..n).flat_map(|_| theta.values().iter().map(|&t| t.max(floor))).collect()),
        _ => {
            let ex = exposure?;
            let mut out = Vec::with_capacity(n * m);
            for u in 0..n {
                for i in 0..m {
                    out.push(estimate_exposure(ex, model, theta, u, i));
                }
            }
            Some(out)
        }
    }
}

fn exposure_pcc<T: Scalar>(method: Method, state: &RunState<T>, data: &RunData<'_, T>) -> Result<Option<f64>> {
    let Some(truth) = data.truth else {
        return Ok(None);
    };
    let Some(est) = estimated_exposure_matrix(method, &state.model, state.exposure.as_ref(), &data.theta, data.clip) else {
        return Ok(None);
    };
    mean_user_pcc(&est, truth.exposure_matrix(), truth.n_users(), truth.n_items()).map(Some)
}

/// One mini-batch update; returns the batch training loss before the update.
fn train_step<T: Scalar>(
    method: Method,
    state: &mut RunState<T>,
    data: &RunData<'_, T>,
    batch: &[Interaction],
    config: &BilevelConfig,
    rng: &mut rng::Rng,
) -> Result<T> {
    let clip = T::of(config.clip_floor);
    let wd = T::of(config.weight_decay);
    let eta = T::of(config.inner_lr);
    let theta = &data.theta;
    let loss = match method {
        Method::Naive | Method::RelMf | Method::Umf => {
            let g = match method {
                Method::Naive => batch_loss(batch, &state.model, &UnitExposure, EstimatorKind::Naive, clip)?,
                Method::RelMf => batch_loss(batch, &state.model, &popularity(theta, clip), EstimatorKind::Ips, clip)?,
                _ => batch_loss(batch, &state.model, &popularity(theta, clip), EstimatorKind::Ubo, clip)?,
            };
            state.step_omega(g.omega, wd);
            g.loss
        }
        Method::JointOpt => {
            let g = batch_loss(batch, &state.model, &state.learned(theta), EstimatorKind::Ubo, clip)?;
            state.step_alpha(&g.alpha);
            state.step_omega(g.omega, wd);
            g.loss
        }
        Method::AlterOpt => {
            let g = batch_loss(batch, &state.model, &state.learned(theta), EstimatorKind::Ubo, clip)?;
            if state.step.is_multiple_of(2) {
                state.step_omega(g.omega, wd);
            } else {
                state.step_alpha(&g.alpha);
            }
            g.loss
        }
        Method::Ubo | Method::BiOpt2 => {
            let hyper = if method == Method::Ubo {
                let k = data.val.len().min(config.batch_size);
                let idx = rand::seq::index::sample(rng, data.val.len(), k);
                let val: Vec<Interaction> = idx.iter().map(|j| data.val[j]).collect();
                hypergradient(&state.model, &state.learned(theta), batch, OuterLoss::Validation(&val), eta, wd, clip)?
            } else {
                hypergradient(&state.model, &state.learned(theta), batch, OuterLoss::TrainBatch, eta, wd, clip)?
            };
            state.step_alpha(&hyper);
            let g = batch_loss(batch, &state.model, &state.learned(theta), EstimatorKind::Ubo, clip)?;
            state.step_omega(g.omega, wd);
            g.loss
        }
    };
    state.step += 1;
    Ok(loss)
}

/// Called after every epoch with the epoch number and current parameters.
pub type EpochHook<'a, T> = dyn FnMut(usize, &FactorModel<T>, Option<&ExposureParams<T>>) -> Result<()> + 'a;

/// Trains `method` on the training split.
///
/// Exposure popularity comes from the training split only. `truth`, when
/// given, adds exposure PCC to the trace.
pub fn train<T: Scalar>(
    method: Method,
    ds: &Dataset,
    splits: &SplitAssignment,
    config: &BilevelConfig,
    truth: Option<&SyntheticGroundTruth<T>>,
) -> Result<TrainOutcome<T>> {
    train_with_hook(method, ds, splits, config, truth, &mut |_, _, _| Ok(()))
}

/// [`train`] with a callback after every epoch.
pub fn train_with_hook<T: Scalar>(
    method: Method,
    ds: &Dataset,
    splits: &SplitAssignment,
    config: &BilevelConfig,
    truth: Option<&SyntheticGroundTruth<T>>,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let train = splits.training_pairs(ds);
    if train.is_empty() {
        return Err(Error::Empty("training pairs".into()));
    }
    if method == Method::Ubo && splits.unbiased_val.is_empty() {
        return Err(Error::Precondition("bi-level training needs a nonempty unbiased validation set".into()));
    }
    if let Some(t) = truth {
        if t.n_users() != ds.n_users() || t.n_items() != ds.n_items() {
            return Err(Error::InvalidArgument("ground truth shape differs from the dataset".into()));
        }
    }
    let data = RunData {
        theta: PopularityTable::from_pairs(ds.n_items(), &splits.train)?,
        train,
        val: &splits.unbiased_val,
        test: &splits.test,
        clip: T::of(config.clip_floor),
        truth,
    };
    let model = FactorModel::init(ds.n_users(), ds.n_items(), config.dim, config.seed, config.init_scale)?;
    let exposure = if method.learns_exposure() {
        Some(ExposureParams::init(ds.n_users(), config.dim, config.seed, config.init_scale)?)
    } else {
        None
    };
    let n_alpha = exposure.as_ref().map_or(0, |e| e.params().len());
    let mut state = RunState {
        opt_w: Optimizer::new(config.optimizer, config.inner_lr, model.params().len()),
        opt_a: Optimizer::new(config.optimizer, config.outer_lr, n_alpha),
        model,
        exposure,
        step: 0,
    };
    let mut trace = TrainTrace::default();
    let mut rng = rng::stream(config.seed, Stream::Sampling);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&j| data.train[j]));
            let loss = train_step(method, &mut state, &data, &batch, config, &mut rng)?.as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    quantity: "train loss",
                });
            }
            loss_sum += loss;
            n_batches += 1;
            if state.step <= config.pcc_iterations {
                if let Some(pcc) = exposure_pcc(method, &state, &data)? {
                    trace.records.push(TraceRecord::Iteration(IterationRecord {
                        iteration: state.step,
                        pcc,
                    }));
                }
            }
        }
        if !state.model.is_finite() || !state.exposure.as_ref().is_none_or(|e| e.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                quantity: "parameters",
            });
        }
        let val_loss = if data.val.is_empty() {
            None
        } else {
            let l = mean_loss(data.val, &state.model, &UnitExposure, EstimatorKind::Naive, T::of(config.clip_floor))?;
            Some(l.as_f64())
        };
        let metrics = if data.test.is_empty() {
            BTreeMap::new()
        } else {
            evaluate(&state.model, data.test, &config.ks)?.named()
        };
        trace.records.push(TraceRecord::Epoch(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_loss,
            metrics,
            pcc: exposure_pcc(method, &state, &data)?,
        }));
        on_epoch(epoch, &state.model, state.exposure.as_ref())?;
    }
    Ok(TrainOutcome {
        model: state.model,
        exposure: state.exposure,
        trace,
    })
}

pub fn train_ubo<T: Scalar>(ds: &Dataset, splits: &SplitAssignment, config: &BilevelConfig) -> Result<TrainOutcome<T>> {
    train(Method::Ubo, ds, splits, config, None)
}

pub fn train_jointopt<T: Scalar>(ds: &Dataset, splits: &SplitAssignment, config: &BilevelConfig) -> Result<TrainOutcome<T>> {
    train(Method::JointOpt, ds, splits, config, None)
}

pub fn train_alteropt<T: Scalar>(ds: &Dataset, splits: &SplitAssignment, config: &BilevelConfig) -> Result<TrainOutcome<T>> {
    train(Method::AlterOpt, ds, splits, config, None)
}

pub fn train_biopt2<T: Scalar>(ds: &Dataset, splits: &SplitAssignment, config: &BilevelConfig) -> Result<TrainOutcome<T>> {
    train(Method::BiOpt2, ds, splits, config, None)
}

pub fn train_relmf<T: Scalar>(ds: &Dataset, splits: &SplitAssignment, config: &BilevelConfig) -> Result<TrainOutcome<T>> {
    train(Method::RelMf, ds, splits, config, None)
}

pub fn train_umf<T: Scalar>(ds: &Dataset, splits: &SplitAssignment, config: &BilevelConfig) -> Result<TrainOutcome<T>> {
    train(Method::Umf, ds, splits, config, None)
}

pub fn train_naive<T: Scalar>(ds: &Dataset, splits: &SplitAssignment, config: &BilevelConfig) -> Result<TrainOutcome<T>> {
    train(Method::Naive, ds, splits, config, None)
}

/// SNIPS estimate of DCG@k on `pairs`: each positive pair contributes the
/// discount of its item's rank among all items for that user, weighted by
/// inverse popularity.
pub fn snips_dcg<T: Scalar>(
    model: &FactorModel<T>,
    pairs: &[Interaction],
    theta: &PopularityTable<T>,
    k: usize,
    clip_floor: f64,
) -> Result<f64> {
    let mut values = Vec::with_capacity(pairs.len());
    let mut props = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for x in pairs {
        let (u, i) = x.pair();
        let s = model.relevance_score(u, i);
        let ahead = (0..model.n_items())
            .filter(|&j| {
                let sj = model.relevance_score(u, j);
                sj > s || (sj == s && j < i)
            })
            .count();
        let rank = ahead + 1;
        values.push(if rank <= k { discount(rank) } else { 0.0 });
        props.push(theta.theta(i).as_f64());
        labels.push(x.feedback);
    }
    snips_metric(&values, &props, &labels, clip_floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightDecaySelection {
    pub best: f64,
    /// `(weight_decay, snips score)` per candidate.
    pub scores: Vec<(f64, f64)>,
}

/// Trains once per candidate and keeps the weight decay with the highest
/// SNIPS DCG at the largest configured cutoff on the hyper-validation split.
pub fn tune_weight_decay<T: Scalar>(
    method: Method,
    ds: &Dataset,
    splits: &SplitAssignment,
    config: &BilevelConfig,
    candidates: &[f64],
) -> Result<WeightDecaySelection> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no weight decay candidates".into()));
    }
    if splits.hyper_val.is_empty() {
        return Err(Error::Precondition("weight decay tuning needs a hyper-validation split".into()));
    }
    let theta = PopularityTable::<T>::from_pairs(ds.n_items(), &splits.train)?;
    let k = *config.ks.iter().max().unwrap_or(&3);
    let mut scores = Vec::with_capacity(candidates.len());
    for &wd in candidates {
        let cfg = BilevelConfig {
            weight_decay: wd,
            ..config.clone()
        };
        let out = train::<T>(method, ds, splits, &cfg, None)?;
        let score = snips_dcg(&out.model, &splits.hyper_val, &theta, k, config.clip_floor)?;
        log::info!("{method}: weight_decay={wd} snips_dcg@{k}={score:.6}");
        scores.push((wd, score));
    }
    let best = scores
        .iter()
        .fold(None::<(f64, f64)>, |acc, &(wd, s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((wd, s)),
        })
        .map(|(wd, _)| wd)
        .expect("nonempty candidates");
    Ok(WeightDecaySelection { best, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::central_difference;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("bpr".parse::<Method>().is_err());
    }

    #[test]
    fn sgd_and_adam_first_steps() {
        let mut p = vec![1.0, -2.0];
        Optimizer::<f64>::new(OptimizerKind::Sgd, 0.1, 2).step(&mut p, &[1.0, -4.0]);
        assert_eq!(p, vec![0.9, -1.6]);
        // the first Adam step moves each coordinate by about lr in the sign of its gradient
        let mut p = vec![1.0, -2.0];
        Optimizer::<f64>::new(OptimizerKind::Adam, 0.1, 2).step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn inner_step_with_zero_rate_is_identity() {
        let model = FactorModel::<f64>::init(3, 3, 2, 1, 0.5).unwrap();
        let ex = PairwiseExposure::new([((0, 1), 0.4)]).unwrap();
        let out = inner_step(&model, &ex, &[Interaction::new(0, 1, false)], 0.0, 0.0, 0.01).unwrap();
        assert_eq!(out, model);
    }

    #[test]
    fn inner_step_single_pair_by_hand() {
        // d = 1, w_u = 0.5, w_i = -1, negative pair, m = 0.4, eta = 0.1
        let model = FactorModel::<f64>::from_params(1, 1, 1, vec![0.5, -1.0]).unwrap();
        let ex = PairwiseExposure::new([((0, 0), 0.4)]).unwrap();
        let out = inner_step(&model, &ex, &[Interaction::new(0, 0, false)], 0.1, 0.0, 0.01).unwrap();
        let p = 1.0 / (1.0 + 0.5f64.exp());
        let g = 0.4 * p * (1.0 - p) / (1.0 - 0.4 * p);
        assert!((out.params()[0] - (0.5 - 0.1 * g * -1.0)).abs() < 1e-15);
        assert!((out.params()[1] - (-1.0 - 0.1 * g * 0.5)).abs() < 1e-15);
    }

    fn small_instance(seed: u64) -> (FactorModel<f64>, ExposureParams<f64>, PopularityTable<f64>, Vec<Interaction>, Vec<Interaction>) {
        let model = FactorModel::<f64>::init(5, 5, 3, seed, 0.5).unwrap();
        let mut ex = ExposureParams::<f64>::init(5, 3, seed, 0.5).unwrap();
        let g = FactorModel::<f64>::init(1, 0, 3, seed + 7, 0.5).unwrap();
        ex.gate_weight_mut().copy_from_slice(g.params());
        ex.set_gate_bias(-0.3);
        let theta = PopularityTable::from_counts(&[5, 3, 1, 2, 4]).unwrap();
        let train: Vec<Interaction> = (0..5)
            .flat_map(|u| (0..5).map(move |i| Interaction::new(u, i, (u * 3 + i * 7 + seed as usize) % 4 == 0)))
            .filter(|x| (x.user + x.item) % 3 != 1)
            .collect();
        let val = vec![
            Interaction::new(0, 1, true),
            Interaction::new(2, 4, false),
            Interaction::new(4, 0, true),
        ];
        (model, ex, theta, train, val)
    }

    #[test]
    fn hypergradient_matches_finite_differences() {
        for seed in 0..4 {
            let (model, ex, theta, train, val) = small_instance(seed);
            let eta = 0.8;
            let analytic = hypergradient(
                &model,
                &LearnedExposure { params: &ex, theta: &theta },
                &train,
                OuterLoss::Validation(&val),
                eta,
                0.01,
                0.01,
            )
            .unwrap();
            let fd = central_difference(ex.params(), 1e-5, |a| {
                let p = ExposureParams::from_params(5, 3, a.to_vec()).unwrap();
                let e = LearnedExposure { params: &p, theta: &theta };
                let stepped = inner_step(&model, &e, &train, eta, 0.01, 0.01).unwrap();
                mean_loss(&val, &stepped, &UnitExposure, EstimatorKind::Naive, 0.01).unwrap()
            });
            for (a, f) in analytic.iter().zip(&fd) {
                assert!((a - f).abs() <= 1e-4 * a.abs().max(f.abs()) + 1e-10, "{a} vs {f}");
            }
        }
    }

    #[test]
    fn zero_rate_gives_zero_hypergradient() {
        let (model, ex, theta, train, val) = small_instance(1);
        let hg = hypergradient(
            &model,
            &LearnedExposure { params: &ex, theta: &theta },
            &train,
            OuterLoss::Validation(&val),
            0.0,
            0.0,
            0.01,
        )
        .unwrap();
        assert!(hg.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_validation_batch_is_an_error() {
        let (model, ex, theta, train, _) = small_instance(1);
        let e = LearnedExposure { params: &ex, theta: &theta };
        assert!(hypergradient(&model, &e, &train, OuterLoss::Validation(&[]), 0.5, 0.0, 0.01).is_err());
    }

    #[test]
    fn train_batch_outer_loss_matches_finite_differences() {
        let (model, ex, theta, train, _) = small_instance(2);
        let eta = 0.6;
        let e = LearnedExposure { params: &ex, theta: &theta };
        let analytic = hypergradient(&model, &e, &train, OuterLoss::TrainBatch, eta, 0.0, 0.01).unwrap();
        let fd = central_difference(ex.params(), 1e-5, |a| {
            let p = ExposureParams::from_params(5, 3, a.to_vec()).unwrap();
            let e = LearnedExposure { params: &p, theta: &theta };
            let stepped = inner_step(&model, &e, &train, eta, 0.0, 0.01).unwrap();
            mean_loss(&train, &stepped, &e, EstimatorKind::Ubo, 0.01).unwrap()
        });
        for (a, f) in analytic.iter().zip(&fd) {
            assert!((a - f).abs() <= 1e-4 * a.abs().max(f.abs()) + 1e-10, "{a} vs {f}");
        }
    }

    fn scenario(seed: u64) -> ValGradScenario<f64> {
        ValGradScenario {
            model: FactorModel::init(4, 4, 3, seed, 0.6).unwrap(),
            user: 0,
            item: 0,
            liked_item: 1,
            disliked_item: 2,
            liking_user: 1,
            disliking_user: 3,
            m_bar: 0.35,
            eta: 0.9,
        }
    }

    #[test]
    fn closed_form_matches_unrolled_derivative() {
        for seed in 0..5 {
            let s = scenario(seed);
            let h = 1e-5;
            let fd = (s.unrolled_val_loss(s.m_bar + h).unwrap() - s.unrolled_val_loss(s.m_bar - h).unwrap()) / (2.0 * h);
            let cf = closed_form_val_grad(&s).unwrap();
            assert!((cf - fd).abs() <= 1e-4 * cf.abs().max(fd.abs()), "{cf} vs {fd}");
        }
    }

    #[test]
    fn closed_form_rejects_shared_indices() {
        let mut s = scenario(0);
        s.liked_item = s.item;
        assert!(matches!(closed_form_val_grad(&s), Err(Error::Precondition(_))));
        let mut s = scenario(0);
        s.disliking_user = s.user;
        assert!(matches!(closed_form_val_grad(&s), Err(Error::Precondition(_))));
    }

    #[test]
    fn closed_form_vanishes_for_zero_embeddings() {
        let mut s = scenario(0);
        s.model = FactorModel::zeros(4, 4, 3);
        assert_eq!(closed_form_val_grad(&s).unwrap(), 0.0);
    }

    #[test]
    fn trace_round_trips_through_jsonl() {
        let mut t = TrainTrace::default();
        t.records.push(TraceRecord::Iteration(IterationRecord { iteration: 1, pcc: 0.9 }));
        t.records.push(TraceRecord::Epoch(EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: None,
            metrics: BTreeMap::from([("dcg@1".to_string(), 0.25)]),
            pcc: Some(0.8),
        }));
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(TrainTrace::from_jsonl(&text).unwrap(), t);
    }
}
