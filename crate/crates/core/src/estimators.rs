//! Training losses over observed feedback `R = relevance * exposure`.
//!
//! * naive cross-entropy, which ignores exposure;
//! * inverse propensity scoring, unbiased but with variance growing like `1/m`;
//! * the low-variance unbiased loss `-[R log(m p) + (1 - R) log(1 - m p)]`.
//!
//! Per-pair functions follow the textbook form in `p`. Batch code works on
//! the score `s = w_u . w_i` with `p = sigmoid(s)` and uses the simplified
//! score derivatives, which stay finite when `p` saturates.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::exposure::ExposureModel;
use crate::model::FactorModel;
use crate::numeric::minimize_scalar;
use crate::rng::{self, Stream};
use crate::scalar::{axpy, sigmoid, Scalar};

pub const DEFAULT_CLIP_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Naive,
    Ips,
    Ubo,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::Ips => "ips",
            EstimatorKind::Ubo => "ubo",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(EstimatorKind::Naive),
            "ips" => Ok(EstimatorKind::Ips),
            "ubo" => Ok(EstimatorKind::Ubo),
            other => Err(Error::InvalidArgument(format!("unknown estimator `{other}`"))),
        }
    }
}

/// Inputs of a single-pair loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLossContext<T> {
    pub feedback: bool,
    pub p: T,
    pub m_bar: T,
    /// Lower bound applied to `m_bar` inside the IPS loss only.
    pub clip_floor: T,
}

impl<T: Scalar> PairLossContext<T> {
    pub fn new(feedback: bool, p: T, m_bar: T) -> Self {
        PairLossContext {
            feedback,
            p,
            m_bar,
            clip_floor: T::of(DEFAULT_CLIP_FLOOR),
        }
    }

    pub fn with_clip_floor(mut self, floor: T) -> Self {
        self.clip_floor = floor;
        self
    }

    fn r(&self) -> T {
        if self.feedback {
            T::one()
        } else {
            T::zero()
        }
    }

    fn clipped_m(&self) -> T {
        self.m_bar.max(self.clip_floor)
    }
}

pub fn loss_naive<T: Scalar>(ctx: &PairLossContext<T>) -> T {
    if ctx.feedback {
        -ctx.p.ln()
    } else {
        -(-ctx.p).ln_1p()
    }
}

pub fn loss_ips<T: Scalar>(ctx: &PairLossContext<T>) -> T {
    let w = ctx.r() / ctx.clipped_m();
    -(w * ctx.p.ln() + (T::one() - w) * (-ctx.p).ln_1p())
}

pub fn loss_ubo<T: Scalar>(ctx: &PairLossContext<T>) -> T {
    if ctx.feedback {
        -(ctx.m_bar.ln() + ctx.p.ln())
    } else {
        -(-(ctx.m_bar * ctx.p)).ln_1p()
    }
}

pub fn grad_ips_wrt_p<T: Scalar>(ctx: &PairLossContext<T>) -> T {
    let one = T::one();
    let w = ctx.r() / ctx.clipped_m();
    -(w * (one / ctx.p + one / (one - ctx.p)) - one / (one - ctx.p))
}

pub fn grad_ubo_wrt_p<T: Scalar>(ctx: &PairLossContext<T>) -> T {
    let one = T::one();
    let r = ctx.r();
    -(r / ctx.p - (one - r) * ctx.m_bar / (one - ctx.m_bar * ctx.p))
}

/// Variance of the IPS gradient in `p` under `R ~ Bernoulli(m gamma)`.
pub fn var_ips<T: Scalar>(gamma: T, m_bar: T, p: T) -> T {
    let one = T::one();
    let q = p * (one - p);
    gamma * (one - m_bar * gamma) / (m_bar * q * q)
}

/// Variance of the low-variance estimator's gradient in `p`.
pub fn var_ubo<T: Scalar>(gamma: T, m_bar: T, p: T) -> T {
    let one = T::one();
    let pi = m_bar * gamma;
    let den = p * (one - m_bar * p);
    pi * (one - pi) / (den * den)
}

/// Loss and score derivatives of one pair.
///
/// `d_s = dl/ds`, `d_m = dl/dm`, `d_mm = d2l/dm2`, `d_sm = d2l/(ds dm)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairDerivatives<T> {
    pub loss: T,
    pub d_s: T,
    pub d_m: T,
    pub d_mm: T,
    pub d_sm: T,
}

pub fn pair_derivatives<T: Scalar>(kind: EstimatorKind, feedback: bool, s: T, m_bar: T, clip_floor: T) -> PairDerivatives<T> {
    let one = T::one();
    let zero = T::zero();
    let p = sigmoid(s);
    let ctx = PairLossContext {
        feedback,
        p,
        m_bar,
        clip_floor,
    };
    match kind {
        EstimatorKind::Naive => PairDerivatives {
            loss: loss_naive(&ctx),
            d_s: p - ctx.r(),
            d_m: zero,
            d_mm: zero,
            d_sm: zero,
        },
        EstimatorKind::Ips => {
            let m = ctx.clipped_m();
            let r = ctx.r();
            let active = feedback && m_bar >= clip_floor;
            let (d_m, d_mm, d_sm) = if active {
                (r * s / (m * m), -(r + r) * s / (m * m * m), r / (m * m))
            } else {
                (zero, zero, zero)
            };
            PairDerivatives {
                loss: loss_ips(&ctx),
                d_s: p - r / m,
                d_m,
                d_mm,
                d_sm,
            }
        }
        EstimatorKind::Ubo => {
            if feedback {
                PairDerivatives {
                    loss: loss_ubo(&ctx),
                    d_s: -(one - p),
                    d_m: -one / m_bar,
                    d_mm: one / (m_bar * m_bar),
                    d_sm: zero,
                }
            } else {
                let den = one - m_bar * p;
                let q = p * (one - p);
                PairDerivatives {
                    loss: loss_ubo(&ctx),
                    d_s: m_bar * q / den,
                    d_m: p / den,
                    d_mm: p * p / (den * den),
                    d_sm: q / (den * den),
                }
            }
        }
    }
}

/// Mean loss over a pair set with gradients for the relevance parameters
/// (`omega`, laid out like [`FactorModel::params`]) and the exposure
/// parameters (`alpha`, length [`ExposureModel::n_params`]).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad<T> {
    pub loss: T,
    pub omega: Vec<T>,
    pub alpha: Vec<T>,
}

pub fn batch_loss<T: Scalar, E: ExposureModel<T> + ?Sized>(
    pairs: &[Interaction],
    model: &FactorModel<T>,
    exposure: &E,
    kind: EstimatorKind,
    clip_floor: T,
) -> Result<BatchGrad<T>> {
    if pairs.is_empty() {
        return Err(Error::Empty("loss over an empty pair set".into()));
    }
    let mut omega = vec![T::zero(); model.params().len()];
    let mut alpha = vec![T::zero(); exposure.n_params()];
    let mut total = T::zero();
    let scale = T::one() / T::of(pairs.len() as f64);
    let d = model.dim();
    for x in pairs {
        let (u, i) = x.pair();
        let m = exposure.value(model, u, i);
        let pd = pair_derivatives(kind, x.feedback, model.relevance_score(u, i), m, clip_floor);
        total += pd.loss;
        let g = scale * pd.d_s;
        let (uo, io) = (model.user_offset(u), model.item_offset(i));
        axpy(g, model.item(i), &mut omega[uo..uo + d]);
        axpy(g, model.user(u), &mut omega[io..io + d]);
        if pd.d_m != T::zero() {
            let gm = scale * pd.d_m;
            if exposure.depends_on_item() {
                exposure.add_item_partial(model, u, i, gm, &mut omega[io..io + d]);
            }
            exposure.add_param_grad(model, u, i, gm, &mut alpha);
        }
    }
    Ok(BatchGrad {
        loss: total * scale,
        omega,
        alpha,
    })
}

/// Mean loss only.
pub fn mean_loss<T: Scalar, E: ExposureModel<T> + ?Sized>(
    pairs: &[Interaction],
    model: &FactorModel<T>,
    exposure: &E,
    kind: EstimatorKind,
    clip_floor: T,
) -> Result<T> {
    if pairs.is_empty() {
        return Err(Error::Empty("loss over an empty pair set".into()));
    }
    let total: T = pairs
        .iter()
        .map(|x| {
            let (u, i) = x.pair();
            let m = exposure.value(model, u, i);
            pair_derivatives(kind, x.feedback, model.relevance_score(u, i), m, clip_floor).loss
        })
        .sum();
    Ok(total / T::of(pairs.len() as f64))
}

/// Expected per-pair loss with exposure known exactly (`m_bar = m`) and
/// `R ~ Bernoulli(m gamma)`.
pub fn expected_loss(kind: EstimatorKind, gamma: f64, m: f64, p: f64) -> f64 {
    let pi = m * gamma;
    let at = |feedback| {
        let ctx = PairLossContext::new(feedback, p, m);
        match kind {
            EstimatorKind::Naive => loss_naive(&ctx),
            EstimatorKind::Ips => loss_ips(&ctx),
            EstimatorKind::Ubo => loss_ubo(&ctx),
        }
    };
    pi * at(true) + (1.0 - pi) * at(false)
}

/// Minimizes [`expected_loss`] over `p`, searching in logit space from `p_init`.
pub fn minimize_expected_loss(kind: EstimatorKind, gamma: f64, m: f64, p_init: f64) -> Result<f64> {
    if !(p_init > 0.0 && p_init < 1.0) {
        return Err(Error::InvalidArgument(format!("p_init must lie in (0, 1), got {p_init}")));
    }
    let x0 = (p_init / (1.0 - p_init)).ln();
    minimize_scalar(x0, 0.5, 1e-10, |x| expected_loss(kind, gamma, m, sigmoid(x)))
        .map(sigmoid)
        .ok_or_else(|| Error::Precondition(format!("expected {kind} loss has no minimum for gamma={gamma}, m={m}")))
}

/// How Monte Carlo draws of `R` are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum McSampling {
    /// Independent uniforms.
    Iid,
    /// One uniform per stratum `[k/n, (k+1)/n)`.
    #[default]
    Stratified,
}

impl FromStr for McSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(McSampling::Iid),
            "stratified" => Ok(McSampling::Stratified),
            other => Err(Error::InvalidArgument(format!("unknown sampling `{other}`"))),
        }
    }
}

/// Sample variances of the IPS and low-variance gradients in `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientVariance {
    pub ips: f64,
    pub ubo: f64,
}

/// Monte Carlo estimate of the gradient variances over `n` draws of
/// `R ~ Bernoulli(m_bar gamma)`. No propensity clipping is applied.
pub fn monte_carlo_gradient_variance(
    gamma: f64,
    m_bar: f64,
    p: f64,
    n: usize,
    sampling: McSampling,
    seed: u64,
) -> Result<GradientVariance> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two Monte Carlo draws".into()));
    }
    let pi = m_bar * gamma;
    let mut rng = rng::stream(seed, Stream::MonteCarlo);
    let inv_n = 1.0 / n as f64;
    let mut ips = Welford::default();
    let mut ubo = Welford::default();
    for k in 0..n {
        let v: f64 = rng.random();
        let u = match sampling {
            McSampling::Iid => v,
            McSampling::Stratified => (k as f64 + v) * inv_n,
        };
        let ctx = PairLossContext::new(u < pi, p, m_bar).with_clip_floor(m_bar);
        ips.push(grad_ips_wrt_p(&ctx));
        ubo.push(grad_ubo_wrt_p(&ctx));
    }
    Ok(GradientVariance {
        ips: ips.variance(),
        ubo: ubo.variance(),
    })
}

#[derive(Debug, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        self.m2 / (self.n - 1.0)
    }
}
