//! Response distributions, their response functions, moments, quantiles,
//! sampling and finite mixtures.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use statrs::function::gamma::{digamma, gamma_lr, gamma_ur, ln_gamma};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FamilyError {
    #[error("unknown family '{0}' (expected normal, bernoulli, poisson, gamma or beta)")]
    UnknownFamily(String),
    #[error("unknown response function '{0}'")]
    UnknownResponse(String),
    #[error("response {value} in row {row} is outside the support of the {family} family")]
    OutOfSupport {
        row: usize,
        value: f64,
        family: &'static str,
    },
    #[error("probability {0} is outside (0, 1)")]
    InvalidProbability(f64),
    #[error("{got} response functions supplied for {expected} parameters")]
    TrafoCount { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("a mixture needs at least one component")]
    EmptyMixture,
    #[error("mixture weights must be non-negative and sum to 1")]
    InvalidWeights,
    #[error("custom response functions cannot be serialized")]
    NotSerializable,
}

const EXP_CLAMP: f64 = 30.0;
const EXP_FLOOR: f64 = 1e-12;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Map `h` from a predictor to a parameter space, with its derivative.
#[derive(Clone)]
pub enum ResponseFn {
    Identity,
    /// `exp(min(η, 30)) + 1e-12`
    Exp,
    Softplus,
    Sigmoid,
    Reciprocal,
    Square,
    Custom {
        name: String,
        value: ScalarFn,
        derivative: ScalarFn,
    },
}

impl fmt::Debug for ResponseFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl PartialEq for ResponseFn {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ResponseFn::Custom { value: a, .. }, ResponseFn::Custom { value: b, .. }) => Arc::ptr_eq(a, b),
            _ => self.name() == other.name(),
        }
    }
}

impl ResponseFn {
    pub fn custom(
        name: &str,
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ResponseFn::Custom {
            name: name.to_string(),
            value: Arc::new(value),
            derivative: Arc::new(derivative),
        }
    }

    pub fn from_name(name: &str) -> Result<Self, FamilyError> {
        Ok(match name {
            "identity" => ResponseFn::Identity,
            "exp" => ResponseFn::Exp,
            "softplus" => ResponseFn::Softplus,
            "sigmoid" => ResponseFn::Sigmoid,
            "reciprocal" => ResponseFn::Reciprocal,
            "square" => ResponseFn::Square,
            other => return Err(FamilyError::UnknownResponse(other.to_string())),
        })
    }

    pub fn name(&self) -> String {
        match self {
            ResponseFn::Identity => "identity".into(),
            ResponseFn::Exp => "exp".into(),
            ResponseFn::Softplus => "softplus".into(),
            ResponseFn::Sigmoid => "sigmoid".into(),
            ResponseFn::Reciprocal => "reciprocal".into(),
            ResponseFn::Square => "square".into(),
            ResponseFn::Custom { name, .. } => name.clone(),
        }
    }

    pub fn value(&self, eta: f64) -> f64 {
        match self {
            ResponseFn::Identity => eta,
            ResponseFn::Exp => eta.min(EXP_CLAMP).exp() + EXP_FLOOR,
            ResponseFn::Softplus => softplus(eta),
            ResponseFn::Sigmoid => sigmoid(eta),
            ResponseFn::Reciprocal => 1.0 / eta,
            ResponseFn::Square => eta * eta,
            ResponseFn::Custom { value, .. } => value(eta),
        }
    }

    pub fn derivative(&self, eta: f64) -> f64 {
        match self {
            ResponseFn::Identity => 1.0,
            ResponseFn::Exp => {
                if eta < EXP_CLAMP {
                    eta.exp()
                } else {
                    0.0
                }
            }
            ResponseFn::Softplus => sigmoid(eta),
            ResponseFn::Sigmoid => {
                let s = sigmoid(eta);
                s * (1.0 - s)
            }
            ResponseFn::Reciprocal => -1.0 / (eta * eta),
            ResponseFn::Square => 2.0 * eta,
            ResponseFn::Custom { derivative, .. } => derivative(eta),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Normal,
    Bernoulli,
    Poisson,
    Gamma,
    Beta,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Normal => "normal",
            FamilyKind::Bernoulli => "bernoulli",
            FamilyKind::Poisson => "poisson",
            FamilyKind::Gamma => "gamma",
            FamilyKind::Beta => "beta",
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            FamilyKind::Normal => &["loc", "scale"],
            FamilyKind::Bernoulli => &["logits"],
            FamilyKind::Poisson => &["rate"],
            FamilyKind::Gamma => &["concentration", "rate"],
            FamilyKind::Beta => &["alpha", "beta"],
        }
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, FamilyKind::Bernoulli | FamilyKind::Poisson)
    }

    fn default_links(self) -> Vec<ResponseFn> {
        match self {
            FamilyKind::Normal => vec![ResponseFn::Identity, ResponseFn::Exp],
            FamilyKind::Bernoulli => vec![ResponseFn::Identity],
            FamilyKind::Poisson => vec![ResponseFn::Exp],
            FamilyKind::Gamma | FamilyKind::Beta => vec![ResponseFn::Exp, ResponseFn::Exp],
        }
    }

    fn in_support(self, y: f64) -> bool {
        match self {
            FamilyKind::Normal => y.is_finite(),
            FamilyKind::Bernoulli => y == 0.0 || y == 1.0,
            FamilyKind::Poisson => y.is_finite() && y >= 0.0 && y.fract() == 0.0,
            FamilyKind::Gamma => y.is_finite() && y > 0.0,
            FamilyKind::Beta => y > 0.0 && y < 1.0,
        }
    }

    /// Log density (or mass) at an in-support `y`.
    pub fn log_prob(self, theta: &[f64], y: f64) -> f64 {
        match self {
            FamilyKind::Normal => {
                let (mu, sigma) = (theta[0], theta[1]);
                let z = (y - mu) / sigma;
                -LN_SQRT_2PI - sigma.ln() - 0.5 * z * z
            }
            FamilyKind::Bernoulli => {
                let l = theta[0];
                if y == 1.0 {
                    -softplus(-l)
                } else {
                    -softplus(l)
                }
            }
            FamilyKind::Poisson => {
                let rate = theta[0];
                let ylnr = if y == 0.0 { 0.0 } else { y * rate.ln() };
                ylnr - rate - ln_gamma(y + 1.0)
            }
            FamilyKind::Gamma => {
                let (a, b) = (theta[0], theta[1]);
                a * b.ln() - ln_gamma(a) + (a - 1.0) * y.ln() - b * y
            }
            FamilyKind::Beta => {
                let (a, b) = (theta[0], theta[1]);
                ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * y.ln() + (b - 1.0) * (-y).ln_1p()
            }
        }
    }

    /// Gradient of [`FamilyKind::log_prob`] with respect to θ.
    pub fn grad_theta(self, theta: &[f64], y: f64, out: &mut [f64]) {
        match self {
            FamilyKind::Normal => {
                let (mu, sigma) = (theta[0], theta[1]);
                let r = y - mu;
                let s2 = sigma * sigma;
                out[0] = r / s2;
                out[1] = -1.0 / sigma + r * r / (s2 * sigma);
            }
            FamilyKind::Bernoulli => out[0] = y - sigmoid(theta[0]),
            FamilyKind::Poisson => out[0] = y / theta[0] - 1.0,
            FamilyKind::Gamma => {
                let (a, b) = (theta[0], theta[1]);
                out[0] = b.ln() - digamma(a) + y.ln();
                out[1] = a / b - y;
            }
            FamilyKind::Beta => {
                let (a, b) = (theta[0], theta[1]);
                let dab = digamma(a + b);
                out[0] = dab - digamma(a) + y.ln();
                out[1] = dab - digamma(b) + (-y).ln_1p();
            }
        }
    }

    pub fn mean(self, theta: &[f64]) -> f64 {
        match self {
            FamilyKind::Normal | FamilyKind::Poisson => theta[0],
            FamilyKind::Bernoulli => sigmoid(theta[0]),
            FamilyKind::Gamma => theta[0] / theta[1],
            FamilyKind::Beta => theta[0] / (theta[0] + theta[1]),
        }
    }

    pub fn variance(self, theta: &[f64]) -> f64 {
        match self {
            FamilyKind::Normal => theta[1] * theta[1],
            FamilyKind::Bernoulli => {
                let p = sigmoid(theta[0]);
                p * (1.0 - p)
            }
            FamilyKind::Poisson => theta[0],
            FamilyKind::Gamma => theta[0] / (theta[1] * theta[1]),
            FamilyKind::Beta => {
                let (a, b) = (theta[0], theta[1]);
                let s = a + b;
                a * b / (s * s * (s + 1.0))
            }
        }
    }

    pub fn cdf(self, theta: &[f64], y: f64) -> f64 {
        match self {
            FamilyKind::Normal => 0.5 * erfc(-(y - theta[0]) / (theta[1] * std::f64::consts::SQRT_2)),
            FamilyKind::Bernoulli => {
                if y < 0.0 {
                    0.0
                } else if y < 1.0 {
                    sigmoid(-theta[0])
                } else {
                    1.0
                }
            }
            FamilyKind::Poisson => {
                if y < 0.0 {
                    0.0
                } else {
                    gamma_ur(y.floor() + 1.0, theta[0])
                }
            }
            FamilyKind::Gamma => {
                if y <= 0.0 {
                    0.0
                } else {
                    gamma_lr(theta[0], theta[1] * y)
                }
            }
            FamilyKind::Beta => {
                if y <= 0.0 {
                    0.0
                } else if y >= 1.0 {
                    1.0
                } else {
                    beta_reg(theta[0], theta[1], y)
                }
            }
        }
    }

    /// Density (mass for discrete families); zero outside the support.
    pub fn pdf(self, theta: &[f64], y: f64) -> f64 {
        if self.in_support(y) {
            self.log_prob(theta, y).exp()
        } else {
            0.0
        }
    }

    /// Quantile; for discrete families the generalized inverse
    /// `min{k : cdf(k) ≥ p}`.
    pub fn quantile(self, theta: &[f64], p: f64) -> f64 {
        match self {
            FamilyKind::Normal => theta[0] + theta[1] * normal_quantile(p),
            FamilyKind::Bernoulli => {
                if p <= sigmoid(-theta[0]) {
                    0.0
                } else {
                    1.0
                }
            }
            FamilyKind::Poisson => {
                let cdf = |k: f64| self.cdf(theta, k);
                let mut hi = (theta[0] + 10.0 * theta[0].sqrt()).ceil().max(1.0);
                while cdf(hi) < p {
                    hi *= 2.0;
                }
                let mut lo = -1.0;
                // invariant: cdf(lo) < p <= cdf(hi)
                while hi - lo > 1.0 {
                    let mid = ((lo + hi) / 2.0).floor();
                    if cdf(mid) >= p {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            }
            FamilyKind::Gamma => {
                let sd = self.variance(theta).sqrt();
                let mut hi = self.mean(theta) + 10.0 * sd;
                while self.cdf(theta, hi) < p {
                    hi *= 2.0;
                }
                bisect_cdf(|y| self.cdf(theta, y), 0.0, hi, p)
            }
            FamilyKind::Beta => bisect_cdf(|y| self.cdf(theta, y), 0.0, 1.0, p),
        }
    }

    fn sample_one(self, theta: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        match self {
            FamilyKind::Normal => rand_distr::Normal::new(theta[0], theta[1])
                .expect("valid normal parameters")
                .sample(rng),
            FamilyKind::Bernoulli => {
                let hit = rand_distr::Bernoulli::new(sigmoid(theta[0]))
                    .expect("probability in [0, 1]")
                    .sample(rng);
                if hit {
                    1.0
                } else {
                    0.0
                }
            }
            FamilyKind::Poisson => rand_distr::Poisson::new(theta[0])
                .expect("positive rate")
                .sample(rng),
            FamilyKind::Gamma => rand_distr::Gamma::new(theta[0], 1.0 / theta[1])
                .expect("positive gamma parameters")
                .sample(rng),
            FamilyKind::Beta => rand_distr::Beta::new(theta[0], theta[1])
                .expect("positive beta parameters")
                .sample(rng),
        }
    }
}

/// Bisection on a continuous cdf over `[lo, hi]`.
fn bisect_cdf(cdf: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, p: f64) -> f64 {
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Standard normal quantile: rational approximation refined by one Halley
/// step against the erfc-based cdf.
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (-p).ln_1p()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = 0.5 * erfc(-x / std::f64::consts::SQRT_2) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// A distribution family with its response functions.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilySpec {
    pub kind: FamilyKind,
    pub links: Vec<ResponseFn>,
}

pub fn make_family(name: &str) -> Result<FamilySpec, FamilyError> {
    let kind = match name.to_ascii_lowercase().as_str() {
        "normal" | "gaussian" => FamilyKind::Normal,
        "bernoulli" => FamilyKind::Bernoulli,
        "poisson" => FamilyKind::Poisson,
        "gamma" => FamilyKind::Gamma,
        "beta" => FamilyKind::Beta,
        _ => return Err(FamilyError::UnknownFamily(name.to_string())),
    };
    Ok(FamilySpec {
        kind,
        links: kind.default_links(),
    })
}

/// Replaces the response functions of `base`.
pub fn custom_family(base: &FamilySpec, trafos: Vec<ResponseFn>) -> Result<FamilySpec, FamilyError> {
    if trafos.len() != base.n_params() {
        return Err(FamilyError::TrafoCount {
            expected: base.n_params(),
            got: trafos.len(),
        });
    }
    Ok(FamilySpec {
        kind: base.kind,
        links: trafos,
    })
}

/// Serializable description of a family with built-in response functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyDescriptor {
    pub name: FamilyKind,
    pub links: Vec<String>,
}

impl FamilySpec {
    pub fn n_params(&self) -> usize {
        self.kind.param_names().len()
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        self.kind.param_names()
    }

    pub fn descriptor(&self) -> Result<FamilyDescriptor, FamilyError> {
        let links = self
            .links
            .iter()
            .map(|l| match l {
                ResponseFn::Custom { .. } => Err(FamilyError::NotSerializable),
                other => Ok(other.name()),
            })
            .collect::<Result<_, _>>()?;
        Ok(FamilyDescriptor {
            name: self.kind,
            links,
        })
    }

    pub fn from_descriptor(d: &FamilyDescriptor) -> Result<Self, FamilyError> {
        let base = make_family(d.name.name())?;
        let links = d
            .links
            .iter()
            .map(|n| ResponseFn::from_name(n))
            .collect::<Result<Vec<_>, _>>()?;
        custom_family(&base, links)
    }

    pub fn check_support(&self, y: &[f64]) -> Result<(), FamilyError> {
        match y.iter().position(|v| !self.kind.in_support(*v)) {
            None => Ok(()),
            Some(row) => Err(FamilyError::OutOfSupport {
                row,
                value: y[row],
                family: self.name(),
            }),
        }
    }

    fn check_eta(&self, eta: &DMatrix<f64>) -> Result<(), FamilyError> {
        if eta.ncols() != self.n_params() {
            return Err(FamilyError::Dimension(format!(
                "{} predictor columns for {} parameters",
                eta.ncols(),
                self.n_params()
            )));
        }
        Ok(())
    }

    /// θ = h(η), column by column.
    pub fn transform(&self, eta: &DMatrix<f64>) -> Result<DMatrix<f64>, FamilyError> {
        self.check_eta(eta)?;
        let mut theta = eta.clone();
        for (k, mut col) in theta.column_iter_mut().enumerate() {
            let h = &self.links[k];
            col.apply(|v| *v = h.value(*v));
        }
        Ok(theta)
    }

    pub fn distribution(&self, eta: &DMatrix<f64>) -> Result<FittedDistribution, FamilyError> {
        Ok(FittedDistribution {
            family: self.clone(),
            params: self.transform(eta)?,
        })
    }

    /// Per-row negative log-likelihood and its gradient with respect to η.
    pub fn nll_and_grad(&self, eta: &DMatrix<f64>, y: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), FamilyError> {
        self.check_eta(eta)?;
        if y.len() != eta.nrows() {
            return Err(FamilyError::Dimension(format!(
                "{} responses for {} rows",
                y.len(),
                eta.nrows()
            )));
        }
        self.check_support(y)?;
        let k = self.n_params();
        let mut nll = Vec::with_capacity(y.len());
        let mut grad = DMatrix::zeros(y.len(), k);
        let mut theta = vec![0.0; k];
        let mut g = vec![0.0; k];
        for (i, &yi) in y.iter().enumerate() {
            for j in 0..k {
                theta[j] = self.links[j].value(eta[(i, j)]);
            }
            nll.push(-self.kind.log_prob(&theta, yi));
            self.kind.grad_theta(&theta, yi, &mut g);
            for j in 0..k {
                grad[(i, j)] = -g[j] * self.links[j].derivative(eta[(i, j)]);
            }
        }
        Ok((nll, grad))
    }
}

/// Per-observation parameters θ bound to a family.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedDistribution {
    pub family: FamilySpec,
    /// n × K transformed parameters.
    pub params: DMatrix<f64>,
}

fn check_p(p: f64) -> Result<(), FamilyError> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(FamilyError::InvalidProbability(p))
    }
}

impl FittedDistribution {
    pub fn len(&self) -> usize {
        self.params.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> FamilyKind {
        self.family.kind
    }

    pub fn theta(&self, i: usize) -> Vec<f64> {
        self.params.row(i).iter().copied().collect()
    }

    fn rowwise(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|i| f(&self.theta(i))).collect()
    }

    fn check_len(&self, y: &[f64]) -> Result<(), FamilyError> {
        if y.len() != self.len() {
            return Err(FamilyError::Dimension(format!(
                "{} values for {} observations",
                y.len(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn log_prob(&self, y: &[f64]) -> Result<Vec<f64>, FamilyError> {
        self.check_len(y)?;
        self.family.check_support(y)?;
        let kind = self.kind();
        Ok((0..self.len()).map(|i| kind.log_prob(&self.theta(i), y[i])).collect())
    }

    pub fn mean(&self) -> Vec<f64> {
        let kind = self.kind();
        self.rowwise(|t| kind.mean(t))
    }

    pub fn stddev(&self) -> Vec<f64> {
        let kind = self.kind();
        self.rowwise(|t| kind.variance(t).sqrt())
    }

    pub fn quantile(&self, p: f64) -> Result<Vec<f64>, FamilyError> {
        check_p(p)?;
        let kind = self.kind();
        Ok(self.rowwise(|t| kind.quantile(t, p)))
    }

    pub fn cdf(&self, y: &[f64]) -> Result<Vec<f64>, FamilyError> {
        self.check_len(y)?;
        let kind = self.kind();
        Ok((0..self.len()).map(|i| kind.cdf(&self.theta(i), y[i])).collect())
    }

    pub fn pdf(&self, y: &[f64]) -> Result<Vec<f64>, FamilyError> {
        self.check_len(y)?;
        let kind = self.kind();
        Ok((0..self.len()).map(|i| kind.pdf(&self.theta(i), y[i])).collect())
    }

    /// `n × n_draws` draws, deterministic given `seed`.
    pub fn sample(&self, n_draws: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = self.kind();
        let mut out = DMatrix::zeros(self.len(), n_draws);
        for i in 0..self.len() {
            let theta = self.theta(i);
            for j in 0..n_draws {
                out[(i, j)] = kind.sample_one(&theta, &mut rng);
            }
        }
        out
    }

    /// Rows `rows` of this distribution.
    pub fn select(&self, rows: &[usize]) -> FittedDistribution {
        FittedDistribution {
            family: self.family.clone(),
            params: self.params.select_rows(rows),
        }
    }
}

/// Weighted finite mixture of distributions over the same observations.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDistribution {
    pub components: Vec<FittedDistribution>,
    pub weights: Vec<f64>,
}

fn log_sum_exp(values: &[f64], log_w: &[f64]) -> f64 {
    let terms: Vec<f64> = values.iter().zip(log_w).map(|(v, w)| v + w).collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

impl MixtureDistribution {
    pub fn new(components: Vec<FittedDistribution>, weights: Vec<f64>) -> Result<Self, FamilyError> {
        let first = components.first().ok_or(FamilyError::EmptyMixture)?;
        if weights.len() != components.len()
            || weights.iter().any(|w| !(*w >= 0.0))
            || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(FamilyError::InvalidWeights);
        }
        if components
            .iter()
            .any(|c| c.len() != first.len() || c.kind() != first.kind())
        {
            return Err(FamilyError::Dimension(
                "mixture components differ in family or observation count".into(),
            ));
        }
        Ok(Self { components, weights })
    }

    pub fn uniform(components: Vec<FittedDistribution>) -> Result<Self, FamilyError> {
        let n = components.len();
        if n == 0 {
            return Err(FamilyError::EmptyMixture);
        }
        Self::new(components, vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.components[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> FamilyKind {
        self.components[0].kind()
    }

    pub fn log_prob(&self, y: &[f64]) -> Result<Vec<f64>, FamilyError> {
        let member: Vec<Vec<f64>> = self
            .components
            .iter()
            .map(|c| c.log_prob(y))
            .collect::<Result<_, _>>()?;
        let log_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        Ok((0..self.len())
            .map(|i| {
                let v: Vec<f64> = member.iter().map(|m| m[i]).collect();
                log_sum_exp(&v, &log_w)
            })
            .collect())
    }

    fn weighted(&self, f: impl Fn(&FittedDistribution) -> Vec<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (c, w) in self.components.iter().zip(&self.weights) {
            for (o, v) in out.iter_mut().zip(f(c)) {
                *o += w * v;
            }
        }
        out
    }

    pub fn mean(&self) -> Vec<f64> {
        self.weighted(FittedDistribution::mean)
    }

    /// Standard deviation by the law of total variance.
    pub fn stddev(&self) -> Vec<f64> {
        let mean = self.mean();
        let second = self.weighted(|c| {
            c.mean()
                .iter()
                .zip(c.stddev())
                .map(|(m, s)| s * s + m * m)
                .collect()
        });
        second
            .iter()
            .zip(mean)
            .map(|(s, m)| (s - m * m).max(0.0).sqrt())
            .collect()
    }

    pub fn cdf(&self, y: &[f64]) -> Result<Vec<f64>, FamilyError> {
        let parts: Vec<Vec<f64>> = self.components.iter().map(|c| c.cdf(y)).collect::<Result<_, _>>()?;
        Ok((0..self.len())
            .map(|i| parts.iter().zip(&self.weights).map(|(p, w)| w * p[i]).sum())
            .collect())
    }

    pub fn pdf(&self, y: &[f64]) -> Result<Vec<f64>, FamilyError> {
        let parts: Vec<Vec<f64>> = self.components.iter().map(|c| c.pdf(y)).collect::<Result<_, _>>()?;
        Ok((0..self.len())
            .map(|i| parts.iter().zip(&self.weights).map(|(p, w)| w * p[i]).sum())
            .collect())
    }

    /// Quantile by bisection between the smallest and largest component
    /// quantiles (integers for discrete families).
    pub fn quantile(&self, p: f64) -> Result<Vec<f64>, FamilyError> {
        check_p(p)?;
        let member: Vec<Vec<f64>> = self
            .components
            .iter()
            .map(|c| c.quantile(p))
            .collect::<Result<_, _>>()?;
        let discrete = self.kind().is_discrete();
        let mix_cdf = |i: usize, y: f64| -> f64 {
            self.components
                .iter()
                .zip(&self.weights)
                .map(|(c, w)| w * c.kind().cdf(&c.theta(i), y))
                .sum()
        };
        Ok((0..self.len())
            .map(|i| {
                let lo = member.iter().map(|m| m[i]).fold(f64::INFINITY, f64::min);
                let hi = member.iter().map(|m| m[i]).fold(f64::NEG_INFINITY, f64::max);
                if discrete {
                    let mut k = lo;
                    while k < hi && mix_cdf(i, k) < p {
                        k += 1.0;
                    }
                    k
                } else if hi > lo {
                    bisect_cdf(|y| mix_cdf(i, y), lo, hi, p)
                } else {
                    lo
                }
            })
            .collect())
    }
}
