//! Univariate truncated Gaussian: moments, entropy, log-density expectation
//! and sampling, evaluated stably in the far tails.
//!
//! A distribution is described by the bounds `[lo, hi]` and the mean `v` and
//! variance `c` of the parent (untruncated) Gaussian. `c = +inf` denotes the
//! uniform distribution on `[lo, hi]`.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;

use rand::Rng;
use statrs::function::erf::erfc;
use thiserror::Error;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Standardized width below which the interval is expanded in a series.
const NARROW: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum TruncNormError {
    #[error("invalid bounds: lo = {lo}, hi = {hi}")]
    InvalidBounds { lo: f64, hi: f64 },
    #[error("invalid parent variance {0}")]
    InvalidVariance(f64),
    #[error("invalid parent mean {0}")]
    InvalidMean(f64),
    #[error("truncated mass underflows: standardized bounds [{alpha}, {beta}]")]
    Underflow { alpha: f64, beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedGaussian {
    lo: f64,
    hi: f64,
    v: f64,
    c: f64,
}

/// First and second moments together with the variance they imply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub second: f64,
    pub variance: f64,
}

/// Standardized statistics of N(0,1) restricted to [alpha, beta].
#[derive(Debug, Clone, Copy)]
struct Standard {
    ln_mass: f64,
    mean: f64,
    variance: f64,
    entropy: f64,
    /// Mean measured from the nearer bound, when that is the precise form.
    edge: Option<Edge>,
}

#[derive(Debug, Clone, Copy)]
enum Edge {
    Lo(f64),
    Hi(f64),
}

fn std_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        (-0.5 * x * x - LN_SQRT_2PI).exp()
    }
}

/// Upper-tail probability Q(x) = 1 − Φ(x).
fn upper_tail(x: f64) -> f64 {
    if x == f64::INFINITY {
        0.0
    } else if x == f64::NEG_INFINITY {
        1.0
    } else {
        0.5 * erfc(x / SQRT_2)
    }
}

/// Moments of `y = x − a ≥ 0` for `x ~ N(0,1)` restricted to `[a, a + w]`.
/// The density is `∝ exp(−a y − y²/2)`, an exponential tilted by a small
/// quadratic far in the tail, so plain quadrature in `y` keeps full precision.
struct ShiftedTail {
    /// ln ∫ exp(−a y − y²/2) dy over `[0, w]`.
    ln_z: f64,
    mean: f64,
    second: f64,
    variance: f64,
}

fn shifted_tail(a: f64, w: f64) -> ShiftedTail {
    // beyond a y + y²/2 = 40 the integrand is below e⁻⁴⁰ of its peak
    let reach = 80.0 / (a + (a * a + 80.0).sqrt());
    let top = w.min(reach);
    let (nodes, weights) = gauss_legendre_16();
    const PANELS: usize = 16;
    let h = top / PANELS as f64;
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for p in 0..PANELS {
        let mid = (p as f64 + 0.5) * h;
        for (x, wt) in nodes.iter().zip(weights) {
            let y = mid + 0.5 * h * x;
            let f = wt * (-a * y - 0.5 * y * y).exp();
            z += f;
            m1 += f * y;
            m2 += f * y * y;
        }
    }
    let (mean, second) = (m1 / z, m2 / z);
    let variance = (second - mean * mean).max(0.0);
    ShiftedTail {
        ln_z: (0.5 * h * z).ln(),
        mean,
        second,
        variance,
    }
}

/// 16-point Gauss–Legendre rule on [−1, 1] by Newton iteration on P₁₆.
fn gauss_legendre_16() -> &'static ([f64; 16], [f64; 16]) {
    static RULE: OnceLock<([f64; 16], [f64; 16])> = OnceLock::new();
    RULE.get_or_init(|| {
        const N: usize = 16;
        let mut nodes = [0.0; N];
        let mut weights = [0.0; N];
        for k in 0..N {
            let mut x = (PI * (k as f64 + 0.75) / (N as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for n in 2..=N {
                    let n = n as f64;
                    let p2 = ((2.0 * n - 1.0) * x * p1 - (n - 1.0) * p0) / n;
                    p0 = p1;
                    p1 = p2;
                }
                dp = N as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            nodes[k] = x;
            weights[k] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}

/// `a * b` with the convention `inf * 0 = 0`.
fn mul0(a: f64, b: f64) -> f64 {
    if b == 0.0 || a == 0.0 {
        0.0
    } else {
        a * b
    }
}

/// Whether `1 + t − mean²` kept enough significant digits to be trusted.
fn resolved(variance: f64, t: f64, mean: f64) -> bool {
    variance > 64.0 * f64::EPSILON * (1.0 + t.abs() + mean * mean)
}

fn standard(alpha: f64, beta: f64) -> Result<Standard, TruncNormError> {
    let underflow = TruncNormError::Underflow { alpha, beta };
    let width = beta - alpha;

    let mid = 0.5 * (alpha + beta);
    if width < NARROW && mid.abs() * width < NARROW {
        // density ∝ exp(−c u − u²/2) on |u| ≤ width/2 around the midpoint c
        let c = 0.5 * (alpha + beta);
        let w2 = width * width;
        let mean = c - c * w2 / 12.0;
        let variance = w2 / 12.0;
        let ln_mass = -0.5 * c * c - LN_SQRT_2PI + width.ln() + (c * c - 1.0) * w2 / 24.0;
        let t = variance + mean * mean - 1.0;
        return Ok(Standard {
            ln_mass,
            mean,
            variance,
            entropy: LN_SQRT_2PI + ln_mass + 0.5 * (1.0 + t),
            edge: None,
        });
    }

    if alpha >= 0.0 || beta <= 0.0 {
        // one-sided: work relative to the bound nearer the mode
        let mirrored = alpha < 0.0;
        let (a, b) = if mirrored { (-beta, -alpha) } else { (alpha, beta) };
        let tail = shifted_tail(a, b - a);
        let ln_mass = tail.ln_z - 0.5 * a * a - LN_SQRT_2PI;
        if !ln_mass.is_finite() || !(tail.variance > 0.0) {
            return Err(underflow);
        }
        let mean = a + tail.mean;
        return Ok(Standard {
            ln_mass,
            mean: if mirrored { -mean } else { mean },
            variance: tail.variance,
            entropy: tail.ln_z + a * tail.mean + 0.5 * tail.second,
            edge: Some(if mirrored { Edge::Hi(tail.mean) } else { Edge::Lo(tail.mean) }),
        });
    }

    // straddles the mode, so the mass is at least of order min(|alpha|, beta)
    let mass = 1.0 - upper_tail(beta) - upper_tail(-alpha);
    if !(mass > 1e-300) {
        return Err(underflow);
    }
    let (pa, pb) = (std_pdf(alpha), std_pdf(beta));
    let mean = (pa - pb) / mass;
    let t = (mul0(alpha, pa) - mul0(beta, pb)) / mass;
    let variance = 1.0 + t - mean * mean;
    if !resolved(variance, t, mean) {
        return Err(underflow);
    }
    let ln_mass = mass.ln();
    Ok(Standard {
        ln_mass,
        mean,
        variance,
        entropy: LN_SQRT_2PI + ln_mass + 0.5 * (1.0 + t),
        edge: None,
    })
}

impl TruncatedGaussian {
    pub fn new(lo: f64, hi: f64, v: f64, c: f64) -> Result<Self, TruncNormError> {
        if lo.is_nan() || hi.is_nan() || !(lo < hi) {
            return Err(TruncNormError::InvalidBounds { lo, hi });
        }
        if !(c > 0.0) {
            return Err(TruncNormError::InvalidVariance(c));
        }
        if !v.is_finite() {
            return Err(TruncNormError::InvalidMean(v));
        }
        if c.is_infinite() && !(lo.is_finite() && hi.is_finite()) {
            return Err(TruncNormError::InvalidBounds { lo, hi });
        }
        Ok(Self { lo, hi, v, c })
    }

    /// Uniform distribution on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64) -> Result<Self, TruncNormError> {
        Self::new(lo, hi, 0.5 * (lo + hi), f64::INFINITY)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    /// Parent mean.
    pub fn v(&self) -> f64 {
        self.v
    }

    /// Parent variance.
    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn is_uniform(&self) -> bool {
        self.c.is_infinite()
    }

    fn standardized(&self) -> Result<Standard, TruncNormError> {
        let s = self.c.sqrt();
        standard((self.lo - self.v) / s, (self.hi - self.v) / s)
    }

    pub fn moments(&self) -> Result<Moments, TruncNormError> {
        if self.is_uniform() {
            let mean = 0.5 * (self.lo + self.hi);
            let variance = (self.hi - self.lo).powi(2) / 12.0;
            return Ok(Moments {
                mean,
                second: mean * mean + variance,
                variance,
            });
        }
        let st = self.standardized()?;
        let sigma = self.c.sqrt();
        let mean = match st.edge {
            Some(Edge::Lo(d)) => self.lo + sigma * d,
            Some(Edge::Hi(d)) => self.hi - sigma * d,
            None => self.v + sigma * st.mean,
        }
        .clamp(self.lo, self.hi);
        let variance = self.c * st.variance;
        Ok(Moments {
            mean,
            second: mean * mean + variance,
            variance,
        })
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> Result<f64, TruncNormError> {
        if self.is_uniform() {
            return Ok((self.hi - self.lo).ln());
        }
        let st = self.standardized()?;
        Ok(0.5 * self.c.ln() + st.entropy)
    }

    /// ln of the normalizer `sqrt(2πc) * mass`, or `ln(hi − lo)` when uniform.
    pub fn log_normalizer(&self) -> Result<f64, TruncNormError> {
        if self.is_uniform() {
            return Ok((self.hi - self.lo).ln());
        }
        Ok(LN_SQRT_2PI + 0.5 * self.c.ln() + self.standardized()?.ln_mass)
    }

    /// Density at `x` (zero outside the support).
    pub fn pdf(&self, x: f64) -> Result<f64, TruncNormError> {
        if x < self.lo || x > self.hi {
            return Ok(0.0);
        }
        let ln_z = self.log_normalizer()?;
        if self.is_uniform() {
            return Ok((-ln_z).exp());
        }
        Ok((-(x - self.v).powi(2) / (2.0 * self.c) - ln_z).exp())
    }

    /// `E_q[ln p(x)]` for this density `p` under any `q` on the same support
    /// with first and second moments `mean`, `second`.
    pub fn expected_log_pdf(&self, mean: f64, second: f64) -> Result<f64, TruncNormError> {
        let ln_z = self.log_normalizer()?;
        if self.is_uniform() {
            return Ok(-ln_z);
        }
        let sq = second - 2.0 * self.v * mean + self.v * self.v;
        Ok(-ln_z - sq / (2.0 * self.c))
    }

    /// Exact draw by rejection, with a proposal chosen from the interval geometry.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.is_uniform() {
            return rng.random_range(self.lo..=self.hi);
        }
        let s = self.c.sqrt();
        let alpha = (self.lo - self.v) / s;
        let beta = (self.hi - self.v) / s;
        let x = sample_standard(alpha, beta, rng);
        (self.v + s * x).clamp(self.lo, self.hi)
    }
}

fn sample_standard<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> f64 {
    if beta <= 0.0 {
        return -sample_standard(-beta, -alpha, rng);
    }
    if alpha < 0.0 {
        // interval straddles the mode
        if beta - alpha > 2.0 * (2.0 * PI).sqrt() || (alpha < -1.0 && beta > 1.0) {
            loop {
                let x: f64 = rng.sample(rand_distr::StandardNormal);
                if x >= alpha && x <= beta {
                    return x;
                }
            }
        }
        return uniform_rejection(alpha, beta, 0.0, rng);
    }
    // 0 <= alpha < beta
    if (beta - alpha) * (beta + alpha) <= 2.0 || beta - alpha < 1e-300_f64.max(1e-12 * alpha) {
        return uniform_rejection(alpha, beta, alpha, rng);
    }
    // exponential proposal for a one-sided tail
    let lambda = 0.5 * (alpha + (alpha * alpha + 4.0).sqrt());
    loop {
        let u: f64 = rng.random();
        let x = alpha - (1.0 - u).ln() / lambda;
        if x > beta {
            continue;
        }
        let accept: f64 = rng.random();
        if accept <= (-0.5 * (x - lambda).powi(2)).exp() {
            return x;
        }
    }
}

/// Uniform proposal on [alpha, beta] accepted with φ(x)/φ(peak).
fn uniform_rejection<R: Rng + ?Sized>(alpha: f64, beta: f64, peak: f64, rng: &mut R) -> f64 {
    loop {
        let x = if beta > alpha {
            rng.random_range(alpha..=beta)
        } else {
            alpha
        };
        let accept: f64 = rng.random();
        if accept <= (0.5 * (peak * peak - x * x)).exp() {
            return x;
        }
    }
}

/// First moment Ξ₁ of `d`.
pub fn tg_moment1(d: &TruncatedGaussian) -> Result<f64, TruncNormError> {
    Ok(d.moments()?.mean)
}

/// Second moment Ξ₂ of `d`.
pub fn tg_moment2(d: &TruncatedGaussian) -> Result<f64, TruncNormError> {
    Ok(d.moments()?.second)
}

pub fn tg_sample<R: Rng + ?Sized>(d: &TruncatedGaussian, rng: &mut R) -> f64 {
    d.sample(rng)
}

pub fn tg_entropy(d: &TruncatedGaussian) -> Result<f64, TruncNormError> {
    d.entropy()
}
