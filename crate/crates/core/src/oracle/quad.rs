use crate::truncnorm::TruncatedGaussian;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss 7-point weights at XGK[1], XGK[3], XGK[5], XGK[7]
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One Gauss–Kronrod 7/15 panel: the Kronrod value, `|K − G|` and the
/// Kronrod estimate of `∫|f|` (the roundoff scale).
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    let mut abs = WGK[7] * fc.abs();
    for j in 0..7 {
        let x = h * XGK[j];
        let (f1, f2) = (f(c - x), f(c + x));
        k += WGK[j] * (f1 + f2);
        abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            g += WG[j / 2] * (f1 + f2);
        }
    }
    (k * h, ((k - g) * h).abs(), abs * h.abs())
}

/// Adaptive Gauss–Kronrod integration of `f` over `[a, b]` to absolute `tol`,
/// bisecting panels whose error estimate exceeds their share of the budget.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    integrate_pieces(&f, &[a, b], tol)
}

/// As [`integrate`], starting from the panels given by ascending `breaks`.
pub fn integrate_pieces(f: &impl Fn(f64) -> f64, breaks: &[f64], tol: f64) -> f64 {
    let width = breaks[breaks.len() - 1] - breaks[0];
    let mut stack: Vec<(f64, f64)> = breaks.windows(2).map(|w| (w[0], w[1])).collect();
    let mut total = 0.0;
    while let Some((a, b)) = stack.pop() {
        let (k, err, abs) = gk15(f, a, b);
        let budget = (tol * (b - a) / width).max(50.0 * f64::EPSILON * abs);
        if err <= budget || (b - a) < 1e-13 * width {
            total += k;
        } else {
            let m = 0.5 * (a + b);
            stack.push((m, b));
            stack.push((a, m));
        }
    }
    total
}

/// Integrand selector for [`quad_moment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Functional {
    One,
    Theta,
    ThetaSquared,
    /// `−ln pdf(θ)`, whose expectation is the entropy.
    NegLogPdf,
}

/// `E[f(θ)]` under `d`, by quadrature of the unnormalized density.
pub fn quad_moment(f: Functional, d: &TruncatedGaussian) -> f64 {
    let (lo, hi) = (d.lo(), d.hi());
    if d.is_uniform() {
        let w = hi - lo;
        return match f {
            Functional::One => 1.0,
            Functional::Theta => 0.5 * (lo + hi),
            Functional::ThetaSquared => (hi * hi + hi * lo + lo * lo) / 3.0,
            Functional::NegLogPdf => w.ln(),
        };
    }
    let (v, c) = (d.v(), d.c());
    let sd = c.sqrt();
    // reference point: the mode, so the scaled density peaks at 1
    let m = v.clamp(lo, hi);
    // (x−v)² − (m−v)², factored to avoid cancellation far in a tail
    let expo = |x: f64| -((x - m) * (x + m - 2.0 * v)) / (2.0 * c);
    let phi = |x: f64| expo(x).exp();

    let mut breaks = vec![lo, hi];
    for k in -10..=10 {
        let x = v + k as f64 * sd;
        if x > lo && x < hi {
            breaks.push(x);
        }
    }
    if m > lo && m < hi {
        breaks.push(m);
    }
    // geometric panels around the mode resolve peaks pinned at a bound
    let width = c / ((m - v).abs() + sd);
    let mut step = width;
    while step < hi - lo {
        for x in [m - step, m + step] {
            if x > lo && x < hi {
                breaks.push(x);
            }
        }
        step *= 2.0;
    }
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup();

    let scale = (hi - lo).min(width);
    let tol = 1e-14 * scale;
    let z = integrate_pieces(&phi, &breaks, tol);
    let num = match f {
        Functional::One => z,
        Functional::Theta => integrate_pieces(&|x: f64| x * phi(x), &breaks, tol),
        Functional::ThetaSquared => integrate_pieces(&|x: f64| x * x * phi(x), &breaks, tol),
        Functional::NegLogPdf => {
            let e = integrate_pieces(
                &|x: f64| {
                    let p = phi(x);
                    if p == 0.0 {
                        0.0
                    } else {
                        -expo(x) * p
                    }
                },
                &breaks,
                tol,
            );
            return e / z + z.ln();
        }
    };
    num / z
}
