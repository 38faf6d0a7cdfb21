//! Bivariate copula families, h-functions, and model selection.
//!
//! Families: independence, Gaussian, Student-t, Clayton, Gumbel, Frank, and
//! a rank-histogram (checkerboard) fallback. Archimedean families can be
//! rotated by 90/180/270 degrees to cover negative and survival dependence;
//! rotations are handled by argument reflection on top of the base family.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::gamma::ln_gamma;

/// Lower clamp for uniform arguments fed into h-functions and densities.
pub const UNIFORM_EPS: f64 = 1e-12;
/// Tolerance of numeric h-inversion.
pub const H_INV_TOL: f64 = 1e-10;
/// Iteration cap for numeric h-inversion.
pub const H_INV_MAX_ITER: usize = 200;

/// Degrees-of-freedom grid searched when fitting the Student-t family.
pub const STUDENT_NU_GRID: [f64; 7] = [2.5, 3.0, 4.0, 6.0, 10.0, 20.0, 30.0];

const CHECKERBOARD_BINS: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum CopulaError {
    #[error("need at least {1} paired samples, got {0}")]
    TooFewSamples(usize, usize),
    #[error("samples must lie strictly inside (0, 1)")]
    OutOfRange,
    #[error("mismatched sample lengths {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid parameter for {family}: {message}")]
    InvalidParameter { family: String, message: String },
    #[error("vine fitting needs at least 2 dimensions, got {0}")]
    TooFewDimensions(usize),
    #[error("model persistence: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model persistence I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Counterclockwise rotation applied to a base family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub fn degrees(self) -> u16 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }
}

/// Family plus parameters of one pair copula.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Family {
    Independence,
    Gaussian { rho: f64 },
    StudentT { rho: f64, nu: f64 },
    Clayton { theta: f64 },
    Gumbel { theta: f64 },
    Frank { theta: f64 },
    /// Empirical rank histogram on a 16x16 grid; probabilities sum to 1 and
    /// both margins are uniform (Sinkhorn-balanced).
    Checkerboard { probs: Vec<f64> },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Independence => "independence",
            Family::Gaussian { .. } => "gaussian",
            Family::StudentT { .. } => "student_t",
            Family::Clayton { .. } => "clayton",
            Family::Gumbel { .. } => "gumbel",
            Family::Frank { .. } => "frank",
            Family::Checkerboard { .. } => "checkerboard",
        }
    }

    /// Number of fitted parameters, used by the AIC penalty.
    pub fn n_params(&self) -> usize {
        match self {
            Family::Independence => 0,
            Family::Gaussian { .. } | Family::Clayton { .. } | Family::Gumbel { .. } | Family::Frank { .. } => 1,
            Family::StudentT { .. } => 2,
            // (bins-1)^2 free cells once both margins are pinned
            Family::Checkerboard { .. } => (CHECKERBOARD_BINS - 1) * (CHECKERBOARD_BINS - 1),
        }
    }
}

/// A bivariate copula: base family plus rotation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BivariateCopula {
    pub family: Family,
    pub rotation: Rotation,
}

fn clamp_u(u: f64) -> f64 {
    u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn student_t(nu: f64) -> StudentsT {
    StudentsT::new(0.0, 1.0, nu).expect("valid dof")
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Frank denominator `g(1) + g(u) g(v)` with `g(x) = exp(-theta x) - 1`,
/// rewritten as `A (B - 1) - (B - q)` to dodge the cancellation of two
/// near-unit terms at large |theta|.
fn frank_denominator(theta: f64, u: f64, v: f64) -> f64 {
    let a = (-theta * u).exp();
    let gv = (-theta * v).exp_m1();
    let b_minus_q = (-theta).exp() * (theta * (1.0 - v)).exp_m1();
    a * gv - b_minus_q
}

/// log of the Clayton generator sum `u^-t + v^-t - 1`.
fn clayton_ln_s(theta: f64, u: f64, v: f64) -> f64 {
    let la = -theta * u.ln();
    let lb = -theta * v.ln();
    let m = logaddexp(la, lb);
    if m > 50.0 {
        // the -1 is negligible at this magnitude
        m
    } else {
        (la.exp() + lb.exp() - 1.0).max(f64::MIN_POSITIVE).ln()
    }
}

// base-family density at (u, v), rotation not applied
fn base_density(family: &Family, u: f64, v: f64) -> f64 {
    match family {
        Family::Independence => 1.0,
        Family::Gaussian { rho } => {
            let n = std_normal();
            let x = n.inverse_cdf(u);
            let y = n.inverse_cdf(v);
            let r2 = 1.0 - rho * rho;
            (-(rho * rho * (x * x + y * y) - 2.0 * rho * x * y) / (2.0 * r2)).exp() / r2.sqrt()
        }
        Family::StudentT { rho, nu } => {
            let t = student_t(*nu);
            let x = t.inverse_cdf(u);
            let y = t.inverse_cdf(v);
            let r2 = 1.0 - rho * rho;
            let ln_const = ln_gamma((nu + 2.0) / 2.0) + ln_gamma(nu / 2.0)
                - 2.0 * ln_gamma((nu + 1.0) / 2.0)
                - 0.5 * r2.ln();
            let quad = (x * x - 2.0 * rho * x * y + y * y) / (nu * r2);
            let ln_num = -(nu + 2.0) / 2.0 * (1.0 + quad).ln();
            let ln_den = -(nu + 1.0) / 2.0 * ((1.0 + x * x / nu).ln() + (1.0 + y * y / nu).ln());
            (ln_const + ln_num - ln_den).exp()
        }
        Family::Clayton { theta } => {
            let t = *theta;
            let ln_s = clayton_ln_s(t, u, v);
            let ln_c = (1.0 + t).ln() - (1.0 + t) * (u.ln() + v.ln()) + (-1.0 / t - 2.0) * ln_s;
            ln_c.exp()
        }
        Family::Gumbel { theta } => {
            let t = *theta;
            let ln_lu = (-u.ln()).ln();
            let ln_lv = (-v.ln()).ln();
            let ln_a = logaddexp(t * ln_lu, t * ln_lv);
            let a_pow = (ln_a / t).exp(); // a^(1/t)
            let ln_c = -a_pow + (t - 1.0) * (ln_lu + ln_lv) - u.ln() - v.ln()
                + (2.0 / t - 2.0) * ln_a
                + (1.0 + (t - 1.0) / a_pow).ln();
            ln_c.exp()
        }
        Family::Frank { theta } => {
            let t = *theta;
            if t.abs() < 1e-6 {
                return 1.0;
            }
            let g1 = (-t).exp_m1();
            let den = frank_denominator(t, u, v);
            -t * g1 * (-t * (u + v)).exp() / (den * den)
        }
        Family::Checkerboard { probs } => {
            let m = CHECKERBOARD_BINS;
            let i = ((u * m as f64) as usize).min(m - 1);
            let j = ((v * m as f64) as usize).min(m - 1);
            probs[i * m + j] * (m * m) as f64
        }
    }
}

// base-family h(u | v) = dC/dv, rotation not applied; exchangeable families
fn base_h(family: &Family, u: f64, v: f64) -> f64 {
    match family {
        Family::Independence => u,
        Family::Gaussian { rho } => {
            let n = std_normal();
            let x = n.inverse_cdf(u);
            let y = n.inverse_cdf(v);
            n.cdf((x - rho * y) / (1.0 - rho * rho).sqrt())
        }
        Family::StudentT { rho, nu } => {
            let t = student_t(*nu);
            let x = t.inverse_cdf(u);
            let y = t.inverse_cdf(v);
            let scale = ((nu + y * y) * (1.0 - rho * rho) / (nu + 1.0)).sqrt();
            student_t(nu + 1.0).cdf((x - rho * y) / scale)
        }
        Family::Clayton { theta } => {
            let t = *theta;
            let ln_s = clayton_ln_s(t, u, v);
            ((-1.0 - t) * v.ln() + (-1.0 / t - 1.0) * ln_s).exp()
        }
        Family::Gumbel { theta } => {
            let t = *theta;
            let ln_lv = (-v.ln()).ln();
            let ln_a = logaddexp(t * (-u.ln()).ln(), t * ln_lv);
            let a_pow = (ln_a / t).exp();
            (-a_pow + (t - 1.0) * ln_lv + (1.0 / t - 1.0) * ln_a - v.ln()).exp()
        }
        Family::Frank { theta } => {
            let t = *theta;
            if t.abs() < 1e-6 {
                return u;
            }
            let gu = (-t * u).exp_m1();
            gu * (-t * v).exp() / frank_denominator(t, u, v)
        }
        Family::Checkerboard { probs } => checkerboard_h(probs, u, v, false),
    }
}

// base-family inverse of h in its first argument
fn base_h_inv(family: &Family, p: f64, v: f64) -> f64 {
    match family {
        Family::Independence => p,
        Family::Gaussian { rho } => {
            let n = std_normal();
            let y = n.inverse_cdf(v);
            n.cdf(n.inverse_cdf(p) * (1.0 - rho * rho).sqrt() + rho * y)
        }
        Family::StudentT { rho, nu } => {
            let t = student_t(*nu);
            let y = t.inverse_cdf(v);
            let scale = ((nu + y * y) * (1.0 - rho * rho) / (nu + 1.0)).sqrt();
            let x = student_t(nu + 1.0).inverse_cdf(p) * scale + rho * y;
            t.cdf(x)
        }
        Family::Clayton { theta } => {
            let t = *theta;
            // inner = v^-t (p^(-t/(1+t)) - 1) + 1, assembled in log space
            let m = (-t / (1.0 + t) * p.ln()).exp_m1();
            let ln_inner = logaddexp(-t * v.ln() + m.max(f64::MIN_POSITIVE).ln(), 0.0);
            (-ln_inner / t).exp()
        }
        Family::Gumbel { .. } => bisect_h_inv(family, p, v),
        Family::Frank { theta } => {
            let t = *theta;
            if t.abs() < 1e-6 {
                return p;
            }
            let g1 = (-t).exp_m1();
            let gv = (-t * v).exp_m1();
            let gu = p * g1 / ((-t * v).exp() - p * gv);
            (-(gu.ln_1p()) / t).clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
        }
        Family::Checkerboard { probs } => checkerboard_h_inv(probs, p, v, false),
    }
}

// bracketed bisection with Newton polish for families without a closed-form
// h-inverse; h is a CDF in u for fixed v, so the root is bracketed
fn bisect_h_inv(family: &Family, p: f64, v: f64) -> f64 {
    let mut lo = UNIFORM_EPS;
    let mut hi = 1.0 - UNIFORM_EPS;
    if base_h(family, lo, v) >= p {
        return lo;
    }
    if base_h(family, hi, v) <= p {
        return hi;
    }
    let mut u = 0.5;
    for _ in 0..H_INV_MAX_ITER {
        u = 0.5 * (lo + hi);
        let f = base_h(family, u, v) - p;
        if f.abs() < H_INV_TOL {
            break;
        }
        // Newton step when it stays inside the bracket
        let d = base_density(family, u, v);
        if d > 0.0 {
            let step = u - f / d;
            if step > lo && step < hi {
                let fs = base_h(family, step, v) - p;
                if fs.abs() < H_INV_TOL {
                    return step;
                }
                if fs < 0.0 {
                    lo = step;
                } else {
                    hi = step;
                }
                continue;
            }
        }
        if f < 0.0 {
            lo = u;
        } else {
            hi = u;
        }
    }
    u
}

fn checkerboard_h(probs: &[f64], u: f64, v: f64, transpose: bool) -> f64 {
    let m = CHECKERBOARD_BINS;
    let at = |i: usize, j: usize| if transpose { probs[j * m + i] } else { probs[i * m + j] };
    let j = ((v * m as f64) as usize).min(m - 1);
    let col: f64 = (0..m).map(|i| at(i, j)).sum();
    if col <= 0.0 {
        return u;
    }
    let t = u * m as f64;
    let iu = (t as usize).min(m - 1);
    let frac = t - iu as f64;
    let mut acc = 0.0;
    for i in 0..iu {
        acc += at(i, j);
    }
    ((acc + at(iu, j) * frac) / col).clamp(0.0, 1.0)
}

fn checkerboard_h_inv(probs: &[f64], p: f64, v: f64, transpose: bool) -> f64 {
    let m = CHECKERBOARD_BINS;
    let at = |i: usize, j: usize| if transpose { probs[j * m + i] } else { probs[i * m + j] };
    let j = ((v * m as f64) as usize).min(m - 1);
    let col: f64 = (0..m).map(|i| at(i, j)).sum();
    if col <= 0.0 {
        return p;
    }
    let target = p * col;
    let mut acc = 0.0;
    for i in 0..m {
        let cell = at(i, j);
        if acc + cell >= target || i == m - 1 {
            let frac = if cell > 0.0 { (target - acc) / cell } else { 0.0 };
            return ((i as f64 + frac.clamp(0.0, 1.0)) / m as f64)
                .clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
        }
        acc += cell;
    }
    1.0 - UNIFORM_EPS
}

impl BivariateCopula {
    pub fn independence() -> Self {
        BivariateCopula { family: Family::Independence, rotation: Rotation::R0 }
    }

    pub fn new(family: Family, rotation: Rotation) -> Result<Self, CopulaError> {
        let bad = |message: String| CopulaError::InvalidParameter {
            family: family.name().to_string(),
            message,
        };
        match &family {
            Family::Gaussian { rho } | Family::StudentT { rho, .. } => {
                if !(-1.0 < *rho && *rho < 1.0) {
                    return Err(bad(format!("rho {rho} outside (-1, 1)")));
                }
            }
            Family::Clayton { theta } => {
                if *theta <= 0.0 {
                    return Err(bad(format!("theta {theta} must be positive")));
                }
            }
            Family::Gumbel { theta } => {
                if *theta < 1.0 {
                    return Err(bad(format!("theta {theta} must be >= 1")));
                }
            }
            Family::Checkerboard { probs } => {
                if probs.len() != CHECKERBOARD_BINS * CHECKERBOARD_BINS {
                    return Err(bad("probability grid must be 16x16".into()));
                }
            }
            _ => {}
        }
        if let Family::StudentT { nu, .. } = &family {
            if *nu <= 2.0 {
                return Err(bad(format!("nu {nu} must exceed 2")));
            }
        }
        Ok(BivariateCopula { family, rotation })
    }

    /// Copula density c(u, v).
    pub fn density(&self, u: f64, v: f64) -> f64 {
        let u = clamp_u(u);
        let v = clamp_u(v);
        match self.rotation {
            Rotation::R0 => base_density(&self.family, u, v),
            Rotation::R90 => base_density(&self.family, 1.0 - u, v),
            Rotation::R180 => base_density(&self.family, 1.0 - u, 1.0 - v),
            Rotation::R270 => base_density(&self.family, u, 1.0 - v),
        }
    }

    /// Conditional CDF of the first argument given the second: h1(u | v).
    pub fn h1(&self, u: f64, v: f64) -> f64 {
        let u = clamp_u(u);
        let v = clamp_u(v);
        let h = match self.rotation {
            Rotation::R0 => base_h(&self.family, u, v),
            Rotation::R90 => 1.0 - base_h(&self.family, 1.0 - u, v),
            Rotation::R180 => 1.0 - base_h(&self.family, 1.0 - u, 1.0 - v),
            Rotation::R270 => base_h(&self.family, u, 1.0 - v),
        };
        h.clamp(0.0, 1.0)
    }

    /// Conditional CDF of the second argument given the first: h2(v | u).
    pub fn h2(&self, v: f64, u: f64) -> f64 {
        let u = clamp_u(u);
        let v = clamp_u(v);
        let h = match self.rotation {
            Rotation::R0 => self.base_h2(v, u),
            Rotation::R90 => self.base_h2(v, 1.0 - u),
            Rotation::R180 => 1.0 - self.base_h2(1.0 - v, 1.0 - u),
            Rotation::R270 => 1.0 - self.base_h2(1.0 - v, u),
        };
        h.clamp(0.0, 1.0)
    }

    // conditional of the second base argument given the first; exchangeable
    // families reuse base_h, the checkerboard transposes its grid
    fn base_h2(&self, v: f64, u: f64) -> f64 {
        match &self.family {
            Family::Checkerboard { probs } => checkerboard_h(probs, v, u, true),
            f => base_h(f, v, u),
        }
    }

    fn base_h2_inv(&self, p: f64, u: f64) -> f64 {
        match &self.family {
            Family::Checkerboard { probs } => checkerboard_h_inv(probs, p, u, true),
            f => base_h_inv(f, p, u),
        }
    }

    /// Inverse of [`Self::h1`] in its first argument.
    pub fn h1_inv(&self, p: f64, v: f64) -> f64 {
        let p = clamp_u(p);
        let v = clamp_u(v);
        let u = match self.rotation {
            Rotation::R0 => base_h_inv(&self.family, p, v),
            Rotation::R90 => 1.0 - base_h_inv(&self.family, 1.0 - p, v),
            Rotation::R180 => 1.0 - base_h_inv(&self.family, 1.0 - p, 1.0 - v),
            Rotation::R270 => base_h_inv(&self.family, p, 1.0 - v),
        };
        u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    }

    /// Inverse of [`Self::h2`] in its first argument.
    pub fn h2_inv(&self, p: f64, u: f64) -> f64 {
        let p = clamp_u(p);
        let u = clamp_u(u);
        let v = match self.rotation {
            Rotation::R0 => self.base_h2_inv(p, u),
            Rotation::R90 => self.base_h2_inv(p, 1.0 - u),
            Rotation::R180 => 1.0 - self.base_h2_inv(1.0 - p, 1.0 - u),
            Rotation::R270 => 1.0 - self.base_h2_inv(1.0 - p, u),
        };
        v.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    }

    /// Kendall tau implied by the fitted family (rotation applied).
    pub fn tau(&self) -> f64 {
        let base = match &self.family {
            Family::Independence => 0.0,
            Family::Gaussian { rho } | Family::StudentT { rho, .. } => {
                2.0 / std::f64::consts::PI * rho.asin()
            }
            Family::Clayton { theta } => theta / (theta + 2.0),
            Family::Gumbel { theta } => 1.0 - 1.0 / theta,
            Family::Frank { theta } => frank_tau(*theta),
            Family::Checkerboard { .. } => f64::NAN,
        };
        match self.rotation {
            Rotation::R0 | Rotation::R180 => base,
            Rotation::R90 | Rotation::R270 => -base,
        }
    }
}

/// Kendall tau of the Frank family via the first Debye function.
pub fn frank_tau(theta: f64) -> f64 {
    if theta.abs() < 1e-8 {
        return 0.0;
    }
    // D1(t) = (1/t) Int_0^t s/(e^s - 1) ds, Simpson on a fixed grid
    let t = theta.abs();
    let n = 400;
    let h = t / n as f64;
    let integrand = |s: f64| if s.abs() < 1e-12 { 1.0 } else { s / (s.exp() - 1.0) };
    let mut acc = integrand(0.0) + integrand(t);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * integrand(i as f64 * h);
    }
    let d1 = acc * h / 3.0 / t;
    let tau = 1.0 - 4.0 / t * (1.0 - d1);
    tau * theta.signum()
}

/// Kendall rank correlation (tau-b) via Knight's O(n log n) algorithm.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64, CopulaError> {
    if x.len() != y.len() {
        return Err(CopulaError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(CopulaError::TooFewSamples(n, 2));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        x[a].partial_cmp(&x[b]).unwrap().then(y[a].partial_cmp(&y[b]).unwrap())
    });

    let tie_count = |sorted_vals: &[f64]| -> u64 {
        let mut total = 0u64;
        let mut run = 1u64;
        for w in sorted_vals.windows(2) {
            if w[0] == w[1] {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };

    let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let n1 = tie_count(&xs);
    // joint ties
    let mut n3 = 0u64;
    {
        let mut run = 1u64;
        for i in 1..n {
            if xs[i] == xs[i - 1] && ys[i] == ys[i - 1] {
                run += 1;
            } else {
                n3 += run * (run - 1) / 2;
                run = 1;
            }
        }
        n3 += run * (run - 1) / 2;
    }

    // merge sort counting swaps
    let mut buf = ys.clone();
    let swaps = merge_count(&mut ys, &mut buf, 0, n);
    let mut ys_sorted = ys;
    ys_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n2 = tie_count(&ys_sorted);

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let den = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    if den == 0.0 {
        return Ok(0.0);
    }
    let num = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    Ok(num / den)
}

fn merge_count(a: &mut [f64], buf: &mut [f64], lo: usize, hi: usize) -> u64 {
    if hi - lo < 2 {
        return 0;
    }
    let mid = (lo + hi) / 2;
    let mut swaps = merge_count(a, buf, lo, mid) + merge_count(a, buf, mid, hi);
    let (mut i, mut j, mut k) = (lo, mid, lo);
    while i < mid && j < hi {
        if a[j] < a[i] {
            swaps += (mid - i) as u64;
            buf[k] = a[j];
            j += 1;
        } else {
            buf[k] = a[i];
            i += 1;
        }
        k += 1;
    }
    while i < mid {
        buf[k] = a[i];
        i += 1;
        k += 1;
    }
    while j < hi {
        buf[k] = a[j];
        j += 1;
        k += 1;
    }
    a[lo..hi].copy_from_slice(&buf[lo..hi]);
    swaps
}

/// Kendall-tau independence test: true when independence is NOT rejected at
/// the 5% level.
pub fn independence_not_rejected(tau: f64, n: usize) -> bool {
    let var = 2.0 * (2.0 * n as f64 + 5.0) / (9.0 * n as f64 * (n as f64 - 1.0));
    (tau / var.sqrt()).abs() < 1.959963984540054
}

// golden-section maximization on [lo, hi]
fn maximize_scalar(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() < tol {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    if fc > fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

fn log_likelihood(cop: &BivariateCopula, u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| cop.density(a, b).max(1e-300).ln())
        .sum()
}

// Gaussian copula log-likelihood from precomputed normal scores
fn gaussian_score_ll(xs: &[f64], ys: &[f64], rho: f64) -> f64 {
    let r2 = 1.0 - rho * rho;
    let n = xs.len() as f64;
    let mut acc = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        acc += rho * rho * (x * x + y * y) - 2.0 * rho * x * y;
    }
    -0.5 * n * r2.ln() - acc / (2.0 * r2)
}

// Student-t copula log-likelihood from precomputed t scores at fixed dof
fn student_score_ll(xs: &[f64], ys: &[f64], rho: f64, nu: f64) -> f64 {
    let r2 = 1.0 - rho * rho;
    let n = xs.len() as f64;
    let ln_const = ln_gamma((nu + 2.0) / 2.0) + ln_gamma(nu / 2.0)
        - 2.0 * ln_gamma((nu + 1.0) / 2.0)
        - 0.5 * r2.ln();
    let mut acc = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let quad = (x * x - 2.0 * rho * x * y + y * y) / (nu * r2);
        acc += -(nu + 2.0) / 2.0 * (1.0 + quad).ln()
            + (nu + 1.0) / 2.0 * ((1.0 + x * x / nu).ln() + (1.0 + y * y / nu).ln());
    }
    n * ln_const + acc
}

/// Fit summary for one candidate family.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub copula: BivariateCopula,
    pub log_likelihood: f64,
    pub aic: f64,
    pub sample_tau: f64,
}

/// Fits a pair copula to uniforms by AIC over the candidate set.
///
/// Independence is selected outright when the Kendall-tau test fails to
/// reject at the 5% level (and for tie-degenerate input). Single-parameter
/// families start from the Kendall-tau inversion and are refined by maximum
/// likelihood; Student-t searches its dof grid; a 16x16 checkerboard is the
/// fallback when every parametric AIC is worse.
pub fn fit_bivariate(u: &[f64], v: &[f64]) -> Result<FitReport, CopulaError> {
    if u.len() != v.len() {
        return Err(CopulaError::LengthMismatch(u.len(), v.len()));
    }
    if u.len() < 30 {
        return Err(CopulaError::TooFewSamples(u.len(), 30));
    }
    if u.iter().chain(v).any(|&x| x <= 0.0 || x >= 1.0) {
        return Err(CopulaError::OutOfRange);
    }
    let n = u.len();
    let tau = kendall_tau(u, v)?;

    if tau == 0.0 || independence_not_rejected(tau, n) {
        let cop = BivariateCopula::independence();
        return Ok(FitReport { copula: cop, log_likelihood: 0.0, aic: 0.0, sample_tau: tau });
    }

    let mut best: Option<FitReport> = None;
    let mut consider = |cop: BivariateCopula, ll: f64| {
        let aic = 2.0 * cop.family.n_params() as f64 - 2.0 * ll;
        let report = FitReport { copula: cop, log_likelihood: ll, aic, sample_tau: tau };
        if best.as_ref().map_or(true, |b| report.aic < b.aic) {
            best = Some(report);
        }
    };

    // Gaussian, from precomputed normal scores
    {
        let norm = std_normal();
        let xs: Vec<f64> = u.iter().map(|&a| norm.inverse_cdf(clamp_u(a))).collect();
        let ys: Vec<f64> = v.iter().map(|&b| norm.inverse_cdf(clamp_u(b))).collect();
        let init = (std::f64::consts::PI * tau / 2.0).sin().clamp(-0.9999, 0.9999);
        let f = |rho: f64| gaussian_score_ll(&xs, &ys, rho);
        let (rho, ll) = refine(&f, init, -0.9999, 0.9999);
        consider(BivariateCopula { family: Family::Gaussian { rho }, rotation: Rotation::R0 }, ll);
    }

    // Student-t over the dof grid, scores precomputed once per dof
    {
        let init = (std::f64::consts::PI * tau / 2.0).sin().clamp(-0.9999, 0.9999);
        for &nu in &STUDENT_NU_GRID {
            let t = student_t(nu);
            let xs: Vec<f64> = u.iter().map(|&a| t.inverse_cdf(clamp_u(a))).collect();
            let ys: Vec<f64> = v.iter().map(|&b| t.inverse_cdf(clamp_u(b))).collect();
            let f = |rho: f64| student_score_ll(&xs, &ys, rho, nu);
            let (rho, ll) = refine(&f, init, -0.9999, 0.9999);
            consider(
                BivariateCopula { family: Family::StudentT { rho, nu }, rotation: Rotation::R0 },
                ll,
            );
        }
    }

    // Frank
    {
        let f = |theta: f64| {
            log_likelihood(
                &BivariateCopula { family: Family::Frank { theta }, rotation: Rotation::R0 },
                u,
                v,
            )
        };
        let init = invert_frank_tau(tau);
        let (theta, ll) = refine(&f, init, -50.0, 50.0);
        consider(BivariateCopula { family: Family::Frank { theta }, rotation: Rotation::R0 }, ll);
    }

    // Clayton / Gumbel with the rotations matching the dependence sign
    let rotations: [Rotation; 2] = if tau >= 0.0 {
        [Rotation::R0, Rotation::R180]
    } else {
        [Rotation::R90, Rotation::R270]
    };
    let at = tau.abs().clamp(1e-4, 0.99);
    for rot in rotations {
        let init = (2.0 * at / (1.0 - at)).clamp(1e-4, 198.0);
        let f = |theta: f64| {
            log_likelihood(&BivariateCopula { family: Family::Clayton { theta }, rotation: rot }, u, v)
        };
        let (theta, ll) = refine(&f, init, 1e-4, 198.0);
        consider(BivariateCopula { family: Family::Clayton { theta }, rotation: rot }, ll);

        let init = (1.0 / (1.0 - at)).clamp(1.0, 200.0);
        let g = |theta: f64| {
            log_likelihood(&BivariateCopula { family: Family::Gumbel { theta }, rotation: rot }, u, v)
        };
        let (theta, ll) = refine(&g, init, 1.0, 200.0);
        consider(BivariateCopula { family: Family::Gumbel { theta }, rotation: rot }, ll);
    }

    // checkerboard fallback
    {
        let cop = fit_checkerboard(u, v);
        let ll = log_likelihood(&cop, u, v);
        consider(cop, ll);
    }

    Ok(best.expect("candidate set is non-empty"))
}

// golden search over the full interval, keeping the tau-inversion initial
// point as a candidate
fn refine(f: &dyn Fn(f64) -> f64, init: f64, lo: f64, hi: f64) -> (f64, f64) {
    let (p, ll) = maximize_scalar(f, lo, hi, 1e-6);
    let init = init.clamp(lo, hi);
    let ll_init = f(init);
    if ll_init > ll {
        (init, ll_init)
    } else {
        (p, ll)
    }
}

fn invert_frank_tau(tau: f64) -> f64 {
    let target = tau.abs().min(0.92);
    let (mut lo, mut hi) = (1e-6, 50.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if frank_tau(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi) * tau.signum()
}

/// Builds the 16x16 rank-histogram copula, Sinkhorn-balanced so both margins
/// are exactly uniform.
pub fn fit_checkerboard(u: &[f64], v: &[f64]) -> BivariateCopula {
    let m = CHECKERBOARD_BINS;
    let mut probs = vec![0.0f64; m * m];
    let n = u.len() as f64;
    for (&a, &b) in u.iter().zip(v) {
        let i = ((a * m as f64) as usize).min(m - 1);
        let j = ((b * m as f64) as usize).min(m - 1);
        probs[i * m + j] += 1.0 / n;
    }
    // small floor keeps the density strictly positive and Sinkhorn stable
    let floor = 1e-6 / (m * m) as f64;
    for p in probs.iter_mut() {
        *p += floor;
    }
    let target = 1.0 / m as f64;
    for _ in 0..200 {
        let mut max_dev = 0.0f64;
        for i in 0..m {
            let row: f64 = (0..m).map(|j| probs[i * m + j]).sum();
            let scale = target / row;
            max_dev = max_dev.max((scale - 1.0).abs());
            for j in 0..m {
                probs[i * m + j] *= scale;
            }
        }
        for j in 0..m {
            let col: f64 = (0..m).map(|i| probs[i * m + j]).sum();
            let scale = target / col;
            max_dev = max_dev.max((scale - 1.0).abs());
            for i in 0..m {
                probs[i * m + j] *= scale;
            }
        }
        if max_dev < 1e-13 {
            break;
        }
    }
    BivariateCopula { family: Family::Checkerboard { probs }, rotation: Rotation::R0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn all_test_copulas() -> Vec<BivariateCopula> {
        let mut out = vec![
            BivariateCopula::independence(),
            BivariateCopula::new(Family::Gaussian { rho: 0.5 }, Rotation::R0).unwrap(),
            BivariateCopula::new(Family::Gaussian { rho: -0.8 }, Rotation::R0).unwrap(),
            BivariateCopula::new(Family::StudentT { rho: 0.6, nu: 4.0 }, Rotation::R0).unwrap(),
            BivariateCopula::new(Family::Frank { theta: 5.0 }, Rotation::R0).unwrap(),
            BivariateCopula::new(Family::Frank { theta: -3.0 }, Rotation::R0).unwrap(),
        ];
        for rot in [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270] {
            out.push(BivariateCopula::new(Family::Clayton { theta: 2.0 }, rot).unwrap());
            out.push(BivariateCopula::new(Family::Gumbel { theta: 1.8 }, rot).unwrap());
        }
        out
    }

    #[test]
    fn independence_h_is_identity() {
        let c = BivariateCopula::independence();
        for i in 1..10 {
            let u = i as f64 / 10.0;
            assert_eq!(c.h1(u, 0.3), u);
            assert_eq!(c.h2(u, 0.7), u);
            assert_eq!(c.density(u, 0.3), 1.0);
        }
    }

    #[test]
    fn gaussian_elliptical_symmetry_at_median() {
        let c = BivariateCopula::new(Family::Gaussian { rho: 0.5 }, Rotation::R0).unwrap();
        assert_relative_eq!(c.h1(0.5, 0.5), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn h_inverse_round_trip_on_grid_for_every_family_and_rotation() {
        for cop in all_test_copulas() {
            for i in 1..=20 {
                for j in 1..=20 {
                    let u = i as f64 / 21.0;
                    let v = j as f64 / 21.0;
                    let r1 = cop.h1_inv(cop.h1(u, v), v);
                    assert!(
                        (r1 - u).abs() <= 1e-8,
                        "h1 round trip {} {:?}: |{r1} - {u}| at v={v}",
                        cop.family.name(),
                        cop.rotation
                    );
                    let r2 = cop.h2_inv(cop.h2(u, v), v);
                    assert!(
                        (r2 - u).abs() <= 1e-8,
                        "h2 round trip {} {:?}: |{r2} - {u}| at v={v}",
                        cop.family.name(),
                        cop.rotation
                    );
                }
            }
        }
    }

    #[test]
    fn h_is_monotone_cdf_in_first_argument() {
        for cop in all_test_copulas() {
            for j in 1..=5 {
                let v = j as f64 / 6.0;
                let mut prev = -1.0;
                for i in 0..=40 {
                    let u = i as f64 / 40.0;
                    let h = cop.h1(u, v);
                    assert!(h >= prev - 1e-12, "{} not monotone", cop.family.name());
                    assert!((0.0..=1.0).contains(&h));
                    prev = h;
                }
                assert!(cop.h1(1e-14, v) < 1e-6);
                assert!(cop.h1(1.0 - 1e-14, v) > 1.0 - 1e-6);
            }
        }
    }

    #[test]
    fn density_is_partial_derivative_of_h1() {
        // dh1(u|v)/du = c(u,v); finite-difference cross-check ties the
        // closed-form densities to the h-functions
        for cop in all_test_copulas() {
            for &u in &[0.2, 0.5, 0.8] {
                for &v in &[0.3, 0.6] {
                    let d = 1e-6;
                    let fd = (cop.h1(u + d, v) - cop.h1(u - d, v)) / (2.0 * d);
                    let c = cop.density(u, v);
                    assert!(
                        (fd - c).abs() <= 1e-4 * c.max(1.0),
                        "{} {:?} at ({u},{v}): fd {fd} vs c {c}",
                        cop.family.name(),
                        cop.rotation
                    );
                }
            }
        }
    }

    #[test]
    fn density_integrates_to_one_on_interior_grid() {
        // Simpson in u of c(u, v) should match h1(1|v) - h1(0|v) = 1
        for cop in all_test_copulas() {
            for &v in &[0.25, 0.5, 0.75] {
                let n = 4000;
                let h = 1.0 / n as f64;
                let mut acc = cop.density(1e-9, v) + cop.density(1.0 - 1e-9, v);
                for i in 1..n {
                    let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                    acc += w * cop.density(i as f64 * h, v);
                }
                let integral = acc * h / 3.0;
                assert!(
                    (integral - 1.0).abs() < 0.02,
                    "{} {:?}: conditional density integrates to {integral}",
                    cop.family.name(),
                    cop.rotation
                );
            }
        }
    }

    #[test]
    fn kendall_tau_exact_small_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(kendall_tau(&x, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 1.0);
        assert_relative_eq!(kendall_tau(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        // one discordant pair out of six
        assert_relative_eq!(
            kendall_tau(&x, &[1.0, 2.0, 4.0, 3.0]).unwrap(),
            4.0 / 6.0,
            max_relative = 1e-12
        );
        // all ties
        assert_eq!(kendall_tau(&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn family_tau_matches_sampled_tau() {
        // sample via conditional inversion and compare Kendall tau
        let mut rng = substream(31, 0);
        for cop in [
            BivariateCopula::new(Family::Clayton { theta: 2.0 }, Rotation::R0).unwrap(),
            BivariateCopula::new(Family::Gumbel { theta: 2.0 }, Rotation::R90).unwrap(),
            BivariateCopula::new(Family::Frank { theta: 4.0 }, Rotation::R0).unwrap(),
            BivariateCopula::new(Family::Gaussian { rho: 0.6 }, Rotation::R0).unwrap(),
        ] {
            let n = 4000;
            let mut us = Vec::with_capacity(n);
            let mut vs = Vec::with_capacity(n);
            for _ in 0..n {
                let v: f64 = rng.gen();
                let p: f64 = rng.gen();
                us.push(cop.h1_inv(p, v));
                vs.push(v);
            }
            let tau = kendall_tau(&us, &vs).unwrap();
            assert!(
                (tau - cop.tau()).abs() < 0.05,
                "{}: sampled tau {tau} vs implied {}",
                cop.family.name(),
                cop.tau()
            );
        }
    }

    #[test]
    fn comonotone_input_fits_near_perfect_dependence() {
        let n = 500;
        let u: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
        let report = fit_bivariate(&u, &u).unwrap();
        assert!(report.copula.tau() >= 0.99, "tau {}", report.copula.tau());
    }

    #[test]
    fn independent_pairs_select_independence_in_most_seeds() {
        let mut independent = 0;
        for seed in 0..100 {
            let mut rng = substream(1000 + seed, 0);
            let n = 2000;
            let u: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let report = fit_bivariate(&u, &v).unwrap();
            if matches!(report.copula.family, Family::Independence) {
                independent += 1;
            }
        }
        assert!(independent >= 90, "independence selected {independent}/100");
    }

    #[test]
    fn gaussian_rho_recovered_within_tolerance() {
        let truth = BivariateCopula::new(Family::Gaussian { rho: 0.7 }, Rotation::R0).unwrap();
        let mut rng = substream(77, 3);
        let n = 5000;
        let mut us = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for _ in 0..n {
            let v: f64 = rng.gen();
            let p: f64 = rng.gen();
            us.push(truth.h1_inv(p, v));
            vs.push(v);
        }
        let report = fit_bivariate(&us, &vs).unwrap();
        match report.copula.family {
            Family::Gaussian { rho } | Family::StudentT { rho, .. } => {
                assert!((rho - 0.7).abs() <= 0.03, "fitted rho {rho}");
            }
            ref other => panic!("expected an elliptical fit, got {}", other.name()),
        }
    }

    #[test]
    fn ties_only_input_is_independence() {
        let u = vec![0.5; 100];
        let report = fit_bivariate(&u, &u).unwrap();
        assert!(matches!(report.copula.family, Family::Independence));
    }

    #[test]
    fn checkerboard_margins_are_uniform() {
        let mut rng = substream(5, 5);
        let n = 3000;
        let u: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let v: Vec<f64> = u.iter().map(|&x| (x + 0.3 * rng.gen::<f64>()) % 1.0).collect();
        let cop = fit_checkerboard(&u, &v);
        if let Family::Checkerboard { probs } = &cop.family {
            let m = CHECKERBOARD_BINS;
            let total: f64 = probs.iter().sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-9);
            for i in 0..m {
                let row: f64 = (0..m).map(|j| probs[i * m + j]).sum();
                assert_relative_eq!(row, 1.0 / m as f64, epsilon = 1e-9);
            }
        } else {
            panic!("expected checkerboard");
        }
        // h round trip
        for i in 1..10 {
            let u0 = i as f64 / 10.0;
            let r = cop.h1_inv(cop.h1(u0, 0.4), 0.4);
            assert!((r - u0).abs() < 1e-8);
        }
    }
}
