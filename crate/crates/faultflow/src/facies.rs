//! Stochastic geocellular fault facies model and single-phase upscaling.
//!
//! A fault is discretized into a vertical stack of facies. Interior facies
//! boundaries are uniformly jittered around equidistant positions, each
//! facies gets an independent Gaussian shale gouge ratio (SGR) from a
//! depth-dependent profile, SGR maps to permeability, and the stack is
//! upscaled to a single absolute permeability by a height-weighted harmonic
//! mean.

use std::io::Read;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::rng::uniform_open;
use rand::RngCore;

/// Errors from facies model construction and fitting.
#[derive(Debug, thiserror::Error)]
pub enum FaciesError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("permeability must be positive, got {0}")]
    NonPositivePermeability(f64),
    #[error("SGR must lie in [0, 100], got {0}")]
    SgrOutOfRange(f64),
    #[error("lognormal fit needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("lognormal fit requires positive samples, got {0}")]
    NonPositiveSample(f64),
    #[error("profile I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("profile CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// Depth-dependent mean SGR profile, piecewise linear in depth with constant
/// extrapolation beyond the table ends.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SgrProfile {
    /// (depth m, mean SGR percent), depths strictly increasing.
    pub points: Vec<(f64, f64)>,
}

impl SgrProfile {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, FaciesError> {
        if points.is_empty() {
            return Err(FaciesError::InvalidProfile("empty table".into()));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(FaciesError::InvalidProfile(format!(
                    "depths not strictly increasing at {} m",
                    w[1].0
                )));
            }
        }
        for &(d, s) in &points {
            if !(0.0..=100.0).contains(&s) {
                return Err(FaciesError::InvalidProfile(format!(
                    "mean SGR {s} out of [0,100] at {d} m"
                )));
            }
        }
        Ok(SgrProfile { points })
    }

    /// Synthetic default profile: SGR rising from ~25% at 700 m to ~60% at
    /// 1200 m, and 60-70% over the 1500-1600 m segment.
    pub fn default_profile() -> Self {
        SgrProfile::new(vec![
            (700.0, 25.0),
            (850.0, 33.0),
            (1000.0, 42.0),
            (1100.0, 50.0),
            (1200.0, 60.0),
            (1450.0, 60.0),
            (1500.0, 62.0),
            (1550.0, 66.0),
            (1600.0, 70.0),
        ])
        .expect("default profile is valid")
    }

    /// Mean SGR (percent) at `depth_m`.
    pub fn mean_sgr(&self, depth_m: f64) -> f64 {
        let pts = &self.points;
        if depth_m <= pts[0].0 {
            return pts[0].1;
        }
        if depth_m >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        let hi = pts.partition_point(|&(d, _)| d <= depth_m);
        let (d0, s0) = pts[hi - 1];
        let (d1, s1) = pts[hi];
        s0 + (s1 - s0) * (depth_m - d0) / (d1 - d0)
    }

    /// Reads a `depth_m,sgr_mean_pct` CSV.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, FaciesError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 || &headers[0] != "depth_m" || &headers[1] != "sgr_mean_pct" {
            return Err(FaciesError::InvalidProfile(format!(
                "expected header depth_m,sgr_mean_pct, got {headers:?}"
            )));
        }
        let mut points = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let d: f64 = rec[0]
                .trim()
                .parse()
                .map_err(|_| FaciesError::InvalidProfile(format!("bad depth {:?}", &rec[0])))?;
            let s: f64 = rec[1]
                .trim()
                .parse()
                .map_err(|_| FaciesError::InvalidProfile(format!("bad SGR {:?}", &rec[1])))?;
            points.push((d, s));
        }
        SgrProfile::new(points)
    }

    /// Writes the `depth_m,sgr_mean_pct` CSV.
    pub fn to_csv<W: std::io::Write>(&self, writer: W) -> Result<(), FaciesError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["depth_m", "sgr_mean_pct"])?;
        for &(d, s) in &self.points {
            wtr.write_record(&[d.to_string(), s.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Configuration of the geocellular fault facies model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaciesModelConfig {
    /// Number of facies in the stack.
    pub n_facies: usize,
    /// Depth of the fault top, m.
    pub depth_top: f64,
    /// Depth of the fault bottom, m.
    pub depth_bottom: f64,
    /// Depth-dependent mean SGR table.
    pub sgr_profile: SgrProfile,
    /// SGR standard deviation, percentage points.
    pub sgr_std: f64,
    /// Clay-rich shale permeability, mD.
    pub k_clay: f64,
    /// Sandstone permeability, mD.
    pub k_sand: f64,
    /// Sand entry pressure, kPa.
    pub p_entry_sand: f64,
    /// Brooks-Corey capillary exponent (Pc = p_entry * s^-n).
    pub bc_exponent: f64,
}

impl FaciesModelConfig {
    /// Default Vette-segment setup with the given clay permeability (mD).
    pub fn with_k_clay(k_clay: f64) -> Self {
        FaciesModelConfig {
            n_facies: 20,
            depth_top: 700.0,
            depth_bottom: 1200.0,
            sgr_profile: SgrProfile::default_profile(),
            sgr_std: 14.0,
            k_clay,
            k_sand: 1000.0,
            p_entry_sand: 2.5,
            bc_exponent: 0.67,
        }
    }

    /// Troll-segment setup (1500-1600 m) with the given clay permeability.
    pub fn troll_segment(k_clay: f64) -> Self {
        let mut cfg = Self::with_k_clay(k_clay);
        cfg.depth_top = 1500.0;
        cfg.depth_bottom = 1600.0;
        cfg
    }

    pub fn validate(&self) -> Result<(), FaciesError> {
        if self.n_facies < 1 {
            return Err(FaciesError::InvalidConfig("n_facies must be >= 1".into()));
        }
        if self.depth_bottom <= self.depth_top {
            return Err(FaciesError::InvalidConfig(
                "depth_bottom must exceed depth_top".into(),
            ));
        }
        if self.sgr_std < 0.0 {
            return Err(FaciesError::InvalidConfig("sgr_std must be >= 0".into()));
        }
        if self.k_clay <= 0.0 {
            return Err(FaciesError::NonPositivePermeability(self.k_clay));
        }
        if self.k_sand <= 0.0 {
            return Err(FaciesError::NonPositivePermeability(self.k_sand));
        }
        if self.k_clay >= self.k_sand {
            return Err(FaciesError::InvalidConfig(
                "k_clay must be smaller than k_sand".into(),
            ));
        }
        if self.p_entry_sand <= 0.0 || self.bc_exponent <= 0.0 {
            return Err(FaciesError::InvalidConfig(
                "entry pressure and exponent must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Total fault height H, m.
    pub fn height(&self) -> f64 {
        self.depth_bottom - self.depth_top
    }
}

/// One fine-scale fault realization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaciesRealization {
    /// Facies heights, m; sum to the total fault height.
    pub heights: Vec<f64>,
    /// Facies SGR values, percent, clamped to [0, 100].
    pub sgr: Vec<f64>,
    /// Facies permeabilities, mD, from the SGR-permeability relation.
    pub perms: Vec<f64>,
}

/// Permeability (mD) from shale gouge ratio (percent).
///
/// `log k = 0.01 * sgr * log(k_clay / k_sand) + log k_sand`, monotone
/// decreasing in SGR when `k_clay < k_sand`.
pub fn sgr_to_perm(sgr: f64, k_clay: f64, k_sand: f64) -> Result<f64, FaciesError> {
    if k_clay <= 0.0 {
        return Err(FaciesError::NonPositivePermeability(k_clay));
    }
    if k_sand <= 0.0 {
        return Err(FaciesError::NonPositivePermeability(k_sand));
    }
    if !(0.0..=100.0).contains(&sgr) {
        return Err(FaciesError::SgrOutOfRange(sgr));
    }
    Ok((0.01 * sgr * (k_clay / k_sand).ln() + k_sand.ln()).exp())
}

/// Draws one realization.
///
/// Interior boundaries are uniform on +-H/(2 n) around equidistant expected
/// positions and then sorted; each facies SGR is Gaussian around the profile
/// mean at the facies mid-depth, clamped to [0, 100]. Consumes exactly
/// `2 * n_facies - 1` uniform draws.
pub fn sample_realization<R: RngCore>(
    config: &FaciesModelConfig,
    rng: &mut R,
) -> Result<FaciesRealization, FaciesError> {
    config.validate()?;
    let n = config.n_facies;
    let h = config.height();
    let half_width = h / (2.0 * n as f64);

    let mut boundaries = Vec::with_capacity(n + 1);
    boundaries.push(config.depth_top);
    let mut interior: Vec<f64> = (1..n)
        .map(|i| {
            let expected = config.depth_top + i as f64 * h / n as f64;
            expected + (2.0 * uniform_open(rng) - 1.0) * half_width
        })
        .collect();
    interior.sort_by(|a, b| a.partial_cmp(b).unwrap());
    boundaries.extend(interior);
    boundaries.push(config.depth_bottom);

    realization_from_boundaries(config, &boundaries, |mid, norm| {
        let u = uniform_open(rng);
        let z = norm.inverse_cdf(u);
        config.sgr_profile.mean_sgr(mid) + config.sgr_std * z
    })
}

/// Deterministic reference realization: boundaries at their expected
/// positions, SGR at the profile means.
pub fn reference_realization(config: &FaciesModelConfig) -> Result<FaciesRealization, FaciesError> {
    config.validate()?;
    let n = config.n_facies;
    let h = config.height();
    let boundaries: Vec<f64> = (0..=n)
        .map(|i| config.depth_top + i as f64 * h / n as f64)
        .collect();
    realization_from_boundaries(config, &boundaries, |mid, _| config.sgr_profile.mean_sgr(mid))
}

fn realization_from_boundaries(
    config: &FaciesModelConfig,
    boundaries: &[f64],
    mut sgr_at: impl FnMut(f64, &Normal) -> f64,
) -> Result<FaciesRealization, FaciesError> {
    let norm = Normal::new(0.0, 1.0).expect("standard normal");
    let n = config.n_facies;
    let mut heights = Vec::with_capacity(n);
    let mut sgr = Vec::with_capacity(n);
    let mut perms = Vec::with_capacity(n);
    for j in 0..n {
        let (top, bot) = (boundaries[j], boundaries[j + 1]);
        heights.push(bot - top);
        let mid = 0.5 * (top + bot);
        let s = sgr_at(mid, &norm).clamp(0.0, 100.0);
        sgr.push(s);
        perms.push(sgr_to_perm(s, config.k_clay, config.k_sand)?);
    }
    Ok(FaciesRealization { heights, sgr, perms })
}

/// Height-weighted harmonic mean permeability of a realization, mD.
pub fn upscale_permeability(real: &FaciesRealization) -> Result<f64, FaciesError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&h, &k) in real.heights.iter().zip(&real.perms) {
        if k <= 0.0 {
            return Err(FaciesError::NonPositivePermeability(k));
        }
        num += h;
        den += h / k;
    }
    Ok(num / den)
}

/// Height-weighted arithmetic mean permeability, mD. Used for cross-fault
/// flow where the facies act in parallel rather than in series.
pub fn upscale_permeability_arithmetic(real: &FaciesRealization) -> Result<f64, FaciesError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&h, &k) in real.heights.iter().zip(&real.perms) {
        if k <= 0.0 {
            return Err(FaciesError::NonPositivePermeability(k));
        }
        num += h * k;
        den += h;
    }
    Ok(num / den)
}

/// Lognormal distribution fitted by log-space moments.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LogNormalFit {
    /// Mean of log samples.
    pub mu: f64,
    /// Population standard deviation of log samples.
    pub sigma: f64,
}

impl LogNormalFit {
    /// Fits log-space mean and (population) standard deviation.
    pub fn fit(samples: &[f64]) -> Result<Self, FaciesError> {
        if samples.len() < 2 {
            return Err(FaciesError::TooFewSamples(samples.len()));
        }
        let mut logs = Vec::with_capacity(samples.len());
        for &s in samples {
            if s <= 0.0 {
                return Err(FaciesError::NonPositiveSample(s));
            }
            logs.push(s.ln());
        }
        let n = logs.len() as f64;
        let mu = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / n;
        Ok(LogNormalFit { mu, sigma: var.sqrt() })
    }

    /// Lognormal with prescribed mean and standard deviation in linear space.
    pub fn from_mean_std(mean: f64, std: f64) -> Result<Self, FaciesError> {
        if mean <= 0.0 {
            return Err(FaciesError::NonPositiveSample(mean));
        }
        let sigma2 = (1.0 + (std / mean).powi(2)).ln();
        Ok(LogNormalFit {
            mu: mean.ln() - 0.5 * sigma2,
            sigma: sigma2.sqrt(),
        })
    }

    /// Inverse CDF at `u` in (0, 1); supports restricted sub-ranges of `u`.
    pub fn quantile(&self, u: f64) -> f64 {
        if self.sigma == 0.0 {
            return self.mu.exp();
        }
        let norm = Normal::new(0.0, 1.0).expect("standard normal");
        let u = u.clamp(1e-15, 1.0 - 1e-15);
        (self.mu + self.sigma * norm.inverse_cdf(u)).exp()
    }

    /// Distribution mean `exp(mu + sigma^2 / 2)`.
    pub fn mean(&self) -> f64 {
        (self.mu + 0.5 * self.sigma * self.sigma).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, CountingRng};
    use approx::assert_relative_eq;

    fn flat_profile(sgr: f64) -> SgrProfile {
        SgrProfile::new(vec![(0.0, sgr), (2000.0, sgr)]).unwrap()
    }

    #[test]
    fn sgr_endpoints_recover_end_member_permeabilities() {
        assert_relative_eq!(sgr_to_perm(0.0, 1e-4, 1000.0).unwrap(), 1000.0, max_relative = 1e-12);
        assert_relative_eq!(sgr_to_perm(100.0, 1e-4, 1000.0).unwrap(), 1e-4, max_relative = 1e-12);
    }

    #[test]
    fn sgr_midpoint_is_geometric_mean() {
        // hand evaluation: sqrt(1e-4 * 1000) = 10^-0.5
        assert_relative_eq!(
            sgr_to_perm(50.0, 1e-4, 1000.0).unwrap(),
            0.3162277660168378,
            max_relative = 1e-12
        );
    }

    #[test]
    fn sgr_monotone_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let k = sgr_to_perm(i as f64, 1e-3, 1000.0).unwrap();
            assert!(k < prev);
            prev = k;
        }
    }

    #[test]
    fn sgr_rejects_bad_inputs() {
        assert!(sgr_to_perm(50.0, 0.0, 1000.0).is_err());
        assert!(sgr_to_perm(50.0, 1.0, -3.0).is_err());
        assert!(sgr_to_perm(101.0, 1.0, 1000.0).is_err());
    }

    #[test]
    fn degenerate_profiles_hit_end_members() {
        let mut cfg = FaciesModelConfig::with_k_clay(1e-4);
        cfg.sgr_std = 0.0;
        cfg.sgr_profile = flat_profile(100.0);
        let mut rng = substream(1, 0);
        let real = sample_realization(&cfg, &mut rng).unwrap();
        for &k in &real.perms {
            assert_relative_eq!(k, 1e-4, max_relative = 1e-12);
        }
        cfg.sgr_profile = flat_profile(0.0);
        let real = sample_realization(&cfg, &mut rng).unwrap();
        for &k in &real.perms {
            assert_relative_eq!(k, 1000.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn heights_partition_the_fault() {
        let cfg = FaciesModelConfig::with_k_clay(1e-3);
        let mut rng = substream(99, 0);
        for _ in 0..50 {
            let real = sample_realization(&cfg, &mut rng).unwrap();
            assert_eq!(real.heights.len(), 20);
            assert_eq!(real.sgr.len(), 20);
            assert_eq!(real.perms.len(), 20);
            let total: f64 = real.heights.iter().sum();
            assert_relative_eq!(total, 500.0, max_relative = 1e-9);
            assert!(real.heights.iter().all(|&h| h > 0.0));
        }
    }

    #[test]
    fn consumes_exactly_2n_minus_1_draws() {
        let cfg = FaciesModelConfig::with_k_clay(1e-3);
        let mut rng = CountingRng::new(substream(5, 0));
        sample_realization(&cfg, &mut rng).unwrap();
        // each f64 uniform consumes one u64 word
        assert_eq!(rng.draws(), 2 * 20 - 1);
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let cfg = FaciesModelConfig::with_k_clay(1e-4);
        let a = sample_realization(&cfg, &mut substream(123, 7)).unwrap();
        let b = sample_realization(&cfg, &mut substream(123, 7)).unwrap();
        assert_eq!(a.heights, b.heights);
        assert_eq!(a.sgr, b.sgr);
        assert_eq!(a.perms, b.perms);
    }

    #[test]
    fn harmonic_mean_identities() {
        let real = FaciesRealization {
            heights: vec![1.0, 1.0],
            sgr: vec![0.0, 0.0],
            perms: vec![1.0, 100.0],
        };
        assert_relative_eq!(
            upscale_permeability(&real).unwrap(),
            1.9801980198019802,
            max_relative = 1e-12
        );
        let equal = FaciesRealization {
            heights: vec![1.0, 3.0],
            sgr: vec![0.0, 0.0],
            perms: vec![10.0, 10.0],
        };
        assert_relative_eq!(upscale_permeability(&equal).unwrap(), 10.0, max_relative = 1e-12);
    }

    #[test]
    fn harmonic_mean_bounded_by_extremes_and_arithmetic_mean() {
        let cfg = FaciesModelConfig::with_k_clay(1e-4);
        let mut rng = substream(11, 0);
        for _ in 0..200 {
            let real = sample_realization(&cfg, &mut rng).unwrap();
            let k = upscale_permeability(&real).unwrap();
            let kmin = real.perms.iter().cloned().fold(f64::INFINITY, f64::min);
            let kmax = real.perms.iter().cloned().fold(0.0, f64::max);
            let arith = upscale_permeability_arithmetic(&real).unwrap();
            assert!(k >= kmin * (1.0 - 1e-12) && k <= kmax * (1.0 + 1e-12));
            assert!(k <= arith * (1.0 + 1e-12));
        }
    }

    #[test]
    fn reference_realization_is_deterministic_function_of_profile() {
        let cfg = FaciesModelConfig::with_k_clay(1e-3);
        let a = reference_realization(&cfg).unwrap();
        let b = reference_realization(&cfg).unwrap();
        assert_eq!(a.perms, b.perms);
        let k = upscale_permeability(&a).unwrap();
        assert!(k > cfg.k_clay && k < cfg.k_sand);
    }

    #[test]
    fn lognormal_fit_matches_log_space_moments() {
        let e = std::f64::consts::E;
        let fit = LogNormalFit::fit(&[e, e * e * e]).unwrap();
        assert_relative_eq!(fit.mu, 2.0, max_relative = 1e-12);
        assert_relative_eq!(fit.sigma, 1.0, max_relative = 1e-12);
        assert_relative_eq!(fit.quantile(0.5), (2.0f64).exp(), max_relative = 1e-9);

        let constant = LogNormalFit::fit(&[3.5, 3.5, 3.5]).unwrap();
        assert_relative_eq!(constant.mu, 3.5f64.ln(), max_relative = 1e-12);
        assert_eq!(constant.sigma, 0.0);
        assert_relative_eq!(constant.quantile(0.9), 3.5, max_relative = 1e-12);

        assert!(LogNormalFit::fit(&[1.0]).is_err());
        assert!(LogNormalFit::fit(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn lognormal_from_mean_std_round_trips_moments() {
        let f = LogNormalFit::from_mean_std(1000.0, 100.0).unwrap();
        assert_relative_eq!(f.mean(), 1000.0, max_relative = 1e-12);
        let sigma2 = f.sigma * f.sigma;
        let var = (sigma2.exp() - 1.0) * (2.0 * f.mu + sigma2).exp();
        assert_relative_eq!(var.sqrt(), 100.0, max_relative = 1e-10);
    }

    #[test]
    fn profile_interpolation_and_extrapolation() {
        let p = SgrProfile::default_profile();
        assert_relative_eq!(p.mean_sgr(700.0), 25.0);
        assert_relative_eq!(p.mean_sgr(500.0), 25.0); // constant extrapolation
        assert_relative_eq!(p.mean_sgr(1700.0), 70.0);
        let mid = p.mean_sgr(775.0);
        assert!(mid > 25.0 && mid < 33.0);
    }

    #[test]
    fn profile_csv_round_trip() {
        let p = SgrProfile::default_profile();
        let mut buf = Vec::new();
        p.to_csv(&mut buf).unwrap();
        let q = SgrProfile::from_csv(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert!(SgrProfile::from_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn upscaled_ensemble_stays_in_bounds_with_unimodal_log_histogram() {
        let cfg = FaciesModelConfig::with_k_clay(1e-4);
        let mut rng = substream(2024, 0);
        let mut logs = Vec::with_capacity(10_000);
        for _ in 0..10_000 {
            let real = sample_realization(&cfg, &mut rng).unwrap();
            let k = upscale_permeability(&real).unwrap();
            assert!((1e-4..=1000.0).contains(&k));
            logs.push(k.log10());
        }
        // qualitative unimodality: coarse histogram rises then falls
        let (lo, hi) = (-4.0, 3.0);
        let bins = 14;
        let mut hist = vec![0usize; bins];
        for &l in &logs {
            let b = (((l - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
            hist[b] += 1;
        }
        let peak = hist.iter().enumerate().max_by_key(|(_, &c)| c).unwrap().0;
        let threshold = logs.len() / 100; // ignore sub-1% wiggle
        for w in hist[..=peak].windows(2) {
            assert!(w[1] + threshold >= w[0]);
        }
        for w in hist[peak..].windows(2) {
            assert!(w[0] + threshold >= w[1]);
        }
    }
}
