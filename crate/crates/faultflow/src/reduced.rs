//! Reduced five-variable stochastic model of the upscaled flow functions.
//!
//! The coarse functions of an ensemble are compressed into five dependent
//! random variables sampled at the reference grid point `s_d^0`:
//!
//! * `Y1 = log K`
//! * `Y2` — residual of `log Pc(s_d^0)` about the log-linear mean trend
//! * `Y3 = log S(s_d^0)`, `Y4 = log Krw(s_d^0)`
//! * `Y5` — affine-normalized slope of the non-wetting relperm line
//!
//! Values at other grid points are recovered through per-point empirical
//! inverse CDFs coupled with rank permutations that carry the non-stationary
//! two-point correlation of the data (sample paths may cross, so the maps
//! are generally not the identity).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ecdf::{ranks, EmpiricalCdf};
use crate::upscaling::{FlowFunctionSample, SdGrid};

#[derive(Debug, thiserror::Error)]
pub enum ReducedModelError {
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("ensemble tabulation does not match the grid")]
    GridMismatch,
    #[error("degenerate ensemble: zero variance in Y{0}")]
    Degenerate(usize),
    #[error("fit persistence I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("fit persistence CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("fit persistence JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("fit schema version {0} unsupported")]
    SchemaVersion(u32),
}

/// Y-matrix extraction output: one 5-vector per ensemble member plus the
/// regression coefficients that define the extraction.
#[derive(Debug, Clone)]
pub struct YExtraction {
    /// `n_ref x 5` matrix of (Y1..Y5).
    pub y: Vec<[f64; 5]>,
    pub a_pc: f64,
    pub b_pc: f64,
    pub a_knw: f64,
    pub b_knw: f64,
    pub sd_cut: f64,
    /// Y columns (0-based) with zero sample variance.
    pub degenerate_columns: Vec<usize>,
}

/// Rank permutations carrying two-point correlation from the reference
/// grid point to every target point.
#[derive(Debug, Clone)]
pub struct RankMaps {
    /// `perm[i][k]` = rank at grid point `i` of the member whose rank at
    /// the reference point is `k`. `perm[0]` is the identity.
    pub sat: Vec<Vec<u32>>,
    pub krw: Vec<Vec<u32>>,
}

/// Fitted reduced model.
#[derive(Debug, Clone)]
pub struct ReducedModelFit {
    pub grid: SdGrid,
    pub a_pc: f64,
    pub b_pc: f64,
    pub a_knw: f64,
    pub b_knw: f64,
    /// Cutoff above which the modeled non-wetting relperm is zero.
    pub sd_cut: f64,
    /// Per-grid-point empirical CDFs of `log S`.
    pub log_sat_tables: Vec<EmpiricalCdf>,
    /// Per-grid-point empirical CDFs of `log Krw`.
    pub log_krw_tables: Vec<EmpiricalCdf>,
    pub rank_maps: RankMaps,
    /// Reference matrix of (Y1..Y5) rows used to fit the model.
    pub y_ref: Vec<[f64; 5]>,
    pub degenerate_columns: Vec<usize>,
}

impl ReducedModelFit {
    pub fn n_ref(&self) -> usize {
        self.y_ref.len()
    }

    pub fn sd0(&self) -> f64 {
        self.grid.sd0()
    }
}

fn check_ensemble(
    ensemble: &[FlowFunctionSample],
    grid: &SdGrid,
) -> Result<(), ReducedModelError> {
    if ensemble.is_empty() {
        return Err(ReducedModelError::EmptyEnsemble);
    }
    if ensemble.iter().any(|s| s.pc.len() != grid.len()) {
        return Err(ReducedModelError::GridMismatch);
    }
    Ok(())
}

fn mean_and_pop_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Ordinary least squares `y = a + b x`.
fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let sxx: f64 = x.iter().map(|a| (a - xm).powi(2)).sum();
    let b = sxy / sxx;
    (ym - b * xm, b)
}

/// Extracts the `n_ref x 5` Y-matrix from an ensemble.
pub fn extract_y(
    ensemble: &[FlowFunctionSample],
    grid: &SdGrid,
) -> Result<YExtraction, ReducedModelError> {
    check_ensemble(ensemble, grid)?;
    let n_ref = ensemble.len();
    let m = grid.len();
    let sd0 = grid.sd0();

    // log-linear trend of the mean log Pc against log s_d
    let log_sd: Vec<f64> = grid.values().iter().map(|s| s.ln()).collect();
    let mean_log_pc: Vec<f64> = (0..m)
        .map(|i| ensemble.iter().map(|s| s.pc[i].ln()).sum::<f64>() / n_ref as f64)
        .collect();
    let (a_pc, b_pc) = ols(&log_sd, &mean_log_pc);

    // non-wetting relperm line: per-member slope of (Krnw - 1)/s_d, fitted
    // over the untruncated region below the cutoff; the cutoff is where the
    // fitted mean line 1 + a s_d crosses zero, solved by fixed point
    let z = |mem: &FlowFunctionSample, i: usize| (mem.krnw[i] - 1.0) / grid.values()[i];
    let mut sd_cut = 1.0f64;
    let mut a_knw = 0.0;
    let mut b_knw = 0.0;
    for _ in 0..20 {
        let zbar: Vec<f64> = ensemble
            .iter()
            .map(|mem| {
                let mut sum = 0.0;
                let mut count = 0usize;
                for i in 0..m {
                    if grid.values()[i] <= sd_cut && mem.krnw[i] > 0.0 {
                        sum += z(mem, i);
                        count += 1;
                    }
                }
                if count == 0 {
                    z(mem, 0)
                } else {
                    sum / count as f64
                }
            })
            .collect();
        (a_knw, b_knw) = mean_and_pop_std(&zbar);
        if b_knw <= 1e-12 * (1.0 + a_knw.abs()) {
            b_knw = 0.0; // degenerate slope column
        }
        let new_cut = if a_knw < 0.0 {
            (-1.0 / a_knw).clamp(sd0, 1.0)
        } else {
            1.0
        };
        if (new_cut - sd_cut).abs() <= 1e-12 {
            break;
        }
        sd_cut = new_cut;
    }

    let mut y = Vec::with_capacity(n_ref);
    for mem in ensemble {
        let y1 = mem.k_abs.ln();
        let y2 = mem.pc[0].ln() - (a_pc + b_pc * sd0.ln());
        let y3 = mem.sat[0].ln();
        let y4 = mem.krw[0].ln();
        let z0 = z(mem, 0);
        let y5 = if b_knw > 0.0 { (z0 - a_knw) / b_knw } else { 0.0 };
        y.push([y1, y2, y3, y4, y5]);
    }

    let mut degenerate_columns = Vec::new();
    for col in 0..5 {
        let column: Vec<f64> = y.iter().map(|row| row[col]).collect();
        let (mean, std) = mean_and_pop_std(&column);
        if std <= 1e-12 * (1.0 + mean.abs()) {
            degenerate_columns.push(col);
        }
    }

    Ok(YExtraction { y, a_pc, b_pc, a_knw, b_knw, sd_cut, degenerate_columns })
}

/// Builds rank permutations from the reference point to every grid point.
///
/// For each target point the members are sorted locally; pairing the sorted
/// orders entry by entry maps reference ranks to target ranks, so the map is
/// the identity exactly when no sample paths cross between the two points.
pub fn fit_rank_maps(
    ensemble: &[FlowFunctionSample],
    grid: &SdGrid,
) -> Result<RankMaps, ReducedModelError> {
    check_ensemble(ensemble, grid)?;
    let build = |get: &dyn Fn(&FlowFunctionSample, usize) -> f64| -> Vec<Vec<u32>> {
        let ref_values: Vec<f64> = ensemble.iter().map(|s| get(s, 0)).collect();
        let ref_ranks = ranks(&ref_values);
        // order0[k] = member whose reference rank is k
        let mut order0 = vec![0usize; ensemble.len()];
        for (member, &r) in ref_ranks.iter().enumerate() {
            order0[r] = member;
        }
        (0..grid.len())
            .map(|i| {
                let values: Vec<f64> = ensemble.iter().map(|s| get(s, i)).collect();
                let target_ranks = ranks(&values);
                order0.iter().map(|&member| target_ranks[member] as u32).collect()
            })
            .collect()
    };
    Ok(RankMaps {
        sat: build(&|s, i| s.sat[i]),
        krw: build(&|s, i| s.krw[i]),
    })
}

/// Fits the full reduced model.
pub fn fit_reduced_model(
    ensemble: &[FlowFunctionSample],
    grid: &SdGrid,
) -> Result<ReducedModelFit, ReducedModelError> {
    let extraction = extract_y(ensemble, grid)?;
    let rank_maps = fit_rank_maps(ensemble, grid)?;
    let log_sat_tables: Vec<EmpiricalCdf> = (0..grid.len())
        .map(|i| EmpiricalCdf::new(ensemble.iter().map(|s| s.sat[i].ln()).collect()))
        .collect();
    let log_krw_tables: Vec<EmpiricalCdf> = (0..grid.len())
        .map(|i| EmpiricalCdf::new(ensemble.iter().map(|s| s.krw[i].ln()).collect()))
        .collect();
    Ok(ReducedModelFit {
        grid: grid.clone(),
        a_pc: extraction.a_pc,
        b_pc: extraction.b_pc,
        a_knw: extraction.a_knw,
        b_knw: extraction.b_knw,
        sd_cut: extraction.sd_cut,
        log_sat_tables,
        log_krw_tables,
        rank_maps,
        y_ref: extraction.y,
        degenerate_columns: extraction.degenerate_columns,
    })
}

/// Applies the rank transform: reference-quantile `u` to target-quantile at
/// grid point `i`, via integer rounding into the permutation table.
fn apply_rank_map(perm: &[u32], n_ref: usize, u: f64) -> f64 {
    let idx = (u * n_ref as f64).round() as i64 - 1;
    let idx = idx.clamp(0, n_ref as i64 - 1) as usize;
    (perm[idx] as f64 + 1.0) / n_ref as f64
}

/// Evaluates the reduced model at a Y-vector, producing a full sample.
pub fn evaluate_flow_functions(y: &[f64; 5], fit: &ReducedModelFit) -> FlowFunctionSample {
    let n_ref = fit.n_ref();
    let m = fit.grid.len();
    let mut pc = Vec::with_capacity(m);
    let mut sat = Vec::with_capacity(m);
    let mut krw = Vec::with_capacity(m);
    let mut krnw = Vec::with_capacity(m);

    let u_sat = fit.log_sat_tables[0].cdf(y[2]);
    let u_krw = fit.log_krw_tables[0].cdf(y[3]);

    for (i, &sd) in fit.grid.values().iter().enumerate() {
        pc.push((fit.a_pc + fit.b_pc * sd.ln() + y[1]).exp());

        let us = apply_rank_map(&fit.rank_maps.sat[i], n_ref, u_sat);
        sat.push(fit.log_sat_tables[i].quantile(us).exp().clamp(0.0, 1.0));

        let uw = apply_rank_map(&fit.rank_maps.krw[i], n_ref, u_krw);
        krw.push(fit.log_krw_tables[i].quantile(uw).exp().clamp(0.0, 1.0));

        let k = if sd > fit.sd_cut {
            0.0
        } else if fit.b_knw > 0.0 {
            let bound = -(1.0 + fit.a_knw * sd) / (fit.b_knw * sd);
            if y[4] <= bound {
                // truncated branch: the line crosses zero exactly here
                0.0
            } else {
                1.0 + (fit.a_knw + fit.b_knw * y[4]) * sd
            }
        } else {
            1.0 + fit.a_knw * sd
        };
        krnw.push(k.clamp(0.0, 1.0));
    }

    FlowFunctionSample { k_abs: y[0].exp(), pc, sat, krw, krnw }
}

const FIT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FitManifest {
    schema_version: u32,
    grid: SdGrid,
    a_pc: f64,
    b_pc: f64,
    a_knw: f64,
    b_knw: f64,
    sd_cut: f64,
    n_ref: usize,
    degenerate_columns: Vec<usize>,
}

fn write_matrix_csv(path: &Path, rows: usize, cols: &[Vec<f64>]) -> Result<(), ReducedModelError> {
    let mut wtr = csv::Writer::from_path(path)?;
    for r in 0..rows {
        let rec: Vec<String> = cols.iter().map(|c| c[r].to_string()).collect();
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>, ReducedModelError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if cols.is_empty() {
            cols = vec![Vec::new(); rec.len()];
        }
        for (c, field) in rec.iter().enumerate() {
            cols[c].push(field.parse().map_err(|_| {
                ReducedModelError::Io(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("bad float {field:?} in {path:?}"),
                ))
            })?);
        }
    }
    Ok(cols)
}

impl ReducedModelFit {
    /// Persists the fit: a JSON manifest plus CSV tables.
    pub fn save_dir(&self, dir: &Path) -> Result<(), ReducedModelError> {
        fs::create_dir_all(dir)?;
        let manifest = FitManifest {
            schema_version: FIT_SCHEMA_VERSION,
            grid: self.grid.clone(),
            a_pc: self.a_pc,
            b_pc: self.b_pc,
            a_knw: self.a_knw,
            b_knw: self.b_knw,
            sd_cut: self.sd_cut,
            n_ref: self.n_ref(),
            degenerate_columns: self.degenerate_columns.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

        let n = self.n_ref();
        let sat_cols: Vec<Vec<f64>> =
            self.log_sat_tables.iter().map(|t| t.values().to_vec()).collect();
        write_matrix_csv(&dir.join("tables_log_sat.csv"), n, &sat_cols)?;
        let krw_cols: Vec<Vec<f64>> =
            self.log_krw_tables.iter().map(|t| t.values().to_vec()).collect();
        write_matrix_csv(&dir.join("tables_log_krw.csv"), n, &krw_cols)?;

        let perm_to_cols =
            |p: &[Vec<u32>]| -> Vec<Vec<f64>> { p.iter().map(|c| c.iter().map(|&v| v as f64).collect()).collect() };
        write_matrix_csv(&dir.join("perm_sat.csv"), n, &perm_to_cols(&self.rank_maps.sat))?;
        write_matrix_csv(&dir.join("perm_krw.csv"), n, &perm_to_cols(&self.rank_maps.krw))?;

        let y_cols: Vec<Vec<f64>> = (0..5)
            .map(|c| self.y_ref.iter().map(|row| row[c]).collect())
            .collect();
        write_matrix_csv(&dir.join("y_ref.csv"), n, &y_cols)?;
        Ok(())
    }

    /// Loads a fit stored by [`Self::save_dir`].
    pub fn load_dir(dir: &Path) -> Result<Self, ReducedModelError> {
        let manifest: FitManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.schema_version != FIT_SCHEMA_VERSION {
            return Err(ReducedModelError::SchemaVersion(manifest.schema_version));
        }
        let sat_cols = read_matrix_csv(&dir.join("tables_log_sat.csv"))?;
        let krw_cols = read_matrix_csv(&dir.join("tables_log_krw.csv"))?;
        let perm_sat = read_matrix_csv(&dir.join("perm_sat.csv"))?;
        let perm_krw = read_matrix_csv(&dir.join("perm_krw.csv"))?;
        let y_cols = read_matrix_csv(&dir.join("y_ref.csv"))?;

        let to_tables = |cols: Vec<Vec<f64>>| -> Vec<EmpiricalCdf> {
            cols.into_iter().map(EmpiricalCdf::new).collect()
        };
        let to_perms = |cols: Vec<Vec<f64>>| -> Vec<Vec<u32>> {
            cols.into_iter()
                .map(|c| c.into_iter().map(|v| v as u32).collect())
                .collect()
        };
        let mut y_ref = vec![[0.0; 5]; manifest.n_ref];
        for (c, col) in y_cols.iter().enumerate().take(5) {
            for (r, &v) in col.iter().enumerate() {
                y_ref[r][c] = v;
            }
        }
        Ok(ReducedModelFit {
            grid: manifest.grid,
            a_pc: manifest.a_pc,
            b_pc: manifest.b_pc,
            a_knw: manifest.a_knw,
            b_knw: manifest.b_knw,
            sd_cut: manifest.sd_cut,
            log_sat_tables: to_tables(sat_cols),
            log_krw_tables: to_tables(krw_cols),
            rank_maps: RankMaps { sat: to_perms(perm_sat), krw: to_perms(perm_krw) },
            y_ref,
            degenerate_columns: manifest.degenerate_columns,
        })
    }
}
