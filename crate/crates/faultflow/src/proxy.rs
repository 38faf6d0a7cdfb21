//! Few-cell two-phase leakage proxy.
//!
//! A vertical storage column of six layer cells is connected through a fault
//! to a two-cell top aquifer (fault core cell + aquifer cell) and through the
//! deeper fault segment to a one-cell aquifer standing in for a neighboring
//! field. CO2 is injected at constant mass rate; brine and CO2 follow an
//! immiscible, slightly-compressible two-point-flux formulation with upwind
//! mobilities and backward Euler in time, solved by damped Newton with a
//! colored finite-difference Jacobian. The fault cell uses the upscaled
//! coarse flow functions; all other cells use Brooks-Corey curves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::upscaling::FlowFunctionSample;

pub const MD_TO_M2: f64 = 9.869233e-16;
pub const BAR: f64 = 1e5;
pub const KPA: f64 = 1e3;
pub const DAY_SECONDS: f64 = 86_400.0;
pub const YEAR_SECONDS: f64 = 365.25 * DAY_SECONDS;
pub const GRAVITY: f64 = 9.81;
const TONNE: f64 = 1000.0;

#[derive(Debug, thiserror::Error)]
pub enum ProxyError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid flow-function table: {0}")]
    InvalidFlowTable(String),
    #[error(
        "Newton failed to converge at t = {time_days:.2} d after halving dt to {dt_days:.4} d; \
         residual inf-norm {residual:.3e} kg/s"
    )]
    NewtonFailure { time_days: f64, dt_days: f64, residual: f64 },
    #[error("result I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("result CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("result JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Fluid properties at reference pressure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluidProperties {
    pub brine_density_kg_m3: f64,
    pub co2_density_kg_m3: f64,
    pub brine_viscosity_pa_s: f64,
    pub co2_viscosity_pa_s: f64,
    pub brine_compressibility_per_pa: f64,
    pub co2_compressibility_per_pa: f64,
    pub reference_pressure_bar: f64,
}

impl Default for FluidProperties {
    fn default() -> Self {
        FluidProperties {
            brine_density_kg_m3: 1000.0,
            co2_density_kg_m3: 700.0,
            brine_viscosity_pa_s: 8.0e-4,
            co2_viscosity_pa_s: 6.0e-5,
            brine_compressibility_per_pa: 4.5e-10,
            co2_compressibility_per_pa: 1.0e-8,
            reference_pressure_bar: 100.0,
        }
    }
}

/// Proxy model configuration (field units).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyConfig {
    /// Horizontal layer permeabilities top to bottom, mD; vertical is 1/10.
    pub layer_perms_md: [f64; 6],
    pub layer_thickness_m: [f64; 6],
    /// Square cell footprint edge, m.
    pub cell_size_m: f64,
    pub porosity: f64,
    /// Pore-volume multipliers per layer. The two bottom cells default to a
    /// large multiplier so the column can absorb the injected volume the way
    /// the full-field model would.
    pub pore_volume_mult: [f64; 6],
    pub reservoir_top_depth_m: f64,
    /// Fault window area available for flow, m^2.
    pub fault_area_m2: f64,
    /// Half distance between reservoir and aquifer, m.
    pub fault_half_length_m: f64,
    /// Across-fault thickness of the fault core cell, m.
    pub fault_core_thickness_m: f64,
    pub fault_cell_depth_m: f64,
    pub top_aquifer_depth_m: f64,
    pub troll_depth_m: f64,
    pub troll_pressure_bar: f64,
    /// Multiplies the aquifer bulk volume A_f * L_f into a pore volume large
    /// enough to suppress pressure build-up.
    pub aquifer_porosity_factor: f64,
    pub injection_rate_mt_per_yr: f64,
    /// Layer index receiving the injection.
    pub injection_layer: usize,
    pub duration_years: f64,
    pub timestep_days: f64,
    pub fluid: FluidProperties,
    /// Brooks-Corey exponent of the reservoir saturation functions.
    pub bc_exponent: f64,
    pub p_entry_sand_kpa: f64,
    /// Permeability anchoring the entry-pressure scaling, mD.
    pub k_sand_md: f64,
    pub newton_max_iter: usize,
    pub max_dt_halvings: u32,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            layer_perms_md: [1000.0, 50.0, 1000.0, 50.0, 850.0, 25.0],
            layer_thickness_m: [20.0, 10.0, 20.0, 10.0, 20.0, 20.0],
            cell_size_m: 400.0,
            porosity: 0.25,
            pore_volume_mult: [1.0, 1.0, 1.0, 1.0, 5.0e4, 5.0e4],
            reservoir_top_depth_m: 700.0,
            fault_area_m2: 40.0,
            fault_half_length_m: 250.0,
            fault_core_thickness_m: 1.0,
            fault_cell_depth_m: 690.0,
            top_aquifer_depth_m: 670.0,
            troll_depth_m: 1100.0,
            troll_pressure_bar: 110.0,
            aquifer_porosity_factor: 1.0e6,
            injection_rate_mt_per_yr: 1.6,
            injection_layer: 0,
            duration_years: 59.0,
            timestep_days: 30.4375,
            fluid: FluidProperties::default(),
            bc_exponent: 0.67,
            p_entry_sand_kpa: 2.5,
            k_sand_md: 1000.0,
            newton_max_iter: 25,
            max_dt_halvings: 12,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<(), ProxyError> {
        let positives = [
            ("cell_size_m", self.cell_size_m),
            ("porosity", self.porosity),
            ("fault_area_m2", self.fault_area_m2),
            ("fault_half_length_m", self.fault_half_length_m),
            ("fault_core_thickness_m", self.fault_core_thickness_m),
            ("duration_years", self.duration_years),
            ("timestep_days", self.timestep_days),
            ("aquifer_porosity_factor", self.aquifer_porosity_factor),
        ];
        for (name, v) in positives {
            if !(v > 0.0) {
                return Err(ProxyError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.layer_perms_md.iter().any(|&k| !(k > 0.0)) {
            return Err(ProxyError::InvalidConfig("layer permeabilities must be positive".into()));
        }
        if self.layer_thickness_m.iter().any(|&t| !(t > 0.0)) {
            return Err(ProxyError::InvalidConfig("layer thicknesses must be positive".into()));
        }
        if self.injection_layer >= 6 {
            return Err(ProxyError::InvalidConfig("injection_layer must be 0..=5".into()));
        }
        if self.injection_rate_mt_per_yr < 0.0 {
            return Err(ProxyError::InvalidConfig("injection rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Harmonic-mean two-point transmissibility, mD * m.
///
/// `T_side = k A / d`; zero permeability means a blocking cell and yields
/// zero transmissibility rather than an error.
pub fn transmissibility(k_a_md: f64, k_b_md: f64, area_m2: f64, d_a_m: f64, d_b_m: f64) -> f64 {
    let t_a = k_a_md * area_m2 / d_a_m;
    let t_b = k_b_md * area_m2 / d_b_m;
    if t_a + t_b == 0.0 {
        return 0.0;
    }
    t_a * t_b / (t_a + t_b)
}

/// Reservoir-to-aquifer connection transmissibility, mD * m.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AquiferTrans {
    pub value: f64,
    /// Set when the fault-side half transmissibility is no longer small
    /// against the reservoir side, where the fault-only formula degrades.
    pub assumption_violated: bool,
}

/// Combines a reservoir half-transmissibility with the fault-based aquifer
/// half `2 k_f A_f / L_f` by harmonic mean.
pub fn aquifer_transmissibility(t_r: f64, k_f_md: f64, a_f_m2: f64, l_f_m: f64) -> AquiferTrans {
    let t_aq = 2.0 * k_f_md * a_f_m2 / l_f_m;
    let value = if t_r + t_aq == 0.0 { 0.0 } else { t_r * t_aq / (t_r + t_aq) };
    AquiferTrans { value, assumption_violated: t_aq > 0.01 * t_r }
}

const N_CELLS: usize = 9;
const FAULT_CELL: usize = 6;
const TOP_AQUIFER_CELL: usize = 7;
const TROLL_CELL: usize = 8;

/// Monotone piecewise-linear saturation table of the fault cell.
#[derive(Debug, Clone)]
struct SatTable {
    sw: Vec<f64>,
    pc_pa: Vec<f64>,
    krw: Vec<f64>,
    krnw: Vec<f64>,
}

impl SatTable {
    /// Re-parameterizes a coarse sample by saturation; ties in S collapse to
    /// one knot with capillary pressure averaged.
    fn from_sample(sample: &FlowFunctionSample) -> Result<SatTable, ProxyError> {
        let n = sample.sat.len();
        if n == 0 {
            return Err(ProxyError::InvalidFlowTable("empty table".into()));
        }
        let mut sw = Vec::with_capacity(n);
        let mut pc = Vec::with_capacity(n);
        let mut krw = Vec::with_capacity(n);
        let mut krnw = Vec::with_capacity(n);
        let mut i = 0;
        while i < n {
            let mut j = i;
            let mut pc_acc = 0.0;
            while j < n && sample.sat[j] == sample.sat[i] {
                pc_acc += sample.pc[j];
                j += 1;
            }
            sw.push(sample.sat[i]);
            pc.push(pc_acc / (j - i) as f64 * KPA);
            // monotone tables: the last entry of a tied run is the extreme
            krw.push(sample.krw[j - 1]);
            krnw.push(sample.krnw[j - 1]);
            i = j;
        }
        if sw.len() < 2 {
            return Err(ProxyError::InvalidFlowTable("table needs at least 2 distinct knots".into()));
        }
        Ok(SatTable { sw, pc_pa: pc, krw, krnw })
    }

    fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
        if x <= xs[0] {
            return ys[0];
        }
        if x >= xs[xs.len() - 1] {
            return ys[ys.len() - 1];
        }
        let hi = xs.partition_point(|&v| v <= x);
        let (x0, x1) = (xs[hi - 1], xs[hi]);
        let (y0, y1) = (ys[hi - 1], ys[hi]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    fn pc(&self, sw: f64) -> f64 {
        Self::interp(&self.sw, &self.pc_pa, sw)
    }

    fn relperm(&self, sw: f64) -> (f64, f64) {
        (Self::interp(&self.sw, &self.krw, sw), Self::interp(&self.sw, &self.krnw, sw))
    }
}

/// Brooks-Corey saturation functions of a reservoir cell.
#[derive(Debug, Clone, Copy)]
struct BrooksCorey {
    entry_pa: f64,
    exponent: f64,
}

impl BrooksCorey {
    fn pc(&self, sw: f64) -> f64 {
        // bound the curve near sw = 0 to keep the solver finite
        self.entry_pa * sw.max(1e-3).powf(-self.exponent)
    }

    fn relperm(&self, sw: f64) -> (f64, f64) {
        crate::upscaling::fine_scale_relperm(sw, self.exponent)
    }
}

#[derive(Debug, Clone)]
enum SatFunctions {
    Table(SatTable),
    Corey(BrooksCorey),
}

impl SatFunctions {
    fn pc(&self, sw: f64) -> f64 {
        match self {
            SatFunctions::Table(t) => t.pc(sw),
            SatFunctions::Corey(c) => c.pc(sw),
        }
    }

    fn relperm(&self, sw: f64) -> (f64, f64) {
        match self {
            SatFunctions::Table(t) => t.relperm(sw),
            SatFunctions::Corey(c) => c.relperm(sw),
        }
    }
}

/// Assembled static model: cells, connections, saturation functions.
#[derive(Debug, Clone)]
pub struct ProxyModel {
    cfg: ProxyConfig,
    /// Pore volumes, m^3.
    pub pore_volume: [f64; N_CELLS],
    /// Cell center depths, m.
    pub depth: [f64; N_CELLS],
    /// (cell_i, cell_j, transmissibility m^3).
    pub connections: Vec<(usize, usize, f64)>,
    sat_fn: Vec<SatFunctions>,
    /// Per-connection flag from the aquifer-transmissibility validity check.
    pub aquifer_assumption_violated: [bool; 2],
    injection_rate_kg_s: f64,
}

impl ProxyModel {
    pub fn new(
        cfg: &ProxyConfig,
        fault_flow: &FlowFunctionSample,
        k_troll_md: f64,
    ) -> Result<Self, ProxyError> {
        cfg.validate()?;
        if !(k_troll_md >= 0.0) {
            return Err(ProxyError::InvalidConfig(format!("k_troll {k_troll_md} must be >= 0")));
        }
        let area = cfg.cell_size_m * cfg.cell_size_m;

        let mut pore_volume = [0.0; N_CELLS];
        let mut depth = [0.0; N_CELLS];
        let mut cum = 0.0;
        for i in 0..6 {
            let t = cfg.layer_thickness_m[i];
            depth[i] = cfg.reservoir_top_depth_m + cum + 0.5 * t;
            pore_volume[i] = area * t * cfg.porosity * cfg.pore_volume_mult[i];
            cum += t;
        }
        depth[FAULT_CELL] = cfg.fault_cell_depth_m;
        pore_volume[FAULT_CELL] = cfg.fault_area_m2 * cfg.fault_core_thickness_m * cfg.porosity;
        depth[TOP_AQUIFER_CELL] = cfg.top_aquifer_depth_m;
        pore_volume[TOP_AQUIFER_CELL] =
            cfg.fault_area_m2 * cfg.fault_half_length_m * cfg.aquifer_porosity_factor;
        depth[TROLL_CELL] = cfg.troll_depth_m;
        pore_volume[TROLL_CELL] =
            cfg.fault_area_m2 * cfg.fault_half_length_m * cfg.aquifer_porosity_factor;

        let kv = |i: usize| cfg.layer_perms_md[i] / 10.0;
        let mut connections = Vec::with_capacity(8);
        // vertical stack; interface area limited by the smaller multiplier
        for i in 0..5 {
            let a = area * cfg.pore_volume_mult[i].min(cfg.pore_volume_mult[i + 1]);
            let t = transmissibility(
                kv(i),
                kv(i + 1),
                a,
                0.5 * cfg.layer_thickness_m[i],
                0.5 * cfg.layer_thickness_m[i + 1],
            );
            connections.push((i, i + 1, t * MD_TO_M2));
        }
        // along-fault path: top layer -> fault core -> top aquifer
        let k_fault = fault_flow.k_abs;
        let t_r_top = kv(0) * cfg.fault_area_m2 / (0.5 * cfg.layer_thickness_m[0]);
        let top = aquifer_transmissibility(
            t_r_top,
            k_fault,
            cfg.fault_area_m2,
            cfg.fault_half_length_m,
        );
        connections.push((0, FAULT_CELL, top.value * MD_TO_M2));
        let t_fault_half = 2.0 * k_fault * cfg.fault_area_m2 / cfg.fault_half_length_m;
        connections.push((FAULT_CELL, TOP_AQUIFER_CELL, t_fault_half * MD_TO_M2));
        // cross-fault path to the neighboring field, water zone
        let t_r_bot = cfg.layer_perms_md[5] * cfg.fault_area_m2 / (0.5 * cfg.cell_size_m);
        let troll = aquifer_transmissibility(
            t_r_bot,
            k_troll_md,
            cfg.fault_area_m2,
            cfg.fault_half_length_m,
        );
        connections.push((5, TROLL_CELL, troll.value * MD_TO_M2));

        let sand_entry = |k_md: f64| {
            cfg.p_entry_sand_kpa * KPA * (cfg.k_sand_md / k_md).sqrt()
        };
        let mut sat_fn: Vec<SatFunctions> = (0..6)
            .map(|i| {
                SatFunctions::Corey(BrooksCorey {
                    entry_pa: sand_entry(cfg.layer_perms_md[i]),
                    exponent: cfg.bc_exponent,
                })
            })
            .collect();
        sat_fn.push(SatFunctions::Table(SatTable::from_sample(fault_flow)?));
        // aquifer cells: clean sand curves
        sat_fn.push(SatFunctions::Corey(BrooksCorey {
            entry_pa: sand_entry(cfg.k_sand_md),
            exponent: cfg.bc_exponent,
        }));
        sat_fn.push(SatFunctions::Corey(BrooksCorey {
            entry_pa: sand_entry(cfg.k_sand_md),
            exponent: cfg.bc_exponent,
        }));

        Ok(ProxyModel {
            cfg: cfg.clone(),
            pore_volume,
            depth,
            connections,
            sat_fn,
            aquifer_assumption_violated: [top.assumption_violated, troll.assumption_violated],
            injection_rate_kg_s: cfg.injection_rate_mt_per_yr * 1.0e9 / YEAR_SECONDS,
        })
    }

    fn rho_w(&self, p: f64) -> f64 {
        let f = &self.cfg.fluid;
        f.brine_density_kg_m3
            * (f.brine_compressibility_per_pa * (p - f.reference_pressure_bar * BAR)).exp()
    }

    fn rho_g(&self, p: f64) -> f64 {
        let f = &self.cfg.fluid;
        f.co2_density_kg_m3
            * (f.co2_compressibility_per_pa * (p - f.reference_pressure_bar * BAR)).exp()
    }

    /// Discrete hydrostatic initial state: brine-full, anchored at the
    /// deep-aquifer datum and propagated edge by edge so every connection
    /// starts at exactly zero flux.
    fn initial_state(&self) -> State {
        let mut p = [0.0; N_CELLS];
        p[TROLL_CELL] = self.cfg.troll_pressure_bar * BAR;
        // spanning-tree walk: troll -> bottom layer -> ... -> top -> fault
        // -> top aquifer
        let order: [(usize, usize); 8] = [
            (TROLL_CELL, 5),
            (5, 4),
            (4, 3),
            (3, 2),
            (2, 1),
            (1, 0),
            (0, FAULT_CELL),
            (FAULT_CELL, TOP_AQUIFER_CELL),
        ];
        for (from, to) in order {
            let dz = self.depth[to] - self.depth[from];
            let mut p_to = p[from] + self.rho_w(p[from]) * GRAVITY * dz;
            for _ in 0..5 {
                let rho_avg = 0.5 * (self.rho_w(p[from]) + self.rho_w(p_to));
                p_to = p[from] + rho_avg * GRAVITY * dz;
            }
            p[to] = p_to;
        }
        State { p, sg: [0.0; N_CELLS] }
    }

    /// Residual of the backward-Euler step, kg/s per cell and phase.
    /// Layout: rows 2c = brine, 2c + 1 = gas.
    fn residual(&self, state: &State, old_mass: &[[f64; 2]; N_CELLS], dt: f64, out: &mut [f64]) {
        for c in 0..N_CELLS {
            let (mw, mg) = self.cell_mass(state, c);
            out[2 * c] = (mw - old_mass[c][0]) / dt;
            out[2 * c + 1] = (mg - old_mass[c][1]) / dt;
        }
        out[2 * self.cfg.injection_layer + 1] -= self.injection_rate_kg_s;

        for &(i, j, t) in &self.connections {
            if t == 0.0 {
                continue;
            }
            let (fw, fg) = self.face_fluxes(state, i, j, t);
            out[2 * i] += fw;
            out[2 * j] -= fw;
            out[2 * i + 1] += fg;
            out[2 * j + 1] -= fg;
        }
    }

    fn cell_mass(&self, state: &State, c: usize) -> (f64, f64) {
        let pv = self.pore_volume[c];
        let sw = 1.0 - state.sg[c];
        let p_w = state.p[c];
        let p_g = p_w + self.sat_fn[c].pc(sw);
        (pv * self.rho_w(p_w) * sw, pv * self.rho_g(p_g) * state.sg[c])
    }

    /// Signed mass fluxes (brine, gas) from cell i to cell j, kg/s.
    fn face_fluxes(&self, state: &State, i: usize, j: usize, t: f64) -> (f64, f64) {
        let f = &self.cfg.fluid;
        let dz = self.depth[i] - self.depth[j];

        let p_w_i = state.p[i];
        let p_w_j = state.p[j];
        let rho_w_avg = 0.5 * (self.rho_w(p_w_i) + self.rho_w(p_w_j));
        let dphi_w = (p_w_i - p_w_j) - rho_w_avg * GRAVITY * dz;
        let up_w = if dphi_w >= 0.0 { i } else { j };
        let krw = self.sat_fn[up_w].relperm(1.0 - state.sg[up_w]).0;
        let flux_w = self.rho_w(state.p[up_w]) * t * krw / f.brine_viscosity_pa_s * dphi_w;

        let p_g_i = p_w_i + self.sat_fn[i].pc(1.0 - state.sg[i]);
        let p_g_j = p_w_j + self.sat_fn[j].pc(1.0 - state.sg[j]);
        let rho_g_avg = 0.5 * (self.rho_g(p_g_i) + self.rho_g(p_g_j));
        let dphi_g = (p_g_i - p_g_j) - rho_g_avg * GRAVITY * dz;
        let up_g = if dphi_g >= 0.0 { i } else { j };
        let krg = self.sat_fn[up_g].relperm(1.0 - state.sg[up_g]).1;
        let p_g_up = if up_g == i { p_g_i } else { p_g_j };
        let flux_g = self.rho_g(p_g_up) * t * krg / f.co2_viscosity_pa_s * dphi_g;

        (flux_w, flux_g)
    }

    /// Gas mass flux i -> j on a specific connection, kg/s.
    fn gas_flux_on(&self, state: &State, i: usize, j: usize) -> f64 {
        let t = self
            .connections
            .iter()
            .find(|&&(a, b, _)| (a, b) == (i, j))
            .map(|&(_, _, t)| t)
            .unwrap_or(0.0);
        if t == 0.0 {
            return 0.0;
        }
        self.face_fluxes(state, i, j, t).1
    }

    /// Distance-2 graph coloring of the cells so perturbed columns never
    /// overlap in any residual row.
    fn fd_colors(&self) -> Vec<usize> {
        let mut adjacent = vec![vec![false; N_CELLS]; N_CELLS];
        for &(i, j, _) in &self.connections {
            adjacent[i][j] = true;
            adjacent[j][i] = true;
        }
        let conflict = |a: usize, b: usize| {
            if adjacent[a][b] {
                return true;
            }
            (0..N_CELLS).any(|k| adjacent[a][k] && adjacent[k][b])
        };
        let mut colors = vec![usize::MAX; N_CELLS];
        for c in 0..N_CELLS {
            let mut used = [false; N_CELLS];
            for other in 0..c {
                if conflict(c, other) {
                    used[colors[other]] = true;
                }
            }
            colors[c] = (0..N_CELLS).find(|&k| !used[k]).unwrap();
        }
        colors
    }

    /// Runs the simulation and reports cumulative leakage.
    pub fn simulate(&self) -> Result<SimResult, ProxyError> {
        let n_unknowns = 2 * N_CELLS;
        let dt_target = self.cfg.timestep_days * DAY_SECONDS;
        let t_end = self.cfg.duration_years * YEAR_SECONDS;
        let n_report = (t_end / dt_target).ceil() as usize;

        let colors = self.fd_colors();
        let n_colors = colors.iter().max().unwrap() + 1;

        let mut state = self.initial_state();
        let mut leaked_top = 0.0f64; // cumulative net gas into the fault system
        let mut leaked_troll = 0.0f64;

        let mut result = SimResult {
            times_days: Vec::with_capacity(n_report),
            leaked_top_t: Vec::with_capacity(n_report),
            leaked_troll_t: Vec::with_capacity(n_report),
            stored_t: Vec::with_capacity(n_report),
            injected_t: Vec::with_capacity(n_report),
            pressure_bar: Vec::with_capacity(n_report),
            mass_balance_rel_error: Vec::with_capacity(n_report),
            aquifer_assumption_violated: self.aquifer_assumption_violated,
        };

        let tol_rows: Vec<f64> = (0..n_unknowns)
            .map(|r| {
                let pv = self.pore_volume[r / 2];
                let noise = pv * 1000.0 / dt_target * 1e-12;
                (1e-10 * self.injection_rate_kg_s.max(1.0)).max(noise)
            })
            .collect();

        let mut residual = vec![0.0; n_unknowns];
        let mut perturbed = vec![0.0; n_unknowns];
        let mut time = 0.0f64;
        for step in 0..n_report {
            let report_time = ((step + 1) as f64 * dt_target).min(t_end);
            let mut dt = report_time - time;
            let mut halvings = 0u32;
            while time < report_time - 1e-6 {
                dt = dt.min(report_time - time);
                let old_mass: [[f64; 2]; N_CELLS] =
                    std::array::from_fn(|c| {
                        let (w, g) = self.cell_mass(&state, c);
                        [w, g]
                    });
                match self.newton_step(&mut state, &old_mass, dt, &colors, n_colors, &tol_rows,
                                       &mut residual, &mut perturbed) {
                    Ok(substate) => {
                        // accumulate boundary fluxes with the converged state
                        leaked_top += self.gas_flux_on(&substate, 0, FAULT_CELL) * dt;
                        leaked_troll += self.gas_flux_on(&substate, 5, TROLL_CELL) * dt;
                        state = substate;
                        time += dt;
                        dt = (dt * 2.0).min(dt_target);
                    }
                    Err(res_norm) => {
                        halvings += 1;
                        if halvings > self.cfg.max_dt_halvings {
                            return Err(ProxyError::NewtonFailure {
                                time_days: time / DAY_SECONDS,
                                dt_days: dt / DAY_SECONDS,
                                residual: res_norm,
                            });
                        }
                        dt *= 0.5;
                    }
                }
            }

            let stored: f64 = (0..6).map(|c| self.cell_mass(&state, c).1).sum();
            let injected = self.injection_rate_kg_s * time;
            let in_fault_system: f64 = [FAULT_CELL, TOP_AQUIFER_CELL]
                .iter()
                .map(|&c| self.cell_mass(&state, c).1)
                .sum();
            let in_troll = self.cell_mass(&state, TROLL_CELL).1;
            let balance = if injected > 0.0 {
                ((injected - stored - in_fault_system - in_troll) / injected).abs()
            } else {
                0.0
            };
            result.times_days.push(time / DAY_SECONDS);
            result.leaked_top_t.push(leaked_top / TONNE);
            result.leaked_troll_t.push(leaked_troll / TONNE);
            result.stored_t.push(stored / TONNE);
            result.injected_t.push(injected / TONNE);
            result.pressure_bar.push(state.p.iter().map(|&p| p / BAR).collect());
            result.mass_balance_rel_error.push(balance);
        }
        Ok(result)
    }

    /// One backward-Euler step solved by damped Newton; returns the new
    /// state or the residual norm on non-convergence.
    #[allow(clippy::too_many_arguments)]
    fn newton_step(
        &self,
        state: &State,
        old_mass: &[[f64; 2]; N_CELLS],
        dt: f64,
        colors: &[usize],
        n_colors: usize,
        tol_rows: &[f64],
        residual: &mut [f64],
        perturbed: &mut [f64],
    ) -> Result<State, f64> {
        let n = 2 * N_CELLS;
        let mut work = state.clone();
        let mut last_norm = f64::INFINITY;
        for _iter in 0..self.cfg.newton_max_iter {
            self.residual(&work, old_mass, dt, residual);
            let converged = residual.iter().zip(tol_rows).all(|(r, t)| r.abs() <= *t);
            last_norm = residual.iter().fold(0.0f64, |m, r| m.max(r.abs()));
            if converged {
                return Ok(work);
            }

            // colored finite-difference Jacobian
            let mut jac = DMatrix::<f64>::zeros(n, n);
            for var in 0..2 {
                for color in 0..n_colors {
                    let mut probe = work.clone();
                    let mut deltas = [0.0f64; N_CELLS];
                    for c in 0..N_CELLS {
                        if colors[c] != color {
                            continue;
                        }
                        if var == 0 {
                            let d = work.p[c].abs().max(1e5) * 1e-7;
                            probe.p[c] += d;
                            deltas[c] = d;
                        } else {
                            let d = if work.sg[c] + 1e-7 <= 1.0 { 1e-7 } else { -1e-7 };
                            probe.sg[c] += d;
                            deltas[c] = d;
                        }
                    }
                    self.residual(&probe, old_mass, dt, perturbed);
                    for c in 0..N_CELLS {
                        if colors[c] != color {
                            continue;
                        }
                        let col = 2 * c + var;
                        for r in 0..n {
                            let dr = (perturbed[r] - residual[r]) / deltas[c];
                            if dr != 0.0 {
                                jac[(r, col)] = dr;
                            }
                        }
                    }
                }
            }

            let rhs = DVector::from_iterator(n, residual.iter().map(|r| -r));
            let Some(dx) = jac.lu().solve(&rhs) else {
                return Err(last_norm);
            };
            // damp so no saturation moves more than 0.2 per iteration
            let max_ds = (0..N_CELLS).fold(0.0f64, |m, c| m.max(dx[2 * c + 1].abs()));
            let damp = if max_ds > 0.2 { 0.2 / max_ds } else { 1.0 };
            for c in 0..N_CELLS {
                work.p[c] = (work.p[c] + damp * dx[2 * c]).max(1e4);
                work.sg[c] = (work.sg[c] + damp * dx[2 * c + 1]).clamp(0.0, 1.0);
            }
        }
        Err(last_norm)
    }
}

#[derive(Debug, Clone)]
struct State {
    p: [f64; N_CELLS],
    sg: [f64; N_CELLS],
}

/// Simulation output: cumulative masses in tonnes, pressures in bar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub times_days: Vec<f64>,
    /// Cumulative CO2 mass that crossed from the reservoir into the fault
    /// system toward the top aquifer.
    pub leaked_top_t: Vec<f64>,
    /// Cumulative CO2 mass that crossed into the deep aquifer.
    pub leaked_troll_t: Vec<f64>,
    /// CO2 mass resident in the six storage cells.
    pub stored_t: Vec<f64>,
    pub injected_t: Vec<f64>,
    pub pressure_bar: Vec<Vec<f64>>,
    pub mass_balance_rel_error: Vec<f64>,
    pub aquifer_assumption_violated: [bool; 2],
}

impl SimResult {
    pub fn final_leaked_total_t(&self) -> f64 {
        self.leaked_top_t.last().unwrap_or(&0.0) + self.leaked_troll_t.last().unwrap_or(&0.0)
    }

    /// CSV time series: time, leakage, storage and per-cell pressures.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), ProxyError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let n_cells = self.pressure_bar.first().map_or(0, |p| p.len());
        let mut header = vec![
            "time_days".to_string(),
            "leaked_top_t".to_string(),
            "leaked_troll_t".to_string(),
            "stored_t".to_string(),
            "injected_t".to_string(),
            "mass_balance_rel_error".to_string(),
        ];
        header.extend((0..n_cells).map(|c| format!("p_cell{c}_bar")));
        wtr.write_record(&header)?;
        for i in 0..self.times_days.len() {
            let mut rec = vec![
                self.times_days[i].to_string(),
                self.leaked_top_t[i].to_string(),
                self.leaked_troll_t[i].to_string(),
                self.stored_t[i].to_string(),
                self.injected_t[i].to_string(),
                self.mass_balance_rel_error[i].to_string(),
            ];
            rec.extend(self.pressure_bar[i].iter().map(|p| p.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Builds the model and runs it in one call.
pub fn simulate(
    cfg: &ProxyConfig,
    fault_flow: &FlowFunctionSample,
    k_troll_md: f64,
) -> Result<SimResult, ProxyError> {
    ProxyModel::new(cfg, fault_flow, k_troll_md)?.simulate()
}
