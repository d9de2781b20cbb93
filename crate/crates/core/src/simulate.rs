//! Monte Carlo engine for a staggered binary-treatment panel design.
//!
//! Selection: `D_it = 1{pi1 + X_i pi2 + alpha_i + lambda_t >= u_it}` with `D_i1 = 0`.
//! Outcomes: `Y_it = X_i gamma_t + alpha_i + eta_t + v_it + tau(t, e_it) + xi_it`,
//! where `e_it` is the first treated period up to `t` (no effect before treatment).

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::efftreat::{
    build_cell_frame, compute_effective_treatment, with_pretrends, BuiltinKind, Cell, EffectivePanel,
    EffectiveTreatmentSpec,
};
use crate::error::{Error, Result};
use crate::estimator::{atem_dr, atem_ipw, atem_or, AtemEstimate, EstimandKind};
use crate::inference::{bootstrap_estimates, pretrends_report, BootstrapConfig};
use crate::nuisance::{fit_nuisances, NuisanceOptions};
use crate::panel::PanelDataset;
use crate::rng::{derive_seed, substream};
use crate::scalar::{mean, sd_population};

const DOMAIN_DATA: u64 = 1;
const DOMAIN_BOOTSTRAP: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Law {
    #[default]
    StandardNormal,
    StandardLogistic,
    Zero,
}

impl Law {
    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Law::StandardNormal => rng.sample(StandardNormal),
            Law::StandardLogistic => {
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                (u / (1.0 - u)).ln()
            }
            Law::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorLaws {
    pub u: Law,
    pub v: Law,
    pub xi: Law,
    pub alpha: Law,
    pub x: Law,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSurface {
    /// `tau(t, e) = (t + T - e) / T`.
    Default,
    Zero,
    /// `grid[t - 1][e - 1]`.
    Grid(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_units: usize,
    pub n_periods: usize,
    pub pi1: f64,
    pub pi2: f64,
    /// Indexed by `t - 1`.
    pub gamma_t: Vec<f64>,
    pub lambda_t: Vec<f64>,
    pub eta_t: Vec<f64>,
    pub tau: TauSurface,
    pub error_laws: ErrorLaws,
    /// Adds `c * alpha_i * t` to untreated outcomes.
    pub parallel_trends_violation: Option<f64>,
    pub reps: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(n_units: usize, n_periods: usize) -> Self {
        let tt = n_periods as f64;
        Self {
            n_units,
            n_periods,
            pi1: -1.0,
            pi2: 1.0,
            gamma_t: (1..=n_periods).map(|t| t as f64).collect(),
            lambda_t: (1..=n_periods).map(|t| t as f64 / tt).collect(),
            eta_t: (1..=n_periods).map(|t| t as f64).collect(),
            tau: TauSurface::Default,
            error_laws: ErrorLaws::default(),
            parallel_trends_violation: None,
            reps: 1000,
            seed: 0,
        }
    }

    pub fn tau(&self, t: usize, e: usize) -> f64 {
        match &self.tau {
            TauSurface::Default => (t + self.n_periods - e) as f64 / self.n_periods as f64,
            TauSurface::Zero => 0.0,
            TauSurface::Grid(g) => g[t - 1][e - 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let tt = self.n_periods;
        if tt < 2 || self.n_units < 2 {
            return Err(Error::InvalidConfig("need at least 2 units and 2 periods".into()));
        }
        if self.gamma_t.len() != tt || self.lambda_t.len() != tt || self.eta_t.len() != tt {
            return Err(Error::InvalidConfig("time-indexed coefficients must have length T".into()));
        }
        if let TauSurface::Grid(g) = &self.tau {
            if g.len() != tt || g.iter().any(|row| row.len() != tt) {
                return Err(Error::InvalidConfig("tau grid must be T x T".into()));
            }
        }
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be positive".into()));
        }
        Ok(())
    }
}

/// One simulated panel with the realized effect of treatment on each outcome.
#[derive(Debug, Clone)]
pub struct SimDraw {
    pub panel: PanelDataset<f64>,
    /// `effect[i][t - 1]`: treatment effect contained in `Y_it`.
    pub effect: Vec<Vec<f64>>,
}

impl SimDraw {
    /// Mover average of the effect change over the cell's differenced periods.
    pub fn truth(&self, eff: &EffectivePanel, cell: Cell) -> f64 {
        let (a, b) = cell.outcome_periods();
        let vals: Vec<f64> = (0..eff.n_units())
            .filter(|&i| eff.value(i, cell.t) == cell.e && eff.value(i, cell.s) == 0)
            .map(|i| self.effect[i][a - 1] - self.effect[i][b - 1])
            .collect();
        mean(&vals)
    }
}

pub fn generate_dgp(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> SimDraw {
    let (n, tt) = (cfg.n_units, cfg.n_periods);
    let laws = cfg.error_laws;
    let mut outcomes = Vec::with_capacity(n);
    let mut treatments = Vec::with_capacity(n);
    let mut covariates = Vec::with_capacity(n);
    let mut effect = Vec::with_capacity(n);
    for _ in 0..n {
        let x = laws.x.draw(rng);
        let alpha = laws.alpha.draw(rng);
        let mut first: Option<usize> = None;
        let mut y = Vec::with_capacity(tt);
        let mut d = Vec::with_capacity(tt);
        let mut fx = Vec::with_capacity(tt);
        for t in 1..=tt {
            let u = laws.u.draw(rng);
            let treated =
                t > 1 && cfg.pi1 + x * cfg.pi2 + alpha + cfg.lambda_t[t - 1] >= u;
            if treated && first.is_none() {
                first = Some(t);
            }
            let mut y0 = x * cfg.gamma_t[t - 1] + alpha + cfg.eta_t[t - 1] + laws.v.draw(rng);
            if let Some(c) = cfg.parallel_trends_violation {
                y0 += c * alpha * t as f64;
            }
            let tau = first.map_or(0.0, |e| cfg.tau(t, e));
            y.push(y0 + tau + laws.xi.draw(rng));
            d.push(vec![if treated { 1.0 } else { 0.0 }]);
            fx.push(tau);
        }
        outcomes.push(y);
        treatments.push(d);
        covariates.push(vec![x]);
        effect.push(fx);
    }
    let panel = PanelDataset::from_rows(
        (1..=n).map(|i| i.to_string()).collect(),
        (1..=tt).map(|t| t.to_string()).collect(),
        outcomes,
        treatments,
        covariates,
    )
    .expect("simulated panel is balanced")
    .with_names("y", vec!["d".into()], vec!["x".into()]);
    SimDraw { panel, effect }
}

/// Full cell layout of a built-in specification, before any data screening.
pub fn nominal_cells(kind: BuiltinKind, n_periods: usize) -> Vec<Cell> {
    let tt = n_periods;
    match kind {
        BuiltinKind::Once => (2..=tt).map(|t| Cell::new(t, 1, 1)).collect(),
        BuiltinKind::Event => (2..=tt)
            .flat_map(|e| (e..=tt).map(move |t| Cell::new(t, e - 1, e as i64)))
            .collect(),
        BuiltinKind::Number => (1..tt)
            .flat_map(|e| (e + 1..=tt).map(move |t| Cell::new(t, 1, e as i64)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloDesign {
    pub spec: BuiltinKind,
    /// Defaults to [`nominal_cells`].
    pub cells: Option<Vec<Cell>>,
    pub include_pretrends: bool,
    pub estimators: Vec<EstimandKind>,
    pub nuisance: NuisanceOptions<f64>,
    pub bootstrap: BootstrapConfig,
}

impl MonteCarloDesign {
    pub fn new(spec: BuiltinKind) -> Self {
        Self {
            spec,
            cells: None,
            include_pretrends: false,
            estimators: vec![EstimandKind::Dr],
            nuisance: NuisanceOptions::default(),
            bootstrap: BootstrapConfig::default(),
        }
    }

    pub fn resolved_cells(&self, n_periods: usize) -> Vec<Cell> {
        let base = self.cells.clone().unwrap_or_else(|| nominal_cells(self.spec, n_periods));
        if self.include_pretrends {
            with_pretrends(&base)
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub n: usize,
    pub t_periods: usize,
    pub t: usize,
    pub s: usize,
    pub e: i64,
    pub r: Option<usize>,
    pub estimator: EstimandKind,
    pub bias: f64,
    pub rmse: f64,
    pub pw_cp: f64,
    pub u_cp: f64,
    pub ci_l: f64,
    pub mean_estimate: f64,
    pub mean_truth: f64,
    /// Population sd of `estimate - truth`, so `rmse^2 = bias^2 + sd_error^2`.
    pub sd_error: f64,
}

impl SimRow {
    pub fn cell(&self) -> Cell {
        Cell { t: self.t, s: self.s, e: self.e, r: self.r }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetadata {
    pub reps: usize,
    pub reps_ok: usize,
    pub bootstrap_reps: usize,
    pub alpha: f64,
    pub seed: u64,
    pub flagged: Vec<(usize, String)>,
    /// Largest `|mean psi| / sd psi` over all reps and cells.
    pub max_centering_ratio: f64,
    /// Share of reps whose DR pre-trend verdict is "inconsistent".
    pub pretrend_flag_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTable {
    pub rows: Vec<SimRow>,
    pub metadata: SimMetadata,
}

impl SimTable {
    pub fn row(&self, estimator: EstimandKind, cell: Cell) -> Option<&SimRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.cell() == cell)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct CellOutcome {
    estimate: f64,
    truth: f64,
    lower: f64,
    upper: f64,
}

#[derive(Debug, Clone)]
struct RepOutcome {
    /// `[estimator][cell]`
    cells: Vec<Vec<CellOutcome>>,
    centering: f64,
    pretrend_flag: Option<bool>,
}

fn centering_ratio(e: &AtemEstimate<f64>) -> f64 {
    let sd = sd_population(&e.influence);
    if sd > 0.0 {
        mean(&e.influence).abs() / sd
    } else {
        0.0
    }
}

fn run_rep(cfg: &SimConfig, design: &MonteCarloDesign, cells: &[Cell], rep: usize) -> Result<RepOutcome> {
    let mut rng = substream(derive_seed(cfg.seed, DOMAIN_DATA, rep as u64), 0);
    let draw = generate_dgp(cfg, &mut rng);
    let spec = EffectiveTreatmentSpec::builtin(design.spec, 0);
    let eff = compute_effective_treatment(&draw.panel, &spec)?;
    let mut by_kind: Vec<Vec<AtemEstimate<f64>>> = vec![Vec::new(); design.estimators.len()];
    let mut truths = Vec::with_capacity(cells.len());
    for &cell in cells {
        let frame = build_cell_frame(&draw.panel, &eff, cell)?;
        let (frame, or, gps) = fit_nuisances(&frame, &design.nuisance)?;
        for (k, kind) in design.estimators.iter().enumerate() {
            let est = match kind {
                EstimandKind::Dr => atem_dr(&frame, &or, &gps)?,
                EstimandKind::Or => atem_or(&frame, &or)?,
                EstimandKind::Ipw => atem_ipw(&frame, &gps)?,
            };
            by_kind[k].push(est);
        }
        truths.push(draw.truth(&eff, cell));
    }
    let mut centering: f64 = 0.0;
    let mut pretrend_flag = None;
    let mut out = Vec::with_capacity(by_kind.len());
    for (k, ests) in by_kind.iter().enumerate() {
        let boot = BootstrapConfig {
            seed: derive_seed(cfg.seed, DOMAIN_BOOTSTRAP, rep as u64),
            ..design.bootstrap
        };
        let res = bootstrap_estimates(ests, &boot)?;
        if design.estimators[k] == EstimandKind::Dr {
            centering = ests.iter().map(centering_ratio).fold(centering, f64::max);
            if design.include_pretrends {
                pretrend_flag = Some(!pretrends_report(&res.bands)?.consistent_with_parallel_trends);
            }
        }
        out.push(
            ests.iter()
                .zip(&res.bands)
                .zip(&truths)
                .map(|((e, b), &truth)| CellOutcome {
                    estimate: e.point,
                    truth,
                    lower: b.lower,
                    upper: b.upper,
                })
                .collect(),
        );
    }
    Ok(RepOutcome {
        cells: out,
        centering,
        pretrend_flag,
    })
}

/// Replicates the design `cfg.reps` times and summarizes bias, RMSE and band coverage.
///
/// Failed replications are recorded; more than 1% of them fails the run.
pub fn run_monte_carlo(cfg: &SimConfig, design: &MonteCarloDesign) -> Result<SimTable> {
    cfg.validate()?;
    design.bootstrap.validate()?;
    if design.estimators.is_empty() {
        return Err(Error::InvalidConfig("no estimators requested".into()));
    }
    let cells = design.resolved_cells(cfg.n_periods);
    for c in &cells {
        c.validate(cfg.n_periods)?;
    }
    let results: Vec<Result<RepOutcome>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_rep(cfg, design, &cells, rep))
        .collect();
    let mut flagged = Vec::new();
    let mut ok = Vec::new();
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => ok.push(o),
            Err(e) => flagged.push((rep, e.to_string())),
        }
    }
    if flagged.len() * 100 > cfg.reps {
        return Err(Error::TooManyFailedReps {
            flagged: flagged.len(),
            reps: cfg.reps,
            first: flagged[0].1.clone(),
        });
    }
    if ok.is_empty() {
        return Err(Error::TooManyFailedReps {
            flagged: flagged.len(),
            reps: cfg.reps,
            first: flagged.first().map(|f| f.1.clone()).unwrap_or_default(),
        });
    }
    let nr = ok.len() as f64;
    let mut rows = Vec::new();
    for (k, &kind) in design.estimators.iter().enumerate() {
        let uniform = ok
            .iter()
            .filter(|o| o.cells[k].iter().all(|c| c.lower <= c.truth && c.truth <= c.upper))
            .count() as f64
            / nr;
        for (j, &cell) in cells.iter().enumerate() {
            let outcomes: Vec<&CellOutcome> = ok.iter().map(|o| &o.cells[k][j]).collect();
            let err: Vec<f64> = outcomes.iter().map(|c| c.estimate - c.truth).collect();
            let est: Vec<f64> = outcomes.iter().map(|c| c.estimate).collect();
            let bias = mean(&err);
            rows.push(SimRow {
                n: cfg.n_units,
                t_periods: cfg.n_periods,
                t: cell.t,
                s: cell.s,
                e: cell.e,
                r: cell.r,
                estimator: kind,
                bias,
                rmse: (err.iter().map(|v| v * v).sum::<f64>() / nr).sqrt(),
                pw_cp: outcomes.iter().filter(|c| c.lower <= c.truth && c.truth <= c.upper).count() as f64 / nr,
                u_cp: uniform,
                ci_l: outcomes.iter().map(|c| c.upper - c.lower).sum::<f64>() / nr,
                mean_estimate: mean(&est),
                mean_truth: outcomes.iter().map(|c| c.truth).sum::<f64>() / nr,
                sd_error: sd_population(&err),
            });
        }
    }
    let flags: Vec<bool> = ok.iter().filter_map(|o| o.pretrend_flag).collect();
    let pretrend_flag_rate = (!flags.is_empty())
        .then(|| flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64);
    let max_centering_ratio = ok.iter().map(|o| o.centering).fold(0.0, f64::max);
    if !flagged.is_empty() {
        log::warn!("{} of {} replications failed; first: {}", flagged.len(), cfg.reps, flagged[0].1);
    }
    Ok(SimTable {
        rows,
        metadata: SimMetadata {
            reps: cfg.reps,
            reps_ok: ok.len(),
            bootstrap_reps: design.bootstrap.n_reps,
            alpha: design.bootstrap.alpha,
            seed: cfg.seed,
            flagged,
            max_centering_ratio,
            pretrend_flag_rate,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn default_tau_surface() {
        let cfg = SimConfig::new(10, 4);
        assert_eq!(cfg.tau(2, 2), 1.0);
        assert_eq!(cfg.tau(4, 2), 1.5);
        assert_eq!(cfg.tau(4, 4), 1.0);
    }

    #[test]
    fn zero_effect_outcomes_have_no_treatment_component() {
        let cfg = SimConfig {
            tau: TauSurface::Zero,
            ..SimConfig::new(200, 4)
        };
        let draw = generate_dgp(&cfg, &mut substream(1, 0));
        assert!(draw.effect.iter().flatten().all(|&v| v == 0.0));
        assert!((0..200).all(|i| !draw.panel.treatment_path(i).is_treated(1)));
    }

    #[test]
    fn event_cell_truth_is_tau() {
        let cfg = SimConfig::new(2000, 4);
        let draw = generate_dgp(&cfg, &mut substream(2, 0));
        let eff = compute_effective_treatment(&draw.panel, &EffectiveTreatmentSpec::event()).unwrap();
        for cell in nominal_cells(BuiltinKind::Event, 4) {
            assert_relative_eq!(draw.truth(&eff, cell), cfg.tau(cell.t, cell.e as usize), epsilon = 1e-12);
        }
        let pre = Cell::pretrend(4, 3, 4, 2);
        assert_eq!(draw.truth(&eff, pre), 0.0);
    }

    #[test]
    fn treated_share_matches_direct_oracle() {
        // P(pi1 + X + alpha + lambda_2 >= u) with X, alpha, u iid N(0,1) is Phi(-0.5 / sqrt 3).
        let cfg = SimConfig::new(200_000, 4);
        let draw = generate_dgp(&cfg, &mut substream(3, 0));
        let share = (0..cfg.n_units)
            .filter(|&i| draw.panel.treatment_path(i).is_treated(2))
            .count() as f64
            / cfg.n_units as f64;
        let z = (-1.0 + 0.5) / 3f64.sqrt();
        let oracle = 0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2);
        assert!((share - oracle).abs() < 0.005, "{share} vs {oracle}");
    }

    #[test]
    fn small_run_is_deterministic_and_consistent() {
        let cfg = SimConfig {
            reps: 12,
            seed: 5,
            ..SimConfig::new(300, 4)
        };
        let design = MonteCarloDesign {
            estimators: vec![EstimandKind::Dr, EstimandKind::Or],
            bootstrap: BootstrapConfig { n_reps: 99, ..Default::default() },
            ..MonteCarloDesign::new(BuiltinKind::Once)
        };
        let a = run_monte_carlo(&cfg, &design).unwrap();
        let b = run_monte_carlo(&cfg, &design).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 6);
        for r in &a.rows {
            assert!(r.rmse + 1e-15 >= r.bias.abs());
            assert_relative_eq!(r.rmse * r.rmse, r.bias * r.bias + r.sd_error * r.sd_error, epsilon = 1e-10);
            assert!((0.0..=1.0).contains(&r.pw_cp) && (0.0..=1.0).contains(&r.u_cp));
        }
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,t_periods,t,s,e,r,estimator,bias,rmse,pw_cp,u_cp,ci_l"));
        assert_eq!(text.lines().count(), 7);
    }
}
