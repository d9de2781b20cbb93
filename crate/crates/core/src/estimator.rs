//! ATEM point estimators, influence functions and linear aggregates.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::efftreat::{build_cell_frame, Cell, EffectivePanel, MoverStayerFrame};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nuisance::{fit_nuisances, GpsFit, NuisanceOptions, OrFit};
use crate::panel::PanelDataset;
use crate::scalar::{mean, sd_population, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimandKind {
    Or,
    Ipw,
    #[default]
    Dr,
}

impl fmt::Display for EstimandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimandKind::Or => "or",
            EstimandKind::Ipw => "ipw",
            EstimandKind::Dr => "dr",
        })
    }
}

impl std::str::FromStr for EstimandKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "or" => Ok(Self::Or),
            "ipw" => Ok(Self::Ipw),
            "dr" => Ok(Self::Dr),
            other => Err(Error::InvalidConfig(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtemEstimate<T> {
    pub cell: Cell,
    pub estimand_kind: EstimandKind,
    pub point: T,
    #[serde(skip)]
    pub influence: Vec<T>,
    pub analytic_se: T,
    pub n_movers: usize,
    pub n_stayers: usize,
    pub is_pretrend: bool,
    /// Influence values are numerically constant; inference refuses such cells.
    pub degenerate: bool,
}

/// Pieces of the DR influence function for one cell.
#[derive(Debug, Clone)]
pub struct InfluenceDecomposition<T> {
    pub psi_m: Vec<T>,
    pub psi_s: Vec<T>,
    pub psi_est: Vec<T>,
    pub m1: Vec<T>,
    pub m2: Vec<T>,
    pub w_m: Vec<T>,
    pub w_s: Vec<T>,
    /// `N x k` matrix of stayer-weight derivatives.
    pub w_s_dot: Matrix<T>,
}

fn indicator<T: Real>(b: &[bool]) -> Vec<T> {
    b.iter().map(|&v| if v { T::one() } else { T::zero() }).collect()
}

fn check_lengths<T: Real>(frame: &MoverStayerFrame<T>, n_or: Option<usize>, n_gps: Option<usize>) -> Result<()> {
    let n = frame.n_units();
    for m in [n_or, n_gps].into_iter().flatten() {
        if m != n {
            return Err(Error::InvalidCell {
                cell: frame.cell.to_string(),
                reason: format!("first-step fit covers {m} units, frame has {n}"),
            });
        }
    }
    if frame.n_movers() == 0 || frame.n_stayers() == 0 {
        return Err(Error::EmptyCell {
            cell: frame.cell.to_string(),
            movers: frame.n_movers(),
            stayers: frame.n_stayers(),
        });
    }
    Ok(())
}

fn finish<T: Real>(
    frame: &MoverStayerFrame<T>,
    kind: EstimandKind,
    point: T,
    influence: Vec<T>,
) -> AtemEstimate<T> {
    let n = T::from_usize_lossy(influence.len());
    let second = influence.iter().map(|&v| v * v).sum::<T>() / n;
    let scale = frame
        .delta_y
        .iter()
        .zip(frame.mover.iter().zip(&frame.stayer))
        .filter(|(_, (&m, &s))| m || s)
        .fold(T::min_positive_value(), |a, (&y, _)| a.max(y.abs()));
    let weight_scale = n / T::from_usize_lossy(frame.n_movers().min(frame.n_stayers()));
    let degenerate = sd_population(&influence) <= T::lit(1e4) * T::epsilon() * scale * weight_scale;
    if degenerate {
        log::warn!("cell {}: influence values are degenerate", frame.cell);
    }
    AtemEstimate {
        cell: frame.cell,
        estimand_kind: kind,
        point,
        influence,
        analytic_se: (second / n).sqrt(),
        n_movers: frame.n_movers(),
        n_stayers: frame.n_stayers(),
        is_pretrend: frame.cell.is_pretrend(),
        degenerate,
    }
}

impl<T: Real> AtemEstimate<T> {
    pub fn n_units(&self) -> usize {
        self.influence.len()
    }
}

/// Projection of `psi` (rows) on a vector.
fn project<T: Real>(psi: &Matrix<T>, v: &[T]) -> Vec<T> {
    psi.mul_vec(v)
}

fn column_means_weighted<T: Real>(rows: &Matrix<T>, w: &[T]) -> Vec<T> {
    let n = T::from_usize_lossy(rows.rows());
    let mut out = rows.tr_mul_vec(w);
    out.iter_mut().for_each(|v| *v = *v / n);
    out
}

/// Doubly robust estimate together with its influence decomposition.
pub fn atem_dr_decomposed<T: Real>(
    frame: &MoverStayerFrame<T>,
    or_fit: &OrFit<T>,
    gps_fit: &GpsFit<T>,
) -> Result<(AtemEstimate<T>, InfluenceDecomposition<T>)> {
    check_lengths(frame, Some(or_fit.fitted.len()), Some(gps_fit.r_hat.len()))?;
    let n = frame.n_units();
    let m = indicator::<T>(&frame.mover);
    let s = indicator::<T>(&frame.stayer);
    let rs: Vec<T> = (0..n).map(|i| gps_fit.r_hat[i] * s[i]).collect();
    let mean_m = mean(&m);
    let mean_rs = mean(&rs);
    let w_m: Vec<T> = m.iter().map(|&v| v / mean_m).collect();
    let w_s: Vec<T> = rs.iter().map(|&v| v / mean_rs).collect();
    let resid: Vec<T> = (0..n).map(|i| frame.delta_y[i] - or_fit.fitted[i]).collect();
    let wm_r: Vec<T> = (0..n).map(|i| w_m[i] * resid[i]).collect();
    let ws_r: Vec<T> = (0..n).map(|i| w_s[i] * resid[i]).collect();
    let a = mean(&wm_r);
    let b = mean(&ws_r);
    let psi_m: Vec<T> = (0..n).map(|i| wm_r[i] - w_m[i] * a).collect();
    let psi_s: Vec<T> = (0..n).map(|i| ws_r[i] - w_s[i] * b).collect();

    let dw: Vec<T> = (0..n).map(|i| w_m[i] - w_s[i]).collect();
    let m1 = column_means_weighted(&or_fit.gradient_rows, &dw);
    let k = gps_fit.r_dot.cols();
    let mut w_s_dot = Matrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            w_s_dot[(i, j)] = gps_fit.r_dot[(i, j)] * s[i] / mean_rs;
        }
    }
    let mean_wsd_resid = column_means_weighted(&w_s_dot, &resid);
    let mean_wsd = column_means_weighted(&w_s_dot, &vec![T::one(); n]);
    let m2: Vec<T> = (0..k).map(|j| mean_wsd_resid[j] - mean_wsd[j] * b).collect();
    let g = project(&or_fit.psi_gamma, &m1);
    let p = project(&gps_fit.psi_pi, &m2);
    let psi_est: Vec<T> = (0..n).map(|i| g[i] + p[i]).collect();
    let influence: Vec<T> = (0..n).map(|i| psi_m[i] - psi_s[i] - psi_est[i]).collect();
    let est = finish(frame, EstimandKind::Dr, a - b, influence);
    Ok((
        est,
        InfluenceDecomposition {
            psi_m,
            psi_s,
            psi_est,
            m1,
            m2,
            w_m,
            w_s,
            w_s_dot,
        },
    ))
}

pub fn atem_dr<T: Real>(frame: &MoverStayerFrame<T>, or_fit: &OrFit<T>, gps_fit: &GpsFit<T>) -> Result<AtemEstimate<T>> {
    atem_dr_decomposed(frame, or_fit, gps_fit).map(|(e, _)| e)
}

/// Pre-trend estimate; the frame must carry `r` and `or_fit` must be fit on its `Delta Y_r`.
pub fn atem_pretrend<T: Real>(
    frame: &MoverStayerFrame<T>,
    or_fit: &OrFit<T>,
    gps_fit: &GpsFit<T>,
) -> Result<AtemEstimate<T>> {
    if !frame.cell.is_pretrend() {
        return Err(Error::InvalidCell {
            cell: frame.cell.to_string(),
            reason: "pre-trend estimate needs a period r".into(),
        });
    }
    atem_dr(frame, or_fit, gps_fit)
}

pub fn atem_or<T: Real>(frame: &MoverStayerFrame<T>, or_fit: &OrFit<T>) -> Result<AtemEstimate<T>> {
    check_lengths(frame, Some(or_fit.fitted.len()), None)?;
    let n = frame.n_units();
    let m = indicator::<T>(&frame.mover);
    let mean_m = mean(&m);
    let w_m: Vec<T> = m.iter().map(|&v| v / mean_m).collect();
    let resid: Vec<T> = (0..n).map(|i| frame.delta_y[i] - or_fit.fitted[i]).collect();
    let a = (0..n).map(|i| w_m[i] * resid[i]).sum::<T>() / T::from_usize_lossy(n);
    let m1 = column_means_weighted(&or_fit.gradient_rows, &w_m);
    let g = project(&or_fit.psi_gamma, &m1);
    let influence = (0..n).map(|i| w_m[i] * (resid[i] - a) - g[i]).collect();
    Ok(finish(frame, EstimandKind::Or, a, influence))
}

pub fn atem_ipw<T: Real>(frame: &MoverStayerFrame<T>, gps_fit: &GpsFit<T>) -> Result<AtemEstimate<T>> {
    check_lengths(frame, None, Some(gps_fit.r_hat.len()))?;
    let n = frame.n_units();
    let k = frame.design.cols();
    // A zero outcome model turns the DR formula into IPW.
    let zero = OrFit {
        gamma: vec![T::zero(); k],
        fitted: vec![T::zero(); n],
        gradient_rows: Matrix::zeros(n, 1),
        psi_gamma: Matrix::zeros(n, 1),
        n_stayers: frame.n_stayers(),
    };
    let mut est = atem_dr(frame, &zero, gps_fit)?;
    est.estimand_kind = EstimandKind::Ipw;
    Ok(est)
}

/// Fits the nuisances for one cell and evaluates the requested estimator.
pub fn estimate_cell<T: Real>(
    panel: &PanelDataset<T>,
    eff: &EffectivePanel,
    cell: Cell,
    kind: EstimandKind,
    opts: &NuisanceOptions<T>,
) -> Result<AtemEstimate<T>> {
    let frame = build_cell_frame(panel, eff, cell)?;
    let (frame, or, gps) = fit_nuisances(&frame, opts)?;
    match kind {
        EstimandKind::Dr if cell.is_pretrend() => atem_pretrend(&frame, &or, &gps),
        EstimandKind::Dr => atem_dr(&frame, &or, &gps),
        EstimandKind::Or => atem_or(&frame, &or),
        EstimandKind::Ipw => atem_ipw(&frame, &gps),
    }
}

/// Evaluates cells in parallel; results keep the input order.
pub fn estimate_cells<T: Real>(
    panel: &PanelDataset<T>,
    eff: &EffectivePanel,
    cells: &[Cell],
    kind: EstimandKind,
    opts: &NuisanceOptions<T>,
) -> Vec<Result<AtemEstimate<T>>> {
    cells
        .par_iter()
        .map(|&c| estimate_cell(panel, eff, c, kind, opts))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregateKind {
    TimeAverage,
    EventWeighted { t: usize },
    NumberWeighted { t: usize },
}

impl fmt::Display for AggregateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregateKind::TimeAverage => f.write_str("time_average"),
            AggregateKind::EventWeighted { t } => write!(f, "event_weighted(t={t})"),
            AggregateKind::NumberWeighted { t } => write!(f, "number_weighted(t={t})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEstimate<T> {
    pub kind: AggregateKind,
    pub point: T,
    #[serde(skip)]
    pub influence: Vec<T>,
    pub analytic_se: T,
    pub components: Vec<(Cell, T)>,
    /// Weights treated as known when forming the influence function.
    pub fixed_weights: bool,
}

fn combine<T: Real>(
    kind: AggregateKind,
    estimates: &[&AtemEstimate<T>],
    weights: Vec<T>,
    fixed_weights: bool,
) -> Result<AggregateEstimate<T>> {
    let n = estimates[0].n_units();
    if estimates.iter().any(|e| e.n_units() != n) {
        return Err(Error::Aggregation("components cover different samples".into()));
    }
    let point = estimates.iter().zip(&weights).map(|(e, &w)| w * e.point).sum();
    let mut influence = vec![T::zero(); n];
    for (e, &w) in estimates.iter().zip(&weights) {
        for (acc, &v) in influence.iter_mut().zip(&e.influence) {
            *acc = *acc + w * v;
        }
    }
    let nn = T::from_usize_lossy(n);
    let analytic_se = (influence.iter().map(|&v| v * v).sum::<T>() / nn).sqrt() / nn.sqrt();
    Ok(AggregateEstimate {
        kind,
        point,
        influence,
        analytic_se,
        components: estimates.iter().map(|e| e.cell).zip(weights).collect(),
        fixed_weights,
    })
}

/// Equal-weight average of once-type cells `(t, 1, 1)` over `t = 2..T`.
pub fn aggregate_time_average<T: Real>(
    once_estimates: &[AtemEstimate<T>],
    n_periods: usize,
) -> Result<AggregateEstimate<T>> {
    let mut picked = Vec::with_capacity(n_periods.saturating_sub(1));
    for t in 2..=n_periods {
        let e = once_estimates
            .iter()
            .find(|e| e.cell == Cell::new(t, 1, 1))
            .ok_or_else(|| Error::Aggregation(format!("missing cell (t={t},s=1,e=1)")))?;
        picked.push(e);
    }
    if picked.is_empty() {
        return Err(Error::Aggregation("need at least two periods".into()));
    }
    let w = T::one() / T::from_usize_lossy(picked.len());
    let weights = vec![w; picked.len()];
    combine(AggregateKind::TimeAverage, &picked, weights, false)
}

/// Mover-share weighted average over intensities at a common `t`.
///
/// Event components must use `s = e - 1` or the common baseline `s = 1`;
/// number components use `s = 1`. Weights are treated as fixed.
pub fn aggregate_weighted<T: Real>(
    kind: AggregateKind,
    estimates: &[AtemEstimate<T>],
    mover_counts: &[usize],
) -> Result<AggregateEstimate<T>> {
    let t = match kind {
        AggregateKind::EventWeighted { t } | AggregateKind::NumberWeighted { t } => t,
        AggregateKind::TimeAverage => {
            return Err(Error::Aggregation("use aggregate_time_average for the time average".into()))
        }
    };
    if estimates.is_empty() || estimates.len() != mover_counts.len() {
        return Err(Error::Aggregation(format!(
            "{} estimates but {} mover counts",
            estimates.len(),
            mover_counts.len()
        )));
    }
    for e in estimates {
        let c = e.cell;
        let baseline_ok = match kind {
            AggregateKind::EventWeighted { .. } => c.s == 1 || c.s as i64 == c.e - 1,
            _ => c.s == 1,
        };
        if c.t != t || c.is_pretrend() || !baseline_ok {
            return Err(Error::Aggregation(format!("cell {c} does not belong to {kind}")));
        }
    }
    let mut cells: Vec<Cell> = estimates.iter().map(|e| e.cell).collect();
    cells.sort();
    cells.dedup_by_key(|c| c.e);
    if cells.len() != estimates.len() {
        return Err(Error::Aggregation("duplicate intensity among components".into()));
    }
    let total: usize = mover_counts.iter().sum();
    if total == 0 {
        return Err(Error::Aggregation("no movers in any component".into()));
    }
    let weights = mover_counts
        .iter()
        .map(|&c| T::from_usize_lossy(c) / T::from_usize_lossy(total))
        .collect();
    let refs: Vec<&AtemEstimate<T>> = estimates.iter().collect();
    combine(kind, &refs, weights, true)
}

/// Convenience: weights from the estimates' own mover counts.
pub fn aggregate_weighted_by_movers<T: Real>(
    kind: AggregateKind,
    estimates: &[AtemEstimate<T>],
) -> Result<AggregateEstimate<T>> {
    let counts: Vec<usize> = estimates.iter().map(|e| e.n_movers).collect();
    aggregate_weighted(kind, estimates, &counts)
}
