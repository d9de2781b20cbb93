//! Effective-treatment summaries of treatment paths, estimation cells, and
//! the mover/stayer frames every estimator consumes.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::panel::{PanelDataset, TreatmentPath};
use crate::scalar::Real;

/// User-supplied mapping `(path, t, delta) -> code`.
///
/// Codes must be non-negative; `0` marks a comparison unit. The mapping is
/// responsible for "zero implies zero earlier" (checked at runtime, warning
/// only).
pub trait CustomMapping<T>: Send + Sync {
    fn code(&self, path: &TreatmentPath<'_, T>, t: usize, delta: usize) -> i64;
}

impl<T, F> CustomMapping<T> for F
where
    F: Fn(&TreatmentPath<'_, T>, usize, usize) -> i64 + Send + Sync,
{
    fn code(&self, path: &TreatmentPath<'_, T>, t: usize, delta: usize) -> i64 {
        self(path, t, delta)
    }
}

/// Built-in specification names, as accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuiltinKind {
    /// Ever treated up to `t`.
    Once,
    /// First treated period up to `t`.
    Event,
    /// Number of treated periods up to `t`.
    Number,
}

impl fmt::Display for BuiltinKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BuiltinKind::Once => "once",
            BuiltinKind::Event => "event",
            BuiltinKind::Number => "number",
        })
    }
}

impl FromStr for BuiltinKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "once" => Ok(Self::Once),
            "event" => Ok(Self::Event),
            "number" => Ok(Self::Number),
            other => Err(Error::InvalidConfig(format!(
                "unknown effective treatment `{other}` (expected once|event|number)"
            ))),
        }
    }
}

#[derive(Clone)]
pub enum EffectiveKind<T> {
    Builtin(BuiltinKind),
    Custom(Arc<dyn CustomMapping<T>>),
}

impl<T> fmt::Debug for EffectiveKind<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EffectiveKind::Builtin(k) => write!(f, "Builtin({k})"),
            EffectiveKind::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EffectiveTreatmentSpec<T> {
    pub kind: EffectiveKind<T>,
    /// Limited-anticipation horizon: period `t` inspects the path through `t + delta`.
    pub anticipation: usize,
}

impl<T> EffectiveTreatmentSpec<T> {
    pub fn builtin(kind: BuiltinKind, anticipation: usize) -> Self {
        Self {
            kind: EffectiveKind::Builtin(kind),
            anticipation,
        }
    }

    pub fn once() -> Self {
        Self::builtin(BuiltinKind::Once, 0)
    }

    pub fn event() -> Self {
        Self::builtin(BuiltinKind::Event, 0)
    }

    pub fn number() -> Self {
        Self::builtin(BuiltinKind::Number, 0)
    }

    pub fn custom(mapping: impl CustomMapping<T> + 'static, anticipation: usize) -> Self {
        Self {
            kind: EffectiveKind::Custom(Arc::new(mapping)),
            anticipation,
        }
    }

    pub fn name(&self) -> String {
        match &self.kind {
            EffectiveKind::Builtin(k) => k.to_string(),
            EffectiveKind::Custom(_) => "custom".into(),
        }
    }
}

/// Realized effective treatments `E[i][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectivePanel {
    n_units: usize,
    n_periods: usize,
    values: Vec<i64>,
    support: Vec<BTreeSet<i64>>,
    warnings: Vec<String>,
}

impl EffectivePanel {
    /// Wraps precomputed codes laid out unit-major (`values[i * T + t - 1]`).
    pub fn from_values(n_units: usize, n_periods: usize, values: Vec<i64>) -> Result<Self> {
        assert_eq!(values.len(), n_units * n_periods);
        if let Some(pos) = values.iter().position(|&v| v < 0) {
            return Err(Error::NegativeCode {
                unit: pos / n_periods,
                period: pos % n_periods + 1,
                code: values[pos],
            });
        }
        let mut support = vec![BTreeSet::new(); n_periods];
        for i in 0..n_units {
            for t in 0..n_periods {
                let v = values[i * n_periods + t];
                if v != 0 {
                    support[t].insert(v);
                }
            }
        }
        Ok(Self {
            n_units,
            n_periods,
            values,
            support,
            warnings: Vec::new(),
        })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    /// Effective treatment of unit `i` (0-based) at period `t` (1-based).
    #[inline]
    pub fn value(&self, i: usize, t: usize) -> i64 {
        self.values[i * self.n_periods + t - 1]
    }

    pub fn unit_path(&self, i: usize) -> &[i64] {
        &self.values[i * self.n_periods..(i + 1) * self.n_periods]
    }

    /// Nonzero realized values at period `t`.
    pub fn support(&self, t: usize) -> &BTreeSet<i64> {
        &self.support[t - 1]
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Counts `(movers, stayers)` for the pair `(t, s)` and intensity `e`.
    pub fn mover_stayer_counts(&self, t: usize, s: usize, e: i64) -> (usize, usize) {
        let mut m = 0;
        let mut st = 0;
        for i in 0..self.n_units {
            let (et, es) = (self.value(i, t), self.value(i, s));
            if es == 0 {
                if et == e {
                    m += 1;
                } else if et == 0 {
                    st += 1;
                }
            }
        }
        (m, st)
    }

    /// Units violating "zero at t implies zero at t - 1".
    pub fn monotonicity_violations(&self) -> usize {
        (0..self.n_units)
            .filter(|&i| {
                let p = self.unit_path(i);
                p.windows(2).any(|w| w[1] == 0 && w[0] != 0)
            })
            .count()
    }
}

pub fn compute_effective_treatment<T: Num + Clone>(
    panel: &PanelDataset<T>,
    spec: &EffectiveTreatmentSpec<T>,
) -> Result<EffectivePanel> {
    let n = panel.n_units();
    let tt = panel.n_periods();
    let delta = spec.anticipation;
    let mut values = Vec::with_capacity(n * tt);
    for i in 0..n {
        let path = panel.treatment_path(i);
        match &spec.kind {
            EffectiveKind::Builtin(kind) => {
                let mut first: i64 = 0;
                let mut count: i64 = 0;
                let mut inspected = 0;
                for t in 1..=tt {
                    let horizon = (t + delta).min(tt);
                    while inspected < horizon {
                        inspected += 1;
                        if path.is_treated(inspected) {
                            count += 1;
                            if first == 0 {
                                first = inspected as i64;
                            }
                        }
                    }
                    values.push(match kind {
                        BuiltinKind::Once => i64::from(count > 0),
                        BuiltinKind::Event => first,
                        BuiltinKind::Number => count,
                    });
                }
            }
            EffectiveKind::Custom(map) => {
                for t in 1..=tt {
                    let code = map.code(&path, t, delta);
                    if code < 0 {
                        return Err(Error::NegativeCode {
                            unit: i,
                            period: t,
                            code,
                        });
                    }
                    values.push(code);
                }
            }
        }
    }
    let mut eff = EffectivePanel::from_values(n, tt, values)?;
    if delta > 0 && tt > 1 {
        let first_clipped = tt.saturating_sub(delta) + 1;
        if first_clipped <= tt {
            let msg = format!(
                "anticipation window clipped at period {tt} for t >= {}",
                first_clipped.max(1)
            );
            log::warn!("{msg}");
            eff.warnings.push(msg);
        }
    }
    if matches!(spec.kind, EffectiveKind::Custom(_)) {
        let bad = eff.monotonicity_violations();
        if bad > 0 {
            let msg = format!(
                "custom effective treatment: {bad} units return to comparison status after treatment"
            );
            log::warn!("{msg}");
            eff.warnings.push(msg);
        }
    }
    Ok(eff)
}

/// Estimation cell `(t, s, e)`, optionally carrying a pre-trend period `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub t: usize,
    pub s: usize,
    pub e: i64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r: Option<usize>,
}

impl Cell {
    pub const fn new(t: usize, s: usize, e: i64) -> Self {
        Self { t, s, e, r: None }
    }

    pub const fn pretrend(t: usize, s: usize, e: i64, r: usize) -> Self {
        Self { t, s, e, r: Some(r) }
    }

    pub fn is_pretrend(&self) -> bool {
        self.r.is_some()
    }

    /// Periods whose outcomes are differenced: `(t, s)` or `(r, r - 1)`.
    pub fn outcome_periods(&self) -> (usize, usize) {
        match self.r {
            Some(r) => (r, r - 1),
            None => (self.t, self.s),
        }
    }

    pub fn validate(&self, n_periods: usize) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::InvalidCell {
                cell: self.to_string(),
                reason: reason.to_string(),
            })
        };
        if !(1 <= self.s && self.s < self.t && self.t <= n_periods) {
            return fail("need 1 <= s < t <= T");
        }
        if self.e == 0 {
            return fail("intensity e must be nonzero");
        }
        if let Some(r) = self.r {
            if !(2 <= r && r <= self.s) {
                return fail("pre-trend period needs 2 <= r <= s");
            }
        }
        Ok(())
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.r {
            Some(r) => write!(f, "(t={},s={},r={},e={})", self.t, self.s, r, self.e),
            None => write!(f, "(t={},s={},e={})", self.t, self.s, self.e),
        }
    }
}

/// Which covariates enter a nuisance model (the intercept always does).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateSet {
    #[default]
    All,
    InterceptOnly,
    /// 0-based covariate indices.
    Columns(Vec<usize>),
}

/// Mover/stayer indicators and outcome differences for one cell.
#[derive(Debug, Clone)]
pub struct MoverStayerFrame<T> {
    pub cell: Cell,
    pub mover: Vec<bool>,
    pub stayer: Vec<bool>,
    pub delta_y: Vec<T>,
    /// `[1, X_i]` per unit.
    pub design: Matrix<T>,
}

impl<T: Real> MoverStayerFrame<T> {
    pub fn n_units(&self) -> usize {
        self.mover.len()
    }

    pub fn n_movers(&self) -> usize {
        self.mover.iter().filter(|&&m| m).count()
    }

    pub fn n_stayers(&self) -> usize {
        self.stayer.iter().filter(|&&s| s).count()
    }

    /// Same frame with the design reduced to the intercept plus `set`.
    pub fn with_covariates(&self, set: &CovariateSet) -> Result<Self> {
        let k = self.design.cols() - 1;
        let cols: Vec<usize> = match set {
            CovariateSet::All => return Ok(self.clone()),
            CovariateSet::InterceptOnly => vec![0],
            CovariateSet::Columns(idx) => {
                if let Some(&bad) = idx.iter().find(|&&j| j >= k) {
                    return Err(Error::InvalidConfig(format!(
                        "covariate index {bad} out of range ({k} covariates)"
                    )));
                }
                std::iter::once(0).chain(idx.iter().map(|j| j + 1)).collect()
            }
        };
        Ok(Self {
            design: self.design.select_cols(&cols),
            ..self.clone()
        })
    }

    /// Drops units from both groups (used by opt-in trimming).
    pub fn exclude(&self, drop: &[bool]) -> Self {
        let mut out = self.clone();
        for (i, &d) in drop.iter().enumerate() {
            if d {
                out.mover[i] = false;
                out.stayer[i] = false;
            }
        }
        out
    }
}

fn design_matrix<T: Real>(panel: &PanelDataset<T>) -> Matrix<T> {
    let n = panel.n_units();
    let k = panel.n_covariates();
    let mut data = Vec::with_capacity(n * (k + 1));
    for i in 0..n {
        data.push(T::one());
        data.extend_from_slice(panel.covariates(i));
    }
    Matrix::from_vec(n, k + 1, data)
}

pub fn build_cell_frame<T: Real>(
    panel: &PanelDataset<T>,
    eff: &EffectivePanel,
    cell: Cell,
) -> Result<MoverStayerFrame<T>> {
    cell.validate(panel.n_periods())?;
    let n = panel.n_units();
    let mut mover = vec![false; n];
    let mut stayer = vec![false; n];
    for i in 0..n {
        let et = eff.value(i, cell.t);
        let es = eff.value(i, cell.s);
        mover[i] = et == cell.e && es == 0;
        stayer[i] = et == 0 && es == 0;
    }
    let movers = mover.iter().filter(|&&m| m).count();
    let stayers = stayer.iter().filter(|&&s| s).count();
    if movers == 0 || stayers == 0 {
        return Err(Error::EmptyCell {
            cell: cell.to_string(),
            movers,
            stayers,
        });
    }
    let (a, b) = cell.outcome_periods();
    let delta_y = panel.outcome_difference(a, b)?;
    Ok(MoverStayerFrame {
        cell,
        mover,
        stayer,
        delta_y,
        design: design_matrix(panel),
    })
}

/// Cells of a design plus the ones dropped for lack of movers or stayers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Design {
    pub cells: Vec<Cell>,
    pub dropped: Vec<(Cell, String)>,
}

impl Design {
    pub fn post_cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| !c.is_pretrend())
    }

    pub fn pretrend_cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.is_pretrend())
    }
}

/// Expands post cells with their pre-trend periods `r = 2..=s`.
pub fn with_pretrends(cells: &[Cell]) -> Vec<Cell> {
    let mut out: Vec<Cell> = cells.iter().filter(|c| !c.is_pretrend()).copied().collect();
    let pre: Vec<Cell> = out
        .iter()
        .flat_map(|c| (2..=c.s).map(move |r| Cell::pretrend(c.t, c.s, c.e, r)))
        .collect();
    out.extend(pre);
    out
}

/// Default cells for a specification.
///
/// * once: `(t, 1, 1)` for `t = 2..T`;
/// * event: `(t, e - 1, e)` for `e = 2..T`, `t = e..T`;
/// * number (and custom): `(t, 1, e)` for `e` in the support at `t`, `t = e + 1..T`.
///
/// Only intensities realized in the data are enumerated; cells without movers
/// or stayers are dropped and reported.
pub fn default_design<T>(
    eff: &EffectivePanel,
    spec: &EffectiveTreatmentSpec<T>,
    include_pretrends: bool,
) -> Design {
    let tt = eff.n_periods();
    let mut candidates = Vec::new();
    match &spec.kind {
        EffectiveKind::Builtin(BuiltinKind::Once) => {
            candidates.extend((2..=tt).map(|t| Cell::new(t, 1, 1)));
        }
        EffectiveKind::Builtin(BuiltinKind::Event) => {
            for e in 2..=tt {
                for t in e..=tt {
                    if eff.support(t).contains(&(e as i64)) {
                        candidates.push(Cell::new(t, e - 1, e as i64));
                    }
                }
            }
        }
        EffectiveKind::Builtin(BuiltinKind::Number) | EffectiveKind::Custom(_) => {
            let max_e = (2..=tt)
                .flat_map(|t| eff.support(t).iter().copied())
                .max()
                .unwrap_or(0);
            for e in 1..=max_e {
                for t in 2..=tt {
                    if (t as i64) >= e + 1 && eff.support(t).contains(&e) {
                        candidates.push(Cell::new(t, 1, e));
                    }
                }
            }
        }
    }
    let mut design = Design::default();
    for c in candidates {
        let (m, s) = eff.mover_stayer_counts(c.t, c.s, c.e);
        if m == 0 || s == 0 {
            let reason = format!("{m} movers, {s} stayers");
            log::warn!("dropping cell {c}: {reason}");
            design.dropped.push((c, reason));
        } else {
            design.cells.push(c);
        }
    }
    if include_pretrends {
        design.cells = with_pretrends(&design.cells);
    }
    design
}
