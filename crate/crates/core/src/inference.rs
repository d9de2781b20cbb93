//! Multiplier bootstrap: standard errors, max-t critical values and uniform bands.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::efftreat::Cell;
use crate::error::{Error, Result};
use crate::estimator::{AggregateEstimate, AtemEstimate};
use crate::rng::{ChaChaStreams, RngFactory};
use crate::scalar::Real;

/// Upper quartile of the standard normal distribution.
pub const Z_75: f64 = 0.674_489_750_196_081_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    #[default]
    Mammen,
    Rademacher,
}

impl fmt::Display for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightKind::Mammen => "mammen",
            WeightKind::Rademacher => "rademacher",
        })
    }
}

impl FromStr for WeightKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mammen" => Ok(Self::Mammen),
            "rademacher" => Ok(Self::Rademacher),
            other => Err(Error::InvalidConfig(format!(
                "unknown bootstrap weights `{other}` (expected mammen|rademacher)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_reps: usize,
    pub alpha: f64,
    pub weight_kind: WeightKind,
    pub seed: u64,
    /// Exclude degenerate cells instead of failing.
    pub skip_degenerate: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_reps: 999,
            alpha: 0.05,
            weight_kind: WeightKind::Mammen,
            seed: 0,
            skip_degenerate: false,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidBootstrap(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.n_reps < 2 {
            return Err(Error::InvalidBootstrap(format!("need at least 2 replications, got {}", self.n_reps)));
        }
        if (self.n_reps as f64) * self.alpha < 1.0 {
            return Err(Error::InvalidBootstrap(format!(
                "{} replications cannot resolve the {} quantile",
                self.n_reps,
                1.0 - self.alpha
            )));
        }
        Ok(())
    }
}

/// Anything with a point estimate and per-unit influence values.
pub trait BootstrapTarget<T>: Sync {
    fn label(&self) -> String;
    fn cell(&self) -> Option<Cell>;
    fn point(&self) -> T;
    fn influence(&self) -> &[T];
}

impl<T: Real> BootstrapTarget<T> for AtemEstimate<T> {
    fn label(&self) -> String {
        self.cell.to_string()
    }
    fn cell(&self) -> Option<Cell> {
        Some(self.cell)
    }
    fn point(&self) -> T {
        self.point
    }
    fn influence(&self) -> &[T] {
        &self.influence
    }
}

impl<T: Real> BootstrapTarget<T> for AggregateEstimate<T> {
    fn label(&self) -> String {
        self.kind.to_string()
    }
    fn cell(&self) -> Option<Cell> {
        None
    }
    fn point(&self) -> T {
        self.point
    }
    fn influence(&self) -> &[T] {
        &self.influence
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band<T> {
    pub label: String,
    pub cell: Option<Cell>,
    pub point: T,
    pub se: T,
    pub lower: T,
    pub upper: T,
    pub q25: T,
    pub q75: T,
}

impl<T: Real> Band<T> {
    pub fn contains(&self, v: T) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn length(&self) -> T {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult<T> {
    pub bands: Vec<Band<T>>,
    pub critical_value: T,
    pub n_reps: usize,
    pub alpha: f64,
    pub degenerate_cells: Vec<String>,
}

/// Mammen two-point weights: `1 - kappa` w.p. `kappa / sqrt 5`, else `kappa`.
pub fn mammen_draw<R: RngCore + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; n];
    fill_weights(WeightKind::Mammen, rng, &mut out);
    out
}

pub fn rademacher_draw<R: RngCore + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; n];
    fill_weights(WeightKind::Rademacher, rng, &mut out);
    out
}

pub fn mammen_kappa() -> f64 {
    (5f64.sqrt() + 1.0) / 2.0
}

fn fill_weights<T: Real, R: RngCore + ?Sized>(kind: WeightKind, rng: &mut R, out: &mut [T]) {
    match kind {
        WeightKind::Mammen => {
            let kappa = mammen_kappa();
            let p_low = kappa / 5f64.sqrt();
            let (lo, hi) = (T::lit(1.0 - kappa), T::lit(kappa));
            for v in out.iter_mut() {
                *v = if rng.random::<f64>() < p_low { lo } else { hi };
            }
        }
        WeightKind::Rademacher => {
            for v in out.iter_mut() {
                *v = if rng.random::<bool>() { T::one() } else { -T::one() };
            }
        }
    }
}

/// Linear interpolation between order statistics (sample quantile type 7).
pub fn quantile_sorted<T: Real>(sorted: &[T], q: f64) -> T {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = T::lit(h - lo as f64);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn sorted_copy<T: Real>(v: &[T]) -> Vec<T> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite bootstrap draws"));
    s
}

fn is_degenerate<T: Real>(psi: &[T]) -> bool {
    let first = psi[0];
    let scale = psi.iter().fold(T::zero(), |a, &v| a.max(v.abs()));
    let spread = psi.iter().fold(T::zero(), |a, &v| a.max((v - first).abs()));
    !(spread > T::lit(1e3) * T::epsilon() * scale) || !psi.iter().all(|v| v.is_finite())
}

/// Bootstrap with `ChaCha8` substreams indexed by replication.
pub fn multiplier_bootstrap<T: Real>(
    targets: &[&dyn BootstrapTarget<T>],
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult<T>> {
    multiplier_bootstrap_with(targets, cfg, &ChaChaStreams { seed: cfg.seed })
}

/// Bootstrap with an arbitrary stream factory; replication `b` uses `factory.stream(b)`
/// for one weight vector shared by all targets.
pub fn multiplier_bootstrap_with<T: Real, F: RngFactory>(
    targets: &[&dyn BootstrapTarget<T>],
    cfg: &BootstrapConfig,
    factory: &F,
) -> Result<BootstrapResult<T>> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidBootstrap("no estimates to bootstrap".into()));
    }
    let n = targets[0].influence().len();
    if n == 0 || targets.iter().any(|t| t.influence().len() != n) {
        return Err(Error::InvalidBootstrap("influence arrays differ in length".into()));
    }
    let mut degenerate: Vec<String> = targets
        .iter()
        .filter(|t| is_degenerate(t.influence()))
        .map(|t| t.label())
        .collect();
    if !degenerate.is_empty() && !cfg.skip_degenerate {
        return Err(Error::DegenerateInfluence(degenerate));
    }
    let active: Vec<&dyn BootstrapTarget<T>> = targets
        .iter()
        .copied()
        .filter(|t| !degenerate.contains(&t.label()))
        .collect();
    if active.is_empty() {
        return Err(Error::DegenerateInfluence(degenerate));
    }
    let c = active.len();
    let nn = T::from_usize_lossy(n);

    // draws[b][j] = E_N[V*_b psi_j]
    let draws: Vec<Vec<T>> = (0..cfg.n_reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = factory.stream(b as u64);
            let mut v = vec![T::zero(); n];
            fill_weights(cfg.weight_kind, &mut rng, &mut v);
            active
                .iter()
                .map(|t| {
                    let psi = t.influence();
                    let mut acc = T::zero();
                    for i in 0..n {
                        acc = acc + v[i] * psi[i];
                    }
                    acc / nn
                })
                .collect()
        })
        .collect();

    let mut se = Vec::with_capacity(c);
    let mut quartiles = Vec::with_capacity(c);
    for j in 0..c {
        let col: Vec<T> = draws.iter().map(|d| d[j]).collect();
        let s = sorted_copy(&col);
        let (q25, q75) = (quantile_sorted(&s, 0.25), quantile_sorted(&s, 0.75));
        let sej = (q75 - q25) / T::lit(2.0 * Z_75);
        if !(sej > T::zero()) {
            degenerate.push(active[j].label());
        }
        se.push(sej);
        quartiles.push((q25, q75));
    }
    if se.iter().any(|s| !(*s > T::zero())) {
        return Err(Error::DegenerateInfluence(degenerate));
    }
    let max_t: Vec<T> = draws
        .iter()
        .map(|d| (0..c).fold(T::zero(), |m, j| m.max(d[j].abs() / se[j])))
        .collect();
    let critical_value = quantile_sorted(&sorted_copy(&max_t), 1.0 - cfg.alpha);
    let bands = active
        .iter()
        .enumerate()
        .map(|(j, t)| Band {
            label: t.label(),
            cell: t.cell(),
            point: t.point(),
            se: se[j],
            lower: t.point() - critical_value * se[j],
            upper: t.point() + critical_value * se[j],
            q25: quartiles[j].0,
            q75: quartiles[j].1,
        })
        .collect();
    Ok(BootstrapResult {
        bands,
        critical_value,
        n_reps: cfg.n_reps,
        alpha: cfg.alpha,
        degenerate_cells: degenerate,
    })
}

pub fn bootstrap_estimates<T: Real>(
    estimates: &[AtemEstimate<T>],
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult<T>> {
    let targets: Vec<&dyn BootstrapTarget<T>> = estimates.iter().map(|e| e as &dyn BootstrapTarget<T>).collect();
    multiplier_bootstrap(&targets, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrendsVerdict {
    pub n_pretrend_cells: usize,
    /// Pre-trend cells whose band excludes zero.
    pub excluding_zero: Vec<Cell>,
    pub consistent_with_parallel_trends: bool,
    pub note: String,
}

/// Flags pre-trend cells whose uniform band excludes zero.
///
/// Passing is a necessary condition for parallel trends only.
pub fn pretrends_report<T: Real>(bands: &[Band<T>]) -> Result<PretrendsVerdict> {
    let pre: Vec<&Band<T>> = bands
        .iter()
        .filter(|b| b.cell.is_some_and(|c| c.is_pretrend()))
        .collect();
    if pre.is_empty() {
        return Err(Error::NoPretrendCells);
    }
    let excluding_zero: Vec<Cell> = pre
        .iter()
        .filter(|b| !b.contains(T::zero()))
        .filter_map(|b| b.cell)
        .collect();
    Ok(PretrendsVerdict {
        n_pretrend_cells: pre.len(),
        consistent_with_parallel_trends: excluding_zero.is_empty(),
        excluding_zero,
        note: "necessary condition only".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::EstimandKind;
    use crate::rng::substream;
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    fn est(cell: Cell, point: f64, psi: Vec<f64>) -> AtemEstimate<f64> {
        AtemEstimate {
            cell,
            estimand_kind: EstimandKind::Dr,
            point,
            influence: psi,
            analytic_se: 0.0,
            n_movers: 1,
            n_stayers: 1,
            is_pretrend: cell.is_pretrend(),
            degenerate: false,
        }
    }

    fn normal_psi(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = substream(seed, 0);
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let m = z.iter().sum::<f64>() / n as f64;
        z.iter().map(|v| v - m).collect()
    }

    #[test]
    fn mammen_law() {
        let kappa = mammen_kappa();
        let p = kappa / 5f64.sqrt();
        let (lo, hi) = (1.0 - kappa, kappa);
        assert_relative_eq!(lo, -0.618_033_988_749_895, epsilon = 1e-12);
        assert_relative_eq!(p * lo + (1.0 - p) * hi, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p * lo * lo + (1.0 - p) * hi * hi, 1.0, epsilon = 1e-12);
        let draws = mammen_draw(1_000_000, &mut substream(7, 0));
        assert!(draws.iter().all(|&v| v == lo || v == hi));
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(m.abs() < 0.005, "{m}");
    }

    #[test]
    fn config_checks() {
        let psi = normal_psi(1, 50);
        let e = est(Cell::new(2, 1, 1), 0.0, psi);
        let targets: Vec<&dyn BootstrapTarget<f64>> = vec![&e];
        for cfg in [
            BootstrapConfig { n_reps: 1, ..Default::default() },
            BootstrapConfig { n_reps: 10, alpha: 0.05, ..Default::default() },
            BootstrapConfig { alpha: 1.5, ..Default::default() },
        ] {
            assert!(matches!(multiplier_bootstrap(&targets, &cfg), Err(Error::InvalidBootstrap(_))));
        }
        let zero = est(Cell::new(3, 1, 1), 0.0, vec![0.0; 50]);
        let targets: Vec<&dyn BootstrapTarget<f64>> = vec![&e, &zero];
        match multiplier_bootstrap(&targets, &BootstrapConfig::default()) {
            Err(Error::DegenerateInfluence(cells)) => assert_eq!(cells, vec!["(t=3,s=1,e=1)".to_string()]),
            other => panic!("{other:?}"),
        }
        let lenient = BootstrapConfig { skip_degenerate: true, ..Default::default() };
        let res = multiplier_bootstrap(&targets, &lenient).unwrap();
        assert_eq!(res.bands.len(), 1);
        assert_eq!(res.degenerate_cells.len(), 1);
    }

    #[test]
    fn reproducible_and_scale_equivariant() {
        let a = est(Cell::new(2, 1, 1), 1.0, normal_psi(2, 300));
        let b = est(Cell::new(3, 1, 1), -0.5, normal_psi(3, 300).iter().map(|v| 2.0 * v).collect());
        let cfg = BootstrapConfig { n_reps: 499, seed: 11, ..Default::default() };
        let r1 = bootstrap_estimates(&[a.clone(), b.clone()], &cfg).unwrap();
        let r2 = bootstrap_estimates(&[a.clone(), b.clone()], &cfg).unwrap();
        assert_eq!(r1, r2);
        let c = 3.5;
        let scale = |e: &AtemEstimate<f64>| est(e.cell, c * e.point, e.influence.iter().map(|v| c * v).collect());
        let r3 = bootstrap_estimates(&[scale(&a), scale(&b)], &cfg).unwrap();
        assert_relative_eq!(r3.critical_value, r1.critical_value, max_relative = 1e-12);
        for (x, y) in r1.bands.iter().zip(&r3.bands) {
            assert_relative_eq!(y.se, c * x.se, max_relative = 1e-12);
            assert_relative_eq!(y.length(), c * x.length(), max_relative = 1e-12);
            assert_relative_eq!(x.point - x.lower, x.upper - x.point, max_relative = 1e-12);
        }
    }

    #[test]
    fn critical_value_nonincreasing_in_alpha() {
        let cells: Vec<AtemEstimate<f64>> = (2..6)
            .map(|t| est(Cell::new(t, 1, 1), 0.0, normal_psi(t as u64, 200)))
            .collect();
        let mut last = f64::INFINITY;
        for alpha in [0.01, 0.05, 0.1, 0.2, 0.5] {
            let cfg = BootstrapConfig { alpha, seed: 5, ..Default::default() };
            let cv = bootstrap_estimates(&cells, &cfg).unwrap().critical_value;
            assert!(cv <= last);
            last = cv;
        }
    }

    #[test]
    fn single_cell_critical_value_is_pointwise() {
        let e = est(Cell::new(2, 1, 1), 0.0, normal_psi(9, 400));
        let cfg = BootstrapConfig { n_reps: 999, seed: 1, ..Default::default() };
        let r = bootstrap_estimates(std::slice::from_ref(&e), &cfg).unwrap();
        // |R*| / SE has the quantile of |N(0,1)| at 0.95, about 1.96.
        assert!((r.critical_value - 1.96).abs() < 0.2, "{}", r.critical_value);
    }

    /// Counter-based stand-in generator keyed by the replication index.
    struct CountingFactory;
    struct Constant(u64);
    impl RngCore for Constant {
        fn next_u32(&mut self) -> u32 {
            self.next_u64() as u32
        }
        fn next_u64(&mut self) -> u64 {
            self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
            crate::rng::mix64(self.0)
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            rand::rand_core::impls::fill_bytes_via_next(self, dst)
        }
    }
    impl RngFactory for CountingFactory {
        type Rng = Constant;
        fn stream(&self, index: u64) -> Constant {
            Constant(index)
        }
    }

    #[test]
    fn replications_share_weights_across_cells() {
        // Identical influence in two cells gives identical draws only if V* is shared.
        let psi = normal_psi(4, 100);
        let a = est(Cell::new(2, 1, 1), 0.0, psi.clone());
        let b = est(Cell::new(3, 1, 1), 5.0, psi);
        let targets: Vec<&dyn BootstrapTarget<f64>> = vec![&a, &b];
        let cfg = BootstrapConfig { n_reps: 200, ..Default::default() };
        let r = multiplier_bootstrap_with(&targets, &cfg, &CountingFactory).unwrap();
        assert_eq!(r.bands[0].se, r.bands[1].se);
        assert_eq!(r.bands[0].q25, r.bands[1].q25);
        let single = multiplier_bootstrap_with(&targets[..1], &cfg, &CountingFactory).unwrap();
        assert_eq!(single.critical_value, r.critical_value);
    }

    #[test]
    fn band_coverage_for_a_known_mean() {
        let reps = 2000;
        let cfg = BootstrapConfig { n_reps: 399, ..Default::default() };
        let covered: usize = (0..reps)
            .into_par_iter()
            .map(|rep| {
                let mut rng = substream(99, rep as u64);
                let z: Vec<f64> = (0..500).map(|_| rng.sample(StandardNormal)).collect();
                let m = z.iter().sum::<f64>() / 500.0;
                let e = est(Cell::new(2, 1, 1), m, z.iter().map(|v| v - m).collect());
                let c = BootstrapConfig { seed: 1000 + rep as u64, ..cfg };
                let r = bootstrap_estimates(std::slice::from_ref(&e), &c).unwrap();
                usize::from(r.bands[0].contains(0.0))
            })
            .sum();
        let rate = covered as f64 / reps as f64;
        assert!((0.93..=0.97).contains(&rate), "{rate}");
    }

    #[test]
    fn pretrend_verdicts() {
        let band = |cell, lower, upper| Band {
            label: String::new(),
            cell: Some(cell),
            point: 0.5 * (lower + upper),
            se: 1.0,
            lower,
            upper,
            q25: 0.0,
            q75: 0.0,
        };
        let post = band(Cell::new(4, 3, 4), 0.5, 1.5);
        assert!(matches!(pretrends_report(&[post.clone()]), Err(Error::NoPretrendCells)));
        let ok = vec![post.clone(), band(Cell::pretrend(4, 3, 4, 2), -0.1, 0.2), band(Cell::pretrend(4, 3, 4, 3), -0.3, 0.1)];
        assert!(pretrends_report(&ok).unwrap().consistent_with_parallel_trends);
        let mut bad = ok.clone();
        bad[2] = band(Cell::pretrend(4, 3, 4, 3), 0.05, 0.4);
        let v = pretrends_report(&bad).unwrap();
        assert!(!v.consistent_with_parallel_trends);
        assert_eq!(v.excluding_zero, vec![Cell::pretrend(4, 3, 4, 3)]);
    }
}
