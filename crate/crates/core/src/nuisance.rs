//! First-step parametric fits: least-squares outcome regression on stayers
//! and a binary-response generalized propensity score on movers-or-stayers.
//!
//! Both fits work on internally standardized covariates and map coefficients
//! and influence vectors back to the original design, so outputs do not
//! depend on covariate scaling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::efftreat::{CovariateSet, MoverStayerFrame};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, dot, spd_inverse, Matrix, Svd};
use crate::scalar::Real;

/// Smallest admissible `sigma_min / sigma_max` of a standardized design.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpsLink {
    #[default]
    Logit,
    Probit,
}

impl fmt::Display for GpsLink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GpsLink::Logit => "logit",
            GpsLink::Probit => "probit",
        })
    }
}

impl FromStr for GpsLink {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logit" => Ok(Self::Logit),
            "probit" => Ok(Self::Probit),
            other => Err(Error::InvalidConfig(format!(
                "unknown GPS link `{other}` (expected logit|probit)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceOptions<T> {
    pub link: GpsLink,
    pub max_iter: usize,
    /// Sup-norm tolerance on the mean score (standardized scale).
    pub tol: T,
    /// Coefficient norm (standardized scale) beyond which the fit is declared separated.
    pub separation_bound: T,
    /// Overlap threshold: in-sample `p_hat` outside `[eps, 1 - eps]` is reported.
    pub overlap_eps: T,
    /// Drop units outside the overlap band and refit.
    pub trim: bool,
    pub or_covariates: CovariateSet,
    pub gps_covariates: CovariateSet,
}

impl<T: Real> Default for NuisanceOptions<T> {
    fn default() -> Self {
        Self {
            link: GpsLink::Logit,
            max_iter: 100,
            tol: T::lit(1e-10),
            separation_bound: T::lit(50.0),
            overlap_eps: T::lit(0.005),
            trim: false,
            or_covariates: CovariateSet::All,
            gps_covariates: CovariateSet::All,
        }
    }
}

/// Affine map `[1, x] -> [1, (x - mean) / sd]` fitted on a subsample.
#[derive(Debug, Clone)]
struct Standardizer<T> {
    mean: Vec<T>,
    scale: Vec<T>,
    constant: Vec<bool>,
}

impl<T: Real> Standardizer<T> {
    fn fit(design: &Matrix<T>, rows: &[usize]) -> Self {
        let k = design.cols();
        let n = T::from_usize_lossy(rows.len());
        let mut mean = vec![T::zero(); k];
        let mut scale = vec![T::one(); k];
        let mut constant = vec![false; k];
        for j in 1..k {
            let first = design[(rows[0], j)];
            let m = rows.iter().map(|&i| design[(i, j)]).sum::<T>() / n;
            let var = rows
                .iter()
                .map(|&i| (design[(i, j)] - m) * (design[(i, j)] - m))
                .sum::<T>()
                / n;
            let sd = var.sqrt();
            let magnitude = rows
                .iter()
                .map(|&i| design[(i, j)].abs())
                .fold(T::zero(), T::max);
            mean[j] = m;
            if rows.iter().all(|&i| design[(i, j)] == first)
                || sd <= T::lit(1e3) * T::epsilon() * magnitude
            {
                constant[j] = true;
            } else {
                scale[j] = sd;
            }
        }
        Self {
            mean,
            scale,
            constant,
        }
    }

    fn transform_row(&self, x: &[T], out: &mut [T]) {
        out[0] = x[0];
        for j in 1..x.len() {
            out[j] = if self.constant[j] {
                T::zero()
            } else {
                (x[j] - self.mean[j]) / self.scale[j]
            };
        }
    }

    fn transform(&self, design: &Matrix<T>) -> Matrix<T> {
        let mut z = Matrix::zeros(design.rows(), design.cols());
        for i in 0..design.rows() {
            let (src, dst) = (design.row(i), z.row_mut(i));
            self.transform_row(src, dst);
        }
        z
    }

    /// Maps a coefficient-like vector from the standardized basis back to the original one.
    fn back(&self, b: &[T]) -> Vec<T> {
        let mut out = b.to_vec();
        let mut shift = T::zero();
        for j in 1..b.len() {
            out[j] = b[j] / self.scale[j];
            shift = shift + self.mean[j] * out[j];
        }
        out[0] = b[0] - shift;
        out
    }
}

/// Outcome-regression fit `m(x; gamma) = x' gamma` on stayers.
#[derive(Debug, Clone)]
pub struct OrFit<T> {
    /// Intercept first.
    pub gamma: Vec<T>,
    /// `m(X_i; gamma_hat)` for every unit.
    pub fitted: Vec<T>,
    /// Derivative of `m` in `gamma`: the design row of each unit.
    pub gradient_rows: Matrix<T>,
    /// Per-unit influence vectors for `gamma_hat`.
    pub psi_gamma: Matrix<T>,
    pub n_stayers: usize,
}

pub fn fit_or_stayers<T: Real>(frame: &MoverStayerFrame<T>) -> Result<OrFit<T>> {
    let n = frame.n_units();
    let k = frame.design.cols();
    let rows: Vec<usize> = (0..n).filter(|&i| frame.stayer[i]).collect();
    let needed = k + 1;
    if rows.len() < needed {
        return Err(Error::TooFewObservations {
            model: "outcome regression",
            cell: frame.cell.to_string(),
            needed,
            got: rows.len(),
        });
    }
    let std = Standardizer::fit(&frame.design, &rows);
    let z_all = std.transform(&frame.design);
    let z = z_all.select_rows(&rows);
    let svd = Svd::new(&z);
    let inv_cond = svd.inverse_condition();
    if !(inv_cond >= T::lit(RANK_TOLERANCE)) {
        return Err(Error::Collinearity {
            model: "outcome regression",
            cell: frame.cell.to_string(),
            inverse_condition: inv_cond.as_f64(),
        });
    }
    let y: Vec<T> = rows.iter().map(|&i| frame.delta_y[i]).collect();
    let gamma_std = svd.solve(&y);
    let fitted: Vec<T> = (0..n).map(|i| dot(z_all.row(i), &gamma_std)).collect();

    // (E_N[S z z'])^{-1} = N (Z'Z)^{-1}
    let mut bread = svd.gram_inverse();
    let nn = T::from_usize_lossy(n);
    for i in 0..k {
        for j in 0..k {
            bread[(i, j)] = bread[(i, j)] * nn;
        }
    }
    let mut psi = Matrix::zeros(n, k);
    for &i in &rows {
        let resid = frame.delta_y[i] - fitted[i];
        let score: Vec<T> = z_all.row(i).iter().map(|&v| v * resid).collect();
        let psi_std = bread.mul_vec(&score);
        psi.row_mut(i).copy_from_slice(&std.back(&psi_std));
    }
    Ok(OrFit {
        gamma: std.back(&gamma_std),
        fitted,
        gradient_rows: frame.design.clone(),
        psi_gamma: psi,
        n_stayers: rows.len(),
    })
}

/// Generalized propensity score fit for `P(mover | mover or stayer, X)`.
#[derive(Debug, Clone)]
pub struct GpsFit<T> {
    pub link: GpsLink,
    /// Intercept first.
    pub pi: Vec<T>,
    /// `p(X_i; pi_hat)` for every unit.
    pub p_hat: Vec<T>,
    /// `p / (1 - p)`; zero outside the fitting subsample.
    pub r_hat: Vec<T>,
    /// `dp/dpi` per unit (rows of an `N x k` matrix).
    pub p_dot: Matrix<T>,
    /// `dr/dpi = p_dot / (1 - p)^2`; zero outside the fitting subsample.
    pub r_dot: Matrix<T>,
    /// Per-unit influence vectors for `pi_hat`.
    pub psi_pi: Matrix<T>,
    pub in_sample: Vec<bool>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: T,
    /// In-sample units with `p_hat` outside the overlap band.
    pub overlap_violations: usize,
}

impl<T: Real> GpsFit<T> {
    /// In-sample units outside `[eps, 1 - eps]`.
    pub fn outside_overlap(&self, eps: T) -> Vec<bool> {
        self.p_hat
            .iter()
            .zip(&self.in_sample)
            .map(|(&p, &s)| s && (p < eps || p > T::one() - eps))
            .collect()
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn std_normal_pdf<T: Real>(x: T) -> T {
    T::lit(std::f64::consts::FRAC_1_SQRT_2 / std::f64::consts::PI.sqrt()) * (-(x * x) / T::lit(2.0)).exp()
}

fn std_normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5 * statrs::function::erf::erfc(-x.as_f64() / std::f64::consts::SQRT_2))
}

fn ln_std_normal_cdf<T: Real>(x: T) -> T {
    let xf = x.as_f64();
    if xf > -30.0 {
        T::lit((0.5 * statrs::function::erf::erfc(-xf / std::f64::consts::SQRT_2)).ln())
    } else {
        // Mills-ratio asymptote.
        T::lit(-0.5 * xf * xf - (-xf).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
    }
}

struct LinkEval<T> {
    p: T,
    /// Score contribution per unit of linear index: `d loglik / d eta`.
    score: T,
    /// `- d score / d eta` (observed information weight).
    weight: T,
    /// `dp / d eta`.
    dp: T,
    loglik: T,
}

fn eval_link<T: Real>(link: GpsLink, eta: T, y: bool) -> LinkEval<T> {
    match link {
        GpsLink::Logit => {
            let p = T::one() / (T::one() + (-eta).exp());
            let yv = if y { T::one() } else { T::zero() };
            let loglik = if y { -softplus(-eta) } else { -softplus(eta) };
            let w = p * (T::one() - p);
            LinkEval {
                p,
                score: yv - p,
                weight: w,
                dp: w,
                loglik,
            }
        }
        GpsLink::Probit => {
            let p = std_normal_cdf(eta);
            let phi = std_normal_pdf(eta);
            // Inverse Mills ratios, computed on the stable side.
            let lambda = if y {
                (-ln_std_normal_cdf(eta) + phi.ln()).exp()
            } else {
                -(-ln_std_normal_cdf(-eta) + phi.ln()).exp()
            };
            let loglik = if y {
                ln_std_normal_cdf(eta)
            } else {
                ln_std_normal_cdf(-eta)
            };
            LinkEval {
                p,
                score: lambda,
                weight: lambda * (eta + lambda),
                dp: phi,
                loglik,
            }
        }
    }
}

fn sup_norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &x| a.max(x.abs()))
}

fn l2_norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn fit_gps<T: Real>(frame: &MoverStayerFrame<T>, opts: &NuisanceOptions<T>) -> Result<GpsFit<T>> {
    let n = frame.n_units();
    let k = frame.design.cols();
    let cell = frame.cell.to_string();
    let rows: Vec<usize> = (0..n).filter(|&i| frame.mover[i] || frame.stayer[i]).collect();
    let needed = k + 1;
    let movers = rows.iter().filter(|&&i| frame.mover[i]).count();
    if rows.len() < needed || movers == 0 || movers == rows.len() {
        return Err(Error::TooFewObservations {
            model: "generalized propensity score",
            cell,
            needed,
            got: rows.len().min(movers).min(rows.len() - movers),
        });
    }
    let std = Standardizer::fit(&frame.design, &rows);
    let z_all = std.transform(&frame.design);
    let z = z_all.select_rows(&rows);
    let inv_cond = Svd::new(&z).inverse_condition();
    if !(inv_cond >= T::lit(RANK_TOLERANCE)) {
        return Err(Error::Collinearity {
            model: "generalized propensity score",
            cell,
            inverse_condition: inv_cond.as_f64(),
        });
    }
    let y: Vec<bool> = rows.iter().map(|&i| frame.mover[i]).collect();
    let n_sub = T::from_usize_lossy(rows.len());
    let tol = opts.tol.max(T::lit(100.0) * T::epsilon() * n_sub.sqrt());

    let loglik = |beta: &[T]| -> T {
        (0..rows.len())
            .map(|a| eval_link(opts.link, dot(z.row(a), beta), y[a]).loglik)
            .sum()
    };
    // Mean score and mean observed information at beta.
    let derivs = |beta: &[T]| -> (Vec<T>, Matrix<T>) {
        let mut g = vec![T::zero(); k];
        let mut h = Matrix::zeros(k, k);
        for a in 0..rows.len() {
            let za = z.row(a);
            let ev = eval_link(opts.link, dot(za, beta), y[a]);
            for p in 0..k {
                g[p] = g[p] + za[p] * ev.score;
                for q in 0..=p {
                    h[(p, q)] = h[(p, q)] + ev.weight * za[p] * za[q];
                }
            }
        }
        for p in 0..k {
            g[p] = g[p] / n_sub;
            for q in 0..=p {
                h[(p, q)] = h[(p, q)] / n_sub;
                h[(q, p)] = h[(p, q)];
            }
        }
        (g, h)
    };

    let share = T::from_usize_lossy(movers) / n_sub;
    let mut beta = vec![T::zero(); k];
    if opts.link == GpsLink::Logit {
        beta[0] = (share / (T::one() - share)).ln();
    }
    let mut ll = loglik(&beta);
    let mut converged = false;
    let mut iterations = 0;
    let mut score_norm;
    while iterations < opts.max_iter {
        let (g, h) = derivs(&beta);
        score_norm = sup_norm(&g);
        if score_norm < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let Some(l) = cholesky(&h) else {
            let norm = l2_norm(&beta);
            return Err(if norm > T::lit(10.0) {
                Error::Separation {
                    cell,
                    norm: norm.as_f64(),
                }
            } else {
                Error::NonConvergence {
                    cell,
                    iterations,
                    score_norm: score_norm.as_f64(),
                }
            });
        };
        let step = cholesky_solve(&l, &g);
        let mut lambda = T::one();
        let mut candidate: Vec<T>;
        let mut cand_ll;
        let mut halvings = 0;
        loop {
            candidate = beta.iter().zip(&step).map(|(&b, &s)| b + lambda * s).collect();
            cand_ll = loglik(&candidate);
            if cand_ll >= ll || halvings >= 40 {
                break;
            }
            lambda = lambda / T::lit(2.0);
            halvings += 1;
        }
        if cand_ll < ll {
            // No ascent possible at working precision.
            break;
        }
        beta = candidate;
        ll = cand_ll;
        let norm = l2_norm(&beta);
        if norm > opts.separation_bound {
            return Err(Error::Separation {
                cell,
                norm: norm.as_f64(),
            });
        }
    }
    if !converged {
        let (g, _) = derivs(&beta);
        score_norm = sup_norm(&g);
        converged = score_norm < tol.sqrt() * T::lit(1e-2);
        if !converged {
            return Err(Error::NonConvergence {
                cell,
                iterations,
                score_norm: score_norm.as_f64(),
            });
        }
        log::debug!("GPS fit for {cell} stalled at score norm {:e}; accepted", score_norm.as_f64());
    }

    // Per-unit quantities for every unit; r and r_dot vanish outside the subsample.
    let mut in_sample = vec![false; n];
    rows.iter().for_each(|&i| in_sample[i] = true);
    let mut p_hat = vec![T::zero(); n];
    let mut r_hat = vec![T::zero(); n];
    let mut p_dot = Matrix::zeros(n, k);
    let mut r_dot = Matrix::zeros(n, k);
    let mut bread = Matrix::zeros(k, k);
    let mut scores = Matrix::zeros(n, k);
    let nn = T::from_usize_lossy(n);
    for i in 0..n {
        let zi = z_all.row(i);
        let eta = dot(zi, &beta);
        let ev = eval_link(opts.link, eta, frame.mover[i]);
        p_hat[i] = ev.p;
        let x = frame.design.row(i);
        for j in 0..k {
            p_dot[(i, j)] = ev.dp * x[j];
        }
        if in_sample[i] {
            let q = T::one() - ev.p;
            r_hat[i] = ev.p / q;
            for j in 0..k {
                r_dot[(i, j)] = p_dot[(i, j)] / (q * q);
                scores[(i, j)] = zi[j] * ev.score;
                for l in 0..k {
                    bread[(j, l)] = bread[(j, l)] + ev.weight * zi[j] * zi[l] / nn;
                }
            }
        }
    }
    let bread_inv = spd_inverse(&bread).ok_or_else(|| Error::Separation {
        cell: cell.clone(),
        norm: l2_norm(&beta).as_f64(),
    })?;
    let mut psi = Matrix::zeros(n, k);
    for &i in &rows {
        let psi_std = bread_inv.mul_vec(scores.row(i));
        psi.row_mut(i).copy_from_slice(&std.back(&psi_std));
    }
    let fit = GpsFit {
        link: opts.link,
        pi: std.back(&beta),
        p_hat,
        r_hat,
        p_dot,
        r_dot,
        psi_pi: psi,
        in_sample,
        converged,
        iterations,
        log_likelihood: ll,
        overlap_violations: 0,
    };
    let violations = fit
        .outside_overlap(opts.overlap_eps)
        .iter()
        .filter(|&&v| v)
        .count();
    if violations > 0 {
        log::warn!(
            "cell {}: {violations} units with GPS outside [{}, {}]",
            frame.cell,
            opts.overlap_eps,
            T::one() - opts.overlap_eps
        );
    }
    Ok(GpsFit {
        overlap_violations: violations,
        ..fit
    })
}

/// Logit GPS with default options.
pub fn fit_gps_logit<T: Real>(frame: &MoverStayerFrame<T>) -> Result<GpsFit<T>> {
    fit_gps(frame, &NuisanceOptions::default())
}

/// Both first-step fits for a cell, honoring covariate selection and trimming.
pub fn fit_nuisances<T: Real>(
    frame: &MoverStayerFrame<T>,
    opts: &NuisanceOptions<T>,
) -> Result<(MoverStayerFrame<T>, OrFit<T>, GpsFit<T>)> {
    let gps_frame = frame.with_covariates(&opts.gps_covariates)?;
    let mut gps = fit_gps(&gps_frame, opts)?;
    let mut frame = frame.clone();
    if opts.trim && gps.overlap_violations > 0 {
        let drop = gps.outside_overlap(opts.overlap_eps);
        log::info!(
            "cell {}: trimming {} units outside the overlap band",
            frame.cell,
            gps.overlap_violations
        );
        frame = frame.exclude(&drop);
        if frame.n_movers() == 0 || frame.n_stayers() == 0 {
            return Err(Error::EmptyCell {
                cell: frame.cell.to_string(),
                movers: frame.n_movers(),
                stayers: frame.n_stayers(),
            });
        }
        gps = fit_gps(&frame.with_covariates(&opts.gps_covariates)?, opts)?;
    }
    let or = fit_or_stayers(&frame.with_covariates(&opts.or_covariates)?)?;
    Ok((frame, or, gps))
}
