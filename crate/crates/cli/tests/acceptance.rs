//! Acceptance suite: one pass/fail line per criterion.

use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use effdid::efftreat::{build_cell_frame, MoverStayerFrame};
use effdid::estimator::{atem_dr, atem_ipw, atem_or};
use effdid::linalg::Matrix;
use effdid::panel::write_panel_csv;
use effdid::simulate::{ErrorLaws, Law, SimRow};
use effdid::{
    aggregate_weighted, compute_effective_treatment, estimate_cell, fit_gps_logit, fit_or_stayers, generate_dgp,
    run_monte_carlo, AggregateKind, BuiltinKind, Cell, CovariateSet, EstimandKind,
    MonteCarloDesign, Options, Panel, SimConfig, SimTable, TreatmentSpec,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn centering(psi: &[f64]) -> f64 {
    let n = psi.len() as f64;
    let m = psi.iter().sum::<f64>() / n;
    let sd = (psi.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        m.abs() / sd
    } else {
        0.0
    }
}

fn intercept_only() -> Options {
    Options {
        or_covariates: CovariateSet::InterceptOnly,
        gps_covariates: CovariateSet::InterceptOnly,
        ..Options::default()
    }
}

/// Binary staggered-ish panel with one covariate and arbitrary outcomes.
fn random_panel(rng: &mut ChaCha8Rng, n: usize, tt: usize, first_untreated: bool) -> Panel {
    let mut outcomes = Vec::new();
    let mut treat = Vec::new();
    let mut cov = Vec::new();
    let p: f64 = rng.random_range(0.15..0.5);
    for _ in 0..n {
        let x: f64 = rng.random_range(-2.0..2.0);
        let d: Vec<Vec<f64>> = (1..=tt)
            .map(|t| {
                let on = !(first_untreated && t == 1) && rng.random::<f64>() < p;
                vec![if on { 1.0 } else { 0.0 }]
            })
            .collect();
        outcomes.push((0..tt).map(|_| rng.random_range(-3.0..3.0) + x).collect());
        treat.push(d);
        cov.push(vec![x]);
    }
    Panel::from_rows(
        (0..n).map(|i| format!("u{i}")).collect(),
        (1..=tt).map(|t| t.to_string()).collect(),
        outcomes,
        treat,
        cov,
    )
    .unwrap()
}

/// Difference in mean outcome changes computed straight from the raw paths.
fn once_oracle(panel: &Panel, t: usize) -> Option<f64> {
    let ever = |i: usize, upto: usize| (1..=upto).any(|k| panel.treatment(i, k)[0] != 0.0);
    let (mut m, mut s) = (Vec::new(), Vec::new());
    for i in 0..panel.n_units() {
        let dy = panel.outcome(i, t) - panel.outcome(i, 1);
        if ever(i, t) && !ever(i, 1) {
            m.push(dy);
        } else if !ever(i, t) {
            s.push(dy);
        }
    }
    if m.is_empty() || s.len() < 2 {
        return None;
    }
    Some(m.iter().sum::<f64>() / m.len() as f64 - s.iter().sum::<f64>() / s.len() as f64)
}

fn criterion_1_2(max_ratio: &mut f64) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(20..=50);
        let tt = rng.random_range(2..=5);
        let panel = random_panel(&mut rng, n, tt, false);
        let eff = compute_effective_treatment(&panel, &TreatmentSpec::once()).unwrap();
        for t in 2..=tt {
            let Some(oracle) = once_oracle(&panel, t) else { continue };
            let frame = build_cell_frame(&panel, &eff, Cell::new(t, 1, 1))
                .unwrap()
                .with_covariates(&CovariateSet::InterceptOnly)
                .unwrap();
            let (Ok(or), Ok(gps)) = (fit_or_stayers(&frame), fit_gps_logit(&frame)) else {
                continue;
            };
            let dr = atem_dr(&frame, &or, &gps).unwrap();
            let o = atem_or(&frame, &or).unwrap();
            let ipw = atem_ipw(&frame, &gps).unwrap();
            for v in [dr.point, o.point, ipw.point] {
                worst = worst.max((v - oracle).abs());
            }
            for e in [&dr, &o, &ipw] {
                *max_ratio = max_ratio.max(centering(&e.influence));
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && checked >= 100 && secs < 5.0,
        format!("{checked} cells, max |estimate - oracle| = {worst:.2e}, {secs:.2}s"),
    )
}

fn solve_normal_equations(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let k = x[0].len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (row, &yi) in x.iter().zip(y) {
        for p in 0..k {
            for q in 0..k {
                a[p][q] += row[p] * row[q];
            }
            a[p][k] += row[p] * yi;
        }
    }
    for c in 0..k {
        let piv = (c..k).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        for r in 0..k {
            if r != c {
                let f = a[r][c] / a[c][c];
                for j in c..=k {
                    a[r][j] -= f * a[c][j];
                }
            }
        }
    }
    (0..k).map(|c| a[c][k] / a[c][c]).collect()
}

fn logit_loglik(x: &[f64], y: &[bool], a: f64, b: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let eta = a + b * xi;
            let l = (1.0 + (-eta.abs()).exp()).ln() + eta.max(0.0);
            if yi {
                eta - l
            } else {
                -l
            }
        })
        .sum()
}

fn grid_oracle(x: &[f64], y: &[bool]) -> f64 {
    let (mut ca, mut cb, mut half) = (0.0, 0.0, 8.0);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..70 {
        let mut arg = (ca, cb);
        for i in 0..=24 {
            for j in 0..=24 {
                let a = ca - half + half * i as f64 / 12.0;
                let b = cb - half + half * j as f64 / 12.0;
                let ll = logit_loglik(x, y, a, b);
                if ll > best {
                    best = ll;
                    arg = (a, b);
                }
            }
        }
        (ca, cb) = arg;
        half *= 0.6;
    }
    best
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut ols_err, mut ll_gap) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = rng.random_range(150..400);
        let xs: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(0.0..5.0)]).collect();
        let mover: Vec<bool> = xs
            .iter()
            .map(|x| rng.random::<f64>() < 1.0 / (1.0 + (-(0.2 + 0.7 * x[0] - 0.1 * x[1])).exp()))
            .collect();
        let stayer: Vec<bool> = mover.iter().map(|m| !m).collect();
        let dy: Vec<f64> = xs.iter().map(|x| 1.0 - x[0] + 0.5 * x[1] + rng.random_range(-1.0..1.0)).collect();
        let mut data = Vec::new();
        for x in &xs {
            data.extend([1.0, x[0], x[1]]);
        }
        let frame = MoverStayerFrame {
            cell: Cell::new(2, 1, 1),
            mover: mover.clone(),
            stayer: stayer.clone(),
            delta_y: dy.clone(),
            design: Matrix::from_vec(n, 3, data),
        };
        let or = fit_or_stayers(&frame).unwrap();
        let xs_s: Vec<Vec<f64>> = (0..n).filter(|&i| stayer[i]).map(|i| vec![1.0, xs[i][0], xs[i][1]]).collect();
        let ys: Vec<f64> = (0..n).filter(|&i| stayer[i]).map(|i| dy[i]).collect();
        let oracle = solve_normal_equations(&xs_s, &ys);
        for (a, b) in or.gamma.iter().zip(&oracle) {
            ols_err = ols_err.max((a - b).abs());
        }
        // Logit on one covariate so the oracle searches a plane.
        let gps_frame = frame.with_covariates(&CovariateSet::Columns(vec![0])).unwrap();
        let gps = fit_gps_logit(&gps_frame).unwrap();
        let x0: Vec<f64> = xs.iter().map(|x| x[0]).collect();
        let gap = (gps.log_likelihood - grid_oracle(&x0, &mover)).abs();
        ll_gap = ll_gap.max(gap);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        ols_err <= 1e-8 && ll_gap <= 1e-6 && secs < 30.0,
        format!("max OLS coefficient error {ols_err:.2e}, max log-likelihood gap {ll_gap:.2e}, {secs:.2}s"),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut violations = 0usize;
    for path_id in 0..1000 {
        let tt = rng.random_range(2..=8);
        let continuous = path_id % 2 == 1;
        let dim = if path_id % 5 == 0 { 2 } else { 1 };
        let path: Vec<Vec<f64>> = (0..tt)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        if rng.random::<f64>() < 0.6 {
                            0.0
                        } else if continuous {
                            rng.random_range(-3.0..3.0)
                        } else {
                            rng.random_range(1..4) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let panel = Panel::from_rows(
            vec!["a".into()],
            (1..=tt).map(|t| t.to_string()).collect(),
            vec![vec![0.0; tt]],
            vec![path],
            vec![vec![]],
        )
        .unwrap();
        let code = |spec: TreatmentSpec| {
            let eff = compute_effective_treatment(&panel, &spec).unwrap();
            (1..=tt).map(|t| eff.value(0, t)).collect::<Vec<i64>>()
        };
        let once = code(TreatmentSpec::once());
        let event = code(TreatmentSpec::event());
        let number = code(TreatmentSpec::number());
        for t in 0..tt {
            let o = once[t] != 0;
            if o != (event[t] != 0) || o != (number[t] != 0) || once[t] > 1 {
                violations += 1;
            }
            for c in [&once, &event, &number] {
                if t > 0 && c[t] == 0 && c[t - 1] != 0 {
                    violations += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(violations == 0 && secs < 5.0, format!("{violations} violations over 1000 paths, {secs:.2}s"))
}

fn mc(n: usize, reps: usize, seed: u64, design: &MonteCarloDesign, tweak: impl FnOnce(&mut SimConfig)) -> SimTable {
    let mut cfg = SimConfig::new(n, 4);
    cfg.reps = reps;
    cfg.seed = seed;
    tweak(&mut cfg);
    run_monte_carlo(&cfg, design).expect("Monte Carlo run")
}

fn once_rows(table: &SimTable) -> Vec<&SimRow> {
    (2..=4)
        .map(|t| table.row(EstimandKind::Dr, Cell::new(t, 1, 1)).unwrap())
        .collect()
}

fn criterion_5(table: &SimTable, secs: f64) -> Outcome {
    let reference_bias = [-0.002, -0.002, -0.001];
    let reference_rmse = [0.173, 0.191, 0.219];
    let reference_cil = [0.798, 0.878, 0.989];
    let rows = once_rows(table);
    let mut pass = table.metadata.flagged.is_empty();
    let mut detail = String::new();
    for (j, r) in rows.iter().enumerate() {
        pass &= (r.bias - reference_bias[j]).abs() <= 0.02;
        pass &= (r.rmse - reference_rmse[j]).abs() <= 0.03;
        pass &= (r.ci_l - reference_cil[j]).abs() <= 0.08;
        detail.push_str(&format!(
            "t={}: bias {:+.4} rmse {:.4} pw_cp {:.3} ci_l {:.3}; ",
            r.t, r.bias, r.rmse, r.pw_cp, r.ci_l
        ));
    }
    let u_cp = rows[0].u_cp;
    pass &= (0.90..=0.96).contains(&u_cp);
    detail.push_str(&format!("u_cp {u_cp:.3}; {} reps in {secs:.1}s", table.metadata.reps_ok));
    outcome(pass, detail)
}

fn criterion_6(small: &SimTable, mid: &SimTable, large: &SimTable) -> Outcome {
    let mut pass = true;
    let mut detail = String::new();
    for t in 2..=4 {
        let c = Cell::new(t, 1, 1);
        let r = |tab: &SimTable| tab.row(EstimandKind::Dr, c).unwrap().rmse;
        let (a, b) = (r(small) / r(mid), r(mid) / r(large));
        pass &= (1.7..=2.3).contains(&a) && (1.7..=2.3).contains(&b);
        detail.push_str(&format!("t={t}: 250/1000 {a:.2}, 1000/4000 {b:.2}; "));
    }
    outcome(pass, detail.trim_end_matches("; ").to_string())
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let design = MonteCarloDesign {
        include_pretrends: true,
        ..MonteCarloDesign::new(BuiltinKind::Event)
    };
    let table = mc(1000, 500, 7, &design, |_| {});
    let pre: Vec<&SimRow> = table.rows.iter().filter(|r| r.r.is_some()).collect();
    let worst_mean = pre.iter().map(|r| r.mean_estimate.abs()).fold(0.0, f64::max);
    let coverage = 1.0 - table.metadata.pretrend_flag_rate.unwrap();

    let drift = mc(4000, 100, 70, &design, |c| c.parallel_trends_violation = Some(1.0));
    let flag_rate = drift.metadata.pretrend_flag_rate.unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_mean <= 0.02 && coverage >= 0.90 && flag_rate >= 0.90,
        format!(
            "{} pre-trend cells, max |mean| {worst_mean:.4}, joint coverage of 0 {coverage:.3}; drift flag rate {flag_rate:.2}; {secs:.1}s",
            pre.len()
        ),
    )
}

fn criterion_8(default_large: &SimTable) -> Outcome {
    let start = Instant::now();
    let design = MonteCarloDesign {
        cells: Some(vec![Cell::new(2, 1, 2), Cell::new(3, 2, 3), Cell::new(4, 3, 4)]),
        estimators: vec![EstimandKind::Dr, EstimandKind::Or],
        nuisance: Options {
            or_covariates: CovariateSet::InterceptOnly,
            ..Options::default()
        },
        ..MonteCarloDesign::new(BuiltinKind::Event)
    };
    let table = mc(4000, 250, 8, &design, |c| {
        c.error_laws = ErrorLaws {
            u: Law::StandardLogistic,
            alpha: Law::Zero,
            ..ErrorLaws::default()
        }
    });
    let mut pass = true;
    let mut detail = String::new();
    for c in design.cells.as_ref().unwrap() {
        let dr = table.row(EstimandKind::Dr, *c).unwrap().bias;
        let or = table.row(EstimandKind::Or, *c).unwrap().bias;
        pass &= dr.abs() <= 0.03 && or.abs() > 0.05;
        detail.push_str(&format!("{c}: DR {dr:+.4} OR {or:+.4}; "));
    }
    let sym = once_rows(default_large).iter().map(|r| r.bias.abs()).fold(0.0, f64::max);
    pass &= sym <= 0.03;
    detail.push_str(&format!(
        "GPS misspecified, OR correct: max |DR bias| {sym:.4}; {:.1}s",
        start.elapsed().as_secs_f64()
    ));
    outcome(pass, detail)
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SimConfig::new(600, 4);
    cfg.seed = 9;
    let draw = generate_dgp(&cfg, &mut effdid::rng::substream(9, 0));
    let input = dir.path().join("panel.csv");
    write_panel_csv(&draw.panel, std::fs::File::create(&input).unwrap()).unwrap();
    let run = |threads: &str| {
        let out = dir.path().join(format!("out{threads}"));
        let status = Command::new(env!("CARGO_BIN_EXE_effdid"))
            .args(["estimate", "--covariates", "x", "--spec", "event", "--pretrends", "--seed", "123"])
            .args(["--threads", threads, "--bootstrap", "499", "--plot"])
            .arg("--input")
            .arg(&input)
            .arg("--out-dir")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        ["estimates.csv", "estimates.json", "plot.svg"].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    let a = run("1");
    let b = run("4");
    let same = a == b;
    outcome(same, format!("estimates.csv, estimates.json, plot.svg identical across --threads 1/4: {same}"))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let opts = intercept_only();
    let (mut worst, mut compared, mut info_gap) = (0.0f64, 0usize, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(80..200);
        let tt = rng.random_range(3..=5);
        let panel = random_panel(&mut rng, n, tt, true);
        let eff_o = compute_effective_treatment(&panel, &TreatmentSpec::once()).unwrap();
        let eff_e = compute_effective_treatment(&panel, &TreatmentSpec::event()).unwrap();
        let eff_n = compute_effective_treatment(&panel, &TreatmentSpec::number()).unwrap();
        for t in 2..=tt {
            let Ok(once) = estimate_cell(&panel, &eff_o, Cell::new(t, 1, 1), EstimandKind::Dr, &opts) else {
                continue;
            };
            let collect = |eff, cells: Vec<Cell>| {
                cells
                    .into_iter()
                    .filter_map(|c| estimate_cell(&panel, eff, c, EstimandKind::Dr, &opts).ok())
                    .collect::<Vec<_>>()
            };
            let event = collect(&eff_e, (2..=t).map(|e| Cell::new(t, 1, e as i64)).collect());
            let number = collect(&eff_n, (1..t).map(|e| Cell::new(t, 1, e as i64)).collect());
            let event_agg = effdid::aggregate_weighted_by_movers(AggregateKind::EventWeighted { t }, &event).unwrap();
            let number_agg =
                effdid::aggregate_weighted_by_movers(AggregateKind::NumberWeighted { t }, &number).unwrap();
            worst = worst.max((event_agg.point - once.point).abs());
            worst = worst.max((number_agg.point - once.point).abs());
            compared += 1;

            // Adjacent-baseline event cells: reported only.
            let adjacent = collect(&eff_e, (2..=t).map(|e| Cell::new(t, e - 1, e as i64)).collect());
            if !adjacent.is_empty() {
                let counts: Vec<usize> = adjacent.iter().map(|e| e.n_movers).collect();
                let agg = aggregate_weighted(AggregateKind::EventWeighted { t }, &adjacent, &counts).unwrap();
                info_gap = info_gap.max((agg.point - once.point).abs());
            }
        }
    }
    outcome(
        worst <= 1e-10 && compared >= 50,
        format!(
            "{compared} (panel, t) pairs, max |aggregate - once| = {worst:.2e}; adjacent-baseline event form differs by up to {info_gap:.3} (informational)"
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters probe the binary; run the suite only on a plain invocation.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut ratio = 0.0f64;
    results.push((1, "no-covariate equivalence", criterion_1_2(&mut ratio)));
    let ratio_c1 = ratio;
    results.push((3, "nuisance oracles", criterion_3()));
    results.push((4, "coarseness and monotonicity", criterion_4()));

    let once = MonteCarloDesign::new(BuiltinKind::Once);
    let start = Instant::now();
    let mid = mc(1000, 1000, 5, &once, |_| {});
    let secs = start.elapsed().as_secs_f64();
    let ratio_c2 = ratio_c1.max(mid.metadata.max_centering_ratio);
    results.push((
        2,
        "influence centering",
        outcome(
            ratio_c2 <= 1e-8,
            format!("max |mean psi| / sd psi = {ratio_c2:.2e} (criterion-1 cells {ratio_c1:.2e})"),
        ),
    ));
    results.push((5, "desk-scale once table", criterion_5(&mid, secs)));
    let small = mc(250, 1000, 6, &once, |_| {});
    let large = mc(4000, 250, 60, &once, |_| {});
    results.push((6, "root-N rate", criterion_6(&small, &mid, &large)));
    results.push((7, "pre-trends", criterion_7()));
    results.push((8, "double robustness", criterion_8(&large)));
    results.push((9, "bootstrap determinism", criterion_9()));
    results.push((10, "aggregation identity", criterion_10()));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (k, name, o) in &results {
        println!(
            "criterion {k:>2} [{}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
