//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use hishrink::bcd::{bcd_fit, huber_objective, objective, s_step, BcdConfig, OracleSpec, UserIndex};
use hishrink::gbt::{gbt_fit, gbt_predict, GbtParams};
use hishrink::shrinkage::{model1_from_groups, simulate_sequence_risk, variance_components_from_groups};
use hishrink::simulate::{simulate, SimConfig, SimData};
use hishrink::solvers::{lasso_kkt_residual, lasso_objective, lasso_solve, precompute_gram, LassoOptions};
use hishrink::tuning::{fit_family, grid_search, mae, Grid, ModelData, SearchOptions};
use hishrink::{Family, ModelFile};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let mut out = f();
    let elapsed = t0.elapsed();
    if let Some(b) = budget {
        if elapsed > b {
            out.pass = false;
            out.detail.push_str(&format!("; over budget {b:?}"));
        }
    }
    println!(
        "[{}] {id:>2} {name}: {} ({:.2}s)",
        if out.pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64()
    );
    out.pass
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Instance {
    x: DMatrix<f64>,
    y: Vec<f64>,
    users: UserIndex,
}

fn instance(rng: &mut ChaCha8Rng, max_users: usize, max_sessions: usize, max_d: usize) -> Instance {
    let n_users = rng.random_range(2..=max_users);
    let d = rng.random_range(1..=max_d);
    let mut ids = Vec::new();
    for u in 0..n_users {
        for _ in 0..rng.random_range(1..=max_sessions) {
            ids.push(format!("u{u}"));
        }
    }
    let n = ids.len();
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let effects: Vec<f64> = (0..n_users).map(|_| rng.random_range(-1.0..1.0)).collect();
    let users = UserIndex::from_rows(&ids);
    let y = (0..n)
        .map(|i| {
            let lin: f64 = (0..d).map(|j| 0.5 * x[(i, j)]).sum();
            let spike = if rng.random_bool(0.1) {
                rng.random_range(-5.0..5.0)
            } else {
                0.0
            };
            lin + effects[users.row_user()[i]] + rng.random_range(-1.0..1.0) + spike
        })
        .collect();
    Instance { x, y, users }
}

fn c1_sequence_risk() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in [11, 12, 13] {
        let r = simulate_sequence_risk(100, 1.0, 20_000, seed).expect("risk simulation");
        let gap = r.relative_eb_gap();
        pass &= r.eb < r.ml && (0.01..=0.04).contains(&gap);
        lines.push(format!(
            "seed {seed}: ML={:.2} EB={:.2} Bayes={:.2} gap={gap:.4}",
            r.ml, r.eb, r.bayes
        ));
    }
    outcome(pass, format!("{} (target gap 0.02)", lines.join("; ")))
}

fn c2_huber_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_gap = 0.0f64;
    let mut worst_perturb = f64::INFINITY;
    for _ in 0..100 {
        let inst = instance(&mut rng, 20, 5, 4);
        let n = inst.y.len();
        let delta = (rng.random_range(0.1f64.ln()..10f64.ln())).exp();
        let lambda = rng.random_range(0.1..5.0);
        let omega = rng.random_range(0.0..2.0);
        let f: Vec<f64> = (0..n).map(|i| 0.3 * inst.x[(i, 0)]).collect();
        let mu: Vec<f64> = (0..inst.users.n_users()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..n).map(|i| inst.y[i] - f[i]).collect();
        let s = s_step(&r, &mu, &inst.users, delta);
        let joint = objective(&inst.y, &inst.users, &f, &mu, &s, lambda, delta, omega);
        let huber = huber_objective(&inst.y, &inst.users, &f, &mu, lambda, delta, omega);
        worst_gap = worst_gap.max((joint - huber).abs());
        for _ in 0..10 {
            let moved: Vec<f64> = s.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            let other = objective(&inst.y, &inst.users, &f, &mu, &moved, lambda, delta, omega);
            worst_perturb = worst_perturb.min(other - joint);
        }
    }
    outcome(
        worst_gap <= 1e-10 && worst_perturb >= -1e-10,
        format!("max |min_s L - Huber| = {worst_gap:.2e}; min perturbation gain = {worst_perturb:.2e}"),
    )
}

fn augmented_objective(inst: &Instance, alpha: f64, lambda: f64) -> f64 {
    let (n, d, m) = (inst.y.len(), inst.x.ncols(), inst.users.n_users());
    let mut a = DMatrix::zeros(n, d + m);
    a.view_mut((0, 0), (n, d)).copy_from(&inst.x);
    for (i, &u) in inst.users.row_user().iter().enumerate() {
        a[(i, d + u)] = 1.0;
    }
    let mut h = a.tr_mul(&a);
    for j in 0..d + m {
        h[(j, j)] += if j < d { alpha } else { lambda };
    }
    let g = h
        .lu()
        .solve(&a.tr_mul(&DVector::from_column_slice(&inst.y)))
        .expect("augmented system is positive definite");
    let resid = DVector::from_column_slice(&inst.y) - &a * &g;
    let beta = g.rows(0, d);
    let mu = g.rows(d, m);
    resid.norm_squared() + alpha * beta.norm_squared() + lambda * mu.norm_squared()
}

fn c3_joint_minimizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut sizes = 0;
    for _ in 0..20 {
        let inst = instance(&mut rng, 50, 5, 10);
        sizes = sizes.max(inst.x.ncols() + inst.users.n_users());
        let alpha = rng.random_range(0.05..5.0);
        let lambda = rng.random_range(0.05..5.0);
        let cfg = BcdConfig {
            epsilon: 1e-12,
            max_iters: 100_000,
            ..BcdConfig::new(lambda, f64::INFINITY)
        };
        let fit = bcd_fit(&inst.x, &inst.y, &inst.users, OracleSpec::Ridge { alpha }, &cfg).expect("ridge bcd");
        let exact = augmented_objective(&inst, alpha, lambda);
        let got = *fit.objective_trace.last().expect("non-empty trace");
        worst = worst.max((got - exact) / exact);
    }
    outcome(
        worst <= 1e-6,
        format!("worst relative objective gap {worst:.2e} (max d+N = {sizes})"),
    )
}

/// Cyclic coordinate descent on `βᵀQβ − 2⟨c, β⟩ + α‖β‖₁`.
fn coordinate_descent(q: &DMatrix<f64>, c: &DVector<f64>, alpha: f64) -> DVector<f64> {
    let d = c.len();
    let mut beta = DVector::<f64>::zeros(d);
    for _ in 0..100_000 {
        let mut moved = 0.0f64;
        for j in 0..d {
            let partial = c[j] - (0..d).filter(|&k| k != j).map(|k| q[(j, k)] * beta[k]).sum::<f64>();
            let next = partial.signum() * (partial.abs() - alpha / 2.0).max(0.0) / q[(j, j)];
            moved = moved.max((next - beta[j]).abs());
            beta[j] = next;
        }
        if moved < 1e-15 {
            break;
        }
    }
    beta
}

fn c4_lasso_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = DMatrix::from_fn(60, 8, |_, _| rng.random_range(-1.0..1.0));
    let truth = DVector::from_vec(vec![1.5, 0.0, -2.0, 0.0, 0.0, 0.7, 0.0, 0.3]);
    let y = &x * &truth + DVector::from_fn(60, |_, _| rng.random_range(-0.5..0.5));
    let gf = precompute_gram(&x).expect("gram");
    let c = x.tr_mul(&y);
    let top = 2.0 * c.amax();
    let mut warm: Option<DVector<f64>> = None;
    let (mut worst_gap, mut worst_kkt) = (0.0f64, 0.0f64);
    for k in 0..10 {
        let alpha = top * 0.5f64.powi(k + 1);
        let fit = lasso_solve(&gf, &c, alpha, warm.as_ref(), &LassoOptions::default()).expect("lasso");
        let reference = coordinate_descent(&gf.gram, &c, alpha);
        let ours = lasso_objective(&gf, &c, alpha, &fit.beta);
        let theirs = lasso_objective(&gf, &c, alpha, &reference);
        worst_gap = worst_gap.max((ours - theirs).abs() / theirs.abs().max(1e-300));
        worst_kkt = worst_kkt.max(lasso_kkt_residual(&gf, &c, alpha, &fit.beta));
        warm = Some(fit.beta);
    }
    outcome(
        worst_gap <= 1e-6 && worst_kkt <= 1e-6,
        format!("worst relative objective gap {worst_gap:.2e}; worst KKT residual {worst_kkt:.2e}"),
    )
}

fn c5_monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();
    let mut fits = 0;
    for i in 0..50 {
        let inst = instance(&mut rng, 20, 6, 4);
        let lambda = rng.random_range(0.1..5.0);
        let delta = if i % 2 == 0 {
            f64::INFINITY
        } else {
            rng.random_range(0.1..3.0)
        };
        for oracle in [
            OracleSpec::None,
            OracleSpec::Ridge {
                alpha: rng.random_range(0.01..3.0),
            },
            OracleSpec::Lasso {
                alpha: rng.random_range(0.01..3.0),
            },
        ] {
            fits += 1;
            let cfg = BcdConfig::new(lambda, delta);
            let fit = match bcd_fit(&inst.x, &inst.y, &inst.users, oracle, &cfg) {
                Ok(f) => f,
                Err(e) => {
                    failures.push(format!("instance {i}: {e}"));
                    continue;
                }
            };
            let t = &fit.objective_trace;
            if t.windows(2).any(|w| w[1] > w[0]) {
                failures.push(format!("instance {i}: objective rose"));
            }
            let rel = |k: usize| (t[k - 1] - t[k]).abs() / t[k - 1];
            let fired = t.len() >= 2 && rel(t.len() - 1) <= cfg.epsilon;
            let early = (1..t.len().saturating_sub(1)).any(|k| rel(k) <= cfg.epsilon);
            if fit.converged != fired || early || fit.iterations != t.len() {
                failures.push(format!("instance {i}: stopping rule"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{fits} fits, {} violations {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn c6_shrinkage_efficacy() -> Outcome {
    let mut wins = 0;
    let mut sums = [[0.0f64; 2]; 5];
    let mut counts = [0usize; 5];
    for seed in 0..20 {
        let data = simulate(&SimConfig {
            n_users: 2000,
            min_sessions: 2,
            max_sessions: 6,
            sigma0: 1.0,
            sigma1: 1.0,
            seed: 600 + seed,
            ..SimConfig::default()
        })
        .expect("simulate");
        let (train, test) = data.holdout_last(1);
        let (ids, groups) = train.groups();
        let vc = variance_components_from_groups(&groups).expect("variance components");
        let fit = model1_from_groups(&ids, &groups, &vc).expect("model 1");
        let (mut se_ml, mut se_m1) = (0.0, 0.0);
        for (id, g) in ids.iter().zip(&groups) {
            let target = test.y[test.user_ids.iter().position(|u| u == id).expect("held-out row")];
            let ml = g.iter().sum::<f64>() / g.len() as f64;
            let m1 = fit.predict(id).expect("known user");
            let (a, b) = ((ml - target).powi(2), (m1 - target).powi(2));
            se_ml += a;
            se_m1 += b;
            sums[g.len() - 1][0] += a;
            sums[g.len() - 1][1] += b;
            counts[g.len() - 1] += 1;
        }
        if se_m1 < se_ml {
            wins += 1;
        }
    }
    let gains: Vec<f64> = sums.iter().map(|[ml, m1]| 1.0 - m1 / ml).collect();
    let largest_first = gains.iter().skip(1).all(|&g| g < gains[0]);
    let rendered: Vec<String> = gains
        .iter()
        .zip(counts)
        .enumerate()
        .map(|(k, (g, c))| format!("n={}:{g:.3}(users {c})", k + 1))
        .collect();
    outcome(
        wins >= 19 && largest_first,
        format!(
            "Model 1 beats per-user mean in {wins}/20; relative MSE gain by n_i {}",
            rendered.join(" ")
        ),
    )
}

fn model_data(d: &SimData) -> ModelData {
    ModelData::from_log(
        d.x.clone(),
        d.y.iter().map(|v| v + 600f64.ln()).collect(),
        d.user_ids.clone(),
    )
    .expect("model data")
}

fn tuned_test_mae(family: Family, train: &ModelData, valid: &ModelData, test: &ModelData) -> f64 {
    let grid = Grid::default_for(family, train).expect("default grid");
    let best = grid_search(family, &grid, train, valid, &SearchOptions::default())
        .expect("grid search")
        .best;
    let both = train.concat(valid).expect("stack");
    let model = fit_family(family, &best, &both, &BcdConfig::default()).expect("refit");
    mae(&model.predict_all(test, None).expect("predict"), &test.raw).expect("mae")
}

fn c7_robustness() -> Outcome {
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..20 {
        let data = simulate(&SimConfig {
            n_users: 300,
            min_sessions: 5,
            max_sessions: 12,
            sigma0: 1.0,
            sigma1: 1.0,
            beta: vec![0.5, -0.3, 0.2],
            corruption_rate: 0.05,
            corruption_scale: 5.0,
            seed: 700 + seed,
        })
        .expect("simulate");
        let (train, rest) = data.holdout_last(2);
        let (valid, mut test) = rest.holdout_last(1);
        // corruption lives in the fitting data; test targets are clean
        for (y, &c) in test.y.iter_mut().zip(&test.corrupted) {
            if c {
                *y -= 5.0;
            }
        }
        let (train, valid, test) = (model_data(&train), model_data(&valid), model_data(&test));
        let m2 = tuned_test_mae(Family::Model2L2, &train, &valid, &test);
        let m3 = tuned_test_mae(Family::Model3L2, &train, &valid, &test);
        ratios.push(m3 / m2);
        if m3 <= m2 {
            wins += 1;
        }
    }
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    outcome(
        wins >= 18,
        format!("Model3-L2 MAE <= Model2-L2 MAE in {wins}/20; mean MAE ratio {mean_ratio:.3}"),
    )
}

fn c8_variance_components() -> Outcome {
    let mut hits = 0;
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let data = simulate(&SimConfig {
            n_users: 10_000,
            min_sessions: 5,
            max_sessions: 5,
            sigma0: 1.0,
            sigma1: 1.0,
            seed: 800 + seed,
            ..SimConfig::default()
        })
        .expect("simulate");
        let vc = variance_components_from_groups(&data.groups().1).expect("variance components");
        let (e0, e1) = ((vc.sigma0_sq - 1.0).abs(), (vc.sigma1_sq - 1.0).abs());
        worst = (worst.0.max(e0), worst.1.max(e1));
        if e0 <= 0.05 && e1 <= 0.05 {
            hits += 1;
        }
    }
    outcome(
        hits >= 19,
        format!(
            "both within 5% in {hits}/20; worst errors sigma0^2 {:.4}, sigma1^2 {:.4}",
            worst.0, worst.1
        ),
    )
}

fn c9_end_to_end() -> Outcome {
    let events = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/toy_events.tsv");
    let dir = tempfile::tempdir().expect("tempdir");
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "sessionize".into(),
            "--input".into(),
            events.to_string_lossy().into_owned(),
            "--out".into(),
            p("sessions.csv"),
        ],
        vec![
            "split".into(),
            "--input".into(),
            p("sessions.csv"),
            "--out".into(),
            p("split"),
        ],
        vec![
            "features".into(),
            "--split".into(),
            p("split"),
            "--out".into(),
            p("features"),
        ],
        vec![
            "fit".into(),
            "--split".into(),
            p("split"),
            "--family".into(),
            "model3-l2".into(),
            "--out".into(),
            p("model.json"),
        ],
        vec![
            "evaluate".into(),
            "--model".into(),
            p("model.json"),
            "--split".into(),
            p("split"),
            "--out".into(),
            p("eval"),
        ],
        vec![
            "evaluate".into(),
            "--family".into(),
            "baseline".into(),
            "--split".into(),
            p("split"),
            "--out".into(),
            p("eval_baseline"),
        ],
    ];
    for step in &steps {
        let code = hishrink_cli::run(std::iter::once("hishrink".to_owned()).chain(step.iter().cloned()));
        if code != 0 {
            return outcome(false, format!("`{}` exited with {code}", step[0]));
        }
    }
    let read = |name: &str| std::fs::read_to_string(dir.path().join(name)).unwrap_or_default();
    let model_ok = ModelFile::load(dir.path().join("model.json")).is_ok_and(|m| m.family == Family::Model3L2);
    let report = read("eval/report.txt");
    let baseline_one = read("eval_baseline/report.txt").contains("normalized MAE    1.000");
    let line = report
        .lines()
        .find(|l| l.starts_with("normalized MAE"))
        .unwrap_or("")
        .trim()
        .to_owned();
    outcome(
        model_ok && baseline_one && !line.is_empty(),
        format!("model3-l2 {line}; baseline normalized MAE 1.000: {baseline_one}"),
    )
}

fn c10_gbt() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut rises = 0;
    let mut fixtures = 0;
    let mut depth0_exact = true;
    for _ in 0..30 {
        let n = rng.random_range(5..200);
        let d = rng.random_range(1..5);
        let x = DMatrix::<f64>::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0));
        let z: Vec<f64> = (0..n)
            .map(|i| x[(i, 0)].sin() * 3.0 + rng.random_range(-1.0..1.0))
            .collect();
        for params in [
            GbtParams::new(30, 3, 0.1),
            GbtParams::new(20, 6, 0.5),
            GbtParams::new(10, 1, 1.0),
            GbtParams {
                min_samples_leaf: 5,
                ..GbtParams::new(25, 4, 0.05)
            },
        ] {
            fixtures += 1;
            let fit = gbt_fit(&x, &z, &params).expect("gbt");
            rises += fit.sse_trace.windows(2).filter(|w| w[1] > w[0]).count();
        }
        let stump = gbt_fit(&x, &z, &GbtParams::new(20, 0, 0.3)).expect("depth-0 gbt");
        let mean = z.iter().sum::<f64>() / n as f64;
        depth0_exact &= gbt_predict(&stump.model, &x)
            .expect("predict")
            .iter()
            .all(|&p| p == mean);
    }
    outcome(
        rises == 0 && depth0_exact,
        format!("{fixtures} fits, {rises} SSE rises; depth-0 equals mean exactly: {depth0_exact}"),
    )
}

fn main() {
    let results = [
        check(
            1,
            "James-Stein risk gap",
            Some(Duration::from_secs(10)),
            c1_sequence_risk,
        ),
        check(
            2,
            "Huber equivalence",
            Some(Duration::from_secs(5)),
            c2_huber_equivalence,
        ),
        check(
            3,
            "joint-minimizer oracle",
            Some(Duration::from_secs(5)),
            c3_joint_minimizer,
        ),
        check(
            4,
            "lasso vs coordinate descent",
            Some(Duration::from_secs(5)),
            c4_lasso_oracle,
        ),
        check(5, "BCD monotonicity and stopping", None, c5_monotone),
        check(6, "shrinkage efficacy", None, c6_shrinkage_efficacy),
        check(7, "robustness efficacy", None, c7_robustness),
        check(8, "variance-component consistency", None, c8_variance_components),
        check(
            9,
            "end-to-end toy pipeline",
            Some(Duration::from_secs(30)),
            c9_end_to_end,
        ),
        check(10, "GBT sanity", None, c10_gbt),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance criteria: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
