//! Acceptance checks. Prints one `PASS`/`FAIL` line per criterion.
//!
//! Criteria that need the real case-study inputs read them from the
//! environment:
//!
//! * `PARE_CASE_STUDY_REGIONS`: region polygons (GeoJSON, lon/lat) for the
//!   Hausdorff distance check.
//! * `PARE_CASE_STUDY_CONFIG`: analysis config (TOML) for the case-study
//!   consistency check.
//!
//! Without them those criteria print `FAIL ... (blocked: ...)` and do not
//! affect the exit status. Any evaluable failure makes the process exit 1.
//! `PARE_SIM_ITERATIONS` overrides the simulation iteration count (default 50).

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use pare_cli::config::{AnalysisConfig, Window};
use pare_cli::{run_window, Study};
use pare_core::extremes::{decluster_values, return_level, return_level_tenths, GpdParams, DAYS_PER_YEAR};
use pare_core::geometry::{extended_hausdorff, extended_hausdorff_points, region_distance_matrix, Point, Polygon, Region, RegionSet};
use pare_core::kriging::{ordinary_krige, OrdinaryKriging, VariogramKind, VariogramModel};
use pare_core::pare::{car_profile_loglik, fit_pare, CarModel, PareInputs};
use pare_core::simulation::{run_simulation, Parameter, SimulationConfig, SimulationSetup};
use pare_core::Method;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

use Outcome::*;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------- 1

fn simulation_study() -> Outcome {
    let iterations = std::env::var("PARE_SIM_ITERATIONS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(50);
    let cfg = SimulationConfig {
        n_iterations: iterations,
        ..SimulationConfig::default()
    };
    let setup = match SimulationSetup::synthetic(&cfg) {
        Ok(s) => s,
        Err(e) => return Fail(format!("setup: {e}")),
    };
    let report = match run_simulation(&setup, &cfg) {
        Ok(r) => r,
        Err(e) => return Fail(format!("simulation: {e}")),
    };
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    for id in &report.region_ids {
        let rmse = |m: Method, p: Parameter| report.cell(m, id, p).map(|c| c.rmse).unwrap_or(f64::NAN);
        let pare_scale = rmse(Method::Pare, Parameter::Scale);
        let pare_shape = rmse(Method::Pare, Parameter::Shape);
        let krig_scale = rmse(Method::BlockKriging, Parameter::Scale);
        let krig_shape = rmse(Method::BlockKriging, Parameter::Shape);
        let rm_shape = rmse(Method::RegionalMax, Parameter::Shape);
        summary.push(format!(
            "r{id}: pare σ {pare_scale:.3} ξ {pare_shape:.4}, kriging σ {krig_scale:.3} ξ {krig_shape:.4}, regional max ξ {rm_shape:.4}"
        ));
        if !(0.002..=0.012).contains(&pare_shape) {
            problems.push(format!("region {id} PARE shape RMSE {pare_shape:.4}"));
        }
        if !(0.5..=3.0).contains(&pare_scale) {
            problems.push(format!("region {id} PARE scale RMSE {pare_scale:.3}"));
        }
        if !(krig_scale <= 3.0 * pare_scale && krig_shape <= 3.0 * pare_shape) {
            problems.push(format!("region {id} kriging RMSE above 3x PARE"));
        }
        if !(rm_shape >= 10.0 * pare_shape) {
            problems.push(format!("region {id} regional-max shape RMSE below 10x PARE"));
        }
    }
    let head = format!(
        "{} of {iterations} iterations; {}",
        report.n_succeeded(),
        summary.join("; ")
    );
    if problems.is_empty() {
        Pass(head)
    } else {
        Fail(format!("{head}; {}", problems.join(", ")))
    }
}

// ---------------------------------------------------------------- 2

/// Level `x` with `ζ·P(X > x | X > u) = 1/(N·days)`, by bisection on the
/// survival function alone.
fn inverted_level(p: &GpdParams, period: f64) -> f64 {
    let target = 1.0 / (period * DAYS_PER_YEAR * p.rate);
    let survival = |x: f64| {
        let y = (x - p.threshold) / p.scale;
        if p.shape == 0.0 {
            (-y).exp()
        } else {
            let t = 1.0 + p.shape * y;
            if t <= 0.0 {
                0.0
            } else {
                t.powf(-1.0 / p.shape)
            }
        }
    };
    let mut lo = p.threshold;
    let mut hi = p.threshold + p.scale;
    while survival(hi) > target {
        hi = p.threshold + 2.0 * (hi - p.threshold);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if survival(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn return_level_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = Vec::with_capacity(1000);
    while cases.len() < 1000 {
        let p = GpdParams {
            threshold: rng.gen_range(50.0..500.0),
            scale: rng.gen_range(20.0..600.0),
            shape: rng.gen_range(-0.5..1.0),
            rate: rng.gen_range(0.001..0.3),
        };
        let period: f64 = rng.gen_range(1.0..1000.0);
        if period * DAYS_PER_YEAR * p.rate > 1.0 {
            cases.push((p, period));
        }
    }
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for (p, period) in &cases {
        let level = match return_level_tenths(p, *period, DAYS_PER_YEAR) {
            Ok((l, _)) => l,
            Err(e) => return Fail(format!("formula error: {e}")),
        };
        worst = worst.max(rel_err(level, inverted_level(p, *period)));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    check(
        worst <= 1e-8 && elapsed < 1.0,
        format!("1000 cases, max relative error {worst:.2e}, {elapsed:.3} s"),
    )
}

// ---------------------------------------------------------------- 3

fn table_cross_check() -> Outcome {
    let p = GpdParams {
        threshold: 254.0,
        scale: 215.08,
        shape: 0.20,
        rate: 0.06,
    };
    let cov = nalgebra::Matrix3::zeros();
    let (l100, l500) = match (
        return_level(&p, &cov, 100.0, DAYS_PER_YEAR),
        return_level(&p, &cov, 500.0, DAYS_PER_YEAR),
    ) {
        (Ok(a), Ok(b)) => (a.level, b.level),
        (Err(e), _) | (_, Err(e)) => return Fail(e.to_string()),
    };
    check(
        (l100 - 16.48).abs() <= 0.15 && (l500 - 24.13).abs() <= 0.30,
        format!("100-yr {l100:.3} in, 500-yr {l500:.3} in"),
    )
}

// ---------------------------------------------------------------- 4

fn kriging_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_value: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(3..40);
        let points: Vec<Point> = (0..n)
            .map(|_| Point::new(rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0)))
            .collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(100.0..400.0)).collect();
        let kind = [VariogramKind::Exponential, VariogramKind::Spherical, VariogramKind::Gaussian]
            [rng.gen_range(0..3)];
        let partial_sill = rng.gen_range(0.5..5.0);
        // the Gaussian model needs a nugget to stay well conditioned
        let nugget = if kind == VariogramKind::Gaussian || rng.gen_bool(0.5) {
            partial_sill * rng.gen_range(0.05..0.5)
        } else {
            0.0
        };
        let model = VariogramModel {
            kind,
            nugget,
            partial_sill,
            range: rng.gen_range(2.0..25.0),
        };
        let ok = match OrdinaryKriging::new(&points, &values, model, false) {
            Ok(k) => k,
            Err(e) => return Fail(format!("kriging system: {e}")),
        };
        for (p, v) in points.iter().zip(&values) {
            let pred = match ordinary_krige(&points, &values, model, false, *p) {
                Ok(pred) => pred,
                Err(e) => return Fail(format!("prediction: {e}")),
            };
            worst_value = worst_value.max(rel_err(pred.value, *v));
            worst_var = worst_var.max(pred.variance);
        }
        for _ in 0..5 {
            let s0 = Point::new(rng.gen_range(-5.0..35.0), rng.gen_range(-5.0..35.0));
            worst_sum = worst_sum.max((ok.weights(s0).sum() - 1.0).abs());
        }
    }
    check(
        worst_value <= 1e-8 && worst_var < 1e-10 && worst_sum <= 1e-10,
        format!(
            "100 configurations: max relative misfit {worst_value:.1e}, max site variance {worst_var:.1e}, max |Σw−1| {worst_sum:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn random_car_inputs(rng: &mut ChaCha8Rng) -> PareInputs {
    let n = rng.gen_range(8..=50);
    let r = 3;
    let region: Vec<usize> = (0..n).map(|i| if i < r { i } else { rng.gen_range(0..r) }).collect();
    let x = DMatrix::from_fn(n, r, |i, j| if region[i] == j { 1.0 } else { 0.0 });
    let d = [[1.0, 7.7, 27.6], [7.7, 1.0, 7.9], [27.6, 7.9, 1.0]];
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = 1.0 / (d[region[i]][region[j]] + rng.gen_range(-0.2..0.2));
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
        w[(i, i)] = 1.0 / (1.0 + rng.gen_range(-0.2..0.2));
    }
    let means = [220.0, 240.0, 230.0];
    let z = DVector::from_fn(n, |i, _| means[region[i]] + rng.gen_range(-15.0..15.0));
    PareInputs::new(z, x, w).expect("consistent dimensions")
}

/// Gaussian log density of `z` under mean `Xβ̂` and covariance
/// `τ̂²(I − ρW)⁻¹`, with `β̂` and `τ̂²` from dense GLS.
fn dense_profile_loglik(rho: f64, inputs: &PareInputs) -> f64 {
    let n = inputs.z.len();
    let q = DMatrix::identity(n, n) - &inputs.w * rho;
    let xtq = inputs.x.transpose() * &q;
    let beta = (&xtq * &inputs.x).lu().solve(&(&xtq * &inputs.z)).expect("GLS solvable");
    let resid = &inputs.z - &inputs.x * beta;
    let tau2 = (resid.transpose() * &q * &resid)[(0, 0)] / n as f64;
    let sigma = q.try_inverse().expect("Q invertible") * tau2;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let chol = sigma.cholesky().expect("covariance positive definite");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let maha = resid.dot(&chol.solve(&resid));
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + maha)
}

fn car_likelihood_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut worst_gap = f64::INFINITY;
    for _ in 0..5 {
        let inputs = random_car_inputs(&mut rng);
        let (lo, hi) = CarModel::new(&inputs).rho_interval();
        for _ in 0..4 {
            let rho = rng.gen_range(lo..hi);
            let fast = match car_profile_loglik(rho, &inputs) {
                Ok(p) => p.loglik,
                Err(e) => return Fail(format!("profile: {e}")),
            };
            worst = worst.max(rel_err(fast, dense_profile_loglik(rho, &inputs)));
        }
        let fit = match fit_pare(&inputs) {
            Ok(f) => f,
            Err(e) => return Fail(format!("fit: {e}")),
        };
        let grid_best = (0..101)
            .map(|k| lo + (hi - lo) * k as f64 / 100.0)
            .filter_map(|rho| car_profile_loglik(rho, &inputs).ok())
            .map(|p| p.loglik)
            .fold(f64::NEG_INFINITY, f64::max);
        worst_gap = worst_gap.min(fit.loglik - grid_best);
    }
    check(
        worst <= 1e-8 && worst_gap >= -1e-9,
        format!("max relative error {worst:.1e}; min loglik(ρ̂) − grid best {worst_gap:.2e}"),
    )
}

// ---------------------------------------------------------------- 6

fn brute_force_hausdorff(a: &[Point], b: &[Point]) -> f64 {
    let directed = |from: &[Point], to: &[Point]| {
        from.iter()
            .map(|p| to.iter().map(|q| p.distance(q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

fn geometry() -> Outcome {
    let square = |x0: f64, y0: f64, s: f64| {
        Region::new(
            format!("{x0},{y0}"),
            vec![Polygon::rectangle(Point::new(x0, y0), Point::new(x0 + s, y0 + s))],
        )
    };
    let pitch = 0.25;
    let shapes = [square(0.0, 0.0, 1.0), square(10.0, 0.0, 1.0), square(3.0, 2.0, 2.5), square(-4.0, 6.0, 1.5)];
    let mut problems = Vec::new();
    for a in &shapes {
        match extended_hausdorff(a, a, 0.5, pitch) {
            Ok(0.0) => {}
            other => problems.push(format!("self distance {other:?}")),
        }
        for b in &shapes {
            let (pa, pb) = (a.discretize(pitch), b.discretize(pitch));
            let fast = extended_hausdorff_points(&pa, &pb, 1.0).expect("valid fraction");
            let brute = brute_force_hausdorff(&pa, &pb);
            if fast != brute {
                problems.push(format!("f=1 {fast} vs brute force {brute}"));
            }
        }
    }
    let synthetic = format!("A,A = 0 and f=1 equals brute force on {} pairs", shapes.len() * shapes.len());
    if !problems.is_empty() {
        return Fail(format!("{synthetic}: {}", problems.join(", ")));
    }

    let Some(path) = std::env::var_os("PARE_CASE_STUDY_REGIONS").map(PathBuf::from) else {
        return Blocked(format!(
            "{synthetic} pass; the case-study region polygons are not bundled, set PARE_CASE_STUDY_REGIONS"
        ));
    };
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => return Fail(format!("{}: {e}", path.display())),
    };
    let regions = match RegionSet::from_geojson(&text) {
        Ok((r, _)) => r,
        Err(e) => return Fail(e.to_string()),
    };
    let d = match region_distance_matrix(&regions, 0.5, pitch) {
        Ok(d) => d,
        Err(e) => return Fail(e.to_string()),
    };
    let mut got: Vec<f64> = Vec::new();
    for i in 0..d.dim() {
        for j in 0..i {
            got.push(d.entries[(i, j)]);
        }
    }
    got.sort_by(f64::total_cmp);
    let want = [7.7, 7.9, 27.6];
    let ok = got.len() == 3 && got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 0.5);
    check(ok, format!("{synthetic}; case-study distances {got:.2?}"))
}

// ---------------------------------------------------------------- 7

fn survivors_ok(input: &[Option<f64>], output: &[Option<f64>]) -> bool {
    let mut i = 0;
    while i < input.len() {
        match input[i] {
            Some(v) if v > 0.0 => {
                let start = i;
                while i < input.len() && matches!(input[i], Some(v) if v > 0.0) {
                    i += 1;
                }
                let run = &input[start..i];
                let max = run.iter().map(|v| v.unwrap()).fold(f64::NEG_INFINITY, f64::max);
                let first_max = start + run.iter().position(|v| v.unwrap() == max).unwrap();
                for k in start..i {
                    let want = if k == first_max { input[k] } else { Some(0.0) };
                    if output[k] != want {
                        return false;
                    }
                }
            }
            other => {
                if output[i] != other {
                    return false;
                }
                i += 1;
            }
        }
    }
    true
}

fn declustering() -> Outcome {
    let fixed: [(&[f64], &[f64]); 3] = [
        (&[3.0, 5.0, 2.0, 0.0, 4.0], &[0.0, 5.0, 0.0, 0.0, 4.0]),
        (&[7.0, 0.0, 7.0, 0.0, 7.0], &[7.0, 0.0, 7.0, 0.0, 7.0]),
        (&[4.0, 4.0], &[4.0, 0.0]),
    ];
    for (input, want) in fixed {
        let got = decluster_values(&input.iter().map(|&v| Some(v)).collect::<Vec<_>>());
        let want: Vec<Option<f64>> = want.iter().map(|&v| Some(v)).collect();
        if got != want {
            return Fail(format!("{input:?} gave {got:?}"));
        }
    }

    let day = prop_oneof![
        3 => Just(Some(0.0)),
        1 => Just(None),
        4 => (1u32..40).prop_map(|v| Some(v as f64)),
    ];
    let series = proptest::collection::vec(day, 0..120);
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 10_000,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let result = runner.run(&series, |s| {
        let once = decluster_values(&s);
        prop_assert_eq!(decluster_values(&once), once.clone(), "not idempotent");
        prop_assert!(survivors_ok(&s, &once), "run survivors wrong: {:?} -> {:?}", s, once);
        Ok(())
    });
    match result {
        Ok(()) => Pass("3 fixed examples; idempotence and one survivor per run on 10000 series".into()),
        Err(e) => Fail(e.to_string()),
    }
}

// ---------------------------------------------------------------- 8

fn case_study() -> Outcome {
    let Some(path) = std::env::var_os("PARE_CASE_STUDY_CONFIG").map(PathBuf::from) else {
        return Blocked("the published station records are not bundled, set PARE_CASE_STUDY_CONFIG".into());
    };
    let cfg = match AnalysisConfig::load(&path) {
        Ok(c) => c,
        Err(e) => return Fail(e.to_string()),
    };
    let study = match Study::load(cfg) {
        Ok(s) => s,
        Err(e) => return Fail(e.to_string()),
    };
    let window = Window {
        start_year: 1981,
        end_year: 2020,
    };
    let res = match run_window(&study, 0, window, &[Method::Pare, Method::RegionalMax]) {
        Ok(r) => r,
        Err(e) => return Fail(e.to_string()),
    };
    let est = |m: Method| res.estimates.iter().find(|e| e.method == m);
    let (Some(pare), Some(rmax)) = (est(Method::Pare), est(Method::RegionalMax)) else {
        return Fail("missing estimates".into());
    };
    let Some(r1) = pare.estimates.iter().find(|e| e.region_id == "1") else {
        return Fail("no region with id 1".into());
    };
    let within = (r1.scale - 215.08).abs() <= 2.0 * 4.3232
        && (r1.shape - 0.20).abs() <= 2.0 * 0.0164
        && (r1.rate - 0.06).abs() <= 2.0 * 0.0023;
    let mut narrower = true;
    for (p, m) in pare.estimates.iter().zip(&rmax.estimates) {
        for (a, b) in p.return_levels.iter().zip(&m.return_levels) {
            narrower &= a.se < b.se;
        }
    }
    check(
        within && narrower,
        format!(
            "region 1 PARE ({:.2}, {:.3}, {:.4}); PARE return-level SEs below regional max: {narrower}",
            r1.scale, r1.shape, r1.rate
        ),
    )
}

// ---------------------------------------------------------------- 9

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable output dir") {
            let p = entry.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                out.push(p.strip_prefix(dir).expect("under dir").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_pare");
    let tmp = tempfile::tempdir().expect("temp dir");
    let data = tmp.path().join("demo");
    let run = |args: &[&str]| Command::new(bin).args(args).output().expect("binary runs");
    let made = run(&["demo-data", "--dir", data.to_str().unwrap(), "--stations-per-region", "6"]);
    if !made.status.success() {
        return Fail(format!("demo-data: {}", String::from_utf8_lossy(&made.stderr)));
    }
    let config = data.join("config.toml");
    let mut outs = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("out{k}"));
        let r = run(&["windows", "--config", config.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]);
        if !r.status.success() {
            return Fail(format!("windows run {k}: {}", String::from_utf8_lossy(&r.stderr)));
        }
        outs.push(out);
    }
    let files = csv_files(&outs[0]);
    if files.is_empty() || files != csv_files(&outs[1]) {
        return Fail("runs wrote different CSV file sets".into());
    }
    let differing: Vec<_> = files
        .iter()
        .filter(|f| std::fs::read(outs[0].join(f)).ok() != std::fs::read(outs[1].join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    check(
        differing.is_empty(),
        format!("{} CSV files compared; differing: {differing:?}", files.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("simulation study", simulation_study),
        ("return-level formula oracle", return_level_oracle),
        ("return-level cross-check", table_cross_check),
        ("kriging exactness", kriging_exactness),
        ("CAR likelihood oracle", car_likelihood_oracle),
        ("geometry", geometry),
        ("declustering properties", declustering),
        ("case-study consistency", case_study),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        match f() {
            Pass(d) => println!("PASS criterion {n} ({name}): {d}"),
            Fail(d) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {d}");
            }
            Blocked(d) => println!("FAIL criterion {n} ({name}): blocked: {d}"),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
