//! Acceptance suite: one PASS/FAIL line per criterion. Set POLYBUBBLE_STRICT=1
//! to exit nonzero when any criterion fails.

use polybubble::bubbles::{solve_kappa, verify_sync_solution, CouplingData, Dimension};
use polybubble::cli::{solve_reduced, stage_correct, stage_pohozaev, RunConfig};
use polybubble::geometry::{canonical_lambda, PolygonConfig};
use polybubble::norms::SampleSpec;
use polybubble::quadrature::{constants_B_C, QuadratureBudget};
use polybubble::reduction::{interaction_sum, interaction_sum_brute};
use polybubble::residual::{default_delta, nonlinear_estimate_study, refinement_change, residual_scaling_study, Ansatz, Cutoff};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

const SYNC_TOL: f64 = 1e-9;
const SYNC_SECONDS: f64 = 1.0;
const CONSTANTS_REL: f64 = 1e-8;
const CONSTANTS_SECONDS: f64 = 5.0;
const RESIDUAL_SLOPE: f64 = -1.0;
const SLOPE_MARGIN: f64 = 0.05;
const REFINEMENT_REL: f64 = 0.02;
const RESIDUAL_SECONDS: f64 = 600.0;
const SPREAD_MAX: f64 = 3.0;
const CORRECTION_SLOPE: f64 = -1.0;
const NEWTON_TOL: f64 = 1e-10;
const T_STAR_REL: f64 = 1e-8;
const POHOZAEV_SIGMAS: f64 = 5.0;
const NEGATIVE_SIGMAS: f64 = 10.0;
const CONCENTRATION_REL: f64 = 0.15;
const INTERACTION_REL: f64 = 1e-13;
const INTERACTION_SECONDS: f64 = 1.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn well_config(n: usize, beta: f64, extra: &str) -> RunConfig {
    let text = format!(
        r#"{{"n": {n}, "beta": {beta}, "potential": {{"family": "well", "params": {{"p0": 1.0, "p2": 1.0, "q0": 1.0, "q2": 1.0}}}}{extra}}}"#
    );
    RunConfig::from_json(&text).expect("acceptance config")
}

/// t of the converged reduced state for N=5, beta=0, well potential.
fn reduced_t() -> f64 {
    let cfg = well_config(5, 0.0, "");
    let r = cfg.resolve().unwrap();
    let (_, state, _) = solve_reduced(&cfg, &r).expect("reduced solve");
    state.t
}

fn c1_synchronization() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut roots = 0;
    for n in [5usize, 6] {
        let d = Dimension::new(n).unwrap();
        let pts: Vec<Vec<f64>> = (0..1000)
            .map(|_| {
                let scale = 10f64.powf(rng.random_range(-2.0..1.0));
                (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
            })
            .collect();
        for beta in [-0.25, 0.0, 0.5, 1.0] {
            for root in solve_kappa(beta, d, (1e-3, 1e3)).unwrap() {
                let c = CouplingData::new(d, beta, root.kappa).unwrap();
                worst = worst.max(verify_sync_solution(&c, &pts).unwrap());
                roots += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: roots >= 8 && worst < SYNC_TOL && secs < SYNC_SECONDS,
        detail: format!("{roots} (kappa, s) pairs, max residual {worst:.2e} < {SYNC_TOL:.0e}, {secs:.3} s < {SYNC_SECONDS} s"),
    }
}

fn c2_constants() -> Outcome {
    let start = Instant::now();
    let d5 = Dimension::new(5).unwrap();
    let k5 = constants_B_C(&CouplingData::decoupled(d5), &QuadratureBudget::default()).unwrap();
    let pi3 = std::f64::consts::PI.powi(3);
    let b_exact = 15f64.powf(1.5) * pi3 / 2.0;
    let c_exact = 15f64.powf(2.5) * pi3 / 32.0;
    let mut worst = ((k5.b_w - b_exact) / b_exact).abs().max(((k5.c_w - c_exact) / c_exact).abs());
    for n in 5..=8 {
        let k = constants_B_C(&CouplingData::decoupled(Dimension::new(n).unwrap()), &QuadratureBudget::default()).unwrap();
        worst = worst.max(k.b_rel_error).max(k.c_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst < CONSTANTS_REL && secs < CONSTANTS_SECONDS,
        detail: format!("max relative error {worst:.2e} < {CONSTANTS_REL:.0e} for N=5..8, {secs:.2} s < {CONSTANTS_SECONDS} s"),
    }
}

fn c3_residual_decay(t: f64) -> Outcome {
    let start = Instant::now();
    let cfg = well_config(5, 0.0, "");
    let r = cfg.resolve().unwrap();
    let ks = [6, 8, 12, 16, 24];
    let spec = SampleSpec {
        polish: true,
        ..SampleSpec::default()
    };
    let fit = residual_scaling_study(&ks, t, &r.potential, &r.coupling, &r.ybar2, r.rbar, &Cutoff::Default, &spec).unwrap();
    let mut worst_ref = 0.0f64;
    for &k in &ks {
        let pc = PolygonConfig::new(k, r.rbar, r.ybar2.clone(), canonical_lambda(t, k, r.dim), r.coupling).unwrap();
        let ans = Ansatz::new(pc, r.potential.clone(), Cutoff::Default).unwrap();
        worst_ref = worst_ref.max(refinement_change(&ans, &spec, 2).unwrap().2);
    }
    let secs = start.elapsed().as_secs_f64();
    let bound = RESIDUAL_SLOPE + SLOPE_MARGIN;
    Outcome {
        pass: fit.slope <= bound && worst_ref < REFINEMENT_REL && secs < RESIDUAL_SECONDS,
        detail: format!(
            "slope {:.3} <= {bound:.2}, refinement change {:.2}% < {:.0}%, {secs:.1} s",
            fit.slope,
            100.0 * worst_ref,
            100.0 * REFINEMENT_REL
        ),
    }
}

fn c4_superlinearity(t: f64) -> Outcome {
    let cfg = well_config(5, 0.0, "");
    let r = cfg.resolve().unwrap();
    let k = 6;
    let pc = PolygonConfig::new(k, r.rbar, r.ybar2.clone(), canonical_lambda(t, k, r.dim), r.coupling).unwrap();
    let ans = Ansatz::new(pc, r.potential.clone(), Cutoff::Default).unwrap();
    let hs: Vec<f64> = (1..=7).map(|i| 0.1 * 2f64.powi(-i)).collect();
    let spec = SampleSpec {
        symmetric: true,
        ..SampleSpec::default()
    };
    let st = nonlinear_estimate_study(&ans, &hs, default_delta(r.dim), &spec).unwrap();
    let spreads: Vec<f64> = st.families.iter().map(|f| f.spread).collect();
    Outcome {
        pass: spreads.len() == 2 && spreads.iter().all(|s| *s < SPREAD_MAX),
        detail: format!("spreads {:.3} (ansatz multiple), {:.3} (dilation derivative) < {SPREAD_MAX}", spreads[0], spreads[1]),
    }
}

fn c5_correction(t: f64) -> Outcome {
    let cfg = well_config(5, 0.0, &format!(r#", "k_list": [6, 8, 12], "t": {t}"#));
    let r = cfg.resolve().unwrap();
    let o = stage_correct(&cfg, &r);
    let res = &o.result;
    let slope = res["slope"].as_f64().unwrap_or(f64::NAN);
    let study = &res["study"];
    let (mut pts, mut viol, mut core_pts, mut core_viol) = (0, 0, 0, 0);
    if let Some(reps) = study["reports"].as_array() {
        for rep in reps {
            let hb = &rep["half_bubble"];
            pts += hb["points"].as_u64().unwrap_or(0);
            viol += hb["violations"].as_u64().unwrap_or(0);
            core_pts += hb["core_points"].as_u64().unwrap_or(0);
            core_viol += hb["core_violations"].as_u64().unwrap_or(0);
        }
    }
    let slope_ok = slope <= CORRECTION_SLOPE;
    let hb_ok = pts > 0 && viol == 0;
    Outcome {
        pass: slope_ok && hb_ok,
        detail: format!(
            "slope {slope:.3} <= {CORRECTION_SLOPE} ({}), half-bubble violations {viol}/{pts} sample points ({}); where the cutoff is 1: {core_viol}/{core_pts}",
            if slope_ok { "ok" } else { "fails" },
            if hb_ok { "ok" } else { "fails" }
        ),
    }
}

fn c6_reduced() -> Outcome {
    let mut worst_f = 0.0f64;
    let mut worst_t = 0.0f64;
    let mut degrees = Vec::new();
    let mut ok = true;
    for n in [5usize, 6] {
        for beta in [0.0, 0.5] {
            let cfg = well_config(n, beta, "");
            let r = cfg.resolve().unwrap();
            match solve_reduced(&cfg, &r) {
                Ok((ts, state, deg)) => {
                    worst_f = worst_f.max(state.f_norm);
                    worst_t = worst_t.max(((state.t - ts) / ts).abs());
                    ok &= state.converged && state.f_norm < NEWTON_TOL;
                    ok &= deg.full.degree != 0 && deg.stable;
                    degrees.push(deg.full.degree);
                }
                Err(_) => ok = false,
            }
        }
    }
    Outcome {
        pass: ok && worst_t < T_STAR_REL,
        detail: format!("max |F| {worst_f:.2e} < {NEWTON_TOL:.0e}, max |t - t*|/t* {worst_t:.2e}, degrees {degrees:?} stable under 2x boundary refinement"),
    }
}

fn c7_c8_pohozaev() -> (Outcome, Outcome) {
    let mut ok7 = true;
    let mut worst = 0.0f64;
    let mut weakest_neg = f64::INFINITY;
    for beta in [0.0, 0.5] {
        let cfg = well_config(5, beta, "");
        let r = cfg.resolve().unwrap();
        let o = stage_pohozaev(&cfg, &r);
        ok7 &= o.result["exact_ok"].as_bool().unwrap_or(false) && o.result["negative_control_ok"].as_bool().unwrap_or(false);
        for row in o.result["identities"].as_array().into_iter().flatten() {
            let rep = &row["report"];
            let sig = (rep["residual"].as_f64().unwrap() / rep["residual_std_error"].as_f64().unwrap()).abs();
            if row["case"].as_str().unwrap().starts_with("wrong") {
                weakest_neg = weakest_neg.min(sig);
            } else {
                worst = worst.max(sig);
            }
        }
    }
    let c7 = Outcome {
        pass: ok7,
        detail: format!(
            "exact bubbles: max {worst:.2} sigma < {POHOZAEV_SIGMAS} on 3 tubes (translation and dilation); wrong kappa: {weakest_neg:.1} sigma > {NEGATIVE_SIGMAS}"
        ),
    };
    let t = reduced_t();
    let cfg = well_config(5, 0.0, &format!(r#", "k_list": [6, 8, 12], "t": {t}"#));
    let r = cfg.resolve().unwrap();
    let o = stage_pohozaev(&cfg, &r);
    let ratios: Vec<f64> = o.result["concentration"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|c| c["ratio"].as_f64().unwrap())
        .collect();
    let gaps: Vec<f64> = ratios.iter().map(|x| (x - 1.0).abs()).collect();
    let monotone = gaps.len() == 3 && gaps.windows(2).all(|w| w[1] <= w[0]);
    let last = gaps.last().copied().unwrap_or(f64::INFINITY);
    let c8 = Outcome {
        pass: monotone && last < CONCENTRATION_REL,
        detail: format!("ratios {ratios:.4?} for k = 6, 8, 12; |ratio - 1| at k=12 {last:.4} < {CONCENTRATION_REL}; monotone {monotone}"),
    };
    (c7, c8)
}

fn c9_interaction() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for n in [5usize, 6, 8] {
        let d = Dimension::new(n).unwrap();
        let c = CouplingData::decoupled(d);
        for k in 2..=128 {
            let y2 = vec![0.1; n - 2];
            let closed = interaction_sum(k, 1.3, 50.0, d).unwrap();
            let pc = PolygonConfig::new(k, 1.3, y2, 50.0, c).unwrap();
            let brute = interaction_sum_brute(&pc).unwrap();
            worst = worst.max(((closed.normalized - brute.normalized) / brute.normalized).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst < INTERACTION_REL && secs < INTERACTION_SECONDS,
        detail: format!("max relative gap {worst:.2e} < {INTERACTION_REL:.0e} for k = 2..128, {secs:.3} s < {INTERACTION_SECONDS} s"),
    }
}

fn c10_determinism() -> Outcome {
    let base = std::env::temp_dir().join(format!("polybubble-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);
    std::fs::create_dir_all(&base).unwrap();
    let cfg = base.join("audit.json");
    std::fs::write(
        &cfg,
        r#"{"n": 5, "potential": {"family": "well", "params": {"p0": 1.0, "p2": 1.0, "q0": 1.0, "q2": 1.0}},
            "k_list": [3, 4, 5], "budget": {"mc_samples": 16384},
            "correction": {"riesz_samples": 1024, "nodes": 400}}"#,
    )
    .unwrap();
    let run = |dir: &str, workers: &str| -> (i32, PathBuf) {
        let out = base.join(dir);
        let st = Command::new(env!("CARGO_BIN_EXE_polybubble"))
            .args(["full-audit", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", workers])
            .output()
            .expect("run binary");
        (st.status.code().unwrap_or(-1), out)
    };
    let (c1, o1) = run("a", "1");
    let (c2, o2) = run("b", "3");
    let list = |d: &PathBuf| {
        let mut v: Vec<String> = std::fs::read_dir(d)
            .map(|it| it.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
            .unwrap_or_default();
        v.sort();
        v
    };
    let f1 = list(&o1);
    let same_files = f1 == list(&o2) && !f1.is_empty();
    let identical = same_files && f1.iter().all(|f| std::fs::read(o1.join(f)).ok() == std::fs::read(o2.join(f)).ok());
    let _ = std::fs::remove_dir_all(&base);
    Outcome {
        pass: identical && c1 == c2 && [0, 3].contains(&c1),
        detail: format!("{} files byte-identical across reruns (1 vs 3 workers): {identical}; exit codes {c1}, {c2}", f1.len()),
    }
}

fn main() {
    let strict = std::env::var("POLYBUBBLE_STRICT").map(|v| v == "1").unwrap_or(false);
    let t = reduced_t();
    let mut failures = 0;
    let mut report = |i: usize, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failures += 1;
        }
        println!("{tag} [{i:>2}] {name}: {}", o.detail);
    };
    report(1, "synchronization", c1_synchronization());
    report(2, "constants", c2_constants());
    report(3, "residual decay", c3_residual_decay(t));
    report(4, "nonlinear superlinearity", c4_superlinearity(t));
    report(5, "correction smallness", c5_correction(t));
    report(6, "reduced system", c6_reduced());
    let (c7, c8) = c7_c8_pohozaev();
    report(7, "pohozaev identities", c7);
    report(8, "concentration", c8);
    report(9, "interaction closed form", c9_interaction());
    report(10, "determinism", c10_determinism());
    println!("acceptance: {} of 10 criteria pass", 10 - failures);
    if strict && failures > 0 {
        std::process::exit(1);
    }
}
