//! Command-line front end: configuration, study orchestration and report
//! emission. Exit codes: 0 pass, 2 config error, 3 quantitative failure,
//! 4 solver failure.

use crate::bubbles::{kappa_consistency, kappa_printed, solve_kappa, CouplingData, Dimension};
use crate::correction::{correction_scaling_study, picard_loop, CoefficientRoute, CorrectionOptions, CorrectionScaling};
use crate::error::{Error, Result};
use crate::geometry::{canonical_lambda, CutoffSpec, PolygonConfig};
use crate::norms::SampleSpec;
use crate::pohozaev::{concentration, pohozaev_dilation, pohozaev_translation, BubblePair, ConcentrationReport, PohozaevReport};
use crate::potentials::{builtin_potential, PotentialFamily, PotentialPair, PotentialParams};
use crate::quadrature::{constants_B_C, Constants, QuadratureBudget, TubeDomain};
use crate::reduction::{newton_solve_reduced, reduced_degree, t_star, ReducedBox, ReducedDegree, ReducedState};
use crate::residual::{refinement_change, residual_scaling_study, Ansatz, Cutoff, ScalingFit};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_QUANTITATIVE: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    pub family: PotentialFamily,
    pub params: PotentialParams,
    #[serde(default = "one")]
    pub r0: f64,
    /// Defaults to zeros of length N-2.
    #[serde(default)]
    pub y0: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceConfig {
    pub seed_t_factor: f64,
    /// Seed for (rbar, ybar''); defaults to the critical point with rbar shifted by 0.05.
    pub seed_z: Option<Vec<f64>>,
    pub t_lo_factor: f64,
    pub t_hi_factor: f64,
    /// Half-widths of the search box in (rbar, ybar''); defaults to 0.2 on rbar and ybar''_1.
    pub z_half: Option<Vec<f64>>,
    pub tol: f64,
    pub resolution: usize,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        ReduceConfig {
            seed_t_factor: 1.2,
            seed_z: None,
            t_lo_factor: 0.5,
            t_hi_factor: 2.0,
            z_half: None,
            tol: 1e-10,
            resolution: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalfBubbleRegion {
    /// Every sample point.
    All,
    /// Sample points where the cutoff equals 1.
    Core,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    pub riesz_samples: usize,
    pub nodes: usize,
    pub tol: f64,
    pub route: CoefficientRoute,
    /// Picard iterations at the smallest k; 1 skips the loop.
    pub max_iter: usize,
    pub half_bubble_region: HalfBubbleRegion,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        let o = CorrectionOptions::default();
        CorrectionConfig {
            riesz_samples: o.riesz_samples,
            nodes: o.nodes,
            tol: o.tol,
            route: o.route,
            max_iter: 1,
            half_bubble_region: HalfBubbleRegion::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PohozaevConfig {
    /// Concentration of the exact bubble used for the identity checks.
    pub lambda: f64,
    /// Tube radii in units of the cutoff delta.
    pub rho_factors: Vec<f64>,
    /// Shift of kappa in the negative control.
    pub kappa_shift: f64,
    /// Tube radius of the concentration integrals, in units of delta.
    pub concentration_rho_factor: f64,
}

impl Default for PohozaevConfig {
    fn default() -> Self {
        PohozaevConfig {
            lambda: 15.0,
            rho_factors: vec![3.0, 3.5, 4.0],
            kappa_shift: 0.3,
            concentration_rho_factor: 3.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub residual_slope: f64,
    pub slope_margin: f64,
    /// Relative change of the residual norm under 2x sample refinement.
    pub refinement: f64,
    pub correction_slope: f64,
    pub pohozaev_sigmas: f64,
    pub negative_control_sigmas: f64,
    pub concentration: f64,
    pub constants_rel: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            residual_slope: -1.0,
            slope_margin: 0.05,
            refinement: 0.02,
            correction_slope: -1.0,
            pohozaev_sigmas: 5.0,
            negative_control_sigmas: 10.0,
            concentration: 0.15,
            constants_rel: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Constants,
    ResidualScaling,
    Correct,
    Reduce,
    Pohozaev,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Constants => "constants",
            Stage::ResidualScaling => "residual_scaling",
            Stage::Correct => "correct",
            Stage::Reduce => "reduce",
            Stage::Pohozaev => "pohozaev",
        }
    }
}

/// A single JSON run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    #[serde(default)]
    pub beta: f64,
    /// Defaults to the symmetric root kappa = 1.
    #[serde(default)]
    pub kappa: Option<f64>,
    pub potential: PotentialConfig,
    #[serde(default)]
    pub k_list: Vec<usize>,
    /// Defaults to the closed-form t* of the reduced map.
    #[serde(default)]
    pub t: Option<f64>,
    /// Defaults to r0.
    #[serde(default)]
    pub rbar: Option<f64>,
    /// Defaults to y0''.
    #[serde(default)]
    pub ybar2: Option<Vec<f64>>,
    #[serde(default = "default_cutoff")]
    pub cutoff: Cutoff,
    #[serde(default)]
    pub budget: QuadratureBudget,
    #[serde(default)]
    pub sample: SampleSpec,
    #[serde(default)]
    pub refinement_check: bool,
    #[serde(default)]
    pub correction: CorrectionConfig,
    #[serde(default)]
    pub reduce: ReduceConfig,
    #[serde(default)]
    pub pohozaev: PohozaevConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Stages of full-audit; defaults to all.
    #[serde(default)]
    pub stages: Option<Vec<Stage>>,
}

fn default_cutoff() -> Cutoff {
    Cutoff::Default
}

/// Validated objects derived from a configuration.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub dim: Dimension,
    pub coupling: CouplingData,
    pub potential: PotentialPair,
    pub rbar: f64,
    pub ybar2: Vec<f64>,
    pub cutoff_spec: CutoffSpec,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.resolve()?;
        Ok(c)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        let dim = Dimension::new(self.n).map_err(cfg_err)?;
        let coupling = match self.kappa {
            Some(k) => CouplingData::new(dim, self.beta, k),
            None => CouplingData::symmetric(dim, self.beta),
        }
        .map_err(cfg_err)?;
        let y0 = self.potential.y0.clone().unwrap_or_else(|| vec![0.0; self.n - 2]);
        let potential =
            builtin_potential(self.potential.family, &self.potential.params, dim, self.potential.r0, y0.clone()).map_err(cfg_err)?;
        let rbar = self.rbar.unwrap_or(self.potential.r0);
        let ybar2 = self.ybar2.clone().unwrap_or(y0);
        if ybar2.len() != self.n - 2 || !(rbar > 0.0) {
            return Err(Error::Config("rbar must be positive and ybar2 must have length N-2".into()));
        }
        let cutoff_spec = match &self.cutoff {
            Cutoff::Spec(s) => s.clone(),
            _ => CutoffSpec::new(potential.r0, potential.y0.clone(), None).map_err(cfg_err)?,
        };
        if self.k_list.contains(&0) {
            return Err(Error::Config("k values must be positive".into()));
        }
        self.budget.validate().map_err(cfg_err)?;
        self.sample.validate().map_err(cfg_err)?;
        if let Some(t) = self.t {
            if !(t > 0.0) {
                return Err(Error::Config("t must be positive".into()));
            }
        }
        if self.pohozaev.rho_factors.iter().any(|f| !(*f > 0.0 && f * cutoff_spec.delta < cutoff_spec.r0)) {
            return Err(Error::Config("tube radii must lie in (0, r0)".into()));
        }
        Ok(Resolved {
            dim,
            coupling,
            potential,
            rbar,
            ybar2,
            cutoff_spec,
        })
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let d = Sha256::digest(&bytes);
        let mut s = String::with_capacity(64);
        for b in d.iter() {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.budget.seed = seed;
        self.sample.seed = seed ^ 0x5a3d;
        self
    }

    pub fn correction_options(&self) -> CorrectionOptions {
        CorrectionOptions {
            budget: self.budget.clone(),
            riesz_samples: self.correction.riesz_samples,
            sample: self.sample.clone(),
            nodes: self.correction.nodes,
            tol: self.correction.tol,
            route: self.correction.route,
        }
    }
}

/// Outcome of one stage: pass flag, exit code, JSON result and CSV tables.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub pass: bool,
    pub code: i32,
    pub result: Value,
    pub csv: Vec<(String, String)>,
}

impl StageOutcome {
    fn new(stage: Stage, pass: bool, result: Value, csv: Vec<(String, String)>) -> Self {
        StageOutcome {
            stage,
            pass,
            code: if pass { EXIT_PASS } else { EXIT_QUANTITATIVE },
            result,
            csv,
        }
    }

    fn failed(stage: Stage, e: &Error) -> Self {
        StageOutcome {
            stage,
            pass: false,
            code: exit_code(e),
            result: json!({ "error": e.to_string() }),
            csv: Vec::new(),
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) | Error::Config(_) | Error::Dimension(_) | Error::SynchronizationUndefined(_) | Error::Io(_) => EXIT_CONFIG,
        Error::Quadrature { .. } | Error::HalfBubble(_) => EXIT_QUANTITATIVE,
        _ => EXIT_SOLVER,
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn constants_for(r: &Resolved, cfg: &RunConfig) -> Result<Constants> {
    constants_B_C(&r.coupling, &cfg.budget)
}

/// t from the configuration, or the closed-form root t*.
pub fn resolve_t(cfg: &RunConfig, r: &Resolved) -> Result<f64> {
    if let Some(t) = cfg.t {
        return Ok(t);
    }
    let consts = constants_for(r, cfg)?;
    let z = r.potential.critical_point();
    let mut g = vec![0.0; z.len()];
    let gv = r.potential.g(r.coupling.kappa, &z, &mut g);
    t_star(r.dim, &consts, gv)
}

pub fn stage_constants(cfg: &RunConfig, r: &Resolved) -> StageOutcome {
    let run = || -> Result<StageOutcome> {
        let consts = constants_for(r, cfg)?;
        let roots = solve_kappa(cfg.beta, r.dim, (1e-3, 1e3)).unwrap_or_default();
        let k = r.coupling.kappa;
        let pass = consts.b_rel_error < cfg.thresholds.constants_rel && consts.c_rel_error < cfg.thresholds.constants_rel;
        let result = json!({
            "n": r.dim.n(),
            "beta": cfg.beta,
            "kappa_roots": roots,
            "kappa": k,
            "s": r.coupling.s,
            "kappa_residual": kappa_consistency(cfg.beta, r.dim, k),
            "kappa_printed_residual": kappa_printed(cfg.beta, r.dim, k),
            "constants": to_value(&consts),
        });
        Ok(StageOutcome::new(Stage::Constants, pass, result, Vec::new()))
    };
    run().unwrap_or_else(|e| StageOutcome::failed(Stage::Constants, &e))
}

fn scaling_csv(fit: &ScalingFit) -> String {
    let mut s = String::from("k,lambda,norm,sample_size\n");
    for row in &fit.rows {
        let _ = writeln!(s, "{},{},{},{}", row.k, row.lambda, row.norm, row.sample_size);
    }
    s
}

pub fn stage_residual_scaling(cfg: &RunConfig, r: &Resolved) -> StageOutcome {
    if cfg.k_list.is_empty() {
        return StageOutcome::failed(Stage::ResidualScaling, &Error::Config("k_list is empty".into()));
    }
    let run = || -> Result<StageOutcome> {
        let t = resolve_t(cfg, r)?;
        let fit = residual_scaling_study(&cfg.k_list, t, &r.potential, &r.coupling, &r.ybar2, r.rbar, &cfg.cutoff, &cfg.sample)
            .map_err(|e| match e {
                Error::InvalidInput(m) => Error::Solver(m),
                e => e,
            })?;
        let th = &cfg.thresholds;
        let slope_ok = fit.slope <= th.residual_slope + th.slope_margin;
        let refinement = if cfg.refinement_check {
            let k = *cfg.k_list.last().expect("nonempty");
            let lambda = canonical_lambda(t, k, r.dim);
            let pc = PolygonConfig::new(k, r.rbar, r.ybar2.clone(), lambda, r.coupling)?;
            let ans = Ansatz::new(pc, r.potential.clone(), cfg.cutoff.clone())?;
            Some(refinement_change(&ans, &cfg.sample, 2)?)
        } else {
            None
        };
        let ref_ok = refinement.map(|x| x.2 < th.refinement).unwrap_or(true);
        let result = json!({
            "t": t,
            "fit": to_value(&fit),
            "slope_ok": slope_ok,
            "refinement": refinement.map(|x| json!({"norm": x.0, "refined_norm": x.1, "relative_change": x.2})),
            "refinement_ok": ref_ok,
        });
        Ok(StageOutcome::new(
            Stage::ResidualScaling,
            slope_ok && ref_ok,
            result,
            vec![("residual_scaling.csv".into(), scaling_csv(&fit))],
        ))
    };
    run().unwrap_or_else(|e| {
        let mut o = StageOutcome::failed(Stage::ResidualScaling, &e);
        if matches!(e, Error::Solver(_)) {
            o.code = EXIT_QUANTITATIVE;
        }
        o
    })
}

fn correction_csv(sc: &CorrectionScaling) -> String {
    let mut s = String::from("k,lambda,iter,norm_star,diff_norm,ratio,max_rel_std_error\n");
    for rep in &sc.reports {
        for it in &rep.iterates {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                rep.k,
                rep.lambda,
                it.iter,
                it.norm_star,
                opt(it.diff_norm),
                opt(it.ratio),
                it.max_rel_std_error
            );
        }
    }
    s
}

pub fn stage_correct(cfg: &RunConfig, r: &Resolved) -> StageOutcome {
    if cfg.k_list.len() < 3 {
        return StageOutcome::failed(Stage::Correct, &Error::Config("correction study needs at least 3 k values".into()));
    }
    let run = || -> Result<StageOutcome> {
        let t = resolve_t(cfg, r)?;
        let opts = cfg.correction_options();
        let mut sc = correction_scaling_study(&cfg.k_list, t, &r.potential, &r.coupling, &r.ybar2, r.rbar, &cfg.cutoff, &opts)?;
        let mut loop_report = None;
        if cfg.correction.max_iter > 1 {
            let k = cfg.k_list[0];
            let pc = PolygonConfig::new(k, r.rbar, r.ybar2.clone(), canonical_lambda(t, k, r.dim), r.coupling)?;
            let ans = Ansatz::new(pc, r.potential.clone(), cfg.cutoff.clone())?;
            let rep = picard_loop(&ans, cfg.correction.max_iter, &opts)?;
            sc.reports[0] = rep.clone();
            loop_report = Some(rep);
        }
        let slope_ok = sc.fit.slope <= cfg.thresholds.correction_slope;
        let hb_ok = match cfg.correction.half_bubble_region {
            HalfBubbleRegion::All => sc.half_bubble_all,
            HalfBubbleRegion::Core => sc.half_bubble_core,
        };
        let result = json!({
            "t": t,
            "slope": sc.fit.slope,
            "slope_ok": slope_ok,
            "half_bubble_region": cfg.correction.half_bubble_region,
            "half_bubble_ok": hb_ok,
            "study": to_value(&sc),
            "loop": loop_report.map(|r| to_value(&r)),
        });
        Ok(StageOutcome::new(
            Stage::Correct,
            slope_ok && hb_ok,
            result,
            vec![("correction.csv".into(), correction_csv(&sc))],
        ))
    };
    run().unwrap_or_else(|e| StageOutcome::failed(Stage::Correct, &e))
}

/// Newton solve and degree of the reduced map for a resolved configuration.
pub fn solve_reduced(cfg: &RunConfig, r: &Resolved) -> Result<(f64, ReducedState, ReducedDegree)> {
    let consts = constants_for(r, cfg)?;
    let z0 = r.potential.critical_point();
    let mut g = vec![0.0; z0.len()];
    let gv = r.potential.g(r.coupling.kappa, &z0, &mut g);
    let ts = t_star(r.dim, &consts, gv).map_err(|e| Error::NoCriticalPoint(e.to_string()))?;
    let rc = &cfg.reduce;
    let z_half = rc.z_half.clone().unwrap_or_else(|| {
        let mut h = vec![0.0; z0.len()];
        h[0] = 0.2;
        if h.len() > 1 {
            h[1] = 0.2;
        }
        h
    });
    if z_half.len() != z0.len() {
        return Err(Error::Config("z_half must have length N-1".into()));
    }
    let bx = ReducedBox {
        t_lo: rc.t_lo_factor * ts,
        t_hi: rc.t_hi_factor * ts,
        z_center: z0.clone(),
        z_half,
    };
    let seed_z = rc.seed_z.clone().unwrap_or_else(|| {
        let mut z = z0.clone();
        z[0] += 0.05;
        z
    });
    if seed_z.len() != z0.len() {
        return Err(Error::Config("seed_z must have length N-1".into()));
    }
    let state = newton_solve_reduced(rc.seed_t_factor * ts, &seed_z, &r.potential, &r.coupling, &consts, rc.tol, Some(&bx))?;
    let deg = reduced_degree(&r.potential, &r.coupling, &consts, &bx, rc.resolution)?;
    Ok((ts, state, deg))
}

pub fn stage_reduce(cfg: &RunConfig, r: &Resolved) -> StageOutcome {
    match solve_reduced(cfg, r) {
        Ok((ts, state, deg)) => {
            let pass = state.converged && deg.full.degree != 0;
            let result = json!({
                "t_star": ts,
                "state": to_value(&state),
                "t_error": (state.t - ts).abs(),
                "degree": to_value(&deg),
            });
            let mut o = StageOutcome::new(Stage::Reduce, pass, result, Vec::new());
            if !state.converged {
                o.code = EXIT_SOLVER;
            }
            o
        }
        Err(e) => StageOutcome::failed(Stage::Reduce, &e),
    }
}

fn pohozaev_csv(rows: &[(String, PohozaevReport)]) -> String {
    let mut s = String::from("case,identity,rho,volume,volume_se,boundary,boundary_se,residual,residual_se,sigmas,form_gap,form_gap_se\n");
    for (case, r) in rows {
        let id = match r.identity {
            crate::pohozaev::Identity::Translation(i) => format!("translation-{i}"),
            crate::pohozaev::Identity::Dilation => "dilation".into(),
        };
        let _ = writeln!(
            s,
            "{case},{id},{},{},{},{},{},{},{},{},{},{}",
            r.rho,
            r.volume.value,
            r.volume.std_error,
            r.boundary.value,
            r.boundary.std_error,
            r.residual,
            r.residual_std_error,
            r.sigmas(),
            r.form_gap,
            r.form_gap_std_error
        );
    }
    s
}

fn concentration_csv(rows: &[ConcentrationReport]) -> String {
    let mut s = String::from("k,lambda,integral,integral_se,prediction,ratio,ratio_se\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.k, r.lambda, r.integral.value, r.integral.std_error, r.prediction, r.ratio, r.ratio_std_error
        );
    }
    s
}

/// Identity checks for exact bubbles on each tube, the wrong-kappa control
/// and the concentration ratios over k_list.
pub fn stage_pohozaev(cfg: &RunConfig, r: &Resolved) -> StageOutcome {
    let run = || -> Result<StageOutcome> {
        let pc = &cfg.pohozaev;
        let spec = &r.cutoff_spec;
        let zero = builtin_potential(
            PotentialFamily::Constant,
            &PotentialParams {
                p0: 0.0,
                p2: 0.0,
                q0: 0.0,
                q2: 0.0,
                weights: None,
            },
            r.dim,
            spec.r0,
            spec.y0_2.clone(),
        )?;
        let mut center = vec![spec.r0, 0.0];
        center.extend_from_slice(&spec.y0_2);
        let exact = BubblePair::synchronized(&r.coupling, center.clone(), pc.lambda);
        let mut rows = Vec::new();
        let mut exact_ok = true;
        for f in &pc.rho_factors {
            let d = TubeDomain::new(spec.r0, spec.y0_2.clone(), f * spec.delta)?;
            let case = format!("exact-rho{f}");
            let dil = pohozaev_dilation(&exact, &zero, &r.coupling, &d, &center, &cfg.budget)?;
            exact_ok &= dil.sigmas() < cfg.thresholds.pohozaev_sigmas;
            rows.push((case.clone(), dil));
            for axis in [0, 2] {
                let tr = pohozaev_translation(&exact, &zero, &r.coupling, &d, axis, &cfg.budget)?;
                exact_ok &= tr.sigmas() < cfg.thresholds.pohozaev_sigmas;
                rows.push((case.clone(), tr));
            }
        }
        let mut wrong = exact.clone();
        wrong.b = (r.coupling.kappa + pc.kappa_shift) * r.coupling.s;
        let mid = pc.rho_factors[pc.rho_factors.len() / 2];
        let d = TubeDomain::new(spec.r0, spec.y0_2.clone(), mid * spec.delta)?;
        let neg = pohozaev_dilation(&wrong, &zero, &r.coupling, &d, &center, &cfg.budget)?;
        let neg_ok = neg.sigmas() > cfg.thresholds.negative_control_sigmas;
        rows.push((format!("wrong-kappa-rho{mid}"), neg));
        // concentration of the ansatz over k_list
        let mut conc = Vec::new();
        if !cfg.k_list.is_empty() {
            let t = resolve_t(cfg, r)?;
            let dc = TubeDomain::new(spec.r0, spec.y0_2.clone(), pc.concentration_rho_factor * spec.delta)?;
            for &k in &cfg.k_list {
                let pcfg = PolygonConfig::new(k, r.rbar, r.ybar2.clone(), canonical_lambda(t, k, r.dim), r.coupling)?;
                let ans = Ansatz::new(pcfg, r.potential.clone(), cfg.cutoff.clone())?;
                conc.push(concentration(&ans, &|_y: &[f64]| 1.0, &dc, &cfg.budget)?);
            }
        }
        let gaps: Vec<f64> = conc.iter().map(|c| (c.ratio - 1.0).abs()).collect();
        let monotone = gaps.windows(2).all(|w| w[1] <= w[0]);
        let final_ok = gaps.last().map(|g| *g < cfg.thresholds.concentration).unwrap_or(true);
        let result = json!({
            "exact_ok": exact_ok,
            "negative_control_ok": neg_ok,
            "identities": rows.iter().map(|(c, r)| json!({"case": c, "report": to_value(r)})).collect::<Vec<_>>(),
            "concentration": to_value(&conc),
            "concentration_monotone": monotone,
            "concentration_final_ok": final_ok,
        });
        Ok(StageOutcome::new(
            Stage::Pohozaev,
            exact_ok && neg_ok && monotone && final_ok,
            result,
            vec![
                ("pohozaev.csv".into(), pohozaev_csv(&rows)),
                ("concentration.csv".into(), concentration_csv(&conc)),
            ],
        ))
    };
    run().unwrap_or_else(|e| StageOutcome::failed(Stage::Pohozaev, &e))
}

pub fn run_stage(stage: Stage, cfg: &RunConfig, r: &Resolved) -> StageOutcome {
    match stage {
        Stage::Constants => stage_constants(cfg, r),
        Stage::ResidualScaling => stage_residual_scaling(cfg, r),
        Stage::Correct => stage_correct(cfg, r),
        Stage::Reduce => stage_reduce(cfg, r),
        Stage::Pohozaev => stage_pohozaev(cfg, r),
    }
}

const ALL_STAGES: [Stage; 5] = [Stage::Constants, Stage::ResidualScaling, Stage::Correct, Stage::Reduce, Stage::Pohozaev];

fn envelope(command: &str, cfg: &RunConfig, pass: bool, code: i32, result: Value) -> Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.hash(),
        "seeds": { "budget": cfg.budget.seed, "sample": cfg.sample.seed },
        "budget": to_value(&cfg.budget),
        "sample": to_value(&cfg.sample),
        "pass": pass,
        "exit_code": code,
        "result": result,
    })
}

fn write_outputs(out: &Path, name: &str, report: &Value, csv: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io(e.to_string()))?;
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    std::fs::write(out.join(format!("{name}.json")), text).map_err(|e| Error::Io(e.to_string()))?;
    for (file, body) in csv {
        std::fs::write(out.join(file), body).map_err(|e| Error::Io(e.to_string()))?;
    }
    Ok(())
}

/// Runs `stages` and writes `<name>.json` plus CSV tables into `out`.
/// Returns the exit code: 0 if every stage passed, else that of the first failure.
pub fn execute(name: &str, stages: &[Stage], cfg: &RunConfig, out: &Path) -> Result<i32> {
    let r = cfg.resolve()?;
    let mut code = EXIT_PASS;
    let mut results = serde_json::Map::new();
    let mut csv = Vec::new();
    for &s in stages {
        let o = run_stage(s, cfg, &r);
        if code == EXIT_PASS && o.code != EXIT_PASS {
            code = o.code;
        }
        results.insert(
            s.name().into(),
            json!({ "pass": o.pass, "exit_code": o.code, "result": o.result }),
        );
        csv.extend(o.csv);
    }
    let result = if stages.len() == 1 {
        results.remove(stages[0].name()).expect("stage present")["result"].take()
    } else {
        Value::Object(results)
    };
    let report = envelope(name, cfg, code == EXIT_PASS, code, result);
    write_outputs(out, name, &report, &csv)?;
    Ok(code)
}

#[derive(Debug, Parser)]
#[command(name = "polybubble", version, about = "Polygonal multi-bubble audits for coupled critical systems")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, clap::Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for JSON and CSV reports.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the quadrature and sampling seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Kappa roots, s and the bubble constants.
    Constants(CommonArgs),
    /// Residual norm decay along the canonical window.
    ResidualScaling(CommonArgs),
    /// Newton solve and degree of the reduced map.
    Reduce(CommonArgs),
    /// First Picard iterate of the correction.
    Correct(CommonArgs),
    /// Local Pohozaev identities and concentration.
    Pohozaev(CommonArgs),
    /// All stages with a single exit status.
    FullAudit(CommonArgs),
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    let (name, stages, a): (&str, Vec<Stage>, CommonArgs) = match cli.cmd {
        Command::Constants(a) => ("constants", vec![Stage::Constants], a),
        Command::ResidualScaling(a) => ("residual_scaling", vec![Stage::ResidualScaling], a),
        Command::Reduce(a) => ("reduce", vec![Stage::Reduce], a),
        Command::Correct(a) => ("correct", vec![Stage::Correct], a),
        Command::Pohozaev(a) => ("pohozaev", vec![Stage::Pohozaev], a),
        Command::FullAudit(a) => ("full_audit", Vec::new(), a),
    };
    if let Some(w) = a.workers {
        if w == 0 {
            eprintln!("error: --workers must be positive");
            return EXIT_CONFIG;
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let text = match std::fs::read_to_string(&a.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", a.config.display());
            return EXIT_CONFIG;
        }
    };
    let mut cfg = match RunConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
    }
    let stages = if stages.is_empty() {
        cfg.stages.clone().unwrap_or_else(|| ALL_STAGES.to_vec())
    } else {
        stages
    };
    match execute(name, &stages, &cfg, &a.out) {
        Ok(code) => {
            let status = if code == EXIT_PASS { "PASS" } else { "FAIL" };
            println!("{name}: {status} (exit {code}) -> {}", a.out.join(format!("{name}.json")).display());
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> String {
        r#"{"n": 5, "potential": {"family": "well", "params": {"p0": 1.0, "p2": 1.0, "q0": 1.0, "q2": 1.0}}}"#.into()
    }

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c = RunConfig::from_json(&base()).unwrap();
        assert_eq!(c.beta, 0.0);
        assert_eq!(c.cutoff, Cutoff::Default);
        assert_eq!(c.budget, QuadratureBudget::default());
        let r = c.resolve().unwrap();
        assert_eq!(r.coupling.kappa, 1.0);
        assert_eq!(r.ybar2, vec![0.0; 3]);
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let bad = base().replace("\"n\": 5", "\"n\": 5, \"bogus\": 1");
        assert!(matches!(RunConfig::from_json(&bad), Err(Error::Config(_))));
        let bad = base().replace("\"n\": 5", "\"n\": 4");
        assert!(matches!(RunConfig::from_json(&bad), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json("{not json"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_is_stable_and_seed_sensitive() {
        let c = RunConfig::from_json(&base()).unwrap();
        assert_eq!(c.hash(), c.clone().hash());
        assert_eq!(c.hash().len(), 64);
        assert_ne!(c.hash(), c.clone().with_seed(7).hash());
    }

    #[test]
    fn constants_stage_examples() {
        let c = RunConfig::from_json(&base()).unwrap();
        let r = c.resolve().unwrap();
        let o = stage_constants(&c, &r);
        assert!(o.pass);
        assert_eq!(o.result["kappa"], 1.0);
        assert_eq!(o.result["s"], 1.0);
        let bw = o.result["constants"]["b_w"].as_f64().unwrap();
        let expect = 15f64.powf(1.5) * std::f64::consts::PI.powi(3) / 2.0;
        assert!((bw - expect).abs() < 1e-8 * expect);
        let c6 = RunConfig::from_json(&base().replace("\"n\": 5", "\"n\": 6, \"beta\": 1.0")).unwrap();
        let r6 = c6.resolve().unwrap();
        let o6 = stage_constants(&c6, &r6);
        assert!((o6.result["s"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_short_k_lists() {
        let c = RunConfig::from_json(&base()).unwrap();
        let r = c.resolve().unwrap();
        assert_eq!(stage_residual_scaling(&c, &r).code, EXIT_CONFIG);
        let c1 = RunConfig::from_json(&base().replace("\"n\": 5", "\"n\": 5, \"k_list\": [6]")).unwrap();
        assert_eq!(stage_residual_scaling(&c1, &c1.resolve().unwrap()).code, EXIT_QUANTITATIVE);
    }

    #[test]
    fn reduce_stage_codes() {
        let c = RunConfig::from_json(&base()).unwrap();
        let o = stage_reduce(&c, &c.resolve().unwrap());
        assert!(o.pass, "{:?}", o.result);
        let cc = RunConfig::from_json(&base().replace("\"well\"", "\"constant\"")).unwrap();
        assert_eq!(stage_reduce(&cc, &cc.resolve().unwrap()).code, EXIT_SOLVER);
        let far = base().replace("\"n\": 5", "\"n\": 5, \"reduce\": {\"seed_t_factor\": 5.0}");
        let cf = RunConfig::from_json(&far).unwrap();
        assert_eq!(stage_reduce(&cf, &cf.resolve().unwrap()).code, EXIT_SOLVER);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["polybubble", "nonsense"]), EXIT_CONFIG);
        assert_eq!(run(["polybubble", "constants"]), EXIT_CONFIG);
        assert_eq!(run(["polybubble", "constants", "--config", "/nonexistent.json", "--out", "/tmp/x"]), EXIT_CONFIG);
    }
}
