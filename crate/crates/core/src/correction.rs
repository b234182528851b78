//! Kernel directions, orthogonal projection and the Riesz-parametrix
//! Picard iteration for the correction (phi, psi).

use crate::bubbles::{bubble_profile, Dimension};
use crate::error::{Error, Result};
use crate::field::{dist2, PairField, Provenance};
use crate::geometry::{cutoff_eval_into, polygon_centers, PolygonConfig};
use crate::norms::{norm_from_values, sample_points, NormKind, SampleSpec};
use crate::quadrature::{
    green_constant, mc_integral_vec, riesz_apply_vec, Component, McEstimate, Mixture, QuadratureBudget, TubeDomain,
};
use crate::residual::{ppow, residual_norm, Ansatz};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Slot 0 is the dilation direction, slot 1 the radial translation, slots
/// 2..N the y'' translations.
pub fn slot_exponent(l: usize) -> i32 {
    if l == 0 {
        -1
    } else {
        1
    }
}

/// Y_{j,l}(y) = d U_{x_j,lambda} / d(parameter l).
pub fn kernel_direction(cfg: &PolygonConfig, center: &[f64], l: usize, y: &[f64]) -> f64 {
    let d = cfg.dim();
    let lam = cfg.lambda;
    let r2 = dist2(y, center);
    let u = cfg.coupling.s * bubble_profile(d, lam, r2);
    let nm2 = d.nf() - 2.0;
    let den = 1.0 + lam * lam * r2;
    match l {
        0 => u * nm2 / (2.0 * lam) * (1.0 - lam * lam * r2) / den,
        1 => {
            let rb = (center[0] * center[0] + center[1] * center[1]).sqrt();
            let dot = ((y[0] - center[0]) * center[0] + (y[1] - center[1]) * center[1]) / rb;
            u * nm2 * lam * lam * dot / den
        }
        _ => u * nm2 * lam * lam * (y[l] - center[l]) / den,
    }
}

/// The kN test functions U_j^{2*-2} Y_{j,l} (u-row; the v-row is kappa^{2*-1} times it)
/// together with the Gram matrix G_{ab} = <test_a, (Y_b, kappa Y_b)>.
#[derive(Debug, Clone)]
pub struct KernelBasis {
    pub cfg: PolygonConfig,
    pub centers: Vec<Vec<f64>>,
    pub gram: DMatrix<f64>,
    pub gram_std_error: DMatrix<f64>,
    /// Condition number of the raw Gram matrix.
    pub condition: f64,
    /// Condition number after symmetric diagonal scaling.
    pub condition_scaled: f64,
}

impl KernelBasis {
    pub fn len(&self) -> usize {
        self.centers.len() * self.cfg.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn index(&self, a: usize) -> (usize, usize) {
        (a / self.cfg.n(), a % self.cfg.n())
    }

    /// Span element Y_a (u-row).
    pub fn span(&self, a: usize, y: &[f64]) -> f64 {
        let (j, l) = self.index(a);
        kernel_direction(&self.cfg, &self.centers[j], l, y)
    }

    /// Test function U_a^{2*-2} Y_a (u-row).
    pub fn test(&self, a: usize, y: &[f64]) -> f64 {
        let (j, l) = self.index(a);
        test_function(&self.cfg, &self.centers[j], l, y)
    }

    /// Weight of the v-row of a test function relative to its u-row.
    pub fn v_weight(&self) -> f64 {
        let c = self.cfg.coupling;
        c.kappa.powf(c.n.p())
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let m = self.len();
        let rhs = DVector::from_column_slice(b);
        let lu = self.gram.clone().lu();
        let x = lu
            .solve(&rhs)
            .ok_or_else(|| Error::LinearSolve("Gram matrix is singular".into()))?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearSolve("Gram solve produced non-finite values".into()));
        }
        Ok((0..m).map(|i| x[i]).collect())
    }
}

fn test_function(cfg: &PolygonConfig, center: &[f64], l: usize, y: &[f64]) -> f64 {
    let d = cfg.dim();
    let u = cfg.coupling.s * bubble_profile(d, cfg.lambda, dist2(y, center));
    u.powf(d.p() - 1.0) * kernel_direction(cfg, center, l, y)
}

fn condition_numbers(g: &DMatrix<f64>) -> (f64, f64) {
    let sv = g.clone().svd(false, false).singular_values;
    let cond = sv.max() / sv.min();
    let m = g.nrows();
    let dg: Vec<f64> = (0..m).map(|i| g[(i, i)].abs().sqrt().max(1e-300)).collect();
    let gs = DMatrix::from_fn(m, m, |i, j| g[(i, j)] / (dg[i] * dg[j]));
    let sv = gs.svd(false, false).singular_values;
    (cond, sv.max() / sv.min())
}

fn gram_factor(cfg: &PolygonConfig) -> f64 {
    let c = cfg.coupling;
    1.0 + c.kappa.powf(c.n.p() + 1.0)
}

fn finish_basis(cfg: &PolygonConfig, gram: DMatrix<f64>, se: DMatrix<f64>) -> Result<KernelBasis> {
    let (condition, condition_scaled) = condition_numbers(&gram);
    if !(condition_scaled <= 1e8) {
        return Err(Error::IllConditioned(condition_scaled));
    }
    Ok(KernelBasis {
        cfg: cfg.clone(),
        centers: polygon_centers(cfg),
        gram,
        gram_std_error: se,
        condition,
        condition_scaled,
    })
}

/// Mixture with half its mass on the Cauchy component at `centers[focus]`.
fn focused_mixture(n: usize, centers: &[Vec<f64>], lambda: f64, focus: usize) -> Mixture {
    let k = centers.len();
    let parts = centers
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let w = if k == 1 {
                1.0
            } else if j == focus {
                0.5
            } else {
                0.5 / (k - 1) as f64
            };
            (
                w,
                Component::Cauchy {
                    center: c.clone(),
                    lambda,
                },
            )
        })
        .collect();
    Mixture { n, parts }
}

/// Gram matrix assembled from the j = 1 row block and the k-fold rotation symmetry.
pub fn kernel_basis(cfg: &PolygonConfig, budget: &QuadratureBudget) -> Result<KernelBasis> {
    let n = cfg.n();
    let centers = polygon_centers(cfg);
    let k = centers.len();
    let m = k * n;
    let mix = focused_mixture(n, &centers, cfg.lambda, 0);
    let fac = gram_factor(cfg);
    let row = mc_integral_vec(
        |y, out| {
            for l in 0..n {
                let t = test_function(cfg, &centers[0], l, y);
                if t == 0.0 {
                    continue;
                }
                for j in 0..k {
                    for l2 in 0..n {
                        out[l * m + j * n + l2] = fac * t * kernel_direction(cfg, &centers[j], l2, y);
                    }
                }
            }
        },
        n * m,
        &mix,
        budget,
    )?;
    let mut g = DMatrix::zeros(m, m);
    let mut se = DMatrix::zeros(m, m);
    for j in 0..k {
        for l in 0..n {
            for j2 in 0..k {
                for l2 in 0..n {
                    let e = &row[l * m + ((j2 + k - j) % k) * n + l2];
                    g[(j * n + l, j2 * n + l2)] = e.value;
                    se[(j * n + l, j2 * n + l2)] = e.std_error;
                }
            }
        }
    }
    finish_basis(cfg, g, se)
}

/// Every Gram entry by its own Monte Carlo integral (no symmetry used).
pub fn kernel_basis_direct(cfg: &PolygonConfig, budget: &QuadratureBudget) -> Result<KernelBasis> {
    let n = cfg.n();
    let centers = polygon_centers(cfg);
    let k = centers.len();
    let m = k * n;
    let mix = Mixture::bubbles(n, &centers, cfg.lambda, None);
    let fac = gram_factor(cfg);
    let all = mc_integral_vec(
        |y, out| {
            let ys: Vec<f64> = (0..m).map(|b| kernel_direction(cfg, &centers[b / n], b % n, y)).collect();
            for a in 0..m {
                let t = test_function(cfg, &centers[a / n], a % n, y);
                for b in 0..m {
                    out[a * m + b] = fac * t * ys[b];
                }
            }
        },
        m * m,
        &mix,
        budget,
    )?;
    let g = DMatrix::from_fn(m, m, |a, b| all[a * m + b].value);
    let se = DMatrix::from_fn(m, m, |a, b| all[a * m + b].std_error);
    finish_basis(cfg, g, se)
}

/// <test_a, (phi, psi)> for every basis element by Monte Carlo.
pub fn inner_products(field: &dyn PairField, basis: &KernelBasis, budget: &QuadratureBudget) -> Result<Vec<McEstimate>> {
    let n = basis.cfg.n();
    let m = basis.len();
    let kp = basis.v_weight();
    let mix = Mixture::bubbles(n, &basis.centers, basis.cfg.lambda, None);
    mc_integral_vec(
        |y, out| {
            let (u, v) = field.eval(y);
            let h = u + kp * v;
            if h == 0.0 {
                return;
            }
            for (a, o) in out.iter_mut().enumerate().take(m) {
                *o = basis.test(a, y) * h;
            }
        },
        m,
        &mix,
        budget,
    )
}

/// A field minus a combination of span elements.
pub struct ProjectedField<'a> {
    pub inner: &'a dyn PairField,
    pub basis: &'a KernelBasis,
    pub coefficients: Vec<f64>,
}

impl PairField for ProjectedField<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn provenance(&self) -> Provenance {
        Provenance::Correction
    }
    fn eval(&self, y: &[f64]) -> (f64, f64) {
        let (u, v) = self.inner.eval(y);
        let s: f64 = self
            .coefficients
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(a, c)| c * self.basis.span(a, y))
            .sum();
        (u - s, v - self.basis.cfg.coupling.kappa * s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coefficients: Vec<f64>,
    pub inner_products: Vec<McEstimate>,
}

/// Gram-solved span component of (phi, psi); the projected field is
/// `ProjectedField { inner, basis, coefficients }`.
pub fn project_out<'a>(
    field: &'a dyn PairField,
    basis: &'a KernelBasis,
    budget: &QuadratureBudget,
) -> Result<(ProjectedField<'a>, Projection)> {
    let ip = inner_products(field, basis, budget)?;
    let b: Vec<f64> = ip.iter().map(|e| e.value).collect();
    let coefficients = if b.iter().all(|v| *v == 0.0) {
        vec![0.0; b.len()]
    } else {
        basis.solve(&b)?
    };
    Ok((
        ProjectedField {
            inner: field,
            basis,
            coefficients: coefficients.clone(),
        },
        Projection {
            coefficients,
            inner_products: ip,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientRoute {
    /// <U^{2*-2} Y, Riesz(f)> = (s^{2*-2}/(2*-1)) <Y, f>, one analytic Monte Carlo integral.
    Duality,
    /// Monte Carlo inner products of the pointwise Riesz evaluations.
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionOptions {
    /// Budget for Gram and coefficient integrals.
    pub budget: QuadratureBudget,
    /// Samples per pointwise Riesz evaluation.
    pub riesz_samples: usize,
    pub sample: SampleSpec,
    /// Node count of the Nystrom discretization used from the second iterate on.
    pub nodes: usize,
    pub tol: f64,
    pub route: CoefficientRoute,
}

impl Default for CorrectionOptions {
    fn default() -> Self {
        CorrectionOptions {
            budget: QuadratureBudget::default(),
            riesz_samples: 8192,
            sample: SampleSpec {
                symmetric: true,
                ..SampleSpec::default()
            },
            nodes: 1500,
            tol: 1e-3,
            route: CoefficientRoute::Duality,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionStatus {
    Converged,
    Contracting,
    Stalled,
    Inconclusive,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub iter: usize,
    pub norm_star: f64,
    /// ||phi^{m} - phi^{m-1}||_*
    pub diff_norm: Option<f64>,
    pub ratio: Option<f64>,
    /// Coefficients of the j = 1 family (the others follow by symmetry).
    pub multipliers: Vec<f64>,
    /// Largest std-error / |value| over the sample points where |value| is at least 1% of the max.
    pub max_rel_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfBubbleStatus {
    pub points: usize,
    pub violations: usize,
    pub holds: bool,
    /// Same check restricted to points where the cutoff equals 1.
    pub core_points: usize,
    pub core_violations: usize,
    pub holds_core: bool,
    /// max |phi|/W_1 over the core points.
    pub worst_core_ratio: f64,
    pub first_violation: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub k: usize,
    pub lambda: f64,
    pub iterates: Vec<IterateRecord>,
    pub half_bubble: HalfBubbleStatus,
    pub status: CorrectionStatus,
    pub gram_condition: f64,
    pub gram_condition_scaled: f64,
    pub residual_norm: f64,
    /// |c_l| <= 10 lambda^{-n_l} ||R||_** for the j = 1 family.
    pub multiplier_bound_ok: bool,
    pub argmax_point: Vec<f64>,
    pub sample_size: usize,
}

impl CorrectionReport {
    pub fn first_norm(&self) -> f64 {
        self.iterates[0].norm_star
    }
    pub fn last_norm(&self) -> f64 {
        self.iterates.last().map(|r| r.norm_star).unwrap_or(f64::NAN)
    }
}

/// Densities whose Riesz potentials give the first iterate:
/// phi^1 = (W* - W_1) - Riesz(f_1), psi^1 = kappa (W* - W_1) - Riesz(f_2),
/// f_1 = P W_1 + s^{2-2*} D, f_2 = Q W_2 + kappa s^{2-2*} D, D = sum_j U_j^{2*-1} - W_1^{2*-1}.
struct Sources<'a> {
    ans: &'a Ansatz,
}

impl Sources<'_> {
    /// (W* - W_1, f_1, f_2, W_1)
    fn at(&self, y: &[f64]) -> (f64, f64, f64, f64) {
        let a = self.ans;
        let d = a.dim();
        let c = a.cfg.coupling;
        let p = d.p();
        let n = a.cfg.n();
        let mut g = [0.0; crate::bubbles::MAX_DIM];
        let xi = match &a.cutoff {
            Some(cs) => cutoff_eval_into(cs, y, &mut g[..n]).map(|v| v.0).unwrap_or(0.0),
            None => 1.0,
        };
        let mut ws = 0.0;
        let mut sp = 0.0;
        for x in &a.centers {
            let u = c.s * bubble_profile(d, a.cfg.lambda, dist2(y, x));
            ws += u;
            sp += u.powf(p);
        }
        let w1 = xi * ws;
        let dd = sp - ppow(w1, p);
        let (pv, qv) = if w1 != 0.0 { a.pq(y) } else { (0.0, 0.0) };
        let sf = c.s.powf(1.0 - p);
        (ws - w1, pv * w1 + sf * dd, qv * c.kappa * w1 + c.kappa * sf * dd, w1)
    }
}

fn source_mixture(ans: &Ansatz) -> Result<Mixture> {
    let tube = match &ans.cutoff {
        Some(cs) => Some(TubeDomain::new(cs.r0, cs.y0_2.clone(), cs.support_radius())?),
        None => None,
    };
    Ok(Mixture::bubbles(ans.cfg.n(), &ans.centers, ans.cfg.lambda, tube))
}

fn point_seed(seed: u64, y: &[f64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in y {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x100_0000_01b3).rotate_left(17);
    }
    h
}

/// Unprojected first iterate at one point, with the Riesz std-errors.
fn raw_first_iterate(ans: &Ansatz, mix: &Mixture, budget: &QuadratureBudget, y: &[f64]) -> Result<((f64, f64), (f64, f64))> {
    let src = Sources { ans };
    let (gap, _, _, _) = src.at(y);
    let r = riesz_apply_vec(
        |z, out| {
            let (_, f1, f2, _) = src.at(z);
            out[0] = f1;
            out[1] = f2;
        },
        2,
        y,
        mix,
        budget,
    )?;
    let kap = ans.cfg.coupling.kappa;
    Ok((
        (gap - r[0].value, kap * gap - r[1].value),
        (r[0].std_error, r[1].std_error),
    ))
}

/// The unprojected first iterate as a field (each evaluation is a Monte Carlo
/// Riesz potential with a point-dependent seed).
pub struct RawFirstIterate<'a> {
    pub ans: &'a Ansatz,
    mix: Mixture,
    budget: QuadratureBudget,
}

impl<'a> RawFirstIterate<'a> {
    pub fn new(ans: &'a Ansatz, riesz_budget: &QuadratureBudget) -> Result<Self> {
        Ok(RawFirstIterate {
            ans,
            mix: source_mixture(ans)?,
            budget: riesz_budget.clone(),
        })
    }
}

impl PairField for RawFirstIterate<'_> {
    fn dim(&self) -> usize {
        self.ans.cfg.n()
    }
    fn provenance(&self) -> Provenance {
        Provenance::Correction
    }
    fn eval(&self, y: &[f64]) -> (f64, f64) {
        let b = self.budget.with_seed(point_seed(self.budget.seed, y));
        raw_first_iterate(self.ans, &self.mix, &b, y)
            .map(|v| v.0)
            .unwrap_or((f64::NAN, f64::NAN))
    }
}

/// j = 1 inner products of the first iterate by the duality route.
fn duality_inner_products(ans: &Ansatz, basis: &KernelBasis, budget: &QuadratureBudget) -> Result<Vec<McEstimate>> {
    let n = ans.cfg.n();
    let c = ans.cfg.coupling;
    let p = c.n.p();
    let kp = basis.v_weight();
    let src = Sources { ans };
    let mix = source_mixture(ans)?;
    let x1 = &basis.centers[0];
    let dual = c.s.powf(p - 1.0) / p;
    mc_integral_vec(
        |z, out| {
            let (gap, f1, f2, _) = src.at(z);
            let u1 = c.s * bubble_profile(c.n, ans.cfg.lambda, dist2(z, x1));
            let up = u1.powf(p - 1.0);
            for (l, o) in out.iter_mut().enumerate().take(n) {
                let y = kernel_direction(&ans.cfg, x1, l, z);
                *o = up * y * (gap + kp * c.kappa * gap) - dual * y * (f1 + kp * f2);
            }
        },
        n,
        &mix,
        budget,
    )
}

fn half_bubble(ans: &Ansatz, pts: &[Vec<f64>], vals: &[(f64, f64)]) -> Result<HalfBubbleStatus> {
    let kap = ans.cfg.coupling.kappa;
    let n = ans.cfg.n();
    let mut st = HalfBubbleStatus {
        points: pts.len(),
        violations: 0,
        holds: true,
        core_points: 0,
        core_violations: 0,
        holds_core: true,
        worst_core_ratio: 0.0,
        first_violation: None,
    };
    for (y, v) in pts.iter().zip(vals) {
        let w1 = ans.w1(y)?;
        let w2 = kap * w1;
        let bad = v.0.abs() > 0.5 * w1 || v.1.abs() > 0.5 * w2;
        if bad {
            st.violations += 1;
            if st.first_violation.is_none() {
                st.first_violation = Some(y.clone());
            }
        }
        let mut g = [0.0; crate::bubbles::MAX_DIM];
        let xi = match &ans.cutoff {
            Some(cs) => cutoff_eval_into(cs, y, &mut g[..n])?.0,
            None => 1.0,
        };
        if xi == 1.0 && w1 > 0.0 {
            st.core_points += 1;
            if bad {
                st.core_violations += 1;
            }
            st.worst_core_ratio = st.worst_core_ratio.max(v.0.abs() / w1).max(v.1.abs() / w2);
        }
    }
    st.holds = st.violations == 0;
    st.holds_core = st.core_violations == 0;
    Ok(st)
}

fn multiplier_bound(lambda: f64, coeffs: &[f64], h: f64) -> bool {
    coeffs
        .iter()
        .enumerate()
        .all(|(l, c)| c.abs() <= 10.0 * lambda.powi(-slot_exponent(l)) * h)
}

struct FirstIterate {
    basis: KernelBasis,
    pts: Vec<Vec<f64>>,
    /// Projected values at the sample points.
    vals: Vec<(f64, f64)>,
    /// Raw (unprojected) values and their std-errors.
    raw: Vec<(f64, f64)>,
    se: Vec<(f64, f64)>,
    coeffs: Vec<f64>,
    report: CorrectionReport,
}

fn first_iterate(ans: &Ansatz, opts: &CorrectionOptions) -> Result<FirstIterate> {
    opts.sample.validate()?;
    opts.budget.validate()?;
    let cfg = &ans.cfg;
    let n = cfg.n();
    let k = cfg.k;
    let basis = kernel_basis(cfg, &opts.budget)?;
    let rb = opts.budget.with_samples(opts.riesz_samples);
    let mix = source_mixture(ans)?;
    let pts = sample_points(cfg, ans.cutoff.as_ref(), &opts.sample);
    let raw_se: Vec<((f64, f64), (f64, f64))> = pts
        .par_iter()
        .map(|y| raw_first_iterate(ans, &mix, &rb, y))
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<(f64, f64)> = raw_se.iter().map(|v| v.0).collect();
    let se: Vec<(f64, f64)> = raw_se.iter().map(|v| v.1).collect();
    let b1: Vec<f64> = match opts.route {
        CoefficientRoute::Duality => duality_inner_products(ans, &basis, &opts.budget)?
            .iter()
            .map(|e| e.value)
            .collect(),
        CoefficientRoute::Generic => {
            let f = RawFirstIterate::new(ans, &rb)?;
            let ip = inner_products(&f, &basis, &opts.budget)?;
            ip[..n].iter().map(|e| e.value).collect()
        }
    };
    // the first iterate is k-fold symmetric: every family has the j = 1 products
    let b: Vec<f64> = (0..k * n).map(|a| b1[a % n]).collect();
    let coeffs = basis.solve(&b)?;
    let kap = cfg.coupling.kappa;
    let vals: Vec<(f64, f64)> = pts
        .iter()
        .zip(&raw)
        .map(|(y, r)| {
            let s: f64 = coeffs.iter().enumerate().map(|(a, c)| c * basis.span(a, y)).sum();
            (r.0 - s, r.1 - kap * s)
        })
        .collect();
    let nr = norm_from_values(cfg, &pts, &vals, NormKind::Star);
    let vmax = vals.iter().map(|v| v.0.abs().max(v.1.abs())).fold(0.0, f64::max);
    let rel_se = vals
        .iter()
        .zip(&se)
        .filter(|(v, _)| v.0.abs().max(v.1.abs()) >= 0.01 * vmax && vmax > 0.0)
        .map(|(v, e)| (e.0 / v.0.abs().max(1e-300)).max(e.1 / v.1.abs().max(1e-300)))
        .fold(0.0, f64::max);
    let hb = half_bubble(ans, &pts, &vals)?;
    let rn = residual_norm(ans, &opts.sample)?.value;
    let mult: Vec<f64> = coeffs[..n].to_vec();
    let status = if rel_se > 0.2 {
        CorrectionStatus::Inconclusive
    } else {
        CorrectionStatus::Converged
    };
    let report = CorrectionReport {
        k,
        lambda: cfg.lambda,
        iterates: vec![IterateRecord {
            iter: 1,
            norm_star: nr.value,
            diff_norm: None,
            ratio: None,
            multipliers: mult.clone(),
            max_rel_std_error: rel_se,
        }],
        half_bubble: hb,
        status,
        gram_condition: basis.condition,
        gram_condition_scaled: basis.condition_scaled,
        residual_norm: rn,
        multiplier_bound_ok: multiplier_bound(cfg.lambda, &mult, rn),
        argmax_point: nr.argmax_point,
        sample_size: nr.sample_size,
    };
    Ok(FirstIterate {
        basis,
        pts,
        vals,
        raw,
        se,
        coeffs,
        report,
    })
}

/// (phi^1, psi^1) = projection of -Riesz(R) evaluated on the norm sample.
pub fn picard_first_iterate(ans: &Ansatz, opts: &CorrectionOptions) -> Result<CorrectionReport> {
    Ok(first_iterate(ans, opts)?.report)
}

/// Pointwise values of the projected first iterate with their Riesz std-errors.
pub fn first_iterate_values(ans: &Ansatz, opts: &CorrectionOptions) -> Result<Vec<(Vec<f64>, (f64, f64), (f64, f64))>> {
    let fi = first_iterate(ans, opts)?;
    let _ = (&fi.raw, &fi.coeffs);
    Ok(fi.pts.into_iter().zip(fi.vals).zip(fi.se).map(|((p, v), e)| (p, v, e)).collect())
}

/// N(phi, psi) with positive parts; outside the support of W_1 only the pure
/// powers remain.
fn nonlinear_extended(d: Dimension, beta: f64, w1: f64, w2: f64, phi: f64, psi: f64) -> (f64, f64) {
    let p = d.p();
    let q = d.q();
    let a = ppow(w1 + phi, 1.0);
    let b = ppow(w2 + psi, 1.0);
    if w1 <= 0.0 || w2 <= 0.0 {
        let c1 = ppow(a, q - 1.0) * ppow(b, q);
        let c2 = ppow(b, q - 1.0) * ppow(a, q);
        return (ppow(a, p) + 0.5 * beta * c1, ppow(b, p) + 0.5 * beta * c2);
    }
    // direct differences cancel catastrophically for small perturbations
    if phi.abs() <= 1e-4 * w1 && psi.abs() <= 1e-4 * w2 {
        return crate::residual::nonlinear_taylor(d, w1, w2, phi, psi).consistent(beta);
    }
    let n11 = ppow(a, p) - w1.powf(p) - p * w1.powf(p - 1.0) * phi;
    let n21 = ppow(b, p) - w2.powf(p) - p * w2.powf(p - 1.0) * psi;
    let n12 = ppow(a, q - 1.0) * ppow(b, q)
        - w1.powf(q - 1.0) * w2.powf(q)
        - (q - 1.0) * w1.powf(q - 2.0) * w2.powf(q) * phi
        - q * w1.powf(q - 1.0) * w2.powf(q - 1.0) * psi;
    let n22 = ppow(b, q - 1.0) * ppow(a, q)
        - w2.powf(q - 1.0) * w1.powf(q)
        - (q - 1.0) * w2.powf(q - 2.0) * w1.powf(q) * psi
        - q * w2.powf(q - 1.0) * w1.powf(q - 1.0) * phi;
    (n11 + 0.5 * beta * n12, n21 + 0.5 * beta * n22)
}

/// Fixed-point iteration phi^{m+1} = phi^1 + P Riesz(N(phi^m, psi^m)), where P is
/// the projection. The Riesz potential of N uses a Nystrom rule on a shared node
/// set (self term excluded); max_iter = 1 is the first iterate.
pub fn picard_loop(ans: &Ansatz, max_iter: usize, opts: &CorrectionOptions) -> Result<CorrectionReport> {
    if max_iter == 0 {
        return Err(Error::InvalidInput("max_iter must be >= 1".into()));
    }
    let fi = first_iterate(ans, opts)?;
    let mut report = fi.report.clone();
    if max_iter == 1 {
        return Ok(report);
    }
    let cfg = &ans.cfg;
    let n = cfg.n();
    let c = cfg.coupling;
    let kap = c.kappa;
    let d = c.n;
    let p = d.p();
    let basis = &fi.basis;
    let mix = source_mixture(ans)?;
    let m = opts.nodes.max(16);
    // nodes and weights
    let mut rng = ChaCha8Rng::seed_from_u64(opts.budget.seed ^ 0x0dd5);
    let mut nodes = vec![vec![0.0; n]; m];
    for z in nodes.iter_mut() {
        mix.sample(&mut rng, z);
    }
    let wts: Vec<f64> = nodes.iter().map(|z| 1.0 / (m as f64 * mix.density(z))).collect();
    let src = Sources { ans };
    let srcv: Vec<(f64, f64, f64, f64)> = nodes.iter().map(|z| src.at(z)).collect();
    let g = green_constant(n);
    let e = 2 - n as i32;
    let kern = |y: &[f64], z: &[f64]| {
        let r2 = dist2(y, z);
        if r2 == 0.0 {
            0.0
        } else {
            g * r2.sqrt().powi(e)
        }
    };
    // phi^1 at the nodes (Nystrom)
    let raw1: Vec<(f64, f64)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut a = 0.0;
            let mut b = 0.0;
            for j in 0..m {
                if j != i {
                    let kk = kern(&nodes[i], &nodes[j]) * wts[j];
                    a += kk * srcv[j].1;
                    b += kk * srcv[j].2;
                }
            }
            (srcv[i].0 - a, kap * srcv[i].0 - b)
        })
        .collect();
    let proj_at = |y: &[f64], coeffs: &[f64]| -> f64 { coeffs.iter().enumerate().map(|(a, c)| c * basis.span(a, y)).sum() };
    let phi1_nodes: Vec<(f64, f64)> = nodes
        .iter()
        .zip(&raw1)
        .map(|(z, r)| {
            let s = proj_at(z, &fi.coeffs);
            (r.0 - s, r.1 - kap * s)
        })
        .collect();
    // correction increment on nodes and on sample points, given N at nodes
    let dual = c.s.powf(p - 1.0) / p;
    let kp = basis.v_weight();
    let increment = |nn: &[(f64, f64)]| -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>, Vec<f64>)> {
        // projection coefficients of Riesz(N) by duality: <test, Riesz h> = dual <Y, h>
        let kn = basis.len();
        let mut b = vec![0.0; kn];
        for (j, z) in nodes.iter().enumerate() {
            let h = nn[j].0 + kp * nn[j].1;
            if h == 0.0 {
                continue;
            }
            for (a, bb) in b.iter_mut().enumerate() {
                *bb += dual * basis.span(a, z) * h * wts[j];
            }
        }
        let coeffs = basis.solve(&b)?;
        let eval_at = |y: &[f64], skip: Option<usize>| {
            let mut a = 0.0;
            let mut bb = 0.0;
            for j in 0..m {
                if Some(j) == skip {
                    continue;
                }
                let kk = kern(y, &nodes[j]) * wts[j];
                a += kk * nn[j].0;
                bb += kk * nn[j].1;
            }
            let s = proj_at(y, &coeffs);
            (a - s, bb - kap * s)
        };
        let on_nodes: Vec<(f64, f64)> = (0..m).into_par_iter().map(|i| eval_at(&nodes[i], Some(i))).collect();
        let on_pts: Vec<(f64, f64)> = fi.pts.par_iter().map(|y| eval_at(y, None)).collect();
        Ok((on_nodes, on_pts, coeffs))
    };
    let nl = |vals: &[(f64, f64)]| -> Vec<(f64, f64)> {
        (0..m)
            .map(|j| {
                let w1 = srcv[j].3;
                nonlinear_extended(d, c.beta, w1, kap * w1, vals[j].0, vals[j].1)
            })
            .collect()
    };
    let first = report.first_norm();
    let mut cur_nodes = phi1_nodes.clone();
    let mut prev_inc_pts: Vec<(f64, f64)> = vec![(0.0, 0.0); fi.pts.len()];
    let mut prev_diff: Option<f64> = None;
    let mut status = CorrectionStatus::Stalled;
    let mut last_vals = fi.vals.clone();
    for it in 2..=max_iter {
        let (inc_nodes, inc_pts, coeffs) = increment(&nl(&cur_nodes))?;
        let vals: Vec<(f64, f64)> = fi.vals.iter().zip(&inc_pts).map(|(a, b)| (a.0 + b.0, a.1 + b.1)).collect();
        let dv: Vec<(f64, f64)> = inc_pts
            .iter()
            .zip(&prev_inc_pts)
            .map(|(a, b)| (a.0 - b.0, a.1 - b.1))
            .collect();
        let nr = norm_from_values(cfg, &fi.pts, &vals, NormKind::Star);
        let diff = norm_from_values(cfg, &fi.pts, &dv, NormKind::Star).value;
        let ratio = prev_diff.map(|pd| if pd > 0.0 { diff / pd } else { 0.0 });
        let mult: Vec<f64> = fi.coeffs[..n].iter().zip(&coeffs[..n]).map(|(a, b)| a + b).collect();
        report.iterates.push(IterateRecord {
            iter: it,
            norm_star: nr.value,
            diff_norm: Some(diff),
            ratio,
            multipliers: mult,
            max_rel_std_error: report.iterates[0].max_rel_std_error,
        });
        last_vals = vals;
        if !nr.value.is_finite() || nr.value > 10.0 * first {
            status = CorrectionStatus::Diverged;
            break;
        }
        if diff <= opts.tol * first {
            status = CorrectionStatus::Converged;
            break;
        }
        status = match ratio {
            Some(r) if r < 0.9 => CorrectionStatus::Contracting,
            Some(_) => CorrectionStatus::Stalled,
            None => CorrectionStatus::Contracting,
        };
        cur_nodes = phi1_nodes.iter().zip(&inc_nodes).map(|(a, b)| (a.0 + b.0, a.1 + b.1)).collect();
        prev_inc_pts = inc_pts;
        prev_diff = Some(diff);
    }
    if fi.report.status == CorrectionStatus::Inconclusive && status != CorrectionStatus::Diverged {
        status = CorrectionStatus::Inconclusive;
    }
    report.status = status;
    report.half_bubble = half_bubble(ans, &fi.pts, &last_vals)?;
    if let Some(last) = report.iterates.last() {
        report.multiplier_bound_ok = multiplier_bound(cfg.lambda, &last.multipliers, report.residual_norm);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionScaling {
    pub fit: crate::residual::ScalingFit,
    pub reports: Vec<CorrectionReport>,
    pub half_bubble_all: bool,
    pub half_bubble_core: bool,
}

/// First-iterate norms along the canonical window with a log-log fit.
#[allow(clippy::too_many_arguments)]
pub fn correction_scaling_study(
    k_list: &[usize],
    t: f64,
    pp: &crate::potentials::PotentialPair,
    coupling: &crate::bubbles::CouplingData,
    ybar2: &[f64],
    rbar: f64,
    cutoff: &crate::residual::Cutoff,
    opts: &CorrectionOptions,
) -> Result<CorrectionScaling> {
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for &k in k_list {
        let lambda = crate::geometry::canonical_lambda(t, k, coupling.n);
        let cfg = PolygonConfig::new(k, rbar, ybar2.to_vec(), lambda, *coupling)?;
        let ans = Ansatz::new(cfg, pp.clone(), cutoff.clone())?;
        let r = picard_first_iterate(&ans, opts)?;
        rows.push(crate::residual::ScalingRow {
            k,
            lambda,
            norm: r.first_norm(),
            argmax: r.argmax_point.clone(),
            sample_size: r.sample_size,
        });
        reports.push(r);
    }
    let fit = crate::residual::fit_loglog(rows)?;
    Ok(CorrectionScaling {
        half_bubble_all: reports.iter().all(|r| r.half_bubble.holds),
        half_bubble_core: reports.iter().all(|r| r.half_bubble.holds_core),
        fit,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bubbles::CouplingData;
    use crate::field::FnPair;
    use crate::potentials::{builtin_potential, PotentialFamily, PotentialParams};
    use crate::residual::Cutoff;

    fn d5() -> Dimension {
        Dimension::new(5).unwrap()
    }

    fn cfg(k: usize, lambda: f64) -> PolygonConfig {
        PolygonConfig::new(k, 1.0, vec![0.0; 3], lambda, CouplingData::decoupled(d5())).unwrap()
    }

    fn budget(m: usize) -> QuadratureBudget {
        QuadratureBudget::default().with_samples(m)
    }

    fn pot(fam: PotentialFamily, p0: f64, p2: f64) -> crate::potentials::PotentialPair {
        let params = PotentialParams {
            p0,
            p2,
            q0: p0,
            q2: p2,
            weights: None,
        };
        builtin_potential(fam, &params, d5(), 1.0, vec![0.0; 3]).unwrap()
    }

    #[test]
    fn kernel_directions_match_finite_differences() {
        let c = cfg(3, 15.0);
        let centers = polygon_centers(&c);
        let y = [0.97, 0.05, 0.02, -0.01, 0.03];
        let h = 1e-6;
        let u_at = |cf: &PolygonConfig, j: usize| {
            let x = &polygon_centers(cf)[j];
            cf.coupling.s * bubble_profile(cf.dim(), cf.lambda, dist2(&y, x))
        };
        let mut cp = c.clone();
        cp.lambda += h;
        let mut cm = c.clone();
        cm.lambda -= h;
        let fd = (u_at(&cp, 1) - u_at(&cm, 1)) / (2.0 * h);
        let an = kernel_direction(&c, &centers[1], 0, &y);
        assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0));
        let mut cp = c.clone();
        cp.rbar += h;
        let mut cm = c.clone();
        cm.rbar -= h;
        let fd = (u_at(&cp, 1) - u_at(&cm, 1)) / (2.0 * h);
        let an = kernel_direction(&c, &centers[1], 1, &y);
        assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0));
        let mut cp = c.clone();
        cp.ybar2[1] += h;
        let mut cm = c.clone();
        cm.ybar2[1] -= h;
        let fd = (u_at(&cp, 1) - u_at(&cm, 1)) / (2.0 * h);
        let an = kernel_direction(&c, &centers[1], 3, &y);
        assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0));
    }

    #[test]
    fn gram_diagonal_scaling_k1() {
        let ls = [10.0f64, 20.0, 40.0];
        let diags: Vec<Vec<f64>> = ls
            .iter()
            .map(|l| {
                let b = kernel_basis(&cfg(1, *l), &budget(65536)).unwrap();
                (0..5).map(|i| b.gram[(i, i)]).collect()
            })
            .collect();
        for slot in 0..5 {
            let xs: Vec<f64> = ls.iter().map(|l| l.ln()).collect();
            let ys: Vec<f64> = diags.iter().map(|d| d[slot].ln()).collect();
            let mx = xs.iter().sum::<f64>() / 3.0;
            let my = ys.iter().sum::<f64>() / 3.0;
            let sl = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
                / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
            let expect = 2.0 * slot_exponent(slot) as f64;
            assert!((sl - expect).abs() < 0.1, "slot {slot}: slope {sl}");
        }
    }

    #[test]
    fn gram_cross_terms_vanish_k1() {
        let b = kernel_basis(&cfg(1, 20.0), &budget(65536)).unwrap();
        for l in 1..5 {
            let v = b.gram[(0, l)];
            let se = b.gram_std_error[(0, l)];
            assert!(v.abs() < 3.0 * se + 1e-12 * b.gram[(0, 0)].abs(), "slot {l}: {v} vs {se}");
        }
    }

    #[test]
    fn gram_cyclic_invariance_direct_k4() {
        let b = kernel_basis_direct(&cfg(4, 30.0), &budget(65536)).unwrap();
        let n = 5;
        let m = 20;
        let mut worst: f64 = 0.0;
        for a in 0..m {
            for bb in 0..m {
                let (ja, la) = (a / n, a % n);
                let (jb, lb) = (bb / n, bb % n);
                let a2 = ((ja + 1) % 4) * n + la;
                let b2 = ((jb + 1) % 4) * n + lb;
                let dv = (b.gram[(a, bb)] - b.gram[(a2, b2)]).abs();
                let se = (b.gram_std_error[(a, bb)].powi(2) + b.gram_std_error[(a2, b2)].powi(2)).sqrt();
                if se > 0.0 {
                    worst = worst.max(dv / se);
                }
            }
        }
        assert!(worst < 4.5, "max deviation {worst} std-errors");
    }

    #[test]
    fn symmetric_and_direct_gram_agree() {
        let c = cfg(3, 25.0);
        let s = kernel_basis(&c, &budget(65536)).unwrap();
        let d = kernel_basis_direct(&c, &budget(65536)).unwrap();
        for i in 0..15 {
            let rel = (s.gram[(i, i)] - d.gram[(i, i)]).abs() / d.gram[(i, i)].abs();
            assert!(rel < 0.05, "diag {i}: {rel}");
        }
    }

    #[test]
    fn project_zero_and_far_bubble() {
        let c = cfg(1, 20.0);
        let b = kernel_basis(&c, &budget(65536)).unwrap();
        let zero = FnPair::new(5, |_y: &[f64]| (0.0, 0.0));
        let (_, pr) = project_out(&zero, &b, &budget(4096)).unwrap();
        assert!(pr.coefficients.iter().all(|c| *c == 0.0));
        let far = FnPair::new(5, |y: &[f64]| {
            let x = [-1.0, 0.0, 0.0, 0.0, 0.0];
            let w = bubble_profile(d5(), 20.0, dist2(y, &x));
            (w, w)
        });
        let (pf, _) = project_out(&far, &b, &budget(65536)).unwrap();
        // the removed span component is negligible next to the input
        let mut pts = sample_points(&c, None, &SampleSpec::default());
        pts.push(vec![-1.0, 0.0, 0.0, 0.0, 0.0]);
        let fmax = pts.iter().map(|y| far.eval(y).0.abs()).fold(0.0, f64::max);
        let dmax = pts.iter().map(|y| (far.eval(y).0 - pf.eval(y).0).abs()).fold(0.0, f64::max);
        assert!(dmax < 1e-3 * fmax, "{dmax} vs {fmax}");
    }

    #[test]
    fn project_span_element() {
        let c = cfg(1, 20.0);
        let b = kernel_basis(&c, &budget(200_000)).unwrap();
        let x = polygon_centers(&c)[0].clone();
        let cc = c.clone();
        let y11 = FnPair::new(5, move |y: &[f64]| {
            let v = kernel_direction(&cc, &x, 1, y);
            (v, v)
        });
        let (pf, pr) = project_out(&y11, &b, &budget(200_000)).unwrap();
        assert!((pr.coefficients[1] - 1.0).abs() < 0.05, "{:?}", pr.coefficients);
        let spec = SampleSpec::default();
        let pts = sample_points(&c, None, &spec);
        let before: Vec<(f64, f64)> = pts.iter().map(|y| y11.eval(y)).collect();
        let after: Vec<(f64, f64)> = pts.iter().map(|y| pf.eval(y)).collect();
        let nb = norm_from_values(&c, &pts, &before, NormKind::Star).value;
        let na = norm_from_values(&c, &pts, &after, NormKind::Star).value;
        assert!(na < 0.05 * nb, "{na} vs {nb}");
    }

    #[test]
    fn projection_is_idempotent() {
        let c = cfg(2, 20.0);
        let b = kernel_basis(&c, &budget(65536)).unwrap();
        let f = FnPair::new(5, |y: &[f64]| {
            let x = [1.02, 0.01, 0.0, 0.01, 0.0];
            let w = bubble_profile(d5(), 15.0, dist2(y, &x));
            (w, 0.5 * w)
        });
        let bud = budget(65536);
        let (p1, _) = project_out(&f, &b, &bud).unwrap();
        let (_, pr2) = project_out(&p1, &b, &bud).unwrap();
        // second projection removes nothing beyond MC error: re-tested inner products vanish
        for (e, a) in pr2.inner_products.iter().zip(0..) {
            let scale = b.gram[(a, a)].abs().sqrt();
            assert!(e.value.abs() < 3.0 * e.std_error + 1e-8 * scale, "{a}: {e:?}");
        }
    }

    #[test]
    fn first_iterate_vanishes_for_exact_bubble() {
        let c = cfg(1, 40.0);
        let ans = Ansatz::new(c, pot(PotentialFamily::Constant, 1e-300, 0.0), Cutoff::Off).unwrap();
        let opts = CorrectionOptions {
            riesz_samples: 1024,
            ..CorrectionOptions::default()
        };
        let r = picard_first_iterate(&ans, &opts).unwrap();
        assert!(r.first_norm() < 1e-10, "{}", r.first_norm());
    }

    #[test]
    fn duality_matches_generic_route() {
        let c = cfg(2, 12.0);
        let ans = Ansatz::new(c, pot(PotentialFamily::Well, 1.0, 1.0), Cutoff::Default).unwrap();
        let basis = kernel_basis(&ans.cfg, &budget(65536)).unwrap();
        let dual = duality_inner_products(&ans, &basis, &budget(65536)).unwrap();
        let f = RawFirstIterate::new(&ans, &budget(512)).unwrap();
        let gen = inner_products(&f, &basis, &budget(2048)).unwrap();
        for l in 0..3 {
            let (a, b) = (dual[l], gen[l]);
            let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
            assert!((a.value - b.value).abs() < 4.0 * se + 0.1 * a.value.abs(), "slot {l}: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn picard_loop_one_iteration_is_first_iterate() {
        let c = cfg(3, 20.0);
        let ans = Ansatz::new(c, pot(PotentialFamily::Well, 1.0, 1.0), Cutoff::Default).unwrap();
        let opts = CorrectionOptions {
            riesz_samples: 512,
            budget: budget(8192),
            ..CorrectionOptions::default()
        };
        let a = picard_first_iterate(&ans, &opts).unwrap();
        let b = picard_loop(&ans, 1, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn picard_loop_zero_residual_is_fixed_point() {
        let c = cfg(1, 40.0);
        let ans = Ansatz::new(c, pot(PotentialFamily::Constant, 1e-300, 0.0), Cutoff::Off).unwrap();
        let opts = CorrectionOptions {
            riesz_samples: 512,
            nodes: 200,
            ..CorrectionOptions::default()
        };
        let r = picard_loop(&ans, 5, &opts).unwrap();
        assert_eq!(r.status, CorrectionStatus::Converged, "{:?}", r.iterates);
        assert!(r.iterates.len() <= 2);
    }

    #[test]
    fn nonlinear_extended_matches_checked_terms() {
        let d = d5();
        let t = crate::residual::nonlinear_terms(d, 2.0, 3.0, 0.3, -0.2).unwrap();
        let (a, b) = nonlinear_extended(d, 0.7, 2.0, 3.0, 0.3, -0.2);
        assert!((a - t.consistent(0.7).0).abs() < 1e-13);
        assert!((b - t.consistent(0.7).1).abs() < 1e-13);
        assert_eq!(nonlinear_extended(d, 0.0, 0.0, 0.0, -1.0, 0.0), (0.0, 0.0));
    }
}
