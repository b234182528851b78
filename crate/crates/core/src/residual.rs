//! The ansatz (W_1, W_2), its residual R_k, the nonlinearity N_k and the
//! empirical decay studies built on them.

use crate::bubbles::{bubble_profile, Dimension, MAX_DIM};
use crate::error::{Error, Result};
use crate::field::{dist2, PairField, Provenance};
use crate::geometry::{canonical_lambda, cutoff_eval_into, polygon_centers, CutoffSpec, PolygonConfig};
use crate::norms::{norm_from_values, norm_of, sample_points, NormKind, NormReport, SampleSpec};
use crate::potentials::PotentialPair;
use crate::bubbles::CouplingData;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Choice of cutoff for the ansatz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cutoff {
    /// delta = 0.1 r0 around the potential's critical point.
    Default,
    Spec(CutoffSpec),
    /// xi = 1 everywhere.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// -Delta W_1 + P W_1 - W_1^{2*-1} - (beta/2) W_1^{2*/2-1} W_2^{2*/2}.
    Canonical,
    /// The decomposition as printed: sums of (xi U_j)^{2*-1} and the coupled sums
    /// with both exponents 2*/2.
    Printed,
    /// The printed decomposition with consistent exponents and xi U_j^{2*-1} sums;
    /// equals minus the canonical residual.
    Corrected,
}

/// W = xi sum_j U_{x_j, lambda}, with U = s w.
#[derive(Debug, Clone)]
pub struct Ansatz {
    pub cfg: PolygonConfig,
    pub pp: PotentialPair,
    pub cutoff: Option<CutoffSpec>,
    pub centers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnsatzValue {
    pub w1: f64,
    pub w2: f64,
    pub grad_w1: Vec<f64>,
    pub grad_w2: Vec<f64>,
    pub lap_w1: f64,
    pub lap_w2: f64,
    /// Uncut sum W* = sum_j U_j.
    pub w_star: f64,
    pub xi: f64,
}

/// Pieces shared by every evaluation at one point.
struct Core {
    xi: f64,
    gxi: [f64; MAX_DIM],
    lxi: f64,
    /// sum_j U_j
    ws: f64,
    gws: [f64; MAX_DIM],
    /// sum_j U_j^{2*-1}
    sum_p: f64,
    /// sum_j U_j^{2*}
    sum_2s: f64,
}

#[inline]
pub(crate) fn ppow(x: f64, e: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x.powf(e)
    }
}

impl Ansatz {
    pub fn new(cfg: PolygonConfig, pp: PotentialPair, cutoff: Cutoff) -> Result<Self> {
        if pp.n != cfg.dim() {
            return Err(Error::InvalidInput("potential and configuration dimensions differ".into()));
        }
        let cutoff = match cutoff {
            Cutoff::Default => Some(CutoffSpec::new(pp.r0, pp.y0.clone(), None)?),
            Cutoff::Spec(c) => {
                if c.y0_2.len() != cfg.n() - 2 {
                    return Err(Error::InvalidInput("cutoff y0'' has the wrong length".into()));
                }
                if 2.0 * c.delta >= c.r0 {
                    return Err(Error::InvalidInput("cutoff support reaches the axis".into()));
                }
                Some(c)
            }
            Cutoff::Off => None,
        };
        let centers = polygon_centers(&cfg);
        Ok(Ansatz {
            cfg,
            pp,
            cutoff,
            centers,
        })
    }

    pub fn dim(&self) -> Dimension {
        self.cfg.dim()
    }

    pub fn coupling(&self) -> CouplingData {
        self.cfg.coupling
    }

    fn core(&self, y: &[f64], grad: bool) -> Result<Core> {
        let n = self.cfg.n();
        if y.len() != n {
            return Err(Error::InvalidInput("point has wrong dimension".into()));
        }
        let d = self.dim();
        let c = self.cfg.coupling;
        let l = self.cfg.lambda;
        let mut gxi = [0.0; MAX_DIM];
        let (xi, lxi) = match &self.cutoff {
            Some(cs) => cutoff_eval_into(cs, y, &mut gxi[..n])?,
            None => (1.0, 0.0),
        };
        let need_grad = grad || gxi[..n].iter().any(|g| *g != 0.0);
        let p = d.p();
        let ts = d.two_star();
        let nm2 = d.nf() - 2.0;
        let mut ws = 0.0;
        let mut gws = [0.0; MAX_DIM];
        let mut sum_p = 0.0;
        let mut sum_2s = 0.0;
        for x in &self.centers {
            let r2 = dist2(y, x);
            let u = c.s * bubble_profile(d, l, r2);
            ws += u;
            sum_p += u.powf(p);
            sum_2s += u.powf(ts);
            if need_grad {
                let a = -nm2 * l * l * u / (1.0 + l * l * r2);
                for i in 0..n {
                    gws[i] += a * (y[i] - x[i]);
                }
            }
        }
        Ok(Core {
            xi,
            gxi,
            lxi,
            ws,
            gws,
            sum_p,
            sum_2s,
        })
    }

    /// W_1 only.
    pub fn w1(&self, y: &[f64]) -> Result<f64> {
        let c = self.core(y, false)?;
        Ok(c.xi * c.ws)
    }

    pub fn eval(&self, y: &[f64]) -> Result<AnsatzValue> {
        let n = self.cfg.n();
        let c = self.core(y, true)?;
        let kap = self.cfg.coupling.kappa;
        let s = self.cfg.coupling.s;
        let p = self.dim().p();
        let w1 = c.xi * c.ws;
        let grad_w1: Vec<f64> = (0..n).map(|i| c.xi * c.gws[i] + c.ws * c.gxi[i]).collect();
        // Delta U_j = -s w_j^{2*-1} = -s^{2-2*} U_j^{2*-1}
        let lap_ws = -s.powf(1.0 - p) * c.sum_p;
        let cross: f64 = (0..n).map(|i| c.gxi[i] * c.gws[i]).sum();
        let lap_w1 = c.xi * lap_ws + 2.0 * cross + c.ws * c.lxi;
        Ok(AnsatzValue {
            w1,
            w2: kap * w1,
            grad_w2: grad_w1.iter().map(|g| kap * g).collect(),
            grad_w1,
            lap_w1,
            lap_w2: kap * lap_w1,
            w_star: c.ws,
            xi: c.xi,
        })
    }

    /// (d W_1/d lambda, d W_2/d lambda).
    pub fn d_lambda(&self, y: &[f64]) -> (f64, f64) {
        let mut gxi = [0.0; MAX_DIM];
        let n = self.cfg.n();
        let xi = match &self.cutoff {
            Some(cs) => cutoff_eval_into(cs, y, &mut gxi[..n]).map(|v| v.0).unwrap_or(0.0),
            None => 1.0,
        };
        if xi == 0.0 {
            return (0.0, 0.0);
        }
        let d = self.dim();
        let l = self.cfg.lambda;
        let nm2 = d.nf() - 2.0;
        let s = self.cfg.coupling.s;
        let mut t = 0.0;
        for x in &self.centers {
            let r2 = dist2(y, x);
            let w = bubble_profile(d, l, r2);
            t += w * nm2 / (2.0 * l) * (1.0 - l * l * r2) / (1.0 + l * l * r2);
        }
        let v = xi * s * t;
        (v, self.cfg.coupling.kappa * v)
    }

    /// Potentials (P, Q) at y.
    pub fn pq(&self, y: &[f64]) -> (f64, f64) {
        self.pp.pq(y)
    }

    pub fn residual(&self, y: &[f64], mode: ResidualMode) -> Result<(f64, f64)> {
        let n = self.cfg.n();
        let c = self.core(y, false)?;
        let cp = self.cfg.coupling;
        let (kap, s, beta) = (cp.kappa, cp.s, cp.beta);
        let d = self.dim();
        let p = d.p();
        let q = d.q();
        let (pv, qv) = self.pq(y);
        let w1 = c.xi * c.ws;
        let w2 = kap * w1;
        let cross: f64 = (0..n).map(|i| c.gxi[i] * c.gws[i]).sum();
        // cutoff terms W* Delta xi + 2 grad xi . grad W*
        let cut = c.ws * c.lxi + 2.0 * cross;
        match mode {
            ResidualMode::Canonical => {
                let lap_w1 = -c.xi * s.powf(1.0 - p) * c.sum_p + cut;
                let lap_w2 = kap * lap_w1;
                let r1 = -lap_w1 + pv * w1 - ppow(w1, p) - 0.5 * beta * ppow(w1, q - 1.0) * ppow(w2, q);
                let r2 = -lap_w2 + qv * w2 - ppow(w2, p) - 0.5 * beta * ppow(w2, q - 1.0) * ppow(w1, q);
                Ok((r1, r2))
            }
            ResidualMode::Printed => {
                let xp = ppow(c.xi, p);
                let x2s = ppow(c.xi, d.two_star());
                let kq = kap.powf(q);
                let r1 = (ppow(w1, p) - xp * c.sum_p) - pv * w1 + cut
                    + 0.5 * beta * (ppow(w2, q - 1.0) * ppow(w1, q) - x2s * kq * c.sum_2s);
                let r2 = (ppow(w2, p) - xp * kap.powf(p) * c.sum_p) - qv * w2 + kap * cut
                    + 0.5 * beta * (ppow(w1, q - 1.0) * ppow(w2, q) - x2s * kq * c.sum_2s);
                Ok((r1, r2))
            }
            ResidualMode::Corrected => {
                let r1 = (ppow(w1, p) - c.xi * c.sum_p) - pv * w1 + cut
                    + 0.5 * beta * (ppow(w1, q - 1.0) * ppow(w2, q) - c.xi * kap.powf(q) * c.sum_p);
                let r2 = (ppow(w2, p) - c.xi * kap.powf(p) * c.sum_p) - qv * w2 + kap * cut
                    + 0.5 * beta * (ppow(w2, q - 1.0) * ppow(w1, q) - c.xi * kap.powf(q - 1.0) * c.sum_p);
                Ok((r1, r2))
            }
        }
    }

    /// Printed minus corrected decomposition at y (nonzero only where the
    /// exponent reading or the xi powers matter).
    pub fn printed_discrepancy(&self, y: &[f64]) -> Result<(f64, f64)> {
        let a = self.residual(y, ResidualMode::Printed)?;
        let b = self.residual(y, ResidualMode::Corrected)?;
        Ok((a.0 - b.0, a.1 - b.1))
    }
}

/// The ansatz as a field pair.
pub struct AnsatzField<'a>(pub &'a Ansatz);

impl PairField for AnsatzField<'_> {
    fn dim(&self) -> usize {
        self.0.cfg.n()
    }
    fn provenance(&self) -> Provenance {
        Provenance::Ansatz
    }
    fn eval(&self, y: &[f64]) -> (f64, f64) {
        match self.0.w1(y) {
            Ok(w) => (w, self.0.cfg.coupling.kappa * w),
            Err(_) => (f64::NAN, f64::NAN),
        }
    }
    fn eval_grad(&self, y: &[f64], gu: &mut [f64], gv: &mut [f64]) -> (f64, f64) {
        match self.0.eval(y) {
            Ok(v) => {
                gu.copy_from_slice(&v.grad_w1);
                gv.copy_from_slice(&v.grad_w2);
                (v.w1, v.w2)
            }
            Err(_) => (f64::NAN, f64::NAN),
        }
    }
}

/// The residual in a given mode as a field pair.
pub struct ResidualField<'a>(pub &'a Ansatz, pub ResidualMode);

impl PairField for ResidualField<'_> {
    fn dim(&self) -> usize {
        self.0.cfg.n()
    }
    fn provenance(&self) -> Provenance {
        Provenance::Residual
    }
    fn eval(&self, y: &[f64]) -> (f64, f64) {
        self.0.residual(y, self.1).unwrap_or((f64::NAN, f64::NAN))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearTerms {
    pub n11: f64,
    pub n12: f64,
    pub n21: f64,
    pub n22: f64,
}

impl NonlinearTerms {
    /// (N^{1,1} + 2 N^{1,2}, N^{2,1} + 2 N^{2,2}) as displayed.
    pub fn printed(&self) -> (f64, f64) {
        (self.n11 + 2.0 * self.n12, self.n21 + 2.0 * self.n22)
    }

    /// Coefficient beta/2 on the coupled parts, matching the system's coupling.
    pub fn consistent(&self, beta: f64) -> (f64, f64) {
        (self.n11 + 0.5 * beta * self.n12, self.n21 + 0.5 * beta * self.n22)
    }
}

/// The four nonlinear terms at one point; requires |phi| <= W_1/2, |psi| <= W_2/2.
pub fn nonlinear_terms(n: Dimension, w1: f64, w2: f64, phi: f64, psi: f64) -> Result<NonlinearTerms> {
    let tol = 1e-12 * (w1.abs() + w2.abs());
    if phi.abs() > 0.5 * w1 + tol || psi.abs() > 0.5 * w2 + tol || !phi.is_finite() || !psi.is_finite() {
        return Err(Error::HalfBubble(format!("W1={w1:.3e}, phi={phi:.3e}, W2={w2:.3e}, psi={psi:.3e}")));
    }
    if w1 <= 0.0 || w2 <= 0.0 {
        return Ok(NonlinearTerms {
            n11: 0.0,
            n12: 0.0,
            n21: 0.0,
            n22: 0.0,
        });
    }
    let p = n.p();
    let q = n.q();
    let a = w1 + phi;
    let b = w2 + psi;
    let n11 = a.powf(p) - w1.powf(p) - p * w1.powf(p - 1.0) * phi;
    let n12 = a.powf(q - 1.0) * b.powf(q)
        - w1.powf(q - 1.0) * w2.powf(q)
        - (q - 1.0) * w1.powf(q - 2.0) * w2.powf(q) * phi
        - q * w1.powf(q - 1.0) * w2.powf(q - 1.0) * psi;
    let n21 = b.powf(p) - w2.powf(p) - p * w2.powf(p - 1.0) * psi;
    let n22 = b.powf(q - 1.0) * a.powf(q)
        - w2.powf(q - 1.0) * w1.powf(q)
        - (q - 1.0) * w2.powf(q - 2.0) * w1.powf(q) * psi
        - q * w2.powf(q - 1.0) * w1.powf(q - 1.0) * phi;
    Ok(NonlinearTerms { n11, n12, n21, n22 })
}

/// Second-order Taylor parts of the four terms.
pub fn nonlinear_taylor(n: Dimension, w1: f64, w2: f64, phi: f64, psi: f64) -> NonlinearTerms {
    if w1 <= 0.0 || w2 <= 0.0 {
        return NonlinearTerms {
            n11: 0.0,
            n12: 0.0,
            n21: 0.0,
            n22: 0.0,
        };
    }
    let p = n.p();
    let q = n.q();
    let hess = |u: f64, v: f64, du: f64, dv: f64| {
        // second derivative of u^{q-1} v^q along (du, dv), halved
        let fuu = (q - 1.0) * (q - 2.0) * u.powf(q - 3.0) * v.powf(q);
        let fuv = (q - 1.0) * q * u.powf(q - 2.0) * v.powf(q - 1.0);
        let fvv = q * (q - 1.0) * u.powf(q - 1.0) * v.powf(q - 2.0);
        0.5 * (fuu * du * du + 2.0 * fuv * du * dv + fvv * dv * dv)
    };
    NonlinearTerms {
        n11: 0.5 * p * (p - 1.0) * w1.powf(p - 2.0) * phi * phi,
        n12: hess(w1, w2, phi, psi),
        n21: 0.5 * p * (p - 1.0) * w2.powf(p - 2.0) * psi * psi,
        n22: hess(w2, w1, psi, phi),
    }
}

/// N(phi, psi) at y in the printed combination.
pub fn nonlinear_eval(ans: &Ansatz, field: &dyn PairField, y: &[f64]) -> Result<(f64, f64)> {
    let w1 = ans.w1(y)?;
    let w2 = ans.cfg.coupling.kappa * w1;
    let (phi, psi) = field.eval(y);
    Ok(nonlinear_terms(ans.dim(), w1, w2, phi, psi)?.printed())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub k: usize,
    pub lambda: f64,
    pub norm: f64,
    pub argmax: Vec<f64>,
    pub sample_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub rows: Vec<ScalingRow>,
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the log-log fit.
    pub fit_residual: f64,
    pub slope_std_error: f64,
}

/// Least-squares fit of log(norm) against log(lambda).
pub fn fit_loglog(rows: Vec<ScalingRow>) -> Result<ScalingFit> {
    if rows.len() < 3 {
        return Err(Error::InvalidInput("a scaling fit needs at least 3 rows".into()));
    }
    if rows.iter().any(|r| !(r.norm > 0.0 && r.lambda > 0.0)) {
        return Err(Error::Solver("nonpositive norm or lambda in scaling rows".into()));
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.lambda.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.norm.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Solver("all lambda values coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let dof = (m - 2.0).max(1.0);
    Ok(ScalingFit {
        rows,
        slope,
        intercept,
        fit_residual: (ss / m).sqrt(),
        slope_std_error: (ss / dof / sxx).sqrt(),
    })
}

/// ||R_k||_** of the canonical residual on the structured sample.
pub fn residual_norm(ans: &Ansatz, spec: &SampleSpec) -> Result<NormReport> {
    let pts = sample_points(&ans.cfg, ans.cutoff.as_ref(), spec);
    let vals: Vec<(f64, f64)> = pts
        .par_iter()
        .map(|y| ans.residual(y, ResidualMode::Canonical))
        .collect::<Result<Vec<_>>>()?;
    if spec.polish {
        let field = ResidualField(ans, ResidualMode::Canonical);
        return norm_of(&field, &ans.cfg, ans.cutoff.as_ref(), spec, NormKind::DoubleStar);
    }
    Ok(norm_from_values(&ans.cfg, &pts, &vals, NormKind::DoubleStar))
}

/// ||R_k||_** for each k at lambda = t k^{(N-2)/(N-4)}, with a log-log fit.
pub fn residual_scaling_study(
    k_list: &[usize],
    t: f64,
    pp: &PotentialPair,
    coupling: &CouplingData,
    ybar2: &[f64],
    rbar: f64,
    cutoff: &Cutoff,
    spec: &SampleSpec,
) -> Result<ScalingFit> {
    if k_list.len() < 3 {
        return Err(Error::InvalidInput("scaling study needs at least 3 k values".into()));
    }
    if k_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("k list must be strictly ascending".into()));
    }
    let n = coupling.n;
    let mut rows = Vec::new();
    for &k in k_list {
        let lambda = canonical_lambda(t, k, n);
        let cfg = PolygonConfig::new(k, rbar, ybar2.to_vec(), lambda, *coupling)?;
        let ans = Ansatz::new(cfg, pp.clone(), cutoff.clone())?;
        let r = residual_norm(&ans, spec)?;
        rows.push(ScalingRow {
            k,
            lambda,
            norm: r.value,
            argmax: r.argmax_point,
            sample_size: r.sample_size,
        });
    }
    fit_loglog(rows)
}

/// Relative change of ||R||_** between a sample and its `factor`-fold refinement.
pub fn refinement_change(ans: &Ansatz, spec: &SampleSpec, factor: usize) -> Result<(f64, f64, f64)> {
    let a = residual_norm(ans, spec)?.value;
    let b = residual_norm(ans, &spec.refined(factor))?.value;
    Ok((a, b, ((b - a) / b).abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationFamily {
    /// (phi, psi) = h (W_1, W_2)
    AnsatzMultiple,
    /// (phi, psi) = h lambda xi dU_1/dlambda (1, kappa)
    DilationDerivative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearRow {
    pub h: f64,
    pub norm_n: f64,
    pub norm_phi: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearFamilyReport {
    pub family: PerturbationFamily,
    pub rows: Vec<NonlinearRow>,
    /// max_h r(h) / r(h_max)
    pub max_ratio_over_hmax: f64,
    /// max_h r(h) / min_h r(h)
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearStudy {
    pub delta: f64,
    pub families: Vec<NonlinearFamilyReport>,
}

/// Exponent delta = 0.9 min(1, 4/(N-2)).
pub fn default_delta(n: Dimension) -> f64 {
    0.9 * (4.0 / (n.nf() - 2.0)).min(1.0)
}

fn perturbation(ans: &Ansatz, fam: PerturbationFamily, h: f64, y: &[f64]) -> Result<(f64, f64)> {
    let kap = ans.cfg.coupling.kappa;
    match fam {
        PerturbationFamily::AnsatzMultiple => {
            let w = ans.w1(y)?;
            Ok((h * w, h * kap * w))
        }
        PerturbationFamily::DilationDerivative => {
            let mut gxi = [0.0; MAX_DIM];
            let n = ans.cfg.n();
            let xi = match &ans.cutoff {
                Some(cs) => cutoff_eval_into(cs, y, &mut gxi[..n])?.0,
                None => 1.0,
            };
            let d = ans.dim();
            let l = ans.cfg.lambda;
            let r2 = dist2(y, &ans.centers[0]);
            let u = ans.cfg.coupling.s * bubble_profile(d, l, r2);
            let du = u * (d.nf() - 2.0) / 2.0 * (1.0 - l * l * r2) / (1.0 + l * l * r2);
            // |lambda dU/dlambda| <= ((N-2)/2) U_1; rescale so that h <= 1/2 keeps the half-bubble bound
            let v = h * xi * du * 2.0 / (d.nf() - 2.0);
            Ok((v, kap * v))
        }
    }
}

/// Ratios ||N(phi_h, psi_h)||_** / ||(phi_h, psi_h)||_*^{1+delta} for both families.
pub fn nonlinear_estimate_study(ans: &Ansatz, h_list: &[f64], delta: f64, spec: &SampleSpec) -> Result<NonlinearStudy> {
    if h_list.is_empty() || h_list.iter().any(|h| !(*h > 0.0 && *h <= 0.5)) {
        return Err(Error::InvalidInput("h values must lie in (0, 1/2]".into()));
    }
    let pts = sample_points(&ans.cfg, ans.cutoff.as_ref(), spec);
    let d = ans.dim();
    let kap = ans.cfg.coupling.kappa;
    let mut families = Vec::new();
    for fam in [PerturbationFamily::AnsatzMultiple, PerturbationFamily::DilationDerivative] {
        let mut rows = Vec::new();
        for &h in h_list {
            let vals: Vec<((f64, f64), (f64, f64))> = pts
                .par_iter()
                .map(|y| {
                    let w1 = ans.w1(y)?;
                    let (phi, psi) = perturbation(ans, fam, h, y)?;
                    let nt = nonlinear_terms(d, w1, kap * w1, phi, psi)?;
                    Ok(((phi, psi), nt.printed()))
                })
                .collect::<Result<Vec<_>>>()?;
            let phis: Vec<(f64, f64)> = vals.iter().map(|v| v.0).collect();
            let ns: Vec<(f64, f64)> = vals.iter().map(|v| v.1).collect();
            let np = norm_from_values(&ans.cfg, &pts, &phis, NormKind::Star).value;
            let nn = norm_from_values(&ans.cfg, &pts, &ns, NormKind::DoubleStar).value;
            if np == 0.0 {
                return Err(Error::InvalidInput("zero perturbation".into()));
            }
            rows.push(NonlinearRow {
                h,
                norm_n: nn,
                norm_phi: np,
                ratio: nn / np.powf(1.0 + delta),
            });
        }
        let hmax = rows
            .iter()
            .cloned()
            .fold(None::<NonlinearRow>, |b, r| match b {
                Some(bb) if bb.h >= r.h => Some(bb),
                _ => Some(r),
            })
            .expect("nonempty");
        let mx = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
        let mn = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
        families.push(NonlinearFamilyReport {
            family: fam,
            max_ratio_over_hmax: mx / hmax.ratio,
            spread: mx / mn,
            rows,
        });
    }
    Ok(NonlinearStudy { delta, families })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::symmetry_check;
    use crate::potentials::{builtin_potential, PotentialFamily, PotentialParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn d5() -> Dimension {
        Dimension::new(5).unwrap()
    }

    fn pot(fam: PotentialFamily, p0: f64, p2: f64) -> PotentialPair {
        let params = PotentialParams {
            p0,
            p2,
            q0: p0,
            q2: p2,
            weights: None,
        };
        builtin_potential(fam, &params, d5(), 1.0, vec![0.0; 3]).unwrap()
    }

    fn ansatz(k: usize, lambda: f64, c: CouplingData, pp: PotentialPair, cut: Cutoff) -> Ansatz {
        let cfg = PolygonConfig::new(k, 1.0, vec![0.0; 3], lambda, c).unwrap();
        Ansatz::new(cfg, pp, cut).unwrap()
    }

    #[test]
    fn far_outside_support_is_zero() {
        let a = ansatz(4, 30.0, CouplingData::decoupled(d5()), pot(PotentialFamily::Well, 1.0, 1.0), Cutoff::Default);
        let v = a.eval(&[3.0, 0.0, 0.5, 0.0, 0.0]).unwrap();
        assert_eq!((v.w1, v.w2, v.lap_w1, v.lap_w2), (0.0, 0.0, 0.0, 0.0));
        assert!(v.grad_w1.iter().all(|g| *g == 0.0));
        assert_eq!(a.residual(&[3.0, 0.0, 0.5, 0.0, 0.0], ResidualMode::Canonical).unwrap(), (0.0, 0.0));
        assert!(a.eval(&[0.0, 0.0, 0.0, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn center_value() {
        let c = CouplingData::symmetric(Dimension::new(6).unwrap(), 1.0).unwrap();
        let params = PotentialParams {
            p0: 1.0,
            p2: 0.0,
            q0: 1.0,
            q2: 0.0,
            weights: None,
        };
        let pp = builtin_potential(PotentialFamily::Constant, &params, c.n, 1.0, vec![0.0; 4]).unwrap();
        let cfg = PolygonConfig::new(1, 1.0, vec![0.0; 4], 50.0, c).unwrap();
        let a = Ansatz::new(cfg, pp, Cutoff::Default).unwrap();
        let v = a.w1(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let expect = c.s * 50f64.powf(2.0) * 24f64.powf(1.0);
        assert!((v - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn laplacian_matches_finite_differences() {
        let a = ansatz(3, 12.0, CouplingData::decoupled(d5()), pot(PotentialFamily::Well, 1.0, 1.0), Cutoff::Default);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let h = 1e-3 / 12.0;
        let mut checked = 0;
        while checked < 100 {
            // points in the tube, including the cutoff annulus
            let th = rng.random::<f64>() * std::f64::consts::TAU;
            let s = 0.2 * rng.random::<f64>();
            let r = 1.0 + s * (rng.random::<f64>() - 0.5) * 2.0;
            let y = [r * th.cos(), r * th.sin(), s * (rng.random::<f64>() - 0.5), 0.01, -0.02];
            let v = a.eval(&y).unwrap();
            if v.w1 == 0.0 {
                continue;
            }
            let mut fd = 0.0;
            for i in 0..5 {
                let mut p = y;
                let mut m = y;
                p[i] += h;
                m[i] -= h;
                fd += (a.w1(&p).unwrap() - 2.0 * v.w1 + a.w1(&m).unwrap()) / (h * h);
            }
            let scale = v.lap_w1.abs().max(1e-3 * v.w1 * 144.0);
            assert!((fd - v.lap_w1).abs() < 1e-4 * scale, "at {y:?}: fd {fd} vs {}", v.lap_w1);
            checked += 1;
        }
    }

    #[test]
    fn exact_region_residual_vanishes() {
        // P = Q = 0 surrogate: a constant potential of size 1e-300
        let a = ansatz(1, 40.0, CouplingData::decoupled(d5()), pot(PotentialFamily::Constant, 1e-300, 0.0), Cutoff::Default);
        for y in [[1.0, 0.0, 0.0, 0.0, 0.0], [1.02, 0.01, 0.0, 0.0, 0.01], [0.96, 0.0, 0.0, 0.02, 0.0]] {
            let (r1, r2) = a.residual(&y, ResidualMode::Canonical).unwrap();
            let w = a.w1(&y).unwrap();
            assert!(r1.abs() < 1e-10 * w.powf(d5().p()).max(1.0), "{r1}");
            assert!(r2.abs() < 1e-10 * w.powf(d5().p()).max(1.0));
        }
    }

    #[test]
    fn constant_potential_in_core() {
        let a = ansatz(1, 40.0, CouplingData::decoupled(d5()), pot(PotentialFamily::Constant, 0.7, 0.0), Cutoff::Default);
        let y = [1.03, 0.02, 0.0, 0.01, 0.0];
        let (r1, _) = a.residual(&y, ResidualMode::Canonical).unwrap();
        let w = a.w1(&y).unwrap();
        assert!((r1 - 0.7 * w).abs() < 1e-10 * w.powf(d5().p()));
    }

    #[test]
    fn coupled_modes_agree() {
        for (n, beta) in [(5usize, 0.5), (6, 1.0), (5, -0.25)] {
            let d = Dimension::new(n).unwrap();
            let roots = crate::bubbles::solve_kappa(beta, d, (0.2, 3.0)).unwrap();
            for root in roots {
                let Ok(c) = CouplingData::new(d, beta, root.kappa) else { continue };
                let params = PotentialParams {
                    p0: 1.0,
                    p2: 1.0,
                    q0: 2.0,
                    q2: 0.5,
                    weights: None,
                };
                let pp = builtin_potential(PotentialFamily::Well, &params, d, 1.0, vec![0.0; n - 2]).unwrap();
                let cfg = PolygonConfig::new(6, 1.0, vec![0.0; n - 2], 30.0, c).unwrap();
                let a = Ansatz::new(cfg, pp, Cutoff::Default).unwrap();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
                for _ in 0..200 {
                    let th = rng.random::<f64>() * std::f64::consts::TAU;
                    let s = 0.21 * rng.random::<f64>();
                    let al = rng.random::<f64>() * std::f64::consts::TAU;
                    let r = 1.0 + s * al.cos();
                    let mut y = vec![0.0; n];
                    y[0] = r * th.cos();
                    y[1] = r * th.sin();
                    y[2] = s * al.sin();
                    let can = a.residual(&y, ResidualMode::Canonical).unwrap();
                    let cor = a.residual(&y, ResidualMode::Corrected).unwrap();
                    let scale = a.w1(&y).unwrap().powf(d.p()).max(1.0) * 30f64.powi(2);
                    assert!((can.0 + cor.0).abs() < 1e-9 * scale, "N={n} beta={beta}");
                    assert!((can.1 + cor.1).abs() < 1e-9 * scale);
                }
            }
        }
    }

    #[test]
    fn printed_discrepancy_confined_to_annulus_when_decoupled() {
        let a = ansatz(4, 20.0, CouplingData::decoupled(d5()), pot(PotentialFamily::Well, 1.0, 1.0), Cutoff::Default);
        // core: xi = 1, printed = corrected for beta = 0
        let dd = a.printed_discrepancy(&[1.05, 0.0, 0.02, 0.0, 0.0]).unwrap();
        assert_eq!(dd, (0.0, 0.0));
        // annulus: xi^p != xi
        let dd = a.printed_discrepancy(&[1.15, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(dd.0.abs() > 0.0);
    }

    #[test]
    fn residual_is_symmetric() {
        let a = ansatz(5, 25.0, CouplingData::decoupled(d5()), pot(PotentialFamily::Well, 1.0, 1.0), Cutoff::Default);
        let sample: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let th = 0.13 * i as f64;
                let s = 0.004 * i as f64;
                vec![(1.0 + s) * th.cos(), (1.0 + s) * th.sin(), 0.3 * s, -0.1 * s, 0.05]
            })
            .collect();
        // absolute tolerance scaled to the residual size
        let f = ResidualField(&a, ResidualMode::Canonical);
        let scale = sample.iter().map(|y| f.eval(y).0.abs()).fold(0.0, f64::max);
        assert!(symmetry_check(&f, 5, 1e-10 * scale.max(1.0), &sample));
    }

    #[test]
    fn nonlinear_zero_and_specializations() {
        let n = d5();
        let z = nonlinear_terms(n, 2.0, 3.0, 0.0, 0.0).unwrap();
        assert_eq!((z.n11, z.n12, z.n21, z.n22), (0.0, 0.0, 0.0, 0.0));
        let (w1, w2, phi) = (2.0f64, 3.0f64, 0.4f64);
        let t = nonlinear_terms(n, w1, w2, phi, 0.0).unwrap();
        let q = n.q();
        let oracle = w2.powf(q) * ((w1 + phi).powf(q - 1.0) - w1.powf(q - 1.0) - (q - 1.0) * w1.powf(q - 2.0) * phi);
        assert!((t.n12 - oracle).abs() < 1e-13 * oracle.abs().max(1.0));
        assert!(matches!(nonlinear_terms(n, 1.0, 1.0, 0.6, 0.0), Err(Error::HalfBubble(_))));
    }

    proptest! {
        #[test]
        fn taylor_term_is_leading(w1 in 0.5f64..5.0, w2 in 0.5f64..5.0, a in -0.4f64..0.4, b in -0.4f64..0.4) {
            let n = d5();
            let h = 1e-3;
            let t = nonlinear_terms(n, w1, w2, h * a * w1, h * b * w2).unwrap();
            let l = nonlinear_taylor(n, w1, w2, h * a * w1, h * b * w2);
            let scale = h * h * (w1 + w2).powf(n.p());
            prop_assert!((t.n11 - l.n11).abs() < 1e-2 * scale);
            prop_assert!((t.n12 - l.n12).abs() < 1e-2 * scale);
            prop_assert!((t.n22 - l.n22).abs() < 1e-2 * scale);
        }
    }

    #[test]
    fn taylor_homogeneity_degree_two() {
        let a = ansatz(4, 20.0, CouplingData::decoupled(d5()), pot(PotentialFamily::Well, 1.0, 1.0), Cutoff::Default);
        let pts = sample_points(&a.cfg, a.cutoff.as_ref(), &SampleSpec::default());
        let norm = |h: f64| {
            let v: Vec<(f64, f64)> = pts
                .iter()
                .map(|y| {
                    let w = a.w1(y).unwrap();
                    nonlinear_taylor(d5(), w, w, h * w, h * w).printed()
                })
                .collect();
            norm_from_values(&a.cfg, &pts, &v, NormKind::DoubleStar).value
        };
        let r = norm(0.01) / norm(0.005);
        assert!((r - 4.0).abs() < 0.04);
    }

    #[test]
    fn superlinear_ratio_bounded() {
        let a = ansatz(6, 6.0 * 27.0, CouplingData::decoupled(d5()), pot(PotentialFamily::Well, 1.0, 1.0), Cutoff::Default);
        let hs: Vec<f64> = (1..=7).map(|i| 0.1 * 2f64.powi(-i)).collect();
        let st = nonlinear_estimate_study(&a, &hs, default_delta(d5()), &SampleSpec { symmetric: true, ..SampleSpec::default() }).unwrap();
        for f in &st.families {
            assert!(f.spread < 3.0, "{:?}", f);
        }
    }

    #[test]
    fn fit_needs_three_rows() {
        let row = |l: f64| ScalingRow {
            k: 1,
            lambda: l,
            norm: l.powf(-1.5),
            argmax: vec![],
            sample_size: 1,
        };
        assert!(fit_loglog(vec![row(1.0), row(2.0)]).is_err());
        let f = fit_loglog(vec![row(1.0), row(2.0), row(8.0)]).unwrap();
        assert!((f.slope + 1.5).abs() < 1e-12);
    }

    #[test]
    fn cutoff_only_decay_k1() {
        // constant tiny potential, fixed k = 1: only cutoff terms remain
        let pp = pot(PotentialFamily::Constant, 1e-300, 0.0);
        let mut rows = Vec::new();
        for l in [50.0, 100.0, 200.0, 400.0] {
            let a = ansatz(1, l, CouplingData::decoupled(d5()), pp.clone(), Cutoff::Default);
            let r = residual_norm(&a, &SampleSpec::default()).unwrap();
            rows.push(ScalingRow {
                k: 1,
                lambda: l,
                norm: r.value,
                argmax: r.argmax_point,
                sample_size: r.sample_size,
            });
        }
        let f = fit_loglog(rows).unwrap();
        assert!(f.slope <= -1.0, "slope {}", f.slope);
    }
}
