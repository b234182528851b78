//! Parametric potential families P, Q on (r, y'') and the hypothesis checks.

use crate::bubbles::{CouplingData, Dimension};
use crate::error::{Error, Result};
use crate::reduction::{degree_box, BoxDomain, DegreeReport};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialFamily {
    Well,
    Saddle,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialParams {
    pub p0: f64,
    #[serde(default)]
    pub p2: f64,
    pub q0: f64,
    #[serde(default)]
    pub q2: f64,
    /// Coefficients of the quadratic form in (r - r0, y'' - y0''); length N-1.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialPair {
    pub family: PotentialFamily,
    pub n: Dimension,
    pub r0: f64,
    pub y0: Vec<f64>,
    pub p0: f64,
    pub p2: f64,
    pub q0: f64,
    pub q2: f64,
    pub weights: Vec<f64>,
}

/// sigma(t) = t/(1+|t|) and its derivative.
#[inline]
pub fn sigma(t: f64) -> (f64, f64) {
    let a = 1.0 + t.abs();
    (t / a, 1.0 / (a * a))
}

pub fn builtin_potential(
    family: PotentialFamily,
    params: &PotentialParams,
    n: Dimension,
    r0: f64,
    y0: Vec<f64>,
) -> Result<PotentialPair> {
    let m = n.n() - 1;
    if y0.len() != n.n() - 2 {
        return Err(Error::InvalidInput(format!("y0 must have length {}", n.n() - 2)));
    }
    if !(r0 > 0.0) {
        return Err(Error::InvalidInput("r0 must be positive".into()));
    }
    let all = [params.p0, params.p2, params.q0, params.q2];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite potential parameter".into()));
    }
    let weights = match family {
        PotentialFamily::Constant => vec![0.0; m],
        PotentialFamily::Well => {
            let w = params.weights.clone().unwrap_or_else(|| vec![1.0; m]);
            if w.iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidInput("well weights must be nonnegative".into()));
            }
            w
        }
        PotentialFamily::Saddle => {
            let w = params.weights.clone().ok_or_else(|| {
                Error::InvalidInput("saddle family needs explicit weights".into())
            })?;
            if !(w.iter().any(|v| *v > 0.0) && w.iter().any(|v| *v < 0.0)) {
                return Err(Error::InvalidInput("saddle weights must have mixed signs".into()));
            }
            w
        }
    };
    if weights.len() != m {
        return Err(Error::InvalidInput(format!("weights must have length {m}")));
    }
    // ranges: well sigma in [0,1), saddle sigma in (-1,1)
    let (pmin, qmin) = match family {
        PotentialFamily::Constant => (params.p0, params.q0),
        PotentialFamily::Well => (params.p0 + params.p2.min(0.0), params.q0 + params.q2.min(0.0)),
        PotentialFamily::Saddle => (params.p0 - params.p2.abs(), params.q0 - params.q2.abs()),
    };
    if pmin < 0.0 || qmin < 0.0 {
        return Err(Error::InvalidInput("parameters produce negative potential values".into()));
    }
    // the constant family may vanish identically (P = Q = 0)
    if family != PotentialFamily::Constant && !(params.p0 > 0.0 && params.q0 > 0.0) {
        return Err(Error::InvalidInput("P and Q must be positive at the critical point".into()));
    }
    let (p2, q2) = match family {
        PotentialFamily::Constant => (0.0, 0.0),
        _ => (params.p2, params.q2),
    };
    Ok(PotentialPair {
        family,
        n,
        r0,
        y0,
        p0: params.p0,
        p2,
        q0: params.q0,
        q2,
        weights,
    })
}

impl PotentialPair {
    /// Quadratic form t(z) and its gradient in z = (r, y'').
    fn form(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let mut t = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            let c = if i == 0 { self.r0 } else { self.y0[i - 1] };
            let d = z[i] - c;
            t += w * d * d;
            grad[i] = 2.0 * w * d;
        }
        t
    }

    /// (P, Q) with gradients in z = (r, y'').
    pub fn eval_z(&self, z: &[f64], dp: &mut [f64], dq: &mut [f64]) -> (f64, f64) {
        let mut gt = [0.0; crate::bubbles::MAX_DIM];
        let m = self.weights.len();
        let t = self.form(z, &mut gt[..m]);
        let (sg, ds) = sigma(t);
        for i in 0..m {
            dp[i] = self.p2 * ds * gt[i];
            dq[i] = self.q2 * ds * gt[i];
        }
        (self.p0 + self.p2 * sg, self.q0 + self.q2 * sg)
    }

    pub fn pq_z(&self, z: &[f64]) -> (f64, f64) {
        let mut a = [0.0; crate::bubbles::MAX_DIM];
        let mut b = [0.0; crate::bubbles::MAX_DIM];
        let m = self.weights.len();
        self.eval_z(z, &mut a[..m], &mut b[..m])
    }

    /// Cylindrical coordinates (r, y'') of y.
    pub fn to_z(y: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(y.len() - 1);
        z.push((y[0] * y[0] + y[1] * y[1]).sqrt());
        z.extend_from_slice(&y[2..]);
        z
    }

    /// (P, Q) at a point of R^N.
    pub fn pq(&self, y: &[f64]) -> (f64, f64) {
        let mut z = [0.0; crate::bubbles::MAX_DIM];
        let m = y.len() - 1;
        z[0] = (y[0] * y[0] + y[1] * y[1]).sqrt();
        z[1..m].copy_from_slice(&y[2..]);
        self.pq_z(&z[..m])
    }

    /// (P, Q) and their R^N gradients.
    pub fn pq_grad(&self, y: &[f64], gp: &mut [f64], gq: &mut [f64]) -> (f64, f64) {
        let n = y.len();
        let m = n - 1;
        let mut z = [0.0; crate::bubbles::MAX_DIM];
        let r = (y[0] * y[0] + y[1] * y[1]).sqrt();
        z[0] = r;
        z[1..m].copy_from_slice(&y[2..]);
        let mut dp = [0.0; crate::bubbles::MAX_DIM];
        let mut dq = [0.0; crate::bubbles::MAX_DIM];
        let v = self.eval_z(&z[..m], &mut dp[..m], &mut dq[..m]);
        let (c0, c1) = if r > 0.0 { (y[0] / r, y[1] / r) } else { (0.0, 0.0) };
        gp[0] = dp[0] * c0;
        gp[1] = dp[0] * c1;
        gq[0] = dq[0] * c0;
        gq[1] = dq[0] * c1;
        for h in 2..n {
            gp[h] = dp[h - 1];
            gq[h] = dq[h - 1];
        }
        v
    }

    /// G = P + kappa^2 Q and its z-gradient.
    pub fn g(&self, kappa: f64, z: &[f64], grad: &mut [f64]) -> f64 {
        let m = z.len();
        let mut dp = [0.0; crate::bubbles::MAX_DIM];
        let mut dq = [0.0; crate::bubbles::MAX_DIM];
        let (p, q) = self.eval_z(z, &mut dp[..m], &mut dq[..m]);
        let k2 = kappa * kappa;
        for i in 0..m {
            grad[i] = dp[i] + k2 * dq[i];
        }
        p + k2 * q
    }

    /// G_w = r^2 (P + kappa^2 Q) and its z-gradient.
    pub fn g_weighted(&self, kappa: f64, z: &[f64], grad: &mut [f64]) -> f64 {
        let g = self.g(kappa, z, grad);
        let r = z[0];
        for v in grad.iter_mut() {
            *v *= r * r;
        }
        grad[0] += 2.0 * r * g;
        r * r * g
    }

    /// Uniform bound on P and Q.
    pub fn bound(&self) -> (f64, f64) {
        (self.p0 + self.p2.abs(), self.q0 + self.q2.abs())
    }

    pub fn critical_point(&self) -> Vec<f64> {
        let mut z = vec![self.r0];
        z.extend_from_slice(&self.y0);
        z
    }
}

/// Box in z = (r, y'') coordinates; coordinates with zero half-width are frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl SearchBox {
    pub fn active(&self) -> Vec<usize> {
        (0..self.half_width.len())
            .filter(|&i| self.half_width[i] > 0.0)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    /// r^2 (P + kappa^2 Q)
    Weighted,
    /// P + kappa^2 Q
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPointReport {
    pub combination: Combination,
    pub critical_point: Option<Vec<f64>>,
    pub gradient_norm: Option<f64>,
    pub newton_message: String,
    pub degree: Option<i64>,
    pub degree_report: Option<DegreeReport>,
    pub degree_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub weighted: CriticalPointReport,
    pub unweighted: CriticalPointReport,
    pub min_p: f64,
    pub min_q: f64,
    pub max_p: f64,
    pub max_q: f64,
    pub bound_p: f64,
    pub bound_q: f64,
    pub positive_on_box: bool,
    pub bounded: bool,
}

fn grad_of(pp: &PotentialPair, kappa: f64, comb: Combination, z: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; z.len()];
    match comb {
        Combination::Weighted => pp.g_weighted(kappa, z, &mut g),
        Combination::Unweighted => pp.g(kappa, z, &mut g),
    };
    g
}

/// Damped Newton for the gradient restricted to the active coordinates.
fn newton_critical(
    pp: &PotentialPair,
    kappa: f64,
    comb: Combination,
    bx: &SearchBox,
) -> std::result::Result<(Vec<f64>, f64), String> {
    let act = bx.active();
    let m = act.len();
    let mut z = pp.critical_point();
    for (i, c) in bx.center.iter().enumerate() {
        if bx.half_width[i] == 0.0 {
            z[i] = *c;
        }
    }
    let gnorm = |z: &[f64]| {
        let g = grad_of(pp, kappa, comb, z);
        act.iter().map(|&i| g[i] * g[i]).sum::<f64>().sqrt()
    };
    for _ in 0..100 {
        let g = grad_of(pp, kappa, comb, &z);
        let gn = act.iter().map(|&i| g[i] * g[i]).sum::<f64>().sqrt();
        if gn < 1e-10 {
            let inside = act.iter().all(|&i| (z[i] - bx.center[i]).abs() <= bx.half_width[i]);
            if !inside {
                return Err(format!("critical point {z:?} lies outside the search box"));
            }
            return Ok((z, gn));
        }
        let mut jac = nalgebra::DMatrix::<f64>::zeros(m, m);
        for (b, &j) in act.iter().enumerate() {
            let h = 1e-6 * (1.0 + z[j].abs());
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let gp = grad_of(pp, kappa, comb, &zp);
            let gm = grad_of(pp, kappa, comb, &zm);
            for (a, &i) in act.iter().enumerate() {
                jac[(a, b)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        let rhs = nalgebra::DVector::from_iterator(m, act.iter().map(|&i| -g[i]));
        let step = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| "singular Hessian".to_string())?;
        let mut alpha = 1.0;
        loop {
            let mut zn = z.clone();
            for (a, &i) in act.iter().enumerate() {
                zn[i] += alpha * step[a];
            }
            if zn[0] > 0.0 && gnorm(&zn) < gn * (1.0 - 1e-4 * alpha) {
                z = zn;
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-10 {
                return Err(format!("line search stalled at |grad| = {gn:.3e}"));
            }
        }
        for (i, c) in bx.center.iter().enumerate() {
            if bx.half_width[i] > 0.0 && (z[i] - c).abs() > 10.0 * bx.half_width[i] {
                return Err("Newton iterate left the search region".into());
            }
        }
    }
    Err("no convergence in 100 iterations".into())
}

fn critical_report(
    pp: &PotentialPair,
    kappa: f64,
    comb: Combination,
    bx: &SearchBox,
    resolution: usize,
) -> CriticalPointReport {
    let (critical_point, gradient_norm, newton_message) = match newton_critical(pp, kappa, comb, bx) {
        Ok((z, g)) => (Some(z), Some(g), "converged".to_string()),
        Err(e) => (None, None, e),
    };
    let act = bx.active();
    let frozen = bx.center.clone();
    let lo: Vec<f64> = act.iter().map(|&i| bx.center[i] - bx.half_width[i]).collect();
    let hi: Vec<f64> = act.iter().map(|&i| bx.center[i] + bx.half_width[i]).collect();
    let map = |x: &[f64]| {
        let mut z = frozen.clone();
        for (a, &i) in act.iter().enumerate() {
            z[i] = x[a];
        }
        let g = grad_of(pp, kappa, comb, &z);
        act.iter().map(|&i| g[i]).collect::<Vec<f64>>()
    };
    let (degree, degree_report, degree_error) = match degree_box(&map, &BoxDomain { lo, hi }, resolution) {
        Ok(r) => (Some(r.degree), Some(r), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    CriticalPointReport {
        combination: comb,
        critical_point,
        gradient_norm,
        newton_message,
        degree,
        degree_report,
        degree_error,
    }
}

/// Locates critical points of G_w and G, computes their box degrees and scans P, Q.
pub fn check_hypotheses(pp: &PotentialPair, c: &CouplingData, bx: &SearchBox) -> Result<HypothesisReport> {
    let m = pp.n.n() - 1;
    if bx.center.len() != m || bx.half_width.len() != m {
        return Err(Error::InvalidInput(format!("box must have {m} coordinates")));
    }
    let act = bx.active();
    if act.is_empty() || act.len() > 3 {
        return Err(Error::InvalidInput("box must have 1 to 3 active coordinates".into()));
    }
    if bx.center[0] - bx.half_width[0] <= 0.0 {
        return Err(Error::InvalidInput("r-side of the box must be positive".into()));
    }
    let crit = pp.critical_point();
    for &i in &act {
        if (crit[i] - bx.center[i]).abs() > bx.half_width[i] {
            return Err(Error::InvalidInput("box does not contain the declared critical point".into()));
        }
    }
    let resolution = 64;
    let weighted = critical_report(pp, c.kappa, Combination::Weighted, bx, resolution);
    let unweighted = critical_report(pp, c.kappa, Combination::Unweighted, bx, resolution);
    // scan grid over the box (3x the half widths, all coordinates)
    let pts = 9usize;
    let mut min_p = f64::INFINITY;
    let mut min_q = f64::INFINITY;
    let mut max_p = f64::NEG_INFINITY;
    let mut max_q = f64::NEG_INFINITY;
    let total = pts.pow(act.len() as u32);
    for idx in 0..total {
        let mut z = bx.center.clone();
        let mut rem = idx;
        for &i in &act {
            let a = rem % pts;
            rem /= pts;
            let u = -1.0 + 2.0 * a as f64 / (pts - 1) as f64;
            z[i] = (bx.center[i] + 3.0 * u * bx.half_width[i]).max(if i == 0 { 1e-9 } else { f64::NEG_INFINITY });
        }
        let (p, q) = pp.pq_z(&z);
        min_p = min_p.min(p);
        min_q = min_q.min(q);
        max_p = max_p.max(p);
        max_q = max_q.max(q);
    }
    let (bp, bq) = pp.bound();
    Ok(HypothesisReport {
        weighted,
        unweighted,
        min_p,
        min_q,
        max_p,
        max_q,
        bound_p: bp,
        bound_q: bq,
        positive_on_box: min_p > 0.0 && min_q > 0.0,
        bounded: max_p <= bp && max_q <= bq,
    })
}
