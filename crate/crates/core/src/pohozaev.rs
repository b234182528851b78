//! Local Pohozaev identities on tube domains and the concentration
//! integrals behind the reduced equations.

use crate::bubbles::{bubble_profile, CouplingData, Dimension, MAX_DIM};
use crate::error::{Error, Result};
use crate::field::{dist2, PairField};
use crate::geometry::CutoffSpec;
use crate::potentials::PotentialPair;
use crate::quadrature::{
    constants_closed, tube_boundary_integral_vec, tube_integral_focused_vec, McEstimate, QuadratureBudget, TubeDomain,
};
use crate::reduction::ReducedState;
use crate::residual::{ppow, Ansatz};
use serde::{Deserialize, Serialize};

/// Values, gradients and Laplacians of a field pair at one point.
#[derive(Debug, Clone, Copy)]
pub struct Jet {
    pub u: f64,
    pub v: f64,
    pub gu: [f64; MAX_DIM],
    pub gv: [f64; MAX_DIM],
    pub lu: f64,
    pub lv: f64,
}

/// A field pair with second derivatives and a hint of where it concentrates.
pub trait JetField: Sync {
    fn dim(&self) -> usize;
    fn jet(&self, y: &[f64]) -> Jet;
    /// Concentration points and scale, used for importance sampling.
    fn concentration(&self) -> (Vec<Vec<f64>>, f64);
}

impl JetField for Ansatz {
    fn dim(&self) -> usize {
        self.cfg.n()
    }
    fn jet(&self, y: &[f64]) -> Jet {
        let mut j = Jet {
            u: f64::NAN,
            v: f64::NAN,
            gu: [0.0; MAX_DIM],
            gv: [0.0; MAX_DIM],
            lu: f64::NAN,
            lv: f64::NAN,
        };
        if let Ok(a) = self.eval(y) {
            j.u = a.w1;
            j.v = a.w2;
            j.lu = a.lap_w1;
            j.lv = a.lap_w2;
            j.gu[..y.len()].copy_from_slice(&a.grad_w1);
            j.gv[..y.len()].copy_from_slice(&a.grad_w2);
        }
        j
    }
    fn concentration(&self) -> (Vec<Vec<f64>>, f64) {
        (self.centers.clone(), self.cfg.lambda)
    }
}

/// (a w, b w) for a single bubble w = w_{center, lambda}; with a = s, b = kappa s
/// and zero potentials this solves the coupled system exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct BubblePair {
    pub n: Dimension,
    pub center: Vec<f64>,
    pub lambda: f64,
    pub a: f64,
    pub b: f64,
}

impl BubblePair {
    pub fn synchronized(c: &CouplingData, center: Vec<f64>, lambda: f64) -> Self {
        BubblePair {
            n: c.n,
            center,
            lambda,
            a: c.s,
            b: c.kappa * c.s,
        }
    }
}

impl JetField for BubblePair {
    fn dim(&self) -> usize {
        self.n.n()
    }
    fn jet(&self, y: &[f64]) -> Jet {
        let l = self.lambda;
        let r2 = dist2(y, &self.center);
        let w = bubble_profile(self.n, l, r2);
        let nm2 = self.n.nf() - 2.0;
        let g = -nm2 * l * l * w / (1.0 + l * l * r2);
        let mut j = Jet {
            u: self.a * w,
            v: self.b * w,
            gu: [0.0; MAX_DIM],
            gv: [0.0; MAX_DIM],
            lu: -self.a * w.powf(self.n.p()),
            lv: -self.b * w.powf(self.n.p()),
        };
        for i in 0..y.len() {
            j.gu[i] = self.a * g * (y[i] - self.center[i]);
            j.gv[i] = self.b * g * (y[i] - self.center[i]);
        }
        j
    }
    fn concentration(&self) -> (Vec<Vec<f64>>, f64) {
        (vec![self.center.clone()], self.lambda)
    }
}

/// u_mu(y) = mu^{(N-2)/2} u(mu y), same for v.
pub struct Rescaled<'a> {
    pub inner: &'a dyn JetField,
    pub mu: f64,
}

impl JetField for Rescaled<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn jet(&self, y: &[f64]) -> Jet {
        let n = y.len();
        let a = (n as f64 - 2.0) / 2.0;
        let z: Vec<f64> = y.iter().map(|v| v * self.mu).collect();
        let mut j = self.inner.jet(&z);
        let f0 = self.mu.powf(a);
        let f1 = f0 * self.mu;
        let f2 = f1 * self.mu;
        j.u *= f0;
        j.v *= f0;
        for i in 0..n {
            j.gu[i] *= f1;
            j.gv[i] *= f1;
        }
        j.lu *= f2;
        j.lv *= f2;
        j
    }
    fn concentration(&self) -> (Vec<Vec<f64>>, f64) {
        let (c, l) = self.inner.concentration();
        (
            c.into_iter().map(|x| x.into_iter().map(|v| v / self.mu).collect()).collect(),
            l * self.mu,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "axis")]
pub enum Identity {
    Translation(usize),
    Dilation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PohozaevReport {
    pub identity: Identity,
    pub rho: f64,
    /// Volume side of the identity.
    pub volume: McEstimate,
    /// Boundary side of the identity.
    pub boundary: McEstimate,
    /// volume - boundary; zero for exact solutions.
    pub residual: f64,
    pub residual_std_error: f64,
    /// Integral of the equations against the multiplier, which equals boundary - volume.
    pub multiplier_form: McEstimate,
    /// multiplier_form - (boundary - volume); zero up to quadrature error for any fields.
    pub form_gap: f64,
    pub form_gap_std_error: f64,
    /// Potential-gradient part of the volume side.
    pub potential_gradient_term: McEstimate,
}

impl PohozaevReport {
    /// |residual| in units of its std-error.
    pub fn sigmas(&self) -> f64 {
        if self.residual_std_error > 0.0 {
            self.residual.abs() / self.residual_std_error
        } else if self.residual == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

struct Ctx<'a> {
    n: usize,
    d: Dimension,
    beta: f64,
    pp: &'a PotentialPair,
}

impl Ctx<'_> {
    /// Equation residuals E_1, E_2 at a jet.
    fn equations(&self, j: &Jet, p: f64, q: f64) -> (f64, f64) {
        let (dp, dq) = (self.d.p(), self.d.q());
        let e1 = -j.lu + p * j.u - ppow(j.u, dp) - 0.5 * self.beta * ppow(j.u, dq - 1.0) * ppow(j.v, dq);
        let e2 = -j.lv + q * j.v - ppow(j.v, dp) - 0.5 * self.beta * ppow(j.v, dq - 1.0) * ppow(j.u, dq);
        (e1, e2)
    }

    fn powers(&self, j: &Jet) -> f64 {
        let ts = self.d.two_star();
        let q = self.d.q();
        (ppow(j.u, ts) + ppow(j.v, ts)) / ts + self.beta / ts * ppow(j.u, q) * ppow(j.v, q)
    }
}

fn validate(fields: &dyn JetField, pp: &PotentialPair, d: &TubeDomain) -> Result<()> {
    if fields.dim() != d.dim() || pp.n.n() != d.dim() {
        return Err(Error::InvalidInput("fields, potential and tube dimensions differ".into()));
    }
    if !(d.rho > 0.0 && d.rho < d.r0) {
        return Err(Error::InvalidInput("tube radius must lie in (0, r0)".into()));
    }
    Ok(())
}

fn finish(identity: Identity, rho: f64, vol: &[McEstimate], bnd: McEstimate) -> PohozaevReport {
    let volume = vol[0];
    let m = vol[1];
    let residual = volume.value - bnd.value;
    let residual_std_error = (volume.std_error.powi(2) + bnd.std_error.powi(2)).sqrt();
    PohozaevReport {
        identity,
        rho,
        volume,
        boundary: bnd,
        residual,
        residual_std_error,
        multiplier_form: m,
        form_gap: m.value - (bnd.value - volume.value),
        form_gap_std_error: (m.std_error.powi(2) + residual_std_error.powi(2)).sqrt(),
        potential_gradient_term: vol[2],
    }
}

/// Translation identity along axis i:
/// (1/2) int_D (d_i P u^2 + d_i Q v^2) = boundary terms.
pub fn pohozaev_translation(
    fields: &dyn JetField,
    pp: &PotentialPair,
    c: &CouplingData,
    d: &TubeDomain,
    axis: usize,
    budget: &QuadratureBudget,
) -> Result<PohozaevReport> {
    validate(fields, pp, d)?;
    let n = d.dim();
    if axis >= n {
        return Err(Error::InvalidInput("axis out of range".into()));
    }
    let ctx = Ctx {
        n,
        d: c.n,
        beta: c.beta,
        pp,
    };
    let (centers, lambda) = fields.concentration();
    let vol = tube_integral_focused_vec(
        |y, out| {
            let j = fields.jet(y);
            let mut gp = [0.0; MAX_DIM];
            let mut gq = [0.0; MAX_DIM];
            let (p, q) = ctx.pp.pq_grad(y, &mut gp[..ctx.n], &mut gq[..ctx.n]);
            let pot = 0.5 * (gp[axis] * j.u * j.u + gq[axis] * j.v * j.v);
            let (e1, e2) = ctx.equations(&j, p, q);
            out[0] = pot;
            out[1] = e1 * j.gu[axis] + e2 * j.gv[axis];
            out[2] = pot;
        },
        3,
        d,
        &centers,
        lambda,
        budget,
    )?;
    let bnd = tube_boundary_integral_vec(
        |y, nu, out| {
            let j = fields.jet(y);
            let (p, q) = ctx.pp.pq(y);
            let dnu: f64 = (0..ctx.n).map(|i| nu[i] * j.gu[i]).sum();
            let dnv: f64 = (0..ctx.n).map(|i| nu[i] * j.gv[i]).sum();
            let g2: f64 = (0..ctx.n).map(|i| j.gu[i] * j.gu[i] + j.gv[i] * j.gv[i]).sum();
            out[0] = -dnu * j.gu[axis] - dnv * j.gv[axis]
                + nu[axis] * (0.5 * g2 + 0.5 * (p * j.u * j.u + q * j.v * j.v) - ctx.powers(&j));
        },
        1,
        d,
        budget,
    )?[0];
    Ok(finish(Identity::Translation(axis), d.rho, &vol, bnd))
}

/// Dilation identity with multiplier (y - center) . grad:
/// ((N-2)/2) int |grad|^2 + (1/2) int ((N P + <y,grad P>) u^2 + same for v)
/// - (N/2*) int (u^{2*} + v^{2*} + beta u^{2*/2} v^{2*/2}) = boundary terms.
pub fn pohozaev_dilation(
    fields: &dyn JetField,
    pp: &PotentialPair,
    c: &CouplingData,
    d: &TubeDomain,
    center: &[f64],
    budget: &QuadratureBudget,
) -> Result<PohozaevReport> {
    validate(fields, pp, d)?;
    let n = d.dim();
    if center.len() != n {
        return Err(Error::InvalidInput("dilation center has wrong dimension".into()));
    }
    let ctx = Ctx {
        n,
        d: c.n,
        beta: c.beta,
        pp,
    };
    let nf = n as f64;
    let (centers, lambda) = fields.concentration();
    let vol = tube_integral_focused_vec(
        |y, out| {
            let j = fields.jet(y);
            let mut gp = [0.0; MAX_DIM];
            let mut gq = [0.0; MAX_DIM];
            let (p, q) = ctx.pp.pq_grad(y, &mut gp[..n], &mut gq[..n]);
            let mut ygp = 0.0;
            let mut ygq = 0.0;
            let mut ygu = 0.0;
            let mut ygv = 0.0;
            let mut g2 = 0.0;
            for i in 0..n {
                let x = y[i] - center[i];
                ygp += x * gp[i];
                ygq += x * gq[i];
                ygu += x * j.gu[i];
                ygv += x * j.gv[i];
                g2 += j.gu[i] * j.gu[i] + j.gv[i] * j.gv[i];
            }
            let pot = 0.5 * ((nf * p + ygp) * j.u * j.u + (nf * q + ygq) * j.v * j.v);
            out[0] = 0.5 * (nf - 2.0) * g2 + pot - nf * ctx.powers(&j);
            let (e1, e2) = ctx.equations(&j, p, q);
            out[1] = e1 * ygu + e2 * ygv;
            out[2] = 0.5 * (ygp * j.u * j.u + ygq * j.v * j.v);
        },
        3,
        d,
        &centers,
        lambda,
        budget,
    )?;
    let bnd = tube_boundary_integral_vec(
        |y, nu, out| {
            let j = fields.jet(y);
            let (p, q) = ctx.pp.pq(y);
            let mut ynu = 0.0;
            let mut ygu = 0.0;
            let mut ygv = 0.0;
            let mut dnu = 0.0;
            let mut dnv = 0.0;
            let mut g2 = 0.0;
            for i in 0..n {
                let x = y[i] - center[i];
                ynu += x * nu[i];
                ygu += x * j.gu[i];
                ygv += x * j.gv[i];
                dnu += nu[i] * j.gu[i];
                dnv += nu[i] * j.gv[i];
                g2 += j.gu[i] * j.gu[i] + j.gv[i] * j.gv[i];
            }
            out[0] = -dnu * ygu - dnv * ygv + ynu * (0.5 * g2 + 0.5 * (p * j.u * j.u + q * j.v * j.v) - ctx.powers(&j));
        },
        1,
        d,
        budget,
    )?[0];
    Ok(finish(Identity::Dilation, d.rho, &vol, bnd))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoSelection {
    pub rho: f64,
    pub candidates: Vec<f64>,
    pub energies: Vec<McEstimate>,
}

/// Candidates 3 delta + delta i/(n+1), i = 1..n; picks the smallest boundary
/// energy int (|grad phi|^2 + phi^2 + |phi|^{2*} + same for psi), first on ties.
pub fn select_rho(
    fields: &dyn PairField,
    spec: &CutoffSpec,
    n_candidates: usize,
    budget: &QuadratureBudget,
) -> Result<RhoSelection> {
    if n_candidates == 0 {
        return Err(Error::InvalidInput("need at least one candidate".into()));
    }
    let n = fields.dim();
    let ts = 2.0 * n as f64 / (n as f64 - 2.0);
    let candidates: Vec<f64> = (1..=n_candidates)
        .map(|i| spec.delta * (3.0 + i as f64 / (n_candidates + 1) as f64))
        .collect();
    let mut energies = Vec::new();
    for &rho in &candidates {
        let d = TubeDomain::new(spec.r0, spec.y0_2.clone(), rho)?;
        let e = tube_boundary_integral_vec(
            |y, _nu, out| {
                let mut gu = [0.0; MAX_DIM];
                let mut gv = [0.0; MAX_DIM];
                let (u, v) = fields.eval_grad(y, &mut gu[..n], &mut gv[..n]);
                let g2: f64 = (0..n).map(|i| gu[i] * gu[i] + gv[i] * gv[i]).sum();
                out[0] = g2 + u * u + v * v + u.abs().powf(ts) + v.abs().powf(ts);
            },
            1,
            &d,
            budget,
        )?[0];
        energies.push(e);
    }
    let mut best = 0;
    for (i, e) in energies.iter().enumerate() {
        if e.value < energies[best].value {
            best = i;
        }
    }
    Ok(RhoSelection {
        rho: candidates[best],
        candidates,
        energies,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub k: usize,
    pub lambda: f64,
    pub integral: McEstimate,
    /// k g(rbar, ybar'') B_U / lambda^2
    pub prediction: f64,
    pub ratio: f64,
    pub ratio_std_error: f64,
}

/// int_D g u_k^2 against k g(rbar, ybar'') B_U / lambda^2, with u_k = W_1.
pub fn concentration(ans: &Ansatz, g: &(dyn Fn(&[f64]) -> f64 + Sync), d: &TubeDomain, budget: &QuadratureBudget) -> Result<ConcentrationReport> {
    let cfg = &ans.cfg;
    let (b_w, _) = constants_closed(cfg.dim());
    let b_u = cfg.coupling.s * cfg.coupling.s * b_w;
    let mut xbar = vec![cfg.rbar, 0.0];
    xbar.extend_from_slice(&cfg.ybar2);
    let prediction = cfg.k as f64 * g(&xbar) * b_u / (cfg.lambda * cfg.lambda);
    let integral = tube_integral_focused_vec(
        |y, out| {
            let w = ans.w1(y).unwrap_or(f64::NAN);
            out[0] = g(y) * w * w;
        },
        1,
        d,
        &ans.centers,
        cfg.lambda,
        budget,
    )?[0];
    Ok(ConcentrationReport {
        k: cfg.k,
        lambda: cfg.lambda,
        integral,
        prediction,
        ratio: integral.value / prediction,
        ratio_std_error: integral.std_error / prediction.abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedEquationsReport {
    /// lambda^2/(k B_U) int_D d_i G u_k^2 for i over (r, y'').
    pub components: Vec<McEstimate>,
    /// Pointwise d_i G(rbar, ybar'').
    pub prediction: Vec<f64>,
    /// lambda^2/(k B_U) int_D (2r)^{-1} d_r(r^2 G) u_k^2 and its pointwise value.
    pub weighted_radial: McEstimate,
    pub weighted_radial_prediction: f64,
    pub max_abs_gap: f64,
}

/// Tube-integrated reduced equations for the ansatz at a solved state, with
/// G = P + kappa^2 Q.
pub fn reduced_equations_residual(
    state: &ReducedState,
    k: usize,
    pp: &PotentialPair,
    c: &CouplingData,
    cutoff: &CutoffSpec,
    rho: f64,
    budget: &QuadratureBudget,
) -> Result<ReducedEquationsReport> {
    let n = c.n;
    let lambda = state.lambda(k, n);
    let cfg = crate::geometry::PolygonConfig::new(k, state.rbar, state.ybar2.clone(), lambda, *c)?;
    let ans = Ansatz::new(cfg, pp.clone(), crate::residual::Cutoff::Spec(cutoff.clone()))?;
    let d = TubeDomain::new(cutoff.r0, cutoff.y0_2.clone(), rho)?;
    let m = n.n() - 1;
    let (b_w, _) = constants_closed(n);
    let norm = lambda * lambda / (k as f64 * c.s * c.s * b_w);
    let est = tube_integral_focused_vec(
        |y, out| {
            let w = ans.w1(y).unwrap_or(f64::NAN);
            let z = PotentialPair::to_z(y);
            let mut gz = vec![0.0; m];
            let g = pp.g(c.kappa, &z, &mut gz);
            for i in 0..m {
                out[i] = norm * gz[i] * w * w;
            }
            out[m] = norm * (g + 0.5 * z[0] * gz[0]) * w * w;
        },
        m + 1,
        &d,
        &ans.centers,
        lambda,
        budget,
    )?;
    let z = state.z();
    let mut gz = vec![0.0; m];
    let g = pp.g(c.kappa, &z, &mut gz);
    let components: Vec<McEstimate> = est[..m].to_vec();
    let max_abs_gap = components
        .iter()
        .zip(&gz)
        .map(|(a, b)| (a.value - b).abs())
        .fold(0.0, f64::max);
    Ok(ReducedEquationsReport {
        components,
        prediction: gz.clone(),
        weighted_radial: est[m],
        weighted_radial_prediction: g + 0.5 * z[0] * gz[0],
        max_abs_gap,
    })
}
