//! Finite-dimensional reduction: interaction sums, the energy lambda-derivative,
//! the reduced map F(t, rbar, ybar''), Newton solving and Brouwer degree on boxes.

use crate::bubbles::{CouplingData, Dimension};
use crate::error::{Error, Result};
use crate::geometry::{center_distance, polygon_centers, PolygonConfig};
use crate::potentials::PotentialPair;
use crate::quadrature::{constants_closed, mc_integral_vec, sphere_area, Constants, McEstimate, Mixture, QuadratureBudget, TubeDomain};
use crate::residual::{Ansatz, Cutoff, ResidualMode};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Compensated (Neumaier) summation.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for x in it {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionSum {
    /// sum_{j=2}^k |x_1 - x_j|^{2-N} lambda^{1-N}
    pub sum: f64,
    /// sum * lambda^{N-1}
    pub normalized: f64,
}

pub fn interaction_sum(k: usize, rbar: f64, lambda: f64, n: Dimension) -> Result<InteractionSum> {
    if k < 2 {
        return Err(Error::InvalidInput("interaction sum needs k >= 2".into()));
    }
    if !(rbar > 0.0 && lambda > 0.0) {
        return Err(Error::InvalidInput("rbar and lambda must be positive".into()));
    }
    let e = n.n() as i32 - 2;
    let normalized = neumaier_sum((1..k).map(|j| center_distance(k, rbar, j).powi(-e)));
    Ok(InteractionSum {
        sum: normalized * lambda.powi(-(n.n() as i32 - 1)),
        normalized,
    })
}

/// Pairwise sum from explicit center coordinates.
pub fn interaction_sum_brute(cfg: &PolygonConfig) -> Result<InteractionSum> {
    if cfg.k < 2 {
        return Err(Error::InvalidInput("interaction sum needs k >= 2".into()));
    }
    let xs = polygon_centers(cfg);
    let e = cfg.n() as i32 - 2;
    let normalized = neumaier_sum(xs[1..].iter().map(|x| {
        let d2 = neumaier_sum(x.iter().zip(&xs[0]).map(|(a, b)| (a - b) * (a - b)));
        d2.sqrt().powi(-e)
    }));
    Ok(InteractionSum {
        sum: normalized * cfg.lambda.powi(-(cfg.n() as i32 - 1)),
        normalized,
    })
}

/// Coefficient A of sum_j |x_1-x_j|^{2-N} lambda^{1-N} in the lambda-derivative
/// of the ansatz energy: (1 + kappa^2) s^2 ((N-2)/2) c_N int w^{2*-1}, with
/// c_N int w^{2*-1} = (N-2) omega_{N-1} (N(N-2))^{(N-2)/2}.
pub fn interaction_coefficient(c: &CouplingData) -> f64 {
    let n = c.n;
    let nf = n.nf();
    let flux = (nf - 2.0) * sphere_area(n.n()) * (nf * (nf - 2.0)).powf((nf - 2.0) / 2.0);
    (1.0 + c.kappa * c.kappa) * c.s * c.s * 0.5 * (nf - 2.0) * flux
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyDlambdaReport {
    pub k: usize,
    pub lambda: f64,
    pub lhs: McEstimate,
    pub rhs: f64,
    pub potential_part: f64,
    pub interaction_part: f64,
    /// (lhs - rhs) / (k lambda^{-3})
    pub normalized_gap: f64,
    pub normalized_gap_std_error: f64,
    pub interaction_coefficient: f64,
}

/// Numeric int R_1 dW_1/dlambda + R_2 dW_2/dlambda against the asymptotic
/// k[-B_U P/lambda^3 - B_V Q/lambda^3 + A sum_j lambda^{1-N}|x_1-x_j|^{2-N}].
pub fn energy_dlambda(cfg: &PolygonConfig, pp: &PotentialPair, cutoff: &Cutoff, budget: &QuadratureBudget) -> Result<EnergyDlambdaReport> {
    let ans = Ansatz::new(cfg.clone(), pp.clone(), cutoff.clone())?;
    let n = cfg.dim();
    let c = cfg.coupling;
    let (b_w, _) = constants_closed(n);
    let b_u = c.s * c.s * b_w;
    let b_v = c.kappa * c.kappa * b_u;
    let tube = match &ans.cutoff {
        Some(cs) => Some(TubeDomain::new(cs.r0, cs.y0_2.clone(), cs.support_radius())?),
        None => None,
    };
    let centers = polygon_centers(cfg);
    let mix = Mixture::bubbles(cfg.n(), &centers, cfg.lambda, tube);
    let lhs = mc_integral_vec(
        |z, out| {
            if let Ok(r) = ans.residual(z, ResidualMode::Canonical) {
                let (d1, d2) = ans.d_lambda(z);
                out[0] = r.0 * d1 + r.1 * d2;
            }
        },
        1,
        &mix,
        budget,
    )?[0];
    let mut zb = vec![cfg.rbar];
    zb.extend_from_slice(&cfg.ybar2);
    let (p, q) = pp.pq_z(&zb);
    let kf = cfg.k as f64;
    let l = cfg.lambda;
    let potential_part = kf * (-b_u * p - b_v * q) / l.powi(3);
    let a = interaction_coefficient(&c);
    let interaction_part = if cfg.k >= 2 {
        kf * a * interaction_sum(cfg.k, cfg.rbar, l, n)?.sum
    } else {
        0.0
    };
    let rhs = potential_part + interaction_part;
    let scale = kf / l.powi(3);
    Ok(EnergyDlambdaReport {
        k: cfg.k,
        lambda: l,
        lhs,
        rhs,
        potential_part,
        interaction_part,
        normalized_gap: (lhs.value - rhs) / scale,
        normalized_gap_std_error: lhs.std_error / scale,
        interaction_coefficient: a,
    })
}

/// t-balance coefficients: F_t = -b_u G / t^3 + c_bal / t^{N-1}.
fn t_component(n: Dimension, consts: &Constants, g: f64, t: f64) -> f64 {
    -consts.b_u * g / t.powi(3) + consts.c1_coupled / t.powi(n.n() as i32 - 1)
}

/// Closed-form root t* = [C_1(1 + beta kappa^{2*/2}) / (B_U G)]^{1/(N-4)}.
pub fn t_star(n: Dimension, consts: &Constants, g: f64) -> Result<f64> {
    if !(g > 0.0) {
        return Err(Error::Domain(format!("G = {g} must be positive for the t-balance")));
    }
    Ok((consts.c1_coupled / (consts.b_u * g)).powf(1.0 / (n.nf() - 4.0)))
}

/// F(t, rbar, ybar'') = (d_rbar G, grad_ybar'' G, -B_U G/t^3 + C_1(1+beta kappa^{2*/2})/t^{N-1}),
/// G = P + kappa^2 Q. Output length N.
#[allow(non_snake_case)]
pub fn reduced_F(t: f64, z: &[f64], pp: &PotentialPair, c: &CouplingData, consts: &Constants) -> Result<Vec<f64>> {
    if !(z[0] > 0.0) {
        return Err(Error::InvalidInput("rbar must be positive".into()));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidInput("t must be positive".into()));
    }
    let m = z.len();
    let mut out = vec![0.0; m + 1];
    let g = pp.g(c.kappa, z, &mut out[..m]);
    out[m] = t_component(c.n, consts, g, t);
    Ok(out)
}

/// Audit: (2 rbar)^{-1} d_rbar(rbar^2 G), the r-weighted radial equation.
pub fn weighted_radial_component(z: &[f64], pp: &PotentialPair, c: &CouplingData) -> f64 {
    let mut g = vec![0.0; z.len()];
    pp.g_weighted(c.kappa, z, &mut g);
    g[0] / (2.0 * z[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedBox {
    pub t_lo: f64,
    pub t_hi: f64,
    /// Center and half-widths in (rbar, ybar''); zero half-width freezes a coordinate.
    pub z_center: Vec<f64>,
    pub z_half: Vec<f64>,
}

impl ReducedBox {
    pub fn contains(&self, t: f64, z: &[f64]) -> bool {
        t >= self.t_lo
            && t <= self.t_hi
            && z.iter()
                .zip(&self.z_center)
                .zip(&self.z_half)
                .all(|((v, c), h)| (v - c).abs() <= h.max(1e-300) || (*h == 0.0 && v == c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    pub t: f64,
    pub rbar: f64,
    pub ybar2: Vec<f64>,
    pub f: Vec<f64>,
    pub f_norm: f64,
    pub jacobian_condition: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

impl ReducedState {
    pub fn z(&self) -> Vec<f64> {
        let mut z = vec![self.rbar];
        z.extend_from_slice(&self.ybar2);
        z
    }

    pub fn lambda(&self, k: usize, n: Dimension) -> f64 {
        crate::geometry::canonical_lambda(self.t, k, n)
    }
}

fn vnorm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn fd_jacobian(x: &[f64], f: &dyn Fn(&[f64]) -> Result<Vec<f64>>) -> Result<nalgebra::DMatrix<f64>> {
    let m = x.len();
    let mut j = nalgebra::DMatrix::zeros(m, m);
    for b in 0..m {
        let h = 1e-7 * (1.0 + x[b].abs());
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[b] += h;
        xm[b] -= h;
        let fp = f(&xp)?;
        let fm = f(&xm)?;
        for a in 0..m {
            j[(a, b)] = (fp[a] - fm[a]) / (2.0 * h);
        }
    }
    Ok(j)
}

fn condition(j: &nalgebra::DMatrix<f64>) -> f64 {
    let sv = j.clone().svd(false, false).singular_values;
    let mx = sv.iter().cloned().fold(0.0, f64::max);
    let mn = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if mn > 0.0 {
        mx / mn
    } else {
        f64::INFINITY
    }
}

/// Damped Newton with a finite-difference Jacobian on x = (t, rbar, ybar'').
/// Components are scaled by their values at the seed so the t-row and the
/// gradient rows are comparable.
pub fn newton_solve_reduced(
    seed_t: f64,
    seed_z: &[f64],
    pp: &PotentialPair,
    c: &CouplingData,
    consts: &Constants,
    tol: f64,
    bx: Option<&ReducedBox>,
) -> Result<ReducedState> {
    if let Some(b) = bx {
        if !b.contains(seed_t, seed_z) {
            return Err(Error::Solver("seed lies outside the search box".into()));
        }
    }
    let m = seed_z.len();
    let f = |x: &[f64]| reduced_F(x[0], &x[1..], pp, c, consts).map(|v| {
        // reorder to (F_t, grad G) so rows align with (t, z)
        let mut o = Vec::with_capacity(m + 1);
        o.push(v[m]);
        o.extend_from_slice(&v[..m]);
        o
    });
    let mut x = vec![seed_t];
    x.extend_from_slice(seed_z);
    let mut trace = Vec::new();
    let mut cond = None;
    for it in 0..=100 {
        let fx = f(&x)?;
        let nf = vnorm(&fx);
        trace.push(nf);
        if nf < tol {
            let j = fd_jacobian(&x, &f)?;
            cond = Some(condition(&j));
            let mut out = fx[1..].to_vec();
            out.push(fx[0]);
            return Ok(ReducedState {
                t: x[0],
                rbar: x[1],
                ybar2: x[2..].to_vec(),
                f: out,
                f_norm: nf,
                jacobian_condition: cond,
                iterations: it,
                converged: true,
                trace,
            });
        }
        if it == 100 {
            break;
        }
        let j = fd_jacobian(&x, &f)?;
        let cn = condition(&j);
        cond = Some(cn);
        if !cn.is_finite() || cn > 1e14 {
            return Err(Error::NoCriticalPoint(format!(
                "singular reduced Jacobian (cond = {cn:.3e}) at t = {:.6}, |F| = {nf:.3e}",
                x[0]
            )));
        }
        let rhs = nalgebra::DVector::from_iterator(m + 1, fx.iter().map(|v| -v));
        let step = j
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Solver("singular Jacobian".into()))?;
        let mut alpha = 1.0;
        loop {
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + alpha * s).collect();
            let ok_dom = xn[0] > 0.0 && xn[1] > 0.0;
            if ok_dom {
                if let Ok(fn_) = f(&xn) {
                    if vnorm(&fn_) < nf * (1.0 - 1e-4 * alpha) {
                        x = xn;
                        break;
                    }
                }
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                return Err(Error::Solver(format!("line search stalled at |F| = {nf:.3e}; trace {trace:?}")));
            }
        }
        if let Some(b) = bx {
            if !b.contains(x[0], &x[1..]) {
                return Err(Error::Solver(format!("iterate left the search box at t = {:.6}", x[0])));
            }
        }
    }
    let _ = cond;
    Err(Error::Solver(format!("no convergence in 100 iterations; trace {trace:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeReport {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub degree: i64,
    pub method: String,
    pub boundary_samples: usize,
    /// min |F| on the boundary after componentwise normalization.
    pub min_boundary_norm: f64,
    /// largest image step between neighbouring boundary samples.
    pub max_image_step: f64,
}

/// Brouwer degree of F on a box of dimension 1, 2 or 3. Components are first
/// scaled by their maximum modulus on the boundary (a positive diagonal
/// rescaling, which leaves the degree unchanged).
pub fn degree_box(f: &dyn Fn(&[f64]) -> Vec<f64>, bx: &BoxDomain, resolution: usize) -> Result<DegreeReport> {
    // the boundary grid is doubled until consecutive images are closer than the
    // smallest image norm
    let mut res = resolution.max(2);
    let cap = 32 * res;
    loop {
        match degree_box_at(f, bx, res) {
            Err(Error::Degree(m)) if m.starts_with("zero too close") && 2 * res <= cap => res *= 2,
            r => return r,
        }
    }
}

fn degree_box_at(f: &dyn Fn(&[f64]) -> Vec<f64>, bx: &BoxDomain, res: usize) -> Result<DegreeReport> {
    let d = bx.lo.len();
    if d == 0 || d > 3 || bx.hi.len() != d {
        return Err(Error::InvalidInput("degree_box supports dimensions 1 to 3".into()));
    }
    if bx.lo.iter().zip(&bx.hi).any(|(a, b)| !(a < b)) {
        return Err(Error::InvalidInput("box must have lo < hi".into()));
    }
    let pts = boundary_points(bx, res);
    let imgs: Vec<Vec<f64>> = pts.iter().map(|p| f(p)).collect();
    if imgs.iter().any(|v| v.len() != d || v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Degree("map is not finite on the boundary or has the wrong arity".into()));
    }
    let mut scale = vec![0.0f64; d];
    for v in &imgs {
        for i in 0..d {
            scale[i] = scale[i].max(v[i].abs());
        }
    }
    if scale.iter().any(|s| *s == 0.0) {
        return Err(Error::Degree("a component vanishes on the whole boundary".into()));
    }
    let imgs: Vec<Vec<f64>> = imgs
        .iter()
        .map(|v| v.iter().zip(&scale).map(|(a, s)| a / s).collect())
        .collect();
    let min_norm = imgs.iter().map(|v| vnorm(v)).fold(f64::INFINITY, f64::min);
    let (degree, method, step) = match d {
        1 => {
            let a = imgs[0][0].signum();
            let b = imgs[1][0].signum();
            (((b - a) / 2.0) as i64, "endpoint sign change".to_string(), 0.0)
        }
        2 => {
            let mut total = 0.0;
            let mut step = 0.0f64;
            for i in 0..imgs.len() {
                let a = &imgs[i];
                let b = &imgs[(i + 1) % imgs.len()];
                step = step.max(vnorm(&[b[0] - a[0], b[1] - a[1]]));
                let cross = a[0] * b[1] - a[1] * b[0];
                let dot = a[0] * b[0] + a[1] * b[1];
                total += cross.atan2(dot);
            }
            ((total / (2.0 * PI)).round() as i64, "boundary winding number".to_string(), step)
        }
        _ => {
            let (tris, step) = surface_triangles(bx, res, f, &scale)?;
            let total: f64 = tris.iter().map(|t| solid_angle(&t[0], &t[1], &t[2])).sum();
            ((total / (4.0 * PI)).round() as i64, "triangulated solid angle".to_string(), step)
        }
    };
    if step >= min_norm {
        return Err(Error::Degree(format!(
            "zero too close to boundary: min |F| = {min_norm:.3e}, image step = {step:.3e}"
        )));
    }
    Ok(DegreeReport {
        lo: bx.lo.clone(),
        hi: bx.hi.clone(),
        degree,
        method,
        boundary_samples: pts.len(),
        min_boundary_norm: min_norm,
        max_image_step: step,
    })
}

/// 1-D: the two endpoints; 2-D: counterclockwise boundary loop; 3-D: face grids.
fn boundary_points(bx: &BoxDomain, res: usize) -> Vec<Vec<f64>> {
    let d = bx.lo.len();
    let lerp = |i: usize, u: f64| bx.lo[i] + (bx.hi[i] - bx.lo[i]) * u;
    match d {
        1 => vec![vec![bx.lo[0]], vec![bx.hi[0]]],
        2 => {
            let mut v = Vec::with_capacity(4 * res);
            for s in 0..4 * res {
                let e = s / res;
                let u = (s % res) as f64 / res as f64;
                let (a, b) = match e {
                    0 => (u, 0.0),
                    1 => (1.0, u),
                    2 => (1.0 - u, 1.0),
                    _ => (0.0, 1.0 - u),
                };
                v.push(vec![lerp(0, a), lerp(1, b)]);
            }
            v
        }
        _ => {
            let mut v = Vec::new();
            for face in 0..6 {
                for a in 0..=res {
                    for b in 0..=res {
                        v.push(face_point(bx, face, a as f64 / res as f64, b as f64 / res as f64));
                    }
                }
            }
            v
        }
    }
}

fn face_point(bx: &BoxDomain, face: usize, a: f64, b: f64) -> Vec<f64> {
    let axis = face / 2;
    let side = (face % 2) as f64;
    let others: [usize; 2] = match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    let mut p = vec![0.0; 3];
    p[axis] = bx.lo[axis] + side * (bx.hi[axis] - bx.lo[axis]);
    p[others[0]] = bx.lo[others[0]] + a * (bx.hi[others[0]] - bx.lo[others[0]]);
    p[others[1]] = bx.lo[others[1]] + b * (bx.hi[others[1]] - bx.lo[others[1]]);
    p
}

fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn sub3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Outward-oriented image triangles of the box surface.
#[allow(clippy::type_complexity)]
fn surface_triangles(
    bx: &BoxDomain,
    res: usize,
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    scale: &[f64],
) -> Result<(Vec<[Vec<f64>; 3]>, f64)> {
    let mut tris = Vec::new();
    let mut step = 0.0f64;
    let center: Vec<f64> = (0..3).map(|i| 0.5 * (bx.lo[i] + bx.hi[i])).collect();
    for face in 0..6 {
        let mut grid = Vec::with_capacity((res + 1) * (res + 1));
        let mut img = Vec::with_capacity((res + 1) * (res + 1));
        for a in 0..=res {
            for b in 0..=res {
                let p = face_point(bx, face, a as f64 / res as f64, b as f64 / res as f64);
                let v: Vec<f64> = f(&p).iter().zip(scale).map(|(x, s)| x / s).collect();
                grid.push(p);
                img.push(v);
            }
        }
        let idx = |a: usize, b: usize| a * (res + 1) + b;
        for a in 0..res {
            for b in 0..res {
                for tri in [
                    [idx(a, b), idx(a + 1, b), idx(a + 1, b + 1)],
                    [idx(a, b), idx(a + 1, b + 1), idx(a, b + 1)],
                ] {
                    let n = cross3(&sub3(&grid[tri[1]], &grid[tri[0]]), &sub3(&grid[tri[2]], &grid[tri[0]]));
                    let out = sub3(&grid[tri[0]], &center);
                    let (i0, i1, i2) = if dot3(&n, &out) > 0.0 {
                        (tri[0], tri[1], tri[2])
                    } else {
                        (tri[0], tri[2], tri[1])
                    };
                    for (u, w) in [(i0, i1), (i1, i2), (i2, i0)] {
                        step = step.max(vnorm(&sub3(&img[u], &img[w])));
                    }
                    tris.push([img[i0].clone(), img[i1].clone(), img[i2].clone()]);
                }
            }
        }
    }
    Ok((tris, step))
}

/// Signed solid angle of the triangle (a, b, c) seen from the origin.
fn solid_angle(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let la = vnorm(a);
    let lb = vnorm(b);
    let lc = vnorm(c);
    let num = dot3(a, &cross3(b, c));
    let den = la * lb * lc + dot3(a, b) * lc + dot3(a, c) * lb + dot3(b, c) * la;
    2.0 * num.atan2(den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedDegree {
    pub full: DegreeReport,
    pub refined: DegreeReport,
    pub gradient_degree: DegreeReport,
    pub t_degree: i64,
    pub factorized: i64,
    pub agree: bool,
    pub stable: bool,
    /// Coordinates of (rbar, ybar'') varied in the degree computation.
    pub active: Vec<usize>,
}

/// Degree of the reduced map on [t_lo, t_hi] x box over at most two active
/// (rbar, ybar'') coordinates (the others frozen at the box center), with
/// the product cross-check deg(F_t) * deg(grad G).
pub fn reduced_degree(
    pp: &PotentialPair,
    c: &CouplingData,
    consts: &Constants,
    bx: &ReducedBox,
    resolution: usize,
) -> Result<ReducedDegree> {
    let act: Vec<usize> = (0..bx.z_half.len()).filter(|&i| bx.z_half[i] > 0.0).collect();
    if act.is_empty() || act.len() > 2 {
        return Err(Error::InvalidInput("reduced degree needs 1 or 2 active coordinates".into()));
    }
    let frozen = bx.z_center.clone();
    let m = frozen.len();
    let embed = |x: &[f64]| {
        let mut z = frozen.clone();
        for (a, &i) in act.iter().enumerate() {
            z[i] = x[a];
        }
        z
    };
    let full = |x: &[f64]| -> Vec<f64> {
        let z = embed(&x[1..]);
        match reduced_F(x[0], &z, pp, c, consts) {
            Ok(v) => {
                // the positive factor t^{N-1} balances the t faces without changing the degree
                let mut o = vec![v[m] * x[0].powi(c.n.n() as i32 - 1)];
                o.extend(act.iter().map(|&i| v[i]));
                o
            }
            Err(_) => vec![f64::NAN; act.len() + 1],
        }
    };
    let grad = |x: &[f64]| -> Vec<f64> {
        let z = embed(x);
        let mut g = vec![0.0; m];
        pp.g(c.kappa, &z, &mut g);
        act.iter().map(|&i| g[i]).collect()
    };
    let zlo: Vec<f64> = act.iter().map(|&i| bx.z_center[i] - bx.z_half[i]).collect();
    let zhi: Vec<f64> = act.iter().map(|&i| bx.z_center[i] + bx.z_half[i]).collect();
    let mut lo = vec![bx.t_lo];
    lo.extend_from_slice(&zlo);
    let mut hi = vec![bx.t_hi];
    hi.extend_from_slice(&zhi);
    let dom = BoxDomain { lo, hi };
    let full_rep = degree_box(&full, &dom, resolution)?;
    let refined = degree_box(&full, &dom, 2 * resolution)?;
    let grad_rep = degree_box(&grad, &BoxDomain { lo: zlo, hi: zhi }, resolution)?;
    let gc = frozen.clone();
    let mut gtmp = vec![0.0; m];
    let g_at = pp.g(c.kappa, &gc, &mut gtmp);
    let ft_lo = t_component(c.n, consts, g_at, bx.t_lo);
    let ft_hi = t_component(c.n, consts, g_at, bx.t_hi);
    let t_degree = ((ft_hi.signum() - ft_lo.signum()) / 2.0) as i64;
    let factorized = t_degree * grad_rep.degree;
    Ok(ReducedDegree {
        agree: factorized == full_rep.degree,
        stable: refined.degree == full_rep.degree,
        full: full_rep,
        refined,
        gradient_degree: grad_rep,
        t_degree,
        factorized,
        active: act,
    })
}
