//! Polygonal bubble placement, the cutoff xi and the H_s symmetry test.

use crate::bubbles::{CouplingData, Dimension};
use crate::error::{Error, Result};
use crate::field::PairField;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonConfig {
    pub k: usize,
    pub rbar: f64,
    pub ybar2: Vec<f64>,
    pub lambda: f64,
    pub coupling: CouplingData,
}

impl PolygonConfig {
    pub fn new(k: usize, rbar: f64, ybar2: Vec<f64>, lambda: f64, coupling: CouplingData) -> Result<Self> {
        let n = coupling.n.n();
        if k < 1 {
            return Err(Error::InvalidInput("k must be >= 1".into()));
        }
        if !(rbar > 0.0) || !(lambda > 0.0) {
            return Err(Error::InvalidInput("rbar and lambda must be positive".into()));
        }
        if ybar2.len() != n - 2 {
            return Err(Error::InvalidInput(format!("ybar2 must have length {}", n - 2)));
        }
        Ok(PolygonConfig {
            k,
            rbar,
            ybar2,
            lambda,
            coupling,
        })
    }

    pub fn dim(&self) -> Dimension {
        self.coupling.n
    }

    pub fn n(&self) -> usize {
        self.coupling.n.n()
    }
}

/// lambda = t k^{(N-2)/(N-4)}.
pub fn canonical_lambda(t: f64, k: usize, n: Dimension) -> f64 {
    t * (k as f64).powf(n.window_exponent())
}

pub fn polygon_centers(cfg: &PolygonConfig) -> Vec<Vec<f64>> {
    let k = cfg.k;
    (0..k)
        .map(|j| {
            let th = 2.0 * (j as f64) * PI / k as f64;
            let mut x = Vec::with_capacity(cfg.n());
            x.push(cfg.rbar * th.cos());
            x.push(cfg.rbar * th.sin());
            x.extend_from_slice(&cfg.ybar2);
            x
        })
        .collect()
}

/// |x_1 - x_{j}| = 2 rbar sin((j-1) pi / k).
pub fn center_distance(k: usize, rbar: f64, j_minus_1: usize) -> f64 {
    2.0 * rbar * (j_minus_1 as f64 * PI / k as f64).sin()
}

pub fn min_center_distance(k: usize, rbar: f64) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidInput("k must be >= 2".into()));
    }
    Ok(center_distance(k, rbar, 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub r0: f64,
    pub y0_2: Vec<f64>,
    pub delta: f64,
}

impl CutoffSpec {
    /// delta defaults to 0.1 r0.
    pub fn new(r0: f64, y0_2: Vec<f64>, delta: Option<f64>) -> Result<Self> {
        let delta = delta.unwrap_or(0.1 * r0);
        if !(r0 > 0.0) || !(delta > 0.0) {
            return Err(Error::InvalidInput("r0 and delta must be positive".into()));
        }
        Ok(CutoffSpec { r0, y0_2, delta })
    }

    /// s(y) = |(|y'|, y'') - (r0, y0'')|.
    pub fn s_of(&self, y: &[f64]) -> f64 {
        let r = (y[0] * y[0] + y[1] * y[1]).sqrt();
        let mut s2 = (r - self.r0) * (r - self.r0);
        for (a, b) in y[2..].iter().zip(&self.y0_2) {
            s2 += (a - b) * (a - b);
        }
        s2.sqrt()
    }

    pub fn support_radius(&self) -> f64 {
        2.0 * self.delta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutoffValue {
    pub xi: f64,
    pub grad: Vec<f64>,
    pub lap: f64,
}

/// Quintic glue: eta(delta) = 1, eta(2 delta) = 0, eta' = eta'' = 0 at both ends.
pub fn eta(s: f64, delta: f64) -> (f64, f64, f64) {
    if s <= delta {
        return (1.0, 0.0, 0.0);
    }
    if s >= 2.0 * delta {
        return (0.0, 0.0, 0.0);
    }
    let u = (s - delta) / delta;
    let v = (1.0 - (10.0 * u.powi(3) - 15.0 * u.powi(4) + 6.0 * u.powi(5))).clamp(0.0, 1.0);
    let d1 = -30.0 * u * u * (1.0 - u) * (1.0 - u) / delta;
    let d2 = -60.0 * u * (1.0 - u) * (1.0 - 2.0 * u) / (delta * delta);
    (v, d1, d2)
}

/// Writes the gradient into `grad` and returns (xi, lap xi).
pub fn cutoff_eval_into(spec: &CutoffSpec, y: &[f64], grad: &mut [f64]) -> Result<(f64, f64)> {
    let n = y.len();
    for g in grad.iter_mut() {
        *g = 0.0;
    }
    let r = (y[0] * y[0] + y[1] * y[1]).sqrt();
    let s = spec.s_of(y);
    let delta = spec.delta;
    if s <= delta {
        return Ok((1.0, 0.0));
    }
    if s >= 2.0 * delta {
        return Ok((0.0, 0.0));
    }
    if r == 0.0 {
        return Err(Error::Domain("cutoff evaluated on the axis y' = 0 inside its support".into()));
    }
    let (v, d1, d2) = eta(s, delta);
    let dr = (r - spec.r0) / s;
    grad[0] = d1 * dr * y[0] / r;
    grad[1] = d1 * dr * y[1] / r;
    for h in 2..n {
        grad[h] = d1 * (y[h] - spec.y0_2[h - 2]) / s;
    }
    let nf = n as f64;
    let lap_s = (nf - 2.0) / s + (r - spec.r0) / (r * s);
    Ok((v, d2 + d1 * lap_s))
}

pub fn cutoff_eval(spec: &CutoffSpec, y: &[f64]) -> Result<CutoffValue> {
    let mut grad = vec![0.0; y.len()];
    let (xi, lap) = cutoff_eval_into(spec, y, &mut grad)?;
    Ok(CutoffValue { xi, grad, lap })
}

/// Rotation by `angle` in the y' plane.
pub fn rotate(y: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut z = y.to_vec();
    z[0] = c * y[0] - s * y[1];
    z[1] = s * y[0] + c * y[1];
    z
}

/// k-fold rotation invariance and evenness in y_h, h = 2..N, on the sample.
pub fn symmetry_check(field: &dyn PairField, k: usize, tol: f64, sample: &[Vec<f64>]) -> bool {
    let n = field.dim();
    for y in sample {
        let (u0, v0) = field.eval(y);
        if k >= 1 {
            let (u1, v1) = field.eval(&rotate(y, 2.0 * PI / k as f64));
            if (u1 - u0).abs() > tol || (v1 - v0).abs() > tol {
                return false;
            }
        }
        for h in 1..n {
            let mut z = y.clone();
            z[h] = -z[h];
            let (u1, v1) = field.eval(&z);
            if (u1 - u0).abs() > tol || (v1 - v0).abs() > tol {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bubbles::{bubble_profile, CouplingData};
    use crate::field::{dist2, FnPair};
    use proptest::prelude::*;

    fn cfg(k: usize, rbar: f64, lambda: f64) -> PolygonConfig {
        let n = Dimension::new(5).unwrap();
        PolygonConfig::new(k, rbar, vec![0.0; 3], lambda, CouplingData::decoupled(n)).unwrap()
    }

    #[test]
    fn square_centers() {
        let c = polygon_centers(&cfg(4, 1.0, 10.0));
        let expect = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        for (x, e) in c.iter().zip(expect) {
            assert!((x[0] - e[0]).abs() < 1e-15 && (x[1] - e[1]).abs() < 1e-15);
            assert!(x[2..].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn triangle_equilateral() {
        let c = polygon_centers(&cfg(3, 2.0, 10.0));
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert!((dist2(&c[i], &c[j]).sqrt() - 2.0 * 3f64.sqrt()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn min_distance_examples() {
        assert!((min_center_distance(4, 1.0).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((min_center_distance(6, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let c = polygon_centers(&cfg(32, 1.0, 10.0));
        let mut brute = f64::INFINITY;
        for i in 0..32 {
            for j in (i + 1)..32 {
                brute = brute.min(dist2(&c[i], &c[j]).sqrt());
            }
        }
        assert!((brute - min_center_distance(32, 1.0).unwrap()).abs() < 1e-14);
        assert!(min_center_distance(1, 1.0).is_err());
    }

    #[test]
    fn separation_times_lambda_grows() {
        let n = Dimension::new(5).unwrap();
        let mut prev = 0.0;
        for k in 2..=64 {
            let v = min_center_distance(k, 1.0).unwrap() * canonical_lambda(1.0, k, n);
            assert!(v > prev);
            prev = v;
        }
    }

    proptest! {
        #[test]
        fn centroid_and_rotation_invariance(k in 2usize..40, rbar in 0.1f64..5.0) {
            let c = polygon_centers(&cfg(k, rbar, 1.0));
            let cx: f64 = c.iter().map(|x| x[0]).sum::<f64>() / k as f64;
            let cy: f64 = c.iter().map(|x| x[1]).sum::<f64>() / k as f64;
            prop_assert!(cx.abs() < 1e-12 * rbar.max(1.0) && cy.abs() < 1e-12 * rbar.max(1.0));
            for x in &c {
                let rx = rotate(x, 2.0 * PI / k as f64);
                let best = c.iter().map(|z| dist2(z, &rx).sqrt()).fold(f64::INFINITY, f64::min);
                prop_assert!(best < 1e-12 * rbar.max(1.0));
            }
        }
    }

    fn spec() -> CutoffSpec {
        CutoffSpec::new(1.0, vec![0.0; 3], None).unwrap()
    }

    fn point_at_s(s: f64, dir: &[f64; 4], theta: f64) -> Vec<f64> {
        let nrm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = 1.0 + s * dir[0] / nrm;
        vec![
            r * theta.cos(),
            r * theta.sin(),
            s * dir[1] / nrm,
            s * dir[2] / nrm,
            s * dir[3] / nrm,
        ]
    }

    #[test]
    fn cutoff_flat_regions() {
        let sp = spec();
        let a = cutoff_eval(&sp, &point_at_s(0.05, &[1.0, 1.0, 0.0, 0.0], 0.3)).unwrap();
        assert_eq!(a.xi, 1.0);
        assert!(a.grad.iter().all(|g| *g == 0.0) && a.lap == 0.0);
        let b = cutoff_eval(&sp, &point_at_s(0.25, &[1.0, -1.0, 0.5, 0.0], 0.3)).unwrap();
        assert_eq!(b.xi, 0.0);
        assert!(b.grad.iter().all(|g| *g == 0.0) && b.lap == 0.0);
        // on the axis, outside support
        assert_eq!(cutoff_eval(&sp, &[0.0; 5]).unwrap().xi, 0.0);
        let wide = CutoffSpec::new(0.15, vec![0.0; 3], Some(0.1)).unwrap();
        assert!(cutoff_eval(&wide, &[0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    fn fd_cutoff(sp: &CutoffSpec, y: &[f64]) -> (Vec<f64>, f64) {
        let n = y.len();
        let h = 1e-4;
        let f = |z: &[f64]| cutoff_eval(sp, z).unwrap().xi;
        let f0 = f(y);
        let mut g = vec![0.0; n];
        let mut lap = 0.0;
        for i in 0..n {
            let mut p = y.to_vec();
            let mut m = y.to_vec();
            p[i] += h;
            m[i] -= h;
            let (fp, fm) = (f(&p), f(&m));
            g[i] = (fp - fm) / (2.0 * h);
            lap += (fp - 2.0 * f0 + fm) / (h * h);
        }
        (g, lap)
    }

    #[test]
    fn cutoff_matches_finite_differences() {
        let sp = spec();
        for (dir, th) in [
            ([1.0, 0.0, 0.0, 0.0], 0.0),
            ([-1.0, 0.3, 0.2, 0.0], 0.7),
            ([0.2, 1.0, -0.4, 0.3], 2.0),
        ] {
            let y = point_at_s(0.15, &dir, th);
            let c = cutoff_eval(&sp, &y).unwrap();
            let (g, lap) = fd_cutoff(&sp, &y);
            let gs = c.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..5 {
                assert!((g[i] - c.grad[i]).abs() <= 1e-5 * gs);
            }
            assert!((lap - c.lap).abs() <= 1e-5 * c.lap.abs().max(gs));
        }
    }

    #[test]
    fn cutoff_is_c2_at_glue_points() {
        // one-sided second differences of eta at s = delta and s = 2 delta agree
        let d = 0.1;
        for s0 in [d, 2.0 * d] {
            let e = 1e-15;
            let (_, l1, l2) = eta(s0 - e, d);
            let (_, r1, r2) = eta(s0 + e, d);
            assert!((l2 - r2).abs() < 1e-9);
            assert!((l1 - r1).abs() < 1e-9);
            // second differences straddling the glue point are O(h eta''')
            let h = 1e-6;
            let fd = (eta(s0 + h, d).0 - 2.0 * eta(s0, d).0 + eta(s0 - h, d).0) / (h * h);
            assert!(fd.abs() < 120.0 / (d * d * d) * h);
        }
    }

    proptest! {
        #[test]
        fn cutoff_bounded(x in -2.0f64..2.0, y in -2.0f64..2.0, z in -0.5f64..0.5) {
            let sp = spec();
            let p = [x, y, z, 0.0, 0.0];
            if let Ok(c) = cutoff_eval(&sp, &p) {
                prop_assert!((0.0..=1.0).contains(&c.xi));
            }
        }
    }

    #[test]
    fn symmetry_examples() {
        let c = cfg(6, 1.0, 20.0);
        let n = c.dim();
        let centers = polygon_centers(&c);
        let sample: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 * 0.37;
                vec![(1.0 + 0.05 * t.sin()) * t.cos(), (1.0 + 0.05 * t.sin()) * t.sin(), 0.02 * t.cos(), 0.01, -0.03]
            })
            .collect();
        let lam = c.lambda;
        let cs = centers.clone();
        let ansatz = FnPair::new(5, move |y: &[f64]| {
            let w: f64 = cs.iter().map(|x| bubble_profile(n, lam, dist2(y, x))).sum();
            (w, w)
        });
        assert!(symmetry_check(&ansatz, 6, 1e-12, &sample));
        let x1 = centers[0].clone();
        let single = FnPair::new(5, move |y: &[f64]| {
            let w = bubble_profile(n, lam, dist2(y, &x1));
            (w, w)
        });
        assert!(symmetry_check(&single, 1, 1e-12, &sample));
        let cs2 = centers.clone();
        let x1b = centers[0].clone();
        let xoff = x1b;
        let perturbed = FnPair::new(5, move |y: &[f64]| {
            let w: f64 = cs2.iter().map(|x| bubble_profile(n, lam, dist2(y, x))).sum::<f64>()
                + 1e-3 * bubble_profile(n, lam, dist2(y, &xoff));
            (w, w)
        });
        assert!(!symmetry_check(&perturbed, 6, 1e-12, &sample));
    }
}
