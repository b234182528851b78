//! Radial Gauss-Kronrod quadrature, bubble constants, importance-sampled
//! Monte Carlo in R^N, tube integrals and the Riesz potential.

use crate::bubbles::{bubble_profile, CouplingData, Dimension};
use crate::error::{Error, Result};
use crate::field::{dist2, norm2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta;
use statrs::function::gamma::gamma;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

pub const MC_BLOCK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureBudget {
    /// Maximum number of Gauss-Kronrod subintervals per radial integral.
    pub radial_intervals: usize,
    /// Number of theta strata in tube integrals.
    pub angular_nodes: usize,
    /// Monte Carlo sample count M.
    pub mc_samples: usize,
    pub seed: u64,
    /// Relative tolerance of deterministic quadrature.
    pub rel_tol: f64,
    /// Monte Carlo results with std_error above this fraction of |value| are flagged.
    pub mc_rel_tol: f64,
}

impl Default for QuadratureBudget {
    fn default() -> Self {
        QuadratureBudget {
            radial_intervals: 4000,
            angular_nodes: 64,
            mc_samples: 65_536,
            seed: 0x5eed,
            rel_tol: 1e-12,
            mc_rel_tol: 0.2,
        }
    }
}

impl QuadratureBudget {
    pub fn validate(&self) -> Result<()> {
        if self.radial_intervals == 0 || self.angular_nodes == 0 || self.mc_samples == 0 {
            return Err(Error::InvalidInput("budget counts must be positive".into()));
        }
        for t in [self.rel_tol, self.mc_rel_tol] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidInput("tolerances must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn with_samples(&self, m: usize) -> Self {
        QuadratureBudget {
            mc_samples: m,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        QuadratureBudget {
            seed,
            ..self.clone()
        }
    }
}

/// Area of the unit sphere S^{n-1} in R^n.
pub fn sphere_area(n: usize) -> f64 {
    let h = n as f64 / 2.0;
    2.0 * PI.powf(h) / gamma(h)
}

/// Volume of the unit ball in R^m.
pub fn ball_volume(m: usize) -> f64 {
    let h = m as f64 / 2.0;
    PI.powf(h) / gamma(h + 1.0)
}

// 7-point Gauss / 15-point Kronrod nodes on [-1, 1].
const XK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let x = h * XK[i];
        let s = f(c - x) + f(c + x);
        k += WK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

struct Seg {
    a: f64,
    b: f64,
    v: f64,
    e: f64,
}

impl PartialEq for Seg {
    fn eq(&self, o: &Self) -> bool {
        self.e == o.e
    }
}
impl Eq for Seg {}
impl PartialOrd for Seg {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Seg {
    fn cmp(&self, o: &Self) -> Ordering {
        self.e.total_cmp(&o.e)
    }
}

/// Globally adaptive G7-K15 on [a, b]; returns (estimate, error bound).
pub fn gauss_kronrod<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64, max_intervals: usize) -> Result<(f64, f64)> {
    let (v, e) = gk15(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Seg { a, b, v, e });
    let mut total = v;
    let mut err = e;
    let mut count = 1;
    while err > rel_tol * total.abs() && err > 1e-300 {
        if count >= max_intervals {
            return Err(Error::Quadrature {
                estimate: total,
                error: err,
            });
        }
        let s = heap.pop().expect("heap is nonempty");
        let m = 0.5 * (s.a + s.b);
        let (v1, e1) = gk15(&f, s.a, m);
        let (v2, e2) = gk15(&f, m, s.b);
        heap.push(Seg { a: s.a, b: m, v: v1, e: e1 });
        heap.push(Seg { a: m, b: s.b, v: v2, e: e2 });
        count += 1;
        // resum to avoid drift
        total = heap.iter().map(|s| s.v).sum();
        err = heap.iter().map(|s| s.e).sum();
    }
    if !total.is_finite() {
        return Err(Error::Quadrature {
            estimate: total,
            error: err,
        });
    }
    Ok((total, err))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialIntegral {
    pub value: f64,
    pub error: f64,
}

/// omega_{N-1} int_0^inf f(r) r^{N-1} dr, split at r = 1 with r = 1/u on the tail.
pub fn radial_integral<F: Fn(f64) -> f64>(f: F, n: Dimension, budget: &QuadratureBudget) -> Result<RadialIntegral> {
    let nn = n.n() as i32;
    let half = budget.radial_intervals.max(2) / 2;
    let (a, ea) = gauss_kronrod(|r| f(r) * r.powi(nn - 1), 0.0, 1.0, budget.rel_tol, half)?;
    let (b, eb) = gauss_kronrod(
        |u| {
            if u <= 0.0 {
                0.0
            } else {
                f(1.0 / u) * u.powi(-nn - 1)
            }
        },
        0.0,
        1.0,
        budget.rel_tol,
        half,
    )?;
    let w = sphere_area(n.n());
    Ok(RadialIntegral {
        value: w * (a + b),
        error: w * (ea + eb),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub n: Dimension,
    /// int w^2 in closed form.
    pub b_w: f64,
    /// int w^{2*} in closed form.
    pub c_w: f64,
    pub b_w_quadrature: f64,
    pub c_w_quadrature: f64,
    pub b_rel_error: f64,
    pub c_rel_error: f64,
    /// s^2 B_w.
    pub b_u: f64,
    /// kappa^2 s^2 B_w.
    pub b_v: f64,
    /// C_1 = C_w.
    pub c1: f64,
    /// C_1 (1 + beta kappa^{2*/2}).
    pub c1_coupled: f64,
}

/// Closed Beta-function forms (B_w, C_w).
pub fn constants_closed(n: Dimension) -> (f64, f64) {
    let nf = n.nf();
    let om = sphere_area(n.n());
    let base = nf * (nf - 2.0);
    let b = base.powf((nf - 2.0) / 2.0) * om * 0.5 * beta(nf / 2.0, (nf - 4.0) / 2.0);
    let c = base.powf(nf / 2.0) * om * 0.5 * beta(nf / 2.0, nf / 2.0);
    (b, c)
}

#[allow(non_snake_case)]
pub fn constants_B_C(c: &CouplingData, budget: &QuadratureBudget) -> Result<Constants> {
    let n = c.n;
    let (b_w, c_w) = constants_closed(n);
    let ts = n.two_star();
    let bq = radial_integral(|r| bubble_profile(n, 1.0, r * r).powi(2), n, budget)?.value;
    let cq = radial_integral(|r| bubble_profile(n, 1.0, r * r).powf(ts), n, budget)?.value;
    let s2 = c.s * c.s;
    Ok(Constants {
        n,
        b_w,
        c_w,
        b_w_quadrature: bq,
        c_w_quadrature: cq,
        b_rel_error: ((bq - b_w) / b_w).abs(),
        c_rel_error: ((cq - c_w) / c_w).abs(),
        b_u: s2 * b_w,
        b_v: c.kappa * c.kappa * s2 * b_w,
        c1: c_w,
        c1_coupled: c_w * c.assumption_iii(),
    })
}

/// Solid torus {|(r, y'') - (r0, y0'')| <= rho}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeDomain {
    pub r0: f64,
    pub y0_2: Vec<f64>,
    pub rho: f64,
}

impl TubeDomain {
    pub fn new(r0: f64, y0_2: Vec<f64>, rho: f64) -> Result<Self> {
        if !(rho > 0.0) || !(rho < r0) {
            return Err(Error::InvalidInput(format!("tube radius {rho} must lie in (0, r0 = {r0})")));
        }
        Ok(TubeDomain { r0, y0_2, rho })
    }

    pub fn dim(&self) -> usize {
        self.y0_2.len() + 2
    }

    /// Distance of (|y'|, y'') from the core circle.
    pub fn s_of(&self, y: &[f64]) -> f64 {
        let r = (y[0] * y[0] + y[1] * y[1]).sqrt();
        let mut s2 = (r - self.r0) * (r - self.r0);
        for (a, b) in y[2..].iter().zip(&self.y0_2) {
            s2 += (a - b) * (a - b);
        }
        s2.sqrt()
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        self.s_of(y) <= self.rho
    }

    /// Volume of the solid torus.
    pub fn volume(&self) -> f64 {
        2.0 * PI * self.r0 * ball_volume(self.dim() - 1) * self.rho.powi(self.dim() as i32 - 1)
    }

    /// Point with section coordinates b (offset from the core) at angle theta.
    fn embed(&self, b: &[f64], theta: f64, out: &mut [f64]) {
        let r = self.r0 + b[0];
        out[0] = r * theta.cos();
        out[1] = r * theta.sin();
        for h in 2..out.len() {
            out[h] = self.y0_2[h - 2] + b[h - 1];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Component {
    /// Multivariate Cauchy density centered at `center` with scale 1/lambda.
    Cauchy { center: Vec<f64>, lambda: f64 },
    /// Uniform in the solid torus.
    Tube(TubeDomain),
    /// Radius uniform on [0, radius] around `center`, uniform direction.
    Chart { center: Vec<f64>, radius: f64 },
}

/// Importance-sampling mixture on R^N.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub n: usize,
    pub parts: Vec<(f64, Component)>,
}

fn unit_direction<R: Rng>(rng: &mut R, out: &mut [f64]) {
    loop {
        let mut s = 0.0;
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
            s += *v * *v;
        }
        if s > 1e-300 {
            let s = s.sqrt();
            for v in out.iter_mut() {
                *v /= s;
            }
            return;
        }
    }
}

impl Mixture {
    /// Equal-weight Cauchy mixture over the centers, plus 10% on the tube when given.
    pub fn bubbles(n: usize, centers: &[Vec<f64>], lambda: f64, tube: Option<TubeDomain>) -> Self {
        let mut parts = Vec::new();
        let bw = if tube.is_some() { 0.9 } else { 1.0 };
        for c in centers {
            parts.push((
                bw / centers.len() as f64,
                Component::Cauchy {
                    center: c.clone(),
                    lambda,
                },
            ));
        }
        if let Some(t) = tube {
            parts.push((if centers.is_empty() { 1.0 } else { 0.1 }, Component::Tube(t)));
        }
        Mixture { n, parts }
    }

    pub fn tube_only(t: TubeDomain) -> Self {
        Mixture {
            n: t.dim(),
            parts: vec![(1.0, Component::Tube(t))],
        }
    }

    /// Rescales existing weights by 1 - weight and appends a chart around `center`.
    pub fn with_chart(&self, center: &[f64], radius: f64, weight: f64) -> Self {
        let mut parts: Vec<(f64, Component)> = self
            .parts
            .iter()
            .map(|(w, c)| (w * (1.0 - weight), c.clone()))
            .collect();
        parts.push((
            weight,
            Component::Chart {
                center: center.to_vec(),
                radius,
            },
        ));
        Mixture { n: self.n, parts }
    }

    pub fn validate(&self) -> Result<()> {
        let tot: f64 = self.parts.iter().map(|p| p.0).sum();
        if self.parts.is_empty() || (tot - 1.0).abs() > 1e-12 || self.parts.iter().any(|p| !(p.0 > 0.0)) {
            return Err(Error::InvalidInput("mixture weights must be positive and sum to 1".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.parts.len() - 1;
        for (i, (w, _)) in self.parts.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let n = self.n;
        match &self.parts[pick].1 {
            Component::Cauchy { center, lambda } => {
                let g: f64 = rng.sample::<f64, _>(StandardNormal).abs().max(1e-300);
                for i in 0..n {
                    let z: f64 = rng.sample(StandardNormal);
                    out[i] = center[i] + z / (g * lambda);
                }
            }
            Component::Tube(t) => {
                let m = n - 1;
                let mut b = [0.0; crate::bubbles::MAX_DIM];
                unit_direction(rng, &mut b[..m]);
                let rad = t.rho * rng.random::<f64>().powf(1.0 / m as f64);
                for v in b[..m].iter_mut() {
                    *v *= rad;
                }
                let th = 2.0 * PI * rng.random::<f64>();
                t.embed(&b[..m], th, out);
            }
            Component::Chart { center, radius } => {
                unit_direction(rng, &mut out[..n]);
                let rad = radius * rng.random::<f64>();
                for i in 0..n {
                    out[i] = center[i] + rad * out[i];
                }
            }
        }
    }

    pub fn density(&self, z: &[f64]) -> f64 {
        let n = self.n;
        let nf = n as f64;
        let cn = gamma((nf + 1.0) / 2.0) / PI.powf((nf + 1.0) / 2.0);
        let mut d = 0.0;
        for (w, c) in &self.parts {
            d += w * match c {
                Component::Cauchy { center, lambda } => {
                    let r2 = dist2(z, center);
                    cn * lambda.powi(n as i32) * (1.0 + lambda * lambda * r2).powf(-(nf + 1.0) / 2.0)
                }
                Component::Tube(t) => {
                    let r = (z[0] * z[0] + z[1] * z[1]).sqrt();
                    if t.contains(z) && r > 0.0 {
                        1.0 / (2.0 * PI * r * ball_volume(n - 1) * t.rho.powi(n as i32 - 1))
                    } else {
                        0.0
                    }
                }
                Component::Chart { center, radius } => {
                    let rr = dist2(z, center).sqrt();
                    if rr > 0.0 && rr <= *radius {
                        1.0 / (radius * sphere_area(n) * rr.powi(n as i32 - 1))
                    } else {
                        0.0
                    }
                }
            };
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
    pub seed: u64,
    /// std_error exceeds the budget's relative tolerance.
    pub flagged: bool,
}

impl McEstimate {
    pub fn zero(samples: usize, seed: u64) -> Self {
        McEstimate {
            value: 0.0,
            std_error: 0.0,
            samples,
            seed,
            flagged: false,
        }
    }
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    rng
}

/// Runs `visit` on every sample of every block, in parallel over blocks.
/// `visit(z, weight, acc)` adds to `acc` (length `width`); per-block sums and
/// sums of squares are combined in block order.
fn mc_blocks<V>(mix: &Mixture, budget: &QuadratureBudget, width: usize, visit: V) -> (Vec<f64>, Vec<f64>)
where
    V: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    let m = budget.mc_samples;
    let nb = m.div_ceil(MC_BLOCK);
    let n = mix.n;
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..nb)
        .into_par_iter()
        .map(|b| {
            let mut rng = block_rng(budget.seed, b);
            let cnt = MC_BLOCK.min(m - b * MC_BLOCK);
            let mut z = vec![0.0; n];
            let mut s = vec![0.0; width];
            let mut s2 = vec![0.0; width];
            let mut acc = vec![0.0; width];
            for _ in 0..cnt {
                mix.sample(&mut rng, &mut z);
                let d = mix.density(&z);
                for a in acc.iter_mut() {
                    *a = 0.0;
                }
                if d > 0.0 && d.is_finite() {
                    visit(&z, 1.0 / d, &mut acc);
                }
                for i in 0..width {
                    s[i] += acc[i];
                    s2[i] += acc[i] * acc[i];
                }
            }
            (s, s2)
        })
        .collect();
    let mut s = vec![0.0; width];
    let mut s2 = vec![0.0; width];
    for (a, b) in blocks {
        for i in 0..width {
            s[i] += a[i];
            s2[i] += b[i];
        }
    }
    (s, s2)
}

fn finish(s: f64, s2: f64, m: usize, budget: &QuadratureBudget) -> McEstimate {
    let mf = m as f64;
    let mean = s / mf;
    let var = ((s2 / mf - mean * mean).max(0.0)) * mf / (mf - 1.0).max(1.0);
    let se = (var / mf).sqrt();
    McEstimate {
        value: mean,
        std_error: se,
        samples: m,
        seed: budget.seed,
        flagged: se > budget.mc_rel_tol * mean.abs() && se > 0.0,
    }
}

/// Importance-sampled integrals of several integrands on shared samples.
pub fn mc_integral_vec<F>(f: F, width: usize, mix: &Mixture, budget: &QuadratureBudget) -> Result<Vec<McEstimate>>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    budget.validate()?;
    mix.validate()?;
    let (s, s2) = mc_blocks(mix, budget, width, |z, w, acc| {
        f(z, acc);
        for a in acc.iter_mut() {
            *a *= w;
        }
    });
    Ok((0..width).map(|i| finish(s[i], s2[i], budget.mc_samples, budget)).collect())
}

pub fn mc_integral<F>(f: F, mix: &Mixture, budget: &QuadratureBudget) -> Result<McEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    Ok(mc_integral_vec(|z, out| out[0] = f(z), 1, mix, budget)?[0])
}

/// Green constant 1/((N-2) omega_{N-1}).
pub fn green_constant(n: usize) -> f64 {
    1.0 / ((n as f64 - 2.0) * sphere_area(n))
}

/// Chart radius around y: half of (1/lambda + distance to the nearest Cauchy center).
fn chart_radius(mix: &Mixture, y: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    let mut scale: f64 = 0.0;
    for (_, c) in &mix.parts {
        match c {
            Component::Cauchy { center, lambda } => {
                best = best.min(dist2(y, center).sqrt());
                scale = scale.max(1.0 / lambda);
            }
            Component::Tube(t) => {
                scale = scale.max(t.rho);
            }
            Component::Chart { radius, .. } => scale = scale.max(*radius),
        }
    }
    if best.is_finite() {
        0.5 * (scale + best)
    } else {
        scale
    }
}

/// Newtonian potential (1/((N-2) omega)) int f(z) |y-z|^{2-N} dz, with a
/// singular chart centered at y added to the proposal.
pub fn riesz_apply<F>(f: F, y: &[f64], mix: &Mixture, budget: &QuadratureBudget) -> Result<McEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    Ok(riesz_apply_vec(|z, out| out[0] = f(z), 1, y, mix, budget)?[0])
}

/// Riesz potential of several densities at y on shared samples.
pub fn riesz_apply_vec<F>(f: F, width: usize, y: &[f64], mix: &Mixture, budget: &QuadratureBudget) -> Result<Vec<McEstimate>>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let n = mix.n;
    if y.len() != n {
        return Err(Error::InvalidInput("target point has wrong dimension".into()));
    }
    let mut probe = vec![0.0; width];
    f(y, &mut probe);
    if probe.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("density is not finite at the target point".into()));
    }
    let mix_y = mix.with_chart(y, chart_radius(mix, y), 0.2);
    let g = green_constant(n);
    let e = 2 - n as i32;
    mc_integral_vec(
        |z, out| {
            let r2 = dist2(z, y);
            if r2 == 0.0 {
                return;
            }
            f(z, out);
            let k = g * r2.sqrt().powi(e);
            for o in out.iter_mut() {
                *o *= k;
            }
        },
        width,
        &mix_y,
        budget,
    )
}

/// Volume integral over the solid torus. Section points are antithetic
/// pairs in the (N-1)-ball and theta is stratified, so constants and
/// functions odd in (r - r0, y'' - y0'') integrate exactly.
pub fn tube_integral<F>(f: F, d: &TubeDomain, budget: &QuadratureBudget) -> Result<McEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    Ok(tube_integral_vec(|y, out| out[0] = f(y), 1, d, budget)?[0])
}

pub fn tube_integral_vec<F>(f: F, width: usize, d: &TubeDomain, budget: &QuadratureBudget) -> Result<Vec<McEstimate>>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    budget.validate()?;
    let n = d.dim();
    let m = n - 1;
    let vol_ball = ball_volume(m) * d.rho.powi(m as i32);
    tube_driver(width, d, budget, |rng, stratum, out| {
        let mut b = [0.0; crate::bubbles::MAX_DIM];
        unit_direction(rng, &mut b[..m]);
        let rad = d.rho * rng.random::<f64>().powf(1.0 / m as f64);
        let th = theta_sample(rng, stratum, budget.angular_nodes);
        let mut y = [0.0; crate::bubbles::MAX_DIM];
        let mut tmp = vec![0.0; width];
        for sign in [1.0, -1.0] {
            let mut bb = [0.0; crate::bubbles::MAX_DIM];
            for i in 0..m {
                bb[i] = sign * rad * b[i];
            }
            d.embed(&bb[..m], th, &mut y[..n]);
            let r = d.r0 + bb[0];
            for t in tmp.iter_mut() {
                *t = 0.0;
            }
            f(&y[..n], &mut tmp);
            for i in 0..width {
                out[i] += 0.5 * 2.0 * PI * vol_ball * r * tmp[i];
            }
        }
    })
}

/// Boundary integral over the torus surface. `f(y, nu, out)` receives the
/// outward unit normal nu in R^N.
pub fn tube_boundary_integral_vec<F>(f: F, width: usize, d: &TubeDomain, budget: &QuadratureBudget) -> Result<Vec<McEstimate>>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Sync,
{
    budget.validate()?;
    let n = d.dim();
    let m = n - 1;
    let area_sec = sphere_area(m) * d.rho.powi(m as i32 - 1);
    tube_driver(width, d, budget, |rng, stratum, out| {
        let mut u = [0.0; crate::bubbles::MAX_DIM];
        unit_direction(rng, &mut u[..m]);
        let th = theta_sample(rng, stratum, budget.angular_nodes);
        let (st, ct) = th.sin_cos();
        let mut y = [0.0; crate::bubbles::MAX_DIM];
        let mut nu = [0.0; crate::bubbles::MAX_DIM];
        let mut tmp = vec![0.0; width];
        for sign in [1.0, -1.0] {
            let mut bb = [0.0; crate::bubbles::MAX_DIM];
            for i in 0..m {
                bb[i] = sign * d.rho * u[i];
            }
            d.embed(&bb[..m], th, &mut y[..n]);
            nu[0] = sign * u[0] * ct;
            nu[1] = sign * u[0] * st;
            for h in 2..n {
                nu[h] = sign * u[h - 1];
            }
            let r = d.r0 + bb[0];
            for t in tmp.iter_mut() {
                *t = 0.0;
            }
            f(&y[..n], &nu[..n], &mut tmp);
            for i in 0..width {
                out[i] += 0.5 * 2.0 * PI * area_sec * r * tmp[i];
            }
        }
    })
}

pub fn tube_boundary_integral<F>(f: F, d: &TubeDomain, budget: &QuadratureBudget) -> Result<McEstimate>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    Ok(tube_boundary_integral_vec(|y, nu, out| out[0] = f(y, nu), 1, d, budget)?[0])
}

fn theta_sample<R: Rng>(rng: &mut R, stratum: usize, strata: usize) -> f64 {
    2.0 * PI * ((stratum % strata) as f64 + rng.random::<f64>()) / strata as f64
}

/// Shared driver for tube rules: sample i uses theta stratum i.
fn tube_driver<S>(width: usize, _d: &TubeDomain, budget: &QuadratureBudget, one: S) -> Result<Vec<McEstimate>>
where
    S: Fn(&mut ChaCha8Rng, usize, &mut [f64]) + Sync,
{
    let m = budget.mc_samples;
    let nb = m.div_ceil(MC_BLOCK);
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..nb)
        .into_par_iter()
        .map(|b| {
            let mut rng = block_rng(budget.seed, b);
            let cnt = MC_BLOCK.min(m - b * MC_BLOCK);
            let mut s = vec![0.0; width];
            let mut s2 = vec![0.0; width];
            let mut acc = vec![0.0; width];
            for i in 0..cnt {
                for a in acc.iter_mut() {
                    *a = 0.0;
                }
                one(&mut rng, b * MC_BLOCK + i, &mut acc);
                for j in 0..width {
                    s[j] += acc[j];
                    s2[j] += acc[j] * acc[j];
                }
            }
            (s, s2)
        })
        .collect();
    let mut s = vec![0.0; width];
    let mut s2 = vec![0.0; width];
    for (a, b) in blocks {
        for i in 0..width {
            s[i] += a[i];
            s2[i] += b[i];
        }
    }
    Ok((0..width).map(|i| finish(s[i], s2[i], m, budget)).collect())
}

/// Volume integral over the tube with a bubble-focused proposal restricted
/// to the tube (integrand set to zero outside).
pub fn tube_integral_focused_vec<F>(
    f: F,
    width: usize,
    d: &TubeDomain,
    centers: &[Vec<f64>],
    lambda: f64,
    budget: &QuadratureBudget,
) -> Result<Vec<McEstimate>>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let inside: Vec<Vec<f64>> = centers
        .iter()
        .filter(|c| d.s_of(c) < d.rho + 4.0 / lambda)
        .cloned()
        .collect();
    let mut mix = Mixture::bubbles(d.dim(), &inside, lambda, Some(d.clone()));
    if inside.is_empty() {
        mix = Mixture::tube_only(d.clone());
    } else {
        // raise the uniform share so the whole section is covered
        let k = inside.len() as f64;
        for (w, c) in mix.parts.iter_mut() {
            *w = match c {
                Component::Tube(_) => 0.3,
                _ => 0.7 / k,
            };
        }
    }
    mc_integral_vec(
        |z, out| {
            if d.contains(z) {
                f(z, out)
            }
        },
        width,
        &mix,
        budget,
    )
}

/// Squared Euclidean norm, exposed for callers building integrands.
pub fn sq(z: &[f64]) -> f64 {
    norm2(z)
}
