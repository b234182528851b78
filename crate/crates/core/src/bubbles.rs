//! Aubin–Talenti bubble algebra and the synchronized amplitudes (kappa, s).

use crate::error::{Error, Result};
use crate::field::dist2;
use serde::{Deserialize, Serialize};

pub const MAX_DIM: usize = 16;

/// Space dimension N with 5 <= N <= MAX_DIM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Dimension(usize);

impl TryFrom<usize> for Dimension {
    type Error = Error;
    fn try_from(n: usize) -> Result<Self> {
        Dimension::new(n)
    }
}

impl From<Dimension> for usize {
    fn from(d: Dimension) -> usize {
        d.0
    }
}

impl Dimension {
    pub fn new(n: usize) -> Result<Self> {
        if (5..=MAX_DIM).contains(&n) {
            Ok(Dimension(n))
        } else {
            Err(Error::Dimension(n))
        }
    }

    pub fn n(self) -> usize {
        self.0
    }

    pub fn nf(self) -> f64 {
        self.0 as f64
    }

    /// 2* = 2N/(N-2).
    pub fn two_star(self) -> f64 {
        2.0 * self.nf() / (self.nf() - 2.0)
    }

    /// p = 2* - 1.
    pub fn p(self) -> f64 {
        self.two_star() - 1.0
    }

    /// q = 2*/2.
    pub fn q(self) -> f64 {
        self.nf() / (self.nf() - 2.0)
    }

    /// tau = (N-4)/(N-2).
    pub fn tau(self) -> f64 {
        (self.nf() - 4.0) / (self.nf() - 2.0)
    }

    /// (N(N-2))^{(N-2)/4}.
    pub fn bubble_const(self) -> f64 {
        let n = self.nf();
        (n * (n - 2.0)).powf((n - 2.0) / 4.0)
    }

    /// (N-2)/(N-4), the exponent in lambda = t k^{(N-2)/(N-4)}.
    pub fn window_exponent(self) -> f64 {
        (self.nf() - 2.0) / (self.nf() - 4.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleParams {
    pub center: Vec<f64>,
    pub lambda: f64,
}

/// Bubble value as a function of |y-x|^2.
#[inline]
pub fn bubble_profile(n: Dimension, lambda: f64, r2: f64) -> f64 {
    let e = (n.nf() - 2.0) / 2.0;
    n.bubble_const() * (lambda / (1.0 + lambda * lambda * r2)).powf(e)
}

pub fn bubble_eval(n: Dimension, p: &BubbleParams, y: &[f64]) -> f64 {
    bubble_profile(n, p.lambda, dist2(y, &p.center))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BubbleGradients {
    pub value: f64,
    pub grad_y: Vec<f64>,
    pub d_lambda: f64,
    pub grad_x: Vec<f64>,
}

pub fn bubble_gradients(n: Dimension, p: &BubbleParams, y: &[f64]) -> BubbleGradients {
    let r2 = dist2(y, &p.center);
    let l = p.lambda;
    let w = bubble_profile(n, l, r2);
    let a = 1.0 + l * l * r2;
    let nm2 = n.nf() - 2.0;
    let grad_y: Vec<f64> = y
        .iter()
        .zip(&p.center)
        .map(|(yi, xi)| -nm2 * l * l * (yi - xi) * w / a)
        .collect();
    let d_lambda = w * nm2 / (2.0 * l) * (1.0 - l * l * r2) / a;
    let grad_x = grad_y.iter().map(|g| -g).collect();
    BubbleGradients {
        value: w,
        grad_y,
        d_lambda,
        grad_x,
    }
}

/// Delta w = -w^{2*-1}.
pub fn bubble_laplacian(n: Dimension, p: &BubbleParams, y: &[f64]) -> f64 {
    -bubble_eval(n, p, y).powf(n.p())
}

/// Left side of the substitution-derived kappa equation.
pub fn kappa_consistency(beta: f64, n: Dimension, kappa: f64) -> f64 {
    let q = n.q();
    2.0 + beta * kappa.powf(q) - beta * kappa.powf(q - 2.0) - 2.0 * kappa.powf(n.two_star() - 2.0)
}

/// Left side of the kappa equation in its printed form (no beta on the second term).
pub fn kappa_printed(beta: f64, n: Dimension, kappa: f64) -> f64 {
    let q = n.q();
    2.0 + kappa.powf(q) - beta * kappa.powf(q - 2.0) - 2.0 * kappa.powf(n.two_star() - 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaRoot {
    pub kappa: f64,
    pub residual: f64,
    pub printed_residual: f64,
}

/// All positive roots of the consistency equation in `interval`, ascending.
pub fn solve_kappa(beta: f64, n: Dimension, interval: (f64, f64)) -> Result<Vec<KappaRoot>> {
    if !beta.is_finite() {
        return Err(Error::InvalidInput(format!("beta = {beta}")));
    }
    let (lo, hi) = interval;
    if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "kappa search interval ({lo}, {hi}) must be positive and finite"
        )));
    }
    if hi <= lo {
        return Ok(Vec::new());
    }
    let f = |k: f64| kappa_consistency(beta, n, k);
    let step = 1e-3;
    let m = ((hi - lo) / step).ceil() as usize;
    let grid = |i: usize| if i >= m { hi } else { lo + i as f64 * step };
    let mut roots: Vec<f64> = Vec::new();
    let mut prev_x = grid(0);
    let mut prev_f = f(prev_x);
    if prev_f == 0.0 {
        roots.push(prev_x);
    }
    let mut pprev_f = f64::NAN;
    for i in 1..=m {
        let x = grid(i);
        let fx = f(x);
        if fx == 0.0 {
            roots.push(x);
        } else if prev_f != 0.0 && prev_f.signum() != fx.signum() {
            roots.push(bisect(&f, prev_x, x, prev_f));
        } else if prev_f != 0.0
            && pprev_f.is_finite()
            && prev_f.abs() < 1e-6
            && prev_f.abs() <= pprev_f.abs()
            && prev_f.abs() <= fx.abs()
            && pprev_f.signum() == prev_f.signum()
            && fx.signum() == prev_f.signum()
        {
            // touching root without a sign change
            let a = grid(i - 2);
            let xm = golden_min(|k| f(k).abs(), a, x);
            if f(xm).abs() < 1e-12 {
                roots.push(xm);
            }
        }
        pprev_f = prev_f;
        prev_x = x;
        prev_f = fx;
    }
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-9 * (1.0 + b.abs()));
    Ok(roots
        .into_iter()
        .map(|k| KappaRoot {
            kappa: k,
            residual: f(k),
            printed_residual: kappa_printed(beta, n, k),
        })
        .collect())
}

fn bisect(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    let fb = f(b);
    if fa.abs() <= fb.abs() {
        a
    } else {
        b
    }
}

fn golden_min(g: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    for _ in 0..200 {
        if g(c) < g(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - r * (b - a);
        d = a + r * (b - a);
        if (b - a).abs() < 1e-15 * (1.0 + a.abs()) {
            break;
        }
    }
    0.5 * (a + b)
}

/// s = (2/(2 + beta kappa^{2*/2}))^{(N-2)/4}.
pub fn solve_s(beta: f64, kappa: f64, n: Dimension) -> Result<f64> {
    let d = 2.0 + beta * kappa.powf(n.q());
    if !(d > 0.0) {
        return Err(Error::SynchronizationUndefined(d));
    }
    Ok((2.0 / d).powf((n.nf() - 2.0) / 4.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingData {
    pub n: Dimension,
    pub beta: f64,
    pub kappa: f64,
    pub s: f64,
}

impl CouplingData {
    /// Builds the coupling with s from `solve_s`; checks 1 + beta kappa^{2*/2} > 0.
    pub fn new(n: Dimension, beta: f64, kappa: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::InvalidInput(format!("kappa = {kappa}")));
        }
        let s = solve_s(beta, kappa, n)?;
        let c = CouplingData { n, beta, kappa, s };
        if !(c.assumption_iii() > 0.0) {
            return Err(Error::Domain(format!(
                "1 + beta kappa^(2*/2) = {} <= 0",
                c.assumption_iii()
            )));
        }
        Ok(c)
    }

    /// Uncoupled reference: beta = 0, kappa = 1, s = 1.
    pub fn decoupled(n: Dimension) -> Self {
        CouplingData {
            n,
            beta: 0.0,
            kappa: 1.0,
            s: 1.0,
        }
    }

    /// Uses the root kappa = 1 of the consistency equation.
    pub fn symmetric(n: Dimension, beta: f64) -> Result<Self> {
        CouplingData::new(n, beta, 1.0)
    }

    /// 1 + beta kappa^{2*/2}.
    pub fn assumption_iii(&self) -> f64 {
        1.0 + self.beta * self.kappa.powf(self.n.q())
    }

    /// s^{2*-2}(1 + (beta/2) kappa^{2*/2}), equal to 1 by construction.
    pub fn s_invariant(&self) -> f64 {
        self.s.powf(self.n.two_star() - 2.0) * (1.0 + 0.5 * self.beta * self.kappa.powf(self.n.q()))
    }
}

/// Max pointwise residual of the potential-free system on (s w_{0,1}, kappa s w_{0,1}).
pub fn verify_sync_solution(c: &CouplingData, sample: &[Vec<f64>]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    let n = c.n;
    let p = n.p();
    let q = n.q();
    let mut worst = 0.0f64;
    for y in sample {
        if y.len() != n.n() {
            return Err(Error::InvalidInput("sample point has wrong dimension".into()));
        }
        let r2: f64 = y.iter().map(|t| t * t).sum();
        let w = bubble_profile(n, 1.0, r2);
        let u = c.s * w;
        let v = c.kappa * c.s * w;
        let lap_u = -c.s * w.powf(p);
        let lap_v = -c.kappa * c.s * w.powf(p);
        let r1 = -lap_u - u.powf(p) - 0.5 * c.beta * u.powf(q - 1.0) * v.powf(q);
        let r2_ = -lap_v - v.powf(p) - 0.5 * c.beta * v.powf(q - 1.0) * u.powf(q);
        worst = worst.max(r1.abs()).max(r2_.abs());
    }
    Ok(worst)
}
