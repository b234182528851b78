//! Evaluable scalar field pairs on R^N.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Ansatz,
    Residual,
    Correction,
    Custom,
}

/// A pair (u, v) of scalar fields with gradients.
pub trait PairField: Sync {
    fn dim(&self) -> usize;

    fn provenance(&self) -> Provenance {
        Provenance::Custom
    }

    fn eval(&self, y: &[f64]) -> (f64, f64);

    /// Values plus gradients written into `gu`, `gv`. The default uses
    /// central differences.
    fn eval_grad(&self, y: &[f64], gu: &mut [f64], gv: &mut [f64]) -> (f64, f64) {
        let n = self.dim();
        let mut z = y.to_vec();
        for i in 0..n {
            let h = 1e-6 * (1.0 + y[i].abs());
            z[i] = y[i] + h;
            let (up, vp) = self.eval(&z);
            z[i] = y[i] - h;
            let (um, vm) = self.eval(&z);
            z[i] = y[i];
            gu[i] = (up - um) / (2.0 * h);
            gv[i] = (vp - vm) / (2.0 * h);
        }
        self.eval(y)
    }
}

/// Closure-backed field pair.
pub struct FnPair<F> {
    pub n: usize,
    pub tag: Provenance,
    pub f: F,
}

impl<F> FnPair<F>
where
    F: Fn(&[f64]) -> (f64, f64) + Sync,
{
    pub fn new(n: usize, f: F) -> Self {
        FnPair {
            n,
            tag: Provenance::Custom,
            f,
        }
    }
}

impl<F> PairField for FnPair<F>
where
    F: Fn(&[f64]) -> (f64, f64) + Sync,
{
    fn dim(&self) -> usize {
        self.n
    }

    fn provenance(&self) -> Provenance {
        self.tag
    }

    fn eval(&self, y: &[f64]) -> (f64, f64) {
        (self.f)(y)
    }
}

/// Closure-backed pair with analytic gradients.
pub struct FnPairGrad<F> {
    pub n: usize,
    pub tag: Provenance,
    pub f: F,
}

impl<F> PairField for FnPairGrad<F>
where
    F: Fn(&[f64], &mut [f64], &mut [f64]) -> (f64, f64) + Sync,
{
    fn dim(&self) -> usize {
        self.n
    }

    fn provenance(&self) -> Provenance {
        self.tag
    }

    fn eval(&self, y: &[f64]) -> (f64, f64) {
        let mut gu = vec![0.0; self.n];
        let mut gv = vec![0.0; self.n];
        (self.f)(y, &mut gu, &mut gv)
    }

    fn eval_grad(&self, y: &[f64], gu: &mut [f64], gv: &mut [f64]) -> (f64, f64) {
        (self.f)(y, gu, gv)
    }
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

