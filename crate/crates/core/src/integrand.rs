//! Integrands seen by the cell solvers: the density itself and the
//! transformations the relaxation formulas need (scaling for recession
//! ladders, the closed-form recession, rotated cells, the moment-free `W₀`).

use crate::energy::{EnergyDensity, Mat3};
use crate::error::{Error, Result};

pub trait Integrand: Send + Sync {
    /// Smoothed value and gradient (overwritten into `grad`); `δ = 0` is exact.
    fn smoothed(&self, m: &Mat3, delta: f64, grad: &mut Mat3) -> f64;

    fn value(&self, m: &Mat3) -> f64 {
        let mut scratch = [[0.0; 3]; 3];
        self.smoothed(m, 0.0, &mut scratch)
    }

    /// Growth constants `(β′, β)`: `β′|ξ| ≤ f(ξ) ≤ β(1+|ξ|)`.
    fn growth(&self) -> (f64, f64);

    fn is_convex(&self) -> bool;
}

impl Integrand for EnergyDensity {
    fn smoothed(&self, m: &Mat3, delta: f64, grad: &mut Mat3) -> f64 {
        EnergyDensity::smoothed(self, m, delta, grad)
    }

    fn value(&self, m: &Mat3) -> f64 {
        EnergyDensity::value(self, m)
    }

    fn growth(&self) -> (f64, f64) {
        let c = self.constants();
        (c.beta_lower, c.beta_upper)
    }

    fn is_convex(&self) -> bool {
        EnergyDensity::is_convex(self)
    }
}

/// `ξ ↦ f(tξ)/t`. Smoothing is applied at scale `tδ` on the inner
/// integrand so that the effective Huber width in `ξ` stays `δ`.
pub struct Scaled<'a> {
    pub inner: &'a dyn Integrand,
    pub t: f64,
}

impl Integrand for Scaled<'_> {
    fn smoothed(&self, m: &Mat3, delta: f64, grad: &mut Mat3) -> f64 {
        let mut s = *m;
        s.iter_mut().flatten().for_each(|v| *v *= self.t);
        self.inner.smoothed(&s, delta * self.t, grad) / self.t
    }

    fn growth(&self) -> (f64, f64) {
        self.inner.growth()
    }

    fn is_convex(&self) -> bool {
        self.inner.is_convex()
    }
}

/// The closed-form recession `W^∞` of a model.
pub struct Recession<'a> {
    model: &'a EnergyDensity,
}

impl<'a> Recession<'a> {
    pub fn new(model: &'a EnergyDensity) -> Result<Self> {
        if !model.has_closed_form_recession() {
            return Err(Error::Model(format!(
                "{} model has no closed-form recession to build a cell integrand from",
                model.kind().name()
            )));
        }
        Ok(Self { model })
    }
}

impl Integrand for Recession<'_> {
    fn smoothed(&self, m: &Mat3, delta: f64, grad: &mut Mat3) -> f64 {
        self.model
            .recession_smoothed(m, delta, grad)
            .expect("checked at construction")
    }

    fn growth(&self) -> (f64, f64) {
        let c = self.model.constants();
        (c.beta_lower, c.beta_upper)
    }

    fn is_convex(&self) -> bool {
        self.model.is_convex()
    }
}

/// `(η̄|b) ↦ f(η̄Rᵀ|b)`: the integrand of a cell problem posed on a rotated
/// cube, pulled back to the standard cube. `r` is row-major with columns
/// `(ν⊥, ν)`.
pub struct Rotated<'a> {
    pub inner: &'a dyn Integrand,
    pub r: [[f64; 2]; 2],
}

impl Integrand for Rotated<'_> {
    fn smoothed(&self, m: &Mat3, delta: f64, grad: &mut Mat3) -> f64 {
        let r = &self.r;
        let mut q = *m;
        for i in 0..3 {
            // (η̄ Rᵀ)_{iα} = Σ_β η̄_{iβ} R_{αβ}
            q[i][0] = m[i][0] * r[0][0] + m[i][1] * r[0][1];
            q[i][1] = m[i][0] * r[1][0] + m[i][1] * r[1][1];
        }
        let mut g = [[0.0; 3]; 3];
        let v = self.inner.smoothed(&q, delta, &mut g);
        *grad = g;
        for i in 0..3 {
            // ∂/∂η̄ = (∂f/∂ξ̄) R
            grad[i][0] = g[i][0] * r[0][0] + g[i][1] * r[1][0];
            grad[i][1] = g[i][0] * r[0][1] + g[i][1] * r[1][1];
        }
        v
    }

    fn growth(&self) -> (f64, f64) {
        self.inner.growth()
    }

    fn is_convex(&self) -> bool {
        self.inner.is_convex()
    }
}

/// `W₀(ξ̄) = inf_b W(ξ̄|b)` in closed form; ignores the third column.
pub struct ZeroMoment<'a> {
    pub model: &'a EnergyDensity,
}

impl Integrand for ZeroMoment<'_> {
    fn smoothed(&self, m: &Mat3, delta: f64, grad: &mut Mat3) -> f64 {
        self.model.w_zero_smoothed(m, delta, grad)
    }

    fn growth(&self) -> (f64, f64) {
        let c = self.model.constants();
        (c.beta_lower, c.beta_upper)
    }

    fn is_convex(&self) -> bool {
        self.model.is_convex()
    }
}

/// Rotation with columns `(ν⊥, ν)`, `ν⊥ = (ν₂, −ν₁)`. Equals the identity for `ν = e₂`.
pub fn rotation_for_normal(nu: [f64; 2]) -> [[f64; 2]; 2] {
    [[nu[1], nu[0]], [-nu[0], nu[1]]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_of_e2_is_identity() {
        assert_eq!(rotation_for_normal([0.0, 1.0]), [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn rotated_gradient_matches_finite_differences() {
        let model = EnergyDensity::separable_laminate(1.0, 1.0, 0.5).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let rot = Rotated {
            inner: &model,
            r: rotation_for_normal([s, s]),
        };
        let m: Mat3 = [[0.3, -0.2, 0.1], [0.05, 0.4, -0.3], [-0.1, 0.2, 0.7]];
        let mut g = [[0.0; 3]; 3];
        let v = rot.smoothed(&m, 0.01, &mut g);
        for i in 0..3 {
            for j in 0..3 {
                let mut mp = m;
                mp[i][j] += 1e-7;
                let mut sc = [[0.0; 3]; 3];
                let vp = rot.smoothed(&mp, 0.01, &mut sc);
                assert!(((vp - v) / 1e-7 - g[i][j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn scaled_approaches_recession() {
        let model = EnergyDensity::separable_laminate(1.0, 1.0, 0.5).unwrap();
        let sc = Scaled { inner: &model, t: 1e6 };
        let m: Mat3 = [[0.0; 3], [0.0; 3], [0.0, 0.0, 1.0]];
        assert!((sc.value(&m) - 1.5).abs() < 1e-5);
    }
}
