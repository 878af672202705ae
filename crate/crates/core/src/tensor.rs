//! Small fixed-size matrix types used throughout the crate.
//!
//! A full gradient `ξ ∈ R^{3×3}` is split into its in-plane block
//! `ξ̄ = (ξ₁|ξ₂) ∈ R^{3×2}` and its transverse column `ξ₃ ∈ R³`.

use serde::{Deserialize, Serialize};

/// A vector in R³, used for Cosserat (bending) vectors and jump amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CosseratVector(pub [f64; 3]);

/// A 3×2 matrix, stored row-major: `self.0[i][α]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlanarMatrix(pub [[f64; 2]; 3]);

/// A 3×3 matrix, stored row-major: `self.0[i][j]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FullMatrix(pub [[f64; 3]; 3]);

impl CosseratVector {
    pub const ZERO: Self = Self([0.0; 3]);

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self([x, y, z])
    }

    pub fn e(i: usize) -> Self {
        let mut v = [0.0; 3];
        v[i] = 1.0;
        Self(v)
    }

    pub fn norm(&self) -> f64 {
        norm3(&self.0)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1] + self.0[2] * other.0[2]
    }

    pub fn scale(&self, t: f64) -> Self {
        Self([self.0[0] * t, self.0[1] * t, self.0[2] * t])
    }

    pub fn add(&self, other: &Self) -> Self {
        Self([self.0[0] + other.0[0], self.0[1] + other.0[1], self.0[2] + other.0[2]])
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self([self.0[0] - other.0[0], self.0[1] - other.0[1], self.0[2] - other.0[2]])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `z ⊗ ν` for a planar direction `ν`.
    pub fn outer(&self, nu: [f64; 2]) -> PlanarMatrix {
        let z = &self.0;
        PlanarMatrix([
            [z[0] * nu[0], z[0] * nu[1]],
            [z[1] * nu[0], z[1] * nu[1]],
            [z[2] * nu[0], z[2] * nu[1]],
        ])
    }
}

impl PlanarMatrix {
    pub const ZERO: Self = Self([[0.0; 2]; 3]);

    /// Builds from the six entries in row-major order `ξ11, ξ12, ξ21, ξ22, ξ31, ξ32`.
    pub fn from_row_major(v: [f64; 6]) -> Self {
        Self([[v[0], v[1]], [v[2], v[3]], [v[4], v[5]]])
    }

    pub fn to_row_major(&self) -> [f64; 6] {
        let m = &self.0;
        [m[0][0], m[0][1], m[1][0], m[1][1], m[2][0], m[2][1]]
    }

    pub fn norm(&self) -> f64 {
        let m = &self.0;
        (m[0][0] * m[0][0]
            + m[0][1] * m[0][1]
            + m[1][0] * m[1][0]
            + m[1][1] * m[1][1]
            + m[2][0] * m[2][0]
            + m[2][1] * m[2][1])
            .sqrt()
    }

    pub fn scale(&self, t: f64) -> Self {
        let mut out = self.0;
        out.iter_mut().flatten().for_each(|v| *v *= t);
        Self(out)
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.0;
        for (row, o) in out.iter_mut().zip(other.0.iter()) {
            row[0] += o[0];
            row[1] += o[1];
        }
        Self(out)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    /// Applies `x_α ↦ ξ̄ x_α`.
    pub fn apply(&self, x: [f64; 2]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * x[0] + m[0][1] * x[1],
            m[1][0] * x[0] + m[1][1] * x[1],
            m[2][0] * x[0] + m[2][1] * x[1],
        ]
    }

    /// Right multiplication by a 2×2 matrix given row-major.
    pub fn mul_2x2(&self, r: [[f64; 2]; 2]) -> Self {
        let m = &self.0;
        let mut out = [[0.0; 2]; 3];
        for i in 0..3 {
            for a in 0..2 {
                out[i][a] = m[i][0] * r[0][a] + m[i][1] * r[1][a];
            }
        }
        Self(out)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    /// Returns the column `α` (0 or 1).
    pub fn column(&self, a: usize) -> [f64; 3] {
        [self.0[0][a], self.0[1][a], self.0[2][a]]
    }
}

impl FullMatrix {
    pub const ZERO: Self = Self([[0.0; 3]; 3]);

    /// Assembles `(ξ̄|ξ₃)`.
    pub fn join(planar: &PlanarMatrix, third: &CosseratVector) -> Self {
        let p = &planar.0;
        let t = &third.0;
        Self([
            [p[0][0], p[0][1], t[0]],
            [p[1][0], p[1][1], t[1]],
            [p[2][0], p[2][1], t[2]],
        ])
    }

    pub fn planar(&self) -> PlanarMatrix {
        let m = &self.0;
        PlanarMatrix([[m[0][0], m[0][1]], [m[1][0], m[1][1]], [m[2][0], m[2][1]]])
    }

    pub fn third(&self) -> CosseratVector {
        let m = &self.0;
        CosseratVector([m[0][2], m[1][2], m[2][2]])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, t: f64) -> Self {
        let mut out = self.0;
        out.iter_mut().flatten().for_each(|v| *v *= t);
        Self(out)
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.0;
        for (row, o) in out.iter_mut().zip(other.0.iter()) {
            for (v, w) in row.iter_mut().zip(o.iter()) {
                *v += w;
            }
        }
        Self(out)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    /// Builds from nine entries in row-major order.
    pub fn from_row_major(v: [f64; 9]) -> Self {
        Self([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }
}

#[inline]
pub(crate) fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Norm of the pair `(ξ̄|b)` viewed as a full matrix.
pub fn pair_norm(xi: &PlanarMatrix, b: &CosseratVector) -> f64 {
    FullMatrix::join(xi, b).norm()
}
