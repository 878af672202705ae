//! Convex envelope of the double-well transverse density
//! `g(b) = min(|b − s e₃|, |b + s e₃|) + c|b|`.
//!
//! The envelope of a minimum of two convex functions is
//! `Cg(b) = min_θ min_u θ f₁(u/θ) + (1−θ) f₂((b−u)/(1−θ))`; both perspectives
//! are sums of norms of affine maps, so for fixed θ the inner problem is a
//! Fermat–Weber problem and the outer function of θ is convex.

use crate::energy::{EnergyDensity, TableParams};
use crate::error::Result;
use crate::optim::golden_section;

/// Weighted Fermat–Weber value `min_u Σ w_k |u − a_k|` in the plane.
fn fermat_weber(anchors: &[[f64; 2]; 4], weights: &[f64; 4]) -> f64 {
    let obj = |u: [f64; 2]| -> f64 {
        anchors
            .iter()
            .zip(weights)
            .map(|(a, w)| w * ((u[0] - a[0]).powi(2) + (u[1] - a[1]).powi(2)).sqrt())
            .sum()
    };
    let mut best = anchors.iter().map(|a| obj(*a)).fold(f64::INFINITY, f64::min);
    let wsum: f64 = weights.iter().sum();
    let mut u = [0.0, 0.0];
    for (a, w) in anchors.iter().zip(weights) {
        u[0] += w * a[0] / wsum;
        u[1] += w * a[1] / wsum;
    }
    for _ in 0..300 {
        let (mut nx, mut ny, mut den) = (0.0, 0.0, 0.0);
        let mut at_anchor = false;
        for (a, w) in anchors.iter().zip(weights) {
            let d = ((u[0] - a[0]).powi(2) + (u[1] - a[1]).powi(2)).sqrt();
            if d < 1e-14 {
                at_anchor = true;
                break;
            }
            nx += w * a[0] / d;
            ny += w * a[1] / d;
            den += w / d;
        }
        if at_anchor {
            break;
        }
        let next = [nx / den, ny / den];
        let step = (next[0] - u[0]).abs() + (next[1] - u[1]).abs();
        u = next;
        if step < 1e-13 {
            break;
        }
    }
    best = best.min(obj(u));
    best
}

/// `Cg(b)` for the double-well density with well depth `s` and cone weight `c`.
pub fn laminate_well_envelope(s: f64, c: f64, b: [f64; 3]) -> f64 {
    // Everything happens in the plane spanned by e₃ and b: coordinates (ρ, t).
    let rho = (b[0] * b[0] + b[1] * b[1]).sqrt();
    let t = b[2];
    let value_at = |theta: f64| {
        let anchors = [
            [0.0, theta * s],
            [0.0, 0.0],
            [rho, t + (1.0 - theta) * s],
            [rho, t],
        ];
        fermat_weber(&anchors, &[1.0, c, 1.0, c])
    };
    let inner = golden_section(0.0, 1.0, 1e-9, 0.0, 80, value_at);
    inner.value.min(value_at(0.0)).min(value_at(1.0))
}

/// The well density `g` itself, for comparison against its envelope.
pub fn laminate_well(s: f64, c: f64, b: [f64; 3]) -> f64 {
    let n = |z: f64| (b[0] * b[0] + b[1] * b[1] + z * z).sqrt();
    n(b[2] - s).min(n(b[2] + s)) + c * n(b[2])
}

/// A `user-table` model for `p|ξ̄| + Cg(b)`, the relaxed separable-laminate
/// density, tabulated on `[0, R] × [−R, R]` with the given step.
pub fn laminate_envelope_model(p: f64, s: f64, c: f64, radius: f64, step: f64) -> Result<EnergyDensity> {
    let n = (radius / step).round() as usize;
    let h = radius / n as f64;
    // Cg is even in b₃, so tabulate t ≥ 0 and mirror.
    let half: Vec<Vec<f64>> = (0..=n)
        .map(|i| (0..=n).map(|j| laminate_well_envelope(s, c, [i as f64 * h, 0.0, j as f64 * h])).collect())
        .collect();
    let values: Vec<Vec<f64>> = half
        .iter()
        .map(|row| {
            let mut full: Vec<f64> = row.iter().rev().copied().collect();
            full.extend_from_slice(&row[1..]);
            full
        })
        .collect();
    EnergyDensity::user_table(TableParams {
        p,
        rho_max: radius,
        t_max: radius,
        values,
        slope: 1.0 + c,
        recession: "closed-form".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_on_axis_matches_one_dimensional_hull() {
        for t in [-2.0, -1.0, -0.4, 0.0, 0.3, 1.0, 1.7] {
            let v = laminate_well_envelope(1.0, 0.5, [0.0, 0.0, t]);
            let expect = f64::max(0.5, 1.5 * f64::abs(t) - 1.0);
            assert!((v - expect).abs() < 1e-7, "t={t}: {v} vs {expect}");
        }
    }

    #[test]
    fn envelope_lies_below_well_and_above_affine_minorants() {
        for &b in &[[0.5, 0.0, 0.2], [1.2, -0.3, 0.9], [0.0, 0.1, 0.0], [2.0, 0.0, -2.0]] {
            let e = laminate_well_envelope(1.0, 0.5, b);
            let n = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            assert!(e <= laminate_well(1.0, 0.5, b) + 1e-9);
            assert!(e >= 0.5 - 1e-9 && e >= 1.5 * n - 1.0 - 1e-9);
        }
    }

    #[test]
    fn envelope_is_midpoint_convex_on_samples() {
        let pts = [[0.3, 0.0, 0.8], [1.1, 0.2, -0.5], [0.0, 0.7, 0.1], [0.9, -0.9, 1.4]];
        for a in &pts {
            for b in &pts {
                let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0];
                let lhs = laminate_well_envelope(1.0, 0.5, mid);
                let rhs = 0.5 * (laminate_well_envelope(1.0, 0.5, *a) + laminate_well_envelope(1.0, 0.5, *b));
                assert!(lhs <= rhs + 1e-8);
            }
        }
    }
}
