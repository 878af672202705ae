//! Discretized cell problems on `Q′ × I`, `Q′ = (−½,½)²`, `I = (−½,½)`.
//!
//! Fields live on `n × n × (n₃+1)` nodes, periodic in-plane (no duplicated
//! seam nodes) and free across `x₃`. On each of the `n² n₃` cells the
//! in-plane derivatives are forward differences averaged over the cell's
//! bottom and top node layers, the transverse derivative is the forward
//! difference along the cell's corner column, and the density is sampled
//! once per cell.
//!
//! The test field is split as `φ = x₃ b/λ + ψ`; the constraint
//! `λ·mean(∇₃φ) = b` becomes `mean(∇₃ψ) = 0`, which is enforced exactly by
//! the shift `ψ ← ψ − x₃·mean(∇₃ψ)` applied inside every energy evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{local_minima_in_b, pick_minimizer, EnergyDensity, Mat3};
use crate::error::{check_finite, ConvergenceDiagnostics, Error, Result};
use crate::integrand::{rotation_for_normal, Integrand, Recession, Rotated, Scaled, ZeroMoment};
use crate::optim::{fit_decay_best, golden_section, lbfgs, LbfgsConfig, LbfgsOutcome};
use crate::tensor::{CosseratVector, FullMatrix, PlanarMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGrid {
    pub n_alpha: usize,
    pub n_three: usize,
}

impl Default for CellGrid {
    fn default() -> Self {
        Self {
            n_alpha: 16,
            n_three: 8,
        }
    }
}

impl CellGrid {
    pub fn new(n_alpha: usize, n_three: usize) -> Result<Self> {
        let g = Self { n_alpha, n_three };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_alpha < 4 || self.n_three < 2 {
            return Err(Error::Invalid(format!(
                "cell grid needs n_alpha ≥ 4 and n_three ≥ 2, got {}×{}",
                self.n_alpha, self.n_three
            )));
        }
        Ok(())
    }

    pub fn nodes(&self) -> usize {
        self.n_alpha * self.n_alpha * (self.n_three + 1)
    }

    pub fn cells(&self) -> usize {
        self.n_alpha * self.n_alpha * self.n_three
    }

    /// Solver tolerance `C·(1/n_alpha + 1/n_three)`.
    pub fn q_tol(&self, constant: f64) -> f64 {
        constant * (1.0 / self.n_alpha as f64 + 1.0 / self.n_three as f64)
    }

    /// Doubles the resolution along every axis.
    pub fn refined(&self) -> Self {
        Self {
            n_alpha: 2 * self.n_alpha,
            n_three: 2 * self.n_three,
        }
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n_alpha + j) * self.n_alpha + i
    }

    /// `x₃` coordinate of node layer `k`.
    #[inline]
    pub fn x3(&self, k: usize) -> f64 {
        k as f64 / self.n_three as f64 - 0.5
    }
}

/// Nodal values of the test field `φ` on a [`CellGrid`], node `(i, j, k)`
/// stored at `(k·n + j)·n + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellField {
    pub grid: CellGrid,
    pub lambda: f64,
    pub b: CosseratVector,
    pub values: Vec<[f64; 3]>,
}

impl CellField {
    fn from_fluctuation(grid: CellGrid, lambda: f64, b: CosseratVector, psi: &[f64]) -> Self {
        let shift = mean_d3(grid, psi);
        let mut values = Vec::with_capacity(grid.nodes());
        for k in 0..=grid.n_three {
            let x3 = grid.x3(k);
            for j in 0..grid.n_alpha {
                for i in 0..grid.n_alpha {
                    let n = grid.index(i, j, k);
                    let mut v = [0.0; 3];
                    for c in 0..3 {
                        v[c] = x3 * b.0[c] / lambda + psi[3 * n + c] - x3 * shift[c];
                    }
                    values.push(v);
                }
            }
        }
        Self { grid, lambda, b, values }
    }

    /// `ψ = φ − x₃ b/λ` flattened.
    pub fn fluctuation(&self) -> Vec<f64> {
        let g = self.grid;
        let mut psi = vec![0.0; 3 * g.nodes()];
        for k in 0..=g.n_three {
            let x3 = g.x3(k);
            for j in 0..g.n_alpha {
                for i in 0..g.n_alpha {
                    let n = g.index(i, j, k);
                    for c in 0..3 {
                        psi[3 * n + c] = self.values[n][c] - x3 * self.b.0[c] / self.lambda;
                    }
                }
            }
        }
        psi
    }

    /// `|λ·mean(∇₃φ) − b|`.
    pub fn constraint_residual(&self) -> f64 {
        let g = self.grid;
        let n2 = (g.n_alpha * g.n_alpha) as f64;
        let mut mean = [0.0; 3];
        for j in 0..g.n_alpha {
            for i in 0..g.n_alpha {
                let top = self.values[g.index(i, j, g.n_three)];
                let bot = self.values[g.index(i, j, 0)];
                for c in 0..3 {
                    mean[c] += (top[c] - bot[c]) / n2;
                }
            }
        }
        CosseratVector([
            self.lambda * mean[0] - self.b.0[0],
            self.lambda * mean[1] - self.b.0[1],
            self.lambda * mean[2] - self.b.0[2],
        ])
        .norm()
    }

    /// Whether the fluctuation varies within any node layer.
    pub fn has_in_plane_variation(&self) -> bool {
        let g = self.grid;
        (0..=g.n_three).any(|k| {
            let first = self.values[g.index(0, 0, k)];
            (0..g.n_alpha * g.n_alpha).any(|m| {
                let v = self.values[k * g.n_alpha * g.n_alpha + m];
                (0..3).any(|c| (v[c] - first[c]).abs() > 1e-12 * (1.0 + first[c].abs()))
            })
        })
    }

    /// Trilinear interpolation of the fluctuation `ψ` at `y ∈ R²`
    /// (periodically wrapped onto `Q′`) and `x₃ ∈ [−½, ½]`.
    pub fn fluctuation_at(&self, y: [f64; 2], x3: f64) -> [f64; 3] {
        let g = self.grid;
        let n = g.n_alpha;
        let u = (y[0] + 0.5).rem_euclid(1.0) * n as f64;
        let v = (y[1] + 0.5).rem_euclid(1.0) * n as f64;
        let w = ((x3 + 0.5).clamp(0.0, 1.0)) * g.n_three as f64;
        let (i0, j0) = ((u.floor() as usize) % n, (v.floor() as usize) % n);
        let k0 = (w.floor() as usize).min(g.n_three - 1);
        let (fu, fv, fw) = (u - u.floor(), v - v.floor(), w - k0 as f64);
        let (i1, j1) = ((i0 + 1) % n, (j0 + 1) % n);
        let mut out = [0.0; 3];
        for (k, wk) in [(k0, 1.0 - fw), (k0 + 1, fw)] {
            let x3k = g.x3(k);
            for (j, wj) in [(j0, 1.0 - fv), (j1, fv)] {
                for (i, wi) in [(i0, 1.0 - fu), (i1, fu)] {
                    let val = self.values[g.index(i, j, k)];
                    let wt = wk * wj * wi;
                    for c in 0..3 {
                        out[c] += wt * (val[c] - x3k * self.b.0[c] / self.lambda);
                    }
                }
            }
        }
        out
    }

    /// Prolongation to the grid refined by 2 in every axis (multilinear,
    /// periodic in-plane).
    pub fn refine(&self) -> CellField {
        let fine = self.grid.refined();
        let mut psi = vec![0.0; 3 * fine.nodes()];
        let h = 1.0 / fine.n_alpha as f64;
        for k in 0..=fine.n_three {
            let x3 = fine.x3(k);
            for j in 0..fine.n_alpha {
                for i in 0..fine.n_alpha {
                    let y = [-0.5 + i as f64 * h, -0.5 + j as f64 * h];
                    let v = self.fluctuation_at(y, x3);
                    let n = fine.index(i, j, k);
                    psi[3 * n..3 * n + 3].copy_from_slice(&v);
                }
            }
        }
        CellField::from_fluctuation(fine, self.lambda, self.b, &psi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostics {
    pub iterations: usize,
    pub restarts: usize,
    pub lambda_at_bound: bool,
    pub constraint_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSolution {
    pub value: f64,
    pub lambda: f64,
    pub field: CellField,
    pub diagnostics: CellDiagnostics,
}

/// Multi-start, continuation and λ-search settings for one cell solve.
#[derive(Debug, Clone)]
pub struct SolverBudget {
    /// Number of starting fields for nonconvex integrands.
    pub starts: usize,
    /// Huber smoothing schedule, coarsest first.
    pub deltas: Vec<f64>,
    /// L-BFGS iteration cap per stage.
    pub max_iters: usize,
    /// Starts that survive the first smoothing stage.
    pub survivors: usize,
    pub lambda_bounds: (f64, f64),
    /// Cap on inner solves spent by the λ search.
    pub lambda_evals: usize,
    pub seed: u64,
    pub warm_start: Option<CellField>,
    /// Constant `C` in `q_tol = C·(1/n_alpha + 1/n_three)`.
    pub q_tol_constant: f64,
}

impl Default for SolverBudget {
    fn default() -> Self {
        Self {
            starts: 8,
            deltas: vec![1e-1, 1e-2, 1e-3],
            max_iters: 300,
            survivors: 2,
            lambda_bounds: (1e-3, 1e3),
            lambda_evals: 16,
            seed: 0,
            warm_start: None,
            q_tol_constant: 0.05,
        }
    }
}

impl SolverBudget {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn q_tol(&self, grid: &CellGrid) -> f64 {
        grid.q_tol(self.q_tol_constant)
    }

    fn validate(&self) -> Result<()> {
        if self.starts == 0 || self.deltas.is_empty() || self.max_iters == 0 || self.survivors == 0 {
            return Err(Error::Invalid("solver budget needs starts, deltas, iterations and survivors".into()));
        }
        let (lo, hi) = self.lambda_bounds;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Invalid("lambda bounds must satisfy 0 < lo ≤ hi".into()));
        }
        Ok(())
    }
}

/// `mean(∇₃ψ)` over all cells, per component.
fn mean_d3(grid: CellGrid, psi: &[f64]) -> [f64; 3] {
    let n2 = grid.n_alpha * grid.n_alpha;
    let top = grid.n_three * n2;
    let mut mean = [0.0; 3];
    for m in 0..n2 {
        for c in 0..3 {
            mean[c] += psi[3 * (top + m) + c] - psi[3 * m + c];
        }
    }
    mean.map(|v| v / n2 as f64)
}

/// Energy functional of the 3D cell problem at fixed `λ`.
struct CellProblem<'a> {
    integrand: &'a dyn Integrand,
    base: Mat3,
    lambda: f64,
    grid: CellGrid,
}

impl CellProblem<'_> {
    fn energy(&self, psi: &[f64], delta: f64, grad: Option<&mut [f64]>) -> f64 {
        let g = self.grid;
        let n = g.n_alpha;
        let n3 = g.n_three;
        let inv_h = n as f64;
        let inv_h3 = n3 as f64;
        let vol = 1.0 / (n * n * n3) as f64;
        let shift = mean_d3(g, psi);
        let lam = self.lambda;
        let mut total = 0.0;
        let mut gm = [[0.0; 3]; 3];
        let mut grad = grad;
        if let Some(gr) = grad.as_deref_mut() {
            gr.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g3_sum = [0.0; 3];
        for k in 0..n3 {
            for j in 0..n {
                let jp = if j + 1 == n { 0 } else { j + 1 };
                for i in 0..n {
                    let ip = if i + 1 == n { 0 } else { i + 1 };
                    let a0 = 3 * g.index(i, j, k);
                    let a1 = 3 * g.index(ip, j, k);
                    let a2 = 3 * g.index(i, jp, k);
                    let b0 = 3 * g.index(i, j, k + 1);
                    let b1 = 3 * g.index(ip, j, k + 1);
                    let b2 = 3 * g.index(i, jp, k + 1);
                    let mut m = self.base;
                    for c in 0..3 {
                        let d1 = 0.5 * inv_h * (psi[a1 + c] - psi[a0 + c] + psi[b1 + c] - psi[b0 + c]);
                        let d2 = 0.5 * inv_h * (psi[a2 + c] - psi[a0 + c] + psi[b2 + c] - psi[b0 + c]);
                        let d3 = inv_h3 * (psi[b0 + c] - psi[a0 + c]) - shift[c];
                        m[c][0] += d1;
                        m[c][1] += d2;
                        m[c][2] += lam * d3;
                    }
                    match grad.as_deref_mut() {
                        None => total += vol * self.integrand.value(&m),
                        Some(gr) => {
                            total += vol * self.integrand.smoothed(&m, delta, &mut gm);
                            for c in 0..3 {
                                let g1 = 0.5 * inv_h * vol * gm[c][0];
                                let g2 = 0.5 * inv_h * vol * gm[c][1];
                                let g3 = inv_h3 * vol * lam * gm[c][2];
                                gr[a1 + c] += g1;
                                gr[b1 + c] += g1;
                                gr[a0 + c] -= g1 + g2 + g3;
                                gr[b0 + c] += g3 - g1 - g2;
                                gr[a2 + c] += g2;
                                gr[b2 + c] += g2;
                                g3_sum[c] += vol * lam * gm[c][2];
                            }
                        }
                    }
                }
            }
        }
        if let Some(gr) = grad {
            // Derivative of the constraint shift: the mean of the transverse
            // stress acts on the top and bottom layers only.
            let top = n3 * n * n;
            for m in 0..n * n {
                for c in 0..3 {
                    let corr = g3_sum[c] / (n * n) as f64;
                    gr[3 * (top + m) + c] -= corr;
                    gr[3 * m + c] += corr;
                }
            }
        }
        total
    }
}

/// Energy of the 2D periodic problem for `QW₀`.
struct PlanarProblem<'a> {
    integrand: &'a dyn Integrand,
    base: Mat3,
    n: usize,
}

impl PlanarProblem<'_> {
    fn energy(&self, psi: &[f64], delta: f64, grad: Option<&mut [f64]>) -> f64 {
        let n = self.n;
        let inv_h = n as f64;
        let area = 1.0 / (n * n) as f64;
        let mut grad = grad;
        if let Some(gr) = grad.as_deref_mut() {
            gr.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut total = 0.0;
        let mut gm = [[0.0; 3]; 3];
        for j in 0..n {
            let jp = (j + 1) % n;
            for i in 0..n {
                let ip = (i + 1) % n;
                let a0 = 3 * (j * n + i);
                let a1 = 3 * (j * n + ip);
                let a2 = 3 * (jp * n + i);
                let mut m = self.base;
                for c in 0..3 {
                    m[c][0] += inv_h * (psi[a1 + c] - psi[a0 + c]);
                    m[c][1] += inv_h * (psi[a2 + c] - psi[a0 + c]);
                }
                match grad.as_deref_mut() {
                    None => total += area * self.integrand.value(&m),
                    Some(gr) => {
                        total += area * self.integrand.smoothed(&m, delta, &mut gm);
                        for c in 0..3 {
                            let g1 = inv_h * area * gm[c][0];
                            let g2 = inv_h * area * gm[c][1];
                            gr[a1 + c] += g1;
                            gr[a2 + c] += g2;
                            gr[a0 + c] -= g1 + g2;
                        }
                    }
                }
            }
        }
        total
    }
}

/// Outcome of the multistart/continuation driver.
struct DriverOutcome {
    x: Vec<f64>,
    value: f64,
    iterations: usize,
    converged: bool,
}

/// Successive halving over starts and smoothing stages. Every stage's exact
/// energy, including that of each start, is a candidate for the minimum.
fn multistart<F, E>(starts: Vec<Vec<f64>>, budget: &SolverBudget, smooth: F, exact: E) -> Result<DriverOutcome>
where
    F: Fn(&[f64], f64, &mut [f64]) -> f64,
    E: Fn(&[f64]) -> f64,
{
    let mut best: Option<(f64, Vec<f64>)> = None;
    let consider = |v: f64, x: &[f64], best: &mut Option<(f64, Vec<f64>)>| {
        if v.is_finite() && best.as_ref().map_or(true, |(bv, _)| v < *bv) {
            *best = Some((v, x.to_vec()));
        }
    };
    let mut iterations = 0;
    let mut pool: Vec<(f64, Vec<f64>)> = Vec::with_capacity(starts.len());
    for x in starts {
        let v = exact(&x);
        consider(v, &x, &mut best);
        pool.push((v, x));
    }

    let mut last_outcomes: Vec<LbfgsOutcome> = Vec::new();
    for (stage, &delta) in budget.deltas.iter().enumerate() {
        let cfg = LbfgsConfig {
            max_iters: if stage == 0 && pool.len() > 1 {
                budget.max_iters / 2
            } else {
                budget.max_iters
            },
            ..Default::default()
        };
        last_outcomes.clear();
        let mut next = Vec::with_capacity(pool.len());
        for (_, mut x) in pool {
            let out = lbfgs(&mut x, &cfg, |x, g| smooth(x, delta, g));
            iterations += out.iterations;
            let v = exact(&x);
            consider(v, &x, &mut best);
            last_outcomes.push(out);
            next.push((v, x));
        }
        next.sort_by(|a, b| a.0.total_cmp(&b.0));
        if stage == 0 {
            next.truncate(budget.survivors);
        }
        pool = next;
    }

    let Some((value, x)) = best else {
        return Err(Error::convergence(
            "cell energy is not finite at any start",
            ConvergenceDiagnostics {
                iterations,
                ..Default::default()
            },
        ));
    };
    let converged = last_outcomes.iter().any(|o| o.converged);
    if !converged {
        // Still descending fast when the budget ran out: report instead of guessing.
        let stalled = last_outcomes.iter().any(|o| {
            let t = &o.tail;
            t.len() >= 2 && (t[0] - t[t.len() - 1]).abs() <= 1e-3 * (1.0 + t[t.len() - 1].abs())
        });
        if !stalled {
            let tail = last_outcomes.first().map(|o| o.tail.clone()).unwrap_or_default();
            let residual = if tail.len() >= 2 { (tail[0] - tail[tail.len() - 1]).abs() } else { f64::NAN };
            return Err(Error::convergence(
                "iteration budget exhausted while the cell energy was still changing",
                ConvergenceDiagnostics {
                    iterations,
                    last_values: tail,
                    residual,
                },
            ));
        }
    }
    Ok(DriverOutcome {
        x,
        value,
        iterations,
        converged,
    })
}

fn base_matrix(xi_bar: &PlanarMatrix, b: &CosseratVector) -> Mat3 {
    FullMatrix::join(xi_bar, b).0
}

fn check_inputs(xi_bar: &PlanarMatrix, b: &CosseratVector) -> Result<()> {
    check_finite(&xi_bar.to_row_major(), "planar matrix")?;
    check_finite(&b.0, "Cosserat vector")
}

/// Transverse layer states minimizing `(1/n₃) Σ f(ξ̄|b_k)` subject to
/// `mean(b_k) = b`: the best one-dimensional laminate in `x₃`.
fn layer_laminates(integrand: &dyn Integrand, xi_bar: &PlanarMatrix, b: &CosseratVector, n3: usize, count: usize) -> Vec<Vec<[f64; 3]>> {
    let (beta_lower, beta_upper) = integrand.growth();
    let radius = beta_upper / beta_lower * (1.0 + xi_bar.norm() + b.norm());
    let minima = local_minima_in_b(|m| integrand.value(m), xi_bar, radius, 8);
    if minima.len() < 2 {
        return Vec::new();
    }
    let base = base_matrix(xi_bar, b);
    let layer_cost = |layers: &[[f64; 3]]| -> f64 {
        layers
            .iter()
            .map(|bk| {
                let mut m = base;
                for c in 0..3 {
                    m[c][2] = bk[c];
                }
                integrand.value(&m)
            })
            .sum::<f64>()
            / n3 as f64
    };
    // Assign q layers to one well and the rest to another, then shift all
    // layers so their mean is b.
    let mut assignments: Vec<(f64, Vec<[f64; 3]>)> = Vec::new();
    let wells: Vec<CosseratVector> = minima.iter().take(4).map(|m| m.1).collect();
    for (ia, wa) in wells.iter().enumerate() {
        for wb in wells.iter().skip(ia + 1) {
            for q in 1..n3 {
                let theta = q as f64 / n3 as f64;
                let mix = wa.scale(theta).add(&wb.scale(1.0 - theta));
                let corr = b.sub(&mix);
                let layers: Vec<[f64; 3]> = (0..n3)
                    .map(|k| if k < q { wa.add(&corr).0 } else { wb.add(&corr).0 })
                    .collect();
                assignments.push((layer_cost(&layers), layers));
            }
        }
    }
    assignments.sort_by(|a, b| a.0.total_cmp(&b.0));
    assignments.truncate(count);

    assignments
        .into_iter()
        .map(|(_, layers)| {
            // Polish the layer states with the mean constraint built in.
            let mut x: Vec<f64> = layers.iter().flat_map(|l| [l[0] - b.0[0], l[1] - b.0[1], l[2] - b.0[2]]).collect();
            let to_layers = |x: &[f64]| -> Vec<[f64; 3]> {
                let mut mean = [0.0; 3];
                for k in 0..n3 {
                    for c in 0..3 {
                        mean[c] += x[3 * k + c] / n3 as f64;
                    }
                }
                (0..n3).map(|k| [0, 1, 2].map(|c| b.0[c] + x[3 * k + c] - mean[c])).collect()
            };
            for delta in [1e-2, 1e-3] {
                lbfgs(&mut x, &LbfgsConfig { max_iters: 200, ..Default::default() }, |x, g| {
                    let layers = to_layers(x);
                    let mut total = 0.0;
                    let mut gm = [[0.0; 3]; 3];
                    let mut gsum = [0.0; 3];
                    for (k, bk) in layers.iter().enumerate() {
                        let mut m = base;
                        for c in 0..3 {
                            m[c][2] = bk[c];
                        }
                        total += integrand.smoothed(&m, delta, &mut gm) / n3 as f64;
                        for c in 0..3 {
                            g[3 * k + c] = gm[c][2] / n3 as f64;
                            gsum[c] += g[3 * k + c];
                        }
                    }
                    for k in 0..n3 {
                        for c in 0..3 {
                            g[3 * k + c] -= gsum[c] / n3 as f64;
                        }
                    }
                    total
                });
            }
            to_layers(&x)
        })
        .collect()
}

/// Fluctuation of an `x₃`-laminate whose layer `k` carries `λ∇₃φ = layers[k]`.
fn laminate_field(grid: CellGrid, b: &CosseratVector, lambda: f64, layers: &[[f64; 3]], periods: usize) -> Vec<f64> {
    let n3 = grid.n_three;
    let n2 = grid.n_alpha * grid.n_alpha;
    let h3 = 1.0 / n3 as f64;
    // Reorder layers into `periods` repetitions of the same pattern where possible.
    let order: Vec<usize> = if periods > 1 && n3 % periods == 0 {
        let per = n3 / periods;
        (0..n3).map(|k| (k % per) * periods + k / per).collect()
    } else {
        (0..n3).collect()
    };
    let mut psi = vec![0.0; 3 * grid.nodes()];
    let mut acc = [0.0; 3];
    for k in 0..=n3 {
        for m in 0..n2 {
            psi[3 * (k * n2 + m)..3 * (k * n2 + m) + 3].copy_from_slice(&acc);
        }
        if k < n3 {
            let l = layers[order[k]];
            for c in 0..3 {
                acc[c] += h3 * (l[c] - b.0[c]) / lambda;
            }
        }
    }
    psi
}

fn random_field(grid: CellGrid, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let amp = 0.25 * scale / grid.n_three as f64;
    (0..3 * grid.nodes()).map(|_| rng.random_range(-amp..amp)).collect()
}

/// Discrete `Q*` cell problem for an arbitrary integrand.
pub fn qstar_with(integrand: &dyn Integrand, xi_bar: &PlanarMatrix, b: &CosseratVector, grid: CellGrid, budget: &SolverBudget) -> Result<CellSolution> {
    check_inputs(xi_bar, b)?;
    grid.validate()?;
    budget.validate()?;
    let base = base_matrix(xi_bar, b);
    let nvars = 3 * grid.nodes();

    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; nvars]];
    if let Some(w) = &budget.warm_start {
        if w.grid == grid {
            let mut psi = w.fluctuation();
            psi.iter_mut().for_each(|v| *v *= w.lambda);
            starts.push(psi);
        }
    }
    if !integrand.is_convex() {
        let laminates = layer_laminates(integrand, xi_bar, b, grid.n_three, 2);
        for (idx, layers) in laminates.iter().enumerate() {
            if starts.len() < budget.starts {
                starts.push(laminate_field(grid, b, 1.0, layers, 1));
            }
            if idx == 0 && starts.len() < budget.starts {
                starts.push(laminate_field(grid, b, 1.0, layers, 2));
            }
        }
        let scale = 1.0 + xi_bar.norm() + b.norm();
        let mut idx = 0u64;
        while starts.len() < budget.starts {
            let mut rng = ChaCha8Rng::seed_from_u64(budget.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(idx + 1)));
            starts.push(random_field(grid, scale, &mut rng));
            idx += 1;
        }
    }
    let restarts = starts.len();

    let at_lambda = |lambda: f64| CellProblem {
        integrand,
        base,
        lambda,
        grid,
    };
    let unit = at_lambda(1.0);
    let first = multistart(
        starts,
        budget,
        |x, d, g| unit.energy(x, d, Some(g)),
        |x| unit.energy(x, 0.0, None),
    )?;

    let mut best_value = first.value;
    let mut best_x = first.x;
    let mut best_loglam = 0.0f64;
    let mut iterations = first.iterations;
    let mut converged = first.converged;

    let (lo, hi) = (budget.lambda_bounds.0.ln(), budget.lambda_bounds.1.ln());
    if budget.lambda_evals >= 2 && hi > lo {
        let final_delta = *budget.deltas.last().unwrap();
        let cfg = LbfgsConfig {
            max_iters: budget.max_iters,
            ..Default::default()
        };
        let mut state = (best_value, best_x.clone(), best_loglam, 0usize, false);
        golden_section(lo, hi, 1e-3, 1e-7, budget.lambda_evals, |loglam| {
            let lambda = loglam.exp();
            let problem = at_lambda(lambda);
            // Keep the transverse strain λ∇₃ψ of the incumbent fixed.
            let ratio = (state.2 - loglam).exp();
            let mut x: Vec<f64> = state.1.iter().map(|v| v * ratio).collect();
            let out = lbfgs(&mut x, &cfg, |x, g| problem.energy(x, final_delta, Some(g)));
            state.3 += out.iterations;
            state.4 |= out.converged;
            let v = problem.energy(&x, 0.0, None);
            if v.is_finite() && v < state.0 {
                state = (v, x, loglam, state.3, state.4);
            }
            v
        });
        iterations += state.3;
        converged |= state.4;
        if state.0 < best_value {
            best_value = state.0;
            best_x = state.1;
            best_loglam = state.2;
        }
    }
    let lambda = best_loglam.exp();
    let lambda_at_bound = budget.lambda_evals >= 2 && hi > lo && ((best_loglam - lo) < 1e-2 * (hi - lo) || (hi - best_loglam) < 1e-2 * (hi - lo));
    let field = CellField::from_fluctuation(grid, lambda, *b, &best_x);
    let constraint_residual = field.constraint_residual();
    Ok(CellSolution {
        value: best_value,
        lambda,
        field,
        diagnostics: CellDiagnostics {
            iterations,
            restarts,
            lambda_at_bound,
            constraint_residual,
            converged,
        },
    })
}

/// Discrete `Q*W(ξ̄|b)`.
pub fn qstar(model: &EnergyDensity, xi_bar: &PlanarMatrix, b: &CosseratVector, grid: CellGrid, budget: &SolverBudget) -> Result<CellSolution> {
    qstar_with(model, xi_bar, b, grid, budget)
}

/// Elementwise [`qstar`], evaluated in parallel; output order matches input.
pub fn qstar_sweep(model: &EnergyDensity, samples: &[(PlanarMatrix, CosseratVector)], grid: CellGrid, budget: &SolverBudget) -> Result<Vec<Result<CellSolution>>> {
    if samples.is_empty() {
        return Err(Error::Invalid("sweep needs at least one sample".into()));
    }
    Ok(samples.par_iter().map(|(xi, b)| qstar(model, xi, b, grid, budget)).collect())
}

/// Header of the sweep CSV.
pub const SWEEP_HEADER: [&str; 13] = ["xi11", "xi12", "xi21", "xi22", "xi31", "xi32", "b1", "b2", "b3", "value", "lambda", "iters", "flag"];

/// Writes sweep rows; failed rows carry an empty value and the error in `flag`.
pub fn write_sweep_csv<W: std::io::Write>(out: W, samples: &[(PlanarMatrix, CosseratVector)], rows: &[Result<CellSolution>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for ((xi, b), row) in samples.iter().zip(rows) {
        let mut rec: Vec<String> = xi.to_row_major().iter().chain(b.0.iter()).map(|v| v.to_string()).collect();
        match row {
            Ok(s) => {
                rec.push(s.value.to_string());
                rec.push(s.lambda.to_string());
                rec.push(s.diagnostics.iterations.to_string());
                rec.push(if s.diagnostics.lambda_at_bound { "lambda_at_bound".into() } else { "ok".into() });
            }
            Err(e) => {
                rec.extend([String::new(), String::new(), String::new()]);
                rec.push(format!("error: {e}"));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `(ξ̄, b)` samples from CSV with at least the nine leading sweep columns.
pub fn read_samples_csv<R: std::io::Read>(input: R) -> Result<Vec<(PlanarMatrix, CosseratVector)>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() < 9 {
            return Err(Error::Invalid(format!("sample row has {} columns, expected 9", rec.len())));
        }
        let mut v = [0.0; 9];
        for (slot, field) in v.iter_mut().zip(rec.iter()) {
            *slot = field.trim().parse().map_err(|_| Error::Invalid(format!("bad number {field:?} in samples")))?;
        }
        out.push((
            PlanarMatrix::from_row_major([v[0], v[1], v[2], v[3], v[4], v[5]]),
            CosseratVector([v[6], v[7], v[8]]),
        ));
    }
    Ok(out)
}

/// Discrete 2D quasiconvexification of `W₀` for an arbitrary planar integrand.
pub fn planar_envelope_with(integrand: &dyn Integrand, xi_bar: &PlanarMatrix, n: usize, budget: &SolverBudget) -> Result<f64> {
    check_finite(&xi_bar.to_row_major(), "planar matrix")?;
    budget.validate()?;
    let base = base_matrix(xi_bar, &CosseratVector::ZERO);
    let problem = PlanarProblem { integrand, base, n };
    let nvars = 3 * n * n;
    let mut starts = vec![vec![0.0; nvars]];
    if !integrand.is_convex() {
        let scale = 1.0 + xi_bar.norm();
        let mut idx = 0u64;
        while starts.len() < budget.starts.min(4) {
            let mut rng = ChaCha8Rng::seed_from_u64(budget.seed ^ (0x51_7cc1_b727_220au64.wrapping_mul(idx + 1)));
            let amp = 0.25 * scale / n as f64;
            starts.push((0..nvars).map(|_| rng.random_range(-amp..amp)).collect());
            idx += 1;
        }
    }
    let out = multistart(
        starts,
        budget,
        |x, d, g| problem.energy(x, d, Some(g)),
        |x| problem.energy(x, 0.0, None),
    )?;
    Ok(out.value)
}

/// Discrete `QW₀(ξ̄)` on the in-plane resolution of `grid`.
pub fn qw_zero(model: &EnergyDensity, xi_bar: &PlanarMatrix, grid: CellGrid, budget: &SolverBudget) -> Result<f64> {
    grid.validate()?;
    planar_envelope_with(&ZeroMoment { model }, xi_bar, grid.n_alpha, budget)
}

/// `(QW₀)^∞(ξ̄)` by ladder extrapolation.
pub fn qw_zero_recession(model: &EnergyDensity, xi_bar: &PlanarMatrix, grid: CellGrid, budget: &SolverBudget, t_ladder: &[f64]) -> Result<f64> {
    let norm = xi_bar.norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let unit = xi_bar.scale(1.0 / norm);
    let w0 = ZeroMoment { model };
    let r = model.constants().r;
    extrapolate(t_ladder, r, |t| {
        planar_envelope_with(&Scaled { inner: &w0, t }, &unit, grid.n_alpha, budget)
    })
    .map(|a| a * norm)
}

fn extrapolate<F>(t_ladder: &[f64], r: f64, mut solve: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if t_ladder.len() < 3 || t_ladder.windows(2).any(|w| !(w[1] > w[0])) || !(t_ladder[0] > 0.0) {
        return Err(Error::Invalid("recession ladder must hold at least 3 strictly increasing positive entries".into()));
    }
    let top = &t_ladder[t_ladder.len() - 3..];
    let values = top.iter().map(|t| solve(*t)).collect::<Result<Vec<f64>>>()?;
    let (a, _c, residual) = fit_decay_best(top, &values, r);
    let tol = 0.02 * (1.0 + a.abs());
    if residual > tol || !a.is_finite() {
        return Err(Error::convergence(
            "recession extrapolation residual above tolerance",
            ConvergenceDiagnostics {
                iterations: top.len(),
                last_values: values,
                residual,
            },
        ));
    }
    Ok(a.max(0.0))
}

/// Ladder used by the cell recession by default.
pub fn default_cell_ladder() -> Vec<f64> {
    vec![64.0, 256.0, 1024.0]
}

/// `(Q*W)^∞(ξ̄|b)` by extrapolating `Q*W(t·ξ̂)/t` over the ladder on the
/// unit-normalized input; positively 1-homogeneous by construction.
pub fn qstar_recession(model: &EnergyDensity, xi_bar: &PlanarMatrix, b: &CosseratVector, grid: CellGrid, budget: &SolverBudget, t_ladder: &[f64]) -> Result<f64> {
    check_inputs(xi_bar, b)?;
    let norm = FullMatrix::join(xi_bar, b).norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let (xu, bu) = (xi_bar.scale(1.0 / norm), b.scale(1.0 / norm));
    extrapolate(t_ladder, model.constants().r, |t| {
        qstar_with(&Scaled { inner: model, t }, &xu, &bu, grid, budget).map(|s| s.value)
    })
    .map(|a| a * norm)
}

/// Discrete `Q*(W^∞)(ξ̄|b)`.
pub fn qstar_of_recession(model: &EnergyDensity, xi_bar: &PlanarMatrix, b: &CosseratVector, grid: CellGrid, budget: &SolverBudget) -> Result<CellSolution> {
    let rec = Recession::new(model)?;
    qstar_with(&rec, xi_bar, b, grid, budget)
}

/// Jump data `(z, ν, b)` of the surface density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpSpec {
    pub z: CosseratVector,
    pub nu: [f64; 2],
    pub b: CosseratVector,
}

impl JumpSpec {
    pub fn new(z: CosseratVector, nu: [f64; 2], b: CosseratVector) -> Result<Self> {
        let s = Self { z, nu, b };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        check_unit(self.nu)?;
        check_finite(&self.z.0, "jump amplitude")?;
        check_finite(&self.b.0, "Cosserat vector")
    }

    /// Tangent `τ`, the rotation of `ν` by π/2.
    pub fn tau(&self) -> [f64; 2] {
        [-self.nu[1], self.nu[0]]
    }
}

fn check_unit(nu: [f64; 2]) -> Result<()> {
    let n = (nu[0] * nu[0] + nu[1] * nu[1]).sqrt();
    if !((n - 1.0).abs() <= 1e-12) {
        return Err(Error::Invalid(format!("normal must be a unit vector, |ν| = {n}")));
    }
    Ok(())
}

/// Cell problem posed on the rotated cube `Q′_ν`, solved on `Q′` after the
/// change of variables `y ↦ R_ν y`.
fn rotated_with(integrand: &dyn Integrand, xi_bar: &PlanarMatrix, b: &CosseratVector, nu: [f64; 2], grid: CellGrid, budget: &SolverBudget) -> Result<CellSolution> {
    check_unit(nu)?;
    if nu == [0.0, 1.0] {
        return qstar_with(integrand, xi_bar, b, grid, budget);
    }
    let r = rotation_for_normal(nu);
    let rotated = Rotated { inner: integrand, r };
    qstar_with(&rotated, &xi_bar.mul_2x2(r), b, grid, budget)
}

/// `Q*W(ξ̄|b)` computed on the rotated cell `Q′_ν`.
pub fn qstar_rotated(model: &EnergyDensity, xi_bar: &PlanarMatrix, b: &CosseratVector, nu: [f64; 2], grid: CellGrid, budget: &SolverBudget) -> Result<CellSolution> {
    rotated_with(model, xi_bar, b, nu, grid, budget)
}

/// Surface density `γ(z, ν, b)`: fields periodic along `τ` with offset `z`
/// across the `ν`-faces, written as `φ = (x·ν) z + ψ` with `ψ` periodic on
/// `Q′_ν`, so the problem is the `W^∞` cell problem at `z ⊗ ν` on the rotated cube.
pub fn gamma_surface(model: &EnergyDensity, spec: &JumpSpec, grid: CellGrid, budget: &SolverBudget) -> Result<f64> {
    spec.validate()?;
    let rec = Recession::new(model)?;
    rotated_with(&rec, &spec.z.outer(spec.nu), &spec.b, spec.nu, grid, budget).map(|s| s.value)
}

/// A rank-one line direction `(z ⊗ ν, b′)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankOneDirection {
    pub z: CosseratVector,
    pub nu: [f64; 2],
    pub b: CosseratVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub t: Vec<f64>,
    pub values: Vec<f64>,
    /// Largest `f(t_mid) − ½(f(t_lo) + f(t_hi))` over consecutive triples (0 if none).
    pub worst_violation: f64,
    pub q_tol: f64,
    pub passed: bool,
}

/// Samples `t ↦ Q*W(base + t·direction)` and reports the worst midpoint-convexity violation.
pub fn check_directional_convexity(
    model: &EnergyDensity,
    base: (&PlanarMatrix, &CosseratVector),
    direction: &RankOneDirection,
    t_samples: &[f64],
    grid: CellGrid,
    budget: &SolverBudget,
) -> Result<ConvexityReport> {
    check_unit(direction.nu)?;
    let dir_xi = direction.z.outer(direction.nu);
    let values = t_samples
        .par_iter()
        .map(|t| qstar(model, &base.0.add(&dir_xi.scale(*t)), &base.1.add(&direction.b.scale(*t)), grid, budget).map(|s| s.value))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..t_samples.len()).collect();
    order.sort_by(|a, b| t_samples[*a].total_cmp(&t_samples[*b]));
    let mut worst: f64 = 0.0;
    for w in order.windows(3) {
        let (a, m, c) = (w[0], w[1], w[2]);
        let (ta, tm, tc) = (t_samples[a], t_samples[m], t_samples[c]);
        // Interpolate the chord at t_mid (equals the midpoint average for equispaced samples).
        let s = if tc > ta { (tm - ta) / (tc - ta) } else { 0.5 };
        let chord = (1.0 - s) * values[a] + s * values[c];
        worst = worst.max(values[m] - chord);
    }
    let q_tol = budget.q_tol(&grid);
    Ok(ConvexityReport {
        t: t_samples.to_vec(),
        values,
        worst_violation: worst,
        q_tol,
        passed: worst <= q_tol,
    })
}

/// The argmin of `W(ξ̄|·)` used to seed laminate starts and `inf_b` checks.
pub fn transverse_minimizer(integrand: &dyn Integrand, xi_bar: &PlanarMatrix) -> (f64, CosseratVector) {
    let (lo, hi) = integrand.growth();
    let minima = local_minima_in_b(|m| integrand.value(m), xi_bar, hi / lo * (1.0 + xi_bar.norm()), 10);
    pick_minimizer(&minima)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(problem: &CellProblem, delta: f64) {
        let n = 3 * problem.grid.nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
        let mut g = vec![0.0; n];
        let v = problem.energy(&x, delta, Some(&mut g));
        for idx in [0, 5, 17, n / 2, n - 1, n - 4] {
            let mut xp = x.clone();
            xp[idx] += 1e-6;
            let mut sc = vec![0.0; n];
            let vp = problem.energy(&xp, delta, Some(&mut sc));
            let fd = (vp - v) / 1e-6;
            assert!((fd - g[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "idx {idx}: fd {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn cell_gradient_matches_finite_differences() {
        let model = EnergyDensity::separable_laminate(1.0, 1.0, 0.5).unwrap();
        let grid = CellGrid::new(4, 3).unwrap();
        let base = base_matrix(&PlanarMatrix::from_row_major([0.2, 0.0, 0.0, -0.1, 0.3, 0.0]), &CosseratVector::new(0.1, 0.0, 0.4));
        fd_check(&CellProblem { integrand: &model, base, lambda: 1.7, grid }, 0.1);
    }

    #[test]
    fn shifted_field_meets_constraint() {
        let grid = CellGrid::new(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let psi: Vec<f64> = (0..3 * grid.nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = CellField::from_fluctuation(grid, 2.5, CosseratVector::new(0.3, -1.0, 2.0), &psi);
        assert!(f.constraint_residual() < 1e-14);
    }

    #[test]
    fn refine_preserves_affine_fluctuations() {
        let grid = CellGrid::new(4, 2).unwrap();
        let mut psi = vec![0.0; 3 * grid.nodes()];
        for k in 0..=2 {
            for m in 0..16 {
                psi[3 * (k * 16 + m) + 2] = 0.25 * k as f64 * k as f64;
            }
        }
        let f = CellField::from_fluctuation(grid, 1.0, CosseratVector::ZERO, &psi);
        let fine = f.refine();
        assert_eq!(fine.grid, grid.refined());
        assert!(fine.constraint_residual() < 1e-14);
        assert!(!fine.has_in_plane_variation());
    }
}
