//! The limit membrane functional
//!
//! `E(u, b̄) = ∫ Q*W(∇u | b̄^a) + ∫_{J_u} (Q*W)^∞((u⁺−u⁻)⊗ν | db̄^j/dℋ¹)
//!          + ∫ (Q*W)^∞(dD^c u/d|D^c u| | db̄^c/d|D^c u|) + ∫ (Q*W)^∞(0 | db̄^σ/d|b̄^σ|)`,
//!
//! its moment-free counterpart built on `QW₀`, and the work of external loads.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::cell::{default_cell_ladder, qstar, qstar_recession, qw_zero, qw_zero_recession, CellGrid, SolverBudget};
use crate::energy::EnergyDensity;
use crate::error::{Error, Result};
use crate::planar::{besicovitch_split, region_integral, validate_scene, weakstar_pairing_vector, BendingMeasure, PlanarScene, Point, QuadratureConfig};
use crate::tensor::{CosseratVector, PlanarMatrix};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermTolerances {
    pub bulk: f64,
    pub jump: f64,
    pub cantor: f64,
    pub singular: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub bulk: f64,
    pub jump: f64,
    pub cantor: f64,
    pub singular: f64,
    pub total: f64,
    pub tolerances: TermTolerances,
}

impl EnergyBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.bulk + self.jump + self.cantor + self.singular;
        self
    }

    /// Sum of the per-term tolerances.
    pub fn tolerance(&self) -> f64 {
        let t = &self.tolerances;
        t.bulk + t.jump + t.cantor + t.singular
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Density {
    Qstar,
    QstarRecession,
    QwZero,
    QwZeroRecession,
}

type Key = (u64, Density, [i64; 9]);

fn quantize(xi: &PlanarMatrix, b: &CosseratVector) -> [i64; 9] {
    let mut out = [0i64; 9];
    for (slot, v) in out.iter_mut().zip(xi.to_row_major().iter().chain(&b.0)) {
        *slot = (v * 1e12).round() as i64;
    }
    out
}

/// Memoized cell solves keyed by model fingerprint and the quantized input.
/// Safe to share across threads; a stored value is never replaced.
#[derive(Debug, Default)]
pub struct DensityCache {
    entries: Mutex<HashMap<Key, f64>>,
}

impl DensityCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_compute<F>(&self, key: Key, compute: F) -> Result<f64>
    where
        F: FnOnce() -> Result<f64>,
    {
        if let Some(v) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let v = compute()?;
        Ok(*self.entries.lock().expect("cache lock").entry(key).or_insert(v))
    }
}

/// Settings shared by all cell solves of one evaluation.
struct Densities<'a> {
    model: &'a EnergyDensity,
    grid: CellGrid,
    budget: &'a SolverBudget,
    ladder: Vec<f64>,
    cache: &'a DensityCache,
    fingerprint: u64,
}

impl<'a> Densities<'a> {
    fn new(model: &'a EnergyDensity, grid: CellGrid, budget: &'a SolverBudget, cache: &'a DensityCache) -> Self {
        Self {
            model,
            grid,
            budget,
            ladder: default_cell_ladder(),
            cache,
            fingerprint: model.fingerprint(),
        }
    }

    fn qstar(&self, xi: &PlanarMatrix, b: &CosseratVector) -> Result<f64> {
        self.cache.get_or_compute((self.fingerprint, Density::Qstar, quantize(xi, b)), || {
            qstar(self.model, xi, b, self.grid, self.budget).map(|s| s.value)
        })
    }

    /// Homogeneity is applied outside the cache: the cached value belongs to
    /// the unit-normalized input.
    fn qstar_recession(&self, xi: &PlanarMatrix, b: &CosseratVector) -> Result<f64> {
        let norm = (xi.norm().powi(2) + b.norm().powi(2)).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let (xu, bu) = (xi.scale(1.0 / norm), b.scale(1.0 / norm));
        let unit = self.cache.get_or_compute((self.fingerprint, Density::QstarRecession, quantize(&xu, &bu)), || {
            qstar_recession(self.model, &xu, &bu, self.grid, self.budget, &self.ladder)
        })?;
        Ok(norm * unit)
    }

    fn qw_zero(&self, xi: &PlanarMatrix) -> Result<f64> {
        self.cache.get_or_compute((self.fingerprint, Density::QwZero, quantize(xi, &CosseratVector::ZERO)), || {
            qw_zero(self.model, xi, self.grid, self.budget)
        })
    }

    fn qw_zero_recession(&self, xi: &PlanarMatrix) -> Result<f64> {
        let norm = xi.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let xu = xi.scale(1.0 / norm);
        let unit = self.cache.get_or_compute((self.fingerprint, Density::QwZeroRecession, quantize(&xu, &CosseratVector::ZERO)), || {
            qw_zero_recession(self.model, &xu, self.grid, self.budget, &self.ladder)
        })?;
        Ok(norm * unit)
    }

    fn q_tol(&self) -> f64 {
        self.budget.q_tol(&self.grid)
    }
}

/// `E(u, b̄)` split into its four terms.
pub fn membrane_energy(
    model: &EnergyDensity,
    scene: &PlanarScene,
    measure: &BendingMeasure,
    grid: CellGrid,
    budget: &SolverBudget,
    cache: &DensityCache,
) -> Result<EnergyBreakdown> {
    let mut report = validate_scene(scene);
    report.findings.extend(measure.validate(scene).findings);
    report.into_result()?;
    let split = besicovitch_split(scene, measure)?;
    let d = Densities::new(model, grid, budget, cache);
    let q_tol = d.q_tol();
    let mut out = EnergyBreakdown::default();

    for (region, density) in scene.regions.iter().zip(&split.b_a) {
        let area = region.area();
        out.bulk += area * d.qstar(&region.gradient, density).map_err(|e| e.in_term("bulk"))?;
        out.tolerances.bulk += q_tol * area * (1.0 + region.gradient.norm() + density.norm());
    }

    for (m, jmp) in scene.jumps.iter().enumerate() {
        let xi = jmp.jump.outer(jmp.normal);
        let mut rest = jmp.length();
        let mut add = |len: f64, b: &CosseratVector| -> Result<()> {
            out.jump += len * d.qstar_recession(&xi, b).map_err(|e| e.in_term("jump"))?;
            out.tolerances.jump += q_tol * len * (xi.norm() + b.norm());
            Ok(())
        };
        for piece in split.b_j.iter().filter(|p| p.jump == m) {
            let len = ((piece.to[0] - piece.from[0]).powi(2) + (piece.to[1] - piece.from[1]).powi(2)).sqrt();
            add(len, &piece.density)?;
            rest -= len;
        }
        if rest > crate::planar::GEOMETRY_TOL {
            add(rest, &CosseratVector::ZERO)?;
        }
    }

    let width = scene.width();
    if let Some(s) = &scene.staircase {
        // The integrand is constant on the strip, so the Cantor integral is
        // width × (Q*W)^∞(a ⊗ e₂ | κ) by homogeneity.
        let kappa = split.b_c.as_ref().map_or(CosseratVector::ZERO, |c| c.density);
        let xi = s.amplitude.outer([0.0, 1.0]);
        out.cantor = width * d.qstar_recession(&xi, &kappa).map_err(|e| e.in_term("cantor"))?;
        out.tolerances.cantor = q_tol * width * (xi.norm() + kappa.norm());
    }

    let sigma = &split.b_sigma;
    let mut singular = |weight: f64, b: &CosseratVector| -> Result<()> {
        out.singular += weight * d.qstar_recession(&PlanarMatrix::ZERO, b).map_err(|e| e.in_term("singular"))?;
        out.tolerances.singular += q_tol * weight * b.norm();
        Ok(())
    };
    for atom in &sigma.atoms {
        singular(1.0, &atom.weight)?;
    }
    for line in &sigma.lines {
        singular(line.length(), &line.density)?;
    }
    if let Some(c) = &sigma.cantor {
        singular(width, &c.density)?;
    }
    Ok(out.finish())
}

/// The moment-free functional: `QW₀` in the bulk and `(QW₀)^∞` on the jump
/// and Cantor parts; there is no singular term.
pub fn membrane_energy_no_moment(model: &EnergyDensity, scene: &PlanarScene, grid: CellGrid, budget: &SolverBudget, cache: &DensityCache) -> Result<EnergyBreakdown> {
    validate_scene(scene).into_result()?;
    let d = Densities::new(model, grid, budget, cache);
    let q_tol = d.q_tol();
    let mut out = EnergyBreakdown::default();
    for region in &scene.regions {
        let area = region.area();
        out.bulk += area * d.qw_zero(&region.gradient).map_err(|e| e.in_term("bulk"))?;
        out.tolerances.bulk += q_tol * area * (1.0 + region.gradient.norm());
    }
    for jmp in &scene.jumps {
        let xi = jmp.jump.outer(jmp.normal);
        out.jump += jmp.length() * d.qw_zero_recession(&xi).map_err(|e| e.in_term("jump"))?;
        out.tolerances.jump += q_tol * jmp.length() * xi.norm();
    }
    if let Some(s) = &scene.staircase {
        let xi = s.amplitude.outer([0.0, 1.0]);
        out.cantor = scene.width() * d.qw_zero_recession(&xi).map_err(|e| e.in_term("cantor"))?;
        out.tolerances.cantor = q_tol * scene.width() * xi.norm();
    }
    Ok(out.finish())
}

/// A closed-form `R³` field on `ω` that vanishes on `∂ω`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BoundaryFreeField {
    #[default]
    Zero,
    /// `amplitude · exp(1 − 1/(1 − |x − c|²/r²))` inside the disc, zero outside.
    Bump { center: Point, radius: f64, amplitude: CosseratVector },
    /// `amplitude · sin(k₁π(x₁−x0)/w) sin(k₂π(x₂−y0)/h)`.
    Sine { modes: [u32; 2], amplitude: CosseratVector },
}

/// Smooth bump with peak 1 at the center, supported in the open disc.
pub fn bump(center: Point, radius: f64, x: Point) -> f64 {
    let r2 = ((x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2)) / (radius * radius);
    if r2 >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - r2)).exp()
    }
}

impl BoundaryFreeField {
    pub fn eval(&self, domain: [f64; 4], x: Point) -> [f64; 3] {
        match self {
            BoundaryFreeField::Zero => [0.0; 3],
            BoundaryFreeField::Bump { center, radius, amplitude } => amplitude.scale(bump(*center, *radius, x)).0,
            BoundaryFreeField::Sine { modes, amplitude } => {
                let s1 = (modes[0] as f64 * std::f64::consts::PI * (x[0] - domain[0]) / (domain[2] - domain[0])).sin();
                let s2 = (modes[1] as f64 * std::f64::consts::PI * (x[1] - domain[1]) / (domain[3] - domain[1])).sin();
                amplitude.scale(s1 * s2).0
            }
        }
    }
}

/// External loads. The body-load resultant and the `g₁^±` surface loads are
/// piecewise constant per region (empty means zero); `g₀⁺` is a closed-form
/// field vanishing on `∂ω`, and `g₀⁻ = −g₀⁺` is implied.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadSet {
    #[serde(default)]
    pub f_bar: Vec<CosseratVector>,
    #[serde(default)]
    pub g1_plus: Vec<CosseratVector>,
    #[serde(default)]
    pub g1_minus: Vec<CosseratVector>,
    #[serde(default)]
    pub g0_plus: BoundaryFreeField,
}

impl LoadSet {
    fn in_plane(&self, r: usize) -> CosseratVector {
        [&self.f_bar, &self.g1_plus, &self.g1_minus]
            .iter()
            .map(|v| v.get(r).copied().unwrap_or_default())
            .fold(CosseratVector::ZERO, |a, b| a.add(&b))
    }

    /// Checks the per-region lists and samples `g₀⁺` on `∂ω`.
    pub fn validate(&self, scene: &PlanarScene) -> Result<()> {
        for (name, list) in [("f_bar", &self.f_bar), ("g1_plus", &self.g1_plus), ("g1_minus", &self.g1_minus)] {
            if !list.is_empty() && list.len() != scene.regions.len() {
                return Err(Error::Invalid(format!("{name} has {} entries for {} regions", list.len(), scene.regions.len())));
            }
            if list.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("{name} has non-finite entries")));
            }
        }
        let [x0, y0, x1, y1] = scene.domain;
        for k in 0..=64 {
            let s = k as f64 / 64.0;
            for p in [[x0 + s * (x1 - x0), y0], [x0 + s * (x1 - x0), y1], [x0, y0 + s * (y1 - y0)], [x1, y0 + s * (y1 - y0)]] {
                let v = self.g0_plus.eval(scene.domain, p);
                if v.iter().any(|c| c.abs() > 1e-12) {
                    return Err(Error::Invalid(format!("g0_plus does not vanish on the boundary at {p:?}")));
                }
            }
        }
        Ok(())
    }
}

/// `F(u, b̄) = ∫ (f̄ + g₁⁺ + g₁⁻)·u dx + ∫ g₀⁺ · db̄`.
pub fn load_work(loads: &LoadSet, scene: &PlanarScene, measure: &BendingMeasure, cfg: &QuadratureConfig) -> Result<f64> {
    loads.validate(scene)?;
    let mut work = 0.0;
    for (r, region) in scene.regions.iter().enumerate() {
        let f = loads.in_plane(r);
        if f.norm() == 0.0 {
            continue;
        }
        // Exact for affine u; the staircase part is resolved by the same rule.
        work += region_integral(region, cfg.area_level, &mut |x| {
            let u = scene.eval(x).unwrap_or_else(|| region.eval(x));
            f.dot(&u)
        });
    }
    if loads.g0_plus != BoundaryFreeField::Zero {
        work += weakstar_pairing_vector(scene, measure, |x| loads.g0_plus.eval(scene.domain, x), cfg)?.value;
    }
    Ok(work)
}
