//! Stored-energy densities `W` on 3×3 matrices with certified structural
//! constants, plus the derived scalar densities `W^∞` and `W₀`.
//!
//! Three model families are built in:
//!
//! * `convex-norm`: `W(ξ) = √(a² + |ξ|²)`.
//! * `separable-laminate`: `W(ξ̄|b) = p|ξ̄| + min(|b − s e₃|, |b + s e₃|) + c|b|`,
//!   a double well in the transverse column.
//! * `user-table`: `W(ξ̄|b) = p|ξ̄| + T(|b⊥|, b₃)` with `T` bilinear on a grid
//!   and extended linearly (slope `σ`) outside it; `b⊥ = (b₁, b₂)`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{check_finite, ConvergenceDiagnostics, Error, Result};
use crate::optim::{compass_search, fit_decay_best};
use crate::tensor::{norm3, CosseratVector, FullMatrix, PlanarMatrix};

/// Raw matrix layout used by the hot loops: row `i`, column `j`, column 2 is `b`.
pub type Mat3 = [[f64; 3]; 3];

/// Huber smoothing of `r ↦ r`: quadratic below `δ`, linear above. Returns
/// the value and the derivative with respect to `r`. `δ = 0` is exact.
#[inline]
pub fn huber(r: f64, delta: f64) -> (f64, f64) {
    if delta > 0.0 && r <= delta {
        (r * r / (2.0 * delta), r / delta)
    } else {
        (r - 0.5 * delta, 1.0)
    }
}

#[inline]
fn planar_norm(m: &Mat3) -> f64 {
    (m[0][0] * m[0][0]
        + m[0][1] * m[0][1]
        + m[1][0] * m[1][0]
        + m[1][1] * m[1][1]
        + m[2][0] * m[2][0]
        + m[2][1] * m[2][1])
        .sqrt()
}

#[inline]
fn column(m: &Mat3) -> [f64; 3] {
    [m[0][2], m[1][2], m[2][2]]
}

#[inline]
fn full_norm(m: &Mat3) -> f64 {
    let p = planar_norm(m);
    let b = norm3(&column(m));
    (p * p + b * b).sqrt()
}

/// Adds `w · ∂|ξ̄|_δ` into the planar block of `grad` and returns `|ξ̄|_δ`.
#[inline]
fn planar_norm_smoothed(m: &Mat3, delta: f64, w: f64, grad: &mut Mat3) -> f64 {
    let r = planar_norm(m);
    let (v, d) = huber(r, delta);
    if r > 0.0 {
        let k = w * d / r;
        for i in 0..3 {
            grad[i][0] += k * m[i][0];
            grad[i][1] += k * m[i][1];
        }
    }
    v
}

/// Adds `w · ∂|b − shift|_δ` into the third column of `grad` and returns the value.
#[inline]
fn column_norm_smoothed(b: &[f64; 3], shift: f64, delta: f64, w: f64, grad: &mut Mat3) -> f64 {
    let v3 = [b[0], b[1], b[2] - shift];
    let r = norm3(&v3);
    let (v, d) = huber(r, delta);
    if r > 0.0 {
        let k = w * d / r;
        for i in 0..3 {
            grad[i][2] += k * v3[i];
        }
    }
    v
}

/// Structural constants of a density: growth `β′|ξ| ≤ W ≤ β(1+|ξ|)`,
/// recession decay `|W^∞ − W| ≤ C(1 + |ξ|^{1−r})`, Lipschitz bound `L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub beta_lower: f64,
    pub beta_upper: f64,
    pub recession_c: f64,
    pub r: f64,
    pub lipschitz: f64,
}

impl Constants {
    /// Lower constant of `β′(|ξ̄| + |b|) ≤ Q*W(ξ̄|b)`: the Frobenius bound
    /// combined with `|(ξ̄|b)| ≥ (|ξ̄| + |b|)/√2`.
    pub fn split_lower(&self) -> f64 {
        self.beta_lower * std::f64::consts::FRAC_1_SQRT_2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    ConvexNorm,
    SeparableLaminate,
    UserTable,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ConvexNorm => "convex-norm",
            ModelKind::SeparableLaminate => "separable-laminate",
            ModelKind::UserTable => "user-table",
        }
    }
}

/// The JSON form of a model: `{"kind": ..., "params": {...}}` with optional
/// explicit constants and certification sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub kind: ModelKind,
    #[serde(default)]
    pub params: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<Constants>,
    #[serde(default = "default_samples")]
    pub certification_samples: usize,
}

fn default_samples() -> usize {
    4000
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvexParams {
    #[serde(default = "one")]
    a: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaminateParams {
    #[serde(default = "one")]
    p: f64,
    #[serde(default = "one")]
    s: f64,
    #[serde(default = "half")]
    c: f64,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

/// Parameters of a `user-table` model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableParams {
    /// Weight of `|ξ̄|`.
    pub p: f64,
    /// Table covers `ρ = |b⊥| ∈ [0, rho_max]`.
    pub rho_max: f64,
    /// Table covers `t = b₃ ∈ [−t_max, t_max]`.
    pub t_max: f64,
    /// `values[i][j]` at `ρ = i·rho_max/(nρ−1)`, `t = −t_max + j·2t_max/(nt−1)`.
    pub values: Vec<Vec<f64>>,
    /// Growth rate outside the table, also the recession slope in `|b|`.
    pub slope: f64,
    /// `"closed-form"` (default) uses `p|ξ̄| + slope·|b|` as `W^∞`;
    /// `"extrapolate"` computes it from the ladder fit instead.
    #[serde(default = "closed_form")]
    pub recession: String,
}

fn closed_form() -> String {
    "closed-form".to_string()
}

#[derive(Debug)]
struct Table {
    p: f64,
    rho_max: f64,
    t_max: f64,
    n_rho: usize,
    n_t: usize,
    h_rho: f64,
    h_t: f64,
    values: Vec<f64>,
    slope: f64,
    min_value: f64,
}

impl Table {
    fn new(params: &TableParams) -> Result<Self> {
        let n_rho = params.values.len();
        if n_rho < 2 {
            return Err(Error::Model("user-table needs at least 2 rows in rho".into()));
        }
        let n_t = params.values[0].len();
        if n_t < 2 || params.values.iter().any(|r| r.len() != n_t) {
            return Err(Error::Model("user-table rows must share a length of at least 2".into()));
        }
        if !(params.rho_max > 0.0 && params.t_max > 0.0) {
            return Err(Error::Model("user-table extents must be positive".into()));
        }
        if !(params.p > 0.0 && params.slope > 0.0) {
            return Err(Error::Model("user-table p and slope must be positive".into()));
        }
        let values: Vec<f64> = params.values.iter().flatten().copied().collect();
        check_finite(&values, "user-table values")
            .map_err(|_| Error::Model("user-table values must be finite".into()))?;
        if values.iter().any(|v| *v < 0.0) {
            return Err(Error::Model("user-table values must be nonnegative".into()));
        }
        let min_value = values.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            p: params.p,
            rho_max: params.rho_max,
            t_max: params.t_max,
            n_rho,
            n_t,
            h_rho: params.rho_max / (n_rho - 1) as f64,
            h_t: 2.0 * params.t_max / (n_t - 1) as f64,
            values,
            slope: params.slope,
            min_value,
        })
    }

    #[inline]
    fn node(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_t + j]
    }

    /// `T(ρ, t)` and its partials.
    fn eval(&self, rho: f64, t: f64) -> (f64, f64, f64) {
        let rc = rho.clamp(0.0, self.rho_max);
        let tc = t.clamp(-self.t_max, self.t_max);
        let u = rc / self.h_rho;
        let v = (tc + self.t_max) / self.h_t;
        let i = (u.floor() as usize).min(self.n_rho - 2);
        let j = (v.floor() as usize).min(self.n_t - 2);
        let fu = u - i as f64;
        let fv = v - j as f64;
        let f00 = self.node(i, j);
        let f10 = self.node(i + 1, j);
        let f01 = self.node(i, j + 1);
        let f11 = self.node(i + 1, j + 1);
        let val = f00 * (1.0 - fu) * (1.0 - fv) + f10 * fu * (1.0 - fv) + f01 * (1.0 - fu) * fv + f11 * fu * fv;
        let mut d_rho = ((f10 - f00) * (1.0 - fv) + (f11 - f01) * fv) / self.h_rho;
        let mut d_t = ((f01 - f00) * (1.0 - fu) + (f11 - f10) * fu) / self.h_t;
        let (er, et) = (rho - rc, t - tc);
        let dist = (er * er + et * et).sqrt();
        if dist > 0.0 {
            if er != 0.0 {
                d_rho = 0.0;
            }
            if et != 0.0 {
                d_t = 0.0;
            }
            d_rho += self.slope * er / dist;
            d_t += self.slope * et / dist;
            return (val + self.slope * dist, d_rho, d_t);
        }
        (val, d_rho, d_t)
    }

    /// Lipschitz bound of `b ↦ T(|b⊥|, b₃)`.
    fn lipschitz_b(&self) -> f64 {
        let mut lr: f64 = 0.0;
        let mut lt: f64 = 0.0;
        for i in 0..self.n_rho {
            for j in 0..self.n_t {
                if i + 1 < self.n_rho {
                    lr = lr.max((self.node(i + 1, j) - self.node(i, j)).abs() / self.h_rho);
                }
                if j + 1 < self.n_t {
                    lt = lt.max((self.node(i, j + 1) - self.node(i, j)).abs() / self.h_t);
                }
            }
        }
        (lr * lr + lt * lt).sqrt() + self.slope
    }
}

#[derive(Debug, Clone)]
enum Form {
    ConvexNorm { a: f64 },
    Laminate { p: f64, s: f64, c: f64 },
    Table(Arc<Table>),
}

/// A certified stored-energy density.
#[derive(Debug, Clone)]
pub struct EnergyDensity {
    document: ModelDocument,
    form: Form,
    constants: Constants,
    is_convex: bool,
    closed_form_recession: bool,
    fingerprint: u64,
}

/// Outcome of the randomized certification pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    pub samples: usize,
    pub growth_ok: bool,
    pub recession_ok: bool,
    pub lipschitz_ok: bool,
    /// Smallest `W − β′|ξ|` seen.
    pub growth_lower_slack: f64,
    /// Smallest `β(1+|ξ|) − W` seen.
    pub growth_upper_slack: f64,
    /// Smallest `C(1+|ξ|^{1−r}) − |W^∞ − W|` seen.
    pub recession_slack: f64,
    /// Smallest `L|ξ−ξ′| − |W(ξ)−W(ξ′)|` seen.
    pub lipschitz_slack: f64,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.growth_ok && self.recession_ok && self.lipschitz_ok
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, lo_exp: f64, hi_exp: f64) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    let mut n2: f64 = 0.0;
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
            n2 += *v * *v;
        }
    }
    // Occasionally zero a block so both pure-planar and pure-transverse
    // matrices are exercised.
    match rng.random_range(0..6) {
        0 => m.iter_mut().for_each(|r| r[2] = 0.0),
        1 => m.iter_mut().for_each(|r| {
            r[0] = 0.0;
            r[1] = 0.0
        }),
        _ => {}
    }
    let mag = 10f64.powf(rng.random_range(lo_exp..hi_exp));
    let scale = mag / n2.sqrt().max(1e-300);
    m.iter_mut().flatten().for_each(|v| *v *= scale);
    m
}

impl EnergyDensity {
    /// `W(ξ) = √(a² + |ξ|²)`.
    pub fn convex_norm(a: f64) -> Result<Self> {
        Self::from_document(ModelDocument {
            kind: ModelKind::ConvexNorm,
            params: serde_json::json!({ "a": a }),
            constants: None,
            certification_samples: default_samples(),
        })
    }

    /// `W(ξ̄|b) = p|ξ̄| + min(|b − s e₃|, |b + s e₃|) + c|b|`.
    pub fn separable_laminate(p: f64, s: f64, c: f64) -> Result<Self> {
        Self::from_document(ModelDocument {
            kind: ModelKind::SeparableLaminate,
            params: serde_json::json!({ "p": p, "s": s, "c": c }),
            constants: None,
            certification_samples: default_samples(),
        })
    }

    pub fn user_table(params: TableParams) -> Result<Self> {
        Self::from_document(ModelDocument {
            kind: ModelKind::UserTable,
            params: serde_json::to_value(params)?,
            constants: None,
            certification_samples: default_samples(),
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        Self::from_document(doc)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_document(document: ModelDocument) -> Result<Self> {
        let params = if document.params.is_null() {
            serde_json::json!({})
        } else {
            document.params.clone()
        };
        let (form, analytic, is_convex, closed_form_recession) = match document.kind {
            ModelKind::ConvexNorm => {
                let ConvexParams { a } = serde_json::from_value(params)
                    .map_err(|e| Error::Model(format!("convex-norm params: {e}")))?;
                if !(a > 0.0 && a.is_finite()) {
                    return Err(Error::Model("convex-norm needs a > 0".into()));
                }
                let constants = Constants {
                    beta_lower: 1.0,
                    beta_upper: a.max(1.0),
                    recession_c: a,
                    r: 0.5,
                    lipschitz: 1.0,
                };
                (Form::ConvexNorm { a }, Some(constants), true, true)
            }
            ModelKind::SeparableLaminate => {
                let LaminateParams { p, s, c } = serde_json::from_value(params)
                    .map_err(|e| Error::Model(format!("separable-laminate params: {e}")))?;
                if !(p > 0.0 && s >= 0.0 && c > 0.0) || ![p, s, c].iter().all(|v| v.is_finite()) {
                    return Err(Error::Model("separable-laminate needs p > 0, s ≥ 0, c > 0".into()));
                }
                let lip = (p * p + (1.0 + c) * (1.0 + c)).sqrt();
                let constants = Constants {
                    beta_lower: p.min(c),
                    beta_upper: s.max(lip),
                    recession_c: s,
                    r: 0.5,
                    lipschitz: lip,
                };
                (Form::Laminate { p, s, c }, Some(constants), false, true)
            }
            ModelKind::UserTable => {
                let tp: TableParams = serde_json::from_value(params)
                    .map_err(|e| Error::Model(format!("user-table params: {e}")))?;
                let closed = match tp.recession.as_str() {
                    "closed-form" => true,
                    "extrapolate" => false,
                    other => {
                        return Err(Error::Model(format!(
                            "user-table recession must be closed-form or extrapolate, got {other}"
                        )))
                    }
                };
                (Form::Table(Arc::new(Table::new(&tp)?)), None, false, closed)
            }
        };

        let mut hasher = DefaultHasher::new();
        serde_json::to_string(&document)?.hash(&mut hasher);
        let placeholder = Constants {
            beta_lower: 0.0,
            beta_upper: 0.0,
            recession_c: 0.0,
            r: 0.5,
            lipschitz: 0.0,
        };
        let mut model = Self {
            form,
            constants: placeholder,
            is_convex,
            closed_form_recession,
            fingerprint: hasher.finish(),
            document,
        };

        model.constants = match (model.document.constants, analytic) {
            (Some(c), _) => c,
            (None, Some(c)) => c,
            (None, None) => model.estimate_constants(),
        };
        let c = model.constants;
        if !(c.beta_lower > 0.0 && c.beta_upper >= c.beta_lower && c.recession_c >= 0.0 && c.r > 0.0 && c.r < 1.0 && c.lipschitz >= 0.0) {
            return Err(Error::Model(format!("constants out of range: {c:?}")));
        }
        let report = model.certify(model.document.certification_samples, 0x5eed_0002);
        if !report.passed() {
            return Err(Error::Model(format!(
                "certification failed for {} (growth {}, recession {}, lipschitz {})",
                model.kind().name(),
                report.growth_ok,
                report.recession_ok,
                report.lipschitz_ok
            )));
        }
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.document.kind
    }

    pub fn document(&self) -> &ModelDocument {
        &self.document
    }

    pub fn constants(&self) -> Constants {
        self.constants
    }

    pub fn is_convex(&self) -> bool {
        self.is_convex
    }

    pub fn has_closed_form_recession(&self) -> bool {
        self.closed_form_recession
    }

    /// Stable identifier of the model document, used for memoization.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// `W(ξ)`; errors on non-finite input.
    pub fn eval_density(&self, xi: &FullMatrix) -> Result<f64> {
        check_finite(xi.0.iter().flatten().copied().collect::<Vec<_>>().as_slice(), "matrix")?;
        Ok(self.value(&xi.0))
    }

    /// `W` on the raw layout, no input checks.
    pub fn value(&self, m: &Mat3) -> f64 {
        let mut scratch = [[0.0; 3]; 3];
        self.smoothed(m, 0.0, &mut scratch)
    }

    /// Huber-smoothed `W` with smoothing `δ` and its gradient (overwritten into `grad`).
    /// `δ = 0` returns the exact density with a selection of the subgradient.
    pub fn smoothed(&self, m: &Mat3, delta: f64, grad: &mut Mat3) -> f64 {
        *grad = [[0.0; 3]; 3];
        match &self.form {
            Form::ConvexNorm { a } => {
                let n2: f64 = m.iter().flatten().map(|v| v * v).sum();
                let w = (a * a + n2).sqrt();
                for i in 0..3 {
                    for j in 0..3 {
                        grad[i][j] = m[i][j] / w;
                    }
                }
                w
            }
            Form::Laminate { p, s, c } => {
                let b = column(m);
                let pv = planar_norm_smoothed(m, delta, *p, grad);
                let mut g_up = [[0.0; 3]; 3];
                let mut g_dn = [[0.0; 3]; 3];
                let up = column_norm_smoothed(&b, *s, delta, 1.0, &mut g_up);
                let dn = column_norm_smoothed(&b, -*s, delta, 1.0, &mut g_dn);
                let (well, gw) = if up <= dn { (up, &g_up) } else { (dn, &g_dn) };
                for i in 0..3 {
                    grad[i][2] += gw[i][2];
                }
                let cv = column_norm_smoothed(&b, 0.0, delta, *c, grad);
                p * pv + well + c * cv
            }
            Form::Table(t) => {
                let b = column(m);
                let pv = planar_norm_smoothed(m, delta, t.p, grad);
                let rho_raw = (b[0] * b[0] + b[1] * b[1]).sqrt();
                // Smooth the cone |b⊥| near the axis so descent sees a gradient.
                let (rho, drho) = if delta > 0.0 {
                    let q = (rho_raw * rho_raw + delta * delta).sqrt();
                    (q - delta, 1.0 / q)
                } else if rho_raw > 0.0 {
                    (rho_raw, 1.0 / rho_raw)
                } else {
                    (0.0, 0.0)
                };
                let (tv, d_rho, d_t) = t.eval(rho, b[2]);
                grad[0][2] += d_rho * drho * b[0];
                grad[1][2] += d_rho * drho * b[1];
                grad[2][2] += d_t;
                t.p * pv + tv
            }
        }
    }

    /// Closed-form `W^∞` when the model has one.
    pub fn recession_closed(&self, m: &Mat3) -> Option<f64> {
        if !self.closed_form_recession {
            return None;
        }
        let mut scratch = [[0.0; 3]; 3];
        self.recession_smoothed(m, 0.0, &mut scratch)
    }

    /// Huber-smoothed closed-form `W^∞` and its gradient.
    pub fn recession_smoothed(&self, m: &Mat3, delta: f64, grad: &mut Mat3) -> Option<f64> {
        if !self.closed_form_recession {
            return None;
        }
        *grad = [[0.0; 3]; 3];
        let b = column(m);
        Some(match &self.form {
            Form::ConvexNorm { .. } => {
                let r = full_norm(m);
                let (v, d) = huber(r, delta);
                if r > 0.0 {
                    for i in 0..3 {
                        for j in 0..3 {
                            grad[i][j] = d * m[i][j] / r;
                        }
                    }
                }
                v
            }
            Form::Laminate { p, c, .. } => {
                let pv = planar_norm_smoothed(m, delta, *p, grad);
                let bv = column_norm_smoothed(&b, 0.0, delta, 1.0 + c, grad);
                p * pv + (1.0 + c) * bv
            }
            Form::Table(t) => {
                let pv = planar_norm_smoothed(m, delta, t.p, grad);
                let bv = column_norm_smoothed(&b, 0.0, delta, t.slope, grad);
                t.p * pv + t.slope * bv
            }
        })
    }

    /// `W^∞(ξ)`: closed form when available, otherwise the ladder extrapolation.
    pub fn recession_density(&self, xi: &FullMatrix, t_ladder: &[f64]) -> Result<f64> {
        check_finite(xi.0.iter().flatten().copied().collect::<Vec<_>>().as_slice(), "matrix")?;
        check_ladder(t_ladder)?;
        if let Some(v) = self.recession_closed(&xi.0) {
            return Ok(v);
        }
        self.extrapolated_recession(xi, t_ladder)
    }

    /// Extrapolates `W(tξ)/t` over the ladder with the decay model `a + c·t^{−e}`,
    /// `e ∈ {r, 1, 2}`, computed on `ξ/|ξ|` and rescaled by `|ξ|`.
    pub fn extrapolated_recession(&self, xi: &FullMatrix, t_ladder: &[f64]) -> Result<f64> {
        check_ladder(t_ladder)?;
        let norm = xi.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let unit = xi.scale(1.0 / norm);
        let top = &t_ladder[t_ladder.len().saturating_sub(3)..];
        let values: Vec<f64> = top.iter().map(|t| self.value(&unit.scale(*t).0) / t).collect();
        let (a, _c, residual) = fit_decay_best(top, &values, self.constants.r);
        let tol = 1e-4 * (1.0 + a.abs());
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
        Ok(a.max(0.0) * norm)
    }

    /// `W₀(ξ̄) = inf_b W(ξ̄|b)` in closed form, with its gradient in `ξ̄`
    /// written into the planar block of `grad`.
    pub fn w_zero_smoothed(&self, m: &Mat3, delta: f64, grad: &mut Mat3) -> f64 {
        *grad = [[0.0; 3]; 3];
        match &self.form {
            Form::ConvexNorm { a } => {
                let n2 = planar_norm(m).powi(2);
                let w = (a * a + n2).sqrt();
                for i in 0..3 {
                    grad[i][0] = m[i][0] / w;
                    grad[i][1] = m[i][1] / w;
                }
                w
            }
            Form::Laminate { p, s, c } => p * planar_norm_smoothed(m, delta, *p, grad) + s * c.min(1.0),
            Form::Table(t) => t.p * planar_norm_smoothed(m, delta, t.p, grad) + t.min_value,
        }
    }

    /// `inf_b W(ξ̄|b)` by coarse grid search over `|b| ≤ (β/β′)(1+|ξ̄|)` and
    /// compass-search refinement. Ties go to the smallest-norm, then
    /// lexicographically smallest minimizer.
    pub fn w_zero(&self, xi_bar: &PlanarMatrix) -> Result<(f64, CosseratVector)> {
        check_finite(&xi_bar.to_row_major(), "planar matrix")?;
        let c = self.constants;
        let radius = c.beta_upper / c.beta_lower * (1.0 + xi_bar.norm());
        let minima = local_minima_in_b(|m| self.value(m), xi_bar, radius, 10);
        Ok(pick_minimizer(&minima))
    }

    /// Runs the growth, recession and Lipschitz certificates on a seeded
    /// random sample.
    pub fn certify(&self, samples: usize, seed: u64) -> CertificateReport {
        let c = self.constants;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = CertificateReport {
            samples,
            growth_ok: true,
            recession_ok: true,
            lipschitz_ok: true,
            growth_lower_slack: f64::INFINITY,
            growth_upper_slack: f64::INFINITY,
            recession_slack: f64::INFINITY,
            lipschitz_slack: f64::INFINITY,
        };
        let ladder = default_ladder();
        for k in 0..samples {
            let m = random_matrix(&mut rng, -3.0, 3.0);
            let n = full_norm(&m);
            let w = self.value(&m);
            let lo = w - c.beta_lower * n;
            let hi = c.beta_upper * (1.0 + n) - w;
            report.growth_lower_slack = report.growth_lower_slack.min(lo);
            report.growth_upper_slack = report.growth_upper_slack.min(hi);
            if lo < 0.0 || hi < 0.0 || !w.is_finite() {
                report.growth_ok = false;
            }

            // The extrapolated recession is expensive; check it on a subsample.
            let rec = match self.recession_closed(&m) {
                Some(v) => Some(v),
                None if k % 20 == 0 => self.extrapolated_recession(&FullMatrix(m), &ladder).ok(),
                None => None,
            };
            if let Some(rec) = rec {
                let bound = c.recession_c * (1.0 + n.powf(1.0 - c.r));
                let slack = bound - (rec - w).abs();
                report.recession_slack = report.recession_slack.min(slack);
                if slack < -1e-12 * (1.0 + w.abs()) {
                    report.recession_ok = false;
                }
            }

            let d = random_matrix(&mut rng, -3.0, 1.0);
            let mut m2 = m;
            m2.iter_mut().flatten().zip(d.iter().flatten()).for_each(|(a, b)| *a += b);
            let w2 = self.value(&m2);
            let dn = full_norm(&d);
            let slack = c.lipschitz * dn - (w - w2).abs();
            report.lipschitz_slack = report.lipschitz_slack.min(slack);
            if slack < -1e-12 * (1.0 + w.abs().max(w2.abs())) {
                report.lipschitz_ok = false;
            }
        }
        report
    }

    /// Constants of a table model from a dense scan of the transverse part
    /// `T(ρ, t)`: the planar term `p|ξ̄|` enters every bound in closed form.
    fn estimate_constants(&self) -> Constants {
        let Form::Table(t) = &self.form else {
            unreachable!("analytic families carry their own constants")
        };
        let r = 0.5;
        let (mut lower, mut upper, mut rec_c) = (f64::INFINITY, 0.0f64, 0.0f64);
        let mut visit = |rho: f64, tt: f64| {
            let n = (rho * rho + tt * tt).sqrt();
            let v = t.eval(rho, tt).0;
            if n > 0.0 {
                lower = lower.min(v / n);
            }
            upper = upper.max(v / (1.0 + n));
            rec_c = rec_c.max((v - t.slope * n).abs() / (1.0 + n.powf(1.0 - r)));
        };
        // Four sub-steps per table cell over three times the table extent.
        let (nr, nt) = (12 * (t.n_rho - 1), 24 * (t.n_t - 1));
        for i in 0..=nr {
            for j in 0..=nt {
                visit(3.0 * t.rho_max * i as f64 / nr as f64, 3.0 * t.t_max * (2.0 * j as f64 / nt as f64 - 1.0));
            }
        }
        // Far field along rays.
        let ext = 3.0 * t.rho_max.max(t.t_max);
        for a in 0..=128 {
            let ang = std::f64::consts::PI * (a as f64 / 128.0 - 0.5);
            let mut rad = ext;
            while rad < 1e5 {
                visit(rad * ang.cos(), rad * ang.sin());
                rad *= 1.25;
            }
        }
        let lower = t.p.min(lower);
        let upper = (t.p * t.p + upper * upper).sqrt();
        Constants {
            beta_lower: 0.98 * lower,
            beta_upper: 1.02 * upper,
            recession_c: 1.05 * rec_c,
            r,
            lipschitz: 1.01 * (t.p * t.p + t.lipschitz_b().powi(2)).sqrt(),
        }
    }
}

/// Ladder used for recession extrapolation by default.
pub fn default_ladder() -> Vec<f64> {
    vec![64.0, 256.0, 1024.0]
}

fn check_ladder(t_ladder: &[f64]) -> Result<()> {
    if t_ladder.len() < 3 {
        return Err(Error::Invalid("recession ladder needs at least 3 entries".into()));
    }
    if t_ladder.windows(2).any(|w| !(w[1] > w[0])) || !(t_ladder[0] > 0.0) {
        return Err(Error::Invalid("recession ladder must be positive and strictly increasing".into()));
    }
    if *t_ladder.last().unwrap() < 1024.0 {
        return Err(Error::Invalid("recession ladder must reach at least 2^10".into()));
    }
    Ok(())
}

/// Local minimizers of `b ↦ f(ξ̄|b)` over the cube `[−R, R]³`: grid points
/// that beat all 26 neighbours, each refined by compass search. Sorted by value.
pub(crate) fn local_minima_in_b<F>(f: F, xi_bar: &PlanarMatrix, radius: f64, half_points: usize) -> Vec<(f64, CosseratVector)>
where
    F: Fn(&Mat3) -> f64,
{
    let n = 2 * half_points + 1;
    let h = radius / half_points as f64;
    let base = crate::tensor::FullMatrix::join(xi_bar, &CosseratVector::ZERO).0;
    let eval = |b: &[f64; 3]| {
        let mut m = base;
        m[0][2] = b[0];
        m[1][2] = b[1];
        m[2][2] = b[2];
        f(&m)
    };
    let coord = |i: usize| -radius + i as f64 * h;
    let mut grid = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                grid[(i * n + j) * n + k] = eval(&[coord(i), coord(j), coord(k)]);
            }
        }
    }
    let mut seeds = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let v = grid[(i * n + j) * n + k];
                let mut is_min = true;
                'nb: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        for dk in -1i64..=1 {
                            if di == 0 && dj == 0 && dk == 0 {
                                continue;
                            }
                            let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                            if a < 0 || b < 0 || c < 0 || a >= n as i64 || b >= n as i64 || c >= n as i64 {
                                continue;
                            }
                            if grid[((a as usize) * n + b as usize) * n + c as usize] < v {
                                is_min = false;
                                break 'nb;
                            }
                        }
                    }
                }
                if is_min {
                    seeds.push((v, [coord(i), coord(j), coord(k)]));
                }
            }
        }
    }
    seeds.sort_by(|a, b| a.0.total_cmp(&b.0));
    seeds.truncate(8);
    let mut out: Vec<(f64, CosseratVector)> = Vec::new();
    for (_, start) in seeds {
        let (b, v) = compass_search(start, h, 1e-14, 20_000, |b| eval(b));
        let b = CosseratVector(b);
        if out.iter().all(|(_, o)| o.sub(&b).norm() > 1e-6) {
            out.push((v, b));
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Best entry of a minimizer list, breaking near-ties (relative 1e-9) by
/// smallest norm and then lexicographically.
pub(crate) fn pick_minimizer(minima: &[(f64, CosseratVector)]) -> (f64, CosseratVector) {
    let best = minima.iter().map(|m| m.0).fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * (1.0 + best.abs());
    let mut tied: Vec<&(f64, CosseratVector)> = minima.iter().filter(|m| m.0 <= best + tol).collect();
    tied.sort_by(|a, b| {
        let (na, nb) = (a.1.norm(), b.1.norm());
        if (na - nb).abs() > 1e-9 * (1.0 + na.max(nb)) {
            return na.total_cmp(&nb);
        }
        for i in 0..3 {
            if (a.1 .0[i] - b.1 .0[i]).abs() > 1e-9 {
                return a.1 .0[i].total_cmp(&b.1 .0[i]);
            }
        }
        std::cmp::Ordering::Equal
    });
    tied.first().map(|m| **m).unwrap_or((f64::INFINITY, CosseratVector::ZERO))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lam() -> EnergyDensity {
        EnergyDensity::separable_laminate(1.0, 1.0, 0.5).unwrap()
    }

    #[test]
    fn convex_norm_values() {
        let m = EnergyDensity::convex_norm(1.0).unwrap();
        assert_eq!(m.eval_density(&FullMatrix::ZERO).unwrap(), 1.0);
        let mut x = FullMatrix::ZERO;
        x.0[1][2] = 1.0;
        assert!((m.eval_density(&x).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn laminate_well_value() {
        let mut x = FullMatrix::ZERO;
        x.0[2][2] = 1.0;
        assert!((lam().eval_density(&x).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_is_domain_error() {
        let mut x = FullMatrix::ZERO;
        x.0[0][0] = f64::NAN;
        assert!(matches!(lam().eval_density(&x), Err(Error::Domain(_))));
    }

    #[test]
    fn smoothed_gradient_matches_finite_differences() {
        let model = lam();
        let m: Mat3 = [[0.3, -0.2, 0.1], [0.05, 0.4, -0.3], [-0.1, 0.2, 0.7]];
        let mut g = [[0.0; 3]; 3];
        let v = model.smoothed(&m, 0.01, &mut g);
        for i in 0..3 {
            for j in 0..3 {
                let mut mp = m;
                mp[i][j] += 1e-7;
                let mut s = [[0.0; 3]; 3];
                let vp = model.smoothed(&mp, 0.01, &mut s);
                assert!(((vp - v) / 1e-7 - g[i][j]).abs() < 1e-5, "{i}{j}");
            }
        }
    }

    #[test]
    fn smoothing_underestimates_by_at_most_half_delta_per_norm() {
        let model = lam();
        let m: Mat3 = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let mut g = [[0.0; 3]; 3];
        let v = model.smoothed(&m, 1e-3, &mut g);
        assert!(v <= model.value(&m) && v >= model.value(&m) - 2e-3);
    }

    #[test]
    fn ladder_validation() {
        let m = lam();
        assert!(m.recession_density(&FullMatrix::ZERO, &[1.0, 2.0, 3.0]).is_err());
        assert!(m.recession_density(&FullMatrix::ZERO, &[4.0, 2.0, 2048.0]).is_err());
        assert_eq!(m.recession_density(&FullMatrix::ZERO, &default_ladder()).unwrap(), 0.0);
    }

    #[test]
    fn builtin_models_pass_certification() {
        for m in [EnergyDensity::convex_norm(1.0).unwrap(), lam(), EnergyDensity::convex_norm(2.5).unwrap()] {
            let r = m.certify(5000, 99);
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn bad_params_rejected() {
        assert!(EnergyDensity::convex_norm(0.0).is_err());
        assert!(EnergyDensity::from_json_str(r#"{"kind":"convex-norm","params":{"q":1}}"#).is_err());
        assert!(EnergyDensity::from_json_str(r#"{"kind":"nope"}"#).is_err());
        // Constants that contradict the density are caught by certification.
        let doc = r#"{"kind":"convex-norm","params":{"a":1},"constants":{"beta_lower":1.5,"beta_upper":2,"recession_c":1,"r":0.5,"lipschitz":1}}"#;
        assert!(matches!(EnergyDensity::from_json_str(doc), Err(Error::Model(_))));
    }

    #[test]
    fn table_interpolates_and_extends() {
        // T(ρ,t) = ρ + |t| sampled exactly (piecewise linear in each variable).
        let n = 5;
        let values: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| i as f64 * 0.5 + (-1.0 + j as f64 * 0.5f64).abs()).collect())
            .collect();
        let params = TableParams {
            p: 1.0,
            rho_max: 2.0,
            t_max: 1.0,
            values,
            slope: 1.0,
            recession: closed_form(),
        };
        let m = EnergyDensity::user_table(params).unwrap();
        let b = |x: f64, z: f64| {
            let mut f = FullMatrix::ZERO;
            f.0[0][2] = x;
            f.0[2][2] = z;
            m.eval_density(&f).unwrap()
        };
        assert!((b(0.75, 0.25) - 1.0).abs() < 1e-12);
        // Outside the table in t: T(clamp) + slope·distance.
        assert!((b(0.0, 3.0) - 3.0).abs() < 1e-12);
        let r = m.certify(2000, 3);
        assert!(r.passed(), "{r:?} {:?}", m.constants());
    }
}
