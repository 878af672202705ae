//! Hand-rolled minimizers: limited-memory BFGS with Armijo backtracking,
//! golden-section search, a derivative-free compass search, and the
//! `a + c·t^{-r}` extrapolation fit.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once the relative decrease stays below this for `patience` iterations.
    pub ftol: f64,
    pub patience: usize,
    /// Stop when the infinity norm of the gradient falls below this.
    pub gtol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 8,
            max_iters: 400,
            ftol: 1e-10,
            patience: 4,
            gtol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective values of the last few iterations, oldest first.
    pub tail: Vec<f64>,
}

/// Minimizes `f` starting from `x` (updated in place). `f` writes the gradient
/// into its second argument and returns the objective.
pub fn lbfgs<F>(x: &mut [f64], cfg: &LbfgsConfig, mut f: F) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut value = f(x, &mut g);
    let mut tail = VecDeque::with_capacity(12);
    tail.push_back(value);
    if !value.is_finite() {
        return LbfgsOutcome {
            value,
            iterations: 0,
            converged: false,
            tail: tail.into(),
        };
    }

    let mut s_hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.memory);
    let mut y_hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.memory);
    let mut rho_hist: VecDeque<f64> = VecDeque::with_capacity(cfg.memory);
    let mut dir = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut alpha = vec![0.0; cfg.memory];
    let mut quiet = 0usize;
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..cfg.max_iters {
        iterations = it + 1;
        if inf_norm(&g) <= cfg.gtol {
            converged = true;
            iterations = it;
            break;
        }

        // Two-loop recursion for dir = -H g.
        dir.copy_from_slice(&g);
        let m = s_hist.len();
        for i in (0..m).rev() {
            let a = rho_hist[i] * dot(&s_hist[i], &dir);
            alpha[i] = a;
            axpy(-a, &y_hist[i], &mut dir);
        }
        let gamma = if m > 0 {
            let yy = dot(&y_hist[m - 1], &y_hist[m - 1]);
            dot(&s_hist[m - 1], &y_hist[m - 1]) / yy
        } else {
            1.0 / inf_norm(&g).max(1.0)
        };
        dir.iter_mut().for_each(|d| *d *= gamma);
        for i in 0..m {
            let beta = rho_hist[i] * dot(&y_hist[i], &dir);
            axpy(alpha[i] - beta, &s_hist[i], &mut dir);
        }
        dir.iter_mut().for_each(|d| *d = -*d);

        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            // Not a descent direction: fall back to steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            let scale = 1.0 / inf_norm(&g).max(1.0);
            for (d, gi) in dir.iter_mut().zip(&g) {
                *d = -gi * scale;
            }
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            for ((xn, xi), d) in x_new.iter_mut().zip(x.iter()).zip(&dir) {
                *xn = xi + step * d;
            }
            let v = f(&x_new, &mut g_new);
            if v.is_finite() && v <= value + 1e-4 * step * slope {
                accepted = Some(v);
                break;
            }
            step *= 0.5;
        }
        let Some(v_new) = accepted else {
            // Line search failed; the current point is as good as this model gets.
            converged = true;
            break;
        };

        let mut s = vec![0.0; n];
        let mut y = vec![0.0; n];
        for i in 0..n {
            s[i] = x_new[i] - x[i];
            y[i] = g_new[i] - g[i];
        }
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if s_hist.len() == cfg.memory {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
            rho_hist.push_back(1.0 / sy);
            s_hist.push_back(s);
            y_hist.push_back(y);
        }

        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        let decrease = value - v_new;
        value = v_new;
        if tail.len() == 12 {
            tail.pop_front();
        }
        tail.push_back(value);

        if decrease <= cfg.ftol * (1.0 + value.abs()) {
            quiet += 1;
            if quiet >= cfg.patience {
                converged = true;
                break;
            }
        } else {
            quiet = 0;
        }
    }

    LbfgsOutcome {
        value,
        iterations,
        converged,
        tail: tail.into(),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub const INV_PHI: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Clone)]
pub struct GoldenOutcome {
    pub x: f64,
    pub value: f64,
    pub evaluations: usize,
}

/// Golden-section search on `[lo, hi]`. Stops after `max_evals` evaluations,
/// when the bracket is narrower than `xtol`, or when the two interior values
/// agree within `flat_tol·(1+|f|)` (a flat objective).
pub fn golden_section<F>(
    mut lo: f64,
    mut hi: f64,
    xtol: f64,
    flat_tol: f64,
    max_evals: usize,
    mut f: F,
) -> GoldenOutcome
where
    F: FnMut(f64) -> f64,
{
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut evals = 2;
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    while evals < max_evals && (hi - lo) > xtol {
        if flat_tol > 0.0 && (fc - fd).abs() <= flat_tol * (1.0 + fc.abs().min(fd.abs())) {
            break;
        }
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
            if fd < best.1 {
                best = (d, fd);
            }
        }
        evals += 1;
    }
    GoldenOutcome {
        x: best.0,
        value: best.1,
        evaluations: evals,
    }
}

/// Derivative-free compass (coordinate pattern) search, robust on
/// nonsmooth piecewise-smooth objectives. Returns the best point and value.
pub fn compass_search<const N: usize, F>(
    start: [f64; N],
    initial_step: f64,
    min_step: f64,
    max_evals: usize,
    mut f: F,
) -> ([f64; N], f64)
where
    F: FnMut(&[f64; N]) -> f64,
{
    let mut x = start;
    let mut fx = f(&x);
    let mut step = initial_step;
    let mut evals = 1;
    while step > min_step && evals < max_evals {
        let mut improved = false;
        for axis in 0..N {
            for sign in [1.0, -1.0] {
                let mut y = x;
                y[axis] += sign * step;
                let fy = f(&y);
                evals += 1;
                if fy < fx {
                    x = y;
                    fx = fy;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, fx)
}

/// Least-squares fit of `values ≈ a + c·t^{-r}` for a fixed exponent `r`.
/// Returns `(a, c, max_residual)`.
pub fn fit_decay(ts: &[f64], values: &[f64], r: f64) -> (f64, f64, f64) {
    let n = ts.len() as f64;
    let xs: Vec<f64> = ts.iter().map(|t| t.powf(-r)).collect();
    let sx: f64 = xs.iter().sum();
    let sy: f64 = values.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(values).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    let (a, c) = if det.abs() <= 1e-300 {
        (sy / n, 0.0)
    } else {
        ((sxx * sy - sx * sxy) / det, (n * sxy - sx * sy) / det)
    };
    let residual = xs
        .iter()
        .zip(values)
        .map(|(x, y)| (a + c * x - y).abs())
        .fold(0.0, f64::max);
    (a, c, residual)
}

/// [`fit_decay`] over the exponents `{r, 1, 2}`, keeping the smallest residual.
pub fn fit_decay_best(ts: &[f64], values: &[f64], r: f64) -> (f64, f64, f64) {
    let mut best = fit_decay(ts, values, r);
    for e in [1.0, 2.0] {
        let fit = fit_decay(ts, values, e);
        if fit.2 < best.2 {
            best = fit;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let mut x = vec![-1.2, 1.0];
        let out = lbfgs(
            &mut x,
            &LbfgsConfig {
                max_iters: 500,
                ftol: 1e-15,
                ..Default::default()
            },
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
        );
        assert!(out.value < 1e-10, "{out:?}");
        assert!((x[0] - 1.0).abs() < 1e-4 && (x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn golden_finds_parabola_min() {
        let out = golden_section(-3.0, 5.0, 1e-8, 0.0, 200, |x| (x - 1.3).powi(2));
        assert!((out.x - 1.3).abs() < 1e-6);
    }

    #[test]
    fn compass_handles_cone() {
        let (x, v) = compass_search([2.0, -1.0, 0.5], 0.7, 1e-12, 100_000, |p| {
            ((p[0] - 0.3).powi(2) + (p[1] + 0.2).powi(2) + p[2].powi(2)).sqrt()
        });
        assert!(v < 1e-10, "{x:?} {v}");
    }

    #[test]
    fn decay_fit_recovers_limit() {
        let ts = [64.0, 256.0, 1024.0];
        let vals: Vec<f64> = ts.iter().map(|t: &f64| 1.5 + 0.3 * t.powf(-0.5)).collect();
        let (a, c, res) = fit_decay(&ts, &vals, 0.5);
        assert!((a - 1.5).abs() < 1e-12 && (c - 0.3).abs() < 1e-10 && res < 1e-12);
    }
}
