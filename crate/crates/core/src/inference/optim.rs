//! Quasi-Newton MAP optimization and the Laplace covariance at the mode.
//!
//! Dense BFGS with Armijo backtracking, run in ascent form on the
//! log-posterior. The posterior mixes directions whose curvature differs by
//! five orders of magnitude (survey-pinned prevalence levels against
//! prior-wide spline coefficients), which starves limited-memory updates;
//! the full inverse-Hessian approximation is tiny at these dimensions and
//! retains every curvature pair. Optional box constraints give posteriors
//! with hierarchical-scale funnels (no interior mode) a well-defined
//! projected stationary point. Line-search failures trigger seeded jitter
//! restarts from the best point found so far.
//!
//! The Laplace covariance inverts a finite-difference Hessian of the
//! (exact) gradient; when that Hessian is not positive definite the
//! covariance falls back to an eigenvalue-floored pseudo-inverse and says
//! so.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Convergence threshold on the gradient max-norm.
    pub grad_tol: f64,
    pub memory: usize,
    pub max_restarts: usize,
    pub max_backtracks: usize,
    /// Cap on the max-norm of a trial step before backtracking. Keeps the
    /// search from catapulting into stiff regions when curvature varies by
    /// orders of magnitude along the path.
    pub max_step: f64,
    /// Per-coordinate scaling (typical squared scales, e.g. prior
    /// variances) used as the initial inverse-Hessian diagonal.
    pub preconditioner: Option<Vec<f64>>,
    /// Box constraints. A posterior whose density grows without bound along
    /// a hierarchical-scale funnel has no mode; bounding those coordinates
    /// gives the ascent a well-defined projected stationary point.
    pub bounds: Option<Vec<(f64, f64)>>,
    /// Print line-search failure telemetry to stderr.
    pub debug: bool,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iters: 2000,
            grad_tol: 1e-5,
            memory: 20,
            max_restarts: 5,
            max_backtracks: 60,
            max_step: 1.0,
            preconditioner: None,
            bounds: None,
            debug: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub grad_max_norm: f64,
    pub value: f64,
    pub restarts: usize,
    pub line_search_failures: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn clamp_to_bounds(x: &mut [f64], bounds: Option<&[(f64, f64)]>) {
    if let Some(b) = bounds {
        for (xi, (lo, hi)) in x.iter_mut().zip(b) {
            *xi = xi.clamp(*lo, *hi);
        }
    }
}

/// Ascent gradient with components pointing out of the active box zeroed.
fn project_gradient(g: &[f64], x: &[f64], bounds: Option<&[(f64, f64)]>) -> Vec<f64> {
    let Some(b) = bounds else {
        return g.to_vec();
    };
    g.iter()
        .zip(x)
        .zip(b)
        .map(|((&gi, &xi), &(lo, hi))| {
            if (xi <= lo && gi < 0.0) || (xi >= hi && gi > 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

/// Dense inverse-Hessian approximation for the minimization problem, with
/// the standard BFGS rank-two update.
struct InverseHessian {
    b: DMatrix<f64>,
    updates: usize,
}

impl InverseHessian {
    fn fresh(diag: &[f64]) -> Self {
        InverseHessian {
            b: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
            updates: 0,
        }
    }

    fn apply(&self, q: &[f64]) -> Vec<f64> {
        let out = &self.b * DVector::from_column_slice(q);
        out.iter().copied().collect()
    }

    /// `B <- (I - rho s y') B (I - rho y s') + rho s s'` with
    /// `rho = 1 / (y's)`.
    fn update(&mut self, s: &[f64], y: &[f64], diag: &[f64]) {
        let rho = 1.0 / dot(y, s);
        if self.updates == 0 {
            // Rescale the seed diagonal to the first observed curvature.
            let ydy: f64 = y.iter().zip(diag).map(|(yi, di)| yi * yi * di).sum();
            let gamma = (dot(s, y) / ydy).max(1e-12);
            self.b *= gamma;
        }
        let s = DVector::from_column_slice(s);
        let y = DVector::from_column_slice(y);
        let by = &self.b * &y;
        let yby = (y.transpose() * &by)[(0, 0)];
        // B += (1 + rho y'By) rho s s' - rho (B y s' + s y' B)
        let c = (1.0 + rho * yby) * rho;
        self.b += c * (&s * s.transpose());
        self.b -= rho * (&by * s.transpose() + &s * by.transpose());
        self.updates += 1;
    }
}

/// Maximize `f` from `x0`. Returns the best point found and diagnostics;
/// `converged` reports whether the gradient tolerance was met.
pub fn maximize<F, G>(
    f: &F,
    grad: &G,
    x0: &[f64],
    opts: &OptimOptions,
    seed: u64,
) -> Result<(Vec<f64>, FitDiagnostics)>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    let bounds = opts.bounds.as_deref();
    if let Some(b) = bounds {
        assert_eq!(b.len(), n, "bounds length");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c42_4647_534d_4150);
    let mut x = x0.to_vec();
    clamp_to_bounds(&mut x, bounds);
    let mut fx = f(&x);
    let mut restarts = 0;
    while !fx.is_finite() && restarts < opts.max_restarts {
        restarts += 1;
        for (xi, x0i) in x.iter_mut().zip(x0) {
            xi.clone_from(x0i);
            *xi += 0.1 * rng.random::<f64>() - 0.05;
        }
        clamp_to_bounds(&mut x, bounds);
        fx = f(&x);
    }
    if !fx.is_finite() {
        return Err(Error::NonFinitePosterior);
    }

    let diag = match &opts.preconditioner {
        Some(d) => {
            assert_eq!(d.len(), n, "preconditioner length");
            d.clone()
        }
        None => vec![1.0; n],
    };
    let mut g = grad(&x)?;
    let mut best_x = x.clone();
    let mut best_f = fx;
    let mut inv_h = InverseHessian::fresh(&diag);
    let mut line_search_failures = 0;
    let mut iterations = 0;
    let mut converged = false;
    let mut last_improvement = 0usize;

    for iter in 0..opts.max_iters {
        iterations = iter;
        // No measurable progress for a long stretch: stop and report the
        // best point rather than churning.
        if iter - last_improvement > 150 {
            break;
        }
        let g_proj = project_gradient(&g, &x, bounds);
        if max_norm(&g_proj) < opts.grad_tol {
            converged = true;
            break;
        }
        // Minimization direction for -f, flipped into ascent.
        let gm: Vec<f64> = g_proj.iter().map(|v| -v).collect();
        let mut d: Vec<f64> = inv_h.apply(&gm).iter().map(|v| -v).collect();
        // Never push further out of an active bound.
        if let Some(b) = bounds {
            for ((di, &xi), &(lo, hi)) in d.iter_mut().zip(&x).zip(b) {
                if (xi <= lo && *di < 0.0) || (xi >= hi && *di > 0.0) {
                    *di = 0.0;
                }
            }
        }
        let mut slope = dot(&g_proj, &d);
        if !(slope > 0.0) {
            // Not an ascent direction; fall back to preconditioned ascent.
            inv_h = InverseHessian::fresh(&diag);
            d = g_proj.iter().zip(&diag).map(|(gi, di)| gi * di).collect();
            slope = dot(&g_proj, &d);
            if !(slope > 0.0) {
                break;
            }
        }

        let mut alpha = (opts.max_step / max_norm(&d).max(1e-12)).min(1.0);
        let c1 = 1e-4;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let mut cand: Vec<f64> =
                x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            clamp_to_bounds(&mut cand, bounds);
            let fc = f(&cand);
            // Strict improvement: accepting fc == fx lets microscopic steps
            // freeze the iteration without tripping the failure path.
            if fc.is_finite() && fc > fx && fc >= fx + c1 * alpha * slope {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= 0.5;
        }

        let Some((x_new, f_new)) = accepted else {
            line_search_failures += 1;
            if opts.debug {
                let a0 = (opts.max_step / max_norm(&d).max(1e-12)).min(1.0);
                eprintln!(
                    "ls-fail iter {iter}: slope {slope:.3e}, |d|inf {:.3e}, fx {fx:.6}",
                    max_norm(&d)
                );
                for k in [0, 2, 6, 12, 20, 40, 59] {
                    let a = a0 * 0.5f64.powi(k);
                    let mut cand: Vec<f64> =
                        x.iter().zip(&d).map(|(xi, di)| xi + a * di).collect();
                    clamp_to_bounds(&mut cand, bounds);
                    eprintln!("  alpha {a:.3e}: f - fx = {:+.6e}", f(&cand) - fx);
                }
            }
            if restarts >= opts.max_restarts {
                break;
            }
            restarts += 1;
            // Jittered restart from the best point so far, keeping the
            // accumulated curvature model: with it intact, the ascent walks
            // back in a handful of steps instead of relearning the valley.
            x = best_x
                .iter()
                .map(|v| v + 0.001 * (rng.random::<f64>() * 2.0 - 1.0))
                .collect();
            clamp_to_bounds(&mut x, bounds);
            fx = f(&x);
            if !fx.is_finite() {
                x = best_x.clone();
                fx = best_f;
            }
            g = grad(&x)?;
            continue;
        };

        let g_new = match grad(&x_new) {
            Ok(g) => g,
            Err(_) => {
                line_search_failures += 1;
                if restarts >= opts.max_restarts {
                    break;
                }
                restarts += 1;
                continue;
            }
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        // Curvature pair in minimization coordinates: y = -(g_new - g).
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| -(a - b)).collect();
        let sy = dot(&s, &y);
        let s_norm = dot(&s, &s).sqrt();
        let y_norm = dot(&y, &y).sqrt();
        // Reject degenerate pairs outright: microscopic steps produce huge
        // 1/(s.y) factors that blow up later directions.
        if sy > 1e-10 * s_norm * y_norm && s_norm > 1e-9 {
            inv_h.update(&s, &y, &diag);
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        if fx > best_f + 1e-8 * best_f.abs().max(1.0) {
            last_improvement = iter;
        }
        if fx > best_f {
            best_f = fx;
            best_x = x.clone();
        }
        if n == 0 {
            converged = true;
            break;
        }
    }

    let final_grad = grad(&best_x)?;
    let grad_max_norm = max_norm(&project_gradient(&final_grad, &best_x, bounds));
    if grad_max_norm < opts.grad_tol {
        converged = true;
    }
    Ok((
        best_x,
        FitDiagnostics {
            converged,
            iterations: iterations + 1,
            grad_max_norm,
            value: best_f,
            restarts,
            line_search_failures,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct LaplaceResult {
    pub covariance: DMatrix<f64>,
    /// Whether the negated Hessian was positive definite as computed.
    pub hessian_pd: bool,
}

/// Central-difference Hessian of the log target from its exact gradient,
/// symmetrized. Columns whose gradient evaluation fails are zeroed and
/// reported through the boolean.
pub fn fd_hessian<G>(grad: &G, x: &[f64]) -> Result<(DMatrix<f64>, bool)>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut degraded = false;
    for j in 0..n {
        let step = 1e-5 * x[j].abs().max(1.0);
        let mut plus = x.to_vec();
        plus[j] += step;
        let mut minus = x.to_vec();
        minus[j] -= step;
        match (grad(&plus), grad(&minus)) {
            (Ok(gp), Ok(gm)) => {
                for i in 0..n {
                    let v = (gp[i] - gm[i]) / (2.0 * step);
                    if v.is_finite() {
                        h[(i, j)] = v;
                    } else {
                        degraded = true;
                    }
                }
            }
            _ => degraded = true,
        }
    }
    Ok(((&h + &h.transpose()) * 0.5, degraded))
}

/// Levenberg-regularized Newton ascent from `x0`, used to polish a
/// quasi-Newton iterate: the posterior mixes curvatures across five orders
/// of magnitude, and only the true Hessian finishes such a surface. Returns
/// the refined point, the Hessian at it (for the Laplace step), and whether
/// the projected gradient met `grad_tol`.
pub fn newton_polish<F, G>(
    f: &F,
    grad: &G,
    x0: &[f64],
    bounds: Option<&[(f64, f64)]>,
    grad_tol: f64,
    max_outer: usize,
) -> Result<(Vec<f64>, DMatrix<f64>, bool, usize)>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut converged = false;
    let mut outer = 0;
    let (mut h, mut degraded) = fd_hessian(grad, &x)?;
    for _ in 0..max_outer {
        outer += 1;
        let g = grad(&x)?;
        let g_proj = project_gradient(&g, &x, bounds);
        if max_norm(&g_proj) < grad_tol {
            converged = true;
            break;
        }
        if degraded {
            break;
        }
        // Free coordinates: not pinned at an active bound.
        let free: Vec<usize> = (0..n)
            .filter(|&k| g_proj[k] != 0.0 || g[k] == 0.0)
            .collect();
        if free.is_empty() {
            converged = true;
            break;
        }
        let nf = free.len();
        let m = DMatrix::from_fn(nf, nf, |i, j| -h[(free[i], free[j])]);
        let gf = DVector::from_fn(nf, |i, _| g_proj[free[i]]);
        let scale = (0..nf).map(|i| m[(i, i)].abs()).fold(1e-12f64, f64::max);

        let mut lambda = 1e-8 * scale;
        let mut improved = false;
        for _ in 0..25 {
            let mut reg = m.clone();
            for i in 0..nf {
                reg[(i, i)] += lambda;
            }
            if let Some(chol) = nalgebra::Cholesky::new(reg) {
                let p = chol.solve(&gf);
                let mut cand = x.clone();
                for (i, &k) in free.iter().enumerate() {
                    cand[k] += p[i];
                }
                clamp_to_bounds(&mut cand, bounds);
                let fc = f(&cand);
                if fc.is_finite() && fc > fx {
                    x = cand;
                    fx = fc;
                    improved = true;
                    break;
                }
            }
            lambda = (lambda * 10.0).max(1e-10 * scale);
        }
        if !improved {
            break;
        }
        let (h_new, deg_new) = fd_hessian(grad, &x)?;
        h = h_new;
        degraded = deg_new;
    }
    Ok((x, h, converged, outer))
}

/// Laplace covariance from a precomputed Hessian of the log target:
/// inverse of the negated Hessian, with an eigenvalue-floored pseudo-inverse
/// fallback when it is not positive definite (degenerate ridges, funnels).
pub fn laplace_from_hessian(h: &DMatrix<f64>, degraded: bool) -> LaplaceResult {
    let n = h.nrows();
    let m = -h;
    if !degraded {
        let max_diag = (0..n).map(|i| m[(i, i)].abs()).fold(1.0f64, f64::max);
        let mut jitter = 0.0;
        for attempt in 0..14 {
            let mut m_try = m.clone();
            if attempt > 0 {
                for i in 0..n {
                    m_try[(i, i)] += jitter;
                }
            }
            if let Some(chol) = nalgebra::Cholesky::new(m_try) {
                return LaplaceResult {
                    covariance: chol.inverse(),
                    hessian_pd: attempt == 0,
                };
            }
            jitter = if attempt == 0 {
                1e-12 * max_diag
            } else {
                jitter * 10.0
            };
        }
    }
    // Pseudo-inverse through an eigenvalue floor.
    let eig = nalgebra::SymmetricEigen::new(m);
    let max_ev = eig.eigenvalues.iter().fold(1e-300f64, |a, b| a.max(b.abs()));
    let floor = 1e-8 * max_ev;
    let mut cov = DMatrix::zeros(n, n);
    for k in 0..n {
        let ev = eig.eigenvalues[k].max(floor);
        let v = eig.eigenvectors.column(k);
        cov += DMatrix::from_fn(n, n, |i, j| v[i] * v[j] / ev);
    }
    LaplaceResult {
        covariance: cov,
        hessian_pd: false,
    }
}

/// Covariance of the Gaussian (Laplace) approximation at `mode`.
pub fn laplace_covariance<G>(grad: &G, mode: &[f64]) -> Result<LaplaceResult>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let (h, degraded) = fd_hessian(grad, mode)?;
    Ok(laplace_from_hessian(&h, degraded))
}

/// Convenience wrapper: gradient of a quadratic form used in tests.
#[allow(dead_code)]
fn quadratic_grad(a: &DMatrix<f64>, m: &[f64], x: &[f64]) -> Vec<f64> {
    let xv = DVector::from_column_slice(x) - DVector::from_column_slice(m);
    let g = -(a * xv);
    g.iter().copied().collect()
}
