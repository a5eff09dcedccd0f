//! Posterior assembly, MAP fitting, sampling and summaries.
//!
//! [`ModelCtx`] bundles everything fixed during inference: the region graph,
//! natural history, grid, bases, mixing weights, treatment-seeking close
//! sets and the parameter layout. The log-posterior is the log-prior plus
//! the joint log-likelihood of the projected trajectories; gradients come
//! from forward-mode dual numbers pushed through the entire pipeline, one
//! tangent per coordinate.

pub mod diag;
pub mod mcmc;
pub mod optim;
pub mod prior;
pub mod summary;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::engine::{self, NaturalHistory, Trajectories};
use crate::error::{Error, Result};
use crate::graph::{mixing_weights, NeighborhoodWeights, RegionGraph};
use crate::obs::{
    bind, prior_mean_log_m, seek_probabilities_from, total_loglik, BoundObs, CountDispersion,
    LogLikParts, ObservationSet, RecencyConstants, SiteMap,
};
use crate::params::{param_names, ParamDims, ParameterVector};
use crate::scalar::{Dual, Scalar};
use crate::spline::{make_basis, BasisMatrix, BasisSpec};

pub use mcmc::{ChainSet, McmcOptions};
pub use nalgebra::DMatrix as CovMatrix;
pub use optim::{FitDiagnostics, LaplaceResult, OptimOptions};
pub use summary::{summarize, PosteriorSummary, SamplerDiagnostics, SummaryEntry};

/// Everything configurable about the model other than the data.
#[derive(Debug, Clone)]
pub struct ModelSettings {
    pub t0: f64,
    pub t_end: f64,
    pub h: f64,
    /// Self-share of the spatial mixing kernel.
    pub w0: f64,
    /// Adjacency degree bounding cross-region treatment seeking.
    pub seek_degree: usize,
    pub kappa_order: usize,
    pub kappa_knot_interval: f64,
    pub alpha_order: usize,
    pub alpha_knot_interval: f64,
    /// ART scale-up year; initiation is pinned at zero before it.
    pub alpha_zero_before: Option<f64>,
    pub nh: NaturalHistory,
    pub recency: RecencyConstants,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            t0: 2000.0,
            t_end: 2019.0,
            h: 0.1,
            w0: 0.9,
            seek_degree: 2,
            kappa_order: 3,
            kappa_knot_interval: 5.0,
            alpha_order: 1,
            alpha_knot_interval: 1.0,
            alpha_zero_before: Some(2004.0),
            nh: NaturalHistory::placeholder(),
            recency: RecencyConstants::default(),
        }
    }
}

/// Fixed inference context: validated settings materialized against a graph
/// and site registry. Immutable and shareable across worker threads.
#[derive(Debug, Clone)]
pub struct ModelCtx {
    pub settings: ModelSettings,
    pub graph: RegionGraph,
    pub sites: SiteMap,
    pub grid: Vec<f64>,
    pub weights: NeighborhoodWeights,
    pub kappa_basis: BasisMatrix,
    pub alpha_basis: BasisMatrix,
    /// Close sets with crossing distances, per home region.
    pub close: Vec<Vec<(usize, usize)>>,
    pub prior_mean_log_m: Vec<f64>,
    pub dims: ParamDims,
}

impl ModelCtx {
    pub fn new(settings: ModelSettings, graph: RegionGraph, sites: SiteMap) -> Result<Self> {
        settings.nh.validate()?;
        let grid = engine::make_grid(settings.t0, settings.t_end, settings.h)?;
        let weights = mixing_weights(&graph, settings.w0)?;
        let kappa_basis = make_basis(
            &BasisSpec {
                order: settings.kappa_order,
                knot_interval: settings.kappa_knot_interval,
                t0: settings.t0,
                t_end: settings.t_end,
                zero_before: None,
            },
            &grid,
        )?;
        let alpha_basis = make_basis(
            &BasisSpec {
                order: settings.alpha_order,
                knot_interval: settings.alpha_knot_interval,
                t0: settings.t0,
                t_end: settings.t_end,
                zero_before: settings.alpha_zero_before,
            },
            &grid,
        )?;
        let close = (0..graph.len())
            .map(|r| graph.close_set_with_distances(r, settings.seek_degree))
            .collect();
        let prior_mean = prior_mean_log_m(&graph, settings.seek_degree);
        let dims = ParamDims {
            regions: graph.len(),
            sites: sites.len(),
            kappa_basis: kappa_basis.n_basis(),
            alpha_basis: alpha_basis.n_basis(),
        };
        Ok(ModelCtx {
            settings,
            graph,
            sites,
            grid,
            weights,
            kappa_basis,
            alpha_basis,
            close,
            prior_mean_log_m: prior_mean,
            dims,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        param_names(&self.dims, self.graph.ids(), &self.sites.ids)
    }

    /// Starting point: zeros everywhere except the treatment-seeking
    /// intercepts, which sit at their prior means.
    pub fn init_params(&self) -> ParameterVector<f64> {
        let mut p = ParameterVector::zeros(&self.dims);
        p.log_m = self.prior_mean_log_m.clone();
        p
    }

    pub fn bind_observations(&self, obs: &ObservationSet) -> Result<BoundObs> {
        bind(obs, &self.graph, &self.sites, &self.grid)
    }

    /// Project the epidemic for one parameter vector.
    pub fn project<S: Scalar>(&self, p: &ParameterVector<S>) -> Result<Trajectories<S>> {
        engine::project(
            &p.epidemic(),
            &self.settings.nh,
            &self.graph,
            &self.weights,
            &self.grid,
            &self.kappa_basis,
            &self.alpha_basis,
        )
    }

    /// Treatment-seeking probabilities implied by `log_m`.
    pub fn seek_pi<S: Scalar>(&self, log_m: &[S]) -> Vec<Vec<S>> {
        seek_probabilities_from(&self.close, log_m)
    }
}

/// One full posterior evaluation.
#[derive(Debug, Clone)]
pub struct PostEval<S> {
    pub log_prior: S,
    pub loglik: LogLikParts<S>,
    pub log_posterior: S,
    pub clamp_events: u64,
}

pub fn eval_posterior<S: Scalar>(
    p: &ParameterVector<S>,
    ctx: &ModelCtx,
    bound: &BoundObs,
) -> Result<PostEval<S>> {
    let lp = prior::log_prior(p, &ctx.prior_mean_log_m);
    let traj = ctx.project(p)?;
    let pi = ctx.seek_pi(&p.log_m);
    let disp = CountDispersion::from_logs(p.log_omega_lin, p.log_theta_quad);
    let lik = total_loglik(&traj, bound, &pi, &disp, &p.delta_s, &ctx.settings.recency)?;
    Ok(PostEval {
        log_prior: lp,
        log_posterior: lp + lik.total(),
        loglik: lik,
        clamp_events: traj.clamp_events,
    })
}

/// Log-posterior of a packed parameter vector. Projection failures and other
/// numeric breakdowns evaluate to negative infinity rather than erroring, so
/// optimizers and samplers can traverse bad regions.
pub fn log_posterior_value(x: &[f64], ctx: &ModelCtx, bound: &BoundObs) -> f64 {
    let Ok(p) = ParameterVector::unpack(x, &ctx.dims) else {
        return f64::NEG_INFINITY;
    };
    match eval_posterior(&p, ctx, bound) {
        Ok(e) => {
            let v = e.log_posterior;
            if v.is_nan() {
                f64::NEG_INFINITY
            } else {
                v
            }
        }
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Exact gradient of the log-posterior by forward-mode dual numbers, one
/// coordinate tangent per pass. Coordinates are evaluated in parallel and
/// assembled in index order, so results do not depend on thread count.
pub fn gradient(x: &[f64], ctx: &ModelCtx, bound: &BoundObs) -> Result<Vec<f64>> {
    if !log_posterior_value(x, ctx, bound).is_finite() {
        return Err(Error::NonFinitePosterior);
    }
    (0..x.len())
        .into_par_iter()
        .map(|k| {
            let duals: Vec<Dual> = x
                .iter()
                .enumerate()
                .map(|(i, &v)| Dual::new(v, if i == k { 1.0 } else { 0.0 }))
                .collect();
            let p = ParameterVector::unpack(&duals, &ctx.dims)?;
            let e = eval_posterior(&p, ctx, bound)?;
            let dx = e.log_posterior.dx;
            if dx.is_finite() {
                Ok(dx)
            } else {
                Err(Error::NonFinitePosterior)
            }
        })
        .collect()
}

/// Index ranges of the packed parameter layout.
struct ParamLayout {
    beta_kappa_0: std::ops::Range<usize>,
    beta_kappa: Vec<std::ops::Range<usize>>,
    log_sigma_kappa: usize,
    beta_alpha_0: std::ops::Range<usize>,
    beta_alpha: Vec<std::ops::Range<usize>>,
    log_sigma_alpha_star: usize,
    rho0: usize,
    rho_dev: std::ops::Range<usize>,
    log_sigma_rho: usize,
    alpha0: usize,
    alpha_dev: std::ops::Range<usize>,
    log_sigma_alpha: usize,
    delta: std::ops::Range<usize>,
    log_sigma_delta: usize,
    log_m: std::ops::Range<usize>,
    log_sigma_m: usize,
    log_omega: usize,
    log_theta: usize,
}

fn param_layout(dims: &ParamDims) -> ParamLayout {
    let r = dims.regions;
    let bk = dims.kappa_basis;
    let ba = dims.alpha_basis;
    let mut at = 0usize;
    let mut range = |n: usize| {
        let out = at..at + n;
        at += n;
        out
    };
    let beta_kappa_0 = range(bk);
    let beta_kappa: Vec<_> = (0..r).map(|_| range(bk)).collect();
    let log_sigma_kappa = range(1).start;
    let beta_alpha_0 = range(ba);
    let beta_alpha: Vec<_> = (0..r).map(|_| range(ba)).collect();
    let log_sigma_alpha_star = range(1).start;
    let rho0 = range(1).start;
    let rho_dev = range(r);
    let log_sigma_rho = range(1).start;
    let alpha0 = range(1).start;
    let alpha_dev = range(r);
    let log_sigma_alpha = range(1).start;
    let delta = range(dims.sites);
    let log_sigma_delta = range(1).start;
    let log_m = range(r);
    let log_sigma_m = range(1).start;
    let log_omega = range(1).start;
    let log_theta = range(1).start;
    debug_assert_eq!(at, dims.total());
    ParamLayout {
        beta_kappa_0,
        beta_kappa,
        log_sigma_kappa,
        beta_alpha_0,
        beta_alpha,
        log_sigma_alpha_star,
        rho0,
        rho_dev,
        log_sigma_rho,
        alpha0,
        alpha_dev,
        log_sigma_alpha,
        delta,
        log_sigma_delta,
        log_m,
        log_sigma_m,
        log_omega,
        log_theta,
    }
}

/// Split an index group into chunks of at most `max` coordinates. Small
/// conditional blocks accept bigger effective steps than one wide proposal.
fn chunked(indices: Vec<usize>, max: usize) -> Vec<Vec<usize>> {
    indices.chunks(max).map(<[usize]>::to_vec).collect()
}

const BLOCK_MAX: usize = 8;

/// Parameter blocks for the Metropolis scan: spline blocks per region,
/// mean-coefficient blocks with their scales, the initial-state blocks,
/// clinic effects, treatment seeking and dispersion, all chunked to a
/// manageable proposal dimension.
pub fn param_blocks(dims: &ParamDims) -> Vec<Vec<usize>> {
    let l = param_layout(dims);
    let mut blocks = Vec::new();
    let mut kappa_mean: Vec<usize> = l.beta_kappa_0.clone().collect();
    kappa_mean.push(l.log_sigma_kappa);
    blocks.extend(chunked(kappa_mean, BLOCK_MAX));
    for r in &l.beta_kappa {
        blocks.extend(chunked(r.clone().collect(), BLOCK_MAX));
    }
    let mut alpha_mean: Vec<usize> = l.beta_alpha_0.clone().collect();
    alpha_mean.push(l.log_sigma_alpha_star);
    blocks.extend(chunked(alpha_mean, BLOCK_MAX));
    for r in &l.beta_alpha {
        blocks.extend(chunked(r.clone().collect(), BLOCK_MAX));
    }
    let mut rho_block = vec![l.rho0];
    rho_block.extend(l.rho_dev.clone());
    rho_block.push(l.log_sigma_rho);
    blocks.extend(chunked(rho_block, BLOCK_MAX));
    let mut alpha_block = vec![l.alpha0];
    alpha_block.extend(l.alpha_dev.clone());
    alpha_block.push(l.log_sigma_alpha);
    blocks.extend(chunked(alpha_block, BLOCK_MAX));
    let mut delta_block: Vec<usize> = l.delta.clone().collect();
    delta_block.push(l.log_sigma_delta);
    blocks.extend(chunked(delta_block, BLOCK_MAX));
    let mut seek_block: Vec<usize> = l.log_m.clone().collect();
    seek_block.push(l.log_sigma_m);
    blocks.extend(chunked(seek_block, BLOCK_MAX));
    blocks.push(vec![l.log_omega, l.log_theta]);
    blocks
}

/// The full scan kernel: the blocks above, plus translation moves along the
/// mean-versus-deviation trade-offs (identified only by the prior) and
/// rescale moves along every hierarchical scale funnel.
pub fn param_moves(dims: &ParamDims, prior_mean_log_m: &[f64]) -> Vec<mcmc::MoveSpec> {
    use mcmc::MoveSpec;
    let l = param_layout(dims);
    let mut moves: Vec<MoveSpec> = param_blocks(dims).into_iter().map(MoveSpec::Block).collect();

    // One translation per basis index: single-direction moves tune their
    // acceptance far better than one joint shift of the whole spline.
    for i in 0..dims.kappa_basis {
        moves.push(MoveSpec::Translate {
            mean: vec![l.beta_kappa_0.start + i],
            dev_rows: l.beta_kappa.iter().map(|r| vec![r.start + i]).collect(),
        });
    }
    for i in 0..dims.alpha_basis {
        moves.push(MoveSpec::Translate {
            mean: vec![l.beta_alpha_0.start + i],
            dev_rows: l.beta_alpha.iter().map(|r| vec![r.start + i]).collect(),
        });
    }
    moves.push(MoveSpec::Translate {
        mean: vec![l.rho0],
        dev_rows: l.rho_dev.clone().map(|i| vec![i]).collect(),
    });
    moves.push(MoveSpec::Translate {
        mean: vec![l.alpha0],
        dev_rows: l.alpha_dev.clone().map(|i| vec![i]).collect(),
    });

    let zero_offsets = |r: &std::ops::Range<usize>| vec![0.0; r.len()];
    moves.push(MoveSpec::Rescale {
        log_scale: l.log_sigma_kappa,
        coords: l.beta_kappa.iter().flat_map(|r| r.clone()).collect(),
        offsets: vec![0.0; dims.regions * dims.kappa_basis],
    });
    moves.push(MoveSpec::Rescale {
        log_scale: l.log_sigma_alpha_star,
        coords: l.beta_alpha.iter().flat_map(|r| r.clone()).collect(),
        offsets: vec![0.0; dims.regions * dims.alpha_basis],
    });
    moves.push(MoveSpec::Rescale {
        log_scale: l.log_sigma_rho,
        coords: l.rho_dev.clone().collect(),
        offsets: zero_offsets(&l.rho_dev),
    });
    moves.push(MoveSpec::Rescale {
        log_scale: l.log_sigma_alpha,
        coords: l.alpha_dev.clone().collect(),
        offsets: zero_offsets(&l.alpha_dev),
    });
    if dims.sites > 0 {
        moves.push(MoveSpec::Rescale {
            log_scale: l.log_sigma_delta,
            coords: l.delta.clone().collect(),
            offsets: zero_offsets(&l.delta),
        });
    }
    moves.push(MoveSpec::Rescale {
        log_scale: l.log_sigma_m,
        coords: l.log_m.clone().collect(),
        offsets: prior_mean_log_m.to_vec(),
    });

    // Bridge block across the early-epidemic trade-off: the initial
    // prevalence effects and the first transmission coefficients shape the
    // same early trajectory and correlate across their home blocks.
    let mut bridge = vec![l.rho0];
    bridge.extend(l.rho_dev.clone());
    bridge.extend(l.beta_kappa_0.clone().take(2));
    moves.push(MoveSpec::Block(bridge));

    // Run the whole scan twice per iteration: the retained-draw budget is
    // fixed by the caller, so mixing per iteration is the only free lever.
    let once = moves.clone();
    moves.extend(once);
    moves
}

#[derive(Debug, Clone)]
pub struct MapOptions {
    pub optim: OptimOptions,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            optim: OptimOptions::default(),
        }
    }
}

/// Typical squared scales per coordinate (prior variances), used to
/// precondition the optimizer.
pub fn prior_scales(dims: &ParamDims) -> Vec<f64> {
    let l = param_layout(dims);
    let mut d = vec![1.0; dims.total()];
    for i in l.beta_kappa_0.clone().chain(l.beta_alpha_0.clone()) {
        d[i] = 25.0;
    }
    d[l.rho0] = 25.0;
    d[l.alpha0] = 25.0;
    for i in [
        l.log_sigma_kappa,
        l.log_sigma_alpha_star,
        l.log_sigma_rho,
        l.log_sigma_alpha,
        l.log_sigma_delta,
        l.log_sigma_m,
    ] {
        d[i] = 0.5;
    }
    d[l.log_omega] = 4.0;
    d[l.log_theta] = 4.0;
    d
}

/// Optimizer box. A centered hierarchical posterior always carries an
/// infinite density spike at (scale -> 0, deviations -> 0), so the
/// unconstrained "mode" is degenerate; bounding the log-scales from below
/// keeps the ascent at a useful projected stationary point where deviations
/// remain mobile. The bound value keeps the implied deviation prior wide
/// enough that data can still pull deviations away from zero. Everything
/// else gets a wide box that never binds in practice.
pub fn map_bounds(dims: &ParamDims) -> Vec<(f64, f64)> {
    let l = param_layout(dims);
    let mut b = vec![(-30.0, 30.0); dims.total()];
    for i in [
        l.log_sigma_kappa,
        l.log_sigma_alpha_star,
        l.log_sigma_rho,
        l.log_sigma_alpha,
        l.log_sigma_delta,
        l.log_sigma_m,
    ] {
        b[i] = (-2.5, 4.0);
    }
    b
}

/// MAP fit result: the mode, its Laplace covariance, and diagnostics.
#[derive(Debug, Clone)]
pub struct MapFit {
    pub mode: ParameterVector<f64>,
    pub mode_flat: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub hessian_pd: bool,
    pub diagnostics: FitDiagnostics,
}

/// Quasi-Newton ascent to the posterior mode with a Laplace covariance.
///
/// Two stages: a preconditioned BFGS pass covers the long approach from the
/// starting point, then exact-Hessian Newton polishing finishes the surface
/// (its curvature spans several orders of magnitude, which starves
/// pair-based approximations near the mode). The final Newton Hessian is
/// reused for the Laplace covariance.
pub fn map_fit(
    init: &ParameterVector<f64>,
    ctx: &ModelCtx,
    bound: &BoundObs,
    opts: &MapOptions,
    seed: u64,
) -> Result<MapFit> {
    let x0 = init.pack();
    let f = |x: &[f64]| log_posterior_value(x, ctx, bound);
    let g = |x: &[f64]| gradient(x, ctx, bound);
    let mut optim_opts = opts.optim.clone();
    if optim_opts.preconditioner.is_none() {
        optim_opts.preconditioner = Some(prior_scales(&ctx.dims));
    }
    if optim_opts.bounds.is_none() {
        optim_opts.bounds = Some(map_bounds(&ctx.dims));
    }
    let (stage1, mut diagnostics) = optim::maximize(&f, &g, &x0, &optim_opts, seed)?;
    let (mode_flat, hessian, newton_converged, newton_iters) = optim::newton_polish(
        &f,
        &g,
        &stage1,
        optim_opts.bounds.as_deref(),
        optim_opts.grad_tol,
        25,
    )?;
    diagnostics.converged = newton_converged;
    diagnostics.iterations += newton_iters;
    diagnostics.value = f(&mode_flat);
    let bounds = optim_opts.bounds.as_deref().unwrap();
    let final_grad = gradient(&mode_flat, ctx, bound)?;
    diagnostics.grad_max_norm = final_grad
        .iter()
        .zip(&mode_flat)
        .zip(bounds)
        .map(|((&gi, &xi), &(lo, hi))| {
            if (xi <= lo && gi < 0.0) || (xi >= hi && gi > 0.0) {
                0.0
            } else {
                gi.abs()
            }
        })
        .fold(0.0f64, f64::max);

    // Laplace on the free subspace. Coordinates pinned at a bound sit on a
    // funnel with wrong-sign curvature; folding them into the inversion
    // poisons every other direction through the pseudo-inverse fallback.
    // They get a modest fixed proposal variance instead.
    let n = mode_flat.len();
    let pinned: Vec<bool> = mode_flat
        .iter()
        .zip(bounds)
        .map(|(&x, &(lo, hi))| x - lo < 1e-9 || hi - x < 1e-9)
        .collect();
    let free: Vec<usize> = (0..n).filter(|&k| !pinned[k]).collect();
    let hf = nalgebra::DMatrix::from_fn(free.len(), free.len(), |i, j| {
        hessian[(free[i], free[j])]
    });
    let lap = optim::laplace_from_hessian(&hf, false);
    let mut covariance = DMatrix::zeros(n, n);
    for (i, &gi) in free.iter().enumerate() {
        for (j, &gj) in free.iter().enumerate() {
            covariance[(gi, gj)] = lap.covariance[(i, j)];
        }
    }
    for k in 0..n {
        if pinned[k] {
            covariance[(k, k)] = 0.25;
        }
    }
    Ok(MapFit {
        mode: ParameterVector::unpack(&mode_flat, &ctx.dims)?,
        mode_flat,
        covariance,
        hessian_pd: lap.hessian_pd,
        diagnostics,
    })
}

/// Draw posterior samples with blocked adaptive Metropolis chains started at
/// `start` with the given proposal covariance (typically the Laplace
/// covariance from [`map_fit`]).
pub fn sample_posterior(
    start: &[f64],
    covariance: &DMatrix<f64>,
    ctx: &ModelCtx,
    bound: &BoundObs,
    opts: &McmcOptions,
) -> Result<ChainSet> {
    let target = |x: &[f64]| log_posterior_value(x, ctx, bound);
    let moves = param_moves(&ctx.dims, &ctx.prior_mean_log_m);
    mcmc::run_chains(&target, start, covariance, &moves, opts)
}
