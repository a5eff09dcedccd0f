//! Adaptive random-walk Metropolis over parameter blocks, with extra scan
//! moves for hierarchical geometry.
//!
//! One iteration is a full scan over a fixed list of moves:
//!
//! - [`MoveSpec::Block`]: a Gaussian proposal with covariance `2.38^2 / d_b`
//!   times the block's covariance conditional on the rest of the vector (the
//!   inverse of the corresponding precision sub-block). Conditional rather
//!   than marginal scaling keeps proposals inside the posterior's
//!   cross-block correlation structure.
//! - [`MoveSpec::Translate`]: a symmetric shift along the mean-versus-
//!   deviation trade-off of a hierarchical group (mean coefficients up,
//!   every region's deviation down). Those directions are identified only
//!   by the prior, so blockwise scans alone cross them extremely slowly.
//! - [`MoveSpec::Rescale`]: a joint move of a log-scale parameter and its
//!   deviation group, `ls += eps` with deviations multiplied by `exp(eps)`,
//!   accepted with the `exp(K * eps)` volume correction. This walks along
//!   hierarchical funnels instead of across them.
//!
//! Per-move step scales follow a Robbins-Monro drift toward their target
//! acceptance rates during warmup. Block conditionals are re-derived from
//! the empirical covariance of the warmup history (blended with the initial
//! covariance for stability). Everything is frozen when warmup ends, so
//! retained draws come from a fixed Markov kernel.
//!
//! Chains are independent and each owns a counter-based RNG stream derived
//! from `(seed, chain index)`, which makes runs reproducible bit for bit
//! regardless of how many worker threads execute them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct McmcOptions {
    pub chains: usize,
    /// Total iterations per chain, including warmup.
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for McmcOptions {
    fn default() -> Self {
        McmcOptions {
            chains: 4,
            iters: 2000,
            warmup: 1000,
            seed: 0,
        }
    }
}

/// One move of the scan kernel.
#[derive(Debug, Clone)]
pub enum MoveSpec {
    /// Joint Gaussian update of the listed coordinates.
    Block(Vec<usize>),
    /// `mean[i] += eps[i]`, `row[i] -= eps[i]` for every deviation row:
    /// leaves every `mean + deviation` sum unchanged.
    Translate {
        mean: Vec<usize>,
        dev_rows: Vec<Vec<usize>>,
    },
    /// `coords[k] = offset[k] + (coords[k] - offset[k]) * exp(eps)` together
    /// with `log_scale += eps`.
    Rescale {
        log_scale: usize,
        coords: Vec<usize>,
        offsets: Vec<f64>,
    },
}

/// Post-warmup draws and acceptance diagnostics.
#[derive(Debug, Clone)]
pub struct ChainSet {
    /// Retained draws by [chain][iteration][parameter].
    pub draws: Vec<Vec<Vec<f64>>>,
    /// Pooled post-warmup acceptance rate over all proposals.
    pub acceptance: f64,
    pub per_chain_acceptance: Vec<f64>,
    /// Pooled post-warmup acceptance rate per move of the scan.
    pub move_acceptance: Vec<f64>,
}

impl ChainSet {
    pub fn n_chains(&self) -> usize {
        self.draws.len()
    }

    pub fn retained_per_chain(&self) -> usize {
        self.draws.first().map_or(0, Vec::len)
    }

    /// Series of one scalar per chain.
    pub fn scalar_series(&self, k: usize) -> Vec<Vec<f64>> {
        self.draws
            .iter()
            .map(|chain| chain.iter().map(|draw| draw[k]).collect())
            .collect()
    }
}

fn chain_seed(seed: u64, chain: u64) -> [u8; 32] {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&chain.to_le_bytes());
    bytes[16..24].copy_from_slice(b"epifusem");
    bytes
}

enum MoveKind {
    Block {
        indices: Vec<usize>,
        /// Square root (Cholesky factor) of the conditional covariance.
        root: DMatrix<f64>,
    },
    Translate {
        mean: Vec<usize>,
        dev_rows: Vec<Vec<usize>>,
    },
    Rescale {
        log_scale: usize,
        coords: Vec<usize>,
        offsets: Vec<f64>,
    },
}

struct MoveState {
    kind: MoveKind,
    log_step: f64,
    target_accept: f64,
    accepts: u64,
    proposals: u64,
}

fn extract_block(m: &DMatrix<f64>, indices: &[usize]) -> DMatrix<f64> {
    let d = indices.len();
    DMatrix::from_fn(d, d, |i, j| m[(indices[i], indices[j])])
}

fn cholesky_with_ridge(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let d = m.nrows();
    let scale = (0..d).map(|i| m[(i, i)].abs()).fold(0.0f64, f64::max).max(1e-12);
    let mut ridge = 0.0;
    for attempt in 0..20 {
        let mut trym = m.clone();
        for i in 0..d {
            trym[(i, i)] += ridge;
        }
        if let Some(ch) = nalgebra::Cholesky::new(trym) {
            return Some(ch);
        }
        ridge = if attempt == 0 { 1e-10 * scale } else { ridge * 10.0 };
    }
    None
}

/// Precision matrix of the proposal covariance, eigenvalue-floored when the
/// covariance is not positive definite.
fn precision_of(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = cholesky_with_ridge(cov) {
        return ch.inverse();
    }
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let max_ev = eig.eigenvalues.iter().fold(1e-300f64, |a, b| a.max(b.abs()));
    let floor = 1e-10 * max_ev;
    let n = cov.nrows();
    let mut prec = DMatrix::zeros(n, n);
    for k in 0..n {
        let ev = eig.eigenvalues[k].max(floor);
        let v = eig.eigenvectors.column(k);
        prec += DMatrix::from_fn(n, n, |i, j| v[i] * v[j] / ev);
    }
    prec
}

/// Square root of the block covariance conditional on all other coordinates:
/// the inverse of the precision sub-block, factored for sampling.
fn conditional_root(precision: &DMatrix<f64>, indices: &[usize]) -> DMatrix<f64> {
    let sub = extract_block(precision, indices);
    let d = indices.len();
    if let Some(ch) = cholesky_with_ridge(&sub) {
        if let Some(cond_ch) = cholesky_with_ridge(&ch.inverse()) {
            return cond_ch.l();
        }
    }
    // Degenerate block: fall back to independent unit-scale moves.
    DMatrix::from_diagonal(&DVector::from_element(d, 1.0))
}

/// Running mean and covariance over the warmup history.
struct RunningCov {
    count: f64,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl RunningCov {
    fn new(d: usize) -> Self {
        RunningCov {
            count: 0.0,
            mean: DVector::zeros(d),
            m2: DMatrix::zeros(d, d),
        }
    }

    fn update(&mut self, x: &[f64]) {
        self.count += 1.0;
        let xv = DVector::from_column_slice(x);
        let delta = &xv - &self.mean;
        self.mean += &delta / self.count;
        let delta2 = &xv - &self.mean;
        self.m2 += delta * delta2.transpose();
    }

    fn covariance(&self) -> Option<DMatrix<f64>> {
        if self.count < 2.0 {
            return None;
        }
        Some(&self.m2 / (self.count - 1.0))
    }
}

fn init_moves(moves: &[MoveSpec], precision: &DMatrix<f64>) -> Vec<MoveState> {
    moves
        .iter()
        .map(|spec| match spec {
            MoveSpec::Block(indices) => MoveState {
                log_step: (2.38 / (indices.len() as f64).sqrt()).ln(),
                target_accept: if indices.len() == 1 { 0.44 } else { 0.234 },
                kind: MoveKind::Block {
                    root: conditional_root(precision, indices),
                    indices: indices.clone(),
                },
                accepts: 0,
                proposals: 0,
            },
            MoveSpec::Translate { mean, dev_rows } => MoveState {
                log_step: 0.1f64.ln(),
                target_accept: 0.234,
                kind: MoveKind::Translate {
                    mean: mean.clone(),
                    dev_rows: dev_rows.clone(),
                },
                accepts: 0,
                proposals: 0,
            },
            MoveSpec::Rescale {
                log_scale,
                coords,
                offsets,
            } => MoveState {
                log_step: 0.2f64.ln(),
                target_accept: 0.44,
                kind: MoveKind::Rescale {
                    log_scale: *log_scale,
                    coords: coords.clone(),
                    offsets: offsets.clone(),
                },
                accepts: 0,
                proposals: 0,
            },
        })
        .collect()
}

fn run_single_chain<F>(
    target: &F,
    start: &[f64],
    cov: &DMatrix<f64>,
    moves: &[MoveSpec],
    opts: &McmcOptions,
    chain: usize,
) -> Result<(Vec<Vec<f64>>, f64, Vec<f64>)>
where
    F: Fn(&[f64]) -> f64,
{
    let d = start.len();
    let mut rng = ChaCha8Rng::from_seed(chain_seed(opts.seed, chain as u64));
    let mut x = start.to_vec();
    let mut lp = target(&x);
    if !lp.is_finite() {
        return Err(Error::NonFinitePosterior);
    }

    let precision = precision_of(cov);
    let mut states = init_moves(moves, &precision);

    let mut running = RunningCov::new(d);
    let retained = opts.iters - opts.warmup;
    let mut draws = Vec::with_capacity(retained);

    for it in 0..opts.iters {
        let warm = it < opts.warmup;
        for m in &mut states {
            let scale = m.log_step.exp();
            // log of the proposal's volume correction (rescale moves only).
            let mut log_jacobian = 0.0;
            let mut prop = x.clone();
            match &m.kind {
                MoveKind::Block { indices, root } => {
                    let z: Vec<f64> =
                        (0..indices.len()).map(|_| rng.sample(StandardNormal)).collect();
                    let step = root * DVector::from_column_slice(&z);
                    for (k, &gi) in indices.iter().enumerate() {
                        prop[gi] += scale * step[k];
                    }
                }
                MoveKind::Translate { mean, dev_rows } => {
                    for &gi in mean {
                        let eps: f64 = rng.sample(StandardNormal);
                        prop[gi] += scale * eps;
                    }
                    for row in dev_rows {
                        for (k, &gi) in row.iter().enumerate() {
                            prop[gi] -= prop[mean[k]] - x[mean[k]];
                        }
                    }
                }
                MoveKind::Rescale {
                    log_scale,
                    coords,
                    offsets,
                } => {
                    let eps: f64 = scale * rng.sample::<f64, _>(StandardNormal);
                    prop[*log_scale] += eps;
                    let factor = eps.exp();
                    for (&gi, &off) in coords.iter().zip(offsets) {
                        prop[gi] = off + (x[gi] - off) * factor;
                    }
                    log_jacobian = coords.len() as f64 * eps;
                }
            }
            let u: f64 = rng.random();
            let lp_prop = target(&prop);
            let log_ratio = lp_prop - lp + log_jacobian;
            let accept = lp_prop.is_finite() && u.ln() < log_ratio;
            if accept {
                x = prop;
                lp = lp_prop;
            }
            if warm {
                // Robbins-Monro drift of the per-move step scale.
                let alpha = if lp_prop.is_finite() {
                    log_ratio.min(0.0).exp().min(1.0)
                } else {
                    0.0
                };
                let gamma = 1.0 / ((it + 10) as f64).powf(0.7);
                m.log_step += gamma * (alpha - m.target_accept);
            } else {
                m.proposals += 1;
                if accept {
                    m.accepts += 1;
                }
            }
        }

        if warm {
            running.update(&x);
            let refresh = it >= 200 && (it + 1) % 50 == 0;
            if refresh {
                if let Some(emp) = running.covariance() {
                    // Blend with the initial covariance: empirical estimates
                    // from a short, correlated history are rank deficient.
                    let blend = emp * 0.5 + cov * 0.5;
                    let prec = precision_of(&blend);
                    for m in &mut states {
                        if let MoveKind::Block { indices, root } = &mut m.kind {
                            *root = conditional_root(&prec, indices);
                        }
                    }
                }
            }
        } else {
            draws.push(x.clone());
        }
    }

    let proposals: u64 = states.iter().map(|b| b.proposals).sum();
    let accepts: u64 = states.iter().map(|b| b.accepts).sum();
    let rate = if proposals > 0 {
        accepts as f64 / proposals as f64
    } else {
        0.0
    };
    let per_move: Vec<f64> = states
        .iter()
        .map(|b| {
            if b.proposals > 0 {
                b.accepts as f64 / b.proposals as f64
            } else {
                0.0
            }
        })
        .collect();
    Ok((draws, rate, per_move))
}

/// Run independent adaptive Metropolis chains against `target`.
pub fn run_chains<F>(
    target: &F,
    start: &[f64],
    proposal_cov: &DMatrix<f64>,
    moves: &[MoveSpec],
    opts: &McmcOptions,
) -> Result<ChainSet>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    assert!(opts.chains >= 1, "at least one chain");
    assert!(opts.warmup < opts.iters, "warmup must be below iters");
    assert!(!moves.is_empty(), "at least one move");

    // Wild directions in the supplied covariance (near-singular Hessian
    // directions invert to enormous variances) would defeat the scalar step
    // adaptation; clamp the spectrum to the prior scale.
    let cov = clamp_spectrum(proposal_cov, 1e-6, 25.0);

    let results: Vec<Result<(Vec<Vec<f64>>, f64, Vec<f64>)>> = (0..opts.chains)
        .into_par_iter()
        .map(|c| run_single_chain(target, start, &cov, moves, opts, c))
        .collect();

    let mut draws = Vec::with_capacity(opts.chains);
    let mut rates = Vec::with_capacity(opts.chains);
    let mut move_rates = vec![0.0; moves.len()];
    for r in results {
        let (d, rate, per_move) = r?;
        draws.push(d);
        rates.push(rate);
        for (acc, m) in move_rates.iter_mut().zip(per_move) {
            *acc += m / opts.chains as f64;
        }
    }
    let acceptance = rates.iter().sum::<f64>() / rates.len() as f64;
    Ok(ChainSet {
        draws,
        acceptance,
        per_chain_acceptance: rates,
        move_acceptance: move_rates,
    })
}

/// Symmetric eigenvalue clamp of a covariance matrix.
fn clamp_spectrum(cov: &DMatrix<f64>, min_ev: f64, max_ev: f64) -> DMatrix<f64> {
    let n = cov.nrows();
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let ev = eig.eigenvalues[k].clamp(min_ev, max_ev);
        let v = eig.eigenvectors.column(k);
        out += DMatrix::from_fn(n, n, |i, j| v[i] * v[j] * ev);
    }
    out
}
