//! Forward projection of the spatial compartmental HIV model.
//!
//! Compartments per region: susceptible `S`, untreated PLHIV `I_c` by current
//! CD4 stage, and on-ART PLHIV `A_c` by CD4 stage at treatment initiation.
//!
//! Stage convention used throughout the crate:
//!
//! | index | CD4 interval | notes                                   |
//! |-------|--------------|-----------------------------------------|
//! | 0     | [0, 200)     | most advanced disease, highest mortality |
//! | 1     | [200, 350)   |                                          |
//! | 2     | [350, 500)   |                                          |
//! | 3     | [500, inf)   | entry stage for new infections           |
//!
//! Untreated disease progression moves people one step down the CD4 axis
//! (stage `c` receives inflow from stage `c + 1` at rate `tau[c + 1]`), and
//! `tau[0]` must be zero because there is no stage below index 0. Treated
//! compartments keep their stage at initiation.
//!
//! Integration is explicit forward Euler with step `h` in years. Per-region
//! mass balance holds exactly at every step:
//! `N' - N = h * (E - mu_s * N - sum_c mu_i[c] * I_c - sum_c mu_a[c] * A_c)`.

use crate::error::{Error, Result};
use crate::graph::{NeighborhoodWeights, RegionGraph};
use crate::scalar::{inv_logit, Scalar};
use crate::spline::BasisMatrix;

pub const STAGES: usize = 4;

/// Where new infections are placed on the stage axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfectionEntry {
    /// All new infections enter the highest-CD4 stage (index 3).
    HighestStage,
    /// Stage-specific forces place infections directly into their own stage.
    PerStageLiteral,
}

/// Fixed natural-history rate tables. All rates are per person-year.
///
/// The shipped defaults in [`NaturalHistory::placeholder`] are placeholder
/// values for desk-scale runs, not calibrated estimates; production runs
/// should supply externally sourced tables through configuration.
#[derive(Debug, Clone)]
pub struct NaturalHistory {
    /// Non-HIV mortality.
    pub mu_s: f64,
    /// Untreated HIV mortality by current stage.
    pub mu_i: [f64; STAGES],
    /// On-ART mortality by stage at initiation.
    pub mu_a: [f64; STAGES],
    /// ART dropout rate.
    pub eta: f64,
    /// Progression rate out of stage `c` into stage `c - 1`; `tau[0] = 0`.
    pub tau: [f64; STAGES],
    /// Relative infectiousness of stage `c`.
    pub xi: [f64; STAGES],
    /// Relative ART initiation propensity of stage `c`.
    pub zeta: [f64; STAGES],
    /// Stage eligibility for ART initiation.
    pub eligible: [bool; STAGES],
    /// Proportional reduction in infectiousness on ART, in [0, 1].
    pub omega_art: f64,
    /// Initial-state stage shares of untreated PLHIV; sums to 1.
    pub b_rho: [f64; STAGES],
    /// Initial-state stage shares of treated PLHIV; sums to 1.
    pub b_alpha: [f64; STAGES],
    pub infection_entry: InfectionEntry,
}

impl NaturalHistory {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidNaturalHistory(name.to_string()))
            }
        };
        check("mu_s must be nonnegative", self.mu_s >= 0.0)?;
        check("eta must be nonnegative", self.eta >= 0.0)?;
        check(
            "mu_i entries must be nonnegative",
            self.mu_i.iter().all(|v| *v >= 0.0),
        )?;
        check(
            "mu_a entries must be nonnegative",
            self.mu_a.iter().all(|v| *v >= 0.0),
        )?;
        check(
            "tau entries must be nonnegative",
            self.tau.iter().all(|v| *v >= 0.0),
        )?;
        check("tau[0] must be zero (no stage below index 0)", self.tau[0] == 0.0)?;
        check(
            "xi entries must be positive",
            self.xi.iter().all(|v| *v > 0.0),
        )?;
        check(
            "zeta entries must be nonnegative",
            self.zeta.iter().all(|v| *v >= 0.0),
        )?;
        check(
            "omega_art must lie in [0, 1]",
            (0.0..=1.0).contains(&self.omega_art),
        )?;
        let sum_rho: f64 = self.b_rho.iter().sum();
        let sum_alpha: f64 = self.b_alpha.iter().sum();
        check("b_rho must sum to 1", (sum_rho - 1.0).abs() < 1e-9)?;
        check("b_alpha must sum to 1", (sum_alpha - 1.0).abs() < 1e-9)?;
        check(
            "b_rho entries must be nonnegative",
            self.b_rho.iter().all(|v| *v >= 0.0),
        )?;
        check(
            "b_alpha entries must be nonnegative",
            self.b_alpha.iter().all(|v| *v >= 0.0),
        )?;
        Ok(())
    }

    /// Placeholder rate tables for synthetic runs. The untreated mortality
    /// column drives the default `zeta = mu_i[c] / mu_i[0]` initiation
    /// propensities (sickest stages initiate fastest).
    pub fn placeholder() -> Self {
        let mu_i = [0.6, 0.2, 0.1, 0.05];
        let zeta = [
            1.0,
            mu_i[1] / mu_i[0],
            mu_i[2] / mu_i[0],
            mu_i[3] / mu_i[0],
        ];
        NaturalHistory {
            mu_s: 0.012,
            mu_i,
            mu_a: [0.08, 0.04, 0.02, 0.015],
            eta: 0.05,
            tau: [0.0, 0.35, 0.25, 0.17],
            xi: [2.0, 1.3, 1.0, 1.0],
            zeta,
            eligible: [true; STAGES],
            omega_art: 0.9,
            b_rho: [0.15, 0.20, 0.25, 0.40],
            b_alpha: [0.25; STAGES],
            infection_entry: InfectionEntry::HighestStage,
        }
    }
}

/// Per-region compartment occupancies.
#[derive(Debug, Clone)]
pub struct EpidemicState<S> {
    pub s: Vec<S>,
    pub i: Vec<[S; STAGES]>,
    pub a: Vec<[S; STAGES]>,
}

impl<S: Scalar> EpidemicState<S> {
    pub fn n_regions(&self) -> usize {
        self.s.len()
    }

    /// Total population of region `r`.
    pub fn total(&self, r: usize) -> S {
        let mut n = self.s[r];
        for c in 0..STAGES {
            n += self.i[r][c];
            n += self.a[r][c];
        }
        n
    }

    pub fn plhiv(&self, r: usize) -> S {
        let mut p = S::zero();
        for c in 0..STAGES {
            p += self.i[r][c];
            p += self.a[r][c];
        }
        p
    }

    pub fn on_art(&self, r: usize) -> S {
        let mut p = S::zero();
        for c in 0..STAGES {
            p += self.a[r][c];
        }
        p
    }

    pub fn is_finite(&self) -> bool {
        self.s.iter().all(|v| v.value().is_finite())
            && self.i.iter().flatten().all(|v| v.value().is_finite())
            && self.a.iter().flatten().all(|v| v.value().is_finite())
    }
}

/// Derived per-region time series from one projection.
#[derive(Debug, Clone)]
pub struct Trajectories<S> {
    pub grid: Vec<f64>,
    /// HIV prevalence (I + A) / N, by [region][time].
    pub rho: Vec<Vec<S>>,
    /// ART coverage among PLHIV, by [region][time].
    pub alpha: Vec<Vec<S>>,
    /// Incidence rate per susceptible person-year, by [region][time].
    pub lambda: Vec<Vec<S>>,
    /// Residents on ART, by [region][time].
    pub art: Vec<Vec<S>>,
    /// Total population, by [region][time].
    pub n: Vec<Vec<S>>,
    /// Transmission rate by [region][time][stage].
    pub kappa: Vec<Vec<[S; STAGES]>>,
    /// ART initiation rate by [region][time][stage].
    pub alpha_star: Vec<Vec<[S; STAGES]>>,
    /// Number of compartment updates clamped at zero.
    pub clamp_events: u64,
    /// Total mass removed by clamping, persons.
    pub clamp_shortfall: f64,
}

impl<S: Scalar> Trajectories<S> {
    pub fn n_regions(&self) -> usize {
        self.rho.len()
    }
}

/// Solve the initial compartment state from logit-scale prevalence and ART
/// coverage effects. When `art_era` is false the initial coverage is pinned
/// at zero and the alpha effects are ignored.
pub fn initial_state<S: Scalar>(
    rho0: S,
    rho_dev: &[S],
    alpha0: S,
    alpha_dev: &[S],
    nh: &NaturalHistory,
    graph: &RegionGraph,
    art_era: bool,
) -> EpidemicState<S> {
    let n = graph.len();
    let mut s = Vec::with_capacity(n);
    let mut i = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    for r in 0..n {
        let pop = S::from_f64(graph.population(r));
        let rho = inv_logit(rho0 + rho_dev[r]);
        let alpha = if art_era {
            inv_logit(alpha0 + alpha_dev[r])
        } else {
            S::zero()
        };
        let mut ir = [S::zero(); STAGES];
        let mut ar = [S::zero(); STAGES];
        let mut plhiv = S::zero();
        for c in 0..STAGES {
            ir[c] = S::from_f64(nh.b_rho[c]) * (S::one() - alpha) * rho * pop;
            ar[c] = S::from_f64(nh.b_alpha[c]) * alpha * rho * pop;
            plhiv += ir[c];
            plhiv += ar[c];
        }
        s.push(pop - plhiv);
        i.push(ir);
        a.push(ar);
    }
    EpidemicState { s, i, a }
}

/// Region/stage/time transmission rates
/// `kappa[r][t][c] = xi[c] * exp(sum_i (beta0[i] + beta_r[r][i]) * phi_i(t))`.
pub fn transmission_rate<S: Scalar>(
    beta0: &[S],
    beta_r: &[Vec<S>],
    basis: &BasisMatrix,
    xi: &[f64; STAGES],
) -> Result<Vec<Vec<[S; STAGES]>>> {
    check_len("transmission mean coefficients", beta0.len(), basis.n_basis())?;
    for row in beta_r {
        check_len("transmission region coefficients", row.len(), basis.n_basis())?;
    }
    let log_xi: [f64; STAGES] = std::array::from_fn(|c| xi[c].ln());
    let mut out = Vec::with_capacity(beta_r.len());
    for dev in beta_r {
        let mut series = Vec::with_capacity(basis.n_points());
        for ti in 0..basis.n_points() {
            let phi = basis.row(ti);
            let mut u = S::zero();
            for (i, &p) in phi.iter().enumerate() {
                if p != 0.0 {
                    u += (beta0[i] + dev[i]) * S::from_f64(p);
                }
            }
            series.push(std::array::from_fn(|c| (u + S::from_f64(log_xi[c])).exp()));
        }
        out.push(series);
    }
    Ok(out)
}

/// Region/stage/time ART initiation rates. Ineligible stages and grid points
/// before the basis masking year get rate zero.
pub fn art_initiation_rate<S: Scalar>(
    beta0: &[S],
    beta_r: &[Vec<S>],
    basis: &BasisMatrix,
    zeta: &[f64; STAGES],
    eligible: &[bool; STAGES],
) -> Result<Vec<Vec<[S; STAGES]>>> {
    check_len("initiation mean coefficients", beta0.len(), basis.n_basis())?;
    for row in beta_r {
        check_len("initiation region coefficients", row.len(), basis.n_basis())?;
    }
    let mut out = Vec::with_capacity(beta_r.len());
    for dev in beta_r {
        let mut series = Vec::with_capacity(basis.n_points());
        for ti in 0..basis.n_points() {
            if !basis.is_active(ti) {
                series.push([S::zero(); STAGES]);
                continue;
            }
            let phi = basis.row(ti);
            let mut u = S::zero();
            for (i, &p) in phi.iter().enumerate() {
                if p != 0.0 {
                    u += (beta0[i] + dev[i]) * S::from_f64(p);
                }
            }
            let e = u.exp();
            series.push(std::array::from_fn(|c| {
                if eligible[c] {
                    S::from_f64(zeta[c]) * e
                } else {
                    S::zero()
                }
            }));
        }
        out.push(series);
    }
    Ok(out)
}

/// Stage-specific force of infection:
/// `lambda[r][c] = kappa[r][c] * sum_j w(r,j) * rho[j][c] * (1 - omega * alpha[j][c])`
/// where the sum runs over region `r` and its direct neighbors.
pub fn stage_force<S: Scalar>(
    state: &EpidemicState<S>,
    kappa_t: &[[S; STAGES]],
    weights: &NeighborhoodWeights,
    omega_art: f64,
) -> Vec<[S; STAGES]> {
    let n = state.n_regions();
    let omega = S::from_f64(omega_art);
    // ART-adjusted stage prevalence per region, shared across rows.
    let mut adjusted = vec![[S::zero(); STAGES]; n];
    for j in 0..n {
        let total = state.total(j);
        for c in 0..STAGES {
            let infected = state.i[j][c] + state.a[j][c];
            if infected.value() <= 0.0 || total.value() <= 0.0 {
                continue;
            }
            let rho_jc = infected / total;
            let alpha_jc = state.a[j][c] / infected;
            adjusted[j][c] = rho_jc * (S::one() - omega * alpha_jc);
        }
    }
    let mut out = vec![[S::zero(); STAGES]; n];
    for r in 0..n {
        let mut acc = [S::zero(); STAGES];
        for &(j, w) in weights.row(r) {
            if w == 0.0 {
                continue;
            }
            let wv = S::from_f64(w);
            for c in 0..STAGES {
                acc[c] += wv * adjusted[j][c];
            }
        }
        for c in 0..STAGES {
            out[r][c] = kappa_t[r][c] * acc[c];
        }
    }
    out
}

/// Total incidence per region together with the implied per-step infection
/// probability `1 - exp(-h * lambda)`.
#[derive(Debug, Clone)]
pub struct IncidenceStep<S> {
    pub lambda: Vec<S>,
    pub p_inf: Vec<S>,
}

pub fn total_incidence<S: Scalar>(lambda_stage: &[[S; STAGES]], h: f64) -> IncidenceStep<S> {
    let mut lambda = Vec::with_capacity(lambda_stage.len());
    let mut p_inf = Vec::with_capacity(lambda_stage.len());
    for stages in lambda_stage {
        let mut total = S::zero();
        for c in 0..STAGES {
            total += stages[c];
        }
        lambda.push(total);
        p_inf.push(S::one() - (-(total * S::from_f64(h))).exp());
    }
    IncidenceStep { lambda, p_inf }
}

/// Diagnostics from one Euler step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepDiag {
    pub clamp_events: u64,
    pub clamp_shortfall: f64,
}

/// One forward Euler step. Negative compartment results are clamped at zero
/// and the removed mass is reported in the diagnostics.
pub fn euler_step<S: Scalar>(
    state: &EpidemicState<S>,
    lambda: &[S],
    lambda_stage: &[[S; STAGES]],
    alpha_star_t: &[[S; STAGES]],
    nh: &NaturalHistory,
    entrants: &[f64],
    h: f64,
) -> (EpidemicState<S>, StepDiag) {
    let n = state.n_regions();
    let hs = S::from_f64(h);
    let mu_s = S::from_f64(nh.mu_s);
    let eta = S::from_f64(nh.eta);
    let mut diag = StepDiag::default();
    let mut clamp = |v: S| -> S {
        if v.value() < 0.0 {
            diag.clamp_events += 1;
            diag.clamp_shortfall += -v.value();
            S::zero()
        } else {
            v
        }
    };

    let mut next_s = Vec::with_capacity(n);
    let mut next_i = Vec::with_capacity(n);
    let mut next_a = Vec::with_capacity(n);
    for r in 0..n {
        let s = state.s[r];
        let new_infections = lambda[r] * s;
        let ds = -new_infections - mu_s * s + S::from_f64(entrants[r]);
        let mut ir = [S::zero(); STAGES];
        let mut ar = [S::zero(); STAGES];
        for c in 0..STAGES {
            let i_c = state.i[r][c];
            let a_c = state.a[r][c];
            let newinf = match nh.infection_entry {
                InfectionEntry::HighestStage => {
                    if c == STAGES - 1 {
                        new_infections
                    } else {
                        S::zero()
                    }
                }
                InfectionEntry::PerStageLiteral => lambda_stage[r][c] * s,
            };
            // Progression inflow arrives from the next-higher CD4 stage.
            let inflow = if c + 1 < STAGES {
                S::from_f64(nh.tau[c + 1]) * state.i[r][c + 1]
            } else {
                S::zero()
            };
            let di = -(mu_s + S::from_f64(nh.mu_i[c] + nh.tau[c]) + alpha_star_t[r][c]) * i_c
                + inflow
                + eta * a_c
                + newinf;
            let da = -(mu_s + S::from_f64(nh.mu_a[c]) + eta) * a_c + alpha_star_t[r][c] * i_c;
            ir[c] = clamp(i_c + hs * di);
            ar[c] = clamp(a_c + hs * da);
        }
        next_s.push(clamp(s + hs * ds));
        next_i.push(ir);
        next_a.push(ar);
    }
    (
        EpidemicState {
            s: next_s,
            i: next_i,
            a: next_a,
        },
        diag,
    )
}

/// Epidemic-relevant parameter views, on unconstrained scales.
#[derive(Debug, Clone, Copy)]
pub struct EpidemicParams<'a, S> {
    pub beta_kappa_0: &'a [S],
    pub beta_kappa: &'a [Vec<S>],
    pub beta_alpha_0: &'a [S],
    pub beta_alpha: &'a [Vec<S>],
    pub rho0: S,
    pub rho_dev: &'a [S],
    pub alpha0: S,
    pub alpha_dev: &'a [S],
}

/// Project the epidemic over `grid` and derive all indicator series.
///
/// Deterministic: identical inputs give bit-identical outputs. A non-finite
/// state aborts with the offending grid index.
pub fn project<S: Scalar>(
    params: &EpidemicParams<'_, S>,
    nh: &NaturalHistory,
    graph: &RegionGraph,
    weights: &NeighborhoodWeights,
    grid: &[f64],
    kappa_basis: &BasisMatrix,
    alpha_basis: &BasisMatrix,
) -> Result<Trajectories<S>> {
    let n = graph.len();
    let steps = grid.len();
    if steps == 0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid);
    }
    check_len("rho deviations", params.rho_dev.len(), n)?;
    check_len("alpha deviations", params.alpha_dev.len(), n)?;
    check_len("transmission deviation rows", params.beta_kappa.len(), n)?;
    check_len("initiation deviation rows", params.beta_alpha.len(), n)?;

    let kappa = transmission_rate(params.beta_kappa_0, params.beta_kappa, kappa_basis, &nh.xi)?;
    let alpha_star = art_initiation_rate(
        params.beta_alpha_0,
        params.beta_alpha,
        alpha_basis,
        &nh.zeta,
        &nh.eligible,
    )?;

    // ART-era start: the first grid point is unmasked in the initiation basis.
    let art_era = alpha_basis.is_active(0);
    let mut state = initial_state(
        params.rho0,
        params.rho_dev,
        params.alpha0,
        params.alpha_dev,
        nh,
        graph,
        art_era,
    );

    let entrants: Vec<f64> = (0..n).map(|r| graph.entrants_per_year(r)).collect();
    let mut traj = Trajectories {
        grid: grid.to_vec(),
        rho: vec![Vec::with_capacity(steps); n],
        alpha: vec![Vec::with_capacity(steps); n],
        lambda: vec![Vec::with_capacity(steps); n],
        art: vec![Vec::with_capacity(steps); n],
        n: vec![Vec::with_capacity(steps); n],
        kappa,
        alpha_star,
        clamp_events: 0,
        clamp_shortfall: 0.0,
    };

    for ti in 0..steps {
        if !state.is_finite() {
            return Err(Error::NonFiniteState { step: ti });
        }
        let kappa_t: Vec<[S; STAGES]> = (0..n).map(|r| traj.kappa[r][ti]).collect();
        let forces = stage_force(&state, &kappa_t, weights, nh.omega_art);
        let h = if ti + 1 < steps {
            grid[ti + 1] - grid[ti]
        } else {
            grid[ti] - grid[ti.saturating_sub(1)]
        };
        let inc = total_incidence(&forces, h);

        for r in 0..n {
            let total = state.total(r);
            let plhiv = state.plhiv(r);
            let art = state.on_art(r);
            let rho = if total.value() > 0.0 { plhiv / total } else { S::zero() };
            let alpha = if plhiv.value() > 0.0 { art / plhiv } else { S::zero() };
            traj.rho[r].push(rho);
            traj.alpha[r].push(alpha);
            traj.art[r].push(art);
            traj.n[r].push(total);
            traj.lambda[r].push(inc.lambda[r]);
        }

        if ti + 1 < steps {
            let astar_t: Vec<[S; STAGES]> = (0..n).map(|r| traj.alpha_star[r][ti]).collect();
            let (next, diag) = euler_step(
                &state,
                &inc.lambda,
                &forces,
                &astar_t,
                nh,
                &entrants,
                grid[ti + 1] - grid[ti],
            );
            traj.clamp_events += diag.clamp_events;
            traj.clamp_shortfall += diag.clamp_shortfall;
            state = next;
        }
    }
    Ok(traj)
}

/// Uniform simulation grid from `t0` to `t_end` with step `h`.
pub fn make_grid(t0: f64, t_end: f64, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) || t_end <= t0 {
        return Err(Error::InvalidGrid);
    }
    let n = ((t_end - t0) / h).round() as usize;
    if n == 0 || (t0 + n as f64 * h - t_end).abs() > 1e-6 {
        return Err(Error::UnalignedGrid { t0, t_end, h });
    }
    Ok((0..=n).map(|i| t0 + i as f64 * h).collect())
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{mixing_weights, RegionSpec};
    use crate::spline::{make_basis, BasisSpec};

    fn single_region(pop: f64, entrants: f64) -> RegionGraph {
        RegionGraph::build(
            &[RegionSpec {
                id: "a".into(),
                population: pop,
                entrants_per_year: entrants,
            }],
            &[],
        )
        .unwrap()
    }

    fn zero_nh() -> NaturalHistory {
        NaturalHistory {
            mu_s: 0.0,
            mu_i: [0.0; STAGES],
            mu_a: [0.0; STAGES],
            eta: 0.0,
            tau: [0.0; STAGES],
            xi: [1.0; STAGES],
            zeta: [1.0; STAGES],
            eligible: [true; STAGES],
            omega_art: 0.0,
            b_rho: [0.0, 0.0, 0.0, 1.0],
            b_alpha: [0.25; STAGES],
            infection_entry: InfectionEntry::HighestStage,
        }
    }

    fn flat_basis(grid: &[f64]) -> BasisMatrix {
        make_basis(
            &BasisSpec {
                order: 1,
                knot_interval: grid[grid.len() - 1] - grid[0],
                t0: grid[0],
                t_end: grid[grid.len() - 1],
                zero_before: None,
            },
            grid,
        )
        .unwrap()
    }

    fn state_one(
        s: f64,
        i: [f64; STAGES],
        a: [f64; STAGES],
    ) -> EpidemicState<f64> {
        EpidemicState {
            s: vec![s],
            i: vec![i],
            a: vec![a],
        }
    }

    #[test]
    fn initial_state_examples() {
        let g = single_region(1000.0, 0.0);
        let mut nh = zero_nh();
        nh.b_rho = [0.25; STAGES];
        nh.b_alpha = [0.25; STAGES];

        // Empty epidemic limit.
        let st = initial_state(-30.0, &[0.0], 0.0, &[0.0], &nh, &g, true);
        assert!(st.i[0].iter().all(|v| *v < 1e-9));
        assert!((st.s[0] - 1000.0).abs() < 1e-6);

        // Logistic identity: logit-zero means prevalence one half.
        let st = initial_state(0.0, &[0.0], -30.0, &[0.0], &nh, &g, true);
        assert!((st.plhiv(0) / 1000.0 - 0.5).abs() < 1e-9);

        // Eq-style arithmetic: P=1000, rho=0.1, alpha=0.5, equal shares.
        let rho0 = crate::scalar::logit(0.1);
        let alpha0 = crate::scalar::logit(0.5);
        let st = initial_state(rho0, &[0.0], alpha0, &[0.0], &nh, &g, true);
        for c in 0..STAGES {
            assert!((st.i[0][c] - 12.5).abs() < 1e-9);
            assert!((st.a[0][c] - 12.5).abs() < 1e-9);
        }
        assert!((st.s[0] - 900.0).abs() < 1e-9);

        // Outside the ART era alpha is pinned to zero.
        let st = initial_state(rho0, &[0.0], alpha0, &[0.0], &nh, &g, false);
        assert_eq!(st.a[0], [0.0; STAGES]);
    }

    #[test]
    fn transmission_rate_reduces_to_xi() {
        let grid = make_grid(0.0, 10.0, 0.5).unwrap();
        let basis = make_basis(
            &BasisSpec {
                order: 3,
                knot_interval: 2.0,
                t0: 0.0,
                t_end: 10.0,
                zero_before: None,
            },
            &grid,
        )
        .unwrap();
        let nb = basis.n_basis();
        let xi = [2.0, 1.3, 1.0, 0.7];
        let zeros = vec![0.0; nb];
        let k = transmission_rate(&zeros, &[zeros.clone()], &basis, &xi).unwrap();
        for ti in 0..grid.len() {
            for c in 0..STAGES {
                assert!((k[0][ti][c] - xi[c]).abs() < 1e-12);
            }
        }
        // Constant coefficients shift kappa by exp(k) via partition of unity.
        let ones = vec![0.7; nb];
        let k = transmission_rate(&ones, &[zeros.clone()], &basis, &xi).unwrap();
        for ti in 0..grid.len() {
            assert!((k[0][ti][2] - 0.7f64.exp()).abs() < 1e-10);
        }
        // Single nonzero coefficient scales by exp(beta * phi).
        let mut one_hot = vec![0.0; nb];
        one_hot[2] = 1.0;
        let k = transmission_rate(&one_hot, &[zeros.clone()], &basis, &xi).unwrap();
        for ti in 0..grid.len() {
            let phi = basis.row(ti)[2];
            assert!((k[0][ti][2] - (phi).exp()).abs() < 1e-10);
        }
        // Dimension mismatch is rejected.
        assert!(transmission_rate(&zeros[..nb - 1], &[zeros.clone()], &basis, &xi).is_err());
    }

    #[test]
    fn art_initiation_masking_and_scaling() {
        let grid = make_grid(2000.0, 2010.0, 0.5).unwrap();
        let basis = make_basis(
            &BasisSpec {
                order: 1,
                knot_interval: 1.0,
                t0: 2000.0,
                t_end: 2010.0,
                zero_before: Some(2004.0),
            },
            &grid,
        )
        .unwrap();
        let nb = basis.n_basis();
        let zeros = vec![0.0; nb];
        let zeta = [1.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 12.0];
        let eligible = [true, true, true, false];
        let a = art_initiation_rate(&zeros, &[zeros.clone()], &basis, &zeta, &eligible).unwrap();
        for (ti, &t) in grid.iter().enumerate() {
            if t < 2004.0 {
                assert_eq!(a[0][ti], [0.0; STAGES]);
            } else {
                assert!((a[0][ti][0] - 1.0).abs() < 1e-12);
                assert!((a[0][ti][1] - 1.0 / 3.0).abs() < 1e-12);
                assert!((a[0][ti][2] - 1.0 / 6.0).abs() < 1e-12);
                assert_eq!(a[0][ti][3], 0.0);
            }
        }
    }

    #[test]
    fn stage_force_single_region_reduces_to_kappa_rho() {
        let g = single_region(1000.0, 0.0);
        let w = mixing_weights(&g, 1.0).unwrap();
        let st = state_one(900.0, [0.0, 0.0, 40.0, 60.0], [0.0; STAGES]);
        let kappa_t = vec![[0.5, 0.5, 0.5, 0.5]];
        let f = stage_force(&st, &kappa_t, &w, 0.9);
        assert!((f[0][2] - 0.5 * 40.0 / 1000.0).abs() < 1e-12);
        assert!((f[0][3] - 0.5 * 60.0 / 1000.0).abs() < 1e-12);
        assert_eq!(f[0][0], 0.0);
    }

    #[test]
    fn stage_force_zero_prevalence_and_full_art() {
        let g = single_region(1000.0, 0.0);
        let w = mixing_weights(&g, 1.0).unwrap();
        let st = state_one(1000.0, [0.0; STAGES], [0.0; STAGES]);
        let f = stage_force(&st, &[[1.0; STAGES]], &w, 0.9);
        assert_eq!(f[0], [0.0; STAGES]);

        // Full coverage with omega = 1 blocks all transmission.
        let st = state_one(900.0, [0.0; STAGES], [25.0; STAGES]);
        let f = stage_force(&st, &[[1.0; STAGES]], &w, 1.0);
        for c in 0..STAGES {
            assert!(f[0][c].abs() < 1e-15);
        }
    }

    #[test]
    fn stage_force_identical_neighbors_match_single_region() {
        // Two identical regions at any w0 give the single-region force.
        let g = RegionGraph::build(
            &[
                RegionSpec {
                    id: "a".into(),
                    population: 1000.0,
                    entrants_per_year: 0.0,
                },
                RegionSpec {
                    id: "b".into(),
                    population: 1000.0,
                    entrants_per_year: 0.0,
                },
            ],
            &[("a".into(), "b".into())],
        )
        .unwrap();
        let st = EpidemicState {
            s: vec![900.0, 900.0],
            i: vec![[10.0, 20.0, 30.0, 40.0]; 2],
            a: vec![[5.0, 5.0, 5.0, 5.0]; 2],
        };
        let kappa_t = vec![[0.4; STAGES]; 2];
        for &w0 in &[0.2, 0.5, 0.9] {
            let w = mixing_weights(&g, w0).unwrap();
            let f = stage_force(&st, &kappa_t, &w, 0.9);
            let w_self = mixing_weights(&g, 1.0).unwrap();
            let f_self = stage_force(&st, &kappa_t, &w_self, 0.9);
            for c in 0..STAGES {
                assert!((f[0][c] - f_self[0][c]).abs() < 1e-12);
                assert!((f[1][c] - f_self[1][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_incidence_example() {
        let stages = vec![[0.01, 0.02, 0.03, 0.04]];
        let inc = total_incidence(&stages, 0.1);
        assert!((inc.lambda[0] - 0.10).abs() < 1e-15);
        assert!((inc.p_inf[0] - (1.0 - (-0.01f64).exp())).abs() < 1e-15);

        let zero = total_incidence(&vec![[0.0; STAGES]], 0.1);
        assert_eq!(zero.lambda[0], 0.0);
        assert_eq!(zero.p_inf[0], 0.0);

        // One active stage reduces to 1 - exp(-h * lambda_c).
        let one = total_incidence(&vec![[0.0, 0.0, 0.2, 0.0]], 0.5);
        assert!((one.p_inf[0] - (1.0 - (-0.1f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn euler_step_examples() {
        let nh = zero_nh();
        let st = state_one(1000.0, [1.0, 2.0, 3.0, 4.0], [0.5; STAGES]);
        // All rates zero: state unchanged.
        let (next, diag) = euler_step(
            &st,
            &[0.0],
            &[[0.0; STAGES]],
            &[[0.0; STAGES]],
            &nh,
            &[0.0],
            0.1,
        );
        assert_eq!(next.s[0], 1000.0);
        assert_eq!(next.i[0], st.i[0]);
        assert_eq!(next.a[0], st.a[0]);
        assert_eq!(diag.clamp_events, 0);

        // One-step susceptible decay under non-HIV mortality.
        let mut nh2 = zero_nh();
        nh2.mu_s = 0.02;
        let (next, _) = euler_step(
            &st,
            &[0.0],
            &[[0.0; STAGES]],
            &[[0.0; STAGES]],
            &nh2,
            &[0.0],
            0.1,
        );
        assert!((next.s[0] - 998.0).abs() < 1e-12);
    }

    #[test]
    fn euler_step_mass_balance() {
        // N' - N = h * (E - mu_s N - sum mu_i I - sum mu_a A) exactly.
        let mut nh = NaturalHistory::placeholder();
        nh.infection_entry = InfectionEntry::HighestStage;
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let st = state_one(
                1000.0 * rng.random::<f64>() + 1.0,
                std::array::from_fn(|_| 50.0 * rng.random::<f64>()),
                std::array::from_fn(|_| 50.0 * rng.random::<f64>()),
            );
            let lambda_stage = [[
                0.01 * rng.random::<f64>(),
                0.01 * rng.random::<f64>(),
                0.01 * rng.random::<f64>(),
                0.01 * rng.random::<f64>(),
            ]];
            let lambda = [lambda_stage[0].iter().sum::<f64>()];
            let astar = [[0.3 * rng.random::<f64>(); STAGES]];
            let e = 20.0 * rng.random::<f64>();
            let h = 0.1;
            let (next, diag) = euler_step(&st, &lambda, &lambda_stage, &astar, &nh, &[e], h);
            assert_eq!(diag.clamp_events, 0);
            let n0 = st.total(0);
            let n1 = next.total(0);
            let deaths_i: f64 = (0..STAGES).map(|c| nh.mu_i[c] * st.i[0][c]).sum();
            let deaths_a: f64 = (0..STAGES).map(|c| nh.mu_a[c] * st.a[0][c]).sum();
            let expected = h * (e - nh.mu_s * n0 - deaths_i - deaths_a);
            assert!(
                ((n1 - n0) - expected).abs() <= 1e-9 * n0.abs().max(1.0),
                "mass balance violated: {} vs {}",
                n1 - n0,
                expected
            );
        }
    }

    #[test]
    fn euler_step_clamps_negative_results() {
        let mut nh = zero_nh();
        nh.mu_s = 20.0; // absurd rate forces S negative at h = 0.1
        let st = state_one(100.0, [0.0; STAGES], [0.0; STAGES]);
        let (next, diag) = euler_step(
            &st,
            &[0.0],
            &[[0.0; STAGES]],
            &[[0.0; STAGES]],
            &nh,
            &[0.0],
            0.1,
        );
        assert_eq!(next.s[0], 0.0);
        assert_eq!(diag.clamp_events, 1);
        assert!((diag.clamp_shortfall - 100.0).abs() < 1e-9);
    }

    /// Closed-form SI logistic prevalence for the single-stage reduction.
    fn si_logistic(rho0: f64, kappa: f64, t: f64) -> f64 {
        rho0 / (rho0 + (1.0 - rho0) * (-kappa * t).exp())
    }

    fn run_si(h: f64, t_end: f64, rho0: f64, kappa: f64) -> f64 {
        let g = single_region(10_000.0, 0.0);
        let w = mixing_weights(&g, 1.0).unwrap();
        let grid = make_grid(0.0, t_end, h).unwrap();
        let basis = flat_basis(&grid);
        let nh = zero_nh();
        let beta0 = vec![kappa.ln(); basis.n_basis()];
        let dev = vec![vec![0.0; basis.n_basis()]; 1];
        let params = EpidemicParams {
            beta_kappa_0: &beta0,
            beta_kappa: &dev,
            beta_alpha_0: &vec![-30.0; basis.n_basis()],
            beta_alpha: &dev,
            rho0: crate::scalar::logit(rho0),
            rho_dev: &[0.0],
            alpha0: -30.0,
            alpha_dev: &[0.0],
        };
        let traj = project(&params, &nh, &g, &w, &grid, &basis, &basis).unwrap();
        assert_eq!(traj.clamp_events, 0);
        *traj.rho[0].last().unwrap()
    }

    #[test]
    fn project_matches_si_logistic() {
        let (rho0, kappa, t_end) = (0.01, 0.6, 10.0);
        let truth = si_logistic(rho0, kappa, t_end);
        let got = run_si(0.001, t_end, rho0, kappa);
        assert!(
            ((got - truth) / truth).abs() < 1e-3,
            "SI reduction: {got} vs {truth}"
        );
        // First-order convergence: error ratio between h and h/2 near 2.
        let e1 = (run_si(0.02, t_end, rho0, kappa) - truth).abs();
        let e2 = (run_si(0.01, t_end, rho0, kappa) - truth).abs();
        let ratio = e1 / e2;
        assert!((1.7..=2.3).contains(&ratio), "convergence ratio {ratio}");
    }

    #[test]
    fn project_zero_prevalence_stays_zero() {
        let g = single_region(1000.0, 30.0);
        let w = mixing_weights(&g, 1.0).unwrap();
        let grid = make_grid(0.0, 5.0, 0.1).unwrap();
        let basis = flat_basis(&grid);
        let mut nh = zero_nh();
        nh.mu_s = 0.01;
        let beta0 = vec![0.0; basis.n_basis()];
        let dev = vec![vec![0.0; basis.n_basis()]; 1];
        let params = EpidemicParams {
            beta_kappa_0: &beta0,
            beta_kappa: &dev,
            beta_alpha_0: &beta0,
            beta_alpha: &dev,
            rho0: -40.0,
            rho_dev: &[0.0],
            alpha0: 0.0,
            alpha_dev: &[0.0],
        };
        let traj = project(&params, &nh, &g, &w, &grid, &basis, &basis).unwrap();
        for ti in 0..grid.len() {
            assert!(traj.rho[0][ti] < 1e-12);
            assert!(traj.lambda[0][ti] < 1e-12);
            assert!(traj.art[0][ti] < 1e-12);
        }
        // Susceptibles grow by entrants minus deaths.
        assert!(*traj.n[0].last().unwrap() > 1000.0);
    }

    #[test]
    fn project_disconnected_regions_match_independent_runs() {
        let both = RegionGraph::build(
            &[
                RegionSpec {
                    id: "a".into(),
                    population: 5000.0,
                    entrants_per_year: 50.0,
                },
                RegionSpec {
                    id: "b".into(),
                    population: 900.0,
                    entrants_per_year: 10.0,
                },
            ],
            &[],
        )
        .unwrap();
        let grid = make_grid(0.0, 8.0, 0.1).unwrap();
        let basis = flat_basis(&grid);
        let nh = NaturalHistory::placeholder();
        let nb = basis.n_basis();
        let run_pair = || {
            let params = EpidemicParams {
                beta_kappa_0: &vec![-1.5; nb],
                beta_kappa: &vec![vec![0.2; nb], vec![-0.1; nb]],
                beta_alpha_0: &vec![-1.0; nb],
                beta_alpha: &vec![vec![0.0; nb], vec![0.1; nb]],
                rho0: -2.0,
                rho_dev: &[0.3, -0.2],
                alpha0: -1.0,
                alpha_dev: &[0.0, 0.1],
            };
            project(
                &params,
                &nh,
                &both,
                &mixing_weights(&both, 0.7).unwrap(),
                &grid,
                &basis,
                &basis,
            )
            .unwrap()
        };
        let pair = run_pair();
        // Region "a" alone must be bit-identical to its series in the pair.
        let alone = RegionGraph::build(
            &[RegionSpec {
                id: "a".into(),
                population: 5000.0,
                entrants_per_year: 50.0,
            }],
            &[],
        )
        .unwrap();
        let params = EpidemicParams {
            beta_kappa_0: &vec![-1.5; nb],
            beta_kappa: &vec![vec![0.2; nb]],
            beta_alpha_0: &vec![-1.0; nb],
            beta_alpha: &vec![vec![0.0; nb]],
            rho0: -2.0,
            rho_dev: &[0.3],
            alpha0: -1.0,
            alpha_dev: &[0.0],
        };
        let solo = project(
            &params,
            &nh,
            &alone,
            &mixing_weights(&alone, 0.7).unwrap(),
            &grid,
            &basis,
            &basis,
        )
        .unwrap();
        assert_eq!(pair.rho[0], solo.rho[0]);
        assert_eq!(pair.lambda[0], solo.lambda[0]);
        assert_eq!(pair.art[0], solo.art[0]);
    }

    #[test]
    fn project_is_deterministic() {
        let g = single_region(1000.0, 10.0);
        let w = mixing_weights(&g, 1.0).unwrap();
        let grid = make_grid(0.0, 5.0, 0.1).unwrap();
        let basis = flat_basis(&grid);
        let nh = NaturalHistory::placeholder();
        let nb = basis.n_basis();
        let params = EpidemicParams {
            beta_kappa_0: &vec![-1.2; nb],
            beta_kappa: &vec![vec![0.0; nb]],
            beta_alpha_0: &vec![-0.5; nb],
            beta_alpha: &vec![vec![0.0; nb]],
            rho0: -2.2,
            rho_dev: &[0.0],
            alpha0: -1.0,
            alpha_dev: &[0.0],
        };
        let a = project(&params, &nh, &g, &w, &grid, &basis, &basis).unwrap();
        let b = project(&params, &nh, &g, &w, &grid, &basis, &basis).unwrap();
        assert_eq!(a.rho, b.rho);
        assert_eq!(a.lambda, b.lambda);
        assert_eq!(a.n, b.n);
    }

    #[test]
    fn higher_kappa_does_not_reduce_cumulative_incidence() {
        let g = single_region(10_000.0, 0.0);
        let w = mixing_weights(&g, 1.0).unwrap();
        let grid = make_grid(0.0, 10.0, 0.05).unwrap();
        let basis = flat_basis(&grid);
        let nh = NaturalHistory::placeholder();
        let nb = basis.n_basis();
        let cumulative = |level: f64| {
            let params = EpidemicParams {
                beta_kappa_0: &vec![level; nb],
                beta_kappa: &vec![vec![0.0; nb]],
                beta_alpha_0: &vec![-2.0; nb],
                beta_alpha: &vec![vec![0.0; nb]],
                rho0: -2.5,
                rho_dev: &[0.0],
                alpha0: -1.0,
                alpha_dev: &[0.0],
            };
            let traj = project(&params, &nh, &g, &w, &grid, &basis, &basis).unwrap();
            traj.lambda[0].iter().sum::<f64>()
        };
        let mut prev = cumulative(-2.5);
        for level in [-2.0, -1.5, -1.0, -0.5] {
            let cur = cumulative(level);
            assert!(cur >= prev, "cumulative incidence decreased at {level}");
            prev = cur;
        }
    }

    #[test]
    fn refinement_ratio_is_first_order() {
        // Compare against an h/16 reference on a full natural-history run.
        let g = single_region(10_000.0, 100.0);
        let w = mixing_weights(&g, 1.0).unwrap();
        let nh = NaturalHistory::placeholder();
        let run = |h: f64| {
            let grid = make_grid(0.0, 8.0, h).unwrap();
            let basis = flat_basis(&grid);
            let nb = basis.n_basis();
            let params = EpidemicParams {
                beta_kappa_0: &vec![-0.8; nb],
                beta_kappa: &vec![vec![0.0; nb]],
                beta_alpha_0: &vec![-1.0; nb],
                beta_alpha: &vec![vec![0.0; nb]],
                rho0: -2.0,
                rho_dev: &[0.0],
                alpha0: -1.5,
                alpha_dev: &[0.0],
            };
            let t = project(&params, &nh, &g, &w, &grid, &basis, &basis).unwrap();
            *t.rho[0].last().unwrap()
        };
        let reference = run(0.1 / 16.0);
        let e1 = (run(0.1) - reference).abs();
        let e2 = (run(0.05) - reference).abs();
        let ratio = e1 / e2;
        assert!((1.7..=2.3).contains(&ratio), "refinement ratio {ratio}");
    }

    #[test]
    fn make_grid_properties() {
        let g = make_grid(2000.0, 2019.0, 0.1).unwrap();
        assert_eq!(g.len(), 191);
        assert!((g[0] - 2000.0).abs() < 1e-12);
        assert!((g[190] - 2019.0).abs() < 1e-9);
        assert!(make_grid(0.0, 1.0, 0.3).is_err());
        assert!(make_grid(1.0, 1.0, 0.1).is_err());
    }
}
