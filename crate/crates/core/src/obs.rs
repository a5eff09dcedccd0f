//! Observation distributions and the joint log-likelihood.
//!
//! Five data sources attach to the projected trajectories:
//! household survey seroprevalence (binomial against prevalence), ANC
//! sentinel prevalence (binomial against clinic-shifted prevalence), survey
//! ART coverage (binomial against residence-based coverage), recency assays
//! (binomial against the implied recent fraction), and facility ART patient
//! counts (three-parameter negative binomial against treatment-seeking
//! reallocated patient counts).
//!
//! Likelihood sums run over canonically sorted records, so totals are
//! invariant to the ordering of the input files, bit for bit.

use crate::engine::Trajectories;
use crate::error::{Error, Result};
use crate::graph::RegionGraph;
use crate::scalar::{inv_logit, logit, Scalar};

/// One binomial observation (survey HIV, survey ART, or recency).
#[derive(Debug, Clone, PartialEq)]
pub struct BinomRecord {
    pub source: String,
    pub region: String,
    pub time: f64,
    pub tested: u64,
    pub positive: u64,
}

/// One ANC sentinel observation.
#[derive(Debug, Clone, PartialEq)]
pub struct AncRecord {
    pub site: String,
    pub region: String,
    pub time: f64,
    pub tested: u64,
    pub positive: u64,
}

/// One facility ART patient count, aggregated to the region level.
#[derive(Debug, Clone, PartialEq)]
pub struct CountRecord {
    pub region: String,
    pub time: f64,
    pub count: u64,
}

/// All observations for one fit.
#[derive(Debug, Clone, Default)]
pub struct ObservationSet {
    pub survey_hiv: Vec<BinomRecord>,
    pub anc: Vec<AncRecord>,
    pub survey_art: Vec<BinomRecord>,
    pub recency: Vec<BinomRecord>,
    pub art_counts: Vec<CountRecord>,
}

impl ObservationSet {
    pub fn is_empty(&self) -> bool {
        self.survey_hiv.is_empty()
            && self.anc.is_empty()
            && self.survey_art.is_empty()
            && self.recency.is_empty()
            && self.art_counts.is_empty()
    }

    pub fn total_records(&self) -> usize {
        self.survey_hiv.len()
            + self.anc.len()
            + self.survey_art.len()
            + self.recency.len()
            + self.art_counts.len()
    }

    /// Basic record validity, independent of any graph or grid.
    pub fn validate(&self) -> Result<()> {
        for rec in self
            .survey_hiv
            .iter()
            .chain(&self.survey_art)
            .chain(&self.recency)
        {
            if rec.positive > rec.tested {
                return Err(Error::PositiveExceedsTested {
                    tested: rec.tested,
                    positive: rec.positive,
                });
            }
        }
        for rec in &self.anc {
            if rec.positive > rec.tested {
                return Err(Error::PositiveExceedsTested {
                    tested: rec.tested,
                    positive: rec.positive,
                });
            }
        }
        Ok(())
    }

    /// Sorted, de-duplicated ANC site ids.
    pub fn site_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.anc.iter().map(|r| r.site.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// ANC sites, each bound to exactly one region.
#[derive(Debug, Clone, Default)]
pub struct SiteMap {
    pub ids: Vec<String>,
    pub region_of: Vec<usize>,
}

impl SiteMap {
    /// Derive the site registry from ANC records. A site appearing under two
    /// different regions is an error.
    pub fn from_anc(anc: &[AncRecord], graph: &RegionGraph) -> Result<SiteMap> {
        let mut pairs: Vec<(String, usize)> = Vec::new();
        for rec in anc {
            let r = graph.index_of(&rec.region)?;
            pairs.push((rec.site.clone(), r));
        }
        pairs.sort();
        pairs.dedup();
        let mut ids = Vec::new();
        let mut region_of = Vec::new();
        for (site, r) in pairs {
            if ids.last() == Some(&site) {
                let prev = *region_of.last().unwrap();
                if prev != r {
                    return Err(Error::SiteRegionConflict {
                        site,
                        first: graph.id(prev).to_string(),
                        second: graph.id(r).to_string(),
                    });
                }
            } else {
                ids.push(site);
                region_of.push(r);
            }
        }
        Ok(SiteMap { ids, region_of })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.ids
            .binary_search_by(|s| s.as_str().cmp(id))
            .map_err(|_| Error::UnknownSite(id.to_string()))
    }
}

/// Nearest grid index for an observation time; the time must land within
/// half a step of a grid point.
pub fn grid_index(grid: &[f64], time: f64) -> Result<usize> {
    let t0 = grid[0];
    let h = if grid.len() > 1 { grid[1] - grid[0] } else { 1.0 };
    let idx = ((time - t0) / h).round();
    if idx < 0.0 || idx as usize >= grid.len() {
        return Err(Error::TimeOutsideGrid { time });
    }
    let idx = idx as usize;
    if (time - grid[idx]).abs() > h / 2.0 + 1e-9 {
        return Err(Error::TimeOutsideGrid { time });
    }
    Ok(idx)
}

#[derive(Debug, Clone)]
struct BoundBinom {
    region: usize,
    t: usize,
    tested: f64,
    positive: f64,
    ln_choose: f64,
}

#[derive(Debug, Clone)]
struct BoundAnc {
    site: usize,
    region: usize,
    t: usize,
    tested: f64,
    positive: f64,
    ln_choose: f64,
}

#[derive(Debug, Clone)]
struct BoundCount {
    region: usize,
    t: usize,
    count: u64,
}

/// Observations resolved against a graph, site registry and grid, sorted
/// canonically with binomial constants precomputed. Records with zero trials
/// are dropped and counted.
#[derive(Debug, Clone)]
pub struct BoundObs {
    hiv: Vec<BoundBinom>,
    anc: Vec<BoundAnc>,
    art: Vec<BoundBinom>,
    recency: Vec<BoundBinom>,
    counts: Vec<BoundCount>,
    pub dropped_zero_tested: usize,
}

impl BoundObs {
    pub fn empty() -> Self {
        BoundObs {
            hiv: Vec::new(),
            anc: Vec::new(),
            art: Vec::new(),
            recency: Vec::new(),
            counts: Vec::new(),
            dropped_zero_tested: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.hiv.is_empty()
            && self.anc.is_empty()
            && self.art.is_empty()
            && self.recency.is_empty()
            && self.counts.is_empty()
    }

    /// Distinct grid indices at which counts are observed, sorted.
    fn count_times(&self) -> Vec<usize> {
        let mut ts: Vec<usize> = self.counts.iter().map(|c| c.t).collect();
        ts.sort_unstable();
        ts.dedup();
        ts
    }
}

fn ln_choose(tested: u64, positive: u64) -> f64 {
    crate::scalar::lgamma(tested as f64 + 1.0)
        - crate::scalar::lgamma(positive as f64 + 1.0)
        - crate::scalar::lgamma((tested - positive) as f64 + 1.0)
}

/// Resolve an observation set against the model context.
pub fn bind(
    obs: &ObservationSet,
    graph: &RegionGraph,
    sites: &SiteMap,
    grid: &[f64],
) -> Result<BoundObs> {
    obs.validate()?;
    let mut dropped = 0;
    let mut bind_binom = |records: &[BinomRecord]| -> Result<Vec<BoundBinom>> {
        let mut out = Vec::with_capacity(records.len());
        for rec in records {
            if rec.tested == 0 {
                dropped += 1;
                continue;
            }
            out.push(BoundBinom {
                region: graph.index_of(&rec.region)?,
                t: grid_index(grid, rec.time)?,
                tested: rec.tested as f64,
                positive: rec.positive as f64,
                ln_choose: ln_choose(rec.tested, rec.positive),
            });
        }
        out.sort_by(|a, b| {
            (a.region, a.t, a.tested as u64, a.positive as u64)
                .cmp(&(b.region, b.t, b.tested as u64, b.positive as u64))
        });
        Ok(out)
    };
    let hiv = bind_binom(&obs.survey_hiv)?;
    let art = bind_binom(&obs.survey_art)?;
    let recency = bind_binom(&obs.recency)?;

    let mut anc = Vec::with_capacity(obs.anc.len());
    for rec in &obs.anc {
        if rec.tested == 0 {
            dropped += 1;
            continue;
        }
        let site = sites.index_of(&rec.site)?;
        let region = graph.index_of(&rec.region)?;
        if sites.region_of[site] != region {
            return Err(Error::SiteRegionConflict {
                site: rec.site.clone(),
                first: graph.id(sites.region_of[site]).to_string(),
                second: rec.region.clone(),
            });
        }
        anc.push(BoundAnc {
            site,
            region,
            t: grid_index(grid, rec.time)?,
            tested: rec.tested as f64,
            positive: rec.positive as f64,
            ln_choose: ln_choose(rec.tested, rec.positive),
        });
    }
    anc.sort_by(|a, b| {
        (a.site, a.t, a.tested as u64, a.positive as u64)
            .cmp(&(b.site, b.t, b.tested as u64, b.positive as u64))
    });

    let mut counts = Vec::with_capacity(obs.art_counts.len());
    for rec in &obs.art_counts {
        counts.push(BoundCount {
            region: graph.index_of(&rec.region)?,
            t: grid_index(grid, rec.time)?,
            count: rec.count,
        });
    }
    counts.sort_by(|a, b| (a.t, a.region, a.count).cmp(&(b.t, b.region, b.count)));

    Ok(BoundObs {
        hiv,
        anc,
        art,
        recency,
        counts,
        dropped_zero_tested: dropped,
    })
}

/// Overdispersion of the count likelihood: variance
/// `sigma^2 = mu + omega * mu + theta * mu^2`.
#[derive(Debug, Clone, Copy)]
pub struct CountDispersion<S> {
    pub omega_lin: S,
    pub theta_quad: S,
}

impl<S: Scalar> CountDispersion<S> {
    pub fn from_logs(log_omega: S, log_theta: S) -> Self {
        CountDispersion {
            omega_lin: log_omega.exp(),
            theta_quad: log_theta.exp(),
        }
    }
}

/// `(r, p)` of the standard negative binomial implied by `(mu, omega, theta)`.
pub fn nb3_params(mu: f64, omega: f64, theta: f64) -> Result<(f64, f64)> {
    if !(mu > 0.0) {
        return Err(Error::NonPositiveMean(mu));
    }
    let sigma2 = mu + omega * mu + theta * mu * mu;
    if sigma2 <= mu {
        return Err(Error::DegenerateDispersion {
            mean: mu,
            var: sigma2,
        });
    }
    Ok((mu / (omega + theta * mu), mu / sigma2))
}

/// `ln Gamma(x + r) - ln Gamma(r)` for integer `x`. The direct log-gamma
/// difference cancels catastrophically when `r` is huge (the near-Poisson
/// regime), so small counts use the exact product `sum_k ln(r + k)` instead.
fn ln_gamma_ratio<S: Scalar>(x: u64, r: S) -> S {
    if x == 0 {
        return S::zero();
    }
    if x <= 512 {
        let mut acc = S::zero();
        for k in 0..x {
            acc += (r + S::from_f64(k as f64)).ln();
        }
        acc
    } else {
        (S::from_f64(x as f64) + r).lgamma() - r.lgamma()
    }
}

/// Log-pmf of the three-parameter negative binomial, evaluated through
/// log-gamma so that counts up to 1e7 stay clear of overflow.
pub fn negbinom3_logpmf<S: Scalar>(x: u64, mu: S, disp: &CountDispersion<S>) -> Result<S> {
    if !(mu.value() > 0.0) {
        return Err(Error::NonPositiveMean(mu.value()));
    }
    let one = S::one();
    let sigma2 = mu * (one + disp.omega_lin) + disp.theta_quad * mu * mu;
    if sigma2.value() <= mu.value() {
        return Err(Error::DegenerateDispersion {
            mean: mu.value(),
            var: sigma2.value(),
        });
    }
    let r = mu / (disp.omega_lin + disp.theta_quad * mu);
    let p = mu / sigma2;
    let xf = x as f64;
    let lg_const = crate::scalar::lgamma(xf + 1.0);
    Ok(ln_gamma_ratio(x, r) - S::from_f64(lg_const)
        + r * p.ln()
        + S::from_f64(xf) * (-p).ln_1p())
}

/// Draw from the three-parameter negative binomial via its gamma-Poisson
/// mixture representation.
pub fn nb3_sample<R: rand::Rng>(rng: &mut R, mu: f64, omega: f64, theta: f64) -> Result<u64> {
    use rand_distr::Distribution;
    let (r, p) = nb3_params(mu, omega, theta)?;
    let scale = (1.0 - p) / p;
    let gamma = rand_distr::Gamma::new(r, scale).expect("valid gamma parameters");
    let lambda: f64 = gamma.sample(rng);
    if lambda <= 0.0 {
        return Ok(0);
    }
    let poisson = rand_distr::Poisson::new(lambda).expect("valid poisson rate");
    let draw: f64 = poisson.sample(rng);
    Ok(draw as u64)
}

/// Prior means for the treatment-seeking intercepts:
/// `log(0.05 / n_j)` where `n_j` counts the regions that have `j` in their
/// close set (excluding `j` itself). An isolated region, which can never be a
/// destination, gets `log(0.05)`.
pub fn prior_mean_log_m(g: &RegionGraph, degree: usize) -> Vec<f64> {
    (0..g.len())
        .map(|j| {
            let n = g.close_set(j, degree).len() - 1;
            if n == 0 {
                0.05f64.ln()
            } else {
                (0.05 / n as f64).ln()
            }
        })
        .collect()
}

/// Treatment-seeking probabilities from precomputed close sets with
/// distances. Unnormalized weight of destination `j` from home `r` is
/// `exp(log_m[j] / d^2)` with weight one for staying home; each row is
/// normalized over the close set.
pub fn seek_probabilities_from<S: Scalar>(
    close: &[Vec<(usize, usize)>],
    log_m: &[S],
) -> Vec<Vec<S>> {
    let n = close.len();
    let mut pi = vec![vec![S::zero(); n]; n];
    for r in 0..n {
        let mut total = S::zero();
        for &(j, d) in &close[r] {
            let u = if j == r {
                S::one()
            } else {
                (log_m[j] / S::from_f64((d * d) as f64)).exp()
            };
            pi[r][j] = u;
            total += u;
        }
        for &(j, _) in &close[r] {
            pi[r][j] = pi[r][j] / total;
        }
    }
    pi
}

/// Treatment-seeking probabilities over each region's close set of degree
/// `degree`.
pub fn seek_probabilities<S: Scalar>(
    log_m: &[S],
    g: &RegionGraph,
    degree: usize,
) -> Result<Vec<Vec<S>>> {
    if log_m.len() != g.len() {
        return Err(Error::DimensionMismatch {
            what: "treatment-seeking intercepts",
            expected: g.len(),
            got: log_m.len(),
        });
    }
    let close: Vec<Vec<(usize, usize)>> = (0..g.len())
        .map(|r| g.close_set_with_distances(r, degree))
        .collect();
    Ok(seek_probabilities_from(&close, log_m))
}

/// Facility-based patient counts: `A*_r = sum_j pi[j][r] * A_j`, collecting
/// the residents of every `j` who seek treatment in `r`. Row-stochastic `pi`
/// conserves the total.
pub fn reallocate_patients<S: Scalar>(art: &[S], pi: &[Vec<S>]) -> Vec<S> {
    let n = art.len();
    (0..n)
        .map(|r| {
            let mut total = S::zero();
            for j in 0..n {
                total += pi[j][r] * art[j];
            }
            total
        })
        .collect()
}

/// Fixed treatment-seeking summary on the plain f64 path.
#[derive(Debug, Clone)]
pub struct SeekModel {
    pub log_m: Vec<f64>,
    pub prior_mean_log_m: Vec<f64>,
    pub sigma_m: f64,
    pub degree: usize,
    pub pi: Vec<Vec<f64>>,
}

impl SeekModel {
    pub fn new(log_m: &[f64], log_sigma_m: f64, g: &RegionGraph, degree: usize) -> Result<Self> {
        Ok(SeekModel {
            log_m: log_m.to_vec(),
            prior_mean_log_m: prior_mean_log_m(g, degree),
            sigma_m: log_sigma_m.exp(),
            degree,
            pi: seek_probabilities(log_m, g, degree)?,
        })
    }
}

/// Clinic-shifted ANC prevalence: `inv_logit(logit(rho) + delta)`.
/// Rejects boundary prevalence, where the logit is undefined.
pub fn anc_site_prevalence<S: Scalar>(rho: S, delta: S) -> Result<S> {
    let v = rho.value();
    if !(0.0 < v && v < 1.0) {
        return Err(Error::PrevalenceOutOfRange(v));
    }
    Ok(inv_logit(logit(rho) + delta))
}

/// Recency assay constants: mean duration of recent infection (years) and
/// false-recency rate.
#[derive(Debug, Clone, Copy)]
pub struct RecencyConstants {
    pub mean_duration_years: f64,
    pub false_recency_rate: f64,
}

impl Default for RecencyConstants {
    fn default() -> Self {
        RecencyConstants {
            mean_duration_years: 130.0 / 365.0,
            false_recency_rate: 0.0,
        }
    }
}

/// Implied fraction of PLHIV whose infection tests as recent:
/// `nu = (lambda * (1 - rho) * (Omega - gamma) + gamma * rho) / rho`,
/// clamped into [0, 1]. The boolean reports whether clamping occurred.
pub fn recent_fraction<S: Scalar>(
    lambda: S,
    rho: S,
    rc: &RecencyConstants,
) -> Result<(S, bool)> {
    let v = rho.value();
    if !(v > 0.0) {
        return Err(Error::PrevalenceOutOfRange(v));
    }
    let omega = S::from_f64(rc.mean_duration_years);
    let gamma = S::from_f64(rc.false_recency_rate);
    let nu = (lambda * (S::one() - rho) * (omega - gamma) + gamma * rho) / rho;
    if nu.value() < 0.0 {
        Ok((S::zero(), true))
    } else if nu.value() > 1.0 {
        Ok((S::one(), true))
    } else {
        Ok((nu, false))
    }
}

/// Binomial log-pmf against success probability `p`, with degenerate
/// boundaries handled by their limits.
fn binom_logpmf<S: Scalar>(tested: f64, positive: f64, p: S, ln_choose: f64) -> S {
    let pv = p.value();
    if pv <= 0.0 {
        return S::from_f64(if positive == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    if pv >= 1.0 {
        return S::from_f64(if positive == tested { 0.0 } else { f64::NEG_INFINITY });
    }
    S::from_f64(ln_choose) + S::from_f64(positive) * p.ln()
        + S::from_f64(tested - positive) * (-p).ln_1p()
}

/// Per-source log-likelihood components.
#[derive(Debug, Clone, Copy)]
pub struct LogLikParts<S> {
    pub survey_hiv: S,
    pub anc: S,
    pub survey_art: S,
    pub recency: S,
    pub counts: S,
    /// Recency fractions clamped into [0, 1] during evaluation.
    pub recency_clamps: u32,
}

impl<S: Scalar> LogLikParts<S> {
    pub fn zero() -> Self {
        LogLikParts {
            survey_hiv: S::zero(),
            anc: S::zero(),
            survey_art: S::zero(),
            recency: S::zero(),
            counts: S::zero(),
            recency_clamps: 0,
        }
    }

    pub fn total(&self) -> S {
        self.survey_hiv + self.anc + self.survey_art + self.recency + self.counts
    }
}

/// Predicted ART patient counts can be exactly zero before scale-up. The
/// count likelihood adds this small constant to the mean, which keeps the
/// density defined at zero while preserving gradient flow (a hard floor
/// would create a zero-gradient crease that traps the optimizer).
const COUNT_MEAN_FLOOR: f64 = 1e-8;

/// Joint log-likelihood of every observation source against one projection.
pub fn total_loglik<S: Scalar>(
    traj: &Trajectories<S>,
    bound: &BoundObs,
    pi: &[Vec<S>],
    disp: &CountDispersion<S>,
    delta_s: &[S],
    rc: &RecencyConstants,
) -> Result<LogLikParts<S>> {
    let mut parts = LogLikParts::zero();

    for rec in &bound.hiv {
        let rho = traj.rho[rec.region][rec.t];
        parts.survey_hiv += binom_logpmf(rec.tested, rec.positive, rho, rec.ln_choose);
    }

    for rec in &bound.anc {
        let rho = traj.rho[rec.region][rec.t];
        let p = if rho.value() <= 0.0 {
            S::zero()
        } else if rho.value() >= 1.0 {
            S::one()
        } else {
            anc_site_prevalence(rho, delta_s[rec.site])?
        };
        parts.anc += binom_logpmf(rec.tested, rec.positive, p, rec.ln_choose);
    }

    for rec in &bound.art {
        let alpha = traj.alpha[rec.region][rec.t];
        parts.survey_art += binom_logpmf(rec.tested, rec.positive, alpha, rec.ln_choose);
    }

    for rec in &bound.recency {
        let rho = traj.rho[rec.region][rec.t];
        let p = if rho.value() <= 0.0 {
            S::zero()
        } else {
            let (nu, clamped) = recent_fraction(traj.lambda[rec.region][rec.t], rho, rc)?;
            if clamped {
                parts.recency_clamps += 1;
            }
            nu
        };
        parts.recency += binom_logpmf(rec.tested, rec.positive, p, rec.ln_choose);
    }

    // Counts are grouped by grid time so each reallocation is computed once.
    let times = bound.count_times();
    for &t in &times {
        let art_t: Vec<S> = (0..traj.n_regions()).map(|r| traj.art[r][t]).collect();
        let star = reallocate_patients(&art_t, pi);
        for rec in bound.counts.iter().filter(|c| c.t == t) {
            let mu = star[rec.region] + S::from_f64(COUNT_MEAN_FLOOR);
            parts.counts += negbinom3_logpmf(rec.count, mu, disp)?;
        }
    }

    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::STAGES;
    use crate::graph::RegionSpec;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_region_graph() -> RegionGraph {
        RegionGraph::build(
            &[
                RegionSpec {
                    id: "a".into(),
                    population: 1000.0,
                    entrants_per_year: 0.0,
                },
                RegionSpec {
                    id: "b".into(),
                    population: 3000.0,
                    entrants_per_year: 0.0,
                },
            ],
            &[("a".into(), "b".into())],
        )
        .unwrap()
    }

    /// Hand-assembled trajectories over a 3-point grid and 2 regions.
    fn toy_traj() -> Trajectories<f64> {
        Trajectories {
            grid: vec![0.0, 1.0, 2.0],
            rho: vec![vec![0.10, 0.12, 0.14], vec![0.20, 0.22, 0.24]],
            alpha: vec![vec![0.30, 0.35, 0.40], vec![0.50, 0.55, 0.60]],
            lambda: vec![vec![0.010, 0.012, 0.014], vec![0.020, 0.022, 0.024]],
            art: vec![vec![100.0, 110.0, 120.0], vec![500.0, 550.0, 600.0]],
            n: vec![vec![1000.0; 3], vec![3000.0; 3]],
            kappa: vec![vec![[0.0; STAGES]; 3]; 2],
            alpha_star: vec![vec![[0.0; STAGES]; 3]; 2],
            clamp_events: 0,
            clamp_shortfall: 0.0,
        }
    }

    #[test]
    fn negbinom3_algebra() {
        // mu=10, omega=1, theta=0.1 -> sigma2=30, r=5, p=1/3.
        let (r, p) = nb3_params(10.0, 1.0, 0.1).unwrap();
        assert!((r - 5.0).abs() < 1e-12);
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
        // mu=5, omega->0, theta=0.2 -> sigma2=10, r=5, p=0.5.
        let (r, p) = nb3_params(5.0, 1e-14, 0.2).unwrap();
        assert!((r - 5.0).abs() < 1e-10);
        assert!((p - 0.5).abs() < 1e-12);
        assert!(nb3_params(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn negbinom3_matches_independent_log_gamma_oracle() {
        use statrs::function::gamma::ln_gamma;
        let disp = CountDispersion {
            omega_lin: 1.0,
            theta_quad: 0.1,
        };
        for x in [0u64, 1, 5, 10, 50, 10_000_000] {
            let got = negbinom3_logpmf(x, 10.0, &disp).unwrap();
            let (r, p) = nb3_params(10.0, 1.0, 0.1).unwrap();
            let xf = x as f64;
            let want = ln_gamma(xf + r) - ln_gamma(xf + 1.0) - ln_gamma(r)
                + r * p.ln()
                + xf * (1.0 - p).ln();
            assert!(got.is_finite());
            assert!(
                (got - want).abs() < 1e-9 * want.abs().max(1.0),
                "x={x}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn negbinom3_poisson_limit() {
        use statrs::function::gamma::ln_gamma;
        let disp = CountDispersion {
            omega_lin: 1e-8,
            theta_quad: 1e-8,
        };
        for mu in [1.0, 10.0] {
            for x in 0u64..=50 {
                let nb = negbinom3_logpmf(x, mu, &disp).unwrap();
                let xf = x as f64;
                let pois = xf * mu.ln() - mu - ln_gamma(xf + 1.0);
                assert!((nb - pois).abs() < 1e-4, "mu={mu} x={x}: {nb} vs {pois}");
            }
        }
    }

    #[test]
    fn negbinom3_normalizes() {
        for (mu, omega, theta) in [(3.0, 0.5, 0.3), (40.0, 1.0, 0.05), (100.0, 0.2, 0.01)] {
            let disp = CountDispersion {
                omega_lin: omega,
                theta_quad: theta,
            };
            let mut total = 0.0;
            for x in 0..20_000u64 {
                total += negbinom3_logpmf(x, mu, &disp).unwrap().exp();
            }
            assert!(
                (total - 1.0).abs() < 1e-8,
                "mu={mu} omega={omega} theta={theta}: sum={total}"
            );
        }
    }

    #[test]
    fn seek_probability_examples() {
        let g = two_region_graph();
        // Uniform intercepts give the uniform distribution over the close set.
        let pi = seek_probabilities(&[0.0, 0.0], &g, 2).unwrap();
        for r in 0..2 {
            for j in 0..2 {
                assert!((pi[r][j] - 0.5).abs() < 1e-12);
            }
        }
        // Two regions at distance 1 with log_m[j] = 1: (1/(1+e), e/(1+e)).
        let pi = seek_probabilities(&[1.0, 1.0], &g, 2).unwrap();
        let e = std::f64::consts::E;
        assert!((pi[0][0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((pi[0][1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((pi[0][0] - 0.2689).abs() < 1e-4);
        assert!((pi[0][1] - 0.7311).abs() < 1e-4);

        // Isolated region keeps everyone home.
        let lone = RegionGraph::build(
            &[RegionSpec {
                id: "z".into(),
                population: 10.0,
                entrants_per_year: 0.0,
            }],
            &[],
        )
        .unwrap();
        let pi = seek_probabilities(&[3.0], &lone, 2).unwrap();
        assert_eq!(pi[0][0], 1.0);
    }

    #[test]
    fn seek_rows_sum_to_one_and_respect_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let specs: Vec<RegionSpec> = (0..9)
            .map(|i| RegionSpec {
                id: format!("r{i}"),
                population: 100.0,
                entrants_per_year: 0.0,
            })
            .collect();
        let edges: Vec<(String, String)> = (0..8)
            .map(|i| (format!("r{i}"), format!("r{}", i + 1)))
            .collect();
        let g = RegionGraph::build(&specs, &edges).unwrap();
        let log_m: Vec<f64> = (0..9).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let pi = seek_probabilities(&log_m, &g, 2).unwrap();
        for r in 0..9 {
            let sum: f64 = pi[r].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(pi[r][r] > 0.0);
            for j in 0..9 {
                let d = g.crossing_distance(r, j).unwrap();
                if d > 2 {
                    assert_eq!(pi[r][j], 0.0);
                }
            }
        }
    }

    #[test]
    fn reallocation_examples() {
        // Identity seeking leaves counts unchanged.
        let pi = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(reallocate_patients(&[100.0, 40.0], &pi), vec![100.0, 40.0]);
        // Explicit two-region flow.
        let pi = vec![vec![0.8, 0.2], vec![0.0, 1.0]];
        let star = reallocate_patients(&[100.0, 0.0], &pi);
        assert!((star[0] - 80.0).abs() < 1e-12);
        assert!((star[1] - 20.0).abs() < 1e-12);
        // Conservation under arbitrary row-stochastic pi.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = 6;
            let mut pi = vec![vec![0.0; n]; n];
            for r in 0..n {
                let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                for j in 0..n {
                    pi[r][j] = raw[j] / s;
                }
            }
            let art: Vec<f64> = (0..n).map(|_| 1000.0 * rng.random::<f64>()).collect();
            let star = reallocate_patients(&art, &pi);
            let lhs: f64 = star.iter().sum();
            let rhs: f64 = art.iter().sum();
            assert!((lhs - rhs).abs() < 1e-9 * rhs);
        }
    }

    #[test]
    fn anc_prevalence_examples() {
        assert!((anc_site_prevalence(0.5, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((anc_site_prevalence(0.5, 1.0).unwrap() - 0.7311).abs() < 1e-4);
        assert!(anc_site_prevalence(0.5, -40.0).unwrap() < 1e-15);
        assert!(anc_site_prevalence(0.0, 0.0).is_err());
        assert!(anc_site_prevalence(1.0, 0.0).is_err());
    }

    #[test]
    fn recent_fraction_examples() {
        let rc = RecencyConstants::default();
        let (nu, clamped) = recent_fraction(0.0, 0.1, &rc).unwrap();
        assert_eq!(nu, 0.0);
        assert!(!clamped);
        // Scalar evaluation of the estimator:
        // 0.01 * 0.9 * (130/365) / 0.1 = 0.032054794520547944.
        let (nu, _) = recent_fraction(0.01, 0.1, &rc).unwrap();
        assert!((nu - 0.01 * 0.9 * (130.0 / 365.0) / 0.1).abs() < 1e-15);
        assert!((nu - 0.032054794520547944).abs() < 1e-6);
        assert!(recent_fraction(0.1, 0.0, &rc).is_err());
        // Clamped above one for absurd incidence.
        let (nu, clamped) = recent_fraction(1000.0, 0.01, &rc).unwrap();
        assert_eq!(nu, 1.0);
        assert!(clamped);
    }

    #[test]
    fn recent_fraction_monotonicity() {
        let rc = RecencyConstants::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let rho = 0.02 + 0.5 * rng.random::<f64>();
            let lam = 0.05 * rng.random::<f64>();
            let (nu1, _) = recent_fraction(lam, rho, &rc).unwrap();
            let (nu2, _) = recent_fraction(lam * 1.3, rho, &rc).unwrap();
            assert!(nu2 >= nu1);
            let (nu3, _) = recent_fraction(lam, (rho * 1.2).min(0.99), &rc).unwrap();
            assert!(nu3 <= nu1);
        }
    }

    fn toy_setup() -> (RegionGraph, SiteMap, Vec<f64>) {
        let g = two_region_graph();
        let sites = SiteMap {
            ids: vec!["a-anc1".into(), "b-anc1".into()],
            region_of: vec![0, 1],
        };
        (g, sites, vec![0.0, 1.0, 2.0])
    }

    fn toy_obs() -> ObservationSet {
        ObservationSet {
            survey_hiv: vec![
                BinomRecord {
                    source: "s1".into(),
                    region: "a".into(),
                    time: 1.0,
                    tested: 500,
                    positive: 60,
                },
                BinomRecord {
                    source: "s1".into(),
                    region: "b".into(),
                    time: 2.0,
                    tested: 400,
                    positive: 90,
                },
            ],
            anc: vec![AncRecord {
                site: "a-anc1".into(),
                region: "a".into(),
                time: 0.0,
                tested: 300,
                positive: 40,
            }],
            survey_art: vec![BinomRecord {
                source: "s1".into(),
                region: "b".into(),
                time: 1.0,
                tested: 100,
                positive: 56,
            }],
            recency: vec![BinomRecord {
                source: "s1".into(),
                region: "a".into(),
                time: 2.0,
                tested: 80,
                positive: 3,
            }],
            art_counts: vec![
                CountRecord {
                    region: "a".into(),
                    time: 1.0,
                    count: 120,
                },
                CountRecord {
                    region: "b".into(),
                    time: 1.0,
                    count: 530,
                },
            ],
        }
    }

    fn eval_parts(obs: &ObservationSet) -> LogLikParts<f64> {
        let (g, sites, grid) = toy_setup();
        let traj = toy_traj();
        let bound = bind(obs, &g, &sites, &grid).unwrap();
        let pi = seek_probabilities(&[-3.0, -2.5], &g, 2).unwrap();
        let disp = CountDispersion {
            omega_lin: 0.5,
            theta_quad: 0.01,
        };
        total_loglik(
            &traj,
            &bound,
            &pi,
            &disp,
            &[0.2, -0.1],
            &RecencyConstants::default(),
        )
        .unwrap()
    }

    #[test]
    fn loglik_empty_is_zero() {
        let parts = eval_parts(&ObservationSet::default());
        assert_eq!(parts.total(), 0.0);
    }

    #[test]
    fn loglik_single_survey_matches_scalar_binomial() {
        let mut obs = ObservationSet::default();
        // P/T exactly equal to rho at the grid point: the mode.
        obs.survey_hiv.push(BinomRecord {
            source: "s".into(),
            region: "a".into(),
            time: 1.0,
            tested: 100,
            positive: 12,
        });
        let parts = eval_parts(&obs);
        let p: f64 = 0.12;
        let want = ln_choose(100, 12) + 12.0 * p.ln() + 88.0 * (1.0 - p).ln();
        assert!((parts.survey_hiv - want).abs() < 1e-12);
        assert_eq!(parts.total(), parts.survey_hiv);
    }

    #[test]
    fn loglik_is_additive_over_sources() {
        let full = eval_parts(&toy_obs());
        let mut sum = 0.0;
        let base = toy_obs();
        let mut only_hiv = ObservationSet::default();
        only_hiv.survey_hiv = base.survey_hiv.clone();
        sum += eval_parts(&only_hiv).total();
        let mut only_anc = ObservationSet::default();
        only_anc.anc = base.anc.clone();
        sum += eval_parts(&only_anc).total();
        let mut only_art = ObservationSet::default();
        only_art.survey_art = base.survey_art.clone();
        sum += eval_parts(&only_art).total();
        let mut only_rec = ObservationSet::default();
        only_rec.recency = base.recency.clone();
        sum += eval_parts(&only_rec).total();
        let mut only_counts = ObservationSet::default();
        only_counts.art_counts = base.art_counts.clone();
        sum += eval_parts(&only_counts).total();
        assert!((full.total() - sum).abs() < 1e-12);
    }

    #[test]
    fn loglik_invariant_to_record_order() {
        let obs = toy_obs();
        let mut shuffled = obs.clone();
        shuffled.survey_hiv.reverse();
        shuffled.art_counts.reverse();
        let a = eval_parts(&obs);
        let b = eval_parts(&shuffled);
        assert_eq!(a.total(), b.total());
    }

    #[test]
    fn bind_drops_zero_tested_and_validates() {
        let (g, sites, grid) = toy_setup();
        let mut obs = toy_obs();
        obs.survey_hiv.push(BinomRecord {
            source: "s".into(),
            region: "a".into(),
            time: 1.0,
            tested: 0,
            positive: 0,
        });
        let bound = bind(&obs, &g, &sites, &grid).unwrap();
        assert_eq!(bound.dropped_zero_tested, 1);

        obs.survey_hiv.push(BinomRecord {
            source: "s".into(),
            region: "nope".into(),
            time: 1.0,
            tested: 5,
            positive: 0,
        });
        assert!(bind(&obs, &g, &sites, &grid).is_err());

        let mut bad_time = toy_obs();
        bad_time.survey_hiv[0].time = 99.0;
        assert!(matches!(
            bind(&bad_time, &g, &sites, &grid),
            Err(Error::TimeOutsideGrid { .. })
        ));

        let mut bad_counts = toy_obs();
        bad_counts.survey_hiv[0].positive = 1000;
        assert!(bad_counts.validate().is_err());
    }

    #[test]
    fn site_map_rejects_conflicts() {
        let g = two_region_graph();
        let recs = vec![
            AncRecord {
                site: "x".into(),
                region: "a".into(),
                time: 0.0,
                tested: 10,
                positive: 1,
            },
            AncRecord {
                site: "x".into(),
                region: "b".into(),
                time: 1.0,
                tested: 10,
                positive: 1,
            },
        ];
        assert!(matches!(
            SiteMap::from_anc(&recs, &g),
            Err(Error::SiteRegionConflict { .. })
        ));
    }

    #[test]
    fn grid_index_maps_to_nearest() {
        let grid = vec![2000.0, 2000.1, 2000.2];
        assert_eq!(grid_index(&grid, 2000.1).unwrap(), 1);
        assert_eq!(grid_index(&grid, 2000.14).unwrap(), 1);
        assert!(grid_index(&grid, 2000.9).is_err());
        assert!(grid_index(&grid, 1999.0).is_err());
    }
}
