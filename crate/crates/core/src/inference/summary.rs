//! Posterior summaries: per-scalar and per-derived-series medians, central
//! 95% intervals, split-R-hat and effective sample size.
//!
//! Derived series are computed by re-projecting every retained draw and
//! collecting values on a yearly thinned grid, so their intervals reflect
//! the full nonlinear mapping rather than a local approximation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::STAGES;
use crate::error::{Error, Result};
use crate::obs::reallocate_patients;
use crate::params::ParameterVector;

use super::diag::{bulk_ess, median, quantile, split_rhat};
use super::mcmc::ChainSet;
use super::ModelCtx;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub rhat: f64,
    pub ess: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub chains: usize,
    pub retained_per_chain: usize,
    pub acceptance: f64,
}

/// Nested summary: scalar parameters by name, and derived series keyed as
/// series -> region -> column (year label, destination region, ...).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub diagnostics: SamplerDiagnostics,
    pub parameters: BTreeMap<String, SummaryEntry>,
    pub series: BTreeMap<String, BTreeMap<String, BTreeMap<String, SummaryEntry>>>,
}

pub(crate) const STAGE_LABELS: [&str; STAGES] = [
    "cd4_0_200",
    "cd4_200_350",
    "cd4_350_500",
    "cd4_500plus",
];

fn entry_from_chains(chains: &[Vec<f64>]) -> SummaryEntry {
    let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    SummaryEntry {
        median: median(&pooled),
        lo95: quantile(&pooled, 0.025),
        hi95: quantile(&pooled, 0.975),
        rhat: split_rhat(chains),
        ess: bulk_ess(chains),
    }
}

/// Yearly grid indices with display labels.
fn yearly_indices(grid: &[f64]) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    let first = grid[0].ceil() as i64;
    let last = grid[grid.len() - 1].floor() as i64;
    for year in first..=last {
        if let Ok(idx) = crate::obs::grid_index(grid, year as f64) {
            out.push((format!("{year}"), idx));
        }
    }
    out
}

/// Per-draw derived values for one chain, flattened in a fixed layout.
struct SeriesLayout {
    years: Vec<(String, usize)>,
    regions: usize,
    /// Destination lists per home region, mirroring the close sets.
    pi_dests: Vec<Vec<usize>>,
}

impl SeriesLayout {
    fn width(&self) -> usize {
        let per_region_year = 4 + STAGES;
        let pi: usize = self.pi_dests.iter().map(Vec::len).sum();
        self.regions * self.years.len() * per_region_year + pi
    }
}

fn derived_row(p: &ParameterVector<f64>, ctx: &ModelCtx, layout: &SeriesLayout) -> Result<Vec<f64>> {
    let traj = ctx.project(p)?;
    let pi = ctx.seek_pi(&p.log_m);
    let mut row = Vec::with_capacity(layout.width());
    for r in 0..layout.regions {
        for (_, t) in &layout.years {
            let art_t: Vec<f64> = (0..layout.regions).map(|j| traj.art[j][*t]).collect();
            let star = reallocate_patients(&art_t, &pi);
            row.push(traj.rho[r][*t]);
            row.push(traj.lambda[r][*t]);
            row.push(traj.alpha[r][*t]);
            row.push(star[r]);
            for c in 0..STAGES {
                row.push(traj.alpha_star[r][*t][c]);
            }
        }
    }
    for (r, dests) in layout.pi_dests.iter().enumerate() {
        for &j in dests {
            row.push(pi[r][j]);
        }
    }
    Ok(row)
}

/// Summarize retained draws: every scalar parameter plus the derived series
/// (prevalence, incidence, coverage, facility counts, initiation rates and
/// treatment-seeking shares). Requires at least two chains.
pub fn summarize(chains: &ChainSet, ctx: &ModelCtx) -> Result<PosteriorSummary> {
    if chains.n_chains() < 2 {
        return Err(Error::TooFewChains(chains.n_chains()));
    }
    let names = ctx.param_names();
    let mut parameters = BTreeMap::new();
    for (k, name) in names.iter().enumerate() {
        parameters.insert(name.clone(), entry_from_chains(&chains.scalar_series(k)));
    }

    let layout = SeriesLayout {
        years: yearly_indices(&ctx.grid),
        regions: ctx.graph.len(),
        pi_dests: ctx
            .close
            .iter()
            .map(|cs| cs.iter().map(|&(j, _)| j).collect())
            .collect(),
    };

    // Re-project every retained draw, chains in parallel.
    let per_chain_rows: Vec<Result<Vec<Vec<f64>>>> = chains
        .draws
        .par_iter()
        .map(|chain| {
            chain
                .iter()
                .map(|flat| {
                    let p = ParameterVector::unpack(flat, &ctx.dims)?;
                    derived_row(&p, ctx, &layout)
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(chains.n_chains());
    for r in per_chain_rows {
        rows.push(r?);
    }

    let column = |col: usize| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|chain| chain.iter().map(|row| row[col]).collect())
            .collect()
    };

    let mut series: BTreeMap<String, BTreeMap<String, BTreeMap<String, SummaryEntry>>> =
        BTreeMap::new();
    let series_names: Vec<String> = {
        let mut v = vec![
            "rho".to_string(),
            "lambda".to_string(),
            "alpha".to_string(),
            "art_facility".to_string(),
        ];
        for label in STAGE_LABELS {
            v.push(format!("alpha_star_{label}"));
        }
        v
    };
    let mut col = 0usize;
    for r in 0..layout.regions {
        let rid = ctx.graph.id(r).to_string();
        for (label, _) in &layout.years {
            for s in &series_names {
                let entry = entry_from_chains(&column(col));
                series
                    .entry(s.clone())
                    .or_default()
                    .entry(rid.clone())
                    .or_default()
                    .insert(label.clone(), entry);
                col += 1;
            }
        }
    }
    for (r, dests) in layout.pi_dests.iter().enumerate() {
        let rid = ctx.graph.id(r).to_string();
        for &j in dests {
            let entry = entry_from_chains(&column(col));
            series
                .entry("pi".to_string())
                .or_default()
                .entry(rid.clone())
                .or_default()
                .insert(ctx.graph.id(j).to_string(), entry);
            col += 1;
        }
    }

    Ok(PosteriorSummary {
        diagnostics: SamplerDiagnostics {
            chains: chains.n_chains(),
            retained_per_chain: chains.retained_per_chain(),
            acceptance: chains.acceptance,
        },
        parameters,
        series,
    })
}
