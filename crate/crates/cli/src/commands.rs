//! The five pipeline commands: synth, simulate, fit, sample, summarize.

use std::fs;
use std::path::{Path, PathBuf};

use epifuse::engine::{self, Trajectories};
use epifuse::graph::{mixing_weights, RegionGraph};
use epifuse::inference::{
    map_fit, sample_posterior, summarize, MapOptions, ModelCtx,
};
use epifuse::io::{self, MapDocument, ParamsDocument, SummaryDocument, TruthDocument, TruthSeries};
use epifuse::obs::{seek_probabilities, reallocate_patients, ObservationSet, SiteMap};
use epifuse::params::ParameterVector;
use epifuse::spline::{make_basis, BasisSpec};
use epifuse::synth::{generate_scenario, simulate_observations};
use epifuse::Error as CoreError;

use crate::config::LoadedConfig;

/// Exit-code carrying error.
#[derive(Debug)]
pub enum CliError {
    /// Bad usage, configuration or input files (exit 1).
    Config(String),
    /// Numerical failure during evaluation (exit 2).
    Numeric(String),
    /// The run finished but did not converge (exit 3).
    NotConverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::NotConverged(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::NotConverged(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

pub type CmdResult = Result<(), CliError>;

/// Lock file guarding an output directory against concurrent runs.
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
        let path = out.join(".epifuse.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutDirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Config(
                format!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    out.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(CliError::Config(format!(
                "cannot create lock {}: {e}",
                path.display()
            ))),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn map_path(loaded: &LoadedConfig, out: &Path) -> PathBuf {
    if loaded.config.paths.map.is_empty() {
        out.join("map.json")
    } else {
        loaded.resolve(&loaded.config.paths.map)
    }
}

fn samples_path(loaded: &LoadedConfig, out: &Path) -> PathBuf {
    if loaded.config.paths.samples.is_empty() {
        out.join("posterior_samples.csv")
    } else {
        loaded.resolve(&loaded.config.paths.samples)
    }
}

fn load_graph(loaded: &LoadedConfig) -> Result<RegionGraph, CliError> {
    let regions = io::read_population(&loaded.resolve(&loaded.config.paths.population))?;
    let edges = io::read_adjacency(&loaded.resolve(&loaded.config.paths.adjacency))?;
    Ok(RegionGraph::build(&regions, &edges)?)
}

fn load_observations(loaded: &LoadedConfig) -> Result<ObservationSet, CliError> {
    Ok(io::read_observations(
        &loaded.resolve(&loaded.config.paths.surveys),
        &loaded.resolve(&loaded.config.paths.anc),
        &loaded.resolve(&loaded.config.paths.art_counts),
    )?)
}

fn build_ctx(loaded: &LoadedConfig, obs: &ObservationSet) -> Result<ModelCtx, CliError> {
    let graph = load_graph(loaded)?;
    let sites = SiteMap::from_anc(&obs.anc, &graph)?;
    Ok(ModelCtx::new(loaded.config.settings(), graph, sites)?)
}

/// Facility-reallocated ART counts over the whole grid.
fn facility_series(
    traj: &Trajectories<f64>,
    pi: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let regions = traj.n_regions();
    let steps = traj.grid.len();
    let mut out = vec![vec![0.0; steps]; regions];
    for t in 0..steps {
        let art_t: Vec<f64> = (0..regions).map(|r| traj.art[r][t]).collect();
        let star = reallocate_patients(&art_t, pi);
        for r in 0..regions {
            out[r][t] = star[r];
        }
    }
    out
}

fn yearly(series: &[Vec<f64>], grid: &[f64], years: &[f64]) -> Vec<Vec<f64>> {
    series
        .iter()
        .map(|row| {
            years
                .iter()
                .map(|&y| {
                    let idx = epifuse::obs::grid_index(grid, y).expect("year on grid");
                    row[idx]
                })
                .collect()
        })
        .collect()
}

/// Generate a synthetic scenario and its observation files.
pub fn cmd_synth(loaded: &LoadedConfig, out: &Path, seed: u64) -> CmdResult {
    let _lock = OutDirLock::acquire(out)?;
    let spec = loaded.config.scenario_spec().map_err(CliError::Config)?;
    let settings = loaded.config.settings();
    let scenario = generate_scenario(&spec, &settings, seed)?;
    let ctx = &scenario.ctx;
    let traj = ctx.project(&scenario.truth)?;
    if traj.clamp_events > 0 {
        eprintln!(
            "warning: projection clamped {} compartment updates (total mass {:.3})",
            traj.clamp_events, traj.clamp_shortfall
        );
    }
    let obs = simulate_observations(&traj, &scenario.truth, ctx, &spec, seed)?;

    let regions: Vec<epifuse::graph::RegionSpec> = (0..ctx.graph.len())
        .map(|r| epifuse::graph::RegionSpec {
            id: ctx.graph.id(r).to_string(),
            population: ctx.graph.population(r),
            entrants_per_year: ctx.graph.entrants_per_year(r),
        })
        .collect();
    let mut edges = Vec::new();
    for r in 0..ctx.graph.len() {
        for &j in ctx.graph.neighbors(r) {
            if j > r {
                edges.push((ctx.graph.id(r).to_string(), ctx.graph.id(j).to_string()));
            }
        }
    }
    io::write_population(&out.join("population.csv"), &regions)?;
    io::write_adjacency(&out.join("adjacency.csv"), &edges)?;
    io::write_surveys(
        &out.join("surveys.csv"),
        &obs.survey_hiv,
        &obs.survey_art,
        &obs.recency,
    )?;
    io::write_anc(&out.join("anc.csv"), &obs.anc)?;
    io::write_art_counts(&out.join("art_counts.csv"), &obs.art_counts)?;

    let pi = ctx.seek_pi(&scenario.truth.log_m);
    let facility = facility_series(&traj, &pi);
    let years: Vec<f64> = {
        let first = ctx.grid[0].ceil() as i64;
        let last = ctx.grid[ctx.grid.len() - 1].floor() as i64;
        (first..=last).map(|y| y as f64).collect()
    };
    let truth_doc = TruthDocument {
        schema_version: io::SCHEMA_VERSION,
        seed,
        region_ids: ctx.graph.ids().to_vec(),
        site_ids: ctx.sites.ids.clone(),
        params: scenario.truth.clone(),
        series: TruthSeries {
            years: years.clone(),
            rho: yearly(&traj.rho, &ctx.grid, &years),
            lambda: yearly(&traj.lambda, &ctx.grid, &years),
            alpha: yearly(&traj.alpha, &ctx.grid, &years),
            art_resident: yearly(&traj.art, &ctx.grid, &years),
            art_facility: yearly(&facility, &ctx.grid, &years),
        },
    };
    io::write_json(&out.join("truth.json"), &truth_doc)?;
    println!(
        "synth: wrote {} regions, {} observation records to {}",
        ctx.graph.len(),
        obs.total_records(),
        out.display()
    );
    Ok(())
}

/// Project trajectories for a supplied parameter file.
pub fn cmd_simulate(loaded: &LoadedConfig, out: &Path) -> CmdResult {
    let _lock = OutDirLock::acquire(out)?;
    let graph = load_graph(loaded)?;
    let settings = loaded.config.settings();
    let doc: ParamsDocument = io::read_json(&loaded.resolve(&loaded.config.paths.params))?;
    let params = doc.params;

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
    let traj = engine::project(
        &params.epidemic(),
        &settings.nh,
        &graph,
        &weights,
        &grid,
        &kappa_basis,
        &alpha_basis,
    )?;
    let pi = seek_probabilities(&params.log_m, &graph, settings.seek_degree)?;
    let facility = facility_series(&traj, &pi);
    io::write_trajectories(
        &out.join("trajectories.csv"),
        &traj,
        graph.ids(),
        &facility,
    )?;
    println!(
        "simulate: wrote {} rows to {}",
        graph.len() * grid.len(),
        out.join("trajectories.csv").display()
    );
    Ok(())
}

/// MAP fit: writes map.json; exit 3 when the optimizer did not converge.
pub fn cmd_fit(loaded: &LoadedConfig, out: &Path, seed: u64) -> CmdResult {
    let _lock = OutDirLock::acquire(out)?;
    let obs = load_observations(loaded)?;
    let ctx = build_ctx(loaded, &obs)?;
    let bound = ctx.bind_observations(&obs)?;
    if bound.dropped_zero_tested > 0 {
        eprintln!(
            "warning: dropped {} records with zero trials",
            bound.dropped_zero_tested
        );
    }
    let init = ctx.init_params();
    let fit = map_fit(&init, &ctx, &bound, &MapOptions::default(), seed)?;
    let doc = MapDocument {
        schema_version: io::SCHEMA_VERSION,
        converged: fit.diagnostics.converged,
        iterations: fit.diagnostics.iterations,
        grad_max_norm: fit.diagnostics.grad_max_norm,
        log_posterior: fit.diagnostics.value,
        restarts: fit.diagnostics.restarts,
        line_search_failures: fit.diagnostics.line_search_failures,
        hessian_positive_definite: fit.hessian_pd,
        param_names: ctx.param_names(),
        mode: fit.mode_flat.clone(),
        covariance: (0..fit.covariance.nrows())
            .map(|i| fit.covariance.row(i).iter().copied().collect())
            .collect(),
    };
    io::write_json(&map_path(loaded, out), &doc)?;
    println!(
        "fit: log-posterior {:.3}, gradient max-norm {:.2e}, {} iterations",
        fit.diagnostics.value, fit.diagnostics.grad_max_norm, fit.diagnostics.iterations
    );
    if !fit.diagnostics.converged {
        return Err(CliError::NotConverged(format!(
            "MAP fit did not reach the gradient tolerance (max-norm {:.2e}); partial output written with converged=false",
            fit.diagnostics.grad_max_norm
        )));
    }
    Ok(())
}

/// Posterior sampling from a saved MAP fit.
pub fn cmd_sample(
    loaded: &LoadedConfig,
    out: &Path,
    seed: u64,
    overrides: &super::InferenceOverrides,
) -> CmdResult {
    let _lock = OutDirLock::acquire(out)?;
    let obs = load_observations(loaded)?;
    let ctx = build_ctx(loaded, &obs)?;
    let bound = ctx.bind_observations(&obs)?;
    let map_doc: MapDocument = io::read_json(&map_path(loaded, out))?;
    if map_doc.mode.len() != ctx.dims.total() {
        return Err(CliError::Config(format!(
            "map file has {} parameters but the model needs {}",
            map_doc.mode.len(),
            ctx.dims.total()
        )));
    }
    let n = map_doc.mode.len();
    let cov = nalgebra_from_rows(&map_doc.covariance, n)?;
    let mut opts = loaded.config.mcmc_options(seed);
    overrides.apply(&mut opts);
    let chains = sample_posterior(&map_doc.mode, &cov, &ctx, &bound, &opts)?;
    io::write_posterior_samples(&samples_path(loaded, out), &ctx.param_names(), &chains)?;
    println!(
        "sample: {} chains x {} retained draws, acceptance {:.3}",
        chains.n_chains(),
        chains.retained_per_chain(),
        chains.acceptance
    );
    if chains.acceptance < 0.01 {
        return Err(CliError::NotConverged(format!(
            "post-warmup acceptance rate {:.4} is below 1%; samples written for inspection",
            chains.acceptance
        )));
    }
    Ok(())
}

fn nalgebra_from_rows(
    rows: &[Vec<f64>],
    n: usize,
) -> Result<epifuse::inference::CovMatrix<f64>, CliError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Config(
            "covariance in map file is not square or does not match the mode length".into(),
        ));
    }
    Ok(epifuse::inference::CovMatrix::from_fn(n, n, |i, j| {
        rows[i][j]
    }))
}

/// Summarize a posterior sample file into summary.json.
pub fn cmd_summarize(loaded: &LoadedConfig, out: &Path) -> CmdResult {
    let _lock = OutDirLock::acquire(out)?;
    let obs = load_observations(loaded)?;
    let ctx = build_ctx(loaded, &obs)?;
    let (names, draws) = io::read_posterior_samples(&samples_path(loaded, out))?;
    let expected = ctx.param_names();
    if names != expected {
        return Err(CliError::Config(
            "sample file parameter names do not match the configured model".into(),
        ));
    }
    let chains = epifuse::inference::ChainSet {
        draws,
        acceptance: f64::NAN,
        per_chain_acceptance: Vec::new(),
        move_acceptance: Vec::new(),
    };
    let summary = summarize(&chains, &ctx)?;
    let doc = SummaryDocument {
        schema_version: io::SCHEMA_VERSION,
        summary,
    };
    io::write_json(&out.join("summary.json"), &doc)?;
    println!("summarize: wrote {}", out.join("summary.json").display());
    Ok(())
}

/// Validate a params file against the configured model dimensions.
#[allow(dead_code)]
fn check_params_dims(params: &ParameterVector<f64>, ctx: &ModelCtx) -> Result<(), CliError> {
    if params.dims() != ctx.dims {
        return Err(CliError::Config(
            "parameter file dimensions do not match the configured model".into(),
        ));
    }
    Ok(())
}
