//! Readers and writers for every file format in the pipeline.
//!
//! CSV files are comma-separated, header-required, UTF-8, with no quoting.
//! Files written here start with a `# schema_version: 1` comment line;
//! readers skip `#` comments, so generated files re-ingest cleanly. Floats
//! are written in shortest round-trip form, which keeps repeated runs
//! byte-identical and re-ingestion exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::Trajectories;
use crate::error::{Error, Result};
use crate::graph::RegionSpec;
use crate::inference::mcmc::ChainSet;
use crate::inference::PosteriorSummary;
use crate::obs::{AncRecord, BinomRecord, CountRecord, ObservationSet};
use crate::params::ParameterVector;

pub const SCHEMA_VERSION: u32 = 1;

fn schema_line() -> String {
    format!("# schema_version: {SCHEMA_VERSION}")
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_string(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
    }
    fs::write(path, content).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Non-comment, non-empty lines with their 1-based numbers.
fn data_lines(content: &str) -> Vec<(usize, &str)> {
    content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

fn check_header(path: &Path, got: &str, want: &str) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::parse(
            path.display().to_string(),
            0,
            format!("expected header `{want}`, got `{got}`"),
        ))
    }
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    field: &str,
    value: &str,
) -> Result<T> {
    value.parse().map_err(|_| {
        Error::parse(
            path.display().to_string(),
            line,
            format!("cannot parse {field} from `{value}`"),
        )
    })
}

fn expect_fields<'a>(
    path: &Path,
    line: usize,
    raw: &'a str,
    n: usize,
) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
    if fields.len() != n {
        return Err(Error::parse(
            path.display().to_string(),
            line,
            format!("expected {n} fields, got {}", fields.len()),
        ));
    }
    Ok(fields)
}

const ADJACENCY_HEADER: &str = "region_a,region_b";
const POPULATION_HEADER: &str = "region_id,population_t0,entrants_per_year";
const SURVEYS_HEADER: &str = "source_id,kind,region_id,time,tested,positive";
const ANC_HEADER: &str = "site_id,region_id,time,tested,positive";
const COUNTS_HEADER: &str = "region_id,time,count";
const TRAJECTORIES_HEADER: &str = "region_id,time,rho,alpha,lambda,art_resident,art_facility,N";

pub fn read_adjacency(path: &Path) -> Result<Vec<(String, String)>> {
    let content = read_to_string(path)?;
    let lines = data_lines(&content);
    let Some(((_, header), rows)) = lines.split_first() else {
        return Err(Error::parse(path.display().to_string(), 0, "empty file"));
    };
    check_header(path, header, ADJACENCY_HEADER)?;
    let mut edges = Vec::with_capacity(rows.len());
    for (ln, raw) in rows {
        let f = expect_fields(path, *ln, raw, 2)?;
        edges.push((f[0].to_string(), f[1].to_string()));
    }
    Ok(edges)
}

pub fn write_adjacency(path: &Path, edges: &[(String, String)]) -> Result<()> {
    let mut out = format!("{}\n{ADJACENCY_HEADER}\n", schema_line());
    for (a, b) in edges {
        writeln!(out, "{a},{b}").unwrap();
    }
    write_string(path, &out)
}

pub fn read_population(path: &Path) -> Result<Vec<RegionSpec>> {
    let content = read_to_string(path)?;
    let lines = data_lines(&content);
    let Some(((_, header), rows)) = lines.split_first() else {
        return Err(Error::parse(path.display().to_string(), 0, "empty file"));
    };
    check_header(path, header, POPULATION_HEADER)?;
    let mut regions = Vec::with_capacity(rows.len());
    for (ln, raw) in rows {
        let f = expect_fields(path, *ln, raw, 3)?;
        regions.push(RegionSpec {
            id: f[0].to_string(),
            population: parse_field(path, *ln, "population_t0", f[1])?,
            entrants_per_year: parse_field(path, *ln, "entrants_per_year", f[2])?,
        });
    }
    Ok(regions)
}

pub fn write_population(path: &Path, regions: &[RegionSpec]) -> Result<()> {
    let mut out = format!("{}\n{POPULATION_HEADER}\n", schema_line());
    for r in regions {
        writeln!(out, "{},{},{}", r.id, r.population, r.entrants_per_year).unwrap();
    }
    write_string(path, &out)
}

pub fn read_surveys(path: &Path) -> Result<(Vec<BinomRecord>, Vec<BinomRecord>, Vec<BinomRecord>)> {
    let content = read_to_string(path)?;
    let lines = data_lines(&content);
    let Some(((_, header), rows)) = lines.split_first() else {
        return Err(Error::parse(path.display().to_string(), 0, "empty file"));
    };
    check_header(path, header, SURVEYS_HEADER)?;
    let (mut hiv, mut art, mut recency) = (Vec::new(), Vec::new(), Vec::new());
    for (ln, raw) in rows {
        let f = expect_fields(path, *ln, raw, 6)?;
        let rec = BinomRecord {
            source: f[0].to_string(),
            region: f[2].to_string(),
            time: parse_field(path, *ln, "time", f[3])?,
            tested: parse_field(path, *ln, "tested", f[4])?,
            positive: parse_field(path, *ln, "positive", f[5])?,
        };
        match f[1] {
            "hiv" => hiv.push(rec),
            "art" => art.push(rec),
            "recency" => recency.push(rec),
            other => {
                return Err(Error::parse(
                    path.display().to_string(),
                    *ln,
                    format!("unknown survey kind `{other}` (expected hiv|art|recency)"),
                ))
            }
        }
    }
    Ok((hiv, art, recency))
}

pub fn write_surveys(
    path: &Path,
    hiv: &[BinomRecord],
    art: &[BinomRecord],
    recency: &[BinomRecord],
) -> Result<()> {
    let mut out = format!("{}\n{SURVEYS_HEADER}\n", schema_line());
    let mut push = |kind: &str, rec: &BinomRecord| {
        writeln!(
            out,
            "{},{kind},{},{},{},{}",
            rec.source, rec.region, rec.time, rec.tested, rec.positive
        )
        .unwrap();
    };
    for rec in hiv {
        push("hiv", rec);
    }
    for rec in art {
        push("art", rec);
    }
    for rec in recency {
        push("recency", rec);
    }
    write_string(path, &out)
}

pub fn read_anc(path: &Path) -> Result<Vec<AncRecord>> {
    let content = read_to_string(path)?;
    let lines = data_lines(&content);
    let Some(((_, header), rows)) = lines.split_first() else {
        return Err(Error::parse(path.display().to_string(), 0, "empty file"));
    };
    check_header(path, header, ANC_HEADER)?;
    let mut recs = Vec::with_capacity(rows.len());
    for (ln, raw) in rows {
        let f = expect_fields(path, *ln, raw, 5)?;
        recs.push(AncRecord {
            site: f[0].to_string(),
            region: f[1].to_string(),
            time: parse_field(path, *ln, "time", f[2])?,
            tested: parse_field(path, *ln, "tested", f[3])?,
            positive: parse_field(path, *ln, "positive", f[4])?,
        });
    }
    Ok(recs)
}

pub fn write_anc(path: &Path, recs: &[AncRecord]) -> Result<()> {
    let mut out = format!("{}\n{ANC_HEADER}\n", schema_line());
    for r in recs {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.site, r.region, r.time, r.tested, r.positive
        )
        .unwrap();
    }
    write_string(path, &out)
}

pub fn read_art_counts(path: &Path) -> Result<Vec<CountRecord>> {
    let content = read_to_string(path)?;
    let lines = data_lines(&content);
    let Some(((_, header), rows)) = lines.split_first() else {
        return Err(Error::parse(path.display().to_string(), 0, "empty file"));
    };
    check_header(path, header, COUNTS_HEADER)?;
    let mut recs = Vec::with_capacity(rows.len());
    for (ln, raw) in rows {
        let f = expect_fields(path, *ln, raw, 3)?;
        recs.push(CountRecord {
            region: f[0].to_string(),
            time: parse_field(path, *ln, "time", f[1])?,
            count: parse_field(path, *ln, "count", f[2])?,
        });
    }
    Ok(recs)
}

pub fn write_art_counts(path: &Path, recs: &[CountRecord]) -> Result<()> {
    let mut out = format!("{}\n{COUNTS_HEADER}\n", schema_line());
    for r in recs {
        writeln!(out, "{},{},{}", r.region, r.time, r.count).unwrap();
    }
    write_string(path, &out)
}

/// Observation files named by a fit configuration.
pub fn read_observations(
    surveys: &Path,
    anc: &Path,
    art_counts: &Path,
) -> Result<ObservationSet> {
    let (survey_hiv, survey_art, recency) = read_surveys(surveys)?;
    Ok(ObservationSet {
        survey_hiv,
        survey_art,
        recency,
        anc: read_anc(anc)?,
        art_counts: read_art_counts(art_counts)?,
    })
}

/// Trajectory table with facility-reallocated ART counts alongside the
/// resident series.
pub fn write_trajectories(
    path: &Path,
    traj: &Trajectories<f64>,
    region_ids: &[String],
    art_facility: &[Vec<f64>],
) -> Result<()> {
    let mut out = format!("{}\n{TRAJECTORIES_HEADER}\n", schema_line());
    for (r, rid) in region_ids.iter().enumerate() {
        for (t, &time) in traj.grid.iter().enumerate() {
            writeln!(
                out,
                "{rid},{time},{},{},{},{},{},{}",
                traj.rho[r][t],
                traj.alpha[r][t],
                traj.lambda[r][t],
                traj.art[r][t],
                art_facility[r][t],
                traj.n[r][t]
            )
            .unwrap();
        }
    }
    write_string(path, &out)
}

/// `chain,iteration,<parameter names...>` on the unconstrained scale.
pub fn write_posterior_samples(path: &Path, names: &[String], chains: &ChainSet) -> Result<()> {
    let mut out = format!("{}\nchain,iteration,{}\n", schema_line(), names.join(","));
    for (c, chain) in chains.draws.iter().enumerate() {
        for (i, draw) in chain.iter().enumerate() {
            write!(out, "{c},{i}").unwrap();
            for v in draw {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    write_string(path, &out)
}

/// Read back a posterior sample file; returns parameter names and draws per
/// chain in file order.
pub fn read_posterior_samples(path: &Path) -> Result<(Vec<String>, Vec<Vec<Vec<f64>>>)> {
    let content = read_to_string(path)?;
    let lines = data_lines(&content);
    let Some(((_, header), rows)) = lines.split_first() else {
        return Err(Error::parse(path.display().to_string(), 0, "empty file"));
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "chain" || cols[1] != "iteration" {
        return Err(Error::parse(
            path.display().to_string(),
            0,
            "expected header `chain,iteration,<parameters...>`",
        ));
    }
    let names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let mut chains: Vec<Vec<Vec<f64>>> = Vec::new();
    for (ln, raw) in rows {
        let f = expect_fields(path, *ln, raw, names.len() + 2)?;
        let chain: usize = parse_field(path, *ln, "chain", f[0])?;
        while chains.len() <= chain {
            chains.push(Vec::new());
        }
        let mut draw = Vec::with_capacity(names.len());
        for v in &f[2..] {
            draw.push(parse_field(path, *ln, "sample value", v)?);
        }
        chains[chain].push(draw);
    }
    Ok((names, chains))
}

/// Parameter file consumed by the forward-simulation command and embedded in
/// scenario truth files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub schema_version: u32,
    pub params: ParameterVector<f64>,
}

/// MAP output: mode, covariance and fit diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapDocument {
    pub schema_version: u32,
    pub converged: bool,
    pub iterations: usize,
    pub grad_max_norm: f64,
    pub log_posterior: f64,
    pub restarts: usize,
    pub line_search_failures: usize,
    pub hessian_positive_definite: bool,
    pub param_names: Vec<String>,
    pub mode: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

/// Per-region yearly series of a scenario's true trajectories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSeries {
    pub years: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub art_resident: Vec<Vec<f64>>,
    pub art_facility: Vec<Vec<f64>>,
}

/// Ground truth emitted next to synthetic data sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthDocument {
    pub schema_version: u32,
    pub seed: u64,
    pub region_ids: Vec<String>,
    pub site_ids: Vec<String>,
    pub params: ParameterVector<f64>,
    pub series: TruthSeries,
}

/// Posterior summary with a schema marker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryDocument {
    pub schema_version: u32,
    #[serde(flatten)]
    pub summary: PosteriorSummary,
}

pub fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(doc).map_err(|e| Error::Json {
        context: format!("serializing {}", path.display()),
        source: e,
    })?;
    body.push('\n');
    write_string(path, &body)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let content = read_to_string(path)?;
    serde_json::from_str(&content).map_err(|e| Error::Json {
        context: format!("parsing {}", path.display()),
        source: e,
    })
}
