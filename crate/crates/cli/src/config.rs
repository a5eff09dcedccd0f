//! Run configuration: one TOML file holding paths, grid, natural history,
//! spline and inference settings, and the synthetic-scenario design.
//!
//! Unknown keys are rejected. Relative paths resolve against the directory
//! containing the configuration file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use epifuse::engine::{InfectionEntry, NaturalHistory, STAGES};
use epifuse::inference::{McmcOptions, ModelSettings};
use epifuse::obs::RecencyConstants;
use epifuse::synth::{ScenarioSpec, Topology};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub grid: GridConfig,
    pub mixing: MixingConfig,
    pub seek: SeekConfig,
    pub infection_entry: String,
    pub omega_art: f64,
    pub natural_history: NaturalHistoryConfig,
    pub kappa_spline: SplineConfig,
    pub alpha_spline: SplineConfig,
    pub recency: RecencyConfig,
    pub inference: InferenceConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: PathsConfig::default(),
            grid: GridConfig::default(),
            mixing: MixingConfig::default(),
            seek: SeekConfig::default(),
            infection_entry: "highest_stage".into(),
            omega_art: 0.9,
            natural_history: NaturalHistoryConfig::default(),
            kappa_spline: SplineConfig {
                order: 3,
                knot_interval_years: 5.0,
                zero_before: None,
            },
            alpha_spline: SplineConfig {
                order: 1,
                knot_interval_years: 1.0,
                zero_before: Some(2004.0),
            },
            recency: RecencyConfig::default(),
            inference: InferenceConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub adjacency: String,
    pub population: String,
    pub surveys: String,
    pub anc: String,
    pub art_counts: String,
    /// Parameter file consumed by `simulate`.
    pub params: String,
    /// MAP output/input; empty means `<out>/map.json`.
    pub map: String,
    /// Posterior sample file; empty means `<out>/posterior_samples.csv`.
    pub samples: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            adjacency: "adjacency.csv".into(),
            population: "population.csv".into(),
            surveys: "surveys.csv".into(),
            anc: "anc.csv".into(),
            art_counts: "art_counts.csv".into(),
            params: "params.json".into(),
            map: String::new(),
            samples: String::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub t0: f64,
    pub t_end: f64,
    pub h: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            t0: 2000.0,
            t_end: 2019.0,
            h: 0.1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixingConfig {
    pub w0: f64,
}

impl Default for MixingConfig {
    fn default() -> Self {
        MixingConfig { w0: 0.9 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeekConfig {
    pub degree: usize,
}

impl Default for SeekConfig {
    fn default() -> Self {
        SeekConfig { degree: 2 }
    }
}

/// Placeholder rate tables; see the shipped reference configuration for the
/// documented meaning and units of every entry.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NaturalHistoryConfig {
    pub mu_s: f64,
    pub mu_i: [f64; STAGES],
    pub mu_a: [f64; STAGES],
    pub eta: f64,
    pub tau: [f64; STAGES],
    pub xi: [f64; STAGES],
    /// Explicit initiation propensities; when absent they derive from
    /// untreated mortality ratios `mu_i[c] / mu_i[0]`.
    pub zeta: Option<[f64; STAGES]>,
    pub eligible: [bool; STAGES],
    pub b_rho: [f64; STAGES],
    pub b_alpha: [f64; STAGES],
}

impl Default for NaturalHistoryConfig {
    fn default() -> Self {
        let nh = NaturalHistory::placeholder();
        NaturalHistoryConfig {
            mu_s: nh.mu_s,
            mu_i: nh.mu_i,
            mu_a: nh.mu_a,
            eta: nh.eta,
            tau: nh.tau,
            xi: nh.xi,
            zeta: None,
            eligible: nh.eligible,
            b_rho: nh.b_rho,
            b_alpha: nh.b_alpha,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineConfig {
    pub order: usize,
    pub knot_interval_years: f64,
    #[serde(default)]
    pub zero_before: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecencyConfig {
    pub mean_duration_years: f64,
    pub false_recency_rate: f64,
}

impl Default for RecencyConfig {
    fn default() -> Self {
        let rc = RecencyConstants::default();
        RecencyConfig {
            mean_duration_years: rc.mean_duration_years,
            false_recency_rate: rc.false_recency_rate,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub chains: usize,
    pub iters: usize,
    pub warmup: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            chains: 4,
            iters: 2000,
            warmup: 1000,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub region_count: usize,
    /// One of `path`, `grid`, `complete`.
    pub topology: String,
    pub population_min: f64,
    pub population_max: f64,
    pub entrant_rate: f64,
    pub survey_years: Vec<f64>,
    pub survey_sample: u64,
    pub art_survey_years: Vec<f64>,
    pub art_survey_sample: u64,
    pub recency_years: Vec<f64>,
    pub recency_sample: u64,
    pub anc_sites_per_region: usize,
    pub anc_annual_sample: u64,
    pub count_interval_years: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = ScenarioSpec::default();
        SynthConfig {
            region_count: s.region_count,
            topology: "path".into(),
            population_min: s.population_range.0,
            population_max: s.population_range.1,
            entrant_rate: s.entrant_rate,
            survey_years: s.survey_years,
            survey_sample: s.survey_sample,
            art_survey_years: s.art_survey_years,
            art_survey_sample: s.art_survey_sample,
            recency_years: s.recency_years,
            recency_sample: s.recency_sample,
            anc_sites_per_region: s.anc_sites_per_region,
            anc_annual_sample: s.anc_annual_sample,
            count_interval_years: s.count_interval_years,
        }
    }
}

/// A parsed configuration plus the directory its relative paths resolve
/// against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let config: RunConfig = toml::from_str(&content)
            .map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        config.validate()?;
        let base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(LoadedConfig { config, base_dir })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        let g = &self.grid;
        if !(g.h > 0.0 && g.h <= 1.0) {
            return Err(format!("grid.h must lie in (0, 1], got {}", g.h));
        }
        if g.t_end <= g.t0 {
            return Err(format!(
                "grid.t_end ({}) must exceed grid.t0 ({})",
                g.t_end, g.t0
            ));
        }
        if !(0.0..=1.0).contains(&self.mixing.w0) {
            return Err(format!("mixing.w0 must lie in [0, 1], got {}", self.mixing.w0));
        }
        if !(0.0..=1.0).contains(&self.omega_art) {
            return Err(format!("omega_art must lie in [0, 1], got {}", self.omega_art));
        }
        if self.seek.degree > 30 {
            return Err(format!("seek.degree is implausibly large: {}", self.seek.degree));
        }
        match self.infection_entry.as_str() {
            "highest_stage" | "per_stage_literal" => {}
            other => {
                return Err(format!(
                    "infection_entry must be highest_stage or per_stage_literal, got `{other}`"
                ))
            }
        }
        for spline in [&self.kappa_spline, &self.alpha_spline] {
            if spline.order == 0 {
                return Err("spline order must be at least 1".into());
            }
            if !(spline.knot_interval_years > 0.0) {
                return Err("spline knot interval must be positive".into());
            }
        }
        if self.inference.chains == 0 {
            return Err("inference.chains must be at least 1".into());
        }
        if self.inference.warmup >= self.inference.iters {
            return Err(format!(
                "inference.warmup ({}) must be below inference.iters ({})",
                self.inference.warmup, self.inference.iters
            ));
        }
        if self.synth.region_count == 0 {
            return Err("synth.region_count must be at least 1".into());
        }
        if self.synth.population_min <= 0.0 || self.synth.population_max < self.synth.population_min
        {
            return Err("synth population range must be positive and ordered".into());
        }
        Ok(())
    }

    pub fn natural_history(&self) -> NaturalHistory {
        let c = &self.natural_history;
        let zeta = c.zeta.unwrap_or_else(|| {
            std::array::from_fn(|i| {
                if c.mu_i[0] > 0.0 {
                    c.mu_i[i] / c.mu_i[0]
                } else {
                    1.0
                }
            })
        });
        NaturalHistory {
            mu_s: c.mu_s,
            mu_i: c.mu_i,
            mu_a: c.mu_a,
            eta: c.eta,
            tau: c.tau,
            xi: c.xi,
            zeta,
            eligible: c.eligible,
            omega_art: self.omega_art,
            b_rho: c.b_rho,
            b_alpha: c.b_alpha,
            infection_entry: if self.infection_entry == "per_stage_literal" {
                InfectionEntry::PerStageLiteral
            } else {
                InfectionEntry::HighestStage
            },
        }
    }

    pub fn settings(&self) -> ModelSettings {
        ModelSettings {
            t0: self.grid.t0,
            t_end: self.grid.t_end,
            h: self.grid.h,
            w0: self.mixing.w0,
            seek_degree: self.seek.degree,
            kappa_order: self.kappa_spline.order,
            kappa_knot_interval: self.kappa_spline.knot_interval_years,
            alpha_order: self.alpha_spline.order,
            alpha_knot_interval: self.alpha_spline.knot_interval_years,
            alpha_zero_before: self.alpha_spline.zero_before,
            nh: self.natural_history(),
            recency: RecencyConstants {
                mean_duration_years: self.recency.mean_duration_years,
                false_recency_rate: self.recency.false_recency_rate,
            },
        }
    }

    pub fn scenario_spec(&self) -> Result<ScenarioSpec, String> {
        let s = &self.synth;
        let topology = match s.topology.as_str() {
            "path" => Topology::Path,
            "grid" => Topology::Grid,
            "complete" => Topology::Complete,
            other => return Err(format!("unknown synth.topology `{other}`")),
        };
        Ok(ScenarioSpec {
            region_count: s.region_count,
            topology,
            population_range: (s.population_min, s.population_max),
            entrant_rate: s.entrant_rate,
            survey_years: s.survey_years.clone(),
            survey_sample: s.survey_sample,
            art_survey_years: s.art_survey_years.clone(),
            art_survey_sample: s.art_survey_sample,
            recency_years: s.recency_years.clone(),
            recency_sample: s.recency_sample,
            anc_sites_per_region: s.anc_sites_per_region,
            anc_annual_sample: s.anc_annual_sample,
            count_interval_years: s.count_interval_years,
            ..ScenarioSpec::default()
        })
    }

    pub fn mcmc_options(&self, seed: u64) -> McmcOptions {
        McmcOptions {
            chains: self.inference.chains,
            iters: self.inference.iters,
            warmup: self.inference.warmup,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.inference.chains, 4);
        assert_eq!(cfg.kappa_spline.order, 3);
        assert_eq!(cfg.alpha_spline.zero_before, Some(2004.0));
        let nh = cfg.natural_history();
        nh.validate().unwrap();
        // Default initiation propensities derive from mortality ratios.
        assert!((nh.zeta[1] - nh.mu_i[1] / nh.mu_i[0]).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("nonsense = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[grid]\nt0 = 2000.0\nbogus = 2\n").is_err());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let cfg: RunConfig = toml::from_str("[mixing]\nw0 = 1.5\n").unwrap();
        assert!(cfg.validate().is_err());
        let cfg: RunConfig = toml::from_str("[grid]\nh = 0.0\n").unwrap();
        assert!(cfg.validate().is_err());
        let cfg: RunConfig =
            toml::from_str("[inference]\niters = 100\nwarmup = 100\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
