use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by graph construction, basis evaluation, the epidemic
/// engine, data ingestion and inference.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate region id `{0}`")]
    DuplicateRegion(String),

    #[error("unknown region id `{0}`")]
    UnknownRegion(String),

    #[error("unknown site id `{0}`")]
    UnknownSite(String),

    #[error("site `{site}` is bound to both region `{first}` and region `{second}`")]
    SiteRegionConflict {
        site: String,
        first: String,
        second: String,
    },

    #[error("self edge on region `{0}`")]
    SelfEdge(String),

    #[error("region `{0}` has nonpositive population {1}")]
    NonPositivePopulation(String, f64),

    #[error("region `{0}` has negative entrant rate {1}")]
    NegativeEntrants(String, f64),

    #[error("graph is disconnected: no adjacency path between `{0}` and `{1}`")]
    Disconnected(String, String),

    #[error("no adjacency path between regions `{0}` and `{1}`")]
    NoPath(String, String),

    #[error("mixing weight w0 must lie in [0, 1], got {0}")]
    InvalidMixingWeight(f64),

    #[error("basis order must be at least 1, got {0}")]
    InvalidOrder(usize),

    #[error("knot interval {interval} is not positive or exceeds domain span {span}")]
    InvalidKnotInterval { interval: f64, span: f64 },

    #[error("basis domain [{t0}, {t_end}] is empty")]
    EmptyDomain { t0: f64, t_end: f64 },

    #[error("grid point {t} lies outside the basis domain [{t0}, {t_end}]")]
    GridOutsideDomain { t: f64, t0: f64, t_end: f64 },

    #[error("grid must be strictly increasing and non-empty")]
    InvalidGrid,

    #[error("grid span [{t0}, {t_end}] is not an integer number of steps of {h}")]
    UnalignedGrid { t0: f64, t_end: f64, h: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid natural history: {0}")]
    InvalidNaturalHistory(String),

    #[error("non-finite state at grid step {step}")]
    NonFiniteState { step: usize },

    #[error("observation time {time} does not map to any grid point")]
    TimeOutsideGrid { time: f64 },

    #[error("binomial record has positive > tested ({positive} > {tested})")]
    PositiveExceedsTested { tested: u64, positive: u64 },

    #[error("negative binomial mean must be positive, got {0}")]
    NonPositiveMean(f64),

    #[error("negative binomial variance {var} does not exceed mean {mean}")]
    DegenerateDispersion { mean: f64, var: f64 },

    #[error("prevalence must lie strictly inside (0, 1), got {0}")]
    PrevalenceOutOfRange(f64),

    #[error("gradient evaluation failed: log-posterior not finite at the requested point")]
    NonFinitePosterior,

    #[error("line search failed after {restarts} restarts; best log-posterior {best}")]
    LineSearchFailure { restarts: usize, best: f64 },

    #[error("sampler pathology: post-warmup acceptance rate {0} below 1%")]
    AllRejection(f64),

    #[error("posterior summary requires at least 2 chains, got {0}")]
    TooFewChains(usize),

    #[error("infeasible scenario: {0}")]
    InfeasibleScenario(String),

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn parse(file: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for failures of numerical evaluation rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteState { .. }
                | Error::NonFinitePosterior
                | Error::DegenerateDispersion { .. }
                | Error::LineSearchFailure { .. }
                | Error::AllRejection(_)
        )
    }
}
