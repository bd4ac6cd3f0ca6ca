use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown network `{0}` (expected crn0, crn1 or crn2)")]
    UnknownNetwork(String),
    #[error("syntax error at line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("reaction {0}: nonpositive rate constant")]
    NonpositiveRate(usize),
    #[error("reaction {0}: negative stoichiometry")]
    NegativeStoichiometry(usize),
    #[error("reaction {0}: zero reaction vector")]
    ZeroReactionVector(usize),
    #[error("reaction {reaction}: unknown species `{name}`")]
    UnknownSpecies { reaction: usize, name: String },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("component {component} reached {value} at t = {t}, below the clipping tolerance")]
    NegativeState { t: f64, component: usize, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no normalized exit law for crn2: the tube is transient")]
    NoExitLaw,
    #[error("degenerate toric point: log-vector is zero")]
    DegenerateToric,
    #[error("function vanishes at sample ({0}, {1})")]
    ZeroSample(f64, f64),
    #[error("point ({x1}, {x2}) is not in the closure of {region}")]
    RegionMismatch { region: String, x1: u64, x2: u64 },
    #[error("infeasible parameters at {interface}: {detail}")]
    Infeasible { interface: String, detail: String },
    #[error("{0} is not an interface")]
    NotInterface(String),
    #[error("time exceeds H_phi(infinity) = {0}: the comparison solution blows up")]
    NonIntegrable(f64),
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
