//! Process exit codes.

use goalscan::corpus::CorpusError;
use goalscan::evaluation::EvalError;
use goalscan::gateway::GatewayError;
use goalscan::selection::SelectionError;
use goalscan::tuner::TuneError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Other,
    /// Bad or missing configuration or input files.
    Config,
    /// Inputs present but unusable for the requested operation.
    Precondition,
    /// Model or embedding backend failure.
    Backend,
    /// Some requested work failed; partial outputs were written.
    Partial,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Other => 1,
            Kind::Config => 2,
            Kind::Precondition => 3,
            Kind::Backend => 4,
            Kind::Partial => 5,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self::new(Kind::Config, error)
    }

    pub fn other(error: impl Into<anyhow::Error>) -> Self {
        Self::new(Kind::Other, error)
    }
}

pub fn gateway_kind(e: &GatewayError) -> Kind {
    match e {
        GatewayError::Config(_) | GatewayError::InvalidRequest(_) => Kind::Config,
        _ => Kind::Backend,
    }
}

pub fn selection_kind(e: &SelectionError) -> Kind {
    match e {
        SelectionError::Gateway(g) => gateway_kind(g),
        SelectionError::Io(_) | SelectionError::Format { .. } => Kind::Config,
        _ => Kind::Precondition,
    }
}

pub fn eval_kind(e: &EvalError) -> Kind {
    match e {
        _ if e.is_precondition() => Kind::Precondition,
        EvalError::Gateway(g) => gateway_kind(g),
        EvalError::Selection(s) => selection_kind(s),
        _ => Kind::Other,
    }
}

pub fn tune_kind(e: &TuneError) -> Kind {
    match e {
        TuneError::Config(_) => Kind::Config,
        TuneError::Eval(e) => eval_kind(e),
        TuneError::Gateway(g) => gateway_kind(g),
        TuneError::Prompt(_) => Kind::Other,
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        Failure::config(e)
    }
}

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        Failure::new(gateway_kind(&e), e)
    }
}

impl From<SelectionError> for Failure {
    fn from(e: SelectionError) -> Self {
        Failure::new(selection_kind(&e), e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::new(eval_kind(&e), e)
    }
}
