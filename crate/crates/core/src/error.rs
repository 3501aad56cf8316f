use std::fmt;

use thiserror::Error;

/// Parameters that a motion set fails to excite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Deficiency {
    /// No pair rotates enough: the sensor offset (and the axle length) cannot be recovered.
    RotationDeficient,
    /// No pair translates enough: wheel radii cannot be separated from the axle length.
    TranslationDeficient,
    /// Motion is collinear: the axle length only enters through rotation.
    BDeficient,
}

impl Deficiency {
    pub fn label(self) -> &'static str {
        match self {
            Deficiency::RotationDeficient => "rotation-deficient",
            Deficiency::TranslationDeficient => "translation-deficient",
            Deficiency::BDeficient => "b-deficient",
        }
    }
}

/// Result of an observability check: hard errors and soft warnings.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Diagnosis {
    pub errors: Vec<(Deficiency, Vec<String>)>,
    pub warnings: Vec<(Deficiency, Vec<String>)>,
}

impl Diagnosis {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let describe = |(kind, params): &(Deficiency, Vec<String>)| {
            let extra = match kind {
                Deficiency::RotationDeficient => "; ℓ_θ is only constrained by translation direction",
                _ => "",
            };
            format!("{} (unobservable: {}{})", kind.label(), params.join(", "), extra)
        };
        let errs: Vec<String> = self.errors.iter().map(describe).collect();
        let warns: Vec<String> = self.warnings.iter().map(describe).collect();
        write!(f, "{}", errs.join("; "))?;
        if !warns.is_empty() {
            write!(f, " [warning: {}]", warns.join("; "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("time interval must be positive, got {0}")]
    NonPositiveInterval(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("singular configuration: {0}")]
    Singular(String),
    #[error("scan match failed: mean kept squared distance {mean_sq:.3e} exceeds {threshold:.3e}")]
    MatchFailure { mean_sq: f64, threshold: f64 },
    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),
    #[error("observability: {0}")]
    Observability(Diagnosis),
    #[error("ill-conditioned normal equations, null direction along {params:?}")]
    IllConditioned { params: Vec<String> },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("conditioning: {0}")]
    Conditioning(String),
    #[error("rank-deficient design; unexcited wheel combinations: {0:?}")]
    RankDeficient(Vec<Vec<f64>>),
    #[error("did not converge: {0}")]
    Convergence(String),
    #[error("coverage: only {visible} landmarks visible at t = {t}")]
    Coverage { t: f64, visible: usize },
    #[error("association: {0}")]
    Association(String),
    #[error("odometry gap: {0}")]
    OdometryGap(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_) | Error::DimensionMismatch { .. } => 2,
            Error::Observability(_) | Error::InsufficientExcitation(_) | Error::IllConditioned { .. } => 3,
            Error::Convergence(_) | Error::MatchFailure { .. } => 4,
            Error::Conditioning(_) | Error::Singular(_) | Error::Numerical(_) | Error::RankDeficient(_) => 5,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
