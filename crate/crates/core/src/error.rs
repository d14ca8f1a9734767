use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("overlapping sites {0} and {1} after defect insertion")]
    OverlappingSites(usize, usize),

    #[error("defect site at distance {distance} lies outside the defect radius {radius}")]
    DefectOutsideRadius { distance: f64, radius: f64 },

    #[error("period column {0} is not a reference lattice vector")]
    NotALatticeVector(usize),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("defect site at {position:?} touches the boundary of the computational cell")]
    DefectOnBoundary { position: Vec<f64> },

    #[error("displacement is not admissible: sites {0} and {1} reach ratio {2:.6}")]
    NotAdmissible(usize, usize, f64),

    #[error("non-finite matrix entry at ({0}, {1})")]
    NonFinite(usize, usize),

    #[error("chemical potential {mu} collides with spectrum (distance {distance:.3e})")]
    Collision { mu: f64, distance: f64 },

    #[error("degenerate eigenvalue at the Fermi level {0}")]
    DegenerateFermiLevel(f64),

    #[error("electron number {electrons} outside (0, {max})")]
    ElectronCount { electrons: f64, max: f64 },

    #[error("no spectral gap found")]
    NoGap,

    #[error("eigensolver failure: {0}")]
    Eigensolver(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("too few usable points for a fit: {0}")]
    TooFewPoints(usize),
}

impl Error {
    /// Numerical failures (as opposed to invalid input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Collision { .. }
                | Error::DegenerateFermiLevel(_)
                | Error::Eigensolver(_)
                | Error::NoConvergence(_)
                | Error::Singular(_)
                | Error::NoGap
                | Error::NonFinite(..)
                | Error::NotAdmissible(..)
        )
    }
}
