use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion components must be finite with nonzero norm")]
    InvalidQuaternion,

    #[error("bearing ({0}, {1}) outside field-of-view sanity bound")]
    BearingOutOfRange(f64, f64),

    #[error("IMU stream needs at least two samples, got {0}")]
    EmptyImuStream(usize),

    #[error("IMU timestamps not strictly increasing at sample {index}")]
    NonMonotoneImu { index: usize },

    #[error("IMU gap of {gap:.3} s at t={t:.3} exceeds {max:.1} s")]
    ImuDataGap { t: f64, gap: f64, max: f64 },

    #[error("predicted feature depth {0:.4} m behind camera")]
    Cheirality(f64),

    #[error("window with {0} states is underdetermined")]
    Underdetermined(usize),

    #[error("solver diverged: {0}")]
    SolverDiverged(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("duplicate observation of feature {feature} in frame {frame}")]
    DuplicateObservation { feature: u64, frame: u64 },

    #[error("trajectories share only {0} associated poses (need at least 3)")]
    InsufficientOverlap(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
