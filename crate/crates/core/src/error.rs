use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("point lies behind the camera (depth {depth})")]
    PointBehindCamera { depth: f64 },
    #[error("normalized depth must be positive, got {0}")]
    InvalidDepth(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("scene has no triangles")]
    EmptyScene,
    #[error("invalid scene mesh: {0}")]
    InvalidMesh(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid body model: {0}")]
    InvalidBodyModel(String),
    #[error("contact region {0} has no vertices")]
    EmptyRegion(usize),

    #[error("heatmap has no positive response")]
    EmptyHeatmap,
    #[error("voxel grid is empty")]
    EmptyGrid,
    #[error("confidences sum to {0}, expected 1")]
    UnnormalizedConfidence(f64),

    #[error("loss must be a scalar, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("unknown parameter {0}")]
    UnknownParameter(String),

    #[error("optimisation diverged at iteration {0}")]
    Diverged(usize),

    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("root projects outside the heatmap")]
    RootOutsideFrustum,
    #[error("empty frame set")]
    EmptyFrameSet,
    #[error("missing checkpoint for {0}")]
    MissingCheckpoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
