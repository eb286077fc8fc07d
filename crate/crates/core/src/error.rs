use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("homography is singular (|det| below tolerance)")]
    SingularHomography,
    #[error("corner correspondences are degenerate (reciprocal condition {rcond:e})")]
    DegenerateCorners { rcond: f64 },
    #[error("control points {0} and {1} coincide")]
    DuplicateControlPoints(usize, usize),
    #[error("thin-plate-spline system is singular after regularization")]
    SingularL,
    #[error("image {width}x{height} is too small (minimum {min}x{min})")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("no overlapping region between the images")]
    NoOverlap,
    #[error("warp is unreasonable: {0}")]
    UnreasonableWarp(String),
    #[error("validity mask is empty")]
    EmptyMask,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
