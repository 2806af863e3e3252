use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): coordinates must be finite with x2 >= x1 and y2 >= y1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid image size {width}x{height}: both sides must be positive")]
    InvalidImageSize { width: u32, height: u32 },

    #[error("rescale factor must be positive and finite, got {0}")]
    InvalidFactor(f64),

    #[error("score must lie in [0, 1], got {0}")]
    InvalidScore(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0} must not be empty")]
    EmptyInput(&'static str),

    #[error("cannot encode against a zero-area box")]
    DegenerateBox,

    #[error("decoded box is not representable (log size ratio {0} out of range)")]
    DecodeOverflow(f64),

    #[error("detection tagged with scale {0} which is not a configured test scale")]
    UnknownScale(u32),

    #[error("unknown image '{0}'")]
    UnknownImage(String),

    #[error("no valid ground truth to evaluate against")]
    NoGroundTruth,
}
