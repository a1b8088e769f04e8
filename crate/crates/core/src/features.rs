//! Time-major feature and embedding sequences with frame-rate bookkeeping.

use crate::tensor::Matrix;

/// A T×D feature matrix at an explicit frame rate.
#[derive(Clone, Debug)]
pub struct FeatureSeq {
    pub frames: Matrix,
    pub frame_rate_hz: f64,
}

impl FeatureSeq {
    pub fn new(frames: Matrix, frame_rate_hz: f64) -> Self {
        assert!(frame_rate_hz > 0.0, "frame rate must be positive");
        FeatureSeq {
            frames,
            frame_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Projected embeddings headed into the LM. Fixed-length projections carry
/// no meaningful rate, hence the `Option`.
#[derive(Clone, Debug)]
pub struct EmbedSeq {
    pub embeds: Matrix,
    pub frame_rate_hz: Option<f64>,
}

impl EmbedSeq {
    pub fn len(&self) -> usize {
        self.embeds.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeds.rows() == 0
    }
}
