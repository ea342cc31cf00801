use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Reserved phoneme id meaning "dropped / unconditional".
pub const DROPPED_PHONEME: usize = 0;

/// A `D×T` feature matrix standing in for a log-mel spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    data: Matrix,
    pub frame_rate: f64,
}

impl FeatureSequence {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(Error::shape(format!(
                "feature sequence must be at least 1x1, got {}x{}",
                data.rows(),
                data.cols()
            )));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("feature sequence entries".into()));
        }
        Ok(Self {
            data,
            frame_rate: 1.0,
        })
    }

    pub fn zeros(dim: usize, frames: usize) -> Result<Self> {
        Self::new(Matrix::zeros(dim, frames))
    }

    pub fn dim(&self) -> usize {
        self.data.rows()
    }

    pub fn frames(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    /// Frames `start..start+len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::shape(format!(
                "frame range {start}..{} outside 0..{}",
                start + len,
                self.frames()
            )));
        }
        Ok(Self {
            data: self.data.cols_range(start, len),
            frame_rate: self.frame_rate,
        })
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.data.shape() == other.data.shape()
    }
}

/// Frame-wise phoneme ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeFrames {
    ids: Vec<usize>,
    vocab_size: usize,
}

impl PhonemeFrames {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::invalid(format!(
                "phoneme id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self { ids, vocab_size })
    }

    /// All frames set to the dropped id.
    pub fn dropped(frames: usize, vocab_size: usize) -> Self {
        Self {
            ids: vec![DROPPED_PHONEME; frames],
            vocab_size,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.vocab_size != other.vocab_size {
            return Err(Error::invalid("phoneme vocabularies differ"));
        }
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        Ok(Self {
            ids,
            vocab_size: self.vocab_size,
        })
    }
}
