use crate::error::{CsdnError, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// One pyramid level, stored as `[height * width x channels]` with location
/// `(row, col)` at index `row * width + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    stride: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, stride: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(CsdnError::Shape {
                op: "feature_map",
                left: vec![height, width, channels],
                right: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            stride,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, stride: usize) -> Self {
        Self {
            height,
            width,
            channels,
            stride,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Flattened `[H*W x C]` view as a tensor.
    pub fn flatten(&self) -> Tensor {
        Tensor::matrix_unchecked(self.locations(), self.channels, self.data.clone())
    }
}

/// Feature maps ordered from finest to coarsest; the last level is the
/// global summary map used by block attention.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| CsdnError::InvalidArgument("pyramid needs at least one level".into()))?;
        let channels = first.channels;
        for pair in levels.windows(2) {
            if pair[1].stride <= pair[0].stride {
                return Err(CsdnError::InvalidArgument(
                    "pyramid strides must be strictly increasing".into(),
                ));
            }
        }
        if let Some(l) = levels.iter().find(|l| l.channels != channels) {
            return Err(CsdnError::Shape {
                op: "pyramid",
                left: vec![channels],
                right: vec![l.channels],
            });
        }
        if levels.iter().any(|l| l.locations() == 0) {
            return Err(CsdnError::InvalidArgument("empty feature map".into()));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels
    }

    /// The coarsest level.
    pub fn top(&self) -> &FeatureMap {
        self.levels.last().expect("non-empty")
    }

    pub fn total_locations(&self) -> usize {
        self.levels.iter().map(FeatureMap::locations).sum()
    }
}

/// Object queries: one embedding row and one box per detection slot.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub embeddings: Tensor,
    pub boxes: Vec<BBox>,
}

impl QuerySet {
    pub fn new(embeddings: Tensor, boxes: Vec<BBox>) -> Result<Self> {
        if boxes.is_empty() || embeddings.shape().len() != 2 || embeddings.rows() != boxes.len() {
            return Err(CsdnError::Shape {
                op: "query_set",
                left: embeddings.shape().to_vec(),
                right: vec![boxes.len()],
            });
        }
        Ok(Self { embeddings, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}
