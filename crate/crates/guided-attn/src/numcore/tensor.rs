use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numcore::tape::{NodeId, Tape};

/// Storage precision. Data always lives in `f64`; `F32` rounds every
/// primitive result through `f32` so float32 runs stay bit-reproducible
/// while intermediate accumulation keeps full width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    pub fn quantize_vec(self, mut v: Vec<f64>) -> Vec<f64> {
        if self == Precision::F32 {
            for x in v.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
        v
    }
}

#[derive(Clone)]
pub(crate) struct Track {
    pub tape: Tape,
    pub node: NodeId,
}

/// Immutable dense tensor. Cloning is cheap (shared data).
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    precision: Precision,
    pub(crate) track: Option<Track>,
}

impl Tensor {
    pub fn constant(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(precision.quantize_vec(data)),
            precision,
            track: None,
        }
    }

    pub fn scalar(v: f64, precision: Precision) -> Tensor {
        Tensor::constant(vec![1], vec![v], precision)
    }

    pub fn zeros(shape: Vec<usize>, precision: Precision) -> Tensor {
        let n = shape.iter().product();
        Tensor::constant(shape, vec![0.0; n], precision)
    }

    pub fn full(shape: Vec<usize>, v: f64, precision: Precision) -> Tensor {
        let n = shape.iter().product();
        Tensor::constant(shape, vec![v; n], precision)
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Vec<f64>,
        precision: Precision,
        track: Option<Track>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            precision,
            track,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_tracked(&self) -> bool {
        self.track.is_some()
    }

    /// Scalar value; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data, no tape connection.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            precision: self.precision,
            track: None,
        }
    }

    /// Untracked copy at another precision (quantizing when narrowing).
    pub fn to_precision(&self, precision: Precision) -> Tensor {
        if precision == self.precision {
            return self.detach();
        }
        Tensor::constant(self.shape.clone(), self.data.to_vec(), precision)
    }

    /// Metadata-only reshape; the underlying node (if any) is shared, so
    /// gradients flow through unchanged.
    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Tensor {
            shape,
            data: Arc::clone(&self.data),
            precision: self.precision,
            track: self.track.clone(),
        }
    }

    /// Gradient accumulated for this tensor on its tape. `None` when the
    /// tensor is untracked or no backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        let track = self.track.as_ref()?;
        track.tape.leaf_grad(track.node)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor{:?}[{:?}, tracked={}]",
            self.shape,
            self.precision,
            self.is_tracked()
        )?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

/// Plain dense grid: an untracked tensor that is `Send + Sync`, for data
/// that crosses thread boundaries (patient volumes, masks, shared model
/// values). Converts to and from [`Tensor`] without copying.
#[derive(Clone)]
pub struct Grid {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    precision: Precision,
}

impl Grid {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Grid {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Grid {
            shape,
            data: Arc::new(precision.quantize_vec(data)),
            precision,
        }
    }

    pub fn zeros(shape: Vec<usize>, precision: Precision) -> Grid {
        let n = shape.iter().product();
        Grid::new(shape, vec![0.0; n], precision)
    }

    pub fn from_tensor(t: &Tensor) -> Grid {
        Grid {
            shape: t.shape().to_vec(),
            data: t.data_arc(),
            precision: t.precision(),
        }
    }

    /// Zero-copy view as an untracked tensor.
    pub fn tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            precision: self.precision,
            track: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }
}

impl std::fmt::Debug for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Grid{:?}[{:?}]", self.shape, self.precision)
    }
}
