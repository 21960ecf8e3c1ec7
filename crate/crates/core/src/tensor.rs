use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 values in row-major order.
///
/// `Tensor` is plain data: computation-graph bookkeeping lives in
/// [`crate::autodiff::Tape`], which stores values and gradients per node. A
/// tensor that was never bound to a tape never receives gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel(&shape),
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel(shape)],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }
}

/// Shape of the result of broadcasting `a` against `b` under trailing-dimension
/// rules: shapes are right-aligned and each pair of dims must be equal or 1.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {a:?} against {b:?} (dim {da} vs {db})"
            )));
        };
    }
    Ok(out)
}

/// Row-major strides for `shape`, with stride 0 on dimensions that are
/// broadcast (size 1 against a larger output dimension). `shape` is
/// right-aligned inside `out_shape`.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 && out_shape[offset + i] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[i];
    }
    strides
}

/// Iterates flat offsets into a broadcast operand while walking the output
/// tensor in row-major order.
pub struct BroadcastIter {
    strides: Vec<usize>,
    out_shape: Vec<usize>,
    index: Vec<usize>,
    offset: usize,
    done: bool,
}

impl BroadcastIter {
    pub fn new(shape: &[usize], out_shape: &[usize]) -> Self {
        BroadcastIter {
            strides: broadcast_strides(shape, out_shape),
            out_shape: out_shape.to_vec(),
            index: vec![0; out_shape.len()],
            offset: 0,
            done: numel(out_shape) == 0,
        }
    }
}

impl Iterator for BroadcastIter {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.done {
            return None;
        }
        let current = self.offset;
        // advance the multi-index, updating the flat offset incrementally
        let mut dim = self.out_shape.len();
        loop {
            if dim == 0 {
                self.done = true;
                break;
            }
            dim -= 1;
            self.index[dim] += 1;
            self.offset += self.strides[dim];
            if self.index[dim] < self.out_shape[dim] {
                break;
            }
            self.index[dim] = 0;
            self.offset -= self.strides[dim] * self.out_shape[dim];
        }
        Some(current)
    }
}
