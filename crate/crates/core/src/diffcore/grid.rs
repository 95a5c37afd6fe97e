use crate::error::{Error, Result};

/// Dense rank-4 array in (batch, channel, height, width) order.
///
/// Every feature map, raster, token sequence and parameter in the crate is a
/// `Grid4`. Lower-rank data uses leading unit dimensions, e.g. a token
/// sequence of shape (B, N, D) is stored as (B, 1, N, D) and a weight matrix
/// (in, out) as (1, 1, in, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid4 {
    shape: [usize; 4],
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Grid4 {
    pub fn new(shape: [usize; 4], values: Vec<f64>) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if values.len() != n {
            return Err(Error::shape("Grid4::new", &shape, &[values.len()]));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], v: f64) -> Self {
        Self {
            shape,
            values: vec![v; shape.iter().product()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::full([1, 1, 1, 1], v)
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut values = Vec::with_capacity(shape.iter().product());
        for b in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        values.push(f([b, c, h, w]));
                    }
                }
            }
        }
        Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        }
    }

    /// Matrix stored as (1, 1, rows, cols).
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new([1, 1, rows, cols], values)
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::shape("Grid4::set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.values[self.index(b, c, h, w)]
    }

    pub fn reshaped(&self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            values: self.values.clone(),
            grad: None,
            requires_grad: self.requires_grad,
        })
    }

    /// Copy of sample `b` as a batch-1 grid.
    pub fn batch_item(&self, b: usize) -> Self {
        let per = self.len() / self.shape[0].max(1);
        let mut shape = self.shape;
        shape[0] = 1;
        Self {
            shape,
            values: self.values[b * per..(b + 1) * per].to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Stack batch-1 (or batch-k) grids along the batch axis.
    pub fn stack(items: &[&Grid4]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero grids".into()))?;
        let [_, c, h, w] = first.shape;
        let mut total = 0;
        let mut values = Vec::new();
        for g in items {
            if g.shape[1..] != [c, h, w] {
                return Err(Error::shape("stack", &first.shape, &g.shape));
            }
            total += g.shape[0];
            values.extend_from_slice(&g.values);
        }
        Self::new([total, c, h, w], values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Grid4) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and values (distinguishes -0.0 and NaN payloads).
    pub fn bit_eq(&self, other: &Grid4) -> bool {
        self.shape == other.shape
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
