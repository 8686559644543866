//! Causally masked 2D convolutions and 1x1 projections.
//!
//! Feature maps are stored channel-major over a batch of grids, i.e. a
//! `[channels, batch, rows, cols]` array viewed as a `channels x N` matrix.
//! Each allowed kernel tap becomes one shifted copy of the input and one GEMM;
//! masked taps are never visited, so they contribute nothing forward and
//! receive exactly zero gradient.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::{matmul, Tensor};

/// Spatial layout of a batch of equally sized grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(batch: usize, rows: usize, cols: usize) -> Self {
        Self { batch, rows, cols }
    }

    /// Number of positions in one channel plane.
    pub fn plane(&self) -> usize {
        self.batch * self.rows * self.cols
    }
}

/// `dst[ch, b, r, c] = src[ch, b, r + dy, c + dx]`, zero outside the grid.
fn shift<T: Scalar>(src: &[T], channels: usize, grid: Grid, dy: isize, dx: isize, dst: &mut [T]) {
    dst.fill(T::zero());
    let (rows, cols) = (grid.rows as isize, grid.cols as isize);
    let c_lo = (-dx).max(0);
    let c_hi = (cols - dx).min(cols);
    if c_lo >= c_hi {
        return;
    }
    let (c_lo, c_hi) = (c_lo as usize, c_hi as usize);
    let src_lo = (c_lo as isize + dx) as usize;
    let width = c_hi - c_lo;
    for row_block in 0..channels * grid.batch {
        let base = row_block * grid.rows * grid.cols;
        for r in 0..rows {
            let r2 = r + dy;
            if r2 < 0 || r2 >= rows {
                continue;
            }
            let d = base + r as usize * grid.cols + c_lo;
            let s = base + r2 as usize * grid.cols + src_lo;
            dst[d..d + width].copy_from_slice(&src[s..s + width]);
        }
    }
}

/// Adjoint of [`shift`]: scatters `grad` back onto the unshifted positions.
fn unshift_add<T: Scalar>(grad: &[T], channels: usize, grid: Grid, dy: isize, dx: isize, dst: &mut [T]) {
    let (rows, cols) = (grid.rows as isize, grid.cols as isize);
    let c_lo = (-dx).max(0);
    let c_hi = (cols - dx).min(cols);
    if c_lo >= c_hi {
        return;
    }
    let (c_lo, c_hi) = (c_lo as usize, c_hi as usize);
    let src_lo = (c_lo as isize + dx) as usize;
    let width = c_hi - c_lo;
    for row_block in 0..channels * grid.batch {
        let base = row_block * grid.rows * grid.cols;
        for r in 0..rows {
            let r2 = r + dy;
            if r2 < 0 || r2 >= rows {
                continue;
            }
            let g = base + r as usize * grid.cols + c_lo;
            let s = base + r2 as usize * grid.cols + src_lo;
            for (d, &v) in dst[s..s + width].iter_mut().zip(&grad[g..g + width]) {
                *d += v;
            }
        }
    }
}

/// Which conditioning path a kernel belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stack {
    /// `k x k` kernel reaching only the rows above (and, for type B, the
    /// current row of the previous vertical features).
    Vertical,
    /// `1 x k` kernel reaching only to the left within the current row.
    Horizontal,
}

/// Type A excludes the center tap (first layer), type B includes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskType {
    A,
    B,
}

/// Convolution kernel `[out, in, k_rows, k_cols]` with a causal mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedKernel<T> {
    weights: Tensor<T>,
    bias: Tensor<T>,
    stack: Stack,
    mask: MaskType,
}

impl<T: Scalar> MaskedKernel<T> {
    /// Zero-initialized kernel of odd width `size`.
    pub fn new(stack: Stack, mask: MaskType, out_channels: usize, in_channels: usize, size: usize) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::InvalidConfig(format!("kernel size must be odd, got {size}")));
        }
        let k_rows = match stack {
            Stack::Vertical => size,
            Stack::Horizontal => 1,
        };
        Ok(Self {
            weights: Tensor::zeros(&[out_channels, in_channels, k_rows, size]),
            bias: Tensor::zeros(&[out_channels]),
            stack,
            mask,
        })
    }

    /// Assembles a kernel from stored tensors, rejecting nonzero masked taps.
    pub fn from_parts(stack: Stack, mask: MaskType, weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let shape = weights.shape();
        if shape.len() != 4 || bias.shape() != [shape[0]] {
            return Err(Error::ShapeMismatch(format!(
                "kernel weights {:?} with bias {:?}",
                shape,
                bias.shape()
            )));
        }
        let (k_rows, k_cols) = (shape[2], shape[3]);
        let rows_ok = match stack {
            Stack::Vertical => k_rows == k_cols,
            Stack::Horizontal => k_rows == 1,
        };
        if !rows_ok || k_cols % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("{stack:?} kernel cannot have shape {shape:?}")));
        }
        let kernel = Self {
            weights,
            bias,
            stack,
            mask,
        };
        for o in 0..kernel.out_channels() {
            for i in 0..kernel.in_channels() {
                for ti in 0..k_rows {
                    for tj in 0..k_cols {
                        if !kernel.is_allowed(ti, tj) && kernel.weights.data()[kernel.index(o, i, ti, tj)] != T::zero() {
                            return Err(Error::InvalidConfig(format!(
                                "masked tap ({ti}, {tj}) of {stack:?} kernel holds a nonzero weight"
                            )));
                        }
                    }
                }
            }
        }
        Ok(kernel)
    }

    pub fn stack(&self) -> Stack {
        self.stack
    }

    pub fn mask_type(&self) -> MaskType {
        self.mask
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn k_rows(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn k_cols(&self) -> usize {
        self.weights.shape()[3]
    }

    fn index(&self, o: usize, i: usize, ti: usize, tj: usize) -> usize {
        ((o * self.in_channels() + i) * self.k_rows() + ti) * self.k_cols() + tj
    }

    /// Whether tap `(ti, tj)` of the kernel is unmasked.
    pub fn is_allowed(&self, ti: usize, tj: usize) -> bool {
        let (cr, cc) = (self.k_rows() / 2, self.k_cols() / 2);
        match (self.stack, self.mask) {
            (Stack::Vertical, MaskType::A) => ti < cr,
            (Stack::Vertical, MaskType::B) => ti <= cr,
            (Stack::Horizontal, MaskType::A) => tj < cc,
            (Stack::Horizontal, MaskType::B) => tj <= cc,
        }
    }

    /// Unmasked taps as `(ti, tj, dy, dx)` offsets relative to the center.
    pub fn taps(&self) -> Vec<(usize, usize, isize, isize)> {
        let (cr, cc) = (self.k_rows() / 2, self.k_cols() / 2);
        let mut taps = Vec::new();
        for ti in 0..self.k_rows() {
            for tj in 0..self.k_cols() {
                if self.is_allowed(ti, tj) {
                    taps.push((ti, tj, ti as isize - cr as isize, tj as isize - cc as isize));
                }
            }
        }
        taps
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels() * self.taps().len()
    }

    /// Mutable access to the trainable values. Callers must keep masked taps
    /// at zero; [`MaskedKernel::enforce_mask`] restores the invariant.
    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<T> {
        &mut self.bias
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.weights, &mut self.bias)
    }

    pub fn enforce_mask(&mut self) {
        for o in 0..self.out_channels() {
            for i in 0..self.in_channels() {
                for ti in 0..self.k_rows() {
                    for tj in 0..self.k_cols() {
                        if !self.is_allowed(ti, tj) {
                            let idx = self.index(o, i, ti, tj);
                            self.weights.data_mut()[idx] = T::zero();
                        }
                    }
                }
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: Tensor::zeros(self.weights.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            stack: self.stack,
            mask: self.mask,
        }
    }

    fn tap_matrix(&self, ti: usize, tj: usize) -> Vec<T> {
        let (co, ci) = (self.out_channels(), self.in_channels());
        let mut m = Vec::with_capacity(co * ci);
        for o in 0..co {
            for i in 0..ci {
                m.push(self.weights.data()[self.index(o, i, ti, tj)]);
            }
        }
        m
    }

    /// Overwrites `out` (`[out, N]`) with the convolution of `input` (`[in, N]`).
    pub(crate) fn forward_planes(&self, input: &[T], grid: Grid, out: &mut [T]) {
        let n = grid.plane();
        let (co, ci) = (self.out_channels(), self.in_channels());
        debug_assert_eq!(input.len(), ci * n);
        debug_assert_eq!(out.len(), co * n);
        for (o, row) in out.chunks_exact_mut(n).enumerate() {
            row.fill(self.bias.data()[o]);
        }
        let mut shifted = vec![T::zero(); ci * n];
        for (ti, tj, dy, dx) in self.taps() {
            let w = self.tap_matrix(ti, tj);
            let src: &[T] = if dy == 0 && dx == 0 {
                input
            } else {
                shift(input, ci, grid, dy, dx, &mut shifted);
                &shifted
            };
            matmul(&w, (co, ci), false, src, (ci, n), false, T::one(), out);
        }
    }

    /// Accumulates parameter gradients into `grad` and, if requested, the
    /// input gradient into `grad_input`.
    pub(crate) fn backward_planes(
        &self,
        input: &[T],
        grid: Grid,
        grad_out: &[T],
        grad: &mut MaskedKernel<T>,
        grad_input: Option<&mut [T]>,
    ) {
        let n = grid.plane();
        let (co, ci) = (self.out_channels(), self.in_channels());
        for (o, row) in grad_out.chunks_exact(n).enumerate() {
            grad.bias.data_mut()[o] += row.iter().copied().sum::<T>();
        }
        let mut shifted = vec![T::zero(); ci * n];
        let mut tap_grad = vec![T::zero(); co * ci];
        let mut grad_shifted = grad_input.as_ref().map(|_| vec![T::zero(); ci * n]);
        let mut grad_input = grad_input;
        for (ti, tj, dy, dx) in self.taps() {
            let centered = dy == 0 && dx == 0;
            let src: &[T] = if centered {
                input
            } else {
                shift(input, ci, grid, dy, dx, &mut shifted);
                &shifted
            };
            matmul(grad_out, (co, n), false, src, (ci, n), true, T::zero(), &mut tap_grad);
            for o in 0..co {
                for i in 0..ci {
                    let idx = self.index(o, i, ti, tj);
                    grad.weights.data_mut()[idx] += tap_grad[o * ci + i];
                }
            }
            if let (Some(gi), Some(gs)) = (grad_input.as_deref_mut(), grad_shifted.as_mut()) {
                let w = self.tap_matrix(ti, tj);
                if centered {
                    matmul(&w, (co, ci), true, grad_out, (co, n), false, T::one(), gi);
                } else {
                    matmul(&w, (co, ci), true, grad_out, (co, n), false, T::zero(), gs);
                    unshift_add(gs, ci, grid, dy, dx, gi);
                }
            }
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<Grid> {
        match input.shape() {
            &[c, rows, cols] if c == self.in_channels() => Ok(Grid::new(1, rows, cols)),
            other => Err(Error::ShapeMismatch(format!(
                "kernel expects [{}, rows, cols] input, got {other:?}",
                self.in_channels()
            ))),
        }
    }

    /// Same-size masked cross-correlation of a `[in, rows, cols]` input.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let grid = self.check_input(input)?;
        let mut out = Tensor::zeros(&[self.out_channels(), grid.rows, grid.cols]);
        self.forward_planes(input.data(), grid, out.data_mut());
        Ok(out)
    }

    /// Gradients of a scalar loss given `grad_out = dL/d(output)`. Returns
    /// the parameter gradients (as a kernel of the same shape) and `dL/d(input)`.
    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(MaskedKernel<T>, Tensor<T>)> {
        let grid = self.check_input(input)?;
        if grad_out.shape() != [self.out_channels(), grid.rows, grid.cols] {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} does not match output shape",
                grad_out.shape()
            )));
        }
        let mut grad = self.zeros_like();
        let mut grad_input = Tensor::zeros(input.shape());
        self.backward_planes(input.data(), grid, grad_out.data(), &mut grad, Some(grad_input.data_mut()));
        Ok((grad, grad_input))
    }
}

/// 1x1 convolution, i.e. a per-position linear map `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointwise<T> {
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
}

impl<T: Scalar> Pointwise<T> {
    pub fn new(out_channels: usize, in_channels: usize, with_bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[out_channels, in_channels]),
            bias: with_bias.then(|| Tensor::zeros(&[out_channels])),
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let ok = weight.shape().len() == 2 && bias.as_ref().map_or(true, |b| b.shape() == [weight.shape()[0]]);
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "pointwise weight {:?} with bias {:?}",
                weight.shape(),
                bias.as_ref().map(|b| b.shape().to_vec())
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref()
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.bias.as_mut()
    }

    pub fn zeros_like(&self) -> Self {
        Self::new(self.out_channels(), self.in_channels(), self.bias.is_some())
    }

    /// Weight and bias of a biased projection.
    pub(crate) fn parts_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.weight, self.bias.as_mut().expect("projection has a bias"))
    }

    /// `out = W * input + b` (or `out += W * input` when `accumulate`).
    pub(crate) fn forward_planes(&self, input: &[T], n: usize, out: &mut [T], accumulate: bool) {
        let (co, ci) = (self.out_channels(), self.in_channels());
        let beta = if accumulate { T::one() } else { T::zero() };
        matmul(self.weight.data(), (co, ci), false, input, (ci, n), false, beta, out);
        if let Some(b) = &self.bias {
            for (row, &bv) in out.chunks_exact_mut(n).zip(b.data()) {
                row.iter_mut().for_each(|x| *x += bv);
            }
        }
    }

    pub(crate) fn backward_planes(
        &self,
        input: &[T],
        n: usize,
        grad_out: &[T],
        grad: &mut Pointwise<T>,
        grad_input: Option<&mut [T]>,
    ) {
        let (co, ci) = (self.out_channels(), self.in_channels());
        matmul(grad_out, (co, n), false, input, (ci, n), true, T::one(), grad.weight.data_mut());
        if let Some(gb) = grad.bias.as_mut() {
            for (row, g) in grad_out.chunks_exact(n).zip(gb.data_mut()) {
                *g += row.iter().copied().sum::<T>();
            }
        }
        if let Some(gi) = grad_input {
            matmul(self.weight.data(), (co, ci), true, grad_out, (co, n), false, T::one(), gi);
        }
    }
}
