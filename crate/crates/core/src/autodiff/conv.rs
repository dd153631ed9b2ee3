//! im2col/col2im kernels behind the tape's `conv2d` node.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.filters * self.out_pixels()
    }
}

/// Range of output columns `ox` for which `ox + j - pad` lands inside `[0, width)`.
#[inline]
fn valid_span(j: usize, pad: usize, width: usize, out_w: usize) -> (usize, usize) {
    let start = pad.saturating_sub(j).min(out_w);
    let end = (width + pad).saturating_sub(j).min(out_w);
    (start, end.max(start))
}

/// Unfolds one sample (`C×H×W`) into a `patch_len × out_pixels` matrix.
pub(crate) fn im2col<T: Real>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let opx = g.out_pixels();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let dst = &mut cols[row * opx..(row + 1) * opx];
                let (x0, x1) = valid_span(j, g.pad_w, g.width, g.out_w);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = oy + i;
                    if iy < g.pad_h || iy - g.pad_h >= g.height {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - g.pad_h) * g.width..(iy - g.pad_h + 1) * g.width];
                    line[..x0].fill(T::zero());
                    line[x1..].fill(T::zero());
                    if x1 > x0 {
                        let s0 = x0 + j - g.pad_w;
                        line[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto `input_grad`.
pub(crate) fn col2im_add<T: Real>(g: &ConvGeometry, cols: &[T], input_grad: &mut [T]) {
    let opx = g.out_pixels();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let src = &cols[row * opx..(row + 1) * opx];
                let (x0, x1) = valid_span(j, g.pad_w, g.width, g.out_w);
                if x1 > x0 {
                    for oy in 0..g.out_h {
                        let iy = oy + i;
                        if iy < g.pad_h || iy - g.pad_h >= g.height {
                            continue;
                        }
                        let s0 = x0 + j - g.pad_w;
                        let dst = &mut plane[(iy - g.pad_h) * g.width + s0
                            ..(iy - g.pad_h) * g.width + s0 + (x1 - x0)];
                        let line = &src[oy * g.out_w + x0..oy * g.out_w + x1];
                        for (d, s) in dst.iter_mut().zip(line) {
                            *d = *d + *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.out_len()];
    let mut cols = vec![T::zero(); g.patch_len() * g.out_pixels()];
    for n in 0..batch {
        let x = &input[n * g.in_len()..(n + 1) * g.in_len()];
        let y = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
        for (f, chunk) in y.chunks_mut(g.out_pixels()).enumerate() {
            chunk.fill(bias[f]);
        }
        im2col(g, x, &mut cols);
        T::gemm(
            g.filters,
            g.patch_len(),
            g.out_pixels(),
            kernel,
            false,
            &cols,
            false,
            y,
            true,
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    kernel: &[T],
    out_grad: &[T],
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let mut d_input = want_input.then(|| vec![T::zero(); batch * g.in_len()]);
    let mut d_kernel = want_kernel.then(|| vec![T::zero(); g.filters * g.patch_len()]);
    let d_bias = want_bias.then(|| {
        let mut db = vec![T::zero(); g.filters];
        for n in 0..batch {
            let dy = &out_grad[n * g.out_len()..(n + 1) * g.out_len()];
            for (f, chunk) in dy.chunks(g.out_pixels()).enumerate() {
                db[f] = db[f] + chunk.iter().copied().sum::<T>();
            }
        }
        db
    });
    let mut cols = vec![T::zero(); g.patch_len() * g.out_pixels()];
    for n in 0..batch {
        let dy = &out_grad[n * g.out_len()..(n + 1) * g.out_len()];
        if let Some(dk) = d_kernel.as_mut() {
            im2col(g, &input[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
            T::gemm(
                g.filters,
                g.out_pixels(),
                g.patch_len(),
                dy,
                false,
                &cols,
                true,
                dk,
                true,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            T::gemm(
                g.patch_len(),
                g.filters,
                g.out_pixels(),
                kernel,
                true,
                dy,
                false,
                &mut cols,
                false,
            );
            col2im_add(g, &cols, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}
