//! Dense kernels used by the CNN: a thin GEMM wrapper plus im2col/col2im for
//! channels-last 3x3 valid convolutions.

/// Row-major view description of an `rows x cols` matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of this matrix, without copying.
    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical_shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = alpha * a * b + beta * out`, with `out` row-major `m x n`.
pub(crate) fn gemm(alpha: f32, a: MatRef<'_>, b: MatRef<'_>, beta: f32, out: &mut [f32]) {
    let (m, k) = a.logical_shape();
    let (kb, n) = b.logical_shape();
    assert_eq!(k, kb, "gemm inner dimensions disagree");
    assert!(out.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above guarantee every index touched by the strided
    // views lies inside the backing slices, and `out` does not alias inputs.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unrolls 3x3 patches of `batch` channels-last images of side `side` into a
/// `(batch * out_side^2) x (9 * channels)` matrix.
pub(crate) fn im2col(input: &[f32], batch: usize, side: usize, channels: usize, cols: &mut [f32]) {
    let out_side = side - 2;
    let k = 9 * channels;
    debug_assert_eq!(input.len(), batch * side * side * channels);
    debug_assert_eq!(cols.len(), batch * out_side * out_side * k);
    let image_len = side * side * channels;
    let mut row = 0;
    for b in 0..batch {
        let image = &input[b * image_len..(b + 1) * image_len];
        for oy in 0..out_side {
            for ox in 0..out_side {
                let dst = &mut cols[row * k..(row + 1) * k];
                for ky in 0..3 {
                    let src_start = ((oy + ky) * side + ox) * channels;
                    // three horizontally adjacent pixels are contiguous
                    dst[ky * 3 * channels..(ky + 1) * 3 * channels]
                        .copy_from_slice(&image[src_start..src_start + 3 * channels]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back into image gradients.
pub(crate) fn col2im(cols: &[f32], batch: usize, side: usize, channels: usize, output: &mut [f32]) {
    let out_side = side - 2;
    let k = 9 * channels;
    let image_len = side * side * channels;
    output.iter_mut().for_each(|v| *v = 0.0);
    let mut row = 0;
    for b in 0..batch {
        let image = &mut output[b * image_len..(b + 1) * image_len];
        for oy in 0..out_side {
            for ox in 0..out_side {
                let src = &cols[row * k..(row + 1) * k];
                for ky in 0..3 {
                    let dst_start = ((oy + ky) * side + ox) * channels;
                    let dst = &mut image[dst_start..dst_start + 3 * channels];
                    for (d, s) in dst.iter_mut().zip(&src[ky * 3 * channels..(ky + 1) * 3 * channels]) {
                        *d += *s;
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn add_bias_relu(z: &mut [f32], bias: &[f32]) {
    for row in z.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v = (*v + *b).max(0.0);
        }
    }
}

/// Column sums of a row-major matrix with `cols` columns, accumulated into `out`.
pub(crate) fn column_sums(m: &[f32], cols: usize, out: &mut [f32]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for row in m.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f32> = (0..12).map(|v| v as f32 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f32> = (0..8).map(|v| 1.0 - v as f32 * 0.25).collect(); // 4x2
        let mut out = vec![0.0; 6];
        gemm(1.0, MatRef::new(&a, 3, 4), MatRef::new(&b, 4, 2), 0.0, &mut out);
        assert_eq!(out, naive(&a, 3, 4, &b, 2));

        // a^T stored as 4x3 then transposed back
        let at: Vec<f32> = (0..12).map(|i| a[(i % 3) * 4 + i / 3]).collect();
        let mut out_t = vec![0.0; 6];
        gemm(1.0, MatRef::new(&at, 4, 3).t(), MatRef::new(&b, 4, 2), 0.0, &mut out_t);
        assert_eq!(out_t, out);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (batch, side, ch) = (2, 5, 3);
        let x: Vec<f32> = (0..batch * side * side * ch).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
        let rows = batch * 9;
        let y: Vec<f32> = (0..rows * 9 * ch).map(|i| ((i * 5) % 13) as f32 * 0.1).collect();
        let mut cols = vec![0.0; rows * 9 * ch];
        im2col(&x, batch, side, ch, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, batch, side, ch, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0));
    }
}
