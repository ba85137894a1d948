//! Low-level kernels: strided GEMM and im2col/col2im.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    pub const fn row_major(cols: usize) -> Self {
        Self {
            row: cols as isize,
            col: 1,
        }
    }

    /// Strides that read a row-major `cols`-wide buffer as its transpose.
    pub const fn transposed(cols: usize) -> Self {
        Self {
            row: 1,
            col: cols as isize,
        }
    }
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, with arbitrary operand strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, s: Strides| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * s.row + (cols - 1) as isize * s.col) as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, sa));
    assert!(b.len() >= span(k, n, sb));
    assert!(c.len() >= span(m, n, sc));
    // SAFETY: the asserts above bound every element the kernel touches, and
    // `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.row,
            sa.col,
            b.as_ptr(),
            sb.row,
            sb.col,
            beta,
            c.as_mut_ptr(),
            sc.row,
            sc.col,
        );
    }
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Number of output positions.
    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Length of one unrolled receptive field.
    pub fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unroll one image into a `[patch, positions]` row-major matrix: row
/// `(c, ky, kx)` holds the input value under that kernel tap for every output
/// position.
pub(crate) fn im2col(image: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (oh, ow, k, p) = (g.out_height(), g.out_width(), g.kernel, g.positions());
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(ow, g.width, kx, g.stride, g.padding);
                for oy in 0..oh {
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height || lo >= hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let ix0 = lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (j, v) in out[lo..hi].iter_mut().enumerate() {
                            *v = src[ix0 + j * g.stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a `[patch, positions]` matrix back onto an image gradient.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom, image: &mut [f64]) {
    let (oh, ow, k, p) = (g.out_height(), g.out_width(), g.kernel, g.positions());
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(ow, g.width, kx, g.stride, g.padding);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let ix0 = lo * g.stride + kx - g.padding;
                    for (j, v) in src[oy * ow + lo..oy * ow + hi].iter().enumerate() {
                        dst[ix0 + j * g.stride] += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output columns `lo..hi` whose input column for tap `kx` is inside the image.
fn valid_range(
    ow: usize,
    width: usize,
    kx: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    // ix = ox * stride + kx - padding must satisfy 0 <= ix < width.
    let lo = if kx >= padding {
        0
    } else {
        (padding - kx).div_ceil(stride)
    };
    let limit = (width + padding).saturating_sub(kx); // ox * stride < limit
    let hi = if limit == 0 {
        0
    } else {
        ((limit - 1) / stride + 1).min(ow)
    };
    (lo.min(hi), hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposed_operand() {
        // a = [[1,2],[3,4]], b^T stored row-major as [[5,6],[7,8]] -> b = [[5,7],[6,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let bt = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(
            2,
            2,
            2,
            1.0,
            &a,
            Strides::row_major(2),
            &bt,
            Strides::transposed(2),
            0.0,
            &mut c,
            Strides::row_major(2),
        );
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for any x, y.
        let g = ConvGeom {
            channels: 2,
            height: 4,
            width: 5,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.positions() * g.patch())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
