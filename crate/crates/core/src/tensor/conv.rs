//! 2-D cross-correlation over `[T, C, H, W]` inputs via im2col + GEMM.

use crate::error::{Error, Result};

use super::Tensor;

/// Output extent of a convolution along one spatial axis:
/// `floor((extent + 2 * padding - kernel) / stride) + 1`.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || extent + 2 * padding < kernel {
        return None;
    }
    Some((extent + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub frames: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d input must be [T, C, H, W], got {input:?}"
            )));
        }
        if weight.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d weight must be [O, C, KH, KW], got {weight:?}"
            )));
        }
        if input[1] != weight[1] {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {} channels, weight expects {}",
                input[1], weight[1]
            )));
        }
        let out_h = conv_output_extent(input[2], weight[2], stride, padding);
        let out_w = conv_output_extent(input[3], weight[3], stride, padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::shape(format!(
                "conv2d kernel {}x{} (stride {stride}, padding {padding}) does not fit input {}x{}",
                weight[2], weight[3], input[2], input[3]
            )));
        };
        Ok(ConvGeometry {
            frames: input[0],
            in_ch: input[1],
            height: input[2],
            width: input[3],
            out_ch: weight[0],
            kh: weight[2],
            kw: weight[3],
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.frames, self.out_ch, self.out_h, self.out_w]
    }

    /// Source pixel for output position `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    /// Unfolds one frame into a `[C*KH*KW, OH*OW]` column matrix.
    fn im2col(&self, frame: &[f64], col: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.in_ch {
            let chan = &frame[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => chan[y * self.width + x],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds a column-matrix gradient back onto one frame (accumulating).
    fn col2im(&self, col: &[f64], frame: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.in_ch {
            let chan = &mut frame[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                chan[y * self.width + x] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m, n] = a[m, k] * b[k, n] + beta * c`, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller's slices cover every index reachable from the given
    // dimensions and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geo: &ConvGeometry,
) -> Tensor {
    let plane = geo.out_plane();
    let patch = geo.patch_len();
    let in_frame = geo.in_ch * geo.height * geo.width;
    let out_frame = geo.out_ch * plane;
    let mut out = Tensor::zeros(&geo.output_shape());
    let mut col = vec![0.0; patch * plane];
    for t in 0..geo.frames {
        geo.im2col(&input.data()[t * in_frame..(t + 1) * in_frame], &mut col);
        let dst = &mut out.data_mut()[t * out_frame..(t + 1) * out_frame];
        if let Some(b) = bias {
            for (o, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(b.data()[o]);
            }
        }
        gemm(
            geo.out_ch,
            patch,
            plane,
            weight.data(),
            (patch as isize, 1),
            &col,
            (plane as isize, 1),
            if bias.is_some() { 1.0 } else { 0.0 },
            dst,
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geo: &ConvGeometry,
    want: (bool, bool, bool),
) -> ConvGrads {
    let plane = geo.out_plane();
    let patch = geo.patch_len();
    let in_frame = geo.in_ch * geo.height * geo.width;
    let out_frame = geo.out_ch * plane;
    let (want_input, want_weight, want_bias) = want;

    let mut d_input = want_input.then(|| Tensor::zeros(input.shape()));
    let mut d_weight = want_weight.then(|| Tensor::zeros(weight.shape()));
    let mut d_bias = want_bias.then(|| Tensor::zeros(&[geo.out_ch]));

    let mut col = vec![0.0; patch * plane];
    let mut d_col = vec![0.0; patch * plane];
    for t in 0..geo.frames {
        let g = &grad_out.data()[t * out_frame..(t + 1) * out_frame];
        if let Some(db) = d_bias.as_mut() {
            for (o, row) in g.chunks(plane).enumerate() {
                db.data_mut()[o] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = d_weight.as_mut() {
            geo.im2col(&input.data()[t * in_frame..(t + 1) * in_frame], &mut col);
            // dW[O, P] += g[O, S] * col^T[S, P]
            gemm(
                geo.out_ch,
                plane,
                patch,
                g,
                (plane as isize, 1),
                &col,
                (1, plane as isize),
                1.0,
                dw.data_mut(),
            );
        }
        if let Some(dx) = d_input.as_mut() {
            // dcol[P, S] = W^T[P, O] * g[O, S]
            gemm(
                patch,
                geo.out_ch,
                plane,
                weight.data(),
                (1, patch as isize),
                g,
                (plane as isize, 1),
                0.0,
                &mut d_col,
            );
            geo.col2im(&d_col, &mut dx.data_mut()[t * in_frame..(t + 1) * in_frame]);
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}
