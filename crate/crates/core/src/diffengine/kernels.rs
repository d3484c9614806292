//! Raw f32 kernels behind the graph operators. Everything here is
//! single-threaded with a fixed iteration order, so results are bit-stable
//! for a given build.

use super::tensor::Nhwc;

/// `a · b` for row/column-strided operands (m×k times k×n), into a fresh m×n buffer, skipping the zero fill that a beta = 0
/// product would overwrite anyway.
pub(crate) fn gemm_new(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: (usize, usize),
    b: &[f32],
    sb: (usize, usize),
) -> Vec<f32> {
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    assert!((m - 1) * sa.0 + (k - 1) * sa.1 < a.len());
    assert!((k - 1) * sb.0 + (n - 1) * sb.1 < b.len());
    let mut c: Vec<f32> = Vec::with_capacity(m * n);
    // SAFETY: strided reads are bounded by the asserts; with beta = 0 sgemm
    // writes every element of C without reading it, after which all m·n
    // elements are initialised and the length can be set.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub input: Nhwc,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: Nhwc, kh: usize, kw: usize, cout: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || input.h + 2 * pad < kh || input.w + 2 * pad < kw {
            return None;
        }
        let oh = (input.h + 2 * pad - kh) / stride + 1;
        let ow = (input.w + 2 * pad - kw) / stride + 1;
        Some(ConvGeom {
            input,
            kh,
            kw,
            cout,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn rows(&self) -> usize {
        self.input.n * self.oh * self.ow
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.input.c
    }

    pub fn output(&self) -> Nhwc {
        Nhwc {
            n: self.input.n,
            h: self.oh,
            w: self.ow,
            c: self.cout,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source pixel for tap (ky, kx) of output (oy, ox), if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.input.h && ix < self.input.w).then_some((iy, ix))
    }
}

pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    if g.is_pointwise() {
        return x.to_vec();
    }
    let c = g.input.c;
    let patch = g.patch();
    // Rows are written strictly in order, so the buffer is filled by
    // appending and never needs zeroing up front.
    let mut cols = Vec::with_capacity(g.rows() * patch);
    for n in 0..g.input.n {
        let img = n * g.input.h * g.input.w * c;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        match g.source(oy, ox, ky, kx) {
                            Some((iy, ix)) => {
                                let s = img + (iy * g.input.w + ix) * c;
                                cols.extend_from_slice(&x[s..s + c]);
                            }
                            None => cols.resize(cols.len() + c, 0.0),
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    if g.is_pointwise() {
        return cols.to_vec();
    }
    let c = g.input.c;
    let patch = g.patch();
    let mut dx = vec![0.0f32; g.input.n * g.input.h * g.input.w * c];
    let mut row = 0;
    for n in 0..g.input.n {
        let img = n * g.input.h * g.input.w * c;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let d = img + (iy * g.input.w + ix) * c;
                            let s = (ky * g.kw + kx) * c;
                            for (o, v) in dx[d..d + c].iter_mut().zip(&src[s..s + c]) {
                                *o += v;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// Adds `bias` to every row of a rows×cols matrix.
pub(crate) fn add_row_bias(out: &mut [f32], bias: &[f32]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Column sums of a rows×cols matrix.
pub(crate) fn column_sums(m: &[f32], cols: usize) -> Vec<f32> {
    let mut s = vec![0.0f32; cols];
    for row in m.chunks(cols) {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}

pub(crate) fn upsample2x(x: &[f32], s: Nhwc) -> Vec<f32> {
    let (ow, c) = (s.w * 2, s.c);
    let mut out = vec![0.0f32; s.n * s.h * 2 * ow * c];
    for n in 0..s.n {
        for y in 0..s.h * 2 {
            for xo in 0..ow {
                let src = ((n * s.h + y / 2) * s.w + xo / 2) * c;
                let dst = ((n * s.h * 2 + y) * ow + xo) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

/// Gradient of nearest 2× upsampling; `s` is the (small) input shape.
pub(crate) fn upsample2x_backward(g: &[f32], s: Nhwc) -> Vec<f32> {
    let (ow, c) = (s.w * 2, s.c);
    let mut dx = vec![0.0f32; s.n * s.h * s.w * c];
    for n in 0..s.n {
        for y in 0..s.h * 2 {
            for xo in 0..ow {
                let dst = ((n * s.h + y / 2) * s.w + xo / 2) * c;
                let src = ((n * s.h * 2 + y) * ow + xo) * c;
                for (d, v) in dx[dst..dst + c].iter_mut().zip(&g[src..src + c]) {
                    *d += v;
                }
            }
        }
    }
    dx
}

/// Per-output-pixel bilinear taps shared by all channels of one image.
///
/// `taps[(n * h_out + y) * w_out + x]` lists four (source pixel, weight)
/// pairs into image `n`. Built by the transforms module from affine maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMap {
    pub n: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub taps: Vec<[(u32, f32); 4]>,
}

impl SampleMap {
    pub(crate) fn apply(&self, x: &[f32], c: usize) -> Vec<f32> {
        let in_px = self.h_in * self.w_in;
        let out_px = self.h_out * self.w_out;
        let mut out = vec![0.0f32; self.n * out_px * c];
        for n in 0..self.n {
            for p in 0..out_px {
                let taps = &self.taps[n * out_px + p];
                let dst = &mut out[(n * out_px + p) * c..(n * out_px + p + 1) * c];
                for &(src, w) in taps {
                    if w == 0.0 {
                        continue;
                    }
                    let s = (n * in_px + src as usize) * c;
                    for (o, v) in dst.iter_mut().zip(&x[s..s + c]) {
                        *o += w * v;
                    }
                }
            }
        }
        out
    }

    pub(crate) fn apply_transpose(&self, g: &[f32], c: usize) -> Vec<f32> {
        let in_px = self.h_in * self.w_in;
        let out_px = self.h_out * self.w_out;
        let mut dx = vec![0.0f32; self.n * in_px * c];
        for n in 0..self.n {
            for p in 0..out_px {
                let taps = &self.taps[n * out_px + p];
                let src = &g[(n * out_px + p) * c..(n * out_px + p + 1) * c];
                for &(idx, w) in taps {
                    if w == 0.0 {
                        continue;
                    }
                    let d = (n * in_px + idx as usize) * c;
                    for (o, v) in dx[d..d + c].iter_mut().zip(src) {
                        *o += w * v;
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
        let mut out = vec![0.0; g.rows() * g.cout];
        let c = g.input.c;
        for n in 0..g.input.n {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    for co in 0..g.cout {
                        let mut acc = 0.0;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.input.h as isize || ix >= g.input.w as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xv = x[((n * g.input.h + iy as usize) * g.input.w + ix as usize) * c + ci];
                                    let wv = w[((ky * g.kw + kx) * c + ci) * g.cout + co];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((n * g.oh + oy) * g.ow + ox) * g.cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let input = Nhwc { n: 2, h: 5, w: 6, c: 3 };
        for (stride, pad) in [(1, 1), (2, 1), (2, 0), (1, 0)] {
            let g = ConvGeom::new(input, 3, 3, 4, stride, pad).unwrap();
            let x: Vec<f32> = (0..input.n * input.h * input.w * input.c)
                .map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0)
                .collect();
            let w: Vec<f32> = (0..g.patch() * g.cout).map(|i| ((i * 13 % 11) as f32 - 5.0) / 5.0).collect();
            let cols = im2col(&x, &g);
            let out = gemm_new(g.rows(), g.patch(), g.cout, &cols, (g.patch(), 1), &w, (g.cout, 1));
            let want = naive_conv(&x, &w, &g);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let input = Nhwc { n: 1, h: 4, w: 5, c: 2 };
        let g = ConvGeom::new(input, 3, 3, 1, 2, 1).unwrap();
        let x: Vec<f32> = (0..40).map(|i| (i as f32 * 0.37).sin()).collect();
        let y: Vec<f32> = (0..g.rows() * g.patch()).map(|i| (i as f32 * 0.11).cos()).collect();
        let lhs: f32 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let s = Nhwc { n: 1, h: 1, w: 2, c: 1 };
        let up = upsample2x(&[1.0, 2.0], s);
        assert_eq!(up, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let back = upsample2x_backward(&[1.0; 8], s);
        assert_eq!(back, vec![4.0, 4.0]);
    }
}
