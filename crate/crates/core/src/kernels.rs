//! Dense kernels: GEMM (delegated to `matrixmultiply`) and im2col-based 2-D
//! convolution.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    /// Output spatial size, or `None` when the kernel does not fit.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let h = self.height + 2 * ph;
        let w = self.width + 2 * pw;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || h < kh || w < kw {
            return None;
        }
        Some(((h - kh) / sh + 1, (w - kw) / sw + 1))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }
}

/// `c = op(a) * op(b) + beta * c` with row-major storage.
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
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

fn im2col(g: &ConvGeometry, img: &[f64], ho: usize, wo: usize, cols: &mut [f64]) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let hw = ho * wo;
    for c in 0..g.in_channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut cols[((c * kh + i) * kw + j) * hw..][..hw];
                for oh in 0..ho {
                    let y = (oh * sh + i) as isize - ph as isize;
                    let dst = &mut row[oh * wo..(oh + 1) * wo];
                    if y < 0 || y >= g.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let x = (ow * sw + j) as isize - pw as isize;
                        *d = if x < 0 || x >= g.width as isize { 0.0 } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], ho: usize, wo: usize, img: &mut [f64]) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let hw = ho * wo;
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..kh {
            for j in 0..kw {
                let row = &cols[((c * kh + i) * kw + j) * hw..][..hw];
                for oh in 0..ho {
                    let y = (oh * sh + i) as isize - ph as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ow in 0..wo {
                        let x = (ow * sw + j) as isize - pw as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] += row[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `input` is `[N,C,H,W]`, `weight`
/// is `[O,C,kh,kw]`; returns `[N,O,Ho,Wo]` data.
pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.output_hw().expect("conv geometry validated by caller");
    let hw = ho * wo;
    let pl = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * hw;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = vec![0.0; pl * hw];
    for n in 0..g.batch {
        let img = &input[n * in_len..(n + 1) * in_len];
        im2col(g, img, ho, wo, &mut cols);
        gemm(g.out_channels, pl, hw, weight, false, &cols, false, &mut out[n * out_len..(n + 1) * out_len], 0.0);
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and weight.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ho, wo) = g.output_hw().expect("conv geometry validated by caller");
    let hw = ho * wo;
    let pl = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * hw;
    let mut gin = need_input.then(|| vec![0.0; g.batch * in_len]);
    let mut gw = need_weight.then(|| vec![0.0; g.out_channels * pl]);
    let mut cols = vec![0.0; pl * hw];
    for n in 0..g.batch {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(gw) = gw.as_mut() {
            im2col(g, &input[n * in_len..(n + 1) * in_len], ho, wo, &mut cols);
            gemm(g.out_channels, hw, pl, go, false, &cols, true, gw, 1.0);
        }
        if let Some(gin) = gin.as_mut() {
            gemm(pl, g.out_channels, hw, weight, true, go, false, &mut cols, 0.0);
            col2im(g, &cols, ho, wo, &mut gin[n * in_len..(n + 1) * in_len]);
        }
    }
    (gin, gw)
}
