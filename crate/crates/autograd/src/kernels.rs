//! Raw numeric kernels (no tape): GEMM wrappers, im2col/col2im, and the
//! space/depth rearrangements.

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
/// `a` is `m x k` after `op`, `b` is `k x n`, `c` is `m x n`; all row-major.
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
    if k == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over NHWC input with an HWIO kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Zero-padding convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output is `ceil(in / stride)`; extra padding goes bottom/right.
    Same,
    /// No padding.
    Valid,
}

impl ConvGeom {
    pub fn new(input: [usize; 4], kernel: [usize; 4], stride: usize, padding: Padding) -> Option<Self> {
        let [n, h, w, c] = input;
        let [kh, kw, kc, out_c] = kernel;
        if kc != c || stride == 0 {
            return None;
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return None;
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Some(Self {
            n,
            h,
            w,
            c,
            kh,
            kw,
            out_c,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn out_rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// A 1x1 stride-1 convolution is a plain matrix product on the input.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }
}

/// Unfold patches: output `[n*oh*ow, kh*kw*c]`.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut col = vec![0.0; g.out_rows() * plen];
    let mut row = 0;
    for b in 0..g.n {
        let img = &x[b * g.h * g.w * g.c..(b + 1) * g.h * g.w * g.c];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut col[row * plen..(row + 1) * plen];
                let y0 = (oy * g.stride) as isize - g.pad_top as isize;
                let x0 = (ox * g.stride) as isize - g.pad_left as isize;
                for ky in 0..g.kh {
                    let iy = y0 + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = x0 + kx as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.c;
                        let d = (ky * g.kw + kx) * g.c;
                        dst[d..d + g.c].copy_from_slice(&img[src..src + g.c]);
                    }
                }
                row += 1;
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add patches back into an NHWC image.
pub fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut x = vec![0.0; g.n * g.h * g.w * g.c];
    let mut row = 0;
    for b in 0..g.n {
        let img = &mut x[b * g.h * g.w * g.c..(b + 1) * g.h * g.w * g.c];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src_row = &col[row * plen..(row + 1) * plen];
                let y0 = (oy * g.stride) as isize - g.pad_top as isize;
                let x0 = (ox * g.stride) as isize - g.pad_left as isize;
                for ky in 0..g.kh {
                    let iy = y0 + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = x0 + kx as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.w + ix as usize) * g.c;
                        let s = (ky * g.kw + kx) * g.c;
                        for (d, v) in img[dst..dst + g.c].iter_mut().zip(&src_row[s..s + g.c]) {
                            *d += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

/// Index map for space-to-depth with block `k` on `[n, h, w, c]`:
/// `map[out_index] = in_index`. Output shape `[n, h/k, w/k, c*k*k]`, with the
/// output channel laid out as `(dy, dx, c)`.
pub fn space_to_depth_map(n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<usize> {
    let (oh, ow, oc) = (h / k, w / k, c * k * k);
    let mut map = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..oc {
                    let dy = ch / (k * c);
                    let dx = (ch / c) % k;
                    let ci = ch % c;
                    let (iy, ix) = (oy * k + dy, ox * k + dx);
                    map.push(((b * h + iy) * w + ix) * c + ci);
                }
            }
        }
    }
    debug_assert_eq!(map.len(), n * oh * ow * oc);
    map
}

pub fn gather(src: &[f64], map: &[usize]) -> Vec<f64> {
    map.iter().map(|&i| src[i]).collect()
}

/// Adjoint of [`gather`] for a permutation-like map.
pub fn scatter(src: &[f64], map: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (&i, &v) in map.iter().zip(src) {
        out[i] += v;
    }
    out
}
