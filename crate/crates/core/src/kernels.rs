//! Raw slice kernels shared by the tensor ops and their backward passes.

/// `c += a · b` with `a: m×k`, `b: k×p`, `c: m×p`, all row-major.
pub(crate) fn gemm(m: usize, k: usize, p: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * p && c.len() >= m * p);
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: p×k`, `c: m×p`.
pub(crate) fn gemm_a_bt(m: usize, k: usize, p: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * p + j] += dot;
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×p`, `c: m×p`.
pub(crate) fn gemm_at_b(m: usize, k: usize, p: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * p..(kk + 1) * p];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * p..(i + 1) * p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a single 2-D convolution (square kernel, symmetric padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub(crate) fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Input coordinate for output coordinate `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds one image `(C, H, W)` into columns `(C·K·K, OH·OW)`.
pub(crate) fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let (k, ohw) = (g.k, g.out_h * g.out_w);
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let sy = g.src(oy, ky, g.h);
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match (sy, g.src(ox, kx, g.w)) {
                            (Some(y), Some(x)) => plane[y * g.w + x],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let (k, ohw) = (g.k, g.out_h * g.out_w);
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let Some(y) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(x) = g.src(ox, kx, g.w) {
                            plane[y * g.w + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Depth-wise convolution of one channel plane with a `K×K` filter.
pub(crate) fn dw_plane_forward(g: &ConvGeom, plane: &[f64], filt: &[f64], bias: f64, out: &mut [f64]) {
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let mut acc = bias;
            for ky in 0..g.k {
                let Some(y) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    if let Some(x) = g.src(ox, kx, g.w) {
                        acc += filt[ky * g.k + kx] * plane[y * g.w + x];
                    }
                }
            }
            out[oy * g.out_w + ox] = acc;
        }
    }
}

/// Backward of [`dw_plane_forward`]: accumulates into `d_plane` and `d_filt`, returns the bias gradient.
pub(crate) fn dw_plane_backward(
    g: &ConvGeom,
    plane: &[f64],
    filt: &[f64],
    d_out: &[f64],
    d_plane: &mut [f64],
    d_filt: &mut [f64],
) -> f64 {
    let mut d_bias = 0.0;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let go = d_out[oy * g.out_w + ox];
            d_bias += go;
            if go == 0.0 {
                continue;
            }
            for ky in 0..g.k {
                let Some(y) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    if let Some(x) = g.src(ox, kx, g.w) {
                        d_filt[ky * g.k + kx] += go * plane[y * g.w + x];
                        d_plane[y * g.w + x] += go * filt[ky * g.k + kx];
                    }
                }
            }
        }
    }
    d_bias
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x · Φ(x)`.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// `d/dx [x · Φ(x)] = Φ(x) + x · φ(x)`.
#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, &b, &mut c);

        // bᵀ stored as 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm_a_bt(2, 3, 4, &a, &bt, &mut c2);
        assert_eq!(c, c2);

        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c3 = vec![0.0; 8];
        gemm_at_b(2, 3, 4, &at, &b, &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::new(1, 224, 224, 3, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (112, 112));
        let g = ConvGeom::new(1, 7, 7, 3, 2, 1).unwrap();
        assert_eq!(g.out_h, 4);
        assert!(ConvGeom::new(1, 2, 2, 5, 1, 1).is_none());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
