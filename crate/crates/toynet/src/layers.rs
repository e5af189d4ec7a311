//! Convolution and activation primitives with hand-written backward passes.
//!
//! Feature maps are stored channel-major as `(C, B, H, W)` so a convolution
//! over the whole batch is a single GEMM: `out[Cout, B·Ho·Wo] = W[Cout, Cin·k·k] · col`.

use serde::{Deserialize, Serialize};

/// `(C, B, H, W)` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self { channels, batch, height, width, data: vec![0.0; channels * batch * height * width] }
    }

    /// Pixels per channel across the batch.
    pub fn plane(&self) -> usize {
        self.batch * self.height * self.width
    }

    /// Stacks maps with equal spatial shape along the channel axis.
    pub fn concat(parts: &[&FeatureMap]) -> FeatureMap {
        let first = parts[0];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            debug_assert_eq!((p.batch, p.height, p.width), (first.batch, first.height, first.width));
            data.extend_from_slice(&p.data);
        }
        FeatureMap {
            channels: parts.iter().map(|p| p.channels).sum(),
            batch: first.batch,
            height: first.height,
            width: first.width,
            data,
        }
    }
}

/// Shape of one convolution layer. Padding is `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.fan_in()
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad() - self.kernel) / self.stride + 1
    }
}

/// `c = a·b + beta·c` with optional transposes; row-major operands.
///
/// `a` is `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k` when `tb`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Unrolls input patches into a `(Cin·k·k) × (B·Ho·Wo)` matrix.
pub fn im2col(x: &FeatureMap, s: &ConvShape) -> Vec<f64> {
    let (ho, wo) = (s.out_size(x.height), s.out_size(x.width));
    let n = x.batch * ho * wo;
    let pad = s.pad() as isize;
    let mut col = vec![0.0; s.fan_in() * n];
    for c in 0..x.channels {
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = (c * s.kernel + ky) * s.kernel + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for b in 0..x.batch {
                    let src = &x.data[(c * x.batch + b) * x.height * x.width..][..x.height * x.width];
                    for oy in 0..ho {
                        let iy = (oy * s.stride + ky) as isize - pad;
                        let out_row = &mut dst[(b * ho + oy) * wo..][..wo];
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.width..][..x.width];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s.stride + kx) as isize - pad;
                            if ix >= 0 && ix < x.width as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im(dcol: &[f64], s: &ConvShape, batch: usize, height: usize, width: usize) -> FeatureMap {
    let (ho, wo) = (s.out_size(height), s.out_size(width));
    let n = batch * ho * wo;
    let pad = s.pad() as isize;
    let mut dx = FeatureMap::zeros(s.cin, batch, height, width);
    for c in 0..s.cin {
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = (c * s.kernel + ky) * s.kernel + kx;
                let src = &dcol[row * n..(row + 1) * n];
                for b in 0..batch {
                    let dst = &mut dx.data[(c * batch + b) * height * width..][..height * width];
                    for oy in 0..ho {
                        let iy = (oy * s.stride + ky) as isize - pad;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let in_row = &src[(b * ho + oy) * wo..][..wo];
                        let dst_row = &mut dst[iy as usize * width..][..width];
                        for (ox, g) in in_row.iter().enumerate() {
                            let ix = (ox * s.stride + kx) as isize - pad;
                            if ix >= 0 && ix < width as isize {
                                dst_row[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Forward cache of one convolution.
pub struct ConvCache {
    /// Unrolled input; `None` for 1×1 stride-1 layers, where it equals the input.
    col: Option<Vec<f64>>,
    input: Option<FeatureMap>,
    in_dims: (usize, usize, usize),
}

pub fn conv_forward(x: &FeatureMap, s: &ConvShape, weight: &[f64], bias: &[f64], keep: bool) -> (FeatureMap, Option<ConvCache>) {
    assert_eq!(x.channels, s.cin);
    let (ho, wo) = (s.out_size(x.height), s.out_size(x.width));
    let n = x.batch * ho * wo;
    let mut out = FeatureMap::zeros(s.cout, x.batch, ho, wo);
    for (co, chunk) in out.data.chunks_exact_mut(n).enumerate() {
        chunk.fill(bias[co]);
    }
    let pointwise = s.kernel == 1 && s.stride == 1;
    let col = if pointwise { None } else { Some(im2col(x, s)) };
    let b = col.as_deref().unwrap_or(&x.data);
    gemm(s.cout, s.fan_in(), n, weight, false, b, false, 1.0, &mut out.data);
    let cache = keep.then(|| ConvCache {
        input: if pointwise { Some(x.clone()) } else { None },
        col,
        in_dims: (x.batch, x.height, x.width),
    });
    (out, cache)
}

/// Returns `(d_input, d_weight, d_bias)`; `d_input` is skipped when `need_input` is false.
pub fn conv_backward(
    dy: &FeatureMap,
    s: &ConvShape,
    weight: &[f64],
    cache: &ConvCache,
    need_input: bool,
) -> (Option<FeatureMap>, Vec<f64>, Vec<f64>) {
    let n = dy.plane();
    let col = cache.col.as_deref().or(cache.input.as_ref().map(|x| x.data.as_slice())).expect("conv cache");
    let mut dw = vec![0.0; s.weight_len()];
    gemm(s.cout, n, s.fan_in(), &dy.data, false, col, true, 0.0, &mut dw);
    let db = dy.data.chunks_exact(n).map(|c| c.iter().sum()).collect();
    let dx = need_input.then(|| {
        let mut dcol = vec![0.0; s.fan_in() * n];
        gemm(s.fan_in(), s.cout, n, weight, true, &dy.data, false, 0.0, &mut dcol);
        let (b, h, w) = cache.in_dims;
        if cache.col.is_none() {
            FeatureMap { channels: s.cin, batch: b, height: h, width: w, data: dcol }
        } else {
            col2im(&dcol, s, b, h, w)
        }
    });
    (dx, dw, db)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x · sigmoid(x)`, applied in place.
pub fn silu(x: &mut FeatureMap) {
    x.data.iter_mut().for_each(|v| *v *= sigmoid(*v));
}

/// Multiplies `dy` by the SiLU derivative evaluated at pre-activation `z`.
pub fn silu_backward(dy: &mut FeatureMap, z: &FeatureMap) {
    for (g, &x) in dy.data.iter_mut().zip(&z.data) {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    }
}
