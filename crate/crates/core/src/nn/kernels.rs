//! Forward/backward kernels on raw row-major buffers.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    pub const fn same(dilation: usize) -> Self {
        Self {
            stride: 1,
            pad: dilation,
            dilation,
        }
    }

    pub const fn down() -> Self {
        Self {
            stride: 2,
            pad: 1,
            dilation: 1,
        }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.pad - span) / self.stride + 1
    }
}

/// Geometry of one conv2d application.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, spec: Conv2dSpec) -> Self {
        Self {
            cin,
            h,
            w,
            k,
            ho: spec.out_size(h, k),
            wo: spec.out_size(w, k),
            spec,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos =
            (o * self.spec.stride + kk * self.spec.dilation) as isize - self.spec.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// `cols[(ci, ky, kx), (oy, ox)] = x[ci, oy*s - p + ky*d, ox*s - p + kx*d]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.col_cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let out = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, ky, g.h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.src(ox, kx, g.w) {
                                    Some(ix) => plane[iy * g.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Conv2d over a batch `[n, cin, h, w]` with weight `[cout, cin, k, k]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let (kr, hw) = (g.col_rows(), g.col_cols());
    let in_sz = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * hw];
    let mut cols = vec![T::zero(); kr * hw];
    for b in 0..n {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        let y = &mut out[b * cout * hw..(b + 1) * cout * hw];
        for (co, chunk) in y.chunks_mut(hw).enumerate() {
            chunk.fill(bias[co]);
        }
        T::gemm(cout, kr, hw, weight, false, &cols, false, y, true);
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let (kr, hw) = (g.col_rows(), g.col_cols());
    let in_sz = g.cin * g.h * g.w;
    let mut dw = vec![T::zero(); cout * kr];
    let mut db = vec![T::zero(); cout];
    let mut dx = need_dx.then(|| vec![T::zero(); n * in_sz]);
    let mut cols = vec![T::zero(); kr * hw];
    let mut dcols = vec![T::zero(); kr * hw];
    for b in 0..n {
        let dyb = &dy[b * cout * hw..(b + 1) * cout * hw];
        for (co, chunk) in dyb.chunks(hw).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        T::gemm(cout, hw, kr, dyb, false, &cols, true, &mut dw, true);
        if let Some(dx) = dx.as_mut() {
            T::gemm(kr, cout, hw, weight, true, dyb, false, &mut dcols, false);
            col2im(&dcols, g, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Weight `[cout, cin, k]` rearranged to `[k, cout, cin]`.
fn taps<T: Scalar>(weight: &[T], cout: usize, cin: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for j in 0..k {
                out[(j * cout + co) * cin + ci] = weight[(co * cin + ci) * k + j];
            }
        }
    }
    out
}

/// Geometry of a temporal convolution over `clips` groups of `len` frames.
#[derive(Clone, Copy, Debug)]
pub struct TemporalGeom {
    pub clips: usize,
    pub len: usize,
    pub cin: usize,
    pub cout: usize,
    /// Spatial positions per frame.
    pub area: usize,
    pub k: usize,
}

impl TemporalGeom {
    fn src(&self, t: usize, j: usize) -> Option<usize> {
        let pos = (t + j) as isize - (self.k / 2) as isize;
        (pos >= 0 && (pos as usize) < self.len).then_some(pos as usize)
    }
}

/// Zero-padded "same" convolution along the frame axis of `[clips*len, cin, area]`.
pub fn temporal_forward<T: Scalar>(x: &[T], g: &TemporalGeom, weight: &[T], bias: &[T]) -> Vec<T> {
    let w = taps(weight, g.cout, g.cin, g.k);
    let (isz, osz) = (g.cin * g.area, g.cout * g.area);
    let mut out = vec![T::zero(); g.clips * g.len * osz];
    for c in 0..g.clips {
        for t in 0..g.len {
            let y = &mut out[(c * g.len + t) * osz..(c * g.len + t + 1) * osz];
            for (co, chunk) in y.chunks_mut(g.area).enumerate() {
                chunk.fill(bias[co]);
            }
            for j in 0..g.k {
                let Some(src) = g.src(t, j) else { continue };
                let xs = &x[(c * g.len + src) * isz..(c * g.len + src + 1) * isz];
                let wj = &w[j * g.cout * g.cin..(j + 1) * g.cout * g.cin];
                T::gemm(g.cout, g.cin, g.area, wj, false, xs, false, y, true);
            }
        }
    }
    out
}

pub fn temporal_backward<T: Scalar>(
    x: &[T],
    g: &TemporalGeom,
    weight: &[T],
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let w = taps(weight, g.cout, g.cin, g.k);
    let (isz, osz) = (g.cin * g.area, g.cout * g.area);
    let mut dw_taps = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    for c in 0..g.clips {
        for t in 0..g.len {
            let dyt = &dy[(c * g.len + t) * osz..(c * g.len + t + 1) * osz];
            for (co, chunk) in dyt.chunks(g.area).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
            for j in 0..g.k {
                let Some(src) = g.src(t, j) else { continue };
                let range = (c * g.len + src) * isz..(c * g.len + src + 1) * isz;
                let wsl = j * g.cout * g.cin..(j + 1) * g.cout * g.cin;
                T::gemm(
                    g.cout,
                    g.area,
                    g.cin,
                    dyt,
                    false,
                    &x[range.clone()],
                    true,
                    &mut dw_taps[wsl.clone()],
                    true,
                );
                if let Some(dx) = dx.as_mut() {
                    T::gemm(
                        g.cin,
                        g.cout,
                        g.area,
                        &w[wsl],
                        true,
                        dyt,
                        false,
                        &mut dx[range],
                        true,
                    );
                }
            }
        }
    }
    let mut dw = vec![T::zero(); weight.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for j in 0..g.k {
                dw[(co * g.cin + ci) * g.k + j] = dw_taps[(j * g.cout + co) * g.cin + ci];
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Bilinear interpolation taps for one axis (`align_corners = false`).
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resizes every `[h, w]` plane of `x` to `[ho, wo]`.
pub fn resize_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::lit(fx), T::lit(1.0 - fx));
                let top = src[y0 * w + x0] * gx + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * gx + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * gy + bot * fy;
            }
        }
    }
    out
}

pub fn resize_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::lit(fx), T::lit(1.0 - fx));
                let g = src[oy * wo + ox];
                dst[y0 * w + x0] += g * gy * gx;
                dst[y0 * w + x1] += g * gy * fx;
                dst[y1 * w + x0] += g * fy * gx;
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
