//! Raw forward/backward kernels on flat buffers. Shapes are validated by the
//! graph before these are called.

/// Convolution hyper-parameters shared by forward and backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, padding: 0, dilation: 1 }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dSpec { stride, padding, dilation }
    }

    /// Output extent along one axis, or `None` when it would be < 1.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Input coordinates hit by kernel tap `k` for each output coordinate,
/// `None` where the tap lands in padding.
fn tap_positions(out: usize, input: usize, k: usize, spec: &Conv2dSpec) -> Vec<Option<usize>> {
    (0..out)
        .map(|o| {
            let pos = (o * spec.stride + k * spec.dilation) as isize - spec.padding as isize;
            (pos >= 0 && (pos as usize) < input).then_some(pos as usize)
        })
        .collect()
}

pub(crate) fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
    spec: &Conv2dSpec,
) -> Vec<f64> {
    let plane = d.oh * d.ow;
    let mut out = vec![0.0; d.c_out * plane];
    let rows: Vec<_> = (0..d.kh).map(|i| tap_positions(d.oh, d.h, i, spec)).collect();
    let cols: Vec<_> = (0..d.kw).map(|j| tap_positions(d.ow, d.w, j, spec)).collect();
    for o in 0..d.c_out {
        let dst = &mut out[o * plane..(o + 1) * plane];
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..d.c_in {
            let src = &input[c * d.h * d.w..(c + 1) * d.h * d.w];
            for i in 0..d.kh {
                for j in 0..d.kw {
                    let wv = weight[((o * d.c_in + c) * d.kh + i) * d.kw + j];
                    if wv == 0.0 {
                        continue;
                    }
                    for (y, iy) in rows[i].iter().enumerate() {
                        let Some(iy) = iy else { continue };
                        let srow = &src[iy * d.w..(iy + 1) * d.w];
                        let drow = &mut dst[y * d.ow..(y + 1) * d.ow];
                        for (x, ix) in cols[j].iter().enumerate() {
                            if let Some(ix) = ix {
                                drow[x] += wv * srow[*ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input, grad_weight, grad_bias).
pub(crate) fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    spec: &Conv2dSpec,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = d.oh * d.ow;
    let mut gi = vec![0.0; input.len()];
    let mut gw = vec![0.0; weight.len()];
    let gb: Vec<f64> = (0..d.c_out).map(|o| grad_out[o * plane..(o + 1) * plane].iter().sum()).collect();
    let rows: Vec<_> = (0..d.kh).map(|i| tap_positions(d.oh, d.h, i, spec)).collect();
    let cols: Vec<_> = (0..d.kw).map(|j| tap_positions(d.ow, d.w, j, spec)).collect();
    for o in 0..d.c_out {
        let g = &grad_out[o * plane..(o + 1) * plane];
        for c in 0..d.c_in {
            let base = c * d.h * d.w;
            for i in 0..d.kh {
                for j in 0..d.kw {
                    let widx = ((o * d.c_in + c) * d.kh + i) * d.kw + j;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for (y, iy) in rows[i].iter().enumerate() {
                        let Some(iy) = iy else { continue };
                        let grow = &g[y * d.ow..(y + 1) * d.ow];
                        let off = base + iy * d.w;
                        for (x, ix) in cols[j].iter().enumerate() {
                            if let Some(ix) = ix {
                                acc += grow[x] * input[off + ix];
                                gi[off + ix] += grow[x] * wv;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gi, gw, gb)
}

/// `a` is m×k, `b` is k×n.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Sample positions for align-corners-false bilinear resizing along one axis:
/// `(low index, high index, weight of high)`.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub(crate) fn upsample_forward(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[(ch * oh + y) * ow + xo] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(g: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut gi = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut gi[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = g[(ch * oh + y) * ow + xo];
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    gi
}
