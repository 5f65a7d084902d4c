//! Dense 1-D convolution kernels on channel-major buffers.

/// Geometry of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Conv1dSpec {
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: 0,
        }
    }
}

impl Conv1dSpec {
    pub fn output_len(&self, input_len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input_len + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub kernel: usize,
}

/// Range of output frames `t` for which `t*stride + offset - padding` lands
/// inside `0..t_in`.
#[inline]
fn valid_range(offset: usize, spec: &Conv1dSpec, t_in: usize, t_out: usize) -> (usize, usize) {
    // Need t*stride + offset >= padding and t*stride + offset - padding < t_in.
    let lo = if offset >= spec.padding {
        0
    } else {
        (spec.padding - offset).div_ceil(spec.stride)
    };
    let limit = t_in + spec.padding; // exclusive bound on t*stride + offset
    let hi = if limit > offset {
        ((limit - offset - 1) / spec.stride + 1).min(t_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: ConvDims, spec: &Conv1dSpec) -> Vec<f64> {
    let cin_g = d.c_in / spec.groups;
    let cout_g = d.c_out / spec.groups;
    let mut y = vec![0.0; d.c_out * d.t_out];
    for o in 0..d.c_out {
        let g = o / cout_g;
        let out = &mut y[o * d.t_out..(o + 1) * d.t_out];
        if let Some(b) = bias {
            out.iter_mut().for_each(|v| *v = b[o]);
        }
        for i in 0..cin_g {
            let ci = g * cin_g + i;
            let xin = &x[ci * d.t_in..(ci + 1) * d.t_in];
            for p in 0..d.kernel {
                let wv = w[(o * cin_g + i) * d.kernel + p];
                if wv == 0.0 {
                    continue;
                }
                let offset = p * spec.dilation;
                let (lo, hi) = valid_range(offset, spec, d.t_in, d.t_out);
                if spec.stride == 1 {
                    let s0 = lo + offset - spec.padding;
                    for (yv, xv) in out[lo..hi].iter_mut().zip(&xin[s0..s0 + (hi - lo)]) {
                        *yv += wv * xv;
                    }
                } else {
                    for t in lo..hi {
                        out[t] += wv * xin[t * spec.stride + offset - spec.padding];
                    }
                }
            }
        }
    }
    y
}

/// Accumulates input, weight and bias gradients of [`conv1d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    d: ConvDims,
    spec: &Conv1dSpec,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let cin_g = d.c_in / spec.groups;
    let cout_g = d.c_out / spec.groups;
    if let Some(gb) = gb {
        for o in 0..d.c_out {
            gb[o] += gy[o * d.t_out..(o + 1) * d.t_out].iter().sum::<f64>();
        }
    }
    for o in 0..d.c_out {
        let g = o / cout_g;
        let gout = &gy[o * d.t_out..(o + 1) * d.t_out];
        for i in 0..cin_g {
            let ci = g * cin_g + i;
            for p in 0..d.kernel {
                let widx = (o * cin_g + i) * d.kernel + p;
                let offset = p * spec.dilation;
                let (lo, hi) = valid_range(offset, spec, d.t_in, d.t_out);
                if lo >= hi {
                    continue;
                }
                if let Some(gw) = gw.as_deref_mut() {
                    let xin = &x[ci * d.t_in..(ci + 1) * d.t_in];
                    let mut acc = 0.0;
                    if spec.stride == 1 {
                        let s0 = lo + offset - spec.padding;
                        for (gv, xv) in gout[lo..hi].iter().zip(&xin[s0..s0 + (hi - lo)]) {
                            acc += gv * xv;
                        }
                    } else {
                        for t in lo..hi {
                            acc += gout[t] * xin[t * spec.stride + offset - spec.padding];
                        }
                    }
                    gw[widx] += acc;
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let wv = w[widx];
                    if wv == 0.0 {
                        continue;
                    }
                    let gxin = &mut gx[ci * d.t_in..(ci + 1) * d.t_in];
                    if spec.stride == 1 {
                        let s0 = lo + offset - spec.padding;
                        for (gxv, gv) in gxin[s0..s0 + (hi - lo)].iter_mut().zip(&gout[lo..hi]) {
                            *gxv += wv * gv;
                        }
                    } else {
                        for t in lo..hi {
                            gxin[t * spec.stride + offset - spec.padding] += wv * gout[t];
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution without padding or groups.
/// Weight layout `c_in x c_out x kernel`; output length `(t_in - 1)*stride + kernel`.
pub(crate) fn conv_transpose1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: ConvDims, stride: usize) -> Vec<f64> {
    let mut y = vec![0.0; d.c_out * d.t_out];
    if let Some(b) = bias {
        for o in 0..d.c_out {
            y[o * d.t_out..(o + 1) * d.t_out].iter_mut().for_each(|v| *v = b[o]);
        }
    }
    for i in 0..d.c_in {
        let xin = &x[i * d.t_in..(i + 1) * d.t_in];
        for o in 0..d.c_out {
            let out = &mut y[o * d.t_out..(o + 1) * d.t_out];
            let wrow = &w[(i * d.c_out + o) * d.kernel..(i * d.c_out + o + 1) * d.kernel];
            for (t, &xv) in xin.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (yv, wv) in out[t * stride..t * stride + d.kernel].iter_mut().zip(wrow) {
                    *yv += wv * xv;
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose1d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    d: ConvDims,
    stride: usize,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    if let Some(gb) = gb {
        for o in 0..d.c_out {
            gb[o] += gy[o * d.t_out..(o + 1) * d.t_out].iter().sum::<f64>();
        }
    }
    for i in 0..d.c_in {
        let xin = &x[i * d.t_in..(i + 1) * d.t_in];
        for o in 0..d.c_out {
            let gout = &gy[o * d.t_out..(o + 1) * d.t_out];
            let base = (i * d.c_out + o) * d.kernel;
            for t in 0..d.t_in {
                let window = &gout[t * stride..t * stride + d.kernel];
                if let Some(gx) = gx.as_deref_mut() {
                    let wrow = &w[base..base + d.kernel];
                    gx[i * d.t_in + t] += window.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(gw) = gw.as_deref_mut() {
                    let xv = xin[t];
                    if xv != 0.0 {
                        for (gwv, gv) in gw[base..base + d.kernel].iter_mut().zip(window) {
                            *gwv += gv * xv;
                        }
                    }
                }
            }
        }
    }
}
