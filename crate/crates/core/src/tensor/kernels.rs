//! Tape-free numeric kernels shared by the autodiff graph and the
//! reference interpreter.

use super::{mismatch, KernelShape, Padding, Result, Shape3, Stride, TensorError};

/// Resolved convolution arithmetic for one (input, kernel, stride, padding)
/// combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape3,
    pub kernel: KernelShape,
    pub stride: Stride,
    pub pad_t: usize,
    pub pad_s: usize,
    pub output: Shape3,
}

fn axis(len: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(len);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if k > len {
                None
            } else {
                Some(((len - k) / stride + 1, 0))
            }
        }
    }
}

impl ConvGeometry {
    pub fn new(input: Shape3, kernel: KernelShape, stride: Stride, padding: Padding) -> Result<Self> {
        if stride.t == 0 || stride.s == 0 {
            return Err(TensorError::Invalid {
                op: "conv",
                msg: format!("stride ({}, {}) must be >= 1", stride.t, stride.s),
            });
        }
        if kernel.f_in != input.f || kernel.is_empty() {
            return Err(mismatch("conv", format!("input {input}"), format!("kernel {kernel}")));
        }
        let (Some((t_out, pad_t)), Some((s_out, pad_s))) = (
            axis(input.t, kernel.kt, stride.t, padding),
            axis(input.s, kernel.ks, stride.s, padding),
        ) else {
            return Err(mismatch("conv", format!("input {input}"), format!("kernel {kernel}")));
        };
        Ok(Self {
            input,
            kernel,
            stride,
            pad_t,
            pad_s,
            output: Shape3::new(t_out, s_out, kernel.f_out),
        })
    }

    /// Multiply-accumulates of one forward pass, counting padded taps.
    pub fn macs(&self) -> u64 {
        (self.output.t * self.output.s) as u64
            * (self.kernel.kt * self.kernel.ks * self.kernel.f_in * self.kernel.f_out) as u64
    }

    #[inline]
    fn source(&self, out_t: usize, out_s: usize, kt: usize, ks: usize) -> Option<(usize, usize)> {
        let t = (out_t * self.stride.t + kt).checked_sub(self.pad_t)?;
        let s = (out_s * self.stride.s + ks).checked_sub(self.pad_s)?;
        (t < self.input.t && s < self.input.s).then_some((t, s))
    }
}

pub fn conv_forward(geo: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (inp, ker, out) = (geo.input, geo.kernel, geo.output);
    let mut y = vec![0.0; out.len()];
    let f_out = ker.f_out;
    for ot in 0..out.t {
        for os in 0..out.s {
            let base = out.index(ot, os, 0);
            let acc = &mut y[base..base + f_out];
            for kt in 0..ker.kt {
                for ks in 0..ker.ks {
                    let Some((it, is)) = geo.source(ot, os, kt, ks) else {
                        continue;
                    };
                    let xrow = &x[inp.index(it, is, 0)..inp.index(it, is, 0) + inp.f];
                    for (fi, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &w[ker.index(kt, ks, fi, 0)..ker.index(kt, ks, fi, 0) + f_out];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
    y
}

/// Integer convolution with 32-bit accumulation, same tap order as
/// [`conv_forward`].
pub fn conv_forward_i8(geo: &ConvGeometry, x: &[i8], w: &[i8]) -> Vec<i32> {
    let (inp, ker, out) = (geo.input, geo.kernel, geo.output);
    let mut y = vec![0i32; out.len()];
    let f_out = ker.f_out;
    for ot in 0..out.t {
        for os in 0..out.s {
            let base = out.index(ot, os, 0);
            let acc = &mut y[base..base + f_out];
            for kt in 0..ker.kt {
                for ks in 0..ker.ks {
                    let Some((it, is)) = geo.source(ot, os, kt, ks) else {
                        continue;
                    };
                    let xrow = &x[inp.index(it, is, 0)..inp.index(it, is, 0) + inp.f];
                    for (fi, &xv) in xrow.iter().enumerate() {
                        let wrow = &w[ker.index(kt, ks, fi, 0)..ker.index(kt, ks, fi, 0) + f_out];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += i32::from(xv) * i32::from(wv);
                        }
                    }
                }
            }
        }
    }
    y
}

/// Accumulates input and kernel gradients for upstream gradient `dy`.
pub fn conv_backward(
    geo: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let (inp, ker, out) = (geo.input, geo.kernel, geo.output);
    let f_out = ker.f_out;
    let mut dx = dx;
    let mut dw = dw;
    for ot in 0..out.t {
        for os in 0..out.s {
            let base = out.index(ot, os, 0);
            let g = &dy[base..base + f_out];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            for kt in 0..ker.kt {
                for ks in 0..ker.ks {
                    let Some((it, is)) = geo.source(ot, os, kt, ks) else {
                        continue;
                    };
                    let xbase = inp.index(it, is, 0);
                    for fi in 0..inp.f {
                        let wbase = ker.index(kt, ks, fi, 0);
                        if let Some(dw) = dw.as_deref_mut() {
                            let xv = x[xbase + fi];
                            if xv != 0.0 {
                                for (d, &gv) in dw[wbase..wbase + f_out].iter_mut().zip(g) {
                                    *d += xv * gv;
                                }
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let s: f64 = w[wbase..wbase + f_out].iter().zip(g).map(|(a, b)| a * b).sum();
                            dx[xbase + fi] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Adds a per-filter bias in place.
pub fn add_bias(y: &mut [f64], bias: &[f64]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn relu_inplace(y: &mut [f64]) {
    for v in y {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Mean over time and sensor axes per filter.
pub fn global_avg_pool(shape: Shape3, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; shape.f];
    for row in x.chunks_exact(shape.f) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = (shape.t * shape.s) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Symmetric int8 quantize-dequantize.
#[inline]
pub fn fake_quant(v: f64, scale: f64) -> f64 {
    quantize(v, scale) as f64 * scale
}

#[inline]
pub fn quantize(v: f64, scale: f64) -> i8 {
    (v / scale).round().clamp(-128.0, 127.0) as i8
}

/// Max-abs symmetric scale; an all-zero tensor gets scale 1.
pub fn symmetric_scale(values: &[f64]) -> f64 {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        max / 127.0
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_halves_even_lengths() {
        let g = ConvGeometry::new(
            Shape3::new(8, 1, 1),
            KernelShape::new(3, 1, 1, 1),
            Stride::new(2, 1),
            Padding::Same,
        )
        .unwrap();
        assert_eq!(g.output, Shape3::new(4, 1, 1));
        let g = ConvGeometry::new(
            Shape3::new(7, 30, 2),
            KernelShape::new(1, 30, 2, 4),
            Stride::new(1, 2),
            Padding::Same,
        )
        .unwrap();
        assert_eq!(g.output, Shape3::new(7, 15, 4));
    }

    #[test]
    fn box_filter_on_ones() {
        let g = ConvGeometry::new(
            Shape3::new(8, 1, 1),
            KernelShape::new(3, 1, 1, 1),
            Stride::unit(),
            Padding::Same,
        )
        .unwrap();
        let y = conv_forward(&g, &[1.0; 8], &[1.0; 3]);
        assert_eq!(y, vec![2.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn valid_padding_rejects_oversized_kernel() {
        let err = ConvGeometry::new(
            Shape3::new(2, 1, 1),
            KernelShape::new(3, 1, 1, 1),
            Stride::unit(),
            Padding::Valid,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 1, 1)") && msg.contains("(3, 1, 1, 1)"), "{msg}");
    }

    #[test]
    fn channel_count_mismatch_names_both_shapes() {
        let err = ConvGeometry::new(
            Shape3::new(8, 1, 2),
            KernelShape::new(3, 1, 1, 1),
            Stride::unit(),
            Padding::Same,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn zero_scale_defaults_to_one() {
        assert_eq!(symmetric_scale(&[0.0, 0.0]), 1.0);
        assert!((symmetric_scale(&[-1.0, 0.5]) - 1.0 / 127.0).abs() < 1e-15);
    }
}
