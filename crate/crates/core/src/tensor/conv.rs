//! Direct cross-correlation kernels over `[B, C, H, W]` buffers.
//!
//! 1D convolutions run through the same code with `H = 1`. Kernels are
//! either shared across the batch or supplied per sample; both paths use
//! the same summation order so that a per-sample kernel equal to a shared
//! one produces bitwise-identical outputs and gradients.

use super::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// `input` is `[B, C, H, W]`, `kernel` is `[O, C, KH, KW]`.
    pub fn new(
        input: [usize; 4],
        kernel: [usize; 4],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let [batch, in_channels, in_h, in_w] = input;
        let [out_channels, kc, kernel_h, kernel_w] = kernel;
        if kc != in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::Invalid {
                op: "conv",
                detail: "stride must be at least 1".into(),
            });
        }
        let padded_h = in_h + 2 * padding.0;
        let padded_w = in_w + 2 * padding.1;
        if padded_h < kernel_h || padded_w < kernel_w {
            return Err(TensorError::ShapeMismatch {
                op: "conv (kernel larger than padded input)",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        Ok(Self {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (padded_h - kernel_h) / stride.0 + 1,
            out_w: (padded_w - kernel_w) / stride.1 + 1,
        })
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.in_plane()
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_plane()
    }

    /// Output columns `ow` for which `ow * stride + kj - pad` lands inside the input.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        valid_range(self.in_w, self.out_w, self.stride.1, self.padding.1, kj)
    }

    fn valid_rows(&self, ki: usize) -> (usize, usize) {
        valid_range(self.in_h, self.out_h, self.stride.0, self.padding.0, ki)
    }
}

fn valid_range(in_len: usize, out_len: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < in_len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Forward pass. With `per_sample`, `kernel` holds `B` consecutive kernels.
pub(crate) fn forward(input: &[f64], kernel: &[f64], g: &ConvGeometry, per_sample: bool) -> Vec<f64> {
    let mut out = vec![0.0; g.output_len()];
    let klen = g.kernel_len();
    let (ip, op) = (g.in_plane(), g.out_plane());
    let (sh, sw) = g.stride;
    for b in 0..g.batch {
        let k = if per_sample { &kernel[b * klen..(b + 1) * klen] } else { kernel };
        let x = &input[b * g.in_channels * ip..(b + 1) * g.in_channels * ip];
        let y = &mut out[b * g.out_channels * op..(b + 1) * g.out_channels * op];
        for o in 0..g.out_channels {
            let yo = &mut y[o * op..(o + 1) * op];
            for c in 0..g.in_channels {
                let xc = &x[c * ip..(c + 1) * ip];
                for ki in 0..g.kernel_h {
                    let (r0, r1) = g.valid_rows(ki);
                    for kj in 0..g.kernel_w {
                        let w = k[((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                        let (c0, c1) = g.valid_cols(kj);
                        for oh in r0..r1 {
                            let ih = oh * sh + ki - g.padding.0;
                            let xrow = &xc[ih * g.in_w..(ih + 1) * g.in_w];
                            let yrow = &mut yo[oh * g.out_w..(oh + 1) * g.out_w];
                            for ow in c0..c1 {
                                yrow[ow] += w * xrow[ow * sw + kj - g.padding.1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient with respect to the input.
pub(crate) fn backward_input(grad_out: &[f64], kernel: &[f64], g: &ConvGeometry, per_sample: bool) -> Vec<f64> {
    let mut gin = vec![0.0; g.input_len()];
    let klen = g.kernel_len();
    let (ip, op) = (g.in_plane(), g.out_plane());
    let (sh, sw) = g.stride;
    for b in 0..g.batch {
        let k = if per_sample { &kernel[b * klen..(b + 1) * klen] } else { kernel };
        let gx = &mut gin[b * g.in_channels * ip..(b + 1) * g.in_channels * ip];
        let gy = &grad_out[b * g.out_channels * op..(b + 1) * g.out_channels * op];
        for o in 0..g.out_channels {
            let gyo = &gy[o * op..(o + 1) * op];
            for c in 0..g.in_channels {
                let gxc = &mut gx[c * ip..(c + 1) * ip];
                for ki in 0..g.kernel_h {
                    let (r0, r1) = g.valid_rows(ki);
                    for kj in 0..g.kernel_w {
                        let w = k[((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                        let (c0, c1) = g.valid_cols(kj);
                        for oh in r0..r1 {
                            let ih = oh * sh + ki - g.padding.0;
                            let grow = &gyo[oh * g.out_w..(oh + 1) * g.out_w];
                            let xrow = &mut gxc[ih * g.in_w..(ih + 1) * g.in_w];
                            for ow in c0..c1 {
                                xrow[ow * sw + kj - g.padding.1] += w * grow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient with respect to the kernel. For a shared kernel the per-sample
/// partial sums are formed first and then added in batch order.
pub(crate) fn backward_kernel(grad_out: &[f64], input: &[f64], g: &ConvGeometry, per_sample: bool) -> Vec<f64> {
    let klen = g.kernel_len();
    let mut gk = vec![0.0; if per_sample { klen * g.batch } else { klen }];
    let (ip, op) = (g.in_plane(), g.out_plane());
    let (sh, sw) = g.stride;
    for b in 0..g.batch {
        let base = if per_sample { b * klen } else { 0 };
        let x = &input[b * g.in_channels * ip..(b + 1) * g.in_channels * ip];
        let gy = &grad_out[b * g.out_channels * op..(b + 1) * g.out_channels * op];
        for o in 0..g.out_channels {
            let gyo = &gy[o * op..(o + 1) * op];
            for c in 0..g.in_channels {
                let xc = &x[c * ip..(c + 1) * ip];
                for ki in 0..g.kernel_h {
                    let (r0, r1) = g.valid_rows(ki);
                    for kj in 0..g.kernel_w {
                        let (c0, c1) = g.valid_cols(kj);
                        let mut acc = 0.0;
                        for oh in r0..r1 {
                            let ih = oh * sh + ki - g.padding.0;
                            let xrow = &xc[ih * g.in_w..(ih + 1) * g.in_w];
                            let grow = &gyo[oh * g.out_w..(oh + 1) * g.out_w];
                            for ow in c0..c1 {
                                acc += grow[ow] * xrow[ow * sw + kj - g.padding.1];
                            }
                        }
                        gk[base + ((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj] += acc;
                    }
                }
            }
        }
    }
    gk
}
