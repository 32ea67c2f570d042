//! 3D convolution over channel-first `C×T×H×W` volumes, lowered to matrix
//! products through an im2col buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};

/// Spatial-temporal extent of a volume (channels excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Extent {
    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }
}

/// Geometry of one convolution: kernel `kt×ks×ks`, temporal stride 1,
/// spatial stride `stride`, "same" padding of half the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_t: usize,
    pub kernel_s: usize,
    pub stride: usize,
    pub input: Extent,
    pub output: Extent,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_t: usize,
        kernel_s: usize,
        stride: usize,
        input: Extent,
    ) -> Option<Self> {
        let out_dim = |n: usize, k: usize, stride: usize| {
            let padded = n + 2 * (k / 2);
            (padded >= k).then(|| (padded - k) / stride + 1)
        };
        let output = Extent {
            t: out_dim(input.t, kernel_t, 1)?,
            h: out_dim(input.h, kernel_s, stride)?,
            w: out_dim(input.w, kernel_s, stride)?,
        };
        (output.volume() > 0).then_some(Self {
            in_channels,
            out_channels,
            kernel_t,
            kernel_s,
            stride,
            input,
            output,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_t * self.kernel_s * self.kernel_s
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input.volume()
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.output.volume()
    }

    /// Visits every run of the im2col matrix whose input positions lie inside
    /// the volume, as (column row, first output position, first input
    /// position, run length). Consecutive outputs step through the input by `stride`.
    fn for_each_run(&self, mut visit: impl FnMut(usize, usize, usize, usize)) {
        let (pt, ps) = (self.kernel_t / 2, self.kernel_s / 2);
        let Extent { t: it, h: ih, w: iw } = self.input;
        let Extent { t: ot, h: oh, w: ow } = self.output;
        let s = self.stride;
        // Output indices o with 0 <= o*s + d - ps < n.
        let valid = |d: usize, n: usize, count: usize| {
            let lo = ps.saturating_sub(d).div_ceil(s);
            let hi = (n + ps).checked_sub(d + 1).map_or(0, |m| (m / s + 1).min(count));
            (lo, hi.max(lo))
        };
        let mut row = 0;
        for ci in 0..self.in_channels {
            for dt in 0..self.kernel_t {
                for dh in 0..self.kernel_s {
                    let (ho_lo, ho_hi) = valid(dh, ih, oh);
                    for dw in 0..self.kernel_s {
                        let (wo_lo, wo_hi) = valid(dw, iw, ow);
                        if wo_hi > wo_lo {
                            for to in 0..ot {
                                let ti = to + dt;
                                if ti < pt || ti - pt >= it {
                                    continue;
                                }
                                let ti = ti - pt;
                                for ho in ho_lo..ho_hi {
                                    let hi = ho * s + dh - ps;
                                    let in_base = ((ci * it + ti) * ih + hi) * iw;
                                    let out_base = (to * oh + ho) * ow;
                                    visit(row, out_base + wo_lo, in_base + wo_lo * s + dw - ps, wo_hi - wo_lo);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Array2<f64> {
        let mut col = Array2::zeros((self.fan_in(), self.output.volume()));
        let cols = self.output.volume();
        let s = self.stride;
        let buf = col.as_slice_mut().expect("fresh array is contiguous");
        self.for_each_run(|row, p, i, n| {
            let dst = &mut buf[row * cols + p..row * cols + p + n];
            if s == 1 {
                dst.copy_from_slice(&input[i..i + n]);
            } else {
                dst.iter_mut().zip(input[i..].iter().step_by(s)).for_each(|(d, x)| *d = *x);
            }
        });
        col
    }

    fn col2im(&self, col: &Array2<f64>, grad_input: &mut [f64]) {
        let cols = self.output.volume();
        let s = self.stride;
        let buf = col.as_slice().expect("contiguous column buffer");
        self.for_each_run(|row, p, i, n| {
            let src = &buf[row * cols + p..row * cols + p + n];
            grad_input[i..].iter_mut().step_by(s).zip(src).for_each(|(g, x)| *g += x);
        });
    }

    /// `output = weight * im2col(input) + bias`.
    pub fn forward(&self, weight: &[f64], bias: &[f64], input: &[f64], output: &mut [f64]) {
        debug_assert_eq!(input.len(), self.input_len());
        let col = self.im2col(input);
        let w = ArrayView2::from_shape((self.out_channels, self.fan_in()), weight)
            .expect("weight slice matches geometry");
        let mut out = ArrayViewMut2::from_shape((self.out_channels, self.output.volume()), output)
            .expect("output slice matches geometry");
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(bias) {
            row.fill(b);
        }
        general_mat_mul(1.0, &w, &col, 1.0, &mut out);
    }

    /// Accumulates weight and bias gradients, and optionally writes the input gradient.
    pub fn backward(
        &self,
        weight: &[f64],
        input: &[f64],
        grad_output: &[f64],
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
        grad_input: Option<&mut [f64]>,
    ) {
        let col = self.im2col(input);
        let g_out = ArrayView2::from_shape((self.out_channels, self.output.volume()), grad_output)
            .expect("grad slice matches geometry");
        let mut g_w = ArrayViewMut2::from_shape((self.out_channels, self.fan_in()), grad_weight)
            .expect("weight grad slice matches geometry");
        general_mat_mul(1.0, &g_out, &col.t(), 1.0, &mut g_w);
        for (gb, row) in grad_bias.iter_mut().zip(g_out.axis_iter(Axis(0))) {
            *gb += row.sum();
        }
        if let Some(grad_input) = grad_input {
            let w = ArrayView2::from_shape((self.out_channels, self.fan_in()), weight)
                .expect("weight slice matches geometry");
            let mut g_col = Array2::zeros((self.fan_in(), self.output.volume()));
            general_mat_mul(1.0, &w.t(), &g_out, 0.0, &mut g_col);
            grad_input.fill(0.0);
            self.col2im(&g_col, grad_input);
        }
    }
}
