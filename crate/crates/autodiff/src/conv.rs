//! Cross-correlation kernels shared by 2-D and 3-D convolution.
//!
//! 2-D convolutions run through the same code with a unit trailing axis
//! (extent 1, kernel 1, padding 0). Input activations are scanned in scatter
//! form and zero entries are skipped, which makes the first encoder stage on
//! sparse voxel grids cheap.

use crate::error::{AutodiffError, Result};

/// Geometry of one convolution call. Spatial arrays are always length 3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Validates shapes and derives output extents.
    ///
    /// `spatial` is 2 or 3; `input` is `[B, Cin, ...]` and `kernel` is
    /// `[Cout, Cin, k, ...]`.
    pub(crate) fn infer(
        op: &'static str,
        spatial: usize,
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != spatial + 2 {
            return Err(AutodiffError::Dimension {
                op,
                axis: input.len(),
                detail: format!("input must have {} axes, got shape {:?}", spatial + 2, input),
            });
        }
        if kernel.len() != spatial + 2 {
            return Err(AutodiffError::Dimension {
                op,
                axis: kernel.len(),
                detail: format!("kernel must have {} axes, got shape {:?}", spatial + 2, kernel),
            });
        }
        if kernel[1] != input[1] {
            return Err(AutodiffError::Dimension {
                op,
                axis: 1,
                detail: format!("kernel expects {} input channels, input has {}", kernel[1], input[1]),
            });
        }
        if stride == 0 {
            return Err(AutodiffError::Usage(format!("{op}: stride must be >= 1")));
        }
        let k = kernel[2];
        if k % 2 == 0 || kernel[2..].iter().any(|&d| d != k) {
            return Err(AutodiffError::Dimension {
                op,
                axis: 2,
                detail: format!("kernel must be cubic with odd extent, got {:?}", &kernel[2..]),
            });
        }
        let mut g = ConvGeom {
            batch: input[0],
            cin: input[1],
            cout: kernel[0],
            in_dims: [1; 3],
            out_dims: [1; 3],
            kernel: [1; 3],
            stride: [1; 3],
            pad: [0; 3],
        };
        for a in 0..spatial {
            let extent = input[2 + a];
            if extent + 2 * padding < k {
                return Err(AutodiffError::Dimension {
                    op,
                    axis: 2 + a,
                    detail: format!("extent {extent} with padding {padding} smaller than kernel {k}"),
                });
            }
            g.in_dims[a] = extent;
            g.kernel[a] = k;
            g.stride[a] = stride;
            g.pad[a] = padding;
            g.out_dims[a] = (extent + 2 * padding - k) / stride + 1;
        }
        Ok(g)
    }

    pub fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_volume(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// For each axis and input coordinate, the `(kernel offset, output coordinate)`
    /// pairs that touch it.
    fn taps(&self) -> [Vec<Vec<(usize, usize)>>; 3] {
        std::array::from_fn(|a| {
            (0..self.in_dims[a])
                .map(|i| {
                    (0..self.kernel[a])
                        .filter_map(|k| {
                            let num = (i + self.pad[a]).checked_sub(k)?;
                            if num % self.stride[a] != 0 {
                                return None;
                            }
                            let o = num / self.stride[a];
                            (o < self.out_dims[a]).then_some((k, o))
                        })
                        .collect()
                })
                .collect()
        })
    }
}

/// `[Cout, Cin, K]` -> `[Cin, K, Cout]`.
fn kernel_to_inner_cout(w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kv = g.kernel_volume();
    let mut wt = vec![0.0; w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for k in 0..kv {
                wt[(ci * kv + k) * g.cout + co] = w[(co * g.cin + ci) * kv + k];
            }
        }
    }
    wt
}

/// `[B, C, V]` <-> `[B, V, C]`.
fn swap_channel_axis(x: &[f64], batch: usize, c: usize, v: usize, channels_first: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let base = b * c * v;
        for ci in 0..c {
            for p in 0..v {
                if channels_first {
                    out[base + p * c + ci] = x[base + ci * v + p];
                } else {
                    out[base + ci * v + p] = x[base + p * c + ci];
                }
            }
        }
    }
    out
}

/// Visits every (input position, kernel index, output position) triple.
fn for_each_tap(
    g: &ConvGeom,
    taps: &[Vec<Vec<(usize, usize)>>; 3],
    skip: impl Fn(usize) -> bool,
    mut f: impl FnMut(usize, usize, usize),
) {
    let [_, iy_n, iz_n] = g.in_dims;
    let [_, ky_n, kz_n] = g.kernel;
    let [_, oy_n, oz_n] = g.out_dims;
    for (ix, tx) in taps[0].iter().enumerate() {
        for (iy, ty) in taps[1].iter().enumerate() {
            for (iz, tz) in taps[2].iter().enumerate() {
                let ipos = (ix * iy_n + iy) * iz_n + iz;
                if skip(ipos) {
                    continue;
                }
                for &(kx, ox) in tx {
                    for &(ky, oy) in ty {
                        for &(kz, oz) in tz {
                            let kidx = (kx * ky_n + ky) * kz_n + kz;
                            let opos = (ox * oy_n + oy) * oz_n + oz;
                            f(ipos, kidx, opos);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (iv, ov, kv, cout) = (g.in_volume(), g.out_volume(), g.kernel_volume(), g.cout);
    let wt = kernel_to_inner_cout(w, g);
    let taps = g.taps();
    let mut out_t = vec![0.0; g.batch * ov * cout];
    for b in 0..g.batch {
        let ob = &mut out_t[b * ov * cout..(b + 1) * ov * cout];
        for ci in 0..g.cin {
            let xs = &x[(b * g.cin + ci) * iv..(b * g.cin + ci + 1) * iv];
            let wc = &wt[ci * kv * cout..(ci + 1) * kv * cout];
            for_each_tap(g, &taps, |ipos| xs[ipos] == 0.0, |ipos, kidx, opos| {
                let v = xs[ipos];
                let wk = &wc[kidx * cout..(kidx + 1) * cout];
                let o = &mut ob[opos * cout..(opos + 1) * cout];
                for (oc, wc) in o.iter_mut().zip(wk) {
                    *oc += v * wc;
                }
            });
        }
    }
    swap_channel_axis(&out_t, g.batch, cout, ov, false)
}

pub(crate) fn backward_input(dy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (iv, ov, kv, cout) = (g.in_volume(), g.out_volume(), g.kernel_volume(), g.cout);
    let wt = kernel_to_inner_cout(w, g);
    let dyt = swap_channel_axis(dy, g.batch, cout, ov, true);
    let taps = g.taps();
    let mut dx = vec![0.0; g.batch * g.cin * iv];
    for b in 0..g.batch {
        let dyb = &dyt[b * ov * cout..(b + 1) * ov * cout];
        for ci in 0..g.cin {
            let dxs = &mut dx[(b * g.cin + ci) * iv..(b * g.cin + ci + 1) * iv];
            let wc = &wt[ci * kv * cout..(ci + 1) * kv * cout];
            for_each_tap(g, &taps, |_| false, |ipos, kidx, opos| {
                let wk = &wc[kidx * cout..(kidx + 1) * cout];
                let d = &dyb[opos * cout..(opos + 1) * cout];
                dxs[ipos] += d.iter().zip(wk).map(|(a, b)| a * b).sum::<f64>();
            });
        }
    }
    dx
}

pub(crate) fn backward_kernel(x: &[f64], dy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (iv, ov, kv, cout) = (g.in_volume(), g.out_volume(), g.kernel_volume(), g.cout);
    let dyt = swap_channel_axis(dy, g.batch, cout, ov, true);
    let taps = g.taps();
    let mut dwt = vec![0.0; g.cin * kv * cout];
    for b in 0..g.batch {
        let dyb = &dyt[b * ov * cout..(b + 1) * ov * cout];
        for ci in 0..g.cin {
            let xs = &x[(b * g.cin + ci) * iv..(b * g.cin + ci + 1) * iv];
            let dwc = &mut dwt[ci * kv * cout..(ci + 1) * kv * cout];
            for_each_tap(g, &taps, |ipos| xs[ipos] == 0.0, |ipos, kidx, opos| {
                let v = xs[ipos];
                let d = &dyb[opos * cout..(opos + 1) * cout];
                let dw = &mut dwc[kidx * cout..(kidx + 1) * cout];
                for (a, b) in dw.iter_mut().zip(d) {
                    *a += v * b;
                }
            });
        }
    }
    let mut dw = vec![0.0; dwt.len()];
    for co in 0..cout {
        for ci in 0..g.cin {
            for k in 0..kv {
                dw[(co * g.cin + ci) * kv + k] = dwt[(ci * kv + k) * cout + co];
            }
        }
    }
    dw
}
