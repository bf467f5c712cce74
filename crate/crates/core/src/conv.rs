//! Direct 3D (transposed) convolution kernels on raw row-major buffers.
//!
//! Both convolution and transposed convolution are expressed through one
//! index relation between a "compact" side `a` and an "expanded" side `b`:
//! `b = a * stride - pad + k`. Convolution reads `b` (its input) into `a`
//! (its output); transposed convolution scatters `a` (its input) into `b`.
//! The three loops below (gather, scatter, kernel correlation) therefore
//! cover forward and both gradients of both operators.
//!
//! Accumulation order is fixed: for each destination voxel, contributions
//! arrive ordered by (source channel, kz, ky, kx). Results do not depend on
//! the rayon thread count because work is only split across batch items.

use crate::error::{PvcError, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub padding: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::valid()
    }
}

impl ConvGeometry {
    pub fn valid() -> Self {
        ConvGeometry {
            padding: [0; 3],
            stride: [1; 3],
        }
    }

    pub fn padded(padding: [usize; 3]) -> Self {
        ConvGeometry {
            padding,
            stride: [1; 3],
        }
    }

    pub fn validate(&self, op: &'static str) -> Result<()> {
        if let Some(axis) = self.stride.iter().position(|&s| s == 0) {
            return Err(PvcError::dim(op, format!("stride on axis {} must be >= 1", AXES[axis])));
        }
        Ok(())
    }

    /// Output spatial extents of a convolution over `input`.
    pub fn conv_output(&self, op: &'static str, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        self.validate(op)?;
        let mut out = [0; 3];
        for ax in 0..3 {
            let padded = input[ax] + 2 * self.padding[ax];
            if kernel[ax] > padded {
                return Err(PvcError::dim(
                    op,
                    format!(
                        "kernel extent {} exceeds padded input extent {} on axis {}",
                        kernel[ax], padded, AXES[ax]
                    ),
                ));
            }
            out[ax] = (padded - kernel[ax]) / self.stride[ax] + 1;
        }
        Ok(out)
    }

    /// Output spatial extents of a transposed convolution over `input`.
    pub fn transpose_output(&self, op: &'static str, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        self.validate(op)?;
        let mut out = [0; 3];
        for ax in 0..3 {
            let full = (input[ax] - 1) * self.stride[ax] + kernel[ax];
            if full <= 2 * self.padding[ax] {
                return Err(PvcError::dim(
                    op,
                    format!("padding {} consumes the whole output on axis {}", self.padding[ax], AXES[ax]),
                ));
            }
            out[ax] = full - 2 * self.padding[ax];
        }
        Ok(out)
    }
}

pub(crate) const AXES: [&str; 3] = ["D", "H", "W"];

/// Where the kernel's leading axis points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum KernelLayout {
    /// `kernel[a_channel][b_channel][..]` (convolution: `[C_out, C_in, ..]`).
    AMajor,
    /// `kernel[b_channel][a_channel][..]` (transposed convolution: `[C_out, C_in, ..]`
    /// with the output on the `b` side).
    BMajor,
}

#[derive(Clone, Debug)]
pub(crate) struct Plan {
    pub batch: usize,
    pub a_ch: usize,
    pub b_ch: usize,
    pub a_dims: [usize; 3],
    pub b_dims: [usize; 3],
    pub k_dims: [usize; 3],
    pub geom: ConvGeometry,
    pub layout: KernelLayout,
    /// Kernel carries a leading batch axis (one kernel per item).
    pub per_item: bool,
}

#[derive(Clone, Copy)]
struct AxisRange {
    lo: usize,
    hi: usize,
}

impl Plan {
    fn a_vol(&self) -> usize {
        self.a_dims.iter().product()
    }

    fn b_vol(&self) -> usize {
        self.b_dims.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.k_dims.iter().product()
    }

    pub fn kernel_len(&self) -> usize {
        let one = self.a_ch * self.b_ch * self.k_vol();
        if self.per_item {
            one * self.batch
        } else {
            one
        }
    }

    fn kernel_base(&self, n: usize, ac: usize, bc: usize) -> usize {
        let pair = match self.layout {
            KernelLayout::AMajor => ac * self.b_ch + bc,
            KernelLayout::BMajor => bc * self.a_ch + ac,
        };
        let item = if self.per_item { n * self.a_ch * self.b_ch } else { 0 };
        (item + pair) * self.k_vol()
    }

    /// Range of `a` indices along `ax` whose partner `a*s - p + k` lies in `b`.
    fn range(&self, ax: usize, k: usize) -> AxisRange {
        let s = self.geom.stride[ax] as isize;
        let off = k as isize - self.geom.padding[ax] as isize;
        let b_len = self.b_dims[ax] as isize;
        let a_len = self.a_dims[ax] as isize;
        // a*s + off >= 0  and  a*s + off <= b_len - 1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if b_len - 1 - off < 0 {
            0
        } else {
            ((b_len - 1 - off) / s + 1).min(a_len)
        };
        AxisRange {
            lo: lo.max(0) as usize,
            hi: hi.max(lo.max(0)) as usize,
        }
    }

    fn b_index(&self, ax: usize, a: usize, k: usize) -> usize {
        a * self.geom.stride[ax] + k - self.geom.padding[ax]
    }

    /// Visits every (a offset, b offset, run length) row segment for one kernel
    /// tap, in z-then-y order. Offsets are within a single channel volume.
    fn for_each_row(&self, kz: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let rz = self.range(0, kz);
        let ry = self.range(1, ky);
        let rx = self.range(2, kx);
        if rx.hi <= rx.lo {
            return;
        }
        let [_, ah, aw] = self.a_dims;
        let [_, bh, bw] = self.b_dims;
        let bx0 = self.b_index(2, rx.lo, kx);
        for az in rz.lo..rz.hi {
            let bz = self.b_index(0, az, kz);
            for ay in ry.lo..ry.hi {
                let by = self.b_index(1, ay, ky);
                f((az * ah + ay) * aw + rx.lo, (bz * bh + by) * bw + bx0, rx.hi - rx.lo);
            }
        }
    }

    /// `a[n, ac, ..] += sum_{bc, k} K * b[n, bc, ..]`
    pub fn gather(&self, a: &mut [f64], b: &[f64], kernel: &[f64]) {
        let (a_vol, b_vol) = (self.a_vol(), self.b_vol());
        let [kd, kh, kw] = self.k_dims;
        let sx = self.geom.stride[2];
        a.par_chunks_mut(self.a_ch * a_vol)
            .zip(b.par_chunks(self.b_ch * b_vol))
            .enumerate()
            .for_each(|(n, (a_item, b_item))| {
                for ac in 0..self.a_ch {
                    let a_chan = &mut a_item[ac * a_vol..(ac + 1) * a_vol];
                    for bc in 0..self.b_ch {
                        let b_chan = &b_item[bc * b_vol..(bc + 1) * b_vol];
                        let base = self.kernel_base(n, ac, bc);
                        let mut t = 0;
                        for kz in 0..kd {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let w = kernel[base + t];
                                    t += 1;
                                    self.for_each_row(kz, ky, kx, |ao, bo, len| {
                                        let dst = &mut a_chan[ao..ao + len];
                                        if sx == 1 {
                                            for (d, s) in dst.iter_mut().zip(&b_chan[bo..bo + len]) {
                                                *d += w * s;
                                            }
                                        } else {
                                            for (i, d) in dst.iter_mut().enumerate() {
                                                *d += w * b_chan[bo + i * sx];
                                            }
                                        }
                                    });
                                }
                            }
                        }
                    }
                }
            });
    }

    /// `b[n, bc, ..] += sum_{ac, k} K * a[n, ac, ..]`
    pub fn scatter(&self, a: &[f64], b: &mut [f64], kernel: &[f64]) {
        let (a_vol, b_vol) = (self.a_vol(), self.b_vol());
        let [kd, kh, kw] = self.k_dims;
        let sx = self.geom.stride[2];
        b.par_chunks_mut(self.b_ch * b_vol)
            .zip(a.par_chunks(self.a_ch * a_vol))
            .enumerate()
            .for_each(|(n, (b_item, a_item))| {
                for bc in 0..self.b_ch {
                    let b_chan = &mut b_item[bc * b_vol..(bc + 1) * b_vol];
                    for ac in 0..self.a_ch {
                        let a_chan = &a_item[ac * a_vol..(ac + 1) * a_vol];
                        let base = self.kernel_base(n, ac, bc);
                        let mut t = 0;
                        for kz in 0..kd {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let w = kernel[base + t];
                                    t += 1;
                                    self.for_each_row(kz, ky, kx, |ao, bo, len| {
                                        let src = &a_chan[ao..ao + len];
                                        if sx == 1 {
                                            for (d, s) in b_chan[bo..bo + len].iter_mut().zip(src) {
                                                *d += w * s;
                                            }
                                        } else {
                                            for (i, s) in src.iter().enumerate() {
                                                b_chan[bo + i * sx] += w * s;
                                            }
                                        }
                                    });
                                }
                            }
                        }
                    }
                }
            });
    }

    /// `dK[.., k] = sum_{n, voxels} a[n, ac, ..] * b[n, bc, ..]` laid out like
    /// the kernel. Shared kernels sum item partials in batch order.
    pub fn correlate(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (a_vol, b_vol) = (self.a_vol(), self.b_vol());
        let per_pair = self.a_ch * self.b_ch * self.k_vol();
        let partials: Vec<Vec<f64>> = (0..self.batch)
            .into_par_iter()
            .map(|n| {
                let a_item = &a[n * self.a_ch * a_vol..(n + 1) * self.a_ch * a_vol];
                let b_item = &b[n * self.b_ch * b_vol..(n + 1) * self.b_ch * b_vol];
                let mut out = vec![0.0; per_pair];
                let [kd, kh, kw] = self.k_dims;
                let sx = self.geom.stride[2];
                for ac in 0..self.a_ch {
                    let a_chan = &a_item[ac * a_vol..(ac + 1) * a_vol];
                    for bc in 0..self.b_ch {
                        let b_chan = &b_item[bc * b_vol..(bc + 1) * b_vol];
                        let base = self.kernel_base(0, ac, bc);
                        let mut t = 0;
                        for kz in 0..kd {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let mut acc = 0.0;
                                    self.for_each_row(kz, ky, kx, |ao, bo, len| {
                                        let ar = &a_chan[ao..ao + len];
                                        if sx == 1 {
                                            acc += ar
                                                .iter()
                                                .zip(&b_chan[bo..bo + len])
                                                .map(|(x, y)| x * y)
                                                .sum::<f64>();
                                        } else {
                                            for (i, x) in ar.iter().enumerate() {
                                                acc += x * b_chan[bo + i * sx];
                                            }
                                        }
                                    });
                                    out[base + t] = acc;
                                    t += 1;
                                }
                            }
                        }
                    }
                }
                out
            })
            .collect();
        if self.per_item {
            partials.concat()
        } else {
            let mut total = vec![0.0; per_pair];
            for p in &partials {
                for (t, v) in total.iter_mut().zip(p) {
                    *t += v;
                }
            }
            total
        }
    }
}
