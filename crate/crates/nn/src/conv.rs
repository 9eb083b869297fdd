//! Patch-matrix (im2col) kernels behind the convolution ops.
//!
//! Convolutions are expressed as im2col followed by a matrix product; the
//! transposed variants reuse the same kernels through the scatter-add
//! adjoint (col2im). Padding is zero-fill, output extents use floor
//! division, and all layouts are row-major.

use ndarray::{ArrayD, IxDyn};

/// Geometry of a 2-d convolution over `[batch, chan, in_h, in_w]` inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub chan: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        chan: usize,
        in_h: usize,
        in_w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvGeom {
        assert!(stride >= 1 && k >= 1);
        assert!(in_h + 2 * pad >= k && in_w + 2 * pad >= k, "kernel exceeds input");
        ConvGeom { batch, chan, in_h, in_w, k, stride, pad }
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn in_shape(&self) -> [usize; 4] {
        [self.batch, self.chan, self.in_h, self.in_w]
    }

    /// Patch-matrix shape `[chan*k*k, batch*out_h*out_w]`.
    pub fn col_shape(&self) -> [usize; 2] {
        [self.chan * self.k * self.k, self.batch * self.out_h() * self.out_w()]
    }
}

/// Geometry of a 3-d convolution over `[batch, chan, in_d, in_h, in_w]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom3 {
    pub batch: usize,
    pub chan: usize,
    pub in_d: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom3 {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        chan: usize,
        in_d: usize,
        in_h: usize,
        in_w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvGeom3 {
        assert!(stride >= 1 && k >= 1);
        assert!(
            in_d + 2 * pad >= k && in_h + 2 * pad >= k && in_w + 2 * pad >= k,
            "kernel exceeds input"
        );
        ConvGeom3 { batch, chan, in_d, in_h, in_w, k, stride, pad }
    }

    pub fn out_d(&self) -> usize {
        (self.in_d + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn in_shape(&self) -> [usize; 5] {
        [self.batch, self.chan, self.in_d, self.in_h, self.in_w]
    }

    pub fn col_shape(&self) -> [usize; 2] {
        [
            self.chan * self.k * self.k * self.k,
            self.batch * self.out_d() * self.out_h() * self.out_w(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_and_same_geometry() {
        let g = ConvGeom::new(1, 3, 32, 32, 4, 2, 1);
        assert_eq!((g.out_h(), g.out_w()), (16, 16));
        let g = ConvGeom::new(1, 3, 32, 32, 3, 1, 1);
        assert_eq!((g.out_h(), g.out_w()), (32, 32));
        let g = ConvGeom3::new(2, 1, 8, 32, 32, 4, 2, 1);
        assert_eq!((g.out_d(), g.out_h(), g.out_w()), (4, 16, 16));
    }

    #[test]
    fn col_shapes() {
        let g = ConvGeom::new(2, 3, 8, 8, 4, 2, 1);
        assert_eq!(g.col_shape(), [3 * 16, 2 * 4 * 4]);
        let g3 = ConvGeom3::new(1, 2, 4, 4, 4, 3, 1, 1);
        assert_eq!(g3.col_shape(), [2 * 27, 64]);
    }
}

pub(crate) fn im2col2d(x: &ArrayD<f64>, g: &ConvGeom) -> ArrayD<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("contiguous input");
    let [rows, cols] = g.col_shape();
    let mut out = vec![0.0f64; rows * cols];
    for bi in 0..g.batch {
        for ci in 0..g.chan {
            for khi in 0..g.k {
                for kwi in 0..g.k {
                    let row = (ci * g.k + khi) * g.k + kwi;
                    for ohi in 0..oh {
                        let ih = (ohi * g.stride + khi) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let src = ((bi * g.chan + ci) * g.in_h + ih as usize) * g.in_w;
                        let dst = row * cols + (bi * oh + ohi) * ow;
                        for owi in 0..ow {
                            let iw = (owi * g.stride + kwi) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.in_w as isize {
                                continue;
                            }
                            out[dst + owi] = xs[src + iw as usize];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[rows, cols]), out).expect("im2col2d shape")
}

pub(crate) fn col2im2d(cols_arr: &ArrayD<f64>, g: &ConvGeom) -> ArrayD<f64> {
    let [rows, cols] = g.col_shape();
    assert_eq!(cols_arr.shape(), &[rows, cols], "col2im2d: patch matrix shape");
    let (oh, ow) = (g.out_h(), g.out_w());
    let cs = cols_arr.as_standard_layout();
    let cs = cs.as_slice().expect("contiguous input");
    let mut out = vec![0.0f64; g.batch * g.chan * g.in_h * g.in_w];
    for bi in 0..g.batch {
        for ci in 0..g.chan {
            for khi in 0..g.k {
                for kwi in 0..g.k {
                    let row = (ci * g.k + khi) * g.k + kwi;
                    for ohi in 0..oh {
                        let ih = (ohi * g.stride + khi) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let dst = ((bi * g.chan + ci) * g.in_h + ih as usize) * g.in_w;
                        let src = row * cols + (bi * oh + ohi) * ow;
                        for owi in 0..ow {
                            let iw = (owi * g.stride + kwi) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.in_w as isize {
                                continue;
                            }
                            out[dst + iw as usize] += cs[src + owi];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&g.in_shape()), out).expect("col2im2d shape")
}

pub(crate) fn im2col3d(x: &ArrayD<f64>, g: &ConvGeom3) -> ArrayD<f64> {
    let (od, oh, ow) = (g.out_d(), g.out_h(), g.out_w());
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("contiguous input");
    let [rows, cols] = g.col_shape();
    let mut out = vec![0.0f64; rows * cols];
    for bi in 0..g.batch {
        for ci in 0..g.chan {
            for kdi in 0..g.k {
                for khi in 0..g.k {
                    for kwi in 0..g.k {
                        let row = ((ci * g.k + kdi) * g.k + khi) * g.k + kwi;
                        for odi in 0..od {
                            let id = (odi * g.stride + kdi) as isize - g.pad as isize;
                            if id < 0 || id >= g.in_d as isize {
                                continue;
                            }
                            for ohi in 0..oh {
                                let ih = (ohi * g.stride + khi) as isize - g.pad as isize;
                                if ih < 0 || ih >= g.in_h as isize {
                                    continue;
                                }
                                let src = (((bi * g.chan + ci) * g.in_d + id as usize)
                                    * g.in_h
                                    + ih as usize)
                                    * g.in_w;
                                let dst = row * cols + ((bi * od + odi) * oh + ohi) * ow;
                                for owi in 0..ow {
                                    let iw =
                                        (owi * g.stride + kwi) as isize - g.pad as isize;
                                    if iw < 0 || iw >= g.in_w as isize {
                                        continue;
                                    }
                                    out[dst + owi] = xs[src + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[rows, cols]), out).expect("im2col3d shape")
}

pub(crate) fn col2im3d(cols_arr: &ArrayD<f64>, g: &ConvGeom3) -> ArrayD<f64> {
    let [rows, cols] = g.col_shape();
    assert_eq!(cols_arr.shape(), &[rows, cols], "col2im3d: patch matrix shape");
    let (od, oh, ow) = (g.out_d(), g.out_h(), g.out_w());
    let cs = cols_arr.as_standard_layout();
    let cs = cs.as_slice().expect("contiguous input");
    let mut out = vec![0.0f64; g.batch * g.chan * g.in_d * g.in_h * g.in_w];
    for bi in 0..g.batch {
        for ci in 0..g.chan {
            for kdi in 0..g.k {
                for khi in 0..g.k {
                    for kwi in 0..g.k {
                        let row = ((ci * g.k + kdi) * g.k + khi) * g.k + kwi;
                        for odi in 0..od {
                            let id = (odi * g.stride + kdi) as isize - g.pad as isize;
                            if id < 0 || id >= g.in_d as isize {
                                continue;
                            }
                            for ohi in 0..oh {
                                let ih = (ohi * g.stride + khi) as isize - g.pad as isize;
                                if ih < 0 || ih >= g.in_h as isize {
                                    continue;
                                }
                                let dst = (((bi * g.chan + ci) * g.in_d + id as usize)
                                    * g.in_h
                                    + ih as usize)
                                    * g.in_w;
                                let src = row * cols + ((bi * od + odi) * oh + ohi) * ow;
                                for owi in 0..ow {
                                    let iw =
                                        (owi * g.stride + kwi) as isize - g.pad as isize;
                                    if iw < 0 || iw >= g.in_w as isize {
                                        continue;
                                    }
                                    out[dst + iw as usize] += cs[src + owi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&g.in_shape()), out).expect("col2im3d shape")
}
