//! Direct 3D convolution and transposed convolution over `[B, C, D, H, W]`.
//!
//! Kernels are cubic. Forward and backward passes split work over output
//! planes (batch × channel) so every accumulated value is summed by one
//! thread in a fixed order.

use super::{Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv3dSpec { stride, padding }
    }
}

/// `floor((extent + 2·padding − kernel) / stride) + 1`, or `None` when the
/// kernel does not fit the padded input.
pub fn conv3d_output_extent(extent: usize, kernel: usize, spec: Conv3dSpec) -> Option<usize> {
    let padded = extent + 2 * spec.padding;
    if kernel > padded || spec.stride == 0 {
        return None;
    }
    Some((padded - kernel) / spec.stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl Geometry {
    fn in_plane(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.out.iter().product()
    }
    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }
}

/// Output positions `o` with `0 <= o*stride + tap - pad < extent`, as a range.
fn valid_range(tap: usize, g: &Geometry, axis: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    let extent = g.inp[axis];
    let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
    // o*s + tap - p <= extent - 1  =>  o <= (extent - 1 + p - tap) / s
    let hi = if extent + p > tap {
        ((extent - 1 + p - tap) / s + 1).min(g.out[axis])
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_geometry(x: &[usize], w: &[usize], b: &[usize], spec: Conv3dSpec) -> Result<Geometry> {
    if x.len() != 5 || w.len() != 5 || b.len() != 1 {
        return Err(Error::shape("conv3d", x, w));
    }
    let k = w[2];
    if w[3] != k || w[4] != k || w[1] != x[1] || b[0] != w[0] {
        return Err(Error::shape("conv3d", x, w));
    }
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = conv3d_output_extent(x[2 + a], k, spec).ok_or_else(|| Error::shape("conv3d", x, w))?;
    }
    Ok(Geometry {
        batch: x[0],
        cin: x[1],
        cout: w[0],
        k,
        stride: spec.stride,
        pad: spec.padding,
        inp: [x[2], x[3], x[4]],
        out,
    })
}

fn conv_forward(x: &[f64], w: &[f64], bias: &[f64], g: &Geometry) -> Vec<f64> {
    let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let mut y = vec![0.0; g.batch * g.cout * op];
    let work = g.batch * g.cout * op * g.cin * taps;
    par::for_each_chunk(&mut y, op, work, |plane, yp| {
        let (b, co) = (plane / g.cout, plane % g.cout);
        yp.fill(bias[co]);
        for ci in 0..g.cin {
            let xp = &x[(b * g.cin + ci) * ip..(b * g.cin + ci + 1) * ip];
            let wk = &w[(co * g.cin + ci) * taps..(co * g.cin + ci + 1) * taps];
            for kd in 0..g.k {
                let (d0, d1) = valid_range(kd, g, 0);
                for kh in 0..g.k {
                    let (h0, h1) = valid_range(kh, g, 1);
                    for kw in 0..g.k {
                        let wv = wk[(kd * g.k + kh) * g.k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (w0, w1) = valid_range(kw, g, 2);
                        for od in d0..d1 {
                            let id = od * g.stride + kd - g.pad;
                            for ohh in h0..h1 {
                                let ihh = ohh * g.stride + kh - g.pad;
                                let yrow = &mut yp[(od * oh + ohh) * ow..(od * oh + ohh + 1) * ow];
                                let xrow = &xp[(id * ih + ihh) * iw..(id * ih + ihh + 1) * iw];
                                for oww in w0..w1 {
                                    yrow[oww] += wv * xrow[oww * g.stride + kw - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    y
}

fn conv_grad_input(gy: &[f64], w: &[f64], g: &Geometry) -> Vec<f64> {
    let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let mut gx = vec![0.0; g.batch * g.cin * ip];
    let work = g.batch * g.cout * op * g.cin * taps;
    par::for_each_chunk(&mut gx, ip, work, |plane, gxp| {
        let (b, ci) = (plane / g.cin, plane % g.cin);
        for co in 0..g.cout {
            let gp = &gy[(b * g.cout + co) * op..(b * g.cout + co + 1) * op];
            let wk = &w[(co * g.cin + ci) * taps..(co * g.cin + ci + 1) * taps];
            for kd in 0..g.k {
                let (d0, d1) = valid_range(kd, g, 0);
                for kh in 0..g.k {
                    let (h0, h1) = valid_range(kh, g, 1);
                    for kw in 0..g.k {
                        let wv = wk[(kd * g.k + kh) * g.k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (w0, w1) = valid_range(kw, g, 2);
                        for od in d0..d1 {
                            let id = od * g.stride + kd - g.pad;
                            for ohh in h0..h1 {
                                let ihh = ohh * g.stride + kh - g.pad;
                                let grow = &gp[(od * oh + ohh) * ow..(od * oh + ohh + 1) * ow];
                                let xrow = &mut gxp[(id * ih + ihh) * iw..(id * ih + ihh + 1) * iw];
                                for oww in w0..w1 {
                                    xrow[oww * g.stride + kw - g.pad] += wv * grow[oww];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

fn conv_grad_weight(gy: &[f64], x: &[f64], g: &Geometry) -> Vec<f64> {
    let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let mut gw = vec![0.0; g.cout * g.cin * taps];
    let work = g.batch * g.cout * op * g.cin * taps;
    par::for_each_chunk(&mut gw, taps, work, |pair, gwk| {
        let (co, ci) = (pair / g.cin, pair % g.cin);
        for b in 0..g.batch {
            let gp = &gy[(b * g.cout + co) * op..(b * g.cout + co + 1) * op];
            let xp = &x[(b * g.cin + ci) * ip..(b * g.cin + ci + 1) * ip];
            for kd in 0..g.k {
                let (d0, d1) = valid_range(kd, g, 0);
                for kh in 0..g.k {
                    let (h0, h1) = valid_range(kh, g, 1);
                    for kw in 0..g.k {
                        let (w0, w1) = valid_range(kw, g, 2);
                        let mut acc = 0.0;
                        for od in d0..d1 {
                            let id = od * g.stride + kd - g.pad;
                            for ohh in h0..h1 {
                                let ihh = ohh * g.stride + kh - g.pad;
                                let grow = &gp[(od * oh + ohh) * ow..(od * oh + ohh + 1) * ow];
                                let xrow = &xp[(id * ih + ihh) * iw..(id * ih + ihh + 1) * iw];
                                for oww in w0..w1 {
                                    acc += grow[oww] * xrow[oww * g.stride + kw - g.pad];
                                }
                            }
                        }
                        gwk[(kd * g.k + kh) * g.k + kw] += acc;
                    }
                }
            }
        }
    });
    gw
}

fn bias_grad(gy: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut gb = vec![0.0; channels];
    for b in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            *acc += gy[(b * channels + c) * plane..(b * channels + c + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }
    gb
}

/// Transposed convolution geometry: `in` is the small side, `out` the large.
fn convt_geometry(x: &[usize], w: &[usize], b: &[usize], stride: usize) -> Result<Geometry> {
    if x.len() != 5 || w.len() != 5 || b.len() != 1 || stride == 0 {
        return Err(Error::shape("conv_transpose3d", x, w));
    }
    let k = w[2];
    if w[3] != k || w[4] != k || w[0] != x[1] || b[0] != w[1] {
        return Err(Error::shape("conv_transpose3d", x, w));
    }
    let out = [0, 1, 2].map(|a| (x[2 + a] - 1) * stride + k);
    Ok(Geometry {
        batch: x[0],
        cin: x[1],
        cout: w[1],
        k,
        stride,
        pad: 0,
        inp: [x[2], x[3], x[4]],
        out,
    })
}

// For the transposed op, `inp` holds the small (input) extents and `out`
// the upsampled ones; `y[i*s + t] += w[t] · x[i]`.
fn convt_forward(x: &[f64], w: &[f64], bias: &[f64], g: &Geometry) -> Vec<f64> {
    let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let [id_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let mut y = vec![0.0; g.batch * g.cout * op];
    let work = g.batch * g.cout * ip * g.cin * taps;
    par::for_each_chunk(&mut y, op, work, |plane, yp| {
        let (b, co) = (plane / g.cout, plane % g.cout);
        yp.fill(bias[co]);
        for ci in 0..g.cin {
            let xp = &x[(b * g.cin + ci) * ip..(b * g.cin + ci + 1) * ip];
            let wk = &w[(ci * g.cout + co) * taps..(ci * g.cout + co + 1) * taps];
            for kd in 0..g.k {
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let wv = wk[(kd * g.k + kh) * g.k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for d in 0..id_ {
                            let od = d * g.stride + kd;
                            for h in 0..ih {
                                let ohh = h * g.stride + kh;
                                let xrow = &xp[(d * ih + h) * iw..(d * ih + h + 1) * iw];
                                let base = (od * oh + ohh) * ow + kw;
                                for (wi, &xv) in xrow.iter().enumerate() {
                                    yp[base + wi * g.stride] += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    y
}

fn convt_grad_input(gy: &[f64], w: &[f64], g: &Geometry) -> Vec<f64> {
    let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let [id_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let mut gx = vec![0.0; g.batch * g.cin * ip];
    let work = g.batch * g.cout * ip * g.cin * taps;
    par::for_each_chunk(&mut gx, ip, work, |plane, gxp| {
        let (b, ci) = (plane / g.cin, plane % g.cin);
        for co in 0..g.cout {
            let gp = &gy[(b * g.cout + co) * op..(b * g.cout + co + 1) * op];
            let wk = &w[(ci * g.cout + co) * taps..(ci * g.cout + co + 1) * taps];
            for kd in 0..g.k {
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let wv = wk[(kd * g.k + kh) * g.k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for d in 0..id_ {
                            let od = d * g.stride + kd;
                            for h in 0..ih {
                                let ohh = h * g.stride + kh;
                                let base = (od * oh + ohh) * ow + kw;
                                let xrow = &mut gxp[(d * ih + h) * iw..(d * ih + h + 1) * iw];
                                for (wi, xv) in xrow.iter_mut().enumerate() {
                                    *xv += wv * gp[base + wi * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

fn convt_grad_weight(gy: &[f64], x: &[f64], g: &Geometry) -> Vec<f64> {
    let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let [id_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let mut gw = vec![0.0; g.cin * g.cout * taps];
    let work = g.batch * g.cout * ip * g.cin * taps;
    par::for_each_chunk(&mut gw, taps, work, |pair, gwk| {
        let (ci, co) = (pair / g.cout, pair % g.cout);
        for b in 0..g.batch {
            let gp = &gy[(b * g.cout + co) * op..(b * g.cout + co + 1) * op];
            let xp = &x[(b * g.cin + ci) * ip..(b * g.cin + ci + 1) * ip];
            for kd in 0..g.k {
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let mut acc = 0.0;
                        for d in 0..id_ {
                            let od = d * g.stride + kd;
                            for h in 0..ih {
                                let ohh = h * g.stride + kh;
                                let base = (od * oh + ohh) * ow + kw;
                                let xrow = &xp[(d * ih + h) * iw..(d * ih + h + 1) * iw];
                                for (wi, &xv) in xrow.iter().enumerate() {
                                    acc += xv * gp[base + wi * g.stride];
                                }
                            }
                        }
                        gwk[(kd * g.k + kh) * g.k + kw] += acc;
                    }
                }
            }
        }
    });
    gw
}

impl<'t> Var<'t> {
    /// Cross-correlation of `self: [B, Ci, D, H, W]` with
    /// `weight: [Co, Ci, k, k, k]` plus per-channel `bias: [Co]`.
    pub fn conv3d(self, weight: Var<'t>, bias: Var<'t>, spec: Conv3dSpec) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let g = conv_geometry(x.shape(), w.shape(), b.shape(), spec)?;
        let y = conv_forward(x.data(), w.data(), b.data(), &g);
        let shape = vec![g.batch, g.cout, g.out[0], g.out[1], g.out[2]];
        Ok(self.tape.record(
            &[self, weight, bias],
            Tensor::new(shape, y)?,
            Box::new(move |gy, _, needs| {
                vec![
                    needs[0].then(|| {
                        Tensor::new(x.shape().to_vec(), conv_grad_input(gy.data(), w.data(), &g)).expect("x")
                    }),
                    needs[1].then(|| {
                        Tensor::new(w.shape().to_vec(), conv_grad_weight(gy.data(), x.data(), &g)).expect("w")
                    }),
                    needs[2].then(|| {
                        Tensor::new([g.cout], bias_grad(gy.data(), g.batch, g.cout, g.out_plane())).expect("b")
                    }),
                ]
            }),
        ))
    }

    /// Transposed convolution (no padding) of `self: [B, Ci, D, H, W]` with
    /// `weight: [Ci, Co, k, k, k]`; output extents `(in − 1)·stride + k`.
    pub fn conv_transpose3d(self, weight: Var<'t>, bias: Var<'t>, stride: usize) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let g = convt_geometry(x.shape(), w.shape(), b.shape(), stride)?;
        let y = convt_forward(x.data(), w.data(), b.data(), &g);
        let shape = vec![g.batch, g.cout, g.out[0], g.out[1], g.out[2]];
        Ok(self.tape.record(
            &[self, weight, bias],
            Tensor::new(shape, y)?,
            Box::new(move |gy, _, needs| {
                vec![
                    needs[0].then(|| {
                        Tensor::new(x.shape().to_vec(), convt_grad_input(gy.data(), w.data(), &g)).expect("x")
                    }),
                    needs[1].then(|| {
                        Tensor::new(w.shape().to_vec(), convt_grad_weight(gy.data(), x.data(), &g)).expect("w")
                    }),
                    needs[2].then(|| {
                        Tensor::new([g.cout], bias_grad(gy.data(), g.batch, g.cout, g.out_plane())).expect("b")
                    }),
                ]
            }),
        ))
    }
}
