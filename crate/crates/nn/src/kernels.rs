//! Raw forward/backward kernels on flat slices. The tape wraps these.

use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::strides_of;

/// Stride, symmetric zero padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dGeom {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dGeom { stride, padding, groups }
    }

    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if padded < k || self.stride == 0 {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }
}

impl Default for Conv2dGeom {
    fn default() -> Self {
        Conv2dGeom { stride: 1, padding: 0, groups: 1 }
    }
}

/// Shapes of one convolution: input (B,Cin,H,W), weight (Cout,Cin/g,kh,kw), output (B,Cout,Ho,Wo).
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub g: ConvGeomRef,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeomRef {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvDims {
    fn cin_g(&self) -> usize {
        self.cin / self.g.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.g.groups
    }
    fn k_g(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.g.stride == 1 && self.g.padding == 0
    }
}

fn im2col<S: Scalar>(x: &[S], d: &ConvDims, col: &mut [S]) {
    let (s, p) = (d.g.stride as isize, d.g.padding as isize);
    let howo = d.ho * d.wo;
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let dst = &mut col[row * howo..(row + 1) * howo];
                for oy in 0..d.ho {
                    let iy = oy as isize * s + i as isize - p;
                    let drow = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        drow.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s + j as isize - p;
                        *v = if ix < 0 || ix >= d.w as isize { S::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(col: &[S], d: &ConvDims, x: &mut [S]) {
    let (s, p) = (d.g.stride as isize, d.g.padding as isize);
    let howo = d.ho * d.wo;
    for c in 0..d.cin {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let src = &col[row * howo..(row + 1) * howo];
                for oy in 0..d.ho {
                    let iy = oy as isize * s + i as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = ox as isize * s + j as isize - p;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], d: &ConvDims) -> Vec<S> {
    let howo = d.ho * d.wo;
    let (kg, cout_g) = (d.k_g(), d.cout_g());
    let mut out = vec![S::zero(); d.b * d.cout * howo];
    let mut col = if d.is_pointwise() { Vec::new() } else { vec![S::zero(); d.cin * d.kh * d.kw * howo] };
    for bi in 0..d.b {
        let xb = &x[bi * d.cin * d.h * d.w..(bi + 1) * d.cin * d.h * d.w];
        let colr: &[S] = if d.is_pointwise() {
            xb
        } else {
            im2col(xb, d, &mut col);
            &col
        };
        let ob = &mut out[bi * d.cout * howo..(bi + 1) * d.cout * howo];
        for g in 0..d.g.groups {
            let wg = &w[g * cout_g * kg..(g + 1) * cout_g * kg];
            let cg = &colr[g * kg * howo..(g + 1) * kg * howo];
            gemm(
                S::one(),
                MatRef::new(wg, cout_g, kg, false),
                MatRef::new(cg, kg, howo, false),
                S::zero(),
                &mut ob[g * cout_g * howo..(g + 1) * cout_g * howo],
            );
        }
    }
    out
}

pub(crate) fn conv2d_backward_input<S: Scalar>(dy: &[S], w: &[S], d: &ConvDims) -> Vec<S> {
    let howo = d.ho * d.wo;
    let (kg, cout_g) = (d.k_g(), d.cout_g());
    let plane = d.cin * d.h * d.w;
    let mut dx = vec![S::zero(); d.b * plane];
    let mut dcol = vec![S::zero(); d.cin * d.kh * d.kw * howo];
    for bi in 0..d.b {
        let dyb = &dy[bi * d.cout * howo..(bi + 1) * d.cout * howo];
        for g in 0..d.g.groups {
            let wg = &w[g * cout_g * kg..(g + 1) * cout_g * kg];
            gemm(
                S::one(),
                MatRef::new(wg, kg, cout_g, true),
                MatRef::new(&dyb[g * cout_g * howo..(g + 1) * cout_g * howo], cout_g, howo, false),
                S::zero(),
                &mut dcol[g * kg * howo..(g + 1) * kg * howo],
            );
        }
        let dxb = &mut dx[bi * plane..(bi + 1) * plane];
        if d.is_pointwise() {
            dxb.copy_from_slice(&dcol);
        } else {
            col2im_add(&dcol, d, dxb);
        }
    }
    dx
}

pub(crate) fn conv2d_backward_weight<S: Scalar>(x: &[S], dy: &[S], d: &ConvDims) -> Vec<S> {
    let howo = d.ho * d.wo;
    let (kg, cout_g) = (d.k_g(), d.cout_g());
    let mut dw = vec![S::zero(); d.cout * kg];
    let mut col = if d.is_pointwise() { Vec::new() } else { vec![S::zero(); d.cin * d.kh * d.kw * howo] };
    for bi in 0..d.b {
        let xb = &x[bi * d.cin * d.h * d.w..(bi + 1) * d.cin * d.h * d.w];
        let colr: &[S] = if d.is_pointwise() {
            xb
        } else {
            im2col(xb, d, &mut col);
            &col
        };
        let dyb = &dy[bi * d.cout * howo..(bi + 1) * d.cout * howo];
        for g in 0..d.g.groups {
            gemm(
                S::one(),
                MatRef::new(&dyb[g * cout_g * howo..(g + 1) * cout_g * howo], cout_g, howo, false),
                MatRef::new(&colr[g * kg * howo..(g + 1) * kg * howo], howo, kg, true),
                S::one(),
                &mut dw[g * cout_g * kg..(g + 1) * cout_g * kg],
            );
        }
    }
    dw
}

pub(crate) fn permute<S: Scalar>(x: &[S], shape: &[usize], perm: &[usize]) -> (Vec<S>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    // stride in the input for each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    if rank == 0 {
        return (x.to_vec(), out_shape);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| x[base + i * inner_stride]));
        }
        // advance the outer multi-index (all axes except the last)
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Normalizes each contiguous chunk to zero mean and unit variance.
/// Returns the output and the per-chunk reciprocal standard deviations.
pub(crate) fn norm_chunks<S: Scalar>(x: &[S], chunk: usize, eps: S) -> (Vec<S>, Vec<S>) {
    let mut out = vec![S::zero(); x.len()];
    let mut rstds = Vec::with_capacity(x.len() / chunk);
    let inv_n = S::one() / S::lit(chunk as f64);
    for (xc, oc) in x.chunks(chunk).zip(out.chunks_mut(chunk)) {
        let mean = xc.iter().copied().sum::<S>() * inv_n;
        let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
        let rstd = S::one() / (var + eps).sqrt();
        for (o, &v) in oc.iter_mut().zip(xc) {
            *o = (v - mean) * rstd;
        }
        rstds.push(rstd);
    }
    (out, rstds)
}

pub(crate) fn norm_chunks_backward<S: Scalar>(y: &[S], dy: &[S], rstds: &[S], chunk: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); y.len()];
    let inv_n = S::one() / S::lit(chunk as f64);
    for (ci, ((yc, gc), dc)) in y.chunks(chunk).zip(dy.chunks(chunk)).zip(dx.chunks_mut(chunk)).enumerate() {
        let mean_g = gc.iter().copied().sum::<S>() * inv_n;
        let mean_gy = gc.iter().zip(yc).map(|(&g, &v)| g * v).sum::<S>() * inv_n;
        let r = rstds[ci];
        for ((d, &g), &v) in dc.iter_mut().zip(gc).zip(yc) {
            *d = r * (g - mean_g - v * mean_gy);
        }
    }
    dx
}

pub(crate) fn softmax_rows<S: Scalar>(x: &[S], row: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (xr, or) in x.chunks(row).zip(out.chunks_mut(row)) {
        let m = xr.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut z = S::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - m).exp();
            z = z + *o;
        }
        let inv = S::one() / z;
        for o in or.iter_mut() {
            *o = *o * inv;
        }
    }
    out
}

pub(crate) fn softmax_rows_backward<S: Scalar>(y: &[S], dy: &[S], row: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(row).zip(dy.chunks(row)).zip(dx.chunks_mut(row)) {
        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
        for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (g - dot);
        }
    }
    dx
}
