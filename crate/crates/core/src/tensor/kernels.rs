//! Value-level kernels shared by the forward and backward passes.

use super::{numel, strides, Tensor};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err(format!("shapes {a:?} and {b:?} are not broadcastable"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let pad = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| if i < pad || shape[i - pad] == 1 { 0 } else { st[i - pad] })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out_shape`.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let last = rank - 1;
    let inner = out_shape[last];
    let mut o = 0;
    while o < n {
        for j in 0..inner {
            f(o + j, oa + j * sa[last], ob + j * sb[last]);
        }
        o += inner;
        // advance the odometer over the outer axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    if b.data.len() == 1 && b.shape.len() <= a.shape.len() {
        let y = b.data[0];
        let shape = broadcast_shape(&a.shape, &b.shape)?;
        return Ok(Tensor::from_parts(shape, a.data.iter().map(|&x| f(x, y)).collect()));
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let mut out = vec![T::zero(); numel(&shape)];
    for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| out[o] = f(a.data[ia], b.data[ib]));
    Ok(Tensor::from_parts(shape, out))
}

/// Sums `grad` down to `shape`, undoing a broadcast.
pub fn reduce_to<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape == shape {
        return grad.clone();
    }
    let sr = broadcast_strides(shape, &grad.shape);
    let zeros = vec![0; grad.shape.len()];
    let mut out = vec![T::zero(); numel(shape)];
    for_each_broadcast(&grad.shape, &sr, &zeros, |o, ir, _| out[ir] += grad.data[o]);
    Tensor::from_parts(shape.to_vec(), out)
}

/// `out[m×p] += a[m×k] · b[k×p]`, all row-major.
#[inline]
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Batched matrix product over the last two axes with broadcast leading axes.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(dim_err(format!(
            "matmul needs rank >= 2 operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (k2, p) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if k != k2 {
        return Err(dim_err(format!(
            "matmul inner axes differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let ba = &a.shape[..a.rank() - 2];
    let bb = &b.shape[..b.rank() - 2];
    let batch = broadcast_shape(ba, bb).map_err(|_| {
        dim_err(format!("matmul batch axes incompatible: {:?} x {:?}", a.shape, b.shape))
    })?;
    let nb = numel(&batch);
    let mut out = vec![T::zero(); nb * m * p];
    let sa = broadcast_strides(ba, &batch);
    let sb = broadcast_strides(bb, &batch);
    let mut offs = Vec::with_capacity(nb);
    for_each_broadcast(&batch, &sa, &sb, |o, ia, ib| offs.push((o, ia, ib)));
    for (o, ia, ib) in offs {
        gemm_acc(
            &a.data[ia * m * k..(ia + 1) * m * k],
            &b.data[ib * k * p..(ib + 1) * k * p],
            &mut out[o * m * p..(o + 1) * m * p],
            m,
            k,
            p,
        );
    }
    let mut shape = batch;
    shape.push(m);
    shape.push(p);
    Ok(Tensor::from_parts(shape, out))
}

pub fn transpose_last2<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let r = a.rank();
    if r < 2 {
        return Err(dim_err(format!("transpose needs rank >= 2, got {:?}", a.shape)));
    }
    let (m, n) = (a.shape[r - 2], a.shape[r - 1]);
    let nb = a.len() / (m * n);
    let mut out = vec![T::zero(); a.len()];
    for bi in 0..nb {
        let src = &a.data[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = a.shape.clone();
    shape.swap(r - 2, r - 1);
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn check_perm(axes: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(dim_err(format!("permutation {axes:?} does not match rank {rank}")));
    }
    for &ax in axes {
        if ax >= rank || seen[ax] {
            return Err(dim_err(format!("invalid permutation {axes:?}")));
        }
        seen[ax] = true;
    }
    Ok(())
}

/// `out.shape[i] = a.shape[axes[i]]`.
pub fn permute<T: Scalar>(a: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    check_perm(axes, a.rank())?;
    let in_st = strides(&a.shape);
    let shape: Vec<usize> = axes.iter().map(|&ax| a.shape[ax]).collect();
    let src_st: Vec<usize> = axes.iter().map(|&ax| in_st[ax]).collect();
    let zeros = vec![0; shape.len()];
    let mut out = vec![T::zero(); a.len()];
    for_each_broadcast(&shape, &src_st, &zeros, |o, i, _| out[o] = a.data[i]);
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn inverse_perm(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inv[ax] = i;
    }
    inv
}

/// Splits a shape around `axis` into (outer, len, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(dim_err(format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

pub fn sum_axis<T: Scalar>(a: &Tensor<T>, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
    check_axis(&a.shape, axis)?;
    let (outer, len, inner) = split_axis(&a.shape, axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &a.data[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(Tensor::from_parts(reduced_shape(&a.shape, axis, keepdim), out))
}

/// Max along `axis` plus the flat source index of each winner (first on ties).
pub fn max_axis<T: Scalar>(
    a: &Tensor<T>,
    axis: usize,
    keepdim: bool,
) -> Result<(Tensor<T>, Vec<usize>)> {
    check_axis(&a.shape, axis)?;
    let (outer, len, inner) = split_axis(&a.shape, axis);
    let mut out = vec![T::neg_infinity(); outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                let src = (o * len + l) * inner + i;
                let dst = o * inner + i;
                if l == 0 || a.data[src] > out[dst] {
                    out[dst] = a.data[src];
                    arg[dst] = src;
                }
            }
        }
    }
    Ok((Tensor::from_parts(reduced_shape(&a.shape, axis, keepdim), out), arg))
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(dim_err(format!("conv2d input must be [B,C,H,W], got {input:?}")));
        }
        if kernel == 0 || stride == 0 {
            return Err(dim_err("conv2d kernel and stride must be >= 1"));
        }
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if h < kernel || w < kernel {
            return Err(dim_err(format!(
                "conv2d output size < 1: input {input:?}, kernel {kernel}, padding {padding}"
            )));
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            kernel,
            stride,
            padding,
            out_h: (h - kernel) / stride + 1,
            out_w: (w - kernel) / stride + 1,
        })
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `x[B,C,H,W]` into columns `[B, C·k·k, out_h·out_w]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (k, l) = (g.kernel, g.out_len());
    let rows = g.in_channels * k * k;
    let mut cols = vec![T::zero(); g.batch * rows * l];
    for b in 0..g.batch {
        for c in 0..g.in_channels {
            let plane = &x[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[(b * rows + row) * l..][..l];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.width..][..g.width];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && (ix as usize) < g.width {
                                dst[oy * g.out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into `[B,C,H,W]`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (k, l) = (g.kernel, g.out_len());
    let rows = g.in_channels * k * k;
    let mut x = vec![T::zero(); g.batch * g.in_channels * g.height * g.width];
    for b in 0..g.batch {
        for c in 0..g.in_channels {
            let plane =
                &mut x[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[(b * rows + row) * l..][..l];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && (ix as usize) < g.width {
                                plane[iy as usize * g.width + ix as usize] +=
                                    src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Grouped convolution forward via im2col + batched matmul.
///
/// `weight` is `[Cout, Cin/groups, k, k]`; returns `([B,Cout,oh,ow], columns)`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeometry,
    groups: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != g.kernel || ws[3] != g.kernel {
        return Err(dim_err(format!("conv2d weight {ws:?} does not match kernel {}", g.kernel)));
    }
    if groups == 0 || !g.in_channels.is_multiple_of(groups) || !ws[0].is_multiple_of(groups) {
        return Err(dim_err(format!(
            "conv2d groups {groups} incompatible with {} input / {} output channels",
            g.in_channels, ws[0]
        )));
    }
    if ws[1] * groups != g.in_channels {
        return Err(dim_err(format!(
            "conv2d weight {ws:?} expects {} input channels, input has {}",
            ws[1] * groups,
            g.in_channels
        )));
    }
    let cout = ws[0];
    let kdim = ws[1] * g.kernel * g.kernel;
    let l = g.out_len();
    let cols = im2col(&x.data, g);
    let opg = cout / groups;
    let mut out = vec![T::zero(); g.batch * cout * l];
    for b in 0..g.batch {
        for gi in 0..groups {
            gemm_acc(
                &weight.data[gi * opg * kdim..(gi + 1) * opg * kdim],
                &cols[(b * groups + gi) * kdim * l..][..kdim * l],
                &mut out[(b * cout + gi * opg) * l..][..opg * l],
                opg,
                kdim,
                l,
            );
        }
    }
    Ok((Tensor::from_parts(vec![g.batch, cout, g.out_h, g.out_w], out), cols))
}

/// Returns `(dx, dweight)` for [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    grad: &Tensor<T>,
    weight: &Tensor<T>,
    cols: &[T],
    g: &ConvGeometry,
    groups: usize,
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let ws = weight.shape();
    let cout = ws[0];
    let kdim = ws[1] * g.kernel * g.kernel;
    let l = g.out_len();
    let opg = cout / groups;
    let mut dw = vec![T::zero(); weight.len()];
    let mut dcols = if need_x { vec![T::zero(); cols.len()] } else { Vec::new() };
    for b in 0..g.batch {
        for gi in 0..groups {
            let go = &grad.data[(b * cout + gi * opg) * l..][..opg * l];
            let col = &cols[(b * groups + gi) * kdim * l..][..kdim * l];
            // dW[o, r] += Σ_l go[o, l] · col[r, l]
            for o in 0..opg {
                let gr = &go[o * l..(o + 1) * l];
                let dwr = &mut dw[(gi * opg + o) * kdim..][..kdim];
                for (r, d) in dwr.iter_mut().enumerate() {
                    let cr = &col[r * l..(r + 1) * l];
                    *d += gr.iter().zip(cr).map(|(&a, &c)| a * c).sum::<T>();
                }
            }
            if need_x {
                // dcols[r, l] += Σ_o W[o, r] · go[o, l]
                let wg = &weight.data[gi * opg * kdim..(gi + 1) * opg * kdim];
                let dst = &mut dcols[(b * groups + gi) * kdim * l..][..kdim * l];
                for o in 0..opg {
                    let gr = &go[o * l..(o + 1) * l];
                    for r in 0..kdim {
                        let wv = wg[o * kdim + r];
                        if wv == T::zero() {
                            continue;
                        }
                        for (d, &gv) in dst[r * l..(r + 1) * l].iter_mut().zip(gr) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
    }
    let dx = need_x.then(|| col2im(&dcols, g));
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1], &[1, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[4, 2, 3], &[3]).unwrap(), vec![4, 2, 3]);
        assert!(broadcast_shape(&[2, 3], &[3, 2]).is_err());
    }

    #[test]
    fn reduce_to_undoes_broadcast() {
        let g = Tensor::<f64>::ones(&[2, 3]);
        let r = reduce_to(&g, &[1, 3]);
        assert_eq!(r.shape(), &[1, 3]);
        assert_eq!(r.data(), &[2.0, 2.0, 2.0]);
        let r = reduce_to(&g, &[]);
        assert_eq!(r.data(), &[6.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute(&a, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), a.at(&[1, 2, 3]));
        let back = permute(&p, &inverse_perm(&[2, 0, 1])).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn sum_and_max_axis() {
        let a = Tensor::<f64>::new(&[2, 3], vec![1., 5., 2., -1., 0., 7.]).unwrap();
        assert_eq!(sum_axis(&a, 1, false).unwrap().data(), &[8.0, 6.0]);
        assert_eq!(sum_axis(&a, 0, true).unwrap().shape(), &[1, 3]);
        let (m, arg) = max_axis(&a, 1, false).unwrap();
        assert_eq!(m.data(), &[5.0, 7.0]);
        assert_eq!(arg, vec![1, 5]);
        assert!(sum_axis(&a, 2, false).is_err());
    }
}
