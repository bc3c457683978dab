//! Value-level kernels. The graph calls these for its forward pass; they are
//! also usable on their own when no gradient is needed.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Surrogate for `-inf` in additive attention masks. Finite so tensors stay
/// finite, large enough that `exp` underflows to exactly zero.
pub const BLOCKED: f64 = -1.0e9;

/// `[m, k] x [k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    T::gemm(false, false, m, k, n, T::one(), a.data(), b.data(), T::zero(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// `[m, k] x [n, k]^T`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::Dimension {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let mut out = vec![T::zero(); m * n];
    T::gemm(false, true, m, k, n, T::one(), a.data(), b.data(), T::zero(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// Affine map over the last axis: `x[..., in] * w[in, out] + b[out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.cols() != w.shape()[0] {
        return Err(Error::Dimension {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (rows, k, n) = (x.rows(), x.cols(), w.shape()[1]);
    let mut out = vec![T::zero(); rows * n];
    T::gemm(false, false, rows, k, n, T::one(), x.data(), w.data(), T::zero(), &mut out);
    if let Some(b) = b {
        if b.numel() != n {
            return Err(Error::Dimension {
                op: "linear bias",
                lhs: vec![n],
                rhs: b.shape().to_vec(),
            });
        }
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

pub fn log_softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// How one spatial axis maps between two extents: either nearest-neighbour
/// replication by `up`, or block averaging over `down` cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum AxisMap {
    Up(usize),
    Down(usize),
}

impl AxisMap {
    fn new(from: usize, to: usize) -> Option<Self> {
        if to >= from && to.is_multiple_of(from) {
            Some(AxisMap::Up(to / from))
        } else if to < from && from.is_multiple_of(to) {
            Some(AxisMap::Down(from / to))
        } else {
            None
        }
    }

    /// Source index range and per-source weight for output index `o`.
    pub(crate) fn sources(self, o: usize) -> (std::ops::Range<usize>, f64) {
        match self {
            AxisMap::Up(f) => (o / f..o / f + 1, 1.0),
            AxisMap::Down(f) => (o * f..o * f + f, 1.0 / f as f64),
        }
    }
}

pub(crate) fn resize_maps(
    shape: &[usize],
    target: (usize, usize),
) -> Result<(AxisMap, AxisMap)> {
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "resize_spatial expects [t, h, w, c], got {shape:?}"
        )));
    }
    let from = (shape[1], shape[2]);
    let err = || Error::Resize { from, to: target };
    if target.0 == 0 || target.1 == 0 {
        return Err(err());
    }
    let mh = AxisMap::new(from.0, target.0).ok_or_else(err)?;
    let mw = AxisMap::new(from.1, target.1).ok_or_else(err)?;
    Ok((mh, mw))
}

/// Nearest-neighbour enlargement or block-average reduction of the spatial
/// axes of a `[t, h, w, c]` map.
pub fn resize_spatial<T: Scalar>(x: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let (mh, mw) = resize_maps(x.shape(), target)?;
    let &[t, h, w, c] = x.shape() else { unreachable!() };
    let (th, tw) = target;
    if (th, tw) == (h, w) {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = vec![T::zero(); t * th * tw * c];
    for ti in 0..t {
        for oi in 0..th {
            let (ri, _) = mh.sources(oi);
            for oj in 0..tw {
                let (rj, _) = mw.sources(oj);
                // Sum then divide, so block-constant inputs come back exactly.
                let count = T::of((ri.len() * rj.len()) as f64);
                let dst = &mut out[((ti * th + oi) * tw + oj) * c..][..c];
                for si in ri.clone() {
                    for sj in rj.clone() {
                        let s = &src[((ti * h + si) * w + sj) * c..][..c];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += v;
                        }
                    }
                }
                for d in dst {
                    *d = *d / count;
                }
            }
        }
    }
    Tensor::new(vec![t, th, tw, c], out)
}

pub(crate) fn pool_output_shape(
    shape: &[usize],
    kernel: [usize; 3],
    stride: [usize; 3],
) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(Error::Pooling(format!("expects [t, h, w, c], got {shape:?}")));
    }
    let mut out = [0, 0, 0, shape[3]];
    for a in 0..3 {
        let (e, k, s) = (shape[a], kernel[a], stride[a]);
        if k == 0 || s == 0 || k > e || (e - k) % s != 0 {
            return Err(Error::Pooling(format!(
                "extent {e} with kernel {k} and stride {s} has no integral output (shape {shape:?})"
            )));
        }
        out[a] = (e - k) / s + 1;
    }
    Ok(out)
}

/// Mean over `kernel` windows placed every `stride` cells, per channel.
pub fn avg_pool3d<T: Scalar>(x: &Tensor<T>, kernel: [usize; 3], stride: [usize; 3]) -> Result<Tensor<T>> {
    let [ot, oh, ow, c] = pool_output_shape(x.shape(), kernel, stride)?;
    let &[_, h, w, _] = x.shape() else { unreachable!() };
    let inv = T::of(1.0 / (kernel[0] * kernel[1] * kernel[2]) as f64);
    let src = x.data();
    let mut out = vec![T::zero(); ot * oh * ow * c];
    for a in 0..ot {
        for b in 0..oh {
            for d in 0..ow {
                let dst = &mut out[((a * oh + b) * ow + d) * c..][..c];
                for kt in 0..kernel[0] {
                    for kh in 0..kernel[1] {
                        for kw in 0..kernel[2] {
                            let (ti, hi, wi) = (a * stride[0] + kt, b * stride[1] + kh, d * stride[2] + kw);
                            let s = &src[((ti * h + hi) * w + wi) * c..][..c];
                            for (o, &v) in dst.iter_mut().zip(s) {
                                *o += v;
                            }
                        }
                    }
                }
                for o in dst.iter_mut() {
                    *o *= inv;
                }
            }
        }
    }
    Tensor::new(vec![ot, oh, ow, c], out)
}

/// Index map of the 2x2 patch merge: for each output element, the flat input
/// offset it copies. Output channels are the four neighbours' channels in
/// order (0,0), (0,1), (1,0), (1,1).
pub(crate) fn space_to_depth_index(shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let &[t, h, w, c] = shape else {
        return Err(Error::Shape(format!("patch merge expects [t, h, w, c], got {shape:?}")));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("patch merge needs even spatial extents, got {shape:?}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(t * h * w * c);
    for ti in 0..t {
        for i in 0..oh {
            for j in 0..ow {
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let base = ((ti * h + 2 * i + di) * w + 2 * j + dj) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    Ok((vec![t, oh, ow, 4 * c], idx))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row statistics `(mean, 1/std)` for layer normalisation.
pub(crate) fn row_stats<T: Scalar>(data: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let inv_n = T::of(1.0 / n as f64);
    let eps = T::of(LAYER_NORM_EPS);
    data.chunks(n)
        .map(|row| {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            (mean, T::one() / (var + eps).sqrt())
        })
        .unzip()
}
