//! Slice-level forward and adjoint kernels used by the tape.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output index range `[lo, hi)` whose input coordinate `o*stride + k - pad`
    /// falls inside `[0, extent)`.
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // o*s + off <= extent - 1
        let top = extent as isize - 1 - off;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = lo.max(0) as usize;
        let hi = (hi as usize).min(out);
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let plane_in = g.h * g.w;
    let plane_out = oh * ow;
    let ksz = g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * g.cout * plane_out];
    for n in 0..g.n {
        for co in 0..g.cout {
            let grp = co / cout_g;
            let o = &mut out[(n * g.cout + co) * plane_out..][..plane_out];
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = b[co]);
            }
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let inp = &x[(n * g.cin + ci) * plane_in..][..plane_in];
                let wk = &w[(co * cin_g + cl) * ksz..][..ksz];
                if g.pointwise() {
                    let wv = wk[0];
                    for (ov, &iv) in o.iter_mut().zip(inp) {
                        *ov += wv * iv;
                    }
                    continue;
                }
                for ky in 0..g.kh {
                    let (ylo, yhi) = g.valid(ky, g.h, oh);
                    for kx in 0..g.kw {
                        let (xlo, xhi) = g.valid(kx, g.w, ow);
                        let wv = wk[ky * g.kw + kx];
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let irow = &inp[iy * g.w..][..g.w];
                            let orow = &mut o[oy * ow..][..ow];
                            if g.stride == 1 {
                                let ix0 = xlo + kx - g.pad;
                                for (ov, &iv) in orow[xlo..xhi].iter_mut().zip(&irow[ix0..]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    want_bias: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let plane_in = g.h * g.w;
    let plane_out = oh * ow;
    let ksz = g.kh * g.kw;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = want_bias.then(|| vec![T::zero(); g.cout]);
    for n in 0..g.n {
        for co in 0..g.cout {
            let grp = co / cout_g;
            let d = &dout[(n * g.cout + co) * plane_out..][..plane_out];
            if let Some(db) = db.as_mut() {
                db[co] += d.iter().copied().sum::<T>();
            }
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let base_in = (n * g.cin + ci) * plane_in;
                let inp = &x[base_in..][..plane_in];
                let wbase = (co * cin_g + cl) * ksz;
                if g.pointwise() {
                    let wv = w[wbase];
                    let mut acc = T::zero();
                    let dxp = &mut dx[base_in..][..plane_in];
                    for ((dxv, &iv), &dv) in dxp.iter_mut().zip(inp).zip(d) {
                        *dxv += wv * dv;
                        acc += iv * dv;
                    }
                    dw[wbase] += acc;
                    continue;
                }
                for ky in 0..g.kh {
                    let (ylo, yhi) = g.valid(ky, g.h, oh);
                    for kx in 0..g.kw {
                        let (xlo, xhi) = g.valid(kx, g.w, ow);
                        let wv = w[wbase + ky * g.kw + kx];
                        let mut acc = T::zero();
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let drow = &d[oy * ow..][..ow];
                            let irow_off = base_in + iy * g.w;
                            for ox in xlo..xhi {
                                let ix = ox * g.stride + kx - g.pad;
                                let dv = drow[ox];
                                acc += inp[iy * g.w + ix] * dv;
                                dx[irow_off + ix] += wv * dv;
                            }
                        }
                        dw[wbase + ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// `out[b] = a[b] · op(b[b])` with `op` the identity or transpose.
/// `a: [batch, m, k]`, `b: [batch, k, n]` (or `[batch, n, k]` when `trans_b`).
pub fn bmm_forward<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let a = &a[bi * m * k..][..m * k];
        let b = &b[bi * k * n..][..k * n];
        let o = &mut out[bi * m * n..][..m * n];
        for i in 0..m {
            let arow = &a[i * k..][..k];
            let orow = &mut o[i * n..][..n];
            if trans_b {
                for (j, ov) in orow.iter_mut().enumerate() {
                    let brow = &b[j * k..][..k];
                    *ov = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                }
            } else {
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b[p * n..][..n];
                    for (ov, &bv) in orow.iter_mut().zip(brow) {
                        *ov += av * bv;
                    }
                }
            }
        }
    }
    out
}

pub fn bmm_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    dout: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::zero(); a.len()];
    let mut db = vec![T::zero(); b.len()];
    for bi in 0..batch {
        let a = &a[bi * m * k..][..m * k];
        let b = &b[bi * k * n..][..k * n];
        let d = &dout[bi * m * n..][..m * n];
        let da = &mut da[bi * m * k..][..m * k];
        let db = &mut db[bi * k * n..][..k * n];
        for i in 0..m {
            let drow = &d[i * n..][..n];
            let arow = &a[i * k..][..k];
            let darow = &mut da[i * k..][..k];
            if trans_b {
                // b is [n, k]
                for (j, &dv) in drow.iter().enumerate() {
                    let brow = &b[j * k..][..k];
                    let dbrow = &mut db[j * k..][..k];
                    for p in 0..k {
                        darow[p] += dv * brow[p];
                        dbrow[p] += dv * arow[p];
                    }
                }
            } else {
                for p in 0..k {
                    let brow = &b[p * n..][..n];
                    darow[p] += drow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
                    let av = arow[p];
                    let dbrow = &mut db[p * n..][..n];
                    for (dbv, &dv) in dbrow.iter_mut().zip(drow) {
                        *dbv += av * dv;
                    }
                }
            }
        }
    }
    (da, db)
}

/// Swap the last two axes of a `[batch, m, n]` block.
pub fn transpose<T: Scalar>(x: &[T], batch: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let src = &x[b * m * n..][..m * n];
        let dst = &mut out[b * m * n..][..m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[at(j)]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - mx).exp();
                y[at(j)] = e;
                s += e;
            }
            for j in 0..len {
                y[at(j)] = y[at(j)] / s;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * dy[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

/// Per-row normalization statistics: returns `(xhat, rstd)`.
/// A row whose elements are all equal normalizes to zeros.
pub fn normalize_rows<T: Scalar>(
    rows: impl Iterator<Item = Vec<T>>,
    eps: T,
) -> (Vec<Vec<T>>, Vec<T>) {
    let mut xhats = Vec::new();
    let mut rstds = Vec::new();
    for row in rows {
        let len = T::c(row.len() as f64);
        let mean = row.iter().copied().sum::<T>() / len;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / len;
        let rstd = T::one() / (var + eps).sqrt();
        let constant = row.iter().all(|&v| v == row[0]);
        let xhat = if constant {
            vec![T::zero(); row.len()]
        } else {
            row.iter().map(|&v| (v - mean) * rstd).collect()
        };
        xhats.push(xhat);
        rstds.push(rstd);
    }
    (xhats, rstds)
}

/// Adjoint of `xhat = (x - mean) * rstd` given `dxhat`, over one row.
pub fn normalize_backward<T: Scalar>(xhat: &[T], dxhat: &[T], rstd: T) -> Vec<T> {
    let len = T::c(xhat.len() as f64);
    let s1: T = dxhat.iter().copied().sum();
    let s2: T = dxhat.iter().zip(xhat).map(|(&d, &h)| d * h).sum();
    xhat.iter()
        .zip(dxhat)
        .map(|(&h, &d)| rstd / len * (len * d - s1 - h * s2))
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::c(GELU_C);
    let k = T::c(0.044715);
    let half = T::c(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::c(GELU_C);
    let k = T::c(0.044715);
    let half = T::c(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::c(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn hswish<T: Scalar>(x: T) -> T {
    let three = T::c(3.0);
    let six = T::c(6.0);
    x * (x + three).max(T::zero()).min(six) / six
}

pub fn hswish_grad<T: Scalar>(x: T) -> T {
    let three = T::c(3.0);
    if x <= -three {
        T::zero()
    } else if x >= three {
        T::one()
    } else {
        (T::c(2.0) * x + three) / T::c(6.0)
    }
}
