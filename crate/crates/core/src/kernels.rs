//! Forward and backward kernels. Every reduction accumulates sequentially in
//! row-major order so results are bit-reproducible.

use crate::tensor::Scalar;

/// `c[m,n] += a[m,k] * b[k,n]`, i-k-j order.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn dense_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], n: usize, din: usize, dout: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(n * dout);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    matmul_acc(x, w, &mut y, n, din, dout);
    y
}

/// Returns `(dx, dw, db)`.
pub fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    din: usize,
    dout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let wt = transpose(w, din, dout);
    let mut dx = vec![T::zero(); n * din];
    matmul_acc(dy, &wt, &mut dx, n, dout, din);
    let mut dw = vec![T::zero(); din * dout];
    matmul_at_b_acc(x, dy, &mut dw, n, din, dout);
    let mut db = vec![T::zero(); dout];
    for row in dy.chunks_exact(dout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub f: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let hp = self.h + 2 * self.pad;
        let wp = self.w + 2 * self.pad;
        if hp < self.kh || wp < self.kw || self.stride == 0 {
            return None;
        }
        Some(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, ho: usize, wo: usize, cols: &mut [T]) {
    let k = g.patch_len();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
            let mut idx = 0;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let dst = &mut row[idx..idx + g.c];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(T::zero());
                    } else {
                        let base = ((iy as usize) * g.w + ix as usize) * g.c;
                        dst.copy_from_slice(&x[base..base + g.c]);
                    }
                    idx += g.c;
                }
            }
        }
    }
}

fn col2im_acc<T: Scalar>(cols: &[T], g: &ConvGeom, ho: usize, wo: usize, dx: &mut [T]) {
    let k = g.patch_len();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
            let mut idx = 0;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if iy >= 0 && ix >= 0 && iy < g.h as isize && ix < g.w as isize {
                        let base = ((iy as usize) * g.w + ix as usize) * g.c;
                        for (d, &v) in dx[base..base + g.c].iter_mut().zip(&row[idx..idx + g.c]) {
                            *d = *d + v;
                        }
                    }
                    idx += g.c;
                }
            }
        }
    }
}

/// NHWC input, `[kh, kw, c, f]` weights.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw().expect("conv geometry validated by caller");
    let k = g.patch_len();
    let p = ho * wo;
    let mut cols = vec![T::zero(); p * k];
    let mut y = Vec::with_capacity(g.n * p * g.f);
    let in_stride = g.h * g.w * g.c;
    for s in 0..g.n {
        im2col(&x[s * in_stride..(s + 1) * in_stride], g, ho, wo, &mut cols);
        let start = y.len();
        for _ in 0..p {
            y.extend_from_slice(b);
        }
        matmul_acc(&cols, w, &mut y[start..], p, k, g.f);
    }
    y
}

/// Returns `(dx, dw, db)`.
/// `dx` is left empty when `need_dx` is false.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = g.out_hw().expect("conv geometry validated by caller");
    let k = g.patch_len();
    let p = ho * wo;
    let in_stride = g.h * g.w * g.c;
    let wt = transpose(w, k, g.f);
    let mut cols = vec![T::zero(); p * k];
    let mut dcols = vec![T::zero(); p * k];
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.f];
    for s in 0..g.n {
        let xs = &x[s * in_stride..(s + 1) * in_stride];
        let dys = &dy[s * p * g.f..(s + 1) * p * g.f];
        im2col(xs, g, ho, wo, &mut cols);
        matmul_at_b_acc(&cols, dys, &mut dw, p, k, g.f);
        for row in dys.chunks_exact(g.f) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
        if need_dx {
            dcols.fill(T::zero());
            matmul_acc(dys, &wt, &mut dcols, p, g.f, k);
            col2im_acc(&dcols, g, ho, wo, &mut dx[s * in_stride..(s + 1) * in_stride]);
        }
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug)]
pub struct PoolGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub size: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        if self.h < self.size || self.w < self.size || self.stride == 0 || self.size == 0 {
            return None;
        }
        Some((
            (self.h - self.size) / self.stride + 1,
            (self.w - self.size) / self.stride + 1,
        ))
    }
}

/// Flat input index of each max; ties resolve to the first window position.
fn maxpool_argmax<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = g.out_hw().expect("pool geometry validated by caller");
    let mut y = Vec::with_capacity(g.n * ho * wo * g.c);
    let mut arg = Vec::with_capacity(g.n * ho * wo * g.c);
    for s in 0..g.n {
        let base = s * g.h * g.w * g.c;
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..g.c {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for ky in 0..g.size {
                        for kx in 0..g.size {
                            let i = base
                                + ((oy * g.stride + ky) * g.w + ox * g.stride + kx) * g.c
                                + ch;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> Vec<T> {
    maxpool_argmax(x, g).0
}

pub fn maxpool_backward<T: Scalar>(x: &[T], dy: &[T], g: &PoolGeom) -> Vec<T> {
    let (_, arg) = maxpool_argmax(x, g);
    let mut dx = vec![T::zero(); x.len()];
    for (&i, &d) in arg.iter().zip(dy) {
        dx[i] = dx[i] + d;
    }
    dx
}

pub fn gap_forward<T: Scalar>(x: &[T], n: usize, hw: usize, c: usize) -> Vec<T> {
    let inv = T::one() / T::from_f64(hw as f64);
    let mut y = vec![T::zero(); n * c];
    for s in 0..n {
        let out = &mut y[s * c..(s + 1) * c];
        for px in x[s * hw * c..(s + 1) * hw * c].chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(px) {
                *o = *o + v;
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
    }
    y
}

pub fn gap_backward<T: Scalar>(dy: &[T], n: usize, hw: usize, c: usize) -> Vec<T> {
    let inv = T::one() / T::from_f64(hw as f64);
    let mut dx = Vec::with_capacity(n * hw * c);
    for s in 0..n {
        let g = &dy[s * c..(s + 1) * c];
        for _ in 0..hw {
            dx.extend(g.iter().map(|&v| v * inv));
        }
    }
    dx
}

pub fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = y.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum = sum + e;
            y.push(e);
        }
        for v in &mut y[start..] {
            *v = *v / sum;
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], k: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks_exact(k).zip(dy.chunks_exact(k)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &g)| a + p * g);
        dx.extend(yr.iter().zip(gr).map(|(&p, &g)| p * (g - dot)));
    }
    dx
}

/// Mean over rows of `-sum_k t_k log softmax(z)_k`.
pub fn softmax_xent_forward<T: Scalar>(z: &[T], t: &[T], k: usize) -> T {
    let rows = z.len() / k;
    let mut total = T::zero();
    for (zr, tr) in z.chunks_exact(k).zip(t.chunks_exact(k)) {
        let max = zr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = zr.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
        let row = zr
            .iter()
            .zip(tr)
            .fold(T::zero(), |a, (&zv, &tv)| a + tv * (lse - zv));
        total = total + row;
    }
    total / T::from_f64(rows as f64)
}

pub fn softmax_xent_backward<T: Scalar>(z: &[T], t: &[T], k: usize, dl: T) -> Vec<T> {
    let rows = z.len() / k;
    let scale = dl / T::from_f64(rows as f64);
    let p = softmax_rows(z, k);
    let mut dz = Vec::with_capacity(z.len());
    for (pr, tr) in p.chunks_exact(k).zip(t.chunks_exact(k)) {
        let tsum = tr.iter().fold(T::zero(), |a, &v| a + v);
        dz.extend(pr.iter().zip(tr).map(|(&pv, &tv)| (pv * tsum - tv) * scale));
    }
    dz
}

pub fn sqdist_rows<T: Scalar>(a: &[T], b: &[T], d: usize) -> Vec<T> {
    a.chunks_exact(d)
        .zip(b.chunks_exact(d))
        .map(|(ar, br)| {
            ar.iter().zip(br).fold(T::zero(), |acc, (&x, &y)| {
                let diff = x - y;
                acc + diff * diff
            })
        })
        .collect()
}

pub const L2_NORM_EPS: f64 = 1e-12;

pub fn l2_normalize_rows<T: Scalar>(x: &[T], d: usize) -> Vec<T> {
    let eps = T::from_f64(L2_NORM_EPS);
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let norm = (row.iter().fold(T::zero(), |a, &v| a + v * v) + eps).sqrt();
        y.extend(row.iter().map(|&v| v / norm));
    }
    y
}

pub fn l2_normalize_backward<T: Scalar>(x: &[T], dy: &[T], d: usize) -> Vec<T> {
    let eps = T::from_f64(L2_NORM_EPS);
    let mut dx = Vec::with_capacity(x.len());
    for (xr, gr) in x.chunks_exact(d).zip(dy.chunks_exact(d)) {
        let norm = (xr.iter().fold(T::zero(), |a, &v| a + v * v) + eps).sqrt();
        let dot = xr.iter().zip(gr).fold(T::zero(), |a, (&v, &g)| a + v * g);
        let n3 = norm * norm * norm;
        dx.extend(xr.iter().zip(gr).map(|(&v, &g)| g / norm - v * dot / n3));
    }
    dx
}
