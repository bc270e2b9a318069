//! A minimal reverse-mode tape over dense `[channels, height, width]` tensors.
//!
//! Only the operations the residual denoiser needs are supported. Values are
//! recorded eagerly during the forward pass; [`Tape::backward`] walks the
//! nodes in reverse and accumulates parameter gradients into a flat vector.

use std::fmt::Debug;

use num_traits::Float;

/// Floating-point element type usable on the tape.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    /// `c = a' * b' + beta * c` on row-major buffers, where `a'` is `a` (m x k)
    /// or its transpose, and `b'` is `b` (k x n) or its transpose.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // Logical (rows x cols); storage is row-major of the untransposed matrix.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                ta: bool,
                tb: bool,
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = strides(ta, m, k);
                let (rsb, csb) = strides(tb, k, n);
                // SAFETY: buffer sizes are checked above and strides address
                // exactly the m*k, k*n and m*n elements of each operand.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn of(x: f64) -> Self {
                x as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub type Shape = [usize; 3];

enum Op<T> {
    Input,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        cols: Vec<T>,
    },
    Add(Var, Var),
    Silu(Var),
    /// `x * (1 + scale[c]) + shift[c]`
    Film { x: Var, scale: Var, shift: Var },
    /// `x * g[c]`
    Gain { x: Var, g: Var },
    AvgPool(Var),
    Upsample(Var),
    Linear { x: Var, w: Var, b: Var },
    Slice { x: Var, start: usize },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        dims: (usize, usize, usize),
    },
    SoftmaxRows(Var),
    Scale(Var, T),
    Reshape(Var),
}

struct Node<T> {
    value: Vec<T>,
    shape: Shape,
    op: Op<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2]
}

fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

fn add_into<T: Real>(dst: &mut Vec<T>, src: &[T]) {
    if dst.is_empty() {
        dst.extend_from_slice(src);
    } else {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = *d + s;
        }
    }
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let (x0, x1) = (
                        (-dx).max(0) as usize,
                        (w as isize - dx).min(w as isize) as usize,
                    );
                    for xx in x0..x1 {
                        dst_row[xx] = src_row[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    let (x0, x1) = (
                        (-dx).max(0) as usize,
                        (w as isize - dx).min(w as isize) as usize,
                    );
                    for xx in x0..x1 {
                        let j = base + (xx as isize + dx) as usize;
                        x[j] = x[j] + src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Vec<T>, shape: Shape, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), numel(shape));
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn input(&mut self, value: Vec<T>, shape: Shape) -> Var {
        self.push(value, shape, Op::Input)
    }

    /// A parameter leaf whose gradient lands at `offset` in the flat gradient.
    pub fn param(&mut self, value: &[T], shape: Shape, offset: usize) -> Var {
        self.push(value.to_vec(), shape, Op::Param(offset))
    }

    /// Same-padded stride-1 convolution with a `k x k` kernel (k odd).
    /// `w` is `[cout, cin * k * k, 1]`, `b` is `[cout, 1, 1]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, k: usize) -> Var {
        let [cin, h, wd] = self.shape(x);
        let cout = self.shape(w)[0];
        assert_eq!(self.shape(w)[1], cin * k * k, "conv weight shape");
        let hw = h * wd;
        let cols = if k == 1 {
            Vec::new()
        } else {
            im2col(self.value(x), cin, h, wd, k)
        };
        let mut out = vec![T::zero(); cout * hw];
        for (co, chunk) in out.chunks_exact_mut(hw).enumerate() {
            let bias = self.value(b)[co];
            chunk.iter_mut().for_each(|o| *o = bias);
        }
        {
            let src = if k == 1 { self.value(x) } else { &cols };
            T::gemm(false, false, cout, cin * k * k, hw, self.value(w), src, T::one(), &mut out);
        }
        self.push(out, [cout, h, wd], Op::Conv { x, w, b, k, cols })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let shape = self.shape(a);
        self.push(out, shape, Op::Add(a, b))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| silu(v)).collect();
        let shape = self.shape(x);
        self.push(out, shape, Op::Silu(x))
    }

    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let [c, h, w] = self.shape(x);
        assert!(self.shape(scale)[0] == c && self.shape(shift)[0] == c, "film shape");
        let hw = h * w;
        let mut out = self.value(x).to_vec();
        for ci in 0..c {
            let s = T::one() + self.value(scale)[ci];
            let b = self.value(shift)[ci];
            out[ci * hw..(ci + 1) * hw]
                .iter_mut()
                .for_each(|v| *v = *v * s + b);
        }
        self.push(out, [c, h, w], Op::Film { x, scale, shift })
    }

    pub fn gain(&mut self, x: Var, g: Var) -> Var {
        let [c, h, w] = self.shape(x);
        let hw = h * w;
        let mut out = self.value(x).to_vec();
        for ci in 0..c {
            let s = self.value(g)[ci];
            out[ci * hw..(ci + 1) * hw].iter_mut().for_each(|v| *v = *v * s);
        }
        self.push(out, [c, h, w], Op::Gain { x, g })
    }

    pub fn avg_pool(&mut self, x: Var) -> Var {
        let [c, h, w] = self.shape(x);
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let src = self.value(x);
        let mut out = vec![T::zero(); c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let i = ci * h * w + 2 * y * w + 2 * xx;
                    out[(ci * ho + y) * wo + xx] =
                        (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        self.push(out, [c, ho, wo], Op::AvgPool(x))
    }

    pub fn upsample(&mut self, x: Var) -> Var {
        let [c, h, w] = self.shape(x);
        let (ho, wo) = (2 * h, 2 * w);
        let src = self.value(x);
        let mut out = vec![T::zero(); c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(ci * ho + y) * wo + xx] = src[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, [c, ho, wo], Op::Upsample(x))
    }

    /// Dense layer on a flat vector: `w` is `[out, in, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let n_in = numel(self.shape(x));
        let n_out = self.shape(w)[0];
        assert_eq!(self.shape(w)[1], n_in, "linear shape");
        let mut out = self.value(b).to_vec();
        T::gemm(false, false, n_out, n_in, 1, self.value(w), self.value(x), T::one(), &mut out);
        self.push(out, [n_out, 1, 1], Op::Linear { x, w, b })
    }

    /// Contiguous slice of a flat vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x)[start..start + len].to_vec();
        self.push(out, [len, 1, 1], Op::Slice { x, start })
    }

    /// Matrix product viewing `a` and `b` as `[shape[0], shape[1]*shape[2]]`.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (ar, ac) = (sa[0], sa[1] * sa[2]);
        let (br, bc) = (sb[0], sb[1] * sb[2]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![T::zero(); m * n];
        T::gemm(ta, tb, m, k, n, self.value(a), self.value(b), T::zero(), &mut out);
        self.push(
            out,
            [m, n, 1],
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                dims: (m, k, n),
            },
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let cols = s[1] * s[2];
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(cols) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / sum);
        }
        self.push(out, s, Op::SoftmaxRows(x))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x);
        self.push(out, shape, Op::Scale(x, factor))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Var {
        assert_eq!(numel(shape), numel(self.shape(x)), "reshape size");
        let out = self.value(x).to_vec();
        self.push(out, shape, Op::Reshape(x))
    }

    /// Back-propagates `seed` (the gradient of the loss w.r.t. `output`) and
    /// returns the gradient for a flat parameter vector of length `n_params`.
    pub fn backward(&self, output: Var, seed: &[T], n_params: usize) -> Vec<T> {
        assert_eq!(seed.len(), self.nodes[output.0].value.len(), "seed length");
        let mut grads: Vec<Vec<T>> = (0..self.nodes.len()).map(|_| Vec::new()).collect();
        grads[output.0] = seed.to_vec();
        let mut param_grad = vec![T::zero(); n_params];

        for i in (0..=output.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(offset) => {
                    for (p, &d) in param_grad[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *p = *p + d;
                    }
                }
                Op::Conv { x, w, b, k, cols } => {
                    let [cin, h, wd] = self.shape(*x);
                    let cout = node.shape[0];
                    let hw = h * wd;
                    let ckk = cin * k * k;
                    let src = if *k == 1 { self.value(*x) } else { cols };
                    let mut dw = vec![T::zero(); cout * ckk];
                    T::gemm(false, true, cout, hw, ckk, &g, src, T::zero(), &mut dw);
                    add_into(&mut grads[w.0], &dw);
                    let db: Vec<T> = g
                        .chunks_exact(hw)
                        .map(|c| c.iter().fold(T::zero(), |a, &v| a + v))
                        .collect();
                    add_into(&mut grads[b.0], &db);
                    let mut dcols = vec![T::zero(); ckk * hw];
                    T::gemm(true, false, ckk, cout, hw, self.value(*w), &g, T::zero(), &mut dcols);
                    if *k == 1 {
                        add_into(&mut grads[x.0], &dcols);
                    } else {
                        let dx = col2im(&dcols, cin, h, wd, *k);
                        add_into(&mut grads[x.0], &dx);
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], &g);
                    add_into(&mut grads[b.0], &g);
                }
                Op::Silu(x) => {
                    let dx: Vec<T> = self
                        .value(*x)
                        .iter()
                        .zip(&g)
                        .map(|(&v, &d)| d * silu_grad(v))
                        .collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Film { x, scale, shift } => {
                    let [c, h, w] = node.shape;
                    let hw = h * w;
                    let xv = self.value(*x);
                    let sv = self.value(*scale);
                    let mut dx = vec![T::zero(); g.len()];
                    let mut ds = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for ci in 0..c {
                        let s = T::one() + sv[ci];
                        for j in ci * hw..(ci + 1) * hw {
                            dx[j] = g[j] * s;
                            ds[ci] = ds[ci] + g[j] * xv[j];
                            db[ci] = db[ci] + g[j];
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                    add_into(&mut grads[scale.0], &ds);
                    add_into(&mut grads[shift.0], &db);
                }
                Op::Gain { x, g: gv } => {
                    let [c, h, w] = node.shape;
                    let hw = h * w;
                    let xv = self.value(*x);
                    let gains = self.value(*gv);
                    let mut dx = vec![T::zero(); g.len()];
                    let mut dg = vec![T::zero(); c];
                    for ci in 0..c {
                        for j in ci * hw..(ci + 1) * hw {
                            dx[j] = g[j] * gains[ci];
                            dg[ci] = dg[ci] + g[j] * xv[j];
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                    add_into(&mut grads[gv.0], &dg);
                }
                Op::AvgPool(x) => {
                    let [c, h, w] = self.shape(*x);
                    let (ho, wo) = (h / 2, w / 2);
                    let quarter = T::of(0.25);
                    let mut dx = vec![T::zero(); c * h * w];
                    for ci in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let d = g[(ci * ho + y) * wo + xx] * quarter;
                                let i = ci * h * w + 2 * y * w + 2 * xx;
                                dx[i] = d;
                                dx[i + 1] = d;
                                dx[i + w] = d;
                                dx[i + w + 1] = d;
                            }
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Upsample(x) => {
                    let [c, h, w] = self.shape(*x);
                    let (ho, wo) = (2 * h, 2 * w);
                    let mut dx = vec![T::zero(); c * h * w];
                    for ci in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let j = (ci * h + y / 2) * w + xx / 2;
                                dx[j] = dx[j] + g[(ci * ho + y) * wo + xx];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Linear { x, w, b } => {
                    let n_in = numel(self.shape(*x));
                    let n_out = node.shape[0];
                    let mut dw = vec![T::zero(); n_out * n_in];
                    T::gemm(false, true, n_out, 1, n_in, &g, self.value(*x), T::zero(), &mut dw);
                    add_into(&mut grads[w.0], &dw);
                    add_into(&mut grads[b.0], &g);
                    let mut dx = vec![T::zero(); n_in];
                    T::gemm(true, false, n_in, n_out, 1, self.value(*w), &g, T::zero(), &mut dx);
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Slice { x, start } => {
                    let len = numel(self.shape(*x));
                    let mut dx = vec![T::zero(); len];
                    dx[*start..*start + g.len()].copy_from_slice(&g);
                    add_into(&mut grads[x.0], &dx);
                }
                Op::MatMul {
                    a,
                    b,
                    ta,
                    tb,
                    dims: (m, k, n),
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    // C = A' B'. dA' = G B'^T, dB' = A'^T G; map back through transposes.
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut da = vec![T::zero(); m * k];
                    if *ta {
                        // dA (k x m) = B' G^T
                        T::gemm(*tb, true, k, n, m, bv, &g, T::zero(), &mut da);
                    } else {
                        // dA (m x k) = G B'^T
                        T::gemm(false, !*tb, m, n, k, &g, bv, T::zero(), &mut da);
                    }
                    add_into(&mut grads[a.0], &da);
                    let mut db = vec![T::zero(); k * n];
                    if *tb {
                        // dB (n x k) = G^T A'
                        T::gemm(true, *ta, n, m, k, &g, av, T::zero(), &mut db);
                    } else {
                        // dB (k x n) = A'^T G
                        T::gemm(!*ta, false, k, m, n, av, &g, T::zero(), &mut db);
                    }
                    add_into(&mut grads[b.0], &db);
                }
                Op::SoftmaxRows(x) => {
                    let cols = node.shape[1] * node.shape[2];
                    let mut dx = vec![T::zero(); g.len()];
                    for ((yr, gr), dr) in node
                        .value
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                    {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &d)| a + y * d);
                        for ((d, &y), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (gg - dot);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Scale(x, f) => {
                    let dx: Vec<T> = g.iter().map(|&d| d * *f).collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Reshape(x) => add_into(&mut grads[x.0], &g),
            }
        }
        param_grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det_values(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Finite-difference check of a scalar function of a flat parameter vector
    /// built from tape ops; `build` returns the output var, the loss weights
    /// define `loss = sum(weights * output)`.
    fn check<F>(params: &[f64], build: F)
    where
        F: Fn(&mut Tape<f64>, &[f64]) -> Var,
    {
        let mut tape = Tape::new();
        let out = build(&mut tape, params);
        let weights = det_values(tape.value(out).len(), 99);
        let grad = tape.backward(out, &weights, params.len());
        let loss = |p: &[f64]| {
            let mut t = Tape::new();
            let o = build(&mut t, p);
            t.value(o).iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-5;
        for i in 0..params.len() {
            let mut p = params.to_vec();
            p[i] += h;
            let up = loss(&p);
            p[i] -= 2.0 * h;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * h);
            let tol = 1e-6 * (1.0 + fd.abs().max(grad[i].abs()));
            assert!((fd - grad[i]).abs() < tol, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]] (2x3), b = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        f64::gemm(false, false, 2, 3, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T (3x2) times a (2x3) -> 3x3 gram matrix
        let mut g = [0.0; 9];
        f64::gemm(true, false, 3, 2, 3, &a, &a, 0.0, &mut g);
        assert_eq!(g, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
        let mut h = [0.0; 4];
        f64::gemm(false, true, 2, 3, 2, &a, &a, 0.0, &mut h);
        assert_eq!(h, [14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn conv_gradients() {
        for k in [1usize, 3] {
            let (cin, cout, h, w) = (2, 3, 4, 5);
            let nw = cout * cin * k * k;
            let params = det_values(nw + cout + cin * h * w, k as u64);
            check(&params, |t, p| {
                let wv = t.param(&p[..nw], [cout, cin * k * k, 1], 0);
                let bv = t.param(&p[nw..nw + cout], [cout, 1, 1], nw);
                let x = t.param(&p[nw + cout..], [cin, h, w], nw + cout);
                t.conv(x, wv, bv, k)
            });
        }
    }

    #[test]
    fn elementwise_and_resampling_gradients() {
        let (c, h, w) = (2, 4, 4);
        let n = c * h * w;
        let params = det_values(n + 3 * c, 5);
        check(&params, |t, p| {
            let x = t.param(&p[..n], [c, h, w], 0);
            let s = t.param(&p[n..n + c], [c, 1, 1], n);
            let b = t.param(&p[n + c..n + 2 * c], [c, 1, 1], n + c);
            let g = t.param(&p[n + 2 * c..], [c, 1, 1], n + 2 * c);
            let a = t.silu(x);
            let f = t.film(a, s, b);
            let q = t.gain(f, g);
            let d = t.avg_pool(q);
            let u = t.upsample(d);
            let r = t.add(u, x);
            t.scale(r, 0.7)
        });
    }

    #[test]
    fn linear_slice_gradients() {
        let (n_in, n_out) = (4, 6);
        let params = det_values(n_in * n_out + n_out + n_in, 7);
        let nw = n_in * n_out;
        check(&params, |t, p| {
            let w = t.param(&p[..nw], [n_out, n_in, 1], 0);
            let b = t.param(&p[nw..nw + n_out], [n_out, 1, 1], nw);
            let x = t.param(&p[nw + n_out..], [n_in, 1, 1], nw + n_out);
            let y = t.linear(x, w, b);
            let y = t.silu(y);
            t.slice(y, 2, 3)
        });
    }

    #[test]
    fn attention_gradients() {
        let (c, h, w) = (3, 2, 2);
        let n = c * h * w;
        let params = det_values(3 * n, 11);
        check(&params, |t, p| {
            let q = t.param(&p[..n], [c, h, w], 0);
            let k = t.param(&p[n..2 * n], [c, h, w], n);
            let v = t.param(&p[2 * n..], [c, h, w], 2 * n);
            let s = t.matmul(q, k, true, false);
            let s = t.scale(s, 0.5);
            let a = t.softmax_rows(s);
            let o = t.matmul(v, a, false, true);
            t.reshape(o, [c, h, w])
        });
        // Remaining transpose combinations.
        let params = det_values(12, 13);
        for (ta, tb) in [(false, false), (true, true)] {
            check(&params, |t, p| {
                let a = t.param(&p[..6], [2, 3, 1], 0);
                let b = t.param(&p[6..], [3, 2, 1], 6);
                t.matmul(a, b, ta, tb)
            });
        }
    }
}
