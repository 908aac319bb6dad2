use num_traits::{Float, FromPrimitive};
use rand::Rng;
use std::fmt::Debug;

/// Floating-point element type of parameters and activations. Training runs
/// in `f32`; gradient checks run the same code in `f64`.
pub trait Scalar: Float + FromPrimitive + Into<f64> + Debug + Default + Send + Sync + 'static {
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

fn reduce<T: Scalar>(acc: &[T; 8]) -> T {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut s = reduce(&acc);
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

/// Four dot products against a shared row; each result is bit-identical to
/// `dot(a, b_i)`.
fn dot4<T: Scalar>(a: &[T], b: [&[T]; 4]) -> [T; 4] {
    let n = a.len() / 8 * 8;
    let mut acc = [[T::zero(); 8]; 4];
    let mut i = 0;
    while i < n {
        let x = &a[i..i + 8];
        for (accj, bj) in acc.iter_mut().zip(&b) {
            let y = &bj[i..i + 8];
            for k in 0..8 {
                accj[k] = accj[k] + x[k] * y[k];
            }
        }
        i += 8;
    }
    let mut out = [T::zero(); 4];
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = reduce(&acc[j]);
        for k in n..a.len() {
            s = s + a[k] * b[j][k];
        }
        *o = s;
    }
    out
}

/// `y += alpha * x`
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `y += a₀x₀ + a₁x₁ + a₂x₂ + a₃x₃`, summed left to right, so the result
/// equals four successive `axpy` calls bit for bit.
fn axpy4<T: Scalar>(a: [T; 4], x: [&[T]; 4], y: &mut [T]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for i in 0..n {
        y[i] = (((y[i] + a[0] * x0[i]) + a[1] * x1[i]) + a[2] * x2[i]) + a[3] * x3[i];
    }
}

/// Affine layer `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![T::zero(); n_in * n_out],
            b: vec![T::zero(); n_out],
        }
    }

    /// Uniform weights in `±scale`, zero bias.
    pub fn uniform<R: Rng + ?Sized>(n_in: usize, n_out: usize, scale: f64, rng: &mut R) -> Self {
        let w = (0..n_in * n_out)
            .map(|_| T::from_f64_lossy(rng.gen_range(-scale..=scale)))
            .collect();
        Self {
            n_in,
            n_out,
            w,
            b: vec![T::zero(); n_out],
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn row(&self, o: usize) -> &[T] {
        &self.w[o * self.n_in..(o + 1) * self.n_in]
    }

    /// `out[b] = W x[b] + bias` for a row-major batch.
    pub fn forward_batch(&self, x: &[T], batch: usize, out: &mut [T]) {
        debug_assert_eq!(x.len(), batch * self.n_in);
        debug_assert_eq!(out.len(), batch * self.n_out);
        let n = self.n_in;
        let xs = |s: usize| &x[s * n..(s + 1) * n];
        for o in 0..self.n_out {
            let row = self.row(o);
            let bias = self.b[o];
            let mut s = 0;
            while s + 4 <= batch {
                let d = dot4(row, [xs(s), xs(s + 1), xs(s + 2), xs(s + 3)]);
                for (j, v) in d.into_iter().enumerate() {
                    out[(s + j) * self.n_out + o] = v + bias;
                }
                s += 4;
            }
            for s in s..batch {
                out[s * self.n_out + o] = dot(row, xs(s)) + bias;
            }
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_out];
        self.forward_batch(x, 1, &mut out);
        out
    }

    /// Accumulates parameter gradients into `grad` and, if requested,
    /// input gradients into `dx`.
    pub fn backward_batch(&self, x: &[T], dy: &[T], batch: usize, grad: &mut Dense<T>, dx: Option<&mut [T]>) {
        let (n, m) = (self.n_in, self.n_out);
        debug_assert_eq!(dy.len(), batch * m);
        debug_assert_eq!(x.len(), batch * n);
        let xs = |s: usize| &x[s * n..(s + 1) * n];
        for o in 0..m {
            let mut gb = T::zero();
            for s in 0..batch {
                gb = gb + dy[s * m + o];
            }
            grad.b[o] = grad.b[o] + gb;
            let gw = &mut grad.w[o * n..(o + 1) * n];
            let mut s = 0;
            while s + 4 <= batch {
                let d = [dy[s * m + o], dy[(s + 1) * m + o], dy[(s + 2) * m + o], dy[(s + 3) * m + o]];
                axpy4(d, [xs(s), xs(s + 1), xs(s + 2), xs(s + 3)], gw);
                s += 4;
            }
            for s in s..batch {
                axpy(dy[s * m + o], xs(s), gw);
            }
        }
        if let Some(dx) = dx {
            debug_assert_eq!(dx.len(), batch * n);
            for s in 0..batch {
                let dxs = &mut dx[s * n..(s + 1) * n];
                let d = &dy[s * m..(s + 1) * m];
                let mut o = 0;
                while o + 4 <= m {
                    axpy4(
                        [d[o], d[o + 1], d[o + 2], d[o + 3]],
                        [self.row(o), self.row(o + 1), self.row(o + 2), self.row(o + 3)],
                        dxs,
                    );
                    o += 4;
                }
                for o in o..m {
                    axpy(d[o], self.row(o), dxs);
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dense<U> {
        Dense {
            n_in: self.n_in,
            n_out: self.n_out,
            w: cast_vec(&self.w),
            b: cast_vec(&self.b),
        }
    }
}

pub fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::from_f64_lossy(x.into())).collect()
}
