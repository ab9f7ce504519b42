use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::{strides, Array, Real};
use super::conv::{chunk_samples, gather_samples, scatter_samples, transpose_into, ConvGeom};

/// Target size, in values, of one lowered column buffer.
const COL_BUDGET: usize = 1 << 20;
use super::params::ParamStore;
use super::GradError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise scalar function with a user-supplied derivative.
pub type ScalarFn<T> = fn(T) -> T;

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Swish(Var),
    Gelu(Var),
    Softmax(Var),
    MaskedFill {
        x: Var,
        mask: Arc<Vec<bool>>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    StopGradient,
    StraightThrough(Var),
    Elementwise {
        x: Var,
        df: ScalarFn<T>,
    },
}

/// One recorded value with its producing operation and, after
/// [`Graph::backward`], its gradient.
pub struct Node<T: Real> {
    value: Array<T>,
    grad: Option<Array<T>>,
    op: Op<T>,
    requires_grad: bool,
}

impl<T: Real> Node<T> {
    pub fn value(&self) -> &Array<T> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Array<T>> {
        self.grad.as_ref()
    }
}

/// Tape of operations for reverse-mode differentiation.
///
/// A graph is built once per forward pass and discarded after the backward
/// pass. Parameters enter through [`Graph::param`], which copies the current
/// value out of a [`ParamStore`] and remembers the binding so gradients can be
/// written back with [`ParamStore::accumulate_grads`].
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    training: bool,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> GradError {
    GradError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::ONE + T::from_f64(3.0) * a * x * x);
    half * (T::ONE + th) + half * x * (T::ONE - th * th) * du
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            training: false,
            check_finite: false,
        }
    }

    /// Graph in training mode: dropout is active.
    pub fn training() -> Self {
        Self {
            training: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Array<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub(crate) fn param_bindings(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, requires_grad: bool) -> Result<Var, GradError> {
        if self.check_finite && !value.all_finite() {
            return Err(GradError::NonFinite {
                op: op_name(&op),
            });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to the named parameter in `store`. Repeated calls with the
    /// same name return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, GradError> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.input(value);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Array<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::from_vec(va.shape(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary_same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary_same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary_same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, GradError> {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// `x + bias` with `bias` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if axis >= xs.len() || bs.len() != 1 || bs[0] != xs[axis] {
            return Err(shape_err("add_bias", &xs, bs));
        }
        let inner: usize = xs[axis + 1..].iter().product();
        let n = xs[axis];
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            *val += b[(i / inner) % n];
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(v, Op::AddBias { x, bias, axis }, rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Array::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::ZERO,
            out.data_mut(),
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Array::zeros(&[bt, m, n]);
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let dout = out.data_mut();
            for i in 0..bt {
                T::gemm(
                    m,
                    k,
                    n,
                    T::ONE,
                    &da[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &db[i * k * n..(i + 1) * k * n],
                    n as isize,
                    1,
                    T::ZERO,
                    &mut dout[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::BatchMatMul(a, b), rg)
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &xs, perm));
        }
        let out = permute_array(self.value(x), perm);
        let rg = self.rg(x);
        self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GradError> {
        let v = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    fn conv_geom(
        &self,
        op: &'static str,
        large: &[usize],
        channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<ConvGeom, GradError> {
        if stride == 0 || kernel == 0 {
            return Err(shape_err(op, large, &[kernel, stride]));
        }
        let pad = (kernel - 1) / 2;
        let mut small = [0; 3];
        for d in 0..3 {
            small[d] = ConvGeom::small_extent(large[d], kernel, stride, pad)
                .ok_or_else(|| shape_err(op, large, &[kernel, stride]))?;
        }
        Ok(ConvGeom {
            channels,
            kernel,
            stride,
            pad,
            large: [large[0], large[1], large[2]],
            small,
        })
    }

    /// 3D convolution. `x: [N, Cin, D, H, W]`, `w: [Cout, Cin, k, k, k]`,
    /// `b: [Cout]`. Zero padding `(k - 1) / 2` keeps the extent at stride 1
    /// and halves even extents at stride 2.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(shape_err("conv3d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv3d", &ws, self.shape(b)));
            }
        }
        let (n, cin, cout, k) = (xs[0], xs[1], ws[0], ws[2]);
        let geom = self.conv_geom("conv3d", &xs[2..], cin, k, stride)?;
        let (rows, plen, llen) = (geom.rows(), geom.small_len(), geom.large_len());
        let mut out = Array::zeros(&[n, cout, geom.small[0], geom.small[1], geom.small[2]]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let dout = out.data_mut();
            let chunk = chunk_samples(n, rows * plen, COL_BUDGET);
            let mut cols = vec![T::ZERO; rows * plen * chunk];
            let mut res = vec![T::ZERO; cout * plen * chunk];
            for n0 in (0..n).step_by(chunk) {
                let n1 = (n0 + chunk).min(n);
                let width = (n1 - n0) * plen;
                for s in n0..n1 {
                    geom.im2col_at(&xv[s * cin * llen..(s + 1) * cin * llen], &mut cols, width, (s - n0) * plen);
                }
                // out [cout, width] = W [cout, rows] x cols [rows, width]
                T::gemm(
                    cout,
                    rows,
                    width,
                    T::ONE,
                    wv,
                    rows as isize,
                    1,
                    &cols,
                    width as isize,
                    1,
                    T::ZERO,
                    &mut res,
                    width as isize,
                    1,
                );
                scatter_samples(&res, n0, n1, cout, plen, dout, false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (i, chunk) in dout.chunks_mut(plen).enumerate() {
                    let bias = bv[i % cout];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv3d { x, w, b, geom }, rg)
    }

    /// Transposed 3D convolution, the adjoint of [`Graph::conv3d`] with the
    /// same padding rule. `x: [N, Cin, d, h, w]`, `w: [Cin, Cout, k, k, k]`.
    /// Output extent is `(in - 1) * stride - 2 * pad + k`; with `k = 4`,
    /// `stride = 2` that is exactly twice the input.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[0] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] || stride == 0 {
            return Err(shape_err("conv_transpose3d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(shape_err("conv_transpose3d", &ws, self.shape(b)));
            }
        }
        let (n, cin, cout, k) = (xs[0], xs[1], ws[1], ws[2]);
        let pad = (k - 1) / 2;
        let mut large = [0; 3];
        for d in 0..3 {
            let full = (xs[2 + d] - 1) * stride + k;
            if full < 2 * pad + 1 {
                return Err(shape_err("conv_transpose3d", &xs, &ws));
            }
            large[d] = full - 2 * pad;
        }
        let geom = self.conv_geom("conv_transpose3d", &large, cout, k, stride)?;
        if geom.small != [xs[2], xs[3], xs[4]] {
            return Err(shape_err("conv_transpose3d", &xs, &ws));
        }
        let (rows, plen, llen) = (geom.rows(), geom.small_len(), geom.large_len());
        let mut out = Array::zeros(&[n, cout, large[0], large[1], large[2]]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let dout = out.data_mut();
            let chunk = chunk_samples(n, rows * plen, COL_BUDGET);
            let mut cols = vec![T::ZERO; rows * plen * chunk];
            let mut xin = vec![T::ZERO; cin * plen * chunk];
            for n0 in (0..n).step_by(chunk) {
                let n1 = (n0 + chunk).min(n);
                let width = (n1 - n0) * plen;
                gather_samples(xv, n0, n1, cin, plen, &mut xin);
                // cols [rows, width] = W^T [rows, cin] x X [cin, width]
                T::gemm(
                    rows,
                    cin,
                    width,
                    T::ONE,
                    wv,
                    1,
                    rows as isize,
                    &xin,
                    width as isize,
                    1,
                    T::ZERO,
                    &mut cols,
                    width as isize,
                    1,
                );
                for s in n0..n1 {
                    geom.col2im_at(&cols, width, (s - n0) * plen, &mut dout[s * cout * llen..(s + 1) * cout * llen]);
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (i, chunk) in dout.chunks_mut(llen).enumerate() {
                    let bias = bv[i % cout];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::ConvTranspose3d { x, w, b, geom }, rg)
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || xs[1] % groups != 0 {
            return Err(shape_err("group_norm", &xs, &[groups]));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("group_norm", &xs, self.shape(gamma)));
        }
        let spatial: usize = xs[2..].iter().product();
        let glen = c / groups * spatial;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::ZERO; xv.len()];
        let ngroups = xs[0] * groups;
        let mut mean = Vec::with_capacity(ngroups);
        let mut rstd = Vec::with_capacity(ngroups);
        let inv = T::from_f64(1.0 / glen as f64);
        for gi in 0..ngroups {
            let seg = &xv[gi * glen..(gi + 1) * glen];
            let mu = seg.iter().copied().sum::<T>() * inv;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv;
            let r = T::ONE / (var + T::from_f64(eps)).sqrt();
            mean.push(mu);
            rstd.push(r);
            let ch0 = (gi % groups) * (c / groups);
            for (j, (&v, o)) in seg.iter().zip(&mut out[gi * glen..(gi + 1) * glen]).enumerate() {
                let ch = ch0 + j / spatial;
                *o = (v - mu) * r * gv[ch] + bv[ch];
            }
        }
        let out = Array::from_vec(&xs, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            rg,
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| shape_err("layer_norm", &xs, &[]))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm", &xs, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / c.max(1);
        let mut out = vec![T::ZERO; xv.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let inv = T::from_f64(1.0 / c as f64);
        for r in 0..rows {
            let seg = &xv[r * c..(r + 1) * c];
            let mu = seg.iter().copied().sum::<T>() * inv;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv;
            let rs = T::ONE / (var + T::from_f64(eps)).sqrt();
            mean.push(mu);
            rstd.push(rs);
            for j in 0..c {
                out[r * c + j] = (seg[j] - mu) * rs * gv[j] + bv[j];
            }
        }
        let out = Array::from_vec(&xs, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        )
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var, GradError> {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let rg = self.rg(x);
        self.push(v, Op::Swish(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, GradError> {
        let v = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| shape_err("softmax", &xs, &[]))?;
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(v, Op::Softmax(x), rg)
    }

    /// Replaces entries where `mask` is true with `fill`. `mask` is tiled
    /// over the leading elements of `x`, so its length must divide `x`'s.
    pub fn masked_fill(&mut self, x: Var, mask: Arc<Vec<bool>>, fill: T) -> Result<Var, GradError> {
        let n = self.value(x).len();
        if mask.is_empty() || n % mask.len() != 0 {
            return Err(shape_err("masked_fill", self.shape(x), &[mask.len()]));
        }
        let mut v = self.value(x).clone();
        let m = mask.len();
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            if mask[i % m] {
                *val = fill;
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::MaskedFill { x, mask }, rg)
    }

    /// Rows of `table: [V, D]` selected by `indices`, giving `[len, D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, GradError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err("embedding", &ts, &[indices.len()]));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(GradError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                bound: vocab,
            });
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let out = Array::from_vec(&[indices.len(), d], data)?;
        let rg = self.rg(table);
        self.push(
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Inverted dropout driven by `seed`; identity outside training mode.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var, GradError> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(GradError::InvalidArgument(format!("dropout rate {rate} must be < 1")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { T::ZERO } else { keep })
            .collect();
        let mut v = self.value(x).clone();
        for (a, &m) in v.data_mut().iter_mut().zip(&mask) {
            *a *= m;
        }
        let rg = self.rg(x);
        self.push(v, Op::Dropout { x, mask }, rg)
    }

    /// Mean cross-entropy of `logits: [N, V]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, GradError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() || ls[0] == 0 {
            return Err(shape_err("cross_entropy", &ls, &[targets.len()]));
        }
        let v = ls[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(GradError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                bound: v,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::ZERO;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let mx = row.iter().copied().fold(row[0], T::max);
            let lse = row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln() + mx;
            total += lse - row[t];
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let loss = total / T::from_f64(targets.len() as f64);
        let rg = self.rg(logits);
        self.push(
            Array::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, GradError> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| GradError::InvalidArgument("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Array::from_vec(&out_shape, data)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, GradError> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, GradError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(shape_err("mean", self.shape(x), &[]));
        }
        let s = self.value(x).data().iter().copied().sum::<T>() / T::from_f64(n as f64);
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::Mean(x), rg)
    }

    /// Passes the value through; contributes no gradient upstream.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var, GradError> {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// Forward value `to_value`, backward identity into `from`
    /// (`from + sg[to_value - from]`).
    pub fn straight_through(&mut self, from: Var, to_value: Array<T>) -> Result<Var, GradError> {
        if self.shape(from) != to_value.shape() {
            return Err(shape_err("straight_through", self.shape(from), to_value.shape()));
        }
        let rg = self.rg(from);
        self.push(to_value, Op::StraightThrough(from), rg)
    }

    /// Elementwise `f(x)` whose backward multiplies by `df(x)`.
    pub fn map_elementwise(&mut self, x: Var, f: ScalarFn<T>, df: ScalarFn<T>) -> Result<Var, GradError> {
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, Op::Elementwise { x, df }, rg)
    }

    /// Mean squared difference of two same-shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Reverse pass from a scalar `loss`; afterwards [`Graph::grad`] returns
    /// the derivative of `loss` with respect to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        if self.value(loss).len() != 1 {
            return Err(GradError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(Array::full(&shape, T::ONE));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad {
                Some(g.unwrap_or_else(|| Array::zeros(node.value.shape())))
            } else {
                None
            };
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) -> Result<(), GradError> {
        let node = &self.nodes[id];
        let mut acc = |v: Var, delta: Array<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    let shape = self.nodes[v.0].value.shape();
                    *slot = Some(delta.reshaped(shape).expect("gradient matches value size"));
                }
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, zip_arrays(g, vb, |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(*b, zip_arrays(g, va, |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(*a, g.map(|x| x * s));
            }
            Op::AddBias { x, bias, axis } => {
                acc(*x, g.clone());
                if self.rg(*bias) {
                    let xs = self.shape(*x);
                    let inner: usize = xs[axis + 1..].iter().product();
                    let n = xs[*axis];
                    let mut db = vec![T::ZERO; n];
                    for (i, &v) in g.data().iter().enumerate() {
                        db[(i / inner) % n] += v;
                    }
                    acc(*bias, Array::from_vec(&[n], db)?);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    // da = g [m,n] x b^T [n,k]
                    let mut da = Array::zeros(&[m, k]);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::ONE,
                        g.data(),
                        n as isize,
                        1,
                        self.value(*b).data(),
                        1,
                        n as isize,
                        T::ZERO,
                        da.data_mut(),
                        k as isize,
                        1,
                    );
                    acc(*a, da);
                }
                if self.rg(*b) {
                    // db = a^T [k,m] x g [m,n]
                    let mut db = Array::zeros(&[k, n]);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::ONE,
                        self.value(*a).data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::ZERO,
                        db.data_mut(),
                        n as isize,
                        1,
                    );
                    acc(*b, db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let gd = g.data();
                if self.rg(*a) {
                    let mut da = Array::zeros(&[bt, m, k]);
                    let bv = self.value(*b).data();
                    let dd = da.data_mut();
                    for i in 0..bt {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::ONE,
                            &gd[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            &bv[i * k * n..(i + 1) * k * n],
                            1,
                            n as isize,
                            T::ZERO,
                            &mut dd[i * m * k..(i + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = Array::zeros(&[bt, k, n]);
                    let av = self.value(*a).data();
                    let dd = db.data_mut();
                    for i in 0..bt {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::ONE,
                            &av[i * m * k..(i + 1) * m * k],
                            1,
                            k as isize,
                            &gd[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            T::ZERO,
                            &mut dd[i * k * n..(i + 1) * k * n],
                            n as isize,
                            1,
                        );
                    }
                    acc(*b, db);
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                acc(*x, permute_array(g, &inv));
            }
            Op::Reshape(x) => acc(*x, g.clone()),
            Op::Conv3d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, cin, cout) = (xs[0], xs[1], ws[0]);
                let (rows, plen, llen) = (geom.rows(), geom.small_len(), geom.large_len());
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gd = g.data();
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut dx = if need_x { Some(vec![T::ZERO; xv.len()]) } else { None };
                let mut dw = if need_w { Some(vec![T::ZERO; wv.len()]) } else { None };
                let chunk = chunk_samples(n, rows * plen, COL_BUDGET);
                let mut cols = vec![T::ZERO; rows * plen * chunk];
                let mut cols_t = vec![T::ZERO; if need_w { rows * plen * chunk } else { 0 }];
                let mut gch = vec![T::ZERO; cout * plen * chunk];
                for n0 in (0..n).step_by(chunk) {
                    let n1 = (n0 + chunk).min(n);
                    let width = (n1 - n0) * plen;
                    gather_samples(gd, n0, n1, cout, plen, &mut gch);
                    if let Some(dw) = dw.as_mut() {
                        for s in n0..n1 {
                            geom.im2col_at(&xv[s * cin * llen..(s + 1) * cin * llen], &mut cols, width, (s - n0) * plen);
                        }
                        transpose_into(&cols[..rows * width], rows, width, &mut cols_t);
                        // dW [cout, rows] += G [cout, width] x cols^T [width, rows]
                        T::gemm(
                            cout,
                            width,
                            rows,
                            T::ONE,
                            &gch,
                            width as isize,
                            1,
                            &cols_t,
                            rows as isize,
                            1,
                            T::ONE,
                            dw,
                            rows as isize,
                            1,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcols [rows, width] = W^T [rows, cout] x G [cout, width]
                        T::gemm(
                            rows,
                            cout,
                            width,
                            T::ONE,
                            wv,
                            1,
                            rows as isize,
                            &gch,
                            width as isize,
                            1,
                            T::ZERO,
                            &mut cols,
                            width as isize,
                            1,
                        );
                        for s in n0..n1 {
                            geom.col2im_at(&cols, width, (s - n0) * plen, &mut dx[s * cin * llen..(s + 1) * cin * llen]);
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(*x, Array::from_vec(xs, dx)?);
                }
                if let Some(dw) = dw {
                    acc(*w, Array::from_vec(ws, dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        acc(*b, channel_sums(gd, cout, plen));
                    }
                }
            }
            Op::ConvTranspose3d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, cin, cout) = (xs[0], xs[1], ws[1]);
                let (rows, plen, llen) = (geom.rows(), geom.small_len(), geom.large_len());
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gd = g.data();
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut dx = if need_x { Some(vec![T::ZERO; xv.len()]) } else { None };
                let mut dw = if need_w { Some(vec![T::ZERO; wv.len()]) } else { None };
                let chunk = chunk_samples(n, rows * plen, COL_BUDGET);
                let mut gcols = vec![T::ZERO; rows * plen * chunk];
                let mut gcols_t = vec![T::ZERO; if need_w { rows * plen * chunk } else { 0 }];
                let mut buf = vec![T::ZERO; cin * plen * chunk];
                for n0 in (0..n).step_by(chunk) {
                    let n1 = (n0 + chunk).min(n);
                    let width = (n1 - n0) * plen;
                    for s in n0..n1 {
                        geom.im2col_at(&gd[s * cout * llen..(s + 1) * cout * llen], &mut gcols, width, (s - n0) * plen);
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dX [cin, width] = W [cin, rows] x gcols [rows, width]
                        T::gemm(
                            cin,
                            rows,
                            width,
                            T::ONE,
                            wv,
                            rows as isize,
                            1,
                            &gcols,
                            width as isize,
                            1,
                            T::ZERO,
                            &mut buf,
                            width as isize,
                            1,
                        );
                        scatter_samples(&buf, n0, n1, cin, plen, dx, false);
                    }
                    if let Some(dw) = dw.as_mut() {
                        gather_samples(xv, n0, n1, cin, plen, &mut buf);
                        transpose_into(&gcols[..rows * width], rows, width, &mut gcols_t);
                        // dW [cin, rows] += X [cin, width] x gcols^T [width, rows]
                        T::gemm(
                            cin,
                            width,
                            rows,
                            T::ONE,
                            &buf,
                            width as isize,
                            1,
                            &gcols_t,
                            rows as isize,
                            1,
                            T::ONE,
                            dw,
                            rows as isize,
                            1,
                        );
                    }
                }
                if let Some(dx) = dx {
                    acc(*x, Array::from_vec(xs, dx)?);
                }
                if let Some(dw) = dw {
                    acc(*w, Array::from_vec(ws, dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        acc(*b, channel_sums(gd, cout, llen));
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let spatial: usize = xs[2..].iter().product();
                let cpg = c / groups;
                let glen = cpg * spatial;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let gd = g.data();
                let mut dx = vec![T::ZERO; xv.len()];
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                let m = T::from_f64(glen as f64);
                for gi in 0..mean.len() {
                    let (mu, r) = (mean[gi], rstd[gi]);
                    let ch0 = (gi % groups) * cpg;
                    let base = gi * glen;
                    let mut sum_dxhat = T::ZERO;
                    let mut sum_dxhat_xhat = T::ZERO;
                    for j in 0..glen {
                        let ch = ch0 + j / spatial;
                        let xhat = (xv[base + j] - mu) * r;
                        let dy = gd[base + j];
                        dgamma[ch] += dy * xhat;
                        dbeta[ch] += dy;
                        let dxhat = dy * gv[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..glen {
                        let ch = ch0 + j / spatial;
                        let xhat = (xv[base + j] - mu) * r;
                        let dxhat = gd[base + j] * gv[ch];
                        dx[base + j] = r / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                acc(*x, Array::from_vec(xs, dx)?);
                acc(*gamma, Array::from_vec(&[c], dgamma)?);
                acc(*beta, Array::from_vec(&[c], dbeta)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xs = self.shape(*x);
                let c = *xs.last().expect("checked in forward");
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let gd = g.data();
                let mut dx = vec![T::ZERO; xv.len()];
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                let m = T::from_f64(c as f64);
                for r in 0..mean.len() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let base = r * c;
                    let mut sum_dxhat = T::ZERO;
                    let mut sum_dxhat_xhat = T::ZERO;
                    for j in 0..c {
                        let xhat = (xv[base + j] - mu) * rs;
                        let dy = gd[base + j];
                        dgamma[j] += dy * xhat;
                        dbeta[j] += dy;
                        let dxhat = dy * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..c {
                        let xhat = (xv[base + j] - mu) * rs;
                        let dxhat = gd[base + j] * gv[j];
                        dx[base + j] = rs / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                acc(*x, Array::from_vec(xs, dx)?);
                acc(*gamma, Array::from_vec(&[c], dgamma)?);
                acc(*beta, Array::from_vec(&[c], dbeta)?);
            }
            Op::Swish(x) => {
                let d = zip_arrays(g, self.value(*x), |gv, a| {
                    let s = sigmoid(a);
                    gv * (s + a * s * (T::ONE - s))
                });
                acc(*x, d);
            }
            Op::Gelu(x) => {
                acc(*x, zip_arrays(g, self.value(*x), |gv, a| gv * gelu_grad(a)));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = *y.shape().last().expect("checked in forward");
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                acc(*x, d);
            }
            Op::MaskedFill { x, mask } => {
                let m = mask.len();
                let mut d = g.clone();
                for (i, v) in d.data_mut().iter_mut().enumerate() {
                    if mask[i % m] {
                        *v = T::ZERO;
                    }
                }
                acc(*x, d);
            }
            Op::Embedding { table, indices } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let mut dt = vec![T::ZERO; ts[0] * d];
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g.data()[row * d + j];
                    }
                }
                acc(*table, Array::from_vec(ts, dt)?);
            }
            Op::Dropout { x, mask } => {
                let mut d = g.clone();
                for (a, &m) in d.data_mut().iter_mut().zip(mask) {
                    *a *= m;
                }
                acc(*x, d);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let ls = self.shape(*logits);
                let v = ls[1];
                let scale = g.item() / T::from_f64(targets.len() as f64);
                let mut d = probs.clone();
                for (row, &t) in d.chunks_mut(v).zip(targets) {
                    row[t] -= T::ONE;
                    row.iter_mut().for_each(|z| *z *= scale);
                }
                acc(*logits, Array::from_vec(ls, d)?);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let vs = self.shape(v);
                    let chunk = vs[*axis] * inner;
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                        }
                        acc(v, Array::from_vec(vs, d)?);
                    }
                    offset += chunk;
                }
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                acc(*x, Array::full(s, g.item()));
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                let n = self.value(*x).len();
                acc(*x, Array::full(s, g.item() / T::from_f64(n as f64)));
            }
            Op::StraightThrough(from) => acc(*from, g.clone()),
            Op::Elementwise { x, df } => {
                let df = *df;
                acc(*x, zip_arrays(g, self.value(*x), |gv, a| gv * df(a)));
            }
        }
        Ok(())
    }
}

fn op_name<T: Real>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddBias { .. } => "add_bias",
        Op::MatMul(..) => "matmul",
        Op::BatchMatMul(..) => "batch_matmul",
        Op::Permute { .. } => "permute",
        Op::Reshape(..) => "reshape",
        Op::Conv3d { .. } => "conv3d",
        Op::ConvTranspose3d { .. } => "conv_transpose3d",
        Op::GroupNorm { .. } => "group_norm",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Swish(..) => "swish",
        Op::Gelu(..) => "gelu",
        Op::Softmax(..) => "softmax",
        Op::MaskedFill { .. } => "masked_fill",
        Op::Embedding { .. } => "embedding",
        Op::Dropout { .. } => "dropout",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Concat { .. } => "concat",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::StopGradient => "stop_gradient",
        Op::StraightThrough(..) => "straight_through",
        Op::Elementwise { .. } => "elementwise",
    }
}

fn zip_arrays<T: Real>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::from_vec(b.shape(), data).expect("same length")
}

fn channel_sums<T: Real>(g: &[T], channels: usize, plen: usize) -> Array<T> {
    let mut db = vec![T::ZERO; channels];
    for (i, chunk) in g.chunks(plen).enumerate() {
        db[i % channels] += chunk.iter().copied().sum::<T>();
    }
    Array::from_vec(&[channels], db).expect("channel count")
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let mx = row.iter().copied().fold(row[0], T::max);
    let mut total = T::ZERO;
    for z in row.iter_mut() {
        *z = (*z - mx).exp();
        total += *z;
    }
    for z in row.iter_mut() {
        *z /= total;
    }
}

fn permute_array<T: Real>(x: &Array<T>, perm: &[usize]) -> Array<T> {
    let shape = x.shape();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let src = x.data();
    let mut data = Vec::with_capacity(n);
    let nd = out_shape.len();
    if nd == 0 || n == 0 {
        return x.clone();
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let last = nd - 1;
    let (len_last, step_last) = (out_shape[last], step[last]);
    loop {
        for i in 0..len_last {
            data.push(src[off + i * step_last]);
        }
        // advance the odometer over all but the last axis
        let mut d = last;
        loop {
            if d == 0 {
                return Array::from_vec(&out_shape, data).expect("permutation preserves size");
            }
            d -= 1;
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> Array<f64> {
        Array::from_f64(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(arr(&[2], &[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn uniform_cross_entropy_is_log_vocab() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array::zeros(&[3, 7]));
        let l = g.cross_entropy(x, &[0, 4, 6]).unwrap();
        assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 27).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = g.constant(arr(&[1, 2, 3, 3, 3], &data));
        // 3x3x3 kernel with a single centered 1 per matching channel
        let mut w = vec![0.0; 2 * 2 * 27];
        w[13] = 1.0;
        w[3 * 27 + 13] = 1.0;
        let w = g.constant(arr(&[2, 2, 3, 3, 3], &w));
        let y = g.conv3d(x, w, None, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
        // 1x1x1 identity as well
        let w1 = g.constant(arr(&[2, 2, 1, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y1 = g.conv3d(x, w1, None, 1).unwrap();
        assert_eq!(g.value(y1).data(), &data[..]);
    }

    #[test]
    fn conv_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array::zeros(&[2, 3, 8, 8, 8]));
        let w = g.constant(Array::zeros(&[4, 3, 3, 3, 3]));
        let y = g.conv3d(x, w, None, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4, 4, 4]);
        let wt = g.constant(Array::zeros(&[4, 5, 4, 4, 4]));
        let z = g.conv_transpose3d(y, wt, None, 2).unwrap();
        assert_eq!(g.shape(z), &[2, 5, 8, 8, 8]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Array::zeros(&[2, 3]));
        let b = g.constant(Array::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Array::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn stop_gradient_freezes_factor() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Array::scalar(3.0));
        let s = g.stop_gradient(x).unwrap();
        let y = g.mul(s, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 3.0);
        assert_eq!(g.value(s).item(), 3.0);

        let mut g = Graph::<f64>::new();
        let x = g.input(Array::scalar(5.0));
        let sq = g.mul(x, x).unwrap();
        let s = g.stop_gradient(sq).unwrap();
        let y = g.sum(s).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
        assert!(g.grad(s).is_none());
    }

    #[test]
    fn straight_through_copies_gradient() {
        let mut g = Graph::<f64>::new();
        let z = g.input(arr(&[3], &[1.0, 2.0, 3.0]));
        let q = g.straight_through(z, arr(&[3], &[0.5, -1.0, 4.0])).unwrap();
        assert_eq!(g.value(q).data(), &[0.5, -1.0, 4.0]);
        let w = g.constant(arr(&[3], &[2.0, -3.0, 0.25]));
        let p = g.mul(q, w).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(z).unwrap().data(), g.grad(q).unwrap().data());
        assert_eq!(g.grad(z).unwrap().data(), &[2.0, -3.0, 0.25]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Array::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(GradError::NonScalarLoss(_))));
    }

    #[test]
    fn dropout_is_seeded_and_off_in_eval() {
        let mut g = Graph::<f64>::training();
        let x = g.constant(Array::full(&[64], 1.0));
        let a = g.dropout(x, 0.5, 7).unwrap();
        let b = g.dropout(x, 0.5, 7).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(g.value(a).data().iter().any(|&v| v == 0.0));
        let mut e = Graph::<f64>::new();
        let x = e.constant(Array::full(&[64], 1.0));
        let y = e.dropout(x, 0.5, 7).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = g.constant(arr(&[2, 3, 4], &data));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        assert_eq!(g.value(y).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z).data(), &data[..]);
    }

    #[test]
    fn check_finite_mode_rejects_nan() {
        let mut g = Graph::<f64>::new();
        g.set_check_finite(true);
        let x = g.constant(arr(&[1], &[f64::NAN]));
        assert!(matches!(g.scale(x, 2.0), Err(GradError::NonFinite { .. })));
    }

    /// Batches large enough to be split into several lowered GEMMs must
    /// agree with running every sample on its own.
    #[test]
    fn chunked_batches_match_single_samples() {
        let (n, c, e) = (3, 8, 16);
        let len = n * c * e * e * e;
        let x = Array::from_vec(&[n, c, e, e, e], (0..len).map(|i| ((i * 7919) % 23) as f64 / 23.0 - 0.5).collect()).unwrap();
        let w = Array::from_vec(&[4, c, 3, 3, 3], (0..4 * c * 27).map(|i| ((i * 31) % 17) as f64 / 17.0 - 0.5).collect()).unwrap();
        let wt = Array::from_vec(&[c, 4, 4, 4, 4], (0..c * 4 * 64).map(|i| ((i * 13) % 19) as f64 / 19.0 - 0.5).collect()).unwrap();
        assert!(super::chunk_samples(n, c * 27 * e * e * e, COL_BUDGET) < n);
        let run = |xv: Array<f64>| {
            let mut g = Graph::new();
            let xi = g.input(xv);
            let wi = g.input(w.clone());
            let ti = g.input(wt.clone());
            let y = g.conv3d(xi, wi, None, 1).unwrap();
            let z = g.conv_transpose3d(xi, ti, None, 2).unwrap();
            // squared outputs so per-sample gradients depend on the values
            let yy = g.mul(y, y).unwrap();
            let zz = g.mul(z, z).unwrap();
            let (a, b) = (g.sum(yy).unwrap(), g.sum(zz).unwrap());
            let l = g.add(a, b).unwrap();
            g.backward(l).unwrap();
            (g.value(y).clone(), g.value(z).clone(), g.grad(xi).unwrap().clone(), g.grad(wi).unwrap().clone(), g.grad(ti).unwrap().clone())
        };
        let (y, z, gx, gw, gt) = run(x.clone());
        let per = c * e * e * e;
        let mut gw_sum = vec![0.0; gw.len()];
        let mut gt_sum = vec![0.0; gt.len()];
        for s in 0..n {
            let xs = Array::from_vec(&[1, c, e, e, e], x.data()[s * per..(s + 1) * per].to_vec()).unwrap();
            let (ys, zs, gxs, gws, gts) = run(xs);
            let (ylen, zlen) = (ys.len(), zs.len());
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() <= 1e-9 * (1.0 + p.abs()));
            assert!(close(&y.data()[s * ylen..(s + 1) * ylen], ys.data()));
            assert!(close(&z.data()[s * zlen..(s + 1) * zlen], zs.data()));
            assert!(close(&gx.data()[s * per..(s + 1) * per], gxs.data()));
            gw_sum.iter_mut().zip(gws.data()).for_each(|(a, b)| *a += b);
            gt_sum.iter_mut().zip(gts.data()).for_each(|(a, b)| *a += b);
        }
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() <= 1e-9 * (1.0 + p.abs()));
        assert!(close(gw.data(), &gw_sum));
        assert!(close(gt.data(), &gt_sum));
    }
}
