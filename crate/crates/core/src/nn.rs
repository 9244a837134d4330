//! Dense layers with hand-written backward passes.
//!
//! Each layer's `forward` returns its output plus whatever the backward pass
//! needs; `backward` accumulates parameter gradients in place and returns the
//! gradient with respect to the layer input. Sequences are stored flattened:
//! a batch of `B` sequences of length `L` is a `[B·L × D]` matrix, and a
//! boolean `active` slice of length `B·L` marks real (non-pad) tokens.
//!
//! Everything is generic over [`Real`] so the finite-difference checker can
//! run the same code in `f64`; training runs in `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A learnable matrix and its gradient. Vectors are stored as `1 × n`.
///
/// Row-sparse parameters (embedding tables) remember which rows received
/// gradient so zeroing and optimizer updates only visit those rows.
#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Array2<F>,
    pub grad: Array2<F>,
    row_sparse: bool,
    touched: Vec<u32>,
}

impl<F: Real> Parameter<F> {
    pub fn new(name: impl Into<String>, value: Array2<F>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Parameter { name: name.into(), value, grad, row_sparse: false, touched: Vec::new() }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Array2::zeros((rows, cols)))
    }

    pub fn filled(name: impl Into<String>, rows: usize, cols: usize, v: F) -> Self {
        Self::new(name, Array2::from_elem((rows, cols), v))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(name: impl Into<String>, rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let v = Array2::from_shape_simple_fn((rows, cols), || F::of(rng.gen_range(-bound..=bound)));
        Self::new(name, v)
    }

    pub fn row_sparse(mut self) -> Self {
        self.row_sparse = true;
        self
    }

    pub fn is_row_sparse(&self) -> bool {
        self.row_sparse
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.row_sparse {
            for &r in &self.touched {
                self.grad.row_mut(r as usize).fill(F::zero());
            }
            self.touched.clear();
        } else {
            self.grad.fill(F::zero());
        }
    }

    pub fn accumulate_row(&mut self, row: usize, g: ArrayView1<F>) {
        self.grad.row_mut(row).zip_mut_with(&g, |a, &b| *a += b);
        if self.row_sparse {
            self.touched.push(row as u32);
        }
    }

    /// Rows that may carry nonzero gradient, sorted and deduplicated. All rows
    /// for dense parameters.
    pub fn active_rows(&mut self) -> Vec<u32> {
        if self.row_sparse {
            self.touched.sort_unstable();
            self.touched.dedup();
            self.touched.clone()
        } else {
            (0..self.value.nrows() as u32).collect()
        }
    }
}

fn shape_err(what: &str, got: &[usize], want: &[usize]) -> Error {
    Error::Shape(format!("{what}: got {got:?}, expected {want:?}"))
}

/// Row gather: row `i` is `table[ids[i]]`, or zero where `active[i]` is false.
pub fn embed_lookup<F: Real>(table: &Parameter<F>, ids: &[u32], active: &[bool]) -> Result<Array2<F>> {
    if ids.len() != active.len() {
        return Err(shape_err("embed_lookup mask", &[active.len()], &[ids.len()]));
    }
    let (rows, dim) = table.shape();
    let mut out = Array2::zeros((ids.len(), dim));
    for (i, (&id, &on)) in ids.iter().zip(active).enumerate() {
        if !on {
            continue;
        }
        if id as usize >= rows {
            return Err(Error::IdOutOfRange { kind: "embedding row", id: id as u64, count: rows as u64 });
        }
        out.row_mut(i).assign(&table.value.row(id as usize));
    }
    Ok(out)
}

pub fn embed_lookup_backward<F: Real>(table: &mut Parameter<F>, ids: &[u32], active: &[bool], dy: ArrayView2<F>) {
    for (i, (&id, &on)) in ids.iter().zip(active).enumerate() {
        if on {
            table.accumulate_row(id as usize, dy.row(i));
        }
    }
}

/// `y = x·W + b` with `W: [in × out]`, `b: [1 × out]`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Parameter<F>,
    pub bias: Parameter<F>,
}

impl<F: Real> Linear<F> {
    /// Kaiming-uniform with `a = √5`, i.e. `U(±1/√fan_in)` for weight and bias.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: Parameter::uniform(format!("{name}.weight"), fan_in, fan_out, bound, rng),
            bias: Parameter::uniform(format!("{name}.bias"), 1, fan_out, bound, rng),
        }
    }

    pub fn from_parts(weight: Parameter<F>, bias: Parameter<F>) -> Result<Self> {
        if bias.shape() != (1, weight.shape().1) {
            return Err(shape_err("linear bias", &[bias.shape().0, bias.shape().1], &[1, weight.shape().1]));
        }
        Ok(Linear { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape().0
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape().1
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        if x.ncols() != self.in_dim() {
            return Err(shape_err(&self.weight.name, &[x.nrows(), x.ncols()], &[x.nrows(), self.in_dim()]));
        }
        let mut y = x.dot(&self.weight.value);
        y += &self.bias.value;
        Ok(y)
    }

    pub fn backward(&mut self, x: ArrayView2<F>, dy: ArrayView2<F>) -> Array2<F> {
        general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut self.weight.grad);
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.value.t())
    }

    pub fn params(&self) -> [&Parameter<F>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter<F>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm<F> {
    pub gain: Parameter<F>,
    pub bias: Parameter<F>,
    eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: Parameter::filled(format!("{name}.gain"), 1, dim, F::one()),
            bias: Parameter::zeros(format!("{name}.bias"), 1, dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let d = F::of(x.ncols() as f64);
        let eps = F::of(self.eps);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|&v| v * v).sum::<F>() / d;
            *is = F::one() / (var + eps).sqrt();
            row *= *is;
        }
        let y = &xhat * &self.gain.value + &self.bias.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<F>, dy: ArrayView2<F>) -> Array2<F> {
        self.gain.grad += &(&dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d = F::of(dy.ncols() as f64);
        let mut dx = &dy * &self.gain.value;
        for ((mut row, xh), &is) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh).map(|(&g, &x)| g * x).sum::<F>() / d;
            Zip::from(&mut row).and(&xh).for_each(|g, &x| *g = (*g - mean_g - x * mean_gx) * is);
        }
        dx
    }

    pub fn params(&self) -> [&Parameter<F>; 2] {
        [&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter<F>; 2] {
        [&mut self.gain, &mut self.bias]
    }
}

/// Inverted dropout. The cached mask already carries the `1/(1-p)` scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability must be in [0, 1), got {p}")));
        }
        Ok(Dropout { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// `rng = None` is evaluation mode (identity).
    pub fn forward<F: Real>(&self, mut x: Array2<F>, rng: Option<&mut ChaCha8Rng>) -> (Array2<F>, Option<Array2<F>>) {
        match rng {
            Some(rng) if self.p > 0.0 => {
                let scale = F::of(1.0 / (1.0 - self.p));
                let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
                    if rng.gen::<f64>() < self.p { F::zero() } else { scale }
                });
                x *= &mask;
                (x, Some(mask))
            }
            _ => (x, None),
        }
    }

    pub fn backward<F: Real>(mask: Option<&Array2<F>>, dy: Array2<F>) -> Array2<F> {
        match mask {
            Some(m) => dy * m,
            None => dy,
        }
    }
}

pub fn dropout<F: Real>(x: Array2<F>, p: f64, training: bool, rng: &mut ChaCha8Rng) -> Result<Array2<F>> {
    let d = Dropout::new(p)?;
    Ok(d.forward(x, training.then_some(rng)).0)
}

/// FNV-1a over the on/off pattern of every non-smooth point the forward pass
/// went through (ReLU gates, L1 signs). The gradient checker skips
/// perturbations that change it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KinkSignature(pub u64);

impl Default for KinkSignature {
    fn default() -> Self {
        KinkSignature(0xcbf2_9ce4_8422_2325)
    }
}

impl KinkSignature {
    pub fn push(&mut self, bit: bool) {
        self.0 ^= bit as u64 + 1;
        self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
    }

    pub fn extend<'a, F: Real>(&mut self, values: impl IntoIterator<Item = &'a F>) {
        for v in values {
            self.push(*v > F::zero());
        }
    }
}

fn check_sequences(rows: usize, active: &[bool], seq_len: usize) -> Result<usize> {
    if seq_len == 0 || !rows.is_multiple_of(seq_len) {
        return Err(Error::Shape(format!("{rows} rows do not split into sequences of {seq_len}")));
    }
    if active.len() != rows {
        return Err(shape_err("mask", &[active.len()], &[rows]));
    }
    let b = rows / seq_len;
    for s in 0..b {
        if !active[s * seq_len..(s + 1) * seq_len].iter().any(|&a| a) {
            return Err(Error::AllMasked(s as u32));
        }
    }
    Ok(b)
}

/// Mean over the active rows of each sequence: `[B·L × D] → [B × D]`.
pub fn mean_pool<F: Real>(x: ArrayView2<F>, active: &[bool], seq_len: usize) -> Result<Array2<F>> {
    let b = check_sequences(x.nrows(), active, seq_len)?;
    let mut out = Array2::zeros((b, x.ncols()));
    for s in 0..b {
        let mut row = out.row_mut(s);
        let mut count = 0usize;
        for j in 0..seq_len {
            if active[s * seq_len + j] {
                row += &x.row(s * seq_len + j);
                count += 1;
            }
        }
        row /= F::of(count as f64);
    }
    Ok(out)
}

pub fn mean_pool_backward<F: Real>(dy: ArrayView2<F>, active: &[bool], seq_len: usize) -> Array2<F> {
    let b = dy.nrows();
    let mut dx = Array2::zeros((b * seq_len, dy.ncols()));
    for s in 0..b {
        let seq = &active[s * seq_len..(s + 1) * seq_len];
        let inv = F::one() / F::of(seq.iter().filter(|&&a| a).count() as f64);
        for (j, &on) in seq.iter().enumerate() {
            if on {
                dx.row_mut(s * seq_len + j).scaled_add(inv, &dy.row(s));
            }
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

/// Pre-norm transformer block:
/// `h = x + Attn(LN(x))`, `y = h + W₂·drop(ReLU(drop(W₁·LN(h))))` with
/// dropout also applied after `W₂`. Pad positions are excluded as keys.
#[derive(Clone, Debug)]
pub struct TransformerBlock<F> {
    pub ln1: LayerNorm<F>,
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub out: Linear<F>,
    pub ln2: LayerNorm<F>,
    pub ff1: Linear<F>,
    pub ff2: Linear<F>,
    heads: usize,
    dropout: Dropout,
}

#[derive(Clone, Debug)]
pub struct BlockCache<F> {
    seq_len: usize,
    active: Vec<bool>,
    a: Array2<F>,
    ln1: LayerNormCache<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// One `[L × L]` matrix per (sequence, head).
    probs: Vec<Array2<F>>,
    attn: Array2<F>,
    c: Array2<F>,
    ln2: LayerNormCache<F>,
    relu_out: Array2<F>,
    drop1: Option<Array2<F>>,
    drop2: Option<Array2<F>>,
}

impl<F: Real> BlockCache<F> {
    pub fn kinks(&self, sig: &mut KinkSignature) {
        sig.extend(self.relu_out.iter());
    }

    pub fn probs(&self) -> &[Array2<F>] {
        &self.probs
    }
}

impl<F: Real> TransformerBlock<F> {
    pub fn new(name: &str, dims: BlockDims, dropout: Dropout, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.heads == 0 || !dims.dim.is_multiple_of(dims.heads) {
            return Err(Error::InvalidArgument(format!(
                "hidden size {} is not divisible by {} heads",
                dims.dim, dims.heads
            )));
        }
        let d = dims.dim;
        Ok(TransformerBlock {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            query: Linear::new(&format!("{name}.query"), d, d, rng),
            key: Linear::new(&format!("{name}.key"), d, d, rng),
            value: Linear::new(&format!("{name}.value"), d, d, rng),
            out: Linear::new(&format!("{name}.out"), d, d, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            ff1: Linear::new(&format!("{name}.ff1"), d, dims.ff_dim, rng),
            ff2: Linear::new(&format!("{name}.ff2"), dims.ff_dim, d, rng),
            heads: dims.heads,
            dropout,
        })
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims { dim: self.query.in_dim(), heads: self.heads, ff_dim: self.ff1.out_dim() }
    }

    pub fn forward(
        &self,
        x: ArrayView2<F>,
        active: &[bool],
        seq_len: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<F>, BlockCache<F>)> {
        let b = check_sequences(x.nrows(), active, seq_len)?;
        let d = self.query.in_dim();
        if x.ncols() != d {
            return Err(shape_err("block input", &[x.nrows(), x.ncols()], &[x.nrows(), d]));
        }
        let dh = d / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let (a, ln1) = self.ln1.forward(x);
        let q = self.query.forward(a.view())?;
        let k = self.key.forward(a.view())?;
        let v = self.value.forward(a.view())?;
        let mut attn = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(b * self.heads);
        for s_i in 0..b {
            let rows = s_i * seq_len..(s_i + 1) * seq_len;
            let keys_on = &active[rows.clone()];
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = q.slice(s![rows.clone(), cols.clone()]);
                let ks = k.slice(s![rows.clone(), cols.clone()]);
                let vs = v.slice(s![rows.clone(), cols.clone()]);
                let mut p = qs.dot(&ks.t());
                for mut row in p.rows_mut() {
                    masked_softmax(row.as_slice_mut().unwrap(), keys_on, scale);
                }
                attn.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let z = self.out.forward(attn.view())?;
        let hidden = &x + &z;

        let (c, ln2) = self.ln2.forward(hidden.view());
        let f1 = self.ff1.forward(c.view())?;
        let (mut relu_out, drop1) = self.dropout.forward(f1, rng.as_deref_mut());
        relu_out.mapv_inplace(|v| v.max(F::zero()));
        let f2 = self.ff2.forward(relu_out.view())?;
        let (f2, drop2) = self.dropout.forward(f2, rng);
        let y = hidden + f2;
        let cache = BlockCache {
            seq_len,
            active: active.to_vec(),
            a,
            ln1,
            q,
            k,
            v,
            probs,
            attn,
            c,
            ln2,
            relu_out,
            drop1,
            drop2,
        };
        Ok((y, cache))
    }

    pub fn backward(&mut self, cache: &BlockCache<F>, dy: ArrayView2<F>) -> Array2<F> {
        let seq_len = cache.seq_len;
        let b = dy.nrows() / seq_len;
        let d = dy.ncols();
        let dh = d / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let df2 = Dropout::backward(cache.drop2.as_ref(), dy.to_owned());
        let mut dr = self.ff2.backward(cache.relu_out.view(), df2.view());
        Zip::from(&mut dr).and(&cache.relu_out).for_each(|g, &r| {
            if r <= F::zero() {
                *g = F::zero();
            }
        });
        let df1 = Dropout::backward(cache.drop1.as_ref(), dr);
        let dc = self.ff1.backward(cache.c.view(), df1.view());
        let mut dhidden = dy.to_owned();
        dhidden += &self.ln2.backward(&cache.ln2, dc.view());

        let dattn = self.out.backward(cache.attn.view(), dhidden.view());
        let mut dq = Array2::zeros(dy.raw_dim());
        let mut dk = Array2::zeros(dy.raw_dim());
        let mut dv = Array2::zeros(dy.raw_dim());
        for s_i in 0..b {
            let rows = s_i * seq_len..(s_i + 1) * seq_len;
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &cache.probs[s_i * self.heads + h];
                let d_o = dattn.slice(s![rows.clone(), cols.clone()]);
                let qs = cache.q.slice(s![rows.clone(), cols.clone()]);
                let ks = cache.k.slice(s![rows.clone(), cols.clone()]);
                let vs = cache.v.slice(s![rows.clone(), cols.clone()]);
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&d_o));
                let mut ds = d_o.dot(&vs.t());
                for (mut g, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: F = g.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    Zip::from(&mut g).and(&pr).for_each(|g, &p| *g = p * (*g - dot) * scale);
                }
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qs));
            }
        }
        let mut da = self.query.backward(cache.a.view(), dq.view());
        da += &self.key.backward(cache.a.view(), dk.view());
        da += &self.value.backward(cache.a.view(), dv.view());
        dhidden += &self.ln1.backward(&cache.ln1, da.view());
        debug_assert_eq!(cache.active.len(), dy.nrows());
        dhidden
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        let mut v = Vec::with_capacity(16);
        v.extend(self.ln1.params());
        v.extend(self.query.params());
        v.extend(self.key.params());
        v.extend(self.value.params());
        v.extend(self.out.params());
        v.extend(self.ln2.params());
        v.extend(self.ff1.params());
        v.extend(self.ff2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut v = Vec::with_capacity(16);
        v.extend(self.ln1.params_mut());
        v.extend(self.query.params_mut());
        v.extend(self.key.params_mut());
        v.extend(self.value.params_mut());
        v.extend(self.out.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.ff1.params_mut());
        v.extend(self.ff2.params_mut());
        v
    }
}

/// Softmax of `scale·row` over the active columns; inactive columns get 0.
fn masked_softmax<F: Real>(row: &mut [F], active: &[bool], scale: F) {
    let mut max = F::neg_infinity();
    for (v, &on) in row.iter_mut().zip(active) {
        *v *= scale;
        if on && *v > max {
            max = *v;
        }
    }
    let mut sum = F::zero();
    for (v, &on) in row.iter_mut().zip(active) {
        *v = if on { (*v - max).exp() } else { F::zero() };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
