//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] borrows a [`ParamStore`] read-only and records every operation
//! in execution order. [`Tape::backward`] replays the record in reverse and
//! returns a [`Gradients`] set that the caller folds into the store, so many
//! tapes can run against one frozen store concurrently.

use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, dot, log_softmax_slice, sigmoid, softmax_slice, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named value with a same-shaped gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn grad_norm(&self) -> T {
        self.params
            .iter()
            .map(|p| p.grad.sum_squares())
            .sum::<T>()
            .sqrt()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-parameter gradients produced by one reverse pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(num_params: usize) -> Self {
        Gradients {
            slots: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    /// Adds `other` into `self` slot by slot.
    pub fn merge(&mut self, other: &Gradients<T>) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.slots.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Adds every slot into the matching parameter's accumulator.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (i, slot) in self.slots.iter().enumerate() {
            if let Some(g) = slot {
                store.params[i].grad.add_assign(g);
            }
        }
    }

    fn add_to(&mut self, id: ParamId, shape: &[usize], grad: Vec<T>) {
        match &mut self.slots[id.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape.to_vec(), grad).expect("gradient shape"));
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    /// Concatenation or stacking along axis 0.
    Join(Vec<Var>),
    /// Contiguous block of axis-0 slabs.
    Rows { src: Var, start: usize },
    Softmax(Var),
    LogSoftmax(Var),
    Pick { src: Var, index: usize },
    Sum(Var),
    MaskMul { src: Var, mask: Vec<T> },
}

#[derive(Debug)]
enum Storage<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    storage: Storage<T>,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
pub struct Tape<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].storage {
            Storage::Owned(t) => t,
            Storage::Param(id) => &self.store.get(*id).value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            op,
            storage: Storage::Owned(value),
            requires_grad,
        });
        id
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf for a model parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            storage: Storage::Param(id),
            requires_grad: true,
        });
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = tensor::matmul_forward(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(shape, data)?, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[m, n] = t.shape() else {
            return Err(Error::shape("transpose", t.shape(), &[]));
        };
        let src = t.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), Tensor::new(vec![n, m], out)?, rg))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    /// Elementwise sum of same-shaped inputs.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Domain("add_n of no inputs".into()))?;
        let mut acc = self.value(first).clone();
        for &x in &xs[1..] {
            let t = self.value(x);
            if t.shape() != acc.shape() {
                return Err(Error::shape("add_n", acc.shape(), t.shape()));
            }
            acc.add_assign(t);
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Op::AddN(xs.to_vec()), acc, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(Op::Scale(a, factor), out, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, T::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), out, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), out, rg)
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Domain("concat of no inputs".into()))?;
        let head = self.value(first).shape();
        if head.is_empty() {
            return Err(Error::shape("concat", head, &[]));
        }
        let tail = head[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(Error::shape("concat", self.value(first).shape(), t.shape()));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Op::Join(xs.to_vec()), Tensor::new(shape, data)?, rg))
    }

    /// Stacks same-shaped inputs into a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Domain("stack of no inputs".into()))?;
        let inner = self.value(first).shape().to_vec();
        let mut data = Vec::with_capacity(xs.len() * self.value(first).len());
        for &x in xs {
            let t = self.value(x);
            if t.shape() != inner.as_slice() {
                return Err(Error::shape("stack", &inner, t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&inner);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Op::Join(xs.to_vec()), Tensor::new(shape, data)?, rg))
    }

    /// Axis-0 slabs `start..start + len`, keeping the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 || len == 0 || start + len > t.shape()[0] {
            return Err(Error::shape("slice", t.shape(), &[start, len]));
        }
        let w = t.row_len();
        let data = t.data()[start * w..(start + len) * w].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let rg = self.rg(a);
        Ok(self.push(Op::Rows { src: a, start }, Tensor::new(shape, data)?, rg))
    }

    /// Axis-0 slab `index` with the leading axis dropped (embedding lookup).
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() < 2 || index >= t.shape()[0] {
            return Err(Error::Data(format!(
                "row {index} out of range for shape {:?}",
                t.shape()
            )));
        }
        let data = t.row(index).to_vec();
        let shape = t.shape()[1..].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Rows { src: a, start: index }, Tensor::new(shape, data)?, rg))
    }

    fn expect_vector(&self, a: Var, op: &'static str) -> Result<()> {
        if self.value(a).rank() != 1 {
            return Err(Error::Domain(format!(
                "{op} expects a vector, got shape {:?}",
                self.shape(a)
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.expect_vector(a, "softmax")?;
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), softmax_slice(t.data()))?;
        let rg = self.rg(a);
        Ok(self.push(Op::Softmax(a), out, rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.expect_vector(a, "log_softmax")?;
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), log_softmax_slice(t.data()))?;
        let rg = self.rg(a);
        Ok(self.push(Op::LogSoftmax(a), out, rg))
    }

    /// Single element of a vector as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        self.expect_vector(a, "pick")?;
        let t = self.value(a);
        let v = *t.data().get(index).ok_or_else(|| {
            Error::Data(format!("index {index} out of range for length {}", t.len()))
        })?;
        let rg = self.rg(a);
        Ok(self.push(Op::Pick { src: a, index }, Tensor::scalar(v), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// Inverted dropout. With no generator (inference) or a zero rate this
    /// returns `a` itself.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
        check_rate(rate)?;
        let Some(rng) = rng else { return Ok(a) };
        if rate == 0.0 {
            return Ok(a);
        }
        let mask = dropout_mask::<T>(self.value(a).len(), rate, rng);
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::MaskMul { src: a, mask }, out, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut out = Gradients::empty(self.store.len());
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Storage::Param(id) = node.storage {
                        out.add_to(id, self.value(Var(i)).shape(), g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = tensor::matmul_dims(ta.shape(), tb.shape())?;
                    if self.rg(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        let bd = tb.data();
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            let garow = &mut ga[r * k..(r + 1) * k];
                            if n == 1 {
                                let gr = grow[0];
                                for (x, &bv) in garow.iter_mut().zip(bd) {
                                    *x += gr * bv;
                                }
                            } else {
                                for (p, x) in garow.iter_mut().enumerate() {
                                    *x += dot(grow, &bd[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                    if self.rg(*b) {
                        let gb = slot(&mut grads, *b, k * n);
                        let ad = ta.data();
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            let arow = &ad[r * k..(r + 1) * k];
                            if n == 1 {
                                let gr = grow[0];
                                for (x, &av) in gb.iter_mut().zip(arow) {
                                    *x += gr * av;
                                }
                                continue;
                            }
                            for (p, &av) in arow.iter().enumerate() {
                                if av == T::zero() {
                                    continue;
                                }
                                let gbrow = &mut gb[p * n..(p + 1) * n];
                                for (x, &gv) in gbrow.iter_mut().zip(grow) {
                                    *x += av * gv;
                                }
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let &[m, n] = self.value(*a).shape() else {
                        unreachable!()
                    };
                    let ga = slot(&mut grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for x in [*a, *b] {
                        if self.rg(x) {
                            add_into(slot(&mut grads, x, g.len()), &g);
                        }
                    }
                }
                Op::AddN(xs) => {
                    for &x in xs {
                        if self.rg(x) {
                            add_into(slot(&mut grads, x, g.len()), &g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let other = self.value(*b).data();
                        let ga = slot(&mut grads, *a, g.len());
                        for ((x, &gv), &o) in ga.iter_mut().zip(&g).zip(other) {
                            *x += gv * o;
                        }
                    }
                    if self.rg(*b) {
                        let other = self.value(*a).data();
                        let gb = slot(&mut grads, *b, g.len());
                        for ((x, &gv), &o) in gb.iter_mut().zip(&g).zip(other) {
                            *x += gv * o;
                        }
                    }
                }
                Op::Scale(a, factor) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for (x, &gv) in ga.iter_mut().zip(&g) {
                        *x += gv * *factor;
                    }
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(i)).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((x, &gv), &yv) in ga.iter_mut().zip(&g).zip(y) {
                        *x += gv * (T::one() - yv * yv);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(i)).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((x, &gv), &yv) in ga.iter_mut().zip(&g).zip(y) {
                        *x += gv * yv * (T::one() - yv);
                    }
                }
                Op::Join(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let n = self.value(x).len();
                        if self.rg(x) {
                            add_into(slot(&mut grads, x, n), &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::Rows { src, start } => {
                    let t = self.value(*src);
                    let w = t.row_len();
                    let total = t.len();
                    let gs = slot(&mut grads, *src, total);
                    add_into(&mut gs[start * w..start * w + g.len()], &g);
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i)).data();
                    let gy = dot(&g, y);
                    let ga = slot(&mut grads, *a, g.len());
                    for ((x, &gv), &yv) in ga.iter_mut().zip(&g).zip(y) {
                        *x += yv * (gv - gy);
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = self.value(Var(i)).data();
                    let gsum: T = g.iter().copied().sum();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((x, &gv), &yv) in ga.iter_mut().zip(&g).zip(y) {
                        *x += gv - yv.exp() * gsum;
                    }
                }
                Op::Pick { src, index } => {
                    let n = self.value(*src).len();
                    slot(&mut grads, *src, n)[*index] += g[0];
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let ga = slot(&mut grads, *a, n);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
                Op::MaskMul { src, mask } => {
                    let gs = slot(&mut grads, *src, g.len());
                    for ((x, &gv), &m) in gs.iter_mut().zip(&g).zip(mask) {
                        *x += gv * m;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

fn dropout_mask<T: Scalar>(n: usize, rate: f64, rng: &mut Rng) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

/// Dropout applied on the vertical (non-recurrent) connections of a forward
/// pass. Inference contexts carry no generator and are the identity.
pub struct DropoutCtx {
    rate: f64,
    rng: Option<Rng>,
}

impl DropoutCtx {
    pub fn inference() -> Self {
        DropoutCtx { rate: 0.0, rng: None }
    }

    pub fn training(rate: f64, rng: Rng) -> Result<Self> {
        check_rate(rate)?;
        Ok(DropoutCtx {
            rate,
            rng: Some(rng),
        })
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<'_, T>, v: Var) -> Result<Var> {
        tape.dropout(v, self.rate, self.rng.as_mut())
    }
}

/// Inverted dropout on a plain tensor. Inference mode is the identity.
pub fn dropout<T: Scalar>(t: &Tensor<T>, rate: f64, training: bool, seed: u64) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(t.clone());
    }
    let mut rng = crate::rng::stream(seed, &[crate::rng::DROPOUT]);
    let mask = dropout_mask::<T>(t.len(), rate, &mut rng);
    let data = t.data().iter().zip(mask).map(|(&x, m)| x * m).collect();
    Tensor::new(t.shape().to_vec(), data)
}
