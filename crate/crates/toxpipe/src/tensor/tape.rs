//! Operation tape: forward ops record closures that are replayed in exact
//! reverse order by [`Tape::backward`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::registry::ParamRegistry;
use super::{TensorData, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Storage<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

type BackFn<'p> = Box<dyn FnOnce(&[Node<'p>], &[f64], &mut [Option<Vec<f64>>]) + 'p>;

struct Node<'p> {
    shape: Vec<usize>,
    store: Storage<'p>,
    requires: bool,
    param: Option<usize>,
    back: Option<BackFn<'p>>,
}

impl<'p> Node<'p> {
    fn data(&self) -> &[f64] {
        match &self.store {
            Storage::Owned(v) => v,
            Storage::Borrowed(s) => s,
        }
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Accumulation target for a node's gradient; `None` when the node does not
/// require gradients.
fn sink<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node<'_>],
    id: usize,
) -> Option<&'g mut [f64]> {
    if !nodes[id].requires {
        return None;
    }
    let len = nodes[id].numel();
    Some(
        grads[id]
            .get_or_insert_with(|| vec![0.0; len])
            .as_mut_slice(),
    )
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
    spent: bool,
}

impl<'p> Default for Tape<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            spent: false,
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires: bool,
        back: Option<BackFn<'p>>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            store: Storage::Owned(data),
            requires,
            param: None,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input (ids, masks, labels, constants).
    pub fn constant(&mut self, value: TensorData) -> Var {
        self.push(value.shape, value.data, false, None)
    }

    /// Free-standing differentiable leaf; gradients are readable through
    /// [`Tape::grad`] after backward.
    pub fn leaf(&mut self, value: TensorData) -> Var {
        self.push(value.shape, value.data, true, None)
    }

    /// Binds a registry parameter without copying its values. With
    /// `requires` false the parameter acts as a constant (evaluation mode).
    pub fn param(&mut self, registry: &'p ParamRegistry, index: usize, requires: bool) -> Var {
        self.nodes.push(Node {
            shape: registry.shape(index).to_vec(),
            store: Storage::Borrowed(registry.values(index)),
            requires,
            param: Some(index),
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].data()
    }

    /// Gradient of the latest backward pass, if the node required one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    // -- primitive operations ------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (asha, bsha) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asha.len() != 2 || bsha.len() != 2 || asha[1] != bsha[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: asha,
                right: bsha,
            });
        }
        let (m, k, n) = (asha[0], asha[1], bsha[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);

        let requires = self.requires(a) || self.requires(b);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let (ai, bi) = (a.0, b.0);
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    let bv = nodes[bi].data();
                    if let Some(da) = sink(grads, nodes, ai) {
                        for i in 0..m {
                            let dyrow = &dy[i * n..i * n + n];
                            for p in 0..k {
                                let brow = &bv[p * n..p * n + n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += dyrow[j] * brow[j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    }
                    let av = nodes[ai].data();
                    if let Some(db) = sink(grads, nodes, bi) {
                        for i in 0..m {
                            let dyrow = &dy[i * n..i * n + n];
                            for p in 0..k {
                                let aval = av[i * k + p];
                                if aval == 0.0 {
                                    continue;
                                }
                                let dbrow = &mut db[p * n..p * n + n];
                                for j in 0..n {
                                    dbrow[j] += aval * dyrow[j];
                                }
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(vec![m, n], out, requires, back))
    }

    /// Batched `[g,p,q] x [g,q,r] -> [g,p,r]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (asha, bsha) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asha.len() != 3 || bsha.len() != 3 || asha[0] != bsha[0] || asha[2] != bsha[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                left: asha,
                right: bsha,
            });
        }
        let (g, p, q, r) = (asha[0], asha[1], asha[2], bsha[2]);
        let mut out = vec![0.0; g * p * r];
        for batch in 0..g {
            matmul_into(
                &self.value(a)[batch * p * q..(batch + 1) * p * q],
                &self.value(b)[batch * q * r..(batch + 1) * q * r],
                p,
                q,
                r,
                &mut out[batch * p * r..(batch + 1) * p * r],
            );
        }

        let requires = self.requires(a) || self.requires(b);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let (ai, bi) = (a.0, b.0);
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    let bv = nodes[bi].data();
                    if let Some(da) = sink(grads, nodes, ai) {
                        for batch in 0..g {
                            let dyb = &dy[batch * p * r..(batch + 1) * p * r];
                            let bb = &bv[batch * q * r..(batch + 1) * q * r];
                            let dab = &mut da[batch * p * q..(batch + 1) * p * q];
                            for i in 0..p {
                                for s in 0..q {
                                    let brow = &bb[s * r..s * r + r];
                                    let dyrow = &dyb[i * r..i * r + r];
                                    let mut acc = 0.0;
                                    for j in 0..r {
                                        acc += dyrow[j] * brow[j];
                                    }
                                    dab[i * q + s] += acc;
                                }
                            }
                        }
                    }
                    let av = nodes[ai].data();
                    if let Some(db) = sink(grads, nodes, bi) {
                        for batch in 0..g {
                            let dyb = &dy[batch * p * r..(batch + 1) * p * r];
                            let ab = &av[batch * p * q..(batch + 1) * p * q];
                            let dbb = &mut db[batch * q * r..(batch + 1) * q * r];
                            for i in 0..p {
                                let dyrow = &dyb[i * r..i * r + r];
                                for s in 0..q {
                                    let aval = ab[i * q + s];
                                    if aval == 0.0 {
                                        continue;
                                    }
                                    let dbrow = &mut dbb[s * r..s * r + r];
                                    for j in 0..r {
                                        dbrow[j] += aval * dyrow[j];
                                    }
                                }
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(vec![g, p, r], out, requires, back))
    }

    /// Batched product with the second operand transposed:
    /// `[g,p,q] x [g,r,q] -> [g,p,r]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (asha, bsha) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asha.len() != 3 || bsha.len() != 3 || asha[0] != bsha[0] || asha[2] != bsha[2] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm_nt",
                left: asha,
                right: bsha,
            });
        }
        let (g, p, q, r) = (asha[0], asha[1], asha[2], bsha[1]);
        let mut out = vec![0.0; g * p * r];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for batch in 0..g {
                let ab = &av[batch * p * q..(batch + 1) * p * q];
                let bb = &bv[batch * r * q..(batch + 1) * r * q];
                let ob = &mut out[batch * p * r..(batch + 1) * p * r];
                for i in 0..p {
                    let arow = &ab[i * q..i * q + q];
                    for j in 0..r {
                        let brow = &bb[j * q..j * q + q];
                        let mut acc = 0.0;
                        for s in 0..q {
                            acc += arow[s] * brow[s];
                        }
                        ob[i * r + j] = acc;
                    }
                }
            }
        }

        let requires = self.requires(a) || self.requires(b);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let (ai, bi) = (a.0, b.0);
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    let bv = nodes[bi].data();
                    if let Some(da) = sink(grads, nodes, ai) {
                        // dA[i,s] += sum_j dY[i,j] * B[j,s]
                        for batch in 0..g {
                            let dyb = &dy[batch * p * r..(batch + 1) * p * r];
                            let bb = &bv[batch * r * q..(batch + 1) * r * q];
                            let dab = &mut da[batch * p * q..(batch + 1) * p * q];
                            for i in 0..p {
                                let dyrow = &dyb[i * r..i * r + r];
                                for j in 0..r {
                                    let dval = dyrow[j];
                                    if dval == 0.0 {
                                        continue;
                                    }
                                    let brow = &bb[j * q..j * q + q];
                                    let darow = &mut dab[i * q..i * q + q];
                                    for s in 0..q {
                                        darow[s] += dval * brow[s];
                                    }
                                }
                            }
                        }
                    }
                    let av = nodes[ai].data();
                    if let Some(db) = sink(grads, nodes, bi) {
                        // dB[j,s] += sum_i dY[i,j] * A[i,s]
                        for batch in 0..g {
                            let dyb = &dy[batch * p * r..(batch + 1) * p * r];
                            let ab = &av[batch * p * q..(batch + 1) * p * q];
                            let dbb = &mut db[batch * r * q..(batch + 1) * r * q];
                            for i in 0..p {
                                let dyrow = &dyb[i * r..i * r + r];
                                let arow = &ab[i * q..i * q + q];
                                for j in 0..r {
                                    let dval = dyrow[j];
                                    if dval == 0.0 {
                                        continue;
                                    }
                                    let dbrow = &mut dbb[j * q..j * q + q];
                                    for s in 0..q {
                                        dbrow[s] += dval * arow[s];
                                    }
                                }
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(vec![g, p, r], out, requires, back))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let requires = self.requires(a) || self.requires(b);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let (ai, bi) = (a.0, b.0);
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    for id in [ai, bi] {
                        if let Some(dx) = sink(grads, nodes, id) {
                            for (g, d) in dx.iter_mut().zip(dy) {
                                *g += d;
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(self.shape(a).to_vec(), out, requires, back))
    }

    /// Adds `b` to `x` with `b`'s shape broadcast over the leading axes of
    /// `x` (`b.shape` must be a suffix of `x.shape`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (xsha, bsha) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if bsha.len() >= xsha.len() || !xsha.ends_with(&bsha) {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: xsha,
                right: bsha,
            });
        }
        let blen: usize = bsha.iter().product();
        let repeats = self.nodes[x.0].numel() / blen;
        let bv = self.value(b);
        let mut out = Vec::with_capacity(repeats * blen);
        for chunk in self.value(x).chunks(blen) {
            out.extend(chunk.iter().zip(bv).map(|(u, v)| u + v));
        }
        let requires = self.requires(x) || self.requires(b);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let (xi, bi) = (x.0, b.0);
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for (g, d) in dx.iter_mut().zip(dy) {
                            *g += d;
                        }
                    }
                    if let Some(db) = sink(grads, nodes, bi) {
                        for chunk in dy.chunks(blen) {
                            for (g, d) in db.iter_mut().zip(chunk) {
                                *g += d;
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(xsha, out, requires, back))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let requires = self.requires(a) || self.requires(b);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let (ai, bi) = (a.0, b.0);
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    {
                        let bv = nodes[bi].data();
                        if let Some(da) = sink(grads, nodes, ai) {
                            for ((g, d), v) in da.iter_mut().zip(dy).zip(bv) {
                                *g += d * v;
                            }
                        }
                    }
                    let av = nodes[ai].data();
                    if let Some(db) = sink(grads, nodes, bi) {
                        for ((g, d), v) in db.iter_mut().zip(dy).zip(av) {
                            *g += d * v;
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(self.shape(a).to_vec(), out, requires, back))
    }

    /// Scales each last-axis row `r` of `x` by `c[r]`; `c.shape` equals the
    /// leading axes of `x`.
    pub fn scale_rows(&mut self, x: Var, c: Var) -> Result<Var, TensorError> {
        let (xsha, csha) = (self.shape(x).to_vec(), self.shape(c).to_vec());
        if xsha.len() < 2 || csha != xsha[..xsha.len() - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                left: xsha,
                right: csha,
            });
        }
        let width = *xsha.last().unwrap();
        let rows = self.nodes[x.0].numel() / width;
        let cv = self.value(c);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            let factor = cv[r];
            out.extend(xv[r * width..(r + 1) * width].iter().map(|v| v * factor));
        }
        let requires = self.requires(x) || self.requires(c);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let (xi, ci) = (x.0, c.0);
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    {
                        let cv = nodes[ci].data();
                        if let Some(dx) = sink(grads, nodes, xi) {
                            for r in 0..rows {
                                let factor = cv[r];
                                for j in 0..width {
                                    dx[r * width + j] += dy[r * width + j] * factor;
                                }
                            }
                        }
                    }
                    let xv = nodes[xi].data();
                    if let Some(dc) = sink(grads, nodes, ci) {
                        for r in 0..rows {
                            let mut acc = 0.0;
                            for j in 0..width {
                                acc += dy[r * width + j] * xv[r * width + j];
                            }
                            dc[r] += acc;
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(xsha, out, requires, back))
    }

    /// `y = mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| mul * v + add).collect();
        let requires = self.requires(x);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let xi = x.0;
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for (g, d) in dx.iter_mut().zip(dy) {
                            *g += mul * d;
                        }
                    }
                },
            ) as BackFn<'p>
        });
        self.push(self.shape(x).to_vec(), out, requires, back)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.unary_from_output(x, out, |y, dy| y * (1.0 - y) * dy)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.tanh()).collect();
        self.unary_from_output(x, out, |y, dy| (1.0 - y * y) * dy)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let requires = self.requires(x);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let xi = x.0;
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    let xv = nodes[xi].data();
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for i in 0..dx.len() {
                            if xv[i] > 0.0 {
                                dx[i] += dy[i];
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        self.push(self.shape(x).to_vec(), out, requires, back)
    }

    /// Unary op whose derivative is a function of the output value.
    fn unary_from_output(&mut self, x: Var, out: Vec<f64>, dfn: fn(f64, f64) -> f64) -> Var {
        let requires = self.requires(x);
        let shape = self.shape(x).to_vec();
        let id = self.push(shape, out, requires, None);
        if requires {
            let (xi, yi) = (x.0, id.0);
            self.nodes[id.0].back = Some(Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    let yv = nodes[yi].data();
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for i in 0..dx.len() {
                            dx[i] += dfn(yv[i], dy[i]);
                        }
                    }
                },
            ));
        }
        id
    }

    /// Softmax over the last axis restricted to positions where `mask` is 1.
    /// Masked positions get weight exactly 0; a fully masked row is an
    /// error.
    pub fn masked_softmax(&mut self, x: Var, mask: Vec<u8>) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let numel = self.nodes[x.0].numel();
        if mask.len() != numel {
            return Err(TensorError::Invalid {
                op: "masked_softmax",
                reason: format!("mask has {} entries for {} values", mask.len(), numel),
            });
        }
        let width = *shape.last().ok_or(TensorError::BadRank {
            op: "masked_softmax",
            expected: 1,
            shape: shape.clone(),
        })?;
        let rows = numel / width;
        let xv = self.value(x);
        let mut out = vec![0.0; numel];
        for r in 0..rows {
            let base = r * width;
            let mut max = f64::NEG_INFINITY;
            for j in 0..width {
                if mask[base + j] == 1 {
                    max = max.max(xv[base + j]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::AllMasked {
                    op: "masked_softmax",
                    row: r,
                });
            }
            let mut sum = 0.0;
            for j in 0..width {
                if mask[base + j] == 1 {
                    let e = (xv[base + j] - max).exp();
                    out[base + j] = e;
                    sum += e;
                }
            }
            for j in 0..width {
                if mask[base + j] == 1 {
                    out[base + j] /= sum;
                }
            }
        }

        let requires = self.requires(x);
        let shape_out = shape.clone();
        let id = self.push(shape_out, out, requires, None);
        if requires {
            let (xi, yi) = (x.0, id.0);
            self.nodes[id.0].back = Some(Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    let yv = nodes[yi].data();
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for r in 0..rows {
                            let base = r * width;
                            let mut dot = 0.0;
                            for j in 0..width {
                                if mask[base + j] == 1 {
                                    dot += dy[base + j] * yv[base + j];
                                }
                            }
                            for j in 0..width {
                                if mask[base + j] == 1 {
                                    dx[base + j] += yv[base + j] * (dy[base + j] - dot);
                                }
                            }
                        }
                    }
                },
            ));
        }
        Ok(id)
    }

    /// Inverted-scaling dropout: keeps each element with probability
    /// `1 - p` and scales kept elements by `1/(1-p)`. `p = 0` is the
    /// identity. Evaluation-mode callers simply skip this op.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                reason: format!("probability {p} is outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let factors: Vec<f64> = self
            .value(x)
            .iter()
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .zip(&factors)
            .map(|(v, f)| v * f)
            .collect();
        let requires = self.requires(x);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let xi = x.0;
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for i in 0..dx.len() {
                            dx[i] += dy[i] * factors[i];
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(self.shape(x).to_vec(), out, requires, back))
    }

    /// Gathers rows of a `[v,e]` table: output shape is `lead_shape ++ [e]`.
    pub fn embedding_lookup(
        &mut self,
        table: Var,
        ids: &[u32],
        lead_shape: &[usize],
    ) -> Result<Var, TensorError> {
        let tsha = self.shape(table).to_vec();
        if tsha.len() != 2 {
            return Err(TensorError::BadRank {
                op: "embedding_lookup",
                expected: 2,
                shape: tsha,
            });
        }
        let (rows, width) = (tsha[0], tsha[1]);
        if ids.len() != lead_shape.iter().product::<usize>() {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                reason: format!("{} ids do not fill shape {lead_shape:?}", ids.len()),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= rows) {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                reason: format!("id {bad} is outside the table of {rows} rows"),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            let start = id as usize * width;
            out.extend_from_slice(&tv[start..start + width]);
        }
        let mut shape = lead_shape.to_vec();
        shape.push(width);

        let requires = self.requires(table);
        let owned_ids: Vec<u32> = ids.to_vec();
        let back: Option<BackFn<'p>> = requires.then(|| {
            let ti = table.0;
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    if let Some(dt) = sink(grads, nodes, ti) {
                        for (k, &id) in owned_ids.iter().enumerate() {
                            let dst = id as usize * width;
                            let src = k * width;
                            for j in 0..width {
                                dt[dst + j] += dy[src + j];
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(shape, out, requires, back))
    }

    /// Per-feature maximum over unmasked time steps: `[b,t,h]` with a
    /// `[b*t]` mask to `[b,h]`. Gradient flows to the earliest position
    /// attaining the maximum.
    pub fn max_over_time(&mut self, x: Var, mask: &[u8]) -> Result<Var, TensorError> {
        let (b, t, h) = self.time_pool_dims(x, mask, "max_over_time")?;
        let xv = self.value(x);
        let mut out = vec![0.0; b * h];
        let mut arg = vec![0usize; b * h];
        for row in 0..b {
            let mut any = false;
            for step in 0..t {
                if mask[row * t + step] != 1 {
                    continue;
                }
                for j in 0..h {
                    let v = xv[(row * t + step) * h + j];
                    if !any || v > out[row * h + j] {
                        out[row * h + j] = v;
                        arg[row * h + j] = step;
                    }
                }
                any = true;
            }
            if !any {
                return Err(TensorError::AllMasked {
                    op: "max_over_time",
                    row,
                });
            }
        }
        let requires = self.requires(x);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let xi = x.0;
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for row in 0..b {
                            for j in 0..h {
                                let step = arg[row * h + j];
                                dx[(row * t + step) * h + j] += dy[row * h + j];
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(vec![b, h], out, requires, back))
    }

    /// Mean over unmasked time steps, dividing by the true count rather
    /// than the padded length.
    pub fn mean_over_time(&mut self, x: Var, mask: &[u8]) -> Result<Var, TensorError> {
        let (b, t, h) = self.time_pool_dims(x, mask, "mean_over_time")?;
        let xv = self.value(x);
        let mut counts = vec![0usize; b];
        for row in 0..b {
            counts[row] = mask[row * t..(row + 1) * t]
                .iter()
                .filter(|&&m| m == 1)
                .count();
            if counts[row] == 0 {
                return Err(TensorError::AllMasked {
                    op: "mean_over_time",
                    row,
                });
            }
        }
        let mut out = vec![0.0; b * h];
        for row in 0..b {
            for step in 0..t {
                if mask[row * t + step] != 1 {
                    continue;
                }
                for j in 0..h {
                    out[row * h + j] += xv[(row * t + step) * h + j];
                }
            }
            let inv = 1.0 / counts[row] as f64;
            for j in 0..h {
                out[row * h + j] *= inv;
            }
        }
        let requires = self.requires(x);
        let owned_mask = mask.to_vec();
        let back: Option<BackFn<'p>> = requires.then(|| {
            let xi = x.0;
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for row in 0..b {
                            let inv = 1.0 / counts[row] as f64;
                            for step in 0..t {
                                if owned_mask[row * t + step] != 1 {
                                    continue;
                                }
                                for j in 0..h {
                                    dx[(row * t + step) * h + j] += dy[row * h + j] * inv;
                                }
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(vec![b, h], out, requires, back))
    }

    fn time_pool_dims(
        &self,
        x: Var,
        mask: &[u8],
        op: &'static str,
    ) -> Result<(usize, usize, usize), TensorError> {
        let shape = self.shape(x);
        if shape.len() != 3 {
            return Err(TensorError::BadRank {
                op,
                expected: 3,
                shape: shape.to_vec(),
            });
        }
        let (b, t, h) = (shape[0], shape[1], shape[2]);
        if mask.len() != b * t {
            return Err(TensorError::Invalid {
                op,
                reason: format!("mask has {} entries for {b}x{t} positions", mask.len()),
            });
        }
        Ok((b, t, h))
    }

    /// Concatenates same-rank tensors along the last axis.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_last",
                reason: "no inputs".to_string(),
            });
        }
        let first = self.shape(inputs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let shape = self.shape(v);
            if shape.len() != first.len() || &shape[..shape.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    left: first.clone(),
                    right: shape.to_vec(),
                });
            }
            widths.push(*shape.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for row in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                let data = self.value(v);
                out.extend_from_slice(&data[row * w..(row + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);

        let requires = inputs.iter().any(|&v| self.requires(v));
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let back: Option<BackFn<'p>> = requires.then(|| {
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    let mut offset = 0;
                    for (&id, &w) in ids.iter().zip(&widths) {
                        if let Some(dx) = sink(grads, nodes, id) {
                            for row in 0..rows {
                                let src = row * total + offset;
                                for j in 0..w {
                                    dx[row * w + j] += dy[src + j];
                                }
                            }
                        }
                        offset += w;
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(shape, out, requires, back))
    }

    /// Stacks `t` tensors of shape `[b,h]` into `[b,t,h]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var, TensorError> {
        if steps.is_empty() {
            return Err(TensorError::Invalid {
                op: "stack_time",
                reason: "no steps".to_string(),
            });
        }
        let first = self.shape(steps[0]).to_vec();
        if first.len() != 2 {
            return Err(TensorError::BadRank {
                op: "stack_time",
                expected: 2,
                shape: first,
            });
        }
        let (b, h) = (first[0], first[1]);
        for &v in steps {
            if self.shape(v) != [b, h] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_time",
                    left: vec![b, h],
                    right: self.shape(v).to_vec(),
                });
            }
        }
        let t = steps.len();
        let mut out = vec![0.0; b * t * h];
        for (step, &v) in steps.iter().enumerate() {
            let data = self.value(v);
            for row in 0..b {
                out[(row * t + step) * h..(row * t + step) * h + h]
                    .copy_from_slice(&data[row * h..(row + 1) * h]);
            }
        }
        let requires = steps.iter().any(|&v| self.requires(v));
        let ids: Vec<usize> = steps.iter().map(|v| v.0).collect();
        let back: Option<BackFn<'p>> = requires.then(|| {
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    for (step, &id) in ids.iter().enumerate() {
                        if let Some(dx) = sink(grads, nodes, id) {
                            for row in 0..b {
                                for j in 0..h {
                                    dx[row * h + j] += dy[(row * t + step) * h + j];
                                }
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(vec![b, t, h], out, requires, back))
    }

    /// Extracts time step `t` from `[b,t,h]` as `[b,h]`.
    pub fn time_slice(&mut self, x: Var, step: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::BadRank {
                op: "time_slice",
                expected: 3,
                shape,
            });
        }
        let (b, t, h) = (shape[0], shape[1], shape[2]);
        if step >= t {
            return Err(TensorError::Invalid {
                op: "time_slice",
                reason: format!("step {step} is outside 0..{t}"),
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * h);
        for row in 0..b {
            out.extend_from_slice(&xv[(row * t + step) * h..(row * t + step) * h + h]);
        }
        let requires = self.requires(x);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let xi = x.0;
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for row in 0..b {
                            for j in 0..h {
                                dx[(row * t + step) * h + j] += dy[row * h + j];
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(vec![b, h], out, requires, back))
    }

    /// Picks one time step per batch row: `out[r] = x[r, idx[r], :]`.
    pub fn gather_time(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::BadRank {
                op: "gather_time",
                expected: 3,
                shape,
            });
        }
        let (b, t, h) = (shape[0], shape[1], shape[2]);
        if idx.len() != b {
            return Err(TensorError::Invalid {
                op: "gather_time",
                reason: format!("{} indices for {b} rows", idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t) {
            return Err(TensorError::Invalid {
                op: "gather_time",
                reason: format!("index {bad} is outside 0..{t}"),
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * h);
        for (row, &step) in idx.iter().enumerate() {
            out.extend_from_slice(&xv[(row * t + step) * h..(row * t + step) * h + h]);
        }
        let requires = self.requires(x);
        let owned: Vec<usize> = idx.to_vec();
        let back: Option<BackFn<'p>> = requires.then(|| {
            let xi = x.0;
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for (row, &step) in owned.iter().enumerate() {
                            for j in 0..h {
                                dx[(row * t + step) * h + j] += dy[row * h + j];
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(vec![b, h], out, requires, back))
    }

    /// Columns `[start, start+len)` of a `[r,c]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::BadRank {
                op: "slice_cols",
                expected: 2,
                shape,
            });
        }
        let (r, c) = (shape[0], shape[1]);
        if start + len > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                reason: format!("columns {start}..{} exceed width {c}", start + len),
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&xv[row * c + start..row * c + start + len]);
        }
        let requires = self.requires(x);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let xi = x.0;
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for row in 0..r {
                            for j in 0..len {
                                dx[row * c + start + j] += dy[row * len + j];
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(vec![r, len], out, requires, back))
    }

    /// Reinterprets the values under a new shape with the same element
    /// count.
    pub fn reshape(&mut self, x: Var, new_shape: Vec<usize>) -> Result<Var, TensorError> {
        if new_shape.iter().product::<usize>() != self.nodes[x.0].numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: new_shape,
            });
        }
        let out = self.value(x).to_vec();
        let requires = self.requires(x);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let xi = x.0;
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for (g, d) in dx.iter_mut().zip(dy) {
                            *g += d;
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(new_shape, out, requires, back))
    }

    /// Swaps axes 1 and 2 of a rank-4 tensor: `[a,b,c,d] -> [a,c,b,d]`.
    pub fn swap_axes_1_2(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::BadRank {
                op: "swap_axes_1_2",
                expected: 4,
                shape,
            });
        }
        let (a, b, c, d) = (shape[0], shape[1], shape[2], shape[3]);
        let xv = self.value(x);
        let mut out = vec![0.0; a * b * c * d];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    let src = ((i * b + j) * c + k) * d;
                    let dst = ((i * c + k) * b + j) * d;
                    out[dst..dst + d].copy_from_slice(&xv[src..src + d]);
                }
            }
        }
        let requires = self.requires(x);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let xi = x.0;
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for i in 0..a {
                            for j in 0..b {
                                for k in 0..c {
                                    let src = ((i * b + j) * c + k) * d;
                                    let dst = ((i * c + k) * b + j) * d;
                                    for e in 0..d {
                                        dx[src + e] += dy[dst + e];
                                    }
                                }
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(vec![a, c, b, d], out, requires, back))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or(TensorError::BadRank {
            op: "layer_norm",
            expected: 1,
            shape: shape.clone(),
        })?;
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.shape(gain).to_vec(),
            });
        }
        let rows = self.nodes[x.0].numel() / width;
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut out = vec![0.0; rows * width];
        let mut inv_sigma = vec![0.0; rows];
        let mut means = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            means[r] = mean;
            inv_sigma[r] = inv;
            for j in 0..width {
                out[r * width + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let requires = self.requires(x) || self.requires(gain) || self.requires(bias);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let (xi, gi, bi) = (x.0, gain.0, bias.0);
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    let xv = nodes[xi].data();
                    let gv = nodes[gi].data();
                    // Normalized activations recomputed from cached statistics.
                    let xhat = |r: usize, j: usize| (xv[r * width + j] - means[r]) * inv_sigma[r];

                    if let Some(dg) = sink(grads, nodes, gi) {
                        for r in 0..rows {
                            for j in 0..width {
                                dg[j] += dy[r * width + j] * xhat(r, j);
                            }
                        }
                    }
                    if let Some(db) = sink(grads, nodes, bi) {
                        for r in 0..rows {
                            for j in 0..width {
                                db[j] += dy[r * width + j];
                            }
                        }
                    }
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for r in 0..rows {
                            let mut mean_d = 0.0;
                            let mut mean_dxhat = 0.0;
                            for j in 0..width {
                                let d = dy[r * width + j] * gv[j];
                                mean_d += d;
                                mean_dxhat += d * xhat(r, j);
                            }
                            mean_d /= width as f64;
                            mean_dxhat /= width as f64;
                            for j in 0..width {
                                let d = dy[r * width + j] * gv[j];
                                dx[r * width + j] +=
                                    inv_sigma[r] * (d - mean_d - xhat(r, j) * mean_dxhat);
                            }
                        }
                    }
                },
            ) as BackFn<'p>
        });
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, requires, back))
    }

    /// Sum of all elements as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).iter().sum();
        let requires = self.requires(x);
        let back: Option<BackFn<'p>> = requires.then(|| {
            let xi = x.0;
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    if let Some(dx) = sink(grads, nodes, xi) {
                        for g in dx.iter_mut() {
                            *g += dy[0];
                        }
                    }
                },
            ) as BackFn<'p>
        });
        self.push(vec![1], vec![total], requires, back)
    }

    /// Mean binary cross-entropy between probabilities and 0/1 labels, with
    /// probabilities clamped to `[1e-7, 1 - 1e-7]` before the logs.
    pub fn bce_loss(&mut self, probs: Var, labels: &[f64]) -> Result<Var, TensorError> {
        const CLAMP: f64 = 1e-7;
        let n = self.nodes[probs.0].numel();
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                left: self.shape(probs).to_vec(),
                right: vec![labels.len()],
            });
        }
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "bce_loss",
                reason: "empty batch".to_string(),
            });
        }
        let pv = self.value(probs);
        let mut total = 0.0;
        for (&p, &y) in pv.iter().zip(labels) {
            let pc = p.clamp(CLAMP, 1.0 - CLAMP);
            total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let loss = total / n as f64;

        let requires = self.requires(probs);
        let owned_labels = labels.to_vec();
        let back: Option<BackFn<'p>> = requires.then(|| {
            let pi = probs.0;
            Box::new(
                move |nodes: &[Node<'p>], dy: &[f64], grads: &mut [Option<Vec<f64>>]| {
                    let pv = nodes[pi].data();
                    if let Some(dp) = sink(grads, nodes, pi) {
                        let scale = dy[0] / n as f64;
                        for i in 0..n {
                            // The slope is taken at the clamped probability
                            // rather than zeroed outside the clamp range, so
                            // saturated predictions keep a corrective
                            // gradient instead of going silent.
                            let pc = pv[i].clamp(CLAMP, 1.0 - CLAMP);
                            let y = owned_labels[i];
                            dp[i] += scale * (-y / pc + (1.0 - y) / (1.0 - pc));
                        }
                    }
                },
            ) as BackFn<'p>
        });
        Ok(self.push(vec![1], vec![loss], requires, back))
    }

    // -- reverse pass --------------------------------------------------------

    /// Accumulates `d loss / d node` into every node that requires
    /// gradients, visiting recorded operations in exact reverse order.
    /// Gradients from multiple uses of a node sum.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.spent {
            return Err(TensorError::Invalid {
                op: "backward",
                reason: "tape already consumed by a previous backward pass".to_string(),
            });
        }
        self.spent = true;
        if self.nodes[loss.0].numel() != 1 {
            return Err(TensorError::NotScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(back) = self.nodes[i].back.take() else {
                continue;
            };
            let Some(out_grad) = self.grads[i].take() else {
                continue;
            };
            back(&self.nodes, &out_grad, &mut self.grads);
            self.grads[i] = Some(out_grad);
        }
        Ok(())
    }

    /// Drains accumulated gradients of bound parameters as
    /// `(registry index, gradient)` pairs.
    pub fn take_param_grads(&mut self) -> Vec<(usize, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(param) = node.param {
                if let Some(grad) = self.grads.get_mut(i).and_then(Option::take) {
                    out.push((param, grad));
                }
            }
        }
        out
    }
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aval) in arow.iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aval * brow[j];
            }
        }
    }
}
