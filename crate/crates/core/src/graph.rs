//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and a closure that routes the incoming gradient to its parents. Calling
//! [`Graph::backward`] on a scalar node walks the tape once in reverse and
//! returns gradients for every named parameter that participated.
//!
//! Vectors are represented as single-column matrices throughout. The tape
//! is rebuilt for every forward pass; it is cheap at the scales this crate
//! runs at and keeps the recurrent unrolls (encoder frames, decoder steps,
//! soft-embedding feedback) trivially correct.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Array2<f64>, &mut Accumulator)>;

struct Node {
    value: Rc<Array2<f64>>,
    backward: Option<BackwardFn>,
}

/// Per-node gradient slots used during the backward sweep.
pub struct Accumulator {
    grads: Vec<Option<Array2<f64>>>,
}

impl Accumulator {
    fn add(&mut self, var: Var, g: Array2<f64>) {
        match &mut self.grads[var.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Named parameter gradients produced by a backward sweep.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.by_name.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    /// Keep only gradients whose parameter name starts with `prefix`.
    pub fn restrict_to_prefix(&self, prefix: &str) -> Gradients {
        Gradients {
            by_name: self
                .by_name
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_name
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            for g in self.by_name.values_mut() {
                g.mapv_inplace(|x| x * factor);
            }
        }
    }

    pub fn merge_add(&mut self, other: &Gradients) {
        for (k, v) in other.by_name.iter() {
            match self.by_name.get_mut(k) {
                Some(acc) => *acc += v,
                None => {
                    self.by_name.insert(k.clone(), v.clone());
                }
            }
        }
    }
}

/// Flat store of named parameter tensors. Iteration order is the sorted
/// name order, which keeps every reduction over parameters deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value: Rc::new(value), backward });
        Var(self.nodes.len() - 1)
    }

    fn rc(&self, v: Var) -> Rc<Array2<f64>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Value of a node. Shapes are (rows, cols); vectors are (n, 1).
    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a scalar (1x1) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[(0, 0)]
    }

    /// Leaf with no gradient tracking.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, None)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Leaf bound to a named tensor in `store`. Repeated binds of the same
    /// name return the same node, so gradients accumulate across every use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(v) = self.param_vars.get(name) {
            return *v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("graph: unknown parameter `{name}`"))
            .clone();
        let v = self.push(value, None);
        self.param_vars.insert(name.to_string(), v);
        v
    }

    // ---- arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let y = &*self.rc(a) + &*self.rc(b);
        self.push(
            y,
            Some(Box::new(move |g, acc| {
                acc.add(a, g.clone());
                acc.add(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shape mismatch");
        let y = &*self.rc(a) - &*self.rc(b);
        self.push(
            y,
            Some(Box::new(move |g, acc| {
                acc.add(a, g.clone());
                acc.add(b, g.mapv(|x| -x));
            })),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let av = self.rc(a);
        let bv = self.rc(b);
        let y = &*av * &*bv;
        self.push(
            y,
            Some(Box::new(move |g, acc| {
                acc.add(a, g * &*bv);
                acc.add(b, g * &*av);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).mapv(|x| x * c);
        self.push(y, Some(Box::new(move |g, acc| acc.add(a, g.mapv(|x| x * c)))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.rc(a);
        let bv = self.rc(b);
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dimension mismatch");
        let y = av.dot(&*bv);
        self.push(
            y,
            Some(Box::new(move |g, acc| {
                acc.add(a, g.dot(&bv.t()));
                acc.add(b, av.t().dot(g));
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let y = self.value(a).t().to_owned();
        self.push(y, Some(Box::new(move |g, acc| acc.add(a, g.t().to_owned()))))
    }

    /// W x + b.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Var {
        let wx = self.matmul(w, x);
        self.add(wx, b)
    }

    // ---- elementwise nonlinearities ----

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let yc = Rc::new(y.clone());
        self.push(
            y,
            Some(Box::new(move |g, acc| acc.add(a, g * &yc.mapv(|s| s * (1.0 - s))))),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::tanh);
        let yc = Rc::new(y.clone());
        self.push(
            y,
            Some(Box::new(move |g, acc| acc.add(a, g * &yc.mapv(|t| 1.0 - t * t)))),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::exp);
        let yc = Rc::new(y.clone());
        self.push(y, Some(Box::new(move |g, acc| acc.add(a, g * &*yc))))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let y = av.mapv(f64::abs);
        self.push(
            y,
            Some(Box::new(move |g, acc| acc.add(a, g * &av.mapv(f64::signum)))),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let y = av.mapv(|x| x.max(0.0));
        self.push(
            y,
            Some(Box::new(move |g, acc| {
                acc.add(a, g * &av.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))
            })),
        )
    }

    // ---- reductions and softmax (column vectors) ----

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let dim = self.value(a).raw_dim();
        let y = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(
            y,
            Some(Box::new(move |g, acc| {
                acc.add(a, Array2::from_elem(dim, g[(0, 0)]))
            })),
        )
    }

    /// Numerically stable softmax over a column vector (n, 1).
    pub fn softmax_col(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.ncols(), 1, "softmax_col expects a column vector");
        let max = av.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex = av.mapv(|x| (x - max).exp());
        let sum: f64 = ex.sum();
        let y = ex.mapv(|e| e / sum);
        let yc = Rc::new(y.clone());
        self.push(
            y,
            Some(Box::new(move |g, acc| {
                // dx = y ⊙ (g − ⟨y, g⟩)
                let dot: f64 = yc.iter().zip(g.iter()).map(|(p, q)| p * q).sum();
                acc.add(a, &*yc * &g.mapv(|q| q - dot));
            })),
        )
    }

    /// Numerically stable log-softmax over a column vector.
    pub fn log_softmax_col(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.ncols(), 1, "log_softmax_col expects a column vector");
        let max = av.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + av.mapv(|x| (x - max).exp()).sum().ln();
        let y = av.mapv(|x| x - lse);
        let pc = Rc::new(y.mapv(f64::exp));
        self.push(
            y,
            Some(Box::new(move |g, acc| {
                let gsum: f64 = g.sum();
                acc.add(a, g - &pc.mapv(|p| p * gsum));
            })),
        )
    }

    // ---- structural ops ----

    /// Entry (i, 0) of a column vector, as a 1x1 node.
    pub fn pick(&mut self, a: Var, i: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.ncols(), 1, "pick expects a column vector");
        let dim = av.raw_dim();
        let y = Array2::from_elem((1, 1), av[(i, 0)]);
        self.push(
            y,
            Some(Box::new(move |g, acc| {
                let mut d = Array2::zeros(dim);
                d[(i, 0)] = g[(0, 0)];
                acc.add(a, d);
            })),
        )
    }

    /// Column j of a matrix, as an (rows, 1) node.
    pub fn col(&mut self, a: Var, j: usize) -> Var {
        let av = self.value(a);
        let dim = av.raw_dim();
        let y = av.slice(s![.., j..j + 1]).to_owned();
        self.push(
            y,
            Some(Box::new(move |g, acc| {
                let mut d = Array2::zeros(dim);
                d.slice_mut(s![.., j..j + 1]).assign(g);
                acc.add(a, d);
            })),
        )
    }

    /// Rows [start, start+len) of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let dim = av.raw_dim();
        let y = av.slice(s![start..start + len, ..]).to_owned();
        self.push(
            y,
            Some(Box::new(move |g, acc| {
                let mut d = Array2::zeros(dim);
                d.slice_mut(s![start..start + len, ..]).assign(g);
                acc.add(a, d);
            })),
        )
    }

    /// Vertical stack of column-compatible nodes.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.rc(*v)).collect();
        let y = concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_rows: column mismatch");
        let row_counts: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        let parts = parts.to_vec();
        self.push(
            y,
            Some(Box::new(move |g, acc| {
                let mut offset = 0;
                for (part, rows) in parts.iter().zip(&row_counts) {
                    acc.add(*part, g.slice(s![offset..offset + rows, ..]).to_owned());
                    offset += rows;
                }
            })),
        )
    }

    /// Horizontal stack of row-compatible nodes (used to build H from the
    /// per-frame upper hidden states).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.rc(*v)).collect();
        let y = concatenate(
            Axis(1),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_cols: row mismatch");
        let col_counts: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        let parts = parts.to_vec();
        self.push(
            y,
            Some(Box::new(move |g, acc| {
                let mut offset = 0;
                for (part, cols) in parts.iter().zip(&col_counts) {
                    acc.add(*part, g.slice(s![.., offset..offset + cols]).to_owned());
                    offset += cols;
                }
            })),
        )
    }

    // ---- composites ----

    /// Mean of a list of scalar nodes.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut acc = parts[0];
        for v in &parts[1..] {
            acc = self.add(acc, *v);
        }
        self.scale(acc, 1.0 / parts.len() as f64)
    }

    /// L1 distance between two same-shaped nodes, as a scalar node.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.sum(ad)
    }

    /// Backward sweep from a scalar node; returns gradients for every
    /// parameter leaf that was bound via [`Graph::param`].
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward: loss must be scalar");
        let mut acc = Accumulator { grads: vec![None; self.nodes.len()] };
        acc.grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            if acc.grads[idx].is_none() {
                continue;
            }
            if let Some(f) = &self.nodes[idx].backward {
                let g = acc.grads[idx].take().expect("grad present");
                f(&g, &mut acc);
            }
        }
        let mut by_name = BTreeMap::new();
        for (name, var) in &self.param_vars {
            if let Some(g) = acc.grads[var.0].take() {
                by_name.insert(name.clone(), g);
            }
        }
        Gradients { by_name }
    }
}

/// Central finite-difference gradient of `f` with respect to every entry of
/// every parameter in `store`. Test oracle for the analytic backward pass;
/// intentionally knows nothing about the tape.
pub fn finite_difference_gradients<F>(
    store: &ParamStore,
    step: f64,
    mut f: F,
) -> Gradients
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut by_name = BTreeMap::new();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let dim = store.get(&name).unwrap().raw_dim();
        let mut grad = Array2::zeros(dim);
        let n = dim[0] * dim[1];
        for flat in 0..n {
            let (i, j) = (flat / dim[1], flat % dim[1]);
            let mut plus = store.clone();
            plus.get_mut(&name).unwrap()[(i, j)] += step;
            let mut minus = store.clone();
            minus.get_mut(&name).unwrap()[(i, j)] -= step;
            grad[(i, j)] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        by_name.insert(name, grad);
    }
    Gradients { by_name }
}

/// Largest elementwise relative error between two gradient sets, using
/// `|a - b| / max(1, |a|, |b|)`.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    let mut worst = 0.0f64;
    for (name, a) in analytic.iter() {
        let b = numeric
            .get(name)
            .unwrap_or_else(|| panic!("missing numeric gradient for `{name}`"));
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = 1.0f64.max(x.abs()).max(y.abs());
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
