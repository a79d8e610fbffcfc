//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Each forward pass builds a fresh [`Graph`]; `backward` walks the tape in
//! reverse construction order and accumulates gradients additively into the
//! bound [`ParamSet`] entries. Variable-length sequences are the norm here,
//! so nothing about the graph shape is cached between passes.

use indexmap::IndexMap;
use rand::Rng;

/// Dense n-dimensional float tensor, flat row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Uniform init in [-0.08, 0.08], the conventional small-uniform RNN init.
    pub fn uniform_init<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-0.08..0.08)).collect();
        Tensor { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named parameter: value plus an additively accumulated gradient buffer.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order, which makes gradient reductions and optimizer sweeps deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let grad = vec![0.0; value.len()];
        let prev = self.entries.insert(name.to_string(), Param { value, grad });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces a parameter's tensor, e.g. when growing the vocabulary.
    pub fn replace(&mut self, name: &str, value: Tensor) {
        let grad = vec![0.0; value.len()];
        *self.get_mut(name) = Param { value, grad };
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Functional gradient-descent step: returns updated copies, originals
    /// untouched. The MAML inner update relies on this purity.
    pub fn sgd_step(&self, lr: f64) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, p) in self.iter() {
            let data: Vec<f64> = p
                .value
                .data
                .iter()
                .zip(&p.grad)
                .map(|(v, g)| v - lr * g)
                .collect();
            out.insert(name, Tensor::new(p.value.shape.clone(), data));
        }
        out
    }

    /// Adds `other`'s gradients into this set's gradient buffers.
    pub fn add_grads_from(&mut self, other: &ParamSet) {
        for (name, p) in self.iter_mut() {
            let o = other.get(name);
            assert_eq!(p.grad.len(), o.grad.len(), "gradient shape mismatch for {name}");
            for (g, og) in p.grad.iter_mut().zip(&o.grad) {
                *g += og;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, p)| p.value.is_finite())
    }
}

/// Adam optimizer state, one moment pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(params: &ParamSet, learning_rate: f64) -> Self {
        let moments = params
            .iter()
            .map(|(name, p)| (name.to_string(), (vec![0.0; p.value.len()], vec![0.0; p.value.len()])))
            .collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments,
        }
    }

    /// One Adam update from the gradients currently held in `params`;
    /// gradients are cleared afterwards.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, p) in params.iter_mut() {
            let (m, v) = self
                .moments
                .get_mut(name)
                .unwrap_or_else(|| panic!("no Adam state for parameter {name}"));
            assert_eq!(m.len(), p.value.len(), "Adam moment shape mismatch for {name}");
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value.data[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Registers moment buffers for parameters added after construction
    /// (vocabulary growth replaces tensors with larger ones).
    pub fn sync_shapes(&mut self, params: &ParamSet) {
        for (name, p) in params.iter() {
            let n = p.value.len();
            let entry = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if entry.0.len() != n {
                // grown tensor: keep old moments for the retained prefix
                entry.0.resize(n, 0.0);
                entry.1.resize(n, 0.0);
            }
        }
    }
}

pub type NodeId = usize;

enum Op {
    Leaf,
    /// (m,k)x(k,n) -> (m,n); also (m,k)x(k) -> (m) and (k)x(k,n) -> (n).
    Matmul(NodeId, NodeId),
    /// W^T x for W (k,n), x (k) -> (n).
    MatmulTv(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// k*x + c elementwise with constant coefficients.
    Affine(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Softmax over the last axis.
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    /// One row of a (V,d) table.
    EmbedRow(NodeId, usize),
    /// Elementwise multiply by a fixed pre-sampled mask (inverted dropout).
    Dropout(NodeId, Vec<f64>),
    SumAll(NodeId),
    Dot(NodeId, NodeId),
    Log(NodeId),
    ClampMin(NodeId, f64),
    /// out[indices[i]] += src[i]; duplicate indices accumulate.
    ScatterAdd(NodeId, Vec<usize>),
    /// Vector scaled by a scalar node.
    ScaleBy(NodeId, NodeId),
    /// Vector divided by a scalar node.
    DivByScalar(NodeId, NodeId),
    /// sum_i weights[i] * items[i], items all shape (d).
    WeightedSum(NodeId, Vec<NodeId>),
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation tape. One graph belongs to one logical thread;
/// it is rebuilt for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all recorded nodes, keeping allocations where possible.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let grad = Vec::new();
        self.nodes.push(Node { value, grad, op, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// A constant leaf (no gradient tracked).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// An input leaf that receives a gradient but is not a named parameter.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter from `params` as a leaf. `backward` will
    /// accumulate d(loss)/d(param) into the set's gradient buffer.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> NodeId {
        let t = params.get(name).value.clone();
        let id = self.push(t, Op::Leaf, true);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (&self.nodes[a].value.shape, &self.nodes[b].value.shape);
        let value = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k) = (sa[0], sa[1]);
                let (k2, n) = (sb[0], sb[1]);
                assert_eq!(k, k2, "matmul shape mismatch: {sa:?} x {sb:?}");
                let av = &self.nodes[a].value.data;
                let bv = &self.nodes[b].value.data;
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let av_ip = av[i * k + p];
                        let brow = &bv[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += av_ip * brow[j];
                        }
                    }
                }
                Tensor::new(vec![m, n], out)
            }
            (2, 1) => {
                let (m, k) = (sa[0], sa[1]);
                assert_eq!(k, sb[0], "matmul shape mismatch: {sa:?} x {sb:?}");
                let av = &self.nodes[a].value.data;
                let bv = &self.nodes[b].value.data;
                let out = (0..m)
                    .map(|i| {
                        av[i * k..(i + 1) * k]
                            .iter()
                            .zip(bv)
                            .map(|(x, y)| x * y)
                            .sum()
                    })
                    .collect();
                Tensor::new(vec![m], out)
            }
            (1, 2) => {
                let k = sa[0];
                let (k2, n) = (sb[0], sb[1]);
                assert_eq!(k, k2, "matmul shape mismatch: {sa:?} x {sb:?}");
                let av = &self.nodes[a].value.data;
                let bv = &self.nodes[b].value.data;
                let mut out = vec![0.0; n];
                for p in 0..k {
                    let ap = av[p];
                    for j in 0..n {
                        out[j] += ap * bv[p * n + j];
                    }
                }
                Tensor::new(vec![n], out)
            }
            _ => panic!("matmul expects 1-D/2-D operands, got {sa:?} x {sb:?}"),
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Matmul(a, b), ng)
    }

    /// W^T x without materializing the transpose.
    pub fn matmul_tv(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let (sw, sx) = (&self.nodes[w].value.shape, &self.nodes[x].value.shape);
        assert!(
            sw.len() == 2 && sx.len() == 1 && sw[0] == sx[0],
            "matmul_tv shape mismatch: {sw:?}^T x {sx:?}"
        );
        let (k, n) = (sw[0], sw[1]);
        let wv = &self.nodes[w].value.data;
        let xv = &self.nodes[x].value.data;
        let mut out = vec![0.0; n];
        for p in 0..k {
            let xp = xv[p];
            for j in 0..n {
                out[j] += xp * wv[p * n + j];
            }
        }
        let ng = self.needs(w) || self.needs(x);
        self.push(Tensor::new(vec![n], out), Op::MatmulTv(w, x), ng)
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        opname: &str,
    ) -> NodeId {
        let (sa, sb) = (&self.nodes[a].value.shape, &self.nodes[b].value.shape);
        assert_eq!(sa, sb, "{opname} shape mismatch: {sa:?} vs {sb:?}");
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(sa.clone(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn affine(&mut self, a: NodeId, k: f64, c: f64) -> NodeId {
        let value = Tensor::new(
            self.nodes[a].value.shape.clone(),
            self.nodes[a].value.data.iter().map(|x| k * x + c).collect(),
        );
        let ng = self.needs(a);
        self.push(value, Op::Affine(a, k), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::new(
            self.nodes[a].value.shape.clone(),
            self.nodes[a]
                .value
                .data
                .iter()
                .map(|x| 1.0 / (1.0 + (-x).exp()))
                .collect(),
        );
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::new(
            self.nodes[a].value.shape.clone(),
            self.nodes[a].value.data.iter().map(|x| x.tanh()).collect(),
        );
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    /// Softmax over the last axis; numerically stabilized by max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].value.shape.clone();
        let w = *shape.last().expect("softmax on empty shape");
        let mut data = self.nodes[a].value.data.clone();
        for row in data.chunks_mut(w) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Softmax(a), ng)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(
                self.nodes[p].value.shape.len(),
                1,
                "concat expects 1-D tensors, got {:?}",
                self.nodes[p].value.shape
            );
            data.extend_from_slice(&self.nodes[p].value.data);
        }
        let n = data.len();
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(vec![n], data), Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let t = &self.nodes[a].value;
        assert!(
            t.shape.len() == 1 && start + len <= t.data.len(),
            "slice [{start}, {start}+{len}) out of bounds for shape {:?}",
            t.shape
        );
        let data = t.data[start..start + len].to_vec();
        let ng = self.needs(a);
        self.push(Tensor::new(vec![len], data), Op::Slice(a, start), ng)
    }

    pub fn embed_row(&mut self, table: NodeId, idx: usize) -> NodeId {
        let t = &self.nodes[table].value;
        assert!(
            t.shape.len() == 2 && idx < t.shape[0],
            "embedding row {idx} out of bounds for table shape {:?}",
            t.shape
        );
        let d = t.shape[1];
        let data = t.data[idx * d..(idx + 1) * d].to_vec();
        let ng = self.needs(table);
        self.push(Tensor::new(vec![d], data), Op::EmbedRow(table, idx), ng)
    }

    /// Multiplies elementwise by `mask` (entries 0 or 1/(1-rate)). The caller
    /// skips this op entirely in evaluation mode.
    pub fn dropout(&mut self, a: NodeId, mask: &[f64]) -> NodeId {
        let t = &self.nodes[a].value;
        assert_eq!(t.data.len(), mask.len(), "dropout mask length mismatch");
        let data = t.data.iter().zip(mask).map(|(x, m)| x * m).collect();
        let ng = self.needs(a);
        self.push(
            Tensor::new(t.shape.clone(), data),
            Op::Dropout(a, mask.to_vec()),
            ng,
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape, tb.shape, "dot shape mismatch: {:?} vs {:?}", ta.shape, tb.shape);
        let s: f64 = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).sum();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s), Op::Dot(a, b), ng)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::new(
            self.nodes[a].value.shape.clone(),
            self.nodes[a].value.data.iter().map(|x| x.ln()).collect(),
        );
        let ng = self.needs(a);
        self.push(value, Op::Log(a), ng)
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let value = Tensor::new(
            self.nodes[a].value.shape.clone(),
            self.nodes[a].value.data.iter().map(|x| x.max(floor)).collect(),
        );
        let ng = self.needs(a);
        self.push(value, Op::ClampMin(a, floor), ng)
    }

    /// out[indices[i]] += src[i]; duplicates accumulate (the copy-mechanism
    /// sum over repeated source tokens).
    pub fn scatter_add(&mut self, src: NodeId, indices: &[usize], size: usize) -> NodeId {
        let t = &self.nodes[src].value;
        assert_eq!(t.data.len(), indices.len(), "scatter_add index count mismatch");
        let mut out = vec![0.0; size];
        for (v, &i) in t.data.iter().zip(indices) {
            assert!(i < size, "scatter index {i} out of bounds for size {size}");
            out[i] += v;
        }
        let ng = self.needs(src);
        self.push(
            Tensor::new(vec![size], out),
            Op::ScatterAdd(src, indices.to_vec()),
            ng,
        )
    }

    /// Vector times scalar node.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s].value.len(), 1, "scale_by expects a scalar");
        let sv = self.nodes[s].value.data[0];
        let t = &self.nodes[a].value;
        let value = Tensor::new(t.shape.clone(), t.data.iter().map(|x| x * sv).collect());
        let ng = self.needs(a) || self.needs(s);
        self.push(value, Op::ScaleBy(a, s), ng)
    }

    pub fn div_by_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s].value.len(), 1, "div_by_scalar expects a scalar");
        let sv = self.nodes[s].value.data[0];
        let t = &self.nodes[a].value;
        let value = Tensor::new(t.shape.clone(), t.data.iter().map(|x| x / sv).collect());
        let ng = self.needs(a) || self.needs(s);
        self.push(value, Op::DivByScalar(a, s), ng)
    }

    /// sum_i weights[i] * items[i] over same-shape 1-D items.
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> NodeId {
        let wlen = self.nodes[weights].value.len();
        assert_eq!(wlen, items.len(), "weighted_sum arity mismatch");
        assert!(!items.is_empty(), "weighted_sum of zero items");
        let d = self.nodes[items[0]].value.len();
        let mut out = vec![0.0; d];
        for (i, &it) in items.iter().enumerate() {
            let w = self.nodes[weights].value.data[i];
            let iv = &self.nodes[it].value.data;
            assert_eq!(iv.len(), d, "weighted_sum item shape mismatch");
            for j in 0..d {
                out[j] += w * iv[j];
            }
        }
        let ng = self.needs(weights) || items.iter().any(|&i| self.needs(i));
        self.push(
            Tensor::new(vec![d], out),
            Op::WeightedSum(weights, items.to_vec()),
            ng,
        )
    }

    fn ensure_grad(&mut self, id: NodeId) {
        if self.nodes[id].grad.is_empty() {
            let n = self.nodes[id].value.len();
            self.nodes[id].grad = vec![0.0; n];
        }
    }

    /// Backpropagates from the scalar `loss` node and accumulates parameter
    /// gradients additively into `params`. Calling twice without re-running
    /// the forward pass accumulates exactly twice the gradients.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet) {
        self.backward_scaled(loss, 1.0, params);
    }

    /// As `backward`, but seeds d(loss)/d(loss) = `scale`. Used to fold a
    /// 1/N batch normalization into per-example passes.
    pub fn backward_scaled(&mut self, loss: NodeId, scale: f64, params: &mut ParamSet) {
        assert_eq!(
            self.nodes[loss].value.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss].value.shape
        );
        // fresh node gradients for this pass
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.ensure_grad(loss);
        self.nodes[loss].grad[0] = scale;

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.nodes[id].grad);
            self.propagate(id, &g);
            self.nodes[id].grad = g;
        }

        for (name, id) in &self.params {
            if !self.nodes[*id].grad.is_empty() {
                let p = params.get_mut(name);
                for (pg, ng) in p.grad.iter_mut().zip(&self.nodes[*id].grad) {
                    *pg += ng;
                }
            }
        }
    }

    fn add_into(&mut self, id: NodeId, contrib: impl Fn(usize) -> f64) {
        if !self.nodes[id].needs_grad {
            return;
        }
        self.ensure_grad(id);
        let n = self.nodes[id].grad.len();
        for i in 0..n {
            self.nodes[id].grad[i] += contrib(i);
        }
    }

    fn propagate(&mut self, id: NodeId, g: &[f64]) {
        // ops are matched by value to avoid borrowing self.nodes[id] across
        // the mutations below
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a].value.shape.clone();
                let sb = self.nodes[b].value.shape.clone();
                let av = self.nodes[a].value.data.clone();
                let bv = self.nodes[b].value.data.clone();
                match (sa.len(), sb.len()) {
                    (2, 2) => {
                        let (m, k) = (sa[0], sa[1]);
                        let n = sb[1];
                        if self.needs(a) {
                            self.ensure_grad(a);
                            for i in 0..m {
                                for p in 0..k {
                                    let mut s = 0.0;
                                    for j in 0..n {
                                        s += g[i * n + j] * bv[p * n + j];
                                    }
                                    self.nodes[a].grad[i * k + p] += s;
                                }
                            }
                        }
                        if self.needs(b) {
                            self.ensure_grad(b);
                            for p in 0..k {
                                for j in 0..n {
                                    let mut s = 0.0;
                                    for i in 0..m {
                                        s += av[i * k + p] * g[i * n + j];
                                    }
                                    self.nodes[b].grad[p * n + j] += s;
                                }
                            }
                        }
                    }
                    (2, 1) => {
                        let (m, k) = (sa[0], sa[1]);
                        if self.needs(a) {
                            self.ensure_grad(a);
                            for i in 0..m {
                                for p in 0..k {
                                    self.nodes[a].grad[i * k + p] += g[i] * bv[p];
                                }
                            }
                        }
                        if self.needs(b) {
                            self.ensure_grad(b);
                            for p in 0..k {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += av[i * k + p] * g[i];
                                }
                                self.nodes[b].grad[p] += s;
                            }
                        }
                    }
                    (1, 2) => {
                        let k = sa[0];
                        let n = sb[1];
                        if self.needs(a) {
                            self.ensure_grad(a);
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += bv[p * n + j] * g[j];
                                }
                                self.nodes[a].grad[p] += s;
                            }
                        }
                        if self.needs(b) {
                            self.ensure_grad(b);
                            for p in 0..k {
                                for j in 0..n {
                                    self.nodes[b].grad[p * n + j] += av[p] * g[j];
                                }
                            }
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::MatmulTv(w, x) => {
                let (w, x) = (*w, *x);
                let (k, n) = {
                    let s = &self.nodes[w].value.shape;
                    (s[0], s[1])
                };
                let wv = self.nodes[w].value.data.clone();
                let xv = self.nodes[x].value.data.clone();
                if self.needs(w) {
                    self.ensure_grad(w);
                    for p in 0..k {
                        for j in 0..n {
                            self.nodes[w].grad[p * n + j] += xv[p] * g[j];
                        }
                    }
                }
                if self.needs(x) {
                    self.ensure_grad(x);
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += wv[p * n + j] * g[j];
                        }
                        self.nodes[x].grad[p] += s;
                    }
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_into(a, |i| g[i]);
                self.add_into(b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_into(a, |i| g[i]);
                self.add_into(b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a].value.data.clone();
                let bv = self.nodes[b].value.data.clone();
                self.add_into(a, |i| g[i] * bv[i]);
                self.add_into(b, |i| g[i] * av[i]);
            }
            Op::Affine(a, k) => {
                let (a, k) = (*a, *k);
                self.add_into(a, |i| g[i] * k);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = self.nodes[id].value.data.clone();
                self.add_into(a, |i| g[i] * y[i] * (1.0 - y[i]));
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = self.nodes[id].value.data.clone();
                self.add_into(a, |i| g[i] * (1.0 - y[i] * y[i]));
            }
            Op::Softmax(a) => {
                let a = *a;
                let y = self.nodes[id].value.data.clone();
                let w = *self.nodes[id].value.shape.last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for (r, row) in y.chunks(w).enumerate() {
                    let gr = &g[r * w..(r + 1) * w];
                    let dot: f64 = gr.iter().zip(row).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..w {
                        gx[r * w + j] = row[j] * (gr[j] - dot);
                    }
                }
                self.add_into(a, |i| gx[i]);
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p].value.len();
                    let o = off;
                    self.add_into(p, |i| g[o + i]);
                    off += n;
                }
            }
            Op::Slice(a, start) => {
                let (a, start) = (*a, *start);
                if self.needs(a) {
                    self.ensure_grad(a);
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[a].grad[start + i] += gi;
                    }
                }
            }
            Op::EmbedRow(table, idx) => {
                let (table, idx) = (*table, *idx);
                if self.needs(table) {
                    self.ensure_grad(table);
                    let d = g.len();
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[table].grad[idx * d + i] += gi;
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let a = *a;
                let mask = mask.clone();
                self.add_into(a, |i| g[i] * mask[i]);
            }
            Op::SumAll(a) => {
                let a = *a;
                let g0 = g[0];
                self.add_into(a, |_| g0);
            }
            Op::Dot(a, b) => {
                let (a, b) = (*a, *b);
                let g0 = g[0];
                let av = self.nodes[a].value.data.clone();
                let bv = self.nodes[b].value.data.clone();
                self.add_into(a, |i| g0 * bv[i]);
                self.add_into(b, |i| g0 * av[i]);
            }
            Op::Log(a) => {
                let a = *a;
                let xv = self.nodes[a].value.data.clone();
                self.add_into(a, |i| g[i] / xv[i]);
            }
            Op::ClampMin(a, floor) => {
                let (a, floor) = (*a, *floor);
                let xv = self.nodes[a].value.data.clone();
                self.add_into(a, |i| if xv[i] > floor { g[i] } else { 0.0 });
            }
            Op::ScatterAdd(src, indices) => {
                let src = *src;
                let indices = indices.clone();
                self.add_into(src, |i| g[indices[i]]);
            }
            Op::ScaleBy(a, s) => {
                let (a, s) = (*a, *s);
                let sv = self.nodes[s].value.data[0];
                let av = self.nodes[a].value.data.clone();
                self.add_into(a, |i| g[i] * sv);
                if self.needs(s) {
                    let contrib: f64 = g.iter().zip(&av).map(|(gi, ai)| gi * ai).sum();
                    self.add_into(s, |_| contrib);
                }
            }
            Op::DivByScalar(a, s) => {
                let (a, s) = (*a, *s);
                let sv = self.nodes[s].value.data[0];
                let av = self.nodes[a].value.data.clone();
                self.add_into(a, |i| g[i] / sv);
                if self.needs(s) {
                    let contrib: f64 =
                        g.iter().zip(&av).map(|(gi, ai)| -gi * ai / (sv * sv)).sum();
                    self.add_into(s, |_| contrib);
                }
            }
            Op::WeightedSum(weights, items) => {
                let weights = *weights;
                let items = items.clone();
                let wv = self.nodes[weights].value.data.clone();
                for (i, &it) in items.iter().enumerate() {
                    let wi = wv[i];
                    self.add_into(it, |j| g[j] * wi);
                }
                if self.needs(weights) {
                    self.ensure_grad(weights);
                    for (i, &it) in items.iter().enumerate() {
                        let s: f64 = self.nodes[it]
                            .value
                            .data
                            .iter()
                            .zip(g)
                            .map(|(x, gi)| x * gi)
                            .sum();
                        self.nodes[weights].grad[i] += s;
                    }
                }
            }
        }
    }
}

/// Central-difference gradient check. Builds the graph via `build` (which
/// must be deterministic), runs analytic backward, then perturbs every
/// parameter coordinate (or a sample of `max_coords` per parameter) and
/// compares. Returns the max relative error
/// |analytic - numeric| / max(1, |analytic|).
pub fn grad_check<F>(build: F, params: &ParamSet, eps: f64, max_coords: usize) -> f64
where
    F: Fn(&mut Graph, &ParamSet) -> NodeId,
{
    assert!(eps > 0.0 && eps <= 1e-2, "eps must be in (0, 1e-2]");
    let mut work = params.clone();
    work.zero_grads();
    let mut graph = Graph::new();
    let loss = build(&mut graph, &work);
    assert!(
        graph.value(loss).is_finite(),
        "non-finite loss in grad_check forward pass"
    );
    graph.backward(loss, &mut work);

    let names: Vec<String> = work.names().map(String::from).collect();
    let mut max_err: f64 = 0.0;
    for name in &names {
        let n = work.get(name).value.len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let analytic = work.get(name).grad[i];
            let orig = work.get(name).value.data[i];

            work.get_mut(name).value.data[i] = orig + eps;
            let mut g1 = Graph::new();
            let l1 = build(&mut g1, &work);
            let f1 = g1.value(l1).data[0];

            work.get_mut(name).value.data[i] = orig - eps;
            let mut g2 = Graph::new();
            let l2 = build(&mut g2, &work);
            let f2 = g2.value(l2).data[0];

            work.get_mut(name).value.data[i] = orig;
            let numeric = (f1 - f2) / (2.0 * eps);
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4], vec![0.0; 4]));
        let y = g.softmax(x);
        for v in &g.value(y).data {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(2..9);
            let t = Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect());
            let mut g = Graph::new();
            let x = g.constant(t);
            let y = g.softmax(x);
            let s: f64 = g.value(y).data.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(g.value(y).data.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert!((g.value(y).data[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "matmul shape mismatch")]
    fn matmul_incompatible_shapes_panics() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 2]));
        g.matmul(a, b);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let x = g.param(&params, "x");
        let y = g.mul(x, x);
        g.backward(y, &mut params);
        assert!((params.get("x").grad[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 0.7]));
        let mut g = Graph::new();
        let x = g.param(&params, "x");
        let y = g.softmax(x);
        let s = g.sum_all(y);
        g.backward(s, &mut params);
        for v in &params.get("x").grad {
            assert!(v.abs() < 1e-12, "expected ~0 gradient, got {v}");
        }
    }

    #[test]
    fn double_backward_accumulates_twice() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let x = g.param(&params, "x");
        let y = g.mul(x, x);
        g.backward(y, &mut params);
        g.backward(y, &mut params);
        assert!((params.get("x").grad[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn sgd_step_is_pure() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(2.0));
        params.get_mut("w").grad[0] = 1.0;
        let a = params.sgd_step(0.1);
        let b = params.sgd_step(0.1);
        assert!((a.get("w").value.data[0] - 1.9).abs() < 1e-15);
        assert_eq!(a.get("w").value.data, b.get("w").value.data);
        assert!((params.get("w").value.data[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_zero_lr_is_identity() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        params.get_mut("w").grad.copy_from_slice(&[5.0, 5.0, 5.0]);
        let out = params.sgd_step(0.0);
        assert_eq!(out.get("w").value.data, params.get("w").value.data);
    }

    #[test]
    fn sgd_step_preserves_parameter_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        for name in ["emb", "enc.w", "dec.b"] {
            params.insert(name, Tensor::uniform_init(vec![3, 2], &mut rng));
        }
        let out = params.sgd_step(0.05);
        let a: Vec<&str> = params.names().collect();
        let b: Vec<&str> = out.names().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(1.5));
        let mut adam = AdamState::new(&params, 0.003);
        adam.step(&mut params);
        assert!((params.get("w").value.data[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_on_quadratic() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(1.0));
        let mut adam = AdamState::new(&params, 0.003);
        params.get_mut("w").grad[0] = 2.0; // d(w^2)/dw at w=1
        adam.step(&mut params);
        assert!(params.get("w").value.data[0] < 1.0);
    }

    // scalar hand-simulation of the Adam recurrence against the tensor path
    #[test]
    fn adam_matches_scalar_hand_simulation() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(1.0));
        let mut adam = AdamState::new(&params, lr);

        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut prev_loss = f64::INFINITY;
        for t in 1..=10 {
            let grad = 2.0 * params.get("w").value.data[0];
            params.get_mut("w").grad[0] = grad;
            adam.step(&mut params);

            let gh = 2.0 * w;
            m = b1 * m + (1.0 - b1) * gh;
            v = b2 * v + (1.0 - b2) * gh * gh;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            w -= lr * mhat / (vhat.sqrt() + eps);

            assert!((params.get("w").value.data[0] - w).abs() < 1e-12);
            let loss = w * w;
            assert!(loss < prev_loss, "loss not monotone at step {t}");
            prev_loss = loss;
        }
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.25]));
        let err = grad_check(
            |g, p| {
                let w = g.param(p, "w");
                let c = g.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
                let y = g.mul(w, c);
                g.sum_all(y)
            },
            &params,
            1e-5,
            100,
        );
        assert!(err < 1e-8, "linear grad check error {err}");
    }

    #[test]
    fn grad_check_mixed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        params.insert("w", Tensor::uniform_init(vec![4, 4], &mut rng));
        params.insert("x", Tensor::uniform_init(vec![4], &mut rng));
        params.insert("b", Tensor::uniform_init(vec![4], &mut rng));
        let err = grad_check(
            |g, p| {
                let w = g.param(p, "w");
                let x = g.param(p, "x");
                let b = g.param(p, "b");
                let h = g.matmul(w, x);
                let h = g.add(h, b);
                let h = g.tanh(h);
                let s = g.sigmoid(h);
                let sm = g.softmax(h);
                let m = g.mul(s, sm);
                let lg = g.matmul_tv(w, m);
                let t = g.concat(&[m, lg]);
                let t = g.slice(t, 1, 5);
                g.sum_all(t)
            },
            &params,
            1e-5,
            100,
        );
        assert!(err < 1e-6, "mixed op grad check error {err}");
    }

    #[test]
    fn grad_check_scatter_scale_div() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = ParamSet::new();
        params.insert("s", Tensor::uniform_init(vec![3], &mut rng));
        params.insert("gate", Tensor::scalar(0.3));
        let err = grad_check(
            |g, p| {
                let s = g.param(p, "s");
                let gate_raw = g.param(p, "gate");
                let gate = g.sigmoid(gate_raw);
                let probs = g.softmax(s);
                let sc = g.scatter_add(probs, &[1, 3, 1], 5);
                let scaled = g.scale_by(sc, gate);
                let total = g.sum_all(scaled);
                let base = g.constant(Tensor::new(vec![5], vec![0.1; 5]));
                let mix = g.add(scaled, base);
                let norm = g.sum_all(mix);
                let mix = g.div_by_scalar(mix, norm);
                let picked = g.slice(mix, 1, 1);
                let cl = g.clamp_min(picked, 1e-12);
                let lp = g.log(cl);
                let neg = g.affine(lp, -1.0, 0.0);
                g.add(neg, total)
            },
            &params,
            1e-5,
            100,
        );
        assert!(err < 1e-6, "scatter/scale/div grad check error {err}");
    }

    #[test]
    fn grad_check_weighted_sum_and_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = ParamSet::new();
        params.insert("a", Tensor::uniform_init(vec![3], &mut rng));
        params.insert("b", Tensor::uniform_init(vec![3], &mut rng));
        params.insert("w", Tensor::uniform_init(vec![2], &mut rng));
        let err = grad_check(
            |g, p| {
                let a = g.param(p, "a");
                let b = g.param(p, "b");
                let w = g.param(p, "w");
                let aw = g.softmax(w);
                let ctx = g.weighted_sum(aw, &[a, b]);
                let d = g.dot(ctx, a);
                let s = g.sub(ctx, b);
                let s2 = g.dot(s, s);
                g.add(d, s2)
            },
            &params,
            1e-5,
            100,
        );
        assert!(err < 1e-6, "weighted_sum/dot grad check error {err}");
    }

    #[test]
    fn grad_check_dropout_and_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut params = ParamSet::new();
        params.insert("emb", Tensor::uniform_init(vec![5, 3], &mut rng));
        let mask = vec![2.0, 0.0, 2.0];
        let err = grad_check(
            move |g, p| {
                let emb = g.param(p, "emb");
                let r1 = g.embed_row(emb, 2);
                let r2 = g.embed_row(emb, 2); // repeated row accumulates
                let d = g.dropout(r1, &mask);
                let m = g.mul(d, r2);
                g.sum_all(m)
            },
            &params,
            1e-5,
            100,
        );
        assert!(err < 1e-6, "dropout/embedding grad check error {err}");
    }
}
