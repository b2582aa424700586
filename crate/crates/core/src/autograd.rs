//! A minimal reverse-mode tape over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1×1`. A [`Graph`] records
//! operations as they execute and [`Graph::backward`] walks the tape in
//! reverse, accumulating gradients for parameter leaves into [`Grads`].

use ndarray::{s, Array2, Axis, Zip};

use crate::grounding;

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Named, shaped parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Mat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl Params {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            values: self.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect(),
        }
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients aligned with a [`Params`] set.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    values: Vec<Mat>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mat> {
        self.values.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.values.iter_mut()
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.values {
            g.mapv_inplace(|x| x * factor);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        NodeId(i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Softmax(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Reshape(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Mat,
    },
    SeeMse {
        logits: NodeId,
        targets: Vec<f64>,
        probs: Mat,
        expected: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records a forward computation for one backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// The leaf for a parameter, created once per graph.
    pub fn param(&mut self, params: &Params, id: ParamId) -> NodeId {
        if self.param_nodes.len() <= id.0 {
            self.param_nodes.resize(id.0 + 1, None);
        }
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let n = self.push(params.get(id).clone(), Op::Param(id));
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    /// `x · w + b` with `b` a `1×n` row.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let v = &xhat * self.value(gain) + self.value(bias);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| {
            let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked for `j > i`.
    pub fn softmax(&mut self, a: NodeId, causal: bool) -> NodeId {
        let mut v = self.value(a).clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let limit = if causal { (i + 1).min(row.len()) } else { row.len() };
            let mut active = row.slice_mut(s![..limit]);
            softmax_in_place(active.as_slice_mut().expect("contiguous row"));
            row.slice_mut(s![limit..]).fill(0.0);
        }
        self.push(v, Op::Softmax(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("matching row counts");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    /// Rows `ids` of `table`, in order; repeated ids are allowed.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut v = Mat::zeros((ids.len(), t.ncols()));
        for (mut row, &id) in v.rows_mut().into_iter().zip(ids) {
            row.assign(&t.row(id));
        }
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape size mismatch");
        let flat: Vec<f64> = src.iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(v, Op::Reshape(a))
    }

    /// Mean negative log-likelihood of `targets[i]` under row `i` of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logit row");
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            let slice = row.as_slice_mut().expect("contiguous row");
            let lse = log_sum_exp(slice);
            total += lse - slice[t];
            for p in slice.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let n = targets.len().max(1) as f64;
        let v = Mat::from_elem((1, 1), total / n);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// See loss for `K` grounded positions. `logits` is `8K × 1000`, row
    /// `8k + j` scoring coordinate `j` of position `k`; `targets` holds the
    /// `8K` ground-truth bins in the same order. Averages over positions.
    pub fn see_mse(&mut self, logits: NodeId, targets: &[f64]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(targets.len() % 8, 0);
        let mut probs = lv.clone();
        let mut expected = Vec::with_capacity(targets.len());
        for mut row in probs.rows_mut() {
            let slice = row.as_slice_mut().expect("contiguous row");
            softmax_in_place(slice);
            expected.push(grounding::expected_coord_slice(slice));
        }
        let positions = (targets.len() / 8).max(1);
        let total: f64 = expected
            .chunks(8)
            .zip(targets.chunks(8))
            .map(|(e, t)| grounding::see_loss_values(e, t))
            .sum();
        let v = Mat::from_elem((1, 1), total / positions as f64);
        self.push(
            v,
            Op::SeeMse {
                logits,
                targets: targets.to_vec(),
                probs,
                expected,
            },
        )
    }

    /// Sum of `1×1` nodes, each scaled by its weight.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut acc: Option<NodeId> = None;
        for &(n, w) in terms {
            let scaled = if w == 1.0 { n } else { self.scale(n, w) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled),
            });
        }
        acc.unwrap_or_else(|| self.constant(Mat::zeros((1, 1))))
    }

    /// Backpropagates from a `1×1` node and returns parameter gradients
    /// aligned with `params`.
    pub fn backward(&self, root: NodeId, params: &Params) -> Grads {
        let mut grads = params.zeros_like();
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Mat::ones(self.nodes[root.0].value.raw_dim()));

        fn acc(adj: &mut [Option<Mat>], id: NodeId, g: Mat) {
            match &mut adj[id.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => grads.values[pid.0] += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *row, gr);
                    acc(&mut adj, *a, g);
                }
                Op::Scale(a, f) => acc(&mut adj, *a, g * *f),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    acc(&mut adj, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut adj,
                        *gain,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * gv;
                    let cols = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.raw_dim());
                    for (((mut out, dh), xh), is) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(dxhat.rows())
                        .zip(xhat.rows())
                        .zip(inv_std)
                    {
                        let m1 = dh.sum() / cols;
                        let m2 = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                        Zip::from(&mut out)
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &d, &h| *o = is * (d - m1 - h * m2));
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        let u = GELU_K * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gv, &yv| *gv = yv * (*gv - dot));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut adj, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut adj, p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut adj, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let mut gt = Mat::zeros(self.value(*table).raw_dim());
                    for (row, &id) in g.rows().into_iter().zip(ids) {
                        let mut dst = gt.row_mut(id);
                        dst += &row;
                    }
                    acc(&mut adj, *table, gt);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).raw_dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(
                        &mut adj,
                        *a,
                        Mat::from_shape_vec(shape, flat).expect("reshape back"),
                    );
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]] / targets.len().max(1) as f64;
                    let mut gl = probs.clone();
                    for (mut row, &t) in gl.rows_mut().into_iter().zip(targets) {
                        row[t] -= 1.0;
                    }
                    gl.mapv_inplace(|v| v * scale);
                    acc(&mut adj, *logits, gl);
                }
                Op::SeeMse {
                    logits,
                    targets,
                    probs,
                    expected,
                } => {
                    let positions = (targets.len() / 8).max(1) as f64;
                    let scale = g[[0, 0]] / positions;
                    let mut gl = Mat::zeros(probs.raw_dim());
                    for (r, mut out) in gl.rows_mut().into_iter().enumerate() {
                        let b = probs.row(r);
                        grounding::see_loss_grad_logits_row(
                            b.as_slice().expect("contiguous"),
                            expected[r],
                            targets[r],
                            scale,
                            out.as_slice_mut().expect("contiguous"),
                        );
                    }
                    acc(&mut adj, *logits, gl);
                }
            }
        }
        grads
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Max-subtracted softmax over a slice.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
