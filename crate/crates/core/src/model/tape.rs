//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Only the handful of ops the denoiser needs are provided. Attention, layer
//! norm and the losses are fused ops with hand-written backward passes.

use ndarray::{s, Array2, ArrayView2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Slot of this node in [`Tape::backward`]'s result.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout of a batched attention call: `batch` examples, each with
/// `q_len` query rows and `k_len` key rows stored contiguously.
#[derive(Debug, Clone)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `true` for keys that may be attended to, `batch * k_len` entries.
    pub key_mask: Vec<bool>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Vec<f64>),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, null: Option<(Var, Var)>, layout: AttnLayout, probs: Vec<Array2<f64>> },
    SqErr { a: Var, b: Var, weights: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Array2<f64> },
    MeanPool { x: Var, rows: usize, weights: Vec<f64> },
    Sum(Vec<(Var, f64)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Per attention call with a null slot: mass on real keys per query row, averaged over heads.
    pub key_mass: Vec<Vec<f64>>,
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn softmax_rows_masked(scores: &mut Array2<f64>, valid: &[bool]) {
    for mut row in scores.rows_mut() {
        let mut max = f64::NEG_INFINITY;
        for (j, v) in row.iter().enumerate() {
            if valid[j] && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if valid[j] { (*v - max).exp() } else { 0.0 };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1 × m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + &self.value(b).row(0);
        self.push(v, Op::AddRow(a, b))
    }

    /// Multiplies row `r` of `a` by the constant `scale[r]`.
    pub fn scale_rows(&mut self, a: Var, scale: Vec<f64>) -> Var {
        let mut v = self.value(a).clone();
        for (mut row, s) in v.rows_mut().into_iter().zip(&scale) {
            row.mapv_inplace(|x| x * s);
        }
        self.push(v, Op::ScaleRows(a, scale))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(out, Op::Gather { table, ids })
    }

    /// Multi-head scaled dot-product attention. With `null = Some((k, v))` every
    /// example gets one extra always-valid key/value slot; the mass that does not
    /// go to it is recorded in [`Tape::key_mass`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, null: Option<(Var, Var)>, layout: AttnLayout) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let extra = usize::from(null.is_some());
        let kext = layout.k_len + extra;
        let mut out = Array2::zeros((layout.batch * layout.q_len, d));
        let mut probs = Vec::with_capacity(layout.batch * layout.heads);
        let mut mass = vec![0.0; layout.batch * layout.q_len];
        for b in 0..layout.batch {
            let (q0, k0) = (b * layout.q_len, b * layout.k_len);
            let mut valid = vec![true; extra];
            valid.extend_from_slice(&layout.key_mask[k0..k0 + layout.k_len]);
            for h in 0..layout.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![q0..q0 + layout.q_len, cols.clone()]);
                let (keys, vals) = self.ext_kv(kv, vv, null, k0, layout.k_len, cols.clone());
                let mut sc = qh.dot(&keys.t()) * scale;
                softmax_rows_masked(&mut sc, &valid);
                out.slice_mut(s![q0..q0 + layout.q_len, cols]).assign(&sc.dot(&vals));
                if null.is_some() {
                    for i in 0..layout.q_len {
                        mass[q0 + i] += (1.0 - sc[[i, 0]]) / layout.heads as f64;
                    }
                }
                debug_assert_eq!(sc.ncols(), kext);
                probs.push(sc);
            }
        }
        if null.is_some() {
            self.key_mass.push(mass);
        }
        self.push(out, Op::Attention { q, k, v, null, layout, probs })
    }

    fn ext_kv(
        &self,
        kv: &Array2<f64>,
        vv: &Array2<f64>,
        null: Option<(Var, Var)>,
        k0: usize,
        k_len: usize,
        cols: std::ops::Range<usize>,
    ) -> (Array2<f64>, Array2<f64>) {
        let kh = kv.slice(s![k0..k0 + k_len, cols.clone()]);
        let vh = vv.slice(s![k0..k0 + k_len, cols.clone()]);
        match null {
            None => (kh.to_owned(), vh.to_owned()),
            Some((nk, nv)) => {
                let nk = self.value(nk).slice(s![0..1, cols.clone()]).to_owned();
                let nv = self.value(nv).slice(s![0..1, cols]).to_owned();
                (
                    ndarray::concatenate(Axis(0), &[nk.view(), kh]).expect("same width"),
                    ndarray::concatenate(Axis(0), &[nv.view(), vh]).expect("same width"),
                )
            }
        }
    }

    /// `Σ_r weights[r] · ‖a_r − b_r‖²` as a `1 × 1` value.
    pub fn sq_err(&mut self, a: Var, b: Var, weights: Vec<f64>) -> Var {
        let diff = self.value(a) - self.value(b);
        let total: f64 = diff.rows().into_iter().zip(&weights).map(|(r, w)| w * r.dot(&r)).sum();
        self.push(Array2::from_elem((1, 1), total), Op::SqErr { a, b, weights })
    }

    /// `Σ_r weights[r] · −log softmax(logits_r)[targets[r]]` as a `1 × 1` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        let lv = self.value(logits);
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
            if weights[r] != 0.0 {
                total += weights[r] * -(lv[[r, targets[r]]] - max - sum.ln());
            }
        }
        self.push(Array2::from_elem((1, 1), total), Op::CrossEntropy { logits, targets, weights, probs })
    }

    /// Weighted sum over consecutive blocks of `rows` rows: output row `b` is
    /// `Σ_i weights[b*rows + i] · x[b*rows + i]`.
    pub fn mean_pool(&mut self, x: Var, rows: usize, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        let batch = xv.nrows() / rows;
        let mut out = Array2::zeros((batch, xv.ncols()));
        for b in 0..batch {
            for i in 0..rows {
                let r = b * rows + i;
                if weights[r] != 0.0 {
                    out.row_mut(b).scaled_add(weights[r], &xv.row(r));
                }
            }
        }
        self.push(out, Op::MeanPool { x, rows, weights })
    }

    /// Weighted sum of `1 × 1` values.
    pub fn sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let total = terms.iter().map(|(v, w)| w * self.scalar(*v)).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(terms))
    }

    /// Reverse pass from a `1 × 1` node. Returns one gradient slot per node;
    /// slots of nodes that do not influence `root` stay `None`.
    pub fn backward(&self, root: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn backprop_node(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
            match &mut grads[v.0] {
                Some(x) => *x += &delta,
                slot @ None => *slot = Some(delta),
            }
        }
        fn acc_view(grads: &mut [Option<Array2<f64>>], v: Var, shape: (usize, usize), f: impl FnOnce(&mut Array2<f64>)) {
            let slot = grads[v.0].get_or_insert_with(|| Array2::zeros(shape));
            f(slot);
        }
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.dot(&self.value(*b).t()));
                acc(grads, *b, self.value(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                acc(grads, *a, g.dot(self.value(*b)));
                acc(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::ScaleRows(a, scale) => {
                let mut d = g.clone();
                for (mut row, s) in d.rows_mut().into_iter().zip(scale) {
                    row.mapv_inplace(|x| x * s);
                }
                acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = ndarray::Zip::from(g).and(self.value(*a)).map_collect(|g, x| g * gelu_grad(*x));
                acc(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gm = self.value(*gamma).row(0).to_owned();
                acc(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let d = xhat.ncols() as f64;
                let mut dx = g * &gm;
                for ((mut row, xh), is) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                    let mean_g = row.sum() / d;
                    let mean_gx = row.dot(&xh) / d;
                    for (v, h) in row.iter_mut().zip(xh) {
                        *v = is * (*v - mean_g - h * mean_gx);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Gather { table, ids } => {
                let shape = self.value(*table).dim();
                acc_view(grads, *table, shape, |t| {
                    for (r, &id) in ids.iter().enumerate() {
                        t.row_mut(id).scaled_add(1.0, &g.row(r));
                    }
                });
            }
            Op::Attention { q, k, v, null, layout, probs } => self.attention_backward(g, *q, *k, *v, *null, layout, probs, grads),
            Op::SqErr { a, b, weights } => {
                let s = g[[0, 0]];
                let mut d = self.value(*a) - self.value(*b);
                for (mut row, w) in d.rows_mut().into_iter().zip(weights) {
                    row.mapv_inplace(|x| 2.0 * w * s * x);
                }
                acc(grads, *b, -&d);
                acc(grads, *a, d);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let s = g[[0, 0]];
                let mut d = probs.clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    row[targets[r]] -= 1.0;
                    let w = weights[r] * s;
                    row.mapv_inplace(|x| x * w);
                }
                acc(grads, *logits, d);
            }
            Op::MeanPool { x, rows, weights } => {
                let shape = self.value(*x).dim();
                acc_view(grads, *x, shape, |dx| {
                    for (r, w) in weights.iter().enumerate() {
                        if *w != 0.0 {
                            dx.row_mut(r).scaled_add(*w, &g.row(r / rows));
                        }
                    }
                });
            }
            Op::Sum(terms) => {
                for (v, w) in terms {
                    acc(grads, *v, Array2::from_elem((1, 1), w * g[[0, 0]]));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Array2<f64>,
        q: Var,
        k: Var,
        v: Var,
        null: Option<(Var, Var)>,
        layout: &AttnLayout,
        probs: &[Array2<f64>],
        grads: &mut [Option<Array2<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let extra = usize::from(null.is_some());
        let mut dq = Array2::zeros(qv.dim());
        let mut dk = Array2::zeros(kv.dim());
        let mut dv = Array2::zeros(vv.dim());
        let mut dnk = Array2::<f64>::zeros((1, d));
        let mut dnv = Array2::<f64>::zeros((1, d));
        for b in 0..layout.batch {
            let (q0, k0) = (b * layout.q_len, b * layout.k_len);
            for h in 0..layout.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &probs[b * layout.heads + h];
                let go: ArrayView2<f64> = g.slice(s![q0..q0 + layout.q_len, cols.clone()]);
                let qh = qv.slice(s![q0..q0 + layout.q_len, cols.clone()]);
                let (keys, vals) = self.ext_kv(kv, vv, null, k0, layout.k_len, cols.clone());
                let dvals = p.t().dot(&go);
                let dp = go.dot(&vals.t());
                let mut ds = &dp * p;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = row.sum();
                    for (x, pp) in row.iter_mut().zip(prow) {
                        *x -= pp * dot;
                    }
                }
                // ds currently holds P ⊙ dP − P·rowsum(P ⊙ dP)
                ds.mapv_inplace(|x| x * scale);
                dq.slice_mut(s![q0..q0 + layout.q_len, cols.clone()]).scaled_add(1.0, &ds.dot(&keys));
                let dkeys = ds.t().dot(&qh);
                if extra == 1 {
                    dnk.slice_mut(s![0..1, cols.clone()]).scaled_add(1.0, &dkeys.slice(s![0..1, ..]));
                    dnv.slice_mut(s![0..1, cols.clone()]).scaled_add(1.0, &dvals.slice(s![0..1, ..]));
                }
                dk.slice_mut(s![k0..k0 + layout.k_len, cols.clone()]).scaled_add(1.0, &dkeys.slice(s![extra.., ..]));
                dv.slice_mut(s![k0..k0 + layout.k_len, cols]).scaled_add(1.0, &dvals.slice(s![extra.., ..]));
            }
        }
        let mut acc = |v: Var, delta: Array2<f64>| match &mut grads[v.0] {
            Some(x) => *x += &delta,
            slot @ None => *slot = Some(delta),
        };
        acc(q, dq);
        acc(k, dk);
        acc(v, dv);
        if let Some((nk, nv)) = null {
            acc(nk, dnk);
            acc(nv, dnv);
        }
    }
}
