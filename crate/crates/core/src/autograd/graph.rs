use std::collections::HashMap;

use rand::Rng;

use super::tensor::{gemm, Tensor, View};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which parameter set a trainable leaf belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    Policy,
    Context,
    Reward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub group: Group,
    pub index: usize,
}

/// Token layout for the fused multi-head attention op.
///
/// Rows of q/k/v are `n_seq` consecutive blocks of `seq_len` tokens.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub n_seq: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub causal: bool,
    /// One flag per row; invalid tokens are never attended to.
    pub key_valid: Vec<bool>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Gather {
        sources: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
    RowNorm(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    SegmentSum {
        x: Var,
        segment: Vec<usize>,
    },
    BtCrossEntropy {
        diff: Var,
        labels: Vec<f64>,
        probs: Vec<f64>,
        clamp: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape.
///
/// Build a scalar loss with the op methods, then call [`Graph::backward`].
/// Parameters enter through [`Graph::param`], which deduplicates by key so a
/// network used twice in one loss accumulates into a single gradient.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
}

/// Parameter gradients produced by a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.map.get(&key)
    }

    /// Gradients of one group in parameter order; untouched parameters get `None`.
    pub fn group(&self, group: Group, n_params: usize) -> Vec<Option<Tensor>> {
        (0..n_params)
            .map(|index| self.map.get(&ParamKey { group, index }).cloned())
            .collect()
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.map.keys().any(|k| k.group == group)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf. Registering the same key twice returns the same node.
    pub fn param(&mut self, key: ParamKey, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(key), true);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul shape mismatch");
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            av.data(),
            View::row_major(0, k),
            bv.data(),
            View::row_major(0, n),
            0.0,
            out.data_mut(),
            View::row_major(0, n),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Adds a `1 x n` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows(), 1);
        assert_eq!(av.cols(), bv.cols(), "bias width mismatch");
        let mut out = av.clone();
        let cols = av.cols();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(out.cols(), cols);
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x < 0.0 { 0.0 } else { x });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (both `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), cols);
        assert_eq!(b.len(), cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                o[c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Fused scaled-dot-product multi-head attention with key masking.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        assert_eq!(kv.shape(), qv.shape());
        assert_eq!(vv.shape(), qv.shape());
        let t = layout.seq_len;
        assert_eq!(qv.rows(), layout.n_seq * t, "attention row count mismatch");
        assert_eq!(layout.key_valid.len(), qv.rows());
        assert_eq!(width % layout.n_heads, 0, "width not divisible by heads");
        let dh = width / layout.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; layout.n_seq * layout.n_heads * t * t];
        let mut out = Tensor::zeros(qv.rows(), width);
        for s in 0..layout.n_seq {
            for h in 0..layout.n_heads {
                let base = s * t * width + h * dh;
                let p = &mut probs[(s * layout.n_heads + h) * t * t..][..t * t];
                // scores = Q K^T
                gemm(
                    t,
                    dh,
                    t,
                    qv.data(),
                    View::row_major(base, width),
                    kv.data(),
                    View::transposed(base, width),
                    0.0,
                    p,
                    View::row_major(0, t),
                );
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let mut max = f64::NEG_INFINITY;
                    for (j, x) in row.iter_mut().enumerate() {
                        let allowed = layout.key_valid[s * t + j] && (!layout.causal || j <= i);
                        if allowed {
                            *x *= scale;
                            max = max.max(*x);
                        } else {
                            *x = f64::NEG_INFINITY;
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        row.iter_mut().for_each(|x| *x = 0.0);
                        continue;
                    }
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= sum);
                }
                gemm(
                    t,
                    t,
                    dh,
                    p,
                    View::row_major(0, t),
                    vv.data(),
                    View::row_major(base, width),
                    0.0,
                    out.data_mut(),
                    View::row_major(base, width),
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            ng,
        )
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data);
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Builds a new tensor whose row `r` is row `index[r].1` of `sources[index[r].0]`.
    pub fn gather(&mut self, sources: &[Var], index: Vec<(usize, usize)>) -> Var {
        let cols = self.value(sources[0]).cols();
        for &s in sources {
            assert_eq!(self.value(s).cols(), cols, "gather sources differ in width");
        }
        let mut out = Tensor::zeros(index.len(), cols);
        for (r, &(src, row)) in index.iter().enumerate() {
            out.row_mut(r)
                .copy_from_slice(self.value(sources[src]).row(row));
        }
        let ng = sources.iter().any(|&s| self.ng(s));
        self.push(
            out,
            Op::Gather {
                sources: sources.to_vec(),
                index,
            },
            ng,
        )
    }

    /// Euclidean norm of each row, as an `n x 1` column.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows())
            .map(|r| xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::from_vec(xv.rows(), 1, data);
        let ng = self.ng(x);
        self.push(out, Op::RowNorm(x), ng)
    }

    /// `sum_i w_i x_i` over all entries, as a `1 x 1` tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(weights.len(), xv.len());
        let s = xv.data().iter().zip(&weights).map(|(a, w)| a * w).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, vec![1.0 / n as f64; n])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, vec![1.0; n])
    }

    /// Sums the rows of an `n x 1` column into `n_segments` buckets.
    pub fn segment_sum(&mut self, x: Var, segment: Vec<usize>, n_segments: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 1);
        assert_eq!(segment.len(), xv.rows());
        let mut out = Tensor::zeros(n_segments, 1);
        for (r, &s) in segment.iter().enumerate() {
            out.data_mut()[s] += xv.data()[r];
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentSum { x, segment }, ng)
    }

    /// Mean pairwise cross-entropy for logit differences `diff` and labels
    /// `y` where `y = 0` means the first item is preferred.
    ///
    /// Probabilities are clamped to `[clamp, 1 - clamp]` before the log; the
    /// gradient is zero where the clamp is active.
    pub fn bt_cross_entropy(&mut self, diff: Var, labels: Vec<f64>, clamp: f64) -> Var {
        let dv = self.value(diff);
        assert_eq!(dv.cols(), 1);
        assert_eq!(labels.len(), dv.rows());
        let probs: Vec<f64> = dv.data().iter().map(|&d| sigmoid(d)).collect();
        let n = labels.len() as f64;
        let loss = probs
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let pc = p.clamp(clamp, 1.0 - clamp);
                -((1.0 - y) * pc.ln() + y * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let ng = self.ng(diff);
        self.push(
            Tensor::scalar(loss),
            Op::BtCrossEntropy {
                diff,
                labels,
                probs,
                clamp,
            },
            ng,
        )
    }

    /// Backpropagates from the scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(key) => {
                    out.map.insert(*key, g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.ng(*a) {
                        let ga = acc(&mut grads, *a, m, k);
                        // dA = dC . B^T
                        gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            View::row_major(0, n),
                            bv.data(),
                            View::transposed(0, n),
                            1.0,
                            ga.data_mut(),
                            View::row_major(0, k),
                        );
                    }
                    if self.ng(*b) {
                        let gb = acc(&mut grads, *b, k, n);
                        // dB = A^T . dC
                        gemm(
                            k,
                            m,
                            n,
                            av.data(),
                            View::transposed(0, k),
                            g.data(),
                            View::row_major(0, n),
                            1.0,
                            gb.data_mut(),
                            View::row_major(0, n),
                        );
                    }
                }
                Op::AddBias(a, b) => {
                    if self.ng(*b) {
                        let gb = acc(&mut grads, *b, 1, g.cols());
                        for r in 0..g.rows() {
                            for (x, y) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *x += y;
                            }
                        }
                    }
                    if self.ng(*a) {
                        acc_owned(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc_owned(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc_owned(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.rows(), g.cols()).add_assign(&g);
                    }
                    if self.ng(*b) {
                        let gb = acc(&mut grads, *b, g.rows(), g.cols());
                        for (x, y) in gb.data_mut().iter_mut().zip(g.data()) {
                            *x -= y;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, g.rows(), g.cols());
                    for (x, y) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += s * y;
                    }
                }
                Op::Relu(a) => {
                    let xv = self.value(*a).data();
                    let ga = acc(&mut grads, *a, g.rows(), g.cols());
                    for ((x, y), inp) in ga.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        if *inp > 0.0 {
                            *x += y;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let yv = node.value.data();
                    let ga = acc(&mut grads, *a, g.rows(), g.cols());
                    for ((x, d), t) in ga.data_mut().iter_mut().zip(g.data()).zip(yv) {
                        *x += d * (1.0 - t * t);
                    }
                }
                Op::Square(a) => {
                    let xv = self.value(*a).data();
                    let ga = acc(&mut grads, *a, g.rows(), g.cols());
                    for ((x, d), inp) in ga.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        *x += 2.0 * inp * d;
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = g.shape();
                    let gam = self.value(*gamma).data().to_vec();
                    if self.ng(*gamma) {
                        let gg = acc(&mut grads, *gamma, 1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg.data_mut()[c] += g.get(r, c) * xhat[r * cols + c];
                            }
                        }
                    }
                    if self.ng(*beta) {
                        let gb = acc(&mut grads, *beta, 1, cols);
                        for r in 0..rows {
                            for (x, y) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *x += y;
                            }
                        }
                    }
                    if self.ng(*x) {
                        let gx = acc(&mut grads, *x, rows, cols);
                        let mut dxhat = vec![0.0; cols];
                        for r in 0..rows {
                            let h = &xhat[r * cols..(r + 1) * cols];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for c in 0..cols {
                                dxhat[c] = g.get(r, c) * gam[c];
                                m1 += dxhat[c];
                                m2 += dxhat[c] * h[c];
                            }
                            m1 /= cols as f64;
                            m2 /= cols as f64;
                            let out = gx.row_mut(r);
                            for c in 0..cols {
                                out[c] += rstd[r] * (dxhat[c] - m1 - h[c] * m2);
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, layout, probs);
                }
                Op::Dropout { x, mask } => {
                    let gx = acc(&mut grads, *x, g.rows(), g.cols());
                    for ((a, d), m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *a += d * m;
                    }
                }
                Op::Gather { sources, index } => {
                    for (r, &(src, row)) in index.iter().enumerate() {
                        let s = sources[src];
                        if !self.ng(s) {
                            continue;
                        }
                        let (sr, sc) = self.value(s).shape();
                        let gs = acc(&mut grads, s, sr, sc);
                        for (a, d) in gs.row_mut(row).iter_mut().zip(g.row(r)) {
                            *a += d;
                        }
                    }
                }
                Op::RowNorm(x) => {
                    let xv = self.value(*x);
                    let (rows, cols) = xv.shape();
                    let gx = acc(&mut grads, *x, rows, cols);
                    for r in 0..rows {
                        let norm = node.value.data()[r];
                        if norm == 0.0 {
                            continue;
                        }
                        let f = g.data()[r] / norm;
                        for (a, xi) in gx.row_mut(r).iter_mut().zip(xv.row(r)) {
                            *a += f * xi;
                        }
                    }
                }
                Op::WeightedSum { x, weights } => {
                    let d = g.item();
                    let (rows, cols) = self.value(*x).shape();
                    let gx = acc(&mut grads, *x, rows, cols);
                    for (a, w) in gx.data_mut().iter_mut().zip(weights) {
                        *a += d * w;
                    }
                }
                Op::SegmentSum { x, segment } => {
                    let rows = self.value(*x).rows();
                    let gx = acc(&mut grads, *x, rows, 1);
                    for (r, &s) in segment.iter().enumerate() {
                        gx.data_mut()[r] += g.data()[s];
                    }
                }
                Op::BtCrossEntropy {
                    diff,
                    labels,
                    probs,
                    clamp,
                } => {
                    let d = g.item();
                    let n = labels.len() as f64;
                    let gd = acc(&mut grads, *diff, labels.len(), 1);
                    for (r, (&p, &y)) in probs.iter().zip(labels).enumerate() {
                        if p > *clamp && p < 1.0 - *clamp {
                            gd.data_mut()[r] += d * (p - (1.0 - y)) / n;
                        }
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[f64],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.shape();
        let t = layout.seq_len;
        let dh = width / layout.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(rows, width);
        let mut dk = Tensor::zeros(rows, width);
        let mut dv = Tensor::zeros(rows, width);
        let mut dp = vec![0.0; t * t];
        for s in 0..layout.n_seq {
            for h in 0..layout.n_heads {
                let base = s * t * width + h * dh;
                let p = &probs[(s * layout.n_heads + h) * t * t..][..t * t];
                // dV = P^T dO
                gemm(
                    t,
                    t,
                    dh,
                    p,
                    View::transposed(0, t),
                    g.data(),
                    View::row_major(base, width),
                    0.0,
                    dv.data_mut(),
                    View::row_major(base, width),
                );
                // dP = dO V^T
                gemm(
                    t,
                    dh,
                    t,
                    g.data(),
                    View::row_major(base, width),
                    vv.data(),
                    View::transposed(base, width),
                    0.0,
                    &mut dp,
                    View::row_major(0, t),
                );
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (d, &pp) in dr.iter_mut().zip(pr) {
                        *d = pp * (*d - dot) * scale;
                    }
                }
                // dQ = dS K
                gemm(
                    t,
                    t,
                    dh,
                    &dp,
                    View::row_major(0, t),
                    kv.data(),
                    View::row_major(base, width),
                    0.0,
                    dq.data_mut(),
                    View::row_major(base, width),
                );
                // dK = dS^T Q
                gemm(
                    t,
                    t,
                    dh,
                    &dp,
                    View::transposed(0, t),
                    qv.data(),
                    View::row_major(base, width),
                    0.0,
                    dk.data_mut(),
                    View::row_major(base, width),
                );
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.ng(var) {
                acc_owned(grads, var, d);
            }
        }
    }
}

fn acc_owned(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(rows, cols));
    }
    slot.as_mut().expect("gradient slot just initialised")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(i: usize) -> ParamKey {
        ParamKey {
            group: Group::Policy,
            index: i,
        }
    }

    #[test]
    fn matmul_gradient_by_hand() {
        let mut g = Graph::new();
        let a = g.param(key(0), &Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let b = g.param(key(1), &Tensor::from_vec(2, 1, vec![3.0, 4.0]));
        let c = g.matmul(a, b);
        let loss = g.sum(c);
        assert_eq!(g.value(loss).item(), 11.0);
        let grads = g.backward(loss);
        assert_eq!(grads.get(key(0)).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(key(1)).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn repeated_param_registration_shares_gradient() {
        let mut g = Graph::new();
        let t = Tensor::from_vec(1, 1, vec![3.0]);
        let a = g.param(key(0), &t);
        let a2 = g.param(key(0), &t);
        assert_eq!(a, a2);
        let s = g.add(a, a2);
        let loss = g.sum(s);
        let grads = g.backward(loss);
        assert_eq!(grads.get(key(0)).unwrap().item(), 2.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param(key(0), &Tensor::scalar(5.0));
        let prod = g.matmul(c, p);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        assert_eq!(grads.get(key(0)).unwrap().item(), 2.0);
        assert!(!grads.has_group(Group::Encoder));
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(
            3,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        ));
        let layout = AttnLayout {
            n_seq: 1,
            seq_len: 3,
            n_heads: 1,
            causal: true,
            key_valid: vec![true; 3],
        };
        let out = g.attention(x, x, x, layout);
        // causal: the first token can only attend to itself
        assert_eq!(g.value(out).row(0), &[1.0, 0.0]);
    }

    #[test]
    fn masked_keys_are_ignored() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(2, 1, vec![1.0, 100.0]));
        let layout = AttnLayout {
            n_seq: 1,
            seq_len: 2,
            n_heads: 1,
            causal: false,
            key_valid: vec![true, false],
        };
        let out = g.attention(x, x, x, layout);
        assert_eq!(g.value(out).data(), &[1.0, 1.0]);
    }

    #[test]
    fn bt_cross_entropy_at_even_odds_is_ln2() {
        let mut g = Graph::new();
        let d = g.constant(Tensor::from_vec(2, 1, vec![0.0, 0.0]));
        let loss = g.bt_cross_entropy(d, vec![0.0, 0.5], 1e-7);
        let expected = std::f64::consts::LN_2;
        assert!((g.value(loss).item() - expected).abs() < 1e-15);
    }
}
