//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Forward calls append nodes to an arena; `backward` replays the arena in
//! reverse and accumulates gradients. Inputs always precede outputs in the
//! arena, so one reverse sweep visits every node after all of its consumers.
//! All reductions run in fixed index order, which makes both the forward
//! values and the gradients bit-reproducible for a given graph.

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, Scalar, Tensor};

/// Norm threshold below which l2_normalize and cosine refuse to divide.
pub const NORM_EPS: f64 = 1e-8;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Sentinel for "no valid convolution window" in max-pool argmax records.
const NO_WINDOW: usize = usize::MAX;

enum Op {
    Leaf,
    /// y = W·x + b with x:[n], W:[m,n], b:[m].
    Affine { x: Var, w: Var, b: Var },
    Relu { x: Var },
    L2Normalize { x: Var },
    Dot { a: Var, b: Var },
    Cosine { a: Var, b: Var },
    /// max(0, neg - pos + margin); margin >= 0.
    HingeRank { pos: Var, neg: Var },
    Sum { x: Var },
    MeanScalars { xs: Vec<Var> },
    Concat { parts: Vec<Var> },
    /// Mean of the listed rows of a [rows, d] table; empty list yields zeros.
    EmbeddingMean { table: Var, rows: Vec<usize> },
    /// Rows of a [rows, d] table stacked into a [len, d] sequence.
    EmbeddingSeq { table: Var, rows: Vec<usize> },
    /// 1-D convolution over a [len, d] sequence with max-over-time pooling.
    /// w:[channels, width*d], b:[channels]; argmax[c] records the winning
    /// window start per channel (NO_WINDOW when len < width).
    ConvMaxPool {
        seq: Var,
        w: Var,
        b: Var,
        width: usize,
        argmax: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by one backward pass. Nodes the root does not
/// depend on have no entry.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if ws.len() != 2 || xs.len() != 1 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(Error::shape(
                "affine",
                "x [n], w [m, n], b [m]",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            out.push(dot(&wv[i * n..(i + 1) * n], xv) + bv[i]);
        }
        Ok(self.push(Tensor::vector(out), Op::Affine { x, w, b }))
    }

    /// max(0, x) elementwise. NaN passes through rather than flushing to
    /// zero so corrupted inputs reach the loss and trip divergence handling.
    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() || v.is_nan() { v } else { T::zero() })
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out).expect("relu preserves shape"), Op::Relu { x })
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 1 {
            return Err(Error::shape("l2_normalize", "1-D vector", format!("{:?}", xv.shape())));
        }
        let norm = l2_norm(xv.data());
        if norm.to_f64() <= NORM_EPS {
            return Err(Error::Degenerate {
                op: "l2_normalize",
                norm: norm.to_f64(),
                eps: NORM_EPS,
            });
        }
        let out: Vec<T> = xv.data().iter().map(|&v| v / norm).collect();
        Ok(self.push(Tensor::vector(out), Op::L2Normalize { x }))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asp, bsp) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if asp.len() != 1 || asp != bsp {
            return Err(Error::shape(
                "dot",
                "two 1-D vectors of equal length",
                format!("{asp:?} and {bsp:?}"),
            ));
        }
        let v = dot(self.value(a).data(), self.value(b).data());
        Ok(self.push(Tensor::scalar(v), Op::Dot { a, b }))
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asp, bsp) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if asp.len() != 1 || asp != bsp {
            return Err(Error::shape(
                "cosine",
                "two 1-D vectors of equal length",
                format!("{asp:?} and {bsp:?}"),
            ));
        }
        let na = l2_norm(self.value(a).data());
        let nb = l2_norm(self.value(b).data());
        let small = na.to_f64().min(nb.to_f64());
        if small <= NORM_EPS {
            return Err(Error::Degenerate {
                op: "cosine",
                norm: small,
                eps: NORM_EPS,
            });
        }
        let v = dot(self.value(a).data(), self.value(b).data()) / (na * nb);
        Ok(self.push(Tensor::scalar(v), Op::Cosine { a, b }))
    }

    /// max(0, neg - pos + margin). Gradient is zero when the hinge is
    /// inactive, including exactly at the kink.
    pub fn hinge_rank_loss(&mut self, pos: Var, neg: Var, margin: T) -> Result<Var> {
        assert!(margin >= T::zero(), "hinge margin must be non-negative");
        if !self.value(pos).is_scalar() || !self.value(neg).is_scalar() {
            return Err(Error::shape(
                "hinge_rank_loss",
                "two scalars",
                format!("{:?} and {:?}", self.value(pos).shape(), self.value(neg).shape()),
            ));
        }
        let raw = self.value(neg).item() - self.value(pos).item() + margin;
        // NaN scores propagate (divergence detection); see relu.
        let v = if raw > T::zero() || raw.is_nan() {
            raw
        } else {
            T::zero()
        };
        Ok(self.push(Tensor::scalar(v), Op::HingeRank { pos, neg }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(v), Op::Sum { x })
    }

    /// Mean of scalar nodes; the minibatch loss reduction.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("mean_scalars", "at least one scalar", "empty list".to_string()));
        }
        let mut acc = T::zero();
        for &x in xs {
            if !self.value(x).is_scalar() {
                return Err(Error::shape(
                    "mean_scalars",
                    "scalar inputs",
                    format!("{:?}", self.value(x).shape()),
                ));
            }
            acc += self.value(x).item();
        }
        let v = acc / T::from_usize(xs.len());
        Ok(self.push(Tensor::scalar(v), Op::MeanScalars { xs: xs.to_vec() }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "at least one vector", "empty list".to_string()));
        }
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(Error::shape("concat", "1-D vectors", format!("{:?}", t.shape())));
            }
            out.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::vector(out), Op::Concat { parts: parts.to_vec() }))
    }

    /// Mean of table rows. An empty row list yields a zero vector that sends
    /// no gradient to the table (the pooled representation of a user with no
    /// in-vocabulary keywords).
    pub fn embedding_mean(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n_rows, d) = table_dims(t, "embedding_mean")?;
        check_rows(rows, n_rows, "embedding_mean")?;
        let mut out = vec![T::zero(); d];
        for &r in rows {
            let row = t.row(r);
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        if !rows.is_empty() {
            let inv = T::one() / T::from_usize(rows.len());
            for o in &mut out {
                *o = *o * inv;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::EmbeddingMean { table, rows: rows.to_vec() }))
    }

    /// Stack table rows into a [len, d] sequence. Requires a non-empty list.
    pub fn embedding_seq(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n_rows, d) = table_dims(t, "embedding_seq")?;
        check_rows(rows, n_rows, "embedding_seq")?;
        if rows.is_empty() {
            return Err(Error::shape("embedding_seq", "non-empty row list", "empty list".to_string()));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out).expect("seq shape"),
            Op::EmbeddingSeq { table, rows: rows.to_vec() },
        ))
    }

    /// 1-D convolution of window `width` over a [len, d] sequence followed by
    /// max-over-time pooling, output [channels]. A sequence shorter than the
    /// window produces zeros (and no gradient flows).
    pub fn conv_max_pool(&mut self, seq: Var, w: Var, b: Var, width: usize) -> Result<Var> {
        assert!(width >= 1, "conv window width must be positive");
        let (ss, ws, bs) = (
            self.value(seq).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if ss.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[1] != width * ss[1] || ws[0] != bs[0] {
            return Err(Error::shape(
                "conv_max_pool",
                format!("seq [len, d], w [c, {width}*d], b [c]"),
                format!("seq {ss:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let (len, d) = (ss[0], ss[1]);
        let channels = ws[0];
        let span = width * d;
        let sv = self.value(seq).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); channels];
        let mut argmax = vec![NO_WINDOW; channels];
        if len >= width {
            for c in 0..channels {
                let wc = &wv[c * span..(c + 1) * span];
                let mut best = T::neg_infinity();
                let mut best_t = 0;
                let mut poisoned = false;
                for t in 0..=len - width {
                    let v = dot(wc, &sv[t * d..t * d + span]) + bv[c];
                    if v.is_nan() {
                        poisoned = true;
                    }
                    if v > best {
                        best = v;
                        best_t = t;
                    }
                }
                // A NaN window poisons the channel; see relu.
                out[c] = if poisoned { T::nan() } else { best };
                argmax[c] = best_t;
            }
        }
        Ok(self.push(
            Tensor::vector(out),
            Op::ConvMaxPool { seq, w, b, width, argmax },
        ))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate: a node feeding
    /// several consumers receives the sum of their contributions.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rt = self.value(root);
        if !rt.is_scalar() {
            return Err(Error::NonScalarRoot { shape: rt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let n = xv.len();
                let m = g.len();
                {
                    let gx = acc(grads, *x, n);
                    for (i_out, &gi) in g.iter().enumerate() {
                        let wrow = &wv[i_out * n..(i_out + 1) * n];
                        for j in 0..n {
                            gx[j] += gi * wrow[j];
                        }
                    }
                }
                {
                    let gw = acc(grads, *w, m * n);
                    for (i_out, &gi) in g.iter().enumerate() {
                        for j in 0..n {
                            gw[i_out * n + j] += gi * xv[j];
                        }
                    }
                }
                let gb = acc(grads, *b, m);
                for (gbi, &gi) in gb.iter_mut().zip(g) {
                    *gbi += gi;
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, xv.len());
                for j in 0..xv.len() {
                    if xv[j] > T::zero() {
                        gx[j] += g[j];
                    }
                }
            }
            Op::L2Normalize { x } => {
                let xv = self.value(*x).data();
                let yv = self.nodes[i].value.data();
                let norm = l2_norm(xv);
                let yg = dot(yv, g);
                let gx = acc(grads, *x, xv.len());
                for j in 0..xv.len() {
                    gx[j] += (g[j] - yv[j] * yg) / norm;
                }
            }
            Op::Dot { a, b } => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let gs = g[0];
                let ga = acc(grads, *a, av.len());
                for j in 0..bv.len() {
                    ga[j] += gs * bv[j];
                }
                let gb = acc(grads, *b, bv.len());
                for j in 0..av.len() {
                    gb[j] += gs * av[j];
                }
            }
            Op::Cosine { a, b } => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let na = l2_norm(&av);
                let nb = l2_norm(&bv);
                let c = self.nodes[i].value.item();
                let gs = g[0];
                let ga = acc(grads, *a, av.len());
                for j in 0..av.len() {
                    ga[j] += gs * (bv[j] / (na * nb) - c * av[j] / (na * na));
                }
                let gb = acc(grads, *b, bv.len());
                for j in 0..bv.len() {
                    gb[j] += gs * (av[j] / (na * nb) - c * bv[j] / (nb * nb));
                }
            }
            Op::HingeRank { pos, neg } => {
                if self.nodes[i].value.item() > T::zero() {
                    let gs = g[0];
                    acc(grads, *pos, 1)[0] -= gs;
                    acc(grads, *neg, 1)[0] += gs;
                }
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                let gx = acc(grads, *x, n);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
            Op::MeanScalars { xs } => {
                let share = g[0] / T::from_usize(xs.len());
                for &x in xs {
                    acc(grads, x, 1)[0] += share;
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let gp = acc(grads, p, n);
                    for j in 0..n {
                        gp[j] += g[off + j];
                    }
                    off += n;
                }
            }
            Op::EmbeddingMean { table, rows } => {
                if rows.is_empty() {
                    return;
                }
                let d = g.len();
                let total = self.value(*table).len();
                let inv = T::one() / T::from_usize(rows.len());
                let gt = acc(grads, *table, total);
                for &r in rows {
                    for j in 0..d {
                        gt[r * d + j] += g[j] * inv;
                    }
                }
            }
            Op::EmbeddingSeq { table, rows } => {
                let total = self.value(*table).len();
                let d = self.value(*table).shape()[1];
                let gt = acc(grads, *table, total);
                for (t, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gt[r * d + j] += g[t * d + j];
                    }
                }
            }
            Op::ConvMaxPool { seq, w, b, width, argmax } => {
                // Sequence shorter than the window: output was all zeros and
                // nothing upstream receives gradient.
                if argmax.iter().all(|&t| t == NO_WINDOW) {
                    return;
                }
                let sv = self.value(*seq).data().to_vec();
                let wv = self.value(*w).data().to_vec();
                let d = self.value(*seq).shape()[1];
                let span = width * d;
                {
                    let gb = acc(grads, *b, argmax.len());
                    for (c, &t) in argmax.iter().enumerate() {
                        if t != NO_WINDOW {
                            gb[c] += g[c];
                        }
                    }
                }
                {
                    let gw = acc(grads, *w, wv.len());
                    for (c, &t) in argmax.iter().enumerate() {
                        if t != NO_WINDOW {
                            for k in 0..span {
                                gw[c * span + k] += g[c] * sv[t * d + k];
                            }
                        }
                    }
                }
                let gs = acc(grads, *seq, sv.len());
                for (c, &t) in argmax.iter().enumerate() {
                    if t != NO_WINDOW {
                        for k in 0..span {
                            gs[t * d + k] += g[c] * wv[c * span + k];
                        }
                    }
                }
            }
        }
    }
}

fn table_dims<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, "2-D table [rows, d]", format!("{:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn check_rows(rows: &[usize], n_rows: usize, op: &'static str) -> Result<()> {
    if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
        return Err(Error::shape(
            op,
            format!("row indices < {n_rows}"),
            format!("index {bad}"),
        ));
    }
    Ok(())
}

fn acc<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}
