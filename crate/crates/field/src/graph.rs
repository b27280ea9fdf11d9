//! Eager reverse-mode autodiff over [`Tensor`] values.
//!
//! Every op computes its value when it is recorded. `backward` walks the tape
//! once in reverse and skips nodes that no gradient-carrying leaf feeds.

use std::sync::Arc;

use crate::conv::{col2im_add, conv_out_size, im2col};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{ConvRules, SparseMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sparse(Var, Arc<SparseMap>),
    RowDot(Var, Var),
    RowWeighted(Var, Var),
    SwapLast(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Upsample2(Var),
    ConcatChannels(Var, Var),
    SparseConv3d { x: Var, w: Var, b: Var, rules: Arc<ConvRules> },
    BceDice { z: Var, targets: Arc<Vec<f64>>, l_bce: f64, l_dice: f64 },
    CrossEntropy { z: Var, targets: Arc<Vec<usize>> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    tracked: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_sums_into<S: Scalar>(g: &[S], cols: usize, out: &mut [S]) {
    for row in g.chunks_exact(cols) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut s = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Value and logit gradient of `l_bce·BCE + l_dice·softDice` on `p = σ(z)`.
pub fn bce_dice_from_logits(z: &[f64], t: &[f64], l_bce: f64, l_dice: f64) -> (f64, Vec<f64>) {
    let n = z.len().max(1) as f64;
    let p: Vec<f64> = z.iter().map(|&z| sigmoid64(z)).collect();
    let mut bce = 0.0;
    for (&z, &t) in z.iter().zip(t) {
        bce += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    }
    bce /= n;
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let s = p.iter().sum::<f64>() + t.iter().sum::<f64>() + 1.0;
    let num = 2.0 * inter + 1.0;
    let dice = 1.0 - num / s;
    let grad = p
        .iter()
        .zip(t)
        .map(|(&p, &t)| {
            let ddice_dp = -(2.0 * t * s - num) / (s * s);
            l_bce * (p - t) / n + l_dice * ddice_dp * p * (1.0 - p)
        })
        .collect();
    (l_bce * bce + l_dice * dice, grad)
}

/// Mean cross-entropy of row-wise softmax(z) against integer targets, with its logit gradient.
pub fn cross_entropy_from_logits(z: &[f64], classes: usize, t: &[usize]) -> (f64, Vec<f64>) {
    let n = t.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; z.len()];
    for (i, &ti) in t.iter().enumerate() {
        let row = &z[i * classes..(i + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[ti];
        for c in 0..classes {
            grad[i * classes + c] = ((row[c] - lse).exp() - if c == ti { 1.0 } else { 0.0 }) / n;
        }
    }
    (loss / n, grad)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op, parents: &[Var]) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is collected by `backward`.
    pub fn variable(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, tracked: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor<S> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor { shape: vec![0], data: Vec::new() })
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.mat(a);
        let (k2, n) = self.mat(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        gemm(false, false, m, n, k, &self.value(a).data, &self.value(b).data, S::zero(), &mut out);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds a length-`n` row vector to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (_, n) = self.mat(x);
        assert_eq!(self.value(b).len(), n, "bias width");
        let mut out = self.value(x).clone();
        let bias = &self.value(b).data;
        for row in out.data.chunks_exact_mut(n) {
            for (o, &c) in row.iter_mut().zip(bias) {
                *o += c;
            }
        }
        self.push(out, Op::AddRow(x, b), &[x, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            if !(*v > S::zero()) {
                *v = S::zero();
            }
        }
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = S::of(sigmoid64(v.f64()));
        }
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Row-wise softmax of an `[m,n]` matrix.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, n) = self.mat(x);
        let mut out = self.value(x).clone();
        for row in out.data.chunks_exact_mut(n) {
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut s = S::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        let c = S::of(s);
        for v in &mut out.data {
            *v *= c;
        }
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.mat(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.mat(p).0, m, "concat_cols row counts");
                self.mat(p).1
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::from_vec(&[m, n], out), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.mat(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            assert_eq!(self.mat(p).1, n, "concat_rows widths");
            m += self.mat(p).0;
            out.extend_from_slice(&self.value(p).data);
        }
        self.push(Tensor::from_vec(&[m, n], out), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Applies a fixed sparse row map to an `[n_in, c]` matrix.
    pub fn sparse(&mut self, x: Var, map: Arc<SparseMap>) -> Var {
        let (n_in, c) = self.mat(x);
        assert_eq!(n_in, map.n_in, "sparse map input rows");
        let out = map.apply(&self.value(x).data, c);
        let n_out = map.n_out();
        self.push(Tensor::from_vec(&[n_out, c], out), Op::Sparse(x, map), &[x])
    }

    /// `q [n,d]`, `kg [n·k, d]` → `s [n,k]` with `s[i,j] = q_i · kg_{ik+j}`.
    pub fn row_dot(&mut self, q: Var, kg: Var) -> Var {
        let (n, d) = self.mat(q);
        let (nk, d2) = self.mat(kg);
        assert!(d == d2 && n > 0 && nk % n == 0, "row_dot shapes");
        let k = nk / n;
        let (qv, kv) = (&self.value(q).data, &self.value(kg).data);
        let mut out = vec![S::zero(); n * k];
        for i in 0..n {
            for j in 0..k {
                out[i * k + j] = dot(&qv[i * d..(i + 1) * d], &kv[(i * k + j) * d..(i * k + j + 1) * d]);
            }
        }
        self.push(Tensor::from_vec(&[n, k], out), Op::RowDot(q, kg), &[q, kg])
    }

    /// `w [n,k]`, `vg [n·k, d]` → `o [n,d]` with `o_i = Σ_j w_ij vg_{ik+j}`.
    pub fn row_weighted(&mut self, w: Var, vg: Var) -> Var {
        let (n, k) = self.mat(w);
        let (nk, d) = self.mat(vg);
        assert_eq!(n * k, nk, "row_weighted shapes");
        let (wv, vv) = (&self.value(w).data, &self.value(vg).data);
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..k {
                let c = wv[i * k + j];
                for (a, &b) in o.iter_mut().zip(&vv[(i * k + j) * d..(i * k + j + 1) * d]) {
                    *a += c * b;
                }
            }
        }
        self.push(Tensor::from_vec(&[n, d], out), Op::RowWeighted(w, vg), &[w, vg])
    }

    /// `[b, p, c]` → `[b, c, p]`. A 2-D input is treated as `b = 1`.
    pub fn swap_last(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (b, p, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => panic!("swap_last expects rank 2 or 3, got {s:?}"),
        };
        let out = swap_last_data(&self.value(x).data, b, p, c);
        let shape = if s.len() == 2 { vec![c, p] } else { vec![b, c, p] };
        self.push(Tensor::from_vec(&shape, out), Op::SwapLast(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), shape.iter().product::<usize>(), "reshape {:?} -> {shape:?}", t.shape);
        let out = Tensor::from_vec(shape, t.data.clone());
        self.push(out, Op::Reshape(x), &[x])
    }

    /// `[B, Cin, H, W]` with `w [Cout, Cin·9]`, `b [Cout]`, zero padding 1.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "conv2d input rank");
        let (bn, cin, h, wd) = (s[0], s[1], s[2], s[3]);
        let (cout, kk) = self.mat(w);
        assert_eq!(kk, cin * 9, "conv2d kernel expects {} input channels, got {cin}", kk / 9);
        assert_eq!(self.value(b).len(), cout, "conv2d bias");
        let (ho, wo) = (conv_out_size(h, stride), conv_out_size(wd, stride));
        let p = ho * wo;
        let mut out = vec![S::zero(); bn * cout * p];
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        for bi in 0..bn {
            let col = im2col(&xv[bi * cin * h * wd..(bi + 1) * cin * h * wd], cin, h, wd, stride);
            let o = &mut out[bi * cout * p..(bi + 1) * cout * p];
            gemm(false, false, cout, p, kk, wv, &col, S::zero(), o);
            for (co, row) in o.chunks_exact_mut(p).enumerate() {
                for v in row {
                    *v += bv[co];
                }
            }
        }
        self.push(Tensor::from_vec(&[bn, cout, ho, wo], out), Op::Conv2d { x, w, b, stride }, &[x, w, b])
    }

    /// Nearest-neighbour ×2 upsampling of `[B, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = &self.value(x).data;
        let mut out = vec![S::zero(); bc * 4 * h * w];
        for c in 0..bc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(c * 2 * h + y) * 2 * w + xx] = xv[(c * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out), Op::Upsample2(x), &[x])
    }

    /// Channel concatenation of `[B, Ca, H, W]` and `[B, Cb, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa[0] == sb[0] && sa[2..] == sb[2..], "concat_channels shapes {sa:?} {sb:?}");
        let hw = sa[2] * sa[3];
        let (na, nb) = (sa[1] * hw, sb[1] * hw);
        let mut out = Vec::with_capacity(sa[0] * (na + nb));
        for bi in 0..sa[0] {
            out.extend_from_slice(&self.value(a).data[bi * na..(bi + 1) * na]);
            out.extend_from_slice(&self.value(b).data[bi * nb..(bi + 1) * nb]);
        }
        self.push(Tensor::from_vec(&[sa[0], sa[1] + sb[1], sa[2], sa[3]], out), Op::ConcatChannels(a, b), &[a, b])
    }

    /// Sparse 3×3×3 convolution: `x [n_in, cin]`, `w [27·cin, cout]`, `b [cout]`.
    pub fn sparse_conv3d(&mut self, x: Var, w: Var, b: Var, rules: Arc<ConvRules>) -> Var {
        let (n_in, cin) = self.mat(x);
        let (kk, cout) = self.mat(w);
        assert_eq!(n_in, rules.n_in, "sparse conv input rows");
        assert_eq!(kk, 27 * cin, "sparse conv kernel");
        assert_eq!(rules.taps.len(), 27, "sparse conv taps");
        let mut out = vec![S::zero(); rules.n_out * cout];
        let bv = &self.value(b).data;
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bv);
        }
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        for (t, pairs) in rules.taps.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let np = pairs.len();
            let mut xg = Vec::with_capacity(np * cin);
            for &(_, i) in pairs {
                xg.extend_from_slice(&xv[i as usize * cin..(i as usize + 1) * cin]);
            }
            let mut y = vec![S::zero(); np * cout];
            gemm(false, false, np, cout, cin, &xg, &wv[t * cin * cout..(t + 1) * cin * cout], S::zero(), &mut y);
            for (pi, &(o, _)) in pairs.iter().enumerate() {
                for (a, &v) in out[o as usize * cout..(o as usize + 1) * cout].iter_mut().zip(&y[pi * cout..(pi + 1) * cout]) {
                    *a += v;
                }
            }
        }
        let n_out = rules.n_out;
        self.push(Tensor::from_vec(&[n_out, cout], out), Op::SparseConv3d { x, w, b, rules }, &[x, w, b])
    }

    /// `λ_bce·BCE + λ_dice·softDice` of `σ(z)` against binary targets, computed from logits.
    pub fn bce_dice_with_logits(&mut self, z: Var, targets: Arc<Vec<f64>>, l_bce: f64, l_dice: f64) -> Var {
        assert_eq!(self.value(z).len(), targets.len(), "bce/dice target count");
        let zf: Vec<f64> = self.value(z).data.iter().map(|v| v.f64()).collect();
        let (loss, _) = bce_dice_from_logits(&zf, &targets, l_bce, l_dice);
        self.push(Tensor::scalar(S::of(loss)), Op::BceDice { z, targets, l_bce, l_dice }, &[z])
    }

    /// Mean cross-entropy of `softmax(z)` rows against class indices, computed from logits.
    pub fn cross_entropy_with_logits(&mut self, z: Var, targets: Arc<Vec<usize>>) -> Var {
        let (n, c) = self.mat(z);
        assert_eq!(n, targets.len(), "cross-entropy target count");
        assert!(targets.iter().all(|&t| t < c), "cross-entropy target out of range");
        let zf: Vec<f64> = self.value(z).data.iter().map(|v| v.f64()).collect();
        let (loss, _) = cross_entropy_from_logits(&zf, c, &targets);
        self.push(Tensor::scalar(S::of(loss)), Op::CrossEntropy { z, targets }, &[z])
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(&self.value(loss).shape, vec![S::one()]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let g = match &self.nodes[i].op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.step(i, &g, &mut grads);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !(n.tracked && matches!(n.op, Op::Leaf)) {
                grads[i] = None;
            }
        }
        Grads { grads }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<S>>], v: Var) -> Option<&'a mut Tensor<S>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let shape = &self.nodes[v.0].value.shape;
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn step(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = &g.data;
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.mat(a);
                let n = self.mat(b).1;
                if let Some(da) = self.slot(grads, a) {
                    gemm(false, true, m, k, n, gd, &self.value(b).data, S::one(), &mut da.data);
                }
                if let Some(db) = self.slot(grads, b) {
                    gemm(true, false, k, n, m, &self.value(a).data, gd, S::one(), &mut db.data);
                }
            }
            &Op::AddRow(x, b) => {
                let n = self.mat(x).1;
                if let Some(dx) = self.slot(grads, x) {
                    dx.add_assign(g);
                }
                if let Some(db) = self.slot(grads, b) {
                    row_sums_into(gd, n, &mut db.data);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.add_assign(g);
                    }
                }
            }
            &Op::Relu(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, &gv), &yv) in dx.data.iter_mut().zip(gd).zip(&y.data) {
                        if yv > S::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, &gv), &yv) in dx.data.iter_mut().zip(gd).zip(&y.data) {
                        *d += gv * yv * (S::one() - yv);
                    }
                }
            }
            &Op::Softmax(x) => {
                let n = self.mat(x).1;
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, gr), yr) in dx.data.chunks_exact_mut(n).zip(gd.chunks_exact(n)).zip(y.data.chunks_exact(n)) {
                        let s = dot(gr, yr);
                        for ((dv, &gv), &yv) in d.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - s);
                        }
                    }
                }
            }
            &Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, x) {
                    let c = S::of(s);
                    for (d, &gv) in dx.data.iter_mut().zip(gd) {
                        *d += c * gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = y.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.mat(p).1;
                    if let Some(dp) = self.slot(grads, p) {
                        for (r, row) in dp.data.chunks_exact_mut(w).enumerate() {
                            for (d, &gv) in row.iter_mut().zip(&gd[r * n + off..r * n + off + w]) {
                                *d += gv;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.slot(grads, p) {
                        for (d, &gv) in dp.data.iter_mut().zip(&gd[off..off + len]) {
                            *d += gv;
                        }
                    }
                    off += len;
                }
            }
            Op::Sparse(x, map) => {
                let c = y.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    map.apply_transpose_add(gd, c, &mut dx.data);
                }
            }
            &Op::RowDot(q, kg) => {
                let (n, d) = self.mat(q);
                let k = y.cols();
                let (qv, kv) = (&self.value(q).data, &self.value(kg).data);
                if let Some(dq) = self.slot(grads, q) {
                    for i in 0..n {
                        for j in 0..k {
                            let c = gd[i * k + j];
                            let kr = &kv[(i * k + j) * d..(i * k + j + 1) * d];
                            for (a, &b) in dq.data[i * d..(i + 1) * d].iter_mut().zip(kr) {
                                *a += c * b;
                            }
                        }
                    }
                }
                if let Some(dk) = self.slot(grads, kg) {
                    for i in 0..n {
                        let qr = &qv[i * d..(i + 1) * d];
                        for j in 0..k {
                            let c = gd[i * k + j];
                            for (a, &b) in dk.data[(i * k + j) * d..(i * k + j + 1) * d].iter_mut().zip(qr) {
                                *a += c * b;
                            }
                        }
                    }
                }
            }
            &Op::RowWeighted(w, vg) => {
                let (n, k) = self.mat(w);
                let d = y.cols();
                let (wv, vv) = (&self.value(w).data, &self.value(vg).data);
                if let Some(dw) = self.slot(grads, w) {
                    for i in 0..n {
                        for j in 0..k {
                            dw.data[i * k + j] += dot(&gd[i * d..(i + 1) * d], &vv[(i * k + j) * d..(i * k + j + 1) * d]);
                        }
                    }
                }
                if let Some(dv) = self.slot(grads, vg) {
                    for i in 0..n {
                        for j in 0..k {
                            let c = wv[i * k + j];
                            for (a, &b) in dv.data[(i * k + j) * d..(i * k + j + 1) * d].iter_mut().zip(&gd[i * d..(i + 1) * d]) {
                                *a += c * b;
                            }
                        }
                    }
                }
            }
            &Op::SwapLast(x) => {
                let s = &y.shape;
                let (b, c, p) = if s.len() == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
                if let Some(dx) = self.slot(grads, x) {
                    let back = swap_last_data(gd, b, c, p);
                    for (d, v) in dx.data.iter_mut().zip(back) {
                        *d += v;
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for (d, &v) in dx.data.iter_mut().zip(gd) {
                        *d += v;
                    }
                }
            }
            &Op::Conv2d { x, w, b, stride } => {
                let s = self.shape(x).to_vec();
                let (bn, cin, h, wd) = (s[0], s[1], s[2], s[3]);
                let cout = self.mat(w).0;
                let kk = cin * 9;
                let p = y.shape[2] * y.shape[3];
                let xv = &self.value(x).data;
                let wv = &self.value(w).data;
                if let Some(dbias) = self.slot(grads, b) {
                    for bi in 0..bn {
                        for co in 0..cout {
                            let row = &gd[(bi * cout + co) * p..(bi * cout + co + 1) * p];
                            dbias.data[co] += row.iter().copied().sum::<S>();
                        }
                    }
                }
                let need_w = self.nodes[w.0].tracked;
                let need_x = self.nodes[x.0].tracked;
                let mut dwacc = if need_w { vec![S::zero(); cout * kk] } else { Vec::new() };
                let mut dxacc = if need_x { vec![S::zero(); xv.len()] } else { Vec::new() };
                for bi in 0..bn {
                    let go = &gd[bi * cout * p..(bi + 1) * cout * p];
                    if need_w {
                        let col = im2col(&xv[bi * cin * h * wd..(bi + 1) * cin * h * wd], cin, h, wd, stride);
                        gemm(false, true, cout, kk, p, go, &col, S::one(), &mut dwacc);
                    }
                    if need_x {
                        let mut dcol = vec![S::zero(); kk * p];
                        gemm(true, false, kk, p, cout, wv, go, S::zero(), &mut dcol);
                        col2im_add(&dcol, cin, h, wd, stride, &mut dxacc[bi * cin * h * wd..(bi + 1) * cin * h * wd]);
                    }
                }
                if let Some(dw) = self.slot(grads, w) {
                    for (d, v) in dw.data.iter_mut().zip(dwacc) {
                        *d += v;
                    }
                }
                if let Some(dx) = self.slot(grads, x) {
                    for (d, v) in dx.data.iter_mut().zip(dxacc) {
                        *d += v;
                    }
                }
            }
            &Op::Upsample2(x) => {
                let s = self.shape(x).to_vec();
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(dx) = self.slot(grads, x) {
                    for c in 0..bc {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                dx.data[(c * h + yy / 2) * w + xx / 2] += gd[(c * 2 * h + yy) * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            &Op::ConcatChannels(a, b) => {
                let na = self.value(a).len() / y.shape[0];
                let nb = self.value(b).len() / y.shape[0];
                for bi in 0..y.shape[0] {
                    let base = bi * (na + nb);
                    if let Some(da) = self.slot(grads, a) {
                        for (d, &v) in da.data[bi * na..(bi + 1) * na].iter_mut().zip(&gd[base..base + na]) {
                            *d += v;
                        }
                    }
                    if let Some(db) = self.slot(grads, b) {
                        for (d, &v) in db.data[bi * nb..(bi + 1) * nb].iter_mut().zip(&gd[base + na..base + na + nb]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::SparseConv3d { x, w, b, rules } => {
                let (x, w, b) = (*x, *w, *b);
                let cin = self.mat(x).1;
                let cout = y.cols();
                if let Some(db) = self.slot(grads, b) {
                    row_sums_into(gd, cout, &mut db.data);
                }
                let need_w = self.nodes[w.0].tracked;
                let need_x = self.nodes[x.0].tracked;
                let (xv, wv) = (&self.value(x).data, &self.value(w).data);
                let mut dwacc = if need_w { vec![S::zero(); 27 * cin * cout] } else { Vec::new() };
                let mut dxacc = if need_x { vec![S::zero(); xv.len()] } else { Vec::new() };
                for (t, pairs) in rules.taps.iter().enumerate() {
                    if pairs.is_empty() {
                        continue;
                    }
                    let np = pairs.len();
                    let mut gg = Vec::with_capacity(np * cout);
                    for &(o, _) in pairs {
                        gg.extend_from_slice(&gd[o as usize * cout..(o as usize + 1) * cout]);
                    }
                    if need_w {
                        let mut xg = Vec::with_capacity(np * cin);
                        for &(_, i) in pairs {
                            xg.extend_from_slice(&xv[i as usize * cin..(i as usize + 1) * cin]);
                        }
                        gemm(true, false, cin, cout, np, &xg, &gg, S::one(), &mut dwacc[t * cin * cout..(t + 1) * cin * cout]);
                    }
                    if need_x {
                        let mut dxg = vec![S::zero(); np * cin];
                        gemm(false, true, np, cin, cout, &gg, &wv[t * cin * cout..(t + 1) * cin * cout], S::zero(), &mut dxg);
                        for (pi, &(_, i)) in pairs.iter().enumerate() {
                            for (a, &v) in dxacc[i as usize * cin..(i as usize + 1) * cin].iter_mut().zip(&dxg[pi * cin..(pi + 1) * cin]) {
                                *a += v;
                            }
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, w) {
                    for (d, v) in dw.data.iter_mut().zip(dwacc) {
                        *d += v;
                    }
                }
                if let Some(dx) = self.slot(grads, x) {
                    for (d, v) in dx.data.iter_mut().zip(dxacc) {
                        *d += v;
                    }
                }
            }
            Op::BceDice { z, targets, l_bce, l_dice } => {
                let zf: Vec<f64> = self.value(*z).data.iter().map(|v| v.f64()).collect();
                let (_, grad) = bce_dice_from_logits(&zf, targets, *l_bce, *l_dice);
                let scale = gd[0].f64();
                if let Some(dz) = self.slot(grads, *z) {
                    for (d, v) in dz.data.iter_mut().zip(grad) {
                        *d += S::of(v * scale);
                    }
                }
            }
            Op::CrossEntropy { z, targets } => {
                let c = self.mat(*z).1;
                let zf: Vec<f64> = self.value(*z).data.iter().map(|v| v.f64()).collect();
                let (_, grad) = cross_entropy_from_logits(&zf, c, targets);
                let scale = gd[0].f64();
                if let Some(dz) = self.slot(grads, *z) {
                    for (d, v) in dz.data.iter_mut().zip(grad) {
                        *d += S::of(v * scale);
                    }
                }
            }
        }
    }
}

fn swap_last_data<S: Scalar>(x: &[S], b: usize, p: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for bi in 0..b {
        let (src, dst) = (&x[bi * p * c..(bi + 1) * p * c], &mut out[bi * p * c..(bi + 1) * p * c]);
        for i in 0..p {
            for j in 0..c {
                dst[j * p + i] = src[i * c + j];
            }
        }
    }
    out
}
