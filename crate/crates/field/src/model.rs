//! Point-voxel encoders, fusion, tri-plane field, U-Net and implicit heads.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FieldError, Result};
use crate::graph::{Grads, Graph, Var};
use crate::input::{BranchInput, FieldInput, QueryInput};
use crate::params::{Initializer, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{SparseMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Ssa,
    Early,
    Late,
    DistanceWeighted,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [FusionMode::Ssa, FusionMode::Early, FusionMode::Late, FusionMode::DistanceWeighted];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Ssa => "ssa",
            FusionMode::Early => "early",
            FusionMode::Late => "late",
            FusionMode::DistanceWeighted => "distance_weighted",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = FieldError;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| FieldError::UnknownMode(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Repair,
    Label,
    Segment,
}

impl Head {
    fn prefix(self) -> &'static str {
        match self {
            Head::Repair => "head_repair",
            Head::Label => "head_label",
            Head::Segment => "head_segment",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    /// Point feature width.
    pub d: usize,
    /// Skeleton neighbors per surface point.
    pub k: usize,
    /// Plane resolution.
    pub r: usize,
    /// Plane channels after the U-Net.
    pub c: usize,
    /// Positional-encoding width.
    pub pe_dim: usize,
    pub pe_bands: usize,
    /// Voxel-branch grid size per axis.
    pub grid: usize,
    /// Half-width of the cubic super-point descriptor.
    pub descriptor_radius: usize,
    pub hidden: [usize; 2],
    pub label_classes: usize,
    pub segment_classes: usize,
    pub fusion: FusionMode,
}

impl Hyper {
    pub fn desk() -> Self {
        Hyper {
            d: 32,
            k: 8,
            r: 64,
            c: 32,
            pe_dim: 64,
            pe_bands: 10,
            grid: 32,
            descriptor_radius: 2,
            hidden: [256, 128],
            label_classes: 7,
            segment_classes: 6,
            fusion: FusionMode::Ssa,
        }
    }

    pub fn paper() -> Self {
        Hyper { d: 64, r: 256, c: 64, label_classes: 19, segment_classes: 18, ..Self::desk() }
    }

    /// Small shapes for gradient checks.
    pub fn toy() -> Self {
        Hyper {
            d: 8,
            k: 3,
            r: 16,
            c: 8,
            pe_dim: 8,
            pe_bands: 2,
            grid: 8,
            descriptor_radius: 1,
            hidden: [12, 10],
            label_classes: 4,
            segment_classes: 3,
            fusion: FusionMode::Ssa,
        }
    }

    pub fn with_fusion(mut self, fusion: FusionMode) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn descriptor_width(&self) -> usize {
        (2 * self.descriptor_radius + 1).pow(3)
    }

    pub fn encoding_width(&self) -> usize {
        3 + 6 * self.pe_bands
    }

    pub fn head_input(&self) -> usize {
        3 * self.c + self.pe_dim
    }

    pub fn unet_input(&self) -> usize {
        if self.fusion == FusionMode::Late {
            2 * self.d
        } else {
            self.d
        }
    }

    pub fn head_output(&self, head: Head) -> usize {
        match head {
            Head::Repair => 1,
            Head::Label => self.label_classes,
            Head::Segment => self.segment_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 4 || self.r % 4 != 0 {
            return Err(FieldError::Resolution(self.r));
        }
        let positive = [
            ("d", self.d),
            ("k", self.k),
            ("c", self.c),
            ("pe_dim", self.pe_dim),
            ("grid", self.grid),
            ("hidden[0]", self.hidden[0]),
            ("hidden[1]", self.hidden[1]),
            ("label_classes", self.label_classes),
            ("segment_classes", self.segment_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(FieldError::Hyper(format!("{name} must be positive")));
            }
        }
        if self.pe_bands > 30 {
            return Err(FieldError::Hyper(format!("pe_bands {} too large", self.pe_bands)));
        }
        Ok(())
    }
}

/// Learned parameters plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub hyper: Hyper,
    pub params: ParamStore<S>,
}

/// Parameter names and shapes with their fan-in, in declaration order.
pub fn parameter_layout(h: &Hyper) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    let linear = |out: &mut Vec<(String, Vec<usize>, usize)>, name: &str, i: usize, o: usize| {
        out.push((format!("{name}.w"), vec![i, o], i));
        out.push((format!("{name}.b"), vec![o], i));
    };
    let d = h.d;
    for (enc, input) in [("enc_s", 3 + h.descriptor_width()), ("enc_k", 3)] {
        linear(&mut out, &format!("{enc}.l1"), input, d);
        linear(&mut out, &format!("{enc}.l2"), d, d);
        out.push((format!("{enc}.conv.w"), vec![27 * d, d], 27 * d));
        out.push((format!("{enc}.conv.b"), vec![d], 27 * d));
    }
    match h.fusion {
        FusionMode::Ssa => {
            for m in ["q", "k", "v", "o"] {
                out.push((format!("ssa.w{m}"), vec![d, d], d));
            }
        }
        FusionMode::DistanceWeighted => linear(&mut out, "dw", 2 * d, d),
        FusionMode::Early | FusionMode::Late => {}
    }
    let c = h.c;
    let convs = [
        ("e0", h.unet_input(), c),
        ("e1a", c, 2 * c),
        ("e1b", 2 * c, 2 * c),
        ("e2a", 2 * c, 4 * c),
        ("e2b", 4 * c, 4 * c),
        ("d1", 6 * c, 2 * c),
        ("d2", 3 * c, c),
        ("out", c, c),
    ];
    for (name, cin, cout) in convs {
        out.push((format!("unet.{name}.w"), vec![cout, cin * 9], cin * 9));
        out.push((format!("unet.{name}.b"), vec![cout], cin * 9));
    }
    linear(&mut out, "pe", h.encoding_width(), h.pe_dim);
    for head in [Head::Repair, Head::Label, Head::Segment] {
        let p = head.prefix();
        linear(&mut out, &format!("{p}.l1"), h.head_input(), h.hidden[0]);
        linear(&mut out, &format!("{p}.l2"), h.hidden[0], h.hidden[1]);
        linear(&mut out, &format!("{p}.l3"), h.hidden[1], h.head_output(head));
    }
    out
}

/// A forward graph bound to one parameter store.
pub struct Bound<'m, S> {
    pub g: Graph<S>,
    hyper: &'m Hyper,
    params: &'m ParamStore<S>,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl<'m, S: Scalar> Bound<'m, S> {
    /// With `track`, parameters become gradient-carrying leaves.
    pub fn new(model: &'m Model<S>, track: bool) -> Self {
        Bound { g: Graph::new(), hyper: &model.hyper, params: &model.params, vars: vec![None; model.params.len()], track }
    }

    pub fn hyper(&self) -> &Hyper {
        self.hyper
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        if let Some(v) = self.vars[id] {
            return Ok(v);
        }
        let t = self.params.by_id(id).clone();
        let v = if self.track { self.g.variable(t) } else { self.g.constant(t) };
        self.vars[id] = Some(v);
        Ok(v)
    }

    pub fn constant(&mut self, shape: &[usize], data: &[f64]) -> Var {
        self.g.constant(Tensor::from_f64(shape, data))
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.g.matmul(x, w);
        Ok(self.g.add_row(y, b))
    }

    /// Backward from `loss`; one gradient per parameter (zeros for unused ones).
    pub fn param_grads(&self, loss: Var) -> Vec<Tensor<S>> {
        let mut grads: Grads<S> = self.g.backward(loss);
        (0..self.params.len())
            .map(|id| {
                self.vars[id]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(&self.params.by_id(id).shape))
            })
            .collect()
    }
}

/// Shared point MLP plus a pooled-voxel branch added residually. Output `[n, d]`.
pub fn encode_points<S: Scalar>(b: &mut Bound<S>, input: &BranchInput, prefix: &str) -> Result<Var> {
    let want = b.params.get(&format!("{prefix}.l1.w"))?.shape[0];
    if input.in_dim != want {
        return Err(FieldError::Shape(format!("{prefix} expects {want} input features, got {}", input.in_dim)));
    }
    let x = b.constant(&[input.len(), input.in_dim], &input.feats);
    let h = b.linear(x, &format!("{prefix}.l1"))?;
    let h = b.g.relu(h);
    let h = b.linear(h, &format!("{prefix}.l2"))?;
    let pooled = b.g.sparse(h, input.pool.clone());
    let w = b.p(&format!("{prefix}.conv.w"))?;
    let bias = b.p(&format!("{prefix}.conv.b"))?;
    let smoothed = b.g.sparse_conv3d(pooled, w, bias, input.conv.clone());
    let back = b.g.sparse(smoothed, input.gather.clone());
    Ok(b.g.add(h, back))
}

fn check_knn(n_s: usize, n_k: usize, knn: &[usize], k: usize) -> Result<()> {
    if k == 0 || knn.len() != n_s * k {
        return Err(FieldError::NeighborCount { expected: n_s * k, found: knn.len() });
    }
    if let Some(&bad) = knn.iter().find(|&&j| j >= n_k) {
        return Err(FieldError::Shape(format!("neighbor index {bad} out of range for {n_k} skeleton points")));
    }
    Ok(())
}

/// Single-head surface-to-skeleton attention with a residual through `W_O`.
pub fn ssa_fuse<S: Scalar>(b: &mut Bound<S>, phi_s: Var, phi_k: Var, knn: &[usize], k: usize) -> Result<Var> {
    let (n_s, n_k) = (b.g.value(phi_s).rows(), b.g.value(phi_k).rows());
    check_knn(n_s, n_k, knn, k)?;
    if k != b.hyper.k {
        return Err(FieldError::NeighborCount { expected: b.hyper.k, found: k });
    }
    let d = b.g.value(phi_s).cols();
    let wq = b.p("ssa.wq")?;
    let wk = b.p("ssa.wk")?;
    let wv = b.p("ssa.wv")?;
    let wo = b.p("ssa.wo")?;
    let q = b.g.matmul(phi_s, wq);
    let kk = b.g.matmul(phi_k, wk);
    let v = b.g.matmul(phi_k, wv);
    let gather = Arc::new(SparseMap::gather(n_k, knn));
    let kg = b.g.sparse(kk, gather.clone());
    let vg = b.g.sparse(v, gather);
    let scores = b.g.row_dot(q, kg);
    let scores = b.g.scale(scores, 1.0 / (d as f64).sqrt());
    let w = b.g.softmax(scores);
    let agg = b.g.row_weighted(w, vg);
    let out = b.g.matmul(agg, wo);
    Ok(b.g.add(phi_s, out))
}

/// Inverse-distance aggregation of skeleton features, concatenated and mapped back to `d`.
pub fn distance_weighted_fuse<S: Scalar>(
    b: &mut Bound<S>,
    phi_s: Var,
    phi_k: Var,
    knn: &[usize],
    weights: &[f64],
    k: usize,
) -> Result<Var> {
    let (n_s, n_k) = (b.g.value(phi_s).rows(), b.g.value(phi_k).rows());
    check_knn(n_s, n_k, knn, k)?;
    if weights.len() != knn.len() {
        return Err(FieldError::Shape(format!("{} weights for {} neighbors", weights.len(), knn.len())));
    }
    let kg = b.g.sparse(phi_k, Arc::new(SparseMap::gather(n_k, knn)));
    let w = b.constant(&[n_s, k], weights);
    let agg = b.g.row_weighted(w, kg);
    let cat = b.g.concat_cols(&[phi_s, agg]);
    b.linear(cat, "dw")
}

/// Mean-projects `[n, ch]` point features onto the planes; output `[3, ch, r, r]`.
pub fn triplane_project<S: Scalar>(b: &mut Bound<S>, feats: Var, map: Arc<SparseMap>, r: usize) -> Result<Var> {
    if map.n_out() != 3 * r * r {
        return Err(FieldError::Shape(format!("plane map has {} rows, expected {}", map.n_out(), 3 * r * r)));
    }
    let ch = b.g.value(feats).cols();
    let rows = b.g.sparse(feats, map);
    let rows = b.g.reshape(rows, &[3, r * r, ch]);
    let planes = b.g.swap_last(rows);
    Ok(b.g.reshape(planes, &[3, ch, r, r]))
}

fn conv<S: Scalar>(b: &mut Bound<S>, x: Var, name: &str, stride: usize, relu: bool) -> Result<Var> {
    let w = b.p(&format!("unet.{name}.w"))?;
    let bias = b.p(&format!("unet.{name}.b"))?;
    let y = b.g.conv2d(x, w, bias, stride);
    Ok(if relu { b.g.relu(y) } else { y })
}

/// Two-stage U-Net shared across the three planes: `[3, cin, r, r]` → `[3, c, r, r]`.
pub fn unet2d<S: Scalar>(b: &mut Bound<S>, x: Var) -> Result<Var> {
    let s = b.g.value(x).shape.clone();
    if s.len() != 4 || s[2] != s[3] {
        return Err(FieldError::Shape(format!("U-Net input must be [planes, channels, r, r], got {s:?}")));
    }
    if s[2] < 4 || s[2] % 4 != 0 {
        return Err(FieldError::Resolution(s[2]));
    }
    let want = b.params.get("unet.e0.w")?.shape[1] / 9;
    if s[1] != want {
        return Err(FieldError::Shape(format!("U-Net expects {want} input channels, got {}", s[1])));
    }
    let e0 = conv(b, x, "e0", 1, true)?;
    let e1 = conv(b, e0, "e1a", 2, true)?;
    let e1 = conv(b, e1, "e1b", 1, true)?;
    let e2 = conv(b, e1, "e2a", 2, true)?;
    let e2 = conv(b, e2, "e2b", 1, true)?;
    let u1 = b.g.upsample2(e2);
    let u1 = b.g.concat_channels(u1, e1);
    let d1 = conv(b, u1, "d1", 1, true)?;
    let u2 = b.g.upsample2(d1);
    let u2 = b.g.concat_channels(u2, e0);
    let d2 = conv(b, u2, "d2", 1, true)?;
    conv(b, d2, "out", 1, false)
}

/// `[3, c, r, r]` → `[3·r², c]`, the row layout sampled by queries.
pub fn plane_rows<S: Scalar>(b: &mut Bound<S>, planes: Var) -> Var {
    let s = b.g.value(planes).shape.clone();
    let x = b.g.reshape(planes, &[3, s[1], s[2] * s[3]]);
    let x = b.g.swap_last(x);
    b.g.reshape(x, &[3 * s[2] * s[3], s[1]])
}

/// `[q, 3c + D]`: bilinear samples of the three planes and the projected positional encoding.
pub fn sample_query_embedding<S: Scalar>(b: &mut Bound<S>, rows: Var, q: &QueryInput) -> Result<Var> {
    if q.encoding_width != b.hyper.encoding_width() {
        return Err(FieldError::Shape(format!("encoding width {} vs {}", q.encoding_width, b.hyper.encoding_width())));
    }
    let mut parts = Vec::with_capacity(4);
    for map in &q.planes {
        parts.push(b.g.sparse(rows, map.clone()));
    }
    let pe = b.constant(&[q.n, q.encoding_width], &q.encoding);
    parts.push(b.linear(pe, "pe")?);
    Ok(b.g.concat_cols(&parts))
}

/// Head MLP logits `[q, out]`.
pub fn head_logits<S: Scalar>(b: &mut Bound<S>, h: Var, head: Head) -> Result<Var> {
    let want = b.hyper.head_input();
    if b.g.value(h).cols() != want {
        return Err(FieldError::Shape(format!("head input width {} vs {want}", b.g.value(h).cols())));
    }
    let p = head.prefix();
    let x = b.linear(h, &format!("{p}.l1"))?;
    let x = b.g.relu(x);
    let x = b.linear(x, &format!("{p}.l2"))?;
    let x = b.g.relu(x);
    b.linear(x, &format!("{p}.l3"))
}

/// Probabilities of a head: logistic for repair, softmax for the classifiers.
pub fn head_probabilities<S: Scalar>(b: &mut Bound<S>, h: Var, head: Head) -> Result<Var> {
    let z = head_logits(b, h, head)?;
    Ok(match head {
        Head::Repair => b.g.sigmoid(z),
        Head::Label | Head::Segment => b.g.softmax(z),
    })
}

/// Refined tri-plane features in row layout `[3·r², c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneField<S> {
    pub c: usize,
    pub r: usize,
    pub rows: Tensor<S>,
}

impl<S: Scalar> TriPlaneField<S> {
    /// Channel `ch` of plane `p` (0 = XY, 1 = YZ, 2 = XZ) at cell row `v`, column `u`.
    pub fn at(&self, p: usize, ch: usize, v: usize, u: usize) -> S {
        self.rows.data[(p * self.r * self.r + v * self.r + u) * self.c + ch]
    }

    pub fn is_finite(&self) -> bool {
        self.rows.is_finite()
    }
}

impl<S: Scalar> Model<S> {
    pub fn new(hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::default();
        for (name, shape, fan_in) in parameter_layout(&hyper) {
            params.insert(&name, init.uniform(&shape, fan_in));
        }
        Ok(Model { hyper, params })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { hyper: self.hyper.clone(), params: self.params.cast() }
    }

    /// Encoders, fusion, projection and U-Net: `[3, c, r, r]`.
    pub fn encode_field(b: &mut Bound<S>, input: &FieldInput) -> Result<Var> {
        let h = b.hyper.clone();
        let phi_s = encode_points(b, &input.surface, "enc_s")?;
        let phi_k = encode_points(b, &input.skeleton, "enc_k")?;
        let planes = match h.fusion {
            FusionMode::Ssa => {
                let fused = ssa_fuse(b, phi_s, phi_k, &input.knn, input.k)?;
                triplane_project(b, fused, input.surface_planes.clone(), h.r)?
            }
            FusionMode::DistanceWeighted => {
                let fused = distance_weighted_fuse(b, phi_s, phi_k, &input.knn, &input.knn_weights, input.k)?;
                triplane_project(b, fused, input.surface_planes.clone(), h.r)?
            }
            FusionMode::Early => {
                let all = b.g.concat_rows(&[phi_s, phi_k]);
                triplane_project(b, all, input.union_planes.clone(), h.r)?
            }
            FusionMode::Late => {
                let ps = triplane_project(b, phi_s, input.surface_planes.clone(), h.r)?;
                let pk = triplane_project(b, phi_k, input.skeleton_planes.clone(), h.r)?;
                b.g.concat_channels(ps, pk)
            }
        };
        unet2d(b, planes)
    }

    /// Forward-only field for inference.
    pub fn field(&self, input: &FieldInput) -> Result<TriPlaneField<S>> {
        let mut b = Bound::new(self, false);
        let planes = Self::encode_field(&mut b, input)?;
        let rows = plane_rows(&mut b, planes);
        Ok(TriPlaneField { c: self.hyper.c, r: self.hyper.r, rows: b.g.into_value(rows) })
    }

    /// Head probabilities `[q, out]` for queries against a precomputed field.
    pub fn query(&self, field: &TriPlaneField<S>, q: &QueryInput, head: Head) -> Result<Tensor<S>> {
        if field.c != self.hyper.c || field.r != self.hyper.r {
            return Err(FieldError::Shape(format!("field {}×{} vs model {}×{}", field.c, field.r, self.hyper.c, self.hyper.r)));
        }
        let mut b = Bound::new(self, false);
        let rows = b.g.constant(field.rows.clone());
        let h = sample_query_embedding(&mut b, rows, q)?;
        let p = head_probabilities(&mut b, h, head)?;
        Ok(b.g.into_value(p))
    }
}
