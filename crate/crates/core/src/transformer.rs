//! Hyperbolic spatio-temporal transformer.
//!
//! The point-level functions (`htc`, `hrc`, `positional_encode`,
//! `attention_scores`, `midpoint_aggregate`) work on [`LorentzPoint`]s
//! directly. [`HypTransformer`] records the same computations on a
//! [`Graph`] with tokens as rows; a batch of `B` sequences of length `T` is
//! stored as `B*T` consecutive rows.

use crate::encoder::{embed_graph, init_uniform, FrameEncoder, PointCloudFrame};
use crate::engine::graph::{Graph, NodeId, ScoreKind};
use crate::engine::lorentz::{self, KappaNodes};
use crate::engine::params::{ParamId, ParamStore};
use crate::engine::rng::RandomSource;
use crate::error::{Error, Result};
use crate::geometry::{self, Curvature, LorentzPoint, MANIFOLD_TOL};
use crate::tensor::Mat;

/// `B x T` points on one hyperboloid, stored as `B*T` rows of `D+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypSequence {
    data: Mat,
    batch: usize,
    time: usize,
    kappa: Curvature,
}

/// Manifold check with the tolerance scaled by the size of the point.
pub(crate) fn on_manifold(x: &[f64], kappa: Curvature) -> bool {
    let scale = (x[0] * x[0] * -kappa.value()).max(1.0);
    x[0] > 0.0 && geometry::check_on_manifold(x, kappa, MANIFOLD_TOL * scale)
}

impl HypSequence {
    pub fn new(data: Mat, batch: usize, time: usize, kappa: Curvature) -> Result<Self> {
        if data.rows() != batch * time || data.cols() < 2 {
            return Err(Error::InvalidDimension(format!(
                "{}x{} rows cannot hold {batch}x{time} points",
                data.rows(),
                data.cols()
            )));
        }
        for r in 0..data.rows() {
            if !on_manifold(data.row(r), kappa) {
                return Err(Error::NotOnManifold {
                    residual: geometry::manifold_residual(data.row(r), kappa),
                });
            }
        }
        Ok(Self {
            data,
            batch,
            time,
            kappa,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn time(&self) -> usize {
        self.time
    }

    /// Ambient dimension `D+1`.
    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn kappa(&self) -> Curvature {
        self.kappa
    }

    pub fn data(&self) -> &Mat {
        &self.data
    }

    pub fn point(&self, b: usize, t: usize) -> &[f64] {
        self.data.row(b * self.time + t)
    }

    pub fn lorentz_point(&self, b: usize, t: usize) -> LorentzPoint {
        LorentzPoint::from_coords_unchecked(self.point(b, t).to_vec())
    }

    /// Reorders the time axis of every sequence: output `t` is input `perm[t]`.
    pub fn permute_time(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.time);
        let mut data = Mat::zeros(self.data.rows(), self.data.cols());
        for b in 0..self.batch {
            for (t, &src) in perm.iter().enumerate() {
                data.row_mut(b * self.time + t).copy_from_slice(self.point(b, src));
            }
        }
        Self { data, ..self.clone() }
    }
}

/// `B x H` row-stochastic `T x T` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    weights: Vec<Mat>,
    batch: usize,
    heads: usize,
}

impl AttentionWeights {
    pub fn new(weights: Vec<Mat>, batch: usize, heads: usize) -> Self {
        assert_eq!(weights.len(), batch * heads);
        Self { weights, batch, heads }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn get(&self, b: usize, h: usize) -> &Mat {
        &self.weights[b * self.heads + h]
    }

    /// Largest `|row sum - 1|` over all rows.
    pub fn max_row_deviation(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|m| (0..m.rows()).map(move |r| (m.row(r).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

/// `(sqrt(r ||y||^2 - 1/k2), sqrt(r) y)` with `r = k1/k2`.
pub fn lift_spatial(y: &[f64], k1: Curvature, k2: Curvature) -> LorentzPoint {
    let r = k1.value() / k2.value();
    let norm_sq: f64 = y.iter().map(|v| v * v).sum();
    let root = r.sqrt();
    let mut coords = Vec::with_capacity(y.len() + 1);
    coords.push((r * norm_sq - 1.0 / k2.value()).sqrt());
    coords.extend(y.iter().map(|v| root * v));
    LorentzPoint::from_coords_unchecked(coords)
}

/// Curvature-aware linear map: `W` (`n x m`) acts on the spatial part.
pub fn htc(x: &LorentzPoint, w: &Mat, k1: Curvature, k2: Curvature) -> Result<LorentzPoint> {
    let xs = x.spatial();
    if w.rows() != xs.len() || w.cols() == 0 {
        return Err(Error::InvalidDimension(format!(
            "weight {}x{} for spatial dimension {}",
            w.rows(),
            w.cols(),
            xs.len()
        )));
    }
    let y = Mat::row_vector(xs).matmul(w);
    Ok(lift_spatial(y.data(), k1, k2))
}

/// Curvature-aware refinement with an arbitrary spatial map `f_r`.
pub fn hrc(x: &LorentzPoint, f_r: impl FnOnce(&[f64]) -> Vec<f64>, k1: Curvature, k2: Curvature) -> Result<LorentzPoint> {
    let y = f_r(x.spatial());
    if y.len() != x.spatial().len() {
        return Err(Error::InvalidDimension(format!(
            "refinement changed length {} to {}",
            x.spatial().len(),
            y.len()
        )));
    }
    Ok(lift_spatial(&y, k1, k2))
}

/// `project(x + eps * p)`.
pub fn positional_encode(x: &LorentzPoint, p: &LorentzPoint, epsilon: f64, kappa: Curvature) -> Result<LorentzPoint> {
    if x.dim() != p.dim() {
        return Err(Error::InvalidDimension("positional point dimension".into()));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let v: Vec<f64> = x.coords().iter().zip(p.coords()).map(|(a, b)| a + epsilon * b).collect();
    geometry::project_unit_hyperboloid(&v, kappa)
}

/// `(2 + 2<q_t, k_u>_L) / sqrt(d_h) + b` for all pairs.
pub fn attention_logits(q: &[LorentzPoint], k: &[LorentzPoint], bias: f64, d_h: usize) -> Result<Mat> {
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut out = Mat::zeros(q.len(), k.len());
    for (t, qt) in q.iter().enumerate() {
        for (u, ku) in k.iter().enumerate() {
            let ip = geometry::lorentz_inner(qt.coords(), ku.coords())?;
            out.set(t, u, (2.0 + 2.0 * ip) * scale + bias);
        }
    }
    Ok(out)
}

/// Row-wise softmax of [`attention_logits`].
pub fn attention_scores(q: &[LorentzPoint], k: &[LorentzPoint], bias: f64, d_h: usize) -> Result<Mat> {
    let mut a = attention_logits(q, k, bias, d_h)?;
    for r in 0..a.rows() {
        softmax_in_place(a.row_mut(r));
    }
    Ok(a)
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Weighted Lorentzian midpoint of `v` for each row of `a`.
pub fn midpoint_aggregate(a: &Mat, v: &[LorentzPoint], kappa: Curvature) -> Result<Vec<LorentzPoint>> {
    if a.cols() != v.len() || v.is_empty() {
        return Err(Error::InvalidDimension("attention width does not match value count".into()));
    }
    let n = v[0].dim() + 1;
    (0..a.rows())
        .map(|t| {
            let row = a.row(t);
            if let Some(u) = one_hot(row) {
                return Ok(v[u].clone());
            }
            let mut sum = vec![0.0; n];
            for (w, p) in row.iter().zip(v) {
                for (s, c) in sum.iter_mut().zip(p.coords()) {
                    *s += w * c;
                }
            }
            geometry::project_unit_hyperboloid(&sum, kappa)
        })
        .collect()
}

fn one_hot(row: &[f64]) -> Option<usize> {
    let mut hit = None;
    for (i, &w) in row.iter().enumerate() {
        match w {
            0.0 => {}
            1.0 if hit.is_none() => hit = Some(i),
            _ => return None,
        }
    }
    hit
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Hyperbolic,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    /// Spatial feature dimension `D`; tokens carry `D+1` coordinates.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Tokens per sequence `T`.
    pub window: usize,
    pub dropout: f64,
    pub epsilon: f64,
    pub positional: bool,
    pub space: Space,
}

pub const LAYERNORM_EPS: f64 = 1e-5;

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim < 2 || self.window < 1 || self.heads < 1 {
            return bad(format!("dim {} window {} heads {}", self.dim, self.window, self.heads));
        }
        if (self.dim + 1) % self.heads != 0 {
            return bad(format!("{} heads do not divide D+1 = {}", self.heads, self.dim + 1));
        }
        if self.space == Space::Hyperbolic && self.head_dim() < 2 {
            return bad("hyperbolic heads need at least 2 coordinates".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("positional epsilon {}", self.epsilon));
        }
        Ok(())
    }

    /// `D_h = (D+1)/H`.
    pub fn head_dim(&self) -> usize {
        (self.dim + 1) / self.heads
    }

    /// Width of the feed-forward hidden point.
    pub fn ffn_width(&self) -> usize {
        2 * (self.dim + 1)
    }
}

/// Parameter handles of one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Log-magnitude of the layer curvature (hyperbolic only).
    pub theta: Option<ParamId>,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    /// `1 x H`.
    pub attn_bias: ParamId,
    pub norm1: (ParamId, ParamId),
    pub ffn_w1: ParamId,
    pub ffn_b1: Option<ParamId>,
    pub ffn_w2: ParamId,
    pub ffn_b2: Option<ParamId>,
    pub norm2: (ParamId, ParamId),
}

/// Learnable positional points `p_t = HTC(lift(e_t); W_pos)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable {
    /// `T x D` spatial seeds (`T x (D+1)` vectors in Euclidean mode).
    pub table: ParamId,
    /// `D x D` HTC weight (hyperbolic only).
    pub weight: Option<ParamId>,
    pub epsilon: f64,
}

impl PositionalTable {
    /// The `T` positional points at curvature `kappa`.
    pub fn points(&self, store: &ParamStore, kappa: Curvature) -> Result<Vec<LorentzPoint>> {
        let w = self.weight.ok_or_else(|| Error::InvalidConfig("Euclidean positional table".into()))?;
        let e = store.value(self.table);
        (0..e.rows())
            .map(|t| htc(&lift_spatial(e.row(t), kappa, kappa), store.value(w), kappa, kappa))
            .collect()
    }
}

/// Optional record of intermediate nodes, for instrumentation.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// `(label, node, curvature node)` at each representation boundary.
    pub boundaries: Vec<(String, NodeId, Option<KappaNodes>)>,
    /// Attention weights per layer and head, `(B*T) x T`.
    pub attention: Vec<Vec<NodeId>>,
    /// Filled by passes that own their graph, such as [`encoder_forward`].
    pub values: Option<TracedValues>,
}

/// Per-pass settings: dropout randomness (training only) and tracing.
#[derive(Default)]
pub struct ForwardCtx<'a> {
    pub dropout_rng: Option<&'a mut RandomSource>,
    pub trace: Option<&'a mut ForwardTrace>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(rng: &'a mut RandomSource) -> Self {
        Self {
            dropout_rng: Some(rng),
            trace: None,
        }
    }

    fn mark(&mut self, label: impl FnOnce() -> String, node: NodeId, k: Option<&KappaNodes>) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.boundaries.push((label(), node, k.copied()));
        }
    }

    /// Inverted-dropout mask, or `None` when dropout is inactive.
    fn mask(&mut self, g: &mut Graph, rows: usize, cols: usize, rate: f64) -> Option<NodeId> {
        let rng = self.dropout_rng.as_deref_mut()?;
        if rate == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - rate);
        let data = (0..rows * cols).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect();
        Some(g.input(Mat::from_vec(rows, cols, data)))
    }
}

/// Output of a transformer pass.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `(B*T) x (D+1)` tokens.
    pub tokens: NodeId,
    /// Curvature of `tokens` (hyperbolic only).
    pub kappa: Option<KappaNodes>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypTransformer {
    config: TransformerConfig,
    embed_theta: ParamId,
    positional: Option<PositionalTable>,
    layers: Vec<LayerParams>,
}

impl HypTransformer {
    pub fn register(store: &mut ParamStore, config: &TransformerConfig, rng: &mut RandomSource) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hyperbolic = config.space == Space::Hyperbolic;
        let embed_theta = store.add("embed.theta", Mat::scalar(0.0), true, false);
        let positional = config.positional.then(|| {
            let width = if hyperbolic { d } else { d + 1 };
            PositionalTable {
                table: store.add("pos.table", init_uniform(config.window, width, width, rng), true, false),
                weight: hyperbolic.then(|| store.add("pos.weight", init_uniform(d, d, d, rng), true, true)),
                epsilon: config.epsilon,
            }
        });
        let (h, dh) = (config.heads, config.head_dim());
        // Hyperbolic heads map D spatial coordinates to D_h - 1; Euclidean
        // heads map the full D+1 token to D_h.
        let (qkv_in, qkv_out) = if hyperbolic { (d, dh - 1) } else { (d + 1, dh) };
        let norm_width = if hyperbolic { d } else { d + 1 };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let theta = hyperbolic.then(|| store.add(p("theta"), Mat::scalar(0.0), true, false));
            let mut head_weights = |kind: &str, rng: &mut RandomSource| -> Vec<ParamId> {
                (0..h)
                    .map(|i| store.add(p(&format!("head{i}.{kind}")), init_uniform(qkv_in, qkv_out, qkv_in, rng), true, true))
                    .collect()
            };
            let wq = head_weights("wq", rng);
            let wk = head_weights("wk", rng);
            let wv = head_weights("wv", rng);
            let attn_bias = store.add(p("attn_bias"), Mat::zeros(1, h), true, false);
            let norm1 = (
                store.add(p("norm1.gamma"), Mat::filled(1, norm_width, 1.0), true, false),
                store.add(p("norm1.beta"), Mat::zeros(1, norm_width), true, false),
            );
            let (ffn_w1, ffn_b1, ffn_w2, ffn_b2) = if hyperbolic {
                let hidden = config.ffn_width() - 1;
                (
                    store.add(p("ffn.w1"), init_uniform(d, hidden, d, rng), true, true),
                    None,
                    store.add(p("ffn.w2"), init_uniform(hidden, d, hidden, rng), true, true),
                    None,
                )
            } else {
                let hidden = config.ffn_width();
                (
                    store.add(p("ffn.w1"), init_uniform(d + 1, hidden, d + 1, rng), true, true),
                    Some(store.add(p("ffn.b1"), init_uniform(1, hidden, d + 1, rng), true, false)),
                    store.add(p("ffn.w2"), init_uniform(hidden, d + 1, hidden, rng), true, true),
                    Some(store.add(p("ffn.b2"), init_uniform(1, d + 1, hidden, rng), true, false)),
                )
            };
            let norm2 = (
                store.add(p("norm2.gamma"), Mat::filled(1, norm_width, 1.0), true, false),
                store.add(p("norm2.beta"), Mat::zeros(1, norm_width), true, false),
            );
            layers.push(LayerParams {
                theta,
                wq,
                wk,
                wv,
                attn_bias,
                norm1,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                norm2,
            });
        }
        Ok(Self {
            config: config.clone(),
            embed_theta,
            positional,
            layers,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn embed_theta(&self) -> ParamId {
        self.embed_theta
    }

    pub fn positional(&self) -> Option<&PositionalTable> {
        self.positional.as_ref()
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn embed_kappa(&self, g: &mut Graph, store: &ParamStore) -> KappaNodes {
        KappaNodes::from_theta(g, store, self.embed_theta)
    }

    pub fn layer_kappa(&self, g: &mut Graph, store: &ParamStore, l: usize) -> Result<KappaNodes> {
        let theta = self.layers[l]
            .theta
            .ok_or_else(|| Error::InvalidConfig("Euclidean layers have no curvature".into()))?;
        Ok(KappaNodes::from_theta(g, store, theta))
    }

    /// Runs positional encoding and all layers over `tokens`, which hold
    /// `(B*T) x (D+1)` rows: points at `k_embed` in hyperbolic mode, raw
    /// vectors in Euclidean mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: NodeId,
        k_embed: Option<&KappaNodes>,
        ctx: &mut ForwardCtx,
    ) -> Result<Encoded> {
        let (rows, cols) = g.shape(tokens);
        let t = self.config.window;
        if cols != self.config.dim + 1 || rows % t != 0 {
            return Err(Error::InvalidDimension(format!(
                "tokens {rows}x{cols} for window {t} and D+1 = {}",
                self.config.dim + 1
            )));
        }
        match self.config.space {
            Space::Hyperbolic => {
                let k_embed = k_embed.ok_or_else(|| Error::InvalidConfig("hyperbolic pass needs a curvature".into()))?;
                let mut x = self.positional_graph(g, store, tokens, k_embed);
                ctx.mark(|| "positional".into(), x, Some(k_embed));
                let mut k_prev = *k_embed;
                for l in 0..self.layers.len() {
                    let kl = self.layer_kappa(g, store, l)?;
                    x = self.layer_hyperbolic(g, store, l, x, &k_prev, &kl, ctx);
                    k_prev = kl;
                }
                Ok(Encoded {
                    tokens: x,
                    kappa: Some(k_prev),
                })
            }
            Space::Euclidean => {
                let mut x = tokens;
                if let Some(pos) = &self.positional {
                    let table = g.param(store, pos.table);
                    let p = g.gather_rows(table, (0..rows).map(|r| r % t).collect());
                    let p = g.scale(p, pos.epsilon);
                    x = g.add(x, p);
                }
                ctx.mark(|| "positional".into(), x, None);
                for l in 0..self.layers.len() {
                    x = self.layer_euclidean(g, store, l, x, ctx);
                }
                Ok(Encoded { tokens: x, kappa: None })
            }
        }
    }

    fn positional_graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId, k: &KappaNodes) -> NodeId {
        let Some(pos) = &self.positional else { return x };
        if pos.epsilon == 0.0 {
            return x;
        }
        let rows = g.shape(x).0;
        let t = self.config.window;
        let e = g.param(store, pos.table);
        let lifted = lorentz::lift(g, e, None, k);
        let w = g.param(store, pos.weight.expect("hyperbolic table has a weight"));
        let p = lorentz::htc(g, lifted, w, None, k);
        let p = g.gather_rows(p, (0..rows).map(|r| r % t).collect());
        let p = g.scale(p, pos.epsilon);
        let v = g.add(x, p);
        lorentz::project(g, v, k)
    }

    /// Multi-head attention at curvature `k`; returns the re-lifted head
    /// concatenation and the per-head weights.
    pub(crate) fn attention_hyperbolic(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        l: usize,
        x: NodeId,
        k: &KappaNodes,
    ) -> (NodeId, Vec<NodeId>) {
        let lp = &self.layers[l];
        let (t, dh) = (self.config.window, self.config.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let bias = g.param(store, lp.attn_bias);
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let [q, kk, v] = [lp.wq[h], lp.wk[h], lp.wv[h]].map(|w| {
                let wn = g.param(store, w);
                lorentz::htc(g, x, wn, None, k)
            });
            let s = g.window_scores(q, kk, t, ScoreKind::Lorentz);
            let s = g.scale(s, 2.0 * scale);
            let s = g.add_const(s, 2.0 * scale);
            let bh = g.slice_cols(bias, h, 1);
            let logits = g.add(s, bh);
            let a = g.softmax_rows(logits);
            let mixed = g.window_mix(a, v, t);
            heads.push(lorentz::project(g, mixed, k));
            weights.push(a);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        // The concatenation of several points is spacelike; its first
        // coordinate is dropped and the remaining D are lifted as spatial.
        let sp = lorentz::spatial(g, cat);
        (lorentz::lift(g, sp, None, k), weights)
    }

    fn dropout_hyperbolic(&self, g: &mut Graph, x: NodeId, k: &KappaNodes, ctx: &mut ForwardCtx) -> NodeId {
        let (rows, cols) = g.shape(x);
        match ctx.mask(g, rows, cols - 1, self.config.dropout) {
            None => x,
            Some(m) => {
                let sp = lorentz::spatial(g, x);
                let dropped = g.mul(sp, m);
                lorentz::lift(g, dropped, None, k)
            }
        }
    }

    fn residual(&self, g: &mut Graph, x: NodeId, y: NodeId, k: &KappaNodes) -> NodeId {
        let v = g.add(x, y);
        lorentz::project(g, v, k)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_hyperbolic(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        l: usize,
        x: NodeId,
        k_prev: &KappaNodes,
        k: &KappaNodes,
        ctx: &mut ForwardCtx,
    ) -> NodeId {
        let lp = &self.layers[l];
        // Move the input onto this layer's hyperboloid.
        let xs = lorentz::spatial(g, x);
        let x = lorentz::lift(g, xs, Some(k_prev), k);
        ctx.mark(|| format!("layer{l}.input"), x, Some(k));

        let (att, weights) = self.attention_hyperbolic(g, store, l, x, k);
        if let Some(tr) = ctx.trace.as_deref_mut() {
            tr.attention.push(weights);
        }
        ctx.mark(|| format!("layer{l}.attention"), att, Some(k));
        let att = self.dropout_hyperbolic(g, att, k, ctx);
        let h = self.residual(g, x, att, k);
        ctx.mark(|| format!("layer{l}.residual1"), h, Some(k));
        let h = layernorm_graph(g, store, h, lp.norm1, Some(k));
        ctx.mark(|| format!("layer{l}.norm1"), h, Some(k));

        let w1 = g.param(store, lp.ffn_w1);
        let f = lorentz::htc(g, h, w1, None, k);
        ctx.mark(|| format!("layer{l}.ffn_hidden"), f, Some(k));
        let fs = lorentz::spatial(g, f);
        let fs = g.relu(fs);
        let f = lorentz::lift(g, fs, None, k);
        ctx.mark(|| format!("layer{l}.ffn_relu"), f, Some(k));
        let w2 = g.param(store, lp.ffn_w2);
        let f = lorentz::htc(g, f, w2, None, k);
        let f = self.dropout_hyperbolic(g, f, k, ctx);
        ctx.mark(|| format!("layer{l}.ffn"), f, Some(k));
        let out = self.residual(g, h, f, k);
        ctx.mark(|| format!("layer{l}.residual2"), out, Some(k));
        let out = layernorm_graph(g, store, out, lp.norm2, Some(k));
        ctx.mark(|| format!("layer{l}.out"), out, Some(k));
        out
    }

    fn layer_euclidean(&self, g: &mut Graph, store: &ParamStore, l: usize, x: NodeId, ctx: &mut ForwardCtx) -> NodeId {
        let lp = &self.layers[l];
        let (t, dh) = (self.config.window, self.config.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let bias = g.param(store, lp.attn_bias);
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let [q, kk, v] = [lp.wq[h], lp.wk[h], lp.wv[h]].map(|w| {
                let wn = g.param(store, w);
                g.matmul(x, wn)
            });
            let s = g.window_scores(q, kk, t, ScoreKind::NegSqDist);
            let s = g.scale(s, scale);
            let bh = g.slice_cols(bias, h, 1);
            let logits = g.add(s, bh);
            let a = g.softmax_rows(logits);
            heads.push(g.window_mix(a, v, t));
            weights.push(a);
        }
        if let Some(tr) = ctx.trace.as_deref_mut() {
            tr.attention.push(weights);
        }
        let mut att = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let (rows, cols) = g.shape(att);
        if let Some(m) = ctx.mask(g, rows, cols, self.config.dropout) {
            att = g.mul(att, m);
        }
        let h = g.add(x, att);
        let h = layernorm_graph(g, store, h, lp.norm1, None);
        let w1 = g.param(store, lp.ffn_w1);
        let b1 = g.param(store, lp.ffn_b1.expect("Euclidean ffn bias"));
        let f = g.matmul(h, w1);
        let f = g.add(f, b1);
        let f = g.relu(f);
        let w2 = g.param(store, lp.ffn_w2);
        let b2 = g.param(store, lp.ffn_b2.expect("Euclidean ffn bias"));
        let f = g.matmul(f, w2);
        let mut f = g.add(f, b2);
        if let Some(m) = ctx.mask(g, rows, cols, self.config.dropout) {
            f = g.mul(f, m);
        }
        let out = g.add(h, f);
        let out = layernorm_graph(g, store, out, lp.norm2, None);
        ctx.mark(|| format!("layer{l}.out"), out, None);
        out
    }
}

/// Mean-variance normalization of each row followed by scale and shift.
fn normalize_rows(g: &mut Graph, store: &ParamStore, y: NodeId, (gamma, beta): (ParamId, ParamId)) -> NodeId {
    let n = g.shape(y).1 as f64;
    let sum = g.sum_cols(y);
    let mean = g.scale(sum, 1.0 / n);
    let c = g.sub(y, mean);
    let sq = g.square(c);
    let ss = g.sum_cols(sq);
    let var = g.scale(ss, 1.0 / n);
    let var = g.add_const(var, LAYERNORM_EPS);
    let sd = g.sqrt(var);
    let z = g.div(c, sd);
    let gm = g.param(store, gamma);
    let bt = g.param(store, beta);
    let z = g.mul(z, gm);
    g.add(z, bt)
}

/// Layer norm: on the spatial part with re-lifting when `k` is given,
/// otherwise on whole rows.
fn layernorm_graph(g: &mut Graph, store: &ParamStore, x: NodeId, params: (ParamId, ParamId), k: Option<&KappaNodes>) -> NodeId {
    match k {
        Some(k) => {
            let sp = lorentz::spatial(g, x);
            let n = normalize_rows(g, store, sp, params);
            lorentz::lift(g, n, None, k)
        }
        None => normalize_rows(g, store, x, params),
    }
}

fn sequence_of(g: &Graph, node: NodeId, batch: usize, time: usize, kappa: Curvature) -> Result<HypSequence> {
    HypSequence::new(g.value(node).clone(), batch, time, kappa)
}

/// Per-head `Q`, `K`, `V` of layer `l` for every token of `x`, each at the
/// layer curvature.
pub fn qkv_transform(
    x: &HypSequence,
    model: &HypTransformer,
    store: &ParamStore,
    l: usize,
    h: usize,
) -> Result<(HypSequence, HypSequence, HypSequence)> {
    let mut g = Graph::new();
    let k = model.layer_kappa(&mut g, store, l)?;
    let kappa = k.curvature(&g);
    let xn = g.input(x.data().clone());
    let lp = &model.layers()[l];
    let mut out = Vec::with_capacity(3);
    for w in [lp.wq[h], lp.wk[h], lp.wv[h]] {
        let wn = g.param(store, w);
        let y = lorentz::htc(&mut g, xn, wn, None, &k);
        out.push(sequence_of(&g, y, x.batch(), x.time(), kappa)?);
    }
    let v = out.pop().expect("three outputs");
    let kk = out.pop().expect("three outputs");
    let q = out.pop().expect("three outputs");
    Ok((q, kk, v))
}

/// Multi-head attention of layer `l`, evaluated on `x` at the layer
/// curvature. The sequence length must equal the configured window.
pub fn hmha(x: &HypSequence, model: &HypTransformer, store: &ParamStore, l: usize) -> Result<(HypSequence, AttentionWeights)> {
    if x.time() != model.config().window || x.dim() != model.config().dim + 1 {
        return Err(Error::InvalidDimension("sequence does not match the model window".into()));
    }
    let mut g = Graph::new();
    let k = model.layer_kappa(&mut g, store, l)?;
    let xn = g.input(x.data().clone());
    let (out, weights) = model.attention_hyperbolic(&mut g, store, l, xn, &k);
    let (b, t) = (x.batch(), x.time());
    let mut mats = Vec::with_capacity(b * weights.len());
    for bi in 0..b {
        for &w in &weights {
            let src = g.value(w);
            let mut m = Mat::zeros(t, t);
            for r in 0..t {
                m.row_mut(r).copy_from_slice(src.row(bi * t + r));
            }
            mats.push(m);
        }
    }
    let heads = weights.len();
    Ok((
        sequence_of(&g, out, b, t, k.curvature(&g))?,
        AttentionWeights::new(mats, b, heads),
    ))
}

fn refine_sequence(x: &HypSequence, k2: Curvature, f: impl Fn(usize, &[f64]) -> Vec<f64>) -> Result<HypSequence> {
    let mut data = Mat::zeros(x.data().rows(), x.dim());
    for r in 0..data.rows() {
        let p = LorentzPoint::from_coords_unchecked(x.data().row(r).to_vec());
        let y = hrc(&p, |s| f(r, s), x.kappa(), k2)?;
        data.row_mut(r).copy_from_slice(y.coords());
    }
    HypSequence::new(data, x.batch(), x.time(), k2)
}

/// Spatial layer normalization with scale `gamma` and shift `beta`.
pub fn hyp_layernorm(x: &HypSequence, gamma: &[f64], beta: &[f64], k2: Curvature) -> Result<HypSequence> {
    let d = x.dim() - 1;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::InvalidDimension("layer norm parameters".into()));
    }
    refine_sequence(x, k2, |_, s| {
        let mean = s.iter().sum::<f64>() / d as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let sd = (var + LAYERNORM_EPS).sqrt();
        s.iter()
            .zip(gamma.iter().zip(beta))
            .map(|(v, (g, b))| (v - mean) / sd * g + b)
            .collect()
    })
}

pub fn hyp_relu(x: &HypSequence, k2: Curvature) -> Result<HypSequence> {
    refine_sequence(x, k2, |_, s| s.iter().map(|v| v.max(0.0)).collect())
}

/// Inverted dropout on spatial parts; `rng == None` is evaluation mode.
pub fn hyp_dropout(x: &HypSequence, rate: f64, rng: Option<&mut RandomSource>) -> Result<HypSequence> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("dropout {rate}")));
    }
    let Some(rng) = rng.filter(|_| rate > 0.0) else {
        return Ok(x.clone());
    };
    let keep = 1.0 / (1.0 - rate);
    let d = x.dim() - 1;
    let mask: Vec<f64> = (0..x.data().rows() * d)
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
        .collect();
    refine_sequence(x, x.kappa(), |r, s| s.iter().zip(&mask[r * d..]).map(|(v, m)| v * m).collect())
}

/// Encodes `video` frame by frame, embeds it and runs the transformer in
/// evaluation mode. `video` must hold exactly `T` frames of equal size.
pub fn encoder_forward(
    video: &[PointCloudFrame],
    encoder: &FrameEncoder,
    model: &HypTransformer,
    store: &ParamStore,
    trace: Option<&mut ForwardTrace>,
) -> Result<HypSequence> {
    if model.config().space != Space::Hyperbolic {
        return Err(Error::InvalidConfig("encoder_forward needs the hyperbolic space".into()));
    }
    let mut g = Graph::new();
    let refs: Vec<_> = video.iter().collect();
    let feats = encoder.forward_frames(&mut g, store, &refs)?;
    let k = model.embed_kappa(&mut g, store);
    let x = embed_graph(&mut g, feats, &k);
    let mut ctx = ForwardCtx { dropout_rng: None, trace };
    ctx.mark(|| "embed".into(), x, Some(&k));
    let out = model.forward(&mut g, store, x, Some(&k), &mut ctx)?;
    let kk = out.kappa.expect("hyperbolic output has a curvature");
    if let Some(tr) = ctx.trace.as_deref_mut() {
        // Resolve traced nodes into a self-contained copy of their values.
        tr.resolve(&g);
    }
    sequence_of(&g, out.tokens, 1, video.len(), kk.curvature(&g))
}

/// Values of traced boundaries after a pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TracedValues {
    pub boundaries: Vec<(String, Mat, Option<f64>)>,
    pub attention: Vec<Vec<Mat>>,
}

impl ForwardTrace {
    fn resolve(&mut self, g: &Graph) {
        self.values = Some(TracedValues {
            boundaries: self
                .boundaries
                .iter()
                .map(|(l, n, k)| (l.clone(), g.value(*n).clone(), k.map(|k| k.value(g))))
                .collect(),
            attention: self
                .attention
                .iter()
                .map(|hs| hs.iter().map(|n| g.value(*n).clone()).collect())
                .collect(),
        });
    }
}
