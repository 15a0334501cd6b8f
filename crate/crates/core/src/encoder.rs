//! Per-frame point cloud encoder: a shared per-point MLP followed by
//! coordinate-wise max pooling, then lifting onto the hyperboloid.

use crate::engine::graph::{Graph, NodeId};
use crate::engine::lorentz::{self, KappaNodes};
use crate::engine::params::{ParamId, ParamStore};
use crate::engine::rng::RandomSource;
use crate::error::{Error, Result};
use crate::geometry::{self, Curvature, TangentVector};
use crate::tensor::Mat;
use crate::transformer::HypSequence;

/// One frame of `N >= 1` points in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFrame {
    points: Vec<[f64; 3]>,
}

impl PointCloudFrame {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyFrame);
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidFrame(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / self.points.len() as f64)
    }

    fn write_rows(&self, out: &mut Vec<f64>) {
        for p in &self.points {
            out.extend_from_slice(p);
        }
    }
}

/// A finite `D`-dimensional frame feature.
#[derive(Debug, Clone, PartialEq)]
pub struct EuclideanFeature {
    values: Vec<f64>,
}

impl EuclideanFeature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalDomain("feature has a non-finite entry".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Output widths of the per-point layers; the last one is `D`.
    pub widths: Vec<usize>,
}

impl EncoderConfig {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        let cfg = Self { widths };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.widths.last() {
            None => Err(Error::InvalidConfig("encoder widths are empty".into())),
            Some(&d) if d < 2 => Err(Error::InvalidConfig(format!("feature dimension {d} < 2"))),
            _ if self.widths.contains(&0) => Err(Error::InvalidConfig("zero encoder width".into())),
            _ => Ok(()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256],
        }
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
pub(crate) fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut RandomSource) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Mat::from_vec(rows, cols, data)
}

/// Parameter handles of a registered encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEncoder {
    config: EncoderConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl FrameEncoder {
    pub fn register(store: &mut ParamStore, config: &EncoderConfig, rng: &mut RandomSource) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.widths.len());
        let mut fan_in = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            let weight = init_uniform(fan_in, w, fan_in, rng);
            let bias = init_uniform(1, w, fan_in, rng);
            let wid = store.add(format!("encoder.{i}.weight"), weight, true, true);
            let bid = store.add(format!("encoder.{i}.bias"), bias, true, false);
            layers.push((wid, bid));
            fan_in = w;
        }
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Encodes frames that all have `points_per_frame` points, stacked row
    /// by row in `points` (`F*N x 3`). Returns `F x D`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: NodeId, points_per_frame: usize) -> NodeId {
        let mut h = points;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            let z = g.matmul(h, wn);
            h = g.add(z, bn);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        g.group_max(h, points_per_frame)
    }

    /// Stacks `frames` as a graph input and encodes them. Frames must share
    /// one point count.
    pub fn forward_frames(&self, g: &mut Graph, store: &ParamStore, frames: &[&PointCloudFrame]) -> Result<NodeId> {
        let n = frames.first().ok_or(Error::EmptyFrame)?.len();
        if let Some(f) = frames.iter().find(|f| f.len() != n) {
            return Err(Error::InvalidFrame(format!(
                "batched frames need equal point counts, got {n} and {}",
                f.len()
            )));
        }
        let mut data = Vec::with_capacity(frames.len() * n * 3);
        for f in frames {
            f.write_rows(&mut data);
        }
        let pts = g.input(Mat::from_vec(frames.len() * n, 3, data));
        Ok(self.forward(g, store, pts, n))
    }
}

/// Encodes a single frame with frozen weights.
pub fn encode_frame(frame: &PointCloudFrame, encoder: &FrameEncoder, store: &ParamStore) -> Result<EuclideanFeature> {
    if !frame.points().iter().flatten().all(|c| c.is_finite()) {
        return Err(Error::InvalidFrame("non-finite coordinate".into()));
    }
    let mut g = Graph::new();
    let out = encoder.forward_frames(&mut g, store, &[frame])?;
    EuclideanFeature::new(g.value(out).row(0).to_vec())
}

/// `(0, f)` in the tangent space at the origin of the `k` hyperboloid.
pub fn lift_to_tangent(feature: &EuclideanFeature, kappa: Curvature) -> TangentVector {
    let base = geometry::origin(kappa, feature.dim());
    let mut v = Vec::with_capacity(feature.dim() + 1);
    v.push(0.0);
    v.extend_from_slice(feature.values());
    TangentVector::from_parts_unchecked(base, v)
}

/// Maps a `B x T` grid of features onto the manifold with `exp_o`.
pub fn embed_sequence(features: &[Vec<EuclideanFeature>], kappa: Curvature) -> Result<HypSequence> {
    let batch = features.len();
    let time = features.first().map_or(0, Vec::len);
    let dim = features.first().and_then(|r| r.first()).map_or(0, EuclideanFeature::dim);
    if batch == 0 || time == 0 || dim == 0 {
        return Err(Error::InvalidDimension("empty feature grid".into()));
    }
    let mut data = Vec::with_capacity(batch * time * (dim + 1));
    for row in features {
        if row.len() != time {
            return Err(Error::InvalidDimension("ragged feature grid".into()));
        }
        for f in row {
            if f.dim() != dim {
                return Err(Error::InvalidDimension(format!("feature of length {} in a grid of {dim}", f.dim())));
            }
            let v = lift_to_tangent(f, kappa);
            let x = geometry::exp_map(v.base(), &v, kappa)?;
            data.extend_from_slice(x.coords());
        }
    }
    HypSequence::new(Mat::from_vec(batch * time, dim + 1, data), batch, time, kappa)
}

/// Graph version of `embed_sequence` on stacked features (`n x D`).
pub fn embed_graph(g: &mut Graph, feats: NodeId, k: &KappaNodes) -> NodeId {
    lorentz::exp_origin(g, feats, k)
}
