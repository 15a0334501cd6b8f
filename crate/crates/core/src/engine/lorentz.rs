//! Lorentz-model operations recorded on a [`Graph`].
//!
//! Rows are points: an `n x (d+1)` node holds `n` points whose column 0 is
//! the time coordinate. Curvatures are graph nodes so they can be trained.

use crate::engine::graph::{Graph, NodeId, Unary};
use crate::engine::params::{ParamId, ParamStore};
use crate::geometry::Curvature;

/// A curvature `k` and the derived scalars every Lorentz op needs, all 1x1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KappaNodes {
    pub kappa: NodeId,
    /// `-k`.
    pub neg: NodeId,
    /// `-1/k`.
    pub neg_recip: NodeId,
    /// `sqrt(-k)`.
    pub sqrt_neg: NodeId,
    /// `sqrt(-1/k)`, the origin's time coordinate.
    pub origin_time: NodeId,
}

impl KappaNodes {
    /// `k = -exp(theta)` for a trainable 1x1 parameter `theta`.
    pub fn from_theta(g: &mut Graph, store: &ParamStore, theta: ParamId) -> Self {
        let t = g.param(store, theta);
        let neg = g.exp(t);
        let kappa = g.neg(neg);
        let neg_recip = g.recip(neg);
        let sqrt_neg = g.sqrt(neg);
        let origin_time = g.sqrt(neg_recip);
        Self {
            kappa,
            neg,
            neg_recip,
            sqrt_neg,
            origin_time,
        }
    }

    pub fn constant(g: &mut Graph, kappa: Curvature) -> Self {
        let k = kappa.value();
        Self {
            kappa: g.constant(k),
            neg: g.constant(-k),
            neg_recip: g.constant(-1.0 / k),
            sqrt_neg: g.constant((-k).sqrt()),
            origin_time: g.constant((-1.0 / k).sqrt()),
        }
    }

    pub fn value(&self, g: &Graph) -> f64 {
        g.value(self.kappa).item()
    }

    pub fn curvature(&self, g: &Graph) -> Curvature {
        Curvature::new(self.value(g)).expect("graph curvature is negative by construction")
    }
}

pub fn spatial(g: &mut Graph, x: NodeId) -> NodeId {
    let cols = g.shape(x).1;
    g.slice_cols(x, 1, cols - 1)
}

/// `exp_o([0, f])` for each row `f` of `feats`.
pub fn exp_origin(g: &mut Graph, feats: NodeId, k: &KappaNodes) -> NodeId {
    let sq = g.square(feats);
    let norm_sq = g.sum_cols(sq);
    let q = g.mul(norm_sq, k.neg);
    let ch = g.unary(q, Unary::CoshSqrt);
    let time = g.mul(ch, k.origin_time);
    let sc = g.unary(q, Unary::SinhcSqrt);
    let sp = g.mul(feats, sc);
    g.concat_cols(&[time, sp])
}

/// `(sqrt(r ||y||^2 - 1/k2), sqrt(r) y)` with `r = k1/k2`: the common tail
/// of HTC and HRC. `k_in == None` means `k1 = k2`.
pub fn lift(g: &mut Graph, y: NodeId, k_in: Option<&KappaNodes>, k_out: &KappaNodes) -> NodeId {
    let sq = g.square(y);
    let norm_sq = g.sum_cols(sq);
    match k_in {
        None => {
            let arg = g.add(norm_sq, k_out.neg_recip);
            let time = g.sqrt(arg);
            g.concat_cols(&[time, y])
        }
        Some(k1) => {
            let ratio = g.div(k1.kappa, k_out.kappa);
            let scaled = g.mul(norm_sq, ratio);
            let arg = g.add(scaled, k_out.neg_recip);
            let time = g.sqrt(arg);
            let root = g.sqrt(ratio);
            let sp = g.mul(y, root);
            g.concat_cols(&[time, sp])
        }
    }
}

/// HTC: `lift(x_s W)`.
pub fn htc(g: &mut Graph, x: NodeId, w: NodeId, k_in: Option<&KappaNodes>, k_out: &KappaNodes) -> NodeId {
    let xs = spatial(g, x);
    let y = g.matmul(xs, w);
    lift(g, y, k_in, k_out)
}

/// `v / (sqrt(|k|) ||v||_L)` row by row. Rows must be future timelike; a
/// violation surfaces as a non-finite value from `sqrt`.
pub fn project(g: &mut Graph, v: NodeId, k: &KappaNodes) -> NodeId {
    let m = g.minkowski(v, v);
    let neg = g.neg(m);
    let norm = g.sqrt(neg);
    let denom = g.mul(norm, k.sqrt_neg);
    g.div(v, denom)
}

/// Row-wise `arcosh(k <x,y>_L)`, clamped below at argument 1.
pub fn distance(g: &mut Graph, x: NodeId, y: NodeId, k: &KappaNodes) -> NodeId {
    let ip = g.minkowski(x, y);
    let beta = g.mul(ip, k.kappa);
    g.arcosh(beta)
}

/// Uniform Lorentzian midpoint of consecutive groups of `group` rows.
pub fn group_midpoint(g: &mut Graph, x: NodeId, group: usize, k: &KappaNodes) -> NodeId {
    let mean = g.group_mean(x, group);
    project(g, mean, k)
}
