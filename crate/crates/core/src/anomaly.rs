//! Decoder head, anomaly scores, training losses and score smoothing.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::{embed_graph, init_uniform, FrameEncoder, PointCloudFrame};
use crate::engine::graph::{Graph, NodeId};
use crate::engine::lorentz::{self, KappaNodes};
use crate::engine::params::{ParamId, ParamStore};
use crate::engine::rng::RandomSource;
use crate::error::{Error, Result};
use crate::geometry::{self, Curvature, LorentzPoint};
use crate::tensor::Mat;
use crate::transformer::{HypSequence, HypTransformer};

/// Moving-average window used for reported scores.
pub const SMOOTHING_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    /// Predict the embedding of the next frame.
    Prediction,
    /// Emit an anomaly logit for the last input frame.
    Classification,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub hidden: Vec<usize>,
    pub mode: DecoderMode,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("decoder hidden widths must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// MLP head: ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl Decoder {
    /// The final bias starts at zero so an untrained prediction head is
    /// centred on the origin.
    pub fn register(
        store: &mut ParamStore,
        config: &DecoderConfig,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        config.validate()?;
        let widths: Vec<usize> = config.hidden.iter().copied().chain([out_dim]).collect();
        let mut fan_in = in_dim;
        let mut layers = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let weight = init_uniform(fan_in, w, fan_in, rng);
            let bias = if last { Mat::zeros(1, w) } else { init_uniform(1, w, fan_in, rng) };
            layers.push((
                store.add(format!("decoder.{i}.weight"), weight, true, true),
                store.add(format!("decoder.{i}.bias"), bias, true, false),
            ));
            fan_in = w;
        }
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            let z = g.matmul(h, wn);
            h = g.add(z, bn);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }

    /// Pure forward on one input vector.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let xn = g.input(Mat::row_vector(x));
        let y = self.forward(&mut g, store, xn);
        g.value(y).data().to_vec()
    }
}

/// Decoder output for a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Point(LorentzPoint),
    Logit(f64),
}

/// Uniform Lorentzian midpoint over time of every sequence in `x`.
pub fn temporal_midpoint(x: &HypSequence) -> Result<Vec<LorentzPoint>> {
    (0..x.batch())
        .map(|b| {
            if x.time() == 1 {
                return Ok(x.lorentz_point(b, 0));
            }
            let mut sum = vec![0.0; x.dim()];
            for t in 0..x.time() {
                for (s, c) in sum.iter_mut().zip(x.point(b, t)) {
                    *s += c / x.time() as f64;
                }
            }
            geometry::project_unit_hyperboloid(&sum, x.kappa())
        })
        .collect()
}

/// Decodes each sequence of `x`. Prediction outputs land on the
/// `k_embed` hyperboloid.
pub fn decode(x: &HypSequence, decoder: &Decoder, store: &ParamStore, k_embed: Curvature) -> Result<Vec<Decoded>> {
    temporal_midpoint(x)?
        .into_iter()
        .map(|m| {
            let y = decoder.apply(store, m.spatial());
            Ok(match decoder.config().mode {
                DecoderMode::Prediction => {
                    if y.len() != m.dim() {
                        return Err(Error::InvalidDimension("prediction head width".into()));
                    }
                    Decoded::Point(crate::transformer::lift_spatial(&y, x.kappa(), k_embed))
                }
                DecoderMode::Classification => Decoded::Logit(y[0]),
            })
        })
        .collect()
}

/// Graph version of [`decode`] on `(B*T) x (D+1)` tokens. Returns points at
/// `k_embed` (prediction) or `B x 1` logits (classification).
pub fn decode_graph(
    g: &mut Graph,
    store: &ParamStore,
    decoder: &Decoder,
    tokens: NodeId,
    window: usize,
    k_tokens: &KappaNodes,
    k_embed: &KappaNodes,
) -> NodeId {
    let mid = if window == 1 {
        tokens
    } else {
        lorentz::group_midpoint(g, tokens, window, k_tokens)
    };
    let sp = lorentz::spatial(g, mid);
    let y = decoder.forward(g, store, sp);
    match decoder.config().mode {
        DecoderMode::Prediction => lorentz::lift(g, y, Some(k_tokens), k_embed),
        DecoderMode::Classification => y,
    }
}

/// Distance between the decoded prediction and the embedding of
/// `target_frame` produced by the same encoder and exponential map.
pub fn anomaly_score_prediction(
    x: &HypSequence,
    target_frame: &PointCloudFrame,
    encoder: &FrameEncoder,
    transformer: &HypTransformer,
    decoder: &Decoder,
    store: &ParamStore,
) -> Result<f64> {
    let mut g = Graph::new();
    let ke = transformer.embed_kappa(&mut g, store);
    let kappa = ke.curvature(&g);
    let feats = encoder.forward_frames(&mut g, store, &[target_frame])?;
    let target = embed_graph(&mut g, feats, &ke);
    let target = LorentzPoint::from_coords_unchecked(g.value(target).row(0).to_vec());
    match decode(x, decoder, store, kappa)?.into_iter().next() {
        Some(Decoded::Point(p)) => prediction_distance(&p, &target, kappa),
        _ => Err(Error::InvalidConfig("prediction score needs a prediction decoder".into())),
    }
}

/// Lorentzian distance between a prediction and a target embedding.
pub fn prediction_distance(pred: &LorentzPoint, target: &LorentzPoint, kappa: Curvature) -> Result<f64> {
    geometry::lorentz_distance(pred, target, kappa)
}

pub fn logistic(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

/// Logistic score of the classification decoder for each sequence of `x`.
pub fn anomaly_score_classification(x: &HypSequence, decoder: &Decoder, store: &ParamStore) -> Result<Vec<f64>> {
    if decoder.config().mode != DecoderMode::Classification {
        return Err(Error::InvalidConfig("classification score needs a classification decoder".into()));
    }
    Ok(decode(x, decoder, store, x.kappa())?
        .into_iter()
        .map(|d| match d {
            Decoded::Logit(l) => logistic(l),
            Decoded::Point(_) => unreachable!("classification decoder"),
        })
        .collect())
}

/// Mean Lorentzian distance over paired points.
pub fn loss_lorentzian(pred: &[LorentzPoint], target: &[LorentzPoint], kappa: Curvature) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::InvalidDimension("prediction and target counts differ".into()));
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(target) {
        sum += geometry::lorentz_distance(p, t, kappa)?;
    }
    Ok(sum / pred.len() as f64)
}

pub fn loss_mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::InvalidDimension(format!(
            "mse of lengths {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

/// Per-row Lorentzian distance, `n x 1`.
pub fn lorentzian_rows(g: &mut Graph, pred: NodeId, target: NodeId, k: &KappaNodes) -> NodeId {
    lorentz::distance(g, pred, target, k)
}

/// Per-row mean squared difference, `n x 1`.
pub fn mse_rows(g: &mut Graph, pred: NodeId, target: NodeId) -> NodeId {
    let n = g.shape(pred).1 as f64;
    let d = g.sub(pred, target);
    let sq = g.square(d);
    let s = g.sum_cols(sq);
    g.scale(s, 1.0 / n)
}

/// Anchor logit for a frame label: the two anchors sit at `exp_o(-1)` and
/// `exp_o(+1)` on the one-dimensional hyperboloid of curvature `-1`.
pub fn label_anchor(label: u8) -> f64 {
    if label == 0 {
        -1.0
    } else {
        1.0
    }
}

/// Truncated trailing moving average: `out[t]` is the mean of
/// `raw[max(0, t-w+1)..=t]`.
pub fn smooth(raw: &[f64], w: usize) -> Result<Vec<f64>> {
    if w < 1 {
        return Err(Error::InvalidWindow(w));
    }
    Ok((0..raw.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(w);
            window_mean(&raw[lo..=t])
        })
        .collect())
}

/// Mean of a short slice, correctly rounded in all but pathological cases:
/// a compensated sum followed by a remainder-corrected division. Constant
/// inputs come back unchanged.
fn window_mean(xs: &[f64]) -> f64 {
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for &x in xs {
        let s = hi + x;
        lo += if hi.abs() >= x.abs() { (hi - s) + x } else { (x - s) + hi };
        hi = s;
    }
    let s = hi + lo;
    let lo = lo - (s - hi);
    let hi = s;
    let n = xs.len() as f64;
    let q = hi / n;
    let r = (-q).mul_add(n, hi) + lo;
    q + r / n
}

/// Per-frame scores of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub video_id: String,
    pub category: Option<String>,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoreSeries {
    /// Builds a series with `smoothed` left equal to `raw`.
    pub fn new(video_id: impl Into<String>, raw: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if raw.len() != labels.len() {
            return Err(Error::InvalidDimension(format!(
                "{} scores for {} labels",
                raw.len(),
                labels.len()
            )));
        }
        Ok(Self {
            video_id: video_id.into(),
            category: None,
            smoothed: raw.clone(),
            raw,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Recomputes `smoothed` from `raw`.
pub fn moving_average(series: &ScoreSeries, w: usize) -> Result<ScoreSeries> {
    Ok(ScoreSeries {
        smoothed: smooth(&series.raw, w)?,
        ..series.clone()
    })
}

pub const SCORE_HEADER: &str = "video_id,frame,raw,smoothed,label,category";

/// Writes one score file; floats use Rust's shortest round-trip formatting.
pub fn write_scores(series: &ScoreSeries, path: &Path) -> Result<()> {
    let mut s = String::with_capacity(series.len() * 48);
    s.push_str(SCORE_HEADER);
    s.push('\n');
    let cat = series.category.as_deref().unwrap_or("");
    for t in 0..series.len() {
        writeln!(
            s,
            "{},{},{:?},{:?},{},{}",
            series.video_id, t, series.raw[t], series.smoothed[t], series.labels[t], cat
        )
        .expect("writing to a String");
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<ScoreSeries> {
    let text = std::fs::read_to_string(path)?;
    let corrupt = |m: String| Error::CorruptFile(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(SCORE_HEADER) {
        return Err(corrupt("missing score header".into()));
    }
    let mut out = ScoreSeries {
        video_id: String::new(),
        category: None,
        raw: vec![],
        smoothed: vec![],
        labels: vec![],
    };
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(corrupt(format!("line {} has {} fields", i + 2, f.len())));
        }
        if i == 0 {
            out.video_id = f[0].to_string();
            out.category = (!f[5].is_empty()).then(|| f[5].to_string());
        } else if f[0] != out.video_id {
            return Err(corrupt("mixed video ids".into()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| corrupt(format!("bad number {s:?}")));
        if f[1].parse::<usize>().ok() != Some(i) {
            return Err(corrupt(format!("frame index {} out of order", f[1])));
        }
        out.raw.push(num(f[2])?);
        out.smoothed.push(num(f[3])?);
        out.labels.push(match f[4] {
            "0" => 0,
            "1" => 1,
            other => return Err(corrupt(format!("bad label {other:?}"))),
        });
    }
    Ok(out)
}
