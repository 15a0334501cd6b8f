//! Full model: frame encoder, embedding, transformer and decoder, with
//! batched window losses, window scores and the training loop.

use std::fmt;
use std::str::FromStr;

use crate::anomaly::{self, Decoder, DecoderConfig, DecoderMode};
use crate::encoder::{embed_graph, EncoderConfig, FrameEncoder, PointCloudFrame};
use crate::engine::graph::{Graph, NodeId};
use crate::engine::lorentz::{self, KappaNodes};
use crate::engine::optim::{adamw_step, OptimizerState};
use crate::engine::params::ParamStore;
use crate::engine::rng::RandomSource;
use crate::error::{Error, Result};
use crate::geometry::Curvature;
use crate::tensor::Mat;
use crate::transformer::{ForwardCtx, HypTransformer, Space, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Lorentzian,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Lorentzian => "lorentzian",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "lorentzian" => Ok(LossKind::Lorentzian),
            _ => Err(Error::InvalidConfig(format!("unknown loss {s:?}"))),
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Hyperbolic => "hyperbolic",
            Space::Euclidean => "euclidean",
        })
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hyperbolic" => Ok(Space::Hyperbolic),
            "euclidean" => Ok(Space::Euclidean),
            _ => Err(Error::InvalidConfig(format!("unknown space {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
    pub decoder: DecoderConfig,
    pub loss: LossKind,
    /// Treat the target embedding as a constant in prediction losses.
    pub detach_target: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.transformer.validate()?;
        self.decoder.validate()?;
        if self.encoder.feature_dim() != self.transformer.dim {
            return Err(Error::InvalidConfig(format!(
                "encoder output {} differs from transformer dim {}",
                self.encoder.feature_dim(),
                self.transformer.dim
            )));
        }
        Ok(())
    }

    pub fn mode(&self) -> DecoderMode {
        self.decoder.mode
    }

    /// Frames per window: `T + 1` when predicting, `T` when classifying.
    pub fn window_frames(&self) -> usize {
        match self.mode() {
            DecoderMode::Prediction => self.transformer.window + 1,
            DecoderMode::Classification => self.transformer.window,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    encoder: FrameEncoder,
    transformer: HypTransformer,
    decoder: Decoder,
}

impl Model {
    /// Registers every parameter (encoder, transformer, decoder in that
    /// order) from one seeded stream.
    pub fn register(store: &mut ParamStore, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RandomSource::with_stream(seed, 0x1417);
        let encoder = FrameEncoder::register(store, &config.encoder, &mut rng)?;
        let transformer = HypTransformer::register(store, &config.transformer, &mut rng)?;
        let d = config.transformer.dim;
        let (in_dim, out_dim) = match (config.transformer.space, config.mode()) {
            (Space::Hyperbolic, DecoderMode::Prediction) => (d, d),
            (Space::Euclidean, DecoderMode::Prediction) => (d + 1, d),
            (Space::Hyperbolic, DecoderMode::Classification) => (d, 1),
            (Space::Euclidean, DecoderMode::Classification) => (d + 1, 1),
        };
        let decoder = Decoder::register(store, &config.decoder, in_dim, out_dim, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            transformer,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &FrameEncoder {
        &self.encoder
    }

    pub fn transformer(&self) -> &HypTransformer {
        &self.transformer
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Per-window values, `starts.len() x 1`. Window `i` covers
    /// `frames[starts[i]..starts[i] + window_frames()]`.
    ///
    /// Prediction windows yield the configured discrepancy between the
    /// decoded prediction and the last frame's embedding. Classification
    /// windows yield the anchor loss against `labels` (indexed like
    /// `frames`, last input frame) or, without labels, the raw logit.
    pub fn window_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &[&PointCloudFrame],
        starts: &[usize],
        labels: Option<&[u8]>,
        ctx: &mut ForwardCtx,
    ) -> Result<NodeId> {
        let wf = self.config.window_frames();
        let t = self.config.transformer.window;
        if starts.is_empty() || starts.iter().any(|&s| s + wf > frames.len()) {
            return Err(Error::InvalidDimension(format!(
                "windows of {wf} frames do not fit in {} frames",
                frames.len()
            )));
        }
        if labels.is_some_and(|l| l.len() != frames.len()) {
            return Err(Error::InvalidDimension("one label per frame is required".into()));
        }
        let feats = self.encoder.forward_frames(g, store, frames)?;
        let input_rows: Vec<usize> = starts.iter().flat_map(|&s| s..s + t).collect();
        let target_rows: Vec<usize> = starts.iter().map(|&s| s + t).collect();
        let last_rows: Vec<usize> = starts.iter().map(|&s| s + t - 1).collect();
        let hyperbolic = self.config.transformer.space == Space::Hyperbolic;

        let (out, k_embed) = if hyperbolic {
            let ke = self.transformer.embed_kappa(g, store);
            let emb = embed_graph(g, feats, &ke);
            let tokens = g.gather_rows(emb, input_rows);
            let enc = self.transformer.forward(g, store, tokens, Some(&ke), ctx)?;
            let kt = enc.kappa.expect("hyperbolic pass keeps a curvature");
            let out = anomaly::decode_graph(g, store, &self.decoder, enc.tokens, t, &kt, &ke);
            (out, Some((ke, emb)))
        } else {
            let rows = g.shape(feats).0;
            let zero = g.input(Mat::zeros(rows, 1));
            let lifted = g.concat_cols(&[zero, feats]);
            let tokens = g.gather_rows(lifted, input_rows);
            let enc = self.transformer.forward(g, store, tokens, None, ctx)?;
            let pooled = if t == 1 { enc.tokens } else { g.group_mean(enc.tokens, t) };
            (self.decoder.forward(g, store, pooled), None)
        };

        match self.config.mode() {
            DecoderMode::Prediction => {
                let target = match &k_embed {
                    Some((_, emb)) => g.gather_rows(*emb, target_rows),
                    None => g.gather_rows(feats, target_rows),
                };
                let target = if self.config.detach_target {
                    g.input(g.value(target).clone())
                } else {
                    target
                };
                Ok(match (k_embed, self.config.loss) {
                    (Some((ke, _)), LossKind::Lorentzian) => anomaly::lorentzian_rows(g, out, target, &ke),
                    (Some(_), LossKind::Mse) => {
                        let p = lorentz::spatial(g, out);
                        let q = lorentz::spatial(g, target);
                        anomaly::mse_rows(g, p, q)
                    }
                    (None, LossKind::Mse) => anomaly::mse_rows(g, out, target),
                    (None, LossKind::Lorentzian) => {
                        let k = KappaNodes::constant(g, Curvature::new(-1.0)?);
                        let p = lorentz::exp_origin(g, out, &k);
                        let q = lorentz::exp_origin(g, target, &k);
                        anomaly::lorentzian_rows(g, p, q, &k)
                    }
                })
            }
            DecoderMode::Classification => {
                let Some(labels) = labels else { return Ok(out) };
                let anchors = Mat::from_vec(
                    last_rows.len(),
                    1,
                    last_rows.iter().map(|&r| anomaly::label_anchor(labels[r])).collect(),
                );
                let a = g.input(anchors);
                Ok(match self.config.loss {
                    LossKind::Mse => anomaly::mse_rows(g, out, a),
                    LossKind::Lorentzian => {
                        let k = KappaNodes::constant(g, Curvature::new(-1.0)?);
                        let p = lorentz::exp_origin(g, out, &k);
                        let q = lorentz::exp_origin(g, a, &k);
                        anomaly::lorentzian_rows(g, p, q, &k)
                    }
                })
            }
        }
    }

    /// Eval-mode anomaly score of each window: the prediction discrepancy,
    /// or the logistic of the classification logit.
    pub fn window_scores(&self, store: &ParamStore, frames: &[&PointCloudFrame], starts: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let rows = self.window_rows(&mut g, store, frames, starts, None, &mut ForwardCtx::eval())?;
        let vals = g.value(rows).data().to_vec();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDomain("non-finite window score".into()));
        }
        Ok(match self.config.mode() {
            DecoderMode::Prediction => vals,
            DecoderMode::Classification => vals.into_iter().map(anomaly::logistic).collect(),
        })
    }

    /// Trainable parameter counts grouped by component.
    pub fn param_counts(&self, store: &ParamStore) -> Vec<(&'static str, usize)> {
        let mut counts = [("encoder", 0), ("transformer", 0), ("decoder", 0)];
        for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
            let slot = if p.name.starts_with("encoder.") {
                0
            } else if p.name.starts_with("decoder.") {
                2
            } else {
                1
            };
            counts[slot].1 += p.value.rows() * p.value.cols();
        }
        counts.to_vec()
    }
}

/// Training windows drawn from a set of equally sized videos.
#[derive(Debug, Clone)]
pub struct WindowSet<'a> {
    videos: Vec<(&'a [PointCloudFrame], &'a [u8])>,
    /// `(video, start)` pairs.
    windows: Vec<(usize, usize)>,
    window_frames: usize,
}

impl<'a> WindowSet<'a> {
    /// Every stride-1 window of `window_frames` frames. Videos shorter than
    /// a window contribute none.
    pub fn new(videos: Vec<(&'a [PointCloudFrame], &'a [u8])>, window_frames: usize) -> Result<Self> {
        let mut windows = Vec::new();
        for (v, (frames, labels)) in videos.iter().enumerate() {
            if frames.len() != labels.len() {
                return Err(Error::InvalidDimension("one label per frame is required".into()));
            }
            windows.extend(crate::data::window_starts(frames.len(), window_frames).into_iter().map(|s| (v, s)));
        }
        if windows.is_empty() {
            return Err(Error::InvalidDimension(format!("no video holds a window of {window_frames} frames")));
        }
        Ok(Self {
            videos,
            windows,
            window_frames,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Frames and labels of the selected windows laid end to end, with the
    /// start of each window in that layout.
    fn batch(&self, picks: &[(usize, usize)]) -> (Vec<&'a PointCloudFrame>, Vec<u8>, Vec<usize>) {
        let wf = self.window_frames;
        let mut frames = Vec::with_capacity(picks.len() * wf);
        let mut labels = Vec::with_capacity(picks.len() * wf);
        let mut starts = Vec::with_capacity(picks.len());
        for &(v, s) in picks {
            let (f, l) = self.videos[v];
            starts.push(frames.len());
            frames.extend(f[s..s + wf].iter());
            labels.extend_from_slice(&l[s..s + wf]);
        }
        (frames, labels, starts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Runs `settings.epochs` shuffled passes over `windows`, one AdamW step per
/// batch. Returns the mean loss of every epoch; `on_epoch` sees each as it
/// completes.
pub fn train_epochs(
    model: &Model,
    store: &mut ParamStore,
    optimizer: &mut OptimizerState,
    windows: &WindowSet,
    settings: &TrainSettings,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if settings.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let mut order_rng = RandomSource::with_stream(settings.seed, 0x5eed);
    let mut dropout_rng = RandomSource::with_stream(settings.seed, 0xd20);
    let mut history = Vec::with_capacity(settings.epochs);
    let mut order = windows.windows.clone();
    for epoch in 0..settings.epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(settings.batch_size) {
            let (frames, labels, starts) = windows.batch(chunk);
            let mut g = Graph::new();
            let rows = model.window_rows(
                &mut g,
                store,
                &frames,
                &starts,
                Some(&labels),
                &mut ForwardCtx::train(&mut dropout_rng),
            )?;
            let loss = g.mean(rows);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteGradient {
                    op: format!("loss at epoch {epoch}"),
                });
            }
            let grads = g.gradients(loss)?;
            store.set_grads(&grads);
            adamw_step(optimizer, store);
            total += value * chunk.len() as f64;
        }
        let mean = total / order.len() as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}

/// Steps per epoch for a set of `windows` windows.
pub fn steps_per_epoch(windows: usize, batch_size: usize) -> u64 {
    windows.div_ceil(batch_size.max(1)) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anomaly::anomaly_score_prediction;
    use crate::data::{generate_synthetic_video, SyntheticConfig};
    use crate::engine::gradcheck::finite_diff_check;
    use crate::transformer::encoder_forward;

    fn config(space: Space, loss: LossKind, mode: DecoderMode) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::new(vec![8, 7]).unwrap(),
            transformer: TransformerConfig {
                dim: 7,
                heads: 2,
                layers: 1,
                window: 3,
                dropout: 0.0,
                epsilon: 0.5,
                positional: true,
                space,
            },
            decoder: DecoderConfig { hidden: vec![6], mode },
            loss,
            detach_target: false,
        }
    }

    fn video(points: usize, frames: usize, seed: u64) -> Vec<PointCloudFrame> {
        let cfg = SyntheticConfig {
            frames,
            points,
            onset: (1, 1),
            seed,
            ..SyntheticConfig::default()
        };
        generate_synthetic_video(&cfg, "v").unwrap().frames
    }

    #[test]
    fn config_checks_dimensions() {
        let mut c = config(Space::Hyperbolic, LossKind::Lorentzian, DecoderMode::Prediction);
        c.encoder = EncoderConfig::new(vec![8, 6]).unwrap();
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        assert_eq!("mse".parse::<LossKind>().unwrap(), LossKind::Mse);
        assert_eq!("euclidean".parse::<Space>().unwrap().to_string(), "euclidean");
        assert!("flat".parse::<Space>().is_err());
    }

    #[test]
    fn hyperbolic_window_scores_match_point_level_path() {
        let c = config(Space::Hyperbolic, LossKind::Lorentzian, DecoderMode::Prediction);
        let mut store = ParamStore::new();
        let model = Model::register(&mut store, &c, 3).unwrap();
        let frames = video(16, 6, 1);
        let refs: Vec<&PointCloudFrame> = frames.iter().collect();
        let scores = model.window_scores(&store, &refs, &[0, 1, 2]).unwrap();
        for (i, s) in scores.iter().enumerate() {
            let y = encoder_forward(&frames[i..i + 3], model.encoder(), model.transformer(), &store, None).unwrap();
            let oracle =
                anomaly_score_prediction(&y, &frames[i + 3], model.encoder(), model.transformer(), model.decoder(), &store)
                    .unwrap();
            assert!((s - oracle).abs() < 1e-9 * (1.0 + oracle), "{s} vs {oracle}");
        }
    }

    #[test]
    fn windows_are_independent_of_batch_company() {
        for space in [Space::Hyperbolic, Space::Euclidean] {
            let c = config(space, LossKind::Mse, DecoderMode::Prediction);
            let mut store = ParamStore::new();
            let model = Model::register(&mut store, &c, 5).unwrap();
            let frames = video(16, 7, 2);
            let refs: Vec<&PointCloudFrame> = frames.iter().collect();
            let all = model.window_scores(&store, &refs, &[0, 1, 2, 3]).unwrap();
            for s in 0..4 {
                let one = model.window_scores(&store, &refs, &[s]).unwrap();
                assert!((one[0] - all[s]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_variant_has_finite_gradients_matching_finite_differences() {
        for space in [Space::Hyperbolic, Space::Euclidean] {
            for loss in [LossKind::Mse, LossKind::Lorentzian] {
                for mode in [DecoderMode::Prediction, DecoderMode::Classification] {
                    let mut c = config(space, loss, mode);
                    c.transformer.window = 2;
                    let mut store = ParamStore::new();
                    let model = Model::register(&mut store, &c, 11).unwrap();
                    let frames = video(6, 4, 3);
                    let refs: Vec<&PointCloudFrame> = frames.iter().collect();
                    let labels = [0u8, 1, 1, 0];
                    let starts: Vec<usize> = (0..=4 - c.window_frames()).collect();
                    let report = finite_diff_check(
                        &store,
                        1e-6,
                        |_, name| name.contains("theta") || name.starts_with("decoder.0") || name.ends_with("wq"),
                        |s, g| {
                            let rows = model.window_rows(g, s, &refs, &starts, Some(&labels), &mut ForwardCtx::eval())?;
                            Ok(g.mean(rows))
                        },
                    )
                    .unwrap();
                    for p in &report.params {
                        assert!(
                            p.max_rel_error < 1e-4 || p.max_abs_error < 1e-8,
                            "{space} {loss} {mode:?} {}: rel {} abs {}",
                            p.name,
                            p.max_rel_error,
                            p.max_abs_error
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn classification_scores_are_probabilities() {
        let c = config(Space::Hyperbolic, LossKind::Lorentzian, DecoderMode::Classification);
        let mut store = ParamStore::new();
        let model = Model::register(&mut store, &c, 1).unwrap();
        let frames = video(8, 5, 4);
        let refs: Vec<&PointCloudFrame> = frames.iter().collect();
        let s = model.window_scores(&store, &refs, &[0, 1, 2]).unwrap();
        assert!(s.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(matches!(model.window_scores(&store, &refs, &[3]), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn lorentzian_anchor_loss_is_absolute_logit_error() {
        let c = config(Space::Euclidean, LossKind::Lorentzian, DecoderMode::Classification);
        let mut store = ParamStore::new();
        let model = Model::register(&mut store, &c, 2).unwrap();
        let frames = video(8, 4, 5);
        let refs: Vec<&PointCloudFrame> = frames.iter().collect();
        let mut g = Graph::new();
        let logits = model.window_rows(&mut g, &store, &refs, &[0, 1], None, &mut ForwardCtx::eval()).unwrap();
        let logits = g.value(logits).data().to_vec();
        let labels = [0u8, 0, 1, 0];
        let mut g = Graph::new();
        let rows = model
            .window_rows(&mut g, &store, &refs, &[0, 1], Some(&labels), &mut ForwardCtx::eval())
            .unwrap();
        let got = g.value(rows).data().to_vec();
        let want = [(logits[0] - 1.0).abs(), (logits[1] + 1.0).abs()];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let c = config(Space::Hyperbolic, LossKind::Lorentzian, DecoderMode::Prediction);
        let vids: Vec<Vec<PointCloudFrame>> = (0..4).map(|s| video(16, 6, 10 + s)).collect();
        let labels = vec![0u8; 6];
        let run = || {
            let mut store = ParamStore::new();
            let model = Model::register(&mut store, &c, 7).unwrap();
            let set = WindowSet::new(vids.iter().map(|v| (v.as_slice(), labels.as_slice())).collect(), 4).unwrap();
            assert_eq!(set.len(), 12);
            let settings = TrainSettings {
                epochs: 6,
                batch_size: 4,
                seed: 1,
            };
            let mut opt = OptimizerState::new(&store, 3e-3, 1e-2, 6 * steps_per_epoch(set.len(), 4));
            let hist = train_epochs(&model, &mut store, &mut opt, &set, &settings, |_, _| {}).unwrap();
            (hist, store)
        };
        let (h1, s1) = run();
        let (h2, s2) = run();
        assert_eq!(h1, h2);
        for ((_, a), (_, b)) in s1.iter().zip(s2.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert!(h1.last().unwrap() < &h1[0], "{h1:?}");
    }

    #[test]
    fn param_counts_cover_every_trainable_parameter() {
        let c = config(Space::Hyperbolic, LossKind::Lorentzian, DecoderMode::Prediction);
        let mut store = ParamStore::new();
        let model = Model::register(&mut store, &c, 0).unwrap();
        let counts = model.param_counts(&store);
        assert_eq!(counts.iter().map(|c| c.1).sum::<usize>(), store.trainable_count());
        assert_eq!(counts[0].1, 3 * 8 + 8 + 8 * 7 + 7);
    }
}
