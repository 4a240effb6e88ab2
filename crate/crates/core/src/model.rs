//! The two-branch VQA network.
//!
//! - `f`: image encoder, conv3×3 → relu → avgpool → conv3×3 → relu →
//!   avgpool → flatten → affine to `hidden_dim`.
//! - `r`: question encoder, token embedding → Elman recurrence, final state.
//! - `m`: fusion, `tanh((P_v I) ⊙ (P_q Q))` with bias-free projections.
//! - `h1`, `h2`: two-layer classifiers for the original and adversarial
//!   branches.
//!
//! Training runs both branches. The adversarial branch encodes a random crop
//! of the image with the same `f`, fuses it with the same `Q` through the same
//! `m`, and passes the result through a gradient reversal operator before
//! `h2`. Inference runs the original branch only.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::datagen::{self, Image};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub image_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub conv_channels: [usize; 2],
    pub answer_count: usize,
    pub vocab_size: usize,
    /// Gradient reversal strength α.
    pub grl_alpha: f64,
    /// Per-side crop fraction bounds `[lower, upper]`.
    pub crop_fraction_range: [f64; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: datagen::IMAGE_SIZE,
            embed_dim: 32,
            hidden_dim: 64,
            conv_channels: [8, 16],
            answer_count: datagen::ANSWER_COUNT,
            vocab_size: datagen::question_vocab_size(),
            grl_alpha: 1.0,
            crop_fraction_range: [0.2, 0.5],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.image_size,
            self.embed_dim,
            self.hidden_dim,
            self.conv_channels[0],
            self.conv_channels[1],
            self.answer_count,
            self.vocab_size,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(String::from(
                "model dimensions must be at least 1",
            )));
        }
        if !self.image_size.is_multiple_of(4) {
            return Err(Error::InvalidConfig(format!(
                "image size {} must be divisible by 4 (two 2x2 poolings)",
                self.image_size
            )));
        }
        let [lo, hi] = self.crop_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "crop fraction range [{lo}, {hi}] must satisfy 0 < lower <= upper <= 1"
            )));
        }
        if !(self.grl_alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gradient reversal strength {} must be >= 0",
                self.grl_alpha
            )));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        let s = self.image_size / 4;
        self.conv_channels[1] * s * s
    }
}

/// Every learnable tensor, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    FConv1Weight,
    FConv1Bias,
    FConv2Weight,
    FConv2Bias,
    FFcWeight,
    FFcBias,
    REmbedding,
    RInputWeight,
    RHiddenWeight,
    RBias,
    MVisualProj,
    MQuestionProj,
    H1Fc1Weight,
    H1Fc1Bias,
    H1Fc2Weight,
    H1Fc2Bias,
    H2Fc1Weight,
    H2Fc1Bias,
    H2Fc2Weight,
    H2Fc2Bias,
}

/// Which sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    ImageEncoder,
    QuestionEncoder,
    Fusion,
    OriginalHead,
    AdversarialHead,
}

impl Component {
    /// Shared between the two branches.
    pub fn is_shared(self) -> bool {
        matches!(self, Self::ImageEncoder | Self::QuestionEncoder | Self::Fusion)
    }
}

impl ParamId {
    pub const ALL: [ParamId; 20] = [
        Self::FConv1Weight,
        Self::FConv1Bias,
        Self::FConv2Weight,
        Self::FConv2Bias,
        Self::FFcWeight,
        Self::FFcBias,
        Self::REmbedding,
        Self::RInputWeight,
        Self::RHiddenWeight,
        Self::RBias,
        Self::MVisualProj,
        Self::MQuestionProj,
        Self::H1Fc1Weight,
        Self::H1Fc1Bias,
        Self::H1Fc2Weight,
        Self::H1Fc2Bias,
        Self::H2Fc1Weight,
        Self::H2Fc1Bias,
        Self::H2Fc2Weight,
        Self::H2Fc2Bias,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FConv1Weight => "f.conv1.weight",
            Self::FConv1Bias => "f.conv1.bias",
            Self::FConv2Weight => "f.conv2.weight",
            Self::FConv2Bias => "f.conv2.bias",
            Self::FFcWeight => "f.fc.weight",
            Self::FFcBias => "f.fc.bias",
            Self::REmbedding => "r.embedding",
            Self::RInputWeight => "r.input.weight",
            Self::RHiddenWeight => "r.hidden.weight",
            Self::RBias => "r.bias",
            Self::MVisualProj => "m.visual_proj.weight",
            Self::MQuestionProj => "m.question_proj.weight",
            Self::H1Fc1Weight => "h1.fc1.weight",
            Self::H1Fc1Bias => "h1.fc1.bias",
            Self::H1Fc2Weight => "h1.fc2.weight",
            Self::H1Fc2Bias => "h1.fc2.bias",
            Self::H2Fc1Weight => "h2.fc1.weight",
            Self::H2Fc1Bias => "h2.fc1.bias",
            Self::H2Fc2Weight => "h2.fc2.weight",
            Self::H2Fc2Bias => "h2.fc2.bias",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn component(self) -> Component {
        use ParamId::*;
        match self {
            FConv1Weight | FConv1Bias | FConv2Weight | FConv2Bias | FFcWeight | FFcBias => Component::ImageEncoder,
            REmbedding | RInputWeight | RHiddenWeight | RBias => Component::QuestionEncoder,
            MVisualProj | MQuestionProj => Component::Fusion,
            H1Fc1Weight | H1Fc1Bias | H1Fc2Weight | H1Fc2Bias => Component::OriginalHead,
            H2Fc1Weight | H2Fc1Bias | H2Fc2Weight | H2Fc2Bias => Component::AdversarialHead,
        }
    }

    pub fn shape(self, cfg: &ModelConfig) -> Vec<usize> {
        use ParamId::*;
        let [c1, c2] = cfg.conv_channels;
        let (h, e, k) = (cfg.hidden_dim, cfg.embed_dim, cfg.answer_count);
        match self {
            FConv1Weight => vec![c1, 3, 3, 3],
            FConv1Bias => vec![c1],
            FConv2Weight => vec![c2, c1, 3, 3],
            FConv2Bias => vec![c2],
            FFcWeight => vec![h, cfg.flat_features()],
            FFcBias => vec![h],
            REmbedding => vec![cfg.vocab_size, e],
            RInputWeight => vec![h, e],
            RHiddenWeight => vec![h, h],
            RBias => vec![h],
            MVisualProj | MQuestionProj => vec![h, h],
            H1Fc1Weight | H2Fc1Weight => vec![h, h],
            H1Fc1Bias | H2Fc1Bias => vec![h],
            H1Fc2Weight | H2Fc2Weight => vec![k, h],
            H1Fc2Bias | H2Fc2Bias => vec![k],
        }
    }

    /// Fan-in for uniform initialization; `None` for zero-initialized biases.
    fn fan_in(self, cfg: &ModelConfig) -> Option<usize> {
        let shape = self.shape(cfg);
        match shape.len() {
            1 => None,
            4 => Some(shape[1] * 9),
            _ if self == Self::REmbedding => Some(1),
            _ => Some(shape[1]),
        }
    }
}

/// All learnable tensors of `f`, `r`, `m`, `h1` and `h2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Seed-derived initialization: weights uniform on `±sqrt(6/fan_in)`,
    /// biases zero. Each tensor draws from its own stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = ParamId::ALL
            .iter()
            .map(|&id| {
                let shape = id.shape(config);
                let mut t = Tensor::zeros(&shape);
                if let Some(fan_in) = id.fan_in(config) {
                    let bound = Float::sqrt(6.0 / fan_in as f64);
                    let mut rng = rng::stream(seed, rng::DOMAIN_INIT, &[id.index() as u64]);
                    for v in t.data_mut() {
                        *v = T::from_f64(rng.gen_range(-bound..bound));
                    }
                }
                t
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Assembles parameters from named tensors; every name must be present
    /// with the shape the config implies.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; ParamId::ALL.len()];
        for (name, t) in named {
            let id =
                ParamId::from_name(&name).ok_or_else(|| Error::InvalidConfig(format!("unknown parameter `{name}`")))?;
            let want = id.shape(config);
            if t.shape() != want.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    t.shape(),
                    want
                )));
            }
            slots[id.index()] = Some(t);
        }
        let tensors = slots
            .into_iter()
            .zip(ParamId::ALL)
            .map(|(t, id)| t.ok_or_else(|| Error::MissingParameter(String::from(id.name()))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        ParamId::ALL.into_iter().zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        ParamId::ALL.into_iter().zip(self.tensors.iter_mut())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Sets the gradient reversal strength used by [`forward_train`].
    pub fn set_grl_alpha(&mut self, alpha: f64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.grl_alpha = alpha;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }
}

/// Parameters bound as leaves of one graph. A parameter is bound at most once
/// per graph, so both branches read the same leaf.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Option<Var>>,
}

impl BoundParams {
    pub fn bind<T: Real>(g: &mut Graph<T>, params: &ModelParams<T>, ids: &[ParamId]) -> Self {
        let mut vars = vec![None; ParamId::ALL.len()];
        for &id in ids {
            if vars[id.index()].is_none() {
                vars[id.index()] = Some(g.param(params.get(id).clone()));
            }
        }
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars[id.index()]
    }

    fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()].unwrap_or_else(|| panic!("parameter `{}` is not bound on this graph", id.name()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        ParamId::ALL
            .into_iter()
            .zip(self.vars.iter())
            .filter_map(|(id, v)| v.map(|v| (id, v)))
    }
}

/// Parameters reached by the original branch.
pub const INFER_PARAMS: [ParamId; 16] = [
    ParamId::FConv1Weight,
    ParamId::FConv1Bias,
    ParamId::FConv2Weight,
    ParamId::FConv2Bias,
    ParamId::FFcWeight,
    ParamId::FFcBias,
    ParamId::REmbedding,
    ParamId::RInputWeight,
    ParamId::RHiddenWeight,
    ParamId::RBias,
    ParamId::MVisualProj,
    ParamId::MQuestionProj,
    ParamId::H1Fc1Weight,
    ParamId::H1Fc1Bias,
    ParamId::H1Fc2Weight,
    ParamId::H1Fc2Bias,
];

/// Stacks images into a `[B, 3, H, W]` tensor scaled to `[0, 1]`.
pub fn images_to_tensor<T: Real>(cfg: &ModelConfig, images: &[&Image]) -> Result<Tensor<T>> {
    let s = cfg.image_size;
    let mut data = Vec::with_capacity(images.len() * 3 * s * s);
    let scale = T::from_f64(1.0 / 255.0);
    for img in images {
        if img.height != s || img.width != s || img.pixels.len() != s * s * 3 {
            return Err(Error::ShapeMismatch(format!(
                "image is {}x{}, model expects {s}x{s}",
                img.height, img.width
            )));
        }
        for c in 0..3 {
            data.extend(
                img.pixels[c..]
                    .iter()
                    .step_by(3)
                    .map(|&p| T::from_f64(p as f64) * scale),
            );
        }
    }
    Tensor::from_vec(&[images.len(), 3, s, s], data)
}

/// Builds `I = f(x)` on `g`.
pub fn image_features<T: Real>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, images: &[&Image]) -> Result<Var> {
    let x = g.input(images_to_tensor(cfg, images)?);
    let y = g.conv3x3(x, p.var(ParamId::FConv1Weight), p.var(ParamId::FConv1Bias))?;
    let y = g.relu(y);
    let y = g.avg_pool2(y)?;
    let y = g.conv3x3(y, p.var(ParamId::FConv2Weight), p.var(ParamId::FConv2Bias))?;
    let y = g.relu(y);
    let y = g.avg_pool2(y)?;
    let y = g.reshape(y, &[images.len(), cfg.flat_features()])?;
    g.linear(y, p.var(ParamId::FFcWeight), Some(p.var(ParamId::FFcBias)))
}

/// Builds `Q = r(q)` on `g`.
pub fn question_features<T: Real>(g: &mut Graph<T>, p: &BoundParams, tokens: &[&[usize]]) -> Result<Var> {
    g.recurrent(
        p.var(ParamId::REmbedding),
        p.var(ParamId::RInputWeight),
        p.var(ParamId::RHiddenWeight),
        p.var(ParamId::RBias),
        tokens.iter().map(|t| t.to_vec()).collect(),
    )
}

/// Builds `m(I, Q) = tanh((P_v I) ⊙ (P_q Q))` on `g`.
pub fn fusion<T: Real>(g: &mut Graph<T>, p: &BoundParams, visual: Var, question: Var) -> Result<Var> {
    let v = g.linear(visual, p.var(ParamId::MVisualProj), None)?;
    let q = g.linear(question, p.var(ParamId::MQuestionProj), None)?;
    let z = g.mul(v, q)?;
    Ok(g.tanh(z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Original,
    Adversarial,
}

/// Builds `h1(F)` or `h2(F)` on `g`.
pub fn classifier<T: Real>(g: &mut Graph<T>, p: &BoundParams, head: Head, fused: Var) -> Result<Var> {
    let ids = match head {
        Head::Original => [
            ParamId::H1Fc1Weight,
            ParamId::H1Fc1Bias,
            ParamId::H1Fc2Weight,
            ParamId::H1Fc2Bias,
        ],
        Head::Adversarial => [
            ParamId::H2Fc1Weight,
            ParamId::H2Fc1Bias,
            ParamId::H2Fc2Weight,
            ParamId::H2Fc2Bias,
        ],
    };
    let h = g.linear(fused, p.var(ids[0]), Some(p.var(ids[1])))?;
    let h = g.relu(h);
    g.linear(h, p.var(ids[2]), Some(p.var(ids[3])))
}

fn check_batch(images: usize, tokens: usize) -> Result<()> {
    if images == 0 || images != tokens {
        return Err(Error::ShapeMismatch(format!(
            "batch of {images} images and {tokens} questions"
        )));
    }
    Ok(())
}

/// `I = f(x)` as a `[B, hidden_dim]` tensor.
pub fn encode_image<T: Real>(params: &ModelParams<T>, images: &[&Image]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, params, &INFER_PARAMS[..6]);
    let v = image_features(&mut g, &p, params.config(), images)?;
    Ok(g.value(v).clone())
}

/// `Q = r(q)` as a `[B, hidden_dim]` tensor.
pub fn encode_question<T: Real>(params: &ModelParams<T>, tokens: &[&[usize]]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, params, &INFER_PARAMS[6..10]);
    let v = question_features(&mut g, &p, tokens)?;
    Ok(g.value(v).clone())
}

/// `m(I, Q)` on precomputed `[B, hidden_dim]` features.
pub fn fuse<T: Real>(params: &ModelParams<T>, visual: &Tensor<T>, question: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, params, &INFER_PARAMS[10..12]);
    let v = g.input(visual.clone());
    let q = g.input(question.clone());
    let z = fusion(&mut g, &p, v, q)?;
    Ok(g.value(z).clone())
}

/// `g(x)`: crops a patch whose per-side fractions are uniform in `range` at a
/// uniform position, then resizes it back to the input size by nearest
/// neighbour.
pub fn random_crop<R: Rng + ?Sized>(image: &Image, range: [f64; 2], rng: &mut R) -> Image {
    let (h, w) = (image.height, image.width);
    let side = |len: usize, rng: &mut R| -> usize {
        let frac = if range[0] < range[1] {
            rng.gen_range(range[0]..=range[1])
        } else {
            range[0]
        };
        (Float::round(frac * len as f64) as usize).clamp(1, len)
    };
    let ph = side(h, rng);
    let pw = side(w, rng);
    let y0 = rng.gen_range(0..=h - ph);
    let x0 = rng.gen_range(0..=w - pw);
    let mut out = Image::filled(h, w, [0, 0, 0]);
    for y in 0..h {
        let sy = y0 + y * ph / h;
        for x in 0..w {
            let sx = x0 + x * pw / w;
            out.set_pixel(y, x, image.pixel(sy, sx));
        }
    }
    out
}

/// How the adversarial branch passes gradients back into the shared layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientFlow {
    /// Gradient reversal with the configured α.
    Reversed,
    /// Plain identity; used to verify the reversal against an unreversed
    /// reference on the identical forward evaluation.
    Identity,
}

/// Output of [`forward_train`]. The graph is kept so callers can attach a
/// loss and run the reverse pass.
#[derive(Debug)]
pub struct TrainForward<T> {
    pub graph: Graph<T>,
    pub params: BoundParams,
    pub s1: Var,
    pub s2: Var,
    pub fused1: Var,
    pub fused2: Var,
}

/// Both branches on a batch:
/// `s1 = h1(m(f(x), r(q)))`, `s2 = h2(grl(m(f(g(x)), r(q))))`.
pub fn forward_train<T: Real, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    images: &[&Image],
    tokens: &[&[usize]],
    crop_rng: &mut R,
) -> Result<TrainForward<T>> {
    forward_train_with(params, images, tokens, crop_rng, GradientFlow::Reversed)
}

pub fn forward_train_with<T: Real, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    images: &[&Image],
    tokens: &[&[usize]],
    crop_rng: &mut R,
    flow: GradientFlow,
) -> Result<TrainForward<T>> {
    check_batch(images.len(), tokens.len())?;
    let cfg = params.config();
    let crops: Vec<Image> = images
        .iter()
        .map(|img| random_crop(img, cfg.crop_fraction_range, crop_rng))
        .collect();
    let crop_refs: Vec<&Image> = crops.iter().collect();

    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, params, &ParamId::ALL);
    let q = question_features(&mut g, &p, tokens)?;
    let i1 = image_features(&mut g, &p, cfg, images)?;
    let fused1 = fusion(&mut g, &p, i1, q)?;
    let s1 = classifier(&mut g, &p, Head::Original, fused1)?;

    let i2 = image_features(&mut g, &p, cfg, &crop_refs)?;
    let fused2 = fusion(&mut g, &p, i2, q)?;
    let into_head = match flow {
        GradientFlow::Reversed => g.grad_reverse(fused2, T::from_f64(cfg.grl_alpha)),
        GradientFlow::Identity => fused2,
    };
    let s2 = classifier(&mut g, &p, Head::Adversarial, into_head)?;
    Ok(TrainForward {
        graph: g,
        params: p,
        s1,
        s2,
        fused1,
        fused2,
    })
}

/// Original branch only, as a graph (for training without the adversarial
/// branch).
pub fn forward_original<T: Real>(
    params: &ModelParams<T>,
    images: &[&Image],
    tokens: &[&[usize]],
    bind: &[ParamId],
) -> Result<(Graph<T>, BoundParams, Var)> {
    check_batch(images.len(), tokens.len())?;
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, params, bind);
    let q = question_features(&mut g, &p, tokens)?;
    let i = image_features(&mut g, &p, params.config(), images)?;
    let f = fusion(&mut g, &p, i, q)?;
    let s1 = classifier(&mut g, &p, Head::Original, f)?;
    Ok((g, p, s1))
}

/// Original-branch logits `[B, answer_count]`. Reads neither `h2`, the crop,
/// nor α.
pub fn forward_infer<T: Real>(params: &ModelParams<T>, images: &[&Image], tokens: &[&[usize]]) -> Result<Tensor<T>> {
    let (g, _, s1) = forward_original(params, images, tokens, &INFER_PARAMS)?;
    Ok(g.value(s1).clone())
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted answer ids for a batch.
pub fn predict<T: Real>(params: &ModelParams<T>, images: &[&Image], tokens: &[&[usize]]) -> Result<Vec<usize>> {
    let logits = forward_infer(params, images, tokens)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_split, SplitKind};

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden_dim: 6,
            embed_dim: 4,
            conv_channels: [2, 3],
            ..ModelConfig::default()
        }
    }

    fn data() -> crate::datagen::DatasetSplit {
        generate_split(6, SplitKind::TrainBiased, 0.9, 3).unwrap()
    }

    #[test]
    fn param_shapes_follow_config() {
        let cfg = ModelConfig::default();
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        assert_eq!(p.get(ParamId::FFcWeight).shape(), &[64, 16 * 8 * 8]);
        assert_eq!(p.get(ParamId::H2Fc2Weight).shape(), &[8, 64]);
        assert_eq!(p.get(ParamId::REmbedding).shape(), &[21, 32]);
        assert!(p.get(ParamId::FConv1Bias).data().iter().all(|&b| b == 0.0));
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(p.get(ParamId::FConv1Weight).data().iter().all(|w| w.abs() <= bound));
        assert_eq!(p, ModelParams::init(&cfg, 1).unwrap());
        assert_ne!(p, ModelParams::init(&cfg, 2).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.crop_fraction_range = [0.6, 0.5];
        assert!(c.validate().is_err());
        c.crop_fraction_range = [0.0, 0.5];
        assert!(c.validate().is_err());
        c = ModelConfig::default();
        c.grl_alpha = -1.0;
        assert!(c.validate().is_err());
        c = ModelConfig::default();
        c.hidden_dim = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_image_gives_zero_features_at_init() {
        let cfg = ModelConfig::default();
        let p = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let black = Image::filled(32, 32, [0, 0, 0]);
        let out = encode_image(&p, &[&black, &black]).unwrap();
        assert_eq!(out.shape(), &[2, 64]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let p = ModelParams::<f64>::init(&tiny(), 5).unwrap();
        let small = Image::filled(16, 16, [1, 2, 3]);
        assert!(matches!(encode_image(&p, &[&small]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn question_encoder_single_step_and_errors() {
        let cfg = tiny();
        let p = ModelParams::<f64>::init(&cfg, 7).unwrap();
        let out = encode_question(&p, &[&[3]]).unwrap();
        // One recurrent step from h0 = 0: tanh(W_in e + b).
        let e = p.get(ParamId::REmbedding).row(3).to_vec();
        let w = p.get(ParamId::RInputWeight);
        let b = p.get(ParamId::RBias).data();
        for i in 0..cfg.hidden_dim {
            let a: f64 = w.row(i).iter().zip(&e).map(|(x, y)| x * y).sum::<f64>() + b[i];
            assert!((out.data()[i] - a.tanh()).abs() < 1e-14);
        }
        assert_eq!(
            encode_question(&p, &[&[1, 2, 3]]).unwrap(),
            encode_question(&p, &[&[1, 2, 3]]).unwrap()
        );
        assert_ne!(
            encode_question(&p, &[&[1, 2, 3]]).unwrap(),
            encode_question(&p, &[&[3, 2, 1]]).unwrap()
        );
        assert!(matches!(
            encode_question(&p, &[&[1, 99]]),
            Err(Error::UnknownToken { id: 99, .. })
        ));
        assert!(matches!(encode_question(&p, &[&[]]), Err(Error::EmptyQuestion)));
    }

    #[test]
    fn fusion_annihilates_zero_visual() {
        let cfg = tiny();
        let p = ModelParams::<f64>::init(&cfg, 8).unwrap();
        let zero = Tensor::zeros(&[1, cfg.hidden_dim]);
        let q = encode_question(&p, &[&[0, 5, 7]]).unwrap();
        let fused = fuse(&p, &zero, &q).unwrap();
        assert!(fused.data().iter().all(|&v| v == 0.0));
        assert!(fuse(&p, &Tensor::zeros(&[1, 3]), &q).is_err());
    }

    #[test]
    fn crop_identity_and_uniform_color() {
        let split = data();
        let img = &split.samples[0].image;
        let mut r = rng::stream(1, rng::DOMAIN_CROP, &[]);
        assert_eq!(&random_crop(img, [1.0, 1.0], &mut r), img);

        let flat = Image::filled(32, 32, [9, 8, 7]);
        assert_eq!(random_crop(&flat, [0.2, 0.5], &mut r), flat);

        let a = random_crop(img, [0.2, 0.5], &mut rng::stream(4, rng::DOMAIN_CROP, &[]));
        let b = random_crop(img, [0.2, 0.5], &mut rng::stream(4, rng::DOMAIN_CROP, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn crop_pixels_come_from_a_patch() {
        // Gradient image: pixel (y, x) = (y, x, 0). A nearest-neighbour
        // resize of a contiguous patch is monotone in both axes.
        let mut img = Image::filled(32, 32, [0, 0, 0]);
        for y in 0..32 {
            for x in 0..32 {
                img.set_pixel(y, x, [y as u8, x as u8, 0]);
            }
        }
        for seed in 0..20 {
            let c = random_crop(&img, [0.2, 0.5], &mut rng::stream(seed, rng::DOMAIN_CROP, &[]));
            let rows: Vec<u8> = (0..32).map(|y| c.pixel(y, 0)[0]).collect();
            let cols: Vec<u8> = (0..32).map(|x| c.pixel(0, x)[1]).collect();
            let span = |v: &[u8]| (v[31] - v[0] + 1) as usize;
            assert!(rows.windows(2).all(|w| w[1] >= w[0]));
            assert!(cols.windows(2).all(|w| w[1] >= w[0]));
            assert!((6..=16).contains(&span(&rows)), "rows span {}", span(&rows));
            assert!((6..=16).contains(&span(&cols)));
        }
    }

    #[test]
    fn forward_train_shapes_and_sharing() {
        let cfg = tiny();
        let p = ModelParams::<f64>::init(&cfg, 9).unwrap();
        let split = data();
        let imgs: Vec<&Image> = split.samples.iter().map(|s| &s.image).collect();
        let toks: Vec<&[usize]> = split.samples.iter().map(|s| s.question_tokens.as_slice()).collect();
        let mut r = rng::stream(2, rng::DOMAIN_CROP, &[]);
        let out = forward_train(&p, &imgs, &toks, &mut r).unwrap();
        assert_eq!(out.graph.value(out.s1).shape(), &[6, 8]);
        assert_eq!(out.graph.value(out.s2).shape(), &[6, 8]);
        // One leaf per parameter: both branches read the same f, r, m.
        assert_eq!(out.graph.param_count(), ParamId::ALL.len());
        assert_ne!(out.graph.value(out.fused1), out.graph.value(out.fused2));
    }

    #[test]
    fn identical_heads_and_identity_crop_coincide() {
        let mut cfg = tiny();
        cfg.crop_fraction_range = [1.0, 1.0];
        let mut p = ModelParams::<f64>::init(&cfg, 10).unwrap();
        for (src, dst) in [
            (ParamId::H1Fc1Weight, ParamId::H2Fc1Weight),
            (ParamId::H1Fc1Bias, ParamId::H2Fc1Bias),
            (ParamId::H1Fc2Weight, ParamId::H2Fc2Weight),
            (ParamId::H1Fc2Bias, ParamId::H2Fc2Bias),
        ] {
            *p.get_mut(dst) = p.get(src).clone();
        }
        let split = data();
        let imgs: Vec<&Image> = split.samples.iter().map(|s| &s.image).collect();
        let toks: Vec<&[usize]> = split.samples.iter().map(|s| s.question_tokens.as_slice()).collect();
        let out = forward_train(&p, &imgs, &toks, &mut rng::stream(0, 0, &[])).unwrap();
        assert_eq!(out.graph.value(out.s1), out.graph.value(out.s2));
    }

    #[test]
    fn inference_ignores_adversarial_head() {
        let cfg = tiny();
        let p = ModelParams::<f64>::init(&cfg, 11).unwrap();
        let split = data();
        let imgs: Vec<&Image> = split.samples.iter().map(|s| &s.image).collect();
        let toks: Vec<&[usize]> = split.samples.iter().map(|s| s.question_tokens.as_slice()).collect();
        let base = forward_infer(&p, &imgs, &toks).unwrap();

        let mut q = p.clone();
        for id in [ParamId::H2Fc1Weight, ParamId::H2Fc2Bias] {
            for v in q.get_mut(id).data_mut() {
                *v = 123.0;
            }
        }
        q.set_grl_alpha(0.25).unwrap();
        assert_eq!(forward_infer(&q, &imgs, &toks).unwrap(), base);

        let t = forward_train(&p, &imgs, &toks, &mut rng::stream(5, 5, &[])).unwrap();
        assert_eq!(t.graph.value(t.s1), &base);
    }

    #[test]
    fn argmax_shift_invariant() {
        let row = [0.1, 2.0, -1.0, 2.0];
        assert_eq!(argmax(&row), 1);
        let shifted: Vec<f64> = row.iter().map(|v| v + 17.5).collect();
        assert_eq!(argmax(&shifted), 1);
    }
}
