//! Class activation maps: GradCAM, GradCAM++, LayerCAM, ScoreCAM and Faster-ScoreCAM.
//!
//! Gradient methods differentiate the pre-softmax logit of the target class
//! with respect to the activations of a conv or pool layer. The ScoreCAM
//! family needs only forward passes and therefore accepts any
//! [`ActivationModel`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec;
use crate::layers::softmax_slice;
use crate::model::ModelGraph;
use crate::preprocess::RgbImage;
use crate::resize::bilinear_resize;
use crate::tensor::Tensor;

/// Forward-only view of a classifier.
pub trait ActivationModel: Sync {
    /// `[C, H, W]` of a single input.
    fn input_shape(&self) -> [usize; 3];
    fn num_classes(&self) -> usize;
    /// Activations `[C, h, w]` of `layer` and logits `[K]` for one input.
    fn activations(&self, input: &Tensor, layer: &str) -> Result<(Tensor, Tensor)>;
    /// Logits `[B, K]` for a batch `[B, C, H, W]`.
    fn logits(&self, batch: &Tensor) -> Result<Tensor>;
}

/// Activations together with the gradient of one class logit.
#[derive(Clone, Debug)]
pub struct LayerGradient {
    pub activations: Tensor,
    /// `d logit[class] / d activations`, same shape as `activations`.
    pub gradient: Tensor,
    pub logits: Tensor,
    pub class: usize,
}

pub trait GradientModel: ActivationModel {
    /// `target = None` picks the arg-max class of the inference logits.
    fn activation_gradient(&self, input: &Tensor, layer: &str, target: Option<usize>) -> Result<LayerGradient>;
}

impl ActivationModel for ModelGraph<f32> {
    fn input_shape(&self) -> [usize; 3] {
        ModelGraph::input_shape(self)
    }

    fn num_classes(&self) -> usize {
        ModelGraph::num_classes(self)
    }

    fn activations(&self, input: &Tensor, layer: &str) -> Result<(Tensor, Tensor)> {
        let (a, logits, _) = self.layer_activation(input, layer, None)?;
        Ok((a, logits))
    }

    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.predict_logits(batch)
    }
}

impl GradientModel for ModelGraph<f32> {
    fn activation_gradient(&self, input: &Tensor, layer: &str, target: Option<usize>) -> Result<LayerGradient> {
        let (activations, logits, grad) = self.layer_activation(input, layer, Some(target))?;
        let (class, gradient) = grad.expect("gradient was requested");
        Ok(LayerGradient {
            activations,
            gradient,
            logits,
            class,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CamMethod {
    GradCam,
    GradCamPlusPlus,
    LayerCam,
    ScoreCam,
    FasterScoreCam,
}

impl CamMethod {
    pub const ALL: [CamMethod; 5] = [
        CamMethod::GradCam,
        CamMethod::GradCamPlusPlus,
        CamMethod::LayerCam,
        CamMethod::ScoreCam,
        CamMethod::FasterScoreCam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPlusPlus => "gradcam++",
            CamMethod::LayerCam => "layercam",
            CamMethod::ScoreCam => "scorecam",
            CamMethod::FasterScoreCam => "faster-scorecam",
        }
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CamMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        CamMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = CamMethod::ALL.iter().map(|m| m.name()).collect();
                format!("unknown method '{s}' (valid methods: {})", names.join(", "))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Target {
    /// Arg-max of the model's own prediction.
    #[default]
    Auto,
    Class(usize),
}

impl Target {
    fn explicit(self) -> Option<usize> {
        match self {
            Target::Auto => None,
            Target::Class(c) => Some(c),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamRequest {
    pub layer: String,
    pub target: Target,
    pub method: CamMethod,
    /// Channels kept by Faster-ScoreCAM.
    pub top_k: usize,
}

impl Default for CamRequest {
    fn default() -> Self {
        CamRequest {
            layer: "conv3".into(),
            target: Target::Auto,
            method: CamMethod::GradCam,
            top_k: 10,
        }
    }
}

impl CamRequest {
    pub fn new(method: CamMethod) -> Self {
        CamRequest {
            method,
            ..Self::default()
        }
    }

    pub fn layer(mut self, layer: &str) -> Self {
        self.layer = layer.into();
        self
    }

    pub fn class(mut self, class: usize) -> Self {
        self.target = Target::Class(class);
        self
    }

    pub fn top_k(mut self, k: usize) -> Self {
        self.top_k = k;
        self
    }
}

/// Normalised map over the model input grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[H, W]`, every value in `[0, 1]`.
    pub values: Tensor,
    pub source_layer: String,
    pub method: CamMethod,
    pub target_class: usize,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values.data()[y * self.width() + x]
    }

    /// Tab-separated rows of reals.
    pub fn to_tsv(&self) -> String {
        let w = self.width();
        let mut out = String::with_capacity(self.values.len() * 10);
        for row in self.values.data().chunks(w) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }
}

fn check_target(target: Target, k: usize) -> Result<()> {
    match target {
        Target::Class(c) if c >= k => Err(Error::Request(format!("class {c} outside 0..{k}"))),
        _ => Ok(()),
    }
}

fn check_input(model: &impl ActivationModel, input: &Tensor) -> Result<()> {
    if input.shape() != model.input_shape() {
        return Err(Error::Dimension(format!(
            "model expects an input of {:?}, got {:?}",
            model.input_shape(),
            input.shape()
        )));
    }
    Ok(())
}

/// ReLU, min-max to `[0, 1]` (flat maps become all zeros), bilinear resize.
pub fn postprocess_heatmap(raw: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    raw.expect_rank(2, "heatmap post-processing")?;
    let rect = raw.map(|v| v.max(0.0));
    let (lo, hi) = (rect.min(), rect.max());
    let norm = if hi > lo {
        let span = hi - lo;
        rect.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
    } else {
        Tensor::zeros(raw.shape().to_vec())
    };
    let out = bilinear_resize(&norm, out_h, out_w)?;
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

fn spatial(a: &Tensor) -> Result<(usize, usize, usize)> {
    a.expect_rank(3, "activations")?;
    let s = a.shape();
    Ok((s[0], s[1], s[2]))
}

/// `sum_k w_k A_k` for the listed channels, accumulated in f64.
fn weighted_sum(a: &Tensor, channels: &[usize], weights: &[f64]) -> Result<Tensor> {
    let (_, h, w) = spatial(a)?;
    let plane = h * w;
    let mut acc = vec![0.0f64; plane];
    for (&k, &wk) in channels.iter().zip(weights) {
        for (dst, &v) in acc.iter_mut().zip(&a.data()[k * plane..(k + 1) * plane]) {
            *dst += wk * v as f64;
        }
    }
    Tensor::new(vec![h, w], acc.into_iter().map(|v| v as f32).collect())
}

fn finish(raw: Tensor, model: &impl ActivationModel, req: &CamRequest, class: usize) -> Result<Heatmap> {
    let [_, h, w] = model.input_shape();
    Ok(Heatmap {
        values: postprocess_heatmap(&raw, h, w)?,
        source_layer: req.layer.clone(),
        method: req.method,
        target_class: class,
    })
}

fn gradient_for(model: &impl GradientModel, input: &Tensor, req: &CamRequest) -> Result<LayerGradient> {
    check_input(model, input)?;
    check_target(req.target, model.num_classes())?;
    let lg = model.activation_gradient(input, &req.layer, req.target.explicit())?;
    spatial(&lg.activations)?;
    lg.gradient.expect_shape(lg.activations.shape())?;
    Ok(lg)
}

/// Channel weights are the spatial mean of the gradient.
pub fn gradcam(model: &impl GradientModel, input: &Tensor, req: &CamRequest) -> Result<Heatmap> {
    let lg = gradient_for(model, input, req)?;
    let (c, h, w) = spatial(&lg.activations)?;
    let plane = h * w;
    let weights: Vec<f64> = (0..c)
        .map(|k| {
            lg.gradient.data()[k * plane..(k + 1) * plane]
                .iter()
                .map(|&g| g as f64)
                .sum::<f64>()
                / plane as f64
        })
        .collect();
    let channels: Vec<usize> = (0..c).collect();
    let raw = weighted_sum(&lg.activations, &channels, &weights)?;
    finish(raw, model, req, lg.class)
}

/// GradCAM++ with higher derivatives reduced to powers of the first
/// (`alpha = g^2 / (2 g^2 + sum(A) g^3)`, `0/0 -> 0`).
pub fn gradcam_pp(model: &impl GradientModel, input: &Tensor, req: &CamRequest) -> Result<Heatmap> {
    let lg = gradient_for(model, input, req)?;
    let (c, h, w) = spatial(&lg.activations)?;
    let plane = h * w;
    let weights: Vec<f64> = (0..c).map(|k| gradcam_pp_weight(&lg, k, plane)).collect();
    let channels: Vec<usize> = (0..c).collect();
    let raw = weighted_sum(&lg.activations, &channels, &weights)?;
    finish(raw, model, req, lg.class)
}

fn gradcam_pp_weight(lg: &LayerGradient, k: usize, plane: usize) -> f64 {
    let a = &lg.activations.data()[k * plane..(k + 1) * plane];
    let g = &lg.gradient.data()[k * plane..(k + 1) * plane];
    let a_sum: f64 = a.iter().map(|&v| v as f64).sum();
    g.iter()
        .map(|&gij| {
            let g1 = gij as f64;
            let g2 = g1 * g1;
            let denom = 2.0 * g2 + a_sum * g2 * g1;
            let alpha = if denom != 0.0 { g2 / denom } else { 0.0 };
            alpha * g1.max(0.0)
        })
        .sum()
}

/// Elementwise positive-gradient weighting of the activations.
pub fn layercam(model: &impl GradientModel, input: &Tensor, req: &CamRequest) -> Result<Heatmap> {
    let lg = gradient_for(model, input, req)?;
    let (c, h, w) = spatial(&lg.activations)?;
    let plane = h * w;
    let mut acc = vec![0.0f64; plane];
    for k in 0..c {
        let a = &lg.activations.data()[k * plane..(k + 1) * plane];
        let g = &lg.gradient.data()[k * plane..(k + 1) * plane];
        for ((dst, &av), &gv) in acc.iter_mut().zip(a).zip(g) {
            *dst += (gv.max(0.0) as f64) * av as f64;
        }
    }
    let raw = Tensor::new(vec![h, w], acc.into_iter().map(|v| v as f32).collect())?;
    finish(raw, model, req, lg.class)
}

/// What a ScoreCAM run measured, in channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreCamTrace {
    pub class: usize,
    /// Channels that took part (non-flat, and within the top-K for the fast variant).
    pub channels: Vec<usize>,
    /// Target logit of the all-black input.
    pub baseline: f32,
    /// Target-logit increase over the baseline per participating channel.
    pub cic: Vec<f32>,
    /// Softmax of `cic`.
    pub weights: Vec<f32>,
}

const SCORECAM_CHUNK: usize = 16;

fn scorecam_over(
    model: &impl ActivationModel,
    input: &Tensor,
    req: &CamRequest,
    pick: impl FnOnce(&Tensor) -> Vec<usize>,
) -> Result<(Heatmap, ScoreCamTrace)> {
    check_input(model, input)?;
    check_target(req.target, model.num_classes())?;
    let (acts, logits) = model.activations(input, &req.layer)?;
    let (_, h, w) = spatial(&acts)?;
    let class = req.target.explicit().unwrap_or_else(|| logits.argmax());
    if class >= model.num_classes() {
        return Err(Error::Request(format!("class {class} outside the model's logits")));
    }
    let [cin, ih, iw] = model.input_shape();
    let plane = h * w;

    // Normalised, upsampled masks for every non-flat candidate channel.
    let mut channels = Vec::new();
    let mut masks = Vec::new();
    for k in pick(&acts) {
        let a = Tensor::new(vec![h, w], acts.data()[k * plane..(k + 1) * plane].to_vec())?;
        let (lo, hi) = (a.min(), a.max());
        if hi <= lo {
            continue;
        }
        let norm = a.map(|v| (v - lo) / (hi - lo));
        masks.push(bilinear_resize(&norm, ih, iw)?);
        channels.push(k);
    }

    let baseline = model.logits(&Tensor::zeros(vec![1, cin, ih, iw]))?;
    let baseline = baseline.data()[class];

    let chunks = masks.len().div_ceil(SCORECAM_CHUNK);
    let scores = exec::try_map_indexed(chunks, |ci| {
        let part = &masks[ci * SCORECAM_CHUNK..((ci + 1) * SCORECAM_CHUNK).min(masks.len())];
        let mut data = Vec::with_capacity(part.len() * input.len());
        for m in part {
            for c in 0..cin {
                let src = &input.data()[c * ih * iw..(c + 1) * ih * iw];
                data.extend(src.iter().zip(m.data()).map(|(&x, &mv)| x * mv));
            }
        }
        let batch = Tensor::new(vec![part.len(), cin, ih, iw], data)?;
        let out = model.logits(&batch)?;
        Ok::<_, Error>((0..part.len()).map(|r| out.outer_slice(r)[class]).collect::<Vec<f32>>())
    })?
    .concat();

    let cic: Vec<f32> = scores.iter().map(|&s| s - baseline).collect();
    let weights = if cic.is_empty() { Vec::new() } else { softmax_slice(&cic) };
    let w64: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
    let raw = weighted_sum(&acts, &channels, &w64)?;
    let heat = finish(raw, model, req, class)?;
    Ok((
        heat,
        ScoreCamTrace {
            class,
            channels,
            baseline,
            cic,
            weights,
        },
    ))
}

/// Gradient-free: each channel, normalised and upsampled, masks the input.
pub fn scorecam(model: &impl ActivationModel, input: &Tensor, req: &CamRequest) -> Result<Heatmap> {
    Ok(scorecam_detailed(model, input, req)?.0)
}

pub fn scorecam_detailed(
    model: &impl ActivationModel,
    input: &Tensor,
    req: &CamRequest,
) -> Result<(Heatmap, ScoreCamTrace)> {
    scorecam_over(model, input, req, |a| (0..a.shape()[0]).collect())
}

/// Channel indices ordered by spatial variance, highest first, ties by index.
pub fn rank_channels_by_variance(acts: &Tensor) -> Vec<usize> {
    let (c, plane) = (acts.shape()[0], acts.len() / acts.shape()[0].max(1));
    let var: Vec<f64> = (0..c)
        .map(|k| {
            let v = &acts.data()[k * plane..(k + 1) * plane];
            let mean = v.iter().map(|&x| x as f64).sum::<f64>() / plane as f64;
            v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / plane as f64
        })
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    order
}

/// ScoreCAM restricted to the `top_k` highest-variance channels.
pub fn faster_scorecam(model: &impl ActivationModel, input: &Tensor, req: &CamRequest) -> Result<Heatmap> {
    Ok(faster_scorecam_detailed(model, input, req)?.0)
}

pub fn faster_scorecam_detailed(
    model: &impl ActivationModel,
    input: &Tensor,
    req: &CamRequest,
) -> Result<(Heatmap, ScoreCamTrace)> {
    if req.top_k == 0 {
        return Err(Error::Request("top-k must be at least 1".into()));
    }
    let k = req.top_k;
    scorecam_over(model, input, req, |a| {
        let mut top: Vec<usize> = rank_channels_by_variance(a).into_iter().take(k).collect();
        top.sort_unstable();
        top
    })
}

/// Runs the method named in the request.
pub fn explain(model: &impl GradientModel, input: &Tensor, req: &CamRequest) -> Result<Heatmap> {
    match req.method {
        CamMethod::GradCam => gradcam(model, input, req),
        CamMethod::GradCamPlusPlus => gradcam_pp(model, input, req),
        CamMethod::LayerCam => layercam(model, input, req),
        CamMethod::ScoreCam => scorecam(model, input, req),
        CamMethod::FasterScoreCam => faster_scorecam(model, input, req),
    }
}

/// Blue (0) -> green (0.5) -> red (1), piecewise linear.
pub fn colormap(v: f32) -> [f64; 3] {
    let v = (v as f64).clamp(0.0, 1.0);
    if v <= 0.5 {
        let t = v / 0.5;
        [0.0, 255.0 * t, 255.0 * (1.0 - t)]
    } else {
        let t = (v - 0.5) / 0.5;
        [255.0 * t, 255.0 * (1.0 - t), 0.0]
    }
}

/// Heatmap painted with [`colormap`].
pub fn heatmap_image(h: &Heatmap) -> RgbImage {
    let (w, hh) = (h.width(), h.height());
    let mut data = Vec::with_capacity(w * hh * 3);
    for &v in h.values.data() {
        data.extend(colormap(v).map(|c| c.round() as u8));
    }
    RgbImage::new(w, hh, data).expect("sized from the heatmap")
}

/// `round((1 - alpha) * img + alpha * colormap(h))`, clamped to bytes.
pub fn render_overlay(img: &RgbImage, h: &Heatmap, alpha: f32) -> Result<RgbImage> {
    if img.width() != h.width() || img.height() != h.height() {
        return Err(Error::Input(format!(
            "image is {}x{} but heatmap is {}x{}",
            img.width(),
            img.height(),
            h.width(),
            h.height()
        )));
    }
    let a = alpha as f64;
    let mut data = Vec::with_capacity(img.data().len());
    for (px, &v) in img.pixels().zip(h.values.data()) {
        let cm = colormap(v);
        for c in 0..3 {
            data.push(((1.0 - a) * px[c] as f64 + a * cm[c]).round().clamp(0.0, 255.0) as u8);
        }
    }
    RgbImage::new(img.width(), img.height(), data)
}
