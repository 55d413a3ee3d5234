//! Composition classifier. A backbone (`f0`..`f4`) feeds a refiner whose
//! four conv layers (`c1`..`c4`) receive skip inputs from `f3` (into `c2`)
//! and `f2` (into `c3`); GAP and `fc1` give the nine class logits.
//!
//! Class activation maps are read from the `c4` feature map with the rows of
//! `fc1`, and the key composition map (KCM) is their softmax-weighted sum,
//! min-max normalized to `[0, 1]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneTrace, Variant};
use crate::composition_data::{CompositionClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, resize_bilinear,
    resize_bilinear_backward, softmax, Conv2d, Linear, Param, Tensor,
};
use crate::preprocessing::GrayscaleImage;

/// How class scores weight the CAMs when forming the KCM. Recorded in
/// checkpoints.
pub const KCM_WEIGHTING: &str = "softmax";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinerConfig {
    /// Output widths of `c1`..`c4`.
    pub widths: [usize; 4],
}

impl RefinerConfig {
    pub fn tiny() -> Self {
        Self { widths: [32, 32, 16, 16] }
    }

    pub fn resnet50_layout() -> Self {
        Self { widths: [512, 256, 128, 128] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CcNetConfig {
    pub backbone: BackboneConfig,
    pub refiner: RefinerConfig,
}

impl CcNetConfig {
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Tiny => Self { backbone: BackboneConfig::tiny(), refiner: RefinerConfig::tiny() },
            Variant::Resnet50Layout => Self {
                backbone: BackboneConfig::resnet50_layout(),
                refiner: RefinerConfig::resnet50_layout(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.refiner.widths.contains(&0) {
            return Err(Error::Config("refiner widths must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let w = self.refiner.widths;
        let f2 = self.backbone.stage_width(2);
        let f3 = self.backbone.stage_width(3);
        let f4 = self.backbone.stage_width(4);
        self.backbone.param_count()
            + Conv2d::param_count(f4, w[0], 3)
            + Conv2d::param_count(f3, w[0], 1)
            + Conv2d::param_count(w[0], w[1], 3)
            + Conv2d::param_count(f2, w[1], 1)
            + Conv2d::param_count(w[1], w[2], 3)
            + Conv2d::param_count(w[2], w[3], 3)
            + w[3] * NUM_CLASSES
            + NUM_CLASSES
    }
}

/// A `C x h x w` activation volume for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub stage: String,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>, stage: impl Into<String>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!("empty feature map {channels}x{height}x{width}")));
        }
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(Self { channels, height, width, values, stage: stage.into() })
    }

    /// Item `n` of a batch tensor.
    pub fn from_tensor(t: &Tensor, n: usize, stage: impl Into<String>) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        Self::new(c, h, w, t.item(n).to_vec(), stage)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, self.channels, self.height, self.width], self.values.clone())
            .expect("feature map length is validated")
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.values[c * hw..(c + 1) * hw]
    }
}

/// Row-major single-plane map (a CAM, or a raw KCM before normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct Map2d {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Map2d {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Class logits and their softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ClassScores {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let weights = softmax(&logits);
        Self { logits, weights }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, l) in self.logits.iter().enumerate() {
            if *l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn predicted_class(&self) -> Option<CompositionClass> {
        CompositionClass::from_index(self.argmax())
    }
}

/// Key composition map: values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kcm {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Stage the underlying CAMs came from.
    pub source: String,
}

impl Kcm {
    pub fn new(height: usize, width: usize, values: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!("kcm {height}x{width} with {} values", values.len())));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::RejectedInput("kcm values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, values, source: source.into() })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, values: vec![value; height * width], source: "uniform".into() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    /// Bilinear resample to `height` x `width`.
    pub fn resampled(&self, height: usize, width: usize) -> Kcm {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let values = crate::preprocessing::resize_plane(&self.values, self.width, self.height, width, height)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Kcm { height, width, values, source: self.source.clone() }
    }
}

/// `CAM(y, x) = Σ_c w_c · features[c, y, x]` with `w` the row of
/// `class_weights` for `class_index`.
pub fn compute_cam(features: &FeatureMap, class_weights: &[Vec<f64>], class_index: usize) -> Result<Map2d> {
    let w = class_weights.get(class_index).ok_or_else(|| {
        Error::Shape(format!("class index {class_index} out of range for {} classes", class_weights.len()))
    })?;
    if w.len() != features.channels {
        return Err(Error::Shape(format!(
            "weight vector has {} entries, feature map has {} channels",
            w.len(),
            features.channels
        )));
    }
    let hw = features.height * features.width;
    let mut values = vec![0.0; hw];
    for (c, wc) in w.iter().enumerate() {
        for (v, f) in values.iter_mut().zip(features.plane(c)) {
            *v += wc * f;
        }
    }
    Ok(Map2d { height: features.height, width: features.width, values })
}

/// Min-max normalization; a constant map becomes all 0.5.
pub fn normalize_map(raw: &Map2d, source: &str) -> Kcm {
    let min = raw.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let values = if range <= 1e-12 * (1.0 + max.abs().max(min.abs())) {
        vec![0.5; raw.values.len()]
    } else {
        raw.values.iter().map(|v| ((v - min) / range).clamp(0.0, 1.0)).collect()
    };
    Kcm { height: raw.height, width: raw.width, values, source: source.into() }
}

/// `normalize(Σ_k softmax(s)_k · CAM_k)`.
pub fn compute_kcm(cams: &[Map2d], scores: &ClassScores) -> Result<Kcm> {
    let first = cams.first().ok_or_else(|| Error::Shape("no CAMs given".into()))?;
    if cams.len() != scores.weights.len() {
        return Err(Error::Shape(format!("{} CAMs for {} class scores", cams.len(), scores.weights.len())));
    }
    if let Some(bad) = cams.iter().find(|c| (c.height, c.width) != (first.height, first.width)) {
        return Err(Error::Shape(format!(
            "CAM resolution {}x{} differs from {}x{}",
            bad.height, bad.width, first.height, first.width
        )));
    }
    let mut raw = vec![0.0; first.values.len()];
    for (cam, w) in cams.iter().zip(&scores.weights) {
        for (r, v) in raw.iter_mut().zip(&cam.values) {
            *r += w * v;
        }
    }
    Ok(normalize_map(&Map2d { height: first.height, width: first.width, values: raw }, "c4"))
}

/// Full inference output for one image.
/// Blends a red-to-yellow heat ramp of `kcm` over `img` (alpha 0.5) and
/// returns interleaved RGB bytes at the image resolution.
pub fn kcm_overlay_rgb(img: &GrayscaleImage, kcm: &Kcm) -> Vec<u8> {
    let up = kcm.resampled(img.height(), img.width());
    let mut out = Vec::with_capacity(img.width() * img.height() * 3);
    for (&g, &h) in img.pixels().iter().zip(&up.values) {
        let g = g as f64;
        let heat = [1.0, h, 0.0];
        for c in heat {
            out.push(((0.5 * g + 0.5 * c * h.sqrt()) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcNetOutput {
    pub scores: ClassScores,
    pub cams: Vec<Map2d>,
    pub kcm: Kcm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcNet {
    pub config: CcNetConfig,
    pub backbone: Backbone,
    pub c1: Conv2d,
    pub skip3: Conv2d,
    pub c2: Conv2d,
    pub skip2: Conv2d,
    pub c3: Conv2d,
    pub c4: Conv2d,
    pub fc1: Linear,
    ready: bool,
}

/// Activations kept by [`CcNet::forward_trace`].
#[derive(Debug, Clone)]
pub struct CcNetTrace {
    backbone: BackboneTrace,
    c1: Tensor,
    sum2: Tensor,
    c2: Tensor,
    sum3: Tensor,
    c3: Tensor,
    pub c4: Tensor,
    pub pooled: Tensor,
}

impl CcNet {
    /// Allocates an unready network; call [`CcNet::init_xavier`] or load
    /// parameters before use.
    pub fn new(config: CcNetConfig) -> Result<Self> {
        config.validate()?;
        let w = config.refiner.widths;
        let bb = &config.backbone;
        let (f2, f3, f4) = (bb.stage_width(2), bb.stage_width(3), bb.stage_width(4));
        Ok(Self {
            backbone: Backbone::new("backbone", config.backbone.clone())?,
            c1: Conv2d::new("refiner.c1", f4, w[0], 3, 1, 1),
            skip3: Conv2d::new("refiner.skip_f3", f3, w[0], 1, 1, 0),
            c2: Conv2d::new("refiner.c2", w[0], w[1], 3, 1, 1),
            skip2: Conv2d::new("refiner.skip_f2", f2, w[1], 1, 1, 0),
            c3: Conv2d::new("refiner.c3", w[1], w[2], 3, 1, 1),
            c4: Conv2d::new("refiner.c4", w[2], w[3], 3, 1, 1),
            fc1: Linear::new("fc1", w[3], NUM_CLASSES),
            config,
            ready: false,
        })
    }

    pub fn init_xavier(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.backbone.init_xavier(&mut rng);
        for conv in [&mut self.c1, &mut self.skip3, &mut self.c2, &mut self.skip2, &mut self.c3, &mut self.c4] {
            conv.init_xavier(&mut rng);
        }
        self.fc1.init_xavier(&mut rng);
        self.ready = true;
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }

    pub(crate) fn mark_ready(&mut self) {
        self.ready = true;
    }

    fn ensure_ready(&self) -> Result<()> {
        if self.ready {
            Ok(())
        } else {
            Err(Error::NotReady("CCNet weights are not initialized".into()))
        }
    }

    fn check_input(x: &Tensor) -> Result<()> {
        if x.channels() != 1 || x.height() == 0 || x.width() == 0 {
            return Err(Error::Shape(format!("CCNet expects [n, 1, h, w] input, got {:?}", x.shape())));
        }
        Ok(())
    }

    /// Batched logits `[n, 9, 1, 1]` plus the `c4` map used for CAMs.
    pub fn forward_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.ensure_ready()?;
        Self::check_input(x)?;
        let f = self.backbone.forward(x);
        let c4 = self.refine(&f[2], &f[3], &f[4]).5;
        let logits = self.fc1.forward(&global_avg_pool(&c4));
        Ok((logits, c4))
    }

    #[allow(clippy::type_complexity)]
    fn refine(&self, f2: &Tensor, f3: &Tensor, f4: &Tensor) -> (Tensor, Tensor, Tensor, Tensor, Tensor, Tensor) {
        let c1 = relu(&self.c1.forward(f4));
        let mut sum2 = resize_bilinear(&c1, f3.height(), f3.width());
        sum2.add_assign(&self.skip3.forward(f3));
        let c2 = relu(&self.c2.forward(&sum2));
        let mut sum3 = resize_bilinear(&c2, f2.height(), f2.width());
        sum3.add_assign(&self.skip2.forward(f2));
        let c3 = relu(&self.c3.forward(&sum3));
        let c4 = relu(&self.c4.forward(&c3));
        (c1, sum2, c2, sum3, c3, c4)
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<(Tensor, CcNetTrace)> {
        self.ensure_ready()?;
        Self::check_input(x)?;
        let backbone = self.backbone.forward_trace(x);
        let o = &backbone.outputs;
        let (c1, sum2, c2, sum3, c3, c4) = self.refine(&o[2], &o[3], &o[4]);
        let pooled = global_avg_pool(&c4);
        let logits = self.fc1.forward(&pooled);
        Ok((logits, CcNetTrace { backbone, c1, sum2, c2, sum3, c3, c4, pooled }))
    }

    /// Accumulates parameter gradients for `d loss / d logits`.
    pub fn backward(&mut self, trace: &CcNetTrace, grad_logits: &Tensor) {
        let g_pooled = self.fc1.backward(&trace.pooled, grad_logits);
        let g_c4 = global_avg_pool_backward(trace.c4.shape(), &g_pooled);
        let g_c3 = self
            .c4
            .backward(&trace.c3, &relu_backward(&trace.c4, &g_c4), true)
            .expect("input grad requested");
        let g_sum3 = self
            .c3
            .backward(&trace.sum3, &relu_backward(&trace.c3, &g_c3), true)
            .expect("input grad requested");
        let outs = &trace.backbone.outputs;
        let g_f2 = self.skip2.backward(&outs[2], &g_sum3, true);
        let g_c2 = resize_bilinear_backward(trace.c2.shape(), &g_sum3);
        let g_sum2 = self
            .c2
            .backward(&trace.sum2, &relu_backward(&trace.c2, &g_c2), true)
            .expect("input grad requested");
        let g_f3 = self.skip3.backward(&outs[3], &g_sum2, true);
        let g_c1 = resize_bilinear_backward(trace.c1.shape(), &g_sum2);
        let g_f4 = self.c1.backward(&outs[4], &relu_backward(&trace.c1, &g_c1), true);
        self.backbone.backward(&trace.backbone, vec![None, None, g_f2, g_f3, g_f4]);
    }

    pub fn class_weights(&self) -> Vec<Vec<f64>> {
        (0..NUM_CLASSES).map(|k| self.fc1.weight_row(k).to_vec()).collect()
    }

    /// Scores, the nine CAMs, and the KCM for one preprocessed image.
    pub fn forward(&self, img: &GrayscaleImage) -> Result<CcNetOutput> {
        let x = image_tensor(img)?;
        let (logits, c4) = self.forward_batch(&x)?;
        let out = self.outputs_from(&logits, &c4)?;
        Ok(out.into_iter().next().expect("batch of one"))
    }

    /// Per-item outputs for a batch forward.
    pub fn outputs_from(&self, logits: &Tensor, c4: &Tensor) -> Result<Vec<CcNetOutput>> {
        let weights = self.class_weights();
        (0..logits.batch())
            .map(|n| {
                let features = FeatureMap::from_tensor(c4, n, "c4")?;
                let scores = ClassScores::from_logits(logits.item(n).to_vec());
                let cams = (0..NUM_CLASSES)
                    .map(|k| compute_cam(&features, &weights, k))
                    .collect::<Result<Vec<_>>>()?;
                let kcm = compute_kcm(&cams, &scores)?;
                Ok(CcNetOutput { scores, cams, kcm })
            })
            .collect()
    }

    pub fn kcm_batch(&self, x: &Tensor) -> Result<Vec<Kcm>> {
        let (logits, c4) = self.forward_batch(x)?;
        Ok(self.outputs_from(&logits, &c4)?.into_iter().map(|o| o.kcm).collect())
    }

    pub fn predict(&self, img: &GrayscaleImage) -> Result<ClassScores> {
        let (logits, _) = self.forward_batch(&image_tensor(img)?)?;
        Ok(ClassScores::from_logits(logits.item(0).to_vec()))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        for conv in [&self.c1, &self.skip3, &self.c2, &self.skip2, &self.c3, &self.c4] {
            v.extend(conv.params());
        }
        v.extend(self.fc1.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        for conv in [&mut self.c1, &mut self.skip3, &mut self.c2, &mut self.skip2, &mut self.c3, &mut self.c4] {
            v.extend(conv.params_mut());
        }
        v.extend(self.fc1.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// `[1, 1, h, w]` tensor of an image.
pub fn image_tensor(img: &GrayscaleImage) -> Result<Tensor> {
    Tensor::from_vec(
        [1, 1, img.height(), img.width()],
        img.pixels().iter().map(|&p| p as f64).collect(),
    )
}

/// Stacks images of equal size into one batch tensor.
pub fn batch_tensor(images: &[&GrayscaleImage]) -> Result<Tensor> {
    let items = images.iter().map(|i| image_tensor(i)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_net(seed: u64) -> CcNet {
        let mut net = CcNet::new(CcNetConfig::for_variant(Variant::Tiny)).unwrap();
        net.init_xavier(seed);
        net
    }

    fn feature_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(), "t").unwrap()
    }

    fn map(values: Vec<f64>, h: usize, w: usize) -> Map2d {
        Map2d { height: h, width: w, values }
    }

    #[test]
    fn uninitialized_is_not_ready() {
        let net = CcNet::new(CcNetConfig::for_variant(Variant::Tiny)).unwrap();
        let img = GrayscaleImage::filled(256, 256, 0.5, "x").unwrap();
        assert!(matches!(net.forward(&img), Err(Error::NotReady(_))));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let net = tiny_net(1);
        assert!(net.param_count() < 2_000_000);
        assert_eq!(net.param_count(), net.config.param_count());
        let img = crate::composition_data::generate_synthetic_composition(1, 3).unwrap().remove(0).image;
        let a = net.forward(&img).unwrap();
        let b = net.forward(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scores.logits.len(), 9);
        assert_eq!(a.cams.len(), 9);
        assert_eq!((a.cams[0].height, a.cams[0].width), (32, 32));
        assert_eq!((a.kcm.height, a.kcm.width), (32, 32));
        assert!((a.scores.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cam_mean_plus_bias_is_logit() {
        // GAP commutes with the channel-weighted sum.
        let mut net = tiny_net(2);
        net.fc1.bias.value = (0..9).map(|i| i as f64 * 0.1).collect();
        let img = crate::composition_data::generate_synthetic_composition(1, 4).unwrap().remove(5).image;
        let out = net.forward(&img).unwrap();
        for k in 0..9 {
            let v = out.cams[k].mean() + net.fc1.bias.value[k];
            assert!((v - out.scores.logits[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn cam_definition_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = feature_map(3, 4, 5, &mut rng);
        let ones = compute_cam(&f, &[vec![1.0; 3]], 0).unwrap();
        for i in 0..20 {
            let s: f64 = (0..3).map(|c| f.plane(c)[i]).sum();
            assert!((ones.values[i] - s).abs() < 1e-12);
        }
        let onehot = compute_cam(&f, &[vec![0.0; 3], vec![0.0, 0.0, 1.0]], 1).unwrap();
        assert_eq!(onehot.values, f.plane(2));
        assert!(matches!(compute_cam(&f, &[vec![1.0; 2]], 0), Err(Error::Shape(_))));
        assert!(matches!(compute_cam(&f, &[vec![1.0; 3]], 4), Err(Error::Shape(_))));
    }

    #[test]
    fn cam_random_matches_per_pixel_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = feature_map(3, 2, 2, &mut rng);
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let cam = compute_cam(&f, std::slice::from_ref(&w), 0).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let expect: f64 = (0..3).map(|c| w[c] * f.values[(c * 2 + y) * 2 + x]).sum();
                assert!((cam.values[y * 2 + x] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kcm_identical_cams() {
        let m = map(vec![1.0, 3.0, 2.0, 5.0], 2, 2);
        let cams = vec![m.clone(); 9];
        let scores = ClassScores::from_logits(vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1, -0.2, 1.0, 4.0]);
        let kcm = compute_kcm(&cams, &scores).unwrap();
        let expect = [0.0, 0.5, 0.25, 1.0];
        for (a, b) in kcm.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kcm_dominant_logit_selects_class() {
        let cams: Vec<Map2d> = (0..9).map(|k| map(vec![k as f64, 0.0, 1.0, (k * k) as f64], 2, 2)).collect();
        let mut logits = vec![0.0; 9];
        logits[4] = 1000.0;
        let kcm = compute_kcm(&cams, &ClassScores::from_logits(logits)).unwrap();
        assert_eq!(kcm, normalize_map(&cams[4], "c4"));
    }

    #[test]
    fn kcm_equal_logits_is_normalized_mean() {
        // softmax(0, 0) = (0.5, 0.5); mean of [[0,2],[4,2]] and [[2,2],[0,6]] = [[1,2],[2,4]]
        let a = map(vec![0.0, 2.0, 4.0, 2.0], 2, 2);
        let b = map(vec![2.0, 2.0, 0.0, 6.0], 2, 2);
        let kcm = compute_kcm(&[a, b], &ClassScores::from_logits(vec![0.0, 0.0])).unwrap();
        let expect = [0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0];
        for (x, e) in kcm.values.iter().zip(expect) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn kcm_constant_raw_is_half() {
        let cams = vec![map(vec![2.0; 6], 2, 3); 9];
        let kcm = compute_kcm(&cams, &ClassScores::from_logits(vec![0.0; 9])).unwrap();
        assert!(kcm.values.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn kcm_resolution_mismatch() {
        let cams = vec![map(vec![0.0; 4], 2, 2), map(vec![0.0; 6], 2, 3)];
        let r = compute_kcm(&cams, &ClassScores::from_logits(vec![0.0, 0.0]));
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
