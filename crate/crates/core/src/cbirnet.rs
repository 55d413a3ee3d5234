//! Retrieval network. A second backbone extracts content features, the KCM
//! of a frozen [`CcNet`] modulates them at ratio `l_kcm`, and two reducing
//! conv layers (`r1`, `r2`), GAP, and `fc2` produce the embedding `v`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneTrace, Variant};
use crate::ccnet::{batch_tensor, image_tensor, CcNet, FeatureMap, Kcm};
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv2d, Linear, Param, Tensor};
use crate::preprocessing::GrayscaleImage;
use crate::retrieval::{Embedder, EmbeddingVector, Fingerprint};

pub const DEFAULT_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KcmResample {
    #[default]
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub l_kcm: f64,
    #[serde(default)]
    pub kcm_resample: KcmResample,
}

impl FusionConfig {
    pub fn new(l_kcm: f64) -> Result<Self> {
        let cfg = Self { l_kcm, kcm_resample: KcmResample::Bilinear };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.l_kcm) {
            return Err(Error::Config(format!("l_kcm must lie in [0, 1], got {}", self.l_kcm)));
        }
        Ok(())
    }
}

/// `l · (F ⊙ kcm) + (1 − l) · F`, the KCM broadcast over channels.
///
/// `l = 0` leaves the content features untouched; `l = 1` is a pure mask.
#[inline]
pub fn fuse_value(feature: f64, kcm: f64, l_kcm: f64) -> f64 {
    l_kcm * (feature * kcm) + (1.0 - l_kcm) * feature
}

/// Fuses one feature map with a KCM, resampling the KCM to the feature
/// map's spatial size first.
pub fn fuse_features(feat: &FeatureMap, kcm: &Kcm, cfg: &FusionConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    if kcm.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::RejectedInput("kcm values must lie in [0, 1]".into()));
    }
    let k = kcm.resampled(feat.height, feat.width);
    let hw = feat.height * feat.width;
    let values = feat
        .values
        .chunks_exact(hw)
        .flat_map(|plane| plane.iter().zip(&k.values).map(|(f, m)| fuse_value(*f, *m, cfg.l_kcm)))
        .collect();
    FeatureMap::new(feat.channels, feat.height, feat.width, values, format!("{}+kcm", feat.stage))
}

fn fuse_tensor(feat: &Tensor, kcm: &Tensor, l_kcm: f64) -> Tensor {
    let [n, c, h, w] = feat.shape();
    assert_eq!(kcm.shape(), [n, 1, h, w]);
    let hw = h * w;
    let mut out = feat.clone();
    for i in 0..n {
        let mask = kcm.item(i);
        for plane in out.item_mut(i).chunks_exact_mut(hw).take(c) {
            for (f, m) in plane.iter_mut().zip(mask) {
                *f = fuse_value(*f, *m, l_kcm);
            }
        }
    }
    out
}

fn fuse_tensor_backward(kcm: &Tensor, grad_out: &Tensor, l_kcm: f64) -> Tensor {
    let [n, _, h, w] = grad_out.shape();
    let hw = h * w;
    let mut g = grad_out.clone();
    for i in 0..n {
        let mask = kcm.item(i);
        for plane in g.item_mut(i).chunks_exact_mut(hw) {
            for (gv, m) in plane.iter_mut().zip(mask) {
                *gv *= l_kcm * m + (1.0 - l_kcm);
            }
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbirNetConfig {
    pub backbone: BackboneConfig,
    /// Output widths of `r1` (1x1) and `r2` (3x3).
    pub reducer: [usize; 2],
    pub dim: usize,
    pub fusion: FusionConfig,
}

impl CbirNetConfig {
    pub fn for_variant(variant: Variant, dim: usize, fusion: FusionConfig) -> Self {
        let (backbone, reducer) = match variant {
            Variant::Tiny => (BackboneConfig::tiny(), [32, 32]),
            Variant::Resnet50Layout => (BackboneConfig::resnet50_layout(), [512, 512]),
        };
        Self { backbone, reducer, dim, fusion }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate()?;
        if self.dim == 0 || self.reducer.contains(&0) {
            return Err(Error::Config("embedding dimension and reducer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbirNet {
    pub config: CbirNetConfig,
    pub backbone: Backbone,
    pub r1: Conv2d,
    pub r2: Conv2d,
    pub fc2: Linear,
    ready: bool,
}

#[derive(Debug, Clone)]
pub struct CbirTrace {
    backbone: BackboneTrace,
    kcm: Tensor,
    fused: Tensor,
    r1: Tensor,
    r2: Tensor,
    pooled: Tensor,
}

impl CbirNet {
    pub fn new(config: CbirNetConfig) -> Result<Self> {
        config.validate()?;
        let f4 = config.backbone.stage_width(4);
        let [w1, w2] = config.reducer;
        Ok(Self {
            backbone: Backbone::new("backbone", config.backbone.clone())?,
            r1: Conv2d::new("reducer.r1", f4, w1, 1, 1, 0),
            r2: Conv2d::new("reducer.r2", w1, w2, 3, 1, 1),
            fc2: Linear::new("fc2", w2, config.dim),
            config,
            ready: false,
        })
    }

    pub fn init_xavier(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.backbone.init_xavier(&mut rng);
        self.r1.init_xavier(&mut rng);
        self.r2.init_xavier(&mut rng);
        self.fc2.init_xavier(&mut rng);
        self.ready = true;
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }

    pub(crate) fn mark_ready(&mut self) {
        self.ready = true;
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn l_kcm(&self) -> f64 {
        self.config.fusion.l_kcm
    }

    /// Spatial size of the fused feature map for a square input.
    pub fn fusion_size(&self, input: usize) -> usize {
        self.config.backbone.stage_sizes(input)[4]
    }

    fn ensure_ready(&self) -> Result<()> {
        if self.ready {
            Ok(())
        } else {
            Err(Error::NotReady("CBIRNet weights are not initialized".into()))
        }
    }

    /// Resamples per-image KCMs to the fusion resolution as `[n, 1, h, w]`.
    pub fn kcm_tensor(kcms: &[&Kcm], h: usize, w: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(kcms.len() * h * w);
        for k in kcms {
            data.extend(k.resampled(h, w).values);
        }
        Tensor::from_vec([kcms.len(), 1, h, w], data)
    }

    pub fn forward_batch(&self, x: &Tensor, kcms: &[&Kcm]) -> Result<Tensor> {
        Ok(self.forward_trace(x, kcms)?.0)
    }

    pub fn forward_trace(&self, x: &Tensor, kcms: &[&Kcm]) -> Result<(Tensor, CbirTrace)> {
        self.ensure_ready()?;
        if kcms.len() != x.batch() {
            return Err(Error::Shape(format!("{} KCMs for a batch of {}", kcms.len(), x.batch())));
        }
        let backbone = self.backbone.forward_trace(x);
        let f4 = &backbone.outputs[4];
        let kcm = Self::kcm_tensor(kcms, f4.height(), f4.width())?;
        let fused = fuse_tensor(f4, &kcm, self.l_kcm());
        let r1 = relu(&self.r1.forward(&fused));
        let r2 = relu(&self.r2.forward(&r1));
        let pooled = global_avg_pool(&r2);
        let emb = self.fc2.forward(&pooled);
        Ok((emb, CbirTrace { backbone, kcm, fused, r1, r2, pooled }))
    }

    /// Accumulates gradients of all CBIRNet parameters. Nothing flows into
    /// the KCM.
    pub fn backward(&mut self, trace: &CbirTrace, grad_emb: &Tensor) {
        let g_pooled = self.fc2.backward(&trace.pooled, grad_emb);
        let g_r2 = global_avg_pool_backward(trace.r2.shape(), &g_pooled);
        let g_r1 = self
            .r2
            .backward(&trace.r1, &relu_backward(&trace.r2, &g_r2), true)
            .expect("input grad requested");
        let g_fused = self
            .r1
            .backward(&trace.fused, &relu_backward(&trace.r1, &g_r1), true)
            .expect("input grad requested");
        let g_f4 = fuse_tensor_backward(&trace.kcm, &g_fused, self.l_kcm());
        self.backbone.backward(&trace.backbone, vec![None, None, None, None, Some(g_f4)]);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.r1.params());
        v.extend(self.r2.params());
        v.extend(self.fc2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        v.extend(self.r1.params_mut());
        v.extend(self.r2.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }
}

/// Embeds one preprocessed image. `fusion` and `dim` are what the caller
/// expects the checkpoint to contain.
pub fn cbirnet_forward(
    img: &GrayscaleImage,
    ccnet: &CcNet,
    net: &CbirNet,
    fusion: &FusionConfig,
    dim: usize,
) -> Result<EmbeddingVector> {
    fusion.validate()?;
    if dim != net.dim() {
        return Err(Error::Config(format!(
            "embedding dimension mismatch: checkpoint has {}, config asks for {dim}",
            net.dim()
        )));
    }
    if fusion.l_kcm != net.l_kcm() {
        return Err(Error::Config(format!(
            "l_kcm mismatch: checkpoint has {}, config asks for {}",
            net.l_kcm(),
            fusion.l_kcm
        )));
    }
    let kcm = ccnet.forward(img)?.kcm;
    let emb = net.forward_batch(&image_tensor(img)?, &[&kcm])?;
    EmbeddingVector::from_f64(emb.item(0), img.source_id())
}

/// A frozen CCNet paired with a CBIRNet: the full image-to-vector embedder.
#[derive(Debug, Clone)]
pub struct CbirModel {
    pub ccnet: CcNet,
    pub cbirnet: CbirNet,
    checkpoint_hash: String,
}

impl CbirModel {
    /// Pairs the networks, fingerprinting them by the SHA-256 of their
    /// serialized checkpoint.
    pub fn new(ccnet: CcNet, cbirnet: CbirNet) -> Result<Self> {
        let bytes = crate::checkpoint::encode_cbir(&ccnet, &cbirnet, &serde_json::Value::Null)?;
        let checkpoint_hash = crate::checkpoint::sha256_hex(&bytes);
        Ok(Self { ccnet, cbirnet, checkpoint_hash })
    }

    pub(crate) fn with_hash(ccnet: CcNet, cbirnet: CbirNet, checkpoint_hash: String) -> Self {
        Self { ccnet, cbirnet, checkpoint_hash }
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }
}

impl Embedder for CbirModel {
    fn embed(&self, img: &GrayscaleImage) -> Result<EmbeddingVector> {
        cbirnet_forward(img, &self.ccnet, &self.cbirnet, &self.cbirnet.config.fusion, self.cbirnet.dim())
    }

    fn embed_batch(&self, images: &[&GrayscaleImage]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let x = batch_tensor(chunk)?;
            let kcms = self.ccnet.kcm_batch(&x)?;
            let emb = self.cbirnet.forward_batch(&x, &kcms.iter().collect::<Vec<_>>())?;
            for (i, img) in chunk.iter().enumerate() {
                out.push(EmbeddingVector::from_f64(emb.item(i), img.source_id())?);
            }
        }
        Ok(out)
    }

    fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            checkpoint_sha256: self.checkpoint_hash.clone(),
            l_kcm: self.cbirnet.l_kcm(),
            dim: self.cbirnet.dim(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fm(c: usize, h: usize, w: usize, values: Vec<f64>) -> FeatureMap {
        FeatureMap::new(c, h, w, values, "f4").unwrap()
    }

    #[test]
    fn fusion_limits_and_hand_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feat = fm(3, 4, 4, (0..48).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let kcm = Kcm::new(4, 4, (0..16).map(|_| rng.gen_range(0.0..1.0)).collect(), "t").unwrap();
        let zero = fuse_features(&feat, &kcm, &FusionConfig::new(0.0).unwrap()).unwrap();
        assert_eq!(zero.values, feat.values);
        let ones = Kcm::uniform(4, 4, 1.0);
        let id = fuse_features(&feat, &ones, &FusionConfig::new(1.0).unwrap()).unwrap();
        assert_eq!(id.values, feat.values);

        let one = fm(1, 1, 1, vec![2.0]);
        let half = Kcm::uniform(1, 1, 0.5);
        let v = fuse_features(&one, &half, &FusionConfig::new(0.8).unwrap()).unwrap();
        assert!((v.values[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn fusion_rejects_bad_ratio() {
        assert!(matches!(FusionConfig::new(1.5), Err(Error::Config(_))));
        assert!(matches!(FusionConfig::new(-0.1), Err(Error::Config(_))));
        let bad = FusionConfig { l_kcm: 2.0, kcm_resample: KcmResample::Bilinear };
        let r = fuse_features(&fm(1, 1, 1, vec![1.0]), &Kcm::uniform(1, 1, 1.0), &bad);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn kcm_is_resampled_to_feature_size() {
        let feat = fm(2, 2, 2, vec![1.0; 8]);
        let kcm = Kcm::new(4, 4, (0..16).map(|i| i as f64 / 15.0).collect(), "t").unwrap();
        let out = fuse_features(&feat, &kcm, &FusionConfig::new(1.0).unwrap()).unwrap();
        let expect = kcm.resampled(2, 2);
        assert_eq!(&out.values[..4], &expect.values[..]);
        assert_eq!(&out.values[4..], &expect.values[..]);
    }

    #[test]
    fn fusion_batch_backward_matches_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = Tensor::from_vec([1, 1, 2, 2], (0..4).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let g = Tensor::from_vec([1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let gx = fuse_tensor_backward(&k, &g, 0.5);
        for c in 0..2 {
            for i in 0..4 {
                assert!((gx.item(0)[c * 4 + i] - (0.5 * k.data()[i] + 0.5)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_explicit() {
        let mut cc = CcNet::new(crate::ccnet::CcNetConfig::for_variant(Variant::Tiny)).unwrap();
        cc.init_xavier(0);
        let fusion = FusionConfig::new(0.5).unwrap();
        let mut net = CbirNet::new(CbirNetConfig::for_variant(Variant::Tiny, 16, fusion)).unwrap();
        net.init_xavier(1);
        let img = GrayscaleImage::filled(256, 256, 0.3, "x").unwrap();
        assert!(matches!(cbirnet_forward(&img, &cc, &net, &fusion, 32), Err(Error::Config(_))));
        let v = cbirnet_forward(&img, &cc, &net, &fusion, 16).unwrap();
        assert_eq!(v.values.len(), 16);
        assert!(v.values.iter().all(|x| x.is_finite()));
    }
}
