//! The change-detection network: a weight-shared siamese encoder, the
//! absolute-difference feature generator, and ASPP decoders (main, gate and
//! auxiliary heads share one architecture but not parameters).

mod backbone;
mod decoder;
pub mod layers;

use serde::{Deserialize, Serialize};

pub use backbone::{BackboneConfig, BackboneKind, StageTaps};
pub use decoder::{DecoderConfig, NUM_CLASSES};
pub use layers::Forward;

use crate::autodiff::kernels::softmax_pixel;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::image::{Image, Mask, CHANNELS};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A co-registered pre/post-change pair with an optional change mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub image_a: Image,
    pub image_b: Image,
    pub label: Option<Mask>,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, image_a: Image, image_b: Image, label: Option<Mask>) -> Result<Self> {
        let pair = Self { id: id.into(), image_a, image_b, label };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_a.dims() != self.image_b.dims() {
            return Err(Error::shape(format!(
                "{}: image_a {:?} vs image_b {:?}",
                self.id,
                self.image_a.dims(),
                self.image_b.dims()
            )));
        }
        if let Some(l) = &self.label {
            if l.dims() != self.image_a.dims() {
                return Err(Error::shape(format!("{}: label {:?} vs image {:?}", self.id, l.dims(), self.image_a.dims())));
            }
            if l.data.iter().any(|&v| v > 1) {
                return Err(Error::InvalidArgument(format!("{}: label values must be 0 or 1", self.id)));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image_a.dims()
    }
}

/// Stacks images into an `[N, 3, H, W]` tensor.
pub fn stack_images<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Empty("image batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for im in images {
        if im.dims() != (h, w) {
            return Err(Error::shape(format!("batch mixes {:?} and {:?}", (h, w), im.dims())));
        }
        data.extend(im.data.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(&[images.len(), CHANNELS, h, w], data)
}

/// Which decoder head to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Main,
    Gate,
    /// Auxiliary branch `k`, zero-based.
    Aux(usize),
}

impl Head {
    pub fn prefix(self) -> String {
        match self {
            Head::Main => "main".into(),
            Head::Gate => "gate".into(),
            Head::Aux(k) => format!("aux{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    /// Number of auxiliary decoders (K).
    pub aux_branches: usize,
}

impl NetConfig {
    pub fn tiny(aux_branches: usize, init_seed: u64) -> Self {
        Self { backbone: BackboneConfig::tiny(init_seed), decoder: DecoderConfig::tiny(), aux_branches }
    }

    pub fn resnet50(aux_branches: usize, init_seed: u64) -> Self {
        Self { backbone: BackboneConfig::resnet50(init_seed), decoder: DecoderConfig::resnet50(), aux_branches }
    }

    pub fn for_kind(kind: BackboneKind, aux_branches: usize, init_seed: u64) -> Self {
        match kind {
            BackboneKind::Tiny => Self::tiny(aux_branches, init_seed),
            BackboneKind::Resnet50 => Self::resnet50(aux_branches, init_seed),
        }
    }
}

/// Difference features on the tape.
#[derive(Debug, Clone, Copy)]
pub struct BundleVars {
    pub d1: Var,
    pub d4: Var,
}

/// Shallow and deep absolute-difference feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<T> {
    pub d1: Tensor<T>,
    pub d4: Tensor<T>,
}

/// `|a - b|` elementwise.
pub fn difference_features<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| (x - y).abs())
}

/// Per-pixel change probability `[N, H, W]` from `[N, 2, H, W]` logits.
pub fn change_probability<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = logits.dims4();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    let mut probs = vec![T::zero(); c];
    for i in 0..n {
        let li = logits.row(i);
        for p in 0..plane {
            softmax_pixel(li, c, plane, p, &mut probs);
            out.push(probs[1]);
        }
    }
    Tensor::from_vec(&[n, h, w], out).expect("probability shape")
}

/// Class-normalized probabilities `[N, 2, H, W]`.
pub fn class_probabilities<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = logits.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(logits.shape());
    let mut probs = vec![T::zero(); c];
    for i in 0..n {
        for p in 0..plane {
            softmax_pixel(logits.row(i), c, plane, p, &mut probs);
            let row = out.row_mut(i);
            for k in 0..c {
                row[k * plane + p] = probs[k];
            }
        }
    }
    out
}

/// Parameters plus architecture of one change-detection network.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeNet<T> {
    pub config: NetConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> ChangeNet<T> {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.backbone.validate()?;
        let mut params = ParamStore::new();
        backbone::init_backbone(&mut params, &config.backbone);
        let (c1, c4) = (config.backbone.c1(), config.backbone.c4());
        let seed = config.backbone.init_seed;
        decoder::init_decoder(&mut params, "main", c1, c4, &config.decoder, seed);
        decoder::init_decoder(&mut params, "gate", c1, c4, &config.decoder, seed);
        for k in 0..config.aux_branches {
            decoder::init_decoder(&mut params, &Head::Aux(k).prefix(), c1, c4, &config.decoder, seed);
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: NetConfig, params: ParamStore<T>) -> Self {
        Self { config, params }
    }

    fn check_head(&self, head: Head) -> Result<()> {
        match head {
            Head::Aux(k) if k >= self.config.aux_branches => Err(Error::IndexOutOfRange {
                index: k,
                valid: format!("0..{}", self.config.aux_branches),
            }),
            _ => Ok(()),
        }
    }

    /// Trainable scalar count of one decoder head.
    pub fn decoder_param_count(&self, head: Head) -> usize {
        self.params.count(&format!("{}.", head.prefix()))
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params.count("enc.")
    }

    /// Parameters of the networks used to produce change maps and gate
    /// scores: encoder, main decoder and gate decoder.
    pub fn core_param_count(&self) -> usize {
        self.encoder_param_count() + self.decoder_param_count(Head::Main) + self.decoder_param_count(Head::Gate)
    }

    /// Overwrites an auxiliary head with a copy of the main decoder.
    pub fn copy_main_into(&mut self, head: Head) -> Result<()> {
        self.check_head(head)?;
        self.params.clone_prefix("main.", &format!("{}.", head.prefix()));
        Ok(())
    }

    /// Runs the shared encoder on both images, returning stage taps for
    /// image A and image B.
    pub fn encode_siamese(&self, fwd: &mut Forward<'_, T>, a: Var, b: Var) -> Result<(StageTaps, StageTaps)> {
        let sa = fwd.value(a).shape().to_vec();
        let sb = fwd.value(b).shape().to_vec();
        if sa != sb || sa.len() != 4 {
            return Err(Error::shape(format!("siamese inputs {sa:?} vs {sb:?}")));
        }
        self.config.backbone.check_input(sa[2], sa[3])?;
        let ta = backbone::run_backbone(fwd, &self.config.backbone, a)?;
        let tb = backbone::run_backbone(fwd, &self.config.backbone, b)?;
        Ok((ta, tb))
    }

    pub fn difference(&self, fwd: &mut Forward<'_, T>, ta: &StageTaps, tb: &StageTaps) -> Result<BundleVars> {
        Ok(BundleVars { d1: fwd.tape.abs_diff(ta.c1, tb.c1)?, d4: fwd.tape.abs_diff(ta.c4, tb.c4)? })
    }

    /// Difference-feature generator: encode both images, take `|C_A - C_B|`
    /// at stages 1 and 4.
    pub fn features(&self, fwd: &mut Forward<'_, T>, a: Var, b: Var) -> Result<BundleVars> {
        let (ta, tb) = self.encode_siamese(fwd, a, b)?;
        self.difference(fwd, &ta, &tb)
    }

    /// Change logits from a decoder head, upsampled to `out` = (H, W).
    pub fn decode(&self, fwd: &mut Forward<'_, T>, head: Head, d4: Var, d1: Var, out: (usize, usize)) -> Result<Var> {
        self.check_head(head)?;
        let (_, c1, _, _) = fwd.value(d1).dims4();
        let (_, c4, _, _) = fwd.value(d4).dims4();
        if c1 != self.config.backbone.c1() || c4 != self.config.backbone.c4() {
            return Err(Error::shape(format!(
                "bundle channels ({c1}, {c4}) vs backbone ({}, {})",
                self.config.backbone.c1(),
                self.config.backbone.c4()
            )));
        }
        let logits = decoder::run_decoder(fwd, &head.prefix(), &self.config.decoder, d4, d1)?;
        Ok(fwd.tape.upsample_bilinear(logits, out.0, out.1))
    }

    /// Full network on a batch: features then the chosen head.
    pub fn logits(&self, fwd: &mut Forward<'_, T>, head: Head, a: Var, b: Var) -> Result<(Var, BundleVars)> {
        let (_, _, h, w) = fwd.value(a).dims4();
        let bundle = self.features(fwd, a, b)?;
        let logits = self.decode(fwd, head, bundle.d4, bundle.d1, (h, w))?;
        Ok((logits, bundle))
    }

    /// Inference-mode stage features for a batch.
    pub fn encode_tensors(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<(FeatureBundle<T>, FeatureBundle<T>)> {
        let mut fwd = Forward::eval(&self.params);
        let (av, bv) = (fwd.constant(a.clone()), fwd.constant(b.clone()));
        let (ta, tb) = self.encode_siamese(&mut fwd, av, bv)?;
        let fa = FeatureBundle { d1: fwd.value(ta.c1).clone(), d4: fwd.value(ta.c4).clone() };
        let fb = FeatureBundle { d1: fwd.value(tb.c1).clone(), d4: fwd.value(tb.c4).clone() };
        Ok((fa, fb))
    }

    /// Inference-mode logits `[N, 2, H, W]` of one head.
    pub fn predict_logits(&self, head: Head, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let mut fwd = Forward::eval(&self.params);
        let (av, bv) = (fwd.constant(a.clone()), fwd.constant(b.clone()));
        let (logits, _) = self.logits(&mut fwd, head, av, bv)?;
        Ok(fwd.tape.value(logits).clone())
    }

    /// Change-probability maps `[N, H, W]` of the main head.
    pub fn forward(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(change_probability(&self.predict_logits(Head::Main, a, b)?))
    }

    /// Change probabilities of image pairs, evaluated in chunks.
    pub fn predict_pairs(&self, pairs: &[ImagePair], chunk: usize) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::with_capacity(pairs.len());
        for group in pairs.chunks(chunk.max(1)) {
            let a = stack_images::<T>(&group.iter().map(|p| &p.image_a).collect::<Vec<_>>())?;
            let b = stack_images::<T>(&group.iter().map(|p| &p.image_b).collect::<Vec<_>>())?;
            let probs = self.forward(&a, &b)?;
            let (n, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
            for i in 0..n {
                out.push(Tensor::from_vec(&[h, w], probs.row(i).to_vec())?);
            }
        }
        Ok(out)
    }
}
