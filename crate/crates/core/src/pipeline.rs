//! The two end-to-end segmenters.
//!
//! *One-step*: a single softmax U-Net scores (tumor, liver, other) per pixel
//! and the label is the argmax.
//!
//! *Sequential*: a liver network's thresholded output `M` masks the image,
//! the masked image is windowed and fed to a tumor network, whose thresholded
//! output `T` is intersected with `M`. Labels follow
//! `M ∧ T → tumor`, `M ∧ ¬T → liver`, otherwise background.

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image, Label, LabelMap, ProbabilityMap};
use crate::network::{Head, Network};
use crate::tensor::{Real, Tensor};

/// Ground-truth masks derived from a label map.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivedMasks {
    /// Liver or tumor (`label ≥ 1`).
    pub liver_or_tumor: BinaryMask,
    /// Tumor (`label = 2`).
    pub tumor: BinaryMask,
    pub one_hot_tumor: BinaryMask,
    pub one_hot_liver: BinaryMask,
    pub one_hot_other: BinaryMask,
}

impl DerivedMasks {
    /// One-hot masks in network channel order (tumor, liver, other).
    pub fn one_hot(&self) -> [&BinaryMask; 3] {
        [
            &self.one_hot_tumor,
            &self.one_hot_liver,
            &self.one_hot_other,
        ]
    }
}

pub fn derive_masks(labels: &LabelMap) -> DerivedMasks {
    DerivedMasks {
        liver_or_tumor: labels.mask_where(|l| l != Label::Background),
        tumor: labels.mask_where(|l| l == Label::Tumor),
        one_hot_tumor: labels.mask_where(|l| l == Label::Tumor),
        one_hot_liver: labels.mask_where(|l| l == Label::Liver),
        one_hot_other: labels.mask_where(|l| l == Label::Background),
    }
}

/// Intensity window: clamp to `[lo, hi]`, then map affinely onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    lo: f64,
    hi: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { lo: 0.0, hi: 1.0 }
    }
}

impl WindowSpec {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::invalid(format!(
                "window needs lo < hi, got ({lo}, {hi})"
            )));
        }
        Ok(WindowSpec { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        (v.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
    }
}

pub fn window(image: &Image, spec: WindowSpec) -> Image {
    image.map(|v| spec.apply(v))
}

fn check_open_unit(t: f64, what: &str) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!(
            "{what} must lie in (0, 1), got {t}"
        )));
    }
    Ok(())
}

/// `prob > t`, strictly.
pub fn threshold(prob: &ProbabilityMap, t: f64) -> Result<BinaryMask> {
    check_open_unit(t, "threshold")?;
    BinaryMask::new(
        prob.width(),
        prob.height(),
        prob.pixels().iter().map(|&p| p > t).collect(),
    )
}

/// `window(mask · image)`: pixels outside the mask become `window(0)`.
pub fn masked_input(image: &Image, liver_mask: &BinaryMask, spec: WindowSpec) -> Result<Image> {
    image.same_dims(liver_mask, "masked_input image vs mask")?;
    Image::new(
        image.width(),
        image.height(),
        image
            .pixels()
            .iter()
            .zip(liver_mask.pixels())
            .map(|(&v, &m)| spec.apply(if m { v } else { 0.0 }))
            .collect(),
    )
}

pub fn final_classify(liver: &BinaryMask, tumor: &BinaryMask) -> Result<LabelMap> {
    liver.same_dims(tumor, "final_classify liver vs tumor mask")?;
    LabelMap::new(
        liver.width(),
        liver.height(),
        liver
            .pixels()
            .iter()
            .zip(tumor.pixels())
            .map(|(&m, &t)| match (m, t) {
                (true, true) => Label::Tumor,
                (true, false) => Label::Liver,
                _ => Label::Background,
            })
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CascadeThresholds {
    liver: f64,
    tumor: f64,
}

impl Default for CascadeThresholds {
    fn default() -> Self {
        CascadeThresholds {
            liver: 0.5,
            tumor: 0.5,
        }
    }
}

impl CascadeThresholds {
    pub fn new(liver: f64, tumor: f64) -> Result<Self> {
        check_open_unit(liver, "liver threshold t_a")?;
        check_open_unit(tumor, "tumor threshold t_b")?;
        Ok(CascadeThresholds { liver, tumor })
    }

    pub fn liver(&self) -> f64 {
        self.liver
    }

    pub fn tumor(&self) -> f64 {
        self.tumor
    }
}

/// Stacks equally sized images into an `[N, 1, H, W]` batch.
pub fn images_to_batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        first.same_dims(*img, "batch images")?;
        data.extend(img.pixels().iter().map(|&v| T::from_f64(v)));
    }
    Tensor::new([images.len(), 1, h, w], data)
}

/// Extracts channel `channel` of sample `n` from an NCHW tensor.
pub fn channel_map<T: Real>(t: &Tensor<T>, n: usize, channel: usize) -> Result<ProbabilityMap> {
    let s = t.shape();
    if s.len() != 4 || n >= s[0] || channel >= s[1] {
        return Err(Error::ShapeMismatch {
            context: "channel_map index",
            left: s.to_vec(),
            right: vec![n, channel],
        });
    }
    let px = s[2] * s[3];
    let start = (n * s[1] + channel) * px;
    ProbabilityMap::new(
        s[3],
        s[2],
        t.data()[start..start + px]
            .iter()
            .map(|v| v.as_f64())
            .collect(),
    )
}

fn require_head<T: Real>(net: &Network<T>, head: Head, role: &str) -> Result<()> {
    if net.config().head != head {
        return Err(Error::invalid(format!(
            "{role} network must have a {head} head, found {}",
            net.config().head
        )));
    }
    Ok(())
}

/// Maximum batch size used for inference.
const INFERENCE_BATCH: usize = 8;

/// Evaluation-mode probabilities of a binary network for each image.
pub fn predict_binary<T: Real>(net: &Network<T>, images: &[&Image]) -> Result<Vec<ProbabilityMap>> {
    require_head(net, Head::BinarySigmoid, "binary")?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFERENCE_BATCH) {
        let probs = net.predict(&images_to_batch::<T>(chunk)?)?;
        for n in 0..chunk.len() {
            out.push(channel_map(&probs, n, 0)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    pub labels: LabelMap,
    pub liver_probs: ProbabilityMap,
    pub tumor_probs: ProbabilityMap,
    pub liver_mask: BinaryMask,
    /// Thresholded tumor output already intersected with `liver_mask`.
    pub tumor_mask: BinaryMask,
}

pub fn sequential_predict<T: Real>(
    liver_net: &Network<T>,
    tumor_net: &Network<T>,
    image: &Image,
    thresholds: CascadeThresholds,
    spec: WindowSpec,
) -> Result<CascadeOutput> {
    let mut out = sequential_predict_batch(liver_net, tumor_net, &[image], thresholds, spec)?;
    Ok(out.remove(0))
}

pub fn sequential_predict_batch<T: Real>(
    liver_net: &Network<T>,
    tumor_net: &Network<T>,
    images: &[&Image],
    thresholds: CascadeThresholds,
    spec: WindowSpec,
) -> Result<Vec<CascadeOutput>> {
    require_head(liver_net, Head::BinarySigmoid, "liver")?;
    require_head(tumor_net, Head::BinarySigmoid, "tumor")?;
    let liver_probs = predict_binary(liver_net, images)?;
    let liver_masks = liver_probs
        .iter()
        .map(|p| threshold(p, thresholds.liver))
        .collect::<Result<Vec<_>>>()?;
    let masked = images
        .iter()
        .zip(&liver_masks)
        .map(|(img, m)| masked_input(img, m, spec))
        .collect::<Result<Vec<_>>>()?;
    let masked_refs: Vec<&Image> = masked.iter().collect();
    let tumor_probs = predict_binary(tumor_net, &masked_refs)?;

    liver_probs
        .into_iter()
        .zip(tumor_probs)
        .zip(liver_masks)
        .map(|((liver_probs, tumor_probs), liver_mask)| {
            let tumor_mask = threshold(&tumor_probs, thresholds.tumor)?.and(&liver_mask)?;
            let labels = final_classify(&liver_mask, &tumor_mask)?;
            Ok(CascadeOutput {
                labels,
                liver_probs,
                tumor_probs,
                liver_mask,
                tumor_mask,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OneStepOutput {
    pub labels: LabelMap,
    /// Channel probabilities in network order (tumor, liver, other).
    pub probs: [ProbabilityMap; 3],
}

impl OneStepOutput {
    /// `P(tumor) + P(liver)`.
    pub fn liver_or_tumor_probs(&self) -> ProbabilityMap {
        let mut out = self.probs[0].clone();
        for (o, &l) in out.pixels_mut().iter_mut().zip(self.probs[1].pixels()) {
            *o += l;
        }
        out
    }
}

/// Label from (tumor, liver, other) probabilities: argmax, ties resolved
/// toward the lower label.
pub fn argmax_label(tumor: f64, liver: f64, other: f64) -> Label {
    let mut best = (Label::Background, other);
    if liver > best.1 {
        best = (Label::Liver, liver);
    }
    if tumor > best.1 {
        best = (Label::Tumor, tumor);
    }
    best.0
}

pub fn one_step_predict<T: Real>(net: &Network<T>, image: &Image) -> Result<OneStepOutput> {
    let mut out = one_step_predict_batch(net, &[image])?;
    Ok(out.remove(0))
}

pub fn one_step_predict_batch<T: Real>(
    net: &Network<T>,
    images: &[&Image],
) -> Result<Vec<OneStepOutput>> {
    require_head(net, Head::Softmax3, "one-step")?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFERENCE_BATCH) {
        let probs = net.predict(&images_to_batch::<T>(chunk)?)?;
        for n in 0..chunk.len() {
            let maps = [
                channel_map(&probs, n, 0)?,
                channel_map(&probs, n, 1)?,
                channel_map(&probs, n, 2)?,
            ];
            let labels = LabelMap::new(
                maps[0].width(),
                maps[0].height(),
                (0..maps[0].len())
                    .map(|i| {
                        argmax_label(
                            maps[0].pixels()[i],
                            maps[1].pixels()[i],
                            maps[2].pixels()[i],
                        )
                    })
                    .collect(),
            )?;
            out.push(OneStepOutput {
                labels,
                probs: maps,
            });
        }
    }
    Ok(out)
}
