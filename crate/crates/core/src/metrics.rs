//! Distribution-level segmentation metrics.
//!
//! Conventions for empty masks:
//! - IoU of two empty masks is 1, so their distance `1 − IoU` is 0.
//! - Dice of two empty masks is 1.
//! - Combined sensitivity is 1 when the ground-truth union is empty, whether
//!   or not the predictions are.
//!
//! The generalized energy distance averages over all ordered pairs including
//! self-pairs unless [`PairConvention::Distinct`] is requested.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A strictly binary `height × width` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} mask needs {} pixels, got {}",
                height * width,
                bits.len()
            )));
        }
        if let Some(v) = bits.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {v} is not binary")));
        }
        Ok(BinaryMask { height, width, bits })
    }

    /// Accepts only exact `0.0` and `1.0`.
    pub fn from_f64(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                _ => Err(Error::invalid(format!("mask value {v} is not binary"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(height, width, bits)
    }

    /// Pixels strictly above `threshold` become foreground.
    pub fn threshold(height: usize, width: usize, values: &[f64], threshold: f64) -> Result<Self> {
        let bits = values.iter().map(|&v| u8::from(v > threshold)).collect();
        Self::new(height, width, bits)
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// Mask in the `[-1, 1]` diffusion encoding.
    pub fn to_signed(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 }).collect()
    }

    fn check_shape(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::invalid(format!(
                "mask shapes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    fn overlap(&self, other: &BinaryMask) -> (usize, usize) {
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        (inter, union)
    }

    fn union(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskRole {
    GroundTruth,
    Prediction,
}

impl MaskRole {
    fn label(self) -> &'static str {
        match self {
            MaskRole::GroundTruth => "ground-truth",
            MaskRole::Prediction => "prediction",
        }
    }
}

/// A nonempty, uniformly shaped list of masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    masks: Vec<BinaryMask>,
    role: MaskRole,
}

impl MaskSet {
    pub fn new(masks: Vec<BinaryMask>, role: MaskRole) -> Result<Self> {
        let Some(first) = masks.first() else {
            return Err(Error::invalid(format!("empty {} mask set", role.label())));
        };
        for m in &masks[1..] {
            first.check_shape(m)?;
        }
        Ok(MaskSet { masks, role })
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn role(&self) -> MaskRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn union(&self) -> BinaryMask {
        self.masks[1..]
            .iter()
            .fold(self.masks[0].clone(), |acc, m| acc.union(m))
    }

    fn check_compatible(&self, other: &MaskSet) -> Result<()> {
        self.masks[0].check_shape(&other.masks[0])
    }
}

pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_shape(b)?;
    Ok(iou_unchecked(a, b))
}

fn iou_unchecked(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (inter, union) = a.overlap(b);
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_shape(b)?;
    Ok(dice_unchecked(a, b))
}

fn dice_unchecked(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (inter, union) = a.overlap(b);
    if union == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a.count() + b.count()) as f64
    }
}

fn distance(a: &BinaryMask, b: &BinaryMask) -> f64 {
    1.0 - iou_unchecked(a, b)
}

/// Which pairs enter the within-set terms of the energy distance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairConvention {
    /// All ordered pairs, self-pairs included.
    #[default]
    AllPairs,
    /// Ordered pairs with distinct indices; needs two masks per set.
    Distinct,
}

/// Squared generalized energy distance with `d = 1 − IoU`.
pub fn ged(preds: &MaskSet, gts: &MaskSet) -> Result<f64> {
    ged_with(preds, gts, PairConvention::AllPairs)
}

pub fn ged_with(preds: &MaskSet, gts: &MaskSet, pairs: PairConvention) -> Result<f64> {
    preds.check_compatible(gts)?;
    let cross = mean_cross(preds.masks(), gts.masks());
    let within_p = mean_within(preds, pairs)?;
    let within_g = mean_within(gts, pairs)?;
    Ok(2.0 * cross - within_p - within_g)
}

fn mean_cross(a: &[BinaryMask], b: &[BinaryMask]) -> f64 {
    let mut acc = 0.0;
    for x in a {
        for y in b {
            acc += distance(x, y);
        }
    }
    acc / (a.len() * b.len()) as f64
}

fn mean_within(set: &MaskSet, pairs: PairConvention) -> Result<f64> {
    let m = set.masks();
    match pairs {
        PairConvention::AllPairs => Ok(mean_cross(m, m)),
        PairConvention::Distinct => {
            if m.len() < 2 {
                return Err(Error::UndefinedDispersion {
                    role: set.role().label(),
                    len: m.len(),
                });
            }
            let mut acc = 0.0;
            for (i, x) in m.iter().enumerate() {
                for (j, y) in m.iter().enumerate() {
                    if i != j {
                        acc += distance(x, y);
                    }
                }
            }
            Ok(acc / (m.len() * (m.len() - 1)) as f64)
        }
    }
}

/// True-positive rate of the prediction union against the ground-truth
/// union.
pub fn combined_sensitivity(preds: &MaskSet, gts: &MaskSet) -> Result<f64> {
    preds.check_compatible(gts)?;
    let yc = gts.union();
    let pc = preds.union();
    let positives = yc.count();
    if positives == 0 {
        return Ok(1.0);
    }
    let (tp, _) = yc.overlap(&pc);
    Ok(tp as f64 / positives as f64)
}

/// Mean over ground truths of the best Dice against any prediction.
pub fn max_dice_match(preds: &MaskSet, gts: &MaskSet) -> Result<f64> {
    preds.check_compatible(gts)?;
    let total: f64 = gts
        .masks()
        .iter()
        .map(|y| {
            preds
                .masks()
                .iter()
                .map(|p| dice_unchecked(p, y))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(total / gts.len() as f64)
}

/// Pairwise dispersion used by the diversity agreement.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dispersion {
    /// `1 − IoU(a, b)`.
    #[default]
    IouDistance,
    /// Mean per-pixel variance of the two-sample set `{a_p, b_p}`,
    /// `|a ⊕ b| / (4·P)`.
    PixelVariance,
}

impl Dispersion {
    fn between(self, a: &BinaryMask, b: &BinaryMask) -> f64 {
        match self {
            Dispersion::IouDistance => distance(a, b),
            Dispersion::PixelVariance => {
                let xor = a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count();
                xor as f64 / (4 * a.bits.len()) as f64
            }
        }
    }
}

fn dispersion_range(set: &MaskSet, disp: Dispersion) -> Result<(f64, f64)> {
    let m = set.masks();
    if m.len() < 2 {
        return Err(Error::UndefinedDispersion {
            role: set.role().label(),
            len: m.len(),
        });
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            let v = disp.between(&m[i], &m[j]);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok((lo, hi))
}

/// `1 − (|ΔV_max| + |ΔV_min|)/2` over unordered distinct pairs.
pub fn diversity_agreement(preds: &MaskSet, gts: &MaskSet) -> Result<f64> {
    diversity_agreement_with(preds, gts, Dispersion::IouDistance)
}

pub fn diversity_agreement_with(preds: &MaskSet, gts: &MaskSet, disp: Dispersion) -> Result<f64> {
    preds.check_compatible(gts)?;
    let (g_lo, g_hi) = dispersion_range(gts, disp)?;
    let (p_lo, p_hi) = dispersion_range(preds, disp)?;
    Ok(1.0 - ((g_hi - p_hi).abs() + (g_lo - p_lo).abs()) / 2.0)
}

/// `3·s_c·d_max·d_a / (s_c + d_max + d_a)`, or 0 when the denominator is 0.
///
/// This is the composite as printed, not the harmonic mean of the three
/// components; see [`harmonic_mean3`] for the latter.
pub fn ci_score(s_c: f64, d_max: f64, d_a: f64) -> f64 {
    let den = s_c + d_max + d_a;
    if den == 0.0 {
        0.0
    } else {
        3.0 * s_c * d_max * d_a / den
    }
}

/// The true harmonic mean `3abc / (ab + bc + ca)`, 0 if any input is 0.
pub fn harmonic_mean3(a: f64, b: f64, c: f64) -> f64 {
    let den = a * b + b * c + c * a;
    if a == 0.0 || b == 0.0 || c == 0.0 || den == 0.0 {
        0.0
    } else {
        3.0 * a * b * c / den
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub pairs: PairConvention,
    pub dispersion: Dispersion,
}

/// Scores for one image. `d_a` and `ci` are `None` when a set has fewer than
/// two masks; `d_a_undefined` records that.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CIReport {
    pub ged: f64,
    pub s_c: f64,
    pub d_max: f64,
    pub d_a: Option<f64>,
    pub ci: Option<f64>,
    pub d_a_undefined: bool,
    pub harmonic_mean: Option<f64>,
}

pub fn evaluate_pair(preds: &MaskSet, gts: &MaskSet, opts: MetricOptions) -> Result<CIReport> {
    let ged = ged_with(preds, gts, opts.pairs)?;
    let s_c = combined_sensitivity(preds, gts)?;
    let d_max = max_dice_match(preds, gts)?;
    let d_a = match diversity_agreement_with(preds, gts, opts.dispersion) {
        Ok(v) => Some(v),
        Err(Error::UndefinedDispersion { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(CIReport {
        ged,
        s_c,
        d_max,
        d_a,
        ci: d_a.map(|d| ci_score(s_c, d_max, d)),
        d_a_undefined: d_a.is_none(),
        harmonic_mean: d_a.map(|d| harmonic_mean3(s_c, d_max, d)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub image_id: String,
    #[serde(flatten)]
    pub scores: CIReport,
}

/// Dataset means. `d_a`, `ci` and `harmonic_mean` average only the images
/// where they are defined; `d_a_defined` counts those images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub ged: f64,
    pub s_c: f64,
    pub d_max: f64,
    pub d_a: Option<f64>,
    pub ci: Option<f64>,
    pub harmonic_mean: Option<f64>,
    pub d_a_defined: usize,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestsetReport {
    pub schema_version: u32,
    pub images: Vec<ImageReport>,
    pub mean: MeanReport,
}

/// Scores every `(prediction, ground truth)` pair and averages in order.
pub fn evaluate_testset(
    image_ids: &[String],
    model_outputs: &[MaskSet],
    gt_sets: &[MaskSet],
    opts: MetricOptions,
) -> Result<TestsetReport> {
    if model_outputs.len() != gt_sets.len() || image_ids.len() != gt_sets.len() {
        return Err(Error::invalid(format!(
            "{} ids, {} prediction sets and {} ground-truth sets",
            image_ids.len(),
            model_outputs.len(),
            gt_sets.len()
        )));
    }
    if gt_sets.is_empty() {
        return Err(Error::invalid("no test images"));
    }
    let images = image_ids
        .iter()
        .zip(model_outputs.iter().zip(gt_sets))
        .map(|(id, (p, g))| {
            Ok(ImageReport {
                image_id: id.clone(),
                scores: evaluate_pair(p, g, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_report(&images);
    Ok(TestsetReport {
        schema_version: REPORT_SCHEMA_VERSION,
        images,
        mean,
    })
}

fn mean_report(images: &[ImageReport]) -> MeanReport {
    let n = images.len() as f64;
    let avg = |f: &dyn Fn(&CIReport) -> f64| images.iter().map(|r| f(&r.scores)).sum::<f64>() / n;
    let avg_opt = |f: &dyn Fn(&CIReport) -> Option<f64>| {
        let vals: Vec<f64> = images.iter().filter_map(|r| f(&r.scores)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    MeanReport {
        ged: avg(&|r| r.ged),
        s_c: avg(&|r| r.s_c),
        d_max: avg(&|r| r.d_max),
        d_a: avg_opt(&|r| r.d_a),
        ci: avg_opt(&|r| r.ci),
        harmonic_mean: avg_opt(&|r| r.harmonic_mean),
        d_a_defined: images.iter().filter(|r| r.scores.d_a.is_some()).count(),
    }
}
