//! Synthetic multi-rater data and the on-disk dataset layout.
//!
//! Each sample is a low-contrast elliptical blob on a smooth random texture.
//! Every rater independently either leaves the mask blank (probability
//! `blank_prob`) or outlines the blob after a rater-specific dilation or
//! erosion. The blank decision is invisible in the image, so the correct
//! conditional distribution is a two-mode mixture with known weights.
//!
//! On disk:
//!
//! ```text
//! <root>/dataset.json
//! <root>/<id>/image.png       16-bit grayscale; C channels stacked vertically
//! <root>/<id>/mask_r0.png     8-bit, 0 or 255
//! <root>/<id>/mask_r{k}.png
//! <root>/<id>/meta.json
//! ```

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::seeding;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_raters: usize,
    pub blank_prob: f64,
    /// Rater radii are drawn uniformly from `-boundary_jitter..=boundary_jitter`;
    /// negative radii erode, positive ones dilate.
    pub boundary_jitter: u32,
    /// Amplitude of the background texture.
    pub noise_level: f64,
    /// Intensity step between background and blob.
    pub contrast: f64,
    pub channels: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 16,
            num_raters: 4,
            blank_prob: 0.5,
            boundary_jitter: 1,
            noise_level: 0.15,
            contrast: 0.5,
            channels: 1,
            count: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.blank_prob) {
            return Err(Error::invalid(format!("blank_prob {} is outside [0, 1]", self.blank_prob)));
        }
        if self.image_size < 8 {
            return Err(Error::invalid("image_size must be at least 8"));
        }
        if self.num_raters == 0 || self.channels == 0 {
            return Err(Error::invalid("num_raters and channels must be positive"));
        }
        if self.boundary_jitter as usize * 4 >= self.image_size {
            return Err(Error::invalid("boundary_jitter is too large for the image"));
        }
        if !(self.noise_level >= 0.0 && self.contrast >= 0.0) {
            return Err(Error::invalid("noise_level and contrast must be nonnegative"));
        }
        Ok(())
    }
}

/// Generator parameters recorded with each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    /// Seed of the generator run that produced this sample.
    pub seed: u64,
    pub index: usize,
    pub channels: usize,
    pub num_raters: usize,
    pub center: [f64; 2],
    pub axes: [f64; 2],
    pub angle: f64,
    /// `None` for a blank rater, else the morphological radius.
    pub rater_radii: Vec<Option<i32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguousSample {
    /// `[1, C, H, W]` in `[-1, 1]`.
    pub image: Tensor,
    pub rater_masks: Vec<BinaryMask>,
    pub meta: SampleMeta,
}

impl AmbiguousSample {
    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, _, h, w) = self.image.dims4();
        (h, w)
    }
}

/// Generates `cfg.count` samples. Sample `i` depends only on `(cfg, i)`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<AmbiguousSample>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| generate_one(cfg, i)).collect()
}

fn generate_one(cfg: &SynthConfig, index: usize) -> Result<AmbiguousSample> {
    let mut rng = seeding::stream(seeding::mix(cfg.seed, index as u64), seeding::DATA);
    let n = cfg.image_size;
    let s = n as f64;
    let jitter = cfg.boundary_jitter as i32;
    loop {
        let center = [rng.gen_range(0.35 * s..0.65 * s), rng.gen_range(0.35 * s..0.65 * s)];
        let axes = [rng.gen_range(0.14 * s..0.28 * s), rng.gen_range(0.14 * s..0.28 * s)];
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let blob = ellipse(n, center, axes, angle);
        let radii: Vec<Option<i32>> = (0..cfg.num_raters)
            .map(|_| (!rng.gen_bool(cfg.blank_prob)).then(|| rng.gen_range(-jitter..=jitter)))
            .collect();
        let texture = textures(cfg, &mut rng);
        if !fits(&blob, n, jitter) {
            continue;
        }
        let masks: Vec<BinaryMask> = radii
            .iter()
            .map(|r| match r {
                None => BinaryMask::empty(n, n),
                Some(r) => morph(&blob, n, *r),
            })
            .collect();
        if radii.iter().zip(&masks).any(|(r, m)| r.is_some() && m.count() < 3) {
            continue;
        }
        let image = render(cfg, &blob, &texture);
        return Ok(AmbiguousSample {
            image,
            rater_masks: masks,
            meta: SampleMeta {
                id: format!("{index:05}"),
                seed: cfg.seed,
                index,
                channels: cfg.channels,
                num_raters: cfg.num_raters,
                center,
                axes,
                angle,
                rater_radii: radii,
            },
        });
    }
}

fn ellipse(n: usize, c: [f64; 2], axes: [f64; 2], angle: f64) -> BinaryMask {
    let (sin, cos) = angle.sin_cos();
    let bits = (0..n * n)
        .map(|k| {
            let y = (k / n) as f64 + 0.5 - c[0];
            let x = (k % n) as f64 + 0.5 - c[1];
            let u = x * cos + y * sin;
            let v = -x * sin + y * cos;
            u8::from((u / axes[1]).powi(2) + (v / axes[0]).powi(2) <= 1.0)
        })
        .collect();
    BinaryMask::new(n, n, bits).expect("ellipse mask")
}

/// The blob, dilated by the largest radius, stays one pixel off every edge.
fn fits(blob: &BinaryMask, n: usize, jitter: i32) -> bool {
    let grown = morph(blob, n, jitter);
    let bits = grown.bits();
    let edge = (0..n).any(|i| bits[i] == 1 || bits[(n - 1) * n + i] == 1 || bits[i * n] == 1 || bits[i * n + n - 1] == 1);
    !edge && morph(blob, n, -jitter).count() >= 3
}

/// Dilation (`r > 0`) or erosion (`r < 0`) with a Euclidean disk.
pub fn morph(mask: &BinaryMask, n: usize, r: i32) -> BinaryMask {
    if r == 0 {
        return mask.clone();
    }
    let rad = r.abs();
    let offsets: Vec<(i32, i32)> = (-rad..=rad)
        .flat_map(|dy| (-rad..=rad).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= rad * rad)
        .collect();
    let src = mask.bits();
    let at = |y: i32, x: i32| -> u8 {
        if y < 0 || x < 0 || y >= n as i32 || x >= n as i32 {
            0
        } else {
            src[y as usize * n + x as usize]
        }
    };
    let bits = (0..n * n)
        .map(|k| {
            let (y, x) = ((k / n) as i32, (k % n) as i32);
            let hit = |&(dy, dx): &(i32, i32)| at(y + dy, x + dx) == 1;
            u8::from(if r > 0 {
                offsets.iter().any(hit)
            } else {
                offsets.iter().all(hit)
            })
        })
        .collect();
    BinaryMask::new(n, n, bits).expect("morph mask")
}

/// Smooth per-channel textures: white noise box-blurred twice.
fn textures(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = cfg.image_size;
    (0..cfg.channels)
        .map(|_| {
            let raw: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let once = box_blur(&raw, n);
            let twice = box_blur(&once, n);
            let peak = twice.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            twice.iter().map(|v| v / peak).collect()
        })
        .collect()
}

fn box_blur(v: &[f64], n: usize) -> Vec<f64> {
    (0..n * n)
        .map(|k| {
            let (y, x) = ((k / n) as i64, (k % n) as i64);
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < n as i64 && xx < n as i64 {
                        acc += v[yy as usize * n + xx as usize];
                        cnt += 1.0;
                    }
                }
            }
            acc / cnt
        })
        .collect()
}

fn render(cfg: &SynthConfig, blob: &BinaryMask, texture: &[Vec<f64>]) -> Tensor {
    let n = cfg.image_size;
    let mut data = Vec::with_capacity(cfg.channels * n * n);
    for tex in texture {
        for (k, &t) in tex.iter().enumerate() {
            let base = -0.25 + cfg.contrast * blob.bits()[k] as f64;
            data.push((base + cfg.noise_level * t).clamp(-1.0, 1.0));
        }
    }
    Tensor::new([1, cfg.channels, n, n], data).expect("image shape")
}

/// How a training mask is drawn from the raters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RaterMode {
    AllRaters,
    RandomRater,
    Averaged,
}

/// Pixelwise rater mean, foreground where strictly above one half.
pub fn averaged_mask(sample: &AmbiguousSample) -> BinaryMask {
    let (h, w) = sample.size();
    let m = sample.rater_masks.len() as f64;
    let bits = (0..h * w)
        .map(|k| {
            let votes: usize = sample.rater_masks.iter().map(|r| r.bits()[k] as usize).sum();
            u8::from(votes as f64 / m > 0.5)
        })
        .collect();
    BinaryMask::new(h, w, bits).expect("averaged mask")
}

/// `(b, mask)` pairs for `mode`: one pair for the averaged and random-rater
/// modes, one per rater for all-raters.
pub fn rater_view<R: Rng + ?Sized>(
    sample: &AmbiguousSample,
    mode: RaterMode,
    rng: &mut R,
) -> Vec<(Tensor, BinaryMask)> {
    match mode {
        RaterMode::Averaged => vec![(sample.image.clone(), averaged_mask(sample))],
        RaterMode::RandomRater => {
            let k = rng.gen_range(0..sample.rater_masks.len());
            vec![(sample.image.clone(), sample.rater_masks[k].clone())]
        }
        RaterMode::AllRaters => sample
            .rater_masks
            .iter()
            .map(|m| (sample.image.clone(), m.clone()))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetIndex {
    count: usize,
    ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<SynthConfig>,
}

/// Writes `samples` under `root`, creating it if needed.
pub fn save_dataset(root: &Path, samples: &[AmbiguousSample], generator: Option<&SynthConfig>) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for s in samples {
        let dir = root.join(s.id());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_image(&dir.join("image.png"), &s.image)?;
        for (k, m) in s.rater_masks.iter().enumerate() {
            save_mask(&dir.join(format!("mask_r{k}.png")), m)?;
        }
        write_json(&dir.join("meta.json"), &s.meta)?;
    }
    let index = DatasetIndex {
        count: samples.len(),
        ids: samples.iter().map(|s| s.id().to_string()).collect(),
        generator: generator.cloned(),
    };
    write_json(&root.join("dataset.json"), &index)
}

/// Reads every sample listed in `<root>/dataset.json`, in listed order.
pub fn load_dataset(root: &Path) -> Result<Vec<AmbiguousSample>> {
    let index: DatasetIndex = read_json(&root.join("dataset.json"))?;
    index.ids.iter().map(|id| load_sample(&root.join(id))).collect()
}

fn load_sample(dir: &Path) -> Result<AmbiguousSample> {
    let meta: SampleMeta = read_json(&dir.join("meta.json"))?;
    let image = load_image(&dir.join("image.png"), meta.channels)?;
    let (_, _, h, w) = image.dims4();
    let rater_masks = (0..meta.num_raters)
        .map(|k| load_mask(&dir.join(format!("mask_r{k}.png")), h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(AmbiguousSample {
        image,
        rater_masks,
        meta,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn quantize(v: f64) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 65535.0).round() as u16
}

fn dequantize(q: u16) -> f64 {
    q as f64 / 65535.0 * 2.0 - 1.0
}

fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (_, c, h, w) = image.dims4();
    let pixels: Vec<u16> = image.data().iter().map(|&v| quantize(v)).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, (c * h) as u32, pixels).expect("image buffer size");
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

fn load_image(path: &Path, channels: usize) -> Result<Tensor> {
    let img = open_image(path)?.into_luma16();
    let (w, total_h) = (img.width() as usize, img.height() as usize);
    if channels == 0 || total_h % channels != 0 {
        return Err(Error::format(
            path,
            format!("height {total_h} is not a multiple of {channels} channels"),
        ));
    }
    let h = total_h / channels;
    let data = img.into_raw().into_iter().map(dequantize).collect();
    Tensor::new([1, channels, h, w], data)
}

fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let pixels: Vec<u8> = mask.bits().iter().map(|&b| b * 255).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, pixels).expect("mask buffer size");
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

fn load_mask(path: &Path, h: usize, w: usize) -> Result<BinaryMask> {
    let img = open_image(path)?.into_luma8();
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(Error::format(
            path,
            format!("mask is {}x{}, image is {h}x{w}", img.height(), img.width()),
        ));
    }
    let bits = img
        .into_raw()
        .into_iter()
        .map(|v| match v {
            0 => Ok(0),
            255 => Ok(1),
            _ => Err(Error::format(path, format!("pixel value {v} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    BinaryMask::new(h, w, bits)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::format(path, "missing file"));
    }
    image::open(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Splits off the last `test` samples.
pub fn split(samples: Vec<AmbiguousSample>, test: usize) -> Result<(Vec<AmbiguousSample>, Vec<AmbiguousSample>)> {
    if test >= samples.len() {
        return Err(Error::invalid(format!(
            "cannot hold out {test} of {} samples",
            samples.len()
        )));
    }
    let mut train = samples;
    let test = train.split_off(train.len() - test);
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(count: usize, blank_prob: f64) -> SynthConfig {
        SynthConfig {
            count,
            blank_prob,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    fn blank_fraction(samples: &[AmbiguousSample]) -> f64 {
        let total: usize = samples.iter().map(|s| s.rater_masks.len()).sum();
        let blank = samples
            .iter()
            .flat_map(|s| &s.rater_masks)
            .filter(|m| m.is_empty())
            .count();
        blank as f64 / total as f64
    }

    #[test]
    fn blank_probability_extremes() {
        assert_eq!(blank_fraction(&generate_synthetic(&cfg(50, 0.0)).unwrap()), 0.0);
        assert_eq!(blank_fraction(&generate_synthetic(&cfg(50, 1.0)).unwrap()), 1.0);
    }

    #[test]
    fn blank_fraction_concentrates() {
        let f = blank_fraction(&generate_synthetic(&cfg(1000, 0.5)).unwrap());
        assert!((0.47..=0.53).contains(&f), "{f}");
    }

    #[test]
    fn generator_is_pure() {
        let a = generate_synthetic(&cfg(20, 0.5)).unwrap();
        let b = generate_synthetic(&cfg(20, 0.5)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SynthConfig { seed: 12, ..cfg(20, 0.5) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn images_are_in_range_and_masks_aligned() {
        for s in generate_synthetic(&cfg(30, 0.3)).unwrap() {
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            for m in &s.rater_masks {
                assert_eq!((m.height(), m.width()), s.size());
            }
        }
    }

    #[test]
    fn morphology_orders_masks() {
        let blob = ellipse(16, [8.0, 8.0], [4.0, 3.0], 0.3);
        let grown = morph(&blob, 16, 1);
        let shrunk = morph(&blob, 16, -1);
        assert!(shrunk.count() < blob.count() && blob.count() < grown.count());
        for k in 0..256 {
            assert!(shrunk.bits()[k] <= blob.bits()[k] && blob.bits()[k] <= grown.bits()[k]);
        }
    }

    #[test]
    fn averaged_view_tie_is_background() {
        let mut s = generate_synthetic(&cfg(1, 0.0)).unwrap().remove(0);
        let blob = s.rater_masks[0].clone();
        let (h, w) = s.size();
        s.rater_masks = vec![BinaryMask::empty(h, w), BinaryMask::empty(h, w), blob.clone(), blob.clone()];
        assert!(averaged_mask(&s).is_empty());
        s.rater_masks = vec![blob.clone(); 4];
        assert_eq!(averaged_mask(&s), blob);
    }

    #[test]
    fn random_rater_is_uniform() {
        let s = generate_synthetic(&cfg(1, 0.0)).unwrap().remove(0);
        let mut s = s;
        // Make raters distinguishable.
        let (h, w) = s.size();
        s.rater_masks = (0..4)
            .map(|k| {
                let mut bits = vec![0u8; h * w];
                bits[k] = 1;
                BinaryMask::new(h, w, bits).unwrap()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let (_, m) = rater_view(&s, RaterMode::RandomRater, &mut rng).remove(0);
            counts[m.bits().iter().position(|&b| b == 1).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.02, "{counts:?}");
        }
        assert_eq!(rater_view(&s, RaterMode::AllRaters, &mut rng).len(), 4);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = SynthConfig { channels: 2, ..cfg(5, 0.5) };
        let samples = generate_synthetic(&c).unwrap();
        save_dataset(dir.path(), &samples, Some(&c)).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.rater_masks, b.rater_masks);
            assert_eq!(a.meta, b.meta);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 1.0 / 65535.0);
            }
        }
    }

    #[test]
    fn missing_rater_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(&cfg(2, 0.5)).unwrap();
        save_dataset(dir.path(), &samples, None).unwrap();
        fs::remove_file(dir.path().join("00001").join("mask_r2.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("mask_r2.png"), "{err}");
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_synthetic(&SynthConfig { blank_prob: 1.5, ..SynthConfig::default() }).is_err());
        assert!(generate_synthetic(&SynthConfig { num_raters: 0, ..SynthConfig::default() }).is_err());
    }
}
