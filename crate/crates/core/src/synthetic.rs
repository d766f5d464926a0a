//! Synthetic tiny-ROI dataset: smooth value-noise backgrounds, Gaussian
//! blob targets a couple of pixels across, and optional field-style noise
//! (blur or brightness shifts). Ground-truth blob boxes are recorded for
//! localization scoring.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::localization::BBox;
use crate::mil::Split;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    None,
    Blur,
    Brightness,
}

impl NoiseMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseMode::None),
            "blur" => Ok(NoiseMode::Blur),
            "brightness" => Ok(NoiseMode::Brightness),
            other => Err(Error::validation(format!(
                "unknown noise mode {other:?} (expected none, blur, or brightness)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseMode::None => "none",
            NoiseMode::Blur => "blur",
            NoiseMode::Brightness => "brightness",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub positive_fraction: f64,
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Blob radius range in pixels; the recorded tight box spans +-round(radius).
    pub radius_min: f64,
    pub radius_max: f64,
    /// Peak height of each blob above the local background.
    pub contrast: f64,
    pub noise_mode: NoiseMode,
    pub noise_probability: f64,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train: 2000,
            validation: 0,
            test: 500,
            positive_fraction: 0.5,
            blobs_min: 1,
            blobs_max: 3,
            radius_min: 1.0,
            radius_max: 2.0,
            contrast: 0.35,
            noise_mode: NoiseMode::None,
            noise_probability: 0.3,
            image_size: 96,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.positive_fraction && self.positive_fraction < 1.0) {
            return Err(Error::validation("positive fraction must be in (0, 1)"));
        }
        if self.blobs_min == 0 || self.blobs_max < self.blobs_min {
            return Err(Error::validation("blob count range must satisfy 1 <= min <= max"));
        }
        if !(self.radius_min >= 1.0 && self.radius_max >= self.radius_min) {
            return Err(Error::validation("blob radius range must satisfy 1 <= min <= max"));
        }
        if !(self.contrast > 0.0) {
            return Err(Error::validation("blob contrast must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise_probability) {
            return Err(Error::validation("noise probability must be in [0, 1]"));
        }
        if self.image_size < 16 {
            return Err(Error::validation("image size must be at least 16"));
        }
        if self.image_size <= 2 * (self.radius_max.ceil() as usize + 2) {
            return Err(Error::validation("image too small for the blob radius"));
        }
        Ok(())
    }
}

/// One generated image with its ground truth.
#[derive(Clone, Debug)]
pub struct GeneratedImage {
    pub id: String,
    pub pixels: Tensor,
    pub label: u8,
    pub boxes: Vec<BBox>,
    pub noisy: bool,
}

/// Background cell size for the low-frequency value noise.
const NOISE_CELL: usize = 16;

/// Width of the border band faded to a constant 0.4. Keeps the image edge
/// identical across images, so zero-padded convolutions see no
/// image-to-image variance there (the vignette of a magnifier capture).
const BORDER_FADE: usize = 6;

/// Generates all splits from one ChaCha8 stream seeded with `spec.seed`.
/// Per image the draw order is fixed (background grid, blob parameters,
/// noise flag, brightness shift) regardless of the noise mode, so switching
/// modes changes only the images whose noise flag fired.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<(Split, Vec<GeneratedImage>)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for (split, count) in [
        (Split::Train, spec.train),
        (Split::Validation, spec.validation),
        (Split::Test, spec.test),
    ] {
        let mut images = Vec::with_capacity(count);
        let positives = (count as f64 * spec.positive_fraction).round() as usize;
        for index in 0..count {
            let label = u8::from(index < positives);
            let id = format!("{}_{index:05}", split.name());
            images.push(generate_image(spec, id, label, &mut rng)?);
        }
        out.push((split, images));
    }
    Ok(out)
}

fn generate_image(
    spec: &SyntheticSpec,
    id: String,
    label: u8,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedImage> {
    let s = spec.image_size;
    let mut pixels = background(s, rng);

    let mut boxes = Vec::new();
    if label == 1 {
        let count = rng.random_range(spec.blobs_min..=spec.blobs_max);
        let margin = BORDER_FADE + spec.radius_max.ceil() as usize + 2;
        for _ in 0..count {
            let row = rng.random_range(margin..s - margin);
            let col = rng.random_range(margin..s - margin);
            let radius = spec.radius_min + rng.random::<f64>() * (spec.radius_max - spec.radius_min);
            stamp_blob(&mut pixels, s, row, col, radius, spec.contrast);
            let r = radius.round() as usize;
            boxes.push(BBox::new(row - r, col - r, row + r + 1, col + r + 1)?);
        }
    }

    // Both draws happen regardless of mode to keep the stream aligned.
    let noisy = rng.random::<f64>() < spec.noise_probability;
    let shift = rng.random::<f64>() * 0.4 - 0.2;
    if noisy {
        match spec.noise_mode {
            NoiseMode::None => {}
            NoiseMode::Blur => box_blur3(&mut pixels, s),
            NoiseMode::Brightness => {
                for v in &mut pixels {
                    *v = (*v + shift).clamp(0.0, 1.0);
                }
            }
        }
    }

    Ok(GeneratedImage {
        id,
        pixels: Tensor::new(vec![1, s, s], pixels)?,
        label,
        boxes,
        noisy,
    })
}

/// Smooth low-frequency value noise in [0.2, 0.6]: a coarse random grid
/// interpolated with smoothstep weights (no creases at cell boundaries).
fn background(s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cells = s.div_ceil(NOISE_CELL).max(1) + 1;
    let grid: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; s * s];
    let step = (cells - 1) as f64 / (s - 1) as f64;
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    for r in 0..s {
        let gy = r as f64 * step;
        let y0 = (gy.floor() as usize).min(cells - 2);
        let fy = smooth(gy - y0 as f64);
        for c in 0..s {
            let gx = c as f64 * step;
            let x0 = (gx.floor() as usize).min(cells - 2);
            let fx = smooth(gx - x0 as f64);
            let top = grid[y0 * cells + x0] * (1.0 - fx) + grid[y0 * cells + x0 + 1] * fx;
            let bot = grid[(y0 + 1) * cells + x0] * (1.0 - fx) + grid[(y0 + 1) * cells + x0 + 1] * fx;
            let mut v = 0.2 + 0.4 * (top * (1.0 - fy) + bot * fy);
            let edge = r.min(c).min(s - 1 - r).min(s - 1 - c);
            if edge < BORDER_FADE {
                let t = edge as f64 / BORDER_FADE as f64;
                v = 0.4 + (v - 0.4) * t;
            }
            out[r * s + c] = v;
        }
    }
    out
}

/// Adds a Gaussian bump with sigma = radius/2, truncated at 3 sigma.
fn stamp_blob(pixels: &mut [f64], s: usize, row: usize, col: usize, radius: f64, contrast: f64) {
    let sigma = radius / 2.0;
    let reach = (3.0 * sigma).ceil() as isize;
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            let r = row as isize + dr;
            let c = col as isize + dc;
            if r < 0 || c < 0 || r as usize >= s || c as usize >= s {
                continue;
            }
            let d2 = (dr * dr + dc * dc) as f64;
            let bump = contrast * (-d2 / (2.0 * sigma * sigma)).exp();
            let px = &mut pixels[r as usize * s + c as usize];
            *px = (*px + bump).min(1.0);
        }
    }
}

/// 3x3 box blur averaging the in-bounds neighbors.
fn box_blur3(pixels: &mut Vec<f64>, s: usize) {
    let src = pixels.clone();
    for r in 0..s {
        for c in 0..s {
            let mut acc = 0.0;
            let mut n = 0usize;
            for dr in -1i32..=1 {
                for dc in -1i32..=1 {
                    let rr = r as i32 + dr;
                    let cc = c as i32 + dc;
                    if rr >= 0 && cc >= 0 && (rr as usize) < s && (cc as usize) < s {
                        acc += src[rr as usize * s + cc as usize];
                        n += 1;
                    }
                }
            }
            pixels[r * s + c] = acc / n as f64;
        }
    }
}
