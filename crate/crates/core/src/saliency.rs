//! From activation maps to saliency maps and rendered heatmaps.
//!
//! A saliency map is an activation map bilinearly upscaled to image
//! resolution and min-max normalized into [0, 1]; values near 1 mark regions
//! of interest. Rendering follows the usual thermal convention: blue for 0,
//! yellow for 0.5, red for 1.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::two_wam::ActivationMap;

/// Activation applied on top of the weighted feature sum in [`cam`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamActivation {
    Relu,
    Identity,
}

/// An H×W map of values in [0, 1]. Unless the source map was constant, the
/// minimum is exactly 0 and the maximum exactly 1.
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    values: Vec<f64>,
    source_size: (usize, usize),
    image_size: (usize, usize),
}

impl SaliencyMap {
    /// Validated constructor for maps built outside [`to_saliency`].
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::dimension(format!(
                "saliency map {height}x{width} does not match {} values",
                values.len()
            )));
        }
        if !values.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::validation("saliency values must lie in [0, 1]"));
        }
        Ok(SaliencyMap {
            values,
            source_size: (height, width),
            image_size: (height, width),
        })
    }

    pub fn height(&self) -> usize {
        self.image_size.0
    }

    pub fn width(&self) -> usize {
        self.image_size.1
    }

    /// Spatial size of the activation map this came from.
    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width() + col]
    }
}

/// Generic activation mapping: the activation of a fixed weighted sum of
/// feature maps.
pub fn cam(features: &Tensor, weights: &[f64], activation: CamActivation) -> Result<ActivationMap> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(Error::dimension(format!(
            "cam features must be [k, h, w], got {shape:?}"
        )));
    }
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    if weights.len() != k {
        return Err(Error::dimension(format!(
            "cam weight axis: {k} feature maps but {} weights",
            weights.len()
        )));
    }
    let plane = h * w;
    let data = features.data();
    let mut out = vec![0.0; plane];
    for (j, &wj) in weights.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(&data[j * plane..(j + 1) * plane]) {
            *o += wj * v;
        }
    }
    if activation == CamActivation::Relu {
        for o in &mut out {
            *o = o.max(0.0);
        }
    }
    ActivationMap::new(h, w, out, "cam")
}

/// A model that exposes a designated feature layer for gradient-based
/// saliency. Implementations must insert `image` as a tape leaf preserving
/// its `requires_grad` flag, and return the `[k, h, w]` feature node together
/// with the scalar score node.
pub trait SaliencySource {
    fn features_and_score(&self, tape: &mut Tape, image: &Tensor) -> Result<(NodeId, NodeId)>;
}

/// Gradient-weighted activation mapping: weights each feature map by the
/// spatial mean of the score gradient flowing into it, then applies relu to
/// the weighted sum.
pub fn grad_cam<M: SaliencySource + ?Sized>(model: &M, input: &Tensor) -> Result<ActivationMap> {
    let mut tape = Tape::new();
    let mut img = input.clone();
    // Gradients must reach the feature node even on a frozen model.
    img.requires_grad = true;
    let (features, score) = model.features_and_score(&mut tape, &img)?;
    let f_shape = tape.value(features).shape().to_vec();
    if f_shape.len() != 3 {
        return Err(Error::config(format!(
            "designated feature layer must be [k, h, w], got {f_shape:?}"
        )));
    }
    if tape.value(score).numel() != 1 {
        return Err(Error::config("score selector must be scalar"));
    }
    let (k, h, w) = (f_shape[0], f_shape[1], f_shape[2]);
    let plane = h * w;
    tape.backward(score)?;

    let weights: Vec<f64> = match tape.grad(features) {
        Some(g) => (0..k)
            .map(|j| g[j * plane..(j + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect(),
        // score does not depend on the features at all
        None => vec![0.0; k],
    };
    let mut map = cam(tape.value(features), &weights, CamActivation::Relu)?;
    map.source = "grad-cam".into();
    Ok(map)
}

/// Bilinear upscale (corner-aligned) to the target size followed by min-max
/// normalization into [0, 1]. A constant map normalizes to all zeros.
pub fn to_saliency(map: &ActivationMap, target: (usize, usize)) -> Result<SaliencyMap> {
    let (h, w) = (map.height(), map.width());
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::validation(format!(
            "saliency target {th}x{tw} smaller than source {h}x{w}; only upscaling is supported"
        )));
    }
    let resized = bilinear_resize(map.values(), h, w, th, tw);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &resized {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let values = if range == 0.0 {
        vec![0.0; resized.len()]
    } else {
        resized.iter().map(|v| (v - lo) / range).collect()
    };
    Ok(SaliencyMap {
        values,
        source_size: (h, w),
        image_size: (th, tw),
    })
}

fn bilinear_resize(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let mut out = vec![0.0; th * tw];
    let sy_step = if th > 1 { (h - 1) as f64 / (th - 1) as f64 } else { 0.0 };
    let sx_step = if tw > 1 { (w - 1) as f64 / (tw - 1) as f64 } else { 0.0 };
    for r in 0..th {
        let sy = r as f64 * sy_step;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for c in 0..tw {
            let sx = c as f64 * sx_step;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[r * tw + c] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Piecewise-linear thermal colormap: blue at 0, yellow at 0.5, red at 1.
pub fn thermal_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let (from, to, t) = if v <= 0.5 {
        ([0.0, 0.0, 255.0], [255.0, 255.0, 0.0], v / 0.5)
    } else {
        ([255.0, 255.0, 0.0], [255.0, 0.0, 0.0], (v - 0.5) / 0.5)
    };
    let mut rgb = [0u8; 3];
    for i in 0..3 {
        rgb[i] = (from[i] + (to[i] - from[i]) * t).round() as u8;
    }
    rgb
}

/// Renders a saliency map as an 8-bit RGB heatmap.
pub fn render_thermal(map: &SaliencyMap) -> RgbImage {
    let (h, w) = (map.height(), map.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            img.put_pixel(c as u32, r as u32, image::Rgb(thermal_color(map.at(r, c))));
        }
    }
    img
}

/// Renders the heatmap alpha-blended over a base image at fixed 0.5 opacity.
/// The base must match the map size.
pub fn render_thermal_over(map: &SaliencyMap, base: &RgbImage) -> Result<RgbImage> {
    let (h, w) = (map.height(), map.width());
    if base.width() as usize != w || base.height() as usize != h {
        return Err(Error::dimension(format!(
            "base image {}x{} does not match saliency map {h}x{w}",
            base.height(),
            base.width()
        )));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let heat = thermal_color(map.at(r, c));
            let under = base.get_pixel(c as u32, r as u32);
            let mut px = [0u8; 3];
            for i in 0..3 {
                px[i] = (0.5 * heat[i] as f64 + 0.5 * under[i] as f64).round() as u8;
            }
            img.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    Ok(img)
}
