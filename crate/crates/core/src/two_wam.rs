//! Two-Weighted Activation Mapping: fuses k feature maps into a single
//! activation map using a learned linear weight and a learned exponential
//! weight per map,
//!
//! ```text
//! T[p] = sum_j a_j * f_j[p] * c^b_j  /  sum_j a_j * c^b_j
//! ```
//!
//! plus the element-wise feature masking step and the RGB integer-fusion
//! analogue that motivates the transform.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on |denominator|. Below this the denominator is replaced by
/// `sign(D) * DENOM_GUARD` (with sign(0) = +1) in both the forward value and
/// the analytic partials, so the transform never divides by zero.
pub const DENOM_GUARD: f64 = 1e-8;

/// The learned fusion weights: one linear (`alpha`) and one exponential
/// (`beta`) coefficient per feature map, plus the fixed base `c`.
///
/// Freshly constructed layers use `alpha = 1`, `beta = 0`, which makes the
/// transform a plain mean of the feature maps until training moves the
/// weights.
#[derive(Clone, Debug)]
pub struct TwoWamLayer {
    pub alpha: Tensor,
    pub beta: Tensor,
    c: f64,
}

impl TwoWamLayer {
    pub fn new(k: usize, c: f64) -> Result<Self> {
        TwoWamLayer::with_weights(vec![1.0; k], vec![0.0; k], c)
    }

    pub fn with_weights(alpha: Vec<f64>, beta: Vec<f64>, c: f64) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::validation("two-wam layer needs k >= 1 feature maps"));
        }
        if alpha.len() != beta.len() {
            return Err(Error::dimension(format!(
                "alpha has {} entries, beta has {}",
                alpha.len(),
                beta.len()
            )));
        }
        if !(c > 0.0) {
            return Err(Error::validation(format!("base c must be positive, got {c}")));
        }
        let k = alpha.len();
        Ok(TwoWamLayer {
            alpha: Tensor::param(vec![k], alpha)?,
            beta: Tensor::param(vec![k], beta)?,
            c,
        })
    }

    pub fn k(&self) -> usize {
        self.alpha.numel()
    }

    pub fn c(&self) -> f64 {
        self.c
    }
}

/// A single h×w map fused from feature maps, before any resizing or
/// normalization.
#[derive(Clone, Debug)]
pub struct ActivationMap {
    values: Vec<f64>,
    h: usize,
    w: usize,
    /// Identifier of the producing model or layer, carried through for reports.
    pub source: String,
}

impl ActivationMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if h == 0 || w == 0 || values.len() != h * w {
            return Err(Error::dimension(format!(
                "activation map {h}x{w} does not match {} values",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("activation map contains non-finite values"));
        }
        Ok(ActivationMap {
            values,
            h,
            w,
            source: source.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-map fused coefficients `aw[j] = alpha_j * c^beta_j` and the guarded
/// denominator `d = clamp(sum aw)`.
pub(crate) struct FuseCoeffs {
    pub aw: Vec<f64>,
    pub d: f64,
}

pub(crate) fn fuse_coeffs(alpha: &[f64], beta: &[f64], c: f64) -> FuseCoeffs {
    let aw: Vec<f64> = alpha
        .iter()
        .zip(beta)
        .map(|(&a, &b)| a * c.powf(b))
        .collect();
    let raw: f64 = aw.iter().sum();
    let d = if raw.abs() < DENOM_GUARD {
        // sign(0) = +1
        if raw < 0.0 {
            -DENOM_GUARD
        } else {
            DENOM_GUARD
        }
    } else {
        raw
    };
    FuseCoeffs { aw, d }
}

fn check_features(features: &Tensor, k: usize) -> Result<(usize, usize)> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(Error::dimension(format!(
            "expected feature stack of shape [k, h, w], got {shape:?}"
        )));
    }
    if shape[0] != k {
        return Err(Error::dimension(format!(
            "layer fuses {k} maps but features have {} channels",
            shape[0]
        )));
    }
    Ok((shape[1], shape[2]))
}

/// Weighted numerator of the transform, before division by the denominator.
pub fn two_wam_numerator(features: &Tensor, layer: &TwoWamLayer) -> Result<Tensor> {
    let (h, w) = check_features(features, layer.k())?;
    let coeffs = fuse_coeffs(layer.alpha.data(), layer.beta.data(), layer.c());
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for (j, &aw) in coeffs.aw.iter().enumerate() {
        let f = &features.data()[j * plane..(j + 1) * plane];
        for (o, &v) in out.iter_mut().zip(f) {
            *o += aw * v;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Full transform: fuse k feature maps into one activation map.
pub fn two_wam_forward(features: &Tensor, layer: &TwoWamLayer) -> Result<ActivationMap> {
    let (h, w) = check_features(features, layer.k())?;
    let mut numer = two_wam_numerator(features, layer)?;
    let coeffs = fuse_coeffs(layer.alpha.data(), layer.beta.data(), layer.c());
    for v in numer.data_mut() {
        *v /= coeffs.d;
    }
    let (_, data) = (numer.shape(), numer.data().to_vec());
    ActivationMap::new(h, w, data, "two-wam")
}

/// Masks every feature channel with the activation map, element-wise.
pub fn two_wam_mask(features: &Tensor, t_act: &ActivationMap) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(Error::dimension(format!(
            "expected feature stack of shape [k, h, w], got {shape:?}"
        )));
    }
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    if (t_act.height(), t_act.width()) != (h, w) {
        return Err(Error::dimension(format!(
            "feature maps are {h}x{w} but activation map is {}x{}",
            t_act.height(),
            t_act.width()
        )));
    }
    let plane = h * w;
    let mut out = vec![0.0; k * plane];
    for j in 0..k {
        let f = &features.data()[j * plane..(j + 1) * plane];
        let o = &mut out[j * plane..(j + 1) * plane];
        for ((o, &fv), &m) in o.iter_mut().zip(f).zip(t_act.values()) {
            *o = fv * m;
        }
    }
    Tensor::new(vec![k, h, w], out)
}

/// Denominator of the RGB fusion: the largest value the numerator can take.
const RGB_FUSE_DENOM: f64 = 255.0 * (1.0 + 256.0 + 256.0 * 256.0);

/// Fuses an RGB triple into a single value in [0, 1] using fixed linear
/// weights 1 and exponential weights 0, 1, 2 with base 256. Injective on
/// distinct triples: the numerator is the base-256 positional encoding.
pub fn rgb_fuse_pixel(rgb: [i32; 3]) -> Result<f64> {
    for (name, v) in ["R", "G", "B"].iter().zip(rgb) {
        if !(0..=255).contains(&v) {
            return Err(Error::validation(format!(
                "{name} channel {v} outside [0, 255]"
            )));
        }
    }
    let [r, g, b] = rgb.map(f64::from);
    Ok((r + g * 256.0 + b * 256.0 * 256.0) / RGB_FUSE_DENOM)
}

/// Applies [`rgb_fuse_pixel`] across a `[3, h, w]` tensor of 8-bit channel
/// values stored as reals. Values must be integral and in [0, 255].
pub fn rgb_fuse_image(rgb: &Tensor) -> Result<Tensor> {
    let shape = rgb.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::dimension(format!(
            "expected [3, h, w] image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let data = rgb.data();
    let mut out = vec![0.0; plane];
    for p in 0..plane {
        let mut chans = [0i32; 3];
        for (ch, slot) in chans.iter_mut().enumerate() {
            let v = data[ch * plane + p];
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                return Err(Error::validation(format!(
                    "channel value {v} is not an integer in [0, 255]"
                )));
            }
            *slot = v as i32;
        }
        out[p] = rgb_fuse_pixel(chans)?;
    }
    Tensor::new(vec![h, w], out)
}
