//! The small trainable CNN shared by the Bag and Instance models.
//!
//! Three conv-relu layers (stride 1, 2, 2) produce k feature maps sized so a
//! 96x96 input keeps a 24x24 spatial grid. A Two-WAM layer fuses the maps
//! into an attention map which masks the features before global average
//! pooling, a dense layer, and a sigmoid probability.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::saliency::{to_saliency, SaliencyMap, SaliencySource};
use crate::tensor::Tensor;
use crate::two_wam::{ActivationMap, TwoWamLayer};

/// Strides of the three conv layers.
pub const CONV_STRIDES: [usize; 3] = [1, 2, 2];

/// Fixed input standardization applied before the first convolution:
/// pixel values in [0, 1] map to [-2, 2]. Keeps activations at O(1) through
/// the relu stack so the attention masking (a product of two feature-scale
/// terms) does not starve the head of gradient.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_GAIN: f64 = 4.0;

/// Initial conv bias. Slightly negative so the relu stack starts sparse:
/// smooth background barely clears the threshold while small high-contrast
/// targets do, which is what lets the pooled features see regions of
/// interest that cover ~0.1% of the image.
pub const BIAS_INIT: f64 = -0.3;

/// Architecture hyperparameters; everything needed to rebuild the weights'
/// shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub conv_channels: [usize; 3],
    pub kernel_size: usize,
    pub two_wam_c: f64,
    pub dropout_rate: f64,
}

impl ModelSpec {
    pub fn feature_maps(&self) -> usize {
        self.conv_channels[2]
    }

    /// Compact descriptor stored in checkpoints; dropout and c are training
    /// knobs and are kept out of it.
    pub fn arch_string(&self) -> String {
        format!(
            "tinycnn in={} conv={},{},{} kernel={} strides={},{},{}",
            self.in_channels,
            self.conv_channels[0],
            self.conv_channels[1],
            self.conv_channels[2],
            self.kernel_size,
            CONV_STRIDES[0],
            CONV_STRIDES[1],
            CONV_STRIDES[2],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.conv_channels.iter().any(|&c| c == 0) {
            return Err(Error::validation("channel counts must be positive"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::validation("kernel size must be odd and positive"));
        }
        if !(self.two_wam_c > 0.0) {
            return Err(Error::validation("two-wam base c must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation("dropout rate must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Node handles of one recorded forward pass.
pub struct ForwardPass {
    /// Output of the last conv layer, `[k, h, w]`: the designated feature
    /// layer for saliency.
    pub features: NodeId,
    /// The fused Two-WAM attention map, `[h, w]`.
    pub attention: NodeId,
    /// Pre-sigmoid score.
    pub logit: NodeId,
    /// Sigmoid probability of the positive class.
    pub probability: NodeId,
    param_ids: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct TinyCnn {
    pub spec: ModelSpec,
    pub conv_w: Vec<Tensor>,
    pub conv_b: Vec<Tensor>,
    pub attention: TwoWamLayer,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// He-style uniform init, variance 2/fan_in. The relu stack plus the
/// attention product (which squares the feature scale) starves gradients
/// under fan-sum scaling, so the fan-in rule is used throughout.
fn he_uniform<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let s = (6.0 / fan_in as f64).sqrt();
    let data: Vec<f64> = (0..numel).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * s).collect();
    Tensor::param(shape, data)
}

impl TinyCnn {
    /// Fresh weights: uniform in [-s, s] with s = sqrt(6/fan_in), zero
    /// biases, neutral attention (alpha 1, beta 0).
    pub fn init<R: Rng>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let ks = spec.kernel_size;
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut c_in = spec.in_channels;
        for &c_out in &spec.conv_channels {
            let fan_in = c_in * ks * ks;
            conv_w.push(he_uniform(vec![c_out, c_in, ks, ks], fan_in, rng)?);
            let mut b = Tensor::full(vec![c_out], BIAS_INIT)?;
            b.requires_grad = true;
            conv_b.push(b);
            c_in = c_out;
        }
        let k = spec.feature_maps();
        let attention = TwoWamLayer::new(k, spec.two_wam_c)?;
        let head_w = he_uniform(vec![1, k], k, rng)?;
        let mut head_b = Tensor::zeros(vec![1])?;
        head_b.requires_grad = true;
        Ok(TinyCnn {
            spec,
            conv_w,
            conv_b,
            attention,
            head_w,
            head_b,
        })
    }

    /// Parameter tensors in checkpoint order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1_w", &self.conv_w[0]),
            ("conv1_b", &self.conv_b[0]),
            ("conv2_w", &self.conv_w[1]),
            ("conv2_b", &self.conv_b[1]),
            ("conv3_w", &self.conv_w[2]),
            ("conv3_b", &self.conv_b[2]),
            ("alpha", &self.attention.alpha),
            ("beta", &self.attention.beta),
            ("head_w", &self.head_w),
            ("head_b", &self.head_b),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let [c1, rest @ ..] = &mut self.conv_w[..] else { unreachable!() };
        let [c2, c3] = rest else { unreachable!() };
        let [b1, b2, b3] = &mut self.conv_b[..] else { unreachable!() };
        out.push(c1);
        out.push(b1);
        out.push(c2);
        out.push(b2);
        out.push(c3);
        out.push(b3);
        out.push(&mut self.attention.alpha);
        out.push(&mut self.attention.beta);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Records the forward pass on `tape`. In training mode dropout draws
    /// from `rng`; in inference mode `rng` is untouched.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        if image.shape().len() != 3 || image.shape()[0] != self.spec.in_channels {
            return Err(Error::dimension(format!(
                "model expects [{}, h, w] input, got {:?}",
                self.spec.in_channels,
                image.shape()
            )));
        }
        let pad = self.spec.kernel_size / 2;
        let bind = |tape: &mut Tape, t: &Tensor| -> NodeId {
            let mut leafed = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid");
            leafed.requires_grad = t.requires_grad;
            tape.leaf(leafed)
        };

        let mut standardized = Tensor::new(
            image.shape().to_vec(),
            image
                .data()
                .iter()
                .map(|&v| (v - INPUT_CENTER) * INPUT_GAIN)
                .collect(),
        )?;
        standardized.requires_grad = image.requires_grad;
        let mut param_ids = Vec::with_capacity(10);
        let mut x = tape.leaf(standardized);
        for layer in 0..3 {
            let w = bind(tape, &self.conv_w[layer]);
            let b = bind(tape, &self.conv_b[layer]);
            let c = tape.conv2d(x, w, b, CONV_STRIDES[layer], pad)?;
            x = tape.relu(c);
            param_ids.push(w);
            param_ids.push(b);
        }
        let features = x;
        let alpha = bind(tape, &self.attention.alpha);
        let beta = bind(tape, &self.attention.beta);
        param_ids.push(alpha);
        param_ids.push(beta);
        let attention = tape.two_wam(features, alpha, beta, self.attention.c())?;
        let masked = tape.channel_mask(features, attention)?;
        let pooled = tape.global_avg_pool(masked)?;
        let dropped = tape.dropout(pooled, self.spec.dropout_rate, training, rng)?;
        let hw = bind(tape, &self.head_w);
        let hb = bind(tape, &self.head_b);
        param_ids.push(hw);
        param_ids.push(hb);
        let logit = tape.dense(dropped, hw, hb)?;
        let probability = tape.sigmoid(logit);
        Ok(ForwardPass {
            features,
            attention,
            logit,
            probability,
            param_ids,
        })
    }

    /// Adds the gradients recorded on `tape` into each parameter's grad
    /// buffer (creating zeroed buffers on first use).
    pub fn accumulate_grads(&mut self, tape: &Tape, pass: &ForwardPass) -> Result<()> {
        let ids = pass.param_ids.clone();
        for (param, id) in self.params_mut().into_iter().zip(ids) {
            let node_grad = tape
                .grad(id)
                .ok_or_else(|| Error::state("accumulate_grads before backward"))?;
            let buf = param.grad.get_or_insert_with(|| vec![0.0; node_grad.len()]);
            for (b, g) in buf.iter_mut().zip(node_grad) {
                *b += g;
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for param in self.params_mut() {
            if let Some(g) = &mut param.grad {
                for v in g {
                    *v *= factor;
                }
            }
        }
    }

    /// One inference pass: positive-class probability and the Two-WAM
    /// activation map.
    pub fn analyze(&self, image: &Tensor) -> Result<(f64, ActivationMap)> {
        let mut tape = Tape::new();
        let mut rng = NoDraws;
        let pass = self.forward(&mut tape, image, false, &mut rng)?;
        let p = tape.value(pass.probability).item()?;
        let att = tape.value(pass.attention);
        let (h, w) = (att.shape()[0], att.shape()[1]);
        let map = ActivationMap::new(h, w, att.data().to_vec(), "two-wam")?;
        Ok((p, map))
    }

    pub fn predict(&self, image: &Tensor) -> Result<f64> {
        Ok(self.analyze(image)?.0)
    }

    /// Two-WAM activation map upscaled to the input size and normalized.
    pub fn saliency(&self, image: &Tensor) -> Result<SaliencyMap> {
        let (_, map) = self.analyze(image)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        to_saliency(&map, (h, w))
    }
}

impl SaliencySource for TinyCnn {
    fn features_and_score(&self, tape: &mut Tape, image: &Tensor) -> Result<(NodeId, NodeId)> {
        let mut rng = NoDraws;
        let pass = self.forward(tape, image, false, &mut rng)?;
        Ok((pass.features, pass.logit))
    }
}

/// RNG stand-in for inference paths that must not consume randomness.
struct NoDraws;

impl rand::RngCore for NoDraws {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference must not draw randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("inference must not draw randomness")
    }
    fn fill_bytes(&mut self, _dest: &mut [u8]) {
        unreachable!("inference must not draw randomness")
    }
}
