//! Versioned text checkpoints with bit-exact weights.
//!
//! Floats are stored as 16-digit hex encodings of their IEEE-754 bits, so a
//! save/load round trip reproduces every weight exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, TinyCnn};
use crate::tensor::Tensor;
use crate::two_wam::TwoWamLayer;

const MAGIC: &str = "milguided-checkpoint";
const VERSION: u32 = 1;

/// Serialized model weights plus training metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: String,
    pub tensors: Vec<(String, Tensor)>,
    /// epochs, seed, and the per-epoch loss log.
    pub epochs: usize,
    pub seed: u64,
    pub loss_log: Vec<f64>,
}

fn hex_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_hex_f64(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::validation(format!("bad hex float {s:?}")))
}

impl Checkpoint {
    pub fn from_model(model: &TinyCnn, epochs: usize, seed: u64, loss_log: Vec<f64>) -> Self {
        let mut tensors: Vec<(String, Tensor)> = model
            .params()
            .into_iter()
            .map(|(name, t)| {
                let mut clean = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid");
                clean.requires_grad = false;
                (name.to_string(), clean)
            })
            .collect();
        tensors.push((
            "two_wam_c".to_string(),
            Tensor::scalar(model.attention.c()),
        ));
        Checkpoint {
            version: VERSION,
            arch: model.spec.arch_string(),
            tensors,
            epochs,
            seed,
            loss_log,
        }
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::config(format!("checkpoint is missing tensor {name:?}")))
    }

    /// Rebuilds the model. The checkpoint's stored c and the architecture
    /// line define the network; `dropout_rate` is a training knob supplied
    /// by the caller's config.
    pub fn to_model(&self, dropout_rate: f64) -> Result<TinyCnn> {
        let spec = parse_arch(&self.arch, self.tensor("two_wam_c")?.item()?, dropout_rate)?;
        spec.validate()?;
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for i in 1..=3 {
            conv_w.push(as_param(self.tensor(&format!("conv{i}_w"))?));
            conv_b.push(as_param(self.tensor(&format!("conv{i}_b"))?));
        }
        let alpha = self.tensor("alpha")?;
        let beta = self.tensor("beta")?;
        let attention =
            TwoWamLayer::with_weights(alpha.data().to_vec(), beta.data().to_vec(), spec.two_wam_c)?;
        let model = TinyCnn {
            spec,
            conv_w,
            conv_b,
            attention,
            head_w: as_param(self.tensor("head_w")?),
            head_b: as_param(self.tensor("head_b")?),
        };
        // shape sanity against the arch line
        let ks = model.spec.kernel_size;
        let mut c_in = model.spec.in_channels;
        for (i, &c_out) in model.spec.conv_channels.iter().enumerate() {
            if model.conv_w[i].shape() != [c_out, c_in, ks, ks] {
                return Err(Error::config(format!(
                    "conv{} weights {:?} do not match architecture {}",
                    i + 1,
                    model.conv_w[i].shape(),
                    self.arch
                )));
            }
            c_in = c_out;
        }
        Ok(model)
    }

    /// Rejects checkpoints whose architecture or base c differ from the
    /// given model spec (bitwise on c).
    pub fn check_compatible(&self, spec: &ModelSpec) -> Result<()> {
        if self.arch != spec.arch_string() {
            return Err(Error::config(format!(
                "checkpoint architecture {:?} does not match configured {:?}",
                self.arch,
                spec.arch_string()
            )));
        }
        let c = self.tensor("two_wam_c")?.item()?;
        if c.to_bits() != spec.two_wam_c.to_bits() {
            return Err(Error::config(format!(
                "checkpoint two_wam_c {c} does not match configured {}",
                spec.two_wam_c
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} v{}", self.version);
        let _ = writeln!(out, "arch {}", self.arch);
        let _ = writeln!(out, "meta epochs {}", self.epochs);
        let _ = writeln!(out, "meta seed {}", self.seed);
        let losses: Vec<String> = self.loss_log.iter().map(|&v| hex_f64(v)).collect();
        let _ = writeln!(out, "meta loss_log {}", losses.join(" "));
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
            let vals: Vec<String> = t.data().iter().map(|&v| hex_f64(v)).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        out.push_str("end\n");
        out
    }

    pub fn decode(text: &str) -> Result<Checkpoint> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::validation("empty checkpoint"))?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|rest| rest.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::config(format!("not a checkpoint: {header:?}")))?;
        if version != VERSION {
            return Err(Error::config(format!(
                "checkpoint version {version} not supported (expected {VERSION})"
            )));
        }
        let mut arch = None;
        let mut epochs = 0usize;
        let mut seed = 0u64;
        let mut loss_log = Vec::new();
        let mut tensors = Vec::new();
        let mut saw_end = false;
        while let Some(line) = lines.next() {
            if line == "end" {
                saw_end = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("arch ") {
                arch = Some(rest.to_string());
            } else if let Some(rest) = line.strip_prefix("meta ") {
                let (key, value) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::validation(format!("bad meta line {line:?}")))?;
                match key {
                    "epochs" => {
                        epochs = value
                            .parse()
                            .map_err(|_| Error::validation("bad epochs value"))?
                    }
                    "seed" => {
                        seed = value.parse().map_err(|_| Error::validation("bad seed value"))?
                    }
                    "loss_log" => {
                        loss_log = value
                            .split_whitespace()
                            .map(parse_hex_f64)
                            .collect::<Result<_>>()?
                    }
                    other => {
                        return Err(Error::validation(format!("unknown meta key {other:?}")))
                    }
                }
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| Error::validation("tensor line without a name"))?
                    .to_string();
                let shape: Vec<usize> = parts
                    .map(|p| p.parse().map_err(|_| Error::validation("bad tensor dim")))
                    .collect::<Result<_>>()?;
                let data_line = lines
                    .next()
                    .ok_or_else(|| Error::validation(format!("tensor {name} missing data")))?;
                let data: Vec<f64> = data_line
                    .split_whitespace()
                    .map(parse_hex_f64)
                    .collect::<Result<_>>()?;
                tensors.push((name, Tensor::new(shape, data)?));
            } else {
                return Err(Error::validation(format!("unexpected checkpoint line {line:?}")));
            }
        }
        if !saw_end {
            return Err(Error::validation("checkpoint truncated: missing end marker"));
        }
        Ok(Checkpoint {
            version,
            arch: arch.ok_or_else(|| Error::config("checkpoint missing arch line"))?,
            tensors,
            epochs,
            seed,
            loss_log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&std::fs::read_to_string(path)?)
    }
}

fn as_param(t: &Tensor) -> Tensor {
    let mut p = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid");
    p.requires_grad = true;
    p
}

fn parse_arch(arch: &str, c: f64, dropout_rate: f64) -> Result<ModelSpec> {
    let mut in_channels = None;
    let mut conv = None;
    let mut kernel = None;
    let mut parts = arch.split_whitespace();
    if parts.next() != Some("tinycnn") {
        return Err(Error::config(format!("unknown architecture {arch:?}")));
    }
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::config(format!("bad arch field {part:?}")))?;
        match key {
            "in" => in_channels = value.parse::<usize>().ok(),
            "conv" => {
                let v: Vec<usize> = value
                    .split(',')
                    .map(|p| p.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::config("bad conv channels in arch"))?;
                let [a, b, c] = v[..] else {
                    return Err(Error::config("arch needs three conv channel counts"));
                };
                conv = Some([a, b, c]);
            }
            "kernel" => kernel = value.parse::<usize>().ok(),
            "strides" => {} // fixed by the architecture
            other => return Err(Error::config(format!("unknown arch field {other:?}"))),
        }
    }
    Ok(ModelSpec {
        in_channels: in_channels.ok_or_else(|| Error::config("arch missing in="))?,
        conv_channels: conv.ok_or_else(|| Error::config("arch missing conv="))?,
        kernel_size: kernel.ok_or_else(|| Error::config("arch missing kernel="))?,
        two_wam_c: c,
        dropout_rate,
    })
}
