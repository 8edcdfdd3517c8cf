//! Plain-text checkpoints: one header line per layer followed by its
//! parameter vectors, reals at 17 significant digits.
//!
//! ```text
//! mlp layers 2 input 3
//! layer in 3 out 8 activation relu dropout 0.0000000000000000e0 batchnorm 0
//! weights <24 reals>
//! bias <8 reals>
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::{Activation, BatchNorm, Dense, Mlp, Mode};
use crate::error::{Error, Result};
use crate::io::{format_real, write_atomic};

impl Mlp {
    pub fn to_checkpoint_string(&self) -> String {
        let mut s = format!("mlp layers {} input {}\n", self.layers.len(), self.input_width);
        for l in &self.layers {
            let act = match l.activation {
                Activation::Relu => "relu",
                Activation::Identity => "identity",
            };
            let _ = writeln!(
                s,
                "layer in {} out {} activation {act} dropout {} batchnorm {}",
                l.inputs,
                l.outputs,
                format_real(l.dropout),
                u8::from(l.batchnorm.is_some())
            );
            vector_line(&mut s, "weights", &l.weights);
            vector_line(&mut s, "bias", &l.bias);
            if let Some(bn) = &l.batchnorm {
                vector_line(&mut s, "bn_gamma", &bn.gamma);
                vector_line(&mut s, "bn_beta", &bn.beta);
                vector_line(&mut s, "bn_mean", &bn.running_mean);
                vector_line(&mut s, "bn_var", &bn.running_var);
            }
        }
        s
    }

    /// Parse a checkpoint; the network comes back in eval mode.
    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let bad = |m: String| Error::parse("<checkpoint>", m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty checkpoint".into()))?
            .split_whitespace()
            .collect();
        let (n_layers, input) = match header.as_slice() {
            ["mlp", "layers", n, "input", d] => (
                n.parse::<usize>().map_err(|e| bad(format!("layer count: {e}")))?,
                d.parse::<usize>().map_err(|e| bad(format!("input width: {e}")))?,
            ),
            _ => return Err(bad("expected `mlp layers <n> input <d>`".into())),
        };
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let h: Vec<&str> = lines
                .next()
                .ok_or_else(|| bad(format!("missing layer {k}")))?
                .split_whitespace()
                .collect();
            let ["layer", "in", i, "out", o, "activation", act, "dropout", p, "batchnorm", bn] = h.as_slice()
            else {
                return Err(bad(format!("malformed header for layer {k}")));
            };
            let inputs: usize = i.parse().map_err(|e| bad(format!("layer {k} in: {e}")))?;
            let outputs: usize = o.parse().map_err(|e| bad(format!("layer {k} out: {e}")))?;
            let activation = match *act {
                "relu" => Activation::Relu,
                "identity" => Activation::Identity,
                other => return Err(bad(format!("unknown activation {other:?}"))),
            };
            let dropout: f64 = p.parse().map_err(|e| bad(format!("layer {k} dropout: {e}")))?;
            let has_bn = match *bn {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("batchnorm flag must be 0 or 1, got {other:?}"))),
            };
            let mut next = |name: &str, len: usize| -> Result<Vec<f64>> {
                let line = lines.next().ok_or_else(|| bad(format!("layer {k}: missing {name}")))?;
                let mut parts = line.split_whitespace();
                if parts.next() != Some(name) {
                    return Err(bad(format!("layer {k}: expected {name}")));
                }
                let v = parts
                    .map(|t| t.parse::<f64>().map_err(|e| bad(format!("layer {k} {name}: {e}"))))
                    .collect::<Result<Vec<f64>>>()?;
                if v.len() != len {
                    return Err(bad(format!("layer {k} {name}: {} values, expected {len}", v.len())));
                }
                Ok(v)
            };
            let weights = next("weights", inputs * outputs)?;
            let bias = next("bias", outputs)?;
            let batchnorm = if has_bn {
                Some(BatchNorm {
                    gamma: next("bn_gamma", outputs)?,
                    beta: next("bn_beta", outputs)?,
                    running_mean: next("bn_mean", outputs)?,
                    running_var: next("bn_var", outputs)?,
                })
            } else {
                None
            };
            layers.push(Dense {
                inputs,
                outputs,
                weights,
                bias,
                activation,
                batchnorm,
                dropout,
            });
        }
        if lines.next().is_some() {
            return Err(bad("trailing content after the last layer".into()));
        }
        let mut net = if layers.is_empty() {
            Mlp::identity(input)
        } else {
            Mlp::from_layers(layers)?
        };
        if net.input_width != input {
            return Err(bad("input width disagrees with the first layer".into()));
        }
        net.mode = Mode::Eval;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_checkpoint_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint_str(&text).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::parse(path, msg),
            other => other,
        })
    }
}

fn vector_line(s: &mut String, name: &str, v: &[f64]) {
    s.push_str(name);
    for x in v {
        s.push(' ');
        s.push_str(&format_real(*x));
    }
    s.push('\n');
}
