//! Estimator output and its flat `key = value` serialization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{format_real, write_atomic};
use crate::linalg::mean;

/// Estimated peer effect plus per-node derivatives and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    /// Row label, e.g. `DIG2RSI`, `2SLS`.
    pub estimator: String,
    pub pe_hat: f64,
    pub per_node_pe: Vec<f64>,
    pub abs_bias: Option<f64>,
    /// Percent; absent when the true effect is zero.
    pub rel_bias: Option<f64>,
    pub diagnostics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    pub config: BTreeMap<String, String>,
}

impl EstimationResult {
    /// `pe_hat` is the sample mean of `per_node_pe`; biases filled when
    /// `truth` is known.
    pub fn from_per_node(estimator: &str, per_node_pe: Vec<f64>, truth: Option<f64>) -> Self {
        let pe_hat = mean(&per_node_pe);
        let (abs_bias, rel_bias) = bias_metrics(pe_hat, truth);
        Self {
            estimator: estimator.to_string(),
            pe_hat,
            per_node_pe,
            abs_bias,
            rel_bias,
            diagnostics: BTreeMap::new(),
            warnings: Vec::new(),
            config: BTreeMap::new(),
        }
    }

    /// A constant-effect estimate replicated over `n` nodes.
    pub fn constant(estimator: &str, coef: f64, n: usize, truth: Option<f64>) -> Self {
        Self::from_per_node(estimator, vec![coef; n.max(1)], truth)
    }

    pub fn with_diagnostic(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "estimator = {}", quote(&self.estimator));
        let _ = writeln!(s, "pe_hat = {}", format_real(self.pe_hat));
        if let Some(a) = self.abs_bias {
            let _ = writeln!(s, "abs_bias = {}", format_real(a));
        }
        if let Some(r) = self.rel_bias {
            let _ = writeln!(s, "rel_bias = {}", format_real(r));
        }
        let _ = writeln!(s, "n_nodes = {}", self.per_node_pe.len());
        for (k, v) in &self.diagnostics {
            let _ = writeln!(s, "diag.{k} = {}", format_real(*v));
        }
        for (i, w) in self.warnings.iter().enumerate() {
            let _ = writeln!(s, "warning.{i} = {}", quote(w));
        }
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k} = {}", quote(v));
        }
        s
    }

    /// Parse the scalar part written by [`to_kv_string`](Self::to_kv_string).
    /// Per-node values are not part of that text; `per_node_pe` comes back
    /// empty.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let bad = |m: String| Error::parse("<result>", m);
        let mut out = EstimationResult {
            estimator: String::new(),
            pe_hat: f64::NAN,
            per_node_pe: Vec::new(),
            abs_bias: None,
            rel_bias: None,
            diagnostics: BTreeMap::new(),
            warnings: Vec::new(),
            config: BTreeMap::new(),
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            let real = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{k}: {e}")));
            let string = |v: &str| -> Result<String> {
                serde_json::from_str::<String>(v).map_err(|e| bad(format!("{k}: {e}")))
            };
            match k {
                "estimator" => out.estimator = string(v)?,
                "pe_hat" => out.pe_hat = real(v)?,
                "abs_bias" => out.abs_bias = Some(real(v)?),
                "rel_bias" => out.rel_bias = Some(real(v)?),
                "n_nodes" => {}
                _ => {
                    if let Some(d) = k.strip_prefix("diag.") {
                        out.diagnostics.insert(d.to_string(), real(v)?);
                    } else if k.starts_with("warning.") {
                        out.warnings.push(string(v)?);
                    } else if let Some(c) = k.strip_prefix("config.") {
                        out.config.insert(c.to_string(), string(v)?);
                    } else {
                        return Err(bad(format!("unknown key {k:?}")));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Per-node derivatives as `node,pe` CSV.
    pub fn per_node_csv(&self) -> String {
        let mut s = String::from("node,pe\n");
        for (i, v) in self.per_node_pe.iter().enumerate() {
            let _ = writeln!(s, "{i},{}", format_real(*v));
        }
        s
    }

    pub fn write(&self, path: &Path, per_node_path: Option<&Path>) -> Result<()> {
        write_atomic(path, self.to_kv_string().as_bytes())?;
        if let Some(p) = per_node_path {
            write_atomic(p, self.per_node_csv().as_bytes())?;
        }
        Ok(())
    }
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

/// `(|β̂ − β|, 100·|β̂ − β| / |β|)`; relative bias is undefined at `β = 0`.
pub fn bias_metrics(pe_hat: f64, truth: Option<f64>) -> (Option<f64>, Option<f64>) {
    match truth {
        None => (None, None),
        Some(beta) => {
            let abs = (pe_hat - beta).abs();
            let rel = (beta != 0.0).then(|| 100.0 * abs / beta.abs());
            (Some(abs), rel)
        }
    }
}
