//! Plain-text checkpoints: a `DMDP-CKPT v1` header, then one record per
//! tensor, `name d0,d1 : v v ...`, values in row-major order with 17
//! significant digits. Writing what was read reproduces the file exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::encoder::{DualEncoderParams, EncoderConfig};
use crate::error::{Error, Result};
use crate::prompts::{PromptBank, PromptConfig};

pub const HEADER: &str = "DMDP-CKPT v1";
/// Name prefix of prompt-bank records.
pub const BANK_PREFIX: &str = "bank.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

fn format_value(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String");
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.records.push((name.into(), t));
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        for (name, t) in &self.records {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Validation(format!("invalid checkpoint record name {name:?}")));
            }
            if !t.is_finite() {
                return Err(Error::NumericInstability(format!("`{name}` holds non-finite values")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            write!(out, "{name} {} :", dims.join(",")).expect("writing to a String");
            for &v in t.data() {
                out.push(' ');
                format_value(&mut out, v);
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header `{HEADER}`"),
                })
            }
        }
        let mut records = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let (head, values) = line
                .split_once(" :")
                .ok_or_else(|| err("missing ` :` separator".into()))?;
            let (name, dims) = head
                .split_once(' ')
                .ok_or_else(|| err("expected `name shape`".into()))?;
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|e| err(format!("bad dimension `{d}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let data = values
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| err(format!("bad value `{v}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| err(e.to_string()))?;
            if !seen.insert(name.to_string()) {
                return Err(err(format!("duplicate record `{name}`")));
            }
            records.push((name.to_string(), t));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Backbone records followed by the bank under `bank.`.
    pub fn from_model(params: &DualEncoderParams, bank: Option<&PromptBank>) -> Self {
        let mut ck = Checkpoint::default();
        for (n, t) in params.named_tensors() {
            ck.push(n, t.clone());
        }
        if let Some(bank) = bank {
            for (n, t) in bank.named_tensors() {
                ck.push(format!("{BANK_PREFIX}{n}"), t.clone());
            }
        }
        ck
    }

    fn split(&self) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
        let mut backbone = BTreeMap::new();
        let mut bank = BTreeMap::new();
        for (n, t) in &self.records {
            match n.strip_prefix(BANK_PREFIX) {
                Some(rest) => bank.insert(rest.to_string(), t.clone()),
                None => backbone.insert(n.clone(), t.clone()),
            };
        }
        (backbone, bank)
    }

    pub fn has_bank(&self) -> bool {
        self.records.iter().any(|(n, _)| n.starts_with(BANK_PREFIX))
    }

    /// Rebuilds backbone parameters for `cfg`; every tensor must be present
    /// with the expected shape.
    pub fn backbone(&self, cfg: &EncoderConfig) -> Result<DualEncoderParams> {
        let (mut found, _) = self.split();
        let reference = DualEncoderParams::init(cfg, 0)?;
        let mut problem = None;
        let params = reference.map("", &mut |name, t| match found.remove(name) {
            Some(v) if v.shape() == t.shape() => v,
            Some(v) => {
                problem.get_or_insert(format!("`{name}` has shape {:?}, expected {:?}", v.shape(), t.shape()));
                t.clone()
            }
            None => {
                problem.get_or_insert(format!("`{name}` is missing"));
                t.clone()
            }
        });
        if let Some(msg) = problem {
            return Err(Error::Validation(format!("backbone checkpoint: {msg}")));
        }
        if let Some(extra) = found.keys().next() {
            return Err(Error::Validation(format!(
                "backbone checkpoint: unexpected tensor `{extra}`"
            )));
        }
        Ok(params)
    }

    pub fn bank(&self, cfg: &PromptConfig, enc: &EncoderConfig) -> Result<PromptBank> {
        let (_, found) = self.split();
        let reference = PromptBank::init(cfg, enc, 0)?;
        PromptBank::from_named(&reference, found)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::fingerprint;
    use crate::prompts::Variant;

    #[test]
    fn text_round_trip_is_byte_exact() {
        let mut ck = Checkpoint::default();
        ck.push("a", Tensor::matrix(2, 2, vec![0.1, -0.0, 1e-300, -123456.789]).unwrap());
        ck.push("s", Tensor::scalar(std::f64::consts::PI));
        let text = ck.to_text().unwrap();
        assert!(text.starts_with("DMDP-CKPT v1\na 2,2 : 1.0000000000000001e-1 -0.0000000000000000e0 "));
        let back = Checkpoint::parse(&text).unwrap();
        assert_eq!(back.to_text().unwrap(), text);
        for ((_, x), (_, y)) in ck.records.iter().zip(&back.records) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn model_round_trip() {
        let enc = EncoderConfig::default();
        let params = DualEncoderParams::init(&enc, 4).unwrap();
        let cfg = PromptConfig {
            variant: Variant::VToT,
            ..PromptConfig::default().capped(enc.layers)
        };
        let bank = PromptBank::init(&cfg, &enc, 9).unwrap();
        let ck = Checkpoint::from_model(&params, Some(&bank));
        assert!(ck.has_bank());
        let back = Checkpoint::parse(&ck.to_text().unwrap()).unwrap();
        assert_eq!(fingerprint(&back.backbone(&enc).unwrap()), fingerprint(&params));
        assert_eq!(back.bank(&cfg, &enc).unwrap().named_tensors(), bank.named_tensors());
        let other = PromptConfig {
            variant: Variant::Upt,
            ..cfg
        };
        assert!(matches!(back.bank(&other, &enc), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_files_name_the_line() {
        assert!(matches!(Checkpoint::parse("nope\n"), Err(Error::Parse { line: 1, .. })));
        let bad = "DMDP-CKPT v1\nx 1 : 1e0\ny 2 : 1e0\n";
        assert!(matches!(Checkpoint::parse(bad), Err(Error::Parse { line: 3, .. })));
        let dup = "DMDP-CKPT v1\nx 1 : 1e0\nx 1 : 1e0\n";
        assert!(matches!(Checkpoint::parse(dup), Err(Error::Parse { line: 3, .. })));
        let mut ck = Checkpoint::default();
        ck.push("n", Tensor::scalar(f64::NAN));
        assert!(ck.to_text().is_err());
    }
}
