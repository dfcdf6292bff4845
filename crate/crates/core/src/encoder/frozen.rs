use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::params::{DualEncoderParams, EncoderConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// SHA-256 over every backbone tensor: name, shape and the exact bits of each value.
pub fn fingerprint(params: &DualEncoderParams) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.named_tensors() {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Read-only backbone. It only ever enters a tape as constants.
#[derive(Clone, Debug)]
pub struct FrozenBackbone {
    params: Arc<DualEncoderParams>,
    config: EncoderConfig,
    fingerprint: String,
}

impl FrozenBackbone {
    pub fn freeze(params: DualEncoderParams, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        let fingerprint = fingerprint(&params);
        Ok(FrozenBackbone {
            params: Arc::new(params),
            config,
            fingerprint,
        })
    }

    pub fn params(&self) -> &DualEncoderParams {
        &self.params
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Digest recomputed from the current values.
    pub fn recompute_fingerprint(&self) -> String {
        fingerprint(&self.params)
    }

    pub fn register(&self, tape: &mut Tape) -> DualEncoderParams<Var> {
        self.params.register(tape, false)
    }

    /// Optimizer entry point for backbone tensors; always refuses.
    pub fn apply_update(&self, name: &str) -> Result<()> {
        Err(Error::FrozenParameter(name.to_string()))
    }

    /// Fails if any backbone variable on `tape` is differentiable or holds a gradient.
    pub fn ensure_no_grads(&self, tape: &Tape, vars: &DualEncoderParams<Var>) -> Result<()> {
        let mut offending = None;
        vars.visit("", &mut |name, v| {
            if offending.is_none() && (tape.requires_grad(*v) || tape.grad(*v).is_some()) {
                offending = Some(name);
            }
        });
        match offending {
            Some(name) => Err(Error::FrozenParameter(name)),
            None => Ok(()),
        }
    }
}
