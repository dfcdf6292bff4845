use super::bank::PromptBank;
use super::config::Variant;
use crate::autodiff::{Tape, Var};
use crate::encoder::Linear;
use crate::error::{Error, Result};

/// `g = tanh(τ)`.
pub fn gate_value(tape: &mut Tape, tau: Var) -> Var {
    tape.tanh(tau)
}

/// `r = sigmoid(w·[ĩ ∥ t̃] + b)`, returned as a `[1, 1]` tensor.
pub fn modality_weight(tape: &mut Tape, weight_mod: &Linear<Var>, image: Var, text: Var) -> Result<Var> {
    let x = tape.concat_last_axis(&[image, text])?;
    let w = tape.value(weight_mod.weight).dims2();
    if tape.value(x).dims2() != (1, w.0) || w.1 != 1 {
        return Err(Error::shape(
            "modality_weight",
            tape.shape(x),
            tape.shape(weight_mod.weight),
        ));
    }
    let z = weight_mod.forward(tape, x)?;
    Ok(tape.sigmoid(z))
}

/// Elementwise scaling of carried prompt rows by learnable sharing tokens.
pub fn share_prompts(tape: &mut Tape, carried: Var, share: Var) -> Result<Var> {
    if tape.shape(carried) != tape.shape(share) {
        return Err(Error::shape("share_prompts", tape.shape(carried), tape.shape(share)));
    }
    tape.mul(carried, share)
}

/// Row-wise affine map from one tower's width to the other's.
pub fn project_prompts(tape: &mut Tape, map: &Linear<Var>, prompts: Var) -> Result<Var> {
    map.forward(tape, prompts)
}

fn one_minus(tape: &mut Tape, r: Var) -> Var {
    let neg = tape.mul_const(r, -1.0);
    tape.add_const(neg, 1.0)
}

fn required(v: Option<Var>, what: &str, variant: Variant) -> Result<Var> {
    v.ok_or_else(|| Error::Config(format!("{variant} bank lacks {what}")))
}

/// First-layer prompts `(Q_T0, Q_V0)`: gate, then project, then weight by
/// `r` (text) and `1 - r` (vision).
pub fn first_layer_prompts(tape: &mut Tape, bank: &PromptBank<Var>, g: Var, r: Var) -> Result<(Var, Var)> {
    let v = bank.variant;
    let r_vision = one_minus(tape, r);
    match v {
        Variant::Dmdp | Variant::NoGate | Variant::NoWeightmod => {
            let p = required(bank.text_prompts, "text prompts", v)?;
            let h = bank
                .projections
                .first()
                .ok_or_else(|| Error::Config(format!("{v} bank lacks projections")))?;
            let gated = tape.scale(p, g)?;
            let text = tape.scale(gated, r)?;
            let projected = project_prompts(tape, h, gated)?;
            let vision = tape.scale(projected, r_vision)?;
            Ok((text, vision))
        }
        Variant::Upt => {
            let p = required(bank.text_prompts, "the shared prompts", v)?;
            let gated = tape.scale(p, g)?;
            let text = tape.scale(gated, r)?;
            let vision = tape.scale(gated, r_vision)?;
            Ok((text, vision))
        }
        Variant::Ipt => {
            let pt = required(bank.text_prompts, "text prompts", v)?;
            let pv = required(bank.vision_prompts, "vision prompts", v)?;
            let gt = tape.scale(pt, g)?;
            let gv = tape.scale(pv, g)?;
            let text = tape.scale(gt, r)?;
            let vision = tape.scale(gv, r_vision)?;
            Ok((text, vision))
        }
        Variant::VToT => {
            let p = required(bank.vision_prompts, "vision prompts", v)?;
            let h = bank
                .projections
                .first()
                .ok_or_else(|| Error::Config(format!("{v} bank lacks projections")))?;
            let gated = tape.scale(p, g)?;
            let vision = tape.scale(gated, r_vision)?;
            let projected = project_prompts(tape, h, gated)?;
            let text = tape.scale(projected, r)?;
            Ok((text, vision))
        }
    }
}
