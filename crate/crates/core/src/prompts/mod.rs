//! Gated, modality-weighted deep prompts on top of the frozen dual encoder,
//! plus the ablation variants.

mod bank;
mod config;
mod forward;
mod ops;

pub use bank::{PromptBank, PROMPT_STD};
pub use config::{PromptConfig, Variant};
pub use forward::{
    batch_logits, batch_loss, dmdp_forward, infer, prepare_samples, Diagnostics, ForwardOutput, PreparedSample,
};
pub use ops::{first_layer_prompts, gate_value, modality_weight, project_prompts, share_prompts};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape, Tensor, Var};
    use crate::encoder::{DualEncoderParams, EncoderConfig, FrozenBackbone, Linear, TokenSeq};
    use crate::error::Error;
    use crate::init;

    fn enc(text_width: usize, vision_width: usize, layers: usize) -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            vocab_size: 12,
            max_text_len: 6,
            vision_width,
            text_width,
            embed_dim: 8,
            layers,
            heads: 2,
            mlp_ratio: 2,
            pos_reserve: 4,
        }
    }

    fn prompt_cfg(variant: Variant, depth: usize) -> PromptConfig {
        PromptConfig {
            length: 2,
            depth,
            variant,
            gate_prior_init: 0.5,
        }
    }

    fn backbone(cfg: &EncoderConfig) -> FrozenBackbone {
        FrozenBackbone::freeze(DualEncoderParams::init(cfg, 3).unwrap(), cfg.clone()).unwrap()
    }

    fn sample(bb: &FrozenBackbone, seed: u64, ids: &[usize], label: usize) -> PreparedSample {
        let pixels = init::uniform(&mut init::rng(seed), &[64], 1.0).into_data();
        let mut padded = ids.to_vec();
        let eos = padded.len() - 1;
        padded.resize(bb.config().max_text_len, 0);
        let tokens = TokenSeq {
            ids: padded,
            eos_index: eos,
        };
        PreparedSample::new(bb, &format!("s{seed}"), pixels, tokens, label).unwrap()
    }

    fn logits(bb: &FrozenBackbone, bank: &PromptBank, cfg: &PromptConfig, s: &PreparedSample) -> [f64; 2] {
        infer(bb, bank, cfg, s).unwrap().logits
    }

    #[test]
    fn gate_values() {
        let mut tape = Tape::new();
        for (tau, want, tol) in [(0.0, 0.0, 0.0), (0.5, 0.462117, 1e-6), (10.0, 1.0, 1e-8)] {
            let t = tape.param(Tensor::scalar(tau));
            let g = gate_value(&mut tape, t);
            assert!((tape.value(g).item() - want).abs() <= tol, "tau {tau}");
        }
    }

    #[test]
    fn modality_weight_values() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::row(vec![0.3, -0.2]));
        let t = tape.constant(Tensor::row(vec![1.0, 0.5]));
        let zero = Linear {
            weight: tape.constant(Tensor::zeros(&[4, 1])),
            bias: Some(tape.constant(Tensor::zeros(&[1]))),
        };
        let r = modality_weight(&mut tape, &zero, i, t).unwrap();
        assert_eq!(tape.value(r).item(), 0.5);
        // w·x = 0, bias 2
        let two = Linear {
            weight: tape.constant(Tensor::zeros(&[4, 1])),
            bias: Some(tape.constant(Tensor::scalar(2.0))),
        };
        let r = modality_weight(&mut tape, &two, i, t).unwrap();
        assert!((tape.value(r).item() - 0.880797).abs() < 1e-6);
        let bad = Linear {
            weight: tape.constant(Tensor::zeros(&[3, 1])),
            bias: None,
        };
        assert!(matches!(
            modality_weight(&mut tape, &bad, i, t),
            Err(Error::Shape { .. })
        ));
    }

    fn bank_vars(tape: &mut Tape, bank: &PromptBank) -> PromptBank<Var> {
        bank.register(tape)
    }

    #[test]
    fn zero_gate_first_layer_is_bias_only() {
        let e = enc(8, 16, 2);
        let cfg = prompt_cfg(Variant::Dmdp, 2);
        let bank = PromptBank::init(&cfg, &e, 1).unwrap();
        let mut tape = Tape::new();
        let b = bank_vars(&mut tape, &bank);
        let g = tape.constant(Tensor::scalar(0.0));
        let r = tape.constant(Tensor::scalar(0.3));
        let (qt, qv) = first_layer_prompts(&mut tape, &b, g, r).unwrap();
        assert!(tape.value(qt).data().iter().all(|&x| x == 0.0));
        let bias = bank.projections[0].bias.as_ref().unwrap().data();
        let qv = tape.value(qv);
        for row in 0..2 {
            for (j, &bj) in bias.iter().enumerate() {
                assert!((qv.at(row, j) - 0.7 * bj).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn symmetric_weighting_with_identity_projection() {
        let e = enc(16, 16, 2);
        let cfg = prompt_cfg(Variant::Dmdp, 1);
        let mut bank = PromptBank::init(&cfg, &e, 2).unwrap();
        bank.projections[0] = Linear::identity(16, false);
        let mut tape = Tape::new();
        let b = bank_vars(&mut tape, &bank);
        let g = tape.constant(Tensor::scalar(1.0));
        let r = tape.constant(Tensor::scalar(0.5));
        let (qt, qv) = first_layer_prompts(&mut tape, &b, g, r).unwrap();
        assert_eq!(tape.value(qt), tape.value(qv));
    }

    #[test]
    fn first_layer_matches_scalar_oracle() {
        let e = enc(8, 16, 2);
        let cfg = prompt_cfg(Variant::Dmdp, 2);
        let bank = PromptBank::init(&cfg, &e, 9).unwrap();
        let (g, r) = (0.37, 0.81);
        let mut tape = Tape::new();
        let b = bank_vars(&mut tape, &bank);
        let gv = tape.constant(Tensor::scalar(g));
        let rv = tape.constant(Tensor::scalar(r));
        let (qt, qv) = first_layer_prompts(&mut tape, &b, gv, rv).unwrap();
        let p = bank.text_prompts.as_ref().unwrap();
        let h = &bank.projections[0];
        let (w, bias) = (&h.weight, h.bias.as_ref().unwrap());
        for i in 0..2 {
            for j in 0..8 {
                let want = r * (g * p.at(i, j));
                assert!((tape.value(qt).at(i, j) - want).abs() < 1e-15);
            }
            for k in 0..16 {
                let mut acc = 0.0;
                for j in 0..8 {
                    acc += g * p.at(i, j) * w.at(j, k);
                }
                let want = (1.0 - r) * (acc + bias.data()[k]);
                assert!((tape.value(qv).at(i, k) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn share_and_project_identities() {
        let mut tape = Tape::new();
        let mut rng = init::rng(4);
        let x = tape.constant(init::normal(&mut rng, &[2, 3], 1.0));
        let ones = tape.constant(Tensor::ones(&[2, 3]));
        let zeros = tape.constant(Tensor::zeros(&[2, 3]));
        let y = share_prompts(&mut tape, x, ones).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let z = share_prompts(&mut tape, x, zeros).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::ones(&[3, 2]));
        assert!(share_prompts(&mut tape, x, bad).is_err());

        let id = Linear {
            weight: tape.constant(Tensor::identity(3)),
            bias: Some(tape.constant(Tensor::zeros(&[3]))),
        };
        let p = project_prompts(&mut tape, &id, x).unwrap();
        assert_eq!(tape.value(p), tape.value(x));
        let biased = Linear {
            weight: tape.constant(init::normal(&mut rng, &[3, 4], 1.0)),
            bias: Some(tape.constant(Tensor::row(vec![1.0, 2.0, 3.0, 4.0]))),
        };
        let p = project_prompts(&mut tape, &biased, zeros).unwrap();
        for r in 0..2 {
            assert_eq!(tape.value(p).row_slice(r), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn forward_shapes() {
        let e = EncoderConfig {
            layers: 4,
            ..enc(8, 16, 4)
        };
        let bb = backbone(&e);
        let cfg = prompt_cfg(Variant::Dmdp, 3);
        let bank = PromptBank::init(&cfg, &e, 5).unwrap();
        let s = sample(&bb, 1, &[3, 4, 5, 2], 1);
        let mut tape = Tape::new();
        let params = bb.register(&mut tape);
        let b = bank.register(&mut tape);
        let out = dmdp_forward(&mut tape, &params, &e, &b, &cfg, &s).unwrap();
        assert_eq!(out.text.seq_len, 8);
        assert_eq!(out.image.seq_len, 7);
        assert_eq!(tape.value(out.logits).dims2(), (1, 2));
    }

    #[test]
    fn every_variant_runs_and_reports_fixed_values() {
        let e = enc(16, 16, 2);
        let bb = backbone(&e);
        let s = sample(&bb, 2, &[3, 6, 2], 0);
        for v in Variant::ALL {
            let cfg = prompt_cfg(v, 2);
            let bank = PromptBank::init(&cfg, &e, 6).unwrap();
            let d = infer(&bb, &bank, &cfg, &s).unwrap();
            assert!(d.logits.iter().all(|x| x.is_finite()), "{v}");
            match v {
                Variant::NoGate => assert_eq!(d.g, 1.0),
                Variant::NoWeightmod => assert_eq!(d.r, 0.5),
                _ => assert!(d.r > 0.0 && d.r < 1.0 && d.r != 0.5),
            }
        }
    }

    #[test]
    fn config_errors() {
        let e = enc(8, 16, 2);
        assert!(matches!(
            PromptBank::init(&prompt_cfg(Variant::Upt, 2), &e, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PromptBank::init(&prompt_cfg(Variant::Dmdp, 3), &e, 0),
            Err(Error::Depth { depth: 3, layers: 2 })
        ));
        let bb = backbone(&e);
        let s = sample(&bb, 3, &[3, 2], 0);
        let cfg = prompt_cfg(Variant::Dmdp, 2);
        let bank = PromptBank::init(&cfg, &e, 0).unwrap();
        let other = prompt_cfg(Variant::Ipt, 2);
        assert!(matches!(infer(&bb, &bank, &other, &s), Err(Error::Config(_))));
        let deep = prompt_cfg(Variant::Dmdp, 3);
        assert!(matches!(infer(&bb, &bank, &deep, &s), Err(Error::Depth { .. })));
    }

    #[test]
    fn zero_gate_makes_text_prompts_irrelevant() {
        let e = enc(8, 16, 2);
        let bb = backbone(&e);
        let cfg = PromptConfig {
            gate_prior_init: 0.0,
            ..prompt_cfg(Variant::Dmdp, 2)
        };
        let s = [sample(&bb, 4, &[3, 4, 2], 1), sample(&bb, 5, &[5, 2], 0)];
        let base = PromptBank::init(&cfg, &e, 7).unwrap();
        let reference: Vec<_> = s.iter().map(|x| logits(&bb, &base, &cfg, x)).collect();
        for seed in 0..3 {
            let mut other = base.clone();
            other.text_prompts = Some(init::normal(&mut init::rng(100 + seed), &[2, 8], 1.0));
            let got: Vec<_> = s.iter().map(|x| logits(&bb, &other, &cfg, x)).collect();
            assert_eq!(got, reference);
        }

        let mut tape = Tape::new();
        let params = bb.register(&mut tape);
        let b = base.register(&mut tape);
        let refs: Vec<&PreparedSample> = s.iter().collect();
        let loss = batch_loss(&mut tape, &params, &e, &b, &cfg, &refs).unwrap();
        tape.backward(loss).unwrap();
        let gp = tape.grad(b.text_prompts.unwrap()).unwrap();
        assert!(gp.data().iter().all(|&x| x == 0.0));
        let gt = tape.grad(b.gate_prior.unwrap()).unwrap();
        assert!(gt.item() != 0.0);
    }

    #[test]
    fn ipt_matches_dmdp_when_vision_prompts_are_the_projection() {
        let e = enc(8, 16, 2);
        let bb = backbone(&e);
        let dcfg = prompt_cfg(Variant::Dmdp, 1);
        let icfg = prompt_cfg(Variant::Ipt, 1);
        let mut dmdp = PromptBank::init(&dcfg, &e, 8).unwrap();
        dmdp.projections[0].bias = Some(Tensor::zeros(&[16]));
        let mut ipt = PromptBank::init(&icfg, &e, 8).unwrap();
        ipt.text_prompts = dmdp.text_prompts.clone();
        ipt.gate_prior = dmdp.gate_prior.clone();
        ipt.weight_mod = dmdp.weight_mod.clone();
        ipt.classifier = dmdp.classifier.clone();
        let p = dmdp.text_prompts.as_ref().unwrap();
        let w = &dmdp.projections[0].weight;
        ipt.vision_prompts = Some(Tensor::from_fn(&[2, 16], |idx| {
            let (i, k) = (idx / 16, idx % 16);
            (0..8).map(|j| p.at(i, j) * w.at(j, k)).sum()
        }));
        for seed in 0..3 {
            let s = sample(&bb, 10 + seed, &[3, 7, 2], 1);
            let a = logits(&bb, &dmdp, &dcfg, &s);
            let b = logits(&bb, &ipt, &icfg, &s);
            for k in 0..2 {
                assert!((a[k] - b[k]).abs() < 1e-12, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn modality_weight_couples_text_branch_to_image() {
        let e = enc(8, 16, 2);
        let bb = backbone(&e);
        let cfg = prompt_cfg(Variant::Dmdp, 2);
        let bank = PromptBank::init(&cfg, &e, 12).unwrap();
        assert!(bank
            .weight_mod
            .as_ref()
            .unwrap()
            .weight
            .data()
            .iter()
            .any(|&w| w != 0.0));
        let a = sample(&bb, 20, &[3, 4, 2], 0);
        let b = sample(&bb, 21, &[3, 4, 2], 0);
        assert_eq!(a.tokens, b.tokens);
        let da = infer(&bb, &bank, &cfg, &a).unwrap();
        let db = infer(&bb, &bank, &cfg, &b).unwrap();
        assert_ne!(da.r, db.r);
        assert_ne!(da.text_embedding, db.text_embedding);
    }

    #[test]
    fn classifier_scaling_scales_logits() {
        let e = enc(8, 16, 2);
        let bb = backbone(&e);
        let cfg = prompt_cfg(Variant::Dmdp, 2);
        let mut bank = PromptBank::init(&cfg, &e, 13).unwrap();
        bank.classifier.bias = Some(Tensor::zeros(&[2]));
        let s = sample(&bb, 30, &[5, 6, 2], 1);
        let base = logits(&bb, &bank, &cfg, &s);
        let lambda = 3.5;
        bank.classifier.weight = bank.classifier.weight.map(|w| w * lambda);
        let scaled = logits(&bb, &bank, &cfg, &s);
        for k in 0..2 {
            assert!((scaled[k] - lambda * base[k]).abs() < 1e-12);
        }
        let argmax = |l: [f64; 2]| usize::from(l[1] > l[0]);
        assert_eq!(argmax(base), argmax(scaled));
    }

    #[test]
    fn every_leaf_gets_a_finite_nonzero_gradient() {
        let e = enc(8, 16, 2);
        let bb = backbone(&e);
        let cfg = prompt_cfg(Variant::Dmdp, 2);
        let bank = PromptBank::init(&cfg, &e, 14).unwrap();
        let s = [sample(&bb, 40, &[3, 4, 2], 1), sample(&bb, 41, &[6, 7, 8, 2], 0)];
        let refs: Vec<&PreparedSample> = s.iter().collect();
        let mut tape = Tape::new();
        let params = bb.register(&mut tape);
        let b = bank.register(&mut tape);
        let loss = batch_loss(&mut tape, &params, &e, &b, &cfg, &refs).unwrap();
        tape.backward(loss).unwrap();
        b.visit(&mut |name, v| {
            let g = tape.grad(*v).unwrap();
            assert!(g.is_finite(), "{name}");
            assert!(g.data().iter().any(|&x| x != 0.0), "{name} has a zero gradient");
        });
        bb.ensure_no_grads(&tape, &params).unwrap();
    }

    #[test]
    fn gradients_match_finite_differences_for_every_variant() {
        let e = enc(16, 16, 2);
        let bb = backbone(&e);
        let s = [sample(&bb, 50, &[3, 4, 2], 1), sample(&bb, 51, &[5, 2], 0)];
        for v in Variant::ALL {
            let cfg = prompt_cfg(v, 2);
            let bank = PromptBank::init(&cfg, &e, 15).unwrap();
            let leaves: Vec<Tensor> = bank.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
            let report = grad_check(
                |tape, vars| {
                    let mut it = vars.iter();
                    let b = bank.map(&mut |_, _| *it.next().unwrap());
                    let params = bb.register(tape);
                    let refs: Vec<&PreparedSample> = s.iter().collect();
                    batch_loss(tape, &params, &e, &b, &cfg, &refs)
                },
                &leaves,
                1e-5,
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "{v}: max rel err {}", report.max_rel_error());
        }
    }

    #[test]
    fn bank_named_round_trip() {
        let e = enc(8, 16, 2);
        for v in [Variant::Dmdp, Variant::Ipt, Variant::VToT, Variant::NoGate] {
            let cfg = prompt_cfg(v, 2);
            let bank = PromptBank::init(&cfg, &e, 16).unwrap();
            let named = bank.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
            let back = PromptBank::from_named(&bank, named).unwrap();
            assert_eq!(back, bank);
            bank.check(&cfg, &e).unwrap();
        }
    }
}
