//! CLIP-style dual encoder: a vision transformer pooled at its class token and
//! a causal text transformer pooled at `<eos>`.

mod forward;
mod frozen;
mod params;
mod pretrain;

pub use forward::{encode_image, encode_text, patchify, Encoded, FixedPrompts, PromptInjector, TokenSeq};
pub use frozen::{fingerprint, FrozenBackbone};
pub use params::{Block, DualEncoderParams, EncoderConfig, LayerNorm, Linear};
pub use pretrain::{
    concept_retrieval_at_1, contrastive_logits, contrastive_pretrain, embed_pairs, per_pair_contrastive_losses,
    symmetric_contrastive_loss, PretrainOptions, PretrainOutcome, PretrainPair, MAX_LOGIT_SCALE,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::error::Error;
    use crate::init;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            vocab_size: 12,
            max_text_len: 6,
            vision_width: 16,
            text_width: 8,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            pos_reserve: 4,
        }
    }

    fn pixels(seed: u64) -> Vec<f64> {
        init::uniform(&mut init::rng(seed), &[64], 1.0).into_data()
    }

    fn tokens(ids: &[usize], eos: usize) -> TokenSeq {
        TokenSeq {
            ids: ids.to_vec(),
            eos_index: eos,
        }
    }

    #[test]
    fn image_embedding_and_trace_shapes() {
        let c = cfg();
        let p = DualEncoderParams::init(&c, 1).unwrap();
        let mut tape = Tape::new();
        let v = p.register(&mut tape, false);
        let out = encode_image(&mut tape, &v, &c, &pixels(3), None).unwrap();
        assert_eq!(tape.value(out.embedding).dims2(), (1, 8));
        assert_eq!(tape.value(out.layer_trace[1]).dims2(), (5, 16));

        let rows = tape.constant(Tensor::zeros(&[2, 16]));
        let mut plan = FixedPrompts {
            rows: vec![rows],
            len: 2,
        };
        let out = encode_image(&mut tape, &v, &c, &pixels(3), Some(&mut plan)).unwrap();
        assert_eq!(tape.value(out.layer_trace[0]).rows(), 7);
        for head in &out.last_attention {
            let a = tape.value(*head);
            for r in 0..a.rows() {
                let s: f64 = a.row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_image_size_and_excess_depth_are_rejected() {
        let c = cfg();
        let p = DualEncoderParams::init(&c, 1).unwrap();
        let mut tape = Tape::new();
        let v = p.register(&mut tape, false);
        assert!(matches!(
            encode_image(&mut tape, &v, &c, &[0.0; 10], None),
            Err(Error::Contract(_))
        ));
        let rows = tape.constant(Tensor::zeros(&[2, 16]));
        let mut plan = FixedPrompts {
            rows: vec![rows; 3],
            len: 2,
        };
        assert!(matches!(
            encode_image(&mut tape, &v, &c, &pixels(0), Some(&mut plan)),
            Err(Error::Depth { depth: 3, layers: 2 })
        ));
    }

    #[test]
    fn permuting_patches_with_positions_keeps_embedding() {
        let c = cfg();
        let p = DualEncoderParams::init(&c, 5).unwrap();
        let px = pixels(9);
        let mut tape = Tape::new();
        let v = p.register(&mut tape, false);
        let base = encode_image(&mut tape, &v, &c, &px, None).unwrap().embedding;
        let base = tape.value(base).clone();

        // swap patches 0 and 3 (top-left and bottom-right) and the matching position rows
        let mut swapped = px.clone();
        for y in 0..4 {
            for x in 0..4 {
                swapped.swap(y * 8 + x, (y + 4) * 8 + x + 4);
            }
        }
        let mut q = p.clone();
        let w = c.vision_width;
        let pos = q.vision_pos.data_mut();
        for k in 0..w {
            pos.swap(w + k, 4 * w + k);
        }
        let mut tape = Tape::new();
        let v = q.register(&mut tape, false);
        let out = encode_image(&mut tape, &v, &c, &swapped, None).unwrap().embedding;
        assert!(tape.value(out).max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn causal_mask_hides_later_words() {
        let c = cfg();
        let p = DualEncoderParams::init(&c, 2).unwrap();
        let mut tape = Tape::new();
        let v = p.register(&mut tape, false);
        let a = encode_text(&mut tape, &v, &c, &tokens(&[3, 4, 5, 6, 2, 0], 4), None).unwrap();
        let b = encode_text(&mut tape, &v, &c, &tokens(&[3, 4, 9, 10, 2, 0], 4), None).unwrap();
        let la = tape.value(*a.layer_trace.last().unwrap()).clone();
        let lb = tape.value(*b.layer_trace.last().unwrap()).clone();
        for k in 0..2 {
            assert_eq!(la.row_slice(k), lb.row_slice(k));
        }
        assert_ne!(la.row_slice(2), lb.row_slice(2));
    }

    #[test]
    fn pooling_reads_eos_after_prompts() {
        let c = cfg();
        let p = DualEncoderParams::init(&c, 2).unwrap();
        let mut tape = Tape::new();
        let v = p.register(&mut tape, false);
        let rows = tape.constant(init::normal(&mut init::rng(4), &[2, 8], 0.5));
        let mut plan = FixedPrompts {
            rows: vec![rows],
            len: 2,
        };
        let t = tokens(&[3, 4, 2, 0, 0, 0], 2);
        let out = encode_text(&mut tape, &v, &c, &t, Some(&mut plan)).unwrap();
        assert_eq!(out.seq_len, 8);
        let last = *out.layer_trace.last().unwrap();
        let row = tape.slice_rows(last, 2 + 2, 1).unwrap();
        let normed = tape
            .layernorm(row, v.text_ln_final.gamma, v.text_ln_final.beta)
            .unwrap();
        let manual = tape.matmul(normed, v.proj_text).unwrap();
        assert_eq!(tape.value(manual), tape.value(out.embedding));

        // padding after eos is invisible, moving eos is not
        let padded = tokens(&[3, 4, 2, 7, 8, 0], 2);
        let mut plan = FixedPrompts {
            rows: vec![rows],
            len: 2,
        };
        let other = encode_text(&mut tape, &v, &c, &padded, Some(&mut plan)).unwrap();
        assert_eq!(tape.value(other.embedding), tape.value(out.embedding));
        let moved = tokens(&[3, 4, 5, 2, 0, 0], 3);
        let mut plan = FixedPrompts {
            rows: vec![rows],
            len: 2,
        };
        let other = encode_text(&mut tape, &v, &c, &moved, Some(&mut plan)).unwrap();
        assert_ne!(tape.value(other.embedding), tape.value(out.embedding));
    }

    #[test]
    fn eos_out_of_range_is_rejected() {
        let c = cfg();
        let p = DualEncoderParams::init(&c, 2).unwrap();
        let mut tape = Tape::new();
        let v = p.register(&mut tape, false);
        assert!(encode_text(&mut tape, &v, &c, &tokens(&[3, 2], 2), None).is_err());
    }

    #[test]
    fn contrastive_limits() {
        let mut tape = Tape::new();
        let big = tape.constant(Tensor::from_fn(&[4, 4], |k| if k / 4 == k % 4 { 100.0 } else { 0.0 }));
        let l = symmetric_contrastive_loss(&mut tape, big).unwrap();
        assert!(tape.value(l).item() < 1e-12);
        let flat = tape.constant(Tensor::filled(&[4, 4], 0.3));
        let l = symmetric_contrastive_loss(&mut tape, flat).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let one = tape.constant(Tensor::filled(&[1, 1], 0.3));
        assert!(matches!(
            symmetric_contrastive_loss(&mut tape, one),
            Err(Error::DegenerateContrastive(1))
        ));
    }

    #[test]
    fn per_pair_losses_follow_batch_permutation() {
        let logits = init::normal(&mut init::rng(8), &[5, 5], 2.0);
        let base = per_pair_contrastive_losses(&logits);
        let perm = [3, 0, 4, 1, 2];
        let shuffled = Tensor::from_fn(&[5, 5], |k| logits.at(perm[k / 5], perm[k % 5]));
        let moved = per_pair_contrastive_losses(&shuffled);
        for (i, &p) in perm.iter().enumerate() {
            assert!((moved[i] - base[p]).abs() < 1e-12);
        }
        let mut tape = Tape::new();
        let v = tape.constant(logits);
        let l = symmetric_contrastive_loss(&mut tape, v).unwrap();
        let mean = base.iter().sum::<f64>() / 5.0;
        assert!((tape.value(l).item() - mean).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_is_sensitive_and_stable() {
        let p = DualEncoderParams::init(&cfg(), 3).unwrap();
        let a = fingerprint(&p);
        assert_eq!(a, fingerprint(&p.clone()));
        let mut q = p.clone();
        q.proj_text.data_mut()[0] += 1e-12;
        assert_ne!(a, fingerprint(&q));
    }

    #[test]
    fn frozen_backbone_registers_constants_only() {
        let c = cfg();
        let frozen = FrozenBackbone::freeze(DualEncoderParams::init(&c, 3).unwrap(), c.clone()).unwrap();
        let mut tape = Tape::new();
        let v = frozen.register(&mut tape);
        let prompt = tape.param(Tensor::filled(&[2, 8], 0.1));
        let mut plan = FixedPrompts {
            rows: vec![prompt],
            len: 2,
        };
        let out = encode_text(&mut tape, &v, &c, &tokens(&[3, 4, 2], 2), Some(&mut plan)).unwrap();
        let loss = tape.sum(out.embedding);
        tape.backward(loss).unwrap();
        assert!(frozen.ensure_no_grads(&tape, &v).is_ok());
        assert!(tape.grad(prompt).unwrap().data().iter().any(|g| *g != 0.0));
        assert!(matches!(
            frozen.apply_update("text.proj"),
            Err(Error::FrozenParameter(_))
        ));
        let trainable = frozen.params().register(&mut tape, true);
        assert!(frozen.ensure_no_grads(&tape, &trainable).is_err());
    }
}
