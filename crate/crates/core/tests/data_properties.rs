use dmdp::data::{gen_synthetic, synthetic_vocab, SarcasmCase, CLAIMS, DISTRACTORS};
use proptest::prelude::*;

/// Plug-in mutual information in bits between two binary sequences.
fn mutual_information(x: &[u8], y: &[u8]) -> f64 {
    let n = x.len() as f64;
    let mut joint = [[0.0f64; 2]; 2];
    for (&a, &b) in x.iter().zip(y) {
        joint[a as usize][b as usize] += 1.0 / n;
    }
    let px = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
    let py = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    let mut mi = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            if joint[a][b] > 0.0 {
                mi += joint[a][b] * (joint[a][b] / (px[a] * py[b])).log2();
            }
        }
    }
    mi
}

#[test]
fn nuisance_modality_carries_no_label_information() {
    let d = gen_synthetic(SarcasmCase::ImageDriven, 10_000, 11, 8, 8).unwrap();
    let b: Vec<u8> = d.latents.iter().map(|l| l.textual).collect();
    let a: Vec<u8> = d.latents.iter().map(|l| l.visual).collect();
    let y: Vec<u8> = d.manifest.samples.iter().map(|s| s.label).collect();
    assert!(mutual_information(&b, &y) < 0.01);
    assert!((mutual_information(&a, &y) - 1.0).abs() < 0.01);

    let d = gen_synthetic(SarcasmCase::TextDriven, 10_000, 12, 8, 8).unwrap();
    let a: Vec<u8> = d.latents.iter().map(|l| l.visual).collect();
    let y: Vec<u8> = d.manifest.samples.iter().map(|s| s.label).collect();
    assert!(mutual_information(&a, &y) < 0.01);
}

#[test]
fn incongruity_labels_are_independent_of_each_modality_alone() {
    let d = gen_synthetic(SarcasmCase::Incongruity, 10_000, 13, 8, 8).unwrap();
    let y: Vec<u8> = d.manifest.samples.iter().map(|s| s.label).collect();
    for pick in [|l: &dmdp::data::Latent| l.visual, |l: &dmdp::data::Latent| l.textual] {
        let m: Vec<u8> = d.latents.iter().map(pick).collect();
        assert!(mutual_information(&m, &y) < 0.01);
    }
}

#[test]
fn pixel_means_separate_visual_classes() {
    let d = gen_synthetic(SarcasmCase::ImageDriven, 2000, 5, 8, 8).unwrap();
    let means: Vec<(f64, u8)> = d
        .manifest
        .samples
        .iter()
        .zip(&d.latents)
        .map(|(s, l)| (s.image.mean(), l.visual))
        .collect();
    let (fit, held) = means.split_at(1000);
    let class_mean = |c: u8| {
        let v: Vec<f64> = fit.iter().filter(|m| m.1 == c).map(|m| m.0).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (m0, m1) = (class_mean(0), class_mean(1));
    let threshold = (m0 + m1) / 2.0;
    let hits = held
        .iter()
        .filter(|(x, c)| ((*x > threshold) == (m1 > m0)) == (*c == 1))
        .count();
    let acc = hits as f64 / held.len() as f64;
    assert!(acc >= 0.95, "pixel-mean accuracy {acc}");
}

fn known_word() -> impl Strategy<Value = String> {
    let words: Vec<&'static str> = CLAIMS.iter().flatten().chain(DISTRACTORS.iter()).copied().collect();
    prop::sample::select(words).prop_map(str::to_string)
}

proptest! {
    #[test]
    fn tokenizer_is_idempotent(words in prop::collection::vec(known_word(), 0..12), max_len in 1usize..10) {
        let v = synthetic_vocab();
        let text = words.join(" ");
        let once = v.tokenize(&text, max_len).unwrap();
        let twice = v.tokenize(&v.detokenize(&once), max_len).unwrap();
        prop_assert_eq!(once, twice);
    }
}
