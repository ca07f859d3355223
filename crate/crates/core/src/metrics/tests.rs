use proptest::prelude::*;

use super::*;
use crate::model::{ModelConfig, Params};
use crate::patch::{Capture, SiteFamily};

fn row_logits(row: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![1, row.len()], row.to_vec()).unwrap()
}

const HE: usize = 0;
const SHE: usize = 1;

fn he_stereo() -> PronounTarget {
    PronounTarget::new(HE, SHE).unwrap()
}

#[test]
fn logit_diff_examples() {
    let spec = MetricSpec::logit_diff(he_stereo());
    assert_eq!(logit_diff(&row_logits(&[2.0, 1.5, 0.0]), &spec).unwrap(), -0.5);
    assert_eq!(logit_diff(&row_logits(&[1.0, 1.0, 0.0]), &spec).unwrap(), 0.0);
}

#[test]
fn log_prob_diff_matches_logit_diff() {
    let spec = MetricSpec {
        kind: MetricKind::LogProbDiff,
        ..MetricSpec::logit_diff(he_stereo())
    };
    let v = spec.value(&row_logits(&[2.0, 1.5, -3.0])).unwrap();
    assert!((v + 0.5).abs() < 1e-12);
}

#[test]
fn metric_position_defaults_to_last_and_is_checked() {
    let logits = Tensor::new(vec![2, 2], vec![5.0, 0.0, 0.0, 1.0]).unwrap();
    let spec = MetricSpec::logit_diff(he_stereo());
    assert_eq!(spec.value(&logits).unwrap(), 1.0);
    assert_eq!(spec.at(0).value(&logits).unwrap(), -5.0);
    assert!(spec.at(2).value(&logits).is_err());
}

#[test]
fn identical_targets_rejected() {
    assert!(PronounTarget::new(3, 3).is_err());
}

#[test]
fn logit_order_examples() {
    assert_eq!(logit_order(&[2.0, 1.5], he_stereo()), LogitOrder::Stereotypical);
    assert_eq!(logit_order(&[1.5, 2.0], he_stereo()), LogitOrder::AntiStereotypical);
    assert_eq!(logit_order(&[1.0, 1.0], he_stereo()), LogitOrder::Stereotypical);
}

#[test]
fn kl_examples() {
    assert_eq!(kl_divergence(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]).unwrap(), 0.0);
    let kl = kl_divergence(&[1000.0, 0.0], &[0.0, 0.0]).unwrap();
    assert!((kl - std::f64::consts::LN_2).abs() < 1e-9);
    assert!(kl_divergence(&[1.0], &[1.0, 2.0]).is_err());
}

proptest! {
    #[test]
    fn logit_diff_is_translation_invariant(row in prop::collection::vec(-10.0f64..10.0, 3..8), shift in -50.0f64..50.0) {
        let spec = MetricSpec::logit_diff(he_stereo());
        let a = logit_diff(&row_logits(&row), &spec).unwrap();
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let b = logit_diff(&row_logits(&shifted), &spec).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn logit_order_invariant_under_monotone_maps(a in -10.0f64..10.0, b in -10.0f64..10.0, s in 0.1f64..5.0, t in -5.0f64..5.0) {
        let raw = logit_order(&[a, b], he_stereo());
        let lin = logit_order(&[s * a + t, s * b + t], he_stereo());
        let cubic = logit_order(&[a.powi(3), b.powi(3)], he_stereo());
        prop_assert_eq!(raw, lin);
        prop_assert_eq!(raw, cubic);
    }

    #[test]
    fn kl_is_non_negative(p in prop::collection::vec(-8.0f64..8.0, 4), q in prop::collection::vec(-8.0f64..8.0, 4)) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
    }
}

fn small_vocab() -> Vocab {
    Vocab::from_tokens(["he", "she", " a", " b", " c", "The", " said"]).unwrap()
}

fn model_for(vocab: &Vocab, seed: u64) -> Checkpoint<f64> {
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_mlp: 8,
        vocab_size: vocab.len(),
        max_seq: 16,
        norm_eps: 1e-5,
        rope_base: 10000.0,
    };
    Checkpoint::init_random(config, seed).unwrap()
}

#[test]
fn uniform_model_scores_minus_n_ln_v() {
    let vocab = small_vocab();
    let mut ck = model_for(&vocab, 1);
    ck.params.unembed.data_mut().fill(0.0);
    let ids = vocab.encode("The a b c");
    let lp = sequence_logprob("The a b c", &ck, &vocab).unwrap();
    let expected = -((ids.len() - 1) as f64) * (vocab.len() as f64).ln();
    assert!((lp - expected).abs() < 1e-9, "{lp} vs {expected}");
}

#[test]
fn single_token_sequence_rejected() {
    let vocab = small_vocab();
    let ck = model_for(&vocab, 1);
    assert!(sequence_logprob("The", &ck, &vocab).is_err());
}

#[test]
fn appending_never_increases_logprob() {
    let vocab = small_vocab();
    let ck = model_for(&vocab, 2);
    let short = sequence_logprob("The a b", &ck, &vocab).unwrap();
    let long = sequence_logprob("The a b c", &ck, &vocab).unwrap();
    assert!(long <= short);
}

/// One layer, width 2, vocab 3. Attention at position 0 sees only itself, so
/// the block reduces to `x + 0.5·rmsnorm(x)` with a silent MLP.
#[test]
fn hand_computed_two_token_logprob() {
    let config = ModelConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: 2,
        d_head: 2,
        d_mlp: 2,
        vocab_size: 3,
        max_seq: 4,
        norm_eps: 1e-5,
        rope_base: 10000.0,
    };
    let mut p = Params::zeros(&config);
    p.embed.data_mut().copy_from_slice(&[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
    let b = &mut p.blocks[0];
    b.ln1.data_mut().fill(1.0);
    b.ln2.data_mut().fill(1.0);
    b.w_v.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    b.w_o.data_mut().copy_from_slice(&[0.5, 0.0, 0.0, 0.5]);
    p.final_ln.data_mut().fill(1.0);
    p.unembed.data_mut().copy_from_slice(&[1.0, 0.0, -1.0, 0.0, 1.0, 1.0]);
    let ck = Checkpoint::new(config, p).unwrap();
    let lp = sequence_logprob_tokens(&ck, &[0, 1]).unwrap();
    assert!((lp - -0.780096590233976).abs() < 1e-5, "{lp}");
}

#[test]
fn preference_counting_and_ties() {
    let vocab = small_vocab();
    let ck = model_for(&vocab, 3);
    let pair = |s: &str, a: &str| MinimalPair {
        stereo_text: s.into(),
        anti_text: a.into(),
        bias_category: "gender".into(),
    };
    let same = vec![pair("The a said he", "The a said he")];
    assert_eq!(preference_fraction(&same, &ck, &vocab).unwrap(), 1.0);

    let x = "The a said he";
    let y = "The b said she";
    assert_ne!(
        sequence_logprob(x, &ck, &vocab).unwrap(),
        sequence_logprob(y, &ck, &vocab).unwrap()
    );
    let two = vec![pair(x, y), pair(y, x)];
    assert_eq!(preference_fraction(&two, &ck, &vocab).unwrap(), 0.5);

    assert!(preference_fraction(&[], &ck, &vocab).is_err());
}

#[test]
fn preference_invariant_to_order_and_duplication() {
    let vocab = small_vocab();
    let ck = model_for(&vocab, 4);
    let texts = [
        "The a said he",
        "The b said she",
        "The c said he",
        "The a said she",
        "The c b",
    ];
    let mut pairs = Vec::new();
    for (i, s) in texts.iter().enumerate() {
        for a in texts.iter().skip(i + 1) {
            pairs.push(MinimalPair {
                stereo_text: s.to_string(),
                anti_text: a.to_string(),
                bias_category: "gender".into(),
            });
        }
    }
    let base = preference_fraction(&pairs, &ck, &vocab).unwrap();
    let mut rev = pairs.clone();
    rev.reverse();
    assert_eq!(preference_fraction(&rev, &ck, &vocab).unwrap(), base);
    let doubled: Vec<_> = pairs.iter().chain(&pairs).cloned().collect();
    assert_eq!(preference_fraction(&doubled, &ck, &vocab).unwrap(), base);
}

#[test]
fn lens_final_layer_matches_logits() {
    let vocab = small_vocab();
    let ck = model_for(&vocab, 5).cast::<f32>();
    let ids = vocab.encode("The a said");
    let out = ck.forward(&ids, &Capture::families([SiteFamily::ResidPost])).unwrap();
    let target = PronounTarget::new(vocab.id("he").unwrap(), vocab.id("she").unwrap()).unwrap();
    let pos = ids.len() - 1;
    let lens = logit_lens(&out.cache, &ck, pos, target).unwrap();
    assert_eq!(lens.orders.len(), 2);
    assert_eq!(*lens.orders.last().unwrap(), logit_order(out.logits.row(pos), target));
    let last = out.cache.row(HookSite::ResidPost(1), pos).unwrap();
    let lensed = ck.unembed_residual(last).unwrap();
    for (a, b) in lensed.row(0).iter().zip(out.logits.row(pos)) {
        assert!((a - b).abs() <= 1e-5);
    }
}

#[test]
fn lens_single_layer_model() {
    let vocab = small_vocab();
    let mut ck = model_for(&vocab, 6);
    ck.params.blocks.truncate(1);
    ck.config.n_layers = 1;
    let ids = vocab.encode("The b");
    let out = ck.forward(&ids, &Capture::families([SiteFamily::ResidPost])).unwrap();
    let target = PronounTarget::new(vocab.id("he").unwrap(), vocab.id("she").unwrap()).unwrap();
    let lens = logit_lens(&out.cache, &ck, 1, target).unwrap();
    assert_eq!(lens.orders, vec![logit_order(out.logits.row(1), target)]);
}

#[test]
fn lens_requires_residual_captures() {
    let vocab = small_vocab();
    let ck = model_for(&vocab, 7);
    let out = ck.forward(&vocab.encode("The a"), &Capture::Nothing).unwrap();
    let target = PronounTarget::new(vocab.id("he").unwrap(), vocab.id("she").unwrap()).unwrap();
    assert!(matches!(logit_lens(&out.cache, &ck, 0, target), Err(Error::Cache(_))));
}

#[test]
fn settled_layer_rule() {
    use LogitOrder::*;
    let r = |orders: Vec<LogitOrder>| LensReadout {
        diffs: vec![0.0; orders.len()],
        orders,
    };
    assert_eq!(r(vec![Stereotypical, Stereotypical]).settled_layer(), Some(0));
    assert_eq!(
        r(vec![AntiStereotypical, Stereotypical, Stereotypical]).settled_layer(),
        Some(1)
    );
    assert_eq!(
        r(vec![Stereotypical, AntiStereotypical, Stereotypical]).settled_layer(),
        Some(2)
    );
    assert_eq!(r(vec![Stereotypical, AntiStereotypical]).settled_layer(), None);
}

#[test]
fn pair_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    std::fs::write(
        &path,
        "{\"stereo\":\"He ran\",\"anti\":\"She ran\",\"category\":\"gender\"}\n\n",
    )
    .unwrap();
    let pairs = load_pairs(&path).unwrap();
    assert_eq!(pairs.len(), 1);
    assert_eq!(pairs[0].anti_text, "She ran");
    let out = dir.path().join("out.jsonl");
    write_pairs(&out, &pairs).unwrap();
    assert_eq!(load_pairs(&out).unwrap(), pairs);
    std::fs::write(&path, "not json\n").unwrap();
    assert!(load_pairs(&path).is_err());
}

#[test]
fn spearman_examples() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    // ranks a = [1, 2.5, 2.5, 4], b = [1, 2, 3, 4]
    let r = spearman(&[1.0, 2.0, 2.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12, "{r}");
    assert!(spearman(&[1.0], &[1.0]).is_err());
    assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
}

proptest! {
    #[test]
    fn spearman_invariant_under_monotone_maps(v in proptest::collection::vec(-100.0f64..100.0, 3..20)) {
        let w: Vec<f64> = v.iter().map(|x| x.powi(3) + 2.0 * x).collect();
        if let Ok(r) = spearman(&v, &w) {
            prop_assert!((r - 1.0).abs() < 1e-9);
        }
    }
}
