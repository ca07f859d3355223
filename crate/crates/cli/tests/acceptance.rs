//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use biaspath::harness::{
    build_pairs, build_samples, exp_attn_topk, exp_attribution_oracle, exp_generation_check, exp_logit_lens,
    exp_mlp_sweep, exp_upper_mlp, CounterfactualPair, GenderWordFilter, PairingMode, PronounTokens, SpanMode,
    SpanPatch, TemplateSample,
};
use biaspath::metrics::{preference_fraction, MetricSpec, PronounTarget};
use biaspath::model::{load_checkpoint, Checkpoint, ModelConfig, Vocab};
use biaspath::patch::{
    attribution_from_caches, patch_hooks, ActivationCache, Capture, HookPoint, HookSite, PatchSpec, Position,
    SiteFamily,
};
use biaspath::tensor::kernels::{
    cross_entropy, matmul, matmul_backward, rmsnorm, rmsnorm_backward, rope_apply, rope_backward, silu, silu_grad,
    softmax_rows, softmax_rows_backward,
};
use biaspath::tensor::{grad_check, Tensor};
use biaspath::trainer::{build_toy, debias_run, mask_parameters, object_prompt, ComponentMask, ToyRecipe, TrainConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn asset_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/toy")
}

struct Toy {
    ck: Checkpoint<f64>,
    vocab: Vocab,
    samples: Vec<TemplateSample>,
    pairs: Vec<CounterfactualPair>,
}

fn shipped_toy() -> Toy {
    let dir = asset_dir();
    let ck = load_checkpoint::<f32>(&dir.join("model.json"))
        .expect("shipped checkpoint")
        .cast();
    let vocab = Vocab::load(&dir.join("vocab.txt")).expect("shipped vocab");
    let recipe = ToyRecipe::default();
    let pron = PronounTokens::from_vocab(&vocab).expect("pronouns");
    let samples = build_samples(&recipe.corpus.templates, &recipe.corpus.professions, &vocab, pron).expect("samples");
    let (pairs, failed) = build_pairs(
        &samples,
        &recipe.corpus.professions,
        &vocab,
        pron,
        PairingMode::Anchor,
        SpanMode::AllTokens,
    );
    assert!(failed.is_empty(), "{} samples failed to pair", failed.len());
    Toy {
        ck,
        vocab,
        samples,
        pairs,
    }
}

fn random_tensor(rng: &mut StdRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn weighted_sum(w: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    w.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

fn tiny_config(rng: &mut StdRng, norm_eps: f64) -> ModelConfig {
    ModelConfig {
        n_layers: rng.gen_range(1..=3),
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_mlp: 12,
        vocab_size: 11,
        max_seq: 16,
        norm_eps,
        rope_base: 10000.0,
    }
}

fn random_tokens(rng: &mut StdRng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

fn random_target(rng: &mut StdRng, vocab: usize) -> PronounTarget {
    let stereo = rng.gen_range(0..vocab);
    let anti = (stereo + rng.gen_range(1..vocab)) % vocab;
    PronounTarget::new(stereo, anti).unwrap()
}

const H: f64 = 1e-5;

fn kernel_cases(rng: &mut StdRng) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for _ in 0..15 {
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let a = random_tensor(rng, &[m, k], 1.0);
        let b = random_tensor(rng, &[k, n], 1.0);
        let w = random_tensor(rng, &[m, n], 1.0);
        let e = grad_check(
            |x| {
                (
                    weighted_sum(&w, &matmul(x, &b).unwrap()),
                    matmul_backward(x, &b, &w).unwrap().0,
                )
            },
            &a,
            H,
        );
        out.push(("matmul dA", e.unwrap()));
        let e = grad_check(
            |x| {
                (
                    weighted_sum(&w, &matmul(&a, x).unwrap()),
                    matmul_backward(&a, x, &w).unwrap().1,
                )
            },
            &b,
            H,
        );
        out.push(("matmul dB", e.unwrap()));

        let (s, d) = (rng.gen_range(1..5), rng.gen_range(2..9));
        let x = random_tensor(rng, &[s, d], 2.0);
        let g = random_tensor(rng, &[d], 1.5);
        let w = random_tensor(rng, &[s, d], 1.0);
        let eps = 1e-5;
        let e = grad_check(
            |x| {
                (
                    weighted_sum(&w, &rmsnorm(x, &g, eps).unwrap()),
                    rmsnorm_backward(x, &g, eps, &w).unwrap().0,
                )
            },
            &x,
            H,
        );
        out.push(("rmsnorm dx", e.unwrap()));
        let e = grad_check(
            |g| {
                (
                    weighted_sum(&w, &rmsnorm(&x, g, eps).unwrap()),
                    rmsnorm_backward(&x, g, eps, &w).unwrap().1,
                )
            },
            &g,
            H,
        );
        out.push(("rmsnorm dweight", e.unwrap()));

        let x = random_tensor(rng, &[s, d], 3.0);
        let e = grad_check(
            |x| {
                let y = softmax_rows(x).unwrap();
                (weighted_sum(&w, &y), softmax_rows_backward(&y, &w).unwrap())
            },
            &x,
            H,
        );
        out.push(("softmax", e.unwrap()));

        let (heads, dh, offset) = (rng.gen_range(1..3), 2 * rng.gen_range(1..4), rng.gen_range(0..6));
        let x = random_tensor(rng, &[s, heads, dh], 1.0);
        let w = random_tensor(rng, &[s, heads, dh], 1.0);
        let e = grad_check(
            |x| {
                (
                    weighted_sum(&w, &rope_apply(x, 10000.0, offset).unwrap()),
                    rope_backward(&w, 10000.0, offset).unwrap(),
                )
            },
            &x,
            H,
        );
        out.push(("rope", e.unwrap()));

        let logits = random_tensor(rng, &[s, d], 3.0);
        let mut targets: Vec<usize> = (0..s).map(|_| rng.gen_range(0..d)).collect();
        if s > 1 {
            targets[0] = usize::MAX;
        }
        let e = grad_check(|x| cross_entropy(x, &targets, usize::MAX).unwrap(), &logits, H);
        out.push(("cross_entropy", e.unwrap()));

        let x = random_tensor(rng, &[s, d], 4.0);
        let w = random_tensor(rng, &[s, d], 1.0);
        let e = grad_check(
            |x| {
                let y: f64 = x.data().iter().zip(w.data()).map(|(&v, &c)| c * silu(v)).sum();
                (
                    y,
                    Tensor::new(
                        x.shape().to_vec(),
                        x.data().iter().zip(w.data()).map(|(&v, &c)| c * silu_grad(v)).collect(),
                    )
                    .unwrap(),
                )
            },
            &x,
            H,
        );
        out.push(("silu", e.unwrap()));
    }
    out
}

fn end_to_end_cases(rng: &mut StdRng) -> Vec<(String, f64)> {
    let families = [
        SiteFamily::ResidPre,
        SiteFamily::AttnHeadOut,
        SiteFamily::AttnOut,
        SiteFamily::MlpOut,
        SiteFamily::ResidPost,
    ];
    let mut out = Vec::new();
    for model_seed in 0..4u64 {
        let config = tiny_config(rng, 1e-5);
        let ck = Checkpoint::<f64>::init_random(config.clone(), 100 + model_seed).unwrap();
        let len = rng.gen_range(2..9);
        let tokens = random_tokens(rng, config.vocab_size, len);
        let metric = MetricSpec::logit_diff(random_target(rng, config.vocab_size));
        let g = ck
            .backward_metric(&tokens, &metric, &Capture::Everything, true)
            .unwrap();
        let value = |ck: &Checkpoint<f64>, spec: &PatchSpec<f64>| {
            metric
                .value(&ck.run_with_patches(&tokens, spec, &Capture::Nothing).unwrap().logits)
                .unwrap()
        };
        for family in families {
            let layer = rng.gen_range(0..config.n_layers);
            let sites = family.sites_at(layer, config.n_heads);
            let site = sites[rng.gen_range(0..sites.len())];
            let analytic = g.hooks.get(site).unwrap().clone();
            let e = grad_check(
                |x| {
                    let mut cache = ActivationCache::new(tokens.len(), config.d_model);
                    cache.insert(site, x.clone()).unwrap();
                    let mut spec = PatchSpec::new();
                    spec.push_counterfactual(HookPoint::all(site), &Arc::new(cache), Position::All)
                        .unwrap();
                    (value(&ck, &spec), analytic.clone())
                },
                g.activations.get(site).unwrap(),
                H,
            );
            out.push((format!("hook {site}"), e.unwrap()));
        }
        let params = g.params.as_ref().unwrap();
        let names: Vec<String> = ck.named_tensors().into_iter().map(|(n, _)| n).collect();
        for _ in 0..5 {
            let name = &names[rng.gen_range(0..names.len())];
            let analytic = params.get(name).unwrap().clone();
            let e = grad_check(
                |x| {
                    let mut probe = ck.clone();
                    *probe.params.get_mut(name).unwrap() = x.clone();
                    (value(&probe, &PatchSpec::new()), analytic.clone())
                },
                ck.params.get(name).unwrap(),
                H,
            );
            out.push((format!("param {name}"), e.unwrap()));
        }
    }
    out
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    let kernels = kernel_cases(&mut rng);
    let e2e = end_to_end_cases(&mut rng);
    let secs = t.elapsed().as_secs_f64();
    let worst_kernel = kernels.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let worst_e2e = e2e.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let cases = kernels.len() + e2e.len();
    check(
        worst_kernel.1 <= 1e-6 && worst_e2e.1 <= 1e-5 && cases >= 100 && secs < 120.0,
        format!(
            "{cases} cases; kernels max rel err {:.2e} ({}), end-to-end max rel err {:.2e} ({}); {secs:.1}s",
            worst_kernel.1, worst_kernel.0, worst_e2e.1, worst_e2e.0
        ),
    )
}

fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn patching_identities(toy: &Toy) -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    let config = &toy.ck.config;
    let every_site: Vec<HookSite> = (0..config.n_layers)
        .flat_map(|l| {
            [
                SiteFamily::ResidPre,
                SiteFamily::AttnHeadOut,
                SiteFamily::AttnOut,
                SiteFamily::MlpOut,
                SiteFamily::ResidPost,
            ]
            .into_iter()
            .flat_map(move |f| f.sites_at(l, config.n_heads))
        })
        .collect();
    let (mut self_err, mut subst_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let len = rng.gen_range(2..=24);
        let clean = random_tokens(&mut rng, config.vocab_size, len);
        let corrupt = random_tokens(&mut rng, config.vocab_size, len);
        let c = toy.ck.forward(&clean, &Capture::Everything).unwrap();
        let k = toy.ck.forward(&corrupt, &Capture::Everything).unwrap();
        let (c_cache, k_cache) = (Arc::new(c.cache), Arc::new(k.cache));

        let spec = PatchSpec::from_entries(every_site.iter().map(|&s| biaspath::patch::PatchEntry {
            hook: HookPoint::all(s),
            source: biaspath::patch::AblationSource::Counterfactual {
                cache: Arc::clone(&c_cache),
                position: Position::All,
            },
        }))
        .unwrap();
        let out = toy.ck.run_with_patches(&clean, &spec, &Capture::Nothing).unwrap();
        self_err = self_err.max(max_abs(&out.logits, &c.logits));

        let mut spec = PatchSpec::new();
        spec.push_counterfactual(HookPoint::all(HookSite::ResidPre(0)), &k_cache, Position::All)
            .unwrap();
        let out = toy.ck.run_with_patches(&clean, &spec, &Capture::Nothing).unwrap();
        subst_err = subst_err.max(max_abs(&out.logits, &k.logits));
    }
    check(
        self_err <= 1e-6 && subst_err <= 1e-6,
        format!("50 pairs; self-patch max |dlogit| {self_err:.2e}; resid_pre(0) substitution {subst_err:.2e}"),
    )
}

fn attribution_soundness(toy: &Toy) -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let mut linear_err = 0.0f64;
    let mut hooks_checked = 0;
    for seed in 0..20u64 {
        let config = tiny_config(&mut rng, 1e30);
        let mut ck = Checkpoint::<f64>::init_random(config.clone(), 200 + seed).unwrap();
        ck.params.final_ln.data_mut().iter_mut().for_each(|w| *w = 1e15);
        let len = rng.gen_range(2..9);
        let clean = random_tokens(&mut rng, config.vocab_size, len);
        let corrupt = random_tokens(&mut rng, config.vocab_size, len);
        let metric = MetricSpec::logit_diff(random_target(&mut rng, config.vocab_size));
        let last = config.n_layers - 1;
        let sites = [HookSite::ResidPost(last), HookSite::MlpOut(last)];
        let g = ck
            .backward_metric(&clean, &metric, &Capture::sites(sites), false)
            .unwrap();
        let k = Arc::new(ck.forward(&corrupt, &Capture::sites(sites)).unwrap().cache);
        let hooks: Vec<HookPoint> = sites
            .iter()
            .flat_map(|&s| (0..len).map(move |p| HookPoint::at(s, p)))
            .collect();
        let scores = attribution_from_caches(&g.activations, &k, &g.hooks, &hooks).unwrap();
        for s in &scores {
            let spec = patch_hooks(std::slice::from_ref(s), &k).unwrap();
            let patched = metric
                .value(&ck.run_with_patches(&clean, &spec, &Capture::Nothing).unwrap().logits)
                .unwrap();
            let delta = patched - g.value;
            linear_err = linear_err.max((s.score - delta).abs() / delta.abs().max(1.0));
            hooks_checked += 1;
        }
    }
    let linear_ok = linear_err <= 1e-12;

    let t = Instant::now();
    let ceiling = toy.ck.config.n_layers - 1;
    let report = exp_attribution_oracle(&toy.ck, &toy.pairs, ceiling, None, 0).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let rho = report.aggregate("spearman").map_err(|e| e.to_string())?;
    let hooks = report.aggregate("hooks").map_err(|e| e.to_string())?;
    check(
        linear_ok && rho >= 0.8 && secs < 600.0,
        format!(
            "linear case: {hooks_checked} hooks, max rel err {linear_err:.2e}; toy oracle: Spearman {rho:.3} over {hooks} hooks of {} pairs in {secs:.1}s",
            toy.pairs.len()
        ),
    )
}

struct Retrained {
    ck: Checkpoint<f32>,
    vocab: Vocab,
    corpus: biaspath::trainer::SynthCorpus,
}

fn planted_localization(toy: &Toy) -> (Outcome, Retrained) {
    let t = Instant::now();
    let built = build_toy(&ToyRecipe::default()).expect("toy training");
    let train_secs = t.elapsed().as_secs_f64();
    let shipped = fs::read(asset_dir().join("model.bin")).expect("shipped blob");
    let reproduces = built.checkpoint.blob_bytes() == shipped && built.vocab.tokens() == toy.vocab.tokens();
    let ck: Checkpoint<f64> = built.checkpoint.cast();
    let pref = preference_fraction(&built.corpus.pairs, &ck, &built.vocab).expect("preference");

    let pron = PronounTokens::from_vocab(&built.vocab).unwrap();
    let spec = &ToyRecipe::default().corpus;
    let samples = build_samples(&spec.templates, &spec.professions, &built.vocab, pron).unwrap();
    let (pairs, _) = build_pairs(
        &samples,
        &spec.professions,
        &built.vocab,
        pron,
        PairingMode::Anchor,
        SpanMode::AllTokens,
    );
    let sets: Vec<BTreeSet<usize>> = (1..=ck.config.n_layers).map(|n| (0..n).collect()).collect();
    let report = exp_mlp_sweep(&ck, &pairs, &sets, 0).expect("sweep");
    let fracs: Vec<f64> = sets
        .iter()
        .map(|s| {
            let label = s.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
            report.aggregate(&format!("reversed[{label}]")).unwrap()
        })
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let monotone = fracs.windows(2).all(|w| w[1] >= w[0]);
    let outcome = check(
        pref >= 0.9 && fracs[2] >= 0.9 && monotone && secs < 600.0,
        format!(
            "preference {pref:.3}; prefix reversal {fracs:?}; monotone {monotone}; training {train_secs:.1}s, total {secs:.1}s; retrained model {} the shipped asset",
            if reproduces { "matches" } else { "DIFFERS FROM" }
        ),
    );
    let retrained = Retrained {
        ck: built.checkpoint,
        vocab: built.vocab,
        corpus: built.corpus,
    };
    (outcome, retrained)
}

fn copy_heads(toy: &Toy) -> Outcome {
    let ceiling = toy.ck.config.n_layers - 1;
    let saturating = toy
        .pairs
        .iter()
        .map(|p| (ceiling + 1) * toy.ck.config.n_heads * p.clean.positions_after_span().len())
        .max()
        .unwrap();
    let r = exp_attn_topk(&toy.ck, &toy.pairs, &[1, saturating], ceiling, 0).map_err(|e| e.to_string())?;
    let direct1 = r.aggregate("direct_reversed[k=1]").map_err(|e| e.to_string())?;
    let grouped = r
        .aggregate(&format!("grouped_reversed[k={saturating}]"))
        .map_err(|e| e.to_string())?;
    check(
        grouped >= 0.8 && direct1 < 0.2,
        format!("grouped at saturating k={saturating}: {grouped:.3}; direct top-1: {direct1:.4}"),
    )
}

fn upper_mlp_null(toy: &Toy) -> Outcome {
    let floor = toy.ck.config.n_layers / 2;
    let r = exp_upper_mlp(&toy.ck, &toy.pairs, floor, 0).map_err(|e| e.to_string())?;
    let rev = r.aggregate("reversed").map_err(|e| e.to_string())?;
    check(
        rev <= 0.1,
        format!("final-position MLP patching of layers {floor}.. reverses {rev:.4}"),
    )
}

fn generation(toy: &Toy) -> Outcome {
    let patch = SpanPatch {
        family: SiteFamily::MlpOut,
        layers: [0, 1, 2].into(),
    };
    let r = exp_generation_check(
        &toy.ck,
        &toy.vocab,
        &toy.pairs,
        &patch,
        &GenderWordFilter::shipped(),
        20,
        30,
        0,
    )
    .map_err(|e| e.to_string())?;
    let get = |k: &str| r.aggregate(k).map_err(|e| e.to_string());
    let (sampled, emitted, differs, control) = (
        get("sampled")?,
        get("emitted")?,
        get("differs")?,
        get("control_switched")?,
    );
    let switched = get("pronoun_switched").unwrap_or(f64::NAN);
    check(
        sampled == 20.0 && emitted == sampled && differs == 1.0 && control == 0.0,
        format!("{sampled} cases, {emitted} emitted; differ {differs}; control switch {control}; pronoun switch {switched} (not asserted)"),
    )
}

fn targeted_debias(model: &Retrained) -> Outcome {
    let t = Instant::now();
    let mask: ComponentMask = "mlp:0..4".parse().unwrap();
    let evals = BTreeMap::from([("planted".to_string(), model.corpus.pairs.clone())]);
    let (report, outcome) = debias_run(
        &model.ck,
        &model.vocab,
        &mask,
        &model.corpus.counterfactual,
        &evals,
        &model.corpus.neutral_eval,
        &TrainConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let regions = mask_parameters(&model.ck.config, &mask).unwrap();
    let (mut frozen_changed, mut trainable_changed) = (0usize, 0usize);
    for (i, ((_, a), (_, b))) in model
        .ck
        .named_tensors()
        .iter()
        .zip(outcome.checkpoint.named_tensors())
        .enumerate()
    {
        for (j, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let trainable = regions.iter().any(|r| r.tensor == i && (r.start..r.end).contains(&j));
            if x.to_bits() != y.to_bits() {
                if trainable {
                    trainable_changed += 1;
                } else {
                    frozen_changed += 1;
                }
            }
        }
    }
    let row = &report.preference[0];
    let ppl = report.perplexity_increase();
    check(
        row.before >= 0.9 && row.after <= 0.7 && frozen_changed == 0 && ppl <= 0.1 && secs < 900.0,
        format!(
            "preference {:.3} -> {:.3}; frozen elements changed {frozen_changed}, trainable changed {trainable_changed}; perplexity {:+.2}%; {} steps in {secs:.1}s",
            row.before,
            row.after,
            ppl * 100.0,
            report.steps
        ),
    )
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn cli_session(dir: &Path) -> Result<(Vec<(String, Vec<u8>)>, BTreeMap<PathBuf, Vec<u8>>), String> {
    let toy = asset_dir();
    let (ck, vocab) = (toy.join("model.json"), toy.join("vocab.txt"));
    let (ck, vocab) = (ck.to_str().unwrap(), vocab.to_str().unwrap());
    let model = ["--checkpoint", ck, "--vocab", vocab];
    let perturb = concat!(
        "{\"original\": \"The doctor said he was late\", \"perturbed\": \"The doctor said she was late\"}\n",
        "{\"original\": \"The doctor said he was late\", \"perturbed\": \"The nurse said he was late\"}\n",
    );
    fs::write(dir.join("perturb.jsonl"), perturb).unwrap();
    let (dishes, car) = (object_prompt("dishes"), object_prompt("car"));

    let steps: Vec<(&str, Vec<&str>)> = vec![
        (
            "synth",
            vec![
                "data",
                "synth",
                "--profession-lines",
                "300",
                "--object-lines",
                "40",
                "--neutral-lines",
                "60",
            ],
        ),
        ("filter", vec!["data", "filter-perturb", "--input", "perturb.jsonl"]),
        (
            "init",
            vec![
                "model",
                "init",
                "--vocab",
                "synth/vocab.txt",
                "--output",
                "init/model.json",
            ],
        ),
        (
            "train",
            vec![
                "model",
                "train",
                "--checkpoint",
                "init/model.json",
                "--vocab",
                "synth/vocab.txt",
                "--corpus",
                "synth/corpus.txt",
                "--epochs",
                "1",
                "--lr",
                "1e-3",
                "--batch-size",
                "8",
                "--output",
                "trained/model.json",
            ],
        ),
        ("info", vec!["model", "info", "--checkpoint", "trained/model.json"]),
        ("toy", vec!["model", "toy", "--epochs", "1", "--output", "toy"]),
        (
            "mlp-sweep",
            [&["run", "mlp-sweep"][..], &model, &["--layers", "0..4"]].concat(),
        ),
        (
            "attn-topk",
            [&["run", "attn-topk"][..], &model, &["--k", "1,4"]].concat(),
        ),
        ("upper-mlp", [&["run", "upper-mlp"][..], &model].concat()),
        ("logit-lens", [&["run", "logit-lens"][..], &model].concat()),
        (
            "gen-check",
            [
                &["run", "gen-check"][..],
                &model,
                &["--n-samples", "5", "--n-tokens", "12"],
            ]
            .concat(),
        ),
        (
            "feature-probe",
            [
                &["run", "feature-probe"][..],
                &model,
                &["--prompt", dishes.as_str(), "--counter", car.as_str()],
            ]
            .concat(),
        ),
        (
            "oracle",
            [&["run", "attribution-oracle"][..], &model, &["--max-pairs", "4"]].concat(),
        ),
        (
            "preference",
            [&["eval", "preference"][..], &model, &["--pairs", "synth/pairs.jsonl"]].concat(),
        ),
        (
            "debias",
            [
                &["debias"][..],
                &model,
                &[
                    "--corpus",
                    "synth/counterfactual.txt",
                    "--eval",
                    "planted=synth/pairs.jsonl",
                    "--neutral",
                    "synth/neutral_eval.txt",
                    "--epochs",
                    "1",
                    "--output",
                    "debiased/model.json",
                ],
            ]
            .concat(),
        ),
    ];
    let mut stdout = Vec::new();
    for (name, args) in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_biaspath"))
            .current_dir(dir)
            .args(["--seed", "7", "--out-dir", name])
            .args(&args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{name} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        stdout.push((name.to_string(), out.stdout));
    }
    Ok((stdout, files_under(dir)))
}

fn determinism() -> Outcome {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let (out_a, files_a) = cli_session(&a)?;
    let (out_b, files_b) = cli_session(&b)?;
    let differing: Vec<String> = files_a
        .keys()
        .chain(files_b.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| files_a.get(*k) != files_b.get(*k))
        .map(|k| k.display().to_string())
        .chain(
            out_a
                .iter()
                .zip(&out_b)
                .filter(|(x, y)| x != y)
                .map(|(x, _)| format!("stdout of {}", x.0)),
        )
        .collect();
    check(
        differing.is_empty(),
        format!(
            "{} commands, {} files compared across two runs in {:.1}s; differing: {differing:?}",
            out_a.len(),
            files_a.len(),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn logit_lens(toy: &Toy) -> Outcome {
    let r = exp_logit_lens(&toy.ck, &toy.samples, 0).map_err(|e| e.to_string())?;
    let err = r.aggregate("max_final_lens_error").map_err(|e| e.to_string())?;
    let settled = r.aggregate("settled_by_half").map_err(|e| e.to_string())?;
    check(
        err <= 1e-5 && settled >= 0.7,
        format!(
            "{} prompts; final-layer lens max error {err:.2e}; settled by the mid-layer {settled:.3}",
            toy.samples.len()
        ),
    )
}

fn main() {
    let toy = shipped_toy();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        let (tag, detail) = match &o {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {tag}  {name}: {detail}");
        results.push((n, name, o));
    };
    record(1, "gradient fidelity", gradient_fidelity());
    record(2, "patching identities", patching_identities(&toy));
    record(3, "attribution soundness", attribution_soundness(&toy));
    let (o, retrained) = planted_localization(&toy);
    record(4, "planted-bias localization", o);
    record(5, "copy-head localization", copy_heads(&toy));
    record(6, "upper-MLP null", upper_mlp_null(&toy));
    record(7, "generation checks", generation(&toy));
    record(8, "targeted debias", targeted_debias(&retrained));
    record(9, "determinism", determinism());
    record(10, "logit-lens consistency", logit_lens(&toy));
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
