use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use biaspath::harness::{
    build_pairs, build_samples, default_templates, emit_report, exp_attn_topk, exp_attribution_oracle,
    exp_feature_probe, exp_generation_check, exp_logit_lens, exp_mlp_sweep, exp_upper_mlp, filter_perturbation_corpus,
    write_perturbation_records, CounterfactualPair, ExperimentReport, GenderWordFilter, PairingMode, ProbeSite,
    Professions, PronounTokens, SpanMode, SpanPatch, TemplateSample,
};
use biaspath::metrics::{load_pairs, preference_fraction, score_pair, write_pairs};
use biaspath::model::{load_checkpoint, Checkpoint, Vocab};
use biaspath::patch::SiteFamily;
use biaspath::tensor::Scalar;
use biaspath::trainer::{
    build_toy, debias_run, encode_corpus, gen_synth_corpus, mask_parameters, parse_layer_set, toy_config, toy_init,
    toy_train_mask, toy_vocab, train_lm_tokens_with_dropout, ComponentDropout, ComponentMask, EpochLoss,
    SynthCorpusSpec, ToyRecipe, TrainConfig,
};
use serde_json::{json, Value};

use crate::args::*;
use crate::ConfigError;

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Runs `$body` with `$t` bound to the scalar type chosen by `$p`.
macro_rules! with_precision {
    ($p:expr, $t:ident => $body:expr) => {
        match $p {
            Precision::F32 => {
                type $t = f32;
                $body
            }
            Precision::F64 => {
                type $t = f64;
                $body
            }
        }
    };
}

struct Ctx {
    seed: u64,
    out_dir: PathBuf,
}

impl Ctx {
    fn emit(&self, report: &ExperimentReport) -> Result<()> {
        let (csv, json) = emit_report(report, &self.out_dir)?;
        println!("wrote {} and {}", csv.display(), json.display());
        Ok(())
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(config_err("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let seed = match cli.global.seed {
        Some(s) => s,
        None => {
            let s = rand::random::<u64>();
            eprintln!("no --seed given; using seed {s}");
            s
        }
    };
    let ctx = Ctx {
        seed,
        out_dir: cli.global.out_dir,
    };
    match cli.command {
        Command::Model(cmd) => model(&ctx, cmd),
        Command::Run(cmd) => run(&ctx, cmd),
        Command::Debias(args) => debias(&ctx, args),
        Command::Eval(EvalCmd::Preference {
            files,
            pairs,
            precision,
        }) => eval_preference(&ctx, &files, &pairs, precision),
        Command::Data(cmd) => data(&ctx, cmd),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_err(format!("input file {} does not exist", path.display())))
    }
}

fn load_model<T: Scalar>(files: &ModelFiles) -> Result<(Checkpoint<T>, Vocab)> {
    require_file(&files.checkpoint)?;
    require_file(&files.vocab)?;
    let ck = load_checkpoint::<T>(&files.checkpoint)?;
    let vocab = Vocab::load(&files.vocab)?;
    if vocab.len() != ck.config.vocab_size {
        return Err(config_err(format!(
            "vocab has {} tokens but the checkpoint expects {}",
            vocab.len(),
            ck.config.vocab_size
        )));
    }
    Ok((ck, vocab))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    require_file(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn layers(spec: &str) -> Result<BTreeSet<usize>> {
    Ok(parse_layer_set(spec)?)
}

fn mask(spec: &str) -> Result<ComponentMask> {
    Ok(spec.parse()?)
}

fn family(f: Family) -> SiteFamily {
    match f {
        Family::MlpOut => SiteFamily::MlpOut,
        Family::AttnOut => SiteFamily::AttnOut,
        Family::ResidPre => SiteFamily::ResidPre,
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn train_config(o: &OptimArgs, seed: u64) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        learning_rate: o.lr,
        weight_decay: o.weight_decay,
        batch_size: o.batch_size,
        epochs: o.epochs,
        validation_fraction: o.val_fraction,
        seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn curve_report(name: &str, seed: u64, config: Value, curve: &[EpochLoss]) -> ExperimentReport {
    let mut r = ExperimentReport::new(name, seed, config, &["epoch", "train_loss", "val_loss"]);
    for e in curve {
        r.push_row(vec![json!(e.epoch), json!(e.train_loss), json!(e.val_loss)]);
    }
    if let Some(last) = curve.last() {
        r.aggregates.insert("final_train_loss".into(), last.train_loss);
        if let Some(v) = last.val_loss {
            r.aggregates.insert("final_val_loss".into(), v);
        }
    }
    r
}

fn model(ctx: &Ctx, cmd: ModelCmd) -> Result<()> {
    match cmd {
        ModelCmd::Init {
            vocab,
            preset,
            precision,
            output,
        } => {
            require_file(&vocab)?;
            let v = Vocab::load(&vocab)?;
            let config = toy_config(v.len());
            with_precision!(precision, T => {
                let ck = match preset {
                    Preset::Toy => toy_init::<T>(config, &v, &Professions::shipped(), ctx.seed)?,
                    Preset::Random => Checkpoint::<T>::init_random(config, ctx.seed)?,
                };
                ck.save(&output)?;
            });
            println!("wrote {}", output.display());
            Ok(())
        }
        ModelCmd::Info { checkpoint } => {
            require_file(&checkpoint)?;
            let ck = load_checkpoint::<f64>(&checkpoint)?;
            let c = &ck.config;
            println!("{}", serde_json::to_string_pretty(c)?);
            let count: usize = ck.named_tensors().iter().map(|(_, t)| t.len()).sum();
            println!("parameters: {count}");
            let mut r = ExperimentReport::new(
                "model_info",
                ctx.seed,
                json!({ "checkpoint": path_str(&checkpoint), "model": c }),
                &["tensor", "shape", "elements"],
            );
            for (name, t) in ck.named_tensors() {
                let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                r.push_row(vec![json!(name), json!(shape.join("x")), json!(t.len())]);
            }
            r.aggregates.insert("parameters".into(), count as f64);
            r.aggregates
                .insert("analytic_parameters".into(), c.parameter_count() as f64);
            ctx.emit(&r)
        }
        ModelCmd::Train(args) => train(ctx, args),
        ModelCmd::Toy { bias, epochs, output } => {
            let mut recipe = ToyRecipe::with_bias(bias);
            recipe.corpus.seed = ctx.seed;
            recipe.init_seed = ctx.seed;
            recipe.train.seed = ctx.seed;
            if let Some(e) = epochs {
                recipe.train.epochs = e;
            }
            if !(0.5..=1.0).contains(&bias) {
                return Err(config_err(format!("bias must lie in [0.5, 1], got {bias}")));
            }
            let toy = build_toy(&recipe)?;
            fs::create_dir_all(&output).with_context(|| format!("creating {}", output.display()))?;
            toy.checkpoint.save(&output.join("model.json"))?;
            toy.vocab.save(&output.join("vocab.txt"))?;
            fs::write(
                output.join("recipe.json"),
                serde_json::to_string_pretty(&recipe)? + "\n",
            )?;
            let config = json!({ "recipe": recipe, "output": path_str(&output) });
            ctx.emit(&curve_report("toy_train", ctx.seed, config, &toy.curve))
        }
    }
}

fn train(ctx: &Ctx, args: TrainArgs) -> Result<()> {
    let lines = read_lines(&args.corpus)?;
    let cfg = train_config(&args.optim, ctx.seed)?;
    let dropout = ComponentDropout {
        head: args.head_dropout,
        mlp: args.mlp_dropout,
        mlp_layers: layers(&args.dropout_layers)?,
    };
    with_precision!(args.precision, T => {
        let (ck, vocab) = load_model::<T>(&args.files)?;
        let mut m = mask(&args.mask)?;
        if args.freeze_embeddings {
            m = match m {
                ComponentMask::Full => toy_train_mask(&ck.config),
                other => other,
            };
        }
        mask_parameters(&ck.config, &m)?;
        let seqs = encode_corpus(&lines, &vocab, ck.config.max_seq)?;
        let out = train_lm_tokens_with_dropout(&seqs, &ck, &m, &cfg, &dropout)?;
        out.checkpoint.save(&args.output)?;
        let config = json!({
            "checkpoint": path_str(&args.files.checkpoint),
            "corpus": path_str(&args.corpus),
            "mask": m.to_string(),
            "train": cfg,
            "dropout": dropout,
            "output": path_str(&args.output),
        });
        let mut r = curve_report("train", ctx.seed, config, &out.curve);
        r.aggregates.insert("trainable_parameters".into(), out.trainable_parameters as f64);
        r.aggregates.insert("steps".into(), out.steps as f64);
        ctx.emit(&r)
    })
}

struct Prepared<T> {
    ck: Checkpoint<T>,
    vocab: Vocab,
    samples: Vec<TemplateSample>,
    pairs: Vec<CounterfactualPair>,
    unpaired: usize,
    inputs: Value,
}

fn prepare<T: Scalar>(a: &SampleArgs) -> Result<Prepared<T>> {
    let (ck, vocab) = load_model::<T>(&a.files)?;
    let templates = match &a.templates {
        Some(p) => {
            require_file(p)?;
            biaspath::harness::load_templates(p)?
        }
        None => default_templates(),
    };
    let professions = match &a.professions {
        Some(p) => {
            require_file(p)?;
            Professions::load(p)?
        }
        None => Professions::shipped(),
    };
    let pronouns = PronounTokens::from_vocab(&vocab)?;
    let samples = build_samples(&templates, &professions, &vocab, pronouns)?;
    let mode = match a.mode {
        Mode::LastToken => SpanMode::LastToken,
        Mode::AllTokens => SpanMode::AllTokens,
    };
    let pairing = match a.pairing {
        Pairing::Anchor => PairingMode::Anchor,
        Pairing::SameLength => PairingMode::SameLength,
    };
    let (pairs, failed) = build_pairs(&samples, &professions, &vocab, pronouns, pairing, mode);
    for (i, e) in &failed {
        eprintln!("warning: sample {i} left unpaired: {e}");
    }
    let inputs = json!({
        "checkpoint": path_str(&a.files.checkpoint),
        "vocab": path_str(&a.files.vocab),
        "templates": a.templates.as_deref().map(path_str),
        "professions": a.professions.as_deref().map(path_str),
        "mode": mode,
        "pairing": pairing,
        "precision": format!("{:?}", a.precision).to_lowercase(),
    });
    Ok(Prepared {
        ck,
        vocab,
        samples,
        pairs,
        unpaired: failed.len(),
        inputs,
    })
}

/// Adds the shared inputs to the report config and records unpaired samples.
fn finish<T>(mut r: ExperimentReport, p: &Prepared<T>) -> ExperimentReport {
    r.config = json!({ "inputs": p.inputs, "experiment": r.config });
    r.aggregates.insert("unpaired_samples".into(), p.unpaired as f64);
    r
}

fn run(ctx: &Ctx, cmd: RunCmd) -> Result<()> {
    let seed = ctx.seed;
    let report = match cmd {
        RunCmd::MlpSweep {
            samples,
            layers: l,
            single,
        } => {
            let l = layers(&l)?;
            if l.is_empty() {
                return Err(config_err("--layers selects no layer"));
            }
            let sets: Vec<BTreeSet<usize>> = if single {
                l.iter().map(|&x| BTreeSet::from([x])).collect()
            } else {
                (1..=l.len()).map(|n| l.iter().copied().take(n).collect()).collect()
            };
            with_precision!(samples.precision, T => {
                let p = prepare::<T>(&samples)?;
                finish(exp_mlp_sweep(&p.ck, &p.pairs, &sets, seed)?, &p)
            })
        }
        RunCmd::AttnTopk { samples, k, ceiling } => with_precision!(samples.precision, T => {
            let p = prepare::<T>(&samples)?;
            let ceiling = ceiling.unwrap_or(p.ck.config.n_layers - 1);
            finish(exp_attn_topk(&p.ck, &p.pairs, &k, ceiling, seed)?, &p)
        }),
        RunCmd::UpperMlp { samples, floor } => with_precision!(samples.precision, T => {
            let p = prepare::<T>(&samples)?;
            let floor = floor.unwrap_or(p.ck.config.n_layers / 2);
            finish(exp_upper_mlp(&p.ck, &p.pairs, floor, seed)?, &p)
        }),
        RunCmd::LogitLens { samples } => with_precision!(samples.precision, T => {
            let p = prepare::<T>(&samples)?;
            finish(exp_logit_lens(&p.ck, &p.samples, seed)?, &p)
        }),
        RunCmd::GenCheck {
            samples,
            family: f,
            layers: l,
            n_samples,
            n_tokens,
            filter,
        } => {
            let patch = SpanPatch {
                family: family(f),
                layers: layers(&l)?,
            };
            let filter = match filter {
                Some(path) => {
                    require_file(&path)?;
                    GenderWordFilter::load(&path)?
                }
                None => GenderWordFilter::shipped(),
            };
            with_precision!(samples.precision, T => {
                let p = prepare::<T>(&samples)?;
                let r = exp_generation_check(&p.ck, &p.vocab, &p.pairs, &patch, &filter, n_samples, n_tokens, seed)?;
                finish(r, &p)
            })
        }
        RunCmd::FeatureProbe {
            files,
            prompt,
            counter,
            family: f,
            layers: l,
            site,
            top,
            precision,
        } => {
            let site = match site {
                Site::Span => ProbeSite::Span,
                Site::Final => ProbeSite::Final,
            };
            let l = layers(&l)?;
            with_precision!(precision, T => {
                let (ck, vocab) = load_model::<T>(&files)?;
                let probe = exp_feature_probe(&ck, &vocab, &prompt, &counter, family(f), &l, site, top)?;
                for (before, after) in probe.before.iter().zip(&probe.after) {
                    println!("{:>16} {:.4}   {:>16} {:.4}", before.token, before.prob, after.token, after.prob);
                }
                let config = json!({
                    "checkpoint": path_str(&files.checkpoint),
                    "prompt": prompt,
                    "counter": counter,
                    "family": family(f).as_str(),
                    "layers": l,
                    "site": site,
                    "top": top,
                });
                probe.to_report(config, seed)
            })
        }
        RunCmd::AttributionOracle {
            samples,
            ceiling,
            max_pairs,
        } => with_precision!(samples.precision, T => {
            let p = prepare::<T>(&samples)?;
            let ceiling = ceiling.unwrap_or(p.ck.config.n_layers - 1);
            finish(exp_attribution_oracle(&p.ck, &p.pairs, ceiling, max_pairs, seed)?, &p)
        }),
    };
    for (k, v) in &report.aggregates {
        println!("{k}: {v}");
    }
    ctx.emit(&report)
}

fn debias(ctx: &Ctx, args: DebiasArgs) -> Result<()> {
    let corpus = read_lines(&args.corpus)?;
    let neutral = read_lines(&args.neutral)?;
    let mut eval_sets = BTreeMap::new();
    for item in &args.eval {
        let (name, path) = item
            .split_once('=')
            .ok_or_else(|| config_err(format!("--eval expects name=path, got {item:?}")))?;
        let path = Path::new(path);
        require_file(path)?;
        eval_sets.insert(name.to_string(), load_pairs(path)?);
    }
    let cfg = train_config(&args.optim, ctx.seed)?;
    let m = mask(&args.mask)?;
    with_precision!(args.precision, T => {
        let (ck, vocab) = load_model::<T>(&args.files)?;
        mask_parameters(&ck.config, &m)?;
        let (rep, out) = debias_run(&ck, &vocab, &m, &corpus, &eval_sets, &neutral, &cfg)?;
        out.checkpoint.save(&args.output)?;
        let config = json!({
            "checkpoint": path_str(&args.files.checkpoint),
            "corpus": path_str(&args.corpus),
            "neutral": path_str(&args.neutral),
            "eval": args.eval,
            "mask": rep.mask,
            "train": cfg,
            "output": path_str(&args.output),
        });
        let mut r = ExperimentReport::new("debias", ctx.seed, config, &["eval_set", "before", "after"]);
        for row in &rep.preference {
            r.push_row(vec![json!(row.eval_set), json!(row.before), json!(row.after)]);
            r.aggregates.insert(format!("preference_before[{}]", row.eval_set), row.before);
            r.aggregates.insert(format!("preference_after[{}]", row.eval_set), row.after);
        }
        r.aggregates.insert("perplexity_before".into(), rep.perplexity_before);
        r.aggregates.insert("perplexity_after".into(), rep.perplexity_after);
        r.aggregates.insert("perplexity_increase".into(), rep.perplexity_increase());
        r.aggregates.insert("trainable_parameters".into(), rep.trainable_parameters as f64);
        r.aggregates.insert("steps".into(), rep.steps as f64);
        r.extra.insert("curve".into(), json!(rep.curve));
        for (k, v) in &r.aggregates {
            println!("{k}: {v}");
        }
        ctx.emit(&r)
    })
}

fn eval_preference(ctx: &Ctx, files: &ModelFiles, paths: &[PathBuf], precision: Precision) -> Result<()> {
    let mut sets = Vec::new();
    for p in paths {
        require_file(p)?;
        sets.push((path_str(p), load_pairs(p)?));
    }
    with_precision!(precision, T => {
        let (ck, vocab) = load_model::<T>(files)?;
        let config = json!({ "checkpoint": path_str(&files.checkpoint), "pairs": paths.iter().map(|p| path_str(p)).collect::<Vec<_>>() });
        let mut r = ExperimentReport::new(
            "preference",
            ctx.seed,
            config,
            &["set", "pair", "category", "stereo_logprob", "anti_logprob", "prefers_stereo", "token_length_mismatch"],
        );
        for (name, pairs) in &sets {
            for (i, pair) in pairs.iter().enumerate() {
                let s = score_pair(pair, &ck, &vocab)?;
                r.push_row(vec![
                    json!(name),
                    json!(i),
                    json!(pair.bias_category),
                    json!(s.stereo_logprob),
                    json!(s.anti_logprob),
                    json!(s.prefers_stereo),
                    json!(s.token_length_mismatch),
                ]);
            }
            let f = preference_fraction(pairs, &ck, &vocab)?;
            println!("{name}: preference {f}");
            r.aggregates.insert(format!("preference[{name}]"), f);
        }
        ctx.emit(&r)
    })
}

fn data(ctx: &Ctx, cmd: DataCmd) -> Result<()> {
    match cmd {
        DataCmd::Synth {
            bias,
            profession_lines,
            object_lines,
            neutral_lines,
        } => {
            let spec = SynthCorpusSpec {
                bias,
                profession_lines,
                object_lines,
                neutral_lines,
                seed: ctx.seed,
                ..SynthCorpusSpec::default()
            };
            spec.validate()?;
            let corpus = gen_synth_corpus(&spec)?;
            let vocab = toy_vocab(&spec.professions, &spec.templates)?;
            let dir = &ctx.out_dir;
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let write_lines = |name: &str, lines: &[String]| -> Result<()> {
                let path = dir.join(name);
                fs::write(&path, lines.iter().map(|l| format!("{l}\n")).collect::<String>())
                    .with_context(|| format!("writing {}", path.display()))
            };
            write_lines("corpus.txt", &corpus.lines)?;
            write_lines("counterfactual.txt", &corpus.counterfactual)?;
            write_lines("neutral_eval.txt", &corpus.neutral_eval)?;
            write_pairs(&dir.join("pairs.jsonl"), &corpus.pairs)?;
            vocab.save(&dir.join("vocab.txt"))?;
            let mut r = ExperimentReport::new(
                "synth",
                ctx.seed,
                json!({ "bias": bias, "profession_lines": profession_lines, "object_lines": object_lines, "neutral_lines": neutral_lines }),
                &["profession", "gender", "lines", "stereotypical"],
            );
            let mut counts: BTreeMap<(String, &str), (usize, usize)> = BTreeMap::new();
            for l in &corpus.profession_lines {
                let e = counts.entry((l.profession.clone(), l.gender.as_str())).or_default();
                e.0 += 1;
                e.1 += l.stereotypical as usize;
            }
            for ((p, g), (n, s)) in counts {
                r.push_row(vec![json!(p), json!(g), json!(n), json!(s)]);
            }
            let stereo = corpus.profession_lines.iter().filter(|l| l.stereotypical).count();
            r.aggregates.insert("lines".into(), corpus.lines.len() as f64);
            r.aggregates.insert("pairs".into(), corpus.pairs.len() as f64);
            r.aggregates.insert("vocab_size".into(), vocab.len() as f64);
            r.aggregates.insert(
                "stereotypical_fraction".into(),
                stereo as f64 / corpus.profession_lines.len() as f64,
            );
            ctx.emit(&r)
        }
        DataCmd::FilterPerturb { input, filter } => {
            require_file(&input)?;
            let filter = match filter {
                Some(path) => {
                    require_file(&path)?;
                    GenderWordFilter::load(&path)?
                }
                None => GenderWordFilter::shipped(),
            };
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let out = filter_perturbation_corpus(&text, &filter);
            fs::create_dir_all(&ctx.out_dir).with_context(|| format!("creating {}", ctx.out_dir.display()))?;
            let kept_path = ctx.out_dir.join("perturbations_filtered.jsonl");
            fs::write(&kept_path, write_perturbation_records(&out.kept))
                .with_context(|| format!("writing {}", kept_path.display()))?;
            let mut r = ExperimentReport::new(
                "filter_perturb",
                ctx.seed,
                json!({ "input": path_str(&input) }),
                &["original", "perturbed"],
            );
            for rec in &out.kept {
                r.push_row(vec![json!(rec.original), json!(rec.perturbed)]);
            }
            r.aggregates.insert("kept".into(), out.kept.len() as f64);
            r.aggregates.insert("dropped".into(), out.dropped as f64);
            r.aggregates.insert("malformed".into(), out.malformed as f64);
            println!(
                "kept {} dropped {} malformed {}",
                out.kept.len(),
                out.dropped,
                out.malformed
            );
            ctx.emit(&r)
        }
    }
}
