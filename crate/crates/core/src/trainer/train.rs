use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mask::{mask_parameters, trainable_count, ComponentMask};
use super::optim::{OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::sequence_logprob_tokens;
use crate::model::{Checkpoint, Gates, ModelConfig, Params, TokenId, Vocab};
use crate::tensor::{c, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub curve: Vec<EpochLoss>,
    pub trainable_parameters: usize,
    pub steps: u64,
}

/// Seeded shuffle, then the first `⌊n·fraction⌋` indices (at most `n − 1`)
/// are held out. Returns `(train, validation)`.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * fraction).floor() as usize).min(n.saturating_sub(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

pub fn encode_corpus(lines: &[String], vocab: &Vocab, max_seq: usize) -> Result<Vec<Vec<TokenId>>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let ids = vocab.encode(l);
            if ids.len() < 2 {
                return Err(Error::Data(format!("corpus line {} has fewer than 2 tokens", i + 1)));
            }
            if ids.len() > max_seq {
                return Err(Error::SequenceTooLong {
                    len: ids.len(),
                    max: max_seq,
                });
            }
            Ok(ids)
        })
        .collect()
}

/// Token-weighted mean next-token negative log-likelihood.
pub fn mean_nll<T: Scalar>(checkpoint: &Checkpoint<T>, seqs: &[Vec<TokenId>]) -> Result<f64> {
    let totals: Vec<(f64, usize)> = seqs
        .par_iter()
        .map(|s| Ok((-sequence_logprob_tokens(checkpoint, s)?, s.len() - 1)))
        .collect::<Result<_>>()?;
    let (nll, n) = totals.iter().fold((0.0, 0), |(a, b), &(x, y)| (a + x, b + y));
    if n == 0 {
        return Err(Error::NoTargets);
    }
    Ok(nll / n as f64)
}

pub fn perplexity<T: Scalar>(checkpoint: &Checkpoint<T>, seqs: &[Vec<TokenId>]) -> Result<f64> {
    Ok(mean_nll(checkpoint, seqs)?.exp())
}

fn accumulate<T: Scalar>(into: &mut Params<T>, from: &Params<T>, scale: T) {
    for (a, b) in into.tensors_mut().into_iter().zip(from.tensors()) {
        for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += scale * y;
        }
    }
}

/// Training-time component dropout: each sequence independently zeroes
/// every head with probability `head` and each listed MLP layer with
/// probability `mlp`. No rescaling; evaluation runs the full model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentDropout {
    pub head: f64,
    pub mlp: f64,
    pub mlp_layers: BTreeSet<usize>,
}

impl ComponentDropout {
    pub fn is_active(&self) -> bool {
        self.head > 0.0 || (self.mlp > 0.0 && !self.mlp_layers.is_empty())
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        if !(0.0..1.0).contains(&self.head) || !(0.0..1.0).contains(&self.mlp) {
            return Err(Error::Config("dropout probabilities must lie in [0, 1)".into()));
        }
        if let Some(&l) = self.mlp_layers.iter().find(|&&l| l >= config.n_layers) {
            return Err(Error::Config(format!(
                "dropout layer {l} outside a {}-layer model",
                config.n_layers
            )));
        }
        Ok(())
    }

    fn sample<T: Scalar>(&self, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Gates<T> {
        let mut g = Gates::ones(config.n_layers, config.n_heads);
        for row in &mut g.heads {
            for v in row.iter_mut() {
                if rng.gen_bool(self.head) {
                    *v = T::zero();
                }
            }
        }
        for &l in &self.mlp_layers {
            if rng.gen_bool(self.mlp) {
                g.mlp[l] = T::zero();
            }
        }
        g
    }
}

/// Mean loss and mean gradient over a batch; the reduction runs in batch
/// order so results do not depend on scheduling.
pub fn batch_gradient<T: Scalar>(checkpoint: &Checkpoint<T>, batch: &[&[TokenId]]) -> Result<(T, Params<T>)> {
    batch_gradient_gated(checkpoint, batch, None)
}

fn batch_gradient_gated<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    batch: &[&[TokenId]],
    gates: Option<&[Gates<T>]>,
) -> Result<(T, Params<T>)> {
    let per: Vec<(T, Params<T>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| checkpoint.loss_and_grad_gated(s, gates.map(|g| &g[i])))
        .collect::<Result<_>>()?;
    let scale = T::one() / c::<T>(batch.len() as f64);
    let mut grads = Params::zeros(&checkpoint.config);
    let mut loss = T::zero();
    for (l, g) in &per {
        loss += *l * scale;
        accumulate(&mut grads, g, scale);
    }
    Ok((loss, grads))
}

/// Next-token training on pre-tokenized sequences.
pub fn train_lm_tokens<T: Scalar>(
    seqs: &[Vec<TokenId>],
    checkpoint: &Checkpoint<T>,
    mask: &ComponentMask,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_lm_tokens_with_dropout(seqs, checkpoint, mask, config, &ComponentDropout::default())
}

/// [`train_lm_tokens`] with component dropout.
pub fn train_lm_tokens_with_dropout<T: Scalar>(
    seqs: &[Vec<TokenId>],
    checkpoint: &Checkpoint<T>,
    mask: &ComponentMask,
    config: &TrainConfig,
    dropout: &ComponentDropout,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    dropout.validate(&checkpoint.config)?;
    if seqs.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let regions = mask_parameters(&checkpoint.config, mask)?;
    let trainable_parameters = trainable_count(&regions);
    let mut model = checkpoint.clone();
    let (mut train_idx, val_idx) = split_validation(seqs.len(), config.validation_fraction, config.seed);
    let val: Vec<Vec<TokenId>> = val_idx.iter().map(|&i| seqs[i].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ee_d0fb_a7c4);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd0_0d);
    let mut state = OptimizerState::new(&regions);
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in train_idx.chunks(config.batch_size) {
            let batch: Vec<&[TokenId]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            let gates: Option<Vec<Gates<T>>> = dropout.is_active().then(|| {
                batch
                    .iter()
                    .map(|_| dropout.sample(&model.config, &mut drop_rng))
                    .collect()
            });
            let (loss, grads) = batch_gradient_gated(&model, &batch, gates.as_deref())?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: state.step + 1,
                    reason: format!("loss {loss}"),
                });
            }
            state.apply(&mut model.params, &grads, &regions, config)?;
            sum += loss;
            batches += 1;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_nll(&model, &val)?)
        };
        log::debug!("epoch {epoch}: train {:.4}", sum / batches as f64);
        curve.push(EpochLoss {
            epoch,
            train_loss: sum / batches as f64,
            val_loss,
        });
    }
    Ok(TrainOutcome {
        checkpoint: model,
        curve,
        trainable_parameters,
        steps: state.step,
    })
}

pub fn train_lm<T: Scalar>(
    corpus: &[String],
    checkpoint: &Checkpoint<T>,
    vocab: &Vocab,
    mask: &ComponentMask,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let seqs = encode_corpus(corpus, vocab, checkpoint.config.max_seq)?;
    train_lm_tokens(&seqs, checkpoint, mask, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint<f64> {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 16,
            vocab_size: 262,
            max_seq: 8,
            norm_eps: 1e-5,
            rope_base: 10000.0,
        };
        Checkpoint::init_random(cfg, 7).unwrap()
    }

    fn seqs() -> Vec<Vec<TokenId>> {
        vec![
            vec![256, 257, 258, 259],
            vec![259, 258, 260],
            vec![261, 256, 257],
            vec![260, 261, 259, 256],
        ]
    }

    fn cfg(lr: f64, epochs: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            weight_decay: 0.0,
            batch_size: batch,
            epochs,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let ck = tiny();
        let out = train_lm_tokens(&seqs(), &ck, &ComponentMask::Full, &cfg(1e-2, 0, 2)).unwrap();
        assert_eq!(out.checkpoint.blob_bytes(), ck.blob_bytes());
        assert!(out.curve.is_empty());
    }

    #[test]
    fn full_mask_overfits_four_lines() {
        let out = train_lm_tokens(&seqs(), &tiny(), &ComponentMask::Full, &cfg(3e-2, 150, 4)).unwrap();
        let last = out.curve.last().unwrap().train_loss;
        assert!(last < 0.1, "final loss {last}");
    }

    #[test]
    fn single_batch_loss_is_monotone() {
        let out = train_lm_tokens(&seqs(), &tiny(), &ComponentMask::Full, &cfg(1e-3, 20, 4)).unwrap();
        for w in out.curve.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss, "{:?}", out.curve);
        }
    }

    #[test]
    fn frozen_tensors_bitwise_unchanged() {
        let ck = tiny();
        let mask = ComponentMask::MlpLayers([1].into());
        let out = train_lm_tokens(&seqs(), &ck, &mask, &cfg(1e-2, 2, 2)).unwrap();
        let regions = mask_parameters(&ck.config, &mask).unwrap();
        let before = ck.named_tensors();
        let after = out.checkpoint.named_tensors();
        for (i, ((name, a), (_, b))) in before.iter().zip(&after).enumerate() {
            let trainable = regions.iter().any(|r| r.tensor == i);
            if trainable {
                assert_ne!(a.data(), b.data(), "{name} did not move");
            } else {
                assert_eq!(a.data(), b.data(), "{name} moved");
            }
        }
    }

    #[test]
    fn head_mask_leaves_other_heads_untouched() {
        let ck = tiny();
        let mask = ComponentMask::AttnHeads([(1, 0)].into());
        let out = train_lm_tokens(&seqs(), &ck, &mask, &cfg(1e-2, 2, 2)).unwrap();
        let (a, b) = (&ck.params.blocks[1], &out.checkpoint.params.blocks[1]);
        let slice = 8 * 4;
        for (x, y) in [(&a.w_q, &b.w_q), (&a.w_k, &b.w_k), (&a.w_v, &b.w_v), (&a.w_o, &b.w_o)] {
            assert_eq!(x.data()[slice..], y.data()[slice..]);
            assert_ne!(x.data()[..slice], y.data()[..slice]);
        }
        assert_eq!(ck.params.blocks[0], out.checkpoint.params.blocks[0]);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut c = cfg(1e-2, 2, 2);
        c.validation_fraction = 0.25;
        let a = train_lm_tokens(&seqs(), &tiny(), &ComponentMask::Full, &c).unwrap();
        let b = train_lm_tokens(&seqs(), &tiny(), &ComponentMask::Full, &c).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.checkpoint.blob_bytes(), b.checkpoint.blob_bytes());
        assert!(a.curve[0].val_loss.is_some());
    }

    #[test]
    fn divergence_reports_step() {
        let mut ck = tiny();
        ck.params.final_ln.data_mut()[0] = f64::NAN;
        match train_lm_tokens(&seqs(), &ck, &ComponentMask::Full, &cfg(1e-2, 1, 2)) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn dropout_is_seeded_and_changes_the_run() {
        let c = cfg(1e-2, 2, 2);
        let drop = ComponentDropout {
            head: 0.3,
            mlp: 0.5,
            mlp_layers: [1].into(),
        };
        let a = train_lm_tokens_with_dropout(&seqs(), &tiny(), &ComponentMask::Full, &c, &drop).unwrap();
        let b = train_lm_tokens_with_dropout(&seqs(), &tiny(), &ComponentMask::Full, &c, &drop).unwrap();
        let plain = train_lm_tokens(&seqs(), &tiny(), &ComponentMask::Full, &c).unwrap();
        assert_eq!(a.checkpoint.blob_bytes(), b.checkpoint.blob_bytes());
        assert_ne!(a.checkpoint.blob_bytes(), plain.checkpoint.blob_bytes());
        let bad = ComponentDropout {
            mlp_layers: [2].into(),
            ..drop
        };
        assert!(train_lm_tokens_with_dropout(&seqs(), &tiny(), &ComponentMask::Full, &c, &bad).is_err());
    }

    #[test]
    fn validation_split() {
        let (t, v) = split_validation(20, 0.1, 3);
        assert_eq!((t.len(), v.len()), (18, 2));
        let mut all: Vec<_> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(split_validation(1, 0.5, 0).0.len(), 1);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(train_lm_tokens(&[], &tiny(), &ComponentMask::Full, &cfg(1e-2, 1, 2)).is_err());
    }
}
