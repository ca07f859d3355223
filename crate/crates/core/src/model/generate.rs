use super::forward::{KvCache, RunRequest};
use super::{Checkpoint, TokenId};
use crate::error::{Error, Result};
use crate::patch::{Capture, PatchSpec};
use crate::tensor::Scalar;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Checkpoint<T> {
    /// Greedy decoding of `n_new` tokens. Patches apply to the prompt only;
    /// generated positions run unpatched on top of the patched key/value cache.
    pub fn generate_greedy(&self, prompt: &[TokenId], n_new: usize, patches: &PatchSpec<T>) -> Result<Vec<TokenId>> {
        if let Some(p) = patches.max_position() {
            if p >= prompt.len() {
                return Err(Error::PatchPosition {
                    position: p,
                    prompt_len: prompt.len(),
                });
            }
        }
        let total = prompt.len() + n_new;
        if total > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: total,
                max: self.config.max_seq,
            });
        }
        let plan = patches.resolve(self, prompt.len())?;
        let mut kv = KvCache::new(self.config.n_layers, self.config.n_heads);
        let capture = Capture::Nothing;
        let prefill = self.run_raw(
            prompt,
            Some(&mut kv),
            &RunRequest {
                plan: Some(&plan),
                capture: &capture,
                tape: false,
                gates: None,
            },
        )?;
        let mut out = Vec::with_capacity(n_new);
        if n_new == 0 {
            return Ok(out);
        }
        let mut next = argmax(prefill.logits.row(prompt.len() - 1));
        out.push(next);
        while out.len() < n_new {
            let step = self.run_raw(
                &[next],
                Some(&mut kv),
                &RunRequest {
                    plan: None,
                    capture: &capture,
                    tape: false,
                    gates: None,
                },
            )?;
            next = argmax(step.logits.row(0));
            out.push(next);
        }
        Ok(out)
    }

    /// Greedy decoding by full recomputation each step; reference for the
    /// cached path.
    pub fn generate_greedy_uncached(&self, prompt: &[TokenId], n_new: usize) -> Result<Vec<TokenId>> {
        let mut seq = prompt.to_vec();
        for _ in 0..n_new {
            let out = self.forward(&seq, &Capture::Nothing)?;
            seq.push(argmax(out.logits.row(seq.len() - 1)));
        }
        Ok(seq[prompt.len()..].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::patch::{AblationSource, HookPoint, HookSite, PatchEntry};

    fn model() -> Checkpoint<f64> {
        Checkpoint::init_random(ModelConfig::tiny_for_tests(), 3).unwrap()
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn cached_matches_recompute() {
        let ck = model();
        let prompt = [1, 2, 3];
        let cached = ck.generate_greedy(&prompt, 6, &PatchSpec::new()).unwrap();
        assert_eq!(cached, ck.generate_greedy_uncached(&prompt, 6).unwrap());
    }

    #[test]
    fn cached_decode_logits_match_full_forward() {
        let ck = model();
        let seq = [1usize, 5, 2, 7, 3];
        let full = ck.forward(&seq, &Capture::Nothing).unwrap();
        let mut kv = KvCache::new(2, 2);
        let req = RunRequest {
            plan: None,
            capture: &Capture::Nothing,
            tape: false,
            gates: None,
        };
        ck.run_raw(&seq[..2], Some(&mut kv), &req).unwrap();
        for t in 2..seq.len() {
            let step = ck.run_raw(&seq[t..t + 1], Some(&mut kv), &req).unwrap();
            for (a, b) in step.logits.row(0).iter().zip(full.logits.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_beyond_prompt_rejected() {
        let ck = model();
        let mut spec = PatchSpec::new();
        spec.push(PatchEntry {
            hook: HookPoint::at(HookSite::MlpOut(0), 3),
            source: AblationSource::Zero,
        })
        .unwrap();
        assert!(matches!(
            ck.generate_greedy(&[1, 2, 3], 2, &spec),
            Err(Error::PatchPosition {
                position: 3,
                prompt_len: 3
            })
        ));
    }
}
