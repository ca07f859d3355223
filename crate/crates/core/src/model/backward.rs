//! Reverse-mode pass over a recorded forward tape.

use super::forward::{scale_unless_one, Gates, RunRequest, Tape};
use super::{Checkpoint, Params, TokenId};
use crate::error::{Error, Result};
use crate::metrics::MetricSpec;
use crate::patch::{ActivationCache, Capture, HookSite};
use crate::tensor::kernels::{
    cross_entropy, gemm_nt, gemm_tn, rmsnorm_rows_backward, rope_in_place, silu, silu_grad, softmax_row_backward,
};
use crate::tensor::{c, Scalar, Tensor};

/// Result of differentiating a scalar objective through one run.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub value: T,
    pub logits: Tensor<T>,
    /// Forward activations at the requested sites.
    pub activations: ActivationCache<T>,
    /// Gradients of the objective at the requested sites.
    pub hooks: ActivationCache<T>,
    pub params: Option<Params<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    fn taped_run(
        &self,
        tokens: &[TokenId],
        capture: &Capture,
        gates: Option<&Gates<T>>,
    ) -> Result<(Tensor<T>, ActivationCache<T>, Tape<T>)> {
        let raw = self.run_raw(
            tokens,
            None,
            &RunRequest {
                plan: None,
                capture,
                tape: true,
                gates,
            },
        )?;
        let tape = raw
            .tape
            .ok_or_else(|| Error::Config("forward did not record a tape".into()))?;
        Ok((raw.logits, raw.cache, tape))
    }

    /// Value and gradient of `metric`, with activations and their gradients at
    /// every site in `wrt`; parameter gradients when `with_params` is set.
    pub fn backward_metric(
        &self,
        tokens: &[TokenId],
        metric: &MetricSpec,
        wrt: &Capture,
        with_params: bool,
    ) -> Result<Gradients<T>> {
        let (logits, activations, tape) = self.taped_run(tokens, wrt, None)?;
        let value = metric.value(&logits)?;
        let dlogits = metric.logit_grad(&logits)?;
        let (hooks, params) = self.backward_tape(&tape, dlogits.data(), wrt, with_params)?;
        Ok(Gradients {
            value,
            logits,
            activations,
            hooks,
            params,
        })
    }

    /// Mean next-token cross entropy over the sequence and its parameter
    /// gradient.
    pub fn loss_and_grad(&self, tokens: &[TokenId]) -> Result<(T, Params<T>)> {
        self.loss_and_grad_gated(tokens, None)
    }

    /// [`Self::loss_and_grad`] with head and MLP outputs scaled by `gates`.
    pub fn loss_and_grad_gated(&self, tokens: &[TokenId], gates: Option<&Gates<T>>) -> Result<(T, Params<T>)> {
        if tokens.len() < 2 {
            return Err(Error::NoTargets);
        }
        let (logits, _, tape) = self.taped_run(tokens, &Capture::Nothing, gates)?;
        let mut targets: Vec<usize> = tokens[1..].to_vec();
        targets.push(usize::MAX);
        let (loss, dlogits) = cross_entropy(&logits, &targets, usize::MAX)?;
        let (_, grads) = self.backward_tape(&tape, dlogits.data(), &Capture::Nothing, true)?;
        Ok((loss, grads.expect("parameter gradients requested")))
    }

    pub(crate) fn backward_tape(
        &self,
        tape: &Tape<T>,
        dlogits: &[T],
        wrt: &Capture,
        with_params: bool,
    ) -> Result<(ActivationCache<T>, Option<Params<T>>)> {
        let cfg = &self.config;
        let (n, d, nh, dh, m, vocab) = (
            tape.tokens.len(),
            cfg.d_model,
            cfg.n_heads,
            cfg.d_head,
            cfg.d_mlp,
            cfg.vocab_size,
        );
        if dlogits.len() != n * vocab {
            return Err(Error::shape("backward", n * vocab, dlogits.len()));
        }
        let scale = T::one() / c::<T>(dh as f64).sqrt();
        let mut hooks = ActivationCache::new(n, d);
        let mut grads = with_params.then(|| Params::zeros(cfg));
        let record = |site: HookSite, g: &[T], hooks: &mut ActivationCache<T>| -> Result<()> {
            if wrt.contains(site) {
                hooks.insert(site, Tensor::new(vec![n, d], g.to_vec())?)?;
            }
            Ok(())
        };

        let p = &self.params;
        let mut dfin = vec![T::zero(); n * d];
        gemm_nt(dlogits, p.unembed.data(), &mut dfin, n, vocab, d, false);
        let mut dx = vec![T::zero(); n * d];
        if let Some(g) = grads.as_mut() {
            gemm_tn(&tape.final_ln, dlogits, g.unembed.data_mut(), n, d, vocab, true);
        }
        rmsnorm_rows_backward(
            &tape.x_final,
            p.final_ln.data(),
            &tape.final_inv,
            &dfin,
            &mut dx,
            grads.as_mut().map(|g| g.final_ln.data_mut()),
        );

        for (l, (block, lt)) in p.blocks.iter().zip(&tape.layers).enumerate().rev() {
            let mut gb = grads.as_mut().map(|g| &mut g.blocks[l]);
            record(HookSite::ResidPost(l), &dx, &mut hooks)?;
            record(HookSite::MlpOut(l), &dx, &mut hooks)?;

            // MLP
            let mut dmlp = dx.clone();
            if let Some(gates) = &tape.gates {
                scale_unless_one(&mut dmlp, gates.mlp[l]);
            }
            let mut dhidden = vec![T::zero(); n * m];
            gemm_nt(&dmlp, block.w_down.data(), &mut dhidden, n, d, m, false);
            if let Some(g) = gb.as_deref_mut() {
                gemm_tn(&lt.hidden, &dmlp, g.w_down.data_mut(), n, m, d, true);
            }
            let mut dgate = vec![T::zero(); n * m];
            let mut dup = vec![T::zero(); n * m];
            for i in 0..n * m {
                dgate[i] = dhidden[i] * lt.up[i] * silu_grad(lt.gate[i]);
                dup[i] = dhidden[i] * silu(lt.gate[i]);
            }
            if let Some(g) = gb.as_deref_mut() {
                gemm_tn(&lt.ln2, &dgate, g.w_gate.data_mut(), n, d, m, true);
                gemm_tn(&lt.ln2, &dup, g.w_up.data_mut(), n, d, m, true);
            }
            let mut dln2 = vec![T::zero(); n * d];
            gemm_nt(&dgate, block.w_gate.data(), &mut dln2, n, m, d, false);
            gemm_nt(&dup, block.w_up.data(), &mut dln2, n, m, d, true);
            let mut dx_mid = dx.clone();
            rmsnorm_rows_backward(
                &lt.x_mid,
                block.ln2.data(),
                &lt.ln2_inv,
                &dln2,
                &mut dx_mid,
                gb.as_deref_mut().map(|g| g.ln2.data_mut()),
            );

            record(HookSite::AttnOut(l), &dx_mid, &mut hooks)?;

            // attention
            let mut dln1 = vec![T::zero(); n * d];
            for h in 0..nh {
                record(HookSite::AttnHeadOut(l, h), &dx_mid, &mut hooks)?;
                let w = h * d * dh..(h + 1) * d * dh;
                let wo = &block.w_o.data()[h * dh * d..(h + 1) * dh * d];
                let gated;
                let dhead = match &tape.gates {
                    Some(gates) if gates.heads[l][h] != T::one() => {
                        gated = dx_mid.iter().map(|&v| v * gates.heads[l][h]).collect::<Vec<_>>();
                        &gated
                    }
                    _ => &dx_mid,
                };
                let mut dz = vec![T::zero(); n * dh];
                gemm_nt(dhead, wo, &mut dz, n, d, dh, false);
                if let Some(g) = gb.as_deref_mut() {
                    let dwo = &mut g.w_o.data_mut()[h * dh * d..(h + 1) * dh * d];
                    gemm_tn(&lt.z[h], dhead, dwo, n, dh, d, true);
                }
                let (q, k, v, probs) = (&lt.q[h], &lt.k[h], &lt.v[h], &lt.probs[h]);
                let mut dq = vec![T::zero(); n * dh];
                let mut dk = vec![T::zero(); n * dh];
                let mut dv = vec![T::zero(); n * dh];
                let mut dp = vec![T::zero(); n];
                let mut ds = vec![T::zero(); n];
                for t in 0..n {
                    let visible = t + 1;
                    let prow = &probs[t * n..t * n + visible];
                    let dzr = &dz[t * dh..(t + 1) * dh];
                    for s in 0..visible {
                        let vr = &v[s * dh..(s + 1) * dh];
                        dp[s] = dzr.iter().zip(vr).fold(T::zero(), |a, (&x, &y)| a + x * y);
                        let dvr = &mut dv[s * dh..(s + 1) * dh];
                        for (o, &g) in dvr.iter_mut().zip(dzr) {
                            *o += prow[s] * g;
                        }
                    }
                    softmax_row_backward(prow, &dp[..visible], &mut ds[..visible]);
                    for s in 0..visible {
                        let g = ds[s] * scale;
                        for i in 0..dh {
                            dq[t * dh + i] += g * k[s * dh + i];
                            dk[s * dh + i] += g * q[t * dh + i];
                        }
                    }
                }
                rope_in_place(&mut dq, n, 1, dh, cfg.rope_base, 0, -1.0);
                rope_in_place(&mut dk, n, 1, dh, cfg.rope_base, 0, -1.0);
                for (dproj, wt) in [(&dq, &block.w_q), (&dk, &block.w_k), (&dv, &block.w_v)] {
                    gemm_nt(dproj, &wt.data()[w.clone()], &mut dln1, n, dh, d, true);
                }
                if let Some(g) = gb.as_deref_mut() {
                    gemm_tn(&lt.ln1, &dq, &mut g.w_q.data_mut()[w.clone()], n, d, dh, true);
                    gemm_tn(&lt.ln1, &dk, &mut g.w_k.data_mut()[w.clone()], n, d, dh, true);
                    gemm_tn(&lt.ln1, &dv, &mut g.w_v.data_mut()[w.clone()], n, d, dh, true);
                }
            }
            dx = dx_mid;
            rmsnorm_rows_backward(
                &lt.x_in,
                block.ln1.data(),
                &lt.ln1_inv,
                &dln1,
                &mut dx,
                gb.map(|g| g.ln1.data_mut()),
            );
            record(HookSite::ResidPre(l), &dx, &mut hooks)?;
        }

        if let Some(g) = grads.as_mut() {
            for (t, &id) in tape.tokens.iter().enumerate() {
                let row = g.embed.row_mut(id);
                for (o, &v) in row.iter_mut().zip(&dx[t * d..(t + 1) * d]) {
                    *o += v;
                }
            }
        }
        Ok((hooks, grads))
    }
}
