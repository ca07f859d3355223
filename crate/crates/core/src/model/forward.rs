//! Forward pass.
//!
//! One routine processes a run of new tokens at absolute positions
//! `offset..offset+n`, attending over any cached keys/values from earlier
//! positions. A full forward is the `offset == 0` case with an empty cache, and
//! a decode step is `n == 1`, so cached decoding shares every kernel with the
//! full recompute.

use super::{Checkpoint, TokenId};
use crate::error::{Error, Result};
use crate::patch::{ActivationCache, Capture, HookSite, PatchPlan};
use crate::tensor::kernels::{axpy, dot, gemm_nn, rmsnorm_rows, rope_in_place, silu, softmax_in_place};
use crate::tensor::{c, Scalar, Tensor};

/// Logits plus whatever the run captured.
#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    /// `[seq, vocab]`
    pub logits: Tensor<T>,
    pub cache: ActivationCache<T>,
}

/// Intermediates of one block, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerTape<T> {
    pub x_in: Vec<T>,
    pub ln1: Vec<T>,
    pub ln1_inv: Vec<T>,
    /// Per head `[seq, d_head]`, rotary already applied to q and k.
    pub q: Vec<Vec<T>>,
    pub k: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Per head `[seq, seq]`, zero above the diagonal.
    pub probs: Vec<Vec<T>>,
    pub z: Vec<Vec<T>>,
    pub x_mid: Vec<T>,
    pub ln2: Vec<T>,
    pub ln2_inv: Vec<T>,
    pub gate: Vec<T>,
    pub up: Vec<T>,
    pub hidden: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct Tape<T> {
    pub tokens: Vec<TokenId>,
    pub gates: Option<Gates<T>>,
    pub layers: Vec<LayerTape<T>>,
    pub x_final: Vec<T>,
    pub final_ln: Vec<T>,
    pub final_inv: Vec<T>,
}

/// Rotated keys and values for every processed position, per layer and head.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    len: usize,
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(n_layers: usize, n_heads: usize) -> Self {
        Self {
            len: 0,
            keys: vec![vec![Vec::new(); n_heads]; n_layers],
            values: vec![vec![Vec::new(); n_heads]; n_layers],
        }
    }

    /// Number of positions already cached.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub(crate) struct RunRequest<'a, T> {
    pub plan: Option<&'a PatchPlan<T>>,
    pub capture: &'a Capture,
    pub tape: bool,
    pub gates: Option<&'a Gates<T>>,
}

/// Multipliers on each head's and each MLP's output for one run. Training
/// uses them for component dropout; the backward pass honours them.
#[derive(Debug, Clone, PartialEq)]
pub struct Gates<T> {
    /// `[layer][head]`
    pub heads: Vec<Vec<T>>,
    pub mlp: Vec<T>,
}

impl<T: Scalar> Gates<T> {
    pub fn ones(n_layers: usize, n_heads: usize) -> Self {
        Self {
            heads: vec![vec![T::one(); n_heads]; n_layers],
            mlp: vec![T::one(); n_layers],
        }
    }

    fn check(&self, n_layers: usize, n_heads: usize) -> Result<()> {
        if self.mlp.len() != n_layers || self.heads.len() != n_layers || self.heads.iter().any(|h| h.len() != n_heads) {
            return Err(Error::Config(format!(
                "gates must cover {n_layers} layers × {n_heads} heads"
            )));
        }
        Ok(())
    }
}

pub(crate) fn scale_unless_one<T: Scalar>(buf: &mut [T], g: T) {
    if g != T::one() {
        buf.iter_mut().for_each(|v| *v *= g);
    }
}

pub(crate) struct RawOutput<T> {
    pub logits: Tensor<T>,
    pub cache: ActivationCache<T>,
    pub tape: Option<Tape<T>>,
}

fn hook<T: Scalar>(
    site: HookSite,
    buf: &mut [T],
    seq: usize,
    req: &RunRequest<'_, T>,
    cache: &mut ActivationCache<T>,
) -> Result<()> {
    if let Some(plan) = req.plan {
        plan.apply(site, buf, seq)?;
    }
    if req.capture.contains(site) {
        let width = buf.len() / seq.max(1);
        cache.insert(site, Tensor::new(vec![seq, width], buf.to_vec())?)?;
    }
    Ok(())
}

impl<T: Scalar> Checkpoint<T> {
    fn check_tokens(&self, tokens: &[TokenId], offset: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        let total = offset + tokens.len();
        if total > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: total,
                max: self.config.max_seq,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Plain forward pass recording the requested hook sites.
    pub fn forward(&self, tokens: &[TokenId], capture: &Capture) -> Result<RunOutput<T>> {
        let raw = self.run_raw(
            tokens,
            None,
            &RunRequest {
                plan: None,
                capture,
                tape: false,
                gates: None,
            },
        )?;
        Ok(RunOutput {
            logits: raw.logits,
            cache: raw.cache,
        })
    }

    pub(crate) fn run_raw(
        &self,
        tokens: &[TokenId],
        kv: Option<&mut KvCache<T>>,
        req: &RunRequest<'_, T>,
    ) -> Result<RawOutput<T>> {
        let offset = kv.as_ref().map_or(0, |k| k.len);
        self.check_tokens(tokens, offset)?;
        if offset > 0 && (req.plan.is_some() || req.tape) {
            return Err(Error::Config("patches and tapes apply to prefill runs only".into()));
        }
        if req.tape && req.plan.is_some() {
            return Err(Error::Config("backward through a patched run is not supported".into()));
        }
        let cfg = &self.config;
        if let Some(g) = req.gates {
            g.check(cfg.n_layers, cfg.n_heads)?;
        }
        let (n, d, nh, dh, m) = (tokens.len(), cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp);
        let eps = c::<T>(cfg.norm_eps);
        let scale = T::one() / c::<T>(dh as f64).sqrt();
        let mut cache = ActivationCache::new(n, d);
        let mut kv = kv;

        let mut x = vec![T::zero(); n * d];
        for (t, &id) in tokens.iter().enumerate() {
            x[t * d..(t + 1) * d].copy_from_slice(self.params.embed.row(id));
        }

        let mut layers = Vec::with_capacity(if req.tape { cfg.n_layers } else { 0 });
        for (l, block) in self.params.blocks.iter().enumerate() {
            hook(HookSite::ResidPre(l), &mut x, n, req, &mut cache)?;
            let x_in = if req.tape { x.clone() } else { Vec::new() };

            let mut ln1 = vec![T::zero(); n * d];
            let mut ln1_inv = vec![T::zero(); n];
            rmsnorm_rows(&x, block.ln1.data(), eps, &mut ln1, &mut ln1_inv);

            let mut attn_out = vec![T::zero(); n * d];
            let mut head_out = vec![T::zero(); n * d];
            let (mut qs, mut ks, mut vs, mut ps, mut zs) = (vec![], vec![], vec![], vec![], vec![]);
            for h in 0..nh {
                let wq = &block.w_q.data()[h * d * dh..(h + 1) * d * dh];
                let wk = &block.w_k.data()[h * d * dh..(h + 1) * d * dh];
                let wv = &block.w_v.data()[h * d * dh..(h + 1) * d * dh];
                let wo = &block.w_o.data()[h * dh * d..(h + 1) * dh * d];
                let mut q = vec![T::zero(); n * dh];
                let mut k = vec![T::zero(); n * dh];
                let mut v = vec![T::zero(); n * dh];
                gemm_nn(&ln1, wq, &mut q, n, d, dh, false);
                gemm_nn(&ln1, wk, &mut k, n, d, dh, false);
                gemm_nn(&ln1, wv, &mut v, n, d, dh, false);
                rope_in_place(&mut q, n, 1, dh, cfg.rope_base, offset, 1.0);
                rope_in_place(&mut k, n, 1, dh, cfg.rope_base, offset, 1.0);

                // keys/values visible to this run: cached prefix then the new rows
                let (all_k, all_v): (&[T], &[T]) = match kv.as_deref_mut() {
                    Some(cache_kv) => {
                        cache_kv.keys[l][h].extend_from_slice(&k);
                        cache_kv.values[l][h].extend_from_slice(&v);
                        (&cache_kv.keys[l][h], &cache_kv.values[l][h])
                    }
                    None => (&k, &v),
                };
                let total = offset + n;
                let mut probs = vec![T::zero(); n * total];
                let mut z = vec![T::zero(); n * dh];
                for t in 0..n {
                    let visible = offset + t + 1;
                    let qrow = &q[t * dh..(t + 1) * dh];
                    let prow = &mut probs[t * total..t * total + visible];
                    for (s, p) in prow.iter_mut().enumerate() {
                        *p = dot(qrow, &all_k[s * dh..(s + 1) * dh]) * scale;
                    }
                    if !softmax_in_place(prow) {
                        return Err(Error::EmptyAttentionRow { row: t });
                    }
                    let zrow = &mut z[t * dh..(t + 1) * dh];
                    for (s, &p) in prow.iter().enumerate() {
                        axpy(p, &all_v[s * dh..(s + 1) * dh], zrow);
                    }
                }
                gemm_nn(&z, wo, &mut head_out, n, dh, d, false);
                if let Some(g) = req.gates {
                    scale_unless_one(&mut head_out, g.heads[l][h]);
                }
                hook(HookSite::AttnHeadOut(l, h), &mut head_out, n, req, &mut cache)?;
                for (a, &b) in attn_out.iter_mut().zip(&head_out) {
                    *a += b;
                }
                if req.tape {
                    qs.push(q);
                    ks.push(k);
                    vs.push(v);
                    ps.push(probs);
                    zs.push(z);
                }
            }
            hook(HookSite::AttnOut(l), &mut attn_out, n, req, &mut cache)?;
            for (xi, &a) in x.iter_mut().zip(&attn_out) {
                *xi += a;
            }
            let x_mid = if req.tape { x.clone() } else { Vec::new() };

            let mut ln2 = vec![T::zero(); n * d];
            let mut ln2_inv = vec![T::zero(); n];
            rmsnorm_rows(&x, block.ln2.data(), eps, &mut ln2, &mut ln2_inv);
            let mut gate = vec![T::zero(); n * m];
            let mut up = vec![T::zero(); n * m];
            gemm_nn(&ln2, block.w_gate.data(), &mut gate, n, d, m, false);
            gemm_nn(&ln2, block.w_up.data(), &mut up, n, d, m, false);
            let hidden: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
            let mut mlp_out = vec![T::zero(); n * d];
            gemm_nn(&hidden, block.w_down.data(), &mut mlp_out, n, m, d, false);
            if let Some(g) = req.gates {
                scale_unless_one(&mut mlp_out, g.mlp[l]);
            }
            hook(HookSite::MlpOut(l), &mut mlp_out, n, req, &mut cache)?;
            for (xi, &a) in x.iter_mut().zip(&mlp_out) {
                *xi += a;
            }
            hook(HookSite::ResidPost(l), &mut x, n, req, &mut cache)?;

            if req.tape {
                layers.push(LayerTape {
                    x_in,
                    ln1,
                    ln1_inv,
                    q: qs,
                    k: ks,
                    v: vs,
                    probs: ps,
                    z: zs,
                    x_mid,
                    ln2,
                    ln2_inv,
                    gate,
                    up,
                    hidden,
                });
            }
        }

        let mut fin = vec![T::zero(); n * d];
        let mut fin_inv = vec![T::zero(); n];
        rmsnorm_rows(&x, self.params.final_ln.data(), eps, &mut fin, &mut fin_inv);
        let vocab = cfg.vocab_size;
        let mut logits = vec![T::zero(); n * vocab];
        gemm_nn(&fin, self.params.unembed.data(), &mut logits, n, d, vocab, false);
        if let Some(kv) = kv {
            kv.len += n;
        }
        let tape = req.tape.then(|| Tape {
            tokens: tokens.to_vec(),
            gates: req.gates.cloned(),
            layers,
            x_final: x,
            final_ln: fin,
            final_inv: fin_inv,
        });
        Ok(RawOutput {
            logits: Tensor::new(vec![n, vocab], logits)?,
            cache,
            tape,
        })
    }

    /// Final normalization followed by unembedding, applied to residual rows.
    pub fn unembed_residual(&self, resid: &[T]) -> Result<Tensor<T>> {
        let d = self.config.d_model;
        if !resid.len().is_multiple_of(d) {
            return Err(Error::shape(
                "unembed_residual",
                format!("multiple of {d}"),
                resid.len(),
            ));
        }
        let n = resid.len() / d;
        let mut fin = vec![T::zero(); n * d];
        let mut inv = vec![T::zero(); n];
        rmsnorm_rows(
            resid,
            self.params.final_ln.data(),
            c::<T>(self.config.norm_eps),
            &mut fin,
            &mut inv,
        );
        let vocab = self.config.vocab_size;
        let mut logits = vec![T::zero(); n * vocab];
        gemm_nn(&fin, self.params.unembed.data(), &mut logits, n, d, vocab, false);
        Tensor::new(vec![n, vocab], logits)
    }
}
