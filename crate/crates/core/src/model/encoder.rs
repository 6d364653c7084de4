use rand::{Rng, RngCore};

use super::batch::{Batch, Example};
use super::loss::{combine, cross_entropy, cross_entropy_grad, InstanceLoss, LossBreakdown};
use super::params::{LayerParams, Parameters};
use super::tensor::{
    accumulate_bias_grad, accumulate_weight_grad, axpy, dot, gelu, gelu_grad, gemm, input_grad, layer_norm_backward,
    layer_norm_forward, linear, softmax_in_place, transpose, Matrix,
};
use super::{Encoder, ModelError};
use crate::scalar::Scalar;
use crate::vocab::SEP;

/// Outputs of a forward pass, one entry per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations<F> {
    /// Final hidden states, `len x d_model` at the example's own length.
    pub hidden: Vec<Matrix<F>>,
    /// Vocabulary logits, in the order of the example's masked-LM targets.
    pub mlm_logits: Vec<Vec<Vec<F>>>,
    /// Relation logits, in the order of the example's relation targets.
    pub relation_logits: Vec<Vec<Vec<F>>>,
    /// Two-class logits at `[CLS]`, present when the example has a candidate
    /// segment or a co-occurrence label.
    pub cooc_logits: Vec<Option<Vec<F>>>,
    /// Attention weights per layer, laid out `heads x len x len`.
    pub attention: Vec<Vec<Vec<F>>>,
}

impl<F: Scalar> Activations<F> {
    pub fn x_cls(&self, example: usize) -> &[F] {
        self.hidden[example].row(0)
    }

    /// Hidden states padded with zero rows to `len`.
    pub fn padded_hidden(&self, example: usize, len: usize) -> Matrix<F> {
        let h = &self.hidden[example];
        let mut out = Matrix::zeros(len.max(h.rows), h.cols);
        out.data[..h.data.len()].copy_from_slice(&h.data);
        out
    }
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    a: Vec<F>,
    xhat1: Vec<F>,
    rstd1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    ctx: Vec<F>,
    drop1: Option<Vec<F>>,
    b: Vec<F>,
    xhat2: Vec<F>,
    rstd2: Vec<F>,
    hpre: Vec<F>,
    hact: Vec<F>,
    drop2: Option<Vec<F>>,
}

/// Transposed layer weights, built once per backward pass.
struct TransposedLayer<F> {
    wq: Vec<F>,
    wk: Vec<F>,
    wv: Vec<F>,
    wo: Vec<F>,
    w1: Vec<F>,
    w2: Vec<F>,
}

impl<F: Scalar> TransposedLayer<F> {
    fn new(lp: &LayerParams<F>) -> Self {
        let t = |m: &Matrix<F>| transpose(&m.data, m.rows, m.cols);
        TransposedLayer {
            wq: t(&lp.wq),
            wk: t(&lp.wk),
            wv: t(&lp.wv),
            wo: t(&lp.wo),
            w1: t(&lp.w1),
            w2: t(&lp.w2),
        }
    }
}

#[derive(Debug, Clone)]
struct ExampleCache<F> {
    drop0: Option<Vec<F>>,
    layers: Vec<LayerCache<F>>,
    xhat_f: Vec<F>,
    rstd_f: Vec<F>,
}

/// Activations plus what the backward pass needs, including dropout masks.
#[derive(Debug, Clone)]
pub struct ForwardPass<F> {
    pub activations: Activations<F>,
    caches: Vec<ExampleCache<F>>,
}

fn dropout_mask<F: Scalar>(len: usize, rate: f64, rng: Option<&mut dyn RngCore>) -> Option<Vec<F>> {
    let rng = rng?;
    if rate == 0.0 {
        return None;
    }
    let keep = F::of(1.0 / (1.0 - rate));
    Some(
        (0..len)
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect(),
    )
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn apply_mask<F: Scalar>(x: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        for (a, &b) in x.iter_mut().zip(m) {
            *a *= b;
        }
    }
}

fn has_candidate_segment(ids: &[u32]) -> bool {
    ids.iter().filter(|&&t| t == SEP).count() >= 2
}

/// Segment of every position: 0 through the first `[SEP]`, 1 after it.
pub fn segment_ids(ids: &[u32]) -> Vec<usize> {
    let first_sep = ids.iter().position(|&t| t == SEP).unwrap_or(ids.len());
    (0..ids.len()).map(|i| usize::from(i > first_sep)).collect()
}

/// Multi-head self-attention over all positions. Returns the weights
/// (`heads x n x n`) and the concatenated head outputs (`n x d`).
fn attention_forward<F: Scalar>(q: &[F], k: &[F], v: &[F], n: usize, d: usize, heads: usize) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut probs = vec![F::zero(); heads * n * n];
    let mut ctx = vec![F::zero(); n * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            let row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            for j in 0..n {
                row[j] = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
            }
            softmax_in_place(row);
            let out = &mut ctx[i * d + off..i * d + off + dh];
            for j in 0..n {
                axpy(row[j], &v[j * d + off..j * d + off + dh], out);
            }
        }
    }
    (probs, ctx)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dctx: &[F],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut dq = vec![F::zero(); n * d];
    let mut dk = vec![F::zero(); n * d];
    let mut dv = vec![F::zero(); n * d];
    let mut dp = vec![F::zero(); n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            let dci = &dctx[i * d + off..i * d + off + dh];
            let mut s = F::zero();
            for j in 0..n {
                dp[j] = dot(dci, &v[j * d + off..j * d + off + dh]);
                s += p[j] * dp[j];
                axpy(p[j], dci, &mut dv[j * d + off..j * d + off + dh]);
            }
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..n {
                let ds = p[j] * (dp[j] - s) * scale;
                if ds != F::zero() {
                    axpy(ds, &k[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                    axpy(ds, qi, &mut dk[j * d + off..j * d + off + dh]);
                }
            }
        }
    }
    (dq, dk, dv)
}

impl<F: Scalar> Encoder<F> {
    fn check_example(&self, ex: &Example) -> Result<(), ModelError> {
        let cfg = &self.config;
        let n = ex.ids.len();
        if n == 0 {
            return Err(ModelError::MissingLabelPosition { position: 0, len: 0 });
        }
        if n > cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: n,
                max_len: cfg.max_len,
            });
        }
        if let Some(&token) = ex.ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::InvalidToken {
                token,
                vocab_size: cfg.vocab_size,
            });
        }
        let positions = ex.mlm.iter().map(|&(p, _)| p).chain(ex.relations.iter().map(|&(p, _)| p));
        for position in positions {
            if position >= n {
                return Err(ModelError::MissingLabelPosition { position, len: n });
            }
        }
        for &(_, t) in &ex.mlm {
            if t as usize >= cfg.vocab_size {
                return Err(ModelError::InvalidLabel {
                    label: t as usize,
                    classes: cfg.vocab_size,
                });
            }
        }
        for &(_, r) in &ex.relations {
            if r >= cfg.num_relations {
                return Err(ModelError::InvalidLabel {
                    label: r,
                    classes: cfg.num_relations,
                });
            }
        }
        if let Some(label) = ex.cooc_label {
            if label >= 2 {
                return Err(ModelError::InvalidLabel { label, classes: 2 });
            }
        }
        Ok(())
    }

    /// Runs the encoder stack on one sequence. Returns final hidden states,
    /// attention weights per layer and the backward cache.
    fn encode(
        &self,
        ids: &[u32],
        mut rng: Option<&mut dyn RngCore>,
    ) -> (Matrix<F>, Vec<Vec<F>>, ExampleCache<F>) {
        let cfg = &self.config;
        let p = &self.params;
        let (n, d, ff, heads, rate) = (ids.len(), cfg.d_model, cfg.d_ff, cfg.num_heads, cfg.dropout_rate);

        let mut x = vec![F::zero(); n * d];
        for ((i, &t), seg) in ids.iter().enumerate().zip(segment_ids(ids)) {
            let row = &mut x[i * d..(i + 1) * d];
            row.copy_from_slice(p.token_embedding.row(t as usize));
            axpy(F::one(), p.position_embedding.row(i), row);
            axpy(F::one(), p.segment_embedding.row(seg), row);
        }
        let drop0 = dropout_mask(n * d, rate, reborrow(&mut rng));
        apply_mask(&mut x, &drop0);

        let mut layers = Vec::with_capacity(p.layers.len());
        let mut attention = Vec::with_capacity(p.layers.len());
        for lp in &p.layers {
            let mut a = vec![F::zero(); n * d];
            let mut xhat1 = vec![F::zero(); n * d];
            let mut rstd1 = vec![F::zero(); n];
            layer_norm_forward(&x, &lp.attn_norm_gamma.data, &lp.attn_norm_beta.data, n, &mut a, &mut xhat1, &mut rstd1);
            let mut q = vec![F::zero(); n * d];
            let mut k = vec![F::zero(); n * d];
            let mut v = vec![F::zero(); n * d];
            linear(&a, &lp.wq, &lp.bq.data, n, &mut q);
            linear(&a, &lp.wk, &lp.bk.data, n, &mut k);
            linear(&a, &lp.wv, &lp.bv.data, n, &mut v);
            let (probs, ctx) = attention_forward(&q, &k, &v, n, d, heads);
            let mut o = vec![F::zero(); n * d];
            linear(&ctx, &lp.wo, &lp.bo.data, n, &mut o);
            let drop1 = dropout_mask(n * d, rate, reborrow(&mut rng));
            apply_mask(&mut o, &drop1);
            axpy(F::one(), &o, &mut x);

            let mut b = vec![F::zero(); n * d];
            let mut xhat2 = vec![F::zero(); n * d];
            let mut rstd2 = vec![F::zero(); n];
            layer_norm_forward(&x, &lp.ffn_norm_gamma.data, &lp.ffn_norm_beta.data, n, &mut b, &mut xhat2, &mut rstd2);
            let mut hpre = vec![F::zero(); n * ff];
            linear(&b, &lp.w1, &lp.b1.data, n, &mut hpre);
            let hact: Vec<F> = hpre.iter().map(|&z| gelu(z)).collect();
            let mut f = vec![F::zero(); n * d];
            linear(&hact, &lp.w2, &lp.b2.data, n, &mut f);
            let drop2 = dropout_mask(n * d, rate, reborrow(&mut rng));
            apply_mask(&mut f, &drop2);
            axpy(F::one(), &f, &mut x);

            attention.push(probs);
            layers.push(LayerCache {
                a,
                xhat1,
                rstd1,
                q,
                k,
                v,
                ctx,
                drop1,
                b,
                xhat2,
                rstd2,
                hpre,
                hact,
                drop2,
            });
        }

        let mut hidden = Matrix::zeros(n, d);
        let mut xhat_f = vec![F::zero(); n * d];
        let mut rstd_f = vec![F::zero(); n];
        layer_norm_forward(
            &x,
            &p.final_norm_gamma.data,
            &p.final_norm_beta.data,
            n,
            &mut hidden.data,
            &mut xhat_f,
            &mut rstd_f,
        );
        let cache = ExampleCache {
            drop0,
            layers,
            xhat_f,
            rstd_f,
        };
        (hidden, attention, cache)
    }

    /// Masked-LM logits for one hidden vector, using the tied embedding table.
    pub fn mlm_logits_for(&self, h: &[F]) -> Vec<F> {
        let p = &self.params;
        (0..self.config.vocab_size)
            .map(|t| dot(h, p.token_embedding.row(t)) + p.mlm_bias.data[t])
            .collect()
    }

    pub fn relation_logits_for(&self, h: &[F]) -> Vec<F> {
        let mut out = vec![F::zero(); self.config.num_relations];
        linear(h, &self.params.relation_weight, &self.params.relation_bias.data, 1, &mut out);
        out
    }

    pub fn cooc_logits_for(&self, h: &[F]) -> Vec<F> {
        let mut out = vec![F::zero(); 2];
        linear(h, &self.params.cooc_weight, &self.params.cooc_bias.data, 1, &mut out);
        out
    }

    /// Final hidden states of one unlabeled sequence, without dropout.
    pub fn hidden_states(&self, ids: &[u32]) -> Result<Matrix<F>, ModelError> {
        self.check_example(&Example::unlabeled(ids.to_vec()))?;
        Ok(self.encode(ids, None).0)
    }

    /// Forward pass over a batch. Dropout is active only when an RNG is
    /// supplied and the configured rate is positive.
    pub fn forward(&self, batch: &Batch, mut dropout: Option<&mut dyn RngCore>) -> Result<ForwardPass<F>, ModelError> {
        for ex in &batch.examples {
            self.check_example(ex)?;
        }
        let mut acts = Activations {
            hidden: Vec::with_capacity(batch.len()),
            mlm_logits: Vec::with_capacity(batch.len()),
            relation_logits: Vec::with_capacity(batch.len()),
            cooc_logits: Vec::with_capacity(batch.len()),
            attention: Vec::with_capacity(batch.len()),
        };
        let mut caches = Vec::with_capacity(batch.len());
        for ex in &batch.examples {
            let (hidden, attention, cache) = self.encode(&ex.ids, reborrow(&mut dropout));
            acts.mlm_logits.push(ex.mlm.iter().map(|&(pos, _)| self.mlm_logits_for(hidden.row(pos))).collect());
            acts.relation_logits.push(
                ex.relations
                    .iter()
                    .map(|&(pos, _)| self.relation_logits_for(hidden.row(pos)))
                    .collect(),
            );
            let cooc = (ex.cooc_label.is_some() || has_candidate_segment(&ex.ids)).then(|| self.cooc_logits_for(hidden.row(0)));
            acts.cooc_logits.push(cooc);
            acts.attention.push(attention);
            acts.hidden.push(hidden);
            caches.push(cache);
        }
        Ok(ForwardPass {
            activations: acts,
            caches,
        })
    }

    /// Per-example loss terms. Label positions were validated by `forward`.
    pub fn instance_losses(&self, fp: &ForwardPass<F>, batch: &Batch) -> Vec<InstanceLoss> {
        let acts = &fp.activations;
        batch
            .examples
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let mlm = (!ex.mlm.is_empty()).then(|| {
                    let sum: f64 = ex
                        .mlm
                        .iter()
                        .zip(&acts.mlm_logits[i])
                        .map(|(&(_, t), z)| cross_entropy(z, t as usize))
                        .sum();
                    sum / ex.mlm.len() as f64
                });
                let rel = (!ex.relations.is_empty()).then(|| {
                    ex.relations
                        .iter()
                        .zip(&acts.relation_logits[i])
                        .map(|(&(_, r), z)| cross_entropy(z, r))
                        .sum()
                });
                let occur = ex.cooc_label.map(|label| {
                    let z = acts.cooc_logits[i].as_ref().expect("logits exist for labeled examples");
                    cross_entropy(z, label)
                });
                InstanceLoss { mlm, rel, occur }
            })
            .collect()
    }

    pub fn loss(&self, fp: &ForwardPass<F>, batch: &Batch) -> LossBreakdown {
        combine(&self.instance_losses(fp, batch))
    }

    /// Gradients of `l_total` for every parameter.
    pub fn backward(&self, fp: &ForwardPass<F>, batch: &Batch) -> Parameters<F> {
        let mut grads = Parameters::zeros(&self.config);
        let transposed: Vec<TransposedLayer<F>> = self.params.layers.iter().map(TransposedLayer::new).collect();
        let count = |f: &dyn Fn(&Example) -> bool| batch.examples.iter().filter(|e| f(e)).count().max(1);
        let n_mlm = count(&|e| !e.mlm.is_empty());
        let n_rel = count(&|e| !e.relations.is_empty());
        let n_occ = count(&|e| e.cooc_label.is_some());
        for (i, ex) in batch.examples.iter().enumerate() {
            let scales = (
                F::of(1.0 / (n_mlm * ex.mlm.len().max(1)) as f64),
                F::of(1.0 / n_rel as f64),
                F::of(1.0 / n_occ as f64),
            );
            self.backward_example(ex, &fp.activations, i, &fp.caches[i], &transposed, scales, &mut grads);
        }
        grads
    }

    fn backward_example(
        &self,
        ex: &Example,
        acts: &Activations<F>,
        i: usize,
        cache: &ExampleCache<F>,
        transposed: &[TransposedLayer<F>],
        (s_mlm, s_rel, s_occ): (F, F, F),
        g: &mut Parameters<F>,
    ) {
        let cfg = &self.config;
        let p = &self.params;
        let (n, d, ff, heads) = (ex.ids.len(), cfg.d_model, cfg.d_ff, cfg.num_heads);
        let hidden = &acts.hidden[i];

        let mut dh = vec![F::zero(); n * d];
        for (&(pos, t), z) in ex.mlm.iter().zip(&acts.mlm_logits[i]) {
            let gl = cross_entropy_grad(z, t as usize, s_mlm);
            let h = hidden.row(pos);
            let dhp = &mut dh[pos * d..(pos + 1) * d];
            for (v, &gv) in gl.iter().enumerate() {
                axpy(gv, h, g.token_embedding.row_mut(v));
                axpy(gv, p.token_embedding.row(v), dhp);
                g.mlm_bias.data[v] += gv;
            }
        }
        for (&(pos, r), z) in ex.relations.iter().zip(&acts.relation_logits[i]) {
            let gl = cross_entropy_grad(z, r, s_rel);
            accumulate_weight_grad(hidden.row(pos), &gl, 1, &mut g.relation_weight);
            accumulate_bias_grad(&gl, 1, &mut g.relation_bias.data);
            input_grad(&gl, &p.relation_weight, 1, &mut dh[pos * d..(pos + 1) * d], true);
        }
        if let Some(label) = ex.cooc_label {
            let z = acts.cooc_logits[i].as_ref().expect("logits exist for labeled examples");
            let gl = cross_entropy_grad(z, label, s_occ);
            accumulate_weight_grad(hidden.row(0), &gl, 1, &mut g.cooc_weight);
            accumulate_bias_grad(&gl, 1, &mut g.cooc_bias.data);
            input_grad(&gl, &p.cooc_weight, 1, &mut dh[..d], true);
        }

        let mut dx = vec![F::zero(); n * d];
        layer_norm_backward(
            &dh,
            &cache.xhat_f,
            &cache.rstd_f,
            &p.final_norm_gamma.data,
            n,
            &mut g.final_norm_gamma.data,
            &mut g.final_norm_beta.data,
            &mut dx,
        );

        for (l, (lt, lc)) in transposed.iter().zip(&cache.layers).enumerate().rev() {
            let gl: &mut LayerParams<F> = &mut g.layers[l];
            let lp = &p.layers[l];

            // feed-forward branch
            let mut df = dx.clone();
            apply_mask(&mut df, &lc.drop2);
            accumulate_weight_grad(&lc.hact, &df, n, &mut gl.w2);
            accumulate_bias_grad(&df, n, &mut gl.b2.data);
            let mut dhact = vec![F::zero(); n * ff];
            gemm(&df, &lt.w2, n, d, ff, &mut dhact, false);
            for (dz, &z) in dhact.iter_mut().zip(&lc.hpre) {
                *dz *= gelu_grad(z);
            }
            accumulate_weight_grad(&lc.b, &dhact, n, &mut gl.w1);
            accumulate_bias_grad(&dhact, n, &mut gl.b1.data);
            let mut db = vec![F::zero(); n * d];
            gemm(&dhact, &lt.w1, n, ff, d, &mut db, false);
            layer_norm_backward(
                &db,
                &lc.xhat2,
                &lc.rstd2,
                &lp.ffn_norm_gamma.data,
                n,
                &mut gl.ffn_norm_gamma.data,
                &mut gl.ffn_norm_beta.data,
                &mut dx,
            );

            // attention branch
            let mut dout = dx.clone();
            apply_mask(&mut dout, &lc.drop1);
            accumulate_weight_grad(&lc.ctx, &dout, n, &mut gl.wo);
            accumulate_bias_grad(&dout, n, &mut gl.bo.data);
            let mut dctx = vec![F::zero(); n * d];
            gemm(&dout, &lt.wo, n, d, d, &mut dctx, false);
            let (dq, dk, dv) = attention_backward(&lc.q, &lc.k, &lc.v, &acts.attention[i][l], &dctx, n, d, heads);
            let mut da = vec![F::zero(); n * d];
            for (dy, wt, gw, gb) in [
                (&dq, &lt.wq, &mut gl.wq, &mut gl.bq),
                (&dk, &lt.wk, &mut gl.wk, &mut gl.bk),
                (&dv, &lt.wv, &mut gl.wv, &mut gl.bv),
            ] {
                accumulate_weight_grad(&lc.a, dy, n, gw);
                accumulate_bias_grad(dy, n, &mut gb.data);
                gemm(dy, wt, n, d, d, &mut da, true);
            }
            layer_norm_backward(
                &da,
                &lc.xhat1,
                &lc.rstd1,
                &lp.attn_norm_gamma.data,
                n,
                &mut gl.attn_norm_gamma.data,
                &mut gl.attn_norm_beta.data,
                &mut dx,
            );
        }

        apply_mask(&mut dx, &cache.drop0);
        for ((pos, &t), seg) in ex.ids.iter().enumerate().zip(segment_ids(&ex.ids)) {
            let row = &dx[pos * d..(pos + 1) * d];
            axpy(F::one(), row, g.token_embedding.row_mut(t as usize));
            axpy(F::one(), row, g.position_embedding.row_mut(pos));
            axpy(F::one(), row, g.segment_embedding.row_mut(seg));
        }
    }

    /// Forward and backward in one call.
    pub fn loss_and_gradients(
        &self,
        batch: &Batch,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<(LossBreakdown, Parameters<F>), ModelError> {
        let fp = self.forward(batch, dropout)?;
        let loss = self.loss(&fp, batch);
        let grads = self.backward(&fp, batch);
        Ok((loss, grads))
    }

    /// Loss without dropout or gradients.
    pub fn evaluate_loss(&self, batch: &Batch) -> Result<LossBreakdown, ModelError> {
        let fp = self.forward(batch, None)?;
        Ok(self.loss(&fp, batch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::{CLS, MASK};

    fn tiny(dropout: f64) -> Encoder<f64> {
        let cfg = ModelConfig {
            vocab_size: 30,
            d_model: 8,
            num_layers: 2,
            num_heads: 2,
            d_ff: 12,
            max_len: 16,
            num_relations: 14,
            dropout_rate: dropout,
            init_std: 0.3,
        };
        Encoder::new(cfg, 11).unwrap()
    }

    fn example(extra: u32) -> Example {
        Example {
            ids: vec![CLS, 7, 8, MASK, 9, extra, SEP, 12, 13, SEP],
            mlm: vec![(3, 20), (5, 21)],
            relations: vec![(3, 4)],
            cooc_label: Some(1),
        }
    }

    #[test]
    fn unlabeled_example_has_no_head_logits_but_defined_cls() {
        let e = tiny(0.0);
        let b = Batch::new(vec![Example::unlabeled(vec![CLS, 6, 7, SEP])]);
        let fp = e.forward(&b, None).unwrap();
        assert!(fp.activations.mlm_logits[0].is_empty());
        assert!(fp.activations.cooc_logits[0].is_none());
        assert!(fp.activations.x_cls(0).iter().all(|x| x.is_finite()));
        assert_eq!(e.loss(&fp, &b), LossBreakdown::default());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let e = tiny(0.0);
        let b = Batch::new(vec![example(10)]);
        let fp = e.forward(&b, None).unwrap();
        let n = b.examples[0].len();
        for layer in &fp.activations.attention[0] {
            for row in layer.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_and_batch_order_do_not_change_outputs() {
        let e = tiny(0.0);
        let short = Example::unlabeled(vec![CLS, 7, SEP]);
        let alone = e.forward(&Batch::new(vec![short.clone()]), None).unwrap();
        let mixed = e.forward(&Batch::new(vec![example(10), short.clone(), example(11)]), None).unwrap();
        let swapped = e.forward(&Batch::new(vec![example(11), short, example(10)]), None).unwrap();
        assert_eq!(alone.activations.hidden[0], mixed.activations.hidden[1]);
        assert_eq!(mixed.activations.hidden[0], swapped.activations.hidden[2]);
        assert_eq!(mixed.activations.mlm_logits[2], swapped.activations.mlm_logits[0]);
        let padded = mixed.activations.padded_hidden(1, 10);
        assert!(padded.data[3 * 8..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn errors_on_bad_inputs() {
        let e = tiny(0.0);
        let long = Example::unlabeled(vec![CLS; 17]);
        assert!(matches!(e.forward(&Batch::new(vec![long]), None), Err(ModelError::SequenceTooLong { .. })));
        let mut ex = example(10);
        ex.mlm.push((10, 5));
        assert!(matches!(e.forward(&Batch::new(vec![ex]), None), Err(ModelError::MissingLabelPosition { .. })));
        let bad_token = Example::unlabeled(vec![CLS, 30]);
        assert!(matches!(e.forward(&Batch::new(vec![bad_token]), None), Err(ModelError::InvalidToken { .. })));
    }

    #[test]
    fn zero_relation_head_bias_gradient_is_closed_form() {
        let mut e = tiny(0.0);
        e.params_mut().relation_weight.fill_zero();
        e.params_mut().relation_bias.fill_zero();
        let mut ex = example(10);
        ex.relations = vec![(3, 4), (5, 9)];
        let b = Batch::new(vec![ex]);
        let (_, g) = e.loss_and_gradients(&b, None).unwrap();
        let mut expected = vec![2.0 / 14.0; 14];
        expected[4] -= 1.0;
        expected[9] -= 1.0;
        for (a, x) in g.relation_bias.data.iter().zip(&expected) {
            assert!((a - x).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_seeded_and_unused_positions_get_no_gradient() {
        use rand::SeedableRng;
        let e = tiny(0.3);
        let b = Batch::new(vec![example(10), Example::unlabeled(vec![CLS, 7, SEP])]);
        let run = |seed| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            e.loss_and_gradients(&b, Some(&mut rng)).unwrap()
        };
        let (l1, g1) = run(5);
        let (l2, g2) = run(5);
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        assert_ne!(run(6).0, l1);
        let (_, g) = e.loss_and_gradients(&b, None).unwrap();
        for pos in b.max_len()..16 {
            assert!(g.position_embedding.row(pos).iter().all(|&x| x == 0.0));
        }
    }
}
