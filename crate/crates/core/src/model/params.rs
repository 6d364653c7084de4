use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::Matrix;
use super::ModelConfig;
use crate::scalar::Scalar;

/// Role of a tensor, which decides its initialization and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    TokenEmbedding,
    PositionEmbedding,
    SegmentEmbedding,
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl TensorKind {
    pub fn decays(self) -> bool {
        matches!(
            self,
            TensorKind::TokenEmbedding
                | TensorKind::PositionEmbedding
                | TensorKind::SegmentEmbedding
                | TensorKind::Weight
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub attn_norm_gamma: Matrix<F>,
    pub attn_norm_beta: Matrix<F>,
    pub wq: Matrix<F>,
    pub bq: Matrix<F>,
    pub wk: Matrix<F>,
    pub bk: Matrix<F>,
    pub wv: Matrix<F>,
    pub bv: Matrix<F>,
    pub wo: Matrix<F>,
    pub bo: Matrix<F>,
    pub ffn_norm_gamma: Matrix<F>,
    pub ffn_norm_beta: Matrix<F>,
    pub w1: Matrix<F>,
    pub b1: Matrix<F>,
    pub w2: Matrix<F>,
    pub b2: Matrix<F>,
}

/// Every trainable tensor of the encoder. The masked-LM output projection is
/// the transposed token embedding, so only its bias lives here.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    pub token_embedding: Matrix<F>,
    pub position_embedding: Matrix<F>,
    /// Row 0 up to and including the first `[SEP]`, row 1 after it.
    pub segment_embedding: Matrix<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm_gamma: Matrix<F>,
    pub final_norm_beta: Matrix<F>,
    pub mlm_bias: Matrix<F>,
    pub relation_weight: Matrix<F>,
    pub relation_bias: Matrix<F>,
    pub cooc_weight: Matrix<F>,
    pub cooc_bias: Matrix<F>,
}

impl<F: Scalar> LayerParams<F> {
    fn zeros(d: usize, ff: usize) -> Self {
        let z = Matrix::zeros;
        LayerParams {
            attn_norm_gamma: z(1, d),
            attn_norm_beta: z(1, d),
            wq: z(d, d),
            bq: z(1, d),
            wk: z(d, d),
            bk: z(1, d),
            wv: z(d, d),
            bv: z(1, d),
            wo: z(d, d),
            bo: z(1, d),
            ffn_norm_gamma: z(1, d),
            ffn_norm_beta: z(1, d),
            w1: z(d, ff),
            b1: z(1, ff),
            w2: z(ff, d),
            b2: z(1, d),
        }
    }

    fn entries(&self, i: usize) -> Vec<(String, TensorKind, &Matrix<F>)> {
        use TensorKind::*;
        let n = |s: &str| format!("layers.{i}.{s}");
        vec![
            (n("attn_norm.gamma"), NormScale, &self.attn_norm_gamma),
            (n("attn_norm.beta"), NormShift, &self.attn_norm_beta),
            (n("attn.query.weight"), Weight, &self.wq),
            (n("attn.query.bias"), Bias, &self.bq),
            (n("attn.key.weight"), Weight, &self.wk),
            (n("attn.key.bias"), Bias, &self.bk),
            (n("attn.value.weight"), Weight, &self.wv),
            (n("attn.value.bias"), Bias, &self.bv),
            (n("attn.output.weight"), Weight, &self.wo),
            (n("attn.output.bias"), Bias, &self.bo),
            (n("ffn_norm.gamma"), NormScale, &self.ffn_norm_gamma),
            (n("ffn_norm.beta"), NormShift, &self.ffn_norm_beta),
            (n("ffn.inner.weight"), Weight, &self.w1),
            (n("ffn.inner.bias"), Bias, &self.b1),
            (n("ffn.outer.weight"), Weight, &self.w2),
            (n("ffn.outer.bias"), Bias, &self.b2),
        ]
    }

    fn entries_mut(&mut self, i: usize) -> Vec<(String, TensorKind, &mut Matrix<F>)> {
        use TensorKind::*;
        let n = |s: &str| format!("layers.{i}.{s}");
        let LayerParams {
            attn_norm_gamma,
            attn_norm_beta,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ffn_norm_gamma,
            ffn_norm_beta,
            w1,
            b1,
            w2,
            b2,
        } = self;
        vec![
            (n("attn_norm.gamma"), NormScale, attn_norm_gamma),
            (n("attn_norm.beta"), NormShift, attn_norm_beta),
            (n("attn.query.weight"), Weight, wq),
            (n("attn.query.bias"), Bias, bq),
            (n("attn.key.weight"), Weight, wk),
            (n("attn.key.bias"), Bias, bk),
            (n("attn.value.weight"), Weight, wv),
            (n("attn.value.bias"), Bias, bv),
            (n("attn.output.weight"), Weight, wo),
            (n("attn.output.bias"), Bias, bo),
            (n("ffn_norm.gamma"), NormScale, ffn_norm_gamma),
            (n("ffn_norm.beta"), NormShift, ffn_norm_beta),
            (n("ffn.inner.weight"), Weight, w1),
            (n("ffn.inner.bias"), Bias, b1),
            (n("ffn.outer.weight"), Weight, w2),
            (n("ffn.outer.bias"), Bias, b2),
        ]
    }
}

impl<F: Scalar> Parameters<F> {
    /// All-zero tensors shaped for `config`; also the gradient container.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, d, r) = (config.vocab_size, config.d_model, config.num_relations);
        Parameters {
            token_embedding: Matrix::zeros(v, d),
            position_embedding: Matrix::zeros(config.max_len, d),
            segment_embedding: Matrix::zeros(2, d),
            layers: (0..config.num_layers).map(|_| LayerParams::zeros(d, config.d_ff)).collect(),
            final_norm_gamma: Matrix::zeros(1, d),
            final_norm_beta: Matrix::zeros(1, d),
            mlm_bias: Matrix::zeros(1, v),
            relation_weight: Matrix::zeros(d, r),
            relation_bias: Matrix::zeros(1, r),
            cooc_weight: Matrix::zeros(d, 2),
            cooc_bias: Matrix::zeros(1, 2),
        }
    }

    /// Truncated normal (two standard deviations) for embeddings and weight
    /// matrices, zeros for biases and norm shifts, ones for norm scales.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let std = config.init_std;
        for (_, kind, m) in p.entries_mut() {
            match kind {
                TensorKind::TokenEmbedding
                | TensorKind::PositionEmbedding
                | TensorKind::SegmentEmbedding
                | TensorKind::Weight => {
                    for x in &mut m.data {
                        let z: f64 = loop {
                            let z: f64 = rng.sample(StandardNormal);
                            if z.abs() <= 2.0 {
                                break z;
                            }
                        };
                        *x = F::of(z * std);
                    }
                }
                TensorKind::NormScale => m.data.fill(F::one()),
                TensorKind::Bias | TensorKind::NormShift => {}
            }
        }
        p
    }

    /// Named tensors in a fixed order.
    pub fn entries(&self) -> Vec<(String, TensorKind, &Matrix<F>)> {
        use TensorKind::*;
        let mut out = vec![
            ("embeddings.token".to_string(), TokenEmbedding, &self.token_embedding),
            ("embeddings.position".to_string(), PositionEmbedding, &self.position_embedding),
            ("embeddings.segment".to_string(), SegmentEmbedding, &self.segment_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.entries(i));
        }
        out.extend([
            ("final_norm.gamma".to_string(), NormScale, &self.final_norm_gamma),
            ("final_norm.beta".to_string(), NormShift, &self.final_norm_beta),
            ("mlm.bias".to_string(), Bias, &self.mlm_bias),
            ("relation.weight".to_string(), Weight, &self.relation_weight),
            ("relation.bias".to_string(), Bias, &self.relation_bias),
            ("cooccurrence.weight".to_string(), Weight, &self.cooc_weight),
            ("cooccurrence.bias".to_string(), Bias, &self.cooc_bias),
        ]);
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, TensorKind, &mut Matrix<F>)> {
        use TensorKind::*;
        let Parameters {
            token_embedding,
            position_embedding,
            segment_embedding,
            layers,
            final_norm_gamma,
            final_norm_beta,
            mlm_bias,
            relation_weight,
            relation_bias,
            cooc_weight,
            cooc_bias,
        } = self;
        let mut out = vec![
            ("embeddings.token".to_string(), TokenEmbedding, token_embedding),
            ("embeddings.position".to_string(), PositionEmbedding, position_embedding),
            ("embeddings.segment".to_string(), SegmentEmbedding, segment_embedding),
        ];
        for (i, l) in layers.iter_mut().enumerate() {
            out.extend(l.entries_mut(i));
        }
        out.extend([
            ("final_norm.gamma".to_string(), NormScale, final_norm_gamma),
            ("final_norm.beta".to_string(), NormShift, final_norm_beta),
            ("mlm.bias".to_string(), Bias, mlm_bias),
            ("relation.weight".to_string(), Weight, relation_weight),
            ("relation.bias".to_string(), Bias, relation_bias),
            ("cooccurrence.weight".to_string(), Weight, cooc_weight),
            ("cooccurrence.bias".to_string(), Bias, cooc_bias),
        ]);
        out
    }

    pub fn count(&self) -> usize {
        self.entries().iter().map(|(_, _, m)| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries().iter().all(|(_, _, m)| m.data.iter().all(|x| x.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for (_, _, m) in self.entries_mut() {
            m.fill_zero();
        }
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        let mut out = Parameters::<G> {
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            segment_embedding: self.segment_embedding.cast(),
            layers: Vec::new(),
            final_norm_gamma: self.final_norm_gamma.cast(),
            final_norm_beta: self.final_norm_beta.cast(),
            mlm_bias: self.mlm_bias.cast(),
            relation_weight: self.relation_weight.cast(),
            relation_bias: self.relation_bias.cast(),
            cooc_weight: self.cooc_weight.cast(),
            cooc_bias: self.cooc_bias.cast(),
        };
        for l in &self.layers {
            out.layers.push(LayerParams {
                attn_norm_gamma: l.attn_norm_gamma.cast(),
                attn_norm_beta: l.attn_norm_beta.cast(),
                wq: l.wq.cast(),
                bq: l.bq.cast(),
                wk: l.wk.cast(),
                bk: l.bk.cast(),
                wv: l.wv.cast(),
                bv: l.bv.cast(),
                wo: l.wo.cast(),
                bo: l.bo.cast(),
                ffn_norm_gamma: l.ffn_norm_gamma.cast(),
                ffn_norm_beta: l.ffn_norm_beta.cast(),
                w1: l.w1.cast(),
                b1: l.b1.cast(),
                w2: l.w2.cast(),
                b2: l.b2.cast(),
            });
        }
        out
    }

    /// Sum of squares over every tensor.
    pub fn squared_norm(&self) -> f64 {
        self.entries()
            .iter()
            .flat_map(|(_, _, m)| m.data.iter())
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum()
    }

    pub fn scale(&mut self, factor: F) {
        for (_, _, m) in self.entries_mut() {
            for x in &mut m.data {
                *x *= factor;
            }
        }
    }
}
