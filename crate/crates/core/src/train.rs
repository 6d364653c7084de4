//! Training loop, loss trace and held-out evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::TrainingInstance;
use crate::model::{combine, Batch, Encoder, LossBreakdown, LossSwitches, ModelConfig, ModelError};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}; last good checkpoint: {checkpoint:?}")]
    NonFiniteLoss { step: usize, checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// When set, training runs exactly this many steps, cycling through
    /// reshuffled epochs as needed, and `epochs` is ignored.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub loss_switches: LossSwitches,
    /// Write a checkpoint every this many steps; zero disables.
    pub checkpoint_every: usize,
    pub clip_norm: Option<f64>,
    /// Log a progress line every this many steps; zero disables.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 10,
            max_steps: None,
            seed: 0,
            loss_switches: LossSwitches::default(),
            checkpoint_every: 0,
            clip_norm: Some(1.0),
            log_every: 50,
        }
    }
}

impl TrainConfig {
    /// Continual-pretraining settings: rate 1e-5, batch 128.
    pub fn continual_preset() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 128,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub encoder: Encoder<F>,
    pub trace: Vec<TraceRow>,
}

/// CSV with header `step,l_mlm,l_rel,l_occur,l_total`.
pub fn write_trace<W: Write>(trace: &[TraceRow], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "l_mlm", "l_rel", "l_occur", "l_total"])?;
    for r in trace {
        w.write_record([
            r.step.to_string(),
            r.loss.l_mlm.to_string(),
            r.loss.l_rel.to_string(),
            r.loss.l_occur.to_string(),
            r.loss.l_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: std::io::Read>(input: R) -> Result<Vec<TraceRow>, TrainError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, TrainError> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TrainError::InvalidConfig(format!("bad trace field {i}")))
        };
        out.push(TraceRow {
            step: num(0)? as usize,
            loss: LossBreakdown {
                l_mlm: num(1)?,
                l_rel: num(2)?,
                l_occur: num(3)?,
                l_total: num(4)?,
            },
        });
    }
    Ok(out)
}

/// Mean `l_total` over the `window` steps ending at `step` (1-based).
pub fn smoothed_loss(trace: &[TraceRow], step: usize, window: usize) -> Option<f64> {
    let rows: Vec<f64> = trace
        .iter()
        .filter(|r| r.step <= step && r.step + window > step)
        .map(|r| r.loss.l_total)
        .collect();
    (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = crate::seeded_rng(seed);
    rng.set_stream(stream);
    rng
}

/// Trains a fresh encoder initialized from `config.seed`. Batches come from
/// a per-epoch shuffle; dropout and shuffling use separate seeded streams.
pub fn train<F: Scalar>(
    corpus: &[TrainingInstance],
    model_config: &ModelConfig,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<F>, TrainError> {
    let encoder = Encoder::<F>::new(model_config.clone(), config.seed)?;
    train_from(encoder, corpus, config, checkpoint_dir)
}

/// Continues training an existing encoder.
pub fn train_from<F: Scalar>(
    mut encoder: Encoder<F>,
    corpus: &[TrainingInstance],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<F>, TrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut shuffle_rng = stream_rng(config.seed, 1);
    let mut dropout_rng = stream_rng(config.seed, 2);
    let mut opt = AdamW::<F>::new(config.optimizer(), encoder.config());
    let batches_per_epoch = corpus.len().div_ceil(config.batch_size);
    let total = config.max_steps.unwrap_or(config.epochs * batches_per_epoch);
    let mut trace = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut last_good: Option<PathBuf> = None;

    let mut step = 0;
    'outer: while step < total {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            if step == total {
                break 'outer;
            }
            let instances: Vec<TrainingInstance> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let batch = Batch::from_instances(&instances, &config.loss_switches);
            let (loss, grads) = encoder.loss_and_gradients(&batch, Some(&mut dropout_rng as &mut dyn RngCore))?;
            step += 1;
            if !loss.is_finite() || !grads.all_finite() {
                if let Some(dir) = checkpoint_dir {
                    let path = dir.join("last_good.ckpt");
                    encoder.save(&path)?;
                    last_good = Some(path);
                }
                return Err(TrainError::NonFiniteLoss {
                    step,
                    checkpoint: last_good,
                });
            }
            opt.step(encoder.params_mut(), &grads);
            trace.push(TraceRow { step, loss });
            if config.log_every > 0 && step % config.log_every == 0 {
                log::info!(
                    "step {step}/{total} l_mlm={:.4} l_rel={:.4} l_occur={:.4} l_total={:.4}",
                    loss.l_mlm,
                    loss.l_rel,
                    loss.l_occur,
                    loss.l_total
                );
            }
            if let Some(dir) = checkpoint_dir {
                if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                    let path = dir.join(format!("step-{step}.ckpt"));
                    encoder.save(&path)?;
                    last_good = Some(path);
                }
            }
        }
    }
    Ok(TrainOutcome { encoder, trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: LossBreakdown,
    pub instances: usize,
    pub relation_correct: usize,
    pub relation_total: usize,
    pub relation_accuracy: Option<f64>,
    pub cooc_correct: usize,
    pub cooc_total: usize,
    pub cooc_accuracy: Option<f64>,
    pub mlm_correct: usize,
    pub mlm_total: usize,
    pub mlm_accuracy: Option<f64>,
}

fn argmax<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// Average losses and argmax accuracies on labeled positions, without
/// dropout and without touching the parameters.
pub fn evaluate<F: Scalar>(
    encoder: &Encoder<F>,
    instances: &[TrainingInstance],
    switches: &LossSwitches,
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    let mut parts = Vec::with_capacity(instances.len());
    let (mut rc, mut rt, mut cc, mut ct, mut mc, mut mt) = (0, 0, 0, 0, 0, 0);
    for chunk in instances.chunks(batch_size.max(1)) {
        let batch = Batch::from_instances(chunk, switches);
        let fp = encoder.forward(&batch, None)?;
        parts.extend(encoder.instance_losses(&fp, &batch));
        for (i, ex) in batch.examples.iter().enumerate() {
            for (&(_, r), z) in ex.relations.iter().zip(&fp.activations.relation_logits[i]) {
                rt += 1;
                rc += usize::from(argmax(z) == r);
            }
            for (&(_, t), z) in ex.mlm.iter().zip(&fp.activations.mlm_logits[i]) {
                mt += 1;
                mc += usize::from(argmax(z) == t as usize);
            }
            if let (Some(label), Some(z)) = (ex.cooc_label, &fp.activations.cooc_logits[i]) {
                ct += 1;
                cc += usize::from(argmax(z) == label);
            }
        }
    }
    Ok(EvalReport {
        loss: combine(&parts),
        instances: instances.len(),
        relation_correct: rc,
        relation_total: rt,
        relation_accuracy: ratio(rc, rt),
        cooc_correct: cc,
        cooc_total: ct,
        cooc_accuracy: ratio(cc, ct),
        mlm_correct: mc,
        mlm_total: mt,
        mlm_accuracy: ratio(mc, mt),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::RelationType;
    use crate::masking::{CoocTarget, MaskStrategy};
    use crate::vocab::{CLS, MASK, SEP};
    use std::collections::BTreeMap;

    fn corpus(n: usize) -> Vec<TrainingInstance> {
        (0..n)
            .map(|i| {
                let a = 5 + (i % 7) as u32;
                let rel = RelationType::ALL[i % 3];
                TrainingInstance {
                    input_ids: vec![CLS, a, MASK, a + 1, SEP],
                    mlm_targets: BTreeMap::from([(2, 12 + (i % 3) as u32)]),
                    relation_targets: BTreeMap::from([(2, rel)]),
                    cooc: Some(CoocTarget {
                        candidate_ids: vec![a + 2],
                        label: (i % 2) as u8,
                    }),
                    strategy: MaskStrategy::Connective,
                }
            })
            .collect()
    }

    fn model() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 16,
            num_layers: 1,
            num_heads: 2,
            d_ff: 32,
            max_len: 10,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn disabled_relation_loss_is_zero_throughout() {
        let cfg = TrainConfig {
            max_steps: Some(12),
            batch_size: 4,
            loss_switches: LossSwitches {
                use_rel: false,
                ..LossSwitches::default()
            },
            ..TrainConfig::default()
        };
        let out = train::<f32>(&corpus(20), &model(), &cfg, None).unwrap();
        assert_eq!(out.trace.len(), 12);
        assert!(out.trace.iter().all(|r| r.loss.l_rel == 0.0));
        assert!(out.trace.iter().all(|r| r.loss.l_total == r.loss.l_mlm + r.loss.l_rel + r.loss.l_occur));
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let a = train::<f32>(&corpus(30), &model(), &cfg, None).unwrap();
        let b = train::<f32>(&corpus(30), &model(), &cfg, None).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 8);
        assert_eq!(a.encoder, b.encoder);
    }

    #[test]
    fn rejects_empty_corpus_and_bad_config() {
        assert!(matches!(
            train::<f32>(&[], &model(), &TrainConfig::default(), None),
            Err(TrainError::EmptyCorpus)
        ));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(train::<f32>(&corpus(3), &model(), &bad, None), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn non_finite_loss_aborts_with_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = Encoder::<f32>::new(model(), 0).unwrap();
        enc.params_mut().relation_bias.data[0] = f32::NAN;
        let cfg = TrainConfig {
            max_steps: Some(3),
            ..TrainConfig::default()
        };
        match train_from(enc, &corpus(5), &cfg, Some(dir.path())) {
            Err(TrainError::NonFiniteLoss { step: 1, checkpoint: Some(p) }) => assert!(p.exists()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn evaluate_is_read_only_and_trace_csv_round_trips() {
        let enc = Encoder::<f32>::new(model(), 1).unwrap();
        let data = corpus(10);
        let a = evaluate(&enc, &data, &LossSwitches::default(), 3).unwrap();
        let b = evaluate(&enc, &data, &LossSwitches::default(), 7).unwrap();
        assert_eq!(a.relation_total, 10);
        assert_eq!(a.cooc_total, 10);
        assert!((a.loss.l_total - b.loss.l_total).abs() < 1e-9);
        assert_eq!(enc, Encoder::<f32>::new(model(), 1).unwrap());

        let cfg = TrainConfig {
            max_steps: Some(3),
            ..TrainConfig::default()
        };
        let out = train::<f64>(&data, &model(), &cfg, None).unwrap();
        let mut buf = Vec::new();
        write_trace(&out.trace, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("step,l_mlm,l_rel,l_occur,l_total\n"));
        assert_eq!(read_trace(&buf[..]).unwrap(), out.trace);
        assert!(smoothed_loss(&out.trace, 3, 2).is_some());
    }
}
