//! Central finite-difference check of the analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use super::batch::{Batch, Example};
use super::{Encoder, ModelError};
use crate::vocab::{CLS, MASK, NUM_RESERVED, SEP};

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tensors_checked: usize,
    pub tensors_total: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance && self.tensors_checked == self.tensors_total
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Floor on the denominator so coordinates whose true gradient is zero are
/// judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Random labeled examples exercising all three heads: masked-LM targets,
/// relation targets and a co-occurrence label on every example.
pub fn random_batch<R: Rng + ?Sized>(encoder: &Encoder<f64>, size: usize, rng: &mut R) -> Batch {
    let cfg = encoder.config();
    let vocab = cfg.vocab_size as u32;
    let examples = (0..size)
        .map(|_| {
            let body = rng.gen_range(4..=8usize).min(cfg.max_len.saturating_sub(5).max(2));
            let cand = rng.gen_range(1..=3usize);
            let mut ids = vec![CLS];
            ids.extend((0..body).map(|_| rng.gen_range(NUM_RESERVED..vocab)));
            ids.push(SEP);
            ids.extend((0..cand).map(|_| rng.gen_range(NUM_RESERVED..vocab)));
            ids.push(SEP);
            let mut positions: Vec<usize> = (1..=body).collect();
            positions.shuffle(rng);
            let mut mlm: Vec<(usize, u32)> = positions[..2].iter().map(|&p| (p, ids[p])).collect();
            mlm.sort_unstable();
            for &(p, _) in &mlm {
                ids[p] = MASK;
            }
            let relations = vec![(mlm[0].0, rng.gen_range(0..cfg.num_relations))];
            Example {
                ids,
                mlm,
                relations,
                cooc_label: Some(rng.gen_range(0..2)),
            }
        })
        .collect();
    Batch::new(examples)
}

/// Compares analytic gradients of `l_total` to central differences with the
/// given step. Every tensor gets at least one coordinate; the rest are drawn
/// uniformly over tensors. Position rows are limited to those the batch
/// reaches.
pub fn check_gradients<R: Rng + ?Sized>(
    encoder: &Encoder<f64>,
    batch: &Batch,
    num_coords: usize,
    step: f64,
    rng: &mut R,
) -> Result<GradCheckReport, ModelError> {
    let (_, grads) = encoder.loss_and_gradients(batch, None)?;
    let grad_entries = grads.entries();
    let tensors_total = grad_entries.len();
    let used_rows = batch.max_len();

    let mut picks: Vec<usize> = (0..tensors_total).collect();
    while picks.len() < num_coords {
        picks.push(rng.gen_range(0..tensors_total));
    }

    let mut probe = encoder.clone();
    let mut checks = Vec::with_capacity(picks.len());
    for t in picks {
        let (name, _, g) = &grad_entries[t];
        let limit = if name == "embeddings.position" {
            used_rows * g.cols
        } else {
            g.len()
        };
        let index = rng.gen_range(0..limit);
        let analytic = g.data[index];
        let original = probe.params_mut().entries_mut()[t].2.data[index];
        probe.params_mut().entries_mut()[t].2.data[index] = original + step;
        let plus = probe.evaluate_loss(batch)?.l_total;
        probe.params_mut().entries_mut()[t].2.data[index] = original - step;
        let minus = probe.evaluate_loss(batch)?.l_total;
        probe.params_mut().entries_mut()[t].2.data[index] = original;
        let numeric = (plus - minus) / (2.0 * step);
        checks.push(CoordinateCheck {
            tensor: name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let mut seen: Vec<&str> = checks.iter().map(|c| c.tensor.as_str()).collect();
    seen.sort_unstable();
    seen.dedup();
    let tensors_checked = seen.len();
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        checks,
        max_rel_error,
        tensors_checked,
        tensors_total,
    })
}
