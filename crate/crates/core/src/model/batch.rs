use serde::{Deserialize, Serialize};

use crate::masking::{MaskStrategy, TrainingInstance};
use crate::vocab::PAD;

/// Ablation switches. A disabled component keeps its inputs but drops its
/// labels, so its loss term is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSwitches {
    pub use_rel: bool,
    pub use_occur: bool,
    pub use_eventuality_mask: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches {
            use_rel: true,
            use_occur: true,
            use_eventuality_mask: true,
        }
    }
}

/// Encoder input with its labels. Positions index into `ids`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub mlm: Vec<(usize, u32)>,
    pub relations: Vec<(usize, usize)>,
    pub cooc_label: Option<usize>,
}

impl Example {
    /// Unlabeled input, as used for probing.
    pub fn unlabeled(ids: Vec<u32>) -> Self {
        Example {
            ids,
            mlm: Vec::new(),
            relations: Vec::new(),
            cooc_label: None,
        }
    }

    pub fn from_instance(instance: &TrainingInstance, switches: &LossSwitches) -> Self {
        let mlm = if switches.use_eventuality_mask || instance.strategy != MaskStrategy::WholeEventuality {
            instance.mlm_targets.iter().map(|(&p, &t)| (p, t)).collect()
        } else {
            Vec::new()
        };
        let relations = if switches.use_rel {
            instance.relation_targets.iter().map(|(&p, r)| (p, r.index())).collect()
        } else {
            Vec::new()
        };
        let cooc_label = match &instance.cooc {
            Some(c) if switches.use_occur => Some(usize::from(c.label)),
            _ => None,
        };
        Example {
            ids: instance.model_input(),
            mlm,
            relations,
            cooc_label,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn new(examples: Vec<Example>) -> Self {
        Batch { examples }
    }

    pub fn from_instances(instances: &[TrainingInstance], switches: &LossSwitches) -> Self {
        Batch {
            examples: instances.iter().map(|i| Example::from_instance(i, switches)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(Example::len).max().unwrap_or(0)
    }

    /// Token ids padded with `[PAD]` to the batch maximum, and the matching
    /// attention mask (true for real tokens).
    pub fn padded(&self) -> (Vec<Vec<u32>>, Vec<Vec<bool>>) {
        let n = self.max_len();
        self.examples
            .iter()
            .map(|e| {
                let mut ids = e.ids.clone();
                ids.resize(n, PAD);
                let mask = (0..n).map(|i| i < e.len()).collect();
                (ids, mask)
            })
            .unzip()
    }
}
