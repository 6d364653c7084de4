use std::collections::BTreeMap;

use eventlm::masking::build_instances;
use eventlm::model::{Encoder, LossSwitches, ModelConfig};
use eventlm::probe::{choice_accuracy, probe_connective, ProbeQuery};
use eventlm::synth::{generate, SynthConfig, SynthKg};
use eventlm::train::{evaluate, train, TrainConfig};
use eventlm::{ConnectiveLexicon, MaskConfig, RelationType, TrainingInstance, Vocabulary, WalkConfig, WalkSampler};

struct Fixture {
    kg: SynthKg,
    lexicon: ConnectiveLexicon,
    vocab: Vocabulary,
    instances: Vec<TrainingInstance>,
}

fn fixture(synth: SynthConfig, sequences: usize) -> Fixture {
    let kg = generate(&synth).unwrap();
    let corpus = WalkSampler::new(
        &kg.graph,
        WalkConfig {
            num_sequences: sequences,
            seed: 2,
            ..WalkConfig::default()
        },
    )
    .unwrap()
    .sample_corpus()
    .unwrap();
    let lexicon = ConnectiveLexicon::default();
    let vocab = Vocabulary::build(&corpus.paths, &kg.graph, &lexicon, 1).unwrap();
    let instances = build_instances(&corpus.paths, &kg.graph, &lexicon, &vocab, &MaskConfig::default()).unwrap();
    Fixture {
        kg,
        lexicon,
        vocab,
        instances,
    }
}

fn small_model(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        d_ff: 32,
        num_heads: 2,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    }
}

#[test]
fn untrained_model_is_at_chance() {
    let f = fixture(
        SynthConfig {
            num_nodes: 400,
            seed: 4,
            ..SynthConfig::default()
        },
        3000,
    );
    let encoder = Encoder::<f64>::new(small_model(&f.vocab), 1).unwrap();
    let report = evaluate(&encoder, &f.instances, &LossSwitches::default(), 64).unwrap();
    assert!(report.cooc_total >= 2000, "{report:?}");
    let cooc = report.cooc_accuracy.unwrap();
    assert!((cooc - 0.5).abs() <= 0.05, "co-occurrence accuracy {cooc}");
    let rel = report.relation_accuracy.unwrap();
    assert!((rel - 1.0 / 14.0).abs() <= 0.03, "relation accuracy {rel}");

    let choice = choice_accuracy(&encoder, &f.vocab, &f.kg.choice_tasks).unwrap();
    assert!(choice.total >= 20);
    assert!((choice.accuracy - 0.5).abs() <= 0.15, "{choice:?}");
}

#[test]
fn reason_only_graph_teaches_because() {
    let f = fixture(
        SynthConfig {
            num_nodes: 200,
            seed: 6,
            relation_proportions: BTreeMap::from([(RelationType::Reason, 1.0)]),
            ..SynthConfig::default()
        },
        2000,
    );
    let train_cfg = TrainConfig {
        max_steps: Some(300),
        seed: 6,
        log_every: 0,
        ..TrainConfig::default()
    };
    let outcome = train::<f32>(&f.instances, &small_model(&f.vocab), &train_cfg, None).unwrap();
    assert!(!f.kg.heldout.is_empty());
    let mut first = 0;
    for e in &f.kg.heldout {
        let text = |id| f.kg.graph.node(id).unwrap().text.join(" ");
        let query = ProbeQuery {
            left: text(e.head),
            right: text(e.tail),
            top_k: 3,
        };
        let out = probe_connective(&outcome.encoder, &f.vocab, &f.lexicon, &query).unwrap();
        first += usize::from(out.ranking[0].connective == "because");
    }
    let share = first as f64 / f.kg.heldout.len() as f64;
    assert!(share >= 0.9, "because ranked first for {share:.3} of held-out pairs");
}
