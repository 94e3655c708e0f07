mod common;

use std::path::Path;
use std::sync::Arc;

use common::{attribute, encoder_cfg, synth, train_cfg};
use mealab::corpus::{generate_synthetic, split, SplitSpec};
use mealab::experiment::{self, ExperimentConfig, RunOptions, Transport};
use mealab::mea::{build_transfer_set, evaluate_extraction, run_extraction};
use mealab::modeling::{init_pretrained, train, Model, Posterior, PretrainConfig};
use mealab::par::Exec;
use mealab::victim_api::{BudgetLedger, DefenseConfig, InProcessClient, VictimService};

const GRID: &str = r#"
output_dir = "out"
seeds = [0, 1, 2, 3, 4]

[corpus]
kind = "synthetic"
test_docs = 60

[corpus.synth]
vocab_size = 300
num_classes = 3
label_strength = 3.0
label_block_size = 10
attribute_block_size = 10
min_len = 8
max_len = 14
num_docs = 150
attributes = [{ name = "gender", probability = 0.5, strength = 2.0, label_coupling = 1.0 }]

[pretrain]
epochs = 1
learning_rate = 0.05
corpus = { synth = { vocab_size = 300, num_classes = 3, label_strength = 1.0, min_len = 8, max_len = 14, num_docs = 80 } }

[victim.encoder]
hash_dim = 256
hidden_dims = [8]
repr_dim = 8
hash_seed = 3

[victim.train]
epochs = 3
learning_rate = 0.1

[attacker.encoder]
hash_dim = 256
hidden_dims = [8]
repr_dim = 8
hash_seed = 3

[attacker.train]
epochs = 3
learning_rate = 0.1

[aia]
hidden = 8
train = { epochs = 3, learning_rate = 0.1 }

[[queries]]
multiplier = 1.0

[[defenses]]
mode = "none"

[[defenses]]
mode = "soften"
tau = 0.0

[[defenses]]
mode = "perturb"
sigma = 0.2

[[attributes]]
name = "gender"
"#;

fn grid() -> ExperimentConfig {
    ExperimentConfig::parse(GRID, Path::new("/tmp")).unwrap()
}

fn csvs(transport: Transport, exec: Exec) -> std::collections::BTreeMap<&'static str, String> {
    let report = experiment::run(
        &grid(),
        RunOptions {
            exec,
            transport: Some(transport),
        },
    )
    .unwrap();
    assert_eq!(report.failures().count(), 0);
    experiment::render_csvs(&report).unwrap()
}

#[test]
fn defense_grid_gives_one_sweep_row_per_config_and_seed() {
    let out = csvs(Transport::InProcess, Exec::default());
    let sweep = &out["defense_sweep.csv"];
    assert_eq!(sweep.lines().count(), 1 + 15);
    for d in ["none", "tau=0", "sigma=0.2"] {
        assert_eq!(sweep.lines().filter(|l| l.contains(&format!(",{d},"))).count(), 5, "{d}");
    }
}

#[test]
fn reruns_and_transports_give_identical_tables() {
    let a = csvs(Transport::InProcess, Exec::default());
    let b = csvs(Transport::InProcess, Exec::Sequential);
    let c = csvs(Transport::Http, Exec::default());
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn extraction_on_victim_training_inputs_matches_victim() {
    let ds = generate_synthetic(&synth(4, 3.0, vec![attribute("gender", 0.5, 1.0)], 3000, 31)).unwrap();
    let parts = split(&ds, &SplitSpec { aux_fraction: 0.1, seed: 2 }).unwrap();
    let test = generate_synthetic(&synth(4, 3.0, vec![attribute("gender", 0.5, 1.0)], 1000, 32)).unwrap();
    let public = generate_synthetic(&synth(4, 2.0, vec![], 1000, 33)).unwrap();
    let pcfg = PretrainConfig {
        epochs: 2,
        buckets: 64,
        learning_rate: 0.05,
        batch_size: 32,
        seed: 5,
    };
    let encoder = init_pretrained(&encoder_cfg(), &public, &pcfg).unwrap();
    let targets: Vec<(String, Posterior)> = parts
        .victim
        .documents()
        .iter()
        .map(|d| (d.text.clone(), Posterior::one_hot(d.label, 4)))
        .collect();
    let victim = train(&Model::from_encoder(encoder.clone(), 4).unwrap(), &targets, &train_cfg(10)).unwrap();

    let mut ledger = BudgetLedger::new();
    ledger.register("attacker", parts.victim.len() as u64);
    let service = Arc::new(VictimService::new(Arc::new(victim), DefenseConfig::none(), ledger).unwrap());
    let client = InProcessClient::new(Arc::clone(&service), "attacker");
    let ts = build_transfer_set(&parts.victim.texts(), &client, 4, 64).unwrap();
    assert!(!ts.truncated);
    let extracted = run_extraction(&ts, &encoder, 4, &train_cfg(10)).unwrap();
    let report = evaluate_extraction(&extracted, &service.measurement(), &ts, &test, Exec::default()).unwrap();
    assert!(
        report.extracted_accuracy >= report.victim_accuracy - 0.02,
        "extracted {} vs victim {}",
        report.extracted_accuracy,
        report.victim_accuracy
    );
    assert!(report.agreement > 0.95, "agreement {}", report.agreement);
}
