//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use mealab::corpus::{AttributeSpec, SynthConfig};
use mealab::modeling::{
    objective, objective_gradient, Encoder, EncoderConfig, Input, Model, Network, TrainConfig,
};
use mealab::victim_api::{
    BudgetLedger, DefenseConfig, HttpClient, HttpServer, InProcessClient, VictimClient,
    VictimService,
};

pub fn synth(
    num_classes: usize,
    label_strength: f64,
    attributes: Vec<AttributeSpec>,
    num_docs: usize,
    seed: u64,
) -> SynthConfig {
    SynthConfig {
        vocab_size: 2000,
        num_classes,
        label_strength,
        label_block_size: 20,
        attribute_block_size: 20,
        attributes,
        min_len: 30,
        max_len: 60,
        num_docs,
        seed,
        domain_overlap: 1.0,
        domain_tag: "x".into(),
    }
}

pub fn attribute(name: &str, probability: f64, strength: f64) -> AttributeSpec {
    AttributeSpec {
        name: name.into(),
        probability,
        strength,
        label_coupling: 0.0,
        topic_coupling: 0.0,
    }
}

pub fn encoder_cfg() -> EncoderConfig {
    EncoderConfig {
        hash_dim: 4096,
        hidden_dims: vec![64],
        repr_dim: 64,
        hash_seed: 7,
        ngram_orders: vec![1],
    }
}

pub fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        learning_rate: 0.05,
        l2: 0.0,
        seed: 1,
        target_mode: Default::default(),
        freeze_encoder: false,
    }
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter at or above `first_trainable`.
pub fn max_relative_error(
    net: &Network,
    examples: &[(Input, Vec<f64>)],
    l2: f64,
    first_trainable: usize,
) -> f64 {
    let analytic = objective_gradient(net, examples, l2, first_trainable);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    let mut check = |numeric: f64, exact: f64| {
        let denom = numeric.abs().max(exact.abs()).max(1e-6);
        worst = worst.max((numeric - exact).abs() / denom);
    };
    for l in first_trainable..net.layers.len() {
        for i in 0..net.layers[l].weights.len() {
            let w = net.layers[l].weights[i];
            probe.layers[l].weights[i] = w + eps;
            let up = objective(&probe, examples, l2, first_trainable);
            probe.layers[l].weights[i] = w - eps;
            let down = objective(&probe, examples, l2, first_trainable);
            probe.layers[l].weights[i] = w;
            check((up - down) / (2.0 * eps), analytic.weights[l][i]);
        }
        for i in 0..net.layers[l].bias.len() {
            let b = net.layers[l].bias[i];
            probe.layers[l].bias[i] = b + eps;
            let up = objective(&probe, examples, l2, first_trainable);
            probe.layers[l].bias[i] = b - eps;
            let down = objective(&probe, examples, l2, first_trainable);
            probe.layers[l].bias[i] = b;
            check((up - down) / (2.0 * eps), analytic.bias[l][i]);
        }
    }
    worst
}

/// A small random model with a nonzero head, so every layer gets gradient.
pub fn gradient_model() -> Model {
    let cfg = EncoderConfig {
        hash_dim: 64,
        hidden_dims: vec![7, 5],
        repr_dim: 5,
        hash_seed: 2,
        ngram_orders: vec![1, 2],
    };
    let model = Model::from_encoder(Encoder::random(&cfg, 17).unwrap(), 3).unwrap();
    let mut net = model.network().clone();
    let head = net.layers.last_mut().unwrap();
    for (i, w) in head.weights.iter_mut().enumerate() {
        *w = ((i * 37 % 11) as f64 - 5.0) * 0.07;
    }
    head.bias = vec![0.1, -0.2, 0.05];
    Model::from_network(cfg, 3, net).unwrap()
}

pub fn five_doc_batch(model: &Model) -> Vec<(Input, Vec<f64>)> {
    let docs = [
        ("the service was great and fast", vec![0.7, 0.2, 0.1]),
        ("terrible food cold plates", vec![0.05, 0.9, 0.05]),
        ("markets rally as stocks climb", vec![0.2, 0.2, 0.6]),
        ("great great great", vec![1.0, 0.0, 0.0]),
        ("", vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
    ];
    docs.iter()
        .map(|(t, p)| (model.input(t), p.clone()))
        .collect()
}

/// Victim for protocol tests: a random 3-class model.
pub fn protocol_model() -> Arc<Model> {
    let cfg = EncoderConfig {
        hash_dim: 256,
        hidden_dims: vec![16, 8],
        repr_dim: 8,
        hash_seed: 3,
        ngram_orders: vec![1, 2],
    };
    let model = Model::from_encoder(Encoder::random(&cfg, 9).unwrap(), 3).unwrap();
    let mut net = model.network().clone();
    for (i, w) in net.layers.last_mut().unwrap().weights.iter_mut().enumerate() {
        *w = ((i * 13 % 7) as f64 - 3.0) * 0.4;
    }
    Arc::new(Model::from_network(cfg, 3, net).unwrap())
}

fn golden_service(defense: &DefenseConfig) -> Arc<VictimService> {
    let mut ledger = BudgetLedger::new();
    ledger.register("alice", 150);
    ledger.register("bob", 20);
    Arc::new(VictimService::new(protocol_model(), defense.clone(), ledger).unwrap())
}

/// A fixed log of 100 requests: mixed batch sizes, two clients, an unknown
/// client and requests past bob's budget.
pub fn golden_log() -> Vec<(String, Vec<String>)> {
    let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta"];
    (0..100)
        .map(|i: usize| {
            let client = match i % 10 {
                3 | 7 => "bob",
                9 if i % 30 == 9 => "mallory",
                _ => "alice",
            };
            let batch = 1 + i % 3;
            let texts = (0..batch)
                .map(|j| {
                    (0..1 + (i + j) % 6)
                        .map(|w| words[(i * 7 + j * 3 + w) % words.len()])
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            (client.to_string(), texts)
        })
        .collect()
}

/// Replay the golden log in-process and over HTTP against fresh, identical
/// services; return every mismatching request index.
pub fn replay_golden_log(defense: &DefenseConfig) -> Vec<usize> {
    let log = golden_log();
    let local = golden_service(defense);
    let remote = golden_service(defense);
    let server = HttpServer::spawn(remote, "127.0.0.1:0".parse().unwrap()).unwrap();
    let mut mismatches = Vec::new();
    for (i, (client, texts)) in log.iter().enumerate() {
        let a = InProcessClient::new(Arc::clone(&local), client.as_str())
            .query_raw(texts)
            .unwrap();
        let b = HttpClient::new(&server.url(), client.as_str())
            .query_raw(texts)
            .unwrap();
        if a != b {
            mismatches.push(i);
        }
    }
    mismatches
}

/// `threads` clients share one account with budget `budget`, each sending
/// single-text requests until refused. Returns the number of admitted
/// queries and the ledger's final usage.
pub fn ledger_stress(budget: u64, threads: usize, http: bool) -> (u64, u64) {
    let mut ledger = BudgetLedger::new();
    ledger.register("shared", budget);
    let service = Arc::new(VictimService::new(protocol_model(), DefenseConfig::none(), ledger).unwrap());
    let server = http.then(|| HttpServer::spawn(Arc::clone(&service), "127.0.0.1:0".parse().unwrap()).unwrap());
    let admitted = Arc::new(AtomicU64::new(0));
    std::thread::scope(|s| {
        for t in 0..threads {
            let admitted = Arc::clone(&admitted);
            let service = Arc::clone(&service);
            let url = server.as_ref().map(|s| s.url());
            s.spawn(move || {
                let client: Box<dyn VictimClient> = match url {
                    Some(u) => Box::new(HttpClient::new(&u, "shared")),
                    None => Box::new(InProcessClient::new(service, "shared")),
                };
                let text = vec![format!("thread {t}")];
                // keep going a little past the first refusal
                let mut refusals = 0;
                while refusals < 3 {
                    match client.query(&text) {
                        Ok(_) => {
                            admitted.fetch_add(1, Ordering::SeqCst);
                        }
                        Err(mealab::Error::BudgetExceeded { .. }) => refusals += 1,
                        Err(e) => panic!("unexpected error: {e}"),
                    }
                }
            });
        }
    });
    let used = service.ledger().account("shared").unwrap().used;
    (admitted.load(Ordering::SeqCst), used)
}
