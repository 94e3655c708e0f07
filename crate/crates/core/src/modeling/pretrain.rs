//! Self-supervised warm start for the shared encoder: from the rest of a
//! document, predict which hash bucket a held-out token falls in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{featurize_tokens, EncoderConfig};
use super::network::{sgd_epoch, Dense, Gradients, Input, Network, SgdSettings};
use super::Encoder;
use crate::corpus::Dataset;
use crate::hashing::{derive_seed, hash_bytes};
use crate::{Error, Result};

fn default_buckets() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    #[serde(default = "default_buckets")]
    pub buckets: usize,
    pub learning_rate: f64,
    #[serde(default = "super::default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buckets < 2 {
            return Err(Error::Config("pretrain buckets must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("pretrain learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pretrain an encoder on `public_corpus`. Deterministic in
/// (`cfg`, corpus, `pcfg`); victim and attacker calling this with the same
/// arguments receive identical parameters. `epochs = 0` returns the random
/// initialization.
pub fn init_pretrained(
    cfg: &EncoderConfig,
    public_corpus: &Dataset,
    pcfg: &PretrainConfig,
) -> Result<Encoder> {
    pcfg.validate()?;
    if public_corpus.is_empty() {
        return Err(Error::Validation("public corpus is empty".into()));
    }
    let init = Encoder::random(cfg, derive_seed(pcfg.seed, "encoder-init"))?;
    let mut layers = init.layers;
    layers.push(Dense::zeros(cfg.repr_dim, pcfg.buckets));
    let mut net = Network::new(layers);

    let docs: Vec<Vec<String>> = public_corpus
        .documents()
        .iter()
        .map(|d| d.tokens())
        .filter(|t| t.len() >= 2)
        .collect();
    let bucket_seed = derive_seed(cfg.hash_seed, "proxy-bucket");
    let bucket_of = |tok: &str| (hash_bytes(bucket_seed, tok.as_bytes()) % pcfg.buckets as u64) as usize;

    let settings = SgdSettings {
        epochs: 1,
        batch_size: pcfg.batch_size,
        learning_rate: pcfg.learning_rate,
        l2: 0.0,
        seed: 0,
        first_trainable: 0,
    };
    let mut draw_rng = ChaCha8Rng::seed_from_u64(derive_seed(pcfg.seed, "held-out"));
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(pcfg.seed, "order"));
    let mut grads = Gradients::zeros_like(&net);
    let mut order = Vec::new();
    let mut rest: Vec<String> = Vec::new();
    for _ in 0..pcfg.epochs {
        let examples: Vec<(Input, Vec<f64>)> = docs
            .iter()
            .map(|toks| {
                let pos = draw_rng.random_range(0..toks.len());
                rest.clear();
                rest.extend(
                    toks.iter()
                        .enumerate()
                        .filter(|(i, _)| *i != pos)
                        .map(|(_, t)| t.clone()),
                );
                let mut target = vec![0.0; pcfg.buckets];
                target[bucket_of(&toks[pos])] = 1.0;
                (Input::Sparse(featurize_tokens(&rest, cfg)), target)
            })
            .collect();
        sgd_epoch(&mut net, &examples, &settings, &mut order_rng, &mut order, &mut grads);
    }
    net.layers.pop();
    Ok(Encoder {
        config: cfg.clone(),
        layers: net.layers,
    })
}
