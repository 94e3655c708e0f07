//! The shared public encoder, task heads, the distillation trainer used by
//! both the victim and the extraction attack, and the representation tap
//! that attribute inference reads.

mod features;
mod network;
mod pretrain;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use features::{featurize, featurize_tokens, EncoderConfig, SparseVec};
pub use network::{
    accumulate, cross_entropy, objective, objective_gradient, sgd, softmax, Dense, Gradients,
    Input, Network, SgdSettings, Trace,
};
pub use pretrain::{init_pretrained, PretrainConfig};

use crate::par::{self, Exec};
use crate::{Error, Result};

/// A K-dimensional probability vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Posterior(Vec<f64>);

impl Posterior {
    pub const TOLERANCE: f64 = 1e-6;

    /// Accepts entries in [0, 1] summing to 1 within [`Posterior::TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Validation("posterior is empty".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation(format!(
                "posterior entries must lie in [0, 1]: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::Validation(format!("posterior sums to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(class: usize, k: usize) -> Self {
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Self(v)
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub(crate) fn from_softmax(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max_prob(&self) -> f64 {
        self.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    Soft,
    Hard,
}

fn default_batch() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub target_mode: TargetMode,
    #[serde(default)]
    pub freeze_encoder: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config("l2 must be >= 0".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub(crate) fn sgd(&self, first_trainable: usize) -> SgdSettings {
        SgdSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            l2: self.l2,
            seed: self.seed,
            first_trainable,
        }
    }
}

/// Encoder parameters: hashed n-grams → tanh layers → representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<Dense>,
}

impl Encoder {
    /// Random initialization from `seed`.
    pub fn random(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.hidden_dims.len());
        let mut in_dim = config.hash_dim;
        // a document activates a few dozen hashed n-grams
        let mut fan_in = 48;
        for &width in &config.hidden_dims {
            layers.push(Dense::random(in_dim, width, fan_in, &mut rng));
            in_dim = width;
            fan_in = width;
        }
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn repr_dim(&self) -> usize {
        self.config.repr_dim
    }
}

/// Encoder plus a linear head over the representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    encoder_config: EncoderConfig,
    num_classes: usize,
    net: Network,
}

const MODEL_FORMAT: &str = "mealab-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: Model,
}

impl Model {
    /// Attach a zero-initialized K-way head, so the untrained model predicts
    /// the uniform posterior.
    pub fn from_encoder(encoder: Encoder, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        let repr = encoder.repr_dim();
        let mut layers = encoder.layers;
        layers.push(Dense::zeros(repr, num_classes));
        Ok(Self {
            encoder_config: encoder.config,
            num_classes,
            net: Network::new(layers),
        })
    }

    /// Assemble a model from explicit parameters, checking every shape.
    pub fn from_network(encoder_config: EncoderConfig, num_classes: usize, net: Network) -> Result<Self> {
        let model = Self {
            encoder_config,
            num_classes,
            net,
        };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder_config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn repr_dim(&self) -> usize {
        self.encoder_config.repr_dim
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn encoder(&self) -> Encoder {
        Encoder {
            config: self.encoder_config.clone(),
            layers: self.net.layers[..self.net.layers.len() - 1].to_vec(),
        }
    }

    pub fn input(&self, text: &str) -> Input {
        Input::Sparse(featurize(text, &self.encoder_config))
    }

    pub fn logits(&self, text: &str) -> Vec<f64> {
        self.net.forward(&self.input(text)).logits().to_vec()
    }

    pub fn predict(&self, text: &str) -> Posterior {
        Posterior::from_softmax(softmax(&self.logits(text)))
    }

    /// Post-tanh output of the final encoder layer, the tensor the head reads.
    pub fn representation(&self, text: &str) -> Vec<f64> {
        self.net.forward(&self.input(text)).penultimate().to_vec()
    }

    /// Head logits from a representation obtained via [`Model::representation`].
    pub fn head_logits(&self, representation: &[f64]) -> Vec<f64> {
        self.net.head_logits(representation)
    }

    pub fn predict_batch(&self, texts: &[String], exec: Exec) -> Vec<Posterior> {
        par::map(exec, texts, |t| self.predict(t))
    }

    pub fn logits_batch(&self, texts: &[String], exec: Exec) -> Vec<Vec<f64>> {
        par::map(exec, texts, |t| self.logits(t))
    }

    pub fn representation_batch(&self, texts: &[String], exec: Exec) -> Vec<Vec<f64>> {
        par::map(exec, texts, |t| self.representation(t))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::Validation(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        file.model.check_shapes()?;
        Ok(file.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check_shapes(&self) -> Result<()> {
        self.encoder_config.validate()?;
        let cfg = &self.encoder_config;
        let mut dims = vec![cfg.hash_dim];
        dims.extend(&cfg.hidden_dims);
        dims.push(self.num_classes);
        if self.net.layers.len() + 1 != dims.len() {
            return Err(Error::Validation("layer count does not match config".into()));
        }
        for (l, layer) in self.net.layers.iter().enumerate() {
            if layer.in_dim != dims[l]
                || layer.out_dim != dims[l + 1]
                || layer.weights.len() != layer.in_dim * layer.out_dim
                || layer.bias.len() != layer.out_dim
            {
                return Err(Error::Validation(format!("layer {l} has inconsistent shape")));
            }
        }
        Ok(())
    }
}

/// Training outcome with the per-epoch mean loss.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub epoch_losses: Vec<f64>,
}

/// Cross-entropy training of `init` on `(text, target)` pairs. In hard mode
/// each target is replaced by the one-hot of its argmax.
pub fn train(init: &Model, data: &[(String, Posterior)], cfg: &TrainConfig) -> Result<Model> {
    Ok(train_with_history(init, data, cfg, Exec::default())?.model)
}

pub fn train_with_history(
    init: &Model,
    data: &[(String, Posterior)],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<Trained> {
    cfg.validate()?;
    let k = init.num_classes;
    if let Some((i, _)) = data.iter().enumerate().find(|(_, (_, p))| p.num_classes() != k) {
        return Err(Error::Validation(format!(
            "target {i} has {} classes, model has {k}",
            data[i].1.num_classes()
        )));
    }
    let examples: Vec<(Input, Vec<f64>)> = par::map(exec, data, |(text, target)| {
        let t = match cfg.target_mode {
            TargetMode::Soft => target.probs().to_vec(),
            TargetMode::Hard => Posterior::one_hot(target.argmax(), k).into_inner(),
        };
        (init.input(text), t)
    });
    let first_trainable = if cfg.freeze_encoder {
        init.net.layers.len() - 1
    } else {
        0
    };
    let mut model = init.clone();
    let epoch_losses = sgd(&mut model.net, &examples, &cfg.sgd(first_trainable));
    Ok(Trained {
        model,
        epoch_losses,
    })
}

/// Fraction of `labels` matched by the model's argmax.
pub fn accuracy(model: &Model, texts: &[String], labels: &[usize], exec: Exec) -> f64 {
    if texts.is_empty() {
        return 0.0;
    }
    let preds = model.predict_batch(texts, exec);
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, &y)| p.argmax() == y)
        .count();
    hits as f64 / texts.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            hash_dim: 256,
            hidden_dims: vec![12, 8],
            repr_dim: 8,
            hash_seed: 9,
            ngram_orders: vec![1, 2],
        }
    }

    fn toy_data() -> Vec<(String, Posterior)> {
        (0..60)
            .map(|i| {
                let label = i % 3;
                let text = format!("tok{label} tok{label}b filler{} common", i % 7);
                (text, Posterior::one_hot(label, 3))
            })
            .collect()
    }

    fn cfg(mode: TargetMode) -> TrainConfig {
        TrainConfig {
            epochs: 8,
            batch_size: 8,
            learning_rate: 0.3,
            l2: 0.0,
            seed: 4,
            target_mode: mode,
            freeze_encoder: false,
        }
    }

    #[test]
    fn zero_head_predicts_uniform() {
        let m = Model::from_encoder(Encoder::random(&tiny_config(), 1).unwrap(), 4).unwrap();
        assert_eq!(m.predict("anything at all").probs(), &[0.25; 4]);
    }

    #[test]
    fn tap_point_reproduces_prediction() {
        let init = Model::from_encoder(Encoder::random(&tiny_config(), 1).unwrap(), 3).unwrap();
        let m = train(&init, &toy_data(), &cfg(TargetMode::Soft)).unwrap();
        for text in ["tok1 tok1b", "tok2 common filler3", ""] {
            let h = m.representation(text);
            assert_eq!(h.len(), m.repr_dim());
            assert_eq!(h, m.representation(text));
            let p = softmax(&m.head_logits(&h));
            assert_eq!(p, m.predict(text).probs());
        }
    }

    #[test]
    fn hard_equals_soft_on_one_hots() {
        let init = Model::from_encoder(Encoder::random(&tiny_config(), 1).unwrap(), 3).unwrap();
        let a = train_with_history(&init, &toy_data(), &cfg(TargetMode::Soft), Exec::Sequential)
            .unwrap();
        let b = train_with_history(&init, &toy_data(), &cfg(TargetMode::Hard), Exec::Parallel)
            .unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.model, b.model);
        assert!(a.epoch_losses.last() < a.epoch_losses.first());
    }

    #[test]
    fn rejects_zero_epochs_and_class_mismatch() {
        let init = Model::from_encoder(Encoder::random(&tiny_config(), 1).unwrap(), 3).unwrap();
        let mut c = cfg(TargetMode::Soft);
        c.epochs = 0;
        assert!(matches!(train(&init, &toy_data(), &c), Err(Error::Config(_))));
        let bad = vec![("x".to_string(), Posterior::one_hot(0, 2))];
        assert!(matches!(
            train(&init, &bad, &cfg(TargetMode::Soft)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn freeze_encoder_only_moves_head() {
        let init = Model::from_encoder(Encoder::random(&tiny_config(), 1).unwrap(), 3).unwrap();
        let mut c = cfg(TargetMode::Soft);
        c.freeze_encoder = true;
        let m = train(&init, &toy_data(), &c).unwrap();
        assert_eq!(m.encoder(), init.encoder());
        assert_ne!(m, init);
    }

    #[test]
    fn serialization_round_trip_is_exact() {
        let init = Model::from_encoder(Encoder::random(&tiny_config(), 1).unwrap(), 3).unwrap();
        let m = train(&init, &toy_data(), &cfg(TargetMode::Soft)).unwrap();
        let json = m.to_json().unwrap();
        let back = Model::from_json(&json).unwrap();
        assert_eq!(m, back);
        assert_eq!(json, back.to_json().unwrap());
        assert!(Model::from_json(&json.replace("mealab-model", "other")).is_err());
    }

    #[test]
    fn posterior_validation() {
        assert!(Posterior::new(vec![0.5, 0.5]).is_ok());
        assert!(Posterior::new(vec![0.5, 0.6]).is_err());
        assert!(Posterior::new(vec![-0.1, 1.1]).is_err());
        assert!(Posterior::new(vec![]).is_err());
        assert_eq!(Posterior::new(vec![0.3, 0.3, 0.4]).unwrap().argmax(), 2);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
