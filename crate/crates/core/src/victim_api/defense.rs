use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::modeling::{argmax, softmax};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    #[default]
    None,
    Soften,
    Perturb,
}

/// Output transform applied by the victim before answering.
///
/// `soften` returns `softmax(z / tau)`; `tau = 0` returns the hard label.
/// `perturb` returns `normalize(softmax(z) + n)` with `n ~ N(0, sigma² I)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    #[serde(default)]
    pub mode: DefenseMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub noise_seed: u64,
}

impl DefenseConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn soften(tau: f64) -> Self {
        Self {
            mode: DefenseMode::Soften,
            tau: Some(tau),
            ..Self::default()
        }
    }

    pub fn hard_label() -> Self {
        Self::soften(0.0)
    }

    pub fn perturb(sigma: f64, noise_seed: u64) -> Self {
        Self {
            mode: DefenseMode::Perturb,
            sigma: Some(sigma),
            noise_seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x >= 0.0 && x.is_finite()) => Err(Error::Config(format!(
                "{name} must be a finite value >= 0, got {x}"
            ))),
            _ => Ok(()),
        };
        check("tau", self.tau)?;
        check("sigma", self.sigma)?;
        match self.mode {
            DefenseMode::Soften if self.tau.is_none() => {
                Err(Error::Config("mode soften requires tau".into()))
            }
            DefenseMode::Perturb if self.sigma.is_none() => {
                Err(Error::Config("mode perturb requires sigma".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn is_hard_label(&self) -> bool {
        self.mode == DefenseMode::Soften && self.tau == Some(0.0)
    }

    /// Short stable label used in reports, e.g. `none`, `tau=0.5`, `sigma=0.2`.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for DefenseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            DefenseMode::None => write!(f, "none"),
            DefenseMode::Soften => write!(f, "tau={}", self.tau.unwrap_or(f64::NAN)),
            DefenseMode::Perturb => write!(f, "sigma={}", self.sigma.unwrap_or(f64::NAN)),
        }
    }
}

/// `none`, `soften:TAU`, `hard`, or `perturb:SIGMA[:SEED]`.
impl FromStr for DefenseConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number `{p}` in defense `{s}`")))
        };
        let cfg = match parts.as_slice() {
            ["none"] => Self::none(),
            ["hard"] => Self::hard_label(),
            ["soften", tau] => Self::soften(num(tau)?),
            ["perturb", sigma] => Self::perturb(num(sigma)?, 0),
            ["perturb", sigma, seed] => Self::perturb(
                num(sigma)?,
                seed.parse()
                    .map_err(|_| Error::Config(format!("bad seed in defense `{s}`")))?,
            ),
            _ => return Err(Error::Config(format!("unrecognized defense `{s}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One answer as it appears on the wire: `{"probs": [...]}` or `{"label": k}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    Probs { probs: Vec<f64> },
    Label { label: usize },
}

impl Prediction {
    pub fn label(&self) -> usize {
        match self {
            Prediction::Probs { probs } => argmax(probs),
            Prediction::Label { label } => *label,
        }
    }

    pub fn probs(&self) -> Option<&[f64]> {
        match self {
            Prediction::Probs { probs } => Some(probs),
            Prediction::Label { .. } => None,
        }
    }
}

/// Apply `defense` to the victim's logits for the `request_index`-th answered
/// text. The noise for `perturb` comes from a ChaCha stream keyed by
/// (`noise_seed`, `request_index`), so a replay of the same request stream
/// reproduces the same answers.
pub fn apply_defense(logits: &[f64], defense: &DefenseConfig, request_index: u64) -> Result<Prediction> {
    defense.validate()?;
    if logits.is_empty() {
        return Err(Error::Validation("empty logit vector".into()));
    }
    Ok(match defense.mode {
        DefenseMode::None => Prediction::Probs {
            probs: softmax(logits),
        },
        DefenseMode::Soften => {
            let tau = defense.tau.unwrap_or(1.0);
            if tau == 0.0 {
                Prediction::Label {
                    label: argmax(logits),
                }
            } else {
                let scaled: Vec<f64> = logits.iter().map(|z| z / tau).collect();
                Prediction::Probs {
                    probs: softmax(&scaled),
                }
            }
        }
        DefenseMode::Perturb => {
            let y = softmax(logits);
            let sigma = defense.sigma.unwrap_or(0.0);
            if sigma == 0.0 {
                Prediction::Probs { probs: y }
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(defense.noise_seed);
                rng.set_stream(request_index);
                let noisy: Vec<f64> = y
                    .iter()
                    .map(|p| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        p + sigma * n
                    })
                    .collect();
                Prediction::Probs {
                    probs: clamp_normalize(&noisy),
                }
            }
        }
    })
}

/// Clamp negatives to zero and rescale to sum 1; all-zero input maps to the
/// uniform vector.
pub fn clamp_normalize(v: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        clamped.iter().map(|x| x / sum).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}
