//! Model extraction: sample queries, spend the budget against the victim API,
//! and distill the answers into a local copy.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{text_ngram_recall, Dataset};
use crate::modeling::{self, accuracy, Encoder, Model, Posterior, TrainConfig};
use crate::par::Exec;
use crate::victim_api::{DefenseConfig, Measurement, Prediction, VictimClient};
use crate::{Error, Result};

/// Name of the attacker's same-domain query pool (D_Q) in a source map.
pub const SAME_DOMAIN: &str = "same_domain";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryPlan {
    /// [`SAME_DOMAIN`] or the name of a cross-domain corpus.
    pub source: String,
    /// Query count as a multiple of the victim's training-set size.
    pub multiplier: f64,
    #[serde(default)]
    pub seed: u64,
}

impl QueryPlan {
    pub fn same_domain(multiplier: f64, seed: u64) -> Self {
        Self {
            source: SAME_DOMAIN.into(),
            multiplier,
            seed,
        }
    }

    pub fn query_count(&self, victim_train_size: usize) -> Result<usize> {
        if !(self.multiplier > 0.0 && self.multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "query multiplier must be > 0, got {}",
                self.multiplier
            )));
        }
        let m = (self.multiplier * victim_train_size as f64).round() as usize;
        if m == 0 {
            return Err(Error::Config(format!(
                "multiplier {} of {victim_train_size} rounds to zero queries",
                self.multiplier
            )));
        }
        Ok(m)
    }

    pub fn label(&self) -> String {
        format!("{}x{}", self.source, self.multiplier)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySample {
    pub texts: Vec<String>,
    /// Set when the source had fewer documents than requested queries.
    pub with_replacement: bool,
}

/// Draw round(multiplier·|D_V|) query texts from the plan's source, without
/// replacement when the source is large enough and with replacement
/// otherwise. Deterministic in the plan's seed.
pub fn sample_queries(
    plan: &QueryPlan,
    victim_train_size: usize,
    sources: &BTreeMap<String, Dataset>,
) -> Result<QuerySample> {
    let source = sources
        .get(&plan.source)
        .ok_or_else(|| Error::Config(format!("unknown query source `{}`", plan.source)))?;
    if source.is_empty() {
        return Err(Error::Config(format!("query source `{}` is empty", plan.source)));
    }
    let m = plan.query_count(victim_train_size)?;
    let docs = source.documents();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    if m <= docs.len() {
        let picked = index::sample(&mut rng, docs.len(), m);
        Ok(QuerySample {
            texts: picked.iter().map(|i| docs[i].text.clone()).collect(),
            with_replacement: false,
        })
    } else {
        Ok(QuerySample {
            texts: (0..m)
                .map(|_| docs[rng.random_range(0..docs.len())].text.clone())
                .collect(),
            with_replacement: true,
        })
    }
}

/// Query–answer pairs collected from the victim.
#[derive(Clone, Debug)]
pub struct TransferSet {
    pub pairs: Vec<(String, Posterior)>,
    pub plan: Option<QueryPlan>,
    /// Defense the victim was running, when known to the experimenter.
    pub defense: Option<DefenseConfig>,
    pub hard_labels: bool,
    pub with_replacement: bool,
    /// The budget ran out before every query was answered.
    pub truncated: bool,
}

impl TransferSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn targets(&self) -> Vec<Posterior> {
        self.pairs.iter().map(|(_, p)| p.clone()).collect()
    }
}

/// Label `queries` through the victim API in batches of `batch_size`. Hard
/// labels become one-hot targets. When the budget runs out the remaining
/// allowance is spent and the set is returned truncated.
pub fn build_transfer_set(
    queries: &[String],
    client: &dyn VictimClient,
    num_classes: usize,
    batch_size: usize,
) -> Result<TransferSet> {
    let mut pairs = Vec::with_capacity(queries.len());
    let mut hard_labels = false;
    let mut truncated = false;
    let mut absorb = |texts: &[String], results: Vec<Prediction>, hard: &mut bool| -> Result<()> {
        if results.len() != texts.len() {
            return Err(Error::Protocol(format!(
                "{} answers for {} queries",
                results.len(),
                texts.len()
            )));
        }
        for (text, pred) in texts.iter().zip(results) {
            let target = match pred {
                Prediction::Probs { probs } => {
                    if probs.len() != num_classes {
                        return Err(Error::Protocol(format!(
                            "answer has {} classes, expected {num_classes}",
                            probs.len()
                        )));
                    }
                    Posterior::new(probs)?
                }
                Prediction::Label { label } => {
                    if label >= num_classes {
                        return Err(Error::Protocol(format!("label {label} out of range")));
                    }
                    *hard = true;
                    Posterior::one_hot(label, num_classes)
                }
            };
            pairs.push((text.clone(), target));
        }
        Ok(())
    };

    for chunk in queries.chunks(batch_size.max(1)) {
        match client.query(chunk) {
            Ok(resp) => absorb(chunk, resp.results, &mut hard_labels)?,
            Err(Error::BudgetExceeded { remaining }) => {
                let take = (remaining as usize).min(chunk.len());
                if take > 0 {
                    let resp = client.query(&chunk[..take])?;
                    absorb(&chunk[..take], resp.results, &mut hard_labels)?;
                }
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TransferSet {
        pairs,
        plan: None,
        defense: None,
        hard_labels,
        with_replacement: false,
        truncated,
    })
}

/// Fine-tune the shared pretrained encoder on the transfer set.
pub fn run_extraction(
    ts: &TransferSet,
    pretrained: &Encoder,
    num_classes: usize,
    tc: &TrainConfig,
) -> Result<Model> {
    if ts.is_empty() {
        return Err(Error::Attack("transfer set is empty".into()));
    }
    let init = Model::from_encoder(pretrained.clone(), num_classes)?;
    modeling::train(&init, &ts.pairs, tc)
}

/// Anything that labels texts: a local model or the measurement channel.
pub trait Labeler {
    fn num_classes(&self) -> usize;
    fn labels(&self, texts: &[String], exec: Exec) -> Vec<usize>;
}

impl Labeler for Model {
    fn num_classes(&self) -> usize {
        Model::num_classes(self)
    }

    fn labels(&self, texts: &[String], exec: Exec) -> Vec<usize> {
        self.predict_batch(texts, exec).iter().map(Posterior::argmax).collect()
    }
}

impl Labeler for Measurement {
    fn num_classes(&self) -> usize {
        self.model().num_classes()
    }

    fn labels(&self, texts: &[String], exec: Exec) -> Vec<usize> {
        Measurement::labels(self, texts, exec)
    }
}

/// Fraction of `eval` documents on which `a` and `b` pick the same class.
pub fn agreement(a: &dyn Labeler, b: &dyn Labeler, eval: &Dataset, exec: Exec) -> Result<f64> {
    if a.num_classes() != b.num_classes() {
        return Err(Error::Validation(format!(
            "class count mismatch: {} vs {}",
            a.num_classes(),
            b.num_classes()
        )));
    }
    if eval.is_empty() {
        return Err(Error::UndefinedMetric("agreement on an empty set".into()));
    }
    let texts = eval.texts();
    let la = a.labels(&texts, exec);
    let lb = b.labels(&texts, exec);
    let same = la.iter().zip(&lb).filter(|(x, y)| x == y).count();
    Ok(same as f64 / texts.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtractionReport {
    pub victim_accuracy: f64,
    pub extracted_accuracy: f64,
    pub agreement: f64,
    pub queries_spent: usize,
    pub truncated: bool,
    pub with_replacement: bool,
    pub overlap_unigram: Option<f64>,
    pub overlap_5gram: Option<f64>,
}

/// Score an extracted model against the victim on the test split. Victim
/// access goes through the measurement channel.
pub fn evaluate_extraction(
    extracted: &Model,
    victim: &Measurement,
    ts: &TransferSet,
    test: &Dataset,
    exec: Exec,
) -> Result<ExtractionReport> {
    let texts = test.texts();
    let labels = test.labels();
    let queries: Vec<&str> = ts.pairs.iter().map(|(t, _)| t.as_str()).collect();
    let test_refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let overlap = |n| text_ngram_recall(&queries, &test_refs, n).ok();
    Ok(ExtractionReport {
        victim_accuracy: accuracy(victim.model(), &texts, &labels, exec),
        extracted_accuracy: accuracy(extracted, &texts, &labels, exec),
        agreement: agreement(extracted, victim, test, exec)?,
        queries_spent: ts.len(),
        truncated: ts.truncated,
        with_replacement: ts.with_replacement,
        overlap_unigram: overlap(1),
        overlap_5gram: overlap(5),
    })
}
