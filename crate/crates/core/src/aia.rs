//! Attribute inference on top of an extracted model: harvest the encoder
//! representation of attribute-labelled auxiliary documents, fit one binary
//! inference model per attribute, then predict the attributes of the
//! victim's training records and score the leak as empirical privacy.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, UNKNOWN_ATTRIBUTE};
use crate::hashing::derive_seed;
use crate::metrics::attribute_std;
use crate::modeling::{argmax, sgd, softmax, Dense, Input, Model, Network, TrainConfig};
use crate::par::{self, Exec};
use crate::{Error, Result};

/// Hidden width of the inference network.
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    /// Scored by accuracy (gender, age, ...).
    #[default]
    Demographic,
    /// Binary presence of a named entity, scored by F1 on presence.
    Entity,
}

impl AttributeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttributeKind::Demographic => "demographic",
            AttributeKind::Entity => "entity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeTarget {
    pub name: String,
    #[serde(default)]
    pub kind: AttributeKind,
}

/// One harvested pair: h(x) and the document's attribute values.
pub type ReprPair = (Vec<f64>, BTreeMap<String, i64>);

/// h(x) for every auxiliary document, paired with its attribute values.
pub fn collect_representations(
    g: &Model,
    aux: &Dataset,
    attributes: &[String],
    exec: Exec,
) -> Result<Vec<ReprPair>> {
    for name in attributes {
        if !aux.attribute_names().contains(name) {
            return Err(Error::Validation(format!(
                "auxiliary data does not declare attribute `{name}`"
            )));
        }
    }
    let mut values = Vec::with_capacity(aux.len());
    for (i, doc) in aux.documents().iter().enumerate() {
        let mut v = BTreeMap::new();
        for name in attributes {
            let value = doc.attribute(name).ok_or_else(|| {
                Error::Validation(format!("document {i}: missing attribute `{name}`"))
            })?;
            v.insert(name.clone(), value);
        }
        values.push(v);
    }
    let reprs = g.representation_batch(&aux.texts(), exec);
    Ok(reprs.into_iter().zip(values).collect())
}

/// Binary classifier over representations: repr → tanh hidden → 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceModel {
    pub attribute: String,
    net: Network,
}

impl InferenceModel {
    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Predicted value and its probability.
    pub fn predict(&self, representation: &[f64]) -> (i64, f64) {
        let p = softmax(self.net.forward(&Input::Dense(representation.to_vec())).logits());
        let k = argmax(&p);
        (k as i64, p[k])
    }
}

/// Fit an inference model on `(h, value)` pairs with values in {0, 1}.
/// Unknown values are skipped.
pub fn train_inference(
    pairs: &[(Vec<f64>, i64)],
    attribute: &str,
    tc: &TrainConfig,
    hidden: usize,
) -> Result<InferenceModel> {
    tc.validate()?;
    let usable: Vec<&(Vec<f64>, i64)> = pairs.iter().filter(|(_, v)| *v != UNKNOWN_ATTRIBUTE).collect();
    if let Some((_, v)) = usable.iter().find(|(_, v)| !(0..=1).contains(v)) {
        return Err(Error::Validation(format!(
            "attribute `{attribute}` has non-binary value {v}"
        )));
    }
    let ones = usable.iter().filter(|(_, v)| *v == 1).count();
    let zeros = usable.len() - ones;
    if ones < 2 || zeros < 2 {
        return Err(Error::DegenerateData(format!(
            "attribute `{attribute}` needs at least two examples of each value, got {zeros} zeros and {ones} ones"
        )));
    }
    let dim = usable[0].0.len();
    if usable.iter().any(|(h, _)| h.len() != dim) {
        return Err(Error::Validation("representations have mixed widths".into()));
    }
    let examples: Vec<(Input, Vec<f64>)> = usable
        .iter()
        .map(|(h, v)| {
            let mut t = vec![0.0; 2];
            t[*v as usize] = 1.0;
            (Input::Dense(h.clone()), t)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, attribute));
    let mut net = Network::new(vec![
        Dense::random(dim, hidden, dim, &mut rng),
        Dense::random(hidden, 2, hidden, &mut rng),
    ]);
    sgd(&mut net, &examples, &tc.sgd(0));
    Ok(InferenceModel {
        attribute: attribute.to_string(),
        net,
    })
}

/// Infer the attribute of `text` from `g`'s representation.
pub fn infer(f: &InferenceModel, g: &Model, text: &str) -> Result<(i64, f64)> {
    check_width(f, g)?;
    Ok(f.predict(&g.representation(text)))
}

pub fn infer_batch(f: &InferenceModel, g: &Model, texts: &[String], exec: Exec) -> Result<Vec<(i64, f64)>> {
    check_width(f, g)?;
    Ok(par::map(exec, texts, |t| f.predict(&g.representation(t))))
}

fn check_width(f: &InferenceModel, g: &Model) -> Result<()> {
    if f.input_dim() != g.repr_dim() {
        return Err(Error::Validation(format!(
            "inference model expects width {}, model representation has {}",
            f.input_dim(),
            g.repr_dim()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrivacyScore {
    /// Accuracy (demographic) or F1 (entity); `None` when F1 is undefined.
    pub attack_score: Option<f64>,
    /// 1 − attack score.
    pub privacy: f64,
    /// The metric was undefined and privacy was set to 1 by convention.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Confusion {
    fn add(&mut self, pred: i64, truth: i64) {
        match (pred == 1, truth == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    fn f1_score(&self) -> PrivacyScore {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return PrivacyScore {
                attack_score: None,
                privacy: 1.0,
                degenerate: true,
            };
        }
        let f1 = 2.0 * self.tp as f64 / denom as f64;
        PrivacyScore {
            attack_score: Some(f1),
            privacy: 1.0 - f1,
            degenerate: false,
        }
    }
}

/// 1 − accuracy for demographics, 1 − F1 on presence (value 1) for entities.
pub fn empirical_privacy(predictions: &[i64], truths: &[i64], kind: AttributeKind) -> Result<PrivacyScore> {
    if predictions.len() != truths.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Validation("no predictions to score".into()));
    }
    Ok(match kind {
        AttributeKind::Demographic => {
            let acc = predictions.iter().zip(truths).filter(|(p, t)| p == t).count() as f64
                / predictions.len() as f64;
            PrivacyScore {
                attack_score: Some(acc),
                privacy: 1.0 - acc,
                degenerate: false,
            }
        }
        AttributeKind::Entity => {
            let mut c = Confusion::default();
            for (&p, &t) in predictions.iter().zip(truths) {
                c.add(p, t);
            }
            c.f1_score()
        }
    })
}

/// Micro-averaged entity privacy: confusion counts pooled across every
/// entity attribute before computing F1.
pub fn entity_micro_privacy(groups: &[(Vec<i64>, Vec<i64>)]) -> Result<PrivacyScore> {
    let mut c = Confusion::default();
    let mut n = 0;
    for (preds, truths) in groups {
        if preds.len() != truths.len() {
            return Err(Error::Validation("misaligned entity predictions".into()));
        }
        for (&p, &t) in preds.iter().zip(truths) {
            c.add(p, t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Validation("no entity predictions to score".into()));
    }
    Ok(c.f1_score())
}

/// Result of attacking one attribute.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttributePrivacy {
    pub attribute: String,
    pub kind: AttributeKind,
    pub extracted: PrivacyScore,
    pub plain_encoder: PrivacyScore,
    pub majority: PrivacyScore,
    pub attribute_std: f64,
    pub evaluated: usize,
    /// Per evaluated victim record: (index into D_V, attack correct).
    #[serde(skip)]
    pub per_record: Vec<(usize, bool)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntityMicro {
    pub extracted: PrivacyScore,
    pub plain_encoder: PrivacyScore,
    pub majority: PrivacyScore,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrivacyReport {
    pub attributes: Vec<AttributePrivacy>,
    pub entity_micro: Option<EntityMicro>,
}

impl PrivacyReport {
    /// Mean extracted-model privacy over demographic attributes, plus the
    /// pooled entity score when entities were attacked.
    pub fn headline(&self) -> f64 {
        let mut xs: Vec<f64> = self
            .attributes
            .iter()
            .filter(|a| a.kind == AttributeKind::Demographic)
            .map(|a| a.extracted.privacy)
            .collect();
        if let Some(e) = &self.entity_micro {
            xs.push(e.extracted.privacy);
        }
        crate::metrics::mean(&xs)
    }
}

#[derive(Clone, Debug)]
pub struct AiaSettings {
    pub train: TrainConfig,
    pub hidden: usize,
}

struct AttackOutcome {
    predictions: Vec<i64>,
}

/// Train on `aux` representations of `model`, predict for `eval`.
fn attack_with(
    model: &Model,
    aux_reprs: &[Vec<f64>],
    aux_values: &[i64],
    eval_reprs: &[Vec<f64>],
    attribute: &str,
    settings: &AiaSettings,
) -> Result<AttackOutcome> {
    let pairs: Vec<(Vec<f64>, i64)> = aux_reprs.iter().cloned().zip(aux_values.iter().copied()).collect();
    let f = train_inference(&pairs, attribute, &settings.train, settings.hidden)?;
    if f.input_dim() != model.repr_dim() {
        return Err(Error::Validation("inference width mismatch".into()));
    }
    Ok(AttackOutcome {
        predictions: eval_reprs.iter().map(|h| f.predict(h).0).collect(),
    })
}

/// Run the attack for every attribute against the extracted model and
/// against the plain pretrained encoder, alongside the majority-value
/// baseline learned from `aux`. Scores are computed on the victim's training
/// records whose attribute value is known.
pub fn run_aia(
    extracted: &Model,
    plain: &Model,
    aux: &Dataset,
    victim_train: &Dataset,
    attributes: &[AttributeTarget],
    settings: &AiaSettings,
    exec: Exec,
) -> Result<PrivacyReport> {
    let names: Vec<String> = attributes.iter().map(|a| a.name.clone()).collect();
    for name in &names {
        if !victim_train.attribute_names().contains(name) {
            return Err(Error::Validation(format!(
                "victim training data does not declare attribute `{name}`"
            )));
        }
    }
    let harvested = collect_representations(extracted, aux, &names, exec)?;
    let (ext_aux, aux_values): (Vec<Vec<f64>>, Vec<BTreeMap<String, i64>>) = harvested.into_iter().unzip();
    let plain_aux = plain.representation_batch(&aux.texts(), exec);
    let dv_texts = victim_train.texts();
    let ext_eval = extracted.representation_batch(&dv_texts, exec);
    let plain_eval = plain.representation_batch(&dv_texts, exec);

    let mut results = Vec::with_capacity(attributes.len());
    let mut entity_groups: [Vec<(Vec<i64>, Vec<i64>)>; 3] = Default::default();
    for target in attributes {
        let name = &target.name;
        let values: Vec<i64> = aux_values.iter().map(|v| v[name]).collect();
        let eval_idx: Vec<usize> = victim_train
            .documents()
            .iter()
            .enumerate()
            .filter(|(_, d)| d.attribute(name).is_some_and(|v| v != UNKNOWN_ATTRIBUTE))
            .map(|(i, _)| i)
            .collect();
        if eval_idx.is_empty() {
            return Err(Error::Validation(format!(
                "no victim record has a known `{name}` value"
            )));
        }
        let truths: Vec<i64> = eval_idx
            .iter()
            .map(|&i| victim_train.documents()[i].attribute(name).unwrap_or(UNKNOWN_ATTRIBUTE))
            .collect();
        let pick = |reprs: &[Vec<f64>]| eval_idx.iter().map(|&i| reprs[i].clone()).collect::<Vec<_>>();

        let ext = attack_with(extracted, &ext_aux, &values, &pick(&ext_eval), name, settings)?;
        let base = attack_with(plain, &plain_aux, &values, &pick(&plain_eval), name, settings)?;
        let ones = values.iter().filter(|&&v| v == 1).count();
        let zeros = values.iter().filter(|&&v| v == 0).count();
        let majority_value = i64::from(ones > zeros);
        let majority_preds = vec![majority_value; truths.len()];

        let kind = target.kind;
        let per_record = eval_idx
            .iter()
            .zip(ext.predictions.iter().zip(&truths))
            .map(|(&i, (p, t))| (i, p == t))
            .collect();
        if kind == AttributeKind::Entity {
            entity_groups[0].push((ext.predictions.clone(), truths.clone()));
            entity_groups[1].push((base.predictions.clone(), truths.clone()));
            entity_groups[2].push((majority_preds.clone(), truths.clone()));
        }
        results.push(AttributePrivacy {
            attribute: name.clone(),
            kind,
            extracted: empirical_privacy(&ext.predictions, &truths, kind)?,
            plain_encoder: empirical_privacy(&base.predictions, &truths, kind)?,
            majority: empirical_privacy(&majority_preds, &truths, kind)?,
            attribute_std: attribute_std(victim_train, name)?,
            evaluated: truths.len(),
            per_record,
        });
    }
    let entity_micro = if entity_groups[0].is_empty() {
        None
    } else {
        Some(EntityMicro {
            extracted: entity_micro_privacy(&entity_groups[0])?,
            plain_encoder: entity_micro_privacy(&entity_groups[1])?,
            majority: entity_micro_privacy(&entity_groups[2])?,
        })
    };
    Ok(PrivacyReport {
        attributes: results,
        entity_micro,
    })
}
