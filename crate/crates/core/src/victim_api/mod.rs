//! The black-box prediction service: a victim model behind a JSON protocol,
//! with output defenses and per-client query budgets.
//!
//! Both transports share [`VictimService::handle_bytes`], so the in-process
//! client and the HTTP client see byte-identical payloads.

mod defense;
mod http;
mod ledger;

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use defense::{apply_defense, clamp_normalize, DefenseConfig, DefenseMode, Prediction};
pub use http::{HttpClient, HttpServer};
pub use ledger::{Account, BudgetLedger};

use crate::hashing::derive_seed;
use crate::modeling::{Model, Posterior};
use crate::par::{self, Exec};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub client_id: String,
    pub texts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub results: Vec<Prediction>,
    pub queries_remaining: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries_remaining: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

pub const STATUS_OK: u16 = 200;
pub const STATUS_PROTOCOL_ERROR: u16 = 400;
pub const STATUS_UNKNOWN_CLIENT: u16 = 403;
pub const STATUS_BUDGET_EXCEEDED: u16 = 429;

struct State {
    ledger: BudgetLedger,
    /// Index of the next answered text, keys the perturbation noise.
    next_index: u64,
}

/// A victim model served with a fixed defense.
pub struct VictimService {
    model: Arc<Model>,
    defense: DefenseConfig,
    state: Mutex<State>,
    exec: Exec,
}

impl VictimService {
    pub fn new(model: Arc<Model>, defense: DefenseConfig, ledger: BudgetLedger) -> Result<Self> {
        defense.validate()?;
        Ok(Self {
            model,
            defense,
            state: Mutex::new(State {
                ledger,
                next_index: 0,
            }),
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn defense(&self) -> &DefenseConfig {
        &self.defense
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    pub fn register(&self, client: &str, allowed: u64) {
        self.state.lock().expect("ledger lock").ledger.register(client, allowed);
    }

    pub fn ledger(&self) -> BudgetLedger {
        self.state.lock().expect("ledger lock").ledger.clone()
    }

    /// Charge the whole batch atomically, then answer it. Texts in the batch
    /// get consecutive request indices.
    pub fn handle(&self, req: &PredictRequest) -> Result<PredictResponse> {
        let n = req.texts.len() as u64;
        let (remaining, base) = {
            let mut st = self.state.lock().expect("ledger lock");
            let remaining = st.ledger.charge(&req.client_id, n)?;
            let base = st.next_index;
            st.next_index += n;
            (remaining, base)
        };
        let logits = self.model.logits_batch(&req.texts, self.exec);
        let results = logits
            .iter()
            .enumerate()
            .map(|(i, z)| apply_defense(z, &self.defense, base + i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictResponse {
            results,
            queries_remaining: remaining,
        })
    }

    /// Wire-level entry point: request body in, (status, response body) out.
    pub fn handle_bytes(&self, body: &[u8]) -> (u16, Vec<u8>) {
        let req: PredictRequest = match serde_json::from_slice(body) {
            Ok(r) => r,
            Err(e) => {
                return error_reply(STATUS_PROTOCOL_ERROR, "protocol_error", None, Some(e.to_string()))
            }
        };
        match self.handle(&req) {
            Ok(resp) => (
                STATUS_OK,
                serde_json::to_vec(&resp).expect("response serializes"),
            ),
            Err(Error::BudgetExceeded { remaining }) => {
                error_reply(STATUS_BUDGET_EXCEEDED, "budget_exceeded", Some(remaining), None)
            }
            Err(Error::UnknownClient(c)) => {
                error_reply(STATUS_UNKNOWN_CLIENT, "unknown_client", None, Some(c))
            }
            Err(e) => error_reply(STATUS_PROTOCOL_ERROR, "protocol_error", None, Some(e.to_string())),
        }
    }

    /// The experimenter's measurement channel: undefended, budget-exempt
    /// access to the victim. Never handed to the attacker.
    pub fn measurement(&self) -> Measurement {
        Measurement {
            model: Arc::clone(&self.model),
        }
    }
}

fn error_reply(
    status: u16,
    error: &str,
    queries_remaining: Option<u64>,
    detail: Option<String>,
) -> (u16, Vec<u8>) {
    let body = ErrorBody {
        error: error.into(),
        queries_remaining,
        detail,
    };
    (status, serde_json::to_vec(&body).expect("error body serializes"))
}

/// Decode a (status, body) reply into a response or a typed error.
pub fn decode_reply(status: u16, body: &[u8]) -> Result<PredictResponse> {
    if status == STATUS_OK {
        return serde_json::from_slice(body).map_err(|e| Error::Protocol(e.to_string()));
    }
    let err: ErrorBody = serde_json::from_slice(body)
        .map_err(|e| Error::Protocol(format!("status {status}: undecodable body: {e}")))?;
    Err(match (status, err.error.as_str()) {
        (STATUS_BUDGET_EXCEEDED, "budget_exceeded") => Error::BudgetExceeded {
            remaining: err.queries_remaining.unwrap_or(0),
        },
        (STATUS_UNKNOWN_CLIENT, _) => Error::UnknownClient(err.detail.unwrap_or_default()),
        _ => Error::Protocol(format!(
            "status {status}: {} {}",
            err.error,
            err.detail.unwrap_or_default()
        )),
    })
}

/// Attacker-side handle on the prediction API.
pub trait VictimClient: Send + Sync {
    fn client_id(&self) -> &str;

    /// Send one batch and return the raw (status, body) reply.
    fn query_raw(&self, texts: &[String]) -> Result<(u16, Vec<u8>)>;

    /// Order-preserving answers for `texts`; a batch larger than the
    /// remaining budget is refused whole.
    fn query(&self, texts: &[String]) -> Result<PredictResponse> {
        let (status, body) = self.query_raw(texts)?;
        decode_reply(status, &body)
    }
}

/// Client that calls the service in the same process.
pub struct InProcessClient {
    service: Arc<VictimService>,
    client_id: String,
}

impl InProcessClient {
    pub fn new(service: Arc<VictimService>, client_id: impl Into<String>) -> Self {
        Self {
            service,
            client_id: client_id.into(),
        }
    }
}

impl VictimClient for InProcessClient {
    fn client_id(&self) -> &str {
        &self.client_id
    }

    fn query_raw(&self, texts: &[String]) -> Result<(u16, Vec<u8>)> {
        let req = PredictRequest {
            client_id: self.client_id.clone(),
            texts: texts.to_vec(),
        };
        Ok(self.service.handle_bytes(&serde_json::to_vec(&req)?))
    }
}

/// Undefended access to the victim model for evaluation.
#[derive(Clone)]
pub struct Measurement {
    model: Arc<Model>,
}

impl Measurement {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn posteriors(&self, texts: &[String], exec: Exec) -> Vec<Posterior> {
        self.model.predict_batch(texts, exec)
    }

    pub fn labels(&self, texts: &[String], exec: Exec) -> Vec<usize> {
        self.posteriors(texts, exec).iter().map(Posterior::argmax).collect()
    }

    /// Accuracy of the victim's answers after `defense`, i.e. the utility an
    /// honest API user experiences. Noise indices are drawn from a stream
    /// separate from the one serving attacker queries.
    pub fn defended_accuracy(
        &self,
        defense: &DefenseConfig,
        texts: &[String],
        labels: &[usize],
        exec: Exec,
    ) -> Result<f64> {
        if texts.is_empty() {
            return Err(Error::UndefinedMetric("utility on an empty test set".into()));
        }
        let mut probe = defense.clone();
        probe.noise_seed = derive_seed(defense.noise_seed, "utility");
        let logits = self.model.logits_batch(texts, exec);
        let preds: Vec<usize> = par::map_range(exec, texts.len(), |i| {
            apply_defense(&logits[i], &probe, i as u64).map(|p| p.label())
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / texts.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modeling::{Encoder, EncoderConfig};

    fn model() -> Arc<Model> {
        let cfg = EncoderConfig {
            hash_dim: 64,
            hidden_dims: vec![6],
            repr_dim: 6,
            hash_seed: 1,
            ngram_orders: vec![1],
        };
        let mut m = Model::from_encoder(Encoder::random(&cfg, 3).unwrap(), 3).unwrap();
        // give the head some weight so posteriors are not uniform
        let data: Vec<(String, Posterior)> = (0..30)
            .map(|i| (format!("w{} w{}", i % 3, i % 5), Posterior::one_hot(i % 3, 3)))
            .collect();
        let tc = crate::modeling::TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.2,
            l2: 0.0,
            seed: 1,
            target_mode: Default::default(),
            freeze_encoder: false,
        };
        m = crate::modeling::train(&m, &data, &tc).unwrap();
        Arc::new(m)
    }

    fn service(defense: DefenseConfig, budget: u64) -> Arc<VictimService> {
        let mut ledger = BudgetLedger::new();
        ledger.register("alice", budget);
        Arc::new(VictimService::new(model(), defense, ledger).unwrap())
    }

    fn texts(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{} w{}", i % 4, i % 7)).collect()
    }

    #[test]
    fn fourth_request_exceeds_budget_of_three() {
        let svc = service(DefenseConfig::none(), 3);
        let client = InProcessClient::new(svc, "alice");
        for i in 0..3 {
            let r = client.query(&texts(1)).unwrap();
            assert_eq!(r.queries_remaining, 2 - i);
        }
        assert!(matches!(
            client.query(&texts(1)),
            Err(Error::BudgetExceeded { remaining: 0 })
        ));
    }

    #[test]
    fn batches_are_atomic() {
        let svc = service(DefenseConfig::none(), 5);
        let client = InProcessClient::new(Arc::clone(&svc), "alice");
        assert!(matches!(
            client.query(&texts(6)),
            Err(Error::BudgetExceeded { remaining: 5 })
        ));
        let r = client.query(&texts(5)).unwrap();
        assert_eq!(r.results.len(), 5);
        assert_eq!(r.queries_remaining, 0);
    }

    #[test]
    fn pass_through_matches_local_predict() {
        let svc = service(DefenseConfig::none(), 100);
        let client = InProcessClient::new(Arc::clone(&svc), "alice");
        let batch = texts(10);
        let r = client.query(&batch).unwrap();
        let local = svc.measurement().posteriors(&batch, Exec::Sequential);
        for (got, want) in r.results.iter().zip(&local) {
            assert_eq!(got.probs().unwrap(), want.probs());
        }
    }

    #[test]
    fn hard_label_mode_returns_labels_only() {
        let svc = service(DefenseConfig::hard_label(), 100);
        let client = InProcessClient::new(Arc::clone(&svc), "alice");
        let batch = texts(8);
        let (_, body) = client.query_raw(&batch).unwrap();
        let s = String::from_utf8(body).unwrap();
        assert!(!s.contains("probs"), "{s}");
        let r = decode_reply(200, s.as_bytes()).unwrap();
        let local = svc.measurement().labels(&batch, Exec::Sequential);
        let got: Vec<usize> = r.results.iter().map(Prediction::label).collect();
        assert_eq!(got, local);
    }

    #[test]
    fn identical_streams_identical_replies() {
        let run = || {
            let svc = service(DefenseConfig::perturb(0.3, 77), 100);
            let client = InProcessClient::new(svc, "alice");
            (0..5)
                .map(|i| client.query_raw(&texts(i + 1)).unwrap().1)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn protocol_and_unknown_client_errors() {
        let svc = service(DefenseConfig::none(), 1);
        let (status, body) = svc.handle_bytes(b"{not json");
        assert_eq!(status, STATUS_PROTOCOL_ERROR);
        assert!(matches!(decode_reply(status, &body), Err(Error::Protocol(_))));

        let (status, body) = svc.handle_bytes(br#"{"client_id":"mallory","texts":["a"]}"#);
        assert_eq!(status, STATUS_UNKNOWN_CLIENT);
        assert!(matches!(decode_reply(status, &body), Err(Error::UnknownClient(_))));

        svc.handle_bytes(br#"{"client_id":"alice","texts":["a"]}"#);
        let (status, body) = svc.handle_bytes(br#"{"client_id":"alice","texts":["a"]}"#);
        assert_eq!(status, STATUS_BUDGET_EXCEEDED);
        assert_eq!(
            String::from_utf8(body).unwrap(),
            r#"{"error":"budget_exceeded","queries_remaining":0}"#
        );
    }

    #[test]
    fn utility_under_defenses() {
        let svc = service(DefenseConfig::none(), 0);
        let m = svc.measurement();
        let batch = texts(40);
        let labels = m.labels(&batch, Exec::Sequential);
        let clean = m
            .defended_accuracy(&DefenseConfig::none(), &batch, &labels, Exec::Sequential)
            .unwrap();
        assert_eq!(clean, 1.0);
        let hard = m
            .defended_accuracy(&DefenseConfig::hard_label(), &batch, &labels, Exec::Parallel)
            .unwrap();
        assert_eq!(hard, 1.0);
        assert!(m.defended_accuracy(&DefenseConfig::none(), &[], &[], Exec::Sequential).is_err());
    }
}
