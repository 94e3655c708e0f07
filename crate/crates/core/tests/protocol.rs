mod common;

use std::sync::Arc;

use common::{golden_log, ledger_stress, protocol_model, replay_golden_log};
use mealab::victim_api::{
    BudgetLedger, DefenseConfig, HttpClient, HttpServer, InProcessClient, VictimClient, VictimService,
};

#[test]
fn golden_log_is_identical_over_both_transports() {
    for defense in [
        DefenseConfig::none(),
        DefenseConfig::hard_label(),
        DefenseConfig::soften(2.0),
        DefenseConfig::perturb(0.2, 13),
    ] {
        let bad = replay_golden_log(&defense);
        assert!(bad.is_empty(), "{}: requests {bad:?} differ", defense.label());
    }
}

#[test]
fn golden_log_covers_refusals() {
    let log = golden_log();
    assert_eq!(log.len(), 100);
    assert!(log.iter().any(|(c, _)| c == "mallory"));
    let bob: usize = log.iter().filter(|(c, _)| c == "bob").map(|(_, t)| t.len()).sum();
    assert!(bob > 20, "bob must run past his budget");
}

#[test]
fn shared_budget_holds_under_sixteen_threads_in_process() {
    let (admitted, used) = ledger_stress(500, 16, false);
    assert_eq!(admitted, 500);
    assert_eq!(used, 500);
}

#[test]
fn shared_budget_holds_under_sixteen_threads_over_http() {
    let (admitted, used) = ledger_stress(200, 16, true);
    assert_eq!(admitted, 200);
    assert_eq!(used, 200);
}

#[test]
fn http_budget_exceeded_and_unknown_client_are_typed() {
    let mut ledger = BudgetLedger::new();
    ledger.register("a", 3);
    let service = Arc::new(VictimService::new(protocol_model(), DefenseConfig::none(), ledger).unwrap());
    let server = HttpServer::spawn(service, "127.0.0.1:0".parse().unwrap()).unwrap();
    let client = HttpClient::new(&server.url(), "a");
    let texts = |n: usize| (0..n).map(|i| format!("doc {i}")).collect::<Vec<_>>();
    assert!(matches!(
        client.query(&texts(4)),
        Err(mealab::Error::BudgetExceeded { remaining: 3 })
    ));
    assert_eq!(client.query(&texts(3)).unwrap().queries_remaining, 0);
    assert!(matches!(
        HttpClient::new(&server.url(), "nobody").query(&texts(1)),
        Err(mealab::Error::UnknownClient(_))
    ));
}

#[test]
fn responses_align_with_inputs() {
    let model = protocol_model();
    let mut ledger = BudgetLedger::new();
    ledger.register("a", 100);
    let service = Arc::new(VictimService::new(Arc::clone(&model), DefenseConfig::none(), ledger).unwrap());
    let texts: Vec<String> = ["gamma delta", "", "alpha", "beta beta zeta"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let resp = InProcessClient::new(service, "a").query(&texts).unwrap();
    for (t, r) in texts.iter().zip(&resp.results) {
        assert_eq!(r.probs(), Some(model.predict(t).probs()));
    }
}
