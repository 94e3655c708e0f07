mod common;

use common::protocol_model;
use mealab::aia::{empirical_privacy, AttributeKind};
use mealab::corpus::{split, text_ngram_recall, Dataset, Document, SplitSpec};
use mealab::mea::agreement;
use mealab::metrics::{max_posterior_stats, spearman};
use mealab::modeling::{Encoder, EncoderConfig, Model, Posterior};
use mealab::par::Exec;
use mealab::victim_api::BudgetLedger;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "dog", "cat", "x1", "Zed"]), 0..12)
        .prop_map(|w| w.join(" "))
}

fn numbered(n: usize) -> Dataset {
    let docs = (0..n).map(|i| Document::new(format!("d{i}"), i % 2)).collect();
    Dataset::new(docs, 2, vec![]).unwrap()
}

fn posterior(k: usize) -> impl Strategy<Value = Posterior> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("all zero", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| Posterior::new(v.iter().map(|x| x / s).collect()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_partition(n in 10usize..300, aux in 0.01f64..0.99, seed in any::<u64>()) {
        let ds = numbered(n);
        let s = split(&ds, &SplitSpec { aux_fraction: aux, seed }).unwrap();
        let n_aux = (aux * n as f64).floor() as usize;
        prop_assert_eq!(s.aux.len(), n_aux);
        prop_assert_eq!(s.victim.len(), (n - n_aux).div_ceil(2));
        let mut all: Vec<String> = [s.aux.texts(), s.victim.texts(), s.query.texts()].concat();
        all.sort();
        let mut orig = ds.texts();
        orig.sort();
        prop_assert_eq!(all, orig);
    }

    #[test]
    fn predictions_are_distributions(t in text()) {
        let m = protocol_model();
        let p = m.predict(&t);
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.probs().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn head_on_tap_reproduces_logits(t in text()) {
        let m = protocol_model();
        let h = m.representation(&t);
        prop_assert_eq!(h.len(), m.repr_dim());
        prop_assert_eq!(m.head_logits(&h), m.logits(&t));
    }

    #[test]
    fn demographic_privacy_complements_accuracy(
        pairs in prop::collection::vec((0i64..2, 0i64..2), 1..200)
    ) {
        let (p, t): (Vec<i64>, Vec<i64>) = pairs.into_iter().unzip();
        let s = empirical_privacy(&p, &t, AttributeKind::Demographic).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.privacy));
        prop_assert_eq!(s.privacy + s.attack_score.unwrap(), 1.0);
    }

    #[test]
    fn entity_privacy_in_unit_interval(
        pairs in prop::collection::vec((0i64..2, 0i64..2), 1..200)
    ) {
        let (p, t): (Vec<i64>, Vec<i64>) = pairs.into_iter().unzip();
        let s = empirical_privacy(&p, &t, AttributeKind::Entity).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.privacy));
        prop_assert_eq!(s.degenerate, s.attack_score.is_none());
    }

    #[test]
    fn sharpness_stats_bounds(ps in prop::collection::vec(posterior(4), 1..50)) {
        let s = max_posterior_stats(&ps).unwrap();
        prop_assert!(s.mean >= 0.25 - 1e-12 && s.mean <= 1.0 + 1e-12);
        prop_assert!(s.median >= 0.25 - 1e-12 && s.median <= 1.0 + 1e-12);
        prop_assert_eq!(s.histogram.iter().sum::<usize>(), ps.len());
    }

    #[test]
    fn spearman_is_rank_based(xs in prop::collection::vec(-100.0f64..100.0, 3..30)) {
        let ys: Vec<f64> = xs.iter().map(|x| x * 0.5 + (x / 10.0).sin()).collect();
        if let Some(r) = spearman(&xs, &ys) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let cubed: Vec<f64> = xs.iter().map(|x| x.powi(3)).collect();
            let r2 = spearman(&cubed, &ys).unwrap();
            prop_assert!((r - r2).abs() < 1e-12);
        }
    }

    #[test]
    fn agreement_ignores_eval_order(seed in any::<u64>(), n in 5usize..60) {
        let a = protocol_model();
        let cfg = EncoderConfig { hash_seed: 4, ..a.encoder_config().clone() };
        let b = Model::from_encoder(Encoder::random(&cfg, seed % 7).unwrap(), 3).unwrap();
        let docs: Vec<Document> = (0..n)
            .map(|i| Document::new(format!("w{} w{} w{}", i % 5, i % 7, i % 3), i % 3))
            .collect();
        let mut shuffled = docs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let d1 = Dataset::new(docs, 3, vec![]).unwrap();
        let d2 = Dataset::new(shuffled, 3, vec![]).unwrap();
        let x = agreement(a.as_ref(), &b, &d1, Exec::Sequential).unwrap();
        let y = agreement(a.as_ref(), &b, &d2, Exec::Sequential).unwrap();
        prop_assert_eq!(x, y);
        prop_assert_eq!(agreement(a.as_ref(), a.as_ref(), &d1, Exec::Sequential).unwrap(), 1.0);
    }

    #[test]
    fn ledger_never_overspends(budget in 0u64..50, charges in prop::collection::vec(0u64..10, 0..40)) {
        let mut ledger = BudgetLedger::new();
        ledger.register("c", budget);
        let mut accepted = 0;
        for n in charges {
            if ledger.charge("c", n).is_ok() {
                accepted += n;
            }
            let acct = ledger.account("c").unwrap();
            prop_assert!(acct.used <= acct.allowed);
        }
        prop_assert_eq!(ledger.account("c").unwrap().used, accepted);
    }

    #[test]
    fn overlap_in_unit_interval(q in prop::collection::vec(text(), 1..8), t in prop::collection::vec(text(), 1..8)) {
        if let Ok(r) = text_ngram_recall(&q, &t, 1) {
            prop_assert!((0.0..=1.0).contains(&r));
        }
        if let Ok(r) = text_ngram_recall(&t, &t, 1) {
            prop_assert_eq!(r, 1.0);
        }
    }
}

#[test]
fn identical_texts_identical_representations() {
    let m = protocol_model();
    let texts: Vec<String> = ["a b", "b a", "cat", "a b"].iter().map(|t| t.to_string()).collect();
    let batch = m.representation_batch(&texts, Exec::default());
    assert_eq!(batch[0], batch[3]);
    assert_eq!(batch[0], m.representation("a b"));
    assert_ne!(batch[0], batch[1], "bigram features make order visible");
}
