use std::time::Instant;

use fitnet::datagen::{generate, GenConfig};
use fitnet::evaluation::{ctr, evaluate, test_users, OrderDest2i, Recommender};
use fitnet::features::{build_vocabularies, UserContext};
use fitnet::model::{Method, Model, ModelConfig};
use fitnet::retrieval::{inner, retrieve_top_k, user_vector, RetrievalIndex, TopK};
use fitnet::Result;
use proptest::prelude::*;

fn index_strategy() -> impl Strategy<Value = (RetrievalIndex, Vec<f64>)> {
    (1usize..60, 1usize..5).prop_flat_map(|(n, dim)| {
        (
            prop::collection::btree_set(1u32..10_000, n),
            // small integers force plenty of score ties
            prop::collection::vec(-2i8..3, n * dim),
            prop::collection::vec(-2i8..3, dim),
        )
            .prop_map(move |(ids, rows, q)| {
                let ids: Vec<u32> = ids.into_iter().collect();
                let rows = rows.into_iter().map(f64::from).collect();
                let idx = RetrievalIndex::from_rows(ids, dim, rows, String::new()).unwrap();
                (idx, q.into_iter().map(f64::from).collect())
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn top_k_is_the_prefix_of_a_full_sort((idx, q) in index_strategy(), k_frac in 0.0f64..1.0) {
        let k = 1 + ((idx.len() - 1) as f64 * k_frac) as usize;
        let mut brute: Vec<(u32, f64)> = (0..idx.len()).map(|i| (idx.item_ids()[i], inner(&q, idx.row(i)))).collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let top = idx.top_k(&q, k).unwrap();
        prop_assert_eq!(top.len(), k);
        for ((id, s), (bid, bs)) in top.iter().zip(&brute) {
            prop_assert_eq!(id, bid);
            prop_assert_eq!(s.to_bits(), bs.to_bits());
        }
    }

    #[test]
    fn k_outside_range_is_rejected((idx, q) in index_strategy()) {
        prop_assert!(idx.top_k(&q, 0).is_err());
        prop_assert!(idx.top_k(&q, idx.len() + 1).is_err());
        prop_assert!(idx.top_k(&q[..q.len() - 1], 1).is_err() || q.len() == 1);
    }
}

#[test]
fn model_scores_are_exact_inner_products_and_fast() {
    let corpus = generate(&GenConfig {
        n_users: 200,
        n_items: 10_000,
        seed: 5,
        ..GenConfig::default()
    })
    .unwrap();
    let vocabs = build_vocabularies(&corpus.train).unwrap();
    let model = Model::new(Method::FitNet.model_config(&ModelConfig::default()).unwrap(), &vocabs).unwrap();
    let user = &corpus.test[0].user;
    let start = Instant::now();
    let idx = RetrievalIndex::build(&corpus.pool, &model, &vocabs).unwrap();
    let top = retrieve_top_k(&model, &vocabs, &idx, user, 50).unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "{elapsed:?}");
    assert_eq!(idx.len(), 10_000);
    let u = user_vector(&model, &vocabs, user).unwrap();
    let pos: std::collections::BTreeMap<u32, usize> = idx.item_ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    for w in top.windows(2) {
        assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
    }
    for (id, s) in &top {
        assert_eq!(s.to_bits(), inner(&u, idx.row(pos[id])).to_bits());
    }
}

/// Ranks items by a fixed permutation of the pool, ignoring the user.
struct Fixed(Vec<u32>);

impl Recommender for Fixed {
    fn recommend(&self, _: &UserContext, k: usize) -> Result<Vec<u32>> {
        Ok(self.0.iter().copied().take(k).collect())
    }
}

#[test]
fn metrics_are_bounded_and_hit_rate_grows_with_k() {
    let corpus = generate(&GenConfig {
        n_users: 300,
        ..GenConfig::default()
    })
    .unwrap();
    let users = test_users(&corpus.test);
    let ks = [1, 3, 10, 20, 50, 200];
    let mut ids: Vec<u32> = corpus.pool.items().iter().map(|i| i.item_id).collect();
    ids.reverse();
    let recs: Vec<(&str, Box<dyn Recommender>)> = vec![
        ("fixed", Box::new(Fixed(ids))),
        ("orderdest2i", Box::new(OrderDest2i::new(&corpus.train, &corpus.pool))),
    ];
    for (name, rec) in &recs {
        let report = evaluate(name, rec.as_ref(), &users, &ks).unwrap();
        for m in &report.metrics {
            assert!((0.0..=1.0).contains(&m.hit_rate) && (0.0..=1.0).contains(&m.precision));
        }
        for w in report.metrics.windows(2) {
            assert!(w[0].hit_rate <= w[1].hit_rate, "{name}: {:?}", report.metrics);
        }
    }
}

#[test]
fn perfect_recommender_scores_one() {
    struct Oracle(std::collections::BTreeMap<u32, Vec<u32>>);
    impl Recommender for Oracle {
        fn recommend(&self, user: &UserContext, k: usize) -> Result<Vec<u32>> {
            Ok(self.0[&user.user_id].iter().copied().take(k).collect())
        }
    }
    let corpus = generate(&GenConfig {
        n_users: 100,
        ..GenConfig::default()
    })
    .unwrap();
    let users = test_users(&corpus.test);
    let answers = users
        .iter()
        .map(|u| (u.user.user_id, u.ground_truth().into_iter().collect::<Vec<_>>()))
        .collect();
    let k = users.iter().map(|u| u.ground_truth().len()).min().unwrap();
    let report = evaluate("oracle", &Oracle(answers), &users, &[k]).unwrap();
    assert_eq!(report.hit_rate(k), 1.0);
    assert_eq!(report.precision(k), 1.0);
}

#[test]
fn ctr_rejects_impossible_counts() {
    assert_eq!(ctr(3, 12).unwrap(), 0.25);
    assert!(ctr(1, 0).is_err());
    assert!(ctr(5, 4).is_err());
}
