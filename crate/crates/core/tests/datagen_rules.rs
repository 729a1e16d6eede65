use std::collections::{BTreeMap, BTreeSet};

use fitnet::datagen::{generate, local_categories, tourism_categories, Corpus, GenConfig, FLIGHT, HOTEL};
use fitnet::features::{TrainingInstance, UserContext};
use proptest::prelude::*;

/// What the checker re-derives for one user from the emitted records alone.
#[derive(Debug)]
struct Derived {
    destination: u32,
    transits: BTreeSet<u32>,
    sightseeing: bool,
}

fn derive(user: &UserContext) -> Result<Derived, String> {
    let reside = user.profile.reside_city_id;
    let hotels: BTreeSet<u32> = user
        .itinerary
        .iter()
        .filter(|o| o.category_id == HOTEL)
        .map(|o| o.dest_city_id)
        .collect();
    let flights: Vec<u32> = user
        .itinerary
        .iter()
        .filter(|o| o.category_id == FLIGHT)
        .map(|o| o.dest_city_id)
        .collect();
    if hotels.len() + flights.len() != user.itinerary.len() {
        return Err("itinerary holds a non-travel order".into());
    }
    let destination = match hotels.len() {
        1 => *hotels.first().unwrap(),
        0 => {
            let away: BTreeSet<u32> = flights.iter().copied().filter(|&c| c != reside).collect();
            if away.len() != 1 {
                return Err(format!("no hotel and {} away cities", away.len()));
            }
            *away.first().unwrap()
        }
        n => return Err(format!("{n} hotel cities")),
    };
    let transits = flights
        .iter()
        .copied()
        .filter(|&c| c != destination && c != reside)
        .collect();
    Ok(Derived {
        destination,
        transits,
        sightseeing: destination != user.profile.home_city_id,
    })
}

fn by_user(corpus: &Corpus) -> BTreeMap<u32, (UserContext, Vec<&TrainingInstance>, Vec<&TrainingInstance>)> {
    let mut out: BTreeMap<u32, (UserContext, Vec<&TrainingInstance>, Vec<&TrainingInstance>)> = BTreeMap::new();
    for inst in &corpus.train {
        out.entry(inst.user.user_id)
            .or_insert_with(|| (inst.user.clone(), Vec::new(), Vec::new()))
            .1
            .push(inst);
    }
    for inst in &corpus.test {
        out.entry(inst.user.user_id)
            .or_insert_with(|| (inst.user.clone(), Vec::new(), Vec::new()))
            .2
            .push(inst);
    }
    out
}

/// Every violation of the planted rules, as readable strings.
fn check(corpus: &Corpus, cfg: &GenConfig) -> Vec<String> {
    let tourism: BTreeSet<u32> = tourism_categories(cfg.n_categories).collect();
    let local: BTreeSet<u32> = local_categories(cfg.n_categories).collect();
    let mut bad = Vec::new();
    let users = by_user(corpus);
    if users.len() != cfg.n_users {
        bad.push(format!("{} users, expected {}", users.len(), cfg.n_users));
    }
    for (id, (user, train, test)) in &users {
        let mut fail = |msg: String| bad.push(format!("user {id}: {msg}"));
        if train.iter().chain(test).any(|i| i.user != *user) {
            fail("context differs between instances".into());
        }
        if !(1..=4).contains(&user.itinerary.len()) {
            fail(format!("itinerary length {}", user.itinerary.len()));
        }
        let d = match derive(user) {
            Ok(d) => d,
            Err(e) => {
                fail(e);
                continue;
            }
        };
        for inst in train.iter().chain(test) {
            if inst.label_click != 1 {
                fail("emitted instance is not a positive".into());
            }
            if inst.label_intent != u8::from(d.sightseeing) {
                fail(format!("intent {} but destination {} home {}", inst.label_intent, d.destination, user.profile.home_city_id));
            }
            let t = inst.target;
            if t.dest_city_id != d.destination {
                fail(format!("click {} in city {} outside destination {}", t.item_id, t.dest_city_id, d.destination));
            }
            if d.transits.contains(&t.dest_city_id) {
                fail(format!("click {} in transit city {}", t.item_id, t.dest_city_id));
            }
            let group = if d.sightseeing { &tourism } else { &local };
            if !group.contains(&t.category_id) {
                fail(format!("click {} has category {} for sightseeing={}", t.item_id, t.category_id, d.sightseeing));
            }
            if corpus.pool.get(t.item_id) != Some(&t) {
                fail(format!("click {} disagrees with the pool", t.item_id));
            }
        }
        for o in &user.itinerary {
            let leg_intent = u8::from(d.sightseeing && o.dest_city_id == d.destination);
            if o.intent_label != Some(leg_intent) {
                fail(format!("order to {} carries intent {:?}", o.dest_city_id, o.intent_label));
            }
        }
        let behavior: BTreeSet<u32> = user.behavior.iter().map(|b| b.item_id).collect();
        if test.iter().chain(train).any(|i| behavior.contains(&i.target.item_id)) {
            fail("a click target already sits in the behavior sequence".into());
        }
        if !(cfg.behavior_min..=cfg.behavior_max).contains(&user.behavior.len()) {
            fail(format!("behavior length {}", user.behavior.len()));
        }
        if user.behavior.iter().any(|b| corpus.pool.get(b.item_id) != Some(b)) {
            fail("behavior item disagrees with the pool".into());
        }
        if train.len() != cfg.train_clicks || test.len() != cfg.test_clicks {
            fail(format!("{} train and {} test clicks", train.len(), test.len()));
        }
    }
    bad
}

#[test]
fn default_corpus_follows_every_rule() {
    let cfg = GenConfig::default();
    let corpus = generate(&cfg).unwrap();
    let bad = check(&corpus, &cfg);
    assert!(bad.is_empty(), "{} violations, first: {:?}", bad.len(), &bad[..bad.len().min(5)]);
}

#[test]
fn checker_catches_tampering() {
    let cfg = GenConfig {
        n_users: 50,
        ..GenConfig::default()
    };
    let clean = generate(&cfg).unwrap();

    let mut flipped = generate(&cfg).unwrap();
    flipped.train[0].label_intent ^= 1;
    assert!(!check(&flipped, &cfg).is_empty());

    let mut moved = generate(&cfg).unwrap();
    let wrong = clean
        .pool
        .items()
        .iter()
        .find(|it| it.dest_city_id != moved.test[0].target.dest_city_id)
        .unwrap();
    moved.test[0].target = *wrong;
    assert!(!check(&moved, &cfg).is_empty());

    let mut leaked = generate(&cfg).unwrap();
    let target = leaked.test[0].target;
    let id = leaked.test[0].user.user_id;
    for inst in leaked.train.iter_mut().chain(leaked.test.iter_mut()).filter(|i| i.user.user_id == id) {
        inst.user.behavior.push(target);
    }
    assert!(!check(&leaked, &cfg).is_empty());
}

#[test]
fn home_destination_means_no_tourism() {
    let cfg = GenConfig::default();
    let corpus = generate(&cfg).unwrap();
    let tourism: BTreeSet<u32> = tourism_categories(cfg.n_categories).collect();
    let mut relatives = 0;
    for (user, train, test) in by_user(&corpus).values() {
        let d = derive(user).unwrap();
        if d.destination == user.profile.home_city_id {
            relatives += 1;
            assert!(train.iter().chain(test).all(|i| i.label_intent == 0));
            assert!(train.iter().chain(test).all(|i| !tourism.contains(&i.target.category_id)));
        }
    }
    assert!(relatives > 100, "only {relatives} relatives trips");
}

#[test]
fn transit_cities_never_clicked() {
    let corpus = generate(&GenConfig::default()).unwrap();
    let mut chains = 0;
    for (user, train, test) in by_user(&corpus).values() {
        let d = derive(user).unwrap();
        if !d.transits.is_empty() {
            chains += 1;
            assert!(train.iter().chain(test).all(|i| !d.transits.contains(&i.target.dest_city_id)));
        }
    }
    assert!(chains > 50, "only {chains} transfer chains");
}

#[test]
fn multi_order_share_near_53_percent() {
    let corpus = generate(&GenConfig {
        n_users: 10_000,
        ..GenConfig::default()
    })
    .unwrap();
    let users = by_user(&corpus);
    let multi = users.values().filter(|(u, ..)| u.itinerary.len() > 1).count();
    let share = multi as f64 / users.len() as f64;
    assert!((share - 0.53).abs() <= 0.02, "share {share}");
}

fn small_config() -> impl Strategy<Value = GenConfig> {
    (20usize..80, 6usize..12, 8usize..11, 0.0f64..0.3, any::<u64>()).prop_map(|(users, cities, cats, noise, seed)| {
        GenConfig {
            n_users: users,
            n_cities: cities,
            n_categories: cats,
            n_items: cities * cats * 8,
            click_noise: noise,
            seed,
            ..GenConfig::default()
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rules_hold_for_any_valid_config(cfg in small_config()) {
        let corpus = generate(&cfg).unwrap();
        let bad = check(&corpus, &cfg);
        prop_assert!(bad.is_empty(), "{:?}", &bad[..bad.len().min(5)]);
    }

    #[test]
    fn same_seed_same_corpus(cfg in small_config()) {
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        prop_assert_eq!(a.train, b.train);
        prop_assert_eq!(a.test, b.test);
        prop_assert_eq!(a.pool.items(), b.pool.items());
    }
}
