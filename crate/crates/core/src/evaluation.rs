//! Offline metrics and the method comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::error::{FitError, Result};
use crate::features::{encode_user, TrainingInstance, UserContext, Vocabularies};
use crate::model::{Method, Model};
use crate::retrieval::{RetrievalIndex, TopK};
use crate::sampling::ItemPool;

pub const DEFAULT_KS: [usize; 4] = [3, 10, 20, 50];

/// Produces a ranked list of item ids for a user.
pub trait Recommender: Sync {
    fn recommend(&self, user: &UserContext, k: usize) -> Result<Vec<u32>>;
}

/// A held-out user: context plus every item clicked in the test period.
#[derive(Clone, Debug, PartialEq)]
pub struct TestUser {
    pub user: UserContext,
    pub clicks: Vec<u32>,
}

impl TestUser {
    /// Ground truth for precision: test clicks not already in the behavior
    /// sequence.
    pub fn ground_truth(&self) -> BTreeSet<u32> {
        let seen: BTreeSet<u32> = self.user.behavior.iter().map(|b| b.item_id).collect();
        self.clicks.iter().copied().filter(|c| !seen.contains(c)).collect()
    }
}

/// Groups positive test instances by user id.
pub fn test_users(test: &[TrainingInstance]) -> Vec<TestUser> {
    let mut by_user: BTreeMap<u32, TestUser> = BTreeMap::new();
    for inst in test.iter().filter(|i| i.label_click == 1) {
        by_user
            .entry(inst.user.user_id)
            .or_insert_with(|| TestUser {
                user: inst.user.clone(),
                clicks: Vec::new(),
            })
            .clicks
            .push(inst.target.item_id);
    }
    by_user.into_values().collect()
}

/// Share of cases whose target is in the top `k`.
pub fn hit_rate_at_k(cases: &[(UserContext, u32)], rec: &dyn Recommender, k: usize) -> Result<f64> {
    if cases.is_empty() {
        return Err(FitError::invalid("no test cases"));
    }
    let mut hits = 0usize;
    for (user, target) in cases {
        if rec.recommend(user, k)?.iter().take(k).any(|i| i == target) {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases.len() as f64)
}

/// Mean over users of `|top-k ∩ S_gt| / k`.
pub fn precision_at_k(
    users: &[UserContext],
    rec: &dyn Recommender,
    ground_truth: &[BTreeSet<u32>],
    k: usize,
) -> Result<f64> {
    if users.is_empty() || users.len() != ground_truth.len() {
        return Err(FitError::invalid("need one ground-truth set per user"));
    }
    let mut total = 0.0;
    for (user, gt) in users.iter().zip(ground_truth) {
        let top = rec.recommend(user, k)?;
        total += top.iter().take(k).filter(|i| gt.contains(i)).count() as f64 / k as f64;
    }
    Ok(total / users.len() as f64)
}

pub fn ctr(clicks: u64, impressions: u64) -> Result<f64> {
    if impressions == 0 {
        return Err(FitError::invalid("CTR needs at least one impression"));
    }
    if clicks > impressions {
        return Err(FitError::invalid(format!(
            "{clicks} clicks exceed {impressions} impressions"
        )));
    }
    Ok(clicks as f64 / impressions as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KMetrics {
    pub k: usize,
    pub hit_rate: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub test_cases: usize,
    pub users: usize,
    pub metrics: Vec<KMetrics>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&KMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn hit_rate(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.hit_rate)
    }

    pub fn precision(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.precision)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<13}", self.method)?;
        for m in &self.metrics {
            write!(f, "  HR@{}={:.4} P@{}={:.4}", m.k, m.hit_rate, m.k, m.precision)?;
        }
        Ok(())
    }
}

/// Both metrics for every `k`, from one ranking per user.
pub fn evaluate(name: &str, rec: &dyn Recommender, users: &[TestUser], ks: &[usize]) -> Result<EvalReport> {
    let max_k = ks.iter().copied().max().ok_or_else(|| FitError::invalid("empty k grid"))?;
    if ks.contains(&0) {
        return Err(FitError::invalid("k must be positive"));
    }
    let one = |u: &TestUser| rec.recommend(&u.user, max_k);
    #[cfg(feature = "parallel")]
    let rankings: Vec<Result<Vec<u32>>> = {
        use rayon::prelude::*;
        users.par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rankings: Vec<Result<Vec<u32>>> = users.iter().map(one).collect();

    let mut hits = vec![0usize; ks.len()];
    let mut prec = vec![0.0; ks.len()];
    let mut cases = 0;
    let mut gt_users = 0;
    for (u, ranking) in users.iter().zip(rankings) {
        let ranking = ranking?;
        let gt = u.ground_truth();
        cases += u.clicks.len();
        if !gt.is_empty() {
            gt_users += 1;
        }
        for (j, &k) in ks.iter().enumerate() {
            let top = &ranking[..k.min(ranking.len())];
            hits[j] += u.clicks.iter().filter(|c| top.contains(c)).count();
            if !gt.is_empty() {
                prec[j] += top.iter().filter(|i| gt.contains(i)).count() as f64 / k as f64;
            }
        }
    }
    if cases == 0 {
        return Err(FitError::invalid("no test cases"));
    }
    let metrics = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| KMetrics {
            k,
            hit_rate: hits[j] as f64 / cases as f64,
            precision: if gt_users == 0 { 0.0 } else { prec[j] / gt_users as f64 },
        })
        .collect();
    Ok(EvalReport {
        method: name.to_string(),
        test_cases: cases,
        users: users.len(),
        metrics,
    })
}

/// Two-tower retrieval through a model and its item index.
pub struct ModelRecommender<'a> {
    pub model: &'a Model,
    pub vocabs: &'a Vocabularies,
    pub index: RetrievalIndex,
}

impl<'a> ModelRecommender<'a> {
    pub fn new(model: &'a Model, vocabs: &'a Vocabularies, pool: &ItemPool) -> Result<Self> {
        Ok(Self {
            model,
            vocabs,
            index: RetrievalIndex::build(pool, model, vocabs)?,
        })
    }
}

impl Recommender for ModelRecommender<'_> {
    fn recommend(&self, user: &UserContext, k: usize) -> Result<Vec<u32>> {
        let v_u = self.model.user_vector(&encode_user(user, self.vocabs)?)?;
        let k = k.min(self.index.len());
        Ok(self.index.top_k(&v_u, k)?.into_iter().map(|(id, _)| id).collect())
    }
}

/// Popular items of the itinerary's destination cities, then globally
/// popular ones. Popularity is the training click count.
#[derive(Clone, Debug)]
pub struct OrderDest2i {
    by_city: BTreeMap<u32, Vec<u32>>,
    global: Vec<u32>,
    rank: BTreeMap<u32, usize>,
}

impl OrderDest2i {
    pub fn new(train: &[TrainingInstance], pool: &ItemPool) -> Self {
        let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
        for inst in train.iter().filter(|i| i.label_click == 1) {
            *counts.entry(inst.target.item_id).or_default() += 1;
        }
        let mut ranked: Vec<(u32, u64, u32)> = pool
            .items()
            .iter()
            .map(|it| (it.item_id, counts.get(&it.item_id).copied().unwrap_or(0), it.dest_city_id))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut by_city: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &(id, _, city) in &ranked {
            by_city.entry(city).or_default().push(id);
        }
        let global: Vec<u32> = ranked.iter().map(|r| r.0).collect();
        let rank = global.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        Self {
            by_city,
            global,
            rank,
        }
    }
}

impl Recommender for OrderDest2i {
    fn recommend(&self, user: &UserContext, k: usize) -> Result<Vec<u32>> {
        let cities: BTreeSet<u32> = user.itinerary.iter().map(|o| o.dest_city_id).collect();
        let mut local: Vec<u32> = cities
            .iter()
            .filter_map(|c| self.by_city.get(c))
            .flatten()
            .copied()
            .collect();
        if cities.len() > 1 {
            local.sort_by_key(|id| self.rank[id]);
        }
        let mut out: Vec<u32> = local.into_iter().take(k).collect();
        if out.len() < k {
            let taken: BTreeSet<u32> = out.iter().copied().collect();
            out.extend(
                self.global
                    .iter()
                    .filter(|id| !taken.contains(id))
                    .take(k - out.len()),
            );
        }
        Ok(out)
    }
}

/// Evaluates each method on the same test users and k grid.
pub fn run_comparison(
    checkpoint: &Checkpoint,
    train: &[TrainingInstance],
    test: &[TrainingInstance],
    pool: &ItemPool,
    methods: &[Method],
    ks: &[usize],
) -> Result<Vec<EvalReport>> {
    let users = test_users(test);
    methods
        .iter()
        .map(|&m| {
            if m == Method::OrderDest2i {
                return evaluate(m.name(), &OrderDest2i::new(train, pool), &users, ks);
            }
            let trained = checkpoint.model(m)?;
            let rec = ModelRecommender::new(&trained.model, &checkpoint.vocabularies, pool)?;
            evaluate(m.name(), &rec, &users, ks)
        })
        .collect()
}

/// `method,k,hitrate,precision` lines with a header.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("method,k,hitrate,precision\n");
    for r in reports {
        for m in &r.metrics {
            s.push_str(&format!("{},{},{:.6},{:.6}\n", r.method, m.k, m.hit_rate, m.precision));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ItemRef, Profile, RawOrder};

    struct Fixed(Vec<u32>);

    impl Recommender for Fixed {
        fn recommend(&self, _: &UserContext, k: usize) -> Result<Vec<u32>> {
            Ok(self.0.iter().copied().take(k).collect())
        }
    }

    fn user(id: u32, cities: &[u32]) -> UserContext {
        UserContext {
            user_id: id,
            profile: Profile {
                gender: "m".into(),
                age_level: 1,
                reside_city_id: 1,
                home_city_id: 1,
            },
            itinerary: cities
                .iter()
                .map(|&c| RawOrder {
                    item_id: 1000 + c,
                    category_id: 0,
                    dest_city_id: c,
                    intent_label: None,
                })
                .collect(),
            behavior: vec![],
        }
    }

    #[test]
    fn hit_rate_counts() {
        let rec = Fixed((1..=20).collect());
        let cases: Vec<_> = (0..10)
            .map(|i| (user(i, &[1]), if i < 3 { 5 } else { 99 }))
            .collect();
        assert_eq!(hit_rate_at_k(&cases, &rec, 10).unwrap(), 0.3);
        assert_eq!(hit_rate_at_k(&cases[..3], &rec, 10).unwrap(), 1.0);
        assert_eq!(hit_rate_at_k(&cases[3..], &rec, 10).unwrap(), 0.0);
    }

    #[test]
    fn precision_counts() {
        let rec = Fixed((1..=20).collect());
        let u = vec![user(1, &[1])];
        let gt = vec![BTreeSet::from([3, 7, 40])];
        assert_eq!(precision_at_k(&u, &rec, &gt, 10).unwrap(), 0.2);
        let all = vec![(1..=10).collect()];
        assert_eq!(precision_at_k(&u, &rec, &all, 10).unwrap(), 1.0);
        let none = vec![BTreeSet::from([50])];
        assert_eq!(precision_at_k(&u, &rec, &none, 10).unwrap(), 0.0);
    }

    #[test]
    fn ctr_cases() {
        assert_eq!(ctr(0, 10).unwrap(), 0.0);
        assert_eq!(ctr(5, 100).unwrap(), 0.05);
        assert!(ctr(1, 0).is_err());
        assert!(ctr(11, 10).is_err());
    }

    #[test]
    fn evaluate_matches_direct_metrics() {
        let rec = Fixed((1..=60).collect());
        let users = vec![
            TestUser {
                user: user(1, &[1]),
                clicks: vec![2, 15],
            },
            TestUser {
                user: user(2, &[1]),
                clicks: vec![55],
            },
        ];
        let r = evaluate("fixed", &rec, &users, &DEFAULT_KS).unwrap();
        assert_eq!(r.test_cases, 3);
        assert_eq!(r.hit_rate(3), 1.0 / 3.0);
        assert_eq!(r.hit_rate(20), 2.0 / 3.0);
        assert_eq!(r.hit_rate(50), 2.0 / 3.0);
        assert_eq!(r.precision(3), (1.0 / 3.0) / 2.0);
    }

    #[test]
    fn order_dest_ranks_city_then_global() {
        let items = vec![
            ItemRef { item_id: 1, category_id: 0, dest_city_id: 1 },
            ItemRef { item_id: 2, category_id: 0, dest_city_id: 1 },
            ItemRef { item_id: 3, category_id: 0, dest_city_id: 2 },
            ItemRef { item_id: 4, category_id: 0, dest_city_id: 2 },
            ItemRef { item_id: 5, category_id: 0, dest_city_id: 3 },
        ];
        let pool = ItemPool::new(items.clone()).unwrap();
        let click = |it: ItemRef| TrainingInstance {
            user: user(9, &[1]),
            target: it,
            label_click: 1,
            label_intent: 1,
        };
        let train = vec![click(items[1]), click(items[4]), click(items[4]), click(items[2])];
        let rec = OrderDest2i::new(&train, &pool);
        assert_eq!(rec.recommend(&user(1, &[1]), 5).unwrap(), vec![2, 1, 5, 3, 4]);
        assert_eq!(rec.recommend(&user(1, &[2, 1]), 3).unwrap(), vec![2, 3, 1]);
    }
}
