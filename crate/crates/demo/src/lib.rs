//! Browser demo: trains a small model in the page, then exposes attention
//! inspection, top-k retrieval with simulated clicks, and the negative
//! sampler's composition.

use std::collections::BTreeSet;

use fitnet::datagen::{generate, Corpus, GenConfig};
use fitnet::embedding::EmbeddingDims;
use fitnet::features::{build_vocabularies, encode_user, ItemRef, TrainingInstance, UserContext, Vocabularies};
use fitnet::model::{Method, Model, ModelConfig};
use fitnet::retrieval::{retrieve_top_k, with_clicks, RetrievalIndex};
use fitnet::sampling::{sample_negative_items, SamplingPolicy, Setting};
use fitnet::training::{train_model, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const CATEGORY_NAMES: [&str; 8] = [
    "flight", "hotel", "attraction", "tour", "show", "dining", "spa", "shopping",
];

fn category_name(c: u32) -> String {
    CATEGORY_NAMES
        .get(c as usize)
        .map_or_else(|| format!("category {c}"), |s| s.to_string())
}

fn item_json(it: &ItemRef) -> Value {
    json!({
        "item": it.item_id,
        "city": it.dest_city_id,
        "category": category_name(it.category_id),
    })
}

pub struct Demo {
    corpus: Corpus,
    vocabs: Vocabularies,
    model: Model,
    index: RetrievalIndex,
    loss_history: Vec<f64>,
}

impl Demo {
    pub fn new(seed: u64, n_users: usize, epochs: usize) -> fitnet::Result<Self> {
        let corpus = generate(&GenConfig {
            n_users,
            n_items: 2400,
            n_cities: 8,
            seed,
            ..GenConfig::default()
        })?;
        let vocabs = build_vocabularies(&corpus.train)?;
        let config = ModelConfig {
            embedding: EmbeddingDims {
                item_id: 12,
                category_id: 6,
                city_id: 6,
                gender: 2,
                age_level: 3,
            },
            d_model: 8,
            heads: 2,
            intention_hidden: vec![8],
            user_hidden: vec![24],
            item_hidden: vec![24],
            repr_dim: 12,
            seed,
            ..ModelConfig::default()
        };
        let mut model = Model::new(Method::FitNet.model_config(&config).expect("fitnet is a learned method"), &vocabs)?;
        let train = TrainConfig {
            epochs,
            shuffle_seed: seed,
            ..TrainConfig::default()
        };
        let policy = SamplingPolicy {
            seed,
            ..SamplingPolicy::default()
        };
        let loss_history = train_model(&mut model, &vocabs, &corpus.train, &corpus.pool, &policy, &train, |_, _| {})?;
        let index = RetrievalIndex::build(&corpus.pool, &model, &vocabs)?;
        Ok(Self {
            corpus,
            vocabs,
            model,
            index,
            loss_history,
        })
    }

    fn instances(&self, user_id: u32) -> impl Iterator<Item = &TrainingInstance> {
        self.corpus
            .test
            .iter()
            .chain(&self.corpus.train)
            .filter(move |i| i.user.user_id == user_id)
    }

    fn first(&self, user_id: u32) -> fitnet::Result<&TrainingInstance> {
        self.instances(user_id)
            .next()
            .ok_or_else(|| fitnet::FitError::invalid(format!("no user {user_id}")))
    }

    fn user(&self, user_id: u32) -> fitnet::Result<&UserContext> {
        Ok(&self.first(user_id)?.user)
    }

    pub fn summary(&self) -> Value {
        let users: BTreeSet<u32> = self.corpus.test.iter().map(|i| i.user.user_id).collect();
        json!({
            "users": users,
            "items": self.corpus.pool.len(),
            "loss": self.loss_history,
        })
    }

    /// Profile, itinerary with its attention weights, behavior with its
    /// attention weights, and the sightseeing probability.
    pub fn inspect(&self, user_id: u32) -> fitnet::Result<Value> {
        let user = self.user(user_id)?;
        let view = self.model.inspect_user(&encode_user(user, &self.vocabs)?)?;
        let alpha = view.alpha.unwrap_or_default();
        let beta = view.beta.unwrap_or_default();
        let itinerary: Vec<Value> = user
            .itinerary
            .iter()
            .enumerate()
            .map(|(j, o)| {
                json!({
                    "item": o.item_id,
                    "city": o.dest_city_id,
                    "category": category_name(o.category_id),
                    "weight": alpha.get(j),
                })
            })
            .collect();
        let behavior: Vec<Value> = user
            .behavior
            .iter()
            .enumerate()
            .map(|(l, b)| {
                let mut v = item_json(b);
                v["weight"] = json!(beta.get(l));
                v
            })
            .collect();
        let clicked: Vec<Value> = self
            .corpus
            .test
            .iter()
            .filter(|i| i.user.user_id == user_id)
            .map(|i| item_json(&i.target))
            .collect();
        Ok(json!({
            "user": user_id,
            "gender": user.profile.gender,
            "age_level": user.profile.age_level,
            "reside_city": user.profile.reside_city_id,
            "home_city": user.profile.home_city_id,
            "p_sightseeing": view.p_intent,
            "itinerary": itinerary,
            "behavior": behavior,
            "held_out_clicks": clicked,
        }))
    }

    /// Top `k` items for the user after appending `clicks` to the behavior.
    pub fn recommend(&self, user_id: u32, k: usize, clicks: &[u32]) -> fitnet::Result<Value> {
        let user = with_clicks(self.user(user_id)?, &self.corpus.pool, clicks)?;
        let held: BTreeSet<u32> = self
            .corpus
            .test
            .iter()
            .filter(|i| i.user.user_id == user_id)
            .map(|i| i.target.item_id)
            .collect();
        let top = retrieve_top_k(&self.model, &self.vocabs, &self.index, &user, k)?;
        let rows: Vec<Value> = top
            .iter()
            .enumerate()
            .map(|(r, &(id, score))| {
                let mut v = item_json(self.corpus.pool.get(id).expect("indexed item in pool"));
                v["rank"] = json!(r + 1);
                v["score"] = json!(score);
                v["held_out"] = json!(held.contains(&id));
                v
            })
            .collect();
        Ok(json!({ "user": user_id, "clicks": clicks, "items": rows }))
    }

    /// Negatives drawn for the user's first positive under a setting, with
    /// how many share the positive's category and itinerary cities.
    pub fn sample(&self, user_id: u32, setting: u8, ratio: usize, seed: u64) -> fitnet::Result<Value> {
        let positive = self.first(user_id)?;
        let policy = SamplingPolicy {
            setting: Setting::try_from(setting)?,
            ratio,
            seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let negs = sample_negative_items(positive, &self.corpus.pool, &policy, &mut rng)?;
        let cities: BTreeSet<u32> = positive.user.itinerary.iter().map(|o| o.dest_city_id).collect();
        Ok(json!({
            "positive": item_json(&positive.target),
            "itinerary_cities": cities,
            "negatives": negs.iter().map(item_json).collect::<Vec<_>>(),
            "same_category": negs.iter().filter(|n| n.category_id == positive.target.category_id).count(),
            "in_itinerary_cities": negs.iter().filter(|n| cities.contains(&n.dest_city_id)).count(),
        }))
    }
}

fn js_err(e: fitnet::FitError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct FitnetDemo(Demo);

#[wasm_bindgen]
impl FitnetDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, n_users: u32, epochs: u32) -> Result<FitnetDemo, JsError> {
        Demo::new(u64::from(seed), n_users as usize, epochs as usize)
            .map(FitnetDemo)
            .map_err(js_err)
    }

    pub fn summary(&self) -> String {
        self.0.summary().to_string()
    }

    pub fn inspect(&self, user_id: u32) -> Result<String, JsError> {
        self.0.inspect(user_id).map(|v| v.to_string()).map_err(js_err)
    }

    /// `clicks` is a comma-separated list of item ids.
    pub fn recommend(&self, user_id: u32, k: u32, clicks: &str) -> Result<String, JsError> {
        let ids = clicks
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u32>().map_err(|_| JsError::new(&format!("bad item id {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        self.0
            .recommend(user_id, k as usize, &ids)
            .map(|v| v.to_string())
            .map_err(js_err)
    }

    pub fn sample(&self, user_id: u32, setting: u8, ratio: u32, seed: u32) -> Result<String, JsError> {
        self.0
            .sample(user_id, setting, ratio as usize, u64::from(seed))
            .map(|v| v.to_string())
            .map_err(js_err)
    }
}
