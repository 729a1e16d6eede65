//! Seeded synthetic corpus with planted itinerary-dependent intent.
//!
//! Every user plans one trip to a target city `T`. Relatives trips go to
//! the user's home city, everything else is sightseeing. Longer
//! itineraries add transit flights through cities that are visited once;
//! `T` is always the city booked most often. Ground-truth clicks are items
//! of `T`: tourism categories for sightseeing, local-life categories for
//! relatives visits.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FitError, Result};
use crate::features::{
    read_corpus, read_jsonl, write_jsonl, ItemRef, Profile, RawOrder, TrainingInstance, UserContext,
};
use crate::sampling::{derive_seed, ItemPool};

pub const FLIGHT: u32 = 0;
pub const HOTEL: u32 = 1;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_cities: usize,
    pub n_categories: usize,
    /// Probabilities of itineraries with 1, 2, 3 and 4 orders.
    pub itinerary_lengths: [f64; 4],
    pub behavior_min: usize,
    pub behavior_max: usize,
    /// Share of behavior clicks drawn uniformly from the pool.
    pub click_noise: f64,
    /// Share of users whose home city differs from their residence.
    pub away_from_home: f64,
    /// Chance that a user living away from home travels there.
    pub relatives_trip: f64,
    /// Chance that a two- or three-order itinerary includes the flight
    /// home; four-order itineraries always do.
    pub return_flight: f64,
    /// Chance that the hotel is booked before any flight.
    pub hotel_first: f64,
    /// Chance that a click falls in the user's favourite category.
    pub taste_focus: f64,
    /// Share of non-noise behavior clicks located in the target city.
    pub behavior_in_target: f64,
    /// Chance that an off-trip behavior click falls in the category group
    /// the trip does not call for (everyday browsing).
    pub off_trip_contrast: f64,
    pub train_clicks: usize,
    pub test_clicks: usize,
    /// Zipf exponent of item popularity within a (city, category) stratum.
    pub zipf: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 5000,
            n_cities: 40,
            n_categories: 8,
            itinerary_lengths: [0.47, 0.37, 0.12, 0.04],
            behavior_min: 0,
            behavior_max: 10,
            click_noise: 0.1,
            away_from_home: 0.6,
            relatives_trip: 0.7,
            return_flight: 0.75,
            hotel_first: 0.8,
            taste_focus: 0.9,
            behavior_in_target: 0.5,
            off_trip_contrast: 0.75,
            train_clicks: 3,
            test_clicks: 2,
            zipf: 1.0,
            seed: 7,
        }
    }
}

/// Category roles: flights, hotels, then tourism and local-life halves.
pub fn tourism_categories(n_categories: usize) -> std::ops::Range<u32> {
    let rest = n_categories.saturating_sub(2) as u32;
    2..2 + rest.div_ceil(2)
}

pub fn local_categories(n_categories: usize) -> std::ops::Range<u32> {
    tourism_categories(n_categories).end..n_categories as u32
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FitError::config(m.to_string()));
        if self.n_users == 0 || self.n_items == 0 {
            return bad("n_users and n_items must be at least 1");
        }
        if self.n_cities < 6 {
            return bad("n_cities must be at least 6");
        }
        if self.n_categories < 4 {
            return bad("n_categories must be at least 4 (flight, hotel, tourism, local life)");
        }
        if self.n_items < self.n_cities * self.n_categories {
            return bad("n_items must cover every (city, category) pair");
        }
        let sum: f64 = self.itinerary_lengths.iter().sum();
        if self.itinerary_lengths.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return bad("itinerary_lengths must be probabilities summing to 1");
        }
        if self.behavior_min > self.behavior_max {
            return bad("behavior_min exceeds behavior_max");
        }
        let probs = [
            self.click_noise,
            self.away_from_home,
            self.relatives_trip,
            self.return_flight,
            self.hotel_first,
            self.taste_focus,
            self.behavior_in_target,
            self.off_trip_contrast,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("rates must lie in [0, 1]");
        }
        if self.train_clicks == 0 || self.test_clicks == 0 {
            return bad("train_clicks and test_clicks must be at least 1");
        }
        let per_stratum = self.n_items / (self.n_cities * self.n_categories);
        if self.train_clicks + self.test_clicks > per_stratum * 2 {
            return bad("too many clicks per user for the stratum size");
        }
        if !(self.zipf >= 0.0) {
            return bad("zipf must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<TrainingInstance>,
    pub test: Vec<TrainingInstance>,
    pub pool: ItemPool,
}

struct Catalog {
    items: Vec<ItemRef>,
    /// `strata[city][category]`: pool positions by descending popularity.
    strata: Vec<Vec<Vec<usize>>>,
    weights: Vec<Vec<WeightedIndex<f64>>>,
}

impl Catalog {
    fn new(cfg: &GenConfig) -> Result<Self> {
        let (nc, nk) = (cfg.n_cities, cfg.n_categories);
        let mut strata = vec![vec![Vec::new(); nk]; nc];
        let mut items = Vec::with_capacity(cfg.n_items);
        for i in 0..cfg.n_items {
            let s = i % (nc * nk);
            let (city, cat) = (s / nk, s % nk);
            strata[city][cat].push(i);
            items.push(ItemRef {
                item_id: i as u32 + 1,
                category_id: cat as u32,
                dest_city_id: city as u32 + 1,
            });
        }
        let weights = strata
            .iter()
            .map(|row| {
                row.iter()
                    .map(|s: &Vec<usize>| {
                        WeightedIndex::new((0..s.len()).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf)))
                            .map_err(|e| FitError::config(e.to_string()))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            items,
            strata,
            weights,
        })
    }

    fn pick<R: Rng>(&self, rng: &mut R, city: u32, cat: u32) -> ItemRef {
        let (c, k) = (city as usize - 1, cat as usize);
        self.items[self.strata[c][k][self.weights[c][k].sample(rng)]]
    }
}

fn other_city<R: Rng>(rng: &mut R, n: usize, exclude: &[u32]) -> u32 {
    loop {
        let c = rng.gen_range(1..=n as u32);
        if !exclude.contains(&c) {
            return c;
        }
    }
}

fn order(item: ItemRef, intent: u8) -> RawOrder {
    RawOrder {
        item_id: item.item_id,
        category_id: item.category_id,
        dest_city_id: item.dest_city_id,
        intent_label: Some(intent),
    }
}

pub fn generate(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let cat = Catalog::new(cfg)?;
    let tourism: Vec<u32> = tourism_categories(cfg.n_categories).collect();
    let local: Vec<u32> = local_categories(cfg.n_categories).collect();
    let lengths = WeightedIndex::new(cfg.itinerary_lengths).map_err(|e| FitError::config(e.to_string()))?;
    let mut train = Vec::new();
    let mut test = Vec::new();

    for u in 0..cfg.n_users {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, u as u64));
        let reside = rng.gen_range(1..=cfg.n_cities as u32);
        let home = if rng.gen_bool(cfg.away_from_home) {
            other_city(&mut rng, cfg.n_cities, &[reside])
        } else {
            reside
        };
        let profile = Profile {
            gender: if rng.gen_bool(0.5) { "f" } else { "m" }.to_string(),
            age_level: rng.gen_range(1..=6),
            reside_city_id: reside,
            home_city_id: home,
        };
        let relatives = home != reside && rng.gen_bool(cfg.relatives_trip);
        let target = if relatives {
            home
        } else {
            other_city(&mut rng, cfg.n_cities, &[reside, home])
        };
        let intent = u8::from(!relatives);

        let len = lengths.sample(&mut rng) + 1;
        let returning = len == 4 || (len > 1 && len < 4 && rng.gen_bool(cfg.return_flight));
        let with_hotel = len > 2 || (len == 2 && !returning) || (len == 1 && rng.gen_bool(0.5));
        let n_transit = (len - 1).saturating_sub(usize::from(with_hotel) + usize::from(returning));
        let mut transits = Vec::new();
        while transits.len() < n_transit {
            let mut exclude = vec![reside, home, target];
            exclude.extend(&transits);
            transits.push(other_city(&mut rng, cfg.n_cities, &exclude));
        }
        let mut flights: Vec<RawOrder> = transits
            .iter()
            .map(|&c| order(cat.pick(&mut rng, c, FLIGHT), 0))
            .collect();
        if len > 1 || !with_hotel {
            flights.push(order(cat.pick(&mut rng, target, FLIGHT), intent));
        }
        if returning {
            flights.push(order(cat.pick(&mut rng, reside, FLIGHT), 0));
        }
        flights.shuffle(&mut rng);
        let mut itinerary = flights;
        if with_hotel {
            let hotel = order(cat.pick(&mut rng, target, HOTEL), intent);
            if rng.gen_bool(cfg.hotel_first) {
                itinerary.insert(0, hotel);
            } else {
                itinerary.push(hotel);
            }
        }

        let (taste_t, taste_l) = (*tourism.choose(&mut rng).unwrap(), *local.choose(&mut rng).unwrap());
        let (wanted, favourite) = if relatives { (&local, taste_l) } else { (&tourism, taste_t) };
        let pick_cat = |rng: &mut ChaCha8Rng, group: &[u32], fav: u32| {
            if group.len() == 1 || rng.gen_bool(cfg.taste_focus) {
                fav
            } else {
                **group.iter().filter(|&&c| c != fav).collect::<Vec<_>>().choose(rng).unwrap()
            }
        };

        let n_clicks = cfg.train_clicks + cfg.test_clicks;
        let mut clicks: Vec<ItemRef> = Vec::with_capacity(n_clicks);
        let mut tries = 0;
        while clicks.len() < n_clicks {
            let c = pick_cat(&mut rng, wanted, favourite);
            let it = cat.pick(&mut rng, target, c);
            if !clicks.contains(&it) {
                clicks.push(it);
            }
            tries += 1;
            if tries > 10_000 {
                return Err(FitError::config("could not draw distinct clicks; enlarge the pool"));
            }
        }
        let clicked: BTreeSet<u32> = clicks.iter().map(|c| c.item_id).collect();

        let n_behavior = rng.gen_range(cfg.behavior_min..=cfg.behavior_max);
        let mut behavior = Vec::with_capacity(n_behavior);
        while behavior.len() < n_behavior {
            let it = if rng.gen_bool(cfg.click_noise) {
                *cat.items.choose(&mut rng).unwrap()
            } else if rng.gen_bool(cfg.behavior_in_target) {
                let c = pick_cat(&mut rng, wanted, favourite);
                cat.pick(&mut rng, target, c)
            } else {
                let mut exclude = transits.clone();
                exclude.push(target);
                let city = other_city(&mut rng, cfg.n_cities, &exclude);
                let tourist = if relatives { cfg.off_trip_contrast } else { 1.0 - cfg.off_trip_contrast };
                let c = if rng.gen_bool(tourist) {
                    pick_cat(&mut rng, &tourism, taste_t)
                } else {
                    pick_cat(&mut rng, &local, taste_l)
                };
                cat.pick(&mut rng, city, c)
            };
            if !clicked.contains(&it.item_id) {
                behavior.push(it);
            }
        }

        let user = UserContext {
            user_id: u as u32 + 1,
            profile,
            itinerary,
            behavior,
        };
        for (i, it) in clicks.into_iter().enumerate() {
            let inst = TrainingInstance {
                user: user.clone(),
                target: it,
                label_click: 1,
                label_intent: intent,
            };
            if i < cfg.train_clicks {
                train.push(inst);
            } else {
                test.push(inst);
            }
        }
    }
    Ok(Corpus {
        train,
        test,
        pool: ItemPool::new(cat.items)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GenConfig,
    pub users: usize,
    pub items: usize,
    pub train_instances: usize,
    pub test_instances: usize,
    /// SHA-256 per written file.
    pub sha256: Vec<(String, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the three corpus files and a manifest into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus, cfg: &GenConfig) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(TRAIN_FILE), &corpus.train)?;
    write_jsonl(&dir.join(TEST_FILE), &corpus.test)?;
    write_jsonl(&dir.join(ITEMS_FILE), corpus.pool.items())?;
    let mut sha256 = Vec::new();
    for f in [TRAIN_FILE, TEST_FILE, ITEMS_FILE] {
        sha256.push((f.to_string(), sha256_hex(&fs::read(dir.join(f))?)));
    }
    let manifest = Manifest {
        config: cfg.clone(),
        users: cfg.n_users,
        items: corpus.pool.len(),
        train_instances: corpus.train.len(),
        test_instances: corpus.test.len(),
        sha256,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| FitError::Data(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

/// Reads `train.jsonl`, `test.jsonl` and `items.jsonl` from `dir`.
pub fn read_corpus_dir(dir: &Path) -> Result<Corpus> {
    let open = |f: &str| {
        let p = dir.join(f);
        if p.is_file() {
            Ok(p)
        } else {
            Err(FitError::Data(format!("missing {}", p.display())))
        }
    };
    Ok(Corpus {
        train: read_corpus(&open(TRAIN_FILE)?)?,
        test: read_corpus(&open(TEST_FILE)?)?,
        pool: ItemPool::new(read_jsonl(&open(ITEMS_FILE)?)?)?,
    })
}
