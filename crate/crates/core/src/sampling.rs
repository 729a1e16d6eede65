//! Negative sampling under the three composition settings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FitError, Result};
use crate::features::{ItemRef, TrainingInstance};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemPool {
    items: Vec<ItemRef>,
    by_id: BTreeMap<u32, usize>,
    by_city: BTreeMap<u32, Vec<usize>>,
    by_city_category: BTreeMap<(u32, u32), Vec<usize>>,
}

impl ItemPool {
    /// Items are stored sorted by id; duplicate ids are rejected.
    pub fn new(mut items: Vec<ItemRef>) -> Result<Self> {
        items.sort();
        let mut by_id = BTreeMap::new();
        let mut by_city: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut by_city_category: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            if by_id.insert(it.item_id, i).is_some() {
                return Err(FitError::Data(format!("duplicate item id {} in pool", it.item_id)));
            }
            by_city.entry(it.dest_city_id).or_default().push(i);
            by_city_category
                .entry((it.dest_city_id, it.category_id))
                .or_default()
                .push(i);
        }
        Ok(Self {
            items,
            by_id,
            by_city,
            by_city_category,
        })
    }

    pub fn items(&self) -> &[ItemRef] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item_id: u32) -> Option<&ItemRef> {
        self.by_id.get(&item_id).map(|&i| &self.items[i])
    }

    pub fn position(&self, item_id: u32) -> Option<usize> {
        self.by_id.get(&item_id).copied()
    }

    pub fn in_city(&self, city: u32) -> &[usize] {
        self.by_city.get(&city).map_or(&[], Vec::as_slice)
    }

    pub fn in_city_category(&self, city: u32, category: u32) -> &[usize] {
        self.by_city_category
            .get(&(city, category))
            .map_or(&[], Vec::as_slice)
    }

    pub fn cities(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_city.keys().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Setting {
    /// Uniform over the whole pool.
    Random = 1,
    /// Itinerary destinations, half of the negatives in the positive's category.
    HalfSameCategory = 2,
    /// Itinerary destinations, a tenth of the negatives in the positive's category.
    TenthSameCategory = 3,
}

impl TryFrom<u8> for Setting {
    type Error = FitError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Setting::Random),
            2 => Ok(Setting::HalfSameCategory),
            3 => Ok(Setting::TenthSameCategory),
            _ => Err(FitError::config(format!("sampling setting must be 1, 2 or 3, got {v}"))),
        }
    }
}

impl From<Setting> for u8 {
    fn from(s: Setting) -> u8 {
        s as u8
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPolicy {
    pub setting: Setting,
    /// Negatives per positive.
    pub ratio: usize,
    pub seed: u64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            setting: Setting::Random,
            ratio: 10,
            seed: 7,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 {
            return Err(FitError::config("sampling ratio must be at least 1"));
        }
        Ok(())
    }

    /// How many negatives must share the positive's category.
    pub fn same_category_count(&self) -> usize {
        match self.setting {
            Setting::Random => 0,
            Setting::HalfSameCategory => self.ratio / 2,
            Setting::TenthSameCategory => (0.1 * self.ratio as f64).round() as usize,
        }
    }
}

/// Seed for one positive in one epoch, derived from the master seed.
pub fn derive_seed(master: u64, epoch: u64, index: u64) -> u64 {
    let mut x = splitmix(master ^ splitmix(epoch.wrapping_add(0x5151)));
    x = splitmix(x ^ index);
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw<R: Rng + ?Sized>(
    rng: &mut R,
    pool: &ItemPool,
    candidates: &[usize],
    needed: usize,
    stratum: impl FnOnce() -> String,
) -> Result<Vec<ItemRef>> {
    if candidates.len() < needed {
        return Err(FitError::StratumExhausted {
            stratum: stratum(),
            available: candidates.len(),
            needed,
        });
    }
    Ok(index::sample(rng, candidates.len(), needed)
        .into_iter()
        .map(|i| pool.items[candidates[i]])
        .collect())
}

/// Target items of the negatives for one positive.
pub fn sample_negative_items<R: Rng + ?Sized>(
    positive: &TrainingInstance,
    pool: &ItemPool,
    policy: &SamplingPolicy,
    rng: &mut R,
) -> Result<Vec<ItemRef>> {
    policy.validate()?;
    let r = policy.ratio;
    let pos = positive.target;
    if policy.setting == Setting::Random {
        let skip = pool.position(pos.item_id);
        let n = pool.len() - usize::from(skip.is_some());
        if n < r {
            return Err(FitError::StratumExhausted {
                stratum: "whole pool".into(),
                available: n,
                needed: r,
            });
        }
        return Ok(index::sample(rng, n, r)
            .into_iter()
            .map(|i| match skip {
                Some(s) if i >= s => pool.items[i + 1],
                _ => pool.items[i],
            })
            .collect());
    }

    let cities: BTreeSet<u32> = positive
        .user
        .itinerary
        .iter()
        .map(|o| o.dest_city_id)
        .collect();
    let mut same = Vec::new();
    let mut other = Vec::new();
    for &c in &cities {
        for &i in pool.in_city(c) {
            let it = &pool.items[i];
            if it.item_id == pos.item_id {
                continue;
            }
            if it.category_id == pos.category_id {
                same.push(i);
            } else {
                other.push(i);
            }
        }
    }
    let n_same = policy.same_category_count();
    let label = |kind: &str| format!("{kind} category {} in cities {cities:?}", pos.category_id);
    let mut out = draw(rng, pool, &same, n_same, || label("same"))?;
    out.extend(draw(rng, pool, &other, r - n_same, || label("other than"))?);
    Ok(out)
}

/// `r` negatives sharing the positive's context, `label_click = 0`, with
/// the intention label kept.
pub fn sample_negatives_with_rng<R: Rng + ?Sized>(
    positive: &TrainingInstance,
    pool: &ItemPool,
    policy: &SamplingPolicy,
    rng: &mut R,
) -> Result<Vec<TrainingInstance>> {
    Ok(sample_negative_items(positive, pool, policy, rng)?
        .into_iter()
        .map(|target| TrainingInstance {
            user: positive.user.clone(),
            target,
            label_click: 0,
            label_intent: positive.label_intent,
        })
        .collect())
}

pub fn sample_negatives(
    positive: &TrainingInstance,
    pool: &ItemPool,
    policy: &SamplingPolicy,
) -> Result<Vec<TrainingInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    sample_negatives_with_rng(positive, pool, policy, &mut rng)
}

/// Negative targets for every positive of a corpus in one epoch. Entry `i`
/// belongs to `corpus[i]`; only positives receive negatives.
pub fn sample_epoch(
    corpus: &[TrainingInstance],
    pool: &ItemPool,
    policy: &SamplingPolicy,
    epoch: u64,
) -> Result<Vec<Vec<ItemRef>>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            if inst.label_click == 0 {
                return Ok(Vec::new());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(policy.seed, epoch, i as u64));
            sample_negative_items(inst, pool, policy, &mut rng)
        })
        .collect()
}
