//! Raw travel records, per-feature vocabularies and index-form encoding.
//!
//! One-hot features encode to a single vocabulary index and multi-hot
//! features to an index list, one entry per itinerary order or behavior
//! item. Binary vectors are never materialized; the embedding layer
//! consumes indices directly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FitError, Result};

pub const GENDER: &str = "gender";
pub const AGE_LEVEL: &str = "age_level";
pub const RESIDE_CITY: &str = "reside_city_id";
pub const HOME_CITY: &str = "home_city_id";
pub const ORDERED_ITEM: &str = "ordered_item_ids";
pub const ORDERED_CATE: &str = "ordered_cate_ids";
pub const ORDERED_CITY: &str = "ordered_dest_city_ids";
pub const CLICKED_ITEM: &str = "clicked_item_ids";
pub const CLICKED_CATE: &str = "clicked_cate_ids";
pub const CLICKED_CITY: &str = "clicked_dest_city_ids";
pub const TARGET_ITEM: &str = "item_id";
pub const TARGET_CATE: &str = "cate_id";
pub const TARGET_CITY: &str = "dest_city_id";

/// Index reserved in every vocabulary for values never seen at build time.
pub const UNKNOWN: usize = 0;
pub const UNKNOWN_TOKEN: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureCategory {
    Profile,
    Itinerary,
    Behavior,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    OneHot,
    MultiHot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGroupSpec {
    pub category: FeatureCategory,
    pub features: Vec<(&'static str, Encoding)>,
}

/// The feature schema: four categories, in embedding concatenation order.
pub fn feature_groups() -> Vec<FeatureGroupSpec> {
    use Encoding::*;
    vec![
        FeatureGroupSpec {
            category: FeatureCategory::Profile,
            features: vec![
                (GENDER, OneHot),
                (AGE_LEVEL, OneHot),
                (RESIDE_CITY, OneHot),
                (HOME_CITY, OneHot),
            ],
        },
        FeatureGroupSpec {
            category: FeatureCategory::Itinerary,
            features: vec![
                (ORDERED_ITEM, MultiHot),
                (ORDERED_CATE, MultiHot),
                (ORDERED_CITY, MultiHot),
            ],
        },
        FeatureGroupSpec {
            category: FeatureCategory::Behavior,
            features: vec![
                (CLICKED_ITEM, MultiHot),
                (CLICKED_CATE, MultiHot),
                (CLICKED_CITY, MultiHot),
            ],
        },
        FeatureGroupSpec {
            category: FeatureCategory::Target,
            features: vec![
                (TARGET_ITEM, OneHot),
                (TARGET_CATE, OneHot),
                (TARGET_CITY, OneHot),
            ],
        },
    ]
}

pub fn all_feature_names() -> Vec<&'static str> {
    feature_groups()
        .into_iter()
        .flat_map(|g| g.features.into_iter().map(|(n, _)| n))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Profile {
    pub gender: String,
    pub age_level: u32,
    pub reside_city_id: u32,
    pub home_city_id: u32,
}

/// An item as it appears in the pool, a behavior sequence or as a target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemRef {
    pub item_id: u32,
    pub category_id: u32,
    pub dest_city_id: u32,
}

/// One unconsumed order of an itinerary.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RawOrder {
    pub item_id: u32,
    pub category_id: u32,
    pub dest_city_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent_label: Option<u8>,
}

impl RawOrder {
    pub fn item(&self) -> ItemRef {
        ItemRef {
            item_id: self.item_id,
            category_id: self.category_id,
            dest_city_id: self.dest_city_id,
        }
    }
}

/// Everything known about a user at serving time: a training instance
/// without its target.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserContext {
    pub user_id: u32,
    pub profile: Profile,
    pub itinerary: Vec<RawOrder>,
    pub behavior: Vec<ItemRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingInstance {
    #[serde(flatten)]
    pub user: UserContext,
    pub target: ItemRef,
    pub label_click: u8,
    pub label_intent: u8,
}

impl TrainingInstance {
    pub fn validate(&self) -> Result<()> {
        if self.user.itinerary.is_empty() {
            return Err(FitError::Data(format!(
                "user {} has an empty itinerary",
                self.user.user_id
            )));
        }
        if self.label_click > 1 || self.label_intent > 1 {
            return Err(FitError::Data(format!(
                "user {} has a label outside {{0,1}}",
                self.user.user_id
            )));
        }
        Ok(())
    }
}

/// Bijective value↔index map for one feature, with index 0 reserved for
/// unknown values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    feature_name: String,
    values: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(feature_name: impl Into<String>) -> Self {
        let mut v = Self {
            feature_name: feature_name.into(),
            values: Vec::new(),
            index: HashMap::new(),
        };
        v.values.push(UNKNOWN_TOKEN.to_string());
        v
    }

    /// Builds a vocabulary from values in natural order: numerically when
    /// every value is an integer, lexicographically otherwise.
    pub fn from_values<I, S>(feature_name: impl Into<String>, values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = values.into_iter().map(Into::into).collect();
        let mut sorted: Vec<String> = set.into_iter().collect();
        if sorted.iter().all(|s| s.parse::<u64>().is_ok()) {
            sorted.sort_by_key(|s| s.parse::<u64>().unwrap_or(0));
        }
        let mut v = Self::new(feature_name);
        for s in sorted {
            v.insert(s);
        }
        v
    }

    fn insert(&mut self, value: String) -> usize {
        if let Some(&i) = self.index.get(&value) {
            return i;
        }
        self.values.push(value.clone());
        let i = self.values.len() - 1;
        self.index.insert(value, i);
        i
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .values
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, v)| (v.clone(), i))
            .collect();
    }

    pub fn feature_name(&self) -> &str {
        &self.feature_name
    }

    /// Number of indices, including the unknown slot.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() <= 1
    }

    pub fn index_of(&self, value: &str) -> usize {
        self.index.get(value).copied().unwrap_or(UNKNOWN)
    }

    pub fn value_of(&self, index: usize) -> Option<&str> {
        if index == UNKNOWN {
            return None;
        }
        self.values.get(index).map(String::as_str)
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    /// Vocabulary file: the feature name, then one value per line in index
    /// order (line 2 holds the unknown placeholder).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.feature_name)?;
        for v in &self.values {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let name = lines
            .next()
            .ok_or_else(|| FitError::Data("empty vocabulary file".into()))??;
        let values: Vec<String> = lines.collect::<std::io::Result<_>>()?;
        if values.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            return Err(FitError::Data(format!(
                "vocabulary {name} does not start with the {UNKNOWN_TOKEN} slot"
            )));
        }
        let mut v = Self {
            feature_name: name,
            values,
            index: HashMap::new(),
        };
        v.rebuild_index();
        if v.index.len() + 1 != v.values.len() {
            return Err(FitError::Data(format!(
                "vocabulary {} has duplicate values",
                v.feature_name
            )));
        }
        Ok(v)
    }
}

/// All vocabularies, keyed by feature name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    by_feature: BTreeMap<String, Vocabulary>,
}

impl Vocabularies {
    pub fn get(&self, feature: &str) -> Result<&Vocabulary> {
        self.by_feature
            .get(feature)
            .ok_or_else(|| FitError::config(format!("no vocabulary for feature {feature}")))
    }

    pub fn insert(&mut self, vocab: Vocabulary) {
        self.by_feature.insert(vocab.feature_name.clone(), vocab);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vocabulary> {
        self.by_feature.values()
    }

    /// Restores lookup tables after deserialization.
    pub fn reindex(&mut self) {
        self.by_feature.values_mut().for_each(Vocabulary::rebuild_index);
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for v in self.iter() {
            let f = File::create(dir.join(format!("{}.vocab", v.feature_name)))?;
            let mut w = BufWriter::new(f);
            v.write_to(&mut w)?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut out = Self::default();
        for name in all_feature_names() {
            let f = File::open(dir.join(format!("{name}.vocab")))?;
            out.insert(Vocabulary::read_from(BufReader::new(f))?);
        }
        Ok(out)
    }
}

/// Indexes every value of every feature occurring in the corpus.
pub fn build_vocabularies(corpus: &[TrainingInstance]) -> Result<Vocabularies> {
    if corpus.is_empty() {
        return Err(FitError::invalid("cannot build vocabularies from an empty corpus"));
    }
    let mut raw: BTreeMap<&'static str, BTreeSet<String>> = BTreeMap::new();
    let mut put = |f: &'static str, v: String| {
        raw.entry(f).or_default().insert(v);
    };
    for inst in corpus {
        let p = &inst.user.profile;
        put(GENDER, p.gender.clone());
        put(AGE_LEVEL, p.age_level.to_string());
        put(RESIDE_CITY, p.reside_city_id.to_string());
        put(HOME_CITY, p.home_city_id.to_string());
        for o in &inst.user.itinerary {
            put(ORDERED_ITEM, o.item_id.to_string());
            put(ORDERED_CATE, o.category_id.to_string());
            put(ORDERED_CITY, o.dest_city_id.to_string());
        }
        for b in &inst.user.behavior {
            put(CLICKED_ITEM, b.item_id.to_string());
            put(CLICKED_CATE, b.category_id.to_string());
            put(CLICKED_CITY, b.dest_city_id.to_string());
        }
        put(TARGET_ITEM, inst.target.item_id.to_string());
        put(TARGET_CATE, inst.target.category_id.to_string());
        put(TARGET_CITY, inst.target.dest_city_id.to_string());
    }
    let mut out = Vocabularies::default();
    for name in all_feature_names() {
        let values = raw.remove(name).unwrap_or_default();
        out.insert(Vocabulary::from_values(name, values));
    }
    Ok(out)
}

/// Index triple `(item, category, city)` for one order or item.
pub type ItemIndex = [usize; 3];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedUser {
    /// `(gender, age_level, reside_city, home_city)`
    pub profile: [usize; 4],
    pub itinerary: Vec<ItemIndex>,
    pub behavior: Vec<ItemIndex>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInstance {
    pub user: EncodedUser,
    pub target: ItemIndex,
    pub label_click: u8,
    pub label_intent: u8,
}

fn encode_item(v: &Vocabularies, names: [&str; 3], item: &ItemRef) -> Result<ItemIndex> {
    Ok([
        v.get(names[0])?.index_of(&item.item_id.to_string()),
        v.get(names[1])?.index_of(&item.category_id.to_string()),
        v.get(names[2])?.index_of(&item.dest_city_id.to_string()),
    ])
}

pub fn encode_user(user: &UserContext, vocabs: &Vocabularies) -> Result<EncodedUser> {
    let p = &user.profile;
    let profile = [
        vocabs.get(GENDER)?.index_of(&p.gender),
        vocabs.get(AGE_LEVEL)?.index_of(&p.age_level.to_string()),
        vocabs.get(RESIDE_CITY)?.index_of(&p.reside_city_id.to_string()),
        vocabs.get(HOME_CITY)?.index_of(&p.home_city_id.to_string()),
    ];
    let itinerary = user
        .itinerary
        .iter()
        .map(|o| encode_item(vocabs, [ORDERED_ITEM, ORDERED_CATE, ORDERED_CITY], &o.item()))
        .collect::<Result<_>>()?;
    let behavior = user
        .behavior
        .iter()
        .map(|b| encode_item(vocabs, [CLICKED_ITEM, CLICKED_CATE, CLICKED_CITY], b))
        .collect::<Result<_>>()?;
    Ok(EncodedUser {
        profile,
        itinerary,
        behavior,
    })
}

pub fn encode_target(item: &ItemRef, vocabs: &Vocabularies) -> Result<ItemIndex> {
    encode_item(vocabs, [TARGET_ITEM, TARGET_CATE, TARGET_CITY], item)
}

pub fn encode_instance(inst: &TrainingInstance, vocabs: &Vocabularies) -> Result<EncodedInstance> {
    Ok(EncodedInstance {
        user: encode_user(&inst.user, vocabs)?,
        target: encode_target(&inst.target, vocabs)?,
        label_click: inst.label_click,
        label_intent: inst.label_intent,
    })
}

/// Raw values of an encoded user, `None` where the index is unknown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedUser {
    pub profile: [Option<String>; 4],
    pub itinerary: Vec<[Option<String>; 3]>,
    pub behavior: Vec<[Option<String>; 3]>,
}

pub fn decode_user(enc: &EncodedUser, vocabs: &Vocabularies) -> Result<DecodedUser> {
    let dec = |name: &str, i: usize| -> Result<Option<String>> {
        Ok(vocabs.get(name)?.value_of(i).map(str::to_string))
    };
    let triple = |names: [&str; 3], ix: &ItemIndex| -> Result<[Option<String>; 3]> {
        Ok([dec(names[0], ix[0])?, dec(names[1], ix[1])?, dec(names[2], ix[2])?])
    };
    Ok(DecodedUser {
        profile: [
            dec(GENDER, enc.profile[0])?,
            dec(AGE_LEVEL, enc.profile[1])?,
            dec(RESIDE_CITY, enc.profile[2])?,
            dec(HOME_CITY, enc.profile[3])?,
        ],
        itinerary: enc
            .itinerary
            .iter()
            .map(|ix| triple([ORDERED_ITEM, ORDERED_CATE, ORDERED_CITY], ix))
            .collect::<Result<_>>()?,
        behavior: enc
            .behavior
            .iter()
            .map(|ix| triple([CLICKED_ITEM, CLICKED_CATE, CLICKED_CITY], ix))
            .collect::<Result<_>>()?,
    })
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            FitError::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| FitError::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<TrainingInstance>> {
    let corpus: Vec<TrainingInstance> = read_jsonl(path)?;
    for inst in &corpus {
        inst.validate()?;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: u32, cat: u32, city: u32) -> ItemRef {
        ItemRef {
            item_id: id,
            category_id: cat,
            dest_city_id: city,
        }
    }

    fn order(id: u32, cat: u32, city: u32) -> RawOrder {
        RawOrder {
            item_id: id,
            category_id: cat,
            dest_city_id: city,
            intent_label: None,
        }
    }

    fn instance(gender: &str, cities: &[u32]) -> TrainingInstance {
        TrainingInstance {
            user: UserContext {
                user_id: 1,
                profile: Profile {
                    gender: gender.into(),
                    age_level: 3,
                    reside_city_id: cities[0],
                    home_city_id: cities[0],
                },
                itinerary: cities.iter().map(|&c| order(100 + c, 0, c)).collect(),
                behavior: vec![item(7, 2, cities[0])],
            },
            target: item(9, 2, *cities.last().unwrap()),
            label_click: 1,
            label_intent: 1,
        }
    }

    #[test]
    fn city_vocabulary_has_unknown_slot() {
        let corpus = vec![instance("f", &[1]), instance("m", &[2])];
        let v = build_vocabularies(&corpus).unwrap();
        assert_eq!(v.get(RESIDE_CITY).unwrap().len(), 3);
        assert_eq!(v.get(GENDER).unwrap().index_of("f"), 1);
        assert_eq!(v.get(GENDER).unwrap().index_of("m"), 2);
        assert_eq!(v.get(GENDER).unwrap().index_of("x"), UNKNOWN);
    }

    #[test]
    fn rebuilding_is_deterministic() {
        let corpus = vec![instance("m", &[5, 3]), instance("f", &[10, 2])];
        let a = build_vocabularies(&corpus).unwrap();
        let mut rev = corpus.clone();
        rev.reverse();
        let b = build_vocabularies(&rev).unwrap();
        assert_eq!(a, b);
        // numeric ids sort numerically
        assert_eq!(a.get(ORDERED_CITY).unwrap().values()[1..], ["2", "3", "5", "10"]);
    }

    #[test]
    fn encoding_preserves_itinerary_order() {
        let inst = instance("f", &[4, 8, 6]);
        let v = build_vocabularies(std::slice::from_ref(&inst)).unwrap();
        let enc = encode_instance(&inst, &v).unwrap();
        assert_eq!(enc.user.itinerary.len(), 3);
        let cities: Vec<_> = enc
            .user
            .itinerary
            .iter()
            .map(|ix| v.get(ORDERED_CITY).unwrap().value_of(ix[2]).unwrap().to_string())
            .collect();
        assert_eq!(cities, ["4", "8", "6"]);
    }

    #[test]
    fn unseen_values_map_to_unknown() {
        let v = build_vocabularies(&[instance("f", &[1])]).unwrap();
        let other = instance("m", &[99]);
        let enc = encode_instance(&other, &v).unwrap();
        assert_eq!(enc.user.profile[0], UNKNOWN);
        assert_eq!(enc.user.itinerary[0][2], UNKNOWN);
        assert_eq!(enc.target[2], UNKNOWN);
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = Vocabulary::from_values(GENDER, ["m", "f"]);
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "gender\n<unk>\nf\nm\n");
        let back = Vocabulary::read_from(&buf[..]).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.index_of("m"), 2);
    }

    #[test]
    fn json_field_names() {
        let inst = instance("f", &[1]);
        let s = serde_json::to_string(&inst).unwrap();
        for key in [
            "\"user_id\"",
            "\"profile\"",
            "\"itinerary\"",
            "\"behavior\"",
            "\"target\"",
            "\"label_click\"",
            "\"label_intent\"",
            "\"home_city_id\"",
            "\"dest_city_id\"",
        ] {
            assert!(s.contains(key), "{key} missing from {s}");
        }
        let back: TrainingInstance = serde_json::from_str(&s).unwrap();
        assert_eq!(back, inst);
    }

    #[test]
    fn empty_itinerary_is_invalid() {
        let mut inst = instance("f", &[1]);
        inst.user.itinerary.clear();
        assert!(inst.validate().is_err());
    }
}
