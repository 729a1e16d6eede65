//! Embedding dictionaries and the four embedded views of an instance.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{FitError, Result};
use crate::features::*;
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Embedding width per value domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingDims {
    pub item_id: usize,
    pub category_id: usize,
    pub city_id: usize,
    pub gender: usize,
    pub age_level: usize,
}

impl Default for EmbeddingDims {
    fn default() -> Self {
        Self {
            item_id: 32,
            category_id: 8,
            city_id: 8,
            gender: 2,
            age_level: 4,
        }
    }
}

impl EmbeddingDims {
    pub fn for_feature(&self, feature: &str) -> Result<usize> {
        Ok(match feature {
            GENDER => self.gender,
            AGE_LEVEL => self.age_level,
            RESIDE_CITY | HOME_CITY | ORDERED_CITY | CLICKED_CITY | TARGET_CITY => self.city_id,
            ORDERED_ITEM | CLICKED_ITEM | TARGET_ITEM => self.item_id,
            ORDERED_CATE | CLICKED_CATE | TARGET_CATE => self.category_id,
            other => return Err(FitError::config(format!("unknown feature {other}"))),
        })
    }

    /// `D_p`
    pub fn profile_dim(&self) -> usize {
        self.gender + self.age_level + 2 * self.city_id
    }

    /// `D_e`
    pub fn order_dim(&self) -> usize {
        self.item_dim()
    }

    /// `D_b`
    pub fn behavior_dim(&self) -> usize {
        self.item_dim()
    }

    /// `D_t`
    pub fn target_dim(&self) -> usize {
        self.item_dim()
    }

    fn item_dim(&self) -> usize {
        self.item_id + self.category_id + self.city_id
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.item_id,
            self.category_id,
            self.city_id,
            self.gender,
            self.age_level,
        ];
        if all.contains(&0) {
            return Err(FitError::config("embedding dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingDictionary {
    pub feature_name: String,
    pub param: ParamId,
    pub rows: usize,
    pub dim: usize,
}

pub fn param_name(feature: &str) -> String {
    format!("emb.{feature}")
}

/// One dictionary per feature of the schema.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Embeddings {
    dicts: BTreeMap<String, EmbeddingDictionary>,
}

#[derive(Clone, Debug)]
pub struct EmbeddedUser {
    pub e_p: Var,
    pub e_i: Vec<Var>,
    pub e_b: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct EmbeddedInstance {
    pub user: EmbeddedUser,
    pub e_f: Var,
}

impl Embeddings {
    /// Creates every dictionary with `vocab.len()` rows, entries drawn
    /// from `uniform(-scale, scale)`.
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        vocabs: &Vocabularies,
        dims: &EmbeddingDims,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        dims.validate()?;
        let mut dicts = BTreeMap::new();
        for name in all_feature_names() {
            let rows = vocabs.get(name)?.len();
            let dim = dims.for_feature(name)?;
            let t = Tensor::uniform(&[rows, dim], -scale, scale, rng);
            let param = params.add(param_name(name), t);
            dicts.insert(
                name.to_string(),
                EmbeddingDictionary {
                    feature_name: name.to_string(),
                    param,
                    rows,
                    dim,
                },
            );
        }
        Ok(Self { dicts })
    }

    pub fn dictionary(&self, feature: &str) -> Result<&EmbeddingDictionary> {
        self.dicts
            .get(feature)
            .ok_or_else(|| FitError::config(format!("missing embedding dictionary {feature}")))
    }

    pub fn dictionaries(&self) -> impl Iterator<Item = &EmbeddingDictionary> {
        self.dicts.values()
    }

    pub fn lookup(&self, tape: &mut Tape, feature: &str, index: usize) -> Result<Var> {
        let d = self.dictionary(feature)?;
        tape.lookup(d.param, index)
    }

    fn embed_triple(&self, tape: &mut Tape, names: [&str; 3], ix: &ItemIndex) -> Result<Var> {
        let parts = [
            self.lookup(tape, names[0], ix[0])?,
            self.lookup(tape, names[1], ix[1])?,
            self.lookup(tape, names[2], ix[2])?,
        ];
        tape.concat(&parts)
    }

    pub fn embed_user(&self, tape: &mut Tape, enc: &EncodedUser) -> Result<EmbeddedUser> {
        let profile = [
            self.lookup(tape, GENDER, enc.profile[0])?,
            self.lookup(tape, AGE_LEVEL, enc.profile[1])?,
            self.lookup(tape, RESIDE_CITY, enc.profile[2])?,
            self.lookup(tape, HOME_CITY, enc.profile[3])?,
        ];
        let e_p = tape.concat(&profile)?;
        let e_i = enc
            .itinerary
            .iter()
            .map(|ix| self.embed_triple(tape, [ORDERED_ITEM, ORDERED_CATE, ORDERED_CITY], ix))
            .collect::<Result<_>>()?;
        let e_b = enc
            .behavior
            .iter()
            .map(|ix| self.embed_triple(tape, [CLICKED_ITEM, CLICKED_CATE, CLICKED_CITY], ix))
            .collect::<Result<_>>()?;
        Ok(EmbeddedUser { e_p, e_i, e_b })
    }

    pub fn embed_target(&self, tape: &mut Tape, ix: &ItemIndex) -> Result<Var> {
        self.embed_triple(tape, [TARGET_ITEM, TARGET_CATE, TARGET_CITY], ix)
    }

    pub fn embed_instance(&self, tape: &mut Tape, enc: &EncodedInstance) -> Result<EmbeddedInstance> {
        Ok(EmbeddedInstance {
            user: self.embed_user(tape, &enc.user)?,
            e_f: self.embed_target(tape, &enc.target)?,
        })
    }
}
