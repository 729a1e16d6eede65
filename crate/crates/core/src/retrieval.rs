//! Item-vector index and exact top-k retrieval.

use std::cmp::Ordering;

use crate::error::{FitError, Result};
use crate::features::{encode_target, encode_user, ItemRef, UserContext, Vocabularies};
use crate::model::Model;
use crate::sampling::ItemPool;

/// Anything that can answer "best k items for this query vector".
pub trait TopK {
    fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<(u32, f64)>>;
}

/// `a · b`, summed left to right like the tape's inner product.
pub fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Score descending, then item id ascending. Adding `0.0` folds `-0.0`
/// into `+0.0` so the two tie.
pub fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    item_ids: Vec<u32>,
    dim: usize,
    rows: Vec<f64>,
    fingerprint: String,
}

impl RetrievalIndex {
    /// One item-tower row per pool item, in pool order.
    pub fn build(pool: &ItemPool, model: &Model, vocabs: &Vocabularies) -> Result<Self> {
        let dim = model.config().repr_dim;
        let encoded = pool
            .items()
            .iter()
            .map(|it| encode_target(it, vocabs))
            .collect::<Result<Vec<_>>>()?;
        let one = |ix: &_| model.item_vector(ix);
        #[cfg(feature = "parallel")]
        let vectors: Vec<Result<Vec<f64>>> = {
            use rayon::prelude::*;
            encoded.par_iter().map(one).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let vectors: Vec<Result<Vec<f64>>> = encoded.iter().map(one).collect();
        let mut rows = Vec::with_capacity(pool.len() * dim);
        for v in vectors {
            rows.extend(v?);
        }
        Ok(Self {
            item_ids: pool.items().iter().map(|it| it.item_id).collect(),
            dim,
            rows,
            fingerprint: model.fingerprint(),
        })
    }

    pub fn from_rows(item_ids: Vec<u32>, dim: usize, rows: Vec<f64>, fingerprint: String) -> Result<Self> {
        if rows.len() != item_ids.len() * dim {
            return Err(FitError::dims("index", &[item_ids.len(), dim], &[rows.len()]));
        }
        Ok(Self {
            item_ids,
            dim,
            rows,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn item_ids(&self) -> &[u32] {
        &self.item_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// `(item_id, score)` for every row, in index order.
    pub fn score_all(&self, query: &[f64]) -> Result<Vec<(u32, f64)>> {
        if query.len() != self.dim {
            return Err(FitError::dims("retrieve", &[1, query.len()], &[self.len(), self.dim]));
        }
        Ok(self
            .item_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, inner(query, self.row(i))))
            .collect())
    }
}

impl TopK for RetrievalIndex {
    fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<(u32, f64)>> {
        if k == 0 || k > self.len() {
            return Err(FitError::invalid(format!(
                "k must lie in 1..={}, got {k}",
                self.len()
            )));
        }
        let mut scored = self.score_all(query)?;
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank_order);
        Ok(scored)
    }
}

pub fn user_vector(model: &Model, vocabs: &Vocabularies, user: &UserContext) -> Result<Vec<f64>> {
    model.user_vector(&encode_user(user, vocabs)?)
}

pub fn retrieve_top_k(
    model: &Model,
    vocabs: &Vocabularies,
    index: &impl TopK,
    user: &UserContext,
    k: usize,
) -> Result<Vec<(u32, f64)>> {
    index.top_k(&user_vector(model, vocabs, user)?, k)
}

/// The user with `events` appended to the behavior sequence.
pub fn with_clicks(user: &UserContext, pool: &ItemPool, events: &[u32]) -> Result<UserContext> {
    let mut user = user.clone();
    for &id in events {
        let it: &ItemRef = pool.get(id).ok_or_else(|| FitError::Index {
            what: "item pool".into(),
            index: id as usize,
            size: pool.len(),
        })?;
        user.behavior.push(*it);
    }
    Ok(user)
}

/// Recomputes the user vector after new clicks.
pub fn refresh_user(
    model: &Model,
    vocabs: &Vocabularies,
    pool: &ItemPool,
    user: &UserContext,
    events: &[u32],
) -> Result<Vec<f64>> {
    user_vector(model, vocabs, &with_clicks(user, pool, events)?)
}
