//! The full two-tower network: embeddings, the three attention mechanisms,
//! the intention/user/item MLP towers and the joint loss.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{self, HeadVars};
use crate::autodiff::{Tape, Var};
use crate::embedding::{EmbeddedUser, EmbeddingDims, Embeddings};
use crate::error::{FitError, Result};
use crate::features::{EncodedInstance, EncodedUser, ItemIndex, Vocabularies};
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Methods compared by the evaluation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fitnet")]
    FitNet,
    /// Only the most recent order of the itinerary is used.
    #[serde(rename = "fitnet-minus")]
    FitNetMinus,
    /// Every attention mechanism replaced by mean pooling, no intention tower.
    #[serde(rename = "avgpool")]
    AvgPoolDnn,
    /// Destination-city popularity, no learning.
    #[serde(rename = "orderdest2i")]
    OrderDest2i,
    /// Without profile→itinerary attention and the intention tower.
    #[serde(rename = "var1")]
    Var1,
    /// Without itinerary self-attention.
    #[serde(rename = "var2")]
    Var2,
    /// Without behavior attention.
    #[serde(rename = "var3")]
    Var3,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FitNet,
        Method::FitNetMinus,
        Method::AvgPoolDnn,
        Method::OrderDest2i,
        Method::Var1,
        Method::Var2,
        Method::Var3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FitNet => "fitnet",
            Method::FitNetMinus => "fitnet-minus",
            Method::AvgPoolDnn => "avgpool",
            Method::OrderDest2i => "orderdest2i",
            Method::Var1 => "var1",
            Method::Var2 => "var2",
            Method::Var3 => "var3",
        }
    }

    pub fn is_learned(self) -> bool {
        self != Method::OrderDest2i
    }

    /// The network configuration for this method derived from a base one.
    /// `None` for methods without a network.
    pub fn model_config(self, base: &ModelConfig) -> Option<ModelConfig> {
        let mut c = base.clone();
        c.disable_profile_itinerary_attention = false;
        c.disable_self_attention = false;
        c.disable_behavior_attention = false;
        c.single_order_mode = false;
        match self {
            Method::FitNet => {}
            Method::FitNetMinus => c.single_order_mode = true,
            Method::AvgPoolDnn => {
                c.disable_profile_itinerary_attention = true;
                c.disable_self_attention = true;
                c.disable_behavior_attention = true;
            }
            Method::Var1 => c.disable_profile_itinerary_attention = true,
            Method::Var2 => c.disable_self_attention = true,
            Method::Var3 => c.disable_behavior_attention = true,
            Method::OrderDest2i => return None,
        }
        Some(c)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = FitError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| FitError::config(format!("unknown method {s:?}")))
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding: EmbeddingDims,
    /// `D_m`, width of the self-attention output.
    pub d_model: usize,
    /// `N`
    pub heads: usize,
    pub intention_hidden: Vec<usize>,
    pub user_hidden: Vec<usize>,
    pub item_hidden: Vec<usize>,
    /// `D_r`, shared output width of the user and item towers.
    pub repr_dim: usize,
    pub disable_profile_itinerary_attention: bool,
    pub disable_self_attention: bool,
    pub disable_behavior_attention: bool,
    pub single_order_mode: bool,
    /// Half-width of the uniform init for embeddings and attention matrices.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingDims::default(),
            d_model: 32,
            heads: 8,
            intention_hidden: vec![32],
            user_hidden: vec![64],
            item_hidden: vec![64],
            repr_dim: 32,
            disable_profile_itinerary_attention: false,
            disable_self_attention: false,
            disable_behavior_attention: false,
            single_order_mode: false,
            init_scale: 0.05,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(FitError::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.repr_dim == 0 {
            return Err(FitError::config("repr_dim must be positive"));
        }
        let hidden = self
            .intention_hidden
            .iter()
            .chain(&self.user_hidden)
            .chain(&self.item_hidden);
        if hidden.clone().any(|&h| h == 0) {
            return Err(FitError::config("hidden layer widths must be positive"));
        }
        if !(self.init_scale > 0.0) {
            return Err(FitError::config("init_scale must be positive"));
        }
        Ok(())
    }

    pub fn intention_enabled(&self) -> bool {
        !self.disable_profile_itinerary_attention
    }

    /// Width of `v_i`.
    pub fn intention_dim(&self) -> usize {
        let p = self.embedding.profile_dim();
        if self.disable_profile_itinerary_attention {
            p
        } else {
            self.embedding.order_dim() + p
        }
    }

    /// `D_c`, width of the behavior-attention query `v_i ⊕ v_p`.
    pub fn query_dim(&self) -> usize {
        self.intention_dim() + self.d_model
    }

    pub fn user_input_dim(&self) -> usize {
        self.query_dim() + self.embedding.behavior_dim()
    }
}

/// A feed-forward stack of `(weight, bias)` parameter pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let weight = Tensor::uniform(&[w[0], w[1]], -limit, limit, rng);
                let wid = params.add(format!("{prefix}.{i}.w"), weight);
                let bid = params.add(format!("{prefix}.{i}.b"), Tensor::zeros(&[1, w[1]]));
                (wid, bid)
            })
            .collect();
        Self { layers }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<(Var, Var)>> {
        self.layers
            .iter()
            .map(|&(w, b)| Ok((tape.param(w)?, tape.param(b)?)))
            .collect()
    }
}

/// `x ← relu(x·W + b)` on hidden layers; the last layer is linear.
pub fn mlp_forward(tape: &mut Tape, layers: &[(Var, Var)], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let (_, cols) = tape.shape(h);
        let (rows, _) = tape.shape(w);
        if cols != rows {
            return Err(FitError::config(format!(
                "MLP layer {i} expects input width {rows}, got {cols}"
            )));
        }
        let z = tape.matmul(h, w)?;
        let z = tape.add(z, b)?;
        h = if i + 1 < layers.len() { tape.relu(z) } else { z };
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct UserOutput {
    pub v_u: Var,
    pub v_i: Var,
    pub v_p: Var,
    pub v_b: Var,
    /// Sightseeing probability, absent without the intention tower.
    pub p_i: Option<Var>,
    pub alpha: Option<Var>,
    pub beta: Option<Var>,
    pub head_weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub user: UserOutput,
    pub v_t: Var,
    pub raw_score: Var,
    pub p_c: Var,
}

impl ForwardOutput {
    pub fn p_i(&self) -> Option<Var> {
        self.user.p_i
    }
}

/// Plain-value view of a user forward pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UserInspection {
    pub v_u: Vec<f64>,
    pub p_intent: Option<f64>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    embeddings: Embeddings,
    w1: Option<ParamId>,
    heads: Vec<[ParamId; 3]>,
    w_o: Option<ParamId>,
    pool_orders: Option<ParamId>,
    w2: Option<ParamId>,
    intention: Option<Mlp>,
    user: Mlp,
    item: Mlp,
}

impl Model {
    pub fn new(config: ModelConfig, vocabs: &Vocabularies) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let s = config.init_scale;
        let dims = &config.embedding;
        let embeddings = Embeddings::init(&mut params, vocabs, dims, s, &mut rng)?;
        let (d_p, d_e, d_b) = (dims.profile_dim(), dims.order_dim(), dims.behavior_dim());
        let head_dim = config.d_model / config.heads;

        let mut uniform = |params: &mut ParamSet, name: String, r: usize, c: usize, xavier: bool| {
            let limit = if xavier { (6.0 / (r + c) as f64).sqrt() } else { s };
            params.add(name, Tensor::uniform(&[r, c], -limit, limit, &mut rng))
        };

        let w1 = (!config.disable_profile_itinerary_attention)
            .then(|| uniform(&mut params, "att.w1".into(), d_p, d_e, false));
        let (heads, w_o, pool_orders) = if config.disable_self_attention {
            let pool = uniform(&mut params, "att.pool_orders".into(), d_e, config.d_model, true);
            (Vec::new(), None, Some(pool))
        } else {
            let heads = (0..config.heads)
                .map(|n| {
                    [
                        uniform(&mut params, format!("att.head{n}.q"), d_e, head_dim, true),
                        uniform(&mut params, format!("att.head{n}.k"), d_e, head_dim, true),
                        uniform(&mut params, format!("att.head{n}.v"), d_e, head_dim, true),
                    ]
                })
                .collect();
            let w_o = uniform(&mut params, "att.w_o".into(), config.d_model, config.d_model, true);
            (heads, Some(w_o), None)
        };
        let w2 = (!config.disable_behavior_attention)
            .then(|| uniform(&mut params, "att.w2".into(), config.query_dim(), d_b, false));

        let intention = config.intention_enabled().then(|| {
            Mlp::init(
                &mut params,
                "mlp.intention",
                config.intention_dim(),
                &config.intention_hidden,
                1,
                &mut rng,
            )
        });
        let user = Mlp::init(
            &mut params,
            "mlp.user",
            config.user_input_dim(),
            &config.user_hidden,
            config.repr_dim,
            &mut rng,
        );
        let item = Mlp::init(
            &mut params,
            "mlp.item",
            dims.target_dim(),
            &config.item_hidden,
            config.repr_dim,
            &mut rng,
        );

        Ok(Self {
            config,
            params,
            embeddings,
            w1,
            heads,
            w_o,
            pool_orders,
            w2,
            intention,
            user,
            item,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn embeddings(&self) -> &Embeddings {
        &self.embeddings
    }

    pub fn user_tower(&self, tape: &mut Tape, emb: &EmbeddedUser) -> Result<UserOutput> {
        let c = &self.config;
        let d_e = c.embedding.order_dim();
        let d_b = c.embedding.behavior_dim();
        let orders: &[Var] = if c.single_order_mode {
            &emb.e_i[emb.e_i.len().saturating_sub(1)..]
        } else {
            &emb.e_i
        };
        if orders.is_empty() {
            return Err(FitError::invalid("user has an empty itinerary"));
        }

        let (v_i, alpha) = match self.w1 {
            Some(w1) => {
                let w1 = tape.param(w1)?;
                let att = attention::profile_itinerary_attention(tape, w1, emb.e_p, orders, d_e)?;
                (attention::intention_vector(tape, att.context, emb.e_p)?, att.weights)
            }
            None => (emb.e_p, None),
        };

        let (v_p, head_weights) = match (self.w_o, self.pool_orders) {
            (Some(w_o), _) => {
                let heads = self
                    .heads
                    .iter()
                    .map(|[q, k, v]| {
                        Ok(HeadVars {
                            query: tape.param(*q)?,
                            key: tape.param(*k)?,
                            value: tape.param(*v)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let w_o = tape.param(w_o)?;
                let out = attention::multi_head_self_attention(tape, &heads, w_o, orders)?;
                (out.pooled, out.head_weights)
            }
            (None, Some(pool)) => {
                let mean = attention::mean_pool(tape, orders, d_e)?;
                let pool = tape.param(pool)?;
                (tape.matmul(mean, pool)?, Vec::new())
            }
            (None, None) => unreachable!("model always has one itinerary reducer"),
        };

        let (v_b, beta) = match self.w2 {
            Some(w2) => {
                let v_c = tape.concat(&[v_i, v_p])?;
                let w2 = tape.param(w2)?;
                let att = attention::behavior_attention(tape, w2, v_c, &emb.e_b, d_b, d_b)?;
                (att.context, att.weights)
            }
            None => (attention::mean_pool(tape, &emb.e_b, d_b)?, None),
        };

        let joined = tape.concat(&[v_i, v_p, v_b])?;
        let layers = self.user.bind(tape)?;
        let v_u = mlp_forward(tape, &layers, joined)?;

        let p_i = match &self.intention {
            Some(mlp) => {
                let layers = mlp.bind(tape)?;
                let logit = mlp_forward(tape, &layers, v_i)?;
                Some(tape.sigmoid(logit))
            }
            None => None,
        };

        Ok(UserOutput {
            v_u,
            v_i,
            v_p,
            v_b,
            p_i,
            alpha,
            beta,
            head_weights,
        })
    }

    pub fn item_tower(&self, tape: &mut Tape, e_f: Var) -> Result<Var> {
        let layers = self.item.bind(tape)?;
        mlp_forward(tape, &layers, e_f)
    }

    pub fn forward(&self, tape: &mut Tape, enc: &EncodedInstance) -> Result<ForwardOutput> {
        let emb = self.embeddings.embed_instance(tape, enc)?;
        let user = self.user_tower(tape, &emb.user)?;
        let v_t = self.item_tower(tape, emb.e_f)?;
        let raw_score = score(tape, user.v_u, v_t)?;
        let p_c = tape.sigmoid(raw_score);
        Ok(ForwardOutput {
            user,
            v_t,
            raw_score,
            p_c,
        })
    }

    /// Summed loss of one user context against several targets. Equal to
    /// the sum of per-instance losses, with the user tower evaluated once.
    pub fn group_loss(
        &self,
        tape: &mut Tape,
        user: &EncodedUser,
        targets: &[(ItemIndex, u8)],
        label_intent: u8,
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(FitError::invalid("group without targets"));
        }
        let emb = self.embeddings.embed_user(tape, user)?;
        let out = self.user_tower(tape, &emb)?;
        let rows = targets
            .iter()
            .map(|(ix, _)| self.embeddings.embed_target(tape, ix))
            .collect::<Result<Vec<_>>>()?;
        let e_f = tape.stack_rows(&rows)?;
        let v_t = self.item_tower(tape, e_f)?;
        let u_col = tape.transpose(out.v_u);
        let s = tape.matmul(v_t, u_col)?;
        let p_c = tape.sigmoid(s);
        let labels: Vec<f64> = targets.iter().map(|(_, c)| f64::from(*c)).collect();
        let click = tape.bce_sum(p_c, &labels)?;
        match out.p_i {
            Some(p_i) => {
                let li = tape.bce(p_i, f64::from(label_intent))?;
                let li = tape.scale(li, targets.len() as f64);
                tape.add(click, li)
            }
            None => Ok(click),
        }
    }

    pub fn user_vector(&self, user: &EncodedUser) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let emb = self.embeddings.embed_user(&mut tape, user)?;
        let out = self.user_tower(&mut tape, &emb)?;
        Ok(tape.value(out.v_u).to_vec())
    }

    pub fn item_vector(&self, item: &ItemIndex) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let e_f = self.embeddings.embed_target(&mut tape, item)?;
        let v_t = self.item_tower(&mut tape, e_f)?;
        Ok(tape.value(v_t).to_vec())
    }

    pub fn inspect_user(&self, user: &EncodedUser) -> Result<UserInspection> {
        let mut tape = Tape::new(&self.params);
        let emb = self.embeddings.embed_user(&mut tape, user)?;
        let out = self.user_tower(&mut tape, &emb)?;
        let grab = |v: Option<Var>| v.map(|v| tape.value(v).to_vec());
        Ok(UserInspection {
            v_u: tape.value(out.v_u).to_vec(),
            p_intent: out.p_i.map(|p| tape.scalar(p)),
            alpha: grab(out.alpha),
            beta: grab(out.beta),
        })
    }

    /// Replaces every parameter from named arrays; names and shapes must
    /// match this model's layout exactly.
    pub fn load_arrays(&mut self, arrays: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<()> {
        if arrays.len() != self.params.len() {
            return Err(FitError::config(format!(
                "expected {} parameter arrays, found {}",
                self.params.len(),
                arrays.len()
            )));
        }
        let mut fresh = ParamSet::new();
        for ((name, shape, data), (_, own_name, own)) in arrays.into_iter().zip(self.params.iter()) {
            if name != own_name || shape != own.shape() {
                return Err(FitError::config(format!(
                    "parameter {name} {shape:?} does not match {own_name} {:?}",
                    own.shape()
                )));
            }
            fresh.add(name, Tensor::new(shape, data)?);
        }
        self.params = fresh;
        Ok(())
    }

    /// SHA-256 over the configuration and every parameter's name, shape
    /// and bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        for (_, name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `v_u · v_t`
pub fn score(tape: &mut Tape, v_u: Var, v_t: Var) -> Result<Var> {
    tape.dot(v_u, v_t)
}

/// `Loss_c + Loss_i`, the latter only when the intention tower exists.
pub fn loss(tape: &mut Tape, out: &ForwardOutput, label_intent: u8, label_click: u8) -> Result<Var> {
    let lc = tape.bce(out.p_c, f64::from(label_click))?;
    match out.user.p_i {
        Some(p_i) => {
            let li = tape.bce(p_i, f64::from(label_intent))?;
            tape.add(li, lc)
        }
        None => Ok(lc),
    }
}
