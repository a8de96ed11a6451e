//! Compact autoregressive scorer over SID levels and its four training stages.
//!
//! The scorer reads a query image as a set of tokens. A context vector combines the pooled
//! image, an optional query SID and an optional user history. Level `l` then adds the embeddings
//! of the codes chosen so far, attends once over the image tokens and predicts `c_l` with a
//! small MLP head.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::corpus::{BizStats, Catalog, Session, TokenMatrix};
use crate::error::{Error, Result};
use crate::fusion::sidecar;
use crate::math::{self, axpy, dot, rng_for, Linear, ParamSet};
use crate::quantize::tokenizer::Tokenizer;
use crate::quantize::{SemanticId, SidTable};

pub const SCORER_FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub input_dim: usize,
    pub levels: Vec<usize>,
    pub n_categories: usize,
    pub d_s: usize,
    pub h_s: usize,
}

impl ScorerConfig {
    pub fn new(input_dim: usize, levels: Vec<usize>, n_categories: usize) -> Self {
        Self {
            input_dim,
            levels,
            n_categories,
            d_s: 64,
            h_s: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.d_s == 0 || self.h_s == 0 || self.n_categories == 0 {
            return Err(Error::InvalidConfig("scorer widths must be positive".into()));
        }
        if self.levels.is_empty() || self.levels.iter().any(|&k| k == 0 || k > u16::MAX as usize) {
            return Err(Error::InvalidConfig(format!("bad level sizes {:?}", self.levels)));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub config: ScorerConfig,
    pub query_proj: Linear,
    /// State to image-space attention query.
    pub attn_key: Linear,
    /// Attended image feature back to state space.
    pub attn_value: Linear,
    /// Prefix code embeddings, `K_l × d_s` per level.
    pub code_emb: Vec<Vec<f64>>,
    /// Embeddings of the query item's own SID.
    pub qsid_emb: Vec<Vec<f64>>,
    /// Embeddings of history SIDs.
    pub hist_emb: Vec<Vec<f64>>,
    pub level_pos: Vec<f64>,
    pub scene_emb: Vec<f64>,
    pub bos: Vec<f64>,
    /// Unused by fixed-length decoding; kept so the marker set is complete.
    pub eos: Vec<f64>,
    pub sep: Vec<f64>,
    pub no_history: Vec<f64>,
    pub head_hidden: Vec<Linear>,
    pub head_out: Vec<Linear>,
    pub cat_hidden: Linear,
    pub cat_out: Linear,
}

fn gaussian(n: usize, std: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

fn row(table: &[f64], i: usize, d: usize) -> &[f64] {
    &table[i * d..(i + 1) * d]
}

fn row_mut(table: &mut [f64], i: usize, d: usize) -> &mut [f64] {
    &mut table[i * d..(i + 1) * d]
}

impl ScorerParams {
    pub fn new(config: ScorerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, 400);
        let (d, ds, hs) = (config.input_dim, config.d_s, config.h_s);
        let emb = 0.5;
        let tables = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            config.levels.iter().map(|&k| gaussian(k * ds, emb, rng)).collect()
        };
        let query_proj = Linear::random(d, ds, (d as f64).sqrt(), &mut rng);
        let attn_key = Linear::random(ds, d, 0.1, &mut rng);
        let attn_value = Linear::random(d, ds, (d as f64).sqrt(), &mut rng);
        let code_emb = tables(&mut rng);
        let level_pos = gaussian(config.depth() * ds, emb, &mut rng);
        let bos = gaussian(ds, emb, &mut rng);
        let eos = gaussian(ds, emb, &mut rng);
        // Context-only embeddings start at zero, so a stage that adds new context begins as
        // exactly its parent.
        let zeros = |n: usize| vec![0.0; n];
        let qsid_emb: Vec<Vec<f64>> = config.levels.iter().map(|&k| zeros(k * ds)).collect();
        let hist_emb = qsid_emb.clone();
        let scene_emb = zeros(2 * ds);
        let sep = zeros(ds);
        let no_history = zeros(ds);
        let mut head_hidden = Vec::new();
        let mut head_out = Vec::new();
        for &k in &config.levels {
            head_hidden.push(Linear::random(ds, hs, 2f64.sqrt(), &mut rng));
            head_out.push(Linear::random(hs, k, 1.0, &mut rng));
        }
        let cat_hidden = Linear::random(ds, hs, 2f64.sqrt(), &mut rng);
        let cat_out = Linear::random(hs, config.n_categories, 1.0, &mut rng);
        Ok(Self {
            config,
            query_proj,
            attn_key,
            attn_value,
            code_emb,
            qsid_emb,
            hist_emb,
            level_pos,
            scene_emb,
            bos,
            eos,
            sep,
            no_history,
            head_hidden,
            head_out,
            cat_hidden,
            cat_out,
        })
    }

    pub fn depth(&self) -> usize {
        self.config.depth()
    }

    pub fn levels(&self) -> &[usize] {
        &self.config.levels
    }
}

impl ParamSet for ScorerParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = Vec::new();
        for l in [&self.query_proj, &self.attn_key, &self.attn_value] {
            t.push(&l.w);
            t.push(&l.b);
        }
        for tables in [&self.code_emb, &self.qsid_emb, &self.hist_emb] {
            t.extend(tables.iter().map(|v| v.as_slice()));
        }
        for v in [&self.level_pos, &self.scene_emb, &self.bos, &self.eos, &self.sep, &self.no_history] {
            t.push(v);
        }
        for l in self.head_hidden.iter().chain(&self.head_out).chain([&self.cat_hidden, &self.cat_out]) {
            t.push(&l.w);
            t.push(&l.b);
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = Vec::new();
        for l in [&mut self.query_proj, &mut self.attn_key, &mut self.attn_value] {
            t.push(&mut l.w);
            t.push(&mut l.b);
        }
        for tables in [&mut self.code_emb, &mut self.qsid_emb, &mut self.hist_emb] {
            t.extend(tables.iter_mut().map(|v| v.as_mut_slice()));
        }
        for v in [
            &mut self.level_pos,
            &mut self.scene_emb,
            &mut self.bos,
            &mut self.eos,
            &mut self.sep,
            &mut self.no_history,
        ] {
            t.push(v);
        }
        for l in self
            .head_hidden
            .iter_mut()
            .chain(self.head_out.iter_mut())
            .chain([&mut self.cat_hidden, &mut self.cat_out])
        {
            t.push(&mut l.w);
            t.push(&mut l.b);
        }
        t
    }
}

/// A user's history as SIDs, plus the search scene of the current query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserContext {
    /// `None` for users without long-term history.
    pub long_term_sid: Option<SemanticId>,
    pub short_term_sids: Vec<SemanticId>,
    pub scene_id: u8,
}

/// Everything the scorer conditions on, apart from the prefix.
#[derive(Debug, Clone, Copy)]
pub struct ScorerInput<'a> {
    pub tokens: &'a TokenMatrix,
    pub query_sid: Option<&'a SemanticId>,
    pub user: Option<&'a UserContext>,
}

impl<'a> ScorerInput<'a> {
    pub fn image(tokens: &'a TokenMatrix) -> Self {
        Self {
            tokens,
            query_sid: None,
            user: None,
        }
    }

    /// Drops the context a stage was not trained with.
    pub fn for_stage(self, stage: Stage) -> Self {
        let (q, u) = stage.uses_context();
        Self {
            tokens: self.tokens,
            query_sid: if q { self.query_sid } else { None },
            user: if u { self.user } else { None },
        }
    }

    pub fn with_tokens(self, tokens: &'a TokenMatrix) -> Self {
        Self { tokens, ..self }
    }
}

/// Image tokens scaled so their mean has unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTokens {
    pub x: Vec<f64>,
    pub toks: Vec<Vec<f64>>,
}

pub fn prepare_tokens(tokens: &TokenMatrix) -> PreparedTokens {
    let n = math::norm(tokens.pooled());
    let s = if n > 0.0 { 1.0 / n } else { 1.0 };
    PreparedTokens {
        x: tokens.pooled().iter().map(|v| v * s).collect(),
        toks: (0..tokens.len())
            .map(|j| tokens.row(j).iter().map(|&v| v as f64 * s).collect())
            .collect(),
    }
}

/// Per-level activations kept for the backward pass.
#[derive(Debug, Clone)]
struct LevelCache {
    s: Vec<f64>,
    a: Vec<f64>,
    m: Vec<f64>,
    u: Vec<f64>,
    hpre: Vec<f64>,
    h: Vec<f64>,
    logits: Vec<f64>,
}

/// Teacher-forced forward pass over a whole SID.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    prep: PreparedTokens,
    levels: Vec<LevelCache>,
}

impl TeacherForced {
    pub fn logits(&self, l: usize) -> &[f64] {
        &self.levels[l].logits
    }

    /// `Σ_l log P(c_l | ·)` over the full (unmasked) distributions.
    pub fn logprob(&self, sid: &SemanticId) -> f64 {
        self.levels
            .iter()
            .zip(&sid.0)
            .map(|(lc, &c)| math::log_softmax(&lc.logits)[c as usize])
            .sum()
    }
}

/// Cached keys and values of one query, for decoding.
#[derive(Debug, Clone)]
pub struct QueryState {
    c: Vec<f64>,
    keys: Vec<Vec<f64>>,
    key_bias: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl ScorerParams {
    fn check_sid(&self, sid: &SemanticId) -> Result<()> {
        sid.validate(&self.config.levels)
    }

    fn check_input(&self, input: &ScorerInput) -> Result<()> {
        if input.tokens.dim() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "tokens have width {}, scorer expects {}",
                input.tokens.dim(),
                self.config.input_dim
            )));
        }
        if input.tokens.is_empty() {
            return Err(Error::Empty("query has no tokens".into()));
        }
        if let Some(q) = input.query_sid {
            self.check_sid(q)?;
        }
        if let Some(u) = input.user {
            if u.scene_id > 1 {
                return Err(Error::InvalidConfig(format!("unknown scene {}", u.scene_id)));
            }
            if let Some(s) = &u.long_term_sid {
                self.check_sid(s)?;
            }
            for s in &u.short_term_sids {
                self.check_sid(s)?;
            }
        }
        Ok(())
    }

    fn add_sid(&self, tables: &[Vec<f64>], sid: &SemanticId, w: f64, out: &mut [f64]) {
        let d = self.config.d_s;
        for (l, &c) in sid.0.iter().enumerate() {
            axpy(w, row(&tables[l], c as usize, d), out);
        }
    }

    /// Short-term SIDs in canonical order so the mean is exactly permutation invariant.
    fn sorted_short(u: &UserContext) -> Vec<&SemanticId> {
        let mut s: Vec<&SemanticId> = u.short_term_sids.iter().collect();
        s.sort();
        s
    }

    fn context(&self, prep: &PreparedTokens, input: &ScorerInput) -> Vec<f64> {
        let d = self.config.d_s;
        let mut c = self.query_proj.forward(&prep.x);
        if let Some(q) = input.query_sid {
            axpy(1.0, &self.sep, &mut c);
            self.add_sid(&self.qsid_emb, q, 1.0, &mut c);
        }
        if let Some(u) = input.user {
            axpy(1.0, row(&self.scene_emb, u.scene_id as usize, d), &mut c);
            match &u.long_term_sid {
                Some(s) => self.add_sid(&self.hist_emb, s, 1.0, &mut c),
                None => axpy(1.0, &self.no_history, &mut c),
            }
            let short = Self::sorted_short(u);
            if !short.is_empty() {
                let w = 1.0 / short.len() as f64;
                for s in short {
                    self.add_sid(&self.hist_emb, s, w, &mut c);
                }
            }
        }
        c
    }

    fn context_backward(&self, prep: &PreparedTokens, input: &ScorerInput, dc: &[f64], grad: &mut Self) {
        let d = self.config.d_s;
        let add = |tables: &mut [Vec<f64>], sid: &SemanticId, w: f64| {
            for (l, &c) in sid.0.iter().enumerate() {
                axpy(w, dc, row_mut(&mut tables[l], c as usize, d));
            }
        };
        self.query_proj.backward(&prep.x, dc, &mut grad.query_proj);
        if let Some(q) = input.query_sid {
            axpy(1.0, dc, &mut grad.sep);
            add(&mut grad.qsid_emb, q, 1.0);
        }
        if let Some(u) = input.user {
            axpy(1.0, dc, row_mut(&mut grad.scene_emb, u.scene_id as usize, d));
            match &u.long_term_sid {
                Some(s) => add(&mut grad.hist_emb, s, 1.0),
                None => axpy(1.0, dc, &mut grad.no_history),
            }
            let short = Self::sorted_short(u);
            if !short.is_empty() {
                let w = 1.0 / short.len() as f64;
                for s in short {
                    add(&mut grad.hist_emb, s, w);
                }
            }
        }
    }

    fn state(&self, c: &[f64], prefix: &[u16]) -> Vec<f64> {
        let d = self.config.d_s;
        let l = prefix.len();
        let mut s = c.to_vec();
        axpy(1.0, row(&self.level_pos, l, d), &mut s);
        if l == 0 {
            axpy(1.0, &self.bos, &mut s);
        }
        for (i, &p) in prefix.iter().enumerate() {
            axpy(1.0, row(&self.code_emb[i], p as usize, d), &mut s);
        }
        s
    }

    fn head(&self, l: usize, u: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hpre = self.head_hidden[l].forward(u);
        let h = relu(&hpre);
        let logits = self.head_out[l].forward(&h);
        (hpre, h, logits)
    }

    fn level_forward(&self, prep: &PreparedTokens, c: &[f64], prefix: &[u16]) -> LevelCache {
        let l = prefix.len();
        let s = self.state(c, prefix);
        let q = self.attn_key.forward(&s);
        let inv = 1.0 / (self.config.d_s as f64).sqrt();
        let e: Vec<f64> = prep.toks.iter().map(|t| dot(&q, t) * inv).collect();
        let a = math::softmax(&e);
        let mut m = vec![0.0; self.config.input_dim];
        for (aj, t) in a.iter().zip(&prep.toks) {
            axpy(*aj, t, &mut m);
        }
        let mut u = self.attn_value.forward(&m);
        axpy(1.0, &s, &mut u);
        let (hpre, h, logits) = self.head(l, &u);
        LevelCache {
            s,
            a,
            m,
            u,
            hpre,
            h,
            logits,
        }
    }

    /// Backpropagates `dlogits` through one level; returns the gradient on the context.
    fn level_backward(
        &self,
        prep: &PreparedTokens,
        lc: &LevelCache,
        prefix: &[u16],
        dlogits: &[f64],
        grad: &mut Self,
    ) -> Vec<f64> {
        let d = self.config.d_s;
        let l = prefix.len();
        let mut dh = self.head_out[l].backward(&lc.h, dlogits, &mut grad.head_out[l]);
        for (g, &p) in dh.iter_mut().zip(&lc.hpre) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        let du = self.head_hidden[l].backward(&lc.u, &dh, &mut grad.head_hidden[l]);
        let mut ds = du.clone();
        let dm = self.attn_value.backward(&lc.m, &du, &mut grad.attn_value);
        let da: Vec<f64> = prep.toks.iter().map(|t| dot(&dm, t)).collect();
        let mean_da = dot(&lc.a, &da);
        let inv = 1.0 / (d as f64).sqrt();
        let mut dq = vec![0.0; self.config.input_dim];
        for ((aj, daj), t) in lc.a.iter().zip(&da).zip(&prep.toks) {
            axpy(aj * (daj - mean_da) * inv, t, &mut dq);
        }
        let ds_key = self.attn_key.backward(&lc.s, &dq, &mut grad.attn_key);
        axpy(1.0, &ds_key, &mut ds);
        axpy(1.0, &ds, row_mut(&mut grad.level_pos, l, d));
        if l == 0 {
            axpy(1.0, &ds, &mut grad.bos);
        }
        for (i, &p) in prefix.iter().enumerate() {
            axpy(1.0, &ds, row_mut(&mut grad.code_emb[i], p as usize, d));
        }
        ds
    }

    pub fn teacher_forward(&self, input: &ScorerInput, sid: &SemanticId) -> Result<TeacherForced> {
        self.check_input(input)?;
        self.check_sid(sid)?;
        let prep = prepare_tokens(input.tokens);
        let c = self.context(&prep, input);
        let levels = (0..self.depth())
            .map(|l| self.level_forward(&prep, &c, &sid.0[..l]))
            .collect();
        Ok(TeacherForced { prep, levels })
    }

    /// Accumulates into `grad` the parameter gradient implied by per-level logit gradients.
    pub fn teacher_backward(
        &self,
        input: &ScorerInput,
        sid: &SemanticId,
        tf: &TeacherForced,
        dlogits: &[Vec<f64>],
        grad: &mut Self,
    ) {
        let mut dc = vec![0.0; self.config.d_s];
        for (l, (lc, dl)) in tf.levels.iter().zip(dlogits).enumerate() {
            let ds = self.level_backward(&tf.prep, lc, &sid.0[..l], dl, grad);
            axpy(1.0, &ds, &mut dc);
        }
        self.context_backward(&tf.prep, input, &dc, grad);
    }

    /// `−Σ_l log P(c_l | ·)` and its logit gradients.
    fn nll_parts(tf: &TeacherForced, sid: &SemanticId) -> (f64, Vec<Vec<f64>>) {
        let mut value = 0.0;
        let dl = tf
            .levels
            .iter()
            .zip(&sid.0)
            .map(|(lc, &c)| {
                let mut p = math::softmax(&lc.logits);
                value -= math::log_softmax(&lc.logits)[c as usize];
                p[c as usize] -= 1.0;
                p
            })
            .collect();
        (value, dl)
    }

    /// Adds `scale ×` the NTP gradient to `grad`; returns the unscaled loss.
    pub fn ntp_accumulate(&self, input: &ScorerInput, target: &SemanticId, scale: f64, grad: &mut Self) -> Result<f64> {
        let tf = self.teacher_forward(input, target)?;
        let (value, mut dl) = Self::nll_parts(&tf, target);
        for d in &mut dl {
            d.iter_mut().for_each(|v| *v *= scale);
        }
        self.teacher_backward(input, target, &tf, &dl, grad);
        Ok(value)
    }

    pub fn ntp_loss(&self, input: &ScorerInput, target: &SemanticId) -> Result<(f64, Self)> {
        let mut g = self.zeros_like();
        let v = self.ntp_accumulate(input, target, 1.0, &mut g)?;
        Ok((v, g))
    }

    /// Category logits predicted from the context.
    pub fn category_logits(&self, input: &ScorerInput) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let prep = prepare_tokens(input.tokens);
        let c = self.context(&prep, input);
        let h = relu(&self.cat_hidden.forward(&c));
        Ok(self.cat_out.forward(&h))
    }

    pub fn category_accumulate(&self, input: &ScorerInput, category: usize, scale: f64, grad: &mut Self) -> Result<f64> {
        self.check_input(input)?;
        if category >= self.config.n_categories {
            return Err(Error::Shape(format!("category {category} out of range")));
        }
        let prep = prepare_tokens(input.tokens);
        let c = self.context(&prep, input);
        let hpre = self.cat_hidden.forward(&c);
        let h = relu(&hpre);
        let logits = self.cat_out.forward(&h);
        let value = -math::log_softmax(&logits)[category];
        let mut dl = math::softmax(&logits);
        dl[category] -= 1.0;
        dl.iter_mut().for_each(|v| *v *= scale);
        let mut dh = self.cat_out.backward(&h, &dl, &mut grad.cat_out);
        for (g, &p) in dh.iter_mut().zip(&hpre) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        let dc = self.cat_hidden.backward(&c, &dh, &mut grad.cat_hidden);
        self.context_backward(&prep, input, &dc, grad);
        Ok(value)
    }

    pub fn category_loss(&self, input: &ScorerInput, category: usize) -> Result<(f64, Self)> {
        let mut g = self.zeros_like();
        let v = self.category_accumulate(input, category, 1.0, &mut g)?;
        Ok((v, g))
    }

    /// Teacher-forced `log π(sid | input)`.
    pub fn sequence_logprob(&self, input: &ScorerInput, sid: &SemanticId) -> Result<f64> {
        Ok(self.teacher_forward(input, sid)?.logprob(sid))
    }

    /// Precomputes the context and per-token keys and values of one query.
    pub fn prepare(&self, input: &ScorerInput) -> Result<QueryState> {
        self.check_input(input)?;
        let prep = prepare_tokens(input.tokens);
        let c = self.context(&prep, input);
        let ds = self.config.d_s;
        let keys = prep.toks.iter().map(|t| self.attn_key.transpose_apply(t)).collect();
        let key_bias = prep.toks.iter().map(|t| dot(&self.attn_key.b, t)).collect();
        let values = prep
            .toks
            .iter()
            .map(|t| (0..ds).map(|o| dot(self.attn_value.row(o), t)).collect())
            .collect();
        Ok(QueryState {
            c,
            keys,
            key_bias,
            values,
        })
    }

    /// Logits over level `prefix.len()` given the codes chosen so far.
    pub fn next_logits(&self, st: &QueryState, prefix: &[u16]) -> Result<Vec<f64>> {
        let l = prefix.len();
        if l >= self.depth() {
            return Err(Error::Shape(format!("prefix of length {l} leaves no level to score")));
        }
        for (i, &p) in prefix.iter().enumerate() {
            if p as usize >= self.config.levels[i] {
                return Err(Error::Shape(format!("prefix code {p} out of range at level {i}")));
            }
        }
        let s = self.state(&st.c, prefix);
        let inv = 1.0 / (self.config.d_s as f64).sqrt();
        let e: Vec<f64> = st
            .keys
            .iter()
            .zip(&st.key_bias)
            .map(|(k, b)| (dot(&s, k) + b) * inv)
            .collect();
        let a = math::softmax(&e);
        let mut u = s;
        axpy(1.0, &self.attn_value.b, &mut u);
        for (aj, v) in a.iter().zip(&st.values) {
            axpy(*aj, v, &mut u);
        }
        Ok(self.head(l, &u).2)
    }

    /// `P(c_l | input, prefix)`.
    pub fn score_next(&self, st: &QueryState, prefix: &[u16]) -> Result<Vec<f64>> {
        Ok(math::softmax(&self.next_logits(st, prefix)?))
    }

    /// Unconstrained greedy decode.
    pub fn greedy_sid(&self, st: &QueryState) -> Result<SemanticId> {
        let mut prefix = Vec::with_capacity(self.depth());
        for _ in 0..self.depth() {
            let logits = self.next_logits(st, &prefix)?;
            prefix.push(math::argmax(&logits) as u16);
        }
        Ok(SemanticId(prefix))
    }
}

/// List-wise DPO: `softplus(log Σ_j exp β(r_j − r_+))`, with `r = log π − log π_ref`.
///
/// `ref_logp` holds the reference log-probabilities of the positive then each negative.
/// Adds `scale ×` the policy gradient to `grad` and returns the unscaled loss.
pub fn dpo_accumulate(
    policy: &ScorerParams,
    input: &ScorerInput,
    positive: &SemanticId,
    negatives: &[&SemanticId],
    ref_logp: &[f64],
    beta: f64,
    scale: f64,
    grad: &mut ScorerParams,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidConfig("DPO needs at least one negative".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!("DPO beta must be positive, got {beta}")));
    }
    if ref_logp.len() != negatives.len() + 1 {
        return Err(Error::Shape("one reference log-prob per sequence expected".into()));
    }
    let tf_pos = policy.teacher_forward(input, positive)?;
    let r_pos = tf_pos.logprob(positive) - ref_logp[0];
    let mut tf_neg = Vec::with_capacity(negatives.len());
    let mut z = Vec::with_capacity(negatives.len());
    for (j, &neg) in negatives.iter().enumerate() {
        let tf = policy.teacher_forward(input, neg)?;
        let r = tf.logprob(neg) - ref_logp[j + 1];
        z.push(beta * (r - r_pos));
        tf_neg.push(tf);
    }
    let lse = math::logsumexp(&z);
    let value = math::softplus(lse);
    let coef = math::sigmoid(lse) * beta * scale;
    if coef != 0.0 {
        let w = math::softmax(&z);
        let (_, mut dl) = ScorerParams::nll_parts(&tf_pos, positive);
        dl.iter_mut().flatten().for_each(|v| *v *= coef);
        policy.teacher_backward(input, positive, &tf_pos, &dl, grad);
        for ((tf, &neg), wj) in tf_neg.iter().zip(negatives).zip(&w) {
            let (_, mut dl) = ScorerParams::nll_parts(tf, neg);
            dl.iter_mut().flatten().for_each(|v| *v *= -coef * wj);
            policy.teacher_backward(input, neg, tf, &dl, grad);
        }
    }
    Ok(value)
}

/// DPO loss and policy gradient against a frozen reference.
pub fn dpo_loss(
    policy: &ScorerParams,
    reference: &ScorerParams,
    input: &ScorerInput,
    positive: &SemanticId,
    negatives: &[&SemanticId],
    beta: f64,
) -> Result<(f64, ScorerParams)> {
    let ref_logp = reference_logprobs(reference, input, positive, negatives)?;
    let mut g = policy.zeros_like();
    let v = dpo_accumulate(policy, input, positive, negatives, &ref_logp, beta, 1.0, &mut g)?;
    Ok((v, g))
}

fn reference_logprobs(
    reference: &ScorerParams,
    input: &ScorerInput,
    positive: &SemanticId,
    negatives: &[&SemanticId],
) -> Result<Vec<f64>> {
    std::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|s| reference.sequence_logprob(input, s))
        .collect()
}

/// Training stage of a scorer checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Sft,
    Psft,
    Dpo,
    /// Token-pruned student distilled from a post-trained model.
    Pruned,
}

impl Stage {
    pub const TRAINED: [Stage; 4] = [Stage::Pretrain, Stage::Sft, Stage::Psft, Stage::Dpo];

    /// Whether the stage conditions on the query SID and on the user.
    pub fn uses_context(self) -> (bool, bool) {
        match self {
            Stage::Pretrain => (false, false),
            Stage::Sft | Stage::Pruned => (true, false),
            Stage::Psft | Stage::Dpo => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::Psft => "psft",
            Stage::Dpo => "dpo",
            Stage::Pruned => "pruned",
        }
    }

    fn stream(self) -> u64 {
        500 + self as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "sft" => Ok(Stage::Sft),
            "psft" => Ok(Stage::Psft),
            "dpo" => Ok(Stage::Dpo),
            "pruned" => Ok(Stage::Pruned),
            _ => Err(Error::InvalidConfig(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u16,
    pub stage: Stage,
    /// SHA-256 of the parent checkpoint's parameter file.
    pub parent_hash: Option<String>,
    pub config: ScorerConfig,
}

/// Writes the parameters and a JSON sidecar; returns the parameter file's SHA-256.
pub fn save_checkpoint(params: &ScorerParams, stage: Stage, parent_hash: Option<String>, path: &Path) -> Result<String> {
    blob::write_f64(path, 1, &params.flatten())?;
    let meta = CheckpointMeta {
        format_version: SCORER_FORMAT_VERSION,
        stage,
        parent_hash,
        config: params.config.clone(),
    };
    std::fs::write(sidecar(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    blob::sha256_file(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ScorerParams, CheckpointMeta)> {
    let side = sidecar(path);
    let text = std::fs::read_to_string(&side).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(side.clone()),
        _ => e.into(),
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if meta.format_version != SCORER_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: side,
            expected: SCORER_FORMAT_VERSION,
            found: meta.format_version,
        });
    }
    let (_, flat) = blob::read_f64(path)?;
    let mut p = ScorerParams::new(meta.config.clone(), 0)?;
    if flat.len() != p.num_params() {
        return Err(Error::format(path, "parameter count disagrees with sidecar"));
    }
    p.assign_flat(&flat);
    Ok((p, meta))
}

/// Mean of the history items' representations and business statistics, re-encoded to one SID.
/// `None` for an empty history.
pub fn aggregate_long_term(item_ids: &[u32], catalog: &Catalog, tok: &Tokenizer) -> Result<Option<SemanticId>> {
    if item_ids.is_empty() {
        return Ok(None);
    }
    let reps = item_ids
        .iter()
        .map(|&i| tok.view_representation(catalog, i, 0))
        .collect::<Result<Vec<_>>>()?;
    let f = math::mean_rows(&reps);
    let n = item_ids.len() as f64;
    let mean = |g: &dyn Fn(&BizStats) -> f64| item_ids.iter().map(|&i| g(&catalog.item(i).biz)).sum::<f64>() / n;
    let biz = BizStats {
        clicks_30d: mean(&|b| b.clicks_30d as f64).round() as u64,
        gmv_30d: mean(&|b| b.gmv_30d),
        orders_30d: mean(&|b| b.orders_30d as f64).round() as u64,
        price: mean(&|b| b.price),
    };
    Ok(Some(tok.encoder.encode(&f, Some(&biz))?.sid))
}

/// SIDs and contexts the scorer needs, derived once from a tokenizer's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GrData {
    pub levels: Vec<usize>,
    /// Canonical SID of every item, indexed by item id.
    pub canonical: Vec<SemanticId>,
    /// SID of every catalog image encoded as an unlabeled query.
    pub view_qsids: BTreeMap<(u32, u16), SemanticId>,
    pub session_qsids: Vec<SemanticId>,
    /// Per-session user context, in session order.
    pub session_users: Vec<UserContext>,
}

impl GrData {
    pub fn build(catalog: &Catalog, tok: &Tokenizer, table: &SidTable) -> Result<Self> {
        let canonical = catalog
            .items
            .iter()
            .map(|it| {
                table
                    .canonical(it.item_id)
                    .cloned()
                    .ok_or_else(|| Error::Verification(format!("item {} has no SID", it.item_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut view_qsids = BTreeMap::new();
        for it in &catalog.items {
            for (v, view) in it.views.iter().enumerate() {
                view_qsids.insert((it.item_id, v as u16), tok.encode_query(catalog, view)?.sid);
            }
        }
        let mut profiles = BTreeMap::new();
        for (&u, h) in &catalog.histories {
            let long = aggregate_long_term(&h.long_term_item_ids, catalog, tok)?;
            let short: Vec<SemanticId> = h
                .short_term_item_ids
                .iter()
                .map(|&i| canonical[i as usize].clone())
                .collect();
            profiles.insert(u, (long, short));
        }
        let mut session_qsids = Vec::with_capacity(catalog.sessions.len());
        let mut session_users = Vec::with_capacity(catalog.sessions.len());
        for s in &catalog.sessions {
            session_qsids.push(tok.encode_query(catalog, &s.query)?.sid);
            let (long, short) = profiles
                .get(&s.user_id)
                .cloned()
                .unwrap_or((None, Vec::new()));
            session_users.push(UserContext {
                long_term_sid: long,
                short_term_sids: short,
                scene_id: s.scene_id,
            });
        }
        Ok(Self {
            levels: table.levels.clone(),
            canonical,
            view_qsids,
            session_qsids,
            session_users,
        })
    }

    pub fn view_input<'a>(&'a self, catalog: &'a Catalog, item: u32, view: usize) -> ScorerInput<'a> {
        ScorerInput {
            tokens: &catalog.item(item).views[view],
            query_sid: self.view_qsids.get(&(item, view as u16)),
            user: None,
        }
    }

    pub fn session_input<'a>(&'a self, catalog: &'a Catalog, s: usize) -> ScorerInput<'a> {
        ScorerInput {
            tokens: &catalog.sessions[s].query,
            query_sid: Some(&self.session_qsids[s]),
            user: Some(&self.session_users[s]),
        }
    }
}

/// One supervised example; `negatives` is only used by DPO.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub input: ScorerInput<'a>,
    pub target: &'a SemanticId,
    pub category: usize,
    pub negatives: Vec<&'a SemanticId>,
}

/// Every training view of every item, labeled with the item's SID and category.
pub fn pretrain_examples<'a>(catalog: &'a Catalog, data: &'a GrData) -> Vec<Example<'a>> {
    let mut out = Vec::new();
    for it in &catalog.items {
        for v in catalog.train_views() {
            out.push(Example {
                input: data.view_input(catalog, it.item_id, v).for_stage(Stage::Pretrain),
                target: &data.canonical[it.item_id as usize],
                category: it.category_id as usize,
                negatives: Vec::new(),
            });
        }
    }
    out
}

/// Training pairs in both directions: one image (and its query SID) to the other's item SID.
pub fn pair_examples<'a>(catalog: &'a Catalog, data: &'a GrData) -> Vec<Example<'a>> {
    let mut out = Vec::new();
    for p in catalog.train_pairs() {
        for (qi, qv, ti) in [(p.item_a, p.view_a, p.item_b), (p.item_b, p.view_b, p.item_a)] {
            out.push(Example {
                input: data.view_input(catalog, qi, qv as usize),
                target: &data.canonical[ti as usize],
                category: catalog.item(qi).category_id as usize,
                negatives: Vec::new(),
            });
        }
    }
    out
}

/// Sessions with their purchased item as target and its session negatives.
pub fn session_examples<'a>(catalog: &'a Catalog, data: &'a GrData, sessions: &[usize]) -> Vec<Example<'a>> {
    sessions
        .iter()
        .map(|&s| {
            let sess: &Session = &catalog.sessions[s];
            Example {
                input: data.session_input(catalog, s),
                target: &data.canonical[sess.purchased as usize],
                category: catalog.item(sess.purchased).category_id as usize,
                negatives: sess
                    .negatives()
                    .into_iter()
                    .map(|i| &data.canonical[i as usize])
                    .collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub clip: f64,
    pub dpo_beta: f64,
    /// Weight of the purchased item's NTP loss added to the DPO objective; zero is pure DPO.
    pub dpo_anchor: f64,
    pub schedule: math::LrSchedule,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 0.05,
            batch: 32,
            seed: 7,
            clip: 5.0,
            dpo_beta: 0.1,
            dpo_anchor: 0.0,
            schedule: math::LrSchedule::Constant,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig("epochs and batch must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("bad learning rate {}", self.lr)));
        }
        if !(self.dpo_beta > 0.0) {
            return Err(Error::InvalidConfig(format!("DPO beta must be positive, got {}", self.dpo_beta)));
        }
        if !(self.dpo_anchor >= 0.0) || !self.dpo_anchor.is_finite() {
            return Err(Error::InvalidConfig(format!("bad DPO anchor weight {}", self.dpo_anchor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTrace {
    /// Mean per-example loss during each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Per-example loss contribution: adds `scale ×` its gradient to the accumulator.
pub type StepFn<'f, T> = dyn Fn(&ScorerParams, &T, f64, &mut ScorerParams) -> Result<f64> + 'f;

/// Shuffled minibatch SGD. Each task in `tasks` takes its own step on every minibatch.
pub fn run_stage<T>(
    params: &ScorerParams,
    examples: &[T],
    cfg: &StageConfig,
    stage: Stage,
    tasks: &[&StepFn<'_, T>],
) -> Result<(ScorerParams, StageTrace)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty(format!("no {stage} examples")));
    }
    let mut p = params.clone();
    let mut trace = StageTrace::default();
    let mut rng = rng_for(cfg.seed, stage.stream());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let total = cfg.epochs * examples.len().div_ceil(cfg.batch);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let lr = cfg.schedule.rate(cfg.lr, step, total);
            let scale = 1.0 / chunk.len() as f64;
            for task in tasks {
                let mut g = p.zeros_like();
                for &i in chunk {
                    sum += task(&p, &examples[i], scale, &mut g)?;
                }
                math::sgd_step(&mut p, &g, lr, Some(cfg.clip));
            }
            step += 1;
            if !sum.is_finite() || !p.all_finite() {
                return Err(Error::TrainingDiverged {
                    stage: stage.name().into(),
                    step,
                });
            }
        }
        trace.epoch_loss.push(sum / examples.len() as f64);
    }
    Ok((p, trace))
}

fn ntp_step(p: &ScorerParams, ex: &Example, scale: f64, g: &mut ScorerParams) -> Result<f64> {
    p.ntp_accumulate(&ex.input, ex.target, scale, g)
}

/// Image-only pretraining: SID prediction and category prediction on alternating steps.
pub fn train_pretrain(params: &ScorerParams, examples: &[Example], cfg: &StageConfig) -> Result<(ScorerParams, StageTrace)> {
    let cat = |p: &ScorerParams, ex: &Example, scale: f64, g: &mut ScorerParams| {
        p.category_accumulate(&ex.input.for_stage(Stage::Pretrain), ex.category, scale, g)
    };
    let ntp = |p: &ScorerParams, ex: &Example, scale: f64, g: &mut ScorerParams| {
        p.ntp_accumulate(&ex.input.for_stage(Stage::Pretrain), ex.target, scale, g)
    };
    run_stage(params, examples, cfg, Stage::Pretrain, &[&ntp, &cat])
}

/// Pair supervision with the query's own SID in context.
pub fn train_sft(params: &ScorerParams, examples: &[Example], cfg: &StageConfig) -> Result<(ScorerParams, StageTrace)> {
    let ntp = |p: &ScorerParams, ex: &Example, scale: f64, g: &mut ScorerParams| {
        p.ntp_accumulate(&ex.input.for_stage(Stage::Sft), ex.target, scale, g)
    };
    run_stage(params, examples, cfg, Stage::Sft, &[&ntp])
}

/// Session supervision with user history and scene in context.
pub fn train_personalized_sft(
    params: &ScorerParams,
    examples: &[Example],
    cfg: &StageConfig,
) -> Result<(ScorerParams, StageTrace)> {
    run_stage(params, examples, cfg, Stage::Psft, &[&ntp_step])
}

/// List-wise DPO against a frozen copy of `params`.
pub fn train_dpo(params: &ScorerParams, examples: &[Example], cfg: &StageConfig) -> Result<(ScorerParams, StageTrace)> {
    cfg.validate()?;
    let usable: Vec<(&Example, Vec<f64>)> = examples
        .iter()
        .filter(|ex| !ex.negatives.is_empty())
        .map(|ex| Ok((ex, reference_logprobs(params, &ex.input, ex.target, &ex.negatives)?)))
        .collect::<Result<_>>()?;
    let (beta, anchor) = (cfg.dpo_beta, cfg.dpo_anchor);
    let step = |p: &ScorerParams, (ex, rl): &(&Example, Vec<f64>), scale: f64, g: &mut ScorerParams| {
        let mut v = dpo_accumulate(p, &ex.input, ex.target, &ex.negatives, rl, beta, scale, g)?;
        if anchor != 0.0 {
            v += anchor * p.ntp_accumulate(&ex.input, ex.target, anchor * scale, g)?;
        }
        Ok(v)
    };
    run_stage(params, &usable, cfg, Stage::Dpo, &[&step])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{numgrad, rel_error};
    use rand::Rng;

    fn toy() -> (ScorerParams, TokenMatrix) {
        let cfg = ScorerConfig {
            input_dim: 3,
            levels: vec![3, 2],
            n_categories: 2,
            d_s: 4,
            h_s: 5,
        };
        let p = ScorerParams::new(cfg, 3).unwrap();
        let mut rng = rng_for(11, 0);
        let toks: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        (p, TokenMatrix::new(3, toks).unwrap())
    }

    fn user() -> UserContext {
        UserContext {
            long_term_sid: Some(SemanticId(vec![2, 1])),
            short_term_sids: vec![SemanticId(vec![0, 1]), SemanticId(vec![1, 0])],
            scene_id: 1,
        }
    }

    #[test]
    fn zero_heads_give_uniform_and_ln_cross_entropy() {
        let cfg = ScorerConfig::new(4, vec![8, 8, 8, 4, 4], 3);
        let mut p = ScorerParams::new(cfg, 1).unwrap();
        for h in p.head_out.iter_mut() {
            h.w.fill(0.0);
            h.b.fill(0.0);
        }
        let t = TokenMatrix::new(4, vec![1.0, 0.5, -0.2, 0.3, 0.1, 0.0, 0.7, -1.0]).unwrap();
        let input = ScorerInput::image(&t);
        let st = p.prepare(&input).unwrap();
        assert_eq!(p.score_next(&st, &[]).unwrap(), vec![0.125; 8]);
        let target = SemanticId(vec![1, 2, 3, 0, 1]);
        let (v, _) = p.ntp_loss(&input, &target).unwrap();
        assert!((v - (3.0 * 8f64.ln() + 2.0 * 4f64.ln())).abs() < 1e-12);
        assert!((v - 9.0109).abs() < 1e-4);
    }

    #[test]
    fn single_code_levels_cost_nothing() {
        let cfg = ScorerConfig::new(2, vec![1, 1, 1], 1);
        let p = ScorerParams::new(cfg, 1).unwrap();
        let t = TokenMatrix::new(2, vec![1.0, 2.0]).unwrap();
        let (v, _) = p.ntp_loss(&ScorerInput::image(&t), &SemanticId(vec![0, 0, 0])).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn hand_computed_two_code_toy() {
        let cfg = ScorerConfig {
            input_dim: 2,
            levels: vec![2],
            n_categories: 1,
            d_s: 2,
            h_s: 2,
        };
        let mut p = ScorerParams::new(cfg, 0).unwrap();
        p.scale(0.0);
        p.query_proj.w = vec![1.0, 0.0, 0.0, 1.0];
        p.head_hidden[0].w = vec![1.0, 0.0, 0.0, 1.0];
        p.head_out[0].w = vec![1.0, 0.0, 0.0, 1.0];
        // One token (3, 4): x = (0.6, 0.8); with zero attention the state passes straight through.
        let t = TokenMatrix::new(2, vec![3.0, 4.0]).unwrap();
        let st = p.prepare(&ScorerInput::image(&t)).unwrap();
        let probs = p.score_next(&st, &[]).unwrap();
        let p0 = 1.0 / (1.0 + 0.2f64.exp());
        assert!((probs[0] - p0).abs() < 1e-15);
        assert!((probs[1] - (1.0 - p0)).abs() < 1e-15);
    }

    #[test]
    fn prefix_at_depth_is_rejected() {
        let (p, t) = toy();
        let st = p.prepare(&ScorerInput::image(&t)).unwrap();
        assert!(p.score_next(&st, &[0, 1]).is_err());
    }

    #[test]
    fn cached_decoding_matches_teacher_forcing() {
        let (p, t) = toy();
        let u = user();
        let q = SemanticId(vec![1, 1]);
        let input = ScorerInput {
            tokens: &t,
            query_sid: Some(&q),
            user: Some(&u),
        };
        let sid = SemanticId(vec![2, 0]);
        let tf = p.teacher_forward(&input, &sid).unwrap();
        let st = p.prepare(&input).unwrap();
        let mut lp = 0.0;
        for l in 0..2 {
            let probs = p.score_next(&st, &sid.0[..l]).unwrap();
            lp += probs[sid.0[l] as usize].ln();
            for (a, b) in p.next_logits(&st, &sid.0[..l]).unwrap().iter().zip(tf.logits(l)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!((lp - tf.logprob(&sid)).abs() < 1e-12);
    }

    #[test]
    fn short_term_order_does_not_matter() {
        let (p, t) = toy();
        let u = user();
        let mut v = u.clone();
        v.short_term_sids.reverse();
        let a = p.prepare(&ScorerInput { tokens: &t, query_sid: None, user: Some(&u) }).unwrap();
        let b = p.prepare(&ScorerInput { tokens: &t, query_sid: None, user: Some(&v) }).unwrap();
        assert_eq!(p.score_next(&a, &[]).unwrap(), p.score_next(&b, &[]).unwrap());
    }

    #[test]
    fn ntp_and_category_gradients_match_numgrad() {
        let (p, t) = toy();
        let u = user();
        let q = SemanticId(vec![0, 1]);
        let input = ScorerInput {
            tokens: &t,
            query_sid: Some(&q),
            user: Some(&u),
        };
        let target = SemanticId(vec![1, 1]);
        let (_, g) = p.ntp_loss(&input, &target).unwrap();
        let num = numgrad(
            |w| {
                let mut q = p.clone();
                q.assign_flat(w);
                q.ntp_loss(&input, &target).unwrap().0
            },
            &p.flatten(),
            1e-6,
        )
        .unwrap();
        assert!(rel_error(&g.flatten(), &num, 1e-8) < 1e-4);

        let (_, g) = p.category_loss(&input, 1).unwrap();
        let num = numgrad(
            |w| {
                let mut q = p.clone();
                q.assign_flat(w);
                q.category_loss(&input, 1).unwrap().0
            },
            &p.flatten(),
            1e-6,
        )
        .unwrap();
        assert!(rel_error(&g.flatten(), &num, 1e-8) < 1e-4);
    }

    #[test]
    fn dpo_closed_form_and_gradient() {
        let (p, t) = toy();
        let input = ScorerInput::image(&t);
        let pos = SemanticId(vec![0, 1]);
        let negs = [SemanticId(vec![1, 0]), SemanticId(vec![2, 1]), SemanticId(vec![2, 0])];
        for m in 1..=3 {
            let n: Vec<&SemanticId> = negs[..m].iter().collect();
            let (v, _) = dpo_loss(&p, &p, &input, &pos, &n, 0.1).unwrap();
            assert!((v - (1.0 + m as f64).ln()).abs() < 1e-12);
        }
        let mut policy = p.clone();
        let mut rng = rng_for(5, 0);
        for w in policy.tensors_mut() {
            w.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let n: Vec<&SemanticId> = negs.iter().collect();
        let (_, g) = dpo_loss(&policy, &p, &input, &pos, &n, 0.7).unwrap();
        let num = numgrad(
            |w| {
                let mut q = policy.clone();
                q.assign_flat(w);
                dpo_loss(&q, &p, &input, &pos, &n, 0.7).unwrap().0
            },
            &policy.flatten(),
            1e-6,
        )
        .unwrap();
        assert!(rel_error(&g.flatten(), &num, 1e-8) < 1e-4);
        assert!(dpo_loss(&p, &p, &input, &pos, &[], 0.1).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_keeps_stage_and_parent() {
        let (p, _) = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scorer_sft.bin");
        let h = save_checkpoint(&p, Stage::Sft, Some("abc".into()), &path).unwrap();
        let (q, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!(meta.stage, Stage::Sft);
        assert_eq!(meta.parent_hash.as_deref(), Some("abc"));
        assert_eq!(h, blob::sha256_file(&path).unwrap());
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (p, t) = toy();
        let target = SemanticId(vec![1, 0]);
        let ex = vec![Example {
            input: ScorerInput::image(&t),
            target: &target,
            category: 0,
            negatives: Vec::new(),
        }];
        let cfg = StageConfig {
            epochs: 2,
            lr: 0.0,
            ..StageConfig::default()
        };
        let (q, trace) = train_pretrain(&p, &ex, &cfg).unwrap();
        assert_eq!(q, p);
        assert_eq!(trace.epoch_loss.len(), 2);
    }
}
