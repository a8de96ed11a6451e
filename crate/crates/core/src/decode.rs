//! Trie-constrained beam search over valid SIDs, conversion-score ranking within a SID, and
//! end-to-end retrieval.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{BizStats, Catalog};
use crate::error::{Error, Result};
use crate::genmodel::{QueryState, ScorerInput, ScorerParams};
use crate::math;
use crate::quantize::{SemanticId, SidTable};

#[derive(Debug, Clone, PartialEq, Default)]
struct TrieNode {
    /// Sorted by code.
    children: Vec<(u16, usize)>,
    items: Vec<u32>,
}

/// Prefix tree of every valid SID; leaves hold the items sharing that SID.
#[derive(Debug, Clone, PartialEq)]
pub struct SidTrie {
    depth: usize,
    nodes: Vec<TrieNode>,
    n_sids: usize,
}

impl SidTrie {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            nodes: vec![TrieNode::default()],
            n_sids: 0,
        }
    }

    pub fn insert(&mut self, sid: &SemanticId, item: u32) -> Result<()> {
        if sid.len() != self.depth {
            return Err(Error::Shape(format!("SID of length {} in a depth-{} trie", sid.len(), self.depth)));
        }
        let mut node = 0;
        for &c in sid.codes() {
            node = match self.nodes[node].children.binary_search_by_key(&c, |e| e.0) {
                Ok(i) => self.nodes[node].children[i].1,
                Err(i) => {
                    let id = self.nodes.len();
                    self.nodes.push(TrieNode::default());
                    self.nodes[node].children.insert(i, (c, id));
                    id
                }
            };
        }
        let items = &mut self.nodes[node].items;
        if items.is_empty() {
            self.n_sids += 1;
        }
        if let Err(i) = items.binary_search(&item) {
            items.insert(i, item);
        }
        Ok(())
    }

    /// Trie over every item's canonical SID.
    pub fn build(table: &SidTable) -> Result<Self> {
        let sids = table.canonical_sids();
        if sids.is_empty() {
            return Err(Error::Empty("SID table has no canonical entries".into()));
        }
        let mut t = Self::new(table.levels.len());
        for (item, sid) in &sids {
            t.insert(sid, *item)?;
        }
        Ok(t)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of distinct SIDs.
    pub fn len(&self) -> usize {
        self.n_sids
    }

    pub fn is_empty(&self) -> bool {
        self.n_sids == 0
    }

    fn walk(&self, prefix: &[u16]) -> Option<usize> {
        let mut node = 0;
        for &c in prefix {
            let ch = &self.nodes[node].children;
            node = ch[ch.binary_search_by_key(&c, |e| e.0).ok()?].1;
        }
        Some(node)
    }

    /// Valid next codes after `prefix`, ascending.
    pub fn children(&self, prefix: &[u16]) -> Vec<u16> {
        self.walk(prefix)
            .map(|n| self.nodes[n].children.iter().map(|e| e.0).collect())
            .unwrap_or_default()
    }

    pub fn contains(&self, sid: &SemanticId) -> bool {
        sid.len() == self.depth && self.walk(sid.codes()).is_some()
    }

    /// Items sharing `sid`, ascending by id.
    pub fn items(&self, sid: &SemanticId) -> &[u32] {
        match self.walk(sid.codes()) {
            Some(n) if sid.len() == self.depth => &self.nodes[n].items,
            _ => &[],
        }
    }

    /// All SIDs in lexicographic order.
    pub fn sids(&self) -> Vec<SemanticId> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, prefix)) = stack.pop() {
            if prefix.len() == self.depth {
                out.push(SemanticId(prefix));
                continue;
            }
            for &(c, child) in self.nodes[node].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(c);
                stack.push((child, p));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub prefix: Vec<u16>,
    pub logprob: f64,
}

/// Supplies per-level logits for a prefix. Lets the search run on fixed toy distributions.
pub trait NextLogits {
    fn logits(&self, prefix: &[u16]) -> Result<Vec<f64>>;
}

/// A scorer bound to one prepared query.
pub struct ScorerQuery<'a> {
    pub params: &'a ScorerParams,
    pub state: QueryState,
}

impl<'a> ScorerQuery<'a> {
    pub fn new(params: &'a ScorerParams, input: &ScorerInput) -> Result<Self> {
        Ok(Self {
            params,
            state: params.prepare(input)?,
        })
    }
}

impl NextLogits for ScorerQuery<'_> {
    fn logits(&self, prefix: &[u16]) -> Result<Vec<f64>> {
        self.params.next_logits(&self.state, prefix)
    }
}

/// Log-probabilities over the valid children only.
fn masked_logprobs(logits: &[f64], valid: &[u16]) -> Result<Vec<f64>> {
    let sel = valid
        .iter()
        .map(|&c| {
            logits
                .get(c as usize)
                .copied()
                .ok_or_else(|| Error::Shape(format!("trie code {c} exceeds scorer level size {}", logits.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(math::log_softmax(&sel))
}

/// Higher log-prob first; ties go to the lexicographically smaller prefix.
fn hyp_order(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.logprob.total_cmp(&a.logprob).then_with(|| a.prefix.cmp(&b.prefix))
}

/// Constrained beam search; returns at most `beam` complete SIDs, best first.
pub fn beam_search(model: &impl NextLogits, trie: &SidTrie, beam: usize) -> Result<Vec<(SemanticId, f64)>> {
    if beam == 0 {
        return Err(Error::InvalidConfig("beam size must be at least 1".into()));
    }
    if trie.is_empty() {
        return Err(Error::Empty("trie holds no SIDs".into()));
    }
    let mut beams = vec![BeamHypothesis {
        prefix: Vec::new(),
        logprob: 0.0,
    }];
    for _ in 0..trie.depth() {
        let mut next = Vec::new();
        for h in &beams {
            let valid = trie.children(&h.prefix);
            let lp = masked_logprobs(&model.logits(&h.prefix)?, &valid)?;
            for (&c, l) in valid.iter().zip(lp) {
                let mut prefix = h.prefix.clone();
                prefix.push(c);
                next.push(BeamHypothesis {
                    prefix,
                    logprob: h.logprob + l,
                });
            }
        }
        next.sort_by(hyp_order);
        next.truncate(beam);
        beams = next;
    }
    Ok(beams.into_iter().map(|h| (SemanticId(h.prefix), h.logprob)).collect())
}

/// Every SID in the trie ranked by its teacher-forced masked-renormalized log-prob, using the
/// same per-level arithmetic as the beam search.
pub fn enumerate_ranked(model: &impl NextLogits, trie: &SidTrie) -> Result<Vec<(SemanticId, f64)>> {
    let mut scored = Vec::with_capacity(trie.len());
    for sid in trie.sids() {
        let mut lp = 0.0;
        for l in 0..sid.len() {
            let prefix = &sid.codes()[..l];
            let valid = trie.children(prefix);
            let masked = masked_logprobs(&model.logits(prefix)?, &valid)?;
            let pos = valid.binary_search(&sid.codes()[l]).expect("SID comes from the trie");
            lp += masked[pos];
        }
        scored.push(BeamHypothesis {
            prefix: sid.0,
            logprob: lp,
        });
    }
    scored.sort_by(hyp_order);
    Ok(scored.into_iter().map(|h| (SemanticId(h.prefix), h.logprob)).collect())
}

/// Weights of the conversion score `ω₁·clicks + ω₂·GMV + ω₃·orders`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvWeights {
    pub clicks: f64,
    pub gmv: f64,
    pub orders: f64,
}

impl Default for ConvWeights {
    fn default() -> Self {
        Self {
            clicks: 1.0,
            gmv: 0.001,
            orders: 5.0,
        }
    }
}

impl ConvWeights {
    pub fn new(clicks: f64, gmv: f64, orders: f64) -> Result<Self> {
        let w = Self { clicks, gmv, orders };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.clicks, self.gmv, self.orders];
        if ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || ws.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidConfig(format!("bad conversion weights {ws:?}")));
        }
        Ok(())
    }

    pub fn score(&self, b: &BizStats) -> f64 {
        self.clicks * b.clicks_30d as f64 + self.gmv * b.gmv_30d + self.orders * b.orders_30d as f64
    }
}

impl FromStr for ConvWeights {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad weight {p:?}"))))
            .collect::<Result<_>>()?;
        match v[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(Error::InvalidConfig(format!("expected three weights, got {s:?}"))),
        }
    }
}

/// Orders items sharing a SID by descending conversion score, then ascending id.
pub fn rank_within_code(items: &[u32], biz: impl Fn(u32) -> BizStats, w: &ConvWeights) -> Vec<(u32, f64)> {
    let mut scored: Vec<(u32, f64)> = items.iter().map(|&i| (i, w.score(&biz(i)))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

/// Flags each candidate whose cosine to the query falls below `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub cosines: Vec<f64>,
    pub low_confidence: Vec<bool>,
    /// Largest cosine among the first `k` candidates.
    pub max_top_k: f64,
}

pub fn confidence_check(query: &[f64], candidates: &[Vec<f64>], threshold: f64, k: usize) -> Result<ConfidenceReport> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} outside [-1, 1]")));
    }
    let cosines: Vec<f64> = candidates.iter().map(|c| math::cosine(query, c)).collect();
    let low_confidence = cosines.iter().map(|&c| c < threshold).collect();
    let max_top_k = cosines.iter().take(k).copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ConfidenceReport {
        cosines,
        low_confidence,
        max_top_k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrieveConfig {
    pub beam: usize,
    pub top_n: usize,
    pub weights: ConvWeights,
    /// Cosine below which a retrieved item is flagged; `None` disables the check.
    pub confidence_threshold: Option<f64>,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            top_n: 10,
            weights: ConvWeights::default(),
            confidence_threshold: None,
        }
    }
}

/// One line of `retrieval.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub query_id: u64,
    pub rank: usize,
    pub item_id: u32,
    pub sid: String,
    pub logprob: f64,
    pub s_conv: f64,
    pub low_confidence: bool,
}

/// Beam search, then each SID's items in conversion-score order, until `top_n` items.
///
/// `confidence` maps an item id to the cosine between the query and that item's quantized
/// reconstruction; it is only consulted when a threshold is set.
pub fn retrieve(
    query_id: u64,
    model: &impl NextLogits,
    trie: &SidTrie,
    catalog: &Catalog,
    cfg: &RetrieveConfig,
    confidence: Option<&dyn Fn(u32) -> f64>,
) -> Result<Vec<Retrieved>> {
    if cfg.top_n == 0 {
        return Err(Error::InvalidConfig("top_n must be at least 1".into()));
    }
    cfg.weights.validate()?;
    let mut out = Vec::with_capacity(cfg.top_n);
    for (sid, lp) in beam_search(model, trie, cfg.beam)? {
        let text = sid.to_string();
        for (item, s) in rank_within_code(trie.items(&sid), |i| catalog.item(i).biz.clone(), &cfg.weights) {
            if out.len() == cfg.top_n {
                return Ok(out);
            }
            let low = match (cfg.confidence_threshold, confidence) {
                (Some(t), Some(f)) => f(item) < t,
                _ => false,
            };
            out.push(Retrieved {
                query_id,
                rank: out.len() + 1,
                item_id: item,
                sid: text.clone(),
                logprob: lp,
                s_conv: s,
                low_confidence: low,
            });
        }
    }
    Ok(out)
}

pub fn write_jsonl(w: &mut impl Write, rows: &[Retrieved]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Fixed per-prefix distributions, for tests and worked examples.
#[derive(Debug, Clone, Default)]
pub struct TableModel {
    pub probs: BTreeMap<Vec<u16>, Vec<f64>>,
}

impl NextLogits for TableModel {
    fn logits(&self, prefix: &[u16]) -> Result<Vec<f64>> {
        self.probs
            .get(prefix)
            .map(|p| p.iter().map(|v| v.ln()).collect())
            .ok_or_else(|| Error::Shape(format!("no distribution for prefix {prefix:?}")))
    }
}
