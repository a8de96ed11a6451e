//! Encoding-quality and retrieval metrics: ICO, QAS, HR@K, MRR@K.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Catalog;
use crate::error::{Error, Result};
use crate::math;
use crate::quantize::tokenizer::Tokenizer;
use crate::quantize::{SemanticId, SidTable};

/// One query's ranked candidates and the item it should find.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: u64,
    pub ranked_ids: Vec<u32>,
    pub target_id: u32,
}

impl RankedList {
    pub fn new(query_id: u64, ranked_ids: Vec<u32>, target_id: u32) -> Result<Self> {
        let mut seen = BTreeSet::new();
        if let Some(d) = ranked_ids.iter().find(|&&i| !seen.insert(i)) {
            return Err(Error::InvalidConfig(format!("query {query_id} ranks item {d} twice")));
        }
        Ok(Self {
            query_id,
            ranked_ids,
            target_id,
        })
    }

    /// 1-based rank of the target, if present.
    pub fn rank(&self) -> Option<usize> {
        self.ranked_ids.iter().position(|&i| i == self.target_id).map(|p| p + 1)
    }
}

fn check(lists: &[RankedList], k: usize) -> Result<()> {
    if lists.is_empty() {
        return Err(Error::Empty("no ranked lists".into()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    Ok(())
}

pub fn hr_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    check(lists, k)?;
    let hits = lists.iter().filter(|l| l.rank().is_some_and(|r| r <= k)).count();
    Ok(hits as f64 / lists.len() as f64)
}

/// Mean of `1/rank`, counting ranks beyond `k` as zero.
pub fn mrr_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    check(lists, k)?;
    let total: f64 = lists
        .iter()
        .filter_map(|l| l.rank().filter(|&r| r <= k))
        .map(|r| 1.0 / r as f64)
        .sum();
    Ok(total / lists.len() as f64)
}

/// HR and MRR at each requested cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub hr: BTreeMap<usize, f64>,
    pub mrr: BTreeMap<usize, f64>,
}

impl RetrievalScores {
    pub fn from_lists(lists: &[RankedList], ks: &[usize]) -> Result<Self> {
        let mut hr = BTreeMap::new();
        let mut mrr = BTreeMap::new();
        for &k in ks {
            hr.insert(k, hr_at_k(lists, k)?);
            mrr.insert(k, mrr_at_k(lists, k)?);
        }
        Ok(Self { hr, mrr })
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn mrr(&self, k: usize) -> f64 {
        self.mrr.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// Items per distinct SID.
pub fn ico_of(sids: &[SemanticId]) -> Result<f64> {
    if sids.is_empty() {
        return Err(Error::Empty("no SIDs".into()));
    }
    let distinct: BTreeSet<&SemanticId> = sids.iter().collect();
    Ok(sids.len() as f64 / distinct.len() as f64)
}

/// ICO over each item's canonical SID.
pub fn ico(table: &SidTable) -> Result<f64> {
    let sids: Vec<SemanticId> = table.canonical_sids().into_iter().map(|(_, s)| s).collect();
    ico_of(&sids)
}

/// Fraction of each level's entries used by at least one SID.
pub fn codebook_utilization(sids: &[SemanticId], levels: &[usize]) -> Vec<f64> {
    levels
        .iter()
        .enumerate()
        .map(|(l, &k)| {
            let used: BTreeSet<u16> = sids.iter().filter_map(|s| s.0.get(l).copied()).collect();
            used.len() as f64 / k as f64
        })
        .collect()
}

/// The first `limit` candidates by descending cosine to `query`; ties go to the smaller id.
pub fn rank_by_cosine(query: &[f64], candidates: &[(u32, Vec<f64>)], limit: usize) -> Vec<u32> {
    let q = math::normalized(query);
    let mut scored: Vec<(f64, u32)> = candidates
        .iter()
        .map(|(id, v)| (math::dot(&q, v) / math::norm(v).max(1e-300), *id))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(limit).map(|(_, id)| id).collect()
}

/// Exact cosine search of each query over `items`, scored against its target.
pub fn qas_from_reps(
    items: &[(u32, Vec<f64>)],
    queries: &[(u32, Vec<f64>)],
    ks: &[usize],
) -> Result<RetrievalScores> {
    let limit = ks.iter().copied().max().unwrap_or(1);
    let lists = queries
        .iter()
        .enumerate()
        .map(|(qi, (target, q))| RankedList::new(qi as u64, rank_by_cosine(q, items, limit), *target))
        .collect::<Result<Vec<_>>>()?;
    RetrievalScores::from_lists(&lists, ks)
}

/// A held-out query image and the item it depicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub item: u32,
    pub view: usize,
    pub target: u32,
}

/// The held-out view of every item, paired with that item.
pub fn eval_pairs(catalog: &Catalog) -> Vec<EvalPair> {
    catalog
        .items
        .iter()
        .map(|it| EvalPair {
            item: it.item_id,
            view: catalog.eval_view(),
            target: it.item_id,
        })
        .collect()
}

/// Quantized ANN score: items are represented by the reconstruction of their canonical view,
/// queries by the reconstruction of their own image, and search is exact over the catalog.
pub fn qas(catalog: &Catalog, tok: &Tokenizer, pairs: &[EvalPair], ks: &[usize]) -> Result<RetrievalScores> {
    let items = catalog
        .items
        .iter()
        .map(|it| Ok((it.item_id, tok.encode_view(catalog, it.item_id, 0)?.recon)))
        .collect::<Result<Vec<_>>>()?;
    let queries = pairs
        .iter()
        .map(|p| Ok((p.target, tok.encode_view(catalog, p.item, p.view)?.recon)))
        .collect::<Result<Vec<_>>>()?;
    qas_from_reps(&items, &queries, ks)
}

/// One tokenizer's row of the encoding comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeReport {
    pub method: String,
    pub ico: f64,
    pub qas_hr: BTreeMap<usize, f64>,
    pub qas_mrr: BTreeMap<usize, f64>,
    pub codebook_utilization: Vec<f64>,
    /// Generative-retrieval scores, when a retriever was trained on these SIDs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gr: Option<RetrievalScores>,
}

impl CodeReport {
    pub fn build(
        catalog: &Catalog,
        tok: &Tokenizer,
        table: &SidTable,
        pairs: &[EvalPair],
        ks: &[usize],
    ) -> Result<Self> {
        let sids: Vec<SemanticId> = table.canonical_sids().into_iter().map(|(_, s)| s).collect();
        let q = qas(catalog, tok, pairs, ks)?;
        Ok(Self {
            method: tok.name.clone(),
            ico: ico_of(&sids)?,
            qas_hr: q.hr,
            qas_mrr: q.mrr,
            codebook_utilization: codebook_utilization(&sids, &table.levels),
            gr: None,
        })
    }
}

pub fn write_code_reports(path: &Path, reports: &[CodeReport]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(reports)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sid(c: &[u16]) -> SemanticId {
        SemanticId(c.to_vec())
    }

    #[test]
    fn ranked_list_definitions() {
        let l = RankedList::new(0, vec![3, 1, 2], 1).unwrap();
        let ls = [l];
        assert_eq!(hr_at_k(&ls, 1).unwrap(), 0.0);
        assert_eq!(hr_at_k(&ls, 4).unwrap(), 1.0);
        assert_eq!(mrr_at_k(&ls, 4).unwrap(), 0.5);
        assert_eq!(mrr_at_k(&ls, 1).unwrap(), 0.0);

        let absent = [RankedList::new(1, vec![3, 2], 9).unwrap()];
        assert_eq!(hr_at_k(&absent, 10).unwrap(), 0.0);
        assert_eq!(mrr_at_k(&absent, 10).unwrap(), 0.0);

        let two = [
            RankedList::new(0, vec![5, 6], 5).unwrap(),
            RankedList::new(1, vec![1, 2, 3, 4], 4).unwrap(),
        ];
        assert_eq!(mrr_at_k(&two, 4).unwrap(), 0.625);
    }

    #[test]
    fn duplicates_and_empty_are_errors() {
        assert!(RankedList::new(0, vec![1, 1], 1).is_err());
        assert!(hr_at_k(&[], 1).is_err());
        assert!(ico_of(&[]).is_err());
    }

    #[test]
    fn ico_counts() {
        let (a, b, c) = (sid(&[0, 0]), sid(&[0, 1]), sid(&[1, 0]));
        let s = vec![a.clone(), a, b, c.clone(), c.clone(), c];
        assert_eq!(ico_of(&s).unwrap(), 2.0);
        assert_eq!(ico_of(&[sid(&[1]), sid(&[2])]).unwrap(), 1.0);
        assert_eq!(ico_of(&vec![sid(&[3]); 7]).unwrap(), 7.0);
    }

    #[test]
    fn utilization_per_level() {
        let s = [sid(&[0, 1]), sid(&[0, 3]), sid(&[1, 3])];
        assert_eq!(codebook_utilization(&s, &[2, 4]), vec![1.0, 0.5]);
    }

    #[test]
    fn qas_three_item_fixture() {
        // Cosines to q1 = (1, 0): item0 1.0, item1 0.8, item2 0.0.
        // Cosines to q2 = (0.6, 0.8): item0 0.6, item1 0.96, item2 0.8.
        let items = vec![(0, vec![1.0, 0.0]), (1, vec![0.8, 0.6]), (2, vec![0.0, 2.0])];
        let queries = vec![(1, vec![1.0, 0.0]), (2, vec![0.6, 0.8])];
        let s = qas_from_reps(&items, &queries, &[1, 2, 4]).unwrap();
        // Target 1 ranks second for q1; target 2 ranks second for q2.
        assert_eq!(s.hr(1), 0.0);
        assert_eq!(s.hr(2), 1.0);
        assert_eq!(s.mrr(4), 0.5);
    }

    #[test]
    fn cosine_ties_prefer_smaller_id() {
        let items = vec![(7, vec![1.0, 0.0]), (3, vec![2.0, 0.0])];
        assert_eq!(rank_by_cosine(&[1.0, 0.0], &items, 2), vec![3, 7]);
    }
}
