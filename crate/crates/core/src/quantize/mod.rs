//! Residual quantization into hierarchical semantic IDs.
//!
//! Shallow levels are residual codebooks (fit by RQ-KMeans, refined with EMA updates); deep
//! levels quantize the final residual, optionally joined with business statistics, with OPQ.
//! [`fsq`] and [`tokenizer`] provide the baselines compared against.

pub mod fsq;
pub mod opq;
pub mod tokenizer;
pub mod vrq;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::BizStats;
use crate::error::{Error, Result};
use crate::kmeans::{self, KMeansConfig};
use crate::math;

pub use opq::{opq_encode, opq_fit, OpqConfig, OpqParams};
pub use tokenizer::{SidEncoder, SidTable};
pub use vrq::{train_vrq, CodebookStack, VrqConfig};

/// Fixed-length tuple of codes, ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId(pub Vec<u16>);

impl SemanticId {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn codes(&self) -> &[u16] {
        &self.0
    }

    pub fn validate(&self, levels: &[usize]) -> Result<()> {
        if self.0.len() != levels.len() {
            return Err(Error::Shape(format!(
                "SID has {} codes, expected {}",
                self.0.len(),
                levels.len()
            )));
        }
        for (l, (&c, &k)) in self.0.iter().zip(levels).enumerate() {
            if c as usize >= k {
                return Err(Error::Shape(format!("code {c} at level {l} exceeds {k}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for SemanticId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<u16>()
                    .map_err(|_| Error::InvalidConfig(format!("bad code {p:?} in SID {s:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(SemanticId)
    }
}

/// Codebook sizes: shallow residual levels, then deep (product-quantized) levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub shallow: Vec<usize>,
    pub deep: Vec<usize>,
}

impl LevelSpec {
    pub fn desk() -> Self {
        Self {
            shallow: vec![8, 8, 8],
            deep: vec![4, 4],
        }
    }

    pub fn all(&self) -> Vec<usize> {
        self.shallow.iter().chain(&self.deep).copied().collect()
    }

    pub fn depth(&self) -> usize {
        self.shallow.len() + self.deep.len()
    }

    /// Number of distinct SIDs the layout can express.
    pub fn capacity(&self) -> f64 {
        self.all().iter().map(|&k| k as f64).product()
    }
}

impl FromStr for LevelSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parse = |part: &str| -> Result<Vec<usize>> {
            if part.trim().is_empty() {
                return Ok(Vec::new());
            }
            part.split(',')
                .map(|p| match p.trim().parse::<usize>() {
                    Ok(k) if k >= 1 && k <= u16::MAX as usize => Ok(k),
                    _ => Err(Error::InvalidConfig(format!("bad level size {p:?} in {s:?}"))),
                })
                .collect()
        };
        let (shallow, deep) = match s.split_once('|') {
            Some((a, b)) => (parse(a)?, parse(b)?),
            None => (parse(s)?, Vec::new()),
        };
        if shallow.is_empty() {
            return Err(Error::InvalidConfig(format!("no shallow levels in {s:?}")));
        }
        Ok(Self { shallow, deep })
    }
}

impl fmt::Display for LevelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let j = |v: &[usize]| v.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",");
        if self.deep.is_empty() {
            write!(f, "{}", j(&self.shallow))
        } else {
            write!(f, "{}|{}", j(&self.shallow), j(&self.deep))
        }
    }
}

/// One level's codebook: `K × d` entries.
pub type Codebook = Vec<Vec<f64>>;

/// Shallow residual encoding of one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult {
    pub codes: Vec<u16>,
    /// `r_0 = f, …, r_{L_rq}`.
    pub residuals: Vec<Vec<f64>>,
    /// `f̂^{(l)} = Σ_{i ≤ l} e_{c_i}^{(i)}`.
    pub recon_per_level: Vec<Vec<f64>>,
}

impl QuantResult {
    pub fn last_residual(&self) -> &[f64] {
        self.residuals.last().expect("residual chain is never empty")
    }

    pub fn recon(&self) -> Vec<f64> {
        self.recon_per_level
            .last()
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.residuals[0].len()])
    }
}

/// Fits each shallow level by k-means on the residuals left by the previous levels.
pub fn rq_kmeans_fit(vectors: &[Vec<f64>], level_sizes: &[usize], seed: u64) -> Result<Vec<Codebook>> {
    if vectors.is_empty() {
        return Err(Error::Empty("no vectors to fit".into()));
    }
    let mut residuals = vectors.to_vec();
    let mut books = Vec::with_capacity(level_sizes.len());
    for (l, &k) in level_sizes.iter().enumerate() {
        if residuals.len() < k {
            return Err(Error::Infeasible(format!(
                "{} vectors cannot fill {k} entries at level {l}",
                residuals.len()
            )));
        }
        let km = kmeans::kmeans(&residuals, k, seed, level_stream(l), KMeansConfig::default())?;
        for (r, &a) in residuals.iter_mut().zip(&km.assignments) {
            for (x, c) in r.iter_mut().zip(&km.centroids[a]) {
                *x -= c;
            }
        }
        books.push(km.centroids);
    }
    Ok(books)
}

/// RNG stream used to seed level (or subspace) `l` so related fits share initialization.
pub(crate) fn level_stream(l: usize) -> u64 {
    1000 + l as u64
}

/// Greedy residual encoding: `c_l = argmin_k ‖r_l − e_k‖`, `r_{l+1} = r_l − e_{c_l}`.
pub fn rq_encode<B: AsRef<[Vec<f64>]>>(f: &[f64], books: &[B]) -> Result<QuantResult> {
    let d = f.len();
    let mut codes = Vec::with_capacity(books.len());
    let mut residuals = Vec::with_capacity(books.len() + 1);
    let mut recon_per_level = Vec::with_capacity(books.len());
    residuals.push(f.to_vec());
    let mut recon = vec![0.0; d];
    for book in books {
        let book = book.as_ref();
        if book.is_empty() || book[0].len() != d {
            return Err(Error::Shape("codebook width differs from input".into()));
        }
        let r = residuals.last().unwrap();
        let (c, _) = kmeans::nearest(book, r);
        let next: Vec<f64> = r.iter().zip(&book[c]).map(|(a, b)| a - b).collect();
        for (x, e) in recon.iter_mut().zip(&book[c]) {
            *x += e;
        }
        codes.push(c as u16);
        residuals.push(next);
        recon_per_level.push(recon.clone());
    }
    Ok(QuantResult {
        codes,
        residuals,
        recon_per_level,
    })
}

/// Recomputes the residual chain for `f` under fixed `codes`.
pub fn residual_chain<B: AsRef<[Vec<f64>]>>(f: &[f64], books: &[B], codes: &[u16]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(codes.len() + 1);
    out.push(f.to_vec());
    for (book, &c) in books.iter().zip(codes) {
        let r = out.last().unwrap();
        let next = r.iter().zip(&book.as_ref()[c as usize]).map(|(a, b)| a - b).collect();
        out.push(next);
    }
    out
}

/// Commitment loss `Σ_l ‖r_l − sg(e_{c_l})‖²` for fixed codes, with its gradient with respect to
/// the encoded vector `f` (every `r_l` moves one-for-one with `f`).
pub fn loss_commit<B: AsRef<[Vec<f64>]>>(f: &[f64], books: &[B], codes: &[u16]) -> (f64, Vec<f64>) {
    let chain = residual_chain(f, books, codes);
    let mut value = 0.0;
    let mut grad = vec![0.0; f.len()];
    for (l, (book, &c)) in books.iter().zip(codes).enumerate() {
        let e = &book.as_ref()[c as usize];
        for k in 0..f.len() {
            let diff = chain[l][k] - e[k];
            value += diff * diff;
            grad[k] += 2.0 * diff;
        }
    }
    (value, grad)
}

/// Hierarchical consistency `Σ_l ‖f̂_a^{(l)} − f̂_b^{(l)}‖²`.
///
/// Gradients use the straight-through surrogate `f̂^{(l)} + (f − sg(f))`, so they are
/// `±Σ_l 2(f̂_a^{(l)} − f̂_b^{(l)})` for the pre-quantization vectors `f_a` and `f_b`.
pub fn loss_hc(qa: &QuantResult, qb: &QuantResult) -> (f64, Vec<f64>, Vec<f64>) {
    let d = qa.residuals[0].len();
    let mut value = 0.0;
    let mut ga = vec![0.0; d];
    for (ra, rb) in qa.recon_per_level.iter().zip(&qb.recon_per_level) {
        for k in 0..d {
            let diff = ra[k] - rb[k];
            value += diff * diff;
            ga[k] += 2.0 * diff;
        }
    }
    let gb = ga.iter().map(|g| -g).collect();
    (value, ga, gb)
}

impl AsRef<[Vec<f64>]> for EmaCodebook {
    fn as_ref(&self) -> &[Vec<f64>] {
        &self.entries
    }
}

/// Codebook maintained by exponential moving averages of assigned vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaCodebook {
    pub entries: Codebook,
    pub counts: Vec<f64>,
    pub sums: Vec<Vec<f64>>,
    pub decay: f64,
}

impl EmaCodebook {
    /// Starts with unit counts so an entry equals its running mean from the first update.
    pub fn new(entries: Codebook, decay: f64) -> Self {
        Self {
            counts: vec![1.0; entries.len()],
            sums: entries.clone(),
            entries,
            decay,
        }
    }

    /// One EMA step from a batch of `(code, vector)` assignments.
    pub fn update(&mut self, assigned: &[(usize, &[f64])]) {
        let rho = self.decay;
        let k = self.entries.len();
        let d = self.entries.first().map_or(0, Vec::len);
        let mut n = vec![0.0; k];
        let mut s = vec![vec![0.0; d]; k];
        for &(c, x) in assigned {
            n[c] += 1.0;
            math::axpy(1.0, x, &mut s[c]);
        }
        for c in 0..k {
            self.counts[c] = rho * self.counts[c] + (1.0 - rho) * n[c];
            for j in 0..d {
                self.sums[c][j] = rho * self.sums[c][j] + (1.0 - rho) * s[c][j];
            }
            if self.counts[c] > 0.0 {
                for j in 0..d {
                    self.entries[c][j] = self.sums[c][j] / self.counts[c];
                }
            }
        }
    }

    /// Re-seeds entries whose usage fell below `threshold` from `candidates`, returning how
    /// many were restarted.
    pub fn restart_dead(
        &mut self,
        threshold: f64,
        candidates: &[Vec<f64>],
        rng: &mut impl rand::Rng,
    ) -> usize {
        if candidates.is_empty() {
            return 0;
        }
        let mut restarted = 0;
        for c in 0..self.entries.len() {
            if self.counts[c] < threshold {
                let pick = candidates[rng.random_range(0..candidates.len())].clone();
                self.entries[c] = pick.clone();
                self.sums[c] = pick;
                self.counts[c] = 1.0;
                restarted += 1;
            }
        }
        restarted
    }
}

/// Business features used for encoding: `log1p` of clicks, price and orders.
pub fn biz_features(b: &BizStats) -> [f64; 3] {
    [
        (b.clicks_30d as f64).ln_1p(),
        b.price.ln_1p(),
        (b.orders_30d as f64).ln_1p(),
    ]
}

/// Per-feature standardization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BizNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl BizNorm {
    pub fn fit(stats: &[BizStats]) -> Result<Self> {
        if stats.is_empty() {
            return Err(Error::Empty("no business statistics".into()));
        }
        let n = stats.len() as f64;
        let feats: Vec<[f64; 3]> = stats.iter().map(biz_features).collect();
        let mut mean = [0.0; 3];
        for f in &feats {
            for k in 0..3 {
                mean[k] += f[k] / n;
            }
        }
        let mut std = [0.0; 3];
        for f in &feats {
            for k in 0..3 {
                std[k] += (f[k] - mean[k]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Ok(Self { mean, std })
    }

    /// Standardized features; `None` stands for an unknown item and maps to the mean.
    pub fn apply(&self, b: Option<&BizStats>) -> [f64; 3] {
        match b {
            None => [0.0; 3],
            Some(b) => {
                let f = biz_features(b);
                [
                    (f[0] - self.mean[0]) / self.std[0],
                    (f[1] - self.mean[1]) / self.std[1],
                    (f[2] - self.mean[2]) / self.std[2],
                ]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng_for;
    use rand::Rng;

    #[test]
    fn level_spec_parses_and_prints() {
        let s: LevelSpec = "8,8,8|4,4".parse().unwrap();
        assert_eq!(s, LevelSpec::desk());
        assert_eq!(s.to_string(), "8,8,8|4,4");
        assert_eq!(s.depth(), 5);
        assert_eq!(s.capacity(), 8192.0);
        assert!("|4".parse::<LevelSpec>().is_err());
        assert!("8,0".parse::<LevelSpec>().is_err());
    }

    #[test]
    fn sid_roundtrips_through_text() {
        let s = SemanticId(vec![3, 0, 7, 1, 2]);
        assert_eq!(s.to_string().parse::<SemanticId>().unwrap(), s);
        assert!(s.validate(&[8, 8, 8, 4, 4]).is_ok());
        assert!(s.validate(&[8, 8, 4, 4, 4]).is_err());
    }

    #[test]
    fn one_entry_level_is_the_mean() {
        let v = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 3.0]];
        let books = rq_kmeans_fit(&v, &[1], 0).unwrap();
        assert_eq!(books[0][0], math::mean_rows(&v));
    }

    #[test]
    fn two_clouds_recover_their_means() {
        let mut rng = rng_for(3, 0);
        let mut pts = Vec::new();
        for center in [[-10.0, 0.0], [10.0, 5.0]] {
            for _ in 0..8 {
                pts.push(vec![
                    center[0] + rng.random_range(-0.5..0.5),
                    center[1] + rng.random_range(-0.5..0.5),
                ]);
            }
        }
        let books = rq_kmeans_fit(&pts, &[2], 1).unwrap();
        let mean_a = math::mean_rows(&pts[..8]);
        let mean_b = math::mean_rows(&pts[8..]);
        let mut got = books[0].clone();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!(math::sq_dist(&got[0], &mean_a).sqrt() < 1e-6);
        assert!(math::sq_dist(&got[1], &mean_b).sqrt() < 1e-6);
    }

    #[test]
    fn too_many_entries_is_infeasible() {
        let v = vec![vec![0.0], vec![1.0]];
        assert!(matches!(rq_kmeans_fit(&v, &[3], 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn encode_hand_cases() {
        let books = vec![vec![vec![0.0, 0.0], vec![10.0, 10.0]]];
        let q = rq_encode(&[1.0, 1.0], &books).unwrap();
        assert_eq!(q.codes, vec![0]);
        assert_eq!(q.residuals[1], vec![1.0, 1.0]);

        let l0 = vec![vec![5.0, 5.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -3.0]];
        let l1 = vec![vec![1.0, 1.0], vec![0.0, 0.0]];
        let q = rq_encode(&[2.0, -3.0], &[l0, l1]).unwrap();
        assert_eq!(q.codes, vec![3, 1]);
        assert_eq!(q.residuals[1], vec![0.0, 0.0]);

        let tie = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert_eq!(rq_encode(&[0.0, 0.0], &[tie]).unwrap().codes, vec![0]);
    }

    #[test]
    fn commit_hand_cases() {
        let books = vec![vec![vec![0.0, 0.0], vec![5.0, 5.0]]];
        let (v, g) = loss_commit(&[1.0, 1.0], &books, &[0]);
        assert_eq!(v, 2.0);
        assert_eq!(g, vec![2.0, 2.0]);
        let chain = vec![vec![vec![1.0, 2.0]], vec![vec![0.5, 0.5]]];
        // Level 0 leaves (0.5, 0.5); level 1 matches it exactly.
        let (v, g) = loss_commit(&[1.5, 2.5], &chain, &[0, 0]);
        assert_eq!(v, 0.5);
        assert_eq!(g, vec![1.0, 1.0]);
    }

    #[test]
    fn hc_counts_shared_discrepancy() {
        let books = vec![
            vec![vec![0.0, 0.0]],
            vec![vec![0.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 2.0]],
        ];
        let qa = rq_encode(&[0.9, 0.1], &books).unwrap();
        let qb = rq_encode(&[0.0, 1.9], &books).unwrap();
        assert_eq!(qa.codes, vec![0, 0, 0]);
        assert_eq!(qb.codes, vec![0, 0, 1]);
        // Only the last of three levels differs.
        assert_eq!(loss_hc(&qa, &qb).0, 5.0);
        assert_eq!(loss_hc(&qa, &qa).0, 0.0);

        let books2 = vec![
            vec![vec![0.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 2.0]],
            vec![vec![0.0, 0.0]],
        ];
        let qa = rq_encode(&[0.9, 0.1], &books2).unwrap();
        let qb = rq_encode(&[0.0, 1.9], &books2).unwrap();
        // The level-1 difference persists through level 2.
        assert_eq!(loss_hc(&qa, &qb).0, 10.0);
    }

    #[test]
    fn ema_converges_geometrically() {
        let e0 = vec![3.0, -1.0, 2.0];
        let u = vec![0.5, 0.5, 0.5];
        let mut book = EmaCodebook::new(vec![e0.clone(), vec![9.0, 9.0, 9.0]], 0.99);
        let bound0 = math::sq_dist(&e0, &u).sqrt();
        for _ in 0..100 {
            book.update(&[(0, &u[..])]);
        }
        let gap = math::sq_dist(&book.entries[0], &u).sqrt();
        assert!(gap <= 0.99f64.powi(100) * bound0 + 1e-12);
        assert_eq!(book.entries[1], vec![9.0, 9.0, 9.0]);
    }

    #[test]
    fn unit_decay_freezes_codebook() {
        let mut book = EmaCodebook::new(vec![vec![1.0, 2.0]], 1.0);
        book.update(&[(0, &[5.0, 5.0][..])]);
        assert_eq!(book.entries, vec![vec![1.0, 2.0]]);
    }
}
