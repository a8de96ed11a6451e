//! Data model, deterministic synthetic corpus generator and on-disk persistence.
//!
//! The generator stands in for industrial search logs. Every random draw comes from a seeded
//! ChaCha stream, so a catalog is a pure function of its [`CatalogConfig`].
//!
//! Generation model (per-coordinate standard deviations):
//!
//! * `C` category anchors `a_c ~ N(0, 1.0²)`
//! * item prototype `p_i = a_{c(i)} + N(0, 0.35²)`
//! * view centre `p_i + N(0, 0.15²)`, and each of the `v_max` tokens adds `N(0, 0.05²)`
//! * pairs: every same-item view pair plus one nearest-prototype cross-item pair per item
//! * sessions: a fresh capture of a target item; the purchase is the target, negatives are its
//!   visual neighbours
//!
//! Generated floats are rounded to `f32` so the binary store round-trips bit-exactly; pooled
//! vectors are recomputed from the stored tokens in `f64`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::math::{self, rng_for};

pub const CATALOG_FORMAT_VERSION: u16 = 1;

pub const ANCHOR_SPREAD: f64 = 1.0;
pub const ITEM_OFFSET: f64 = 0.35;
pub const VIEW_PERTURBATION: f64 = 0.15;
pub const TOKEN_NOISE: f64 = 0.05;
/// Live captures are shakier than album photos.
pub const LIVE_CAPTURE_PERTURBATION: f64 = 0.22;

pub const SHORT_TERM_LEN: usize = 5;
pub const SCENE_ALBUM: u8 = 0;
pub const SCENE_LIVE: u8 = 1;

/// Per-image visual tokens plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    dim: usize,
    tokens: Vec<f32>,
    pooled: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(dim: usize, tokens: Vec<f32>) -> Result<Self> {
        if dim == 0 || tokens.is_empty() || tokens.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "token buffer of length {} is not a non-empty multiple of dim {dim}",
                tokens.len()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDomain("non-finite token entry".into()));
        }
        let pooled = pool(dim, &tokens);
        Ok(Self {
            dim,
            tokens,
            pooled,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    pub fn raw(&self) -> &[f32] {
        &self.tokens
    }

    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape(format!("token index {i} out of range")));
            }
            out.extend_from_slice(self.row(i));
        }
        Self::new(self.dim, out)
    }

    /// Tokens widened to f64 rows.
    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| self.row(i).iter().map(|&v| v as f64).collect())
            .collect()
    }
}

fn pool(dim: usize, tokens: &[f32]) -> Vec<f64> {
    let n = tokens.len() / dim;
    let mut acc = vec![0.0f64; dim];
    for row in tokens.chunks_exact(dim) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BizStats {
    pub clicks_30d: u64,
    pub gmv_30d: f64,
    pub orders_30d: u64,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub item_id: u32,
    pub category_id: u32,
    pub views: Vec<TokenMatrix>,
    pub title_vec: Vec<f64>,
    pub biz: BizStats,
}

/// A positive pair of (item, view) images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ViewPair {
    pub item_a: u32,
    pub view_a: u16,
    pub item_b: u32,
    pub view_b: u16,
}

impl ViewPair {
    pub fn same_item(&self) -> bool {
        self.item_a == self.item_b
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSet {
    pub pairs: Vec<ViewPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: u32,
    pub user_id: u32,
    pub query: TokenMatrix,
    pub scene_id: u8,
    pub purchased: u32,
    pub clicked_not_purchased: Vec<u32>,
    pub exposed_not_clicked: Vec<u32>,
    pub timestamp: u64,
}

impl Session {
    /// All negatives: clicked-not-purchased first, then exposed-not-clicked.
    pub fn negatives(&self) -> Vec<u32> {
        self.clicked_not_purchased
            .iter()
            .chain(&self.exposed_not_clicked)
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UserHistory {
    pub long_term_item_ids: Vec<u32>,
    pub short_term_item_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    pub n_items: usize,
    pub n_views: usize,
    pub v_max: usize,
    pub dim: usize,
    pub n_categories: usize,
    pub n_users: usize,
    pub n_sessions: usize,
    pub seed: u64,
    /// Width of the synthetic category-text embedding.
    pub category_dim: usize,
}

impl CatalogConfig {
    pub fn new(
        n_items: usize,
        n_views: usize,
        v_max: usize,
        dim: usize,
        n_categories: usize,
        n_users: usize,
        n_sessions: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_items,
            n_views,
            v_max,
            dim,
            n_categories,
            n_users,
            n_sessions,
            seed,
            category_dim: 16,
        }
    }

    /// The corpus used throughout the study: 2000 items × 4 views × 48 tokens × 64 dims.
    pub fn standard(seed: u64) -> Self {
        Self::new(2000, 4, 48, 64, 20, 300, 3000, seed)
    }

    /// A small corpus for quick runs and tests.
    pub fn small(seed: u64) -> Self {
        Self::new(120, 3, 12, 16, 4, 20, 150, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_items", self.n_items),
            ("n_views", self.n_views),
            ("v_max", self.v_max),
            ("dim", self.dim),
            ("n_categories", self.n_categories),
            ("n_users", self.n_users),
            ("n_sessions", self.n_sessions),
            ("category_dim", self.category_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.n_views < 2 {
            return Err(Error::InvalidConfig(
                "n_views must be at least 2 so multi-view pairs exist".into(),
            ));
        }
        if self.n_items > u32::MAX as usize || self.n_views > u16::MAX as usize {
            return Err(Error::InvalidConfig("counts exceed id width".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub config: CatalogConfig,
    pub items: Vec<Item>,
    pub pairs: PairSet,
    pub sessions: Vec<Session>,
    pub histories: BTreeMap<u32, UserHistory>,
    /// `C × D_c` category text embeddings.
    pub category_vecs: Vec<Vec<f64>>,
}

impl Catalog {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn n_categories(&self) -> usize {
        self.category_vecs.len()
    }

    pub fn item(&self, id: u32) -> &Item {
        &self.items[id as usize]
    }

    /// L2-normalized pooled feature of one item view (the image feature `x`).
    pub fn view_feature(&self, item: u32, view: usize) -> Vec<f64> {
        math::normalized(self.item(item).views[view].pooled())
    }

    pub fn category_vec(&self, item: u32) -> &[f64] {
        &self.category_vecs[self.item(item).category_id as usize]
    }

    /// The last view of every item is held out from training and used as an evaluation query.
    pub fn eval_view(&self) -> usize {
        self.config.n_views - 1
    }

    pub fn train_views(&self) -> std::ops::Range<usize> {
        0..self.config.n_views - 1
    }

    /// Pairs that only touch training views.
    pub fn train_pairs(&self) -> Vec<ViewPair> {
        let ev = self.eval_view() as u16;
        self.pairs
            .pairs
            .iter()
            .filter(|p| p.view_a != ev && p.view_b != ev)
            .copied()
            .collect()
    }

    /// Sessions split chronologically: the first `1 - holdout` fraction trains, the rest
    /// evaluates.
    pub fn session_split(&self, holdout: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.sessions.len();
        let n_eval = ((n as f64) * holdout).round() as usize;
        let cut = n - n_eval.min(n);
        ((0..cut).collect(), (cut..n).collect())
    }

    /// Checks referential integrity and the generator's structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.items.len() as u32;
        for (i, item) in self.items.iter().enumerate() {
            if item.item_id != i as u32 {
                return Err(Error::Verification(format!("item at {i} has id {}", item.item_id)));
            }
            if item.category_id as usize >= self.category_vecs.len() {
                return Err(Error::Verification(format!("item {i} has invalid category")));
            }
            if item.views.is_empty() || item.views.iter().any(|v| v.dim() != self.dim()) {
                return Err(Error::Verification(format!("item {i} has inconsistent views")));
            }
        }
        for p in &self.pairs.pairs {
            if p.item_a >= n || p.item_b >= n {
                return Err(Error::Verification("pair references unknown item".into()));
            }
            if p.item_a == p.item_b && p.view_a == p.view_b {
                return Err(Error::Verification("self pair".into()));
            }
        }
        for s in &self.sessions {
            let negs = s.negatives();
            let set: BTreeSet<u32> = negs.iter().copied().collect();
            if set.len() != negs.len() || set.contains(&s.purchased) {
                return Err(Error::Verification(format!(
                    "session {} has overlapping lists",
                    s.session_id
                )));
            }
            if s.purchased >= n || negs.iter().any(|&x| x >= n) {
                return Err(Error::Verification("session references unknown item".into()));
            }
            if !self.histories.contains_key(&s.user_id) {
                return Err(Error::Verification("session references unknown user".into()));
            }
        }
        for h in self.histories.values() {
            if h.short_term_item_ids.len() > SHORT_TERM_LEN {
                return Err(Error::Verification("short-term history too long".into()));
            }
            if h
                .long_term_item_ids
                .iter()
                .chain(&h.short_term_item_ids)
                .any(|&x| x >= n)
            {
                return Err(Error::Verification("history references unknown item".into()));
            }
        }
        Ok(())
    }
}

fn gauss(rng: &mut impl Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn make_view(
    center: &[f64],
    v_max: usize,
    rng: &mut impl Rng,
) -> TokenMatrix {
    let dim = center.len();
    let mut tokens = Vec::with_capacity(v_max * dim);
    for _ in 0..v_max {
        for &c in center {
            tokens.push((c + gauss(rng, TOKEN_NOISE)) as f32);
        }
    }
    TokenMatrix::new(dim, tokens).expect("generated tokens are well formed")
}

/// Indices of the `k` nearest prototypes of every item (excluding itself), nearest first, ties
/// by lower id.
fn nearest_prototypes(protos: &[Vec<f64>], k: usize) -> Vec<Vec<u32>> {
    let n = protos.len();
    (0..n)
        .map(|i| {
            let mut d: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (math::sq_dist(&protos[i], &protos[j]), j as u32))
                .collect();
            let k = k.min(d.len());
            if k == 0 {
                return Vec::new();
            }
            d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.truncate(k);
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Generates a catalog. Pure function of `config`.
pub fn generate_catalog(config: &CatalogConfig) -> Result<Catalog> {
    config.validate()?;
    let dim = config.dim;
    let seed = config.seed;

    let mut rng = rng_for(seed, 0);
    let anchors: Vec<Vec<f64>> = (0..config.n_categories)
        .map(|_| (0..dim).map(|_| gauss(&mut rng, ANCHOR_SPREAD)).collect())
        .collect();
    let category_vecs: Vec<Vec<f64>> = (0..config.n_categories)
        .map(|_| {
            (0..config.category_dim)
                .map(|_| round_f32(gauss(&mut rng, 1.0)))
                .collect()
        })
        .collect();

    let mut rng = rng_for(seed, 1);
    let mut prototypes = Vec::with_capacity(config.n_items);
    let mut items = Vec::with_capacity(config.n_items);
    for i in 0..config.n_items {
        let category_id = rng.random_range(0..config.n_categories) as u32;
        let proto: Vec<f64> = anchors[category_id as usize]
            .iter()
            .map(|a| a + gauss(&mut rng, ITEM_OFFSET))
            .collect();
        let views = (0..config.n_views)
            .map(|_| {
                let center: Vec<f64> = proto
                    .iter()
                    .map(|p| p + gauss(&mut rng, VIEW_PERTURBATION))
                    .collect();
                make_view(&center, config.v_max, &mut rng)
            })
            .collect();
        let title_vec = proto
            .iter()
            .map(|p| round_f32(p + gauss(&mut rng, 0.5)))
            .collect();
        let clicks_30d = (3.0 + gauss(&mut rng, 1.2)).exp().floor() as u64;
        let conversion = rng.random_range(0.01..0.2);
        let orders_30d = ((clicks_30d as f64) * conversion).floor() as u64;
        let price = ((3.0 + gauss(&mut rng, 0.8)).exp() * 100.0).round() / 100.0;
        let price = price.max(0.01);
        let gmv_30d = ((orders_30d as f64) * price * 100.0).round() / 100.0;
        items.push(Item {
            item_id: i as u32,
            category_id,
            views,
            title_vec,
            biz: BizStats {
                clicks_30d,
                gmv_30d,
                orders_30d,
                price,
            },
        });
        prototypes.push(proto);
    }

    let neighbours = nearest_prototypes(&prototypes, 10);

    let mut rng = rng_for(seed, 2);
    let mut pairs = Vec::new();
    for i in 0..config.n_items as u32 {
        for va in 0..config.n_views as u16 {
            for vb in va + 1..config.n_views as u16 {
                pairs.push(ViewPair {
                    item_a: i,
                    view_a: va,
                    item_b: i,
                    view_b: vb,
                });
            }
        }
    }
    let mut cross = BTreeSet::new();
    for i in 0..config.n_items as u32 {
        if let Some(&j) = neighbours[i as usize].first() {
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            if cross.insert((a, b)) {
                // Cross-item pairs avoid the held-out last view.
                let hi = (config.n_views - 1) as u16;
                pairs.push(ViewPair {
                    item_a: a,
                    view_a: rng.random_range(0..hi),
                    item_b: b,
                    view_b: rng.random_range(0..hi),
                });
            }
        }
    }

    let mut rng = rng_for(seed, 3);
    let mut by_category: Vec<Vec<u32>> = vec![Vec::new(); config.n_categories];
    for item in &items {
        by_category[item.category_id as usize].push(item.item_id);
    }
    let mut histories = BTreeMap::new();
    let mut user_prefs = Vec::with_capacity(config.n_users);
    for u in 0..config.n_users as u32 {
        let prefs: Vec<usize> = (0..2)
            .map(|_| rng.random_range(0..config.n_categories))
            .collect();
        let pick_pref = |rng: &mut rand_chacha::ChaCha8Rng| -> u32 {
            let c = prefs[rng.random_range(0..prefs.len())];
            let pool = &by_category[c];
            if pool.is_empty() {
                rng.random_range(0..config.n_items) as u32
            } else {
                pool[rng.random_range(0..pool.len())]
            }
        };
        let long_term: Vec<u32> = (0..8).map(|_| pick_pref(&mut rng)).collect();
        let mut short_term: Vec<u32> = Vec::new();
        let mut guard = 0;
        while short_term.len() < SHORT_TERM_LEN.min(config.n_items) && guard < 100 {
            let cand = pick_pref(&mut rng);
            if !short_term.contains(&cand) {
                short_term.push(cand);
            }
            guard += 1;
        }
        histories.insert(
            u,
            UserHistory {
                long_term_item_ids: long_term,
                short_term_item_ids: short_term,
            },
        );
        user_prefs.push(prefs);
    }

    let mut rng = rng_for(seed, 4);
    let mut sessions = Vec::with_capacity(config.n_sessions);
    for s in 0..config.n_sessions as u32 {
        let user_id = rng.random_range(0..config.n_users) as u32;
        let hist = &histories[&user_id];
        let roll: f64 = rng.random();
        let target = if roll < 0.5 && !hist.short_term_item_ids.is_empty() {
            hist.short_term_item_ids[rng.random_range(0..hist.short_term_item_ids.len())]
        } else if roll < 0.8 {
            let prefs = &user_prefs[user_id as usize];
            let pool = &by_category[prefs[rng.random_range(0..prefs.len())]];
            if pool.is_empty() {
                rng.random_range(0..config.n_items) as u32
            } else {
                pool[rng.random_range(0..pool.len())]
            }
        } else {
            rng.random_range(0..config.n_items) as u32
        };
        let scene_id = if rng.random_bool(0.5) {
            SCENE_ALBUM
        } else {
            SCENE_LIVE
        };
        let spread = if scene_id == SCENE_ALBUM {
            VIEW_PERTURBATION
        } else {
            LIVE_CAPTURE_PERTURBATION
        };
        let center: Vec<f64> = prototypes[target as usize]
            .iter()
            .map(|p| p + gauss(&mut rng, spread))
            .collect();
        let query = make_view(&center, config.v_max, &mut rng);

        let mut near = neighbours[target as usize].clone();
        near.shuffle(&mut rng);
        let n_clicked = rng.random_range(1..=3).min(near.len());
        let n_exposed = rng.random_range(1..=3).min(near.len() - n_clicked);
        let clicked_not_purchased = near[..n_clicked].to_vec();
        let exposed_not_clicked = near[n_clicked..n_clicked + n_exposed].to_vec();
        sessions.push(Session {
            session_id: s,
            user_id,
            query,
            scene_id,
            purchased: target,
            clicked_not_purchased,
            exposed_not_clicked,
            timestamp: 1_700_000_000 + 37 * s as u64,
        });
    }

    let catalog = Catalog {
        config: config.clone(),
        items,
        pairs: PairSet { pairs },
        sessions,
        histories,
        category_vecs,
    };
    catalog.validate()?;
    Ok(catalog)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u16,
    config: CatalogConfig,
    n_items: usize,
    n_pairs: usize,
    n_sessions: usize,
    n_users: usize,
    /// Row blocks of `embeddings.bin`, in order.
    embedding_blocks: Vec<(String, usize)>,
}

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    item_id: u32,
    category_id: u32,
    n_views: usize,
    v_max: usize,
    biz: BizStats,
}

#[derive(Serialize, Deserialize)]
struct SessionRecord {
    session_id: u32,
    user_id: u32,
    scene_id: u8,
    purchased: u32,
    clicked_not_purchased: Vec<u32>,
    exposed_not_clicked: Vec<u32>,
    timestamp: u64,
    v_max: usize,
}

#[derive(Serialize, Deserialize)]
struct HistoryRecord {
    user_id: u32,
    #[serde(flatten)]
    history: UserHistory,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            e.into()
        }
    })
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?,
        );
    }
    Ok(out)
}

/// Writes the catalog directory layout: `items.jsonl`, `pairs.jsonl`, `sessions.jsonl`,
/// `histories.jsonl`, `embeddings.bin`, `category_vecs.bin`, `manifest.json`.
pub fn save_catalog(catalog: &Catalog, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let dim = catalog.dim();

    let mut emb: Vec<f32> = Vec::new();
    let mut view_rows = 0;
    for item in &catalog.items {
        for v in &item.views {
            emb.extend_from_slice(v.raw());
            view_rows += v.len();
        }
    }
    let mut query_rows = 0;
    for s in &catalog.sessions {
        emb.extend_from_slice(s.query.raw());
        query_rows += s.query.len();
    }
    for item in &catalog.items {
        emb.extend(item.title_vec.iter().map(|&v| v as f32));
    }
    blob::write_f32(&dir.join("embeddings.bin"), dim, &emb)?;

    let cat: Vec<f32> = catalog
        .category_vecs
        .iter()
        .flat_map(|r| r.iter().map(|&v| v as f32))
        .collect();
    blob::write_f32(&dir.join("category_vecs.bin"), catalog.config.category_dim, &cat)?;

    write_jsonl(
        &dir.join("items.jsonl"),
        catalog.items.iter().map(|it| ItemRecord {
            item_id: it.item_id,
            category_id: it.category_id,
            n_views: it.views.len(),
            v_max: it.views[0].len(),
            biz: it.biz.clone(),
        }),
    )?;
    write_jsonl(&dir.join("pairs.jsonl"), catalog.pairs.pairs.iter())?;
    write_jsonl(
        &dir.join("sessions.jsonl"),
        catalog.sessions.iter().map(|s| SessionRecord {
            session_id: s.session_id,
            user_id: s.user_id,
            scene_id: s.scene_id,
            purchased: s.purchased,
            clicked_not_purchased: s.clicked_not_purchased.clone(),
            exposed_not_clicked: s.exposed_not_clicked.clone(),
            timestamp: s.timestamp,
            v_max: s.query.len(),
        }),
    )?;
    write_jsonl(
        &dir.join("histories.jsonl"),
        catalog.histories.iter().map(|(&user_id, h)| HistoryRecord {
            user_id,
            history: h.clone(),
        }),
    )?;

    let manifest = Manifest {
        format_version: CATALOG_FORMAT_VERSION,
        config: catalog.config.clone(),
        n_items: catalog.items.len(),
        n_pairs: catalog.pairs.pairs.len(),
        n_sessions: catalog.sessions.len(),
        n_users: catalog.histories.len(),
        embedding_blocks: vec![
            ("item_view_tokens".into(), view_rows),
            ("session_query_tokens".into(), query_rows),
            ("title_vecs".into(), catalog.items.len()),
        ],
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_catalog(dir: &Path) -> Result<Catalog> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_reader(BufReader::new(open(&manifest_path)?))
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.format_version != CATALOG_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: manifest_path,
            expected: CATALOG_FORMAT_VERSION,
            found: manifest.format_version,
        });
    }
    let config = manifest.config;
    let dim = config.dim;

    let emb_path = dir.join("embeddings.bin");
    let (emb_dim, emb) = blob::read_f32(&emb_path)?;
    if emb_dim != dim {
        return Err(Error::format(&emb_path, "embedding dim disagrees with manifest"));
    }
    let cat_path = dir.join("category_vecs.bin");
    let (cat_dim, cat) = blob::read_f32(&cat_path)?;
    if cat_dim != config.category_dim {
        return Err(Error::format(&cat_path, "category dim disagrees with manifest"));
    }
    let category_vecs: Vec<Vec<f64>> = cat
        .chunks_exact(cat_dim)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();

    let item_recs: Vec<ItemRecord> = read_jsonl(&dir.join("items.jsonl"))?;
    let pairs: Vec<ViewPair> = read_jsonl(&dir.join("pairs.jsonl"))?;
    let session_recs: Vec<SessionRecord> = read_jsonl(&dir.join("sessions.jsonl"))?;
    let history_recs: Vec<HistoryRecord> = read_jsonl(&dir.join("histories.jsonl"))?;

    let mut cursor = 0usize;
    let mut take = |rows: usize| -> Result<Vec<f32>> {
        let end = cursor + rows * dim;
        if end > emb.len() {
            return Err(Error::format(&emb_path, "embedding blob too short"));
        }
        let out = emb[cursor..end].to_vec();
        cursor = end;
        Ok(out)
    };

    let mut views_per_item = Vec::with_capacity(item_recs.len());
    for rec in &item_recs {
        let mut views = Vec::with_capacity(rec.n_views);
        for _ in 0..rec.n_views {
            views.push(TokenMatrix::new(dim, take(rec.v_max)?)?);
        }
        views_per_item.push(views);
    }
    let mut queries = Vec::with_capacity(session_recs.len());
    for rec in &session_recs {
        queries.push(TokenMatrix::new(dim, take(rec.v_max)?)?);
    }
    let mut titles = Vec::with_capacity(item_recs.len());
    for _ in &item_recs {
        titles.push(take(1)?.into_iter().map(|v| v as f64).collect::<Vec<_>>());
    }
    if cursor != emb.len() {
        return Err(Error::format(&emb_path, "trailing embedding rows"));
    }

    let items = item_recs
        .into_iter()
        .zip(views_per_item)
        .zip(titles)
        .map(|((rec, views), title_vec)| Item {
            item_id: rec.item_id,
            category_id: rec.category_id,
            views,
            title_vec,
            biz: rec.biz,
        })
        .collect();
    let sessions = session_recs
        .into_iter()
        .zip(queries)
        .map(|(rec, query)| Session {
            session_id: rec.session_id,
            user_id: rec.user_id,
            query,
            scene_id: rec.scene_id,
            purchased: rec.purchased,
            clicked_not_purchased: rec.clicked_not_purchased,
            exposed_not_clicked: rec.exposed_not_clicked,
            timestamp: rec.timestamp,
        })
        .collect();
    let histories = history_recs
        .into_iter()
        .map(|r| (r.user_id, r.history))
        .collect();

    let catalog = Catalog {
        config,
        items,
        pairs: PairSet { pairs },
        sessions,
        histories,
        category_vecs,
    };
    catalog.validate()?;
    Ok(catalog)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> CatalogConfig {
        CatalogConfig::new(10, 2, 6, 8, 3, 4, 12, seed)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_catalog(&tiny(7)).unwrap();
        let b = generate_catalog(&tiny(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_catalog(&tiny(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn two_views_give_one_pair_per_item_at_least() {
        let c = generate_catalog(&tiny(7)).unwrap();
        let same = c.pairs.pairs.iter().filter(|p| p.same_item()).count();
        assert!(same >= c.items.len());
    }

    #[test]
    fn zero_counts_are_rejected() {
        let mut cfg = tiny(1);
        cfg.n_users = 0;
        assert!(matches!(generate_catalog(&cfg), Err(Error::InvalidConfig(_))));
        let mut cfg = tiny(1);
        cfg.n_views = 1;
        assert!(matches!(generate_catalog(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn pooled_is_token_mean() {
        let c = generate_catalog(&tiny(3)).unwrap();
        for item in &c.items {
            for v in &item.views {
                let rows = v.rows_f64();
                let mean = math::mean_rows(&rows);
                for (m, p) in mean.iter().zip(v.pooled()) {
                    assert!((m - p).abs() <= 1e-9 * p.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn business_stats_respect_generator_constraint() {
        let c = generate_catalog(&CatalogConfig::small(5)).unwrap();
        for item in &c.items {
            assert!(item.biz.orders_30d <= item.biz.clicks_30d);
            assert!(item.biz.price > 0.0);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_catalog(&tiny(7)).unwrap();
        save_catalog(&c, dir.path()).unwrap();
        let back = load_catalog(dir.path()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn empty_dir_is_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_catalog(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn corrupted_embedding_is_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_catalog(&tiny(7)).unwrap();
        save_catalog(&c, dir.path()).unwrap();
        let p = dir.path().join("embeddings.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[100] ^= 0x01;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_catalog(dir.path()), Err(Error::Checksum(_))));
    }
}
