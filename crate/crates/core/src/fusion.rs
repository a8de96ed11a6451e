//! Gated image/category fusion and the contrastive objectives that train it.
//!
//! `v = normalize(relu(W_v x + b_v))`, `t = W_t y + b_t`, `α = σ(gate([v; t]))`,
//! `f_cat = cat([v; t])` and `f = normalize((1 − α)·v + α·t + f_cat)`.
//!
//! Losses take a [`FusedBatch`] of unit rows and return gradients with respect to those rows;
//! [`FusionParams::backward`] carries them into the encoder weights.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::corpus::{Catalog, ViewPair};
use crate::error::{Error, Result};
use crate::math::{self, rng_for, Linear, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionHyper {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub gamma: f64,
    /// Circle-loss scale ζ.
    pub circle_scale: f64,
    /// Circle-loss relaxation m.
    pub circle_margin: f64,
}

impl Default for FusionHyper {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.25,
            tau: 0.07,
            gamma: 0.1,
            circle_scale: 32.0,
            circle_margin: 0.25,
        }
    }
}

impl FusionHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("gamma must be non-negative".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidConfig("lambda weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub enc_v: Linear,
    pub enc_t: Linear,
    pub gate1: Linear,
    pub gate2: Linear,
    pub cat1: Linear,
    pub cat2: Linear,
    pub hyper: FusionHyper,
}

impl ParamSet for FusionParams {
    fn tensors(&self) -> Vec<&[f64]> {
        [&self.enc_v, &self.enc_t, &self.gate1, &self.gate2, &self.cat1, &self.cat2]
            .into_iter()
            .flat_map(|l| [&l.w[..], &l.b[..]])
            .collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        [
            &mut self.enc_v,
            &mut self.enc_t,
            &mut self.gate1,
            &mut self.gate2,
            &mut self.cat1,
            &mut self.cat2,
        ]
        .into_iter()
        .flat_map(|l| [&mut l.w[..], &mut l.b[..]])
        .collect()
    }
}

/// Intermediate values of one [`FusionParams::fuse`] call, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FuseCache {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    v_pre: Vec<f64>,
    v_norm: f64,
    pub v: Vec<f64>,
    pub t: Vec<f64>,
    z: Vec<f64>,
    g_pre: Vec<f64>,
    g_h: Vec<f64>,
    pub alpha: f64,
    c_pre: Vec<f64>,
    c_h: Vec<f64>,
    f_norm: f64,
    pub f: Vec<f64>,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn relu_mask(pre: &[f64], d: &mut [f64]) {
    for (g, &p) in d.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

fn unit(v: &[f64]) -> (Vec<f64>, f64) {
    let n = math::norm(v);
    if n > 0.0 {
        (v.iter().map(|x| x / n).collect(), n)
    } else {
        (v.to_vec(), 0.0)
    }
}

fn unit_backward(y: &[f64], n: f64, dy: &[f64]) -> Vec<f64> {
    if n > 0.0 {
        math::normalize_backward(y, n, dy)
    } else {
        vec![0.0; y.len()]
    }
}

impl FusionParams {
    /// Random initialization for image width `input_dim`, category width `cat_dim`, latent
    /// width `d` and hidden width `h`.
    pub fn new(input_dim: usize, cat_dim: usize, d: usize, h: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, 100);
        Self {
            enc_v: Linear::random(input_dim, d, (input_dim as f64).sqrt(), &mut rng),
            enc_t: Linear::random(cat_dim, d, 0.05, &mut rng),
            gate1: Linear::random(2 * d, h, 1.0, &mut rng),
            gate2: Linear::random(h, 1, 1.0, &mut rng),
            cat1: Linear::random(2 * d, h, 1.0, &mut rng),
            cat2: Linear::random(h, d, 0.1, &mut rng),
            hyper: FusionHyper::default(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.enc_v.input
    }

    pub fn cat_dim(&self) -> usize {
        self.enc_t.input
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_v.output
    }

    pub fn forward(&self, x: &[f64], y: &[f64]) -> Result<FuseCache> {
        if x.len() != self.input_dim() || y.len() != self.cat_dim() {
            return Err(Error::Shape(format!(
                "fuse expects x of {} and y of {}, got {} and {}",
                self.input_dim(),
                self.cat_dim(),
                x.len(),
                y.len()
            )));
        }
        let v_pre = self.enc_v.forward(x);
        let (v, v_norm) = unit(&relu(&v_pre));
        let t = self.enc_t.forward(y);
        let mut z = v.clone();
        z.extend_from_slice(&t);
        let g_pre = self.gate1.forward(&z);
        let g_h = relu(&g_pre);
        let alpha = math::sigmoid(self.gate2.forward(&g_h)[0]);
        let c_pre = self.cat1.forward(&z);
        let c_h = relu(&c_pre);
        let f_cat = self.cat2.forward(&c_h);
        let f_raw: Vec<f64> = (0..v.len())
            .map(|k| (1.0 - alpha) * v[k] + alpha * t[k] + f_cat[k])
            .collect();
        let (f, f_norm) = unit(&f_raw);
        Ok(FuseCache {
            x: x.to_vec(),
            y: y.to_vec(),
            v_pre,
            v_norm,
            v,
            t,
            z,
            g_pre,
            g_h,
            alpha,
            c_pre,
            c_h,
            f_norm,
            f,
        })
    }

    /// Returns `(f, v, alpha)`.
    pub fn fuse(&self, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let c = self.forward(x, y)?;
        Ok((c.f, c.v, c.alpha))
    }

    /// Accumulates parameter gradients for one row given `dL/df` and `dL/dv`, and returns
    /// `dL/dx`.
    pub fn backward(
        &self,
        cache: &FuseCache,
        df: &[f64],
        dv: &[f64],
        grad: &mut FusionParams,
    ) -> Vec<f64> {
        let d = self.latent_dim();
        let alpha = cache.alpha;
        let df_raw = unit_backward(&cache.f, cache.f_norm, df);

        let mut dv_total: Vec<f64> = (0..d).map(|k| dv[k] + (1.0 - alpha) * df_raw[k]).collect();
        let mut dt: Vec<f64> = df_raw.iter().map(|g| alpha * g).collect();
        let dalpha: f64 = (0..d).map(|k| df_raw[k] * (cache.t[k] - cache.v[k])).sum();

        let mut dc_h = self.cat2.backward(&cache.c_h, &df_raw, &mut grad.cat2);
        relu_mask(&cache.c_pre, &mut dc_h);
        let mut dz = self.cat1.backward(&cache.z, &dc_h, &mut grad.cat1);

        let dlogit = dalpha * alpha * (1.0 - alpha);
        let mut dg_h = self.gate2.backward(&cache.g_h, &[dlogit], &mut grad.gate2);
        relu_mask(&cache.g_pre, &mut dg_h);
        let dz_gate = self.gate1.backward(&cache.z, &dg_h, &mut grad.gate1);
        math::axpy(1.0, &dz_gate, &mut dz);

        math::axpy(1.0, &dz[..d], &mut dv_total);
        math::axpy(1.0, &dz[d..], &mut dt);

        self.enc_t.backward(&cache.y, &dt, &mut grad.enc_t);
        let mut dv_pre = unit_backward(&cache.v, cache.v_norm, &dv_total);
        relu_mask(&cache.v_pre, &mut dv_pre);
        self.enc_v.backward(&cache.x, &dv_pre, &mut grad.enc_v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        blob::write_f64(path, 1, &self.flatten())?;
        let meta = FusionMeta {
            input_dim: self.input_dim(),
            cat_dim: self.cat_dim(),
            latent_dim: self.latent_dim(),
            hidden_dim: self.gate1.output,
            hyper: self.hyper,
        };
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(side.clone()),
            _ => e.into(),
        })?;
        let meta: FusionMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        let (_, flat) = blob::read_f64(path)?;
        let mut p = FusionParams::new(meta.input_dim, meta.cat_dim, meta.latent_dim, meta.hidden_dim, 0);
        if flat.len() != p.num_params() {
            return Err(Error::format(path, "parameter count disagrees with sidecar"));
        }
        p.assign_flat(&flat);
        p.hyper = meta.hyper;
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct FusionMeta {
    input_dim: usize,
    cat_dim: usize,
    latent_dim: usize,
    hidden_dim: usize,
    hyper: FusionHyper,
}

pub(crate) fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Rows of fused and visual embeddings plus the positive pairing between rows.
///
/// Pair `i` is `(first, second)`: `f_i^{(1)} = f[first]`, `f_i^{(2)} = f[second]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBatch {
    pub f: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub pairs: Vec<(usize, usize)>,
}

impl FusedBatch {
    pub fn new(f: Vec<Vec<f64>>, v: Vec<Vec<f64>>, pairs: Vec<(usize, usize)>) -> Result<Self> {
        if f.len() != v.len() {
            return Err(Error::Shape("f and v row counts differ".into()));
        }
        let mut seen = vec![false; f.len()];
        for &(a, b) in &pairs {
            if a >= f.len() || b >= f.len() || a == b {
                return Err(Error::Shape(format!("invalid pair ({a}, {b})")));
            }
            for r in [a, b] {
                if std::mem::replace(&mut seen[r], true) {
                    return Err(Error::Shape(format!("row {r} appears in two pairs")));
                }
            }
        }
        Ok(Self { f, v, pairs })
    }

    /// Stacks pair embeddings as rows `2i` and `2i + 1`.
    pub fn from_pairs(pairs: &[((Vec<f64>, Vec<f64>), (Vec<f64>, Vec<f64>))]) -> Self {
        let mut f = Vec::with_capacity(2 * pairs.len());
        let mut v = Vec::with_capacity(2 * pairs.len());
        for ((fa, va), (fb, vb)) in pairs {
            f.push(fa.clone());
            v.push(va.clone());
            f.push(fb.clone());
            v.push(vb.clone());
        }
        let idx = (0..pairs.len()).map(|i| (2 * i, 2 * i + 1)).collect();
        Self { f, v, pairs: idx }
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Partner row of `row`, if it is paired.
    pub fn partner(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find_map(|&(a, b)| {
            if a == row {
                Some(b)
            } else if b == row {
                Some(a)
            } else {
                None
            }
        })
    }

    fn zero_grads(&self) -> BatchGrads {
        BatchGrads {
            df: self.f.iter().map(|r| vec![0.0; r.len()]).collect(),
            dv: self.v.iter().map(|r| vec![0.0; r.len()]).collect(),
        }
    }
}

/// Gradients of a batch loss with respect to the rows of `f` and `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub df: Vec<Vec<f64>>,
    pub dv: Vec<Vec<f64>>,
}

impl BatchGrads {
    pub fn add_scaled(&mut self, alpha: f64, other: &BatchGrads) {
        for (a, b) in self.df.iter_mut().zip(&other.df) {
            math::axpy(alpha, b, a);
        }
        for (a, b) in self.dv.iter_mut().zip(&other.dv) {
            math::axpy(alpha, b, a);
        }
    }
}

fn require_pairs(batch: &FusedBatch) -> Result<usize> {
    if batch.pairs.is_empty() {
        return Err(Error::Empty("batch has no positive pairs".into()));
    }
    Ok(batch.pairs.len())
}

/// `−Σ_i log softmax_j(a_i·b_j / τ)[i]` and its gradients with respect to the `a` and `b` rows.
fn nce_direction(a: &[&[f64]], b: &[&[f64]], tau: f64) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut value = 0.0;
    let mut da = vec![vec![0.0; a[0].len()]; n];
    let mut db = vec![vec![0.0; b[0].len()]; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| math::dot(a[i], b[j]) / tau).collect();
        let p = math::softmax(&logits);
        value -= logits[i] - math::logsumexp(&logits);
        for j in 0..n {
            let g = (p[j] - if i == j { 1.0 } else { 0.0 }) / tau;
            if g != 0.0 {
                math::axpy(g, b[j], &mut da[i]);
                math::axpy(g, a[i], &mut db[j]);
            }
        }
    }
    (value, da, db)
}

/// Multi-view consistency loss: in-batch softmax over `f^{(2)}` for both the `f^{(1)}` and the
/// `v^{(1)}` anchors, averaged over pairs.
pub fn loss_cons(batch: &FusedBatch, tau: f64) -> Result<(f64, BatchGrads)> {
    let n = require_pairs(batch)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig("tau must be positive".into()));
    }
    let f1: Vec<&[f64]> = batch.pairs.iter().map(|&(a, _)| &batch.f[a][..]).collect();
    let v1: Vec<&[f64]> = batch.pairs.iter().map(|&(a, _)| &batch.v[a][..]).collect();
    let f2: Vec<&[f64]> = batch.pairs.iter().map(|&(_, b)| &batch.f[b][..]).collect();
    let (val_f, d_f1, d_f2a) = nce_direction(&f1, &f2, tau);
    let (val_v, d_v1, d_f2b) = nce_direction(&v1, &f2, tau);
    let scale = 1.0 / n as f64;
    let mut grads = batch.zero_grads();
    for (i, &(a, b)) in batch.pairs.iter().enumerate() {
        math::axpy(scale, &d_f1[i], &mut grads.df[a]);
        math::axpy(scale, &d_v1[i], &mut grads.dv[a]);
        math::axpy(scale, &d_f2a[i], &mut grads.df[b]);
        math::axpy(scale, &d_f2b[i], &mut grads.df[b]);
    }
    Ok(((val_f + val_v) * scale, grads))
}

/// Margin loss `(1/N) Σ_i Σ_j max(0, −γ + f_i^{(1)}·f_j^{(2)} − v_i^{(1)}·f_j^{(2)})`, diagonal
/// included. Dot products equal cosines on unit rows.
pub fn loss_margin(batch: &FusedBatch, gamma: f64) -> Result<(f64, BatchGrads)> {
    let n = require_pairs(batch)?;
    if !(gamma >= 0.0) {
        return Err(Error::InvalidConfig("gamma must be non-negative".into()));
    }
    let scale = 1.0 / n as f64;
    let mut grads = batch.zero_grads();
    let mut value = 0.0;
    for &(ai, _) in &batch.pairs {
        for &(_, bj) in &batch.pairs {
            let f1 = &batch.f[ai];
            let v1 = &batch.v[ai];
            let f2 = &batch.f[bj];
            let h = -gamma + math::dot(f1, f2) - math::dot(v1, f2);
            if h > 0.0 {
                value += h;
                let diff: Vec<f64> = f1.iter().zip(v1).map(|(a, b)| a - b).collect();
                let f2c = f2.clone();
                math::axpy(scale, &f2c, &mut grads.df[ai]);
                math::axpy(-scale, &f2c, &mut grads.dv[ai]);
                math::axpy(scale, &diff, &mut grads.df[bj]);
            }
        }
    }
    Ok((value * scale, grads))
}

/// One-directional InfoNCE `−(1/N) Σ_i log softmax_j(a_i·b_j / τ)[i]`.
pub fn info_nce(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Empty("info_nce needs matching non-empty row sets".into()));
    }
    let ar: Vec<&[f64]> = a.iter().map(|r| &r[..]).collect();
    let br: Vec<&[f64]> = b.iter().map(|r| &r[..]).collect();
    Ok(nce_direction(&ar, &br, tau).0 / a.len() as f64)
}

/// Unified-form circle loss with anchors `a_i`, positive `b_i` and negatives `b_j, j ≠ i`.
/// The weighting factors are differentiated through, not held constant.
fn circle_direction(
    a: &[&[f64]],
    b: &[&[f64]],
    scale: f64,
    m: f64,
) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = a.len();
    let dim = a[0].len();
    let mut value = 0.0;
    let mut da = vec![vec![0.0; dim]; n];
    let mut db = vec![vec![0.0; dim]; n];
    if n < 2 {
        return (0.0, da, db);
    }
    for i in 0..n {
        let sp = math::dot(a[i], b[i]);
        let ap = (1.0 + m - sp).max(0.0);
        let pos_logit = -scale * ap * (sp - (1.0 - m));
        // d pos_logit / d sp
        let dpos = if ap > 0.0 {
            -scale * (ap - (sp - (1.0 - m)))
        } else {
            0.0
        };
        let mut neg_logits = Vec::with_capacity(n - 1);
        let mut dneg = Vec::with_capacity(n - 1);
        let mut idx = Vec::with_capacity(n - 1);
        for j in 0..n {
            if j == i {
                continue;
            }
            let sn = math::dot(a[i], b[j]);
            let an = (sn + m).max(0.0);
            neg_logits.push(scale * an * (sn - m));
            dneg.push(if an > 0.0 { scale * (an + (sn - m)) } else { 0.0 });
            idx.push(j);
        }
        let lse_n = math::logsumexp(&neg_logits);
        let u = lse_n + pos_logit;
        value += math::softplus(u);
        let du = math::sigmoid(u);
        let wn = math::softmax(&neg_logits);
        let g_sp = du * dpos;
        math::axpy(g_sp, b[i], &mut da[i]);
        math::axpy(g_sp, a[i], &mut db[i]);
        for (k, &j) in idx.iter().enumerate() {
            let g = du * wn[k] * dneg[k];
            if g != 0.0 {
                math::axpy(g, b[j], &mut da[i]);
                math::axpy(g, a[i], &mut db[j]);
            }
        }
    }
    (value, da, db)
}

/// Alignment loss on the visual rows: `λ₁·L_cl + λ₂·L_circle`, where `L_cl` is InfoNCE averaged
/// over both pair directions and `L_circle` the per-anchor circle loss averaged the same way.
pub fn loss_align(batch: &FusedBatch, hyper: &FusionHyper) -> Result<(f64, BatchGrads)> {
    hyper.validate()?;
    let n = require_pairs(batch)?;
    let mut grads = batch.zero_grads();
    if hyper.lambda1 == 0.0 && hyper.lambda2 == 0.0 {
        return Ok((0.0, grads));
    }
    let v1: Vec<&[f64]> = batch.pairs.iter().map(|&(a, _)| &batch.v[a][..]).collect();
    let v2: Vec<&[f64]> = batch.pairs.iter().map(|&(_, b)| &batch.v[b][..]).collect();
    let half = 0.5 / n as f64;
    let mut value = 0.0;
    let mut apply = |w: f64, parts: [(f64, Vec<Vec<f64>>, Vec<Vec<f64>>); 2], value: &mut f64| {
        let [(val12, d1a, d2a), (val21, d2b, d1b)] = parts;
        *value += w * half * (val12 + val21);
        for (i, &(a, b)) in batch.pairs.iter().enumerate() {
            math::axpy(w * half, &d1a[i], &mut grads.dv[a]);
            math::axpy(w * half, &d1b[i], &mut grads.dv[a]);
            math::axpy(w * half, &d2a[i], &mut grads.dv[b]);
            math::axpy(w * half, &d2b[i], &mut grads.dv[b]);
        }
    };
    if hyper.lambda1 != 0.0 {
        apply(
            hyper.lambda1,
            [nce_direction(&v1, &v2, hyper.tau), nce_direction(&v2, &v1, hyper.tau)],
            &mut value,
        );
    }
    if hyper.lambda2 != 0.0 {
        let (s, m) = (hyper.circle_scale, hyper.circle_margin);
        apply(
            hyper.lambda2,
            [circle_direction(&v1, &v2, s, m), circle_direction(&v2, &v1, s, m)],
            &mut value,
        );
    }
    Ok((value, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Weights of the consistency and margin terms.
    pub beta_cons: f64,
    pub beta_mar: f64,
    /// Weight of the visual alignment loss added to the objective.
    pub align_weight: f64,
    pub clip: Option<f64>,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.05,
            batch: 64,
            seed: 7,
            beta_cons: 1.0,
            beta_mar: 0.25,
            align_weight: 0.0,
            clip: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionTrace {
    pub epoch_loss: Vec<f64>,
    /// Mean cosine between the fused embeddings of held pairs, before training and after each
    /// epoch.
    pub pair_cosine: Vec<f64>,
}

/// Image feature and category feature of one item view.
pub fn view_inputs(catalog: &Catalog, item: u32, view: usize) -> (Vec<f64>, Vec<f64>) {
    (
        catalog.view_feature(item, view),
        catalog.category_vec(item).to_vec(),
    )
}

pub fn mean_pair_cosine(params: &FusionParams, catalog: &Catalog, pairs: &[ViewPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs".into()));
    }
    let mut acc = 0.0;
    for p in pairs {
        let (xa, ya) = view_inputs(catalog, p.item_a, p.view_a as usize);
        let (xb, yb) = view_inputs(catalog, p.item_b, p.view_b as usize);
        let fa = params.forward(&xa, &ya)?.f;
        let fb = params.forward(&xb, &yb)?.f;
        acc += math::dot(&fa, &fb);
    }
    Ok(acc / pairs.len() as f64)
}

/// Objective of one pair minibatch plus accumulated parameter gradients.
pub(crate) fn minibatch_step(
    params: &FusionParams,
    catalog: &Catalog,
    pairs: &[ViewPair],
    cfg: &FusionTrainConfig,
    grad: &mut FusionParams,
) -> Result<(f64, FusedBatch, Vec<FuseCache>, BatchGrads)> {
    let mut caches = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        let (xa, ya) = view_inputs(catalog, p.item_a, p.view_a as usize);
        let (xb, yb) = view_inputs(catalog, p.item_b, p.view_b as usize);
        caches.push(params.forward(&xa, &ya)?);
        caches.push(params.forward(&xb, &yb)?);
    }
    let batch = FusedBatch {
        f: caches.iter().map(|c| c.f.clone()).collect(),
        v: caches.iter().map(|c| c.v.clone()).collect(),
        pairs: (0..pairs.len()).map(|i| (2 * i, 2 * i + 1)).collect(),
    };
    let (lc, gc) = loss_cons(&batch, params.hyper.tau)?;
    let (lm, gm) = loss_margin(&batch, params.hyper.gamma)?;
    let mut grads = batch.zero_grads();
    grads.add_scaled(cfg.beta_cons, &gc);
    grads.add_scaled(cfg.beta_mar, &gm);
    let mut loss = cfg.beta_cons * lc + cfg.beta_mar * lm;
    if cfg.align_weight != 0.0 {
        let (la, ga) = loss_align(&batch, &params.hyper)?;
        grads.add_scaled(cfg.align_weight, &ga);
        loss += cfg.align_weight * la;
    }
    for (k, c) in caches.iter().enumerate() {
        params.backward(c, &grads.df[k], &grads.dv[k], grad);
    }
    Ok((loss, batch, caches, grads))
}

/// Trains the fusion encoders on `β_cons·L_cons + β_mar·L_mar` over training-view pairs.
pub fn train_fusion(
    catalog: &Catalog,
    params: &FusionParams,
    cfg: &FusionTrainConfig,
) -> Result<(FusionParams, FusionTrace)> {
    params.hyper.validate()?;
    if cfg.batch == 0 {
        return Err(Error::InvalidConfig("batch must be at least 1".into()));
    }
    let mut pairs = catalog.train_pairs();
    if pairs.is_empty() {
        return Err(Error::Empty("catalog has no training pairs".into()));
    }
    let probe: Vec<ViewPair> = pairs.iter().copied().filter(|p| p.same_item()).take(512).collect();
    let probe = if probe.is_empty() { pairs[..pairs.len().min(512)].to_vec() } else { probe };

    let mut params = params.clone();
    let mut trace = FusionTrace::default();
    trace.pair_cosine.push(mean_pair_cosine(&params, catalog, &probe)?);
    let mut rng = rng_for(cfg.seed, 101);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in pairs.chunks(cfg.batch) {
            let mut grad = params.zeros_like();
            let (loss, ..) = minibatch_step(&params, catalog, chunk, cfg, &mut grad)?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::TrainingDiverged {
                    stage: "fusion".into(),
                    step,
                });
            }
            math::sgd_step(&mut params, &grad, cfg.lr, cfg.clip);
            total += loss;
            batches += 1;
            step += 1;
        }
        trace.epoch_loss.push(total / batches as f64);
        trace.pair_cosine.push(mean_pair_cosine(&params, catalog, &probe)?);
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{numgrad, rel_error};
    use rand::Rng;

    fn random_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| math::normalized(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn zero_gate_gives_half() {
        let mut p = FusionParams::new(6, 3, 4, 5, 1);
        p.gate1 = Linear::zeros(8, 5);
        p.gate2 = Linear::zeros(5, 1);
        let x = [0.3, -0.1, 0.5, 0.2, 0.0, 0.9];
        let y = [1.0, -1.0, 0.5];
        let c = p.forward(&x, &y).unwrap();
        assert_eq!(c.alpha, 0.5);
        let f_cat = p.cat2.forward(&relu(&p.cat1.forward(&c.z)));
        let raw: Vec<f64> = (0..4).map(|k| 0.5 * c.v[k] + 0.5 * c.t[k] + f_cat[k]).collect();
        let expect = math::normalized(&raw);
        for (a, b) in c.f.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_gate_and_zero_cat_gives_visual() {
        let mut p = FusionParams::new(6, 3, 4, 5, 2);
        p.gate2.b[0] = f64::NEG_INFINITY;
        p.cat1 = Linear::zeros(8, 5);
        p.cat2 = Linear::zeros(5, 4);
        let (f, v, alpha) = p.fuse(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(alpha, 0.0);
        for (a, b) in f.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = FusionParams::new(6, 3, 4, 5, 2);
        assert!(matches!(p.fuse(&[0.0; 5], &[0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn cons_single_pair_is_zero() {
        let mut rng = rng_for(1, 0);
        let rows = random_rows(&mut rng, 2, 4);
        let b = FusedBatch::new(rows.clone(), rows, vec![(0, 1)]).unwrap();
        assert!(loss_cons(&b, 0.5).unwrap().0.abs() < 1e-15);
    }

    #[test]
    fn cons_orthonormal_pairs() {
        let e0 = vec![1.0, 0.0];
        let e1 = vec![0.0, 1.0];
        let rows = vec![e0.clone(), e0, e1.clone(), e1];
        let b = FusedBatch::new(rows.clone(), rows, vec![(0, 1), (2, 3)]).unwrap();
        let (val, _) = loss_cons(&b, 1.0).unwrap();
        let expect = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((val - expect).abs() < 1e-12);
        assert!((val - 0.6265).abs() < 1e-4);
    }

    #[test]
    fn empty_batch_errors() {
        let b = FusedBatch::new(vec![], vec![], vec![]).unwrap();
        assert!(matches!(loss_cons(&b, 1.0), Err(Error::Empty(_))));
        assert!(matches!(loss_margin(&b, 0.1), Err(Error::Empty(_))));
    }

    #[test]
    fn margin_vanishes_when_v_equals_f_or_gamma_is_large() {
        let mut rng = rng_for(3, 0);
        let f = random_rows(&mut rng, 6, 5);
        let v = random_rows(&mut rng, 6, 5);
        let pairs = vec![(0, 1), (2, 3), (4, 5)];
        let same = FusedBatch::new(f.clone(), f.clone(), pairs.clone()).unwrap();
        assert_eq!(loss_margin(&same, 0.0).unwrap().0, 0.0);
        let wide = FusedBatch::new(f, v, pairs).unwrap();
        assert_eq!(loss_margin(&wide, 2.0).unwrap().0, 0.0);
    }

    #[test]
    fn align_zero_weights_is_zero() {
        let mut rng = rng_for(4, 0);
        let f = random_rows(&mut rng, 4, 3);
        let b = FusedBatch::new(f.clone(), f, vec![(0, 1), (2, 3)]).unwrap();
        let hyper = FusionHyper {
            lambda1: 0.0,
            lambda2: 0.0,
            ..FusionHyper::default()
        };
        let (val, g) = loss_align(&b, &hyper).unwrap();
        assert_eq!(val, 0.0);
        assert!(g.dv.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn cons_is_permutation_invariant() {
        let mut rng = rng_for(5, 0);
        let f = random_rows(&mut rng, 6, 4);
        let v = random_rows(&mut rng, 6, 4);
        let b = FusedBatch::new(f.clone(), v.clone(), vec![(0, 1), (2, 3), (4, 5)]).unwrap();
        let perm = [4usize, 2, 5, 0, 3, 1];
        let mut inv = [0usize; 6];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let pf = perm.iter().map(|&o| f[o].clone()).collect();
        let pv = perm.iter().map(|&o| v[o].clone()).collect();
        let pp = vec![(inv[4], inv[5]), (inv[0], inv[1]), (inv[2], inv[3])];
        let pb = FusedBatch::new(pf, pv, pp).unwrap();
        let a = loss_cons(&b, 0.3).unwrap().0;
        let c = loss_cons(&pb, 0.3).unwrap().0;
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn positive_rescaling_keeps_visual_direction() {
        let mut p = FusionParams::new(5, 2, 4, 3, 9);
        p.enc_v.b.fill(0.0);
        let x = [0.4, -0.3, 0.8, 0.1, -0.6];
        let y = [0.2, 0.7];
        let base = p.fuse(&x, &y).unwrap().1;
        for c in [0.5, 2.0] {
            let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
            let v = p.fuse(&xs, &y).unwrap().1;
            for (a, b) in v.iter().zip(&base) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_numgrad_through_encoders() {
        let p = FusionParams::new(5, 3, 4, 6, 11);
        let mut rng = rng_for(11, 1);
        let inputs: Vec<(Vec<f64>, Vec<f64>)> = (0..6)
            .map(|_| {
                (
                    (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let pairs = vec![(0, 1), (2, 3), (4, 5)];
        let objective = |q: &FusionParams| -> (f64, FusionParams) {
            let caches: Vec<FuseCache> = inputs.iter().map(|(x, y)| q.forward(x, y).unwrap()).collect();
            let batch = FusedBatch {
                f: caches.iter().map(|c| c.f.clone()).collect(),
                v: caches.iter().map(|c| c.v.clone()).collect(),
                pairs: pairs.clone(),
            };
            let (lc, gc) = loss_cons(&batch, 0.5).unwrap();
            let mut grad = q.zeros_like();
            for (k, c) in caches.iter().enumerate() {
                q.backward(c, &gc.df[k], &gc.dv[k], &mut grad);
            }
            (lc, grad)
        };
        let (_, g) = objective(&p);
        let flat = p.flatten();
        let num = numgrad(
            |w| {
                let mut q = p.clone();
                q.assign_flat(w);
                objective(&q).0
            },
            &flat,
            1e-6,
        )
        .unwrap();
        assert!(rel_error(&g.flatten(), &num, 1e-8) < 1e-4);
    }
}
