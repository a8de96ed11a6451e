//! Vision-aligned residual quantization: fusion encoders and shallow EMA codebooks trained
//! jointly on `β₁·L_cons + β₂·L_mar + β₃·L_commit + β₄·L_hc`, then OPQ over the final residual
//! joined with business features.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    loss_hc, opq_encode, opq_fit, residual_chain, rq_encode, BizNorm, Codebook, EmaCodebook,
    LevelSpec, OpqConfig, OpqParams, QuantResult, SemanticId,
};
use crate::blob;
use crate::corpus::{BizStats, Catalog, ViewPair};
use crate::error::{Error, Result};
use crate::fusion::{self, loss_cons, loss_margin, FuseCache, FusedBatch, FusionParams};
use crate::math::{self, rng_for, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrqConfig {
    pub levels: LevelSpec,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// `(β₁, β₂, β₃, β₄)` weighting consistency, margin, commitment and hierarchical
    /// consistency.
    pub betas: [f64; 4],
    pub decay: f64,
    /// Entries whose EMA count drops below this fraction of the rows per batch are re-seeded.
    pub dead_fraction: f64,
    pub opq_iters: usize,
    pub biz_weight: f64,
    pub clip: Option<f64>,
}

impl Default for VrqConfig {
    fn default() -> Self {
        Self {
            levels: LevelSpec::desk(),
            epochs: 10,
            lr: 0.02,
            batch: 64,
            seed: 7,
            betas: [1.0, 0.25, 1.0, 0.5],
            decay: 0.99,
            dead_fraction: 1e-3,
            opq_iters: 10,
            biz_weight: 1.0,
            clip: Some(5.0),
        }
    }
}

/// Shallow EMA codebooks plus the deep OPQ stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStack {
    pub levels: LevelSpec,
    pub shallow: Vec<EmaCodebook>,
    pub betas: [f64; 4],
    pub deep: Option<OpqParams>,
}

/// A full encoding: shallow residual chain, deep codes and the joint reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct StackEncoding {
    pub sid: SemanticId,
    pub shallow: QuantResult,
    /// Shallow reconstruction plus the deep reconstruction rotated back.
    pub recon: Vec<f64>,
}

impl CodebookStack {
    pub fn from_books(levels: LevelSpec, books: Vec<Codebook>, decay: f64, betas: [f64; 4]) -> Result<Self> {
        if books.len() != levels.shallow.len() {
            return Err(Error::Shape("codebook count differs from shallow depth".into()));
        }
        for (b, &k) in books.iter().zip(&levels.shallow) {
            if b.len() != k {
                return Err(Error::Shape("codebook size differs from level spec".into()));
            }
        }
        Ok(Self {
            levels,
            shallow: books.into_iter().map(|b| EmaCodebook::new(b, decay)).collect(),
            betas,
            deep: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.shallow[0].entries[0].len()
    }

    pub fn is_fitted(&self) -> bool {
        self.levels.deep.is_empty() || self.deep.is_some()
    }

    pub fn encode(&self, f: &[f64], biz: Option<&BizStats>) -> Result<StackEncoding> {
        if !self.is_fitted() {
            return Err(Error::Unfitted("deep OPQ stage".into()));
        }
        let shallow = rq_encode(f, &self.shallow)?;
        let mut codes = shallow.codes.clone();
        let mut recon = shallow.recon();
        if let Some(deep) = &self.deep {
            let enc = opq_encode(shallow.last_residual(), biz, deep)?;
            codes.extend(enc.codes);
            math::axpy(1.0, &enc.residual_recon, &mut recon);
        }
        Ok(StackEncoding {
            sid: SemanticId(codes),
            shallow,
            recon,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut flat = Vec::new();
        for book in &self.shallow {
            for e in &book.entries {
                flat.extend_from_slice(e);
            }
            flat.extend_from_slice(&book.counts);
            for s in &book.sums {
                flat.extend_from_slice(s);
            }
        }
        if let Some(deep) = &self.deep {
            flat.extend_from_slice(&deep.rotation);
            for book in &deep.codebooks {
                for e in book {
                    flat.extend_from_slice(e);
                }
            }
        }
        blob::write_f64(path, 1, &flat)?;
        let meta = StackMeta {
            levels: self.levels.clone(),
            dim: self.dim(),
            decay: self.shallow[0].decay,
            betas: self.betas,
            deep: self.deep.as_ref().map(|d| DeepMeta {
                residual_dim: d.residual_dim,
                feat_dim: d.feat_dim,
                biz_norm: d.biz_norm.clone(),
                biz_weight: d.biz_weight,
                objective: d.objective.clone(),
            }),
        };
        std::fs::write(fusion::sidecar(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = fusion::sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(side.clone()),
            _ => e.into(),
        })?;
        let meta: StackMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        let (_, flat) = blob::read_f64(path)?;
        let mut cur = 0usize;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if cur + n > flat.len() {
                return Err(Error::format(path, "stack blob too short"));
            }
            let out = flat[cur..cur + n].to_vec();
            cur += n;
            Ok(out)
        };
        let d = meta.dim;
        let mut shallow = Vec::new();
        for &k in &meta.levels.shallow {
            let entries: Vec<Vec<f64>> = take(k * d)?.chunks(d).map(<[f64]>::to_vec).collect();
            let counts = take(k)?;
            let sums: Vec<Vec<f64>> = take(k * d)?.chunks(d).map(<[f64]>::to_vec).collect();
            shallow.push(EmaCodebook {
                entries,
                counts,
                sums,
                decay: meta.decay,
            });
        }
        let deep = match meta.deep {
            None => None,
            Some(dm) => {
                let n = dm.feat_dim;
                let m = meta.levels.deep.len();
                let rotation = take(n * n)?;
                let sub = n / m;
                let mut codebooks = Vec::new();
                for &k in &meta.levels.deep {
                    codebooks.push(take(k * sub)?.chunks(sub).map(<[f64]>::to_vec).collect());
                }
                Some(OpqParams {
                    residual_dim: dm.residual_dim,
                    feat_dim: n,
                    rotation,
                    codebooks,
                    biz_norm: dm.biz_norm,
                    biz_weight: dm.biz_weight,
                    objective: dm.objective,
                })
            }
        };
        if cur != flat.len() {
            return Err(Error::format(path, "trailing values in stack blob"));
        }
        Ok(Self {
            levels: meta.levels,
            shallow,
            betas: meta.betas,
            deep,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StackMeta {
    levels: LevelSpec,
    dim: usize,
    decay: f64,
    betas: [f64; 4],
    deep: Option<DeepMeta>,
}

#[derive(Serialize, Deserialize)]
struct DeepMeta {
    residual_dim: usize,
    feat_dim: usize,
    biz_norm: Option<BizNorm>,
    biz_weight: f64,
    objective: Vec<f64>,
}

/// Codes and pre-quantization anchors frozen for the straight-through surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct StraightThrough {
    pub codes: Vec<Vec<u16>>,
    pub anchors: Vec<Vec<f64>>,
}

/// Value and parameter gradient of the composite objective on one batch of input rows.
#[derive(Debug, Clone)]
pub struct RqLoss {
    pub value: f64,
    pub parts: [f64; 4],
    pub grad: FusionParams,
    pub frozen: StraightThrough,
    pub encodings: Vec<QuantResult>,
}

/// Composite objective `β₁L_cons + β₂L_mar + β₃L_commit + β₄L_hc` over rows `inputs` paired by
/// `pairs`. Commitment is averaged over rows and hierarchical consistency over pairs.
///
/// With `frozen = None`, codes come from greedy encoding at the current embeddings. Passing a
/// previous [`StraightThrough`] evaluates the surrogate `f̂ + (f − f₀)` with those codes, which
/// is the function whose exact gradient the straight-through estimator returns.
pub fn loss_rq<B: AsRef<[Vec<f64>]>>(
    params: &FusionParams,
    books: &[B],
    inputs: &[(Vec<f64>, Vec<f64>)],
    pairs: &[(usize, usize)],
    betas: [f64; 4],
    frozen: Option<&StraightThrough>,
) -> Result<RqLoss> {
    let caches: Vec<FuseCache> = inputs
        .iter()
        .map(|(x, y)| params.forward(x, y))
        .collect::<Result<_>>()?;
    let batch = FusedBatch::new(
        caches.iter().map(|c| c.f.clone()).collect(),
        caches.iter().map(|c| c.v.clone()).collect(),
        pairs.to_vec(),
    )?;
    let (lc, gc) = loss_cons(&batch, params.hyper.tau)?;
    let (lm, gm) = loss_margin(&batch, params.hyper.gamma)?;
    let mut df: Vec<Vec<f64>> = batch.f.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut dv: Vec<Vec<f64>> = df.clone();
    for k in 0..df.len() {
        math::axpy(betas[0], &gc.df[k], &mut df[k]);
        math::axpy(betas[1], &gm.df[k], &mut df[k]);
        math::axpy(betas[0], &gc.dv[k], &mut dv[k]);
        math::axpy(betas[1], &gm.dv[k], &mut dv[k]);
    }

    let n_rows = caches.len() as f64;
    let mut encodings = Vec::with_capacity(caches.len());
    let mut codes = Vec::with_capacity(caches.len());
    let mut anchors = Vec::with_capacity(caches.len());
    for (k, c) in caches.iter().enumerate() {
        let enc = match frozen {
            None => rq_encode(&c.f, books)?,
            Some(st) => {
                let chain = residual_chain(&c.f, books, &st.codes[k]);
                let mut recon = vec![0.0; c.f.len()];
                let mut per_level = Vec::new();
                for (book, &code) in books.iter().zip(&st.codes[k]) {
                    math::axpy(1.0, &book.as_ref()[code as usize], &mut recon);
                    per_level.push(recon.clone());
                }
                QuantResult {
                    codes: st.codes[k].clone(),
                    residuals: chain,
                    recon_per_level: per_level,
                }
            }
        };
        codes.push(enc.codes.clone());
        anchors.push(match frozen {
            None => c.f.clone(),
            Some(st) => st.anchors[k].clone(),
        });
        encodings.push(enc);
    }

    let mut commit = 0.0;
    for (k, enc) in encodings.iter().enumerate() {
        let (v, g) = super::loss_commit(&caches[k].f, books, &enc.codes);
        commit += v / n_rows;
        math::axpy(betas[2] / n_rows, &g, &mut df[k]);
    }

    let n_pairs = pairs.len() as f64;
    let mut hc = 0.0;
    for &(a, b) in pairs {
        let shifted = |k: usize| -> QuantResult {
            let mut q = encodings[k].clone();
            let offset: Vec<f64> = caches[k].f.iter().zip(&anchors[k]).map(|(x, y)| x - y).collect();
            for r in &mut q.recon_per_level {
                math::axpy(1.0, &offset, r);
            }
            q
        };
        let (v, ga, gb) = loss_hc(&shifted(a), &shifted(b));
        hc += v / n_pairs;
        math::axpy(betas[3] / n_pairs, &ga, &mut df[a]);
        math::axpy(betas[3] / n_pairs, &gb, &mut df[b]);
    }

    let mut grad = params.zeros_like();
    for (k, c) in caches.iter().enumerate() {
        params.backward(c, &df[k], &dv[k], &mut grad);
    }
    let parts = [lc, lm, commit, hc];
    let value = parts.iter().zip(&betas).map(|(p, b)| p * b).sum();
    Ok(RqLoss {
        value,
        parts,
        grad,
        frozen: StraightThrough { codes, anchors },
        encodings,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VrqTrace {
    pub epoch_loss: Vec<f64>,
    /// Fraction of same-item training pairs whose first code agrees, at initialization and
    /// after every epoch.
    pub c0_agreement: Vec<f64>,
    pub restarts: Vec<usize>,
    pub opq_objective: Vec<f64>,
}

fn c0_agreement<B: AsRef<[Vec<f64>]>>(
    params: &FusionParams,
    books: &[B],
    catalog: &Catalog,
    probe: &[ViewPair],
) -> Result<f64> {
    if probe.is_empty() {
        return Ok(0.0);
    }
    let mut same = 0usize;
    for p in probe {
        let (xa, ya) = fusion::view_inputs(catalog, p.item_a, p.view_a as usize);
        let (xb, yb) = fusion::view_inputs(catalog, p.item_b, p.view_b as usize);
        let fa = params.forward(&xa, &ya)?.f;
        let fb = params.forward(&xb, &yb)?.f;
        if rq_encode(&fa, &books[..1])?.codes == rq_encode(&fb, &books[..1])?.codes {
            same += 1;
        }
    }
    Ok(same as f64 / probe.len() as f64)
}

/// Fused embeddings of every training view, in item-major order.
pub fn fused_training_vectors(
    catalog: &Catalog,
    params: &FusionParams,
) -> Result<(Vec<Vec<f64>>, Vec<BizStats>)> {
    let mut vecs = Vec::new();
    let mut biz = Vec::new();
    for item in &catalog.items {
        for view in catalog.train_views() {
            let (x, y) = fusion::view_inputs(catalog, item.item_id, view);
            vecs.push(params.forward(&x, &y)?.f);
            biz.push(item.biz.clone());
        }
    }
    Ok((vecs, biz))
}

/// Trains fusion encoders and shallow codebooks jointly from RQ-KMeans centroids `init`, then
/// fits the deep OPQ stage on the final residuals of all training views.
pub fn train_vrq(
    catalog: &Catalog,
    fusion_params: &FusionParams,
    init: Vec<Codebook>,
    cfg: &VrqConfig,
) -> Result<(CodebookStack, FusionParams, VrqTrace)> {
    if cfg.batch == 0 {
        return Err(Error::InvalidConfig("batch must be at least 1".into()));
    }
    if !(cfg.decay > 0.0 && cfg.decay <= 1.0) {
        return Err(Error::InvalidConfig("decay must lie in (0, 1]".into()));
    }
    let mut stack = CodebookStack::from_books(cfg.levels.clone(), init, cfg.decay, cfg.betas)?;
    let mut params = fusion_params.clone();
    let mut pairs = catalog.train_pairs();
    if pairs.is_empty() {
        return Err(Error::Empty("catalog has no training pairs".into()));
    }
    let probe: Vec<ViewPair> = pairs.iter().copied().filter(|p| p.same_item()).take(1024).collect();
    let mut trace = VrqTrace::default();
    trace.c0_agreement.push(c0_agreement(&params, &stack.shallow, catalog, &probe)?);

    let mut rng = rng_for(cfg.seed, 200);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        let mut last_residuals: Vec<Vec<Vec<f64>>> = vec![Vec::new(); stack.shallow.len()];
        for chunk in pairs.chunks(cfg.batch) {
            let mut inputs = Vec::with_capacity(2 * chunk.len());
            for p in chunk {
                inputs.push(fusion::view_inputs(catalog, p.item_a, p.view_a as usize));
                inputs.push(fusion::view_inputs(catalog, p.item_b, p.view_b as usize));
            }
            let idx: Vec<(usize, usize)> = (0..chunk.len()).map(|i| (2 * i, 2 * i + 1)).collect();
            let out = loss_rq(&params, &stack.shallow, &inputs, &idx, cfg.betas, None)?;
            if !out.value.is_finite() || !out.grad.all_finite() {
                return Err(Error::TrainingDiverged {
                    stage: "vrq".into(),
                    step,
                });
            }
            math::sgd_step(&mut params, &out.grad, cfg.lr, cfg.clip);
            for (l, book) in stack.shallow.iter_mut().enumerate() {
                let assigned: Vec<(usize, &[f64])> = out
                    .encodings
                    .iter()
                    .map(|e| (e.codes[l] as usize, &e.residuals[l][..]))
                    .collect();
                book.update(&assigned);
                last_residuals[l] = out.encodings.iter().map(|e| e.residuals[l].clone()).collect();
            }
            total += out.value;
            batches += 1;
            step += 1;
        }
        let threshold = cfg.dead_fraction * (2 * cfg.batch) as f64;
        let mut restarted = 0;
        for (l, book) in stack.shallow.iter_mut().enumerate() {
            restarted += book.restart_dead(threshold, &last_residuals[l], &mut rng);
        }
        trace.restarts.push(restarted);
        trace.epoch_loss.push(total / batches as f64);
        trace.c0_agreement.push(c0_agreement(&params, &stack.shallow, catalog, &probe)?);
    }

    if !cfg.levels.deep.is_empty() {
        let (vecs, biz) = fused_training_vectors(catalog, &params)?;
        let residuals: Vec<Vec<f64>> = vecs
            .iter()
            .map(|f| rq_encode(f, &stack.shallow).map(|q| q.last_residual().to_vec()))
            .collect::<Result<_>>()?;
        let mut opq_cfg = OpqConfig::new(cfg.levels.deep.clone());
        opq_cfg.iters = cfg.opq_iters;
        opq_cfg.biz_weight = cfg.biz_weight;
        let deep = opq_fit(&residuals, &biz, &opq_cfg, cfg.seed)?;
        trace.opq_objective = deep.objective.clone();
        stack.deep = Some(deep);
    }
    Ok((stack, params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_catalog, CatalogConfig};
    use crate::numgrad::{numgrad, rel_error};
    use crate::quantize::rq_kmeans_fit;
    use rand::Rng;

    #[test]
    fn zero_rate_and_unit_decay_leave_codebooks_alone() {
        let catalog = generate_catalog(&CatalogConfig::small(7)).unwrap();
        let fp = FusionParams::new(16, 16, 8, 8, 1);
        let (vecs, _) = fused_training_vectors(&catalog, &fp).unwrap();
        let init = rq_kmeans_fit(&vecs, &[4, 4], 1).unwrap();
        let cfg = VrqConfig {
            levels: "4,4|2".parse().unwrap(),
            epochs: 2,
            lr: 0.0,
            decay: 1.0,
            ..VrqConfig::default()
        };
        let (stack, params, _) = train_vrq(&catalog, &fp, init.clone(), &cfg).unwrap();
        assert_eq!(params, fp);
        for (book, orig) in stack.shallow.iter().zip(&init) {
            assert_eq!(&book.entries, orig);
        }
    }

    #[test]
    fn composite_gradient_matches_surrogate() {
        let fp = FusionParams::new(5, 3, 4, 4, 3);
        let mut rng = rng_for(3, 9);
        let inputs: Vec<(Vec<f64>, Vec<f64>)> = (0..4)
            .map(|_| {
                (
                    (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let books: Vec<Codebook> = (0..2)
            .map(|_| {
                (0..3)
                    .map(|_| (0..4).map(|_| rng.random_range(-0.5..0.5)).collect())
                    .collect()
            })
            .collect();
        let pairs = [(0, 1), (2, 3)];
        let betas = [1.0, 0.25, 1.0, 0.5];
        let base = loss_rq(&fp, &books, &inputs, &pairs, betas, None).unwrap();
        let num = numgrad(
            |w| {
                let mut q = fp.clone();
                q.assign_flat(w);
                loss_rq(&q, &books, &inputs, &pairs, betas, Some(&base.frozen))
                    .unwrap()
                    .value
            },
            &fp.flatten(),
            1e-6,
        )
        .unwrap();
        assert!(rel_error(&base.grad.flatten(), &num, 1e-8) < 1e-4);
    }

    #[test]
    fn stack_roundtrips_through_disk() {
        let catalog = generate_catalog(&CatalogConfig::small(7)).unwrap();
        let fp = FusionParams::new(16, 16, 8, 8, 1);
        let (vecs, _) = fused_training_vectors(&catalog, &fp).unwrap();
        let init = rq_kmeans_fit(&vecs, &[4, 4], 1).unwrap();
        let cfg = VrqConfig {
            levels: "4,4|2,2".parse().unwrap(),
            epochs: 1,
            ..VrqConfig::default()
        };
        let (stack, ..) = train_vrq(&catalog, &fp, init, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vrq.bin");
        stack.save(&p).unwrap();
        assert_eq!(CodebookStack::load(&p).unwrap(), stack);
    }
}
