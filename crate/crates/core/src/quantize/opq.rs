//! Optimized product quantization of deep residuals joined with business features.
//!
//! Features `z = [residual; w·standardized biz; zero padding]` are rotated by an orthogonal `R`
//! and split into `M` equal chunks, each with its own k-means codebook. Fitting alternates
//! Lloyd updates of the sub-codebooks with an orthogonal Procrustes update of `R`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{level_stream, BizNorm};
use crate::corpus::BizStats;
use crate::error::{Error, Result};
use crate::kmeans::{self, KMeansConfig};
use crate::math;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpqConfig {
    /// Entries per subspace; its length is the number of subspaces `M`.
    pub sub_sizes: Vec<usize>,
    /// Rotation updates; zero keeps `R = I`.
    pub iters: usize,
    /// Append standardized business features to the residual.
    pub use_biz: bool,
    /// Scale applied to the standardized business features.
    pub biz_weight: f64,
    /// Zero-pad `z` up to a multiple of `M` instead of rejecting the width.
    pub pad: bool,
    /// Lloyd iterations per alternation after the initial fit.
    pub lloyd_iters: usize,
}

impl OpqConfig {
    pub fn new(sub_sizes: Vec<usize>) -> Self {
        Self {
            sub_sizes,
            iters: 10,
            use_biz: true,
            biz_weight: 1.0,
            pad: true,
            lloyd_iters: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpqParams {
    pub residual_dim: usize,
    pub feat_dim: usize,
    /// Row-major `feat_dim × feat_dim` orthogonal rotation.
    pub rotation: Vec<f64>,
    /// `M` sub-codebooks, each `K_m × (feat_dim / M)`.
    pub codebooks: Vec<Vec<Vec<f64>>>,
    pub biz_norm: Option<BizNorm>,
    pub biz_weight: f64,
    /// Objective after each alternation (the first entry is the initial fit).
    pub objective: Vec<f64>,
}

impl OpqParams {
    pub fn n_subspaces(&self) -> usize {
        self.codebooks.len()
    }

    pub fn sub_dim(&self) -> usize {
        self.feat_dim / self.codebooks.len()
    }

    pub fn sub_sizes(&self) -> Vec<usize> {
        self.codebooks.iter().map(Vec::len).collect()
    }

    /// Joined feature vector `z` before rotation.
    pub fn features(&self, residual: &[f64], biz: Option<&BizStats>) -> Vec<f64> {
        let mut z = residual.to_vec();
        if let Some(norm) = &self.biz_norm {
            z.extend(norm.apply(biz).iter().map(|v| v * self.biz_weight));
        }
        z.resize(self.feat_dim, 0.0);
        z
    }

    pub fn rotate(&self, z: &[f64]) -> Vec<f64> {
        rotate(&self.rotation, self.feat_dim, z)
    }

    /// `Rᵀ y`.
    pub fn unrotate(&self, y: &[f64]) -> Vec<f64> {
        let n = self.feat_dim;
        let mut out = vec![0.0; n];
        for (i, &yi) in y.iter().enumerate() {
            math::axpy(yi, &self.rotation[i * n..(i + 1) * n], &mut out);
        }
        out
    }

    /// `max |RᵀR − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.feat_dim;
        let r = DMatrix::from_row_slice(n, n, &self.rotation);
        let g = r.transpose() * &r - DMatrix::<f64>::identity(n, n);
        g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn rotate(r: &[f64], n: usize, z: &[f64]) -> Vec<f64> {
    (0..n).map(|i| math::dot(&r[i * n..(i + 1) * n], z)).collect()
}

fn split(y: &[f64], m: usize) -> Vec<Vec<f64>> {
    let s = y.len() / m;
    (0..m).map(|k| y[k * s..(k + 1) * s].to_vec()).collect()
}

fn objective(ys: &[Vec<f64>], books: &[Vec<Vec<f64>>]) -> f64 {
    let m = books.len();
    ys.iter()
        .map(|y| {
            split(y, m)
                .iter()
                .zip(books)
                .map(|(chunk, book)| kmeans::nearest(book, chunk).1)
                .sum::<f64>()
        })
        .sum()
}

/// Fits rotation and sub-codebooks. The objective trace is non-increasing.
pub fn opq_fit(
    residuals: &[Vec<f64>],
    biz: &[BizStats],
    cfg: &OpqConfig,
    seed: u64,
) -> Result<OpqParams> {
    let m = cfg.sub_sizes.len();
    if m == 0 {
        return Err(Error::InvalidConfig("OPQ needs at least one subspace".into()));
    }
    if residuals.is_empty() {
        return Err(Error::Empty("no residuals to fit".into()));
    }
    if cfg.use_biz && biz.len() != residuals.len() {
        return Err(Error::Shape("one business record per residual required".into()));
    }
    let d = residuals[0].len();
    let b = if cfg.use_biz { 3 } else { 0 };
    let raw = d + b;
    let feat_dim = if raw % m == 0 {
        raw
    } else if cfg.pad {
        raw.div_ceil(m) * m
    } else {
        return Err(Error::InvalidConfig(format!(
            "feature width {raw} is not divisible by {m} subspaces"
        )));
    };
    if let Some(&k) = cfg.sub_sizes.iter().max() {
        if residuals.len() < k {
            return Err(Error::Infeasible(format!(
                "{} residuals cannot fill {k} entries",
                residuals.len()
            )));
        }
    }
    let biz_norm = if cfg.use_biz { Some(BizNorm::fit(biz)?) } else { None };
    let mut params = OpqParams {
        residual_dim: d,
        feat_dim,
        rotation: DMatrix::<f64>::identity(feat_dim, feat_dim)
            .transpose()
            .as_slice()
            .to_vec(),
        codebooks: Vec::new(),
        biz_norm,
        biz_weight: cfg.biz_weight,
        objective: Vec::new(),
    };
    let zs: Vec<Vec<f64>> = residuals
        .iter()
        .enumerate()
        .map(|(i, r)| params.features(r, biz.get(i).filter(|_| cfg.use_biz)))
        .collect();

    let fit_subspaces = |ys: &[Vec<f64>], init: Option<&[Vec<Vec<f64>>]>| -> Result<Vec<Vec<Vec<f64>>>> {
        let chunks: Vec<Vec<Vec<f64>>> = ys.iter().map(|y| split(y, m)).collect();
        (0..m)
            .map(|s| {
                let pts: Vec<Vec<f64>> = chunks.iter().map(|c| c[s].clone()).collect();
                match init {
                    None => Ok(kmeans::kmeans(
                        &pts,
                        cfg.sub_sizes[s],
                        seed,
                        level_stream(s),
                        KMeansConfig::default(),
                    )?
                    .centroids),
                    Some(books) => Ok(kmeans::lloyd(
                        &pts,
                        books[s].clone(),
                        KMeansConfig {
                            max_iters: cfg.lloyd_iters.max(1),
                            tol: 0.0,
                        },
                    )
                    .centroids),
                }
            })
            .collect()
    };

    let mut ys: Vec<Vec<f64>> = zs.clone();
    params.codebooks = fit_subspaces(&ys, None)?;
    params.objective.push(objective(&ys, &params.codebooks));

    for _ in 0..cfg.iters {
        // Procrustes: R = U Vᵀ from the SVD of Σ q(y) zᵀ.
        let mut acc = DMatrix::<f64>::zeros(feat_dim, feat_dim);
        for (z, y) in zs.iter().zip(&ys) {
            let q: Vec<f64> = split(y, m)
                .iter()
                .zip(&params.codebooks)
                .flat_map(|(chunk, book)| book[kmeans::nearest(book, chunk).0].clone())
                .collect();
            for i in 0..feat_dim {
                if q[i] == 0.0 {
                    continue;
                }
                for j in 0..feat_dim {
                    acc[(i, j)] += q[i] * z[j];
                }
            }
        }
        let svd = acc.svd(true, true);
        let (u, vt) = match (svd.u, svd.v_t) {
            (Some(u), Some(vt)) => (u, vt),
            _ => return Err(Error::NumericalDomain("SVD failed in OPQ".into())),
        };
        let r = u * vt;
        let mut row_major = Vec::with_capacity(feat_dim * feat_dim);
        for i in 0..feat_dim {
            for j in 0..feat_dim {
                row_major.push(r[(i, j)]);
            }
        }
        let candidate_ys: Vec<Vec<f64>> = zs.iter().map(|z| rotate(&row_major, feat_dim, z)).collect();
        let candidate_books = fit_subspaces(&candidate_ys, Some(&params.codebooks))?;
        let value = objective(&candidate_ys, &candidate_books);
        let prev = *params.objective.last().unwrap();
        if value <= prev {
            params.rotation = row_major;
            params.codebooks = candidate_books;
            ys = candidate_ys;
            params.objective.push(value);
        } else {
            // Floating-point noise in the SVD can break exact descent; keep the old state.
            params.objective.push(prev);
        }
    }
    Ok(params)
}

/// Deep codes and the deep reconstruction mapped back to residual coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct OpqCode {
    pub codes: Vec<u16>,
    /// `(Rᵀ q)` restricted to the residual coordinates.
    pub residual_recon: Vec<f64>,
    /// Squared error in rotated feature space.
    pub error: f64,
}

pub fn opq_encode(residual: &[f64], biz: Option<&BizStats>, params: &OpqParams) -> Result<OpqCode> {
    if residual.len() != params.residual_dim {
        return Err(Error::Shape(format!(
            "residual of width {} for OPQ fitted on {}",
            residual.len(),
            params.residual_dim
        )));
    }
    if params.codebooks.is_empty() {
        return Err(Error::Unfitted("OPQ codebooks".into()));
    }
    let y = params.rotate(&params.features(residual, biz));
    let mut codes = Vec::with_capacity(params.n_subspaces());
    let mut q = Vec::with_capacity(params.feat_dim);
    let mut error = 0.0;
    for (chunk, book) in split(&y, params.n_subspaces()).iter().zip(&params.codebooks) {
        let (c, d) = kmeans::nearest(book, chunk);
        codes.push(c as u16);
        q.extend_from_slice(&book[c]);
        error += d;
    }
    let mut back = params.unrotate(&q);
    back.truncate(params.residual_dim);
    Ok(OpqCode {
        codes,
        residual_recon: back,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng_for;
    use crate::quantize::rq_kmeans_fit;
    use rand::Rng;

    fn biz(clicks: u64) -> BizStats {
        BizStats {
            clicks_30d: clicks,
            gmv_30d: 0.0,
            orders_30d: 0,
            price: 10.0,
        }
    }

    fn cloud(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, 0);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn single_subspace_without_rotation_is_kmeans() {
        let pts = cloud(40, 4, 1);
        let mut cfg = OpqConfig::new(vec![5]);
        cfg.iters = 0;
        cfg.use_biz = false;
        let p = opq_fit(&pts, &[], &cfg, 9).unwrap();
        let books = rq_kmeans_fit(&pts, &[5], 9).unwrap();
        assert_eq!(p.codebooks[0], books[0]);
        assert_eq!(p.orthogonality_error(), 0.0);
    }

    #[test]
    fn objective_descends_and_rotation_stays_orthogonal() {
        let mut pts = cloud(120, 5, 2);
        // Correlated coordinates give the rotation something to find.
        for p in &mut pts {
            p[1] = 0.8 * p[0] + 0.2 * p[1];
        }
        let stats: Vec<BizStats> = (0..120).map(|i| biz(i as u64 * 7)).collect();
        let cfg = OpqConfig::new(vec![4, 4]);
        let p = opq_fit(&pts, &stats, &cfg, 3).unwrap();
        assert_eq!(p.feat_dim, 8);
        for w in p.objective.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(p.orthogonality_error() < 1e-6);

        let mut plain = cfg.clone();
        plain.iters = 0;
        let q = opq_fit(&pts, &stats, &plain, 3).unwrap();
        assert!(p.objective.last().unwrap() <= q.objective.last().unwrap());
    }

    #[test]
    fn indivisible_width_without_padding_is_config_error() {
        let pts = cloud(10, 4, 3);
        let mut cfg = OpqConfig::new(vec![2, 2]);
        cfg.pad = false;
        let stats: Vec<BizStats> = (0..10).map(|i| biz(i)).collect();
        assert!(matches!(
            opq_fit(&pts, &stats, &cfg, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn business_features_separate_identical_residuals() {
        let mut pts = Vec::new();
        let mut stats = Vec::new();
        for i in 0..20 {
            pts.push(vec![0.1, -0.2, 0.3]);
            stats.push(biz(if i % 2 == 0 { 0 } else { 10_000 }));
        }
        let mut cfg = OpqConfig::new(vec![2]);
        cfg.iters = 0;
        cfg.pad = true;
        let p = opq_fit(&pts, &stats, &cfg, 5).unwrap();
        let a = opq_encode(&pts[0], Some(&biz(0)), &p).unwrap();
        let b = opq_encode(&pts[0], Some(&biz(10_000)), &p).unwrap();
        assert_ne!(a.codes, b.codes);
        assert!(a.error < 1e-20 && b.error < 1e-20);
    }
}
