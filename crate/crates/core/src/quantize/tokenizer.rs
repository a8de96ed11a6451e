//! Item tokenizers behind one interface: VRQ and the baselines it is compared with.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fsq::{fsq_decode, fsq_encode};
use super::{
    opq_encode, opq_fit, rq_encode, rq_kmeans_fit, Codebook, CodebookStack, EmaCodebook, LevelSpec,
    OpqConfig, OpqParams, SemanticId,
};
use crate::corpus::{BizStats, Catalog, TokenMatrix};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::math::{self, rng_for};

/// A semantic ID plus the reconstruction it stands for, in the encoder's input space.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub sid: SemanticId,
    pub recon: Vec<f64>,
}

pub trait SidEncoder: Send + Sync {
    fn levels(&self) -> Vec<usize>;
    fn encode(&self, feature: &[f64], biz: Option<&BizStats>) -> Result<Encoded>;
}

impl SidEncoder for CodebookStack {
    fn levels(&self) -> Vec<usize> {
        self.levels.all()
    }
    fn encode(&self, feature: &[f64], biz: Option<&BizStats>) -> Result<Encoded> {
        let e = CodebookStack::encode(self, feature, biz)?;
        Ok(Encoded {
            sid: e.sid,
            recon: e.recon,
        })
    }
}

/// Plain residual quantization over every level (RQ-KMeans or EMA-refined codebooks).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualEncoder {
    pub books: Vec<Codebook>,
}

impl SidEncoder for ResidualEncoder {
    fn levels(&self) -> Vec<usize> {
        self.books.iter().map(Vec::len).collect()
    }
    fn encode(&self, feature: &[f64], _biz: Option<&BizStats>) -> Result<Encoded> {
        let q = rq_encode(feature, &self.books)?;
        Ok(Encoded {
            recon: q.recon(),
            sid: SemanticId(q.codes),
        })
    }
}

/// Product quantization with a learned rotation, one subspace per level.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductEncoder {
    pub params: OpqParams,
}

impl SidEncoder for ProductEncoder {
    fn levels(&self) -> Vec<usize> {
        self.params.sub_sizes()
    }
    fn encode(&self, feature: &[f64], biz: Option<&BizStats>) -> Result<Encoded> {
        let c = opq_encode(feature, biz, &self.params)?;
        Ok(Encoded {
            sid: SemanticId(c.codes),
            recon: c.residual_recon,
        })
    }
}

/// Scalar quantization of every coordinate after standardization.
///
/// Each SID level hashes one contiguous group of coordinates: the group's bucket indices read
/// as a mixed-radix number, reduced modulo that level's size.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarEncoder {
    pub levels_per_dim: Vec<u32>,
    pub mean: Vec<f64>,
    /// Standardized values are divided by this before clamping.
    pub scale: Vec<f64>,
    pub sid_levels: Vec<usize>,
}

impl ScalarEncoder {
    pub fn fit(vectors: &[Vec<f64>], levels: u32, sid_levels: Vec<usize>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::Empty("no vectors to fit".into()));
        }
        let d = vectors[0].len();
        if sid_levels.len() > d {
            return Err(Error::InvalidConfig("more SID levels than coordinates".into()));
        }
        let mean = math::mean_rows(vectors);
        let mut var = vec![0.0; d];
        for v in vectors {
            for k in 0..d {
                var[k] += (v[k] - mean[k]).powi(2) / vectors.len() as f64;
            }
        }
        // Two standard deviations map onto the clamp range.
        let scale = var.iter().map(|s| 2.0 * s.sqrt().max(1e-12)).collect();
        Ok(Self {
            levels_per_dim: vec![levels; d],
            mean,
            scale,
            sid_levels,
        })
    }

    fn group(&self, l: usize) -> std::ops::Range<usize> {
        let d = self.mean.len();
        let n = self.sid_levels.len();
        (l * d / n)..((l + 1) * d / n)
    }
}

impl SidEncoder for ScalarEncoder {
    fn levels(&self) -> Vec<usize> {
        self.sid_levels.clone()
    }
    fn encode(&self, feature: &[f64], _biz: Option<&BizStats>) -> Result<Encoded> {
        if feature.len() != self.mean.len() {
            return Err(Error::Shape("feature width differs from fitted width".into()));
        }
        let z: Vec<f64> = (0..feature.len())
            .map(|k| (feature[k] - self.mean[k]) / self.scale[k])
            .collect();
        let buckets = fsq_encode(&z, &self.levels_per_dim)?;
        let back = fsq_decode(&buckets, &self.levels_per_dim);
        let recon = (0..feature.len())
            .map(|k| self.mean[k] + back[k] * self.scale[k])
            .collect();
        let codes = (0..self.sid_levels.len())
            .map(|l| {
                let k = self.sid_levels[l] as u64;
                let mut acc = 0u64;
                for i in self.group(l) {
                    acc = (acc * self.levels_per_dim[i] as u64 + buckets[i] as u64) % k;
                }
                acc as u16
            })
            .collect();
        Ok(Encoded {
            sid: SemanticId(codes),
            recon,
        })
    }
}

/// Passes features through unchanged; every item gets SID zero. Test hook for QAS.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEncoder {
    pub sid_levels: Vec<usize>,
}

impl SidEncoder for IdentityEncoder {
    fn levels(&self) -> Vec<usize> {
        self.sid_levels.clone()
    }
    fn encode(&self, feature: &[f64], _biz: Option<&BizStats>) -> Result<Encoded> {
        Ok(Encoded {
            sid: SemanticId(vec![0; self.sid_levels.len()]),
            recon: feature.to_vec(),
        })
    }
}

/// Nearest-centroid category classifier over training-view image features. Query images carry
/// no category label, so the fused encoders see this prediction instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryClassifier {
    pub centroids: Vec<Vec<f64>>,
}

impl CategoryClassifier {
    pub fn fit(catalog: &Catalog) -> Self {
        let d = catalog.dim();
        let c = catalog.n_categories();
        let mut sums = vec![vec![0.0; d]; c];
        for item in &catalog.items {
            for view in catalog.train_views() {
                let x = catalog.view_feature(item.item_id, view);
                math::axpy(1.0, &x, &mut sums[item.category_id as usize]);
            }
        }
        Self {
            centroids: sums.iter().map(|s| math::normalized(s)).collect(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let sims: Vec<f64> = self.centroids.iter().map(|c| math::dot(c, x)).collect();
        math::argmax(&sims)
    }
}

/// Which representation of an image the encoder quantizes.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSpace {
    /// The normalized pooled image feature `x`.
    Image,
    /// The fused embedding `f` of `x` and its category vector.
    Fused(FusionParams),
}

/// An encoder bound to its input space.
pub struct Tokenizer {
    pub name: String,
    pub input: InputSpace,
    pub encoder: Box<dyn SidEncoder>,
    pub classifier: CategoryClassifier,
}

impl Tokenizer {
    pub fn levels(&self) -> Vec<usize> {
        self.encoder.levels()
    }

    fn feature(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        match &self.input {
            InputSpace::Image => Ok(x.to_vec()),
            InputSpace::Fused(p) => Ok(p.forward(x, y)?.f),
        }
    }

    /// The encoder-space vector of a catalog image, using its true category.
    pub fn view_representation(&self, catalog: &Catalog, item: u32, view: usize) -> Result<Vec<f64>> {
        let x = catalog.view_feature(item, view);
        self.feature(&x, catalog.category_vec(item))
    }

    /// Encodes a catalog image with its true category and business statistics.
    pub fn encode_view(&self, catalog: &Catalog, item: u32, view: usize) -> Result<Encoded> {
        let f = self.view_representation(catalog, item, view)?;
        self.encoder.encode(&f, Some(&catalog.item(item).biz))
    }

    /// Representation of an unlabeled query image (predicted category, no business data).
    pub fn query_feature(&self, catalog: &Catalog, tokens: &TokenMatrix) -> Result<Vec<f64>> {
        let x = math::normalized(tokens.pooled());
        let c = self.classifier.predict(&x);
        self.feature(&x, &catalog.category_vecs[c])
    }

    pub fn encode_query(&self, catalog: &Catalog, tokens: &TokenMatrix) -> Result<Encoded> {
        let f = self.query_feature(catalog, tokens)?;
        self.encoder.encode(&f, None)
    }
}

/// Image features of every training view, item-major.
pub fn image_training_vectors(catalog: &Catalog) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for item in &catalog.items {
        for view in catalog.train_views() {
            out.push(catalog.view_feature(item.item_id, view));
        }
    }
    out
}

/// RQ-KMeans over all levels on image features.
pub fn fit_rq_kmeans(catalog: &Catalog, levels: &LevelSpec, seed: u64) -> Result<Tokenizer> {
    let vecs = image_training_vectors(catalog);
    Ok(Tokenizer {
        name: "rq-kmeans".into(),
        input: InputSpace::Image,
        encoder: Box::new(ResidualEncoder {
            books: rq_kmeans_fit(&vecs, &levels.all(), seed)?,
        }),
        classifier: CategoryClassifier::fit(catalog),
    })
}

/// RQ-VAE-style codebooks: RQ-KMeans initialization refined by EMA updates with dead-entry
/// restarts, minimizing commitment on fixed image features.
pub fn fit_rq_vae(
    catalog: &Catalog,
    levels: &LevelSpec,
    epochs: usize,
    batch: usize,
    decay: f64,
    seed: u64,
) -> Result<Tokenizer> {
    use rand::seq::SliceRandom;
    let mut vecs = image_training_vectors(catalog);
    let init = rq_kmeans_fit(&vecs, &levels.all(), seed)?;
    let mut books: Vec<EmaCodebook> = init.into_iter().map(|b| EmaCodebook::new(b, decay)).collect();
    let mut rng = rng_for(seed, 300);
    for _ in 0..epochs {
        vecs.shuffle(&mut rng);
        let mut last: Vec<Vec<Vec<f64>>> = vec![Vec::new(); books.len()];
        for chunk in vecs.chunks(batch.max(1)) {
            let encs: Vec<_> = chunk.iter().map(|f| rq_encode(f, &books)).collect::<Result<_>>()?;
            for (l, book) in books.iter_mut().enumerate() {
                let assigned: Vec<(usize, &[f64])> = encs
                    .iter()
                    .map(|e| (e.codes[l] as usize, &e.residuals[l][..]))
                    .collect();
                book.update(&assigned);
                last[l] = encs.iter().map(|e| e.residuals[l].clone()).collect();
            }
        }
        for (l, book) in books.iter_mut().enumerate() {
            book.restart_dead(1e-3 * batch as f64, &last[l], &mut rng);
        }
    }
    Ok(Tokenizer {
        name: "rq-vae".into(),
        input: InputSpace::Image,
        encoder: Box::new(ResidualEncoder {
            books: books.into_iter().map(|b| b.entries).collect(),
        }),
        classifier: CategoryClassifier::fit(catalog),
    })
}

/// OPQ over image features, one subspace per SID level.
pub fn fit_opq(catalog: &Catalog, levels: &LevelSpec, iters: usize, seed: u64) -> Result<Tokenizer> {
    let vecs = image_training_vectors(catalog);
    let mut cfg = OpqConfig::new(levels.all());
    cfg.use_biz = false;
    cfg.iters = iters;
    Ok(Tokenizer {
        name: "opq".into(),
        input: InputSpace::Image,
        encoder: Box::new(ProductEncoder {
            params: opq_fit(&vecs, &[], &cfg, seed)?,
        }),
        classifier: CategoryClassifier::fit(catalog),
    })
}

/// Five-level scalar quantization of every image-feature coordinate.
pub fn fit_fsq(catalog: &Catalog, levels: &LevelSpec) -> Result<Tokenizer> {
    let vecs = image_training_vectors(catalog);
    Ok(Tokenizer {
        name: "fsq".into(),
        input: InputSpace::Image,
        encoder: Box::new(ScalarEncoder::fit(&vecs, 5, levels.all())?),
        classifier: CategoryClassifier::fit(catalog),
    })
}

pub fn vrq_tokenizer(catalog: &Catalog, fusion: FusionParams, stack: CodebookStack) -> Tokenizer {
    Tokenizer {
        name: "vrq".into(),
        input: InputSpace::Fused(fusion),
        encoder: Box::new(stack),
        classifier: CategoryClassifier::fit(catalog),
    }
}

pub const SID_TABLE_VERSION: u32 = 1;

/// SIDs of every (item, view) plus the canonical per-item SID (view 0).
#[derive(Debug, Clone, PartialEq)]
pub struct SidTable {
    pub levels: Vec<usize>,
    /// `(item_id, view) → SID`, ordered by item then view.
    pub entries: BTreeMap<(u32, u16), SemanticId>,
}

impl SidTable {
    pub fn canonical(&self, item: u32) -> Option<&SemanticId> {
        self.entries.get(&(item, 0))
    }

    /// Canonical SIDs in item-id order.
    pub fn canonical_sids(&self) -> Vec<(u32, SemanticId)> {
        self.entries
            .iter()
            .filter(|((_, v), _)| *v == 0)
            .map(|(&(i, _), s)| (i, s.clone()))
            .collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let levels: Vec<String> = self.levels.iter().map(|k| k.to_string()).collect();
        writeln!(w, "# sids v{SID_TABLE_VERSION} levels={}", levels.join(","))?;
        for ((item, view), sid) in &self.entries {
            writeln!(w, "{item}\t{view}\t{sid}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::format(path, "empty SID table"))?;
        let rest = header
            .strip_prefix("# sids v")
            .ok_or_else(|| Error::format(path, "missing header"))?;
        let (version, levels) = rest
            .split_once(" levels=")
            .ok_or_else(|| Error::format(path, "malformed header"))?;
        let version: u32 = version.parse().map_err(|_| Error::format(path, "bad version"))?;
        if version != SID_TABLE_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                expected: SID_TABLE_VERSION as u16,
                found: version as u16,
            });
        }
        let levels: Vec<usize> = levels
            .split(',')
            .map(|k| k.parse().map_err(|_| Error::format(path, "bad level size")))
            .collect::<Result<_>>()?;
        let mut entries = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::format(path, format!("line {}: expected 3 columns", n + 2)));
            }
            let bad = || Error::format(path, format!("line {}: bad field", n + 2));
            let item: u32 = cols[0].parse().map_err(|_| bad())?;
            let view: u16 = cols[1].parse().map_err(|_| bad())?;
            let sid: SemanticId = cols[2].parse().map_err(|_| bad())?;
            sid.validate(&levels).map_err(|_| bad())?;
            entries.insert((item, view), sid);
        }
        Ok(Self { levels, entries })
    }
}

/// Encodes every view of every item.
pub fn encode_catalog(catalog: &Catalog, tok: &Tokenizer) -> Result<SidTable> {
    let mut entries = BTreeMap::new();
    for item in &catalog.items {
        for view in 0..item.views.len() {
            let e = tok.encode_view(catalog, item.item_id, view)?;
            entries.insert((item.item_id, view as u16), e.sid);
        }
    }
    Ok(SidTable {
        levels: tok.levels(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_codes_stay_in_range() {
        let vecs: Vec<Vec<f64>> = (0..30)
            .map(|i| (0..10).map(|k| ((i * 7 + k * 3) % 11) as f64 / 11.0 - 0.5).collect())
            .collect();
        let enc = ScalarEncoder::fit(&vecs, 5, vec![8, 8, 8, 4, 4]).unwrap();
        for v in &vecs {
            let e = enc.encode(v, None).unwrap();
            e.sid.validate(&[8, 8, 8, 4, 4]).unwrap();
            assert_eq!(e.recon.len(), 10);
        }
    }

    #[test]
    fn tsv_roundtrip() {
        let mut entries = BTreeMap::new();
        entries.insert((0, 0), SemanticId(vec![1, 2, 3]));
        entries.insert((0, 1), SemanticId(vec![1, 2, 0]));
        entries.insert((4, 0), SemanticId(vec![0, 0, 1]));
        let t = SidTable {
            levels: vec![4, 4, 4],
            entries,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sids.tsv");
        t.write_tsv(&p).unwrap();
        assert_eq!(SidTable::read_tsv(&p).unwrap(), t);
        assert_eq!(t.canonical_sids().len(), 2);
    }
}
