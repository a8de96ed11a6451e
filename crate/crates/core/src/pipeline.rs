//! End-to-end wiring shared by the command-line driver, the examples and the acceptance tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codemetrics::{CodeReport, EvalPair, RankedList, RetrievalScores};
use crate::corpus::{Catalog, CatalogConfig, TokenMatrix};
use crate::decode::{retrieve, RetrieveConfig, ScorerQuery, SidTrie};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionParams, FusionTrace, FusionTrainConfig};
use crate::prune::{prune_tokens, time_decode, train_pruned, CurriculumSchedule, PruneConfig, INFERENCE_SEED};
use crate::genmodel::{
    pair_examples, pretrain_examples, session_examples, train_dpo, train_personalized_sft, train_pretrain,
    train_sft, GrData, ScorerConfig, ScorerInput, ScorerParams, Stage, StageConfig, StageTrace,
};
use crate::quantize::tokenizer::{self, encode_catalog, Tokenizer};
use crate::quantize::vrq::{fused_training_vectors, VrqTrace};
use crate::quantize::{rq_kmeans_fit, train_vrq, CodebookStack, LevelSpec, SidTable, VrqConfig};

/// Cutoffs reported for retrieval.
pub const KS: [usize; 3] = [1, 4, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub catalog: CatalogConfig,
    pub levels: LevelSpec,
    pub fusion_dim: usize,
    pub fusion_hidden: usize,
    pub fusion: FusionTrainConfig,
    pub vrq: VrqConfig,
    pub pretrain: StageConfig,
    pub sft: StageConfig,
    pub psft: StageConfig,
    pub dpo: StageConfig,
    /// Pruned-student training; `epochs` is the curriculum length.
    pub prune: StageConfig,
    pub retrieve: RetrieveConfig,
    /// Fraction of sessions (the latest) held out for evaluation.
    pub session_holdout: f64,
}

impl PipelineConfig {
    pub fn standard(seed: u64) -> Self {
        let stage = |epochs: usize, lr: f64| StageConfig {
            epochs,
            lr,
            seed,
            ..StageConfig::default()
        };
        Self {
            catalog: CatalogConfig::standard(seed),
            levels: LevelSpec::desk(),
            fusion_dim: 64,
            fusion_hidden: 64,
            fusion: FusionTrainConfig {
                seed,
                ..FusionTrainConfig::default()
            },
            vrq: VrqConfig {
                seed,
                ..VrqConfig::default()
            },
            pretrain: stage(15, 0.05),
            sft: stage(4, 0.05),
            psft: stage(6, 0.05),
            dpo: StageConfig {
                dpo_anchor: 1.0,
                ..stage(2, 0.02)
            },
            prune: stage(4, 0.02),
            retrieve: RetrieveConfig::default(),
            session_holdout: 0.2,
        }
    }

    /// A catalog small enough for unit tests and quick examples.
    pub fn small(seed: u64) -> Self {
        let mut c = Self::standard(seed);
        c.catalog = CatalogConfig::small(seed);
        c.levels = "4,4|2,2".parse().expect("literal level spec");
        c.vrq.levels = c.levels.clone();
        c.fusion.epochs = 5;
        c.vrq.epochs = 3;
        c.pretrain.epochs = 6;
        c
    }

    pub fn stage_config(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Sft => &self.sft,
            Stage::Pruned => &self.prune,
            Stage::Psft => &self.psft,
            Stage::Dpo => &self.dpo,
        }
    }

    pub fn stage_config_mut(&mut self, stage: Stage) -> &mut StageConfig {
        match stage {
            Stage::Pretrain => &mut self.pretrain,
            Stage::Sft => &mut self.sft,
            Stage::Pruned => &mut self.prune,
            Stage::Psft => &mut self.psft,
            Stage::Dpo => &mut self.dpo,
        }
    }
}

pub fn fit_fusion(catalog: &Catalog, cfg: &PipelineConfig) -> Result<(FusionParams, FusionTrace)> {
    let init = FusionParams::new(
        catalog.dim(),
        catalog.config.category_dim,
        cfg.fusion_dim,
        cfg.fusion_hidden,
        cfg.fusion.seed,
    );
    fusion::train_fusion(catalog, &init, &cfg.fusion)
}

/// RQ-KMeans initialization of the shallow levels on fused features, then joint training.
pub fn fit_vrq(
    catalog: &Catalog,
    fusion: &FusionParams,
    vrq: &VrqConfig,
) -> Result<(CodebookStack, FusionParams, VrqTrace)> {
    let (vecs, _) = fused_training_vectors(catalog, fusion)?;
    let init = rq_kmeans_fit(&vecs, &vrq.levels.shallow, vrq.seed)?;
    train_vrq(catalog, fusion, init, vrq)
}

/// Fits one of the compared tokenizers by name.
pub fn fit_baseline(name: &str, catalog: &Catalog, levels: &LevelSpec, seed: u64) -> Result<Tokenizer> {
    match name {
        "rq-kmeans" => tokenizer::fit_rq_kmeans(catalog, levels, seed),
        "rq-vae" => tokenizer::fit_rq_vae(catalog, levels, 10, 64, 0.99, seed),
        "opq" => tokenizer::fit_opq(catalog, levels, 10, seed),
        "fsq" => tokenizer::fit_fsq(catalog, levels),
        _ => Err(Error::InvalidConfig(format!("unknown tokenizer {name:?}"))),
    }
}

pub const METHODS: [&str; 5] = ["rq-kmeans", "rq-vae", "opq", "fsq", "vrq"];

/// Scorer checkpoints of every trained stage, in order.
#[derive(Debug, Clone)]
pub struct GrModels {
    pub stages: BTreeMap<Stage, ScorerParams>,
    pub traces: BTreeMap<Stage, StageTrace>,
}

pub fn new_scorer(catalog: &Catalog, levels: &[usize], seed: u64) -> Result<ScorerParams> {
    ScorerParams::new(ScorerConfig::new(catalog.dim(), levels.to_vec(), catalog.n_categories()), seed)
}

/// Trains one stage from its parent.
pub fn train_stage(
    stage: Stage,
    parent: &ScorerParams,
    catalog: &Catalog,
    data: &GrData,
    cfg: &PipelineConfig,
) -> Result<(ScorerParams, StageTrace)> {
    let sc = cfg.stage_config(stage);
    match stage {
        Stage::Pretrain => train_pretrain(parent, &pretrain_examples(catalog, data), sc),
        Stage::Sft => train_sft(parent, &pair_examples(catalog, data), sc),
        Stage::Psft | Stage::Dpo => {
            let (train, _) = catalog.session_split(cfg.session_holdout);
            let ex = session_examples(catalog, data, &train);
            if stage == Stage::Psft {
                train_personalized_sft(parent, &ex, sc)
            } else {
                train_dpo(parent, &ex, sc)
            }
        }
        Stage::Pruned => Err(Error::InvalidConfig("pruned students are trained by the prune study".into())),
    }
}

/// Trains every stage from a fresh scorer up to and including `last`.
pub fn train_gr(catalog: &Catalog, data: &GrData, cfg: &PipelineConfig, last: Stage) -> Result<GrModels> {
    let mut params = new_scorer(catalog, &data.levels, cfg.pretrain.seed)?;
    let mut models = GrModels {
        stages: BTreeMap::new(),
        traces: BTreeMap::new(),
    };
    for stage in Stage::TRAINED.into_iter().filter(|&s| s <= last) {
        let (p, t) = train_stage(stage, &params, catalog, data, cfg)?;
        models.stages.insert(stage, p.clone());
        models.traces.insert(stage, t);
        params = p;
    }
    Ok(models)
}

/// Ranks items for each query with constrained decoding and scores the targets.
pub fn evaluate_queries(
    params: &ScorerParams,
    trie: &SidTrie,
    catalog: &Catalog,
    queries: &[(ScorerInput, u32)],
    cfg: &RetrieveConfig,
) -> Result<(RetrievalScores, Vec<RankedList>)> {
    let mut lists = Vec::with_capacity(queries.len());
    for (qi, (input, target)) in queries.iter().enumerate() {
        let q = ScorerQuery::new(params, input)?;
        let got = retrieve(qi as u64, &q, trie, catalog, cfg, None)?;
        lists.push(RankedList::new(qi as u64, got.iter().map(|r| r.item_id).collect(), *target)?);
    }
    let ks: Vec<usize> = KS.iter().copied().filter(|&k| k <= cfg.top_n.max(1)).collect();
    Ok((RetrievalScores::from_lists(&lists, &ks)?, lists))
}

/// Held-out view of every item as a query for that item, with its query SID and no user.
pub fn view_queries<'a>(catalog: &'a Catalog, data: &'a GrData, stage: Stage, pairs: &[EvalPair]) -> Vec<(ScorerInput<'a>, u32)> {
    pairs
        .iter()
        .map(|p| (data.view_input(catalog, p.item, p.view).for_stage(stage), p.target))
        .collect()
}

/// Held-out sessions as queries for their purchased item.
pub fn session_queries<'a>(catalog: &'a Catalog, data: &'a GrData, stage: Stage, sessions: &[usize]) -> Vec<(ScorerInput<'a>, u32)> {
    sessions
        .iter()
        .map(|&s| (data.session_input(catalog, s).for_stage(stage), catalog.sessions[s].purchased))
        .collect()
}

/// Everything produced by one tokenizer: its SIDs, code metrics and image-to-item GR scores.
pub struct MethodRun {
    pub report: CodeReport,
    pub table: SidTable,
}

/// Fits the named method (VRQ is passed in pre-fitted), encodes the catalog, measures code
/// quality, then trains pretrain + SFT scorers on its SIDs and scores held-out views.
pub fn run_method(catalog: &Catalog, tok: &Tokenizer, cfg: &PipelineConfig) -> Result<MethodRun> {
    let table = encode_catalog(catalog, tok)?;
    let pairs = crate::codemetrics::eval_pairs(catalog);
    let mut report = CodeReport::build(catalog, tok, &table, &pairs, &KS)?;
    let data = GrData::build(catalog, tok, &table)?;
    let models = train_gr(catalog, &data, cfg, Stage::Sft)?;
    let trie = SidTrie::build(&table)?;
    let queries = view_queries(catalog, &data, Stage::Sft, &pairs);
    let (scores, _) = evaluate_queries(&models.stages[&Stage::Sft], &trie, catalog, &queries, &cfg.retrieve)?;
    report.gr = Some(scores);
    Ok(MethodRun { report, table })
}

/// Shallow levels of the depth sweep; the deep stage is held fixed.
pub const DEPTH_SWEEP: [&str; 3] = ["8|4,4", "8,8|4,4", "8,8,8|4,4"];
/// First-level sizes of the width sweep, with all other levels and training budgets held fixed.
pub const K0_SWEEP: [&str; 3] = ["4,8,8|4,4", "8,8,8|4,4", "16,8,8|4,4"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: String,
    pub levels: String,
    pub ico: f64,
    pub qas_hr4: f64,
    pub gr_hr4: f64,
    pub gr_mrr4: f64,
}

/// Fits VRQ at every sweep setting with the same fusion model and training budget, then runs
/// image-to-item GR on each.
pub fn sweep(catalog: &Catalog, fusion: &FusionParams, cfg: &PipelineConfig) -> Result<Vec<SweepPoint>> {
    let mut done: BTreeMap<String, CodeReport> = BTreeMap::new();
    let mut out = Vec::new();
    for (axis, specs) in [("depth", DEPTH_SWEEP), ("k0", K0_SWEEP)] {
        for spec in specs {
            if !done.contains_key(spec) {
                let levels: LevelSpec = spec.parse()?;
                let mut c = cfg.clone();
                c.levels = levels.clone();
                c.vrq.levels = levels;
                let (stack, fused, _) = fit_vrq(catalog, fusion, &c.vrq)?;
                let tok = tokenizer::vrq_tokenizer(catalog, fused, stack);
                done.insert(spec.to_string(), run_method(catalog, &tok, &c)?.report);
            }
            let r = &done[spec];
            let gr = r.gr.as_ref().expect("run_method fills GR scores");
            out.push(SweepPoint {
                axis: axis.into(),
                levels: spec.into(),
                ico: r.ico,
                qas_hr4: r.qas_hr[&4],
                gr_hr4: gr.hr(4),
                gr_mrr4: gr.mrr(4),
            });
        }
    }
    Ok(out)
}

/// Timing passes per setting in the prune study; each setting keeps its fastest pass.
pub const TIMING_ROUNDS: usize = 7;

/// One row of the pruning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub v_sub: usize,
    pub hr4: f64,
    pub mrr4: f64,
    pub mean_decode_secs: f64,
    pub mean_select_secs: f64,
    pub working_set_bytes: usize,
    pub tokens_per_epoch: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStudy {
    /// The unpruned reference at full tokens.
    pub reference: PruneRow,
    pub rows: Vec<PruneRow>,
}

/// Distils a pruned student from `reference` for every subset size and scores each on held-out
/// views, with query tokens pruned by the fixed inference seed.
pub fn prune_study(
    catalog: &Catalog,
    data: &GrData,
    trie: &SidTrie,
    reference: &ScorerParams,
    subset_sizes: &[usize],
    cfg: &PipelineConfig,
) -> Result<PruneStudy> {
    let v_max = catalog.config.v_max;
    if subset_sizes.is_empty() || subset_sizes.iter().any(|&v| v == 0 || v > v_max) {
        return Err(Error::InvalidConfig(format!("subset sizes {subset_sizes:?} must lie in 1..={v_max}")));
    }
    let pairs = crate::codemetrics::eval_pairs(catalog);
    let queries = view_queries(catalog, data, Stage::Pruned, &pairs);
    let inputs: Vec<ScorerInput> = queries.iter().map(|(i, _)| *i).collect();

    let (scores, _) = evaluate_queries(reference, trie, catalog, &queries, &cfg.retrieve)?;
    let mut rows = vec![PruneRow {
        v_sub: v_max,
        hr4: scores.hr(4),
        mrr4: scores.mrr(4),
        mean_decode_secs: f64::INFINITY,
        mean_select_secs: 0.0,
        working_set_bytes: 0,
        tokens_per_epoch: Vec::new(),
    }];
    let mut models = vec![(reference.clone(), None)];

    let train = pair_examples(catalog, data);
    for &v_sub in subset_sizes {
        let pc = PruneConfig {
            schedule: CurriculumSchedule::new(v_max, v_sub, cfg.prune.epochs)?,
            stage: cfg.prune.clone(),
            distill_weight: 1.0,
            ntp_weight: 1.0,
        };
        let (student, trace) = train_pruned(reference, &train, &pc)?;
        let pruned: Vec<TokenMatrix> = inputs
            .iter()
            .map(|i| prune_tokens(i.tokens, v_sub, INFERENCE_SEED))
            .collect::<Result<_>>()?;
        let pq: Vec<(ScorerInput, u32)> = queries
            .iter()
            .zip(&pruned)
            .map(|((i, target), p)| (i.with_tokens(p), *target))
            .collect();
        let (scores, _) = evaluate_queries(&student, trie, catalog, &pq, &cfg.retrieve)?;
        rows.push(PruneRow {
            v_sub,
            hr4: scores.hr(4),
            mrr4: scores.mrr(4),
            mean_decode_secs: f64::INFINITY,
            mean_select_secs: 0.0,
            working_set_bytes: 0,
            tokens_per_epoch: trace.tokens_per_epoch,
        });
        models.push((student, Some(v_sub)));
    }

    // Round-robin timing, so drift in machine load affects every setting alike.
    for _ in 0..TIMING_ROUNDS {
        for (row, (model, v_sub)) in rows.iter_mut().zip(&models) {
            let t = time_decode(model, &inputs, trie, cfg.retrieve.beam, *v_sub, 1)?;
            row.mean_decode_secs = row.mean_decode_secs.min(t.mean_decode_secs);
            row.mean_select_secs = t.mean_select_secs;
            row.working_set_bytes = t.working_set_bytes;
        }
    }
    let reference_row = rows.remove(0);
    Ok(PruneStudy {
        reference: reference_row,
        rows,
    })
}
