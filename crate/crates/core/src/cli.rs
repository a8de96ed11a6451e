//! Command-line driver. Every command reads and writes fixed file names inside the run
//! directory given by `--catalog`, and records a run manifest under `<catalog>/runs/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::blob::sha256_file;
use crate::codemetrics::{eval_pairs, write_code_reports, RetrievalScores};
use crate::corpus::{generate_catalog, load_catalog, save_catalog, Catalog};
use crate::decode::{retrieve, write_jsonl, ConvWeights, ScorerQuery, SidTrie};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::genmodel::{load_checkpoint, save_checkpoint, GrData, ScorerParams, Stage};
use crate::pipeline::{self, PipelineConfig, METHODS};
use crate::quantize::tokenizer::{encode_catalog, vrq_tokenizer, SidTable, Tokenizer};
use crate::quantize::{CodebookStack, LevelSpec};

pub const CATALOG_FILES: [&str; 7] = [
    "manifest.json",
    "items.jsonl",
    "pairs.jsonl",
    "sessions.jsonl",
    "histories.jsonl",
    "embeddings.bin",
    "category_vecs.bin",
];
pub const FUSION_FILE: &str = "fusion.bin";
pub const VRQ_FILE: &str = "vrq.bin";
pub const VRQ_FUSION_FILE: &str = "vrq_fusion.bin";
pub const SIDS_FILE: &str = "sids.tsv";

pub fn checkpoint_file(stage: Stage) -> String {
    format!("scorer_{stage}.bin")
}

#[derive(Debug, Parser)]
#[command(name = "sidsearch", version, about = "Semantic-ID generative image search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic catalog, views, pairs and sessions.
    Datagen(Opts),
    /// Train the category-aware fusion encoder.
    TrainFusion(Opts),
    /// Fit the VRQ codebook stack on fused features.
    FitVrq(Opts),
    /// Assign a SID to every item view.
    Encode(Opts),
    /// Compare all tokenizers: ICO, QAS and GR scores.
    EvalCodes(Opts),
    /// Train one scorer stage from its parent checkpoint.
    TrainGr(Opts),
    /// Retrieve items for held-out session queries.
    Decode(Opts),
    /// HR and MRR of every trained stage on held-out views and sessions.
    EvalRetrieval(Opts),
    /// Distil pruned students and measure accuracy against decode time.
    PruneStudy(Opts),
    /// Sweep shallow depth and first-level size.
    Sweep(Opts),
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Opts {
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub levels: Option<String>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub topn: Option<usize>,
    #[arg(long)]
    pub stage: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "dpo-beta")]
    pub dpo_beta: Option<f64>,
    #[arg(long = "subset-sizes")]
    pub subset_sizes: Option<String>,
    #[arg(long = "conv-weights")]
    pub conv_weights: Option<String>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Flat `key=value` file; keys are flag names without the leading dashes.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value {v:?} for {key}")))
}

impl Opts {
    /// Fills flags left unset from the config file, if one was given.
    pub fn merged(mut self) -> Result<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => e.into(),
        })?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
            let (k, v) = (k.trim(), v.trim().to_string());
            macro_rules! fill {
                ($field:ident) => {
                    if self.$field.is_none() {
                        self.$field = Some(parse(k, &v)?);
                    }
                };
            }
            match k {
                "catalog" => fill!(catalog),
                "seed" => fill!(seed),
                "out" => fill!(out),
                "levels" => fill!(levels),
                "beam" => fill!(beam),
                "topn" => fill!(topn),
                "stage" => fill!(stage),
                "epochs" => fill!(epochs),
                "lr" => fill!(lr),
                "dpo-beta" => fill!(dpo_beta),
                "subset-sizes" => fill!(subset_sizes),
                "conv-weights" => fill!(conv_weights),
                "report" => fill!(report),
                _ => return Err(Error::InvalidConfig(format!("unknown config key {k:?}"))),
            }
        }
        Ok(self)
    }

    fn catalog_dir(&self) -> Result<&Path> {
        self.catalog
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("--catalog is required".into()))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(7)
    }

    fn stage(&self) -> Result<Option<Stage>> {
        match &self.stage {
            None => Ok(None),
            Some(s) => match s.parse::<Stage>()? {
                Stage::Pruned => Err(Error::InvalidConfig("--stage must be one of pretrain, sft, psft, dpo".into())),
                st => Ok(Some(st)),
            },
        }
    }

    fn subset_sizes(&self) -> Result<Vec<usize>> {
        let text = self.subset_sizes.as_deref().unwrap_or("48,32,16,12");
        text.split(',').map(|v| parse("--subset-sizes", v)).collect()
    }

    /// Pipeline settings with every flag applied. `stage` selects which stage `--epochs` and
    /// `--lr` refer to; without one they apply to the command's own trainer.
    pub fn pipeline(&self, stage: Option<Stage>) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::standard(self.seed());
        if let Some(l) = &self.levels {
            let levels: LevelSpec = l.parse()?;
            cfg.levels = levels.clone();
            cfg.vrq.levels = levels;
        }
        if let Some(b) = self.beam {
            cfg.retrieve.beam = b;
        }
        if let Some(n) = self.topn {
            cfg.retrieve.top_n = n;
        }
        if let Some(w) = &self.conv_weights {
            cfg.retrieve.weights = w.parse::<ConvWeights>()?;
        }
        if let Some(b) = self.dpo_beta {
            cfg.dpo.dpo_beta = b;
        }
        if let Some(st) = stage {
            let sc = cfg.stage_config_mut(st);
            if let Some(e) = self.epochs {
                sc.epochs = e;
            }
            if let Some(lr) = self.lr {
                sc.lr = lr;
            }
        }
        if cfg.retrieve.beam == 0 || cfg.retrieve.top_n == 0 {
            return Err(Error::InvalidConfig("--beam and --topn must be at least 1".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
    pub tool_version: String,
}

/// Files read and written by one command, relative to the run directory where possible.
struct Io {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Io {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
        self.inputs.push(p.clone());
        Ok(p)
    }

    fn catalog(&mut self) -> Result<Catalog> {
        for f in CATALOG_FILES {
            self.input(f)?;
        }
        load_catalog(&self.dir)
    }

    fn output(&mut self, p: PathBuf) -> PathBuf {
        self.outputs.push(p.clone());
        p
    }

    fn hashes(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| {
                let key = p.strip_prefix(&self.dir).unwrap_or(p).display().to_string();
                Ok((key, sha256_file(p)?))
            })
            .collect()
    }

    fn finish(&self, name: &str, opts: &Opts, cfg: &PipelineConfig, started: Instant) -> Result<RunManifest> {
        let mut config = serde_json::to_value(opts)?;
        config["pipeline"] = serde_json::to_value(cfg)?;
        let manifest = RunManifest {
            command: name.into(),
            config,
            seeds: BTreeMap::from([("run".to_string(), opts.seed())]),
            inputs: self.hashes(&self.inputs)?,
            outputs: self.hashes(&self.outputs)?,
            wall_time_secs: started.elapsed().as_secs_f64(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        };
        let runs = self.dir.join("runs");
        fs::create_dir_all(&runs)?;
        let suffix = opts.stage.as_deref().filter(|_| name == "train-gr").map(|s| format!("_{s}")).unwrap_or_default();
        fs::write(
            runs.join(format!("{name}{suffix}.json")),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(manifest)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn csv_path(report: &Path) -> PathBuf {
    report.with_extension("csv")
}

fn load_vrq(io: &mut Io, catalog: &Catalog) -> Result<Tokenizer> {
    let stack = CodebookStack::load(&io.input(VRQ_FILE)?)?;
    let fusion = FusionParams::load(&io.input(VRQ_FUSION_FILE)?)?;
    Ok(vrq_tokenizer(catalog, fusion, stack))
}

fn load_gr(io: &mut Io, catalog: &Catalog) -> Result<(Tokenizer, SidTable, GrData)> {
    let tok = load_vrq(io, catalog)?;
    let table = SidTable::read_tsv(&io.input(SIDS_FILE)?)?;
    if table.levels != tok.levels() {
        return Err(Error::Verification(format!(
            "{SIDS_FILE} levels {:?} do not match {VRQ_FILE} levels {:?}",
            table.levels,
            tok.levels()
        )));
    }
    let data = GrData::build(catalog, &tok, &table)?;
    Ok((tok, table, data))
}

fn load_stage(io: &mut Io, stage: Stage) -> Result<(ScorerParams, String)> {
    let path = io.input(&checkpoint_file(stage))?;
    let (params, meta) = load_checkpoint(&path)?;
    if meta.stage != stage {
        return Err(Error::Verification(format!("{} holds stage {}", path.display(), meta.stage)));
    }
    Ok((params, sha256_file(&path)?))
}

fn scores_row(label: &str, queries: &str, s: &RetrievalScores) -> String {
    format!(
        "{label},{queries},{:.6},{:.6},{:.6},{:.6},{:.6}",
        s.hr(1),
        s.hr(4),
        s.hr(10),
        s.mrr(4),
        s.mrr(10)
    )
}

pub fn run(cli: Cli) -> Result<RunManifest> {
    let started = Instant::now();
    let (name, opts) = match cli.command {
        Command::Datagen(o) => ("datagen", o),
        Command::TrainFusion(o) => ("train-fusion", o),
        Command::FitVrq(o) => ("fit-vrq", o),
        Command::Encode(o) => ("encode", o),
        Command::EvalCodes(o) => ("eval-codes", o),
        Command::TrainGr(o) => ("train-gr", o),
        Command::Decode(o) => ("decode", o),
        Command::EvalRetrieval(o) => ("eval-retrieval", o),
        Command::PruneStudy(o) => ("prune-study", o),
        Command::Sweep(o) => ("sweep", o),
    };
    let opts = opts.merged()?;
    let dir = opts.catalog_dir()?.to_path_buf();
    let mut io = Io::new(&dir);
    let stage = opts.stage()?;

    let cfg = match name {
        "datagen" => {
            let cfg = opts.pipeline(None)?;
            cfg.catalog.validate()?;
            let catalog = generate_catalog(&cfg.catalog)?;
            save_catalog(&catalog, &dir)?;
            for f in CATALOG_FILES {
                io.output(dir.join(f));
            }
            cfg
        }
        "train-fusion" => {
            let mut cfg = opts.pipeline(None)?;
            if let Some(e) = opts.epochs {
                cfg.fusion.epochs = e;
            }
            if let Some(lr) = opts.lr {
                cfg.fusion.lr = lr;
            }
            let catalog = io.catalog()?;
            let (fusion, trace) = pipeline::fit_fusion(&catalog, &cfg)?;
            fusion.save(&io.output(io.path(FUSION_FILE)))?;
            io.outputs.push(crate::fusion::sidecar(&io.path(FUSION_FILE)));
            if let Some(r) = &opts.report {
                write_json(r, &trace)?;
                io.output(r.clone());
            }
            cfg
        }
        "fit-vrq" => {
            let mut cfg = opts.pipeline(None)?;
            if let Some(e) = opts.epochs {
                cfg.vrq.epochs = e;
            }
            if let Some(lr) = opts.lr {
                cfg.vrq.lr = lr;
            }
            let catalog = io.catalog()?;
            let fusion = FusionParams::load(&io.input(FUSION_FILE)?)?;
            let (stack, fused, trace) = pipeline::fit_vrq(&catalog, &fusion, &cfg.vrq)?;
            stack.save(&io.output(io.path(VRQ_FILE)))?;
            fused.save(&io.output(io.path(VRQ_FUSION_FILE)))?;
            io.outputs.push(crate::fusion::sidecar(&io.path(VRQ_FILE)));
            io.outputs.push(crate::fusion::sidecar(&io.path(VRQ_FUSION_FILE)));
            if let Some(r) = &opts.report {
                write_json(r, &trace)?;
                io.output(r.clone());
            }
            cfg
        }
        "encode" => {
            let cfg = opts.pipeline(None)?;
            let catalog = io.catalog()?;
            let tok = load_vrq(&mut io, &catalog)?;
            let table = encode_catalog(&catalog, &tok)?;
            let out = opts.out.clone().unwrap_or_else(|| io.path(SIDS_FILE));
            table.write_tsv(&io.output(out))?;
            cfg
        }
        "eval-codes" => {
            let cfg = opts.pipeline(Some(Stage::Sft))?;
            let catalog = io.catalog()?;
            let vrq = load_vrq(&mut io, &catalog)?;
            let mut reports = Vec::new();
            for m in METHODS {
                let run = if m == "vrq" {
                    pipeline::run_method(&catalog, &vrq, &cfg)?
                } else {
                    let tok = pipeline::fit_baseline(m, &catalog, &cfg.levels, cfg.vrq.seed)?;
                    pipeline::run_method(&catalog, &tok, &cfg)?
                };
                reports.push(run.report);
            }
            let report = opts.report.clone().unwrap_or_else(|| io.path("codes_report.json"));
            write_code_reports(&report, &reports)?;
            let rows: Vec<String> = reports
                .iter()
                .map(|r| {
                    let gr = r.gr.as_ref().expect("run_method fills GR scores");
                    format!(
                        "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                        r.method,
                        r.ico,
                        r.qas_hr[&4],
                        r.qas_mrr[&4],
                        gr.hr(4),
                        gr.mrr(4)
                    )
                })
                .collect();
            write_csv(&csv_path(&report), "method,ico,qas_hr4,qas_mrr4,gr_hr4,gr_mrr4", &rows)?;
            io.output(report.clone());
            io.output(csv_path(&report));
            cfg
        }
        "train-gr" => {
            let stage = stage.ok_or_else(|| Error::InvalidConfig("train-gr needs --stage".into()))?;
            let cfg = opts.pipeline(Some(stage))?;
            let catalog = io.catalog()?;
            let (_, _, data) = load_gr(&mut io, &catalog)?;
            let (parent, parent_hash) = match Stage::TRAINED.iter().position(|&s| s == stage) {
                Some(0) | None => (pipeline::new_scorer(&catalog, &data.levels, cfg.pretrain.seed)?, None),
                Some(i) => {
                    let (p, h) = load_stage(&mut io, Stage::TRAINED[i - 1])?;
                    (p, Some(h))
                }
            };
            let (params, trace) = pipeline::train_stage(stage, &parent, &catalog, &data, &cfg)?;
            let path = io.output(io.path(&checkpoint_file(stage)));
            save_checkpoint(&params, stage, parent_hash, &path)?;
            io.outputs.push(crate::fusion::sidecar(&path));
            if let Some(r) = &opts.report {
                write_json(r, &trace)?;
                io.output(r.clone());
            }
            cfg
        }
        "decode" => {
            let stage = stage.unwrap_or(Stage::Dpo);
            let cfg = opts.pipeline(None)?;
            let catalog = io.catalog()?;
            let (tok, table, data) = load_gr(&mut io, &catalog)?;
            let (params, _) = load_stage(&mut io, stage)?;
            let trie = SidTrie::build(&table)?;
            let (_, held) = catalog.session_split(cfg.session_holdout);
            let mut rows = Vec::new();
            for (input, _) in pipeline::session_queries(&catalog, &data, stage, &held) {
                let q = ScorerQuery::new(&params, &input)?;
                let qid = rows.len() as u64;
                let feature = tok.query_feature(&catalog, input.tokens)?;
                let conf = |item: u32| {
                    tok.encode_view(&catalog, item, 0)
                        .map(|e| crate::math::cosine(&feature, &e.recon))
                        .unwrap_or(f64::NEG_INFINITY)
                };
                let got = retrieve(qid, &q, &trie, &catalog, &cfg.retrieve, Some(&conf))?;
                rows.push(got);
            }
            let rows: Vec<_> = rows.into_iter().flatten().collect();
            let out = opts.out.clone().unwrap_or_else(|| io.path("retrieval.jsonl"));
            let mut w = BufWriter::new(fs::File::create(&out)?);
            write_jsonl(&mut w, &rows)?;
            drop(w);
            io.output(out);
            cfg
        }
        "eval-retrieval" => {
            let cfg = opts.pipeline(None)?;
            let catalog = io.catalog()?;
            let (_, table, data) = load_gr(&mut io, &catalog)?;
            let trie = SidTrie::build(&table)?;
            let stages: Vec<Stage> = match stage {
                Some(s) => vec![s],
                None => Stage::TRAINED.into_iter().filter(|s| io.path(&checkpoint_file(*s)).exists()).collect(),
            };
            if stages.is_empty() {
                return Err(Error::MissingFile(io.path(&checkpoint_file(Stage::Pretrain))));
            }
            let pairs = eval_pairs(&catalog);
            let (_, held) = catalog.session_split(cfg.session_holdout);
            let mut report: BTreeMap<String, BTreeMap<&str, RetrievalScores>> = BTreeMap::new();
            let mut rows = Vec::new();
            for st in stages {
                let (params, _) = load_stage(&mut io, st)?;
                let vq = pipeline::view_queries(&catalog, &data, st, &pairs);
                let (vs, _) = pipeline::evaluate_queries(&params, &trie, &catalog, &vq, &cfg.retrieve)?;
                let sq = pipeline::session_queries(&catalog, &data, st, &held);
                let (ss, _) = pipeline::evaluate_queries(&params, &trie, &catalog, &sq, &cfg.retrieve)?;
                rows.push(scores_row(&st.to_string(), "views", &vs));
                rows.push(scores_row(&st.to_string(), "sessions", &ss));
                report.insert(st.to_string(), BTreeMap::from([("views", vs), ("sessions", ss)]));
            }
            let path = opts.report.clone().unwrap_or_else(|| io.path("retrieval_report.json"));
            write_json(&path, &report)?;
            write_csv(&csv_path(&path), "stage,queries,hr1,hr4,hr10,mrr4,mrr10", &rows)?;
            io.output(path.clone());
            io.output(csv_path(&path));
            cfg
        }
        "prune-study" => {
            let cfg = opts.pipeline(Some(Stage::Pruned))?;
            let sizes = opts.subset_sizes()?;
            let catalog = io.catalog()?;
            let (_, table, data) = load_gr(&mut io, &catalog)?;
            let trie = SidTrie::build(&table)?;
            let (reference, _) = load_stage(&mut io, stage.unwrap_or(Stage::Dpo))?;
            let study = pipeline::prune_study(&catalog, &data, &trie, &reference, &sizes, &cfg)?;
            let path = opts.report.clone().unwrap_or_else(|| io.path("prune_report.json"));
            write_json(&path, &study)?;
            let rows: Vec<String> = std::iter::once(&study.reference)
                .chain(&study.rows)
                .map(|r| {
                    format!(
                        "{},{:.6},{:.6},{:.9},{}",
                        r.v_sub, r.hr4, r.mrr4, r.mean_decode_secs, r.working_set_bytes
                    )
                })
                .collect();
            write_csv(&csv_path(&path), "v_sub,hr4,mrr4,mean_decode_secs,working_set_bytes", &rows)?;
            io.output(path.clone());
            io.output(csv_path(&path));
            cfg
        }
        "sweep" => {
            let cfg = opts.pipeline(Some(Stage::Sft))?;
            let catalog = io.catalog()?;
            let fusion = FusionParams::load(&io.input(FUSION_FILE)?)?;
            let points = pipeline::sweep(&catalog, &fusion, &cfg)?;
            let path = opts.report.clone().unwrap_or_else(|| io.path("sweep_report.json"));
            write_json(&path, &points)?;
            let rows: Vec<String> = points
                .iter()
                .map(|p| format!("{},{},{:.6},{:.6},{:.6},{:.6}", p.axis, p.levels, p.ico, p.qas_hr4, p.gr_hr4, p.gr_mrr4))
                .collect();
            write_csv(&csv_path(&path), "axis,levels,ico,qas_hr4,gr_hr4,gr_mrr4", &rows)?;
            io.output(path.clone());
            io.output(csv_path(&path));
            cfg
        }
        _ => unreachable!("every subcommand is matched above"),
    };
    io.finish(name, &opts, &cfg, started)
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

