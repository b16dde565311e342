//! `tmmnn`: command-line driver for the retrieval pipeline and its
//! benchmarks. Subcommands communicate through files under the output
//! directory:
//!
//! ```text
//! out/data/         train/test IDX files
//! out/checkpoints/  pretrained and per-query fine-tuned models
//! out/triggers/     per-query triggers
//! out/reports/      CSV and JSON reports
//! ```
//!
//! Exit status is 0 on success, 2 for configuration or usage errors, 3 for
//! data or file-format errors and 1 for anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use tmmnn::ablation::{run_epoch_ablation, run_layer_ablation, run_trigger_ablation};
use tmmnn::config::{config_hash, RunConfig};
use tmmnn::data::{
    generate_synthetic, load_idx, write_ablation_csv, write_diag_json, write_idx_images,
    write_idx_labels, write_report_csv, Dataset,
};
use tmmnn::finetune::{finetune_tmm, RetrievalQuery, TmmModel, TmmProvenance};
use tmmnn::model::{init_model, load_checkpoint, save_checkpoint, train_classifier, Classifier};
use tmmnn::pipeline::{baseline_search_scores, build_trigger, query_seed, Context};
use tmmnn::retrieval::{tmm_scores, top_k, Method, Metric, Ranking};
use tmmnn::robustness::{margin_diagnostics, ood_benchmark, self_retrieval_experiment, NoiseKind, NoiseSpec};
use tmmnn::trigger::{load_trigger, save_trigger, Trigger};
use tmmnn::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tmmnn", version, about = "Query-local trigger retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args, Debug)]
struct Flags {
    /// JSON run configuration; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory. The TMMNN_OUT environment variable takes precedence.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Training-set index of the query.
    #[arg(long, global = true, default_value_t = 0)]
    query_index: usize,
    /// Number of neighbours to report.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true, value_enum)]
    noise: Option<NoiseArg>,
    #[arg(long, global = true, value_enum, default_value_t = MethodArg::All)]
    method: MethodArg,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write the train/test split as IDX files.
    GenData,
    /// Pretrain the classifier and save a checkpoint.
    Train,
    /// Optimize the trigger for one query.
    Trigger,
    /// Fine-tune the classifier for one query.
    Finetune,
    /// Print the top-k neighbours of one query for each method as JSON.
    Retrieve,
    /// Self-retrieval rates under input noise.
    BenchSelf,
    /// Self-retrieval with out-of-distribution samples added to the search set.
    BenchOod,
    /// Margin, Lipschitz and radius diagnostics for one query.
    DiagMargin,
    /// Trigger-type, layer and epoch ablations.
    Ablate,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum NoiseArg {
    Brightness,
    Gaussian,
}

impl From<NoiseArg> for NoiseKind {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::Brightness => NoiseKind::Brightness,
            NoiseArg::Gaussian => NoiseKind::Gaussian,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum MethodArg {
    Tmm,
    Cosine,
    L2,
    All,
}

impl MethodArg {
    fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::Tmm => vec![Method::Tmm],
            MethodArg::Cosine => vec![Method::Cosine],
            MethodArg::L2 => vec![Method::L2],
            MethodArg::All => Method::ALL.to_vec(),
        }
    }
}

/// Paths of every artifact under the output directory.
struct Layout {
    root: PathBuf,
}

impl Layout {
    fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    fn pretrained(&self) -> PathBuf {
        self.root.join("checkpoints").join("pretrained.tmmn")
    }

    fn tmm(&self, query: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("tmm-query-{query}.tmmn"))
    }

    fn trigger(&self, query: usize) -> PathBuf {
        self.root.join("triggers").join(format!("query-{query}.tmtr"))
    }

    fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))?;
    }
    Ok(())
}

fn resolve_config(flags: &Flags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(out) = std::env::var_os("TMMNN_OUT").map(PathBuf::from).or_else(|| flags.out.clone()) {
        cfg.paths.out = out;
    }
    if let Some(k) = flags.k {
        cfg.self_retrieval.k = k;
        cfg.diagnostics.k = k;
        cfg.ablation.k = k;
    }
    if let Some(noise) = flags.noise {
        let kind = NoiseKind::from(noise);
        if kind != cfg.self_retrieval.noise.kind {
            cfg.self_retrieval.noise = NoiseSpec::new(kind, kind.default_levels());
        }
    }
    cfg.self_retrieval.methods = flags.method.methods();
    cfg.validate()?;
    Ok(cfg)
}

/// Everything that determines the pretrained model.
fn training_hash(cfg: &RunConfig) -> Result<String> {
    config_hash(&json!({ "seed": cfg.seed, "data": cfg.data, "model": cfg.model, "train": cfg.train }))
}

/// Everything that determines a query's trigger and fine-tuned model.
fn query_hash(cfg: &RunConfig, query: usize) -> Result<String> {
    config_hash(&json!({ "training": training_hash(cfg)?, "pipeline": cfg.pipeline, "query": query }))
}

fn provenance(cfg: &RunConfig, extra: Value) -> Value {
    json!({ "config": cfg.to_value(), "seed": cfg.seed, "detail": extra })
}

/// The split named by the configuration: IDX files if configured, otherwise
/// the synthetic generator.
fn configured_split(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let Some(src) = &cfg.data.idx else {
        let split = generate_synthetic(&cfg.data.synthetic, cfg.seed)?;
        return Ok((split.train, split.test));
    };
    let (train, test) = (
        load_idx(&src.train_images, &src.train_labels)?,
        load_idx(&src.test_images, &src.test_labels)?,
    );
    match src.limit {
        Some(n) => {
            let head = |d: &Dataset| d.subset(&(0..n.min(d.len())).collect::<Vec<_>>());
            Ok((head(&train)?, head(&test)?))
        }
        None => Ok((train, test)),
    }
}

/// The workspace's IDX files when present, else the configured split.
fn load_split(cfg: &RunConfig, layout: &Layout) -> Result<(Dataset, Dataset)> {
    let (train, test) = if cfg.data.idx.is_none() && layout.data("train-images.idx").exists() {
        (
            load_idx(layout.data("train-images.idx"), layout.data("train-labels.idx"))?,
            load_idx(layout.data("test-images.idx"), layout.data("test-labels.idx"))?,
        )
    } else {
        configured_split(cfg)?
    };
    for d in [&train, &test] {
        if d.extents() != cfg.model.input_extents || d.num_classes() > cfg.model.num_classes {
            return Err(Error::Config(format!(
                "data {} has {:?} inputs and {} classes; the model expects {:?} and {}",
                d.provenance(),
                d.extents(),
                d.num_classes(),
                cfg.model.input_extents,
                cfg.model.num_classes
            )));
        }
    }
    Ok((train, test))
}

fn train_model(cfg: &RunConfig, train: &Dataset, test: &Dataset, layout: &Layout) -> Result<Classifier> {
    let mut model = init_model(cfg.model.clone())?;
    let losses = train_classifier(&mut model, train, &cfg.train, cfg.seed)?;
    let accuracy = model.accuracy(test.samples(), test.labels())?;
    log::info!("pretrained: test accuracy {accuracy:.4}");
    let path = layout.pretrained();
    ensure_parent(&path)?;
    let detail = json!({ "training_hash": training_hash(cfg)?, "loss_history": losses, "test_accuracy": accuracy });
    save_checkpoint(&model, &path, Some(&provenance(cfg, detail)))?;
    Ok(model)
}

/// The pretrained model from the workspace, training it first if no
/// checkpoint exists.
fn pretrained(cfg: &RunConfig, train: &Dataset, test: &Dataset, layout: &Layout) -> Result<Classifier> {
    let path = layout.pretrained();
    if !path.exists() {
        log::info!("no checkpoint at {}; pretraining", path.display());
        return train_model(cfg, train, test, layout);
    }
    let (model, prov) = load_checkpoint(&path)?;
    let stored = prov.as_ref().and_then(|p| p["detail"]["training_hash"].as_str());
    if stored != Some(training_hash(cfg)?.as_str()) {
        return Err(Error::Config(format!(
            "{} was trained under a different data/model/training configuration; rerun `train`",
            path.display()
        )));
    }
    Ok(model)
}

struct Session {
    cfg: RunConfig,
    layout: Layout,
    test: Dataset,
    ctx: Context,
}

impl Session {
    fn open(cfg: RunConfig) -> Result<Self> {
        let layout = Layout { root: cfg.paths.out.clone() };
        let (train, test) = load_split(&cfg, &layout)?;
        let model = pretrained(&cfg, &train, &test, &layout)?;
        let ctx = Context::new(model, train, &cfg.pipeline, cfg.seed)?;
        Ok(Self { cfg, layout, test, ctx })
    }

    fn query(&self, index: usize) -> Result<RetrievalQuery> {
        RetrievalQuery::from_train(&self.ctx.search, index)
    }

    fn query_seed(&self, index: usize) -> u64 {
        query_seed(self.cfg.seed, index as u64)
    }

    /// Reuses a saved artifact only if it was produced under the current
    /// configuration for the same query.
    fn fresh(&self, prov: &Option<Value>, index: usize) -> Result<bool> {
        let stored = prov.as_ref().and_then(|p| p["detail"]["query_hash"].as_str());
        Ok(stored == Some(query_hash(&self.cfg, index)?.as_str()))
    }

    fn trigger(&self, index: usize) -> Result<Trigger> {
        let path = self.layout.trigger(index);
        if path.exists() {
            let (trig, prov) = load_trigger(&path)?;
            if self.fresh(&prov, index)? {
                return Ok(trig);
            }
            log::warn!("{} is stale; recomputing", path.display());
        }
        let q = self.query(index)?;
        let p = &self.cfg.pipeline;
        let trig = build_trigger(&self.ctx.pretrained, &q.x_q, p.trigger_kind, &p.trigger, self.query_seed(index))?;
        ensure_parent(&path)?;
        let detail = json!({ "query_hash": query_hash(&self.cfg, index)?, "query_index": index });
        save_trigger(&trig, &path, Some(&provenance(&self.cfg, detail)))?;
        Ok(trig)
    }

    fn tmm(&self, index: usize, trig: &Trigger) -> Result<TmmModel> {
        let path = self.layout.tmm(index);
        if path.exists() {
            let (classifier, prov) = load_checkpoint(&path)?;
            if self.fresh(&prov, index)? {
                let tmm_prov: TmmProvenance = serde_json::from_value(prov.unwrap()["detail"]["tmm"].clone())
                    .map_err(|e| Error::Data(format!("{}: provenance: {e}", path.display())))?;
                return Ok(TmmModel {
                    classifier,
                    reference: self.ctx.pretrained.clone(),
                    fisher: self.ctx.fisher.clone(),
                    provenance: tmm_prov,
                });
            }
            log::warn!("{} is stale; recomputing", path.display());
        }
        let tmm = finetune_tmm(
            self.ctx.pretrained.clone(),
            self.ctx.fisher.clone(),
            &self.ctx.finetune_data,
            &self.query(index)?,
            trig,
            &self.cfg.pipeline.finetune,
            self.query_seed(index),
        )?;
        ensure_parent(&path)?;
        let detail = json!({
            "query_hash": query_hash(&self.cfg, index)?,
            "query_index": index,
            "tmm": tmm.provenance,
        });
        save_checkpoint(&tmm.classifier, &path, Some(&provenance(&self.cfg, detail)))?;
        Ok(tmm)
    }

    fn write_json(&self, name: &str, body: &impl Serialize) -> Result<PathBuf> {
        let path = self.layout.report(name);
        let doc = json!({ "config": self.cfg.to_value(), "seed": self.cfg.seed, "result": body });
        write_diag_json(&doc, &path)?;
        Ok(path)
    }
}

fn gen_data(cfg: &RunConfig) -> Result<Value> {
    let layout = Layout { root: cfg.paths.out.clone() };
    let (train, test) = configured_split(cfg)?;
    ensure_parent(&layout.data("x"))?;
    for (name, d) in [("train", &train), ("test", &test)] {
        write_idx_images(layout.data(&format!("{name}-images.idx")), d.samples(), d.extents())?;
        write_idx_labels(layout.data(&format!("{name}-labels.idx")), d.labels())?;
    }
    let summary = json!({ "train": train.len(), "test": test.len(), "provenance": train.provenance() });
    write_diag_json(&provenance(cfg, summary.clone()), layout.data("data.json"))?;
    Ok(summary)
}

fn ranking_json(r: &Ranking) -> Value {
    json!({ "method": r.method, "k": r.k, "indices": r.indices, "scores": r.scores })
}

fn run(command: Command, flags: &Flags) -> Result<Value> {
    if let Some(n) = flags.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads {n}: {e}")))?;
    }
    let cfg = resolve_config(flags)?;
    match command {
        Command::GenData => return gen_data(&cfg),
        Command::Train => {
            let layout = Layout { root: cfg.paths.out.clone() };
            let (train, test) = load_split(&cfg, &layout)?;
            let model = train_model(&cfg, &train, &test, &layout)?;
            let accuracy = model.accuracy(test.samples(), test.labels())?;
            return Ok(json!({ "checkpoint": layout.pretrained(), "test_accuracy": accuracy }));
        }
        _ => {}
    }
    let s = Session::open(cfg)?;
    let q = flags.query_index;
    match command {
        Command::GenData | Command::Train => unreachable!(),
        Command::Trigger => {
            let trig = s.trigger(q)?;
            Ok(json!({ "trigger": s.layout.trigger(q), "omega": trig.omega(), "norm": trig.norm(), "stats": trig.stats }))
        }
        Command::Finetune => {
            let tmm = s.tmm(q, &s.trigger(q)?)?;
            Ok(json!({ "checkpoint": s.layout.tmm(q), "provenance": tmm.provenance }))
        }
        Command::Retrieve => {
            let k = flags.k.unwrap_or(10);
            let query = s.query(q)?;
            let mut rankings = Vec::new();
            for m in flags.method.methods() {
                let scores = match m {
                    Method::Tmm => {
                        let trig = s.trigger(q)?;
                        tmm_scores(&s.tmm(q, &trig)?, &trig, s.ctx.search.samples())?
                    }
                    Method::Cosine => baseline_search_scores(&s.ctx, &query.x_q, Metric::Cosine)?,
                    Method::L2 => baseline_search_scores(&s.ctx, &query.x_q, Metric::L2)?,
                };
                rankings.push(ranking_json(&top_k(m, &scores, k)?));
            }
            Ok(json!({ "config": s.cfg.to_value(), "seed": s.cfg.seed, "query_index": q, "rankings": rankings }))
        }
        Command::BenchSelf => {
            let report = self_retrieval_experiment(&s.ctx, &s.cfg.pipeline, &s.cfg.self_retrieval)?;
            let path = s.layout.report(&format!("self-{}.csv", s.cfg.self_retrieval.noise.kind));
            write_report_csv(&report.rows, &s.cfg, &path)?;
            Ok(json!({ "report": path, "rows": report.rows }))
        }
        Command::BenchOod => {
            let bench = ood_benchmark(&s.ctx, &s.cfg.pipeline, &s.cfg.ood, s.cfg.seed)?;
            let rate = bench.success_rate;
            let path = s.write_json("ood.json", &bench)?;
            Ok(json!({ "report": path, "success_rate": rate }))
        }
        Command::DiagMargin => {
            let diag = margin_diagnostics(&s.ctx, &s.cfg.pipeline, q, &s.cfg.diagnostics, &s.cfg.ood, s.cfg.seed)?;
            let path = s.write_json(&format!("diag-query-{q}.json"), &diag)?;
            Ok(json!({ "report": path, "diagnostics": diag }))
        }
        Command::Ablate => {
            let abl = &s.cfg.ablation;
            let mut rows = run_trigger_ablation(&s.ctx, &s.cfg.pipeline, abl)?;
            rows.extend(run_layer_ablation(&s.ctx, &s.cfg.pipeline, abl)?);
            let epochs = run_epoch_ablation(&s.ctx, &s.cfg.pipeline, abl, &s.test)?;
            rows.extend(epochs.rows);
            let csv = s.layout.report("ablation.csv");
            write_ablation_csv(&rows, &s.cfg, &csv)?;
            let acc = s.write_json("ablation-accuracy.json", &epochs.accuracy)?;
            Ok(json!({ "report": csv, "accuracy_report": acc, "accuracy": epochs.accuracy }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command, &cli.flags) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json output"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                2
            } else if e.is_data() {
                3
            } else {
                1
            })
        }
    }
}
