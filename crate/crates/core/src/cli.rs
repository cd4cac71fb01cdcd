//! The `dualcap` command line: data generation, datastore build,
//! training, ablation, evaluation, captioning and gradient checking.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::decoder::Sequence;
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::evalmetrics::{format_scores, score, EvalBatch};
use crate::keywords::Lexicon;
use crate::numerics::{gradcheck, Coords, ParameterSet};
use crate::retrieval::FeatureDatastore;
use crate::synthdata::{gen_corpus, Corpus, GenConfig, Split, World};
use crate::trainer::{
    caption_all, evaluate, fusion_rows, run_ablation, component_rows, train, AblationRow, Captioner, Decoding,
    Example, Toggles, TrainConfig, Workspace,
};

/// Relative error bound for `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub datastore: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "dualcap-run/corpus.jsonl".into(),
            datastore: "dualcap-run/datastore.jsonl".into(),
            checkpoint: "dualcap-run/model.ckpt".into(),
        }
    }
}

/// Everything a command needs, loaded from TOML plus overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: GenConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: GenConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` with a dotted key such as `train.lr` or
    /// `data.train`. A bare key that is not a top-level field is looked up
    /// under `train`. Values parse as JSON first, then as a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let mut path: Vec<&str> = key.split('.').collect();
        if path.len() == 1 && !["seed", "data", "train", "paths"].contains(&path[0]) {
            path.insert(0, "train");
        }
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut root;
        for part in &path {
            slot = slot
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        let raw = raw.trim();
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("bad value for {key}: {e}")))?;
        Ok(())
    }

    /// Copies the run seed into the training config and validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.data.validate()?;
        self.train.validate()?;
        Ok(self)
    }
}

#[derive(Parser, Debug)]
#[command(name = "dualcap", version, about = "Dual-retrieval image captioning on a synthetic corpus")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for all randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", global = true)]
    pub set: Vec<String>,
    /// Beam width for decoding.
    #[arg(long, global = true)]
    pub beam: Option<usize>,
    /// Enabled components, e.g. `i2t,i2i,sfn`.
    #[arg(long, global = true)]
    pub toggles: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Build the train-split datastore from a corpus file.
    BuildDatastore {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train one configuration and write its checkpoint and report.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        datastore: Option<PathBuf>,
    },
    /// Train and test ablation rows over several seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// `components`, `fusion` or `both`.
        #[arg(long, default_value = "components")]
        grid: String,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        datastore: Option<PathBuf>,
    },
    /// Score a checkpoint on a split, or score a candidates file.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        /// JSONL of `{"id": ..., "caption": ...}` to score instead of a checkpoint.
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Show retrieval evidence, keywords and the generated caption.
    Caption {
        /// Image ids; default is every image of the split.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Finite-difference check of every trainable tensor on two images.
    Gradcheck {
        /// Coordinates probed per tensor; 0 checks all.
        #[arg(long, default_value_t = 24)]
        per_param: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub datastore: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Load a checkpoint whose config fingerprint differs.
    #[arg(long)]
    pub allow_fingerprint_mismatch: bool,
}

fn resolved_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &c.set {
        cfg.set(s)?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(b) = c.beam {
        cfg.train.beam = b;
    }
    if let Some(t) = &c.toggles {
        cfg.train.toggles = t.parse::<Toggles>()?;
    }
    let cfg = cfg.resolve()?;
    log::info!("resolved config:\n{}", cfg.to_toml());
    log::info!("config fingerprint {}", cfg.train.fingerprint());
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split {s:?}; expected train, val or test"))),
    }
}

fn report_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("report.json")
}

/// Frozen text encoder for the corpus generated from `cfg`.
fn encoder(cfg: &RunConfig) -> Result<(TextEncoder, Lexicon)> {
    let world = World::new(cfg.seed, &cfg.data)?;
    let lexicon = Lexicon::builtin();
    let enc = TextEncoder::new(cfg.seed, cfg.train.d_text, &world, &lexicon)?;
    Ok((enc, lexicon))
}

fn load_corpus(path: &Path, cfg: &RunConfig) -> Result<Corpus> {
    let corpus = Corpus::load(path)?;
    match corpus.dims() {
        Some((_, dv, df)) if dv == cfg.data.d_vision && df == cfg.data.d_feat => Ok(corpus),
        Some((_, dv, df)) => Err(Error::Data(format!(
            "corpus has d_vision {dv}, d_feat {df}; config expects {}, {}",
            cfg.data.d_vision, cfg.data.d_feat
        ))),
        None => Err(Error::Data(format!("corpus {} is empty", path.display()))),
    }
}

fn workspace(cfg: &RunConfig, corpus: &Option<PathBuf>, datastore: &Option<PathBuf>) -> Result<Workspace> {
    let corpus = load_corpus(corpus.as_ref().unwrap_or(&cfg.paths.corpus), cfg)?;
    let store = FeatureDatastore::load(datastore.as_ref().unwrap_or(&cfg.paths.datastore))?;
    let (enc, lex) = encoder(cfg)?;
    Workspace::new(corpus, store, enc, lex)
}

fn load_model(cfg: &RunConfig, ws: &Workspace, args: &ModelArgs) -> Result<Captioner> {
    let path = args.checkpoint.as_ref().unwrap_or(&cfg.paths.checkpoint);
    let ck = Checkpoint::load(path)?;
    ck.check_fingerprint(&cfg.train.fingerprint(), args.allow_fingerprint_mismatch)?;
    if ck.manifest.vocab != ws.vocab.tokens() {
        return Err(Error::Checkpoint("checkpoint vocabulary differs from the corpus vocabulary".into()));
    }
    let mut model = Captioner::new(&cfg.train, ws.vocab.len(), cfg.data.d_vision)?;
    model.decoder.set_trainable(false, true);
    ck.restore_into(&mut model)?;
    Ok(model)
}

fn decoding(cfg: &TrainConfig) -> Decoding {
    if cfg.beam == 1 {
        Decoding::Greedy
    } else {
        Decoding::Beam(cfg.beam)
    }
}

fn cmd_gen_data(cfg: &RunConfig, out: Option<&Path>) -> Result<String> {
    let path = out.unwrap_or(&cfg.paths.corpus);
    let corpus = gen_corpus(cfg.seed, &cfg.data)?;
    ensure_parent(path)?;
    corpus.save(path)?;
    Ok(format!(
        "wrote {} images ({} train, {} val, {} test) to {}\n",
        corpus.len(),
        cfg.data.train,
        cfg.data.val,
        cfg.data.test,
        path.display()
    ))
}

fn cmd_build_datastore(cfg: &RunConfig, corpus: &Option<PathBuf>, out: Option<&Path>) -> Result<String> {
    let corpus = load_corpus(corpus.as_ref().unwrap_or(&cfg.paths.corpus), cfg)?;
    let (enc, _) = encoder(cfg)?;
    let store = FeatureDatastore::from_corpus(&corpus, &enc)?;
    let path = out.unwrap_or(&cfg.paths.datastore);
    ensure_parent(path)?;
    store.save(path)?;
    Ok(format!(
        "wrote datastore v{} with {} images and {} captions to {}\n",
        store.version(),
        store.images().len(),
        store.captions().len(),
        path.display()
    ))
}

fn cmd_train(cfg: &RunConfig, corpus: &Option<PathBuf>, datastore: &Option<PathBuf>, out: Option<&Path>) -> Result<String> {
    let ws = workspace(cfg, corpus, datastore)?;
    let outcome = train(&cfg.train, &ws)?;
    let path = out.unwrap_or(&cfg.paths.checkpoint);
    ensure_parent(path)?;
    outcome.checkpoint(ws.vocab.tokens()).save(path)?;
    outcome.report.save(&report_path(path))?;
    let r = &outcome.report;
    Ok(format!(
        "trained {} for {} epochs ({} steps); selected epoch {} with val CIDEr {:.4}\nwrote {} and {}\n",
        r.variant,
        r.epoch_losses.len(),
        r.steps,
        r.selected_epoch,
        r.val_cider[r.selected_epoch - 1],
        path.display(),
        report_path(path).display()
    ))
}

fn cmd_ablate(cfg: &RunConfig, seeds: &[u64], grid: &str, corpus: &Option<PathBuf>, datastore: &Option<PathBuf>, out: Option<&Path>) -> Result<String> {
    let rows: Vec<AblationRow> = match grid {
        "components" => component_rows(),
        "fusion" => fusion_rows(),
        "both" => component_rows().into_iter().chain(fusion_rows()).collect(),
        other => return Err(Error::Config(format!("unknown grid {other:?}; expected components, fusion or both"))),
    };
    let ws = workspace(cfg, corpus, datastore)?;
    let start = Instant::now();
    let table = run_ablation(&cfg.train, &ws, &rows, seeds)?;
    let tsv = table.to_tsv();
    if let Some(p) = out {
        write_text(p, &tsv)?;
    }
    Ok(format!(
        "{}\n{tsv}total {:.1}s\n",
        table.render(),
        start.elapsed().as_secs_f64()
    ))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateLine {
    id: String,
    caption: String,
}

fn read_candidates(path: &Path) -> Result<Vec<CandidateLine>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (no, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("candidates line {}: {e}", no + 1)))?);
    }
    Ok(out)
}

fn cmd_eval(cfg: &RunConfig, split: &str, candidates: &Option<PathBuf>, model: &ModelArgs) -> Result<String> {
    if let Some(path) = candidates {
        let corpus = load_corpus(model.corpus.as_ref().unwrap_or(&cfg.paths.corpus), cfg)?;
        let mut batch = EvalBatch::default();
        for c in read_candidates(path)? {
            let rec = corpus
                .records
                .iter()
                .find(|r| r.id == c.id)
                .ok_or_else(|| Error::Data(format!("candidate id {} is not in the corpus", c.id)))?;
            batch.push(&c.caption, &rec.captions);
        }
        return Ok(format_scores(&score(&batch)?));
    }
    let split = parse_split(split)?;
    let ws = workspace(cfg, &model.corpus, &model.datastore)?;
    let m = load_model(cfg, &ws, model)?;
    let examples = ws.examples(split, &cfg.train)?;
    let (scores, _) = evaluate(&m, &examples, decoding(&cfg.train), cfg.train.max_gen_len, &ws)?;
    Ok(format_scores(&scores))
}

fn render_caption(ex: &Example, caption: &str, cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "== {}", ex.id);
    for (i, c) in ex.retrieval.i2t.0.iter().enumerate() {
        let _ = writeln!(s, "i2t[{}] {:.6} {} {}", i + 1, c.score, c.caption_id, c.text);
    }
    for (i, im) in ex.retrieval.i2i.0.iter().enumerate() {
        let _ = writeln!(s, "i2i[{}] {:.6} {} {}", i + 1, im.score, im.image_id, im.captions.join(" | "));
    }
    let _ = writeln!(s, "prompt: {}", ex.prompt.text);
    let kws: Vec<&str> = ex.keywords.iter().map(String::as_str).collect();
    let source = match (cfg.toggles.use_sfn, cfg.toggles.use_i2i) {
        (false, _) => "off",
        (true, true) => "i2i",
        (true, false) => "i2t",
    };
    let _ = writeln!(s, "keywords ({source}): {}", kws.join("; "));
    let _ = writeln!(s, "caption: {caption}");
    s
}

fn cmd_caption(cfg: &RunConfig, ids: &[String], split: &str, model: &ModelArgs, out: Option<&Path>) -> Result<String> {
    let split = parse_split(split)?;
    let ws = workspace(cfg, &model.corpus, &model.datastore)?;
    let m = load_model(cfg, &ws, model)?;
    let mut examples = ws.examples(split, &cfg.train)?;
    if !ids.is_empty() {
        if let Some(missing) = ids.iter().find(|id| !examples.iter().any(|e| &e.id == *id)) {
            return Err(Error::Data(format!("image {missing} is not in the {split} split")));
        }
        examples.retain(|e| ids.contains(&e.id));
        examples.sort_by_key(|e| ids.iter().position(|i| *i == e.id));
    }
    let outs = caption_all(&m, &examples, decoding(&cfg.train), cfg.train.max_gen_len, &ws)?;
    let mut text = String::new();
    let mut jsonl = String::new();
    for (ex, o) in examples.iter().zip(&outs) {
        text.push_str(&render_caption(ex, &o.caption, &cfg.train));
        jsonl.push_str(&serde_json::json!({"id": o.id, "caption": o.caption}).to_string());
        jsonl.push('\n');
    }
    if let Some(p) = out {
        write_text(p, &jsonl)?;
    }
    Ok(text)
}

fn cmd_gradcheck(cfg: &RunConfig, per_param: usize, eps: f64) -> Result<String> {
    let start = Instant::now();
    let data = GenConfig {
        train: 8,
        val: 2,
        test: 2,
        ..cfg.data.clone()
    };
    let ws = Workspace::generate(cfg.seed, &data, cfg.train.d_text)?;
    let examples = ws.examples(Split::Val, &cfg.train)?;
    let mut model = Captioner::new(&cfg.train, ws.vocab.len(), data.d_vision)?;
    model.decoder.set_trainable(false, true);
    if let Some(s) = model.fusion.as_mut() {
        s.randomize_zero_init(cfg.seed);
    }
    model.decoder.randomize_zero_init(cfg.seed);
    let seqs: Vec<Sequence> = examples
        .iter()
        .map(|e| Sequence::captioning(&e.prompt.ids, &e.targets[0]))
        .collect::<Result<_>>()?;
    let coords = if per_param == 0 {
        Coords::All
    } else {
        Coords::Sample {
            per_param,
            seed: cfg.seed,
        }
    };
    let rep = gradcheck(&mut model, eps, coords, |m: &mut Captioner| {
        let mut total = 0.0;
        let mut acc: Option<Vec<crate::numerics::Matrix>> = None;
        for (e, s) in examples.iter().zip(&seqs) {
            let (l, g) = m.loss_and_grads(&e.patches, &e.keyword_emb, s)?;
            total += l;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.add_assign(y)),
            }
        }
        let n = examples.len() as f64;
        m.set_grads(acc.unwrap_or_default(), 1.0 / n)?;
        Ok(total / n)
    })?;
    let mut tensors = Vec::new();
    model.visit(&mut |p| {
        if !p.frozen {
            tensors.push(p.name.clone());
        }
    });
    let summary = format!(
        "gradcheck: {} tensors, {} coordinates, {} images, max rel err {:.3e} ({} [{}]), {:.2}s\n",
        tensors.len(),
        rep.checked,
        examples.len(),
        rep.max_rel_error,
        rep.worst_param,
        rep.worst_index,
        start.elapsed().as_secs_f64()
    );
    if rep.max_rel_error >= GRADCHECK_TOLERANCE {
        return Err(Error::Gradcheck(format!(
            "max relative error {:.3e} >= {GRADCHECK_TOLERANCE:e}\n{summary}",
            rep.max_rel_error
        )));
    }
    Ok(summary)
}

/// Runs one parsed command and returns its standard output.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = resolved_config(&cli.common)?;
    let out = cli.common.out.as_deref();
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, out),
        Command::BuildDatastore { corpus } => cmd_build_datastore(&cfg, corpus, out),
        Command::Train { corpus, datastore } => cmd_train(&cfg, corpus, datastore, out),
        Command::Ablate {
            seeds,
            grid,
            corpus,
            datastore,
        } => cmd_ablate(&cfg, seeds, grid, corpus, datastore, out),
        Command::Eval {
            split,
            candidates,
            model,
        } => cmd_eval(&cfg, split, candidates, model),
        Command::Caption { ids, split, model } => cmd_caption(&cfg, ids, split, model, out),
        Command::Gradcheck { per_param, eps } => cmd_gradcheck(&cfg, *per_param, *eps),
    }
}

/// Caps the worker pool at `DUALCAP_THREADS` if set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("DUALCAP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("DUALCAP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = init_threads().and_then(|_| run(&cli));
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
