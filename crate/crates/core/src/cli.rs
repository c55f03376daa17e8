//! `ghnq sample|train|eval|quantreport`.
//!
//! Each command parses and validates the whole run configuration before it
//! touches the filesystem. Artifacts are written with [`write_atomic`].

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::arch::format::{deserialize_graph_with, serialize_graph};
use crate::arch::{make_splits, training_pool, ArchGraph, SpaceConfig, SplitKind, SplitPlan, Splits};
use crate::error::{Error, Result};
use crate::fsio::{create_dir_all, read, write_atomic};
use crate::hypernet::{Checkpoint, Hypernet, HypernetConfig};
use crate::quant::{Precision, QuantConfig, DEFAULT_EPS_FOLD};
use crate::train::{
    evaluate, finetune_from, layerwise_distribution_stats, per_channel_range, per_network_robustness,
    restore_training, training_checkpoint, DataConfig, Dataset, EvalConfig, EvalReport, TrainConfig,
    TrainState,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.ghnq";
pub const LOSS_FILE: &str = "loss_history.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub precisions: Vec<Precision>,
    pub eps_fold: f64,
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection {
            precisions: Precision::defaults(),
            eps_fold: DEFAULT_EPS_FOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub test_batch_size: usize,
    pub distribution_stats: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection {
            test_batch_size: e.test_batch_size,
            distribution_stats: e.distribution_stats,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// CIFAR-10 binary batches, needed only for `data.source = "cifar10"`.
    pub dataset_dir: Option<PathBuf>,
    pub graph_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset_dir: None,
            graph_dir: "runs/graphs".into(),
            checkpoint_dir: "runs/checkpoint".into(),
            report_dir: "runs/report".into(),
        }
    }
}

/// Everything a run needs, read from one TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, overrides the seed of every section.
    pub seed: Option<u64>,
    pub space: SpaceConfig,
    pub splits: SplitPlan,
    pub hypernet: HypernetConfig,
    pub train: TrainConfig,
    pub quant: QuantSection,
    pub data: DataConfig,
    pub eval: EvalSection,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.seeded())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self.seeded()
    }

    fn seeded(mut self) -> Self {
        if let Some(s) = self.seed {
            self.space.rng_seed = s;
            self.hypernet.init_seed = s;
            self.train.seed = s;
            self.data.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.splits.validate(&self.space)?;
        self.hypernet.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.quant.precisions.is_empty() {
            return Err(Error::Config("quant: precisions must not be empty".into()));
        }
        for &p in &self.quant.precisions {
            self.quant_config(p).validate()?;
        }
        self.eval_config().validate()?;
        if self.hypernet.s_max > self.space.s_max {
            return Err(Error::Config(format!(
                "hypernet.s_max {} exceeds space.s_max {} used for virtual edges",
                self.hypernet.s_max, self.space.s_max
            )));
        }
        let [_, _, kh, kw] = self.hypernet.canonical_shape;
        if let Some(&k) = self.space.kernel_sizes.iter().max() {
            if k > kh.min(kw) {
                return Err(Error::Config(format!(
                    "space kernel size {k} exceeds canonical kernel {kh}x{kw}"
                )));
            }
        }
        if self.data.source == crate::train::DataSource::Cifar10 && self.paths.dataset_dir.is_none() {
            return Err(Error::Config("data.source = \"cifar10\" requires paths.dataset_dir".into()));
        }
        Ok(())
    }

    pub fn quant_config(&self, precision: Precision) -> QuantConfig {
        QuantConfig {
            precision,
            eps_fold: self.quant.eps_fold,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            test_batch_size: self.eval.test_batch_size,
            eps_fold: self.quant.eps_fold,
            distribution_stats: self.eval.distribution_stats,
        }
    }

    fn resolution(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.space.input_resolution;
        (c, h, w)
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        self.data
            .load(self.resolution(), self.space.num_classes, self.paths.dataset_dir.as_deref())
    }

    pub fn training_pool(&self) -> Result<Vec<ArchGraph>> {
        training_pool(&self.space, self.splits.train_draws)
    }

    pub fn make_splits(&self) -> Result<Splits> {
        make_splits(&self.space, &self.splits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub hash: String,
    pub params: u64,
    pub depth: usize,
    pub width: usize,
    pub has_batchnorm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub graphs: Vec<ManifestEntry>,
}

/// Samples `count` training-space graphs into `out`, then writes the manifest.
pub fn cmd_sample(cfg: &RunConfig, count: usize, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let graphs = training_pool(&cfg.space, count as u64)?;
    create_dir_all(out)?;
    let mut entries = vec![];
    for (i, g) in graphs.iter().enumerate() {
        let file = format!("graph_{i:05}.ghnq-graph");
        write_atomic(&out.join(&file), &serialize_graph(g))?;
        entries.push(ManifestEntry {
            file,
            hash: g.hash(),
            params: g.count_params(),
            depth: g.depth(),
            width: g.width(),
            has_batchnorm: g.has_batchnorm(),
        });
    }
    let m = Manifest {
        seed: cfg.space.rng_seed,
        count,
        graphs: entries,
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
    write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(m)
}

/// Trains into `out`, resuming from `out/checkpoint.ghnq` unless `fresh`.
/// Checkpoint and loss history are rewritten after every epoch. With
/// `halt_after = Some(k)` training stops once `k` epochs are done.
pub fn cmd_train(cfg: &RunConfig, out: &Path, halt_after: Option<usize>, fresh: bool) -> Result<TrainState> {
    cfg.validate()?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let (mut h, mut st) = if ckpt.exists() && !fresh {
        let (h, st, saved) = restore_training(&Checkpoint::from_bytes(&read(&ckpt)?)?)?;
        if h.config() != &cfg.hypernet || saved.as_ref() != Some(&cfg.train) {
            return Err(Error::Config(format!(
                "{} was written with a different hypernet or train config; pass --fresh to start over",
                ckpt.display()
            )));
        }
        (h, st)
    } else {
        let h = Hypernet::new(cfg.hypernet.clone())?;
        let st = TrainState::new(&h);
        (h, st)
    };
    let (train, _) = cfg.load_data()?;
    let pool = cfg.training_pool()?;
    create_dir_all(out)?;
    let stop = halt_after.unwrap_or(usize::MAX);
    if st.epochs_done >= stop {
        return Ok(st);
    }
    finetune_from(&mut h, &mut st, &cfg.train, &pool, &train, |h, st| {
        write_atomic(&ckpt, &training_checkpoint(h, st, &cfg.train).to_bytes())?;
        write_atomic(&out.join(LOSS_FILE), st.history_csv().as_bytes())?;
        let r = st.history.last().expect("epoch recorded");
        eprintln!("epoch {} lr {:e} loss {:.6}", r.epoch, r.lr, r.mean_loss);
        Ok(st.epochs_done < stop)
    })?;
    Ok(st)
}

pub fn load_hypernet(path: &Path) -> Result<Hypernet> {
    Hypernet::from_checkpoint(&Checkpoint::from_bytes(&read(path)?)?)
}

/// Evaluates `checkpoint` on the selected splits and writes `report.csv` and
/// `report.json` into `out`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    precisions: &[Precision],
    split_filter: Option<&[SplitKind]>,
    out: &Path,
) -> Result<EvalReport> {
    cfg.validate()?;
    let h = load_hypernet(checkpoint)?;
    let (_, test) = cfg.load_data()?;
    let mut splits = cfg.make_splits()?;
    if let Some(keep) = split_filter {
        splits.sets.retain(|(k, _)| keep.contains(k));
    }
    let report = evaluate(&h, &splits, &test, precisions, &cfg.eval_config())?;
    create_dir_all(out)?;
    write_atomic(&out.join(REPORT_CSV), report.to_csv().as_bytes())?;
    write_atomic(&out.join(REPORT_JSON), (report.to_json() + "\n").as_bytes())?;
    Ok(report)
}

/// Robustness of one graph at every precision, plus tensor statistics.
pub fn cmd_quantreport(
    cfg: &RunConfig,
    checkpoint: &Path,
    graph: &Path,
    precisions: &[Precision],
    out: Option<&Path>,
) -> Result<serde_json::Value> {
    cfg.validate()?;
    let h = load_hypernet(checkpoint)?;
    let g = deserialize_graph_with(&read(graph)?, h.config().s_max.max(2))?;
    let (_, test) = cfg.load_data()?;
    let params = h.predict(&g)?;
    let entries = precisions
        .iter()
        .map(|&p| per_network_robustness(&g, &params, &test, &cfg.quant_config(p), cfg.eval.test_batch_size))
        .collect::<Result<Vec<_>>>()?;
    let mut ranges = serde_json::Map::new();
    for n in &g.nodes {
        if n.kind.is_conv() || n.kind == crate::arch::OpKind::Linear {
            let w = &params.get(n.id).expect("validated params")[0];
            ranges.insert(n.id.to_string(), json!(per_channel_range(w)?));
        }
    }
    let v = json!({
        "graph": g.hash(),
        "params": g.count_params(),
        "precisions": entries,
        "distribution": layerwise_distribution_stats(&g, &params)?,
        "weight_channel_ranges": ranges,
    });
    if let Some(p) = out {
        write_atomic(p, (serde_json::to_string_pretty(&v).expect("json") + "\n").as_bytes())?;
    }
    Ok(v)
}

#[derive(Parser)]
#[command(name = "ghnq", version, about = "Predict CNN parameters with a graph hypernetwork and measure their robustness to quantization")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample architectures into graph files plus a manifest.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Defaults to `splits.train_draws`.
        #[arg(long)]
        count: Option<usize>,
        /// Defaults to `paths.graph_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finetune the hypernetwork, resuming from the latest checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Defaults to `paths.checkpoint_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop once this many epochs are done.
        #[arg(long)]
        halt_after: Option<usize>,
        /// Ignore an existing checkpoint.
        #[arg(long)]
        fresh: bool,
    },
    /// Evaluate a checkpoint on the test splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<paths.checkpoint_dir>/checkpoint.ghnq`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma list, e.g. `float32,quant8,quant4`.
        #[arg(long)]
        precisions: Option<String>,
        /// Comma list of `iid`, `deep`, `wide`, `bn_free`.
        #[arg(long)]
        splits: Option<String>,
        /// Defaults to `paths.report_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-network robustness report for one graph file.
    Quantreport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        precisions: Option<String>,
        /// JSON output file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_splits(s: &str) -> Result<Vec<SplitKind>> {
    s.split(',')
        .map(|t| {
            SplitKind::parse(t.trim()).ok_or_else(|| {
                Error::Config(format!("unknown split '{t}' (expected iid, deep, wide or bn_free)"))
            })
        })
        .collect()
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be >= 1".into()));
        }
        b = b.num_threads(j);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn precisions_or(flag: &Option<String>, cfg: &RunConfig) -> Result<Vec<Precision>> {
    match flag {
        Some(s) => Precision::parse_list(s).map_err(|e| Error::Config(e.to_string())),
        None => Ok(cfg.quant.precisions.clone()),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Sample { common, count, out } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| cfg.paths.graph_dir.clone());
            let count = count.unwrap_or(cfg.splits.train_draws as usize);
            let m = pool(common.jobs)?.install(|| cmd_sample(&cfg, count, &out))?;
            println!("wrote {} graphs and {} to {}", m.count, MANIFEST_FILE, out.display());
        }
        Command::Train {
            common,
            out,
            halt_after,
            fresh,
        } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| cfg.paths.checkpoint_dir.clone());
            let st = pool(common.jobs)?.install(|| cmd_train(&cfg, &out, halt_after, fresh))?;
            println!("{} of {} epochs done; checkpoint in {}", st.epochs_done, cfg.train.epochs, out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            precisions,
            splits,
            out,
        } => {
            let cfg = load_config(&common)?;
            let precisions = precisions_or(&precisions, &cfg)?;
            let filter = splits.as_deref().map(parse_splits).transpose()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint_dir.join(CHECKPOINT_FILE));
            let out = out.unwrap_or_else(|| cfg.paths.report_dir.clone());
            let r = pool(common.jobs)?.install(|| cmd_eval(&cfg, &ckpt, &precisions, filter.as_deref(), &out))?;
            print!("{}", r.table());
        }
        Command::Quantreport {
            common,
            checkpoint,
            graph,
            precisions,
            out,
        } => {
            let cfg = load_config(&common)?;
            let precisions = precisions_or(&precisions, &cfg)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint_dir.join(CHECKPOINT_FILE));
            let v = pool(common.jobs)?
                .install(|| cmd_quantreport(&cfg, &ckpt, &graph, &precisions, out.as_deref()))?;
            if out.is_none() {
                println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            }
        }
    }
    Ok(())
}

/// Exit code for an error: 2 for configuration problems, 3 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 3,
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("[train]\nlrr = 1.0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("bogus = 1\n"), Err(Error::Config(_))));
        let c = RunConfig::from_toml("[quant]\nprecisions = [\"quant9\"]\n");
        assert!(c.is_err() || c.unwrap().validate().is_err());
        let c = RunConfig::from_toml("[train]\nepochs = 2\nlr_drop_epoch = 2\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_overrides_every_section() {
        let c = RunConfig::from_toml("seed = 9\n[train]\nseed = 1\n").unwrap();
        assert_eq!((c.space.rng_seed, c.hypernet.init_seed, c.train.seed, c.data.seed), (9, 9, 9, 9));
        let c = c.with_seed(4);
        assert_eq!(c.train.seed, 4);
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn roundtrips_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn split_list() {
        assert_eq!(parse_splits("iid,bn_free").unwrap(), vec![SplitKind::Iid, SplitKind::BnFree]);
        assert!(parse_splits("iid,huge").is_err());
    }
}
