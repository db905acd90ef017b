use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use subcond_core::data::{gen_synthetic, read_dataset, write_dataset, Dataset, FORMAT_VERSION};
use subcond_core::harness::{
    aggregate, compare, export_embeddings, held_out_workflow, model_seed, run_cell, RunConfig, RunReport,
};
use subcond_core::layers::adapter_similarity;
use subcond_core::model::{build_model, Mode, ModelSet};

#[derive(Parser)]
#[command(name = "subcond", version, about = "Subject-conditioned layer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Print progress to stderr.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// JSON run configuration; omitted keys take built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rerun from the configuration recorded in a previous manifest.json.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set benchmark.shift_strength=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Single seed; replaces the configured seed list.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, env = "SUBCOND_OUT_DIR", default_value = ".")]
    out: PathBuf,
    /// Worker threads for independent runs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Agnostic,
    Specific,
    Lora,
    #[value(name = "subject-conditioned", alias = "sc")]
    SubjectConditioned,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Agnostic => Mode::Agnostic,
            ModeArg::Specific => Mode::Specific,
            ModeArg::Lora => Mode::Lora,
            ModeArg::SubjectConditioned => Mode::SubjectConditioned,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and test sets of each seed as SCND files.
    GenData(Common),
    /// Train and evaluate one condition.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Train on this SCND file instead of generated data.
        #[arg(long, requires = "test_data")]
        train_data: Option<PathBuf>,
        #[arg(long, requires = "train_data")]
        test_data: Option<PathBuf>,
    },
    /// Run every condition for every seed and write the result tables.
    Compare(Common),
    /// Hold out the last subject, then fine-tune an adapter for it.
    Finetune(Common),
    /// Train a subject-conditioned model and export its test embeddings.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        /// Embed this SCND file instead of the generated test set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print shared, per-subject, total and active parameter counts.
    ParamCount {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Train a subject-conditioned model and write adapter cosine similarities.
    AdapterSim(Common),
}

#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<ConfigError>() || matches!(e.downcast_ref::<subcond_core::Error>(), Some(subcond_core::Error::Config(_)))
    })
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_error(format!("override `{spec}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in key.split('.') {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_error(format!("override `{key}`: `{part}` is not inside an object")))?;
        node = obj.entry(part).or_insert(Value::Object(Default::default()));
    }
    *node = value;
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = &common.config {
        merge(&mut value, read_json(path)?);
    }
    if let Some(path) = &common.manifest {
        let config = read_json(path)?
            .get_mut("config")
            .map(Value::take)
            .ok_or_else(|| config_error(format!("{}: manifest has no `config`", path.display())))?;
        merge(&mut value, config);
    }
    for o in &common.overrides {
        apply_override(&mut value, o)?;
    }
    let mut run: RunConfig = serde_path_to_error::deserialize(value)
        .map_err(|e| config_error(format!("key `{}`: {}", e.path(), e.inner())))?;
    if let Some(seed) = common.seed {
        run.train.seeds = vec![seed];
    }
    if let Some(seeds) = &common.seeds {
        run.train.seeds = seeds.clone();
    }
    if let Some(jobs) = common.jobs {
        run.jobs = jobs;
    }
    run.validate()?;
    Ok(run)
}

struct Output {
    dir: PathBuf,
    verbose: bool,
}

impl Output {
    fn new(dir: &Path, verbose: bool) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            verbose,
        })
    }

    fn write(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        self.log(format!("wrote {}", path.display()));
        Ok(path)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn manifest(&self, command: &str, run: &RunConfig, extra: Value) -> Result<()> {
        let manifest = json!({
            "tool": "subcond",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seeds": run.train.seeds,
            "config": run,
            "arguments": extra,
            "formats": { "scnd": FORMAT_VERSION, "csv": 1 },
        });
        self.write("manifest.json", &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
        Ok(())
    }
}

fn trained_sc(run: &RunConfig, seed: u64, out: &Output) -> Result<(subcond_core::model::Network, Dataset)> {
    let (train, test) = gen_synthetic(&run.benchmark_for(seed))?;
    out.log(format!("training subject_conditioned, seed {seed}"));
    let cell = run_cell(run, Mode::SubjectConditioned, seed, &train, &test)?;
    match cell.models {
        ModelSet::Shared(net) => Ok((net, test)),
        ModelSet::PerSubject(_) => unreachable!("subject-conditioned models are shared"),
    }
}

fn path_arg(p: &Option<PathBuf>) -> Value {
    p.as_ref().map_or(Value::Null, |p| json!(p.display().to_string()))
}

fn run(cli: Cli) -> Result<()> {
    let verbose = cli.verbose > 0;
    match cli.command {
        Command::GenData(common) => {
            let run = load_config(&common)?;
            let out = Output::new(&common.out, verbose)?;
            for &seed in &run.train.seeds {
                let (train, test) = gen_synthetic(&run.benchmark_for(seed))?;
                for (name, data) in [("train", &train), ("test", &test)] {
                    let path = out.dir.join(format!("{name}_seed{seed}.scnd"));
                    write_dataset(data, &path)?;
                    println!("{}", path.display());
                }
            }
            out.manifest("gen-data", &run, json!({}))?;
        }
        Command::Train {
            common,
            mode,
            train_data,
            test_data,
        } => {
            let run = load_config(&common)?;
            let out = Output::new(&common.out, verbose)?;
            let mode = Mode::from(mode);
            let files = match (&train_data, &test_data) {
                (Some(tr), Some(te)) => Some((read_dataset(tr)?, read_dataset(te)?)),
                _ => None,
            };
            let mut rows = Vec::new();
            for &seed in &run.train.seeds {
                let (train, test) = match &files {
                    Some(pair) => pair.clone(),
                    None => gen_synthetic(&run.benchmark_for(seed))?,
                };
                out.log(format!("training {}, seed {seed}", mode.name()));
                let cell = run_cell(&run, mode, seed, &train, &test)?;
                let (total, active) = (cell.count.total(), cell.count.active());
                rows.extend(cell.accuracy.iter().map(|(&subject, &accuracy)| subcond_core::harness::ResultRow {
                    condition: mode,
                    seed,
                    subject,
                    accuracy,
                    total_params: total,
                    active_params: active,
                }));
            }
            let report = RunReport {
                aggregates: aggregate(&rows),
                rows,
                counts: Vec::new(),
                diagnostics: Vec::new(),
                embeddings: Vec::new(),
            };
            out.write("results.csv", &report.results_csv())?;
            out.write("aggregate.csv", &report.aggregate_csv())?;
            print!("{}", report.aggregate_csv());
            out.manifest(
                "train",
                &run,
                json!({ "mode": mode, "train_data": path_arg(&train_data), "test_data": path_arg(&test_data) }),
            )?;
        }
        Command::Compare(common) => {
            let run = load_config(&common)?;
            let out = Output::new(&common.out, verbose)?;
            out.log(format!(
                "comparing {} conditions over seeds {:?} on {} thread(s)",
                run.conditions.len(),
                run.train.seeds,
                run.jobs
            ));
            let report = compare(&run)?;
            for path in report.write(&out.dir)? {
                out.log(format!("wrote {}", path.display()));
            }
            print!("{}", report.aggregate_csv());
            out.manifest("compare", &run, json!({}))?;
        }
        Command::Finetune(common) => {
            let run = load_config(&common)?;
            let out = Output::new(&common.out, verbose)?;
            let mut csv = String::from(
                "seed,subject,fallback_accuracy,finetuned_accuracy,fallback_matches_zeroed,frozen_unchanged\n",
            );
            for &seed in &run.train.seeds {
                out.log(format!("held-out workflow, seed {seed}"));
                let r = held_out_workflow(&run, seed)?;
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.seed,
                    r.subject,
                    r.fallback_accuracy,
                    r.finetuned_accuracy,
                    r.fallback_matches_zeroed,
                    r.frozen_unchanged
                ));
            }
            out.write("finetune.csv", &csv)?;
            print!("{csv}");
            out.manifest("finetune", &run, json!({}))?;
        }
        Command::ExportEmbeddings { common, data } => {
            let run = load_config(&common)?;
            let out = Output::new(&common.out, verbose)?;
            let external = data.as_ref().map(read_dataset).transpose()?;
            for &seed in &run.train.seeds {
                let (net, test) = trained_sc(&run, seed, &out)?;
                let path = out.dir.join(format!("embeddings_seed{seed}.csv"));
                export_embeddings(&net, external.as_ref().unwrap_or(&test), &path)?;
                println!("{}", path.display());
            }
            out.manifest("export-embeddings", &run, json!({ "data": path_arg(&data) }))?;
        }
        Command::ParamCount { common, mode } => {
            let run = load_config(&common)?;
            let out = Output::new(&common.out, verbose)?;
            let modes = match mode {
                Some(m) => vec![Mode::from(m)],
                None => run.conditions.clone(),
            };
            let seed = model_seed(run.train.seeds[0]);
            let mut csv = String::from("condition,shared,per_subject,subjects,total,active\n");
            for m in modes {
                let cfg = run.model.resolve(&run.benchmark, m, seed);
                let count = build_model(&cfg)?.count(cfg.subjects)?;
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    m.name(),
                    count.shared,
                    count.per_subject,
                    count.subjects,
                    count.total(),
                    count.active()
                ));
            }
            out.write("param_count.csv", &csv)?;
            print!("{csv}");
            out.manifest("param-count", &run, json!({ "mode": mode.map(Mode::from) }))?;
        }
        Command::AdapterSim(common) => {
            let run = load_config(&common)?;
            let out = Output::new(&common.out, verbose)?;
            let mut csv = String::from("seed,layer,subject_a,subject_b,cosine\n");
            for &seed in &run.train.seeds {
                let (net, _) = trained_sc(&run, seed, &out)?;
                for (layer, bank) in net.adapter_banks() {
                    let (ids, sim) = adapter_similarity(bank);
                    for (i, a) in ids.iter().enumerate() {
                        for (j, b) in ids.iter().enumerate() {
                            csv.push_str(&format!("{seed},{layer},{a},{b},{}\n", sim[i][j]));
                        }
                    }
                }
            }
            out.write("adapter_similarity.csv", &csv)?;
            out.manifest("adapter-sim", &run, json!({}))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
