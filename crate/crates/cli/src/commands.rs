use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use diffitm::bench::{self, report, EvalConfig, Mode, SuiteResult};
use diffitm::bias;
use diffitm::diffusion::train::CONFIG_FILE;
use diffitm::diffusion::{load_model, train, Denoiser, TrainConfig};
use diffitm::hardneg::{self, HardNegConfig};
use diffitm::itm::DenoiserScorer;
use diffitm::kv;
use diffitm::scenegen::{build_dataset, build_tasks, read_dataset, read_suite, write_dataset, write_suite};
use diffitm::{Error, Result};

use crate::manifest::ManifestWriter;
use crate::{BiasArgs, Cli, Command, EvalArgs, FinetuneArgs, GenerateArgs, Global, ReportArgs, SweepArgs, TrainArgs};

pub const RESULT_FILE: &str = "result.json";

pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn run(cli: Cli) -> Outcome {
    if cli.global.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.threads)
            .build_global()
            .map_err(|e| usage(format!("cannot set thread count: {e}")))?;
    }
    let g = &cli.global;
    match cli.command {
        Command::Generate(a) => generate(g, &a),
        Command::Train(a) => train_cmd(g, &a),
        Command::Finetune(a) => finetune(g, &a),
        Command::Eval(a) => eval(g, &a),
        Command::Sweep(a) => sweep(g, &a),
        Command::Bias(a) => bias_cmd(g, &a),
        Command::Report(a) => report_cmd(g, &a),
    }
}

/// Wrap `work` in a manifest written before and after it.
fn with_manifest<C: Serialize>(
    command: &str,
    g: &Global,
    config: &C,
    seeds: &[(&str, u64)],
    inputs: &[(&str, &Path)],
    work: impl FnOnce() -> Result<()>,
) -> Outcome {
    let config = serde_json::to_value(config).map_err(Error::from)?;
    let seeds = seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let writer = ManifestWriter::begin(command, config, seeds, g.threads, inputs, &g.out)?;
    let outcome = work();
    writer.finish(&outcome)?;
    outcome.map_err(Failure::Runtime)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Load a checkpoint with the architecture recorded next to it, or the
/// default architecture when there is no training config beside it.
pub fn load_checkpoint_model(path: &Path) -> Result<Denoiser> {
    let config_path = path.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    let config = if config_path.exists() {
        let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        kv::from_kv(&TrainConfig::default(), &text)?
    } else {
        TrainConfig::default()
    };
    load_model(path, &config.model)
}

#[derive(Serialize)]
struct GenerateConfig<'a> {
    #[serde(flatten)]
    args: &'a GenerateArgs,
    seed: u64,
}

impl Serialize for GenerateArgs {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("GenerateArgs", 4)?;
        st.serialize_field("n_train", &self.n_train)?;
        st.serialize_field("n_val", &self.n_val)?;
        st.serialize_field("k", &self.k)?;
        st.serialize_field("n_per_subtask", &self.n_per_subtask)?;
        st.end()
    }
}

fn generate(g: &Global, a: &GenerateArgs) -> Outcome {
    if a.n_train == 0 || a.n_val == 0 {
        return Err(usage("--n-train and --n-val must be positive"));
    }
    if a.k < 2 || a.n_per_subtask == 0 {
        return Err(usage("--k must be at least 2 and --n-per-subtask positive"));
    }
    let config = GenerateConfig { args: a, seed: g.seed };
    with_manifest("generate", g, &config, &[("root", g.seed)], &[], || {
        let ds = build_dataset(a.n_train, a.n_val, g.seed)?;
        write_dataset(&g.out.join("dataset"), &ds)?;
        let suite = build_tasks(g.seed, a.k, a.n_per_subtask)?;
        write_suite(&g.out.join("suite"), &suite)?;
        println!(
            "dataset: {} records, suite: {} instances (k = {})",
            ds.len(),
            suite.instances.len(),
            a.k
        );
        Ok(())
    })
}

fn train_cmd(g: &Global, a: &TrainArgs) -> Outcome {
    let mut config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            kv::from_kv(&TrainConfig::default(), &text).map_err(|e| usage(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    config.seed = g.seed;
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.lr {
        config.lr = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.p_uncond {
        config.p_uncond = v;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    with_manifest("train", g, &config, &[("root", g.seed)], &[("dataset", &a.dataset)], || {
        let ds = read_dataset(&a.dataset)?;
        let outcome = train::train(&config, &ds, &g.out)?;
        if let Some(last) = outcome.log.last() {
            println!(
                "trained {} epochs: val loss {:.5} (initial {:.5})",
                last.epoch, last.val_loss, outcome.initial_val_loss
            );
        }
        Ok(())
    })
}

fn finetune(g: &Global, a: &FinetuneArgs) -> Outcome {
    let mut config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            kv::from_kv(&HardNegConfig::default(), &text).map_err(|e| usage(e.to_string()))?
        }
        None => HardNegConfig::default(),
    };
    config.seed = g.seed;
    config.lambda = a.lambda;
    config.no_neg |= a.no_neg;
    config.clip &= !a.no_clip;
    if let Some(v) = a.p_uncond {
        config.p_uncond = v;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.lr {
        config.lr = v;
    }
    if let Some(v) = a.text_negatives {
        config.negatives.text_per_positive = v;
    }
    if let Some(v) = a.image_negatives {
        config.negatives.image_per_positive = v;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    with_manifest(
        "finetune",
        g,
        &config,
        &[("root", g.seed)],
        &[("dataset", &a.dataset), ("checkpoint", &a.checkpoint)],
        || {
            let base = load_checkpoint_model(&a.checkpoint)?;
            let ds = read_dataset(&a.dataset)?;
            fs::create_dir_all(&g.out).map_err(|e| Error::io(&g.out, e))?;
            let base_config = a.checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
            if base_config.exists() {
                let dst = g.out.join(CONFIG_FILE);
                fs::copy(&base_config, &dst).map_err(|e| Error::io(&dst, e))?;
            }
            let outcome = hardneg::finetune(&config, &base, &ds, &g.out)?;
            let sanity = hardneg::generative_sanity(&base, &outcome.model, &ds, config.val_examples, config.seed)?;
            write_json(&g.out.join("sanity.json"), &sanity)?;
            let r = &outcome.report;
            println!(
                "hard-negative val accuracy {:.3} -> {:.3} (epoch {}), val loss ratio {:.3}{}",
                r.base_val_accuracy,
                r.epochs
                    .iter()
                    .find(|e| e.epoch == r.selected_epoch)
                    .map_or(r.base_val_accuracy, |e| e.val_accuracy),
                r.selected_epoch,
                sanity.ratio,
                if sanity.flagged { " (flagged)" } else { "" }
            );
            if let Some(reason) = &r.aborted {
                return Err(Error::Diverged {
                    epoch: r.epochs.len() + 1,
                    detail: reason.clone(),
                });
            }
            Ok(())
        },
    )
}

fn parse_mode(s: &str) -> std::result::Result<Mode, Failure> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

fn eval(g: &Global, a: &EvalArgs) -> Outcome {
    let mode = parse_mode(&a.mode)?;
    if a.bank_size == 0 {
        return Err(usage("--bank-size must be positive"));
    }
    let config = EvalConfig {
        mode,
        bank_size: a.bank_size,
        bank_seed: a.bank_seed,
    };
    let suite = read_suite(&a.suite)?;
    if suite.direction(mode.direction()).next().is_none() {
        return Err(usage(format!("mode {mode} does not apply to any instance of this suite")));
    }
    println!("mode {mode}, bank size {}, bank seed {}", a.bank_size, a.bank_seed);
    with_manifest(
        "eval",
        g,
        &config,
        &[("bank", a.bank_seed)],
        &[("suite", &a.suite), ("checkpoint", &a.checkpoint)],
        || {
            let model = load_checkpoint_model(&a.checkpoint)?;
            let run = bench::run_suite(&DenoiserScorer::new(&model), &suite, &config)?;
            write_json(&g.out.join(RESULT_FILE), &run.result)?;
            let md = report::result_markdown(&run.result);
            write_text(&g.out.join("result.md"), &md)?;
            write_text(&g.out.join("result.csv"), &report::result_csv(&run.result))?;
            write_text(&g.out.join("scores.csv"), &report::score_dump_csv(&run.errors, mode)?)?;
            print!("{md}");
            Ok(())
        },
    )
}

fn sweep(g: &Global, a: &SweepArgs) -> Outcome {
    let mode = parse_mode(&a.mode)?;
    if a.sizes.is_empty() || a.sizes.contains(&0) || a.sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(usage("--sizes must be positive and ascending"));
    }
    let config = EvalConfig {
        mode,
        bank_size: *a.sizes.last().expect("non-empty"),
        bank_seed: a.bank_seed,
    };
    let suite = read_suite(&a.suite)?;
    if suite.direction(mode.direction()).next().is_none() {
        return Err(usage(format!("mode {mode} does not apply to any instance of this suite")));
    }
    #[derive(Serialize)]
    struct SweepConfig<'a> {
        eval: &'a EvalConfig,
        sizes: &'a [usize],
    }
    with_manifest(
        "sweep",
        g,
        &SweepConfig {
            eval: &config,
            sizes: &a.sizes,
        },
        &[("bank", a.bank_seed)],
        &[("suite", &a.suite), ("checkpoint", &a.checkpoint)],
        || {
            let model = load_checkpoint_model(&a.checkpoint)?;
            let points = bench::sweep_bank_size(&DenoiserScorer::new(&model), &suite, &config, &a.sizes)?;
            write_json(&g.out.join("sweep.json"), &points)?;
            let md = report::sweep_markdown(mode, &points);
            write_text(&g.out.join("sweep.md"), &md)?;
            write_text(&g.out.join("sweep.csv"), &report::sweep_csv(mode, &points))?;
            print!("{md}");
            Ok(())
        },
    )
}

fn bias_cmd(g: &Global, a: &BiasArgs) -> Outcome {
    let (mut config, base) = match &a.config {
        Some(p) => (
            bias::read_config(p).map_err(|e| usage(e.to_string()))?,
            p.parent().unwrap_or(Path::new(".")).to_path_buf(),
        ),
        None => {
            if a.per_group < 2 {
                return Err(usage("--per-group must be at least 2"));
            }
            (bias::control_suite(g.seed, a.per_group), PathBuf::from("."))
        }
    };
    if let Some(n) = a.bank_size {
        if n == 0 {
            return Err(usage("--bank-size must be positive"));
        }
        config.bank_size = n;
    }
    if let Some(s) = a.bank_seed {
        config.bank_seed = s;
    }
    config.resolved_pairs().map_err(|e| usage(e.to_string()))?;
    let mut inputs: Vec<(&str, &Path)> = vec![("checkpoint", &a.checkpoint)];
    if let Some(p) = &a.config {
        inputs.push(("config", p));
    }
    with_manifest(
        "bias",
        g,
        &config,
        &[("bank", config.bank_seed), ("permutation", config.test.seed)],
        &inputs,
        || {
            let model = load_checkpoint_model(&a.checkpoint)?;
            write_json(&g.out.join("bias_config.json"), &config)?;
            let table = bias::diffusion_bias_suite(&config, &base, &DenoiserScorer::new(&model))?;
            write_json(&g.out.join("bias.json"), &table)?;
            let md = bias::table_markdown(&table);
            write_text(&g.out.join("bias.md"), &md)?;
            write_text(&g.out.join("bias.csv"), &bias::table_csv(&table))?;
            print!("{md}");
            Ok(())
        },
    )
}

fn result_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join(RESULT_FILE)
    } else {
        input.to_path_buf()
    }
}

fn default_label(input: &Path) -> String {
    let dir = if input.is_dir() { input } else { input.parent().unwrap_or(input) };
    dir.file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Accuracy per subtask, one row per result.
fn summary_markdown(labels: &[String], results: &[&SuiteResult]) -> String {
    let mut subtasks: Vec<String> = Vec::new();
    for r in results {
        for s in r.subtasks.keys() {
            let name = s.name().to_string();
            if !subtasks.contains(&name) {
                subtasks.push(name);
            }
        }
    }
    let mut s = format!("| model | mode | bank | {} | overall |\n", subtasks.join(" | "));
    s += &format!("|---|---|---|{}---:|\n", "---:|".repeat(subtasks.len()));
    for (l, r) in labels.iter().zip(results) {
        s += &format!("| {l} | {} | {} |", r.mode, r.bank.n);
        for name in &subtasks {
            match r.subtasks.iter().find(|(k, _)| k.name() == name) {
                Some((_, a)) => s += &format!(" {:.1} |", 100.0 * a.accuracy),
                None => s += " |",
            }
        }
        s += &format!(" {:.1} |\n", 100.0 * r.overall.accuracy);
    }
    s
}

fn report_cmd(g: &Global, a: &ReportArgs) -> Outcome {
    if a.inputs.is_empty() {
        return Err(usage("report needs at least one eval output"));
    }
    if !a.labels.is_empty() && a.labels.len() != a.inputs.len() {
        return Err(usage("--labels needs one label per input"));
    }
    let labels: Vec<String> = if a.labels.is_empty() {
        a.inputs.iter().map(|p| default_label(p)).collect()
    } else {
        a.labels.clone()
    };
    let paths: Vec<PathBuf> = a.inputs.iter().map(|p| result_path(p)).collect();
    let inputs: Vec<(&str, &Path)> = paths.iter().map(|p| ("result", p.as_path())).collect();
    #[derive(Serialize)]
    struct ReportConfig<'a> {
        inputs: &'a [PathBuf],
        labels: &'a [String],
        bootstrap_seed: u64,
    }
    for p in &paths {
        if !p.is_file() {
            return Err(Failure::Runtime(Error::invalid(format!("no eval result at {}", p.display()))));
        }
    }
    let config = ReportConfig {
        inputs: &paths,
        labels: &labels,
        bootstrap_seed: g.seed,
    };
    with_manifest("report", g, &config, &[("bootstrap", g.seed)], &inputs, || {
        let results = paths
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok(serde_json::from_str::<SuiteResult>(&text)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in results.iter().enumerate() {
            groups.entry(&r.suite_fingerprint).or_default().push(i);
        }
        let mut md = String::from("# Results\n\n");
        let mut csv = String::new();
        let all: Vec<&SuiteResult> = results.iter().collect();
        md += &summary_markdown(&labels, &all);
        for idx in groups.values() {
            if idx.len() < 2 {
                continue;
            }
            let ls: Vec<String> = idx.iter().map(|&i| labels[i].clone()).collect();
            let rs: Vec<&SuiteResult> = idx.iter().map(|&i| &results[i]).collect();
            let cmp = bench::compare(&ls, &rs, g.seed)?;
            md += &format!("\n## Compared against {}\n\n", ls[0]);
            md += &report::comparison_markdown(&cmp);
            csv += &report::comparison_csv(&cmp);
        }
        write_text(&g.out.join("report.md"), &md)?;
        if !csv.is_empty() {
            write_text(&g.out.join("comparison.csv"), &csv)?;
        }
        print!("{md}");
        Ok(())
    })
}
