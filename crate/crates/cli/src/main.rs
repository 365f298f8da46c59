use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use tailnas::audit::{op_checks, primitive_checks, rows_to_csv};
use tailnas::config::{log_event, prepare_out_dir, resolve_out_dir, ExperimentConfig};
use tailnas::data::{bilevel_split, save_dataset};
use tailnas::etf::{build_etf, verify_etf};
use tailnas::experiments::{ablate, collapse, explore, opcompare, ExploreAxis, SuiteResult};
use tailnas::search::{classifier_bias_report, search, SearchData, SearchIo};
use tailnas::supernet::{ClassifierKind, Genotype, Network};
use tailnas::train::{curve_to_csv, evaluate, recipe_label, train_from_scratch, GroupThresholds};

#[derive(Parser)]
#[command(
    name = "tailnas",
    version,
    about = "Architecture search for long-tailed classification"
)]
struct Cli {
    /// TOML experiment configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Defaults to $TAILNAS_OUT/<command>, then runs/<command>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Classifier used by the command's search or training stage.
    #[arg(long, global = true)]
    classifier: Option<ClassifierKind>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bilevel search; writes genotype.json, trace.csv, bias.csv and summary.json.
    Search,
    /// Trains a genotype from scratch; writes curve.csv, eval_report.json and model.json.
    Train {
        /// genotype.json written by `search`
        #[arg(long)]
        genotype: PathBuf,
    },
    /// Evaluates a saved model on the configured test set.
    Eval {
        /// model.json written by `train`
        #[arg(long)]
        model: PathBuf,
    },
    /// Fixed-backbone sweep along one design axis.
    Explore {
        /// topology, convolution, activation_placement, activation_kind or normalization
        #[arg(long)]
        axis: ExploreAxis,
    },
    /// Catalog and classifier ablation: vanilla, +conv, +conv+etf.
    Ablate,
    /// Fixed-backbone comparison of transform operations.
    Opcompare,
    /// Matched trainable/fixed classifier searches with curvature traces.
    Collapse,
    /// Builds a fixed classifier and checks its geometry.
    Etfcheck {
        /// Number of classes C
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Feature dimension d; defaults to C
        #[arg(long)]
        dim: Option<usize>,
        /// Squared column norm of the classifier
        #[arg(long, default_value_t = 1.0)]
        energy: f64,
    },
    /// Finite-difference audit of all primitives and operations.
    Gradcheck {
        /// Largest accepted relative error
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Writes the configured training and test sets in the binary dataset format.
    Data,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Search => "search",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Explore { .. } => "explore",
            Command::Ablate => "ablate",
            Command::Opcompare => "opcompare",
            Command::Collapse => "collapse",
            Command::Etfcheck { .. } => "etfcheck",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Data => "data",
        }
    }
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

#[derive(Serialize)]
struct SearchSummary<'a> {
    config_hash: String,
    seed: u64,
    classifier: ClassifierKind,
    epochs: usize,
    skip_fraction: f64,
    final_val_balanced_acc: Option<f64>,
    final_lambda_max: Option<f64>,
    classifier_hash_start: &'a str,
    classifier_hash_end: &'a str,
    warnings: Vec<String>,
    config: &'a ExperimentConfig,
}

fn cmd_search(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (train, test) = cfg.load_data()?;
    let split = bilevel_split(&train, cfg.search.split_fraction, cfg.seed)?;
    let io = SearchIo {
        trace_csv: Some(out.join("trace.csv")),
        snapshot_dir: Some(out.to_path_buf()),
        config_hash: cfg.hash(),
    };
    let data = SearchData {
        w_set: &split.w_set,
        alpha_set: &split.alpha_set,
        test: &test,
        class_counts: train.per_class_counts(),
    };
    let outcome = search(&cfg.search, &cfg.arch, data, &io)?;
    write(out, "genotype.json", outcome.genotype.to_json()?)?;
    write(
        out,
        "bias.csv",
        classifier_bias_report(&outcome.trace)?.to_csv()?,
    )?;
    let last = outcome.trace.records.last();
    let mut warnings = split.warnings.clone();
    warnings.extend(outcome.warnings.iter().cloned());
    let summary = SearchSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        classifier: cfg.search.classifier,
        epochs: cfg.search.epochs,
        skip_fraction: outcome.genotype.skip_fraction(),
        final_val_balanced_acc: last.map(|r| r.val_balanced_acc),
        final_lambda_max: outcome
            .trace
            .records
            .iter()
            .rev()
            .find_map(|r| r.lambda_max),
        classifier_hash_start: &outcome.classifier_hash.0,
        classifier_hash_end: &outcome.classifier_hash.1,
        warnings,
        config: cfg,
    };
    write(out, "summary.json", json(&summary)?)?;
    println!("{}", outcome.genotype.to_json()?.trim_end());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path, genotype: &Path) -> Result<()> {
    let text =
        fs::read_to_string(genotype).with_context(|| format!("reading {}", genotype.display()))?;
    let genotype = Genotype::from_json(&text)?;
    let (train, test) = cfg.load_data()?;
    log::info!("training with recipe {}", recipe_label(&cfg.train));
    let mut outcome = train_from_scratch(&genotype, &cfg.arch, &cfg.train, &train, &test)?;
    write(out, "curve.csv", curve_to_csv(&outcome.curve)?)?;
    if let Some(crt) = &outcome.crt {
        write(out, "crt.json", json(crt)?)?;
    }
    let report = evaluate(
        &mut outcome.network,
        &test,
        &train.per_class_counts(),
        GroupThresholds::default(),
        &cfg.hash(),
        cfg.seed,
    )?;
    write(out, "eval_report.json", json(&report)?)?;
    write(out, "model.json", serde_json::to_string(&outcome.network)?)?;
    println!(
        "accuracy {:.4} params {}",
        report.overall_accuracy, report.parameter_count
    );
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, out: &Path, model: &Path) -> Result<()> {
    let text = fs::read_to_string(model).with_context(|| format!("reading {}", model.display()))?;
    let mut net: Network = serde_json::from_str(&text).context("parsing model")?;
    let (train, test) = cfg.load_data()?;
    let report = evaluate(
        &mut net,
        &test,
        &train.per_class_counts(),
        GroupThresholds::default(),
        &cfg.hash(),
        cfg.seed,
    )?;
    write(out, "eval_report.json", json(&report)?)?;
    println!(
        "accuracy {:.4} params {}",
        report.overall_accuracy, report.parameter_count
    );
    Ok(())
}

fn write_suite(out: &Path, suite: &SuiteResult) -> Result<()> {
    write(out, "suite.csv", suite.to_csv()?)?;
    let agg = suite.aggregate_csv()?;
    write(out, "aggregate.csv", &agg)?;
    print!("{agg}");
    Ok(())
}

fn cmd_etfcheck(
    cfg: &ExperimentConfig,
    out: &Path,
    classes: usize,
    dim: Option<usize>,
    energy: f64,
) -> Result<()> {
    let d = dim.unwrap_or(classes);
    let etf = build_etf(d, classes, energy, cfg.seed)?;
    let report = verify_etf(&etf, 1e-10);
    write(out, "etf_report.json", json(&report)?)?;
    println!(
        "C={classes} d={d}: norm dev {:.2e}, cosine dev {:.2e}, column sum {:.2e}, angle {:.3} deg",
        report.max_norm_deviation,
        report.max_cosine_deviation,
        report.max_column_sum,
        report.mean_angle_degrees
    );
    if !report.passed {
        bail!("ETF geometry check failed");
    }
    Ok(())
}

fn cmd_gradcheck(out: &Path, tol: f64) -> Result<()> {
    let seeds = [0, 1, 2];
    let mut rows = primitive_checks(&seeds, tol)?;
    rows.extend(op_checks(&seeds, tol)?);
    write(out, "gradcheck.csv", rows_to_csv(&rows)?)?;
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed).collect();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!(
        "{} checks, {} failed, worst relative error {worst:.3e}",
        rows.len(),
        failed.len()
    );
    for r in &failed {
        println!("FAIL {} seed {}: {:.3e}", r.target, r.seed, r.max_rel_error);
    }
    if !failed.is_empty() {
        bail!("{} gradient checks exceeded {tol}", failed.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(kind) = cli.classifier {
        cfg.search.classifier = kind;
        cfg.train.classifier = kind;
    }
    cfg.validate()?;

    let name = cli.command.name();
    let out = resolve_out_dir(cli.out.as_deref(), &cfg, name);
    prepare_out_dir(&out, cli.force)?;
    log_event(&out, &format!("start {name} config_hash={}", cfg.hash()))?;
    write(&out, "config.toml", cfg.to_toml()?)?;

    match &cli.command {
        Command::Search => cmd_search(&cfg, &out)?,
        Command::Train { genotype } => cmd_train(&cfg, &out, genotype)?,
        Command::Eval { model } => cmd_eval(&cfg, &out, model)?,
        Command::Explore { axis } => write_suite(&out, &explore(&cfg, *axis)?)?,
        Command::Ablate => {
            let suite = ablate(&cfg)?;
            write_suite(&out, &suite)?;
            write(&out, "scatter.csv", suite.scatter_csv("retrain_acc")?)?;
        }
        Command::Opcompare => {
            let (suite, guard) = opcompare(&cfg)?;
            write_suite(&out, &suite)?;
            write(&out, "scatter.csv", suite.scatter_csv("acc")?)?;
            write(&out, "param_guard.json", json(&guard)?)?;
        }
        Command::Collapse => {
            let (suite, summary) = collapse(&cfg, Some(&out))?;
            write_suite(&out, &suite)?;
            write(&out, "summary.json", json(&summary)?)?;
            println!(
                "median lambda_max: trainable {:.4} etf {:.4} ({})",
                summary.median_lambda_trainable,
                summary.median_lambda_etf,
                if summary.lambda_pass { "pass" } else { "fail" }
            );
        }
        Command::Etfcheck {
            classes,
            dim,
            energy,
        } => cmd_etfcheck(&cfg, &out, *classes, *dim, *energy)?,
        Command::Gradcheck { tol } => cmd_gradcheck(&out, *tol)?,
        Command::Data => {
            let (train, test) = cfg.load_data()?;
            save_dataset(&train, &out.join("train.bin"))?;
            save_dataset(&test, &out.join("test.bin"))?;
            println!("train {:?}", train.per_class_counts());
        }
    }
    log_event(&out, &format!("done {name}"))?;
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
