use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use longtail::balancing::{
    crt, learn_tau, lws_fit, ncm_fit, select_tau, tau_in_range, tau_normalize, CosinePredictor, LearnTauConfig,
    NcmMetric, TauObjective,
};
use longtail::data::{class_profile, generate_longtail, load_feature_dataset, write_feature_dataset, SyntheticSpec};
use longtail::harness::diagnostics::{parse_grid, tau_sweep, weight_norm_profile, write_tau_sweep_csv};
use longtail::harness::eval::{evaluate, EvalReport};
use longtail::head::{init_mlp, ClassifierHead, HeadKind, Predictor};
use longtail::{run_experiment, ClassProfile, Dataset, ExperimentConfig, TrainConfig, TrainFileConfig};

#[derive(Parser)]
#[command(name = "longtail", version, about = "Long-tailed classifier training and rebalancing on fixed features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SplitArgs {
    /// Training features used to assign many/medium/few splits.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = longtail::MANY_THRESHOLD)]
    many: usize,
    #[arg(long, default_value_t = longtail::FEW_THRESHOLD)]
    few: usize,
}

impl SplitArgs {
    /// Split profile from the training counts, or from `fallback` when no
    /// training file was given.
    fn profile(&self, fallback: &Dataset) -> Result<ClassProfile> {
        let counts_from = match &self.train {
            Some(p) => load(p)?,
            None => fallback.clone(),
        };
        Ok(class_profile(&counts_from, self.many, self.few)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BalanceMethod {
    Crt,
    Ncm,
    Tau,
    Lws,
    LearnTau,
}

impl BalanceMethod {
    fn name(self) -> &'static str {
        match self {
            Self::Crt => "crt",
            Self::Ncm => "ncm",
            Self::Tau => "tau",
            Self::Lws => "lws",
            Self::LearnTau => "learn_tau",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Generate a synthetic long-tailed task from a TOML spec.
    Gen {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train a classifier head on a feature file.
    Train {
        features: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// TOML training recipe; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-epoch statistics as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a head on a feature file.
    Eval {
        head: PathBuf,
        features: PathBuf,
        #[command(flatten)]
        splits: SplitArgs,
        /// Score classes by cosine similarity instead of the head's own rule.
        #[arg(long)]
        cosine: bool,
        /// Rectify queries before cosine scoring.
        #[arg(long, requires = "cosine")]
        relu: bool,
        /// Per-class report CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Evaluate tau-normalized versions of a head over a grid.
    SweepTau {
        head: PathBuf,
        features: PathBuf,
        #[arg(long, default_value = "0:1:0.1")]
        grid: String,
        #[command(flatten)]
        splits: SplitArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Per-class weight norms sorted by training count.
    Norms {
        head: PathBuf,
        /// Training features that define the class counts.
        features: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Rebalance a trained head and evaluate it.
    Balance {
        #[arg(value_enum)]
        method: BalanceMethod,
        head: PathBuf,
        /// Training features.
        train: PathBuf,
        /// Evaluation features.
        #[arg(long)]
        test: PathBuf,
        /// Validation features for tau selection; training class-averaged
        /// accuracy is used without them.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Fixed tau instead of grid selection.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value = "0:1:0.05")]
        grid: String,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.2)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "cosine")]
        metric: NcmMetric,
        #[arg(long, default_value_t = longtail::MANY_THRESHOLD)]
        many: usize,
        #[arg(long, default_value_t = longtail::FEW_THRESHOLD)]
        few: usize,
    },
}

fn load(path: &Path) -> Result<Dataset> {
    load_feature_dataset(path).with_context(|| format!("reading features {}", path.display()))
}

fn load_head(path: &Path) -> Result<ClassifierHead> {
    ClassifierHead::load(path).with_context(|| format!("reading head {}", path.display()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn warn_tau(tau: f64) {
    if !tau_in_range(tau) {
        eprintln!("warning: tau = {tau} lies outside [0, 1]");
    }
}

fn finish_report(report: &EvalReport, csv: Option<&Path>) -> Result<()> {
    println!("{}", report.summary());
    if let Some(p) = csv {
        report.write_csv(fs::File::create(p)?)?;
    }
    Ok(())
}

/// Put a retrained top layer back on the original hidden stack.
fn reattach(original: &ClassifierHead, mut top: ClassifierHead) -> ClassifierHead {
    if original.hidden.is_empty() {
        return top;
    }
    top.hidden = original.hidden.clone();
    if matches!(top.kind, HeadKind::Linear | HeadKind::TauNormalized) {
        top.kind = HeadKind::Mlp;
    }
    top
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            output,
            threads,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            let out = run_experiment(&cfg)?;
            let failed = out
                .cells
                .iter()
                .flat_map(|c| &c.methods)
                .filter(|m| m.result.is_err())
                .count();
            print!("{}", fs::read_to_string(out.dir.join("summary.md"))?);
            eprintln!("artifacts written to {}", out.dir.display());
            if failed > 0 {
                eprintln!("warning: {failed} run(s) failed; see summary.csv");
            }
        }
        Command::Gen { spec, output } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec = SyntheticSpec::from_toml(&text)?;
            let (train, val, test) = generate_longtail(&spec)?;
            fs::create_dir_all(&output)?;
            for (name, ds) in [("train.txt", &train), ("val.txt", &val), ("test.txt", &test)] {
                write_feature_dataset(ds, output.join(name))?;
            }
            eprintln!(
                "wrote {} train / {} val / {} test instances to {}",
                train.len(),
                val.len(),
                test.len(),
                output.display()
            );
        }
        Command::Train {
            features,
            output,
            config,
            history,
        } => {
            let ds = load(&features)?;
            let file_cfg = match config {
                Some(p) => TrainFileConfig::from_toml(&fs::read_to_string(&p)?)?,
                None => TrainFileConfig::default(),
            };
            let cfg: TrainConfig = file_cfg.train_config();
            let init = init_mlp(ds.dim(), &file_cfg.hidden, ds.classes(), cfg.seed)?;
            let (head, stats) = longtail::train_head(&ds, &cfg, Some(init))?;
            head.save(&output)?;
            if let Some(p) = history {
                let mut w = fs::File::create(p)?;
                writeln!(w, "epoch,lr,mean_loss,train_acc")?;
                for s in &stats {
                    writeln!(w, "{},{},{},{}", s.epoch, s.lr, s.mean_loss, s.train_acc)?;
                }
            }
            if let Some(last) = stats.last() {
                eprintln!(
                    "trained {} epochs: loss {:.4}, train accuracy {:.3}",
                    stats.len(),
                    last.mean_loss,
                    last.train_acc
                );
            }
        }
        Command::Eval {
            head,
            features,
            splits,
            cosine,
            relu,
            csv,
        } => {
            let head = load_head(&head)?;
            let ds = load(&features)?;
            let profile = splits.profile(&ds)?;
            let predictor: Box<dyn Predictor> = if cosine {
                Box::new(CosinePredictor {
                    head,
                    with_activation: relu,
                })
            } else {
                Box::new(head)
            };
            let report = evaluate(predictor.as_ref(), &ds, &profile)?;
            let degenerate = ds
                .features()
                .rows()
                .into_iter()
                .filter(|z| predictor.predict_checked(*z).degenerate)
                .count();
            if degenerate > 0 {
                eprintln!("warning: {degenerate} zero-norm queries defaulted to class 0");
            }
            finish_report(&report, csv.as_deref())?;
        }
        Command::SweepTau {
            head,
            features,
            grid,
            splits,
            output: out,
        } => {
            let head = load_head(&head)?;
            let ds = load(&features)?;
            let profile = splits.profile(&ds)?;
            let grid = parse_grid(&grid)?;
            grid.iter().copied().for_each(warn_tau);
            let rows = tau_sweep(&head, &ds, &profile, &grid)?;
            write_tau_sweep_csv(&rows, output(out.as_deref())?)?;
        }
        Command::Norms {
            head,
            features,
            output: out,
        } => {
            let head = load_head(&head)?;
            let ds = load(&features)?;
            let profile = class_profile(&ds, longtail::MANY_THRESHOLD, longtail::FEW_THRESHOLD)?;
            let p = weight_norm_profile(&head, &profile)?;
            p.write_csv(output(out.as_deref())?)?;
            eprintln!("spearman(norm, count) = {:.4}", p.spearman);
        }
        Command::Balance {
            method,
            head,
            train,
            test,
            val,
            output: out,
            report,
            tau,
            grid,
            epochs,
            lr,
            seed,
            metric,
            many,
            few,
        } => {
            let original = load_head(&head)?;
            let train = load(&train)?;
            let test = load(&test)?;
            if original.input_dim() != train.dim() {
                bail!(
                    "head expects {} features, training file has {}",
                    original.input_dim(),
                    train.dim()
                );
            }
            let profile = class_profile(&train, many, few)?;
            let top = original.top();
            let repr_train = train.with_features(original.represent(train.features().view()))?;
            let stage_two = TrainConfig {
                epochs,
                lr0: lr,
                ..TrainConfig::stage_two(seed)
            };
            let balanced = match method {
                BalanceMethod::Crt => crt(&repr_train, &stage_two)?,
                BalanceMethod::Ncm => ncm_fit(&repr_train, metric)?.to_head(),
                BalanceMethod::Lws => lws_fit(&top, &repr_train, &stage_two)?,
                BalanceMethod::Tau => {
                    let chosen = match tau {
                        Some(t) => t,
                        None => {
                            let grid = parse_grid(&grid)?;
                            let sel = match &val {
                                Some(v) => {
                                    let v = load(v)?;
                                    let v = v.with_features(original.represent(v.features().view()))?;
                                    select_tau(&top, &v, &grid, TauObjective::ValTop1)?
                                }
                                None => select_tau(&top, &repr_train, &grid, TauObjective::TrainClassAveraged)?,
                            };
                            eprintln!("selected tau = {} ({})", sel.chosen, sel.objective);
                            sel.chosen
                        }
                    };
                    warn_tau(chosen);
                    tau_normalize(&top, chosen)?
                }
                BalanceMethod::LearnTau => {
                    let cfg = LearnTauConfig {
                        seed,
                        ..LearnTauConfig::default()
                    };
                    let t = learn_tau(&top, &repr_train, &cfg)?;
                    eprintln!("learned tau = {t}");
                    warn_tau(t);
                    tau_normalize(&top, t)?
                }
            };
            let balanced = reattach(&original, balanced);
            balanced.save(&out)?;
            let r = evaluate(&balanced, &test, &profile)?.with_method(method.name());
            finish_report(&r, report.as_deref())?;
        }
    }
    Ok(())
}
