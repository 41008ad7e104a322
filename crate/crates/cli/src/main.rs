use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ami_core::data::{save_dataset, Splits};
use ami_core::energy::{
    battery_curve, battery_curve_csv, savings_report, DutyCycles, EnergyReport, PowerTable,
};
use ami_core::experiment::{
    ablated, load_data, load_trained, prepare_splits, train_run, write_json, RunConfig, CHECKPOINT_FILE,
};
use ami_core::fmpm::{Model, Switches};
use ami_core::report::{heatmap_csv, heatmap_svg, rows_csv, rows_markdown, summary, ResultRow};
use ami_core::trainer::{evaluate, robustness_random_masking, robustness_sampling_rate, EvalReport};
use ami_core::AmiError;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

/// Adaptive multimodal sensing: train, evaluate and analyse gated sensor models.
#[derive(Parser, Debug)]
#[command(name = "ami", version)]
struct Cli {
    /// TOML run configuration. Every field has a default.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.epochs=2` or `--set lambda2=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, loss log and validation report.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval(CheckpointArgs),
    /// Train one model per gating-loss weight and tabulate the results.
    SweepLambda2 {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.1, 0.2])]
        values: Vec<f64>,
    },
    /// Train the full model and one variant per removed component.
    Ablate {
        /// Components to remove; join with `+` to remove several at once.
        #[arg(long, value_delimiter = ',', default_values_t = Switches::NAMES.map(String::from).to_vec())]
        switches: Vec<String>,
    },
    /// Evaluate with each modality dropped at random.
    RobustnessMask {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.2, 0.5, 0.8])]
        probs: Vec<f64>,
    },
    /// Evaluate on decimated streams.
    RobustnessRate {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Integer decimation factors.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 5])]
        factors: Vec<usize>,
    },
    /// Export the per-patch sensing heatmap as CSV and SVG.
    Heatmap(CheckpointArgs),
    /// Battery-life curve and energy savings against a dense policy.
    Energy {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// JSON duty-cycle policy used instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        policy: Option<PathBuf>,
        /// Use the four-sensor wearable reference table.
        #[arg(long)]
        reference: bool,
    },
    /// Generate the configured dataset and store it for reuse.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    /// Defaults to `model.ckpt` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Split {
    Train,
    Val,
    Test,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<AmiError>(),
                    Some(AmiError::Config { .. } | AmiError::Parse { .. })
                )
            });
            ExitCode::from(if config { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let out = cfg.resolved_output_dir();
    match cli.command {
        Command::Train { resume } => train(&cfg, &out, resume),
        Command::Eval(a) => eval(&cfg, &out, &a),
        Command::SweepLambda2 { values } => sweep(&cfg, &out, &values),
        Command::Ablate { switches } => ablate(&cfg, &out, &switches),
        Command::RobustnessMask { ckpt, probs } => robustness_mask(&cfg, &out, &ckpt, &probs),
        Command::RobustnessRate { ckpt, factors } => robustness_rate(&cfg, &out, &ckpt, &factors),
        Command::Heatmap(a) => heatmap(&cfg, &out, &a),
        Command::Energy { ckpt, policy, reference } => energy(&cfg, &out, &ckpt, policy.as_deref(), reference),
        Command::GenData { out: target } => gen_data(&cfg, &out, target),
    }
}

fn train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<()> {
    let splits = prepare_splits(cfg)?;
    let outcome = train_run(cfg, &splits, Some(out), resume)?;
    println!("validation: {}", summary(&outcome.val));
    println!("artifacts in {}", out.display());
    Ok(())
}

/// A trained model with the splits it was trained on.
struct Loaded {
    model: Model,
    cfg: RunConfig,
    splits: Splits,
}

impl Loaded {
    fn split(&self, s: Split) -> &ami_core::data::Dataset {
        match s {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }
}

fn load(out: &Path, a: &CheckpointArgs) -> Result<Loaded> {
    let path = a.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let (state, cfg) = load_trained(&path).with_context(|| format!("loading {}", path.display()))?;
    let splits = prepare_splits(&cfg)?;
    if splits.train.modalities != state.model.spec.modalities {
        bail!(AmiError::config("dataset", "modalities differ from the ones the checkpoint was trained on"));
    }
    Ok(Loaded {
        model: state.model,
        cfg,
        splits,
    })
}

fn create(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn eval(cfg: &RunConfig, out: &Path, a: &CheckpointArgs) -> Result<()> {
    let l = load(out, a)?;
    let mut opts = l.cfg.eval_options();
    opts.batch_size = cfg.eval_batch_size;
    let r = evaluate(&l.model, l.split(a.split), &opts)?;
    create(out)?;
    write_json(&out.join(format!("eval_{:?}.json", a.split).to_lowercase()), &r)?;
    println!("{}", summary(&r));
    Ok(())
}

fn write_table(out: &Path, stem: &str, first: &str, rows: &[ResultRow]) -> Result<()> {
    fs::write(out.join(format!("{stem}.csv")), rows_csv(first, rows))?;
    let md = rows_markdown(first, rows);
    fs::write(out.join(format!("{stem}.md")), &md)?;
    print!("{md}");
    Ok(())
}

/// Train under `sub`, then evaluate on the test split.
fn train_and_test(cfg: &RunConfig, splits: &Splits, dir: &Path) -> Result<EvalReport> {
    let outcome = train_run(cfg, splits, Some(dir), false)?;
    let r = evaluate(&outcome.state.model, &splits.test, &cfg.eval_options())?;
    write_json(&dir.join("test_report.json"), &r)?;
    Ok(r)
}

fn sweep(cfg: &RunConfig, out: &Path, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        bail!(AmiError::config("values", "need at least one value"));
    }
    let splits = prepare_splits(cfg)?;
    create(out)?;
    let mut rows = Vec::new();
    for &v in values {
        let mut c = cfg.clone();
        c.train.loss.gating = v;
        c.validate()?;
        log::info!("lambda2 = {v}");
        let r = train_and_test(&c, &splits, &out.join(format!("lambda2_{v}")))?;
        rows.push(ResultRow::from_report(v.to_string(), &r));
    }
    write_table(out, "sweep_lambda2", "lambda2", &rows)
}

fn ablate(cfg: &RunConfig, out: &Path, switches: &[String]) -> Result<()> {
    let variants: Vec<(String, RunConfig)> = std::iter::once(Ok(("full".to_string(), cfg.clone())))
        .chain(switches.iter().map(|s| Ok((format!("w/o {s}"), ablated(cfg, s)?))))
        .collect::<Result<_>>()?;
    let splits = prepare_splits(cfg)?;
    create(out)?;
    let mut rows = Vec::new();
    for (label, c) in &variants {
        log::info!("variant {label}");
        let dir = out.join(format!("ablate_{}", label.trim_start_matches("w/o ").replace('+', "_")));
        let r = train_and_test(c, &splits, &dir)?;
        rows.push(ResultRow::from_report(label.clone(), &r));
    }
    write_table(out, "ablation", "variant", &rows)
}

fn robustness_mask(cfg: &RunConfig, out: &Path, a: &CheckpointArgs, probs: &[f64]) -> Result<()> {
    let l = load(out, a)?;
    let mut rows = Vec::new();
    for &p in probs {
        let r = robustness_random_masking(&l.model, l.split(a.split), l.cfg.train.ablation, p, cfg.seed)?;
        rows.push(ResultRow::from_report(p.to_string(), &r));
    }
    create(out)?;
    write_table(out, "robustness_mask", "p_drop", &rows)
}

fn robustness_rate(cfg: &RunConfig, out: &Path, a: &CheckpointArgs, factors: &[usize]) -> Result<()> {
    let l = load(out, a)?;
    let mut opts = l.cfg.eval_options();
    opts.batch_size = cfg.eval_batch_size;
    let mut rows = Vec::new();
    for &f in factors {
        let r = robustness_sampling_rate(&l.model, l.split(a.split), &opts, f)?;
        rows.push(ResultRow::from_report(format!("1/{f}"), &r));
    }
    create(out)?;
    write_table(out, "robustness_rate", "rate", &rows)
}

fn heatmap(cfg: &RunConfig, out: &Path, a: &CheckpointArgs) -> Result<()> {
    let l = load(out, a)?;
    let mut opts = l.cfg.eval_options();
    opts.batch_size = cfg.eval_batch_size;
    let r = evaluate(&l.model, l.split(a.split), &opts)?;
    let names: Vec<String> = l.model.spec.modalities.iter().map(|m| m.name.clone()).collect();
    create(out)?;
    fs::write(out.join("heatmap.csv"), heatmap_csv(&names, &r.heatmap))?;
    fs::write(out.join("heatmap.svg"), heatmap_svg(&names, &r.heatmap))?;
    print!("{}", heatmap_csv(&names, &r.heatmap));
    Ok(())
}

fn energy(cfg: &RunConfig, out: &Path, a: &CheckpointArgs, policy: Option<&Path>, reference: bool) -> Result<()> {
    let explicit = a.checkpoint.is_some() || policy.is_some();
    let default_ckpt = out.join(CHECKPOINT_FILE);
    let (duty, modalities, window_seconds, layers) = if policy.is_none() && (explicit || default_ckpt.exists()) {
        let l = load(out, a)?;
        let mut opts = l.cfg.eval_options();
        opts.batch_size = cfg.eval_batch_size;
        let r = evaluate(&l.model, l.split(a.split), &opts)?;
        let d = l.split(a.split);
        (Some(DutyCycles::from_report(&r)), d.modalities.clone(), d.window_seconds, l.cfg.model.layers)
    } else {
        let duty = match policy {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Some(serde_json::from_str::<DutyCycles>(&text).with_context(|| format!("parsing {}", p.display()))?)
            }
            None => None,
        };
        let d = load_data(&cfg.dataset, cfg.seed)?;
        (duty, d.modalities, d.window_seconds, cfg.model.layers)
    };
    let table = if reference {
        PowerTable::wearable_reference(&cfg.energy, layers)?
    } else {
        PowerTable::from_modalities(&modalities, &cfg.energy, layers)?
    };
    let patches = match &duty {
        Some(d) => d.patches_per_window,
        None => modalities.first().map_or(0, |m| m.window_samples(window_seconds) / m.patch_size),
    };
    create(out)?;
    let curve = battery_curve(&table);
    fs::write(out.join("battery_curve.csv"), battery_curve_csv(&curve))?;
    println!("battery life, always-on subsets ({} mWh, {:?} power):", table.capacity_mwh, table.point);
    for p in &curve {
        println!("  {:<24} {:>8.2} mW {:>10.1} h", p.subset.join("+"), p.power_mw, p.hours);
    }
    let dense = EnergyReport::new(&DutyCycles::dense(table.sensors.len(), patches), &table, window_seconds, cfg.energy.mode)?;
    match duty {
        Some(d) => {
            let ami = EnergyReport::new(&d, &table, window_seconds, cfg.energy.mode)?;
            let s = savings_report(&ami, &dense)?;
            write_json(&out.join("energy.json"), &s)?;
            println!(
                "policy: sensing {:.2}%  {:.2} mW  life {:.1} h  | dense: {:.2} mW  life {:.1} h  | energy saved {:.2}%",
                ami.sensing_pct, ami.avg_power_mw, ami.battery_life_h, dense.avg_power_mw, dense.battery_life_h, s.energy_pct
            );
        }
        None => {
            write_json(&out.join("energy.json"), &dense)?;
            println!(
                "dense: sensing {:.2}%  {:.2} mW  life {:.1} h",
                dense.sensing_pct, dense.avg_power_mw, dense.battery_life_h
            );
        }
    }
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path, target: Option<PathBuf>) -> Result<()> {
    let data = load_data(&cfg.dataset, cfg.seed)?;
    let path = target.unwrap_or_else(|| out.join("dataset.bin"));
    save_dataset(&path, &data)?;
    println!(
        "{} sequences, {} windows, {} modalities -> {}",
        data.sequences.len(),
        data.num_windows(),
        data.num_modalities(),
        path.display()
    );
    Ok(())
}
