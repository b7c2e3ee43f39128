use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use dtss::checkpoint::{write_atomic, Checkpoint};
use dtss::config::ExperimentConfig;
use dtss::data::Dataset;
use dtss::model::Model;
use dtss::{profile, train, Error};

/// Train, evaluate and profile spiking transformers with learned per-layer time steps.
#[derive(Parser, Debug)]
#[command(name = "dtss", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes metrics.csv, best.ckpt and config.toml to --out.
    Train(Common),
    /// Report accuracy and T_avg of a checkpoint on the eval split.
    Eval(Common),
    /// Operation counts and energy estimate on an eval sample.
    Profile(Common),
    /// Per-layer similarity of each step's input histogram to the first step's.
    Sensitivity(Common),
    /// Write per-layer, per-step input histograms as CSV.
    ExportHistograms(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides train.seed (model init and shuffling).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.lambda_m.
    #[arg(long = "lambda-m")]
    lambda_m: Option<f64>,
    /// Eval samples used by profile, sensitivity and export-histograms.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Histogram bins.
    #[arg(long, default_value_t = profile::DEFAULT_BINS)]
    bins: usize,
}

struct Setup {
    cfg: ExperimentConfig,
    model: Model,
    train: Dataset,
    eval: Dataset,
}

fn setup(c: &Common) -> dtss::Result<Setup> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(l) = c.lambda_m {
        cfg.train.lambda_m = l;
    }
    cfg.validate()?;
    let t_init = cfg.train.t_init(cfg.model.t_max);
    let mut model = Model::build(&cfg.model, t_init, cfg.train.seed)?;
    if let Some(p) = &c.checkpoint {
        Checkpoint::load(p)?.restore(&mut model, p)?;
    }
    let (train, eval) = cfg.data.load()?;
    Ok(Setup {
        cfg,
        model,
        train,
        eval,
    })
}

fn out_dir(c: &Common) -> dtss::Result<Option<&Path>> {
    if let Some(d) = &c.out {
        fs::create_dir_all(d).map_err(|e| Error::Io {
            path: d.clone(),
            source: e,
        })?;
    }
    Ok(c.out.as_deref())
}

fn run(cmd: Command) -> dtss::Result<()> {
    match cmd {
        Command::Train(c) => {
            let out = c.out.clone().expect("checked by usage_error");
            let mut s = setup(&c)?;
            fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            s.cfg.save(&out.join("config.toml"))?;
            let st = train::train_loop(&mut s.model, &s.train, &s.eval, &s.cfg.train, Some(&out))?;
            if st.history.is_empty() {
                write_atomic(&out.join("metrics.csv"), st.metrics_csv().as_bytes())?;
                Checkpoint::from_model(&s.model, Some(&st.optimizer))
                    .save(&out.join("best.ckpt"))?;
                println!(
                    "epochs=0 eval_acc={} t_avg={}",
                    st.initial.accuracy, st.initial.t_avg
                );
            } else {
                let last = st.history.last().unwrap();
                println!(
                    "epochs={} best_eval_acc={} best_epoch={} final_t_avg={} final_sa_percent={}",
                    st.epochs_run,
                    st.best_eval_acc,
                    st.best_epoch.unwrap_or(0),
                    last.t_avg,
                    last.sa_percent
                );
            }
        }
        Command::Eval(c) => {
            let s = setup(&c)?;
            let m = train::evaluate(&s.model, &s.eval, s.cfg.train.eval_batch_size)?;
            println!(
                "eval_acc={} t_avg={} sa_percent={}",
                m.accuracy, m.t_avg, m.sa_percent
            );
        }
        Command::Profile(c) => {
            let s = setup(&c)?;
            let sample = s.eval.take(c.samples);
            let r = profile::profile(&s.model, &sample.images, &s.cfg.profile)?;
            print!("{}", r.to_table());
            if let Some(d) = out_dir(&c)? {
                write_atomic(&d.join("profile.csv"), r.to_csv().as_bytes())?;
            }
        }
        Command::Sensitivity(c) => {
            let s = setup(&c)?;
            let sample = s.eval.take(c.samples);
            let h = profile::collect_histograms(&s.model, &sample.images, c.bins)?;
            let rows = profile::sensitivity_all(&h)?;
            println!(
                "{:<22} {:>5} {:>10}  similarities",
                "layer", "group", "score"
            );
            for r in &rows {
                let sims: Vec<String> = r.similarities.iter().map(|v| format!("{v:.4}")).collect();
                println!(
                    "{:<22} {:>5} {:>10.4}  {}",
                    r.layer,
                    r.group,
                    r.score,
                    sims.join(" ")
                );
            }
            if let Some(d) = out_dir(&c)? {
                write_atomic(
                    &d.join("sensitivity.csv"),
                    profile::sensitivity_csv(&rows).as_bytes(),
                )?;
            }
        }
        Command::ExportHistograms(c) => {
            let d = out_dir(&c)?.expect("checked by usage_error");
            let s = setup(&c)?;
            let sample = s.eval.take(c.samples);
            let h = profile::collect_histograms(&s.model, &sample.images, c.bins)?;
            let path = d.join("histograms.csv");
            write_atomic(&path, h.to_csv().as_bytes())?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Flags clap cannot require per subcommand: `(subcommand, message)`.
fn usage_error(cmd: &Command) -> Option<(&'static str, &'static str)> {
    match cmd {
        Command::Train(c) if c.out.is_none() => Some(("train", "train needs --out DIR")),
        Command::Eval(c) if c.checkpoint.is_none() => {
            Some(("eval", "eval needs --checkpoint PATH"))
        }
        Command::ExportHistograms(c) if c.out.is_none() => {
            Some(("export-histograms", "export-histograms needs --out DIR"))
        }
        _ => None,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some((name, msg)) = usage_error(&cli.command) {
        let mut cmd = Cli::command();
        let usage = cmd
            .find_subcommand_mut(name)
            .expect("known subcommand")
            .render_usage();
        eprintln!("error: {msg}\n\n{usage}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
