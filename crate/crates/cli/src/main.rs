use std::path::PathBuf;
use std::process::ExitCode;

use bda_core::pipeline;
use bda_core::{Error, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ssl-bda", version, about = "Self-supervised building damage assessment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stage-1 student/teacher pre-training with reconstruction.
    Pretrain(Opts),
    /// Stage-2 siamese segmentation fine-tuning on labeled pairs.
    Finetune(Opts),
    /// F1 report of a stage-2 checkpoint on the evaluation split.
    Evaluate(Opts),
    /// Attention heatmap panel for one image pair.
    Visualize(Opts),
    /// Export synthetic pairs in the xBD directory layout.
    GenData(Opts),
}

#[derive(clap::Args, Debug)]
struct Opts {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use N generated pairs instead of a dataset directory.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Epochs of the command being run.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_name = "FLOAT")]
    labeled_fraction: Option<f64>,
    /// Fine-tune from a random encoder instead of a stage-1 checkpoint.
    #[arg(long)]
    random_init: bool,
    #[arg(long)]
    disable_reconstruction: bool,
    #[arg(long)]
    disable_centering: bool,
    #[arg(long)]
    freeze_encoder: bool,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
    /// Input checkpoint (stage-1 init for finetune, model for evaluate/visualize).
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Continue pre-training from a checkpoint.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Stop pre-training when the step counter reaches this value.
    #[arg(long)]
    max_steps: Option<u64>,
    /// xBD-layout dataset directory.
    #[arg(long, value_name = "DIR")]
    data_root: Option<PathBuf>,
    /// Evaluate the ground truth against itself.
    #[arg(long)]
    oracle: bool,
}

impl Opts {
    fn resolve(&self, is_finetune: bool) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let run = &mut cfg.run;
        if let Some(v) = self.seed {
            run.seed = v;
        }
        if let Some(v) = self.epochs {
            if is_finetune {
                run.finetune_epochs = v;
            } else {
                run.pretrain_epochs = v;
            }
        }
        if let Some(v) = self.labeled_fraction {
            run.labeled_fraction = v;
        }
        if let Some(v) = &self.out {
            run.out = v.clone();
        }
        if let Some(v) = &self.checkpoint {
            run.checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.resume {
            run.resume = Some(v.clone());
        }
        if let Some(v) = self.max_steps {
            run.max_steps = Some(v);
        }
        run.oracle |= self.oracle;
        if let Some(v) = self.synthetic {
            cfg.data.synthetic = Some(v);
        }
        if let Some(v) = &self.data_root {
            cfg.data.root = Some(v.clone());
            cfg.data.synthetic = None;
        }
        let ab = &mut cfg.ablation;
        ab.random_init |= self.random_init;
        ab.disable_reconstruction |= self.disable_reconstruction;
        ab.disable_centering |= self.disable_centering;
        ab.freeze_encoder |= self.freeze_encoder;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let (opts, is_finetune) = match &cli.command {
        Command::Finetune(o) => (o, true),
        Command::Pretrain(o) | Command::Evaluate(o) | Command::Visualize(o) | Command::GenData(o) => (o, false),
    };
    let cfg = opts.resolve(is_finetune)?;
    if opts.print_config {
        print!("{}", cfg.to_toml_string());
        return Ok(());
    }
    match cli.command {
        Command::Pretrain(_) => {
            let r = pipeline::run_pretrain(&cfg)?;
            if let Some(last) = r.logs.last() {
                println!("step {} total {:.6} l1 {:.6} l2 {:.6}", last.step + 1, last.total, last.l1, last.l2);
            }
            println!("checkpoint {}", r.checkpoint.display());
        }
        Command::Finetune(_) => {
            let r = pipeline::run_finetune(&cfg)?;
            if let Some(last) = r.epochs.last() {
                println!("epoch {} loss {:.6}", last.epoch, last.train_loss);
                if let Some(v) = &last.validation {
                    println!("{}", format_report(v));
                }
            }
            println!("checkpoint {}", r.checkpoint.display());
        }
        Command::Evaluate(_) => {
            let report = pipeline::run_evaluate(&cfg)?;
            println!("{}", format_report(&report));
        }
        Command::Visualize(_) => {
            let r = pipeline::run_visualize(&cfg)?;
            println!("panel {} ({} tiles)", r.panel.display(), r.tiles);
            println!("heatmap {}", r.heatmap.display());
        }
        Command::GenData(_) => {
            let n = pipeline::run_gen_data(&cfg)?;
            println!("wrote {n} pairs to {}", cfg.run.out.display());
        }
    }
    Ok(())
}

fn format_report(report: &bda_core::F1Report) -> String {
    report
        .entries()
        .iter()
        .map(|(k, v)| if v.is_nan() { format!("{k}=NaN") } else { format!("{k}={v:.4}") })
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
