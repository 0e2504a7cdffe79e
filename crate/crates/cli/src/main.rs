use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use flashsim_core::harness::{self, ExperimentConfig, ExperimentKind};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    ExperimentKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown experiment {s:?}; expected one of {}", names.join(", "))
    })
}

/// Run a flash reliability experiment and write its CSV tables.
#[derive(Parser, Debug)]
#[command(name = "flashsim", version, about)]
struct Args {
    /// characterize, ecc-curve, flow-bench, lifetime or ftl
    #[arg(value_parser = parse_kind)]
    experiment: ExperimentKind,

    /// TOML experiment configuration
    #[arg(long)]
    config: PathBuf,

    /// Overrides the seed in the configuration
    #[arg(long)]
    seed: Option<u64>,

    /// Overrides the output directory in the configuration
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads for sweep points (default: all cores)
    #[arg(long)]
    threads: Option<usize>,

    /// Validate the configuration and exit
    #[arg(long)]
    check: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(k) = cfg.experiment {
        if k != args.experiment {
            eprintln!("error: configuration is for {k}, not {}", args.experiment);
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    cfg.experiment = Some(args.experiment);
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = args.out {
        cfg.output.dir = o;
    }

    let diags = harness::validate(&cfg);
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("config error: {d}");
        }
        return ExitCode::from(EXIT_CONFIG);
    }
    if args.check {
        println!("configuration ok");
        return ExitCode::SUCCESS;
    }

    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }

    match harness::run(&cfg) {
        Ok((_, files)) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
