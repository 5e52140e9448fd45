use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use splitcut::config::{AttackConfig, ExperimentConfig, TransportKind};
use splitcut::runner::{
    compare, read_trace, run, run_client_process, run_server_process, summarize_trace, write_outputs, RunReport,
};
use splitcut::Error;

#[derive(Parser)]
#[command(name = "splitcut", version, about = "Split learning with a random-projection cut layer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Direct,
    Inproc,
    Tcp,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment file (TOML); omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report.json, metrics.csv, trace.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    transport: Option<Transport>,
    /// Act as the server of a two-process run.
    #[arg(long, conflicts_with = "connect")]
    listen: Option<String>,
    /// Act as the clients of a two-process run.
    #[arg(long)]
    connect: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and write a run report.
    Run(RunArgs),
    /// Train, then run the configured inversion attacks (decoder attack by default).
    Attack(RunArgs),
    /// Compare method reports against baseline reports of the same seeds.
    Compare {
        #[arg(long = "baseline", required = true)]
        baselines: Vec<PathBuf>,
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise a trace.jsonl file.
    InspectTrace { path: PathBuf },
}

fn load_config(args: &RunArgs, force_attack: bool) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.transport {
        cfg.transport = match t {
            Transport::Direct => TransportKind::Direct,
            Transport::Inproc => TransportKind::Inproc,
            Transport::Tcp => TransportKind::Tcp,
        };
    }
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.display().to_string());
    }
    if force_attack && cfg.attack.is_none() {
        cfg.attack = Some(AttackConfig::default());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_cmd(args: RunArgs, force_attack: bool) -> Result<(), Error> {
    let cfg = load_config(&args, force_attack)?;
    if let Some(addr) = &args.listen {
        let det = run_server_process(&cfg, addr)?;
        if let Some(d) = det {
            match &cfg.out_dir {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(PathBuf::from(dir).join("detection.json"), d.to_json()?)?;
                }
                None => println!("{}", d.to_json()?),
            }
        }
        return Ok(());
    }
    let out = match &args.connect {
        Some(addr) => run_client_process(&cfg, addr)?,
        None => run(&cfg)?,
    };
    let r = &out.report;
    println!(
        "{} seed={} steps={} test_acc={:.4} cut_bytes={} ({:.4} GiB) digest={}",
        r.method, r.seed, r.steps, r.final_test_accuracy, r.comm.bytes, r.comm.gib, r.trace_digest
    );
    if let Some(a) = &r.decoder_attack {
        println!(
            "decoder attack: mse={:.5} psnr={:.2} ssim={:.4} fg_mse={}",
            a.mean.mse,
            a.mean.psnr,
            a.mean.ssim,
            a.mean.mse_fg.map_or("-".into(), |v| format!("{v:.5}"))
        );
    }
    if let Some(d) = &r.detection {
        println!("detector: flagged={:?} truth={:?} f1={:.3}", d.flagged, d.truth, d.f1);
    }
    if let Some(dir) = &cfg.out_dir {
        for p in write_outputs(&out, dir)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(a) => run_cmd(a, false),
        Cmd::Attack(a) => run_cmd(a, true),
        Cmd::Compare { baselines, reports, out } => (|| {
            let load = |ps: &[PathBuf]| ps.iter().map(RunReport::load).collect::<Result<Vec<_>, _>>();
            let cmp = compare(&load(&baselines)?, &load(&reports)?)?;
            print!("{}", cmp.to_table());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("comparison.csv"), cmp.to_csv())?;
                std::fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&cmp)?)?;
            }
            Ok(())
        })(),
        Cmd::InspectTrace { path } => (|| {
            let traces = read_trace(&std::fs::read_to_string(&path)?)?;
            println!("{}", serde_json::to_string_pretty(&summarize_trace(&traces))?);
            Ok(())
        })(),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
