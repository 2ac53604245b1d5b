use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use peca::harness::{ablate, checkpoint, eval, gradcheck, standard_grid, train, DataConfig, Metric, TrainConfig};
use peca::lpm::records_csv;
use peca::synthdata::Benchmark;
use peca::{Error, Result};

#[derive(Parser)]
#[command(name = "peca", version, about = "Perturb-and-calibrate embedding training on synthetic domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the source domains and score source and target retrieval.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset dump or a data spec.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "cosine")]
        metric: String,
    },
    /// Run the ablation grid over several training seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        /// Comma-separated subset of baseline,+lpm,+gcm,full.
        #[arg(long)]
        settings: Option<String>,
    },
    /// Compare backward() with central differences on a tiny model.
    Gradcheck,
    /// Generate a dataset and write it with its JSON sidecar.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::from_json(&std::fs::read_to_string(path)?)
}

fn load_data(path: &Path) -> Result<Benchmark> {
    if path.is_dir() {
        Benchmark::load(path)
    } else {
        let spec: DataConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.generate()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = read_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = cfg.data.generate()?;
            let run = train::train_run(&cfg, &data, Metric::Cosine)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("metrics.csv"), run.report.metrics_csv())?;
            std::fs::write(out.join("lpm.csv"), records_csv(&run.lpm_records))?;
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&run.report)?)?;
            checkpoint::save(&out.join("checkpoint.bin"), &run.checkpoint)?;
            println!(
                "source mAP {:.4}  target mAP {:.4}  target Rank-1 {:.4}  ({:.1}s)",
                run.report.source_map(),
                run.report.target_map(),
                run.report.target_rank1(),
                run.report.wall_clock_secs
            );
        }
        Command::Eval {
            checkpoint: path,
            data,
            metric,
        } => {
            let metric: Metric = metric.parse()?;
            let ckpt = checkpoint::load(&path)?;
            let data = load_data(&data)?;
            let score = |domains: &[peca::synthdata::DomainData]| -> Result<Vec<serde_json::Value>> {
                domains
                    .iter()
                    .map(|d| {
                        let r = eval::evaluate(&ckpt, d, metric)?;
                        Ok(json!({"domain": d.spec.domain_id, "map": r.map, "rank1": r.rank1, "queries": r.valid_queries}))
                    })
                    .collect()
            };
            let out = json!({"source": score(&data.source_tests)?, "target": score(&data.targets)?});
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Ablate {
            config,
            seeds,
            out,
            settings,
        } => {
            let cfg = read_config(&config)?;
            let mut variants = standard_grid();
            if let Some(list) = settings {
                let wanted: Vec<&str> = list.split(',').map(str::trim).collect();
                for w in &wanted {
                    if !variants.iter().any(|v| v.setting.label() == *w) {
                        return Err(Error::Contract(format!("unknown setting '{w}'")));
                    }
                }
                variants.retain(|v| wanted.contains(&v.setting.label()));
            }
            let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
            let data = cfg.data.generate()?;
            let table = ablate(&cfg, &data, &variants, &seed_list)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("ablation.csv"), table.to_csv())?;
            let summary = table.summary_csv(&variants);
            std::fs::write(out.join("ablation_summary.csv"), &summary)?;
            print!("{summary}");
        }
        Command::Gradcheck => {
            let started = std::time::Instant::now();
            let mut failed = Vec::new();
            for lambda in [0.0, 1.0] {
                let r = gradcheck::gradcheck(lambda, None)?;
                println!("lambda={lambda} ({} parameters)", r.parameter_count);
                for b in &r.blocks {
                    println!("  {:<24} {:>4}  max rel err {:.3e}", b.name, b.len, b.max_relative_error);
                }
                failed.extend(r.failures().into_iter().map(|b| format!("{}@lambda={lambda}", b.name)));
            }
            println!("elapsed {:.2}s", started.elapsed().as_secs_f64());
            if !failed.is_empty() {
                return Err(Error::Oracle(format!("gradient mismatch in {}", failed.join(", "))));
            }
            println!("PASS (tolerance {:e})", gradcheck::TOLERANCE);
        }
        Command::GenData { spec, seed, out } => {
            let mut data_cfg: DataConfig = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => DataConfig::default(),
            };
            if let Some(s) = seed {
                data_cfg.seed = s;
            }
            let data = data_cfg.generate()?;
            data.save(&out)?;
            println!("wrote {} source and {} target domains to {}", data.sources.len(), data.targets.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
