//! Command-line front end: dataset generation, training, benchmarks and
//! embedding export, all driven by a `key = value` config file.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use protomem::checkpoint::{load_checkpoint, save_checkpoint};
use protomem::config::RunConfig;
use protomem::datagen::{inject_symmetric, save_csv, Split};
use protomem::eval::{bench_grid, bench_table_csv, evaluate, runs_csv, slot_sweep, slot_table_csv, MeanSd};
use protomem::kernel::Rng;
use protomem::model::forward;
use protomem::trainer::{NoObserver, Trainer};
use protomem::verify;

#[derive(Parser)]
#[command(name = "protomem", version, about = "Prototype-memory training for noisy labels")]
struct Cli {
    /// Run the gradient and Sinkhorn self-checks; exit nonzero on failure.
    #[arg(long, global = true)]
    verify: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,

    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset CSV and its metadata sidecar.
    Gen(Common),
    /// Train one model; writes checkpoint, log and test metrics.
    Train(Common),
    /// Method x noise-rate table plus the memory-slot sweep.
    Bench(Common),
    /// Export latent embeddings and the memory of a trained checkpoint.
    ExportEmbeddings(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let echo = cfg.out_dir.join("config.txt");
    fs::write(&echo, cfg.to_text()).with_context(|| format!("writing {}", echo.display()))?;
    info!("effective configuration written to {}", echo.display());
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let ds = cfg.dataset()?;
    let path = cfg.out_dir.join("dataset.csv");
    save_csv(&ds, &path)?;
    info!("wrote {} ({} rows)", path.display(), ds.len());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let ds = cfg.dataset()?;
    let mut trainer = Trainer::new(&cfg.train, &ds)?;
    if let Err(e) = trainer.run(&mut NoObserver) {
        let dump = cfg.out_dir.join("abort.ckpt");
        save_checkpoint(trainer.state(), &dump)?;
        write(&cfg.out_dir.join("abort_log.csv"), &trainer.state().log.to_csv())?;
        return Err(e).with_context(|| format!("training aborted; state dumped to {}", dump.display()));
    }
    let state = trainer.into_state();
    let ckpt = cfg.checkpoint_path();
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&state, &ckpt)?;
    info!("wrote {}", ckpt.display());
    write(&cfg.out_dir.join("train_log.csv"), &state.log.to_csv())?;
    let split = if ds.rows_in(Split::Test).is_empty() { Split::Train } else { Split::Test };
    let metrics = evaluate(&state.params, &ds, split)?;
    let report = format!("split = {split}\n{}", metrics.report());
    write(&cfg.out_dir.join("metrics.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let b = &cfg.bench;
    let clean = cfg.clean_dataset()?;
    let noise_seed = cfg.noise_seed();
    let cells = bench_grid(&cfg.train, &clean, &b.methods, &b.epsilons, b.n_seeds, noise_seed)?;
    let table = bench_table_csv(&cells);
    write(&cfg.out_dir.join("bench.csv"), &table)?;
    print!("{table}");

    let mut purity = String::from("method,epsilon,purity_mean,purity_sd,noisy_agreement\n");
    for cell in &cells {
        match (&cell.runs, cell.purity()) {
            (Ok(runs), Some(MeanSd { mean, sd })) => {
                let agree = runs.first().map_or(0.0, |r| r.noisy_agreement);
                purity.push_str(&format!("{},{:.6},{mean:.6},{sd:.6},{agree:.6}\n", cell.method, cell.epsilon));
            }
            _ => purity.push_str(&format!("{},{:.6},failed,failed,failed\n", cell.method, cell.epsilon)),
        }
    }
    write(&cfg.out_dir.join("purity.csv"), &purity)?;

    let sweep = if b.slot_list.is_empty() {
        Vec::new()
    } else {
        let noisy = inject_symmetric(
            &clean,
            b.sweep_epsilon,
            false,
            &mut Rng::derived(noise_seed, &[b.sweep_epsilon.to_bits()]),
        )?;
        let rows = slot_sweep(&cfg.train, &noisy, &b.slot_list, b.n_seeds)?;
        let slots = slot_table_csv(&rows);
        write(&cfg.out_dir.join("slots.csv"), &slots)?;
        print!("{slots}");
        rows
    };
    write(
        &cfg.out_dir.join("runs.csv"),
        &runs_csv(&cells, &sweep, cfg.train.method, b.sweep_epsilon, cfg.train.slots),
    )?;
    if cells.iter().any(|c| c.runs.is_err()) {
        bail!("some benchmark cells failed; see bench.csv");
    }
    Ok(())
}

fn cmd_export(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.checkpoint_path();
    let state = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let ds = cfg.dataset()?;
    let dims = state.params.dims();
    if dims.input != ds.input_dim() || dims.classes != ds.classes {
        return Err(protomem::Error::Shape {
            op: "export-embeddings",
            expected: format!("input {} / classes {}", dims.input, dims.classes),
            got: format!("input {} / classes {}", ds.input_dim(), ds.classes),
        }
        .into());
    }
    let trace = forward(&state.params, &ds.x)?;
    let pred = trace.probs.argmax_rows();
    let mut out = String::from("idx");
    for k in 0..dims.latent {
        out.push_str(&format!(",dim_{k}"));
    }
    out.push_str(",y_clean,y_noisy,pred\n");
    for (i, row) in trace.latent.iter_rows().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push_str(&format!(",{},{},{}\n", ds.y_clean[i], ds.y_noisy[i], pred[i]));
    }
    write(&cfg.out_dir.join("embeddings.csv"), &out)?;
    let mem_path = cfg.out_dir.join("memory.csv");
    let mut f = fs::File::create(&mem_path).with_context(|| format!("writing {}", mem_path.display()))?;
    state.memory.write_snapshot(&mut f)?;
    f.flush()?;
    info!("wrote {}", mem_path.display());
    Ok(())
}

fn run_verify() -> Result<bool> {
    let report = verify::run_suite(0)?;
    for line in report.lines() {
        println!("{line}");
    }
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    let mut ok = true;
    if cli.verify {
        ok = run_verify()?;
    }
    match &cli.command {
        Some(Command::Gen(c)) => cmd_gen(&load_config(c)?)?,
        Some(Command::Train(c)) => cmd_train(&load_config(c)?)?,
        Some(Command::Bench(c)) => cmd_bench(&load_config(c)?)?,
        Some(Command::ExportEmbeddings(c)) => cmd_export(&load_config(c)?)?,
        None if cli.verify => {}
        None => bail!("no subcommand given (see --help)"),
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: verification failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
