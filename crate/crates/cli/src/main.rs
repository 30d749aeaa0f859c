//! `peerfed`: scenario runner for the peer-to-peer training simulator.
//!
//! Subcommands map onto the library's experiment entry points; every run is
//! reproducible from config + seed, and all tables land as fixed-header CSV.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use peerfed_core::crypto::{
    generate_keypair, generate_noise, sign_envelope, verify_envelope, AeadSuite, CipherSuite,
};
use peerfed_core::model::EncodedUpdate;
use peerfed_core::scenario::{
    challenges_to_bytes, run_connectivity_sweep, run_dropout_series, run_scenario, verify_oracle,
    ScenarioConfig, ScenarioOutcome,
};
use peerfed_core::FixedParams;
use serde::Serialize;

/// Environment variable under which relative output paths are resolved.
const OUTPUT_ROOT_VAR: &str = "PEERFED_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "peerfed", about = "Simulator for privacy-preserving P2P model training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonRunArgs {
    /// Scenario config file (TOML).
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write transcript, per-round metrics and a summary.
    Run(CommonRunArgs),
    /// Analytic vs empirical shared-key probability and graph connectivity.
    SweepConnectivity {
        /// Key pool sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "500,1000,2000")]
        pool: Vec<u32>,
        /// Key ring sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
        ring: Vec<usize>,
        /// Graph size for the connectivity column.
        #[arg(long, default_value_t = 200)]
        nodes: u32,
        #[arg(long, default_value_t = 500)]
        trials: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Re-run a scenario across dropout counts, averaged over repetitions.
    DropoutSeries {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,5,10,15")]
        counts: Vec<u32>,
        #[arg(long, default_value_t = 20)]
        repetitions: u32,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Micro-benchmark the primitive operations (relative timings only).
    Bench {
        /// Parameter vector dimension of the benchmarked payload.
        #[arg(long, default_value_t = 10_000)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        repetitions: u32,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the protocol and the plain averaging oracle side by side; exits
    /// nonzero on any bit mismatch.
    VerifyOracle {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::SweepConnectivity { pool, ring, nodes, trials, seed, output } => {
            cmd_sweep(&pool, &ring, nodes, trials, seed, output)
        }
        Command::DropoutSeries { config, counts, repetitions, seed, output } => {
            cmd_dropout_series(&config, &counts, repetitions, seed, output)
        }
        Command::Bench { dim, repetitions, output } => cmd_bench(dim, repetitions, output),
        Command::VerifyOracle { config, seed } => cmd_verify_oracle(&config, seed),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading scenario config {}", path.display()))?;
    let mut cfg: ScenarioConfig =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Relative output paths resolve under $PEERFED_OUTPUT_ROOT when it is set.
fn resolve_output(explicit: Option<PathBuf>, from_config: Option<&str>) -> Option<PathBuf> {
    let dir = explicit.or_else(|| from_config.map(PathBuf::from))?;
    if dir.is_absolute() {
        return Some(dir);
    }
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) => Some(PathBuf::from(root).join(dir)),
        None => Some(dir),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

fn cmd_run(args: CommonRunArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let outcome = run_scenario(&cfg)?;
    print_summary(&outcome);

    if let Some(dir) = resolve_output(args.output, cfg.output_dir.as_deref()) {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("transcript.txt"), &outcome.transcript_text)?;
        write_csv(&dir.join("rounds.csv"), &outcome.rounds)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&outcome)?)?;
        // keying discovery traffic, replayable for audits
        if !outcome.challenges.is_empty() {
            fs::write(dir.join("challenges.bin"), challenges_to_bytes(&outcome.challenges))?;
        }
        println!("outputs written to {}", dir.display());
    }
    Ok(())
}

fn print_summary(outcome: &ScenarioOutcome) {
    println!(
        "seed={} targets={} rounds={} (aborted {}) avg_transmissions={:.2} loss {:.5} -> {:.5} oracle_equal={} transcript={}",
        outcome.effective_seed,
        outcome.n_target,
        outcome.completed_rounds,
        outcome.aborted_rounds,
        outcome.avg_transmissions,
        outcome.initial_loss,
        outcome.final_loss,
        outcome.oracle_equal,
        &outcome.transcript_hash[..16],
    );
}

fn cmd_sweep(
    pool: &[u32],
    ring: &[usize],
    nodes: u32,
    trials: u32,
    seed: u64,
    output: Option<PathBuf>,
) -> Result<()> {
    let rows = run_connectivity_sweep(pool, ring, nodes, trials, seed)?;
    println!("pool_size,ring_size,analytic_p,empirical_p,connected_fraction");
    for r in &rows {
        println!(
            "{},{},{:.6},{:.6},{:.4}",
            r.pool_size, r.ring_size, r.analytic_p, r.empirical_p, r.connected_fraction
        );
    }
    if let Some(dir) = resolve_output(output, None) {
        fs::create_dir_all(&dir)?;
        write_csv(&dir.join("connectivity.csv"), &rows)?;
    }
    Ok(())
}

fn cmd_dropout_series(
    config: &Path,
    counts: &[u32],
    repetitions: u32,
    seed: Option<u64>,
    output: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    for &c in counts {
        if c >= cfg.protocol.n_target {
            bail!("dropout count {c} must stay below n_target {}", cfg.protocol.n_target);
        }
    }
    let rows = run_dropout_series(&cfg, counts, repetitions)?;
    println!("dropouts,repetitions,completed_rounds,total_rounds,avg_transmissions,avg_model_distance");
    for r in &rows {
        println!(
            "{},{},{},{},{:.2},{:.3}",
            r.dropouts,
            r.repetitions,
            r.completed_rounds,
            r.total_rounds,
            r.avg_transmissions,
            r.avg_model_distance
        );
    }
    if let Some(dir) = resolve_output(output, cfg.output_dir.as_deref()) {
        fs::create_dir_all(&dir)?;
        write_csv(&dir.join("dropout_series.csv"), &rows)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchRow {
    operation: String,
    mean_ns: f64,
    /// Mean divided by the cheapest operation's mean. Machine-relative
    /// only; not comparable to any published absolute timings.
    relative: f64,
    /// Coefficient of variation across repetitions.
    cov: f64,
}

fn time_op(mut op: impl FnMut(), inner: u32, repetitions: u32) -> (f64, f64) {
    let mut samples = Vec::with_capacity(repetitions as usize);
    for _ in 0..repetitions {
        let start = Instant::now();
        for _ in 0..inner {
            op();
        }
        samples.push(start.elapsed().as_nanos() as f64 / inner as f64);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var =
        samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / samples.len() as f64;
    let cov = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    (mean, cov)
}

fn cmd_bench(dim: usize, repetitions: u32, output: Option<PathBuf>) -> Result<()> {
    let params = FixedParams::default();
    let update = EncodedUpdate::zeros(dim, params);
    let noise = generate_noise(dim + 1, 0, 7, params)?;
    let suite = AeadSuite;
    let key = [9u8; 16];
    let plaintext = update.to_bytes();
    let ciphertext = suite.encrypt(&key, 1, &plaintext);
    let keypair = generate_keypair(3);
    let envelope = sign_envelope(0, ciphertext.clone(), 5, &keypair.signing);
    let inner = 8;

    let mut rows = Vec::new();
    let mut push = |name: &str, (mean, cov): (f64, f64)| {
        rows.push(BenchRow { operation: name.into(), mean_ns: mean, relative: 0.0, cov });
    };
    let mut seed = 0u64;
    push(
        "noise_generation",
        time_op(
            || {
                seed += 1;
                let _ = generate_noise(dim + 1, 0, seed, params).unwrap();
            },
            inner,
            repetitions,
        ),
    );
    push("noise_addition", time_op(|| { let _ = update.add_noise(&noise).unwrap(); }, inner, repetitions));
    push("noise_subtraction", time_op(|| { let _ = update.sub_noise(&noise).unwrap(); }, inner, repetitions));
    push("encryption", time_op(|| { let _ = suite.encrypt(&key, 2, &plaintext); }, inner, repetitions));
    push("decryption", time_op(|| { let _ = suite.decrypt(&key, &ciphertext).unwrap(); }, inner, repetitions));
    push(
        "signature",
        time_op(|| { let _ = sign_envelope(0, ciphertext.clone(), 5, &keypair.signing); }, inner, repetitions),
    );
    push(
        "verification",
        time_op(
            || verify_envelope(&envelope, &keypair.verifying, 5, 10).unwrap(),
            inner,
            repetitions,
        ),
    );

    let cheapest = rows.iter().map(|r| r.mean_ns).fold(f64::INFINITY, f64::min).max(1.0);
    for r in &mut rows {
        r.relative = r.mean_ns / cheapest;
    }
    println!("operation,mean_ns,relative,cov");
    for r in &rows {
        println!("{},{:.0},{:.2},{:.3}", r.operation, r.mean_ns, r.relative, r.cov);
    }
    println!("# relative to the cheapest operation on this machine");
    if let Some(dir) = resolve_output(output, None) {
        fs::create_dir_all(&dir)?;
        write_csv(&dir.join("bench.csv"), &rows)?;
    }
    Ok(())
}

fn cmd_verify_oracle(config: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let outcome = verify_oracle(&cfg)?;
    let rounds: BTreeSet<u32> = outcome.rounds.iter().map(|r| r.round).collect();
    println!(
        "oracle match: {} rounds bit-identical to direct weighted averaging (rounds {:?})",
        outcome.completed_rounds, rounds
    );
    print_summary(&outcome);
    Ok(())
}
