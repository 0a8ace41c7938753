//! `thc` - lookup-table generation, NMSE experiments, and lossy-network
//! training simulations from the command line.

use clap::{Args, Parser, Subcommand};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use thc::harness::{nmse_experiment, resiliency_experiment, NmseParams, ResiliencyParams, RunMode};
use thc::tables::{list_tables, load_table, save_table, solve_optimal_table, TableKey};

#[derive(Parser)]
#[command(
    name = "thc",
    version,
    about = "Homomorphic gradient compression toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lookup-table operations.
    Table {
        #[command(subcommand)]
        action: TableAction,
    },
    /// Compression NMSE on replicated log-normal gradients.
    Nmse(NmseArgs),
    /// Least-squares training over the simulated lossy network.
    Simulate(SimulateArgs),
    /// Run the built-in property suites.
    Selftest,
}

#[derive(Subcommand)]
enum TableAction {
    /// Solve the optimal table for (bits, granularity, p).
    Gen(TableGenArgs),
    /// Print cached tables.
    Show(TableShowArgs),
}

#[derive(Args)]
struct KeyArgs {
    /// Bit budget per coordinate.
    #[arg(long)]
    bits: u8,
    /// Granularity g (table codomain is 0..=g).
    #[arg(long)]
    granularity: u32,
    /// Support fraction as a rational, e.g. 1/32.
    #[arg(long, value_parser = parse_fraction)]
    p: (u64, u64),
}

impl KeyArgs {
    fn key(&self) -> Result<TableKey, String> {
        TableKey::new(self.bits, self.granularity, self.p.0, self.p.1).map_err(|e| e.to_string())
    }
}

fn parse_fraction(s: &str) -> Result<(u64, u64), String> {
    let (num, den) = s
        .split_once('/')
        .ok_or_else(|| format!("expected NUM/DEN, got {s:?}"))?;
    let num: u64 = num
        .trim()
        .parse()
        .map_err(|e| format!("bad numerator: {e}"))?;
    let den: u64 = den
        .trim()
        .parse()
        .map_err(|e| format!("bad denominator: {e}"))?;
    Ok((num, den))
}

#[derive(Args)]
struct TableGenArgs {
    #[command(flatten)]
    key: KeyArgs,
    /// Append/replace the solved table in this cache file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TableShowArgs {
    /// Cache file to read.
    #[arg(long, default_value = "thc-tables.cache")]
    cache: PathBuf,
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    granularity: Option<u32>,
    #[arg(long, value_parser = parse_fraction)]
    p: Option<(u64, u64)>,
}

#[derive(Args)]
struct NmseArgs {
    #[command(flatten)]
    key: KeyArgs,
    #[arg(long, default_value_t = 10)]
    workers: u16,
    #[arg(long, default_value_t = 4096)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    trials: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Load the table from this cache instead of solving.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Write per-trial NMSE rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Per-packet, per-direction loss probability.
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
    /// Random stragglers per round.
    #[arg(long, default_value_t = 0)]
    stragglers: usize,
    /// Partial-aggregation threshold in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    threshold: f64,
    /// Sync models every N rounds (0 = never).
    #[arg(long, default_value_t = 0)]
    sync: u32,
    #[arg(long, default_value_t = 500)]
    rounds: u32,
    #[arg(long, default_value_t = 10)]
    workers: u16,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long, default_value_t = 20)]
    granularity: u32,
    #[arg(long, value_parser = parse_fraction, default_value = "1/512")]
    p: (u64, u64),
    /// Step size as a fraction of 1/L.
    #[arg(long, default_value_t = 0.1)]
    eta_scale: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Run the uncompressed exact-aggregation baseline instead.
    #[arg(long, default_value_t = false)]
    baseline: bool,
    /// Write one CSV row per round here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Table { action } => match action {
            TableAction::Gen(args) => {
                let key = args.key.key()?;
                let table = solve_optimal_table(&key, 1e-12).map_err(|e| e.to_string())?;
                let values: Vec<String> = table.values.iter().map(|v| v.to_string()).collect();
                println!("{}", values.join(" "));
                println!("t_p = {:.12}", table.t_p);
                println!("variance = {:.12e}", table.variance);
                if let Some(out) = args.out {
                    save_table(&out, &table).map_err(|e| e.to_string())?;
                    println!("saved to {}", out.display());
                }
                Ok(())
            }
            TableAction::Show(args) => {
                let tables = list_tables(&args.cache).map_err(|e| e.to_string())?;
                let mut shown = 0;
                for t in tables {
                    if args.bits.is_some_and(|b| b != t.key.bits) {
                        continue;
                    }
                    if args.granularity.is_some_and(|g| g != t.key.granularity) {
                        continue;
                    }
                    if args
                        .p
                        .is_some_and(|(n, d)| (t.key.p_num, t.key.p_den) != reduce(n, d))
                    {
                        continue;
                    }
                    let values: Vec<String> = t.values.iter().map(|v| v.to_string()).collect();
                    println!(
                        "b={} g={} p={}/{} t_p={:.9} variance={:.9e}: {}",
                        t.key.bits,
                        t.key.granularity,
                        t.key.p_num,
                        t.key.p_den,
                        t.t_p,
                        t.variance,
                        values.join(" ")
                    );
                    shown += 1;
                }
                if shown == 0 {
                    return Err("no matching tables in cache".into());
                }
                Ok(())
            }
        },
        Command::Nmse(args) => {
            let key = args.key.key()?;
            let table = match &args.cache {
                Some(path) => load_table(path, &key).map_err(|e| e.to_string())?,
                None => solve_optimal_table(&key, 1e-12).map_err(|e| e.to_string())?,
            };
            let params = NmseParams {
                workers: args.workers,
                dim: args.dim,
                trials: args.trials,
                base_seed: args.seed,
            };
            let stats = nmse_experiment(&table, &params).map_err(|e| e.to_string())?;
            if let Some(path) = &args.csv {
                let mut out = String::new();
                out.push_str(&format!(
                    "# nmse: lognormal mu=0 sigma=1 sign-symmetrized; bits={} granularity={} \
                     p={}/{} workers={} dim={} trials={} seed={}\n",
                    key.bits,
                    key.granularity,
                    key.p_num,
                    key.p_den,
                    params.workers,
                    params.dim,
                    params.trials,
                    params.base_seed
                ));
                out.push_str("trial,nmse\n");
                for (t, v) in stats.per_trial.iter().enumerate() {
                    out.push_str(&format!("{t},{v:.12e}\n"));
                }
                write_file(path, &out)?;
            }
            println!(
                "mean NMSE over {} trials: {:.9e}",
                params.trials, stats.mean
            );
            Ok(())
        }
        Command::Simulate(args) => {
            let params = ResiliencyParams {
                mode: if args.baseline {
                    RunMode::Baseline
                } else {
                    RunMode::Thc
                },
                workers: args.workers,
                dim: args.dim,
                rounds: args.rounds,
                sync_period: args.sync,
                eta_scale: args.eta_scale,
                loss_rate: args.loss,
                stragglers: args.stragglers,
                threshold: args.threshold,
                bits: args.bits,
                granularity: args.granularity,
                p_num: args.p.0,
                p_den: args.p.1,
                base_seed: args.seed,
                ..ResiliencyParams::default()
            };
            let trace = resiliency_experiment(&params).map_err(|e| e.to_string())?;
            if let Some(path) = &args.csv {
                let mut out = String::new();
                out.push_str(&format!(
                    "# simulate: mode={:?} workers={} dim={} rounds={} loss={} stragglers={} \
                     threshold={} sync={} bits={} granularity={} p={}/{} eta_scale={} seed={} \
                     f_star={:.12e}\n",
                    params.mode,
                    params.workers,
                    params.dim,
                    params.rounds,
                    params.loss_rate,
                    params.stragglers,
                    params.threshold,
                    params.sync_period,
                    params.bits,
                    params.granularity,
                    params.p_num,
                    params.p_den,
                    params.eta_scale,
                    params.base_seed,
                    trace.f_star
                ));
                out.push_str(
                    "round,objective,gap,sent_up,delivered_up,lost_up,suppressed_up,sent_down,\
                     delivered_down,lost_down,timeouts,zero_filled_chunks,partial_completions,\
                     straggler_notices,distinct_models\n",
                );
                for r in 0..trace.objectives.len() {
                    let net = trace.reports.get(r);
                    let z = |f: fn(&thc::RoundReport) -> u64| net.map(f).unwrap_or(0);
                    out.push_str(&format!(
                        "{},{:.12e},{:.12e},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                        r,
                        trace.objectives[r],
                        trace.gaps[r],
                        z(|n| n.sent_up),
                        z(|n| n.delivered_up),
                        z(|n| n.lost_up),
                        z(|n| n.suppressed_up),
                        z(|n| n.sent_down),
                        z(|n| n.delivered_down),
                        z(|n| n.lost_down),
                        z(|n| n.timeouts),
                        z(|n| n.zero_filled_chunks),
                        z(|n| n.partial_completions),
                        z(|n| n.straggler_notices),
                        trace.divergence[r],
                    ));
                }
                write_file(path, &out)?;
            }
            println!(
                "final objective {:.9e} (gap {:.9e} over optimum {:.9e})",
                trace.objectives.last().unwrap(),
                trace.final_gap,
                trace.f_star
            );
            Ok(())
        }
        Command::Selftest => selftest(),
    }
}

fn reduce(mut a: u64, mut b: u64) -> (u64, u64) {
    fn gcd(mut a: u64, mut b: u64) -> u64 {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    }
    let d = gcd(a, b).max(1);
    a /= d;
    b /= d;
    (a, b)
}

fn write_file(path: &PathBuf, contents: &str) -> Result<(), String> {
    let mut f = std::fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| format!("{}: {e}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn selftest() -> Result<(), String> {
    use thc::codec::{decode_aggregate, decode_self, table_lookup_sum, thc_encode};
    use thc::hadamard::{compute_tp, fwht, normal_cdf, rht, rht_inverse, TransformSeed};
    use thc::protocol::{parse, GradientPacket, Packet};

    let mut failures = 0u32;
    let mut check = |name: &str, ok: bool| {
        println!("{}: {}", name, if ok { "pass" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // transform involution and norm preservation
    {
        let x: Vec<f64> = (0..1024)
            .map(|i| ((i * 37 + 5) % 101) as f64 / 50.0 - 1.0)
            .collect();
        let y = fwht(&x).unwrap();
        let back = fwht(&y).unwrap();
        let rt = x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-9);
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        check("fwht involution + norm", rt && (nx - ny).abs() / nx < 1e-10);
        let s = TransformSeed::new(3, 1);
        let z = rht_inverse(&rht(&x, s).unwrap(), s).unwrap();
        check(
            "rht roundtrip",
            x.iter().zip(&z).all(|(a, b)| (a - b).abs() < 1e-9),
        );
    }

    // t_p against a bisection oracle
    {
        let bisect = |p: f64| {
            let target = 1.0 - p / 2.0;
            let (mut lo, mut hi) = (0.0f64, 16.0f64);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if normal_cdf(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let ok = [1.0 / 32.0, 1.0 / 64.0, 1.0 / 512.0, 1.0 / 1024.0]
            .iter()
            .all(|&p| (compute_tp(p).unwrap() - bisect(p)).abs() < 1e-8);
        check("compute_tp vs bisection", ok);
    }

    // solver on a forced case and homomorphism on random instances
    {
        let key = TableKey::new(2, 3, 1, 32).map_err(|e| e.to_string())?;
        let t = solve_optimal_table(&key, 1e-12).map_err(|e| e.to_string())?;
        check("solver forced table", t.values == vec![0, 1, 2, 3]);

        let key = TableKey::new(4, 20, 1, 512).map_err(|e| e.to_string())?;
        let table = solve_optimal_table(&key, 1e-12).map_err(|e| e.to_string())?;
        let mut ok = true;
        for inst in 0..50u64 {
            let d = 64;
            let x: Vec<f64> = (0..d)
                .map(|j| (((inst * 131 + j as u64 * 17) % 200) as f64 / 100.0) - 1.0)
                .collect();
            let n = 1 + (inst % 8) as u16;
            let encs: Vec<_> = (0..n)
                .map(|w| thc_encode(&x, -1.0, 1.0, &table, inst * 100 + w as u64, 0, w).unwrap())
                .collect();
            let agg = table_lookup_sum(&encs, &table, 16).unwrap();
            let dec = decode_aggregate(&agg).unwrap();
            let mut mean = vec![0.0; d];
            for e in &encs {
                for (m, v) in mean.iter_mut().zip(decode_self(e, &table).unwrap()) {
                    *m += v / n as f64;
                }
            }
            ok &= mean
                .iter()
                .zip(&dec)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        check("homomorphic aggregation", ok);
    }

    // wire roundtrip
    {
        let mut ok = true;
        for i in 0..2000u32 {
            let count = i % 97;
            let bits = 1 + (i % 16) as u8;
            let payload = vec![0u8; (count as usize * bits as usize).div_ceil(8)];
            let p = GradientPacket {
                round_num: i,
                agtr_idx: i * 3,
                num_worker: 1 + (i % 30) as u16,
                worker_id: (i % (1 + i % 30)) as u16,
                count,
                bits_per_index: bits,
                payload,
            };
            let bytes = p.serialize().unwrap();
            ok &= parse(&bytes).unwrap() == Packet::Gradient(p);
        }
        check("wire roundtrip", ok);
    }

    if failures == 0 {
        println!("selftest: all suites passed");
        Ok(())
    } else {
        Err(format!("{failures} selftest suites failed"))
    }
}
