use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clbf::error::Error;
use clbf::pipeline::{self, Overrides, EXIT_FAILED, EXIT_OK, EXIT_USAGE};
use clbf::verifier::CheckOptions;

#[derive(Parser)]
#[command(name = "clbf", version, about = "Synthesize and verify smooth control Lyapunov-barrier functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Verifier precision.
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Softmax temperature.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Maximum number of half-space cuts.
    #[arg(long, global = true)]
    kmax: Option<usize>,
    /// Cut rotation angle in radians.
    #[arg(long, global = true)]
    theta: Option<f64>,
    #[arg(long, global = true)]
    cut_margin: Option<f64>,
    /// Largest band width tried.
    #[arg(long, global = true)]
    eps_cap: Option<f64>,
    /// Radius of the ball around the origin left to the local check.
    #[arg(long, global = true)]
    origin_radius: Option<f64>,
    /// Box budget per verifier query.
    #[arg(long, global = true)]
    budget: Option<u64>,
    /// Worker threads (0: all cores).
    #[arg(long, global = true, env = "CLBF_THREADS", default_value_t = 0)]
    threads: usize,
    /// Progress output on stderr.
    #[arg(long, global = true)]
    trace: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a problem file and write a certificate.
    Synthesize {
        spec: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Replay every query of a certificate.
    Verify { certificate: PathBuf },
    /// Simulate the closed loop from random safe initial states.
    Simulate {
        certificate: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long, default_value = "trajectories")]
        out: PathBuf,
    },
    /// Export h and W on a grid, with the 1-level set of h.
    Grid {
        certificate: PathBuf,
        #[arg(long, default_value_t = 400)]
        resolution: usize,
        #[arg(short, long, default_value = "grid")]
        out: PathBuf,
    },
    /// Certify every problem file in a directory and print a table.
    Bench {
        #[arg(default_value = "benchmarks")]
        dir: PathBuf,
    },
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            delta: self.delta,
            tau: self.tau,
            k_max: self.kmax,
            theta: self.theta,
            cut_margin: self.cut_margin,
            eps_cap: self.eps_cap,
            origin_radius: self.origin_radius,
            budget: self.budget,
        }
    }

    fn options(&self) -> CheckOptions {
        CheckOptions {
            threads: self.threads,
            trace: self.trace,
            budget: self.budget.unwrap_or(CheckOptions::default().budget),
            ..Default::default()
        }
    }
}

fn run(cli: Cli) -> Result<i32, Error> {
    let opts = cli.common.options();
    let overrides = cli.common.overrides();
    match cli.command {
        Command::Synthesize { spec, out } => {
            let out = out.unwrap_or_else(|| spec.with_extension("cert.json"));
            let (cert, code) = pipeline::cmd_synthesize(&spec, &out, &overrides, &opts)?;
            match &cert.failure {
                None => {
                    let b = cert.barrier.as_ref().expect("certified barrier");
                    let c = cert.compatibility.as_ref().expect("certified band");
                    let p = cert.patched.as_ref().expect("patched function");
                    println!(
                        "certified {}: {} cuts, V = {}, eps = {}, alpha = {:e}",
                        cert.spec.name,
                        b.cuts.len(),
                        cert.clf.as_ref().map_or("-", |c| c.v.as_str()),
                        c.epsilon,
                        p.alpha
                    );
                }
                Some(f) => println!("FAILED at {}: {}", f.stage, f.message),
            }
            println!("certificate written to {}", out.display());
            Ok(code)
        }
        Command::Verify { certificate } => {
            let (report, code) = pipeline::cmd_verify(&certificate, &opts)?;
            for c in &report.checks {
                println!("{:<18} {}  {}", c.name, if c.ok { "ok  " } else { "FAIL" }, c.detail);
            }
            println!("{}", if code == EXIT_OK { "certificate verified" } else { "certificate REJECTED" });
            Ok(code)
        }
        Command::Simulate {
            certificate,
            count,
            seed,
            out,
        } => {
            let cert = clbf::problem::Certificate::load(&certificate)?;
            let count = count.unwrap_or(cert.spec.simulation.count);
            let seed = seed.unwrap_or(cert.spec.simulation.seed);
            let s = pipeline::simulate_certificate(&cert, count, seed, Some(&out))?;
            println!(
                "{}/{} converged, {}/{} safe, max h = {:.6}, max W = {:.6}",
                s.converged, s.count, s.safe, s.count, s.max_h, s.max_w
            );
            for t in s.trajectories.iter().filter(|t| !t.converged || t.error.is_some()) {
                println!("  trajectory {} from {:?}: {}", t.index, t.x0, t.error.as_deref().unwrap_or("did not converge"));
            }
            Ok(if s.passed() { EXIT_OK } else { EXIT_FAILED })
        }
        Command::Grid {
            certificate,
            resolution,
            out,
        } => {
            let cert = clbf::problem::Certificate::load(&certificate)?;
            let g = pipeline::grid_certificate(&cert, resolution, &out)?;
            println!("{} grid rows, {} level-set segments", g.rows, g.segments.len());
            for f in &g.files {
                println!("  {}", f.display());
            }
            Ok(EXIT_OK)
        }
        Command::Bench { dir } => {
            let rows = pipeline::bench(&dir, &overrides, &opts)?;
            print!("{}", pipeline::bench_table(&rows));
            let all = rows.iter().all(|r| r.failure.is_none());
            Ok(if all && !rows.is_empty() { EXIT_OK } else { EXIT_FAILED })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
