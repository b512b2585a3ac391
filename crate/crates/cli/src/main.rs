use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lelong_core::experiment::{emit, run_with_threads, ExperimentConfig, ExperimentKind, Format};

const WEIGHT_GRAMMAR: &str = "\
Weight specs:
  weight := term ('+' term)*
  term   := [coef '*'] atom | [coef '*'] 'max(' weight ('|' weight)* ')'
  atom   := zero | const:k=K | smooth:a=A | normal_log:c=C | tangential_log:c=C
          | interior_log:c=C,a=P
  P      := comp (';' comp)*      comp := re | re@im

  smooth is a|z|^2, normal_log is c log|1-z_1|, tangential_log is c log|z_2|,
  interior_log is c log|z-a|. Example: normal_log:c=1.5+smooth:a=0.2
  `catalog` runs every catalog weight (bound-ratio, doubling, riesz).

Exit status: 0 all verdicts pass, 2 only heavy-tailed estimates failed, 1 otherwise.";

#[derive(Parser)]
#[command(name = "lelong", version, about = "Weighted Bergman kernel and BMO experiments on the unit ball", after_help = WEIGHT_GRAMMAR)]
struct Cli {
    /// TOML experiment config; command-line values override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Multiplies every sample budget.
    #[arg(long, global = true)]
    budget_scale: Option<f64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "LELONG_THREADS")]
    threads: Option<usize>,
    /// Recompute cached Gram matrices.
    #[arg(long, global = true)]
    rebuild: bool,
    /// Print the resolved config as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    weight: Option<String>,
    #[arg(short, long)]
    n: Option<usize>,
    #[arg(short, long, allow_negative_numbers = true)]
    t: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Kernel growth along a boundary ray and its fitted exponent.
    KernelAsymptotics(Common),
    /// Log-ratio of the kernel to its mean-value bound along a ray.
    BoundRatio(Common),
    /// Exponential-integrability curve over a sampled ball family.
    JnCurve(Common),
    Bmo(Common),
    Ap(Common),
    Bernstein(Common),
    /// Unconditional comparison, doubling and A_p inequalities.
    Doubling(Common),
    /// Riesz decomposition on a disc (n = 1).
    Riesz(Common),
    /// Directional and thin-set Lelong estimates.
    Lelong(Common),
    GeometryVerify(Common),
}

impl Command {
    fn split(&self) -> (ExperimentKind, Common) {
        use Command::*;
        let (k, c) = match self {
            KernelAsymptotics(c) => (ExperimentKind::KernelAsymptotics, c),
            BoundRatio(c) => (ExperimentKind::BoundRatio, c),
            JnCurve(c) => (ExperimentKind::JnCurve, c),
            Bmo(c) => (ExperimentKind::Bmo, c),
            Ap(c) => (ExperimentKind::Ap, c),
            Bernstein(c) => (ExperimentKind::Bernstein, c),
            Doubling(c) => (ExperimentKind::Doubling, c),
            Riesz(c) => (ExperimentKind::Riesz, c),
            Lelong(c) => (ExperimentKind::Lelong, c),
            GeometryVerify(c) => (ExperimentKind::GeometryVerify, c),
        };
        (k, c.clone())
    }
}

fn resolve(cli: &Cli) -> lelong_core::Result<ExperimentConfig> {
    let (kind, common) = cli.command.split();
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.kind = kind;
    if let Some(w) = common.weight {
        cfg.weight = w;
    }
    if let Some(n) = common.n {
        cfg.n = n;
    }
    if let Some(t) = common.t {
        cfg.t = t;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    if cli.rebuild {
        cfg.rebuild_cache = true;
    }
    if let Some(f) = cli.budget_scale {
        cfg.scale_budgets(f)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if cli.print_config {
        print!("{}", cfg.to_toml_string());
        return ExitCode::SUCCESS;
    }
    let threads = cli.threads.unwrap_or(0);
    let result = run_with_threads(&cfg, threads).and_then(|out| {
        let mut files = emit(&out, &cfg.out_dir, Format::Csv)?;
        files.extend(emit(&out, &cfg.out_dir, Format::Json)?);
        Ok((out, files))
    });
    match result {
        Ok((out, files)) => {
            for v in &out.manifest.verdicts {
                let tag = if v.pass {
                    "pass"
                } else if v.binding {
                    "FAIL"
                } else {
                    "note"
                };
                println!("{tag:4}  {}: {}", v.name, v.detail);
            }
            for (k, v) in &out.manifest.empirical_constants {
                println!("      {k} = {v}");
            }
            println!("wrote {} files to {}", files.len(), cfg.out_dir.display());
            ExitCode::from(out.manifest.status().exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
