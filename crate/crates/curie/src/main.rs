use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use curie::config::Overrides;
use curie::CliError;
use curie_core::irreps::GroupElement;

#[derive(Parser)]
#[command(name = "curie", version, about = "Equivariant networks and symmetry-breaking order parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grid_res: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            grid_res: self.grid_res,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train or discover, then write results, tables, signals and a checkpoint.
    Run(Common),
    /// Run the equivariance, Curie, combination and gradient checks.
    Check(Common),
    /// Dump 3j tensors and D matrices as JSON.
    Tables {
        /// One 3j tensor, e.g. `1,1,2`.
        #[arg(long = "3j", value_parser = triple::<u32>)]
        three_j: Option<[u32; 3]>,
        /// One D matrix of this degree for the element given by --axis/--angle.
        #[arg(long)]
        d: Option<u32>,
        /// Every 3j triple and D matrix up to this degree.
        #[arg(long)]
        lmax: Option<u32>,
        #[arg(long, value_parser = triple::<f64>, default_value = "0,0,1")]
        axis: [f64; 3],
        #[arg(long, default_value_t = 0.0)]
        angle: f64,
        #[arg(long)]
        inversion: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn tables(three_j: Option<[u32; 3]>, d: Option<u32>, lmax: Option<u32>, g: GroupElement) -> Result<String, CliError> {
    let value = match (three_j, d, lmax) {
        (Some(l), None, None) => curie::tables::three_j(l[0], l[1], l[2])?,
        (None, Some(l), None) => curie::tables::d_matrix(l, &g)?,
        (None, None, Some(l)) => curie::tables::all(l, &g)?,
        _ => return Err(CliError::Validation("give exactly one of --3j, --d, --lmax".into())),
    };
    Ok(serde_json::to_string(&value).expect("tables serialize") + "\n")
}

fn triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| format!("bad value `{x}`")))
        .collect::<Result<Vec<_>, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated values".to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(c) => curie::run::cmd_run(&c.config, &c.overrides()).map(|o| {
            println!(
                "{}: final mse {:e} (relative {:e}); wrote {}",
                o.results.task,
                o.results.final_mse,
                o.results.relative_mse,
                o.out_dir.display()
            );
        }),
        Command::Check(c) => curie::check::cmd_check(&c.config, &c.overrides()).and_then(|r| {
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            if r.passed {
                Ok(())
            } else {
                Err(CliError::CheckFailed)
            }
        }),
        Command::Tables {
            three_j,
            d,
            lmax,
            axis,
            angle,
            inversion,
            out,
        } => {
            let g = GroupElement::from_axis_angle(axis, angle).with_inversion(inversion);
            tables(three_j, d, lmax, g).and_then(|text| match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
                None => {
                    print!("{text}");
                    Ok(())
                }
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("curie: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
