//! `latop`: prepare data, train, evaluate and merge reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latop::datagen::TransformKind;
use latop::expcli::{self, DegreeMode, KnnSettings, ABLATION_K, ABLATION_N, ABLATION_SEEDS};
use latop::operators::OperatorKind;
use latop::pose::{DEFAULT_K, DEFAULT_REF_SEED};
use latop::trainer::TrainConfig;
use latop::{Error, Exec};

#[derive(Parser)]
#[command(name = "latop", version, about = "Latent shift operator experiments on transformed MNIST")]
struct Cli {
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset cache from the raw MNIST IDX files.
    Prepare {
        #[arg(long)]
        mnist_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tie the cache to one transform; later commands refuse others.
        #[arg(long)]
        transform: Option<TransformKind>,
    },
    /// Train a model and write its checkpoint and loss curve.
    Train(TrainArgs),
    /// Test accuracy at every degree of a single transform.
    EvalExtrapolation {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Test accuracy over the 14x14 grid of joint translations.
    EvalCompound {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Sweep reference size and neighbour count for k-NN pose inference.
    AblateKnn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "grid-N", value_delimiter = ',', default_values_t = ABLATION_N)]
        grid_n: Vec<usize>,
        #[arg(long = "grid-K", value_delimiter = ',', default_values_t = ABLATION_K)]
        grid_k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = ABLATION_SEEDS)]
        seeds: Vec<u64>,
        #[arg(long)]
        max_test: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge report CSVs that share a schema and print a summary.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    transform: TransformKind,
    #[arg(long)]
    operator: OperatorKind,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = latop::model::DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report the alignment term without optimizing it.
    #[arg(long)]
    no_reg: bool,
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV; defaults to the checkpoint path with `.curve.csv`.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "gt")]
    degree_mode: DegreeMode,
    #[arg(long = "K", default_value_t = DEFAULT_K)]
    k: usize,
    /// Reference database size; required in knn mode.
    #[arg(long = "refN")]
    ref_n: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_REF_SEED)]
    ref_seed: u64,
    /// Evaluate only the first this-many test digits.
    #[arg(long)]
    max_test: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

impl EvalArgs {
    fn knn(&self) -> Option<KnnSettings> {
        self.ref_n.map(|ref_n| KnnSettings {
            k: self.k,
            ref_n,
            ref_seed: self.ref_seed,
        })
    }
}

fn run(cli: Cli) -> latop::Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Prepare {
            mnist_dir,
            out,
            seed,
            transform,
        } => {
            let c = expcli::prepare(&mnist_dir, &out, seed, transform)?;
            println!("train={} val={} test={}", c.train, c.val, c.test);
        }
        Command::Train(a) => {
            let config = TrainConfig {
                epochs: a.epochs,
                lr: a.lr,
                batch: a.batch,
                lambda: a.lambda,
                hidden: a.hidden,
                seed: a.seed,
                use_reg: !a.no_reg,
                ..TrainConfig::new(a.transform, a.operator)
            };
            let curve = a.curve.unwrap_or_else(|| expcli::curve_path(&a.out));
            expcli::train_files(&config, &a.data, &a.out, &curve, exec, |r| {
                println!(
                    "epoch {:>3}  ce {:.5}  reg {:.5}  op {:.5}  total {:.5}",
                    r.epoch, r.ce, r.reg, r.op, r.total
                )
            })?;
        }
        Command::EvalExtrapolation { eval } => {
            let (ck, ds) = expcli::load_inputs(&eval.ckpt, &eval.data)?;
            let rows = expcli::eval_extrapolation(&ck, &ds, eval.degree_mode, eval.knn(), eval.max_test, exec)?;
            expcli::write_extrapolation(&eval.out, &rows)?;
            for r in &rows {
                println!("{:>4} ({:>5})  {:.2}%", r.group_index, r.degree_units, r.accuracy);
            }
        }
        Command::EvalCompound { eval } => {
            let (ck, ds) = expcli::load_inputs(&eval.ckpt, &eval.data)?;
            let rows = expcli::eval_compound(&ck, &ds, eval.degree_mode, eval.knn(), eval.max_test, exec)?;
            expcli::write_compound(&eval.out, &rows)?;
            let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64;
            println!("{} cells, mean accuracy {mean:.2}%", rows.len());
        }
        Command::AblateKnn {
            ckpt,
            data,
            grid_n,
            grid_k,
            seeds,
            max_test,
            out,
        } => {
            let (ck, ds) = expcli::load_inputs(&ckpt, &data)?;
            let rows = expcli::ablate_knn(&ck, &ds, &grid_n, &grid_k, &seeds, max_test, exec)?;
            expcli::write_ablation(&out, &rows)?;
            for r in rows.iter().filter(|r| r.seed.is_none()) {
                println!("N={:<5} K={:<4} pose {:.2}%  cls {:.2}%", r.n, r.k, r.acc_pose, r.acc_cls);
            }
        }
        Command::Report { inputs, out } => print!("{}", expcli::report(&inputs, &out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}

fn report_error(e: &Error) {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error[{}]: {msg}", e.code());
}
