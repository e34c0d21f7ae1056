//! Command-line front end: phantom generation, supervision building,
//! training, prediction, warping, distance maps, evaluation and gradient checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use brainshift::config::RunConfig;
use brainshift::eval::{crossval, crossval_with, FoldPlan};
use brainshift::ffd::read_cpp;
use brainshift::gradcheck::{check_losses, check_network};
use brainshift::network::{predict_case, read_checkpoint, train, write_checkpoint};
use brainshift::nifti::{read_nifti, write_nifti};
use brainshift::pipeline::standardize_case;
use brainshift::shape::{signed_distance, DEFAULT_SDF_CAP_MM};
use brainshift::synth::{gen_cohort, read_case, read_cohort, warp_mask, warp_volume, write_cohort};
use brainshift::{Error, Result};

#[derive(Parser)]
#[command(name = "brainshift", version, about = "Brain-shift field prediction toolkit")]
struct Cli {
    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Phantom {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        /// Cubic grid size, or three comma-separated sizes.
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Densify a control-point grid onto a reference grid and derive mask and SDF targets.
    Supervise {
        #[arg(long)]
        cpp: PathBuf,
        /// Reference NIfTI on the target grid; voxels above 0.5 form the preoperative mask.
        #[arg(long)]
        geom: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every case of a cohort.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Predict displacement, mask and SDF for one case.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Warp a volume by a displacement field.
    Warp {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Threshold the result at 0.5.
        #[arg(long)]
        mask: bool,
    },
    /// Signed distance map of a binary mask.
    Sdf {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SDF_CAP_MM)]
        cap: f64,
    },
    /// Cross-validated evaluation. Trains one model per fold unless a checkpoint is given.
    Eval {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Finite-difference checks of the loss and network gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Network parameters sampled per seed.
        #[arg(long, default_value_t = 50)]
        params: usize,
    },
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let bad = || Error::Config(vec![format!("--dims expects N or NX,NY,NZ, got '{s}'")]);
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(bad()),
    }
}

fn load_config(arg: &ConfigArg, overrides: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(arg.config.as_deref())?;
    overrides(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

/// `<out>.<suffix>` for commands whose `--out` names a file.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config(vec!["--threads must be at least 1".into()]));
        }
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Phantom { seed, n, dims, out, cfg } => {
            let cfg = load_config(&cfg, |c| {
                if let Some(s) = seed {
                    c.cohort.base_seed = s;
                }
                if let Some(n) = n {
                    c.cohort.n_cases = n;
                }
                if let Some(d) = dims {
                    c.cohort.phantom.dims = parse_dims(&d)?;
                }
                Ok(())
            })?;
            let cases = gen_cohort(cfg.cohort.base_seed, cfg.cohort.n_cases, &cfg.cohort.phantom)?;
            create_dir(&out)?;
            write_cohort(&cases, &out)?;
            write_file(&out.join("config.json"), cfg.to_json())?;
            println!("wrote {} cases to {}", cases.len(), out.display());
        }
        Command::Supervise { cpp, geom, out } => {
            let grid = read_cpp(&cpp)?;
            let reference = read_nifti(&geom)?;
            let disp = grid.densify(reference.geometry())?;
            let mask_pre = reference.threshold(0.5);
            let mask = warp_mask(&mask_pre, &disp)?;
            let sdf = signed_distance(&mask, DEFAULT_SDF_CAP_MM);
            create_dir(&out)?;
            write_nifti(&disp, out.join("gt_disp.nii"))?;
            write_nifti(&mask, out.join("gt_mask_intra.nii"))?;
            write_nifti(&sdf, out.join("gt_sdf.nii"))?;
            println!("wrote supervision targets to {}", out.display());
        }
        Command::Train { cohort, out, epochs, lr, seed, cfg } => {
            let cfg = load_config(&cfg, |c| {
                if let Some(e) = epochs {
                    c.train.epochs = e;
                }
                if let Some(lr) = lr {
                    c.train.lr = lr;
                }
                if let Some(s) = seed {
                    c.train.seed = s;
                }
                Ok(())
            })?;
            let cases = read_cohort(&cohort)?
                .iter()
                .map(|c| standardize_case(c, &cfg.pipeline))
                .collect::<Result<Vec<_>>>()?;
            let (params, log) = train(&cases, &cfg.train)?;
            write_checkpoint(&params, &out)?;
            write_file(&sibling(&out, "loss.csv"), log.to_csv())?;
            write_file(&sibling(&out, "config.json"), cfg.to_json())?;
            let totals = log.totals();
            if let (Some(first), Some(last)) = (totals.first(), totals.last()) {
                println!("trained {} steps, total loss {first:.4} -> {last:.4}", totals.len());
            }
        }
        Command::Predict { ckpt, case, out, cfg } => {
            let cfg = load_config(&cfg, |_| Ok(()))?;
            let params = read_checkpoint(&ckpt)?;
            let case = standardize_case(&read_case(&case)?, &cfg.pipeline)?;
            let pred = predict_case(&params, &case)?;
            create_dir(&out)?;
            write_nifti(&pred.disp, out.join("disp.nii"))?;
            write_nifti(&pred.mask_prob, out.join("mask.nii"))?;
            write_nifti(&pred.sdf, out.join("sdf.nii"))?;
            write_file(&out.join("config.json"), cfg.to_json())?;
            println!("wrote prediction to {}", out.display());
        }
        Command::Warp { vol, field, out, mask } => {
            let v = read_nifti(&vol)?;
            let d = read_nifti(&field)?;
            let w = if mask { warp_mask(&v, &d)? } else { warp_volume(&v, &d)? };
            write_nifti(&w, &out)?;
        }
        Command::Sdf { mask, out, cap } => {
            if !(cap > 0.0) {
                return Err(Error::Config(vec![format!("--cap must be positive, got {cap}")]));
            }
            write_nifti(&signed_distance(&read_nifti(&mask)?, cap), &out)?;
        }
        Command::Eval { cohort, ckpt, folds, out, cfg } => {
            let cfg = load_config(&cfg, |c| {
                if let Some(k) = folds {
                    c.cohort.k_folds = k;
                }
                Ok(())
            })?;
            let cases = read_cohort(&cohort)?;
            let plan = FoldPlan::new(cases.len(), cfg.cohort.k_folds, cfg.cohort.fold_seed)?;
            let report = match &ckpt {
                Some(path) => {
                    let params = read_checkpoint(path)?;
                    let prepared = cases.iter().map(|c| standardize_case(c, &cfg.pipeline)).collect::<Result<Vec<_>>>()?;
                    crossval_with(&prepared, &plan, |_, _| Ok(params.clone()))?
                }
                None => crossval(&cases, &plan, &cfg.train, &cfg.pipeline)?,
            };
            write_file(&out, report.to_json())?;
            write_file(&sibling(&out, "cases.csv"), report.to_csv())?;
            write_file(&sibling(&out, "config.json"), cfg.to_json())?;
            print!("{}", report.to_text());
        }
        Command::Gradcheck { seed, params } => {
            let mut results = check_losses(seed)?;
            results.push(check_network(seed, params)?);
            let mut failed = Vec::new();
            for r in &results {
                println!("{r}");
                if !r.passed() {
                    failed.push(r.suite.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::GradCheck(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[USAGE]: {first}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let text = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {text}", e.code());
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
