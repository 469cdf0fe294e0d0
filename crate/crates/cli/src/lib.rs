//! Reproducible runs of the trumpetflow engine: generate data, train, evaluate
//! posterior estimates against ground truth and oracles, and run the
//! built-in verification suites.
//!
//! Output files under the run directory (`--out`):
//!
//! | file | content |
//! |------|---------|
//! | `config.toml` | fully resolved run configuration |
//! | `manifest.json` | problem descriptor, seed and dataset sizes |
//! | `train.bin`, `test.bin` | datasets |
//! | `checkpoint.bin` | model, optimizer state and loss history |
//! | `metrics.csv` | `phase,epoch,step,loss` |
//! | `eval.csv` | per-item metrics (images) or per-angle metrics (fiber bundles) |
//! | `eval_images.csv` | `item,kind,sample,pixel,value` (images) |
//! | `fiber_samples.csv` | `angle_deg,sample,x,y,z,distance` (fiber bundles) |
//! | `eval_summary.json` | averages of the evaluation columns |
//! | `map.csv` | surrogate MAP per test item |

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use trumpetflow::diffcore::Tensor;
use trumpetflow::io::{ensure_architecture, read_checkpoint, write_atomic, write_checkpoint, Dataset};
use trumpetflow::metrics::{pearson, sample_moments, snr_db, ssim};
use trumpetflow::model::CTrumpet;
use trumpetflow::problems::{angle_features, angle_sweep, center_patch, Problem, ProblemKind};
use trumpetflow::training::{train, TrainState, TrainingSet};
use trumpetflow::verify::{self, Fault, SuiteReport, VerifyOptions};
use trumpetflow::{Error, Result};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_VERIFY_FAILED: i32 = 3;

/// Environment variable capping the worker threads of parallel sections.
pub const THREADS_ENV: &str = "TRUMPETFLOW_THREADS";

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_EVAL: u64 = 1 << 32;

/// Generator seeded with `seed` on an independent stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// File locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
    pub fn train_set(&self) -> PathBuf {
        self.dir.join("train.bin")
    }
    pub fn test_set(&self) -> PathBuf {
        self.dir.join("test.bin")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn eval(&self) -> PathBuf {
        self.dir.join("eval.csv")
    }
    pub fn eval_images(&self) -> PathBuf {
        self.dir.join("eval_images.csv")
    }
    pub fn fiber_samples(&self) -> PathBuf {
        self.dir.join("fiber_samples.csv")
    }
    pub fn eval_summary(&self) -> PathBuf {
        self.dir.join("eval_summary.json")
    }
    pub fn map(&self) -> PathBuf {
        self.dir.join("map.csv")
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    problem: &'a trumpetflow::problems::ProblemSpec,
    seed: u64,
    train_size: usize,
    test_size: usize,
    data_dim: usize,
    measurement_dim: usize,
    cond_dim: usize,
}

/// Generate train and test sets and the manifest.
pub fn cmd_generate(cfg: &RunConfig) -> Result<RunPaths> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out);
    fs::create_dir_all(&paths.dir)?;
    let spec = cfg.problem_spec();
    let problem = Problem::new(spec.clone())?;
    for (size, stream, path) in [(cfg.train_size, STREAM_TRAIN, paths.train_set()), (cfg.test_size, STREAM_TEST, paths.test_set())] {
        let s = problem.generate(size, &mut stream_rng(cfg.seed, stream))?;
        Dataset::new(spec.clone(), cfg.seed, s.x, s.y)?.write(&path)?;
    }
    let manifest = Manifest {
        problem: &spec,
        seed: cfg.seed,
        train_size: cfg.train_size,
        test_size: cfg.test_size,
        data_dim: problem.data_dim(),
        measurement_dim: problem.measurement_dim(),
        cond_dim: problem.cond_dim(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&paths.manifest(), format!("{text}\n").as_bytes())?;
    write_atomic(&paths.config(), cfg.to_toml()?.as_bytes())?;
    Ok(paths)
}

fn load_set(path: &Path, cfg: &RunConfig) -> Result<(Problem, Dataset)> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found (run generate first)", path.display()),
        )));
    }
    let d = Dataset::read(path)?;
    if d.header.problem != cfg.problem_spec() {
        return Err(Error::Config(format!(
            "{} was generated for {:?}, the configuration describes {:?}",
            path.display(),
            d.header.problem,
            cfg.problem_spec()
        )));
    }
    Ok((Problem::new(d.header.problem.clone())?, d))
}

fn metrics_csv(state: &TrainState) -> String {
    let mut out = String::from("phase,epoch,step,loss\n");
    for e in &state.history {
        writeln!(out, "{},{},{},{}", e.phase, e.epoch, e.step, e.loss).unwrap();
    }
    out
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub paths: RunPaths,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

/// Train on `train.bin`; writes the checkpoint and metrics after every
/// epoch. With `resume`, continues from an existing checkpoint.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out);
    let (problem, data) = load_set(&paths.train_set(), cfg)?;
    let arch = cfg.architecture(problem.data_dim(), problem.cond_dim())?;
    let tc = cfg.train_config();
    let (mut model, mut state) = if resume && paths.checkpoint().exists() {
        let ck = read_checkpoint(&paths.checkpoint())?;
        ensure_architecture(ck.model.architecture(), &arch)?;
        if ck.config != tc {
            return Err(Error::Config(format!("checkpoint was trained with {:?}, configuration says {:?}", ck.config, tc)));
        }
        (ck.model, ck.state)
    } else {
        let model = CTrumpet::new(arch, &mut stream_rng(cfg.seed, STREAM_INIT))?;
        let state = TrainState::new(&model);
        (model, state)
    };
    write_checkpoint(&paths.checkpoint(), &model, &tc, &state)?;
    write_atomic(&paths.metrics(), metrics_csv(&state).as_bytes())?;
    let set = TrainingSet::new(data.x.clone(), problem.conditioning(&data.y)?)?;
    train(&mut model, &set, &tc, &mut state, |m, s| {
        write_checkpoint(&paths.checkpoint(), m, &tc, s)?;
        write_atomic(&paths.metrics(), metrics_csv(s).as_bytes())
    })?;
    Ok(TrainReport { paths, epochs: state.history.len(), final_loss: state.history.last().map(|e| e.loss) })
}

fn load_model(cfg: &RunConfig, problem: &Problem) -> Result<CTrumpet> {
    let paths = RunPaths::new(&cfg.out);
    let ck = read_checkpoint(&paths.checkpoint())?;
    let expected = cfg.architecture(problem.data_dim(), problem.cond_dim())?;
    ensure_architecture(ck.model.architecture(), &expected)?;
    Ok(ck.model)
}

fn row(t: &Tensor, i: usize) -> Tensor {
    Tensor::new(vec![1, t.cols()], t.row(i).to_vec()).expect("row")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Per-item evaluation of an image problem.
#[derive(Clone, Debug, Serialize)]
pub struct ItemEval {
    pub item: usize,
    pub model_mmse_snr: f64,
    pub model_mmse_ssim: f64,
    pub map_snr: Option<f64>,
    pub map_ssim: Option<f64>,
    pub map_vs_mmse_snr: Option<f64>,
    pub mean_uq: f64,
    pub oracle_mmse_snr: Option<f64>,
    pub oracle_mmse_ssim: Option<f64>,
    pub uq_oracle_corr: Option<f64>,
    #[serde(skip)]
    images: Vec<(&'static str, usize, Vec<f64>)>,
}

pub const EVAL_IMAGE_COLUMNS: &str =
    "item,model_mmse_snr,model_mmse_ssim,map_snr,map_ssim,map_vs_mmse_snr,mean_uq,oracle_mmse_snr,oracle_mmse_ssim,uq_oracle_corr";

/// Hole pixels of the inpainting mask, as flat indices.
pub fn hole_pixels(n: usize, size: usize) -> Vec<usize> {
    let (r0, c0) = center_patch(n, size);
    (r0..r0 + size).flat_map(|r| (c0..c0 + size).map(move |c| r * n + c)).collect()
}

fn eval_item(cfg: &RunConfig, problem: &Problem, model: &CTrumpet, test: &Dataset, i: usize) -> Result<ItemEval> {
    let n = cfg.image_side;
    let truth = test.x.row(i).to_vec();
    let y = row(&test.y, i);
    let cond = problem.conditioning(&y)?;
    let mut rng = stream_rng(cfg.seed, STREAM_EVAL + i as u64);
    let samples = model.sample_posterior(&cond, cfg.k, &mut rng)?;
    let (mmse, uq) = sample_moments(&samples)?;
    let map = if model.is_fixed_volume() { Some(model.surrogate_map(&cond)?.to_vec()) } else { None };
    let mut images = vec![("truth", 0, truth.clone()), ("mmse", 0, mmse.clone()), ("uq", 0, uq.clone())];
    let mut e = ItemEval {
        item: i,
        model_mmse_snr: snr_db(&truth, &mmse),
        model_mmse_ssim: ssim(&truth, &mmse, n, n)?,
        map_snr: None,
        map_ssim: None,
        map_vs_mmse_snr: None,
        mean_uq: uq.iter().sum::<f64>() / uq.len() as f64,
        oracle_mmse_snr: None,
        oracle_mmse_ssim: None,
        uq_oracle_corr: None,
        images: Vec::new(),
    };
    if let Some(map) = map {
        e.map_snr = Some(snr_db(&truth, &map));
        e.map_ssim = Some(ssim(&truth, &map, n, n)?);
        e.map_vs_mmse_snr = Some(snr_db(&mmse, &map));
        images.push(("map", 0, map));
    }
    if let Some(post) = problem.posterior(test.y.row(i))? {
        let mean: Vec<f64> = post.mean.iter().copied().collect();
        let std: Vec<f64> = post.std().iter().copied().collect();
        e.oracle_mmse_snr = Some(snr_db(&truth, &mean));
        e.oracle_mmse_ssim = Some(ssim(&truth, &mean, n, n)?);
        let hole = hole_pixels(n, cfg.mask_size);
        let pick = |v: &[f64]| hole.iter().map(|&p| v[p]).collect::<Vec<_>>();
        e.uq_oracle_corr = Some(pearson(&pick(&uq), &pick(&std)));
        images.push(("oracle_mean", 0, mean));
        images.push(("oracle_std", 0, std));
    }
    for s in 0..samples.rows() {
        images.push(("sample", s, samples.row(s).to_vec()));
    }
    e.images = images;
    Ok(e)
}

/// Per-angle evaluation of a fiber-bundle problem.
#[derive(Clone, Debug, Serialize)]
pub struct AngleEval {
    pub angle_deg: f64,
    pub within_0_1: f64,
    pub mean_distance: f64,
    #[serde(skip)]
    points: Vec<[f64; 4]>,
}

/// Everything `evaluate` wrote, for programmatic use.
#[derive(Clone, Debug, Default, Serialize)]
pub struct EvalSummary {
    pub items: usize,
    pub k: usize,
    pub means: Vec<(String, f64)>,
}

fn mean_of<T>(rows: &[T], f: impl Fn(&T) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(f).filter(|v| v.is_finite()).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluate the trained model on `test.bin` (images) or on a 6 degree sweep
/// of base angles (fiber bundles).
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalSummary> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out);
    let (problem, test) = load_set(&paths.test_set(), cfg)?;
    let model = load_model(cfg, &problem)?;
    let mut summary = EvalSummary { items: 0, k: cfg.k, means: Vec::new() };
    if let Some(bundle) = problem.bundle() {
        let angles = angle_sweep(6.0);
        let rows: Vec<AngleEval> = angles
            .par_iter()
            .enumerate()
            .map(|(a, &t)| -> Result<AngleEval> {
                let cond = angle_features(&[t]);
                let s = model.sample_posterior(&cond, cfg.k, &mut stream_rng(cfg.seed, STREAM_EVAL + a as u64))?;
                let points: Vec<[f64; 4]> = (0..s.rows())
                    .map(|j| {
                        let p = [s.at2(j, 0), s.at2(j, 1), s.at2(j, 2)];
                        [p[0], p[1], p[2], bundle.distance(p)]
                    })
                    .collect();
                let k = points.len() as f64;
                Ok(AngleEval {
                    angle_deg: (t.to_degrees() * 1e9).round() / 1e9,
                    within_0_1: points.iter().filter(|p| p[3] <= 0.1).count() as f64 / k,
                    mean_distance: points.iter().map(|p| p[3]).sum::<f64>() / k,
                    points,
                })
            })
            .collect::<Result<_>>()?;
        let mut eval = String::from("angle_deg,within_0_1,mean_distance\n");
        let mut pts = String::from("angle_deg,sample,x,y,z,distance\n");
        for r in &rows {
            writeln!(eval, "{},{},{}", r.angle_deg, r.within_0_1, r.mean_distance).unwrap();
            for (j, p) in r.points.iter().enumerate() {
                writeln!(pts, "{},{j},{},{},{},{}", r.angle_deg, p[0], p[1], p[2], p[3]).unwrap();
            }
        }
        write_atomic(&paths.eval(), eval.as_bytes())?;
        write_atomic(&paths.fiber_samples(), pts.as_bytes())?;
        summary.items = rows.len();
        summary.means.push(("within_0_1".into(), mean_of(&rows, |r| Some(r.within_0_1)).unwrap_or(f64::NAN)));
        summary.means.push(("mean_distance".into(), mean_of(&rows, |r| Some(r.mean_distance)).unwrap_or(f64::NAN)));
    } else {
        let rows: Vec<ItemEval> = (0..test.header.count)
            .into_par_iter()
            .map(|i| eval_item(cfg, &problem, &model, &test, i))
            .collect::<Result<_>>()?;
        let mut eval = format!("{EVAL_IMAGE_COLUMNS}\n");
        let mut images = String::from("item,kind,sample,pixel,value\n");
        for r in &rows {
            writeln!(
                eval,
                "{},{},{},{},{},{},{},{},{},{}",
                r.item,
                r.model_mmse_snr,
                r.model_mmse_ssim,
                fmt_opt(r.map_snr),
                fmt_opt(r.map_ssim),
                fmt_opt(r.map_vs_mmse_snr),
                r.mean_uq,
                fmt_opt(r.oracle_mmse_snr),
                fmt_opt(r.oracle_mmse_ssim),
                fmt_opt(r.uq_oracle_corr)
            )
            .unwrap();
            for (kind, s, img) in &r.images {
                for (p, v) in img.iter().enumerate() {
                    writeln!(images, "{},{kind},{s},{p},{v}", r.item).unwrap();
                }
            }
        }
        write_atomic(&paths.eval(), eval.as_bytes())?;
        write_atomic(&paths.eval_images(), images.as_bytes())?;
        summary.items = rows.len();
        let cols: [(&str, fn(&ItemEval) -> Option<f64>); 9] = [
            ("model_mmse_snr", |r| Some(r.model_mmse_snr)),
            ("model_mmse_ssim", |r| Some(r.model_mmse_ssim)),
            ("map_snr", |r| r.map_snr),
            ("map_ssim", |r| r.map_ssim),
            ("map_vs_mmse_snr", |r| r.map_vs_mmse_snr),
            ("mean_uq", |r| Some(r.mean_uq)),
            ("oracle_mmse_snr", |r| r.oracle_mmse_snr),
            ("oracle_mmse_ssim", |r| r.oracle_mmse_ssim),
            ("uq_oracle_corr", |r| r.uq_oracle_corr),
        ];
        for (name, f) in cols {
            if let Some(m) = mean_of(&rows, f) {
                summary.means.push((name.into(), m));
            }
        }
    }
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&paths.eval_summary(), format!("{text}\n").as_bytes())?;
    Ok(summary)
}

/// Surrogate MAP of every test item (`item,pixel,value`); needs a
/// fixed-volume bijective part.
pub fn cmd_map(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out);
    let (problem, test) = load_set(&paths.test_set(), cfg)?;
    let model = load_model(cfg, &problem)?;
    let cond = problem.conditioning(&test.y)?;
    let mut out = String::from("item,pixel,value\n");
    for i in 0..test.header.count {
        let map = model.surrogate_map(&row(&cond, i))?;
        for (p, v) in map.data().iter().enumerate() {
            writeln!(out, "{i},{p},{v}").unwrap();
        }
    }
    write_atomic(&paths.map(), out.as_bytes())?;
    Ok(paths.map())
}

/// Run the verification suites; the text summary lists every suite.
pub fn cmd_verify(opts: &VerifyOptions) -> (Vec<SuiteReport>, String) {
    let reports = verify::run_all(opts);
    let mut text = String::new();
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        writeln!(text, "{:<18} {:>6} checks {:>4} failures  {verdict}", r.name, r.checks, r.failures.len()).unwrap();
        for f in r.failures.iter().filter(|f| !f.is_empty()).take(5) {
            writeln!(text, "    {f}").unwrap();
        }
    }
    let passed = reports.iter().filter(|r| r.passed()).count();
    writeln!(text, "{passed}/{} suites passed", reports.len()).unwrap();
    (reports, text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    ActnormLogdetSign,
}

#[derive(Debug, Parser)]
#[command(name = "trumpetflow", version, about = "Conditional injective flows for small inverse problems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Problem: torus, mobius, grf-inpaint or traveltime (overrides the config file).
    #[arg(long, global = true)]
    pub problem: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Posterior samples per test item.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Small, fast preset.
    #[arg(long, global = true)]
    pub quick: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train and test sets.
    Generate,
    /// Train on the generated training set.
    Train {
        /// Continue from the run's checkpoint if present.
        #[arg(long)]
        resume: bool,
    },
    /// Posterior sampling, MMSE, UQ and MAP metrics on the test set.
    Evaluate,
    /// Surrogate MAP estimates of the test set.
    Map,
    /// Oracle and property suites.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

impl Cli {
    pub fn run_config(&self) -> Result<RunConfig> {
        let problem = self.problem.as_deref().map(str::parse::<ProblemKind>).transpose()?;
        let mut cfg = RunConfig::resolve(self.config.as_deref(), problem, self.quick)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parse arguments, run one command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_threads();
    if let Command::Verify { inject_fault } = &cli.command {
        let opts = VerifyOptions {
            seed: cli.seed.unwrap_or(0),
            quick: cli.quick,
            fault: match inject_fault {
                Some(FaultArg::ActnormLogdetSign) => Fault::ActnormLogdetSign,
                None => Fault::None,
            },
        };
        let (reports, text) = cmd_verify(&opts);
        print!("{text}");
        return if reports.iter().all(|r| r.passed()) { EXIT_OK } else { EXIT_VERIFY_FAILED };
    }
    let result = cli.run_config().and_then(|cfg| match &cli.command {
        Command::Generate => cmd_generate(&cfg).map(|p| format!("wrote {}", p.dir.display())),
        Command::Train { resume } => cmd_train(&cfg, *resume).map(|r| {
            format!("trained {} epochs, final loss {}, checkpoint {}", r.epochs, fmt_opt(r.final_loss), r.paths.checkpoint().display())
        }),
        Command::Evaluate => cmd_evaluate(&cfg).map(|s| {
            let mut t = format!("evaluated {} items with K = {}\n", s.items, s.k);
            for (name, v) in &s.means {
                writeln!(t, "  {name:<18} {v:.4}").unwrap();
            }
            t.trim_end().to_string()
        }),
        Command::Map => cmd_map(&cfg).map(|p| format!("wrote {}", p.display())),
        Command::Verify { .. } => unreachable!(),
    });
    match result {
        Ok(msg) => {
            println!("{msg}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
