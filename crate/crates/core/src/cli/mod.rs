//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Arg, ArgMatches, Command};

use crate::bank::{
    load_bank, make_dog_bank, make_gabor_bank, make_random_bank, save_bank, Activation, Padding, Pool,
    RandomBankSpec,
};
use crate::checkpoint::{load_model, save_model, Checkpoint};
use crate::error::Error;
use crate::fsutil::write_atomic;
use crate::image::{load_image, save_image, tile, Image, ImageShape, Normalize};
use crate::julesz::{julesz_synthesize, AnnealSchedule, Ensemble, JuleszConfig, JuleszTarget, MatchMode};
use crate::learner::{
    init_layer, learn_with, ChainEstimator, ChainStart, LayerOptions, LearnConfig, RateSchedule, Termination,
};
use crate::model::{Learnable, NonStationaryFrame, StationaryFrame};
use crate::oracle::{exact_fit, exact_moments, FitOptions, OracleSpec, Reference};
use crate::sampler::{init_chains, run_chains, StartMode};
use config::{parse_config, KeySpec, RunConfig};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (formats: FBK1, FRM1)");

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

impl From<String> for CliError {
    fn from(msg: String) -> Self {
        CliError::Usage(msg)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

const LEARN_KEYS: &[KeySpec] = &[
    KeySpec::required("images", "training images: a directory, or a comma-separated list of files"),
    KeySpec::required("filters", "filter bank (FBK1)"),
    KeySpec::required("out", "output directory"),
    KeySpec::with_default("chains", "16", "number of parallel Langevin chains"),
    KeySpec::with_default("langevin-steps", "100", "Langevin steps per learning iteration"),
    KeySpec::with_default("iters", "100", "learning iterations"),
    KeySpec::with_default("step-size", "0.01", "Langevin step size"),
    KeySpec::with_default("gamma", "0.01", "base learning rate"),
    KeySpec::with_default("schedule", "constant", "rate schedule: constant, one-over-t or variance-scaled"),
    KeySpec::with_default("t0", "100", "decay horizon of the one-over-t and variance-scaled schedules"),
    KeySpec::with_default("sigma", "1", "standard deviation of the Gaussian reference"),
    KeySpec::with_default("start", "warm", "chain start: warm (persistent) or cold (noise every iteration)"),
    KeySpec::with_default("seed", "0", "master seed"),
    KeySpec::with_default("tolerance", "0", "stop once the max statistic gap drops below this (0: never)"),
    KeySpec::with_default("normalize", "centered", "pixel mapping: centered (v/255 - 0.5) or raw (v/255)"),
    KeySpec::with_default("snapshot-every", "0", "write synthesized PNGs every N iterations (0: final only)"),
];

const LAYER_KEYS: &[KeySpec] = &[
    KeySpec::with_default("num-filters", "10", "experts in the learned layer"),
    KeySpec::with_default("window", "7x7", "expert support on the base feature maps, HxW"),
    KeySpec::with_default("bias-quantile", "0.9", "quantile of bias-free responses used to set initial biases"),
    KeySpec::with_default("init-scale", "0.001", "initial weights are uniform in +-init-scale"),
];

const SAMPLE_KEYS: &[KeySpec] = &[
    KeySpec::required("model", "model checkpoint (FRM1)"),
    KeySpec::required("out", "output directory"),
    KeySpec::with_default("chains", "16", "number of chains"),
    KeySpec::with_default("langevin-steps", "1000", "Langevin steps"),
    KeySpec::with_default("step-size", "0.01", "Langevin step size"),
    KeySpec::with_default("start", "zero", "chain start: zero or noise"),
    KeySpec::with_default("seed", "0", "master seed"),
    KeySpec::with_default("normalize", "centered", "pixel mapping used for output: centered or raw"),
    KeySpec::with_default("cols", "0", "grid columns (0: square-ish)"),
];

const JULESZ_KEYS: &[KeySpec] = &[
    KeySpec::required("target", "target images: a directory, or a comma-separated list of files"),
    KeySpec::required("filters", "filter bank (FBK1)"),
    KeySpec::required("out", "output directory"),
    KeySpec::with_default("ensemble", "texture", "statistics: texture (pooled) or object (per position)"),
    KeySpec::with_default("mode", "langevin", "langevin (annealed noise) or descent"),
    KeySpec::with_default("step-size", "0.01", "step size"),
    KeySpec::with_default("t0", "1", "initial temperature"),
    KeySpec::with_default("decay", "0.95", "temperature decay per level"),
    KeySpec::with_default("floor", "0", "minimum temperature"),
    KeySpec::with_default("steps-per-level", "100", "steps at each temperature"),
    KeySpec::with_default("max-steps", "20000", "step limit"),
    KeySpec::with_default("tolerance", "0", "stop once the sum of squared discrepancies is at most this"),
    KeySpec::with_default("chains", "1", "number of synthesized images"),
    KeySpec::with_default("start", "noise", "initial images: zero or noise"),
    KeySpec::with_default("sigma", "1", "standard deviation of the initial noise"),
    KeySpec::with_default("size", "target", "output size HxW for texture statistics, or `target`"),
    KeySpec::with_default("seed", "0", "master seed"),
    KeySpec::with_default("normalize", "centered", "pixel mapping: centered or raw"),
];

const GABOR_KEYS: &[KeySpec] = &[
    KeySpec::required("out", "output bank file (FBK1)"),
    KeySpec::with_default("scales", "1,2", "comma-separated scales"),
    KeySpec::with_default("orientations", "4", "orientations per scale"),
];

const DOG_KEYS: &[KeySpec] = &[
    KeySpec::required("out", "output bank file (FBK1)"),
    KeySpec::with_default("sizes", "1,2,4", "comma-separated center sizes"),
];

const RANDOM_KEYS: &[KeySpec] = &[
    KeySpec::required("out", "output bank file (FBK1)"),
    KeySpec::with_default("input-channels", "1", "image channels"),
    KeySpec::with_default("layers", "8x3", "comma-separated FILTERSxSIDE per layer, bottom first"),
    KeySpec::with_default("activation", "relu", "identity, relu or abs"),
    KeySpec::with_default("padding", "zero", "valid, zero or circular"),
    KeySpec::with_default("pool", "none", "max pool after each layer: none or WINDOW:STRIDE"),
    KeySpec::with_default("seed", "0", "seed"),
];

const ORACLE_KEYS: &[KeySpec] = &[KeySpec::required("spec", "oracle instance file (key = value)")];

const ORACLE_SPEC_KEYS: &[KeySpec] = &[
    KeySpec::required("filters", "filter bank (FBK1), relative to the spec file"),
    KeySpec::with_default("height", "3", "image height"),
    KeySpec::with_default("width", "3", "image width"),
    KeySpec::with_default("levels", "0,1", "comma-separated pixel levels"),
    KeySpec::with_default("reference", "uniform", "uniform or gaussian"),
    KeySpec::with_default("model", "nonstationary", "nonstationary or stationary"),
    KeySpec::with_default("sigma", "1", "standard deviation of the Gaussian reference"),
    KeySpec::with_default("weights", "", "comma-separated weights (empty: zeros)"),
    KeySpec::with_default("observed", "", "images to fit, relative to the spec file (empty: no fit)"),
    KeySpec::with_default("normalize", "raw", "pixel mapping of observed images"),
    KeySpec::with_default("tolerance", "1e-8", "fit tolerance on the max statistic gap"),
    KeySpec::with_default("max-iterations", "500", "fit iteration limit"),
];

fn table_command(name: &'static str, about: &'static str, keys: &[&'static [KeySpec]]) -> Command {
    let mut cmd = Command::new(name).about(about);
    for spec in keys.iter().flat_map(|k| k.iter()) {
        let help = match spec.default {
            Some("") | None => spec.help.to_string(),
            Some(d) => format!("{} [default: {d}]", spec.help),
        };
        cmd = cmd.arg(Arg::new(spec.name).long(spec.name).value_name("VALUE").help(help));
    }
    cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value file; flags given on the command line win"),
    )
}

fn command() -> Command {
    Command::new("frame")
        .version(VERSION)
        .about("Learn, sample and match energy-based image models built on filter banks")
        .arg_required_else_help(true)
        .subcommand_required(true)
        .arg(
            Arg::new("threads")
                .long("threads")
                .global(true)
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .help("worker threads (default: hardware count; 1 is bitwise reproducible)"),
        )
        .subcommand(table_command("learn-object", "Learn a per-position model from aligned images", &[LEARN_KEYS]))
        .subcommand(table_command("learn-texture", "Learn a stationary model from texture images", &[LEARN_KEYS]))
        .subcommand(table_command(
            "learn-layer",
            "Learn a new layer of experts on top of a filter bank",
            &[LEARN_KEYS, LAYER_KEYS],
        ))
        .subcommand(table_command("sample", "Draw Langevin samples from a saved model", &[SAMPLE_KEYS]))
        .subcommand(table_command("julesz", "Synthesize images matching target filter statistics", &[JULESZ_KEYS]))
        .subcommand(
            Command::new("bank")
                .about("Generate a filter bank")
                .subcommand_required(true)
                .arg_required_else_help(true)
                .subcommand(table_command("gabor", "Gabor pairs (cosine, sine) at each scale and orientation", &[GABOR_KEYS]))
                .subcommand(table_command("dog", "Difference-of-Gaussians filters", &[DOG_KEYS]))
                .subcommand(table_command("random", "Randomly initialized multi-layer bank", &[RANDOM_KEYS])),
        )
        .subcommand(table_command("oracle", "Exact quantities on a tiny quantized grid", &[ORACLE_KEYS]).hide(true))
}

/// Runs the command line `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let threads = matches.get_one::<usize>("threads").copied().unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {threads} worker threads: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(&matches)) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Divergence(_)) {
                EXIT_DIVERGED
            } else {
                EXIT_DATA
            }
        }
    }
}

fn dispatch(matches: &ArgMatches) -> CliResult<i32> {
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    match name {
        "learn-object" => learn_command(Kind::Object, &resolve(sub, "learn-object", &[LEARN_KEYS])?),
        "learn-texture" => learn_command(Kind::Texture, &resolve(sub, "learn-texture", &[LEARN_KEYS])?),
        "learn-layer" => learn_command(Kind::Layer, &resolve(sub, "learn-layer", &[LEARN_KEYS, LAYER_KEYS])?),
        "sample" => sample_command(&resolve(sub, "sample", &[SAMPLE_KEYS])?),
        "julesz" => julesz_command(&resolve(sub, "julesz", &[JULESZ_KEYS])?),
        "bank" => {
            let (kind, bank_sub) = sub.subcommand().expect("a bank kind is required");
            let keys: &'static [KeySpec] = match kind {
                "gabor" => GABOR_KEYS,
                "dog" => DOG_KEYS,
                _ => RANDOM_KEYS,
            };
            let name = match kind {
                "gabor" => "bank gabor",
                "dog" => "bank dog",
                _ => "bank random",
            };
            bank_command(&resolve(bank_sub, name, &[keys])?)
        }
        "oracle" => oracle_command(&resolve(sub, "oracle", &[ORACLE_KEYS])?),
        other => Err(CliError::Usage(format!("unknown command {other}"))),
    }
}

fn resolve(sub: &ArgMatches, name: &'static str, tables: &[&'static [KeySpec]]) -> CliResult<RunConfig> {
    let keys: Vec<KeySpec> = tables.iter().flat_map(|t| t.iter().copied()).collect();
    let file = match sub.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_config(&text).map_err(|e| format!("{path}: {e}"))?
        }
        None => Vec::new(),
    };
    let flags: Vec<(&'static str, String)> = keys
        .iter()
        .filter_map(|k| sub.get_one::<String>(k.name).map(|v| (k.name, v.clone())))
        .collect();
    Ok(RunConfig::merge(name, &keys, &file, &flags)?)
}

fn parse_choice<T: Copy>(cfg: &RunConfig, key: &str, choices: &[(&str, T)]) -> CliResult<T> {
    let raw = cfg.get(key);
    choices.iter().find(|(n, _)| *n == raw).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = choices.iter().map(|(n, _)| *n).collect();
        CliError::Usage(format!("invalid value `{raw}` for `{key}`: expected one of {}", names.join(", ")))
    })
}

fn parse_normalize(cfg: &RunConfig) -> CliResult<Normalize> {
    parse_choice(cfg, "normalize", &[("centered", Normalize::Centered), ("raw", Normalize::Raw)])
}

fn parse_pair(cfg: &RunConfig, key: &str) -> CliResult<(usize, usize)> {
    let raw = cfg.get(key);
    let bad = || CliError::Usage(format!("invalid value `{raw}` for `{key}`: expected HxW or N"));
    match raw.split_once('x') {
        Some((h, w)) => Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?)),
        None => {
            let n = raw.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

fn positive_sigma_sq(cfg: &RunConfig) -> CliResult<f64> {
    let sigma: f64 = cfg.parse("sigma")?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CliError::Usage(format!("`sigma` must be positive, got {sigma}")));
    }
    Ok(sigma * sigma)
}

/// Paths from a directory (its `.png` and `.pgm` files in name order) or a
/// comma-separated list.
fn image_paths(spec: &str, base: &Path) -> CliResult<Vec<PathBuf>> {
    let entries: Vec<PathBuf> = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| base.join(s))
        .collect();
    let paths = match entries.as_slice() {
        [dir] if dir.is_dir() => {
            let mut found = Vec::new();
            for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
                let path = entry.map_err(|e| Error::io(dir, e))?.path();
                let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
                if matches!(ext.as_deref(), Some("png" | "pgm")) {
                    found.push(path);
                }
            }
            found.sort();
            found
        }
        _ => entries,
    };
    if paths.is_empty() {
        return Err(CliError::Data(Error::InvalidArgument(format!("no images found in `{spec}`"))));
    }
    Ok(paths)
}

fn load_images(spec: &str, base: &Path, normalize: Normalize) -> CliResult<Vec<Image>> {
    let images = image_paths(spec, base)?
        .iter()
        .map(|p| load_image(p, normalize))
        .collect::<Result<Vec<_>, _>>()?;
    let shape = images[0].shape();
    if images.iter().any(|im| im.shape() != shape) {
        return Err(Error::Geometry(format!("images in `{spec}` differ in size or channels")).into());
    }
    Ok(images)
}

fn prepare_out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = PathBuf::from(cfg.get("out"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_atomic(&out.join("resolved.cfg"), cfg.render().as_bytes())?;
    Ok(out)
}

fn grid_cols(n: usize, requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        (n as f64).sqrt().ceil() as usize
    }
}

fn save_grid(images: &[Image], cols: usize, path: &Path) -> CliResult<()> {
    save_image(&tile(images, grid_cols(images.len(), cols))?, path)?;
    Ok(())
}

fn learn_config(cfg: &RunConfig) -> CliResult<LearnConfig> {
    let config = LearnConfig {
        gamma0: cfg.parse("gamma")?,
        schedule: parse_choice(
            cfg,
            "schedule",
            &[
                ("constant", RateSchedule::Constant),
                ("one-over-t", RateSchedule::OneOverT),
                ("variance-scaled", RateSchedule::VarianceScaled),
            ],
        )?,
        t0: cfg.parse("t0")?,
        iterations: cfg.parse("iters")?,
        langevin_steps: cfg.parse("langevin-steps")?,
        chains: cfg.parse("chains")?,
        epsilon: cfg.parse("step-size")?,
        start: parse_choice(cfg, "start", &[("warm", ChainStart::Warm), ("cold", ChainStart::Cold)])?,
        master_seed: cfg.parse("seed")?,
        tolerance: cfg.parse("tolerance")?,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Object,
    Texture,
    Layer,
}

fn learn_command(kind: Kind, cfg: &RunConfig) -> CliResult<i32> {
    let config = learn_config(cfg)?;
    let sigma_sq = positive_sigma_sq(cfg)?;
    let normalize = parse_normalize(cfg)?;
    let snapshot_every: usize = cfg.parse("snapshot-every")?;
    let layer_options = match kind {
        Kind::Layer => Some((
            cfg.parse::<usize>("num-filters")?,
            parse_pair(cfg, "window")?,
            LayerOptions {
                sigma_sq,
                bias_quantile: cfg.parse("bias-quantile")?,
                init_scale: cfg.parse("init-scale")?,
            },
        )),
        _ => None,
    };
    let images = load_images(cfg.get("images"), Path::new(""), normalize)?;
    let bank = Arc::new(load_bank(Path::new(cfg.get("filters")))?);
    let shape = images[0].shape();
    let out = prepare_out_dir(cfg)?;
    let run = Run { images: &images, config: &config, sigma_sq, out: &out, snapshot_every };
    match (kind, layer_options) {
        (Kind::Object, _) => run.fit(NonStationaryFrame::zeros(bank, shape, sigma_sq)?),
        (Kind::Texture, _) => run.fit(StationaryFrame::zeros(bank, shape, sigma_sq)?),
        (Kind::Layer, Some((filters, window, options))) => {
            if filters == 0 {
                return Err(CliError::Usage("`num-filters` must be positive".into()));
            }
            run.fit(init_layer(bank, &images, filters, window, config.master_seed, &options)?)
        }
        (Kind::Layer, None) => unreachable!("layer options are parsed for learn-layer"),
    }
}

struct Run<'a> {
    images: &'a [Image],
    config: &'a LearnConfig,
    sigma_sq: f64,
    out: &'a Path,
    snapshot_every: usize,
}

impl Run<'_> {
    fn fit<M: Learnable + Into<Checkpoint>>(&self, initial: M) -> CliResult<i32> {
        let offset = self.images[0].mean_offset();
        let mut estimator = ChainEstimator::new(self.images[0].shape(), self.config, self.sigma_sq, offset)?;
        let every = self.snapshot_every;
        let fit = learn_with(initial, self.images, self.config, &mut estimator, |row, est| {
            let done = row.iteration + 1;
            if every > 0 && done % every == 0 {
                let path = self.out.join(format!("synth_{done:05}.png"));
                save_image(&tile(est.chains().images(), grid_cols(est.chains().len(), 0))?, &path)?;
            }
            Ok(())
        })?;
        let mut csv = String::from("iteration,max_abs_diff,mean_energy,gamma_t\n");
        for row in &fit.log {
            let _ = writeln!(csv, "{},{},{},{}", row.iteration, row.max_abs_diff, row.mean_energy, row.gamma_t);
        }
        write_atomic(&self.out.join("log.csv"), csv.as_bytes())?;
        save_model(&fit.model.into(), &self.out.join("model.frm"))?;
        let chains = estimator.into_chains();
        if chains.images().iter().all(Image::is_finite) {
            save_grid(chains.images(), 0, &self.out.join("synth.png"))?;
        }
        match fit.termination {
            Termination::Diverged { iteration, reason } => {
                eprintln!("error: diverged at iteration {iteration}: {reason}; last good model saved");
                Ok(EXIT_DIVERGED)
            }
            _ => Ok(EXIT_OK),
        }
    }
}

fn parse_start_mode(cfg: &RunConfig) -> CliResult<StartMode> {
    parse_choice(cfg, "start", &[("zero", StartMode::Zero), ("noise", StartMode::Noise)])
}

fn sample_command(cfg: &RunConfig) -> CliResult<i32> {
    let chains: usize = cfg.parse("chains")?;
    let steps: usize = cfg.parse("langevin-steps")?;
    let epsilon: f64 = cfg.parse("step-size")?;
    let start = parse_start_mode(cfg)?;
    let seed: u64 = cfg.parse("seed")?;
    let offset = parse_normalize(cfg)?.mean_offset();
    let cols: usize = cfg.parse("cols")?;
    if chains == 0 {
        return Err(CliError::Usage("`chains` must be positive".into()));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(CliError::Usage("`step-size` must be nonnegative".into()));
    }
    let checkpoint = load_model(Path::new(cfg.get("model")))?;
    let out = prepare_out_dir(cfg)?;
    let model = checkpoint.model();
    let state = init_chains(start, chains, model.image_shape(), model.sigma_sq(), seed)?.with_mean_offset(offset);
    let state = run_chains(state, model, epsilon, steps)?;
    save_grid(state.images(), cols, &out.join("samples.png"))?;
    Ok(EXIT_OK)
}

fn julesz_command(cfg: &RunConfig) -> CliResult<i32> {
    let ensemble = parse_choice(cfg, "ensemble", &[("texture", Ensemble::Texture), ("object", Ensemble::Object)])?;
    let mode = parse_choice(cfg, "mode", &[("langevin", MatchMode::Langevin), ("descent", MatchMode::Descent)])?;
    let config = JuleszConfig {
        schedule: AnnealSchedule {
            t0: cfg.parse("t0")?,
            decay: cfg.parse("decay")?,
            floor: cfg.parse("floor")?,
            steps_per_level: cfg.parse("steps-per-level")?,
        },
        epsilon: cfg.parse("step-size")?,
        mode,
        max_steps: cfg.parse("max-steps")?,
        tolerance: cfg.parse("tolerance")?,
    };
    config.schedule.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let chains: usize = cfg.parse("chains")?;
    let start = parse_start_mode(cfg)?;
    let sigma_sq = positive_sigma_sq(cfg)?;
    let seed: u64 = cfg.parse("seed")?;
    let normalize = parse_normalize(cfg)?;
    let size = match cfg.get("size") {
        "target" => None,
        _ => Some(parse_pair(cfg, "size")?),
    };
    if chains == 0 {
        return Err(CliError::Usage("`chains` must be positive".into()));
    }
    let images = load_images(cfg.get("target"), Path::new(""), normalize)?;
    let bank = load_bank(Path::new(cfg.get("filters")))?;
    let target = JuleszTarget::from_images(ensemble, &bank, &images)?;
    let t = images[0].shape();
    let shape = match size {
        Some((h, w)) => ImageShape::new(h, w, t.channels),
        None => t,
    };
    let out = prepare_out_dir(cfg)?;
    let state = init_chains(start, chains, shape, sigma_sq, seed)?.with_mean_offset(normalize.mean_offset());
    let outcome = julesz_synthesize(&target, &bank, state, &config)?;
    let mut csv = String::from("step,temperature,sum_delta_sq\n");
    for row in &outcome.log {
        let _ = writeln!(csv, "{},{},{}", row.step, row.temperature, row.sum_delta_sq);
    }
    write_atomic(&out.join("julesz.csv"), csv.as_bytes())?;
    save_grid(outcome.chains.images(), 0, &out.join("synth.png"))?;
    Ok(EXIT_OK)
}

fn bank_command(cfg: &RunConfig) -> CliResult<i32> {
    let bank = match cfg.command() {
        "bank gabor" => make_gabor_bank(&cfg.parse_list::<f64>("scales")?, cfg.parse("orientations")?),
        "bank dog" => make_dog_bank(&cfg.parse_list::<f64>("sizes")?),
        _ => {
            let layers = cfg
                .get("layers")
                .split(',')
                .map(|entry| {
                    let bad = || format!("invalid entry `{entry}` in `layers`: expected FILTERSxSIDE");
                    let (f, s) = entry.trim().split_once('x').ok_or_else(bad)?;
                    Ok((f.parse().map_err(|_| bad())?, s.parse().map_err(|_| bad())?))
                })
                .collect::<Result<Vec<_>, String>>()?;
            let pool = match cfg.get("pool") {
                "none" => None,
                raw => {
                    let bad = || format!("invalid value `{raw}` for `pool`: expected none or WINDOW:STRIDE");
                    let (w, s) = raw.split_once(':').ok_or_else(bad)?;
                    Some(Pool { window: w.parse().map_err(|_| bad())?, stride: s.parse().map_err(|_| bad())? })
                }
            };
            make_random_bank(&RandomBankSpec {
                input_channels: cfg.parse("input-channels")?,
                layers,
                activation: parse_choice(
                    cfg,
                    "activation",
                    &[("identity", Activation::Identity), ("relu", Activation::Relu), ("abs", Activation::Abs)],
                )?,
                padding: parse_choice(
                    cfg,
                    "padding",
                    &[("valid", Padding::Valid), ("zero", Padding::Zero), ("circular", Padding::Circular)],
                )?,
                pool,
                seed: cfg.parse("seed")?,
            })
        }
    };
    let bank = bank.map_err(|e| CliError::Usage(e.to_string()))?;
    save_bank(&bank, Path::new(cfg.get("out")))?;
    Ok(EXIT_OK)
}

fn oracle_command(cfg: &RunConfig) -> CliResult<i32> {
    let spec_path = PathBuf::from(cfg.get("spec"));
    let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let pairs = parse_config(&text).map_err(|e| format!("{}: {e}", spec_path.display()))?;
    let spec_cfg = RunConfig::merge("oracle spec", ORACLE_SPEC_KEYS, &pairs, &[])?;
    let base = spec_path.parent().unwrap_or(Path::new("")).to_path_buf();
    let reference =
        parse_choice(&spec_cfg, "reference", &[("uniform", Reference::Uniform), ("gaussian", Reference::GaussianRestricted)])?;
    let spec = OracleSpec::new(
        spec_cfg.parse("height")?,
        spec_cfg.parse("width")?,
        spec_cfg.parse_list("levels")?,
        reference,
    )?;
    let sigma_sq = positive_sigma_sq(&spec_cfg)?;
    let bank = Arc::new(load_bank(&base.join(spec_cfg.get("filters")))?);
    let weights: Vec<f64> = spec_cfg.parse_list("weights")?;
    let observed = match spec_cfg.get("observed") {
        "" => Vec::new(),
        list => load_images(list, &base, parse_normalize(&spec_cfg)?)?,
    };
    let options = FitOptions {
        tolerance: spec_cfg.parse("tolerance")?,
        max_iterations: spec_cfg.parse("max-iterations")?,
        ..FitOptions::default()
    };
    let shape = spec.shape();
    let report = match spec_cfg.get("model") {
        "nonstationary" => oracle_report(&spec, NonStationaryFrame::zeros(bank, shape, sigma_sq)?, weights, &observed, &options)?,
        "stationary" => oracle_report(&spec, StationaryFrame::zeros(bank, shape, sigma_sq)?, weights, &observed, &options)?,
        other => {
            return Err(CliError::Usage(format!(
                "invalid value `{other}` for `model`: expected nonstationary or stationary"
            )))
        }
    };
    print!("{report}");
    Ok(EXIT_OK)
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn oracle_report<M: Learnable>(
    spec: &OracleSpec,
    zeros: M,
    weights: Vec<f64>,
    observed: &[Image],
    options: &FitOptions,
) -> CliResult<String> {
    let model = if weights.is_empty() { zeros } else { zeros.with_params(weights)? };
    let moments = exact_moments(spec, &model)?;
    let mut out = String::new();
    let _ = writeln!(out, "states = {}", spec.state_count());
    let _ = writeln!(out, "log_z = {}", moments.log_z);
    let _ = writeln!(out, "mean_energy = {}", moments.mean_energy);
    let _ = writeln!(out, "expectation = {}", join(&moments.mean));
    if !observed.is_empty() {
        let fit = exact_fit(spec, model, observed, options)?;
        let _ = writeln!(out, "fitted_weights = {}", join(fit.model.params()));
        let _ = writeln!(out, "gap = {}", fit.gap);
        let _ = writeln!(out, "iterations = {}", fit.iterations);
        let _ = writeln!(out, "converged = {}", fit.converged);
    }
    Ok(out)
}
