//! Command-line front end: argument parsing, config resolution and the
//! five commands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::{Map, Value};
use thiserror::Error;

use gcaps::capsule::{pack_capsules, PackingMode};
use gcaps::checkpoint::Checkpoint;
use gcaps::mnist::{Dataset, Split};
use gcaps::model::{Arch, Model};
use gcaps::train::{
    evaluate, gradcheck_fixture, gradcheck_model, metrics_csv, TrainConfig, TrainError, Trainer, CONFIG_DOCS,
};
use gcaps::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable naming the MNIST directory when `--data-dir` is absent.
pub const DATA_DIR_ENV: &str = "GCAPS_MNIST_DIR";

/// Tolerance and step used by the `gradcheck` command.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}` (see --help-config)")]
    UnknownKey(String),
    #[error("config key `{key}`: {reason}")]
    TypeMismatch { key: String, reason: String },
    #[error("config file {0} does not exist")]
    MissingFile(PathBuf),
    #[error("config file {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error(transparent)]
    Invalid(#[from] TrainError),
}

fn defaults_map() -> Map<String, Value> {
    match serde_json::to_value(TrainConfig::default()).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config is a struct"),
    }
}

/// Reads a command-line override value: JSON literal if it parses, string
/// otherwise.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn insert_checked(map: &mut Map<String, Value>, key: &str, value: Value) -> Result<(), ConfigError> {
    if !map.contains_key(key) {
        return Err(ConfigError::UnknownKey(key.to_string()));
    }
    if value.is_object() || value.is_array() {
        return Err(ConfigError::TypeMismatch {
            key: key.into(),
            reason: "nested values are not allowed".into(),
        });
    }
    let mut alone = Map::new();
    alone.insert(key.to_string(), value.clone());
    serde_json::from_value::<TrainConfig>(Value::Object(alone)).map_err(|e| ConfigError::TypeMismatch {
        key: key.into(),
        reason: e.to_string(),
    })?;
    map.insert(key.to_string(), value);
    Ok(())
}

/// Defaults, then the flat JSON document at `path`, then `overrides` in
/// order. Unknown keys and mistyped values are rejected by name.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig, ConfigError> {
    let mut map = defaults_map();
    if let Some(path) = path {
        if !path.is_file() {
            return Err(ConfigError::MissingFile(path.to_path_buf()));
        }
        let parse_err = |reason: String| ConfigError::Parse {
            path: path.to_path_buf(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| parse_err(e.to_string()))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        let Value::Object(doc) = doc else {
            return Err(parse_err("expected a JSON object".into()));
        };
        for (k, v) in doc {
            insert_checked(&mut map, &k, v)?;
        }
    }
    for (k, v) in overrides {
        insert_checked(&mut map, k, override_value(v))?;
    }
    let cfg: TrainConfig = serde_json::from_value(Value::Object(map)).map_err(|e| ConfigError::TypeMismatch {
        key: "<config>".into(),
        reason: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::BadOverride(s.into()))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Listing of every config key with its default and meaning.
pub fn help_config() -> String {
    let defaults = defaults_map();
    let mut s = String::from("config keys (flat JSON object; defaults shown):\n");
    for (k, doc) in CONFIG_DOCS {
        s.push_str(&format!("  {:<22} {:<10} {}\n", k, defaults[*k].to_string(), doc));
    }
    s
}

pub fn command() -> Command {
    let mut cmd = Command::new("gcaps")
        .about("Capsule networks with trainable coupling coefficients")
        .subcommand_required(false)
        .arg(Arg::new("command").value_name("COMMAND").help("train | eval | gradcheck | params | pack-demo"))
        .arg(Arg::new("config").long("config").value_name("PATH").help("flat JSON config file"))
        .arg(Arg::new("data-dir").long("data-dir").value_name("DIR").help("directory holding the MNIST IDX files"))
        .arg(Arg::new("checkpoint").long("checkpoint").value_name("PATH").help("checkpoint to write (train) or read (eval)"))
        .arg(Arg::new("out").long("out").value_name("PATH").help("metrics CSV path (train)"))
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("config override; repeatable"),
        )
        .arg(
            Arg::new("help-config")
                .long("help-config")
                .action(ArgAction::SetTrue)
                .help("list every config key and exit"),
        );
    for (key, doc) in CONFIG_DOCS {
        cmd = cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").help(*doc).hide(true));
    }
    cmd
}

/// Config key overrides in precedence order: `--<key>` flags, then `--set`.
fn collect_overrides(m: &ArgMatches) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (key, _) in CONFIG_DOCS {
        if let Some(v) = m.get_one::<String>(key) {
            out.push((key.to_string(), v.clone()));
        }
    }
    if let Some(sets) = m.get_many::<String>("set") {
        for s in sets {
            out.push(parse_override(s)?);
        }
    }
    Ok(out)
}

fn exit_for(e: &TrainError) -> i32 {
    match e {
        TrainError::Config(_) => EXIT_USAGE,
        TrainError::Data(_) | TrainError::Checkpoint(_) => EXIT_DATA,
        TrainError::Numeric(_) | TrainError::Tensor(_) => EXIT_NUMERIC,
    }
}

struct Ctx<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

macro_rules! say {
    ($w:expr, $($t:tt)*) => { let _ = writeln!($w, $($t)*); };
}

/// Parses `args` (without the program name) and runs the command.
pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut ctx = Ctx { out, err };
    let matches = match command().no_binary_name(true).try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            say!(ctx.err, "{e}");
            return EXIT_USAGE;
        }
    };
    if matches.get_flag("help-config") {
        say!(ctx.out, "{}", help_config());
        return EXIT_OK;
    }
    let usage = command().render_usage();
    let Some(name) = matches.get_one::<String>("command").cloned() else {
        say!(ctx.err, "missing command\n{usage}");
        return EXIT_USAGE;
    };
    if !["train", "eval", "gradcheck", "params", "pack-demo"].contains(&name.as_str()) {
        say!(ctx.err, "unknown command `{name}`\n{usage}");
        return EXIT_USAGE;
    }
    let overrides = match collect_overrides(&matches) {
        Ok(o) => o,
        Err(e) => {
            say!(ctx.err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let config_path = matches.get_one::<String>("config").map(PathBuf::from);
    let config = if name == "eval" {
        None
    } else {
        match load_config(config_path.as_deref(), &overrides) {
            Ok(c) => Some(c),
            Err(e) => {
                say!(ctx.err, "error: {e}");
                return EXIT_USAGE;
            }
        }
    };
    let data_dir = matches
        .get_one::<String>("data-dir")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data/mnist"));
    let checkpoint = matches.get_one::<String>("checkpoint").map(PathBuf::from);
    let metrics = matches
        .get_one::<String>("out")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("metrics.csv"));

    let result = match name.as_str() {
        "train" => cmd_train(&mut ctx, config.expect("loaded"), &data_dir, checkpoint.as_deref(), &metrics),
        "eval" => cmd_eval(&mut ctx, &data_dir, checkpoint.as_deref(), &overrides),
        "gradcheck" => cmd_gradcheck(&mut ctx, config.expect("loaded"), &overrides),
        "params" => cmd_params(&mut ctx, config.expect("loaded")),
        _ => cmd_pack_demo(&mut ctx),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            say!(ctx.err, "error: {e}");
            exit_for(&e)
        }
    }
}

fn echo_config(ctx: &mut Ctx<'_>, cfg: &TrainConfig) {
    say!(ctx.out, "config: {}", cfg.to_json());
    say!(ctx.out, "seed: {}", cfg.seed);
}

fn load_split(dir: &Path, split: Split, limit: usize) -> Result<Dataset, TrainError> {
    Ok(Dataset::load(dir, split)?.head(limit))
}

fn cmd_train(
    ctx: &mut Ctx<'_>,
    cfg: TrainConfig,
    data_dir: &Path,
    checkpoint: Option<&Path>,
    metrics: &Path,
) -> Result<i32, TrainError> {
    echo_config(ctx, &cfg);
    let train = load_split(data_dir, Split::Train, cfg.train_limit)?;
    let test = load_split(data_dir, Split::Test, cfg.test_limit)?;
    say!(ctx.out, "data: {} train / {} test samples from {}", train.len(), test.len(), data_dir.display());
    let checkpoint = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| metrics.with_extension("ckpt"));
    let json = cfg.to_json();
    let mut trainer = Trainer::new(cfg)?;
    say!(ctx.out, "{}", metrics_header_line());
    let mut rows_written = Vec::new();
    let io_err = |p: &Path, e: std::io::Error| TrainError::Data(gcaps::mnist::IdxError::Io {
        path: p.to_path_buf(),
        source: e,
    });
    fs::write(metrics, metrics_csv(&[])).map_err(|e| io_err(metrics, e))?;
    let out = &mut *ctx.out;
    trainer.fit(&train, &test, |t, row| {
        rows_written.push(*row);
        let _ = writeln!(out, "{}", row.csv_line());
        fs::write(metrics, metrics_csv(&rows_written)).map_err(|e| io_err(metrics, e))?;
        Checkpoint::from_model(&t.model, json.clone(), t.epoch, &t.rng).save(&checkpoint)?;
        Ok(())
    })?;
    say!(ctx.out, "metrics: {}", metrics.display());
    say!(ctx.out, "checkpoint: {}", checkpoint.display());
    Ok(EXIT_OK)
}

fn metrics_header_line() -> &'static str {
    gcaps::train::MetricsRow::CSV_HEADER
}

fn cmd_eval(
    ctx: &mut Ctx<'_>,
    data_dir: &Path,
    checkpoint: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<i32, TrainError> {
    let Some(path) = checkpoint else {
        return Err(TrainError::Config("eval needs --checkpoint".into()));
    };
    let ck = Checkpoint::load(path)?;
    let mut cfg: TrainConfig = serde_json::from_str(&ck.config)
        .map_err(|e| TrainError::Config(format!("checkpoint config echo: {e}")))?;
    for (k, v) in overrides {
        match k.as_str() {
            "test_limit" | "batch_size" => {
                let mut m = match serde_json::to_value(&cfg).expect("serializes") {
                    Value::Object(m) => m,
                    _ => unreachable!(),
                };
                m.insert(k.clone(), override_value(v));
                cfg = serde_json::from_value(Value::Object(m)).map_err(|e| TrainError::Config(e.to_string()))?;
            }
            _ => {
                return Err(TrainError::Config(format!(
                    "eval takes its config from the checkpoint; only test_limit and batch_size can be overridden, not `{k}`"
                )))
            }
        }
    }
    echo_config(ctx, &cfg);
    let mut model = Model::<f32>::new(cfg.model_spec(), &mut ck.rng.restore())?;
    ck.apply_to(&mut model)?;
    let test = load_split(data_dir, Split::Test, cfg.test_limit)?;
    let err = evaluate(&model, &test, cfg.batch_size)?;
    say!(ctx.out, "checkpoint epoch: {}", ck.epoch);
    say!(ctx.out, "test error: {err:.2}% on {} samples", test.len());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(ctx: &mut Ctx<'_>, cfg: TrainConfig, overrides: &[(String, String)]) -> Result<i32, TrainError> {
    echo_config(ctx, &cfg);
    let arch_given = overrides.iter().any(|(k, _)| k == "arch") || cfg.arch != TrainConfig::default().arch;
    let archs = if arch_given {
        vec![cfg.arch]
    } else {
        vec![Arch::TinyFc, Arch::TinyConv, Arch::TinyMulti]
    };
    let mut failed = false;
    for arch in archs {
        let (model, x, y) = gradcheck_fixture(arch, cfg.seed)?;
        let report = gradcheck_model(&model, &x, &y, GRADCHECK_TOLERANCE, GRADCHECK_EPSILON)?;
        say!(ctx.out, "{}: max relative error {:.3e} (tolerance {:.0e})", arch.name(), report.max_error, report.tolerance);
        for (name, e) in &report.per_param {
            say!(ctx.out, "  {name:<22} {e:.3e}");
        }
        if !report.passed() {
            failed = true;
            say!(ctx.err, "{}: gradient check failed for {}", arch.name(), report.failures.join(", "));
        }
    }
    Ok(if failed { EXIT_NUMERIC } else { EXIT_OK })
}

fn cmd_params(ctx: &mut Ctx<'_>, cfg: TrainConfig) -> Result<i32, TrainError> {
    echo_config(ctx, &cfg);
    let spec = cfg.model_spec();
    let shapes = spec.parameter_shapes()?;
    // counting needs shapes only; skip drawing millions of initial values
    let mut model = Model::<f32> {
        spec,
        params: Vec::new(),
    };
    for (name, layer, group, shape) in shapes {
        model.params.push(gcaps::model::Parameter {
            name,
            layer,
            group,
            value: Tensor::zeros(&shape),
            grad: None,
            trainable: true,
        });
    }
    say!(ctx.out, "architecture: {}", cfg.arch.name());
    say!(ctx.out, "{}", model.count_parameters());
    Ok(EXIT_OK)
}

/// Shows where each capsule element comes from for a `(1, 4, 2, 2)` map
/// stack under both packing modes.
fn cmd_pack_demo(ctx: &mut Ctx<'_>) -> Result<i32, TrainError> {
    let shape = [1, 4, 2, 2];
    let maps = Tensor::from_fn(&shape, |i| i as f64);
    say!(ctx.out, "maps: B=1 C=4 H=2 W=2; element (c,h,w) has flat index c*4 + h*2 + w");
    for (mode, label) in [(PackingMode::Across, "across"), (PackingMode::Within, "within")] {
        let caps = pack_capsules(&maps, mode, 2)?;
        say!(ctx.out, "{label}: {} capsules of {}-D", caps.num_capsules(), caps.capsule_len());
        for n in 0..caps.num_capsules() {
            let src: Vec<String> = caps
                .capsule(0, n)
                .iter()
                .map(|&v| {
                    let i = v as usize;
                    format!("(c{},h{},w{})", i / 4, (i / 2) % 2, i % 2)
                })
                .collect();
            say!(ctx.out, "  capsule {n}: {}", src.join(" "));
        }
    }
    Ok(EXIT_OK)
}
