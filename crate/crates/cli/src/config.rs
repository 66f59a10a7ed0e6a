//! Command-line surface and layered configuration.
//!
//! Values are merged as JSON documents: built-in defaults, then the `--config`
//! file, then `STYLEFORGE_DEVICE`, then explicit flags. Validation errors name
//! the key and the layer that supplied the offending value.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use styleforge::arch::{ArchKind, ArchitectureSpec, Mst, TransferKind};
use styleforge::train::TrainConfig;

pub const DEVICE_ENV: &str = "STYLEFORGE_DEVICE";

#[derive(Debug, Parser)]
#[command(name = "styleforge", version, about = "Single-pass style transfer with embedded AdaIN/WCT transfer modules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Compute device (only `cpu` is available).
    #[arg(long, global = true)]
    pub device: Option<String>,
    /// VGG-19 weight archive (`.manifest.json`/`.bin` base path).
    #[arg(long, global = true, value_name = "ARCHIVE")]
    pub weights: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stylize a content image with a style image.
    Stylize(StylizeArgs),
    /// Train a decoder on a directory of images.
    Train(TrainArgs),
    /// Compute a quality metric and print it as JSON.
    Eval(EvalArgs),
    /// Time single-pass stylization across resolutions.
    Bench(BenchArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Stylize(_) => "stylize",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Bench(_) => "bench",
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// vanilla | artnet | photonet
    #[arg(long)]
    pub arch: Option<String>,
    /// none | adain | wct
    #[arg(long)]
    pub transfer: Option<String>,
    /// Transfer placement: none | 3 | 5 | inf
    #[arg(long)]
    pub mst: Option<String>,
    /// Checkpoint base path (or its .meta.json file).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Run with freshly initialized decoder weights when no checkpoint is given.
    #[arg(long)]
    pub allow_untrained: bool,
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub content: Option<PathBuf>,
    #[arg(long)]
    pub style: Option<PathBuf>,
    /// Blend between content (0) and fully transferred (1) features.
    #[arg(long)]
    pub beta: Option<f32>,
    /// Write one output per β in `start:end:step`.
    #[arg(long, value_name = "A:B:STEP")]
    pub beta_sweep: Option<String>,
    /// Output the transfer-free reconstruction of the content image.
    #[arg(long)]
    pub reconstruct: bool,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory of training images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON-lines loss log (defaults to `<checkpoint>.log.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// recon | tv | frechet
    #[arg(long)]
    pub metric: Option<String>,
    /// Images to evaluate (directory).
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Reference set for the Fréchet distance (directory).
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated WxH list.
    #[arg(long)]
    pub resolutions: Option<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Comma-separated architectures to time.
    #[arg(long)]
    pub archs: Option<String>,
    /// Transfer kind used by the timed models.
    #[arg(long)]
    pub transfer: Option<String>,
    /// json | table
    #[arg(long)]
    pub format: Option<String>,
}

/// The merged configuration document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub device: String,
    pub weights: Option<PathBuf>,
    pub arch: String,
    pub transfer: String,
    /// Defaults to the architecture's own placement when unset.
    pub mst: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub allow_untrained: bool,
    pub content: Option<PathBuf>,
    pub style: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub beta: f32,
    pub beta_sweep: Option<String>,
    pub reconstruct: bool,
    pub data: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub train: TrainConfig,
    pub metric: String,
    pub images: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub resolutions: String,
    pub runs: usize,
    pub bench_archs: String,
    pub format: String,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            weights: None,
            arch: "artnet".into(),
            transfer: "wct".into(),
            mst: None,
            checkpoint: None,
            allow_untrained: false,
            content: None,
            style: None,
            output: None,
            beta: 1.0,
            beta_sweep: None,
            reconstruct: false,
            data: None,
            log: None,
            train: TrainConfig::default(),
            metric: "recon".into(),
            images: None,
            reference: None,
            resolutions: "256x128,512x256,768x384,1024x512".into(),
            runs: 5,
            bench_archs: "artnet,photonet".into(),
            format: "table".into(),
        }
    }
}

/// Configuration error: always a usage error (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Everything a command needs, fully validated.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub command: &'static str,
    pub config: CliConfig,
    pub spec: ArchitectureSpec,
    pub betas: Option<Vec<f32>>,
    pub resolutions: Vec<(usize, usize)>,
    pub bench_specs: Vec<ArchitectureSpec>,
}

impl Resolved {
    pub fn to_json(&self) -> Value {
        json!({
            "command": self.command,
            "config": self.config,
            "spec": self.spec,
        })
    }
}

struct Layers {
    file: Value,
    env: Value,
    flags: Value,
    file_path: Option<PathBuf>,
}

impl Layers {
    fn lookup<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
        key.split('.').try_fold(v, |v, k| v.get(k))
    }

    /// Name of the layer that supplied `key` in the merged document.
    fn source(&self, key: &str) -> String {
        if Self::lookup(&self.flags, key).is_some() {
            format!("command-line flag --{}", key.rsplit('.').next().unwrap_or(key).replace('_', "-"))
        } else if Self::lookup(&self.env, key).is_some() {
            format!("environment variable {DEVICE_ENV}")
        } else if Self::lookup(&self.file, key).is_some() {
            format!(
                "config file {}",
                self.file_path.as_deref().map(Path::display).map(|d| d.to_string()).unwrap_or_default()
            )
        } else {
            "defaults".into()
        }
    }

    fn error(&self, key: &str, msg: impl fmt::Display) -> ConfigError {
        ConfigError(format!("{msg} (key `{key}`, from {})", self.source(key)))
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn put<T: Serialize>(map: &mut Map<String, Value>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        map.insert(key.to_string(), serde_json::to_value(v).expect("plain value"));
    }
}

fn flag_layer(cli: &Cli) -> Value {
    let mut m = Map::new();
    put(&mut m, "seed", cli.seed);
    put(&mut m, "device", cli.device.clone());
    put(&mut m, "weights", cli.weights.clone());
    let model = |m: &mut Map<String, Value>, a: &ModelArgs| {
        put(m, "arch", a.arch.clone());
        put(m, "transfer", a.transfer.clone());
        put(m, "mst", a.mst.clone());
        put(m, "checkpoint", a.checkpoint.clone());
        put(m, "allow_untrained", a.allow_untrained.then_some(true));
    };
    match &cli.command {
        Command::Stylize(a) => {
            model(&mut m, &a.model);
            put(&mut m, "content", a.content.clone());
            put(&mut m, "style", a.style.clone());
            put(&mut m, "beta", a.beta);
            put(&mut m, "beta_sweep", a.beta_sweep.clone());
            put(&mut m, "reconstruct", a.reconstruct.then_some(true));
            put(&mut m, "output", a.output.clone());
        }
        Command::Train(a) => {
            model(&mut m, &a.model);
            put(&mut m, "data", a.data.clone());
            put(&mut m, "log", a.log.clone());
            let mut t = Map::new();
            put(&mut t, "alpha", a.alpha);
            put(&mut t, "learning_rate", a.learning_rate);
            put(&mut t, "epochs", a.epochs);
            put(&mut t, "batch_size", a.batch_size);
            put(&mut t, "crop_size", a.crop_size);
            put(&mut t, "max_steps", a.max_steps);
            if !t.is_empty() {
                m.insert("train".into(), Value::Object(t));
            }
        }
        Command::Eval(a) => {
            model(&mut m, &a.model);
            put(&mut m, "metric", a.metric.clone());
            put(&mut m, "images", a.images.clone());
            put(&mut m, "reference", a.reference.clone());
        }
        Command::Bench(a) => {
            put(&mut m, "resolutions", a.resolutions.clone());
            put(&mut m, "runs", a.runs);
            put(&mut m, "bench_archs", a.archs.clone());
            put(&mut m, "transfer", a.transfer.clone());
            put(&mut m, "format", a.format.clone());
        }
    }
    Value::Object(m)
}

pub fn parse_arch(s: &str) -> Option<ArchKind> {
    match s.to_ascii_lowercase().as_str() {
        "vanilla" | "vanilla_ae" | "vanillaae" => Some(ArchKind::VanillaAe),
        "artnet" => Some(ArchKind::ArtNet),
        "photonet" => Some(ArchKind::PhotoNet),
        _ => None,
    }
}

fn parse_transfer(s: &str) -> Option<TransferKind> {
    match s.to_ascii_lowercase().as_str() {
        "none" => Some(TransferKind::None),
        "adain" => Some(TransferKind::Adain),
        "wct" => Some(TransferKind::Wct),
        _ => None,
    }
}

fn parse_mst(s: &str) -> Option<Mst> {
    match s.to_ascii_lowercase().as_str() {
        "none" | "1" => Some(Mst::None),
        "3" => Some(Mst::Mst3),
        "5" => Some(Mst::Mst5),
        "inf" => Some(Mst::MstInf),
        _ => None,
    }
}

/// `a:b:step` → a, a + step, … up to b (inclusive, with rounding slack).
pub fn parse_sweep(s: &str) -> Result<Vec<f32>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("beta sweep must be `start:end:step`, got `{s}`"))?;
    let [a, b, step] = nums[..] else {
        return Err(format!("beta sweep must be `start:end:step`, got `{s}`"));
    };
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
        return Err("beta sweep bounds must satisfy 0 <= start <= end <= 1".into());
    }
    if !(step > 0.0) {
        return Err("beta sweep step must be positive".into());
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| (a + i as f64 * step).min(1.0) as f32).collect())
}

pub fn parse_resolutions(s: &str) -> Result<Vec<(usize, usize)>, String> {
    s.split(',')
        .map(|r| {
            let (w, h) = r
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| format!("resolution `{r}` is not WxH"))?;
            let w: usize = w.parse().map_err(|_| format!("bad width in `{r}`"))?;
            let h: usize = h.parse().map_err(|_| format!("bad height in `{r}`"))?;
            if w < 16 || h < 16 {
                return Err(format!("resolution `{r}` is below 16x16"));
            }
            Ok((w, h))
        })
        .collect()
}

fn spec_for(kind: ArchKind, transfer: TransferKind, mst: Option<Mst>) -> ArchitectureSpec {
    let spec = ArchitectureSpec::for_kind(kind).with_transfer(transfer);
    match mst {
        Some(m) => spec.with_mst(m),
        None => spec,
    }
}

/// Merge all layers and validate the result for `cli.command`.
pub fn resolve(cli: &Cli, env_device: Option<String>) -> Result<Resolved, ConfigError> {
    let file = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError(format!("cannot read config file {}: {e}", p.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| ConfigError(format!("config file {} is not valid JSON: {e}", p.display())))?;
            if !v.is_object() {
                return Err(ConfigError(format!("config file {} must hold a JSON object", p.display())));
            }
            v
        }
        None => json!({}),
    };
    let env = match env_device {
        Some(d) if !d.is_empty() => json!({ "device": d }),
        _ => json!({}),
    };
    let layers = Layers {
        file,
        env,
        flags: flag_layer(cli),
        file_path: cli.config.clone(),
    };

    let mut doc = serde_json::to_value(CliConfig::default()).expect("defaults serialize");
    merge(&mut doc, &layers.file);
    merge(&mut doc, &layers.env);
    merge(&mut doc, &layers.flags);
    let mut config: CliConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let key = e.path().to_string();
        layers.error(&key, e.inner())
    })?;
    config.train.seed = config.seed;

    if config.device != "cpu" {
        return Err(layers.error("device", format!("unsupported device `{}`; only `cpu` is available", config.device)));
    }
    if !(0.0..=1.0).contains(&config.beta) {
        return Err(layers.error("beta", format!("beta must be in [0,1], got {}", config.beta)));
    }
    let kind = parse_arch(&config.arch)
        .ok_or_else(|| layers.error("arch", format!("unknown architecture `{}` (vanilla|artnet|photonet)", config.arch)))?;
    let transfer = parse_transfer(&config.transfer)
        .ok_or_else(|| layers.error("transfer", format!("unknown transfer `{}` (none|adain|wct)", config.transfer)))?;
    let mst = match &config.mst {
        Some(m) => Some(parse_mst(m).ok_or_else(|| layers.error("mst", format!("unknown placement `{m}` (none|3|5|inf)")))?),
        None => None,
    };
    let spec = spec_for(kind, transfer, mst);
    let command = cli.command.name();
    if command != "bench" {
        spec.validate().map_err(|e| layers.error("arch", e))?;
    }

    let betas = match &config.beta_sweep {
        Some(s) => Some(parse_sweep(s).map_err(|e| layers.error("beta_sweep", e))?),
        None => None,
    };
    let require = |key: &str, v: &Option<PathBuf>| -> Result<(), ConfigError> {
        match v {
            Some(_) => Ok(()),
            None => Err(ConfigError(format!(
                "missing required key `{key}` (flag --{})",
                key.replace('_', "-")
            ))),
        }
    };
    let mut resolutions = Vec::new();
    let mut bench_specs = Vec::new();
    match command {
        "stylize" => {
            require("content", &config.content)?;
            require("output", &config.output)?;
            if !config.reconstruct {
                require("style", &config.style)?;
            }
        }
        "train" => {
            require("data", &config.data)?;
            config.train.validate().map_err(|e| {
                let msg = e.to_string();
                let key = msg.split(": ").nth(1).unwrap_or("").to_string();
                layers.error(&format!("train.{key}"), msg)
            })?;
        }
        "eval" => {
            if !matches!(config.metric.as_str(), "recon" | "tv" | "frechet") {
                return Err(layers.error("metric", format!("unknown metric `{}` (recon|tv|frechet)", config.metric)));
            }
            require("images", &config.images)?;
            if config.metric == "frechet" {
                require("reference", &config.reference)?;
            }
        }
        "bench" => {
            resolutions = parse_resolutions(&config.resolutions).map_err(|e| layers.error("resolutions", e))?;
            if config.runs < 5 {
                return Err(layers.error("runs", format!("runs must be at least 5, got {}", config.runs)));
            }
            if !matches!(config.format.as_str(), "json" | "table") {
                return Err(layers.error("format", format!("unknown format `{}` (json|table)", config.format)));
            }
            for name in config.bench_archs.split(',') {
                let kind = parse_arch(name.trim())
                    .ok_or_else(|| layers.error("bench_archs", format!("unknown architecture `{name}`")))?;
                let s = spec_for(kind, transfer, None);
                s.validate().map_err(|e| layers.error("bench_archs", e))?;
                bench_specs.push(s);
            }
        }
        _ => unreachable!("clap restricts subcommands"),
    }
    Ok(Resolved {
        command,
        config,
        spec,
        betas,
        resolutions,
        bench_specs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_args(args: &[&str], env: Option<&str>) -> Result<Resolved, ConfigError> {
        let cli = Cli::try_parse_from(std::iter::once("styleforge").chain(args.iter().copied())).unwrap();
        resolve(&cli, env.map(String::from))
    }

    const STYLIZE: [&str; 7] = ["stylize", "--content", "c.png", "--style", "s.png", "-o", "out.png"];

    #[test]
    fn flags_resolve_into_config() {
        let mut args = STYLIZE.to_vec();
        args.extend(["--arch", "artnet", "--transfer", "wct", "--beta", "0.8"]);
        let r = resolve_args(&args, None).unwrap();
        assert_eq!(r.config.beta, 0.8);
        assert_eq!(r.spec, ArchitectureSpec::artnet());
        assert_eq!(r.to_json()["config"]["beta"].as_f64().unwrap() as f32, 0.8);
    }

    #[test]
    fn flags_beat_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"beta": 0.3, "arch": "photonet", "train": {"epochs": 2}}"#).unwrap();
        let p = path.to_str().unwrap();
        let mut args = STYLIZE.to_vec();
        args.extend(["--config", p]);
        let r = resolve_args(&args, None).unwrap();
        assert_eq!(r.config.beta, 0.3);
        assert_eq!(r.spec.kind, ArchKind::PhotoNet);
        assert_eq!(r.config.train.epochs, 2);
        assert_eq!(r.config.train.learning_rate, 1e-4);
        args.extend(["--beta", "0.9"]);
        assert_eq!(resolve_args(&args, None).unwrap().config.beta, 0.9);
    }

    #[test]
    fn env_device_sits_between_file_and_flags() {
        let err = resolve_args(&STYLIZE, Some("cuda")).unwrap_err().to_string();
        assert!(err.contains("STYLEFORGE_DEVICE") && err.contains("device"), "{err}");
        let mut args = STYLIZE.to_vec();
        args.extend(["--device", "cpu"]);
        assert!(resolve_args(&args, Some("cuda")).is_ok());
    }

    #[test]
    fn invalid_values_name_key_and_layer() {
        let mut args = STYLIZE.to_vec();
        args.extend(["--beta", "1.5"]);
        let err = resolve_args(&args, None).unwrap_err().to_string();
        assert!(err.contains("beta must be in [0,1]") && err.contains("--beta"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"train": {"alpha": "high"}}"#).unwrap();
        let mut args = STYLIZE.to_vec();
        args.extend(["--config", path.to_str().unwrap()]);
        let err = resolve_args(&args, None).unwrap_err().to_string();
        assert!(err.contains("train.alpha") && err.contains("config file"), "{err}");

        let mut args = STYLIZE.to_vec();
        args.extend(["--arch", "artnet", "--mst", "inf"]);
        assert!(resolve_args(&args, None).unwrap_err().to_string().contains("MSTInf"));
        let err = resolve_args(&["stylize", "--content", "c.png", "-o", "o.png"], None).unwrap_err();
        assert!(err.to_string().contains("`style`"));
    }

    #[test]
    fn sweeps_and_resolutions() {
        assert_eq!(parse_sweep("0:1:0.2").unwrap().len(), 6);
        assert_eq!(parse_sweep("0.5:0.5:0.1").unwrap(), vec![0.5]);
        assert!(parse_sweep("0:1:0").is_err());
        assert!(parse_sweep("0:2:0.5").is_err());
        assert_eq!(parse_resolutions("256x128, 1024x512").unwrap(), vec![(256, 128), (1024, 512)]);
        assert!(parse_resolutions("256").is_err());
    }
}
