//! Flat key=value run configuration: file entries first, flag overrides
//! on top, every unknown key rejected by name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use carft_core::rollout::RewardMode;
use carft_core::task::Split;
use carft_core::trainer::{SignalMode, TrainConfig};

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub n: usize,
    pub split: Split,
    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
    pub metrics_in: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            n: 512,
            split: Split::Train,
            dataset: None,
            test_dataset: None,
            checkpoint_in: None,
            checkpoint_out: None,
            metrics_out: None,
            metrics_in: None,
            out: None,
        }
    }
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are
/// ignored. Later occurrences of a key win.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key=value, got {raw:?}", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses trailing CLI overrides in `--key value`, `--key=value`, or bare
/// `key=value` form.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg.strip_prefix("--").unwrap_or(arg);
        if let Some((k, v)) = body.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else if arg.starts_with("--") {
            let v = it
                .next()
                .ok_or_else(|| anyhow!("flag --{body} is missing a value"))?;
            out.push((body.to_string(), v.clone()));
        } else {
            bail!("cannot parse override {arg:?}; expected --key value or key=value");
        }
    }
    Ok(out)
}

fn signal_mode_name(m: SignalMode) -> &'static str {
    match m {
        SignalMode::Positive => "positive",
        SignalMode::Negative => "negative",
        SignalMode::None => "none",
    }
}

fn reward_mode_name(m: RewardMode) -> &'static str {
    match m {
        RewardMode::FixedPartial => "fixed-partial",
        RewardMode::EmbeddingPartial => "embedding-partial",
    }
}

struct Resolver {
    map: BTreeMap<String, String>,
}

impl Resolver {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}")),
        }
    }

    fn take_path(&mut self, key: &str) -> Option<PathBuf> {
        self.take(key).map(PathBuf::from)
    }
}

/// Applies file entries then flag overrides onto the defaults. The `mode`
/// shorthand (carft-positive | carft-negative | reft) sets both the signal
/// and reward modes; explicit `signal_mode` / `reward_mode` keys win.
pub fn resolve(entries: Vec<(String, String)>) -> Result<RunConfig> {
    let mut map = BTreeMap::new();
    for (k, v) in entries {
        map.insert(k, v);
    }
    let mut r = Resolver { map };
    let mut cfg = RunConfig::default();

    if let Some(mode) = r.take("mode") {
        let (signal, reward) = match mode.as_str() {
            "carft-positive" => (SignalMode::Positive, RewardMode::EmbeddingPartial),
            "carft-negative" => (SignalMode::Negative, RewardMode::EmbeddingPartial),
            "reft" => (SignalMode::None, RewardMode::FixedPartial),
            other => bail!(
                "mode: expected carft-positive, carft-negative, or reft, got {other:?}"
            ),
        };
        cfg.train.signal_mode = signal;
        cfg.train.reward_mode = reward;
    }
    if let Some(v) = r.take("signal_mode") {
        cfg.train.signal_mode = match v.as_str() {
            "positive" => SignalMode::Positive,
            "negative" => SignalMode::Negative,
            "none" => SignalMode::None,
            // Accepted as the baseline shorthand.
            "reft" => {
                cfg.train.reward_mode = RewardMode::FixedPartial;
                SignalMode::None
            }
            other => bail!(
                "signal_mode: expected positive, negative, none, or reft, got {other:?}"
            ),
        };
    }
    if let Some(v) = r.take("reward_mode") {
        cfg.train.reward_mode = match v.as_str() {
            "fixed-partial" => RewardMode::FixedPartial,
            "embedding-partial" => RewardMode::EmbeddingPartial,
            other => bail!(
                "reward_mode: expected fixed-partial or embedding-partial, got {other:?}"
            ),
        };
    }

    let t = &mut cfg.train;
    macro_rules! pull {
        ($field:expr, $key:literal) => {
            if let Some(v) = r.take_parsed($key)? {
                $field = v;
            }
        };
    }
    pull!(t.kl_beta, "kl_beta");
    pull!(t.gamma, "gamma");
    pull!(t.lambda, "lambda");
    pull!(t.alpha, "alpha");
    pull!(t.epsilon, "epsilon");
    pull!(t.tau, "tau");
    pull!(t.contrast_coef, "contrast_coef");
    pull!(t.updates_per_step, "updates_per_step");
    pull!(t.rl_steps, "rl_steps");
    pull!(t.batch_size, "batch_size");
    pull!(t.sft_epochs, "sft_epochs");
    pull!(t.sft_lr, "sft_lr");
    pull!(t.rl_lr, "rl_lr");
    pull!(t.adam_beta1, "adam_beta1");
    pull!(t.adam_beta2, "adam_beta2");
    pull!(t.adam_eps, "adam_eps");
    pull!(t.weight_decay, "weight_decay");
    pull!(t.temperature, "temperature");
    pull!(t.max_new_tokens, "max_new_tokens");
    pull!(t.eval_interval, "eval_interval");
    pull!(t.checkpoint_interval, "checkpoint_interval");
    pull!(t.seed, "seed");
    pull!(t.model.d_model, "d_model");
    pull!(t.model.n_layers, "n_layers");
    pull!(t.model.n_heads, "n_heads");
    pull!(t.model.d_ff, "d_ff");
    pull!(t.model.max_seq_len, "max_seq_len");
    pull!(t.model.d_proj, "d_proj");

    pull!(cfg.n, "n");
    if let Some(v) = r.take("split") {
        cfg.split = match v.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => bail!("split: expected train or test, got {other:?}"),
        };
    }
    cfg.dataset = r.take_path("dataset");
    cfg.test_dataset = r.take_path("test_dataset");
    cfg.checkpoint_in = r.take_path("checkpoint_in");
    cfg.checkpoint_out = r.take_path("checkpoint_out");
    cfg.metrics_out = r.take_path("metrics_out");
    cfg.metrics_in = r.take_path("metrics_in");
    cfg.out = r.take_path("out");

    if let Some((key, _)) = r.map.into_iter().next() {
        bail!("unknown config key {key:?}");
    }
    cfg.train
        .validate()
        .map_err(|e| anyhow!(e.to_string()))?;
    if cfg.n == 0 {
        bail!("n: must be positive");
    }
    Ok(cfg)
}

/// Loads the config file (when given) and applies the flag overrides.
pub fn load(config_path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut entries = Vec::new();
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("config file {}", path.display()))?;
        entries.extend(parse_kv_text(&text)?);
    }
    entries.extend(parse_overrides(overrides)?);
    resolve(entries)
}

/// The fully resolved configuration as key=value entries; feeding these
/// back in reproduces the run bit-for-bit.
pub fn resolved_entries(cfg: &RunConfig) -> BTreeMap<String, String> {
    let t = &cfg.train;
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("kl_beta", t.kl_beta.to_string());
    put("gamma", t.gamma.to_string());
    put("lambda", t.lambda.to_string());
    put("alpha", t.alpha.to_string());
    put("epsilon", t.epsilon.to_string());
    put("tau", t.tau.to_string());
    put("contrast_coef", t.contrast_coef.to_string());
    put("updates_per_step", t.updates_per_step.to_string());
    put("rl_steps", t.rl_steps.to_string());
    put("batch_size", t.batch_size.to_string());
    put("signal_mode", signal_mode_name(t.signal_mode).to_string());
    put("reward_mode", reward_mode_name(t.reward_mode).to_string());
    put("sft_epochs", t.sft_epochs.to_string());
    put("sft_lr", t.sft_lr.to_string());
    put("rl_lr", t.rl_lr.to_string());
    put("adam_beta1", t.adam_beta1.to_string());
    put("adam_beta2", t.adam_beta2.to_string());
    put("adam_eps", t.adam_eps.to_string());
    put("weight_decay", t.weight_decay.to_string());
    put("temperature", t.temperature.to_string());
    put("max_new_tokens", t.max_new_tokens.to_string());
    put("eval_interval", t.eval_interval.to_string());
    put("checkpoint_interval", t.checkpoint_interval.to_string());
    put("seed", t.seed.to_string());
    put("d_model", t.model.d_model.to_string());
    put("n_layers", t.model.n_layers.to_string());
    put("n_heads", t.model.n_heads.to_string());
    put("d_ff", t.model.d_ff.to_string());
    put("max_seq_len", t.model.max_seq_len.to_string());
    put("d_proj", t.model.d_proj.to_string());
    put("n", cfg.n.to_string());
    put(
        "split",
        match cfg.split {
            Split::Train => "train",
            Split::Test => "test",
        }
        .to_string(),
    );
    for (k, v) in [
        ("dataset", &cfg.dataset),
        ("test_dataset", &cfg.test_dataset),
        ("checkpoint_in", &cfg.checkpoint_in),
        ("checkpoint_out", &cfg.checkpoint_out),
        ("metrics_out", &cfg.metrics_out),
        ("metrics_in", &cfg.metrics_in),
        ("out", &cfg.out),
    ] {
        if let Some(p) = v {
            m.insert(k.to_string(), p.display().to_string());
        }
    }
    m
}

/// Renders the resolved entries as reusable config-file text.
pub fn echo_text(cfg: &RunConfig) -> String {
    let mut s = String::new();
    for (k, v) in resolved_entries(cfg) {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}
