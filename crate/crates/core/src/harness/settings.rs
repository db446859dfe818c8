use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::cipher::{pseudo_words, CipherSpec, CorpusSizes, WordOrder};
use super::experiment::{ExperimentConfig, RegimeSpec, RowSpec};
use super::HarnessError;

/// Everything a run reads from a settings file or the command line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Settings {
    pub experiment: ExperimentConfig,
    pub cipher: CipherSpec,
    pub sizes: CorpusSizes,
}

/// Keys that do not depend on the regime list.
pub const KEYS: &[&str] = &[
    "rows",
    "alpha",
    "pair_keying",
    "noise_density",
    "mean_span_length",
    "sentinel_count",
    "num_layers",
    "d_model",
    "num_heads",
    "d_ff",
    "max_len",
    "pretrain_steps",
    "pretrain_batch_tokens",
    "pretrain_learning_rate",
    "pretrain_checkpoint_every",
    "finetune_batch_tokens",
    "finetune_learning_rate",
    "regimes",
    "metric",
    "runs",
    "seed",
    "moved_letters",
    "word_order",
    "vocab_words",
    "min_words",
    "max_words",
    "mono_per_lang",
    "pairs_per_direction",
    "task_train_per_direction",
    "task_valid_per_direction",
    "task_test_per_direction",
];

/// Per-regime keys, prefixed with the regime name (`few_shot_steps`).
pub const REGIME_KEYS: &[&str] = &["examples", "steps", "checkpoint_every"];

/// Parses flat `key = value` text. `#` starts a comment line.
pub fn parse_settings(text: &str) -> Result<Vec<(String, String)>, HarnessError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::Format {
            path: "<settings>".into(),
            line: i + 1,
            msg: format!("expected key = value, found {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_settings_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>, HarnessError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_settings(&text).map_err(|e| match e {
        HarnessError::Format { line, msg, .. } => HarnessError::Format {
            path: path.to_path_buf(),
            line,
            msg,
        },
        e => e,
    })
}

fn regime_key(name: &str) -> String {
    name.replace('-', "_")
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
    v.parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {v:?}")))
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

impl Settings {
    /// Applies file entries, then command-line entries, so the command line
    /// wins. `regimes` is applied first within each layer so per-regime keys
    /// refer to the final regime list.
    pub fn resolve<'a>(
        layers: impl IntoIterator<Item = &'a [(String, String)]>,
    ) -> Result<Self, HarnessError> {
        let mut s = Settings::default();
        for layer in layers {
            for (k, v) in layer.iter().filter(|(k, _)| k == "regimes") {
                s.set(k, v)?;
            }
            for (k, v) in layer.iter().filter(|(k, _)| k != "regimes") {
                s.set(k, v)?;
            }
        }
        s.experiment.validate()?;
        s.cipher.validate()?;
        Ok(s)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), HarnessError> {
        let e = &mut self.experiment;
        match key {
            "rows" => {
                e.rows = list(v)
                    .map(str::parse)
                    .collect::<Result<Vec<RowSpec>, _>>()?
            }
            "alpha" => e.alpha = num(key, v)?,
            "pair_keying" => e.pair_keying = v.parse()?,
            "noise_density" => e.noise.noise_density = num(key, v)?,
            "mean_span_length" => e.noise.mean_span_length = num(key, v)?,
            "sentinel_count" => e.sentinel_count = num(key, v)?,
            "num_layers" => e.model.num_layers = num(key, v)?,
            "d_model" => e.model.d_model = num(key, v)?,
            "num_heads" => e.model.num_heads = num(key, v)?,
            "d_ff" => e.model.d_ff = num(key, v)?,
            "max_len" => e.model.max_len = num(key, v)?,
            "pretrain_steps" => e.pretrain.steps = num(key, v)?,
            "pretrain_batch_tokens" => e.pretrain.batch_tokens = num(key, v)?,
            "pretrain_learning_rate" => e.pretrain.learning_rate = num(key, v)?,
            "pretrain_checkpoint_every" => e.pretrain.checkpoint_every = num(key, v)?,
            "finetune_batch_tokens" => e.finetune_batch_tokens = num(key, v)?,
            "finetune_learning_rate" => e.finetune_learning_rate = num(key, v)?,
            "regimes" => e.regimes = list(v).map(RegimeSpec::by_name).collect::<Result<_, _>>()?,
            "metric" => e.metric = v.to_string(),
            "runs" => e.runs = num(key, v)?,
            "seed" => e.seed = num(key, v)?,
            "moved_letters" => self.cipher.moved_letters = num(key, v)?,
            "word_order" => {
                let order: WordOrder = v.parse()?;
                for d in &mut self.cipher.derived {
                    d.order = order;
                }
            }
            "vocab_words" => self.cipher.words = pseudo_words(num(key, v)?, 7),
            "min_words" => self.cipher.min_words = num(key, v)?,
            "max_words" => self.cipher.max_words = num(key, v)?,
            "mono_per_lang" => self.sizes.mono_per_lang = num(key, v)?,
            "pairs_per_direction" => self.sizes.pairs_per_direction = num(key, v)?,
            "task_train_per_direction" => self.sizes.task_train_per_direction = num(key, v)?,
            "task_valid_per_direction" => self.sizes.task_valid_per_direction = num(key, v)?,
            "task_test_per_direction" => self.sizes.task_test_per_direction = num(key, v)?,
            _ => return self.set_regime(key, v),
        }
        Ok(())
    }

    fn set_regime(&mut self, key: &str, v: &str) -> Result<(), HarnessError> {
        let unknown = || HarnessError::Config(format!("unknown setting {key:?}"));
        let regime = self
            .experiment
            .regimes
            .iter_mut()
            .find(|r| key.starts_with(&format!("{}_", regime_key(&r.name))))
            .ok_or_else(unknown)?;
        let field = &key[regime_key(&regime.name).len() + 1..];
        match field {
            "examples" => regime.examples = if v == "all" { None } else { Some(num(key, v)?) },
            "steps" => regime.steps = num(key, v)?,
            "checkpoint_every" => regime.checkpoint_every = num(key, v)?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Every key the current regime list accepts, with its current value.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let e = &self.experiment;
        let join = |v: Vec<String>| v.join(",");
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("rows", join(e.rows.iter().map(RowSpec::label).collect()));
        put("alpha", e.alpha.to_string());
        put("pair_keying", e.pair_keying.to_string());
        put("noise_density", e.noise.noise_density.to_string());
        put("mean_span_length", e.noise.mean_span_length.to_string());
        put("sentinel_count", e.sentinel_count.to_string());
        put("num_layers", e.model.num_layers.to_string());
        put("d_model", e.model.d_model.to_string());
        put("num_heads", e.model.num_heads.to_string());
        put("d_ff", e.model.d_ff.to_string());
        put("max_len", e.model.max_len.to_string());
        put("pretrain_steps", e.pretrain.steps.to_string());
        put("pretrain_batch_tokens", e.pretrain.batch_tokens.to_string());
        put(
            "pretrain_learning_rate",
            e.pretrain.learning_rate.to_string(),
        );
        put(
            "pretrain_checkpoint_every",
            e.pretrain.checkpoint_every.to_string(),
        );
        put("finetune_batch_tokens", e.finetune_batch_tokens.to_string());
        put(
            "finetune_learning_rate",
            e.finetune_learning_rate.to_string(),
        );
        put(
            "regimes",
            join(e.regimes.iter().map(|r| r.name.clone()).collect()),
        );
        put("metric", e.metric.clone());
        put("runs", e.runs.to_string());
        put("seed", e.seed.to_string());
        let c = &self.cipher;
        put("moved_letters", c.moved_letters.to_string());
        if let Some(d) = c.derived.first() {
            put("word_order", d.order.to_string());
        }
        put("vocab_words", c.words.len().to_string());
        put("min_words", c.min_words.to_string());
        put("max_words", c.max_words.to_string());
        let z = &self.sizes;
        put("mono_per_lang", z.mono_per_lang.to_string());
        put("pairs_per_direction", z.pairs_per_direction.to_string());
        put(
            "task_train_per_direction",
            z.task_train_per_direction.to_string(),
        );
        put(
            "task_valid_per_direction",
            z.task_valid_per_direction.to_string(),
        );
        put(
            "task_test_per_direction",
            z.task_test_per_direction.to_string(),
        );
        for r in &e.regimes {
            let p = regime_key(&r.name);
            put(
                &format!("{p}_examples"),
                r.examples.map_or("all".into(), |n| n.to_string()),
            );
            put(&format!("{p}_steps"), r.steps.to_string());
            put(
                &format!("{p}_checkpoint_every"),
                r.checkpoint_every.to_string(),
            );
        }
        m
    }

    /// The resolved settings in file form; feeding it back reproduces them.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
