//! Run configuration: one TOML file, environment overrides, and the
//! generated reference page.

use std::path::{Path, PathBuf};

use protokd::augment::AugmentPolicy;
use protokd::data::{Modality, SplitSpec, SyntheticSpec};
use protokd::encoder::EncoderConfig;
use protokd::trainer::{LossSet, Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Prefix of environment variables that override config keys. Nested keys
/// are joined with `__`, e.g. `PROTOKD_TRAIN__EPOCHS=5`.
pub const ENV_PREFIX: &str = "PROTOKD_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Directory with one subdirectory of images per class.
    Images {
        root: PathBuf,
    },
    /// Pseudo-image container file.
    Pseudo {
        path: PathBuf,
    },
    Synthetic(SyntheticSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSource {
    pub fn modality(&self) -> Modality {
        match self {
            DatasetSource::Pseudo { .. } => Modality::PseudoImage,
            _ => Modality::Image,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            DatasetSource::Images { root } => format!("images:{}", root.display()),
            DatasetSource::Pseudo { path } => format!("pseudo:{}", path.display()),
            DatasetSource::Synthetic(s) => format!(
                "synthetic:classes={},per_class={},variance={},size={},seed={}",
                s.classes, s.per_class, s.intra_class_variance, s.image_size, s.seed
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Methods compared by `benchmark`, in column order.
    pub methods: Vec<Method>,
    /// Run the loss-combination table instead of the method comparison.
    pub ablation: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            methods: Method::ALL.to_vec(),
            ablation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub trials: usize,
    pub jobs: usize,
    pub dataset: DatasetSource,
    pub split: SplitSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Defaults to the modality's standard policy when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentPolicy>,
    pub benchmark: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs"),
            trials: 10,
            jobs: 1,
            dataset: DatasetSource::default(),
            split: SplitSpec::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            augment: None,
            benchmark: BenchmarkConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(config_err("trials must be >= 1"));
        }
        if self.jobs == 0 {
            return Err(config_err("jobs must be >= 1"));
        }
        self.split.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.policy().validate_for(self.dataset.modality())?;
        if self.benchmark.methods.is_empty() {
            return Err(config_err(
                "benchmark.methods must name at least one method",
            ));
        }
        let want_channels = match self.dataset.modality() {
            Modality::Image => 3,
            Modality::PseudoImage => 1,
        };
        if self.encoder.in_channels != want_channels {
            return Err(config_err(format!(
                "encoder.in_channels = {} but {:?} data has {want_channels} channel(s)",
                self.encoder.in_channels,
                self.dataset.modality()
            )));
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
            if s.image_size != self.encoder.input_size {
                return Err(config_err(format!(
                    "dataset.synthetic.image_size = {} differs from encoder.input_size = {}",
                    s.image_size, self.encoder.input_size
                )));
            }
        }
        Ok(())
    }

    pub fn policy(&self) -> AugmentPolicy {
        match (&self.augment, self.dataset.modality()) {
            (Some(p), _) => p.clone(),
            (None, Modality::Image) => AugmentPolicy::microscopy(),
            (None, Modality::PseudoImage) => AugmentPolicy::pseudo_image(),
        }
    }

    /// Fills defaults that depend on other fields and makes paths absolute so
    /// the snapshot reproduces the run from any working directory.
    pub fn resolve(mut self, base: &Path) -> Result<Self> {
        let cwd = std::env::current_dir().map_err(config_err)?;
        let abs = |p: &Path, base: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        match &mut self.dataset {
            DatasetSource::Images { root } => *root = abs(root, base),
            DatasetSource::Pseudo { path } => *path = abs(path, base),
            DatasetSource::Synthetic(_) => {}
        }
        self.out_dir = abs(&self.out_dir, &cwd);
        if self.augment.is_none() {
            self.augment = Some(self.policy());
        }
        Ok(self)
    }

    /// Applies `--method`: loss subsets only make sense for protokd.
    pub fn set_method(&mut self, method: Method) {
        self.train.method = method;
        if method != Method::Protokd {
            self.train.losses = None;
        }
    }

    /// Sets every seed a command consumes.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.split.seed = seed;
        if let DatasetSource::Synthetic(s) = &mut self.dataset {
            s.seed = seed;
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(
    table: &mut toml::Table,
    var: &str,
    path: &[String],
    value: toml::Value,
) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut cur = table;
    for key in parents {
        let entry = cur
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("{var}: `{key}` is not a table")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Loads the config at `path` (defaults when `None`), then applies
/// `PROTOKD_*` overrides from `env`. Unknown keys are rejected by name.
pub fn load(
    path: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<RunConfig> {
    let text = match path {
        Some(p) => {
            std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => String::new(),
    };
    let mut overrides: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    overrides.sort();
    let parsed: RunConfig = if overrides.is_empty() {
        toml::from_str(&text).map_err(config_err)?
    } else {
        let mut table: toml::Table = text.parse().map_err(config_err)?;
        for (var, raw) in &overrides {
            let path: Vec<String> = var[ENV_PREFIX.len()..]
                .split("__")
                .map(str::to_lowercase)
                .collect();
            if path.iter().any(String::is_empty) {
                return Err(config_err(format!("{var}: malformed override name")));
            }
            apply_override(&mut table, var, &path, parse_env_value(raw))?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| config_err(format!("after environment overrides: {e}")))?
    };
    let base = path
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let base = if base.as_os_str().is_empty() {
        std::env::current_dir().map_err(config_err)?
    } else {
        base
    };
    parsed.resolve(&base)
}

/// Key documentation for the reference page, in page order.
const KEY_DOCS: &[(&str, &str)] = &[
    ("out_dir", "Directory receiving every artifact of the run. Relative paths resolve against the working directory."),
    ("trials", "Paired trials per method for `benchmark`."),
    ("jobs", "Worker threads for `benchmark`; 1 keeps trials sequential."),
    ("dataset.synthetic.classes", "Number of synthetic classes (>= 2)."),
    ("dataset.synthetic.per_class", "Items per class before imbalance is applied."),
    ("dataset.synthetic.intra_class_variance", "Jitter of shape, texture and colour around each class template; 0 makes a class pixel-identical, 1 is the hardest setting."),
    ("dataset.synthetic.image_size", "Rendered side length; must equal `encoder.input_size`."),
    ("dataset.synthetic.seed", "Generator seed."),
    ("dataset.synthetic.imbalance", "Linear skew of class sizes in [0, 1); 0 gives equal classes."),
    ("dataset.synthetic.min_per_class", "Floor on class size under imbalance."),
    ("dataset.images.root", "Alternative source: directory with one subdirectory of images per class. Relative to the config file."),
    ("dataset.pseudo.path", "Alternative source: pseudo-image container file. Relative to the config file."),
    ("split.train_per_class", "Labelled training samples per class (1 to 5)."),
    ("split.val_per_class", "Validation samples per class used for early stopping; the remainder is the test set."),
    ("split.seed", "Split seed for `train`; `benchmark` derives one per trial."),
    ("encoder.depth", "Residual network depth; depth - 4 must be divisible by 6."),
    ("encoder.width_factor", "Channel multiplier of the residual stages."),
    ("encoder.dropout_rate", "Dropout between the two convolutions of each block."),
    ("encoder.embed_dim", "Embedding size produced by the final projection."),
    ("encoder.input_size", "Square input side; image folders are resized to it."),
    ("encoder.in_channels", "3 for colour images, 1 for pseudo-images."),
    ("encoder.norm_groups", "Groups of the normalisation layers; must divide 16."),
    ("train.method", "`supervised`, `protonet` or `protokd`."),
    ("train.losses", "Optional `{ matching, distill, discriminative }` subset for `protokd`; all three when absent."),
    ("train.epochs", "Maximum epochs."),
    ("train.phase1_iters", "Matching-loss episodes per epoch."),
    ("train.phase2_iters", "Distillation and discriminative episodes per epoch; also the step count of `supervised`."),
    ("train.support_size", "Support samples per class in each episode."),
    ("train.query_per_class", "Augmented queries per class in each episode."),
    ("train.tau", "Softening temperature of the teacher and student distributions."),
    ("train.weights.distill", "Weight of the distillation loss."),
    ("train.weights.discriminative", "Weight of the discriminative loss."),
    ("train.distance", "Embedding distance of the prototype classifier."),
    ("train.pseudo_labels", "`soft` teacher distributions or `hard` one-hot labels."),
    ("train.optimizer.kind", "`adam` or `sgd`."),
    ("train.optimizer.lr", "Learning rate."),
    ("train.optimizer.beta1", "Adam first-moment decay."),
    ("train.optimizer.beta2", "Adam second-moment decay."),
    ("train.optimizer.eps", "Adam denominator floor."),
    ("train.optimizer.weight_decay", "Decoupled weight decay."),
    ("train.early_stop_patience", "Epochs without a validation macro-F1 improvement before stopping."),
    ("train.seed", "Seed of initialisation, episodes, augmentation and dropout."),
    ("augment.transforms", "Ordered transforms, each `{ kind, probability, range }`. Image kinds: zoom, rotation, contrast, horizontal_flip, vertical_flip, shear, solarize. Pseudo-images accept only symmetric_noise, whose range is the fraction of entries perturbed. Absent means the modality default."),
    ("benchmark.methods", "Methods compared by `benchmark`, in column order."),
    ("benchmark.ablation", "Run supervised plus the five loss combinations instead."),
];

fn leaf_keys(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) if !key.ends_with("losses") => leaf_keys(&key, t, out),
            _ => out.push((key, v.clone())),
        }
    }
}

/// Every leaf key of a fully populated default config with its default.
pub fn default_keys() -> Vec<(String, toml::Value)> {
    let mut full = RunConfig {
        augment: Some(AugmentPolicy::microscopy()),
        ..RunConfig::default()
    };
    full.train.losses = Some(LossSet::ALL);
    let table: toml::Table = toml::Value::try_from(&full)
        .expect("defaults serialise")
        .as_table()
        .expect("config is a table")
        .clone();
    let mut out = Vec::new();
    leaf_keys("", &table, &mut out);
    out
}

pub fn key_docs() -> &'static [(&'static str, &'static str)] {
    KEY_DOCS
}

fn render_value(v: &toml::Value) -> String {
    match v {
        toml::Value::Array(a) if a.iter().any(|x| x.is_table()) => format!("{} entries", a.len()),
        other => other.to_string(),
    }
}

/// Markdown reference of every config key and its default.
pub fn reference_page() -> String {
    let defaults = default_keys();
    let mut page = String::from(
        "# Configuration reference\n\n\
         Generated by `protokd defaults --reference`. Every key is optional.\n\
         Any key can be overridden from the environment: `PROTOKD_` followed by\n\
         the upper-cased key path joined with `__`, for example\n\
         `PROTOKD_TRAIN__EPOCHS=5` or `PROTOKD_DATASET__SYNTHETIC__CLASSES=4`.\n\
         Values are parsed as TOML and fall back to plain strings. The optimizer\n\
         section is tagged by `kind`, so override it whole as an inline table:\n\
         `PROTOKD_TRAIN__OPTIMIZER='{ kind = \"sgd\", lr = 0.01 }'`.\n\n\
         | key | default | meaning |\n|---|---|---|\n",
    );
    for (key, doc) in KEY_DOCS {
        let default = defaults
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| {
                if *key == "train.losses" || *key == "augment.transforms" {
                    "absent".to_string()
                } else {
                    format!("`{}`", render_value(v))
                }
            })
            .unwrap_or_else(|| "none".to_string());
        page.push_str(&format!(
            "| `{key}` | {default} | {} |\n",
            doc.replace('|', "\\|")
        ));
    }
    page
}
