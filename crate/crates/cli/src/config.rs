//! Experiment files: INI-style `key = value` pairs under `[dataset]`,
//! `[shift]`, `[train]` and `[output]`. Omitted keys take the defaults of
//! the desk-scale blobs task; unknown sections and keys are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use centershift_core::data::{BlobsSpec, ShiftSpec};
use centershift_core::trainer::TrainConfig;
use centershift_core::{Error, Result};
use ini::Ini;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs(BlobsSpec),
    Moons {
        n_per_class: usize,
        noise: f64,
    },
    /// Source and target read from disk. The target's label column, if
    /// present, is used for evaluation only.
    Csv {
        source: PathBuf,
        target: PathBuf,
        target_labels: bool,
        header: bool,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs(BlobsSpec::default())
    }
}

impl DatasetSpec {
    pub fn describe(&self) -> serde_json::Value {
        match self {
            DatasetSpec::Blobs(b) => serde_json::json!({
                "kind": "blobs",
                "classes": b.class_count,
                "n_per_class": b.n_per_class,
                "input_dim": b.input_dim,
                "spread": b.spread,
            }),
            DatasetSpec::Moons { n_per_class, noise } => serde_json::json!({
                "kind": "moons",
                "n_per_class": n_per_class,
                "noise": noise,
            }),
            DatasetSpec::Csv {
                source,
                target,
                target_labels,
                header,
            } => serde_json::json!({
                "kind": "csv",
                "source": source.display().to_string(),
                "target": target.display().to_string(),
                "target_labels": target_labels,
                "header": header,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Number of seeds, counting up from `train.seed`.
    pub repeat: usize,
    /// Also write a checkpoint every this many iterations.
    pub checkpoint_every: Option<usize>,
    /// Dump every pseudo-label refresh to `pseudo_labels.csv`.
    pub pseudo_dump: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            repeat: 1,
            checkpoint_every: None,
            pseudo_dump: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub shift: ShiftSpec,
    pub train: TrainConfig,
    pub output: OutputSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            shift: ShiftSpec::desk_default(),
            train: TrainConfig::default(),
            output: OutputSpec::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.output.repeat as u64).map(|i| self.train.seed + i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.validate_data_and_output()
    }

    /// Everything except the training block, which sweeps check per mode.
    pub fn validate_data_and_output(&self) -> Result<()> {
        self.shift.validate()?;
        if self.output.repeat == 0 {
            return Err(Error::config("[output] repeat must be at least 1"));
        }
        if self.output.checkpoint_every == Some(0) {
            return Err(Error::config("[output] checkpoint_every must be at least 1"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec = Self::parse(&text)?;
        Ok(spec.resolve_paths(path.parent().unwrap_or(Path::new("."))))
    }

    /// Paths in a config file are relative to the file itself.
    fn resolve_paths(mut self, base: &Path) -> Self {
        if self.output.dir.is_relative() {
            self.output.dir = base.join(&self.output.dir);
        }
        if let DatasetSpec::Csv { source, target, .. } = &mut self.dataset {
            for p in [source, target] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        self
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::config(format!("cannot parse config: {e}")))?;
        let mut sections: BTreeMap<String, Section> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::config(format!("key '{k}' must sit under a section header")));
                }
                continue;
            };
            if !["dataset", "shift", "train", "output"].contains(&name) {
                return Err(Error::config(format!("unknown section [{name}]")));
            }
            let sec = sections.entry(name.to_string()).or_insert_with(|| Section::new(name));
            for (k, v) in props.iter() {
                if sec.values.insert(k.to_string(), v.trim().to_string()).is_some() {
                    return Err(Error::config(format!("[{name}] {k} is set twice")));
                }
            }
        }
        let mut take = |name: &str| sections.remove(name).unwrap_or_else(|| Section::new(name));

        let mut spec = ExperimentSpec::default();

        let mut s = take("dataset");
        let kind = s.get::<String>("kind")?.unwrap_or_else(|| "blobs".into());
        spec.dataset = match kind.as_str() {
            "blobs" => {
                let d = BlobsSpec::default();
                DatasetSpec::Blobs(BlobsSpec {
                    class_count: s.get("classes")?.unwrap_or(d.class_count),
                    n_per_class: s.get("n_per_class")?.unwrap_or(d.n_per_class),
                    input_dim: s.get("input_dim")?.unwrap_or(d.input_dim),
                    spread: s.get("spread")?.unwrap_or(d.spread),
                })
            }
            "moons" => DatasetSpec::Moons {
                n_per_class: s.get("n_per_class")?.unwrap_or(200),
                noise: s.get("noise")?.unwrap_or(0.1),
            },
            "csv" => DatasetSpec::Csv {
                source: s.require::<PathBuf>("source")?,
                target: s.require::<PathBuf>("target")?,
                target_labels: s.get_bool("target_labels")?.unwrap_or(true),
                header: s.get_bool("header")?.unwrap_or(false),
            },
            other => {
                return Err(Error::config(format!(
                    "[dataset] kind: unknown dataset '{other}' (expected blobs, moons or csv)"
                )))
            }
        };
        s.finish()?;

        let mut s = take("shift");
        let d = ShiftSpec::desk_default();
        spec.shift = ShiftSpec {
            rotation: s.get::<f64>("rotation_deg")?.map(f64::to_radians).unwrap_or(d.rotation),
            translation: match s.raw("translation") {
                Some(v) => parse_list(&v).map_err(|e| Error::config(format!("[shift] translation: {e}")))?,
                None => d.translation,
            },
            scale: s.get("scale")?.unwrap_or(d.scale),
            noise_sigma: s.get("noise_sigma")?.unwrap_or(d.noise_sigma),
        };
        s.finish()?;

        let mut s = take("train");
        let d = TrainConfig::default();
        spec.train = TrainConfig {
            mode: s.get("mode")?.unwrap_or(d.mode),
            iterations: s.get("iterations")?.unwrap_or(d.iterations),
            refresh_period: s.get("refresh_period")?.unwrap_or(d.refresh_period),
            margins: centershift_core::losses::Margins {
                alpha: s.get("alpha")?.unwrap_or(d.margins.alpha),
                beta: s.get("beta")?.unwrap_or(d.margins.beta),
            },
            target_multiplier: s.get("target_multiplier")?.unwrap_or(d.target_multiplier),
            pseudo_start: s.get("pseudo_start")?.unwrap_or(d.pseudo_start),
            lr_net: s.get("lr_net")?.unwrap_or(d.lr_net),
            lr_centers: s.get("lr_centers")?.unwrap_or(d.lr_centers),
            batch_size: s.get("batch_size")?.unwrap_or(d.batch_size),
            embedding_dim: s.get("embedding_dim")?.unwrap_or(d.embedding_dim),
            hidden_dim: s.get("hidden_dim")?.unwrap_or(d.hidden_dim),
            lambda_c: s.get("lambda_c")?,
            seed: s.get("seed")?.unwrap_or(d.seed),
            log_every: s.get("log_every")?.unwrap_or(d.log_every),
        };
        s.finish()?;

        let mut s = take("output");
        let d = OutputSpec::default();
        spec.output = OutputSpec {
            dir: s.get("dir")?.unwrap_or(d.dir),
            repeat: s.get("repeat")?.unwrap_or(d.repeat),
            checkpoint_every: s.get("checkpoint_every")?,
            pseudo_dump: s.get_bool("pseudo_dump")?.unwrap_or(d.pseudo_dump),
        };
        s.finish()?;

        Ok(spec)
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<f64>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("'{}': {e}", x.trim())))
        .collect()
}

/// Keys of one section, consumed as they are read so leftovers can be
/// reported as unknown.
struct Section {
    name: String,
    values: BTreeMap<String, String>,
}

impl Section {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            values: BTreeMap::new(),
        }
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::config(format!("[{}] {key} = '{v}': {e}", self.name))),
        }
    }

    fn get_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.values.remove(key).as_deref() {
            None => Ok(None),
            Some("true" | "yes" | "1") => Ok(Some(true)),
            Some("false" | "no" | "0") => Ok(Some(false)),
            Some(v) => Err(Error::config(format!(
                "[{}] {key} = '{v}': expected true or false",
                self.name
            ))),
        }
    }

    fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::config(format!("[{}] {key} is required", self.name)))
    }

    fn finish(self) -> Result<()> {
        match self.values.keys().next() {
            Some(k) => Err(Error::config(format!("[{}] {k}: unknown key", self.name))),
            None => Ok(()),
        }
    }
}
