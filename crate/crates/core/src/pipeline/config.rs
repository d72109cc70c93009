//! INI-style run configuration.
//!
//! ```ini
//! [data]
//! seed = 7
//! count = 200
//!
//! [train]
//! loss = cross_entropy
//! ```
//!
//! `#` and `;` start comments. Unknown sections or keys, duplicate keys and
//! unparsable values are errors carrying the offending line number.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{AugmentConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::model::{Optimizer, TrainConfig, DEFAULT_FEATURES};
use crate::prune::{PruneMethod, PruneSpec};
use crate::quant::LayerFilter;

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub synth: SynthConfig,
    pub count: usize,
    /// Fraction of scenes used for training; the rest validate.
    pub split: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSection {
    pub spec: PruneSpec,
    /// Extra amounts evaluated for the report only.
    pub extra_amounts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    pub losses: Vec<LossKind>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub features: usize,
    pub train: TrainConfig,
    pub loss: LossSpec,
    pub prune: Option<PruneSection>,
    pub quant: Option<LayerFilter>,
    pub max_mb: f64,
    pub sweep: SweepSection,
}

impl Default for PipelineConfig {
    /// The desk run: 200 scenes of 64x64, 16 base features, 30 epochs of
    /// cross-entropy, L1 pruning at 0.3 and full weight quantization.
    fn default() -> Self {
        Self {
            data: DataSection {
                synth: SynthConfig {
                    seed: 7,
                    ..SynthConfig::default()
                },
                count: 200,
                split: 0.8,
            },
            features: DEFAULT_FEATURES,
            train: TrainConfig {
                seed: 7,
                ..TrainConfig::default()
            },
            loss: LossSpec::new(LossKind::CrossEntropy),
            prune: Some(PruneSection {
                spec: PruneSpec {
                    seed: 7,
                    ..PruneSpec::new(PruneMethod::L1Unstructured, 0.3)
                },
                extra_amounts: Vec::new(),
            }),
            quant: Some(LayerFilter::all()),
            max_mb: 10.0,
            sweep: SweepSection {
                losses: LossKind::ALL.to_vec(),
                seeds: vec![0, 1, 2, 3, 4],
            },
        }
    }
}

/// Raw `section -> key -> (line, value)` map.
type Sections = BTreeMap<String, BTreeMap<String, (usize, String)>>;

const KNOWN: &[(&str, &[&str])] = &[
    (
        "data",
        &[
            "seed", "size", "count", "split", "classes", "objects", "class_weights", "object_scale", "noise",
            "augment", "p_hflip", "p_vflip", "p_colorjitter", "brightness", "contrast", "saturation", "hue",
        ],
    ),
    ("model", &["features"]),
    (
        "train",
        &[
            "lr", "lr_decay", "step_lr", "epochs", "batch", "loss", "gamma", "beta", "eps", "lambda", "seed",
            "optimizer", "momentum",
        ],
    ),
    ("prune", &["enabled", "method", "amount", "extra_amounts", "n", "seed", "exempt", "include_biases"]),
    ("quant", &["enabled", "layer_filter"]),
    ("budget", &["max_mb"]),
    ("eval", &["include_background"]),
    ("sweep", &["losses", "seeds"]),
];

fn parse_sections(text: &str, path: &str) -> Result<Sections> {
    let err = |line: usize, message: String| Error::Config {
        path: path.to_string(),
        line,
        message,
    };
    let mut out = Sections::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(line_no, format!("malformed section header `{line}`")))?
                .trim()
                .to_string();
            if !KNOWN.iter().any(|(s, _)| *s == name) {
                return Err(err(line_no, format!("unknown section [{name}]")));
            }
            out.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected `key = value`, got `{line}`")))?;
        let section = current
            .as_ref()
            .ok_or_else(|| err(line_no, "key outside of any section".into()))?;
        let key = key.trim().to_string();
        let allowed = KNOWN.iter().find(|(s, _)| s == section).map(|(_, k)| *k).unwrap_or(&[]);
        if !allowed.contains(&key.as_str()) {
            return Err(err(line_no, format!("unknown key `{key}` in [{section}]")));
        }
        let slot = out.get_mut(section).expect("section inserted on header");
        if slot.insert(key.clone(), (line_no, value.trim().to_string())).is_some() {
            return Err(err(line_no, format!("duplicate key `{key}` in [{section}]")));
        }
    }
    Ok(out)
}

/// Typed access to one parsed section.
struct Reader<'a> {
    path: &'a str,
    section: &'a str,
    values: Option<&'a BTreeMap<String, (usize, String)>>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.values?.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn fail(&self, line: usize, key: &str, message: impl std::fmt::Display) -> Error {
        Error::Config {
            path: self.path.to_string(),
            line,
            message: format!("[{}] {key}: {message}", self.section),
        }
    }

    fn parsed<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, v)) = self.raw(key) {
            *slot = v.parse().map_err(|e| self.fail(line, key, format!("`{v}`: {e}")))?;
        }
        Ok(())
    }

    fn optional<T: FromStr>(&self, key: &str, slot: &mut Option<T>) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, v)) = self.raw(key) {
            *slot = if v.eq_ignore_ascii_case("none") {
                None
            } else {
                Some(v.parse().map_err(|e| self.fail(line, key, format!("`{v}`: {e}")))?)
            };
        }
        Ok(())
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((line, v)) = self.raw(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| self.fail(line, key, format!("`{s}`: {e}"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn pair<T: FromStr + Copy>(&self, key: &str, slot: &mut (T, T)) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.list::<T>(key)? {
            let [a, b] = v[..] else {
                let line = self.raw(key).map_or(0, |(l, _)| l);
                return Err(self.fail(line, key, "expected two comma-separated values"));
            };
            *slot = (a, b);
        }
        Ok(())
    }

    /// Runs a section-level validation and pins failures to the header line.
    fn check(&self, result: Result<()>) -> Result<()> {
        result.map_err(|e| {
            let line = self.values.and_then(|v| v.values().map(|(l, _)| *l).min()).unwrap_or(0);
            Error::Config {
                path: self.path.to_string(),
                line,
                message: format!("[{}] {e}", self.section),
            }
        })
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `text`, starting from [`PipelineConfig::default`]; `path` only
    /// labels errors.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let sections = parse_sections(text, path)?;
        let reader = |section: &'static str| Reader {
            path,
            section,
            values: sections.get(section),
        };
        let mut cfg = Self::default();

        let r = reader("data");
        let d = &mut cfg.data;
        r.parsed("seed", &mut d.synth.seed)?;
        r.parsed("size", &mut d.synth.size)?;
        r.parsed("count", &mut d.count)?;
        r.parsed("split", &mut d.split)?;
        r.parsed("classes", &mut d.synth.classes)?;
        r.pair("objects", &mut d.synth.objects)?;
        r.pair("object_scale", &mut d.synth.object_scale)?;
        r.parsed("noise", &mut d.synth.noise)?;
        if let Some(w) = r.list::<f64>("class_weights")? {
            let line = r.raw("class_weights").map_or(0, |(l, _)| l);
            d.synth.class_weights = w
                .try_into()
                .map_err(|_| r.fail(line, "class_weights", "expected four values"))?;
        }
        let mut augment = false;
        r.parsed("augment", &mut augment)?;
        let mut aug = AugmentConfig::default();
        r.parsed("p_hflip", &mut aug.p_hflip)?;
        r.parsed("p_vflip", &mut aug.p_vflip)?;
        r.parsed("p_colorjitter", &mut aug.p_colorjitter)?;
        r.parsed("brightness", &mut aug.brightness)?;
        r.parsed("contrast", &mut aug.contrast)?;
        r.parsed("saturation", &mut aug.saturation)?;
        r.parsed("hue", &mut aug.hue)?;
        cfg.train.augment = if augment { aug } else { AugmentConfig::identity() };
        r.check(d.synth.validate())?;
        r.check(cfg.train.augment.validate())?;
        if d.count == 0 || !(0.0 < d.split && d.split < 1.0) {
            r.check(Err(Error::invalid("need count >= 1 and split in (0, 1)")))?;
        }

        let r = reader("model");
        r.parsed("features", &mut cfg.features)?;
        if cfg.features == 0 {
            r.check(Err(Error::invalid("features must be positive")))?;
        }

        let r = reader("train");
        let t = &mut cfg.train;
        r.parsed("lr", &mut t.lr)?;
        r.optional("lr_decay", &mut t.lr_decay)?;
        r.optional("step_lr", &mut t.step_lr)?;
        r.parsed("epochs", &mut t.epochs)?;
        r.parsed("batch", &mut t.batch_size)?;
        r.parsed("seed", &mut t.seed)?;
        r.parsed("loss", &mut cfg.loss.kind)?;
        r.parsed("gamma", &mut cfg.loss.gamma)?;
        r.parsed("beta", &mut cfg.loss.beta)?;
        r.parsed("eps", &mut cfg.loss.eps)?;
        r.parsed("lambda", &mut cfg.loss.lambda)?;
        let mut optimizer = String::from("adam");
        r.parsed("optimizer", &mut optimizer)?;
        let mut momentum = 0.9;
        r.parsed("momentum", &mut momentum)?;
        t.optimizer = match optimizer.as_str() {
            "adam" => Optimizer::default(),
            "sgd" => Optimizer::Sgd { momentum },
            other => {
                let line = r.raw("optimizer").map_or(0, |(l, _)| l);
                return Err(r.fail(line, "optimizer", format!("unknown optimizer `{other}`")));
            }
        };
        r.check(t.validate())?;
        r.check(cfg.loss.validate())?;

        let r = reader("eval");
        r.parsed("include_background", &mut cfg.train.include_background)?;

        let r = reader("prune");
        let mut enabled = true;
        r.parsed("enabled", &mut enabled)?;
        let section = cfg.prune.as_mut().expect("default config prunes");
        let spec = &mut section.spec;
        r.parsed("method", &mut spec.method)?;
        r.parsed("amount", &mut spec.amount)?;
        r.parsed("n", &mut spec.norm)?;
        r.parsed("seed", &mut spec.seed)?;
        r.parsed("include_biases", &mut spec.include_biases)?;
        if let Some(names) = r.list::<String>("exempt")? {
            spec.exempt = LayerFilter::new(names);
        }
        if let Some(extra) = r.list::<f64>("extra_amounts")? {
            section.extra_amounts = extra;
        }
        r.check(spec.validate())?;
        for &a in &section.extra_amounts {
            r.check(PruneSpec { amount: a, ..spec.clone() }.validate())?;
        }
        if !enabled {
            cfg.prune = None;
        }

        let r = reader("quant");
        let mut enabled = true;
        r.parsed("enabled", &mut enabled)?;
        if let Some(patterns) = r.list::<String>("layer_filter")? {
            cfg.quant = Some(LayerFilter::new(patterns));
        }
        if !enabled {
            cfg.quant = None;
        }

        let r = reader("budget");
        r.parsed("max_mb", &mut cfg.max_mb)?;
        if !(cfg.max_mb > 0.0) {
            r.check(Err(Error::invalid("max_mb must be positive")))?;
        }

        let r = reader("sweep");
        if let Some(losses) = r.list::<LossKind>("losses")? {
            cfg.sweep.losses = losses;
        }
        if let Some(seeds) = r.list::<u64>("seeds")? {
            cfg.sweep.seeds = seeds;
        }
        if cfg.sweep.losses.is_empty() || cfg.sweep.seeds.is_empty() {
            r.check(Err(Error::invalid("sweep needs at least one loss and one seed")))?;
        }
        Ok(cfg)
    }

    /// Applies one seed to data generation, initialisation, training and
    /// random pruning.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.synth.seed = seed;
        self.train.seed = seed;
        if let Some(p) = self.prune.as_mut() {
            p.spec.seed = seed;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(PipelineConfig::parse("", "x.ini").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn values_and_comments() {
        let text = "# desk run\n[data]\ncount = 20 ; small\nclasses = 2\n[train]\nlr_decay = 0.995\nstep_lr = 25\nloss = focal-lovasz\n[prune]\nenabled = false\n[quant]\nlayer_filter = enc1*, head.weight\n[sweep]\nseeds = 1, 2\n";
        let c = PipelineConfig::parse(text, "x.ini").unwrap();
        assert_eq!(c.data.count, 20);
        assert_eq!(c.data.synth.classes, 2);
        assert_eq!(c.train.lr_decay, Some(0.995));
        assert_eq!(c.train.step_lr, Some(25));
        assert_eq!(c.loss.kind, LossKind::FocalLovasz);
        assert!(c.prune.is_none());
        assert!(c.quant.as_ref().unwrap().matches("enc1.bias"));
        assert_eq!(c.sweep.seeds, vec![1, 2]);
    }

    fn line_of(text: &str) -> usize {
        match PipelineConfig::parse(text, "x.ini") {
            Err(Error::Config { line, .. }) => line,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(line_of("[data]\ncount = ten\n"), 2);
        assert_eq!(line_of("\n[bogus]\n"), 2);
        assert_eq!(line_of("[data]\n\nfoo = 1\n"), 3);
        assert_eq!(line_of("count = 1\n"), 1);
        assert_eq!(line_of("[data]\ncount = 1\ncount = 2\n"), 3);
        assert_eq!(line_of("[train]\nlr_decay = 0.9\n"), 2);
        assert_eq!(line_of("[prune]\namount = 1.5\n"), 2);
        assert_eq!(line_of("[data]\nobjects = 1\n"), 2);
        assert_eq!(line_of("[train]\noptimizer = rmsprop\n"), 2);
    }

    #[test]
    fn seed_override() {
        let c = PipelineConfig::default().with_seed(11);
        assert_eq!((c.data.synth.seed, c.train.seed, c.prune.unwrap().spec.seed), (11, 11, 11));
    }
}
