//! Sectioned `key = value` run configuration.
//!
//! ```text
//! # comment
//! [model]
//! kind = cec
//! layers = 784,200,200
//! classes = 10
//! [data]
//! source = mnist
//! mnist_dir = ../data/mnist
//! [train]
//! lambda = 0.1
//! [output]
//! checkpoint = run.ckpt
//! ```
//!
//! Unknown sections and keys are rejected. Relative paths are resolved
//! against the directory holding the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{load_mnist_idx, Dataset, SyntheticBlobs, MNIST_TRAIN_SPLIT};
use crate::error::{cfg_err, Result};
use crate::models::{parse_bool, Architecture};
use crate::rng::{streams, Rng};
use crate::training::TrainConfig;

/// Environment variable that overrides `[train] seed`.
pub const SEED_ENV: &str = "CECR_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    /// The official test file (MNIST) or the held-out synthetic samples.
    Test,
    /// The last 10k images of the MNIST training file.
    Validation,
    /// The training set itself.
    Train,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Mnist {
        dir: PathBuf,
    },
    Synthetic {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        spread: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub eval: EvalSplit,
    pub pairs_per_class: usize,
    pub self_pairs: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputConfig {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: Architecture,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

/// Training and evaluation sets described by a [`DataConfig`].
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| cfg_err!("bad value `{v}` for `{key}`"))
}

fn parse_sections(text: &str) -> Result<BTreeMap<String, BTreeMap<String, String>>> {
    let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !["model", "data", "train", "output"].contains(&name) {
                return Err(cfg_err!("line {}: unknown section [{name}]", no + 1));
            }
            if sections.contains_key(name) {
                return Err(cfg_err!("line {}: section [{name}] appears twice", no + 1));
            }
            sections.insert(name.to_string(), BTreeMap::new());
            current = Some(name.to_string());
            continue;
        }
        let section = current
            .as_ref()
            .ok_or_else(|| cfg_err!("line {}: `{line}` is outside any section", no + 1))?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| cfg_err!("line {}: expected `key = value`, got `{line}`", no + 1))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        let map = sections.get_mut(section).expect("section exists");
        if map.insert(k.clone(), v).is_some() {
            return Err(cfg_err!("line {}: key `{k}` repeated in [{section}]", no + 1));
        }
    }
    Ok(sections)
}

fn reject_leftovers(section: &str, map: &BTreeMap<String, String>) -> Result<()> {
    match map.keys().next() {
        Some(k) => Err(cfg_err!("unknown key `{k}` in [{section}]")),
        None => Ok(()),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl DataConfig {
    fn from_map(map: &mut BTreeMap<String, String>, base: &Path) -> Result<Self> {
        let mut take = |k: &str| map.remove(k);
        let source = match take("source").as_deref() {
            Some("mnist") => DataSource::Mnist {
                dir: resolve(base, &take("mnist_dir").ok_or_else(|| cfg_err!("[data] source = mnist needs `mnist_dir`"))?),
            },
            Some("synthetic") => {
                let mut req = |k: &str| take(k).ok_or_else(|| cfg_err!("[data] source = synthetic needs `{k}`"));
                let classes = num("classes", &req("classes")?)?;
                let per_class = num("per_class", &req("per_class")?)?;
                let test_per_class = num("test_per_class", &req("test_per_class")?)?;
                let dim = num("dim", &req("dim")?)?;
                let spread = num("spread", &req("spread")?)?;
                DataSource::Synthetic {
                    classes,
                    per_class,
                    test_per_class,
                    dim,
                    spread,
                }
            }
            Some(other) => return Err(cfg_err!("unknown data source `{other}`")),
            None => return Err(cfg_err!("[data] needs `source`")),
        };
        let train_limit = take("train_limit").map(|v| num("train_limit", &v)).transpose()?;
        let test_limit = take("test_limit").map(|v| num("test_limit", &v)).transpose()?;
        let eval = match take("eval").as_deref() {
            None | Some("test") => EvalSplit::Test,
            Some("validation") => EvalSplit::Validation,
            Some("train") => EvalSplit::Train,
            Some(other) => return Err(cfg_err!("eval must be test, validation or train, got `{other}`")),
        };
        let pairs_per_class = num("pairs_per_class", &take("pairs_per_class").ok_or_else(|| cfg_err!("[data] needs `pairs_per_class`"))?)?;
        let self_pairs = take("self_pairs").map_or(Ok(true), |v| parse_bool("self_pairs", &v))?;
        Ok(DataConfig {
            source,
            train_limit,
            test_limit,
            eval,
            pairs_per_class,
            self_pairs,
        })
    }

    /// Loads or generates the training and evaluation sets. Synthetic data
    /// comes from the seed's data stream.
    pub fn load(&self, seed: u64) -> Result<Splits> {
        let limit = |ds: Dataset, n: Option<usize>| match n {
            Some(n) => ds.take(n),
            None => Ok(ds),
        };
        let (train, eval) = match &self.source {
            DataSource::Mnist { dir } => {
                let full = load_mnist_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
                let split = MNIST_TRAIN_SPLIT.min(full.len());
                let train = limit(full.slice(0, split)?, self.train_limit)?;
                let eval = match self.eval {
                    EvalSplit::Test => {
                        load_mnist_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?
                    }
                    EvalSplit::Validation => full.slice(split, full.len())?,
                    EvalSplit::Train => train.clone(),
                };
                (train, limit(eval, self.test_limit)?)
            }
            DataSource::Synthetic {
                classes,
                per_class,
                test_per_class,
                dim,
                spread,
            } => {
                let mut rng = Rng::stream(seed, streams::DATA);
                let blobs = SyntheticBlobs::new(*classes, *dim, *spread, &mut rng)?;
                let train = limit(blobs.sample(*per_class, &mut rng)?, self.train_limit)?;
                let eval = match self.eval {
                    EvalSplit::Train => train.clone(),
                    _ => limit(blobs.sample(*test_per_class, &mut rng)?, self.test_limit)?,
                };
                (train, eval)
            }
        };
        Ok(Splits { train, eval })
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut sections = parse_sections(text)?;
        let mut model = sections.remove("model").ok_or_else(|| cfg_err!("missing [model] section"))?;
        let mut data_map = sections.remove("data").ok_or_else(|| cfg_err!("missing [data] section"))?;
        let mut train = sections.remove("train").unwrap_or_default();
        let mut output = sections.remove("output").unwrap_or_default();

        let arch = Architecture::from_map(&mut model)?;
        reject_leftovers("model", &model)?;
        let data = DataConfig::from_map(&mut data_map, base)?;
        reject_leftovers("data", &data_map)?;
        if train.contains_key("tie_weights") {
            return Err(cfg_err!("set `tied` in [model] instead of `tie_weights` in [train]"));
        }
        let mut train_cfg = TrainConfig::from_map(&mut train)?;
        reject_leftovers("train", &train)?;
        train_cfg.tie_weights = matches!(
            arch,
            Architecture::ClassEncoder { tied: true, .. } | Architecture::Cec { tied: true, .. }
        );
        let output_cfg = OutputConfig {
            checkpoint: output.remove("checkpoint").map(|p| resolve(base, &p)),
            metrics: output.remove("metrics").map(|p| resolve(base, &p)),
        };
        reject_leftovers("output", &output)?;
        if let Some(n) = arch.num_classes() {
            if let DataSource::Synthetic { classes, .. } = data.source {
                if classes != n {
                    return Err(cfg_err!("model has {n} classes but synthetic data has {classes}"));
                }
            }
        }
        Ok(RunConfig {
            arch,
            data,
            train: train_cfg,
            output: output_cfg,
        })
    }

    /// Reads a config file, resolving relative paths against its directory and
    /// applying the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::parse(&text, base)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.train.seed = num(SEED_ENV, seed.trim())?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    const CEC: &str = "
# tiny
[model]
kind = cec
layers = 6,4,3
classes = 2
[data]
source = synthetic
classes = 2
per_class = 5
test_per_class = 3
dim = 6
spread = 0.1
pairs_per_class = 4
[train]
lambda = 0.5
batch_size = 4
[output]
checkpoint = out/run.ckpt
";

    #[test]
    fn parses_sections_and_resolves_paths() {
        let cfg = RunConfig::parse(CEC, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.output.checkpoint, Some(PathBuf::from("/cfg/out/run.ckpt")));
        assert!(cfg.data.self_pairs);
        let splits = cfg.data.load(3).unwrap();
        assert_eq!((splits.train.len(), splits.eval.len()), (10, 6));
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        let typo = CEC.replace("lambda = 0.5", "lamda = 0.5");
        assert!(matches!(RunConfig::parse(&typo, Path::new(".")), Err(Error::Config(m)) if m.contains("lamda")));
        let section = format!("{CEC}\n[extra]\n");
        assert!(matches!(RunConfig::parse(&section, Path::new(".")), Err(Error::Config(_))));
        let data_typo = CEC.replace("spread = 0.1", "spread = 0.1\nsprad = 1");
        assert!(matches!(RunConfig::parse(&data_typo, Path::new(".")), Err(Error::Config(m)) if m.contains("sprad")));
        let missing = CEC.replace("classes = 2\n[data]", "[data]");
        assert!(matches!(RunConfig::parse(&missing, Path::new(".")), Err(Error::Config(_))));
    }
}
