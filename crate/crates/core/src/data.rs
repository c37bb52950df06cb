//! Synthetic biased datasets and the CSV embedding format
//! (`id,y,s,f_0,…,f_{d-1}`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.csv", self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Aligned features, task labels and sensitive labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    /// `[n × d]`
    pub x: Tensor,
    pub y: Vec<usize>,
    pub s: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(ids: Vec<String>, x: Tensor, y: Vec<usize>, s: Vec<usize>, split: Split) -> Result<Self, DataError> {
        let n = ids.len();
        if x.rank() != 2 || x.rows() != n || y.len() != n || s.len() != n {
            return Err(DataError::Config(format!(
                "misaligned dataset: {n} ids, x shape {:?}, {} task labels, {} sensitive labels",
                x.shape(),
                y.len(),
                s.len()
            )));
        }
        Ok(Self { ids, x, y, s, split })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            s: idx.iter().map(|&i| self.s[i]).collect(),
            split: self.split,
        }
    }

    /// Same labels and ids with different features (e.g. exported embeddings).
    pub fn with_features(&self, x: Tensor) -> Result<Dataset, DataError> {
        Dataset::new(self.ids.clone(), x, self.y.clone(), self.s.clone(), self.split)
    }

    /// `1 + max label` over task and sensitive labels.
    pub fn cardinalities(&self) -> (usize, usize) {
        let k = self.y.iter().max().map_or(0, |m| m + 1);
        let g = self.s.iter().max().map_or(0, |m| m + 1);
        (k, g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Norm of the task direction per unit of `task_sep`.
pub const TASK_SCALE: f64 = 1.0;
/// Norm of the sensitive direction per unit of `rho`.
pub const SENSITIVE_SCALE: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    /// Samples per split.
    pub n: usize,
    pub dim: usize,
    /// Strength of the sensitive signal in the features, in `[0, 1]`.
    pub rho: f64,
    pub task_sep: f64,
    pub base_rate_y: f64,
    pub base_rate_s: f64,
    /// Correlation of the latent Gaussians behind `y` and `s`, in `[0, 1)`.
    pub coupling: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 5000,
            dim: 32,
            rho: 0.9,
            task_sep: 1.0,
            base_rate_y: 0.5,
            base_rate_s: 0.5,
            coupling: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Config(msg));
        if self.n == 0 {
            return bad("n must be >= 1".into());
        }
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.task_sep >= 0.0 && self.task_sep.is_finite()) {
            return bad(format!("task_sep must be >= 0, got {}", self.task_sep));
        }
        for (name, p) in [("base_rate_y", self.base_rate_y), ("base_rate_s", self.base_rate_s)] {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {p}"));
            }
        }
        if !(0.0..1.0).contains(&self.coupling) {
            return bad(format!("coupling must lie in [0, 1), got {}", self.coupling));
        }
        Ok(())
    }
}

fn unit_direction(rng: &mut Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

/// Task and sensitive feature directions, orthonormal.
fn directions(cfg: &SynthConfig) -> (Vec<f64>, Vec<f64>) {
    let mut rng = rng::stream(cfg.seed, Stream::DataGen, 0);
    let mu = unit_direction(&mut rng, cfg.dim);
    let raw = unit_direction(&mut rng, cfg.dim);
    let dot: f64 = mu.iter().zip(&raw).map(|(a, b)| a * b).sum();
    let nu: Vec<f64> = raw.iter().zip(&mu).map(|(r, m)| r - dot * m).collect();
    let n = nu.iter().map(|a| a * a).sum::<f64>().sqrt();
    (mu, nu.into_iter().map(|a| a / n).collect())
}

fn generate_split(cfg: &SynthConfig, split: Split, index: u32, dirs: &(Vec<f64>, Vec<f64>)) -> Dataset {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let thr_y = std_normal.inverse_cdf(cfg.base_rate_y);
    let thr_s = std_normal.inverse_cdf(cfg.base_rate_s);
    let (a, b) = (cfg.coupling.sqrt(), (1.0 - cfg.coupling).sqrt());
    let (mu, nu) = dirs;

    let mut rng = rng::stream(cfg.seed, Stream::DataGen, index);
    let mut x = Vec::with_capacity(cfg.n * cfg.dim);
    let mut y = Vec::with_capacity(cfg.n);
    let mut s = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let shared: f64 = rng.sample(StandardNormal);
        let gy = a * shared + b * rng.sample::<f64, _>(StandardNormal);
        let gs = a * shared + b * rng.sample::<f64, _>(StandardNormal);
        let yi = usize::from(gy < thr_y);
        let si = usize::from(gs < thr_s);
        let ty = cfg.task_sep * TASK_SCALE * (2.0 * yi as f64 - 1.0);
        let ts = cfg.rho * SENSITIVE_SCALE * (2.0 * si as f64 - 1.0);
        for j in 0..cfg.dim {
            x.push(ty * mu[j] + ts * nu[j] + rng.sample::<f64, _>(StandardNormal));
        }
        y.push(yi);
        s.push(si);
    }
    let ids = (0..cfg.n).map(|i| format!("{}-{i:06}", split.name())).collect();
    Dataset {
        ids,
        x: Tensor::from_parts(vec![cfg.n, cfg.dim], x),
        y,
        s,
        split,
    }
}

/// Three independent splits. `y` and `s` share a latent Gaussian, so they are
/// correlated; features carry `y` along one direction and `s` along another.
pub fn generate(cfg: &SynthConfig) -> Result<Splits, DataError> {
    cfg.validate()?;
    let dirs = directions(cfg);
    Ok(Splits {
        train: generate_split(cfg, Split::Train, 1, &dirs),
        val: generate_split(cfg, Split::Val, 2, &dirs),
        test: generate_split(cfg, Split::Test, 3, &dirs),
    })
}

/// Serializes in the CSV format; floats carry 17 significant digits.
pub fn to_csv(ds: &Dataset) -> String {
    let d = ds.dim();
    let mut out = String::from("id,y,s");
    for j in 0..d {
        out.push_str(&format!(",f_{j}"));
    }
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(&format!("{},{},{}", ds.ids[i], ds.y[i], ds.s[i]));
        for v in ds.x.row(i) {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    out
}

fn check_header(header: &str) -> Result<usize, DataError> {
    let cols: Vec<&str> = header.split(',').collect();
    for name in ["id", "y", "s"] {
        if !cols.contains(&name) {
            return Err(DataError::MissingColumn(name.into()));
        }
    }
    if cols.len() < 4 || cols[..3] != ["id", "y", "s"] {
        return Err(DataError::Format {
            line: 1,
            msg: format!("header must start with `id,y,s,f_0`, got `{header}`"),
        });
    }
    for (j, c) in cols[3..].iter().enumerate() {
        if *c != format!("f_{j}") {
            return Err(DataError::Format {
                line: 1,
                msg: format!("expected column `f_{j}`, found `{c}`"),
            });
        }
    }
    Ok(cols.len() - 3)
}

pub fn from_csv(text: &str, split: Split) -> Result<Dataset, DataError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(DataError::Format {
        line: 1,
        msg: "empty file".into(),
    })?;
    let d = check_header(header)?;
    let (mut ids, mut x, mut y, mut s) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Format { line: line_no, msg };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d + 3 {
            return Err(err(format!("expected {} cells, found {}", d + 3, cells.len())));
        }
        let label = |c: &str, name: &str| {
            c.parse::<usize>()
                .map_err(|_| err(format!("column `{name}`: `{c}` is not a non-negative integer")))
        };
        ids.push(cells[0].to_string());
        y.push(label(cells[1], "y")?);
        s.push(label(cells[2], "s")?);
        for (j, c) in cells[3..].iter().enumerate() {
            let v: f64 = c
                .parse()
                .map_err(|_| err(format!("column `f_{j}`: `{c}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(format!("column `f_{j}`: non-finite value `{c}`")));
            }
            x.push(v);
        }
    }
    let n = ids.len();
    Ok(Dataset {
        ids,
        x: Tensor::from_parts(vec![n, d], x),
        y,
        s,
        split,
    })
}

pub fn dump_embeddings(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    fs::write(path, to_csv(ds)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_embeddings(path: &Path, split: Split) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_csv(&text, split)
}

/// Writes `train.csv`, `val.csv` and `test.csv` into `dir`.
pub fn write_splits(splits: &Splits, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for split in Split::ALL {
        dump_embeddings(splits.get(split), &dir.join(split.file_name()))?;
    }
    Ok(())
}

pub fn read_splits(dir: &Path) -> Result<Splits, DataError> {
    let load = |split: Split| load_embeddings(&dir.join(split.file_name()), split);
    let splits = Splits {
        train: load(Split::Train)?,
        val: load(Split::Val)?,
        test: load(Split::Test)?,
    };
    if splits.val.dim() != splits.train.dim() || splits.test.dim() != splits.train.dim() {
        return Err(DataError::Config(format!(
            "splits disagree on feature width: train {}, val {}, test {}",
            splits.train.dim(),
            splits.val.dim(),
            splits.test.dim()
        )));
    }
    Ok(splits)
}
