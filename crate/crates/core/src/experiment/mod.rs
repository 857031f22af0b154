//! Experiment configuration, datasets, CSV output and the parameter grid.

mod csv;
mod data;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use self::csv::{emit_csv, write_csv, CSV_HEADER, WALL_CLOCK_COLUMNS};
pub use data::{
    generate_synthetic, load_idx, partition_dataset, write_idx, PartitionMode, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
    TRAIN_FRACTION,
};

use crate::gar::GarKind;
use crate::learning::{Dataset, LossSpec};
use crate::netsim::{run_experiment, AdversaryScript, RunReport, Scheme, SimConfig, SimData, Strategy};
use crate::par::Exec;
use crate::privacy::{CalibrationMode, DpConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic {
        records: usize,
        features: usize,
        classes: usize,
        separation: f64,
    },
    /// IDX files; without a test pair the training pair is split 80/20.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test: Option<(PathBuf, PathBuf)>,
    },
}

/// Everything needed to run and record one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub nodes: usize,
    pub byz_ratio: f64,
    pub byz_strategy: Strategy,
    pub rounds: u64,
    pub epoch_length: u64,
    pub delta1: u64,
    pub delta2: u64,
    pub gamma: f64,
    pub batch_size: usize,
    pub gar: GarKind,
    pub scheme: Scheme,
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
    pub calibration: CalibrationMode,
    pub l2: f64,
    pub seed: u64,
    pub max_views: u64,
    pub trace: bool,
    pub partition: PartitionMode,
    pub dataset: DatasetKind,
    pub records: usize,
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    pub idx_train_images: Option<PathBuf>,
    pub idx_train_labels: Option<PathBuf>,
    pub idx_test_images: Option<PathBuf>,
    pub idx_test_labels: Option<PathBuf>,
    pub out: PathBuf,
    pub chain_out: Option<PathBuf>,
    pub repetitions: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "idx" => Ok(DatasetKind::Idx),
            other => Err(Error::config(format!("unknown dataset {other:?}"))),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            nodes: 10,
            byz_ratio: 0.0,
            byz_strategy: Strategy::SignFlip { scale: 4.0 },
            rounds: 50,
            epoch_length: 10,
            delta1: 2,
            delta2: 8,
            gamma: 0.1,
            batch_size: 32,
            gar: GarKind::Krum,
            scheme: Scheme::Spdl,
            epsilon: 0.02,
            delta: 1e-6,
            clip: 1.0,
            calibration: CalibrationMode::WholeRun,
            l2: 0.0,
            seed: 0,
            max_views: 32,
            trace: false,
            partition: PartitionMode::Iid,
            dataset: DatasetKind::Synthetic,
            records: 2000,
            features: 20,
            classes: 2,
            separation: 4.0,
            idx_train_images: None,
            idx_train_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
            out: PathBuf::from("metrics.csv"),
            chain_out: None,
            repetitions: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("bad value {value:?} for {key}"))),
    }
}

impl ExperimentConfig {
    /// Every key accepted by [`ExperimentConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "nodes",
        "byz_ratio",
        "byz_strategy",
        "rounds",
        "epoch_length",
        "delta1",
        "delta2",
        "gamma",
        "batch_size",
        "gar",
        "scheme",
        "epsilon",
        "delta",
        "clip",
        "calibration",
        "l2",
        "seed",
        "max_views",
        "trace",
        "partition",
        "dataset",
        "records",
        "features",
        "classes",
        "separation",
        "idx_train_images",
        "idx_train_labels",
        "idx_test_images",
        "idx_test_labels",
        "out",
        "chain_out",
        "repetitions",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "nodes" => self.nodes = parse(key, v)?,
            "byz_ratio" => self.byz_ratio = parse(key, v)?,
            "byz_strategy" => self.byz_strategy = v.parse()?,
            "rounds" => self.rounds = parse(key, v)?,
            "epoch_length" => self.epoch_length = parse(key, v)?,
            "delta1" => self.delta1 = parse(key, v)?,
            "delta2" => self.delta2 = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "gar" => self.gar = v.parse()?,
            "scheme" => {
                self.scheme = match v.parse()? {
                    Scheme::HonestPick => return Err(Error::config("scheme must be pure, dp or spdl")),
                    s => s,
                }
            }
            "epsilon" => self.epsilon = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "calibration" => {
                self.calibration = match v {
                    "whole-run" => CalibrationMode::WholeRun,
                    "per-round" => CalibrationMode::PerRound,
                    _ => return Err(Error::config(format!("bad value {v:?} for {key}"))),
                }
            }
            "l2" => self.l2 = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "max_views" => self.max_views = parse(key, v)?,
            "trace" => self.trace = parse_bool(key, v)?,
            "partition" => self.partition = v.parse()?,
            "dataset" => self.dataset = v.parse()?,
            "records" => self.records = parse(key, v)?,
            "features" => self.features = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "separation" => self.separation = parse(key, v)?,
            "idx_train_images" => self.idx_train_images = Some(v.into()),
            "idx_train_labels" => self.idx_train_labels = Some(v.into()),
            "idx_test_images" => self.idx_test_images = Some(v.into()),
            "idx_test_labels" => self.idx_test_labels = Some(v.into()),
            "out" => self.out = v.into(),
            "chain_out" => self.chain_out = Some(v.into()),
            "repetitions" => self.repetitions = parse(key, v)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Flat `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| Error::config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Renders the config back into the file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let calibration = match self.calibration {
            CalibrationMode::WholeRun => "whole-run",
            CalibrationMode::PerRound => "per-round",
        };
        let dataset = match self.dataset {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Idx => "idx",
        };
        let pairs: [(&str, String); 25] = [
            ("nodes", self.nodes.to_string()),
            ("byz_ratio", self.byz_ratio.to_string()),
            ("byz_strategy", self.byz_strategy.to_string()),
            ("rounds", self.rounds.to_string()),
            ("epoch_length", self.epoch_length.to_string()),
            ("delta1", self.delta1.to_string()),
            ("delta2", self.delta2.to_string()),
            ("gamma", self.gamma.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("gar", self.gar.to_string()),
            ("scheme", self.scheme.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("delta", self.delta.to_string()),
            ("clip", self.clip.to_string()),
            ("calibration", calibration.to_string()),
            ("l2", self.l2.to_string()),
            ("seed", self.seed.to_string()),
            ("max_views", self.max_views.to_string()),
            ("trace", self.trace.to_string()),
            ("partition", self.partition.to_string()),
            ("dataset", dataset.to_string()),
            ("records", self.records.to_string()),
            ("features", self.features.to_string()),
            ("classes", self.classes.to_string()),
            ("separation", self.separation.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        let paths = [
            ("idx_train_images", &self.idx_train_images),
            ("idx_train_labels", &self.idx_train_labels),
            ("idx_test_images", &self.idx_test_images),
            ("idx_test_labels", &self.idx_test_labels),
            ("chain_out", &self.chain_out),
        ];
        for (k, v) in paths {
            if let Some(p) = v {
                let _ = writeln!(s, "{k} = {}", p.display());
            }
        }
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "repetitions = {}", self.repetitions);
        s
    }

    pub fn source(&self) -> Result<DatasetSource> {
        match self.dataset {
            DatasetKind::Synthetic => Ok(DatasetSource::Synthetic {
                records: self.records,
                features: self.features,
                classes: self.classes,
                separation: self.separation,
            }),
            DatasetKind::Idx => {
                let (Some(train_images), Some(train_labels)) =
                    (self.idx_train_images.clone(), self.idx_train_labels.clone())
                else {
                    return Err(Error::config("idx dataset needs idx_train_images and idx_train_labels"));
                };
                let test = match (self.idx_test_images.clone(), self.idx_test_labels.clone()) {
                    (Some(i), Some(l)) => Some((i, l)),
                    (None, None) => None,
                    _ => return Err(Error::config("idx test images and labels must be given together")),
                };
                Ok(DatasetSource::Idx {
                    train_images,
                    train_labels,
                    test,
                })
            }
        }
    }

    /// Loads or generates the train/test split for `seed`.
    pub fn load_dataset(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self.source()? {
            DatasetSource::Synthetic {
                records,
                features,
                classes,
                separation,
            } => generate_synthetic(records, features, classes, separation, seed),
            DatasetSource::Idx {
                train_images,
                train_labels,
                test,
            } => {
                let train = load_idx(&train_images, &train_labels)?;
                match test {
                    Some((i, l)) => Ok((train, load_idx(&i, &l)?)),
                    None => {
                        let n_train = (train.len() as f64 * TRAIN_FRACTION).round() as usize;
                        let idx: Vec<usize> = (0..train.len()).collect();
                        Ok((train.subset(&idx[..n_train])?, train.subset(&idx[n_train..])?))
                    }
                }
            }
        }
    }

    /// The simulator config for repetition seed `seed`.
    pub fn sim_config(&self, classes: usize, seed: u64) -> Result<SimConfig> {
        let dp = match self.scheme {
            Scheme::Pure => None,
            _ => Some(DpConfig::calibrated(
                self.epsilon,
                self.delta,
                self.clip,
                self.gamma,
                self.rounds,
                self.calibration,
            )?),
        };
        let cfg = SimConfig {
            nodes: self.nodes,
            byz_ratio: self.byz_ratio,
            script: AdversaryScript::constant(self.byz_strategy.clone()),
            rounds: self.rounds,
            epoch_length: self.epoch_length,
            delta1: self.delta1,
            delta2: self.delta2,
            gamma: self.gamma,
            batch_size: self.batch_size,
            gar: self.gar,
            scheme: self.scheme,
            dp,
            loss: LossSpec::softmax(classes).with_l2(self.l2),
            delta_tol: 1e-9,
            seed,
            exec: Exec::default(),
            max_views: self.max_views,
            trace: self.trace,
            diagnostics: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Dataset, partitions and simulator config for one repetition.
    pub fn prepare(&self, rep: u32) -> Result<(SimConfig, SimData)> {
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be positive"));
        }
        let seed = self.seed.wrapping_add(u64::from(rep));
        let (train, test) = self.load_dataset(seed)?;
        let cfg = self.sim_config(test.num_classes().max(train.num_classes()), seed)?;
        let partitions = partition_dataset(&train, self.nodes, self.partition, seed)?;
        Ok((cfg, SimData { partitions, test }))
    }

    /// Output path of repetition `rep`: the configured path for the first,
    /// `name-rep{k}.ext` for later ones.
    pub fn output_path(&self, rep: u32) -> PathBuf {
        if rep == 0 {
            return self.out.clone();
        }
        let stem = self.out.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
        let name = match self.out.extension().and_then(|s| s.to_str()) {
            Some(ext) => format!("{stem}-rep{rep}.{ext}"),
            None => format!("{stem}-rep{rep}"),
        };
        self.out.with_file_name(name)
    }
}

/// Runs every repetition and writes one CSV per repetition.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<(PathBuf, RunReport)>> {
    let mut out = Vec::new();
    for rep in 0..cfg.repetitions {
        let (sim, data) = cfg.prepare(rep)?;
        let report = run_experiment(&sim, &data)?;
        let path = cfg.output_path(rep);
        emit_csv(&report.metrics, &path)?;
        if let (Some(chain_path), Some(chain)) = (&cfg.chain_out, &report.chain) {
            let chain_path = if rep == 0 {
                chain_path.clone()
            } else {
                chain_path.with_extension(format!("rep{rep}.bin"))
            };
            crate::ledger::export_chain(chain, &chain_path)?;
        }
        out.push((path, report));
    }
    Ok(out)
}

/// One point of the parameter grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub nodes: usize,
    pub byz_ratio: f64,
    pub batch_size: usize,
    pub epsilon: f64,
}

impl GridCell {
    pub fn file_name(&self, scheme: Scheme) -> String {
        format!(
            "n{}_br{}_b{}_eps{}_{scheme}.csv",
            self.nodes,
            (self.byz_ratio * 100.0).round() as u32,
            self.batch_size,
            self.epsilon
        )
    }
}

/// N ∈ {4,10,20,30}, BR ∈ {0,10,20,30}%, batch ∈ {10,100}, ε ∈ {0.4,0.04,0.02}.
pub fn default_grid() -> Vec<GridCell> {
    let mut cells = Vec::new();
    for nodes in [4, 10, 20, 30] {
        for byz_ratio in [0.0, 0.1, 0.2, 0.3] {
            for batch_size in [10, 100] {
                for epsilon in [0.4, 0.04, 0.02] {
                    cells.push(GridCell {
                        nodes,
                        byz_ratio,
                        batch_size,
                        epsilon,
                    });
                }
            }
        }
    }
    cells
}

/// Outcome of one grid cell.
#[derive(Debug)]
pub struct GridResult {
    pub cell: GridCell,
    pub path: PathBuf,
    pub outcome: Result<Option<f64>>,
}

/// Runs every cell of `cells` on top of `base`, each into its own CSV in
/// `out_dir`. Cells run in parallel under [`Exec::Parallel`]; a failing
/// cell is reported without stopping the others.
pub fn run_grid(base: &ExperimentConfig, cells: &[GridCell], out_dir: &Path, exec: Exec) -> Result<Vec<GridResult>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    Ok(exec.map(cells.len(), |i| {
        let cell = cells[i];
        let mut cfg = base.clone();
        cfg.nodes = cell.nodes;
        cfg.byz_ratio = cell.byz_ratio;
        cfg.batch_size = cell.batch_size;
        cfg.epsilon = cell.epsilon;
        cfg.repetitions = 1;
        cfg.chain_out = None;
        cfg.out = out_dir.join(cell.file_name(cfg.scheme));
        let outcome = run(&cfg).map(|runs| runs[0].1.metrics.last().and_then(|m| m.test_error));
        GridResult {
            cell,
            path: cfg.out,
            outcome,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_config_text() {
        let cfg = ExperimentConfig::parse(
            "# comment\nnodes = 4\n\nbyz_ratio=0.25 # trailing\nbyz_strategy = silent\nscheme = dp\ngar = median\n",
        )
        .unwrap();
        assert_eq!(cfg.nodes, 4);
        assert_eq!(cfg.byz_ratio, 0.25);
        assert_eq!(cfg.byz_strategy, Strategy::Silent);
        assert_eq!(cfg.scheme, Scheme::Dp);
        assert_eq!(cfg.gar, GarKind::Median);
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_rejected() {
        assert!(ExperimentConfig::parse("colour = blue").is_err());
        assert!(ExperimentConfig::parse("nodes").is_err());
        assert!(ExperimentConfig::parse("nodes = four").is_err());
        assert!(ExperimentConfig::parse("scheme = honest-pick").is_err());
        let err = ExperimentConfig::parse("nodes = 4\nfoo = 1").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("idx_train_images", "a/b").unwrap();
        cfg.set("byz_strategy", "constant:1,2").unwrap();
        cfg.set("calibration", "per-round").unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_settable() {
        let values = |k: &str| match k {
            "byz_strategy" => "silent",
            "gar" => "krum",
            "scheme" => "spdl",
            "calibration" => "whole-run",
            "trace" => "false",
            "partition" => "iid",
            "dataset" => "synthetic",
            "byz_ratio" | "gamma" | "epsilon" | "delta" | "clip" | "l2" | "separation" => "0.5",
            _ => "3",
        };
        for key in ExperimentConfig::KEYS {
            ExperimentConfig::default().set(key, values(key)).unwrap();
        }
    }

    #[test]
    fn pure_scheme_has_no_noise() {
        let mut cfg = ExperimentConfig::default();
        cfg.scheme = Scheme::Pure;
        assert!(cfg.sim_config(2, 0).unwrap().dp.is_none());
        cfg.scheme = Scheme::Dp;
        assert!(cfg.sim_config(2, 0).unwrap().dp.is_some());
    }

    #[test]
    fn repetition_paths() {
        let mut cfg = ExperimentConfig::default();
        cfg.out = PathBuf::from("out/run.csv");
        assert_eq!(cfg.output_path(0), PathBuf::from("out/run.csv"));
        assert_eq!(cfg.output_path(2), PathBuf::from("out/run-rep2.csv"));
    }

    #[test]
    fn default_grid_shape() {
        let grid = default_grid();
        assert_eq!(grid.len(), 96);
        assert_eq!(grid[0].file_name(Scheme::Spdl), "n4_br0_b10_eps0.4_spdl.csv");
    }
}
