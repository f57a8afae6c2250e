use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::globalsim::TrainConfig;
use crate::matcher::MatcherConfig;
use crate::preprocess::DetectorConfig;
use crate::sift::SiftParams;
use crate::vecindex::{Dtype, PartitionParams};

/// Every image is brought to this shorter edge before feature extraction.
pub const DEFAULT_MIN_EDGE: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: Option<PathBuf>,
    pub query_dir: Option<PathBuf>,
    pub features_file: Option<PathBuf>,
    pub index_file: Option<PathBuf>,
    pub embedding_file: Option<PathBuf>,
    pub projection_file: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// `image_id,x,y,w,h` boxes in query pixel coordinates. When set they
    /// replace the paste detector; queries without a row get no crop.
    pub crop_boxes: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus_dir: None,
            query_dir: None,
            features_file: None,
            index_file: None,
            embedding_file: None,
            projection_file: None,
            ground_truth: None,
            manifest: None,
            crop_boxes: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub dtype: Dtype,
    pub partitioned: bool,
    /// 0 selects ⌈√count⌉.
    pub nlist: usize,
    /// 0 selects `64 × nlist`.
    pub train_size: usize,
    pub nprobe: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            dtype: Dtype::U8,
            partitioned: false,
            nlist: 0,
            train_size: 0,
            nprobe: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSetup {
    /// Augmented views generated per reference image, besides the image itself.
    pub views_per_image: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub batch_size: usize,
    pub xbm_capacity: usize,
}

impl Default for TrainSetup {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            views_per_image: 4,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            margin: t.margin,
            batch_size: t.batch_size,
            xbm_capacity: t.xbm_capacity,
        }
    }
}

/// Recall branches enabled at query time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Branches {
    pub global: bool,
    pub local_original: bool,
    pub local_cropped: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            global: true,
            local_original: true,
            local_cropped: true,
        }
    }
}

/// One record of everything a run depends on. The top-level `seed` drives
/// k-means, training and query generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub threads: usize,
    pub seed: u64,
    pub min_edge: usize,
    pub paths: Paths,
    pub sift: SiftParams,
    pub matcher: MatcherConfig,
    pub branches: Branches,
    pub detector: DetectorConfig,
    pub index: IndexConfig,
    pub train: TrainSetup,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            seed: 0,
            min_edge: DEFAULT_MIN_EDGE,
            paths: Paths::default(),
            sift: SiftParams::default(),
            matcher: MatcherConfig::default(),
            branches: Branches::default(),
            detector: DetectorConfig::default(),
            index: IndexConfig::default(),
            train: TrainSetup::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes the effective configuration next to a command's outputs.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(PipelineError::Config("threads must be >= 1".into()));
        }
        if self.min_edge < 16 {
            return Err(PipelineError::Config("min_edge must be >= 16".into()));
        }
        if self.index.nprobe == 0 {
            return Err(PipelineError::Config("index.nprobe must be >= 1".into()));
        }
        self.sift.validate()?;
        self.matcher.validate()?;
        Ok(())
    }

    pub fn partition_params(&self) -> PartitionParams {
        PartitionParams {
            nlist: self.index.nlist,
            train_size: self.index.train_size,
            seed: self.seed,
            ..PartitionParams::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            margin: self.train.margin,
            batch_size: self.train.batch_size,
            xbm_capacity: self.train.xbm_capacity,
            seed: self.seed,
        }
    }

    /// A rayon pool of `threads` workers; every command runs inside one.
    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let mut cfg = PipelineConfig::default();
        cfg.paths.corpus_dir = Some("refs".into());
        cfg.matcher.min_points = 3;
        let text = cfg.to_toml().unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);

        let partial: PipelineConfig = toml::from_str("seed = 9\n[matcher]\nglobal_k = 4\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.matcher.global_k, 4);
        assert_eq!(partial.sift, SiftParams::default());
        assert!(toml::from_str::<PipelineConfig>("bogus = 1\n").is_err());
    }
}
