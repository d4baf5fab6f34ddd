//! Run configuration: TOML primary, JSON accepted, with built-in
//! presets `toy` (CPU-sized) and `paper-cifar` (full-scale settings).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use shiftnet::optim::OptKind;
use shiftnet::shiftparam::SteVariant;
use shiftnet::space::SupernetCfg;

/// Network shape block (input channels and class count come from the
/// dataset at runtime).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetShape {
    pub cells: usize,
    pub init_channels: usize,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default)]
    pub reduction_positions: Option<Vec<usize>>,
    #[serde(default = "default_stem_multiplier")]
    pub stem_multiplier: usize,
}

fn default_nodes() -> usize {
    4
}

fn default_stem_multiplier() -> usize {
    3
}

impl NetShape {
    pub fn to_supernet_cfg(&self, in_channels: usize, classes: usize) -> SupernetCfg {
        SupernetCfg {
            cells: self.cells,
            init_channels: self.init_channels,
            nodes: self.nodes,
            reduction_positions: self.reduction_positions.clone(),
            stem_multiplier: self.stem_multiplier,
            in_channels,
            classes,
        }
    }
}

/// Dataset binding. `synthetic-2d` draws seeded two-class images
/// (gaussian blob patterns or rendered spiral arms); `idx-images` reads
/// IDX files; `raw-binary-cifar` reads the binary CIFAR-10 batches.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum DataSpec {
    #[serde(rename = "synthetic-2d")]
    Synthetic2d {
        #[serde(default = "default_pattern")]
        pattern: SyntheticPattern,
        samples: usize,
        #[serde(default)]
        test_samples: usize,
        #[serde(default = "default_hw")]
        height: usize,
        #[serde(default = "default_hw")]
        width: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    #[serde(rename = "idx-images")]
    IdxImages {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default = "default_mean")]
        normalize_mean: Vec<f64>,
        #[serde(default = "default_std")]
        normalize_std: Vec<f64>,
    },
    #[serde(rename = "raw-binary-cifar")]
    RawBinaryCifar {
        dir: PathBuf,
        #[serde(default = "default_cifar_mean")]
        normalize_mean: Vec<f64>,
        #[serde(default = "default_cifar_std")]
        normalize_std: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticPattern {
    Gaussians,
    Spirals,
}

fn default_pattern() -> SyntheticPattern {
    SyntheticPattern::Gaussians
}

fn default_hw() -> usize {
    8
}

fn default_noise() -> f64 {
    0.35
}

fn default_mean() -> Vec<f64> {
    vec![0.5]
}

fn default_std() -> Vec<f64> {
    vec![0.5]
}

fn default_cifar_mean() -> Vec<f64> {
    vec![0.4914, 0.4822, 0.4465]
}

fn default_cifar_std() -> Vec<f64> {
    vec![0.2470, 0.2435, 0.2616]
}

/// Search-phase hyperparameters (mirrors the core run config).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchHyper {
    pub operation_epochs: usize,
    pub topology_epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_w_optimizer")]
    pub w_optimizer: OptKind,
    #[serde(default = "default_w_lr")]
    pub w_lr: f64,
    #[serde(default = "default_w_wd")]
    pub w_weight_decay: f64,
    #[serde(default = "default_lambda")]
    pub shift_l2_lambda: f64,
    #[serde(default = "default_arch_lr")]
    pub arch_lr: f64,
    #[serde(default = "default_arch_wd")]
    pub arch_weight_decay: f64,
    #[serde(default = "default_t0")]
    pub t0: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default)]
    pub ste: SteVariant,
}

fn default_w_optimizer() -> OptKind {
    OptKind::RAdam
}

fn default_w_lr() -> f64 {
    0.01
}

fn default_w_wd() -> f64 {
    3e-4
}

fn default_lambda() -> f64 {
    3e-4
}

fn default_arch_lr() -> f64 {
    3e-4
}

fn default_arch_wd() -> f64 {
    1e-3
}

fn default_t0() -> f64 {
    10.0
}

fn default_t_end() -> f64 {
    0.02
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub supernet: NetShape,
    pub search: SearchHyper,
    pub data: DataSpec,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Shift,
    Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Genotype to instantiate: a JSON path or `builtin:<name>`.
    pub genotype: String,
    #[serde(default = "default_domain")]
    pub domain: Domain,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_w_optimizer")]
    pub optimizer: OptKind,
    #[serde(default = "default_w_lr")]
    pub lr: f64,
    #[serde(default = "default_w_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_lambda")]
    pub shift_l2_lambda: f64,
    #[serde(default)]
    pub ste: SteVariant,
    pub net: NetShape,
    pub data: DataSpec,
}

fn default_domain() -> Domain {
    Domain::Shift
}

pub fn toy_search_config() -> SearchConfig {
    SearchConfig {
        seed: 42,
        out_dir: PathBuf::from("runs/search-toy"),
        supernet: NetShape {
            cells: 5,
            init_channels: 8,
            nodes: 4,
            reduction_positions: None,
            stem_multiplier: 3,
        },
        search: SearchHyper {
            operation_epochs: 5,
            topology_epochs: 5,
            batch_size: 32,
            w_optimizer: OptKind::RAdam,
            w_lr: 0.01,
            w_weight_decay: 3e-4,
            shift_l2_lambda: 3e-4,
            arch_lr: 3e-4,
            arch_weight_decay: 1e-3,
            t0: 10.0,
            t_end: 0.02,
            ste: SteVariant::Standard,
        },
        data: DataSpec::Synthetic2d {
            pattern: SyntheticPattern::Gaussians,
            samples: 512,
            test_samples: 256,
            height: 8,
            width: 8,
            noise: 0.35,
        },
    }
}

pub fn paper_cifar_search_config() -> SearchConfig {
    SearchConfig {
        seed: 0,
        out_dir: PathBuf::from("runs/search-cifar"),
        supernet: NetShape {
            cells: 8,
            init_channels: 16,
            nodes: 4,
            reduction_positions: None,
            stem_multiplier: 3,
        },
        search: SearchHyper {
            operation_epochs: 30,
            topology_epochs: 40,
            batch_size: 128,
            w_optimizer: OptKind::RAdam,
            w_lr: 0.01,
            w_weight_decay: 3e-4,
            shift_l2_lambda: 3e-4,
            arch_lr: 3e-4,
            arch_weight_decay: 1e-3,
            t0: 10.0,
            t_end: 0.02,
            ste: SteVariant::Standard,
        },
        data: DataSpec::RawBinaryCifar {
            dir: PathBuf::from("data/cifar-10-batches-bin"),
            normalize_mean: default_cifar_mean(),
            normalize_std: default_cifar_std(),
        },
    }
}

pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        seed: 0,
        out_dir: PathBuf::from("runs/train-toy"),
        genotype: "builtin:cifar10-best".into(),
        domain: Domain::Shift,
        epochs: 20,
        batch_size: 32,
        optimizer: OptKind::RAdam,
        lr: 0.01,
        weight_decay: 3e-4,
        shift_l2_lambda: 3e-4,
        ste: SteVariant::Standard,
        net: NetShape {
            cells: 8,
            init_channels: 16,
            nodes: 4,
            reduction_positions: None,
            stem_multiplier: 3,
        },
        data: DataSpec::Synthetic2d {
            pattern: SyntheticPattern::Gaussians,
            samples: 1024,
            test_samples: 256,
            height: 8,
            width: 8,
            noise: 0.35,
        },
    }
}

pub fn paper_cifar_train_config() -> TrainConfig {
    TrainConfig {
        seed: 0,
        out_dir: PathBuf::from("runs/train-cifar"),
        genotype: "builtin:cifar10-best".into(),
        domain: Domain::Shift,
        epochs: 200,
        batch_size: 128,
        optimizer: OptKind::RAdam,
        lr: 0.01,
        weight_decay: 3e-4,
        shift_l2_lambda: 3e-4,
        ste: SteVariant::Standard,
        net: NetShape {
            cells: 20,
            init_channels: 36,
            nodes: 4,
            reduction_positions: None,
            stem_multiplier: 3,
        },
        data: DataSpec::RawBinaryCifar {
            dir: PathBuf::from("data/cifar-10-batches-bin"),
            normalize_mean: default_cifar_mean(),
            normalize_std: default_cifar_std(),
        },
    }
}

/// Loads a config file, TOML by default, JSON when the extension says so.
pub fn load_config_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let is_json = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or(false);
    if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing JSON {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing TOML {}", path.display()))
    }
}

/// Resolves `--preset`/`--config` into a search config.
pub fn resolve_search_config(
    preset: Option<&str>,
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<SearchConfig> {
    let mut cfg = match (config, preset) {
        (Some(path), _) => load_config_file(path)?,
        (None, Some("toy")) | (None, None) => toy_search_config(),
        (None, Some("paper-cifar")) => paper_cifar_search_config(),
        (None, Some(other)) => bail!("unknown preset '{other}' (toy, paper-cifar)"),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    Ok(cfg)
}

/// Resolves `--preset`/`--config` into a train config.
pub fn resolve_train_config(
    preset: Option<&str>,
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    genotype: Option<&str>,
    domain: Option<Domain>,
) -> Result<TrainConfig> {
    let mut cfg = match (config, preset) {
        (Some(path), _) => load_config_file(path)?,
        (None, Some("toy")) | (None, None) => toy_train_config(),
        (None, Some("paper-cifar")) => paper_cifar_train_config(),
        (None, Some(other)) => bail!("unknown preset '{other}' (toy, paper-cifar)"),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    if let Some(g) = genotype {
        cfg.genotype = g.to_string();
    }
    if let Some(d) = domain {
        cfg.domain = d;
    }
    Ok(cfg)
}
