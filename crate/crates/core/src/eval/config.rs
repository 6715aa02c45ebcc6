//! The run configuration file (TOML).
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/example"      # optional
//!
//! [train]                       # see TrainConfig
//! variant = "dwt-mec"
//! epochs = 30
//!
//! [model]
//! arch = "mlp"                  # or "cnn"
//! hidden = [64, 64]
//! n_dwt = 2
//!
//! [data.synthetic]              # or [data.idx]
//! noise = 0.3
//!
//! [perturb]
//! feature_noise = 0.05
//! ```
//!
//! Unknown keys are rejected; missing keys take the documented defaults.
//! Relative paths are resolved against the directory of the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{apply_affine_to_set, gen_synthetic_shift, load_idx, LabeledSet, PerturbSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::layer::DomainTag;
use crate::model::{build_cnn, build_mlp, Network, NormConfig};
use crate::train::TrainConfig;

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "DWT_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Hidden widths of the MLP.
    pub hidden: Vec<usize>,
    /// Output channels of each CNN block.
    pub channels: Vec<usize>,
    /// Leading normalization layers that whiten; the rest are batch norm.
    pub n_dwt: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Mlp,
            hidden: vec![64, 64],
            channels: vec![8, 16],
            n_dwt: 2,
        }
    }
}

impl ModelConfig {
    /// Widths of the normalization layers, in order.
    pub fn norm_widths(&self) -> &[usize] {
        match self.arch {
            Arch::Mlp => &self.hidden,
            Arch::Cnn => &self.channels,
        }
    }
}

/// A fixed warp applied to every image of the source set to make a
/// pseudo-target domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarpConfig {
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear_deg: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig {
            rotation_deg: 25.0,
            scale: 0.9,
            shear_deg: 15.0,
            tx: 0.0,
            ty: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Real target files; when absent the target is the warped source.
    #[serde(default)]
    pub target_images: Option<PathBuf>,
    #[serde(default)]
    pub target_labels: Option<PathBuf>,
    /// Keep only the first `limit` samples of each file.
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub target_warp: WarpConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Idx(IdxConfig),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub perturb: PerturbSpec,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: None,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            perturb: PerturbSpec::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.perturb
            .validate()
            .map_err(|e| Error::Config(format!("`perturb`: {e}")))?;
        if let DataConfig::Synthetic(spec) = &self.data {
            spec.validate()
                .map_err(|e| Error::Config(format!("`data.synthetic`: {e}")))?;
            if self.model.arch == Arch::Cnn {
                return Err(Error::Config(
                    "`model.arch`: the cnn needs image data ([data.idx])".into(),
                ));
            }
        }
        let widths = self.model.norm_widths();
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(
                "`model`: layer widths must be non-empty and positive".into(),
            ));
        }
        if self.model.n_dwt > widths.len() {
            return Err(Error::Config(format!(
                "`model.n_dwt`: {} whitening layers but only {} normalization layers",
                self.model.n_dwt,
                widths.len()
            )));
        }
        self.check_grouping(self.train.group_size, self.model.n_dwt)
            .map_err(|e| Error::Config(format!("`train.group_size`: {e}")))
    }

    /// Whether `g` divides the width of every whitening layer.
    pub fn check_grouping(&self, g: usize, n_dwt: usize) -> std::result::Result<(), String> {
        let widths = self.model.norm_widths();
        if n_dwt > widths.len() {
            return Err(format!(
                "{n_dwt} whitening layers requested for {} normalization layers",
                widths.len()
            ));
        }
        match widths[..n_dwt].iter().find(|&&w| g == 0 || w % g != 0) {
            Some(w) => Err(format!("group size {g} does not divide layer width {w}")),
            None => Ok(()),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Output directory: explicit argument, then the environment override,
    /// then the file's `out_dir`, then `runs/`.
    pub fn out_dir(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        match &self.out_dir {
            Some(p) => self.resolve(p),
            None => PathBuf::from("runs"),
        }
    }

    /// `(source, target)` for this configuration and seed, shaped for the
    /// configured architecture.
    pub fn load_data(&self) -> Result<(LabeledSet, LabeledSet)> {
        let (s, t) = match &self.data {
            DataConfig::Synthetic(spec) => gen_synthetic_shift(spec, self.seed)?,
            DataConfig::Idx(idx) => {
                let limit = |set: LabeledSet| match idx.limit {
                    Some(n) if n < set.len() => set.subset(&(0..n).collect::<Vec<_>>()),
                    _ => set,
                };
                let source = limit(load_idx(&self.resolve(&idx.images), &self.resolve(&idx.labels))?);
                let target = match (&idx.target_images, &idx.target_labels) {
                    (Some(i), Some(l)) => limit(load_idx(&self.resolve(i), &self.resolve(l))?),
                    (None, None) => apply_affine_to_set(&source, &idx.target_warp.params()),
                    _ => {
                        return Err(Error::Config(
                            "`data.idx`: give both target_images and target_labels or neither".into(),
                        ))
                    }
                };
                (source, target.with_domain(DomainTag::Target))
            }
        };
        Ok((self.shape_for_model(s)?, self.shape_for_model(t)?))
    }

    fn shape_for_model(&self, set: LabeledSet) -> Result<LabeledSet> {
        match (self.model.arch, set.sample_shape().len()) {
            (Arch::Mlp, 1) | (Arch::Cnn, 3) => Ok(set),
            (Arch::Mlp, _) => {
                let (n, len) = (set.len(), set.inputs.row_len());
                Ok(LabeledSet {
                    inputs: set.inputs.reshape(&[n, len])?,
                    ..set
                })
            }
            (Arch::Cnn, _) => Err(Error::Config(format!(
                "`model.arch`: the cnn needs c×h×w samples, got {:?}",
                set.sample_shape()
            ))),
        }
    }

    /// Build the configured network for samples of `sample_shape`, with the
    /// grouping and whitening depth overridden when given.
    pub fn build_network(
        &self,
        sample_shape: &[usize],
        classes: usize,
        group_size: usize,
        n_dwt: usize,
    ) -> Result<Network> {
        let norm = NormConfig {
            n_dwt,
            group_size,
            epsilon: self.train.epsilon,
            momentum: self.train.momentum,
        };
        match (self.model.arch, sample_shape) {
            (Arch::Mlp, &[d]) => build_mlp(d, &self.model.hidden, classes, &norm, self.seed),
            (Arch::Cnn, &[c, h, w]) => build_cnn((c, h, w), &self.model.channels, classes, &norm, self.seed),
            _ => Err(config_err(Error::shape(format!(
                "{:?} model cannot take samples of shape {sample_shape:?}",
                self.model.arch
            )))),
        }
    }
}

impl WarpConfig {
    pub fn params(&self) -> crate::data::AffineParams {
        crate::data::AffineParams {
            tx: self.tx,
            ty: self.ty,
            rotation_deg: self.rotation_deg,
            scale: self.scale,
            shear_deg: self.shear_deg,
        }
    }
}
