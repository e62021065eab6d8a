//! Run configuration file: flat `key = value` lines covering the training,
//! network and augmentation settings. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub network: NetworkSpec,
    pub augment: AugmentConfig,
    /// Grow the training set to this many samples by augmentation.
    pub augment_to: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    lr0: Option<f64>,
    plateau_epochs: Option<usize>,
    lr_decay: Option<f64>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    early_stop_patience: Option<usize>,
    seed: Option<u64>,
    adam_beta1: Option<f64>,
    adam_beta2: Option<f64>,
    adam_eps: Option<f64>,
    dice_epsilon: Option<f64>,
    include_background: Option<bool>,
    side_supervision: Option<bool>,
    resize_height: Option<usize>,
    resize_width: Option<usize>,

    stem_channels: Option<usize>,
    enc_channels: Option<[usize; 3]>,
    enc_dilations: Option<[usize; 3]>,
    dec_dilations: Option<[usize; 3]>,
    cbam_ratio: Option<usize>,
    cbam_kernel: Option<usize>,
    n_classes: Option<usize>,
    side_scales: Option<[usize; 3]>,
    leaky_slope: Option<f64>,
    param_budget: Option<usize>,

    zoom_factor: Option<f64>,
    noise_mean: Option<f64>,
    noise_variance: Option<f64>,
    rotation_min_deg: Option<f64>,
    rotation_max_deg: Option<f64>,
    augment_seed: Option<u64>,
    augment_to: Option<usize>,
}

macro_rules! take {
    ($src:expr, $dst:expr, $($key:ident => $field:expr),* $(,)?) => {
        $(if let Some(v) = $src.$key { $field = v; })*
    };
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let f: ConfigFile =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let mut c = RunConfig::default();
        take!(f, c,
            lr0 => c.train.lr0,
            plateau_epochs => c.train.plateau_epochs,
            lr_decay => c.train.lr_decay,
            batch_size => c.train.batch_size,
            max_epochs => c.train.max_epochs,
            early_stop_patience => c.train.early_stop_patience,
            seed => c.train.seed,
            adam_beta1 => c.train.beta1,
            adam_beta2 => c.train.beta2,
            adam_eps => c.train.adam_eps,
            dice_epsilon => c.train.loss.epsilon,
            include_background => c.train.loss.include_background,
            side_supervision => c.train.loss.side_supervision,
            resize_height => c.train.resize_height,
            resize_width => c.train.resize_width,
            stem_channels => c.network.stem_channels,
            enc_channels => c.network.enc_channels,
            enc_dilations => c.network.enc_dilations,
            dec_dilations => c.network.dec_dilations,
            cbam_ratio => c.network.cbam_ratio,
            cbam_kernel => c.network.cbam_kernel,
            n_classes => c.network.n_classes,
            side_scales => c.network.side_scales,
            leaky_slope => c.network.slope,
            param_budget => c.network.param_budget,
            zoom_factor => c.augment.zoom_factor,
            noise_mean => c.augment.noise_mean,
            noise_variance => c.augment.noise_variance,
            rotation_min_deg => c.augment.rotation_range_deg.0,
            rotation_max_deg => c.augment.rotation_range_deg.1,
            augment_seed => c.augment.seed,
        );
        c.augment_to = f.augment_to;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.network.validate()?;
        if !self
            .train
            .resize_height
            .is_multiple_of(crate::network::SPATIAL_MULTIPLE)
            || !self
                .train
                .resize_width
                .is_multiple_of(crate::network::SPATIAL_MULTIPLE)
            || self.train.resize_height == 0
            || self.train.resize_width == 0
        {
            return Err(Error::Config(format!(
                "resize target {}x{} must be a positive multiple of {}",
                self.train.resize_width,
                self.train.resize_height,
                crate::network::SPATIAL_MULTIPLE
            )));
        }
        let (lo, hi) = self.augment.rotation_range_deg;
        if lo > hi {
            return Err(Error::Config(format!(
                "rotation range [{lo}, {hi}] is empty"
            )));
        }
        Ok(())
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let (t, n, a) = (&self.train, &self.network, &self.augment);
        let f = ConfigFile {
            lr0: Some(t.lr0),
            plateau_epochs: Some(t.plateau_epochs),
            lr_decay: Some(t.lr_decay),
            batch_size: Some(t.batch_size),
            max_epochs: Some(t.max_epochs),
            early_stop_patience: Some(t.early_stop_patience),
            seed: Some(t.seed),
            adam_beta1: Some(t.beta1),
            adam_beta2: Some(t.beta2),
            adam_eps: Some(t.adam_eps),
            dice_epsilon: Some(t.loss.epsilon),
            include_background: Some(t.loss.include_background),
            side_supervision: Some(t.loss.side_supervision),
            resize_height: Some(t.resize_height),
            resize_width: Some(t.resize_width),
            stem_channels: Some(n.stem_channels),
            enc_channels: Some(n.enc_channels),
            enc_dilations: Some(n.enc_dilations),
            dec_dilations: Some(n.dec_dilations),
            cbam_ratio: Some(n.cbam_ratio),
            cbam_kernel: Some(n.cbam_kernel),
            n_classes: Some(n.n_classes),
            side_scales: Some(n.side_scales),
            leaky_slope: Some(n.slope),
            param_budget: Some(n.param_budget),
            zoom_factor: Some(a.zoom_factor),
            noise_mean: Some(a.noise_mean),
            noise_variance: Some(a.noise_variance),
            rotation_min_deg: Some(a.rotation_range_deg.0),
            rotation_max_deg: Some(a.rotation_range_deg.1),
            augment_seed: Some(a.seed),
            augment_to: self.augment_to,
        };
        toml::to_string(&f).expect("config serialises")
    }
}
