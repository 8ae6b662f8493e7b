//! The run config file: a TOML document with `[dataset]`, `[net]`,
//! `[trainer]` and `[eval]` tables. Every key is optional; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crossgrad::data::{
    gen_rotated_clouds, gen_rotated_glyphs, load_idx_images, rotated_image_domains, DomainDataset,
    DEFAULT_ANGLES,
};
use crossgrad::eval::{ValidationRule, BASE_EPS_CLOUDS, BASE_EPS_GLYPHS};
use crossgrad::nets::{ConvLayer, FeatureActivation};
use crossgrad::{Method, NetConfig, TrainerConfig};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub net: NetSection,
    pub trainer: TrainerConfig,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Rotated 2-D anchor clouds.
    #[default]
    Clouds,
    /// Procedural rotated digit glyphs.
    Glyphs,
    /// Rotated images read from an IDX image/label file pair.
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// One domain per rotation angle, in degrees.
    pub angles: Vec<f64>,
    pub per_domain: usize,
    /// Gaussian sd for clouds, uniform pixel amplitude for glyphs; unused for
    /// IDX input.
    pub noise: f64,
    pub seed: u64,
    pub num_labels: usize,
    /// Glyph side length in pixels.
    pub image_size: usize,
    /// IDX files, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Clouds,
            angles: DEFAULT_ANGLES.to_vec(),
            per_domain: 100,
            noise: 0.15,
            seed: 0,
            num_labels: 6,
            image_size: 16,
            images: None,
            labels: None,
        }
    }
}

/// Overrides of the network defaults for the dataset's input kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_activation: Option<FeatureActivation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv: Option<Vec<ConvLayer>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concat_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub methods: Vec<Method>,
    /// Number of seeds; runs use `seed_base .. seed_base + seeds`.
    pub seeds: usize,
    pub seed_base: u64,
    /// Select (α, ε) on the validation domain for every run.
    pub sweep: bool,
    pub tie_alpha: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_eps: Option<f64>,
    pub validation: ValidationRule,
    /// Domain ids held out in turn by `lodo`; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out: Option<Vec<usize>>,
    /// Fixed validation and test domain ids for `train`, `sweep` and `embed`.
    pub val_domains: Vec<usize>,
    pub test_domains: Vec<usize>,
    /// Angles `(a, mid, b)` scored by `embed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triple: Option<[f64; 3]>,
    pub save_checkpoints: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            seeds: 5,
            seed_base: 0,
            sweep: true,
            tie_alpha: true,
            base_eps: None,
            validation: ValidationRule::default(),
            held_out: None,
            val_domains: Vec::new(),
            test_domains: Vec::new(),
            triple: None,
            save_checkpoints: false,
            out_dir: None,
        }
    }
}

impl EvalSection {
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed_base + i).collect()
    }
}

/// A parsed config plus the directory relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let config = parse_config(&text)
        .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    Ok(LoadedConfig {
        config,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

impl RunConfig {
    /// Fills every optional default so the echoed config pins the run.
    pub fn resolved(&self, net: &NetConfig) -> RunConfig {
        let mut out = self.clone();
        out.net = NetSection {
            hidden_sizes: Some(net.hidden_sizes.clone()),
            domain_hidden: Some(net.domain_hidden.clone()),
            g_dim: Some(net.g_dim),
            g_activation: Some(net.g_activation),
            conv: Some(net.conv.clone()),
            concat_after: Some(net.concat_index()),
        };
        out.eval.base_eps = Some(self.base_eps());
        out
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn base_eps(&self) -> f64 {
        self.eval.base_eps.unwrap_or(match self.dataset.kind {
            DatasetKind::Clouds => BASE_EPS_CLOUDS,
            DatasetKind::Glyphs | DatasetKind::Idx => BASE_EPS_GLYPHS,
        })
    }

    /// The network for `ds` with `num_domains` domain classes.
    pub fn net_for(&self, ds: &DomainDataset, num_domains: usize) -> Result<NetConfig, CliError> {
        let labels = ds.label_count;
        let mut net = match ds.input_shape.as_slice() {
            [dim] => NetConfig::vector(*dim, labels, num_domains),
            [c, h, w] if h == w => NetConfig::image(*c, *h, labels, num_domains),
            other => {
                return Err(CliError::Config(format!("unsupported input shape {other:?}")));
            }
        };
        let s = &self.net;
        if let Some(v) = &s.hidden_sizes {
            net.hidden_sizes = v.clone();
        }
        if let Some(v) = &s.domain_hidden {
            net.domain_hidden = v.clone();
        }
        if let Some(v) = s.g_dim {
            net.g_dim = v;
        }
        if let Some(v) = s.g_activation {
            net.g_activation = v;
        }
        if let Some(v) = &s.conv {
            net.conv = v.clone();
        }
        if s.concat_after.is_some() {
            net.concat_after = s.concat_after;
        }
        net.validate()
            .map_err(|e| CliError::Config(format!("[net]: {e}")))?;
        Ok(net)
    }
}

pub fn build_dataset(section: &DatasetSection, base_dir: &Path) -> Result<DomainDataset, CliError> {
    let s = section;
    let ds = match s.kind {
        DatasetKind::Clouds => gen_rotated_clouds(s.num_labels, &s.angles, s.per_domain, s.noise, s.seed),
        DatasetKind::Glyphs => gen_rotated_glyphs(
            s.num_labels,
            &s.angles,
            s.per_domain,
            s.image_size,
            s.noise,
            s.seed,
        ),
        DatasetKind::Idx => {
            let (Some(images), Some(labels)) = (&s.images, &s.labels) else {
                return Err(CliError::Config(
                    "[dataset]: kind = \"idx\" needs `images` and `labels`".into(),
                ));
            };
            let (imgs, labs) = load_idx_images(&base_dir.join(images), &base_dir.join(labels))
                .map_err(|e| CliError::Config(format!("[dataset]: {e}")))?;
            rotated_image_domains(&imgs, &labs, &s.angles, s.per_domain)
        }
    };
    ds.map_err(|e| CliError::Config(format!("[dataset]: {e}")))
}
