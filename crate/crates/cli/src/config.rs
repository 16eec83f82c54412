//! Run configuration: one TOML file, one section per command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crossmag::data::GeneratorConfig;
use crossmag::distill::DistillConfig;
use crossmag::encoder::EncoderConfig;
use crossmag::eval::{ProbeConfig, N_BOOT};
use crossmag::mil::MilRunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_run_dir")]
    pub run_dir: PathBuf,
    #[serde(default = "d_log_level")]
    pub log_level: String,
}

fn d_run_dir() -> PathBuf {
    PathBuf::from("run")
}
fn d_log_level() -> String {
    "info".into()
}

impl Default for GlobalSection {
    fn default() -> Self {
        Self { seed: 0, run_dir: d_run_dir(), log_level: d_log_level() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_toy")]
    pub student: Preset,
    #[serde(default = "d_toy")]
    pub teacher: Preset,
}

fn d_toy() -> Preset {
    Preset::Toy
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { student: Preset::Toy, teacher: Preset::Toy }
    }
}

impl ModelSection {
    pub fn student_config(&self) -> EncoderConfig {
        match self.student {
            Preset::Toy => EncoderConfig::toy_student(),
            Preset::Reference => EncoderConfig::reference_student(),
        }
    }

    pub fn teacher_config(&self) -> EncoderConfig {
        match self.teacher {
            Preset::Toy => EncoderConfig::toy_teacher(),
            Preset::Reference => EncoderConfig::reference_teacher(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_slides: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub dominant_fraction: Option<f64>,
    #[serde(default)]
    pub cell_size: Option<usize>,
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub stripe_amplitude: Option<f64>,
    #[serde(default)]
    pub stain_jitter: Option<f64>,
    #[serde(default)]
    pub white_threshold: Option<f64>,
}

impl SynthSection {
    pub fn generator(&self) -> GeneratorConfig {
        let mut g = GeneratorConfig::new(self.height, self.width, self.n_classes);
        if let Some(v) = self.dominant_fraction {
            g.dominant_fraction = v;
        }
        if let Some(v) = self.cell_size {
            g.cell_size = v;
        }
        if let Some(v) = self.noise {
            g.noise = v;
        }
        if let Some(v) = self.stripe_amplitude {
            g.stripe_amplitude = v;
        }
        if let Some(v) = self.stain_jitter {
            g.stain_jitter = v;
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct E2eSection {
    /// Sweep trainable-block settings instead of a single run at
    /// `mil.n_trainable_blocks`.
    #[serde(default)]
    pub ablation: bool,
    /// Defaults to the standard grid for the student depth.
    #[serde(default)]
    pub grid: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    #[serde(default = "d_n_boot")]
    pub n_boot: usize,
}

fn d_n_boot() -> usize {
    N_BOOT
}

impl Default for StatsSection {
    fn default() -> Self {
        Self { n_boot: N_BOOT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    /// CSV with columns `model, patches_per_wsi, seconds_per_wsi` and
    /// optional stored derived columns. Defaults to the published figures.
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    #[serde(default = "d_reference")]
    pub reference: String,
    #[serde(default)]
    pub measure: bool,
    #[serde(default = "d_n_patches")]
    pub n_patches: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_warmup")]
    pub warmup_batches: usize,
}

fn d_reference() -> String {
    "XMAG".into()
}
fn d_n_patches() -> usize {
    64
}
fn d_batch() -> usize {
    16
}
fn d_warmup() -> usize {
    1
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            fixtures: None,
            reference: d_reference(),
            measure: false,
            n_patches: d_n_patches(),
            batch_size: d_batch(),
            warmup_batches: d_warmup(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub global: GlobalSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub distill: Option<DistillConfig>,
    #[serde(default)]
    pub mil: Option<MilRunConfig>,
    #[serde(default)]
    pub e2e: Option<E2eSection>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    #[serde(default)]
    pub stats: Option<StatsSection>,
    #[serde(default)]
    pub bench: Option<BenchSection>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
