//! Run configuration: a single JSON file drives every CLI command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::synth::SynthConfig;
use crate::io::{manifest, Dataset, Dims};
use crate::model::VariantSpec;
use crate::optim::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimsProfile {
    #[default]
    Desk,
    Paper,
}

/// Per-field overrides on top of a dims profile.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DimsOverrides {
    pub h: Option<usize>,
    pub w: Option<usize>,
    pub d_g: Option<usize>,
    pub d_r: Option<usize>,
    pub d_t: Option<usize>,
    pub d_p: Option<usize>,
    pub b: Option<usize>,
    pub d_out: Option<usize>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub l: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DimsSpec {
    pub profile: DimsProfile,
    #[serde(flatten)]
    pub overrides: DimsOverrides,
}

impl DimsSpec {
    pub fn resolve(&self) -> Dims {
        let mut d = match self.profile {
            DimsProfile::Desk => Dims::desk(),
            DimsProfile::Paper => Dims::paper(),
        };
        let o = &self.overrides;
        for (slot, ov) in [
            (&mut d.h, o.h),
            (&mut d.w, o.w),
            (&mut d.d_g, o.d_g),
            (&mut d.d_r, o.d_r),
            (&mut d.d_t, o.d_t),
            (&mut d.d_p, o.d_p),
            (&mut d.b, o.b),
            (&mut d.d_out, o.d_out),
            (&mut d.n, o.n),
            (&mut d.m, o.m),
            (&mut d.l, o.l),
        ] {
            if let Some(v) = ov {
                *slot = v;
            }
        }
        d
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// how many bundles to put in the checked batch
    pub batch: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-6, tol: 1e-6, batch: 2 }
    }
}

/// Everything a run needs. Exactly one dataset source must be set:
/// either a manifest on disk or a synthetic generator config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// test fold in {0, 1, 2}
    pub fold: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    /// custom ablation grid (JSON list of variant records); the standard
    /// component ladder runs when unset
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<PathBuf>,
    /// base profile plus overrides; authoritative for synthetic data
    pub dims: DimsSpec,
    /// artifact directory: checkpoints, generated datasets, reports
    pub out_dir: PathBuf,
    pub variant: VariantSpec,
    pub train: TrainConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            fold: 0,
            manifest: None,
            synth: None,
            grid: None,
            dims: DimsSpec::default(),
            out_dir: PathBuf::from("out"),
            variant: VariantSpec::default(),
            train: TrainConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.manifest, &self.synth) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config(
                    "config must set exactly one dataset source: `manifest` or `synth`".into(),
                ));
            }
            _ => {}
        }
        if self.fold > 2 {
            return Err(Error::Config(format!("fold {} not in {{0,1,2}}", self.fold)));
        }
        self.dims.resolve().validate()?;
        if let Some(s) = &self.synth {
            let mut s = s.clone();
            s.dims = self.dims.resolve();
            s.validate()?;
        }
        if self.train.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("train.milestones must be strictly increasing".into()));
        }
        self.variant.validate()?;
        if self.gradcheck.step <= 0.0 || self.gradcheck.tol <= 0.0 || self.gradcheck.batch == 0 {
            return Err(Error::Config("gradcheck: step, tol and batch must be positive".into()));
        }
        Ok(())
    }

    /// Loads or generates the configured dataset. For the synthetic
    /// source, the run-level dims spec overrides whatever the synth block
    /// carries; for a manifest, the header is authoritative.
    pub fn load_dataset(&self) -> Result<Dataset> {
        match (&self.manifest, &self.synth) {
            (Some(path), None) => manifest::read_dataset(path),
            (None, Some(synth)) => {
                let mut synth = synth.clone();
                synth.dims = self.dims.resolve();
                crate::io::synth::generate(&synth)
            }
            _ => Err(Error::Config(
                "config must set exactly one dataset source: `manifest` or `synth`".into(),
            )),
        }
    }

    /// FNV-1a over the canonical JSON form; lets reports state which
    /// configuration produced them without embedding the whole file.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}
