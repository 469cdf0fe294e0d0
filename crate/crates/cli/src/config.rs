//! Run configuration: flat TOML with an explicit schema version.
//!
//! Values are resolved in order: built-in defaults for the problem, the
//! config file, the `--quick` preset, then individual command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trumpetflow::flow::CouplingMode;
use trumpetflow::model::Architecture;
use trumpetflow::problems::{ProblemKind, ProblemSpec};
use trumpetflow::training::TrainConfig;
use trumpetflow::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub problem: ProblemKind,
    pub seed: u64,
    pub out: PathBuf,

    pub train_size: usize,
    pub test_size: usize,
    pub image_side: usize,
    pub mask_size: usize,
    pub noise_std: f64,
    pub sensors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_limit: Option<usize>,
    #[serde(with = "trumpetflow::io::extended_float")]
    pub snr_db: f64,

    pub latent_dim: usize,
    /// Widths visited by the injective part; empty means `[latent_dim, data_dim]`.
    pub g_widths: Vec<usize>,
    pub g_blocks: usize,
    pub injective_blocks: bool,
    pub g_actnorm: bool,
    pub skip: bool,
    pub h_blocks: usize,
    pub h_actnorm: bool,
    pub h_mode: CouplingMode,
    pub hidden: Vec<usize>,
    pub cond_hidden: usize,
    pub cond_features: usize,
    pub scale_clamp: f64,

    pub epochs_mse: usize,
    pub epochs_ml: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    /// Posterior samples per test item.
    pub k: usize,
}

impl RunConfig {
    pub fn defaults(problem: ProblemKind) -> Self {
        let spec = ProblemSpec::new(problem);
        let mut c = Self {
            schema_version: SCHEMA_VERSION,
            problem,
            seed: 0,
            out: PathBuf::from("runs").join(problem.name()),
            train_size: 18_000,
            test_size: 20,
            image_side: spec.image_side,
            mask_size: spec.mask_size,
            noise_std: spec.noise_std,
            sensors: spec.sensors,
            pair_limit: spec.pair_limit,
            snr_db: spec.snr_db,
            latent_dim: 2,
            g_widths: Vec::new(),
            g_blocks: 24,
            injective_blocks: false,
            g_actnorm: false,
            skip: false,
            h_blocks: 32,
            h_actnorm: true,
            // fixed-volume couplings can only rearrange the Gaussian, which
            // cannot fill a uniform fiber; the image problems use them
            h_mode: CouplingMode::Standard,
            hidden: vec![64, 64],
            cond_hidden: 32,
            cond_features: 8,
            scale_clamp: 2.0,
            epochs_mse: 150,
            epochs_ml: 150,
            batch_size: 128,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            k: 25,
        };
        if matches!(problem, ProblemKind::GrfInpaint | ProblemKind::Traveltime) {
            let d = c.image_side * c.image_side;
            c.train_size = 10_000;
            c.latent_dim = 64;
            c.g_widths = vec![64, 128, d];
            c.g_blocks = 1;
            c.injective_blocks = true;
            c.g_actnorm = true;
            c.skip = problem == ProblemKind::GrfInpaint;
            c.h_blocks = 6;
            c.h_mode = CouplingMode::Fvc;
            c.hidden = vec![128];
            c.cond_hidden = 64;
            c.cond_features = 32;
            c.epochs_mse = 40;
            c.epochs_ml = 40;
        }
        c
    }

    /// Small and fast: few blocks, few epochs and about 200 optimizer steps.
    pub fn apply_quick(&mut self) {
        match self.problem {
            ProblemKind::Torus | ProblemKind::Mobius => {
                self.g_blocks = 4;
                self.h_blocks = 6;
                self.hidden = vec![32, 32];
                self.train_size = 2_560;
                self.epochs_mse = 5;
                self.epochs_ml = 5;
            }
            ProblemKind::GrfInpaint | ProblemKind::Traveltime => {
                self.image_side = 8;
                self.mask_size = 4;
                self.latent_dim = 16;
                self.g_widths = vec![16, 32, 64];
                self.h_blocks = 2;
                self.hidden = vec![32];
                self.cond_hidden = 16;
                self.cond_features = 8;
                self.train_size = 1_280;
                self.epochs_mse = 10;
                self.epochs_ml = 10;
            }
        }
        self.test_size = self.test_size.min(5);
    }

    /// Load a config file over the problem defaults. The file must name a
    /// problem unless `problem` is given.
    pub fn resolve(file: Option<&Path>, problem: Option<ProblemKind>, quick: bool) -> Result<Self> {
        let table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if let Some(v) = table.get("schema_version") {
            if v.as_integer() != Some(SCHEMA_VERSION as i64) {
                return Err(Error::Config(format!("unsupported schema_version {v} (expected {SCHEMA_VERSION})")));
            }
        } else if file.is_some() {
            return Err(Error::Config(format!("config file must set schema_version = {SCHEMA_VERSION}")));
        }
        let from_file = match table.get("problem") {
            Some(v) => Some(v.as_str().ok_or_else(|| Error::Config("problem must be a string".into()))?.parse::<ProblemKind>()?),
            None => None,
        };
        let kind = problem
            .or(from_file)
            .ok_or_else(|| Error::Config("no problem given (use --problem or set problem in the config file)".into()))?;
        let mut base = toml::Table::try_from(Self::defaults(kind)).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in table {
            base.insert(k, v);
        }
        base.insert("problem".into(), toml::Value::String(kind.name().into()));
        let mut cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if quick {
            cfg.apply_quick();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        ProblemSpec {
            kind: self.problem,
            image_side: self.image_side,
            mask_size: self.mask_size,
            noise_std: self.noise_std,
            sensors: self.sensors,
            pair_limit: self.pair_limit,
            snr_db: self.snr_db,
        }
    }

    pub fn architecture(&self, data_dim: usize, cond_dim: usize) -> Result<Architecture> {
        if self.latent_dim > data_dim {
            return Err(Error::Config(format!("latent_dim {} exceeds data_dim {data_dim}", self.latent_dim)));
        }
        let mut a = Architecture::expander(self.latent_dim, data_dim, cond_dim, self.g_blocks, self.h_blocks);
        if !self.g_widths.is_empty() {
            a.g_widths = self.g_widths.clone();
        }
        a.injective_blocks = self.injective_blocks;
        a.g_actnorm = self.g_actnorm;
        a.skip = self.skip;
        a.h_actnorm = self.h_actnorm;
        a.h_mode = self.h_mode;
        a.hidden = self.hidden.clone();
        a.cond_hidden = self.cond_hidden;
        a.cond_features = self.cond_features;
        a.scale_clamp = self.scale_clamp;
        a.validate()?;
        Ok(a)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs_mse: self.epochs_mse,
            epochs_ml: self.epochs_ml,
            batch_size: self.batch_size,
            lr: self.lr,
            adam_betas: (self.adam_beta1, self.adam_beta2),
            adam_eps: self.adam_eps,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("train_size and test_size must be positive".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        self.train_config().validate()
    }
}
