//! Run configuration: a TOML file merged over built-in defaults.

use std::path::{Path, PathBuf};

use ltm_core::lattice::{LatticeGeometry, PhiFour, PhiFourParams};
use ltm_core::metrics::{BootstrapConfig, DEFAULT_SIZES};
use ltm_core::ordering::{NeighborhoodSpec, OrderingKind};
use ltm_core::samplers::{HmcConfig, ImhConfig};
use ltm_core::training::TrainConfig;
use ltm_core::transport::{MapMode, MapSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeSection {
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub extent: Option<usize>,
    #[serde(rename = "D")]
    pub dim: usize,
}

impl Default for LatticeSection {
    fn default() -> Self {
        Self { extent: None, dim: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Couplings {
    pub m0_sq: f64,
    pub lambda0: f64,
}

impl Default for Couplings {
    fn default() -> Self {
        Self {
            m0_sq: -4.0,
            lambda0: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    pub ordering: OrderingKind,
    pub nbhd_order: u8,
    pub mode: MapMode,
    pub quadrature: usize,
    pub hidden: Vec<usize>,
}

impl Default for MapSection {
    fn default() -> Self {
        Self {
            ordering: OrderingKind::Checkerboard,
            nbhd_order: 2,
            mode: MapMode::Sparse,
            quadrature: 15,
            hidden: vec![64, 64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub orderings: Vec<OrderingKind>,
    pub nbhd_orders: Vec<u8>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            orderings: OrderingKind::ALL.to_vec(),
            nbhd_orders: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub sizes: Vec<usize>,
    pub resamples: usize,
    pub level: f64,
    pub block: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        let b = BootstrapConfig::default();
        Self {
            sizes: DEFAULT_SIZES.to_vec(),
            resamples: b.resamples,
            level: b.level,
            block: b.block,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FillInSection {
    pub sizes: Vec<usize>,
    pub orderings: Vec<OrderingKind>,
}

impl Default for FillInSection {
    fn default() -> Self {
        Self {
            sizes: vec![4, 8, 12, 16],
            orderings: OrderingKind::ALL.to_vec(),
        }
    }
}

/// Everything a command needs. The top-level `seed` is copied into every
/// section that draws random numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub lattice: LatticeSection,
    pub couplings: Couplings,
    pub map: MapSection,
    pub train: TrainConfig,
    pub hmc: HmcConfig,
    pub imh: ImhConfig,
    pub sweep: SweepSection,
    pub compare: CompareSection,
    pub fillin: FillInSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            lattice: LatticeSection::default(),
            couplings: Couplings::default(),
            map: MapSection::default(),
            train: TrainConfig::default(),
            hmc: HmcConfig::default(),
            imh: ImhConfig::default(),
            sweep: SweepSection::default(),
            compare: CompareSection::default(),
            fillin: FillInSection::default(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub smoke: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Reads `path` (or starts from defaults) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if overrides.smoke {
            config.apply_smoke();
        }
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(out) = &overrides.out {
            config.out = out.clone();
        }
        config.train.seed = config.seed;
        config.hmc.seed = config.seed;
        config.imh.seed = config.seed;
        Ok(config)
    }

    /// Small lattice, short training and short chains.
    pub fn apply_smoke(&mut self) {
        self.lattice.extent = Some(4);
        self.train.epochs = 200;
        self.train.batch = 64;
        self.train.ess_batch = 256;
        for (burn_in, length) in [
            (&mut self.hmc.burn_in, &mut self.hmc.length),
            (&mut self.imh.burn_in, &mut self.imh.length),
        ] {
            *burn_in = 200;
            *length = 2000;
        }
    }

    pub fn extent(&self) -> Result<usize, CliError> {
        self.lattice
            .extent
            .ok_or_else(|| CliError::Usage("missing required key `lattice.L`".into()))
    }

    pub fn geometry(&self) -> Result<LatticeGeometry, CliError> {
        LatticeGeometry::new(self.extent()?, self.lattice.dim).map_err(CliError::usage)
    }

    pub fn action(&self) -> Result<PhiFour, CliError> {
        let params = PhiFourParams::new(self.couplings.m0_sq, self.couplings.lambda0).map_err(CliError::usage)?;
        Ok(PhiFour::new(self.geometry()?, params))
    }

    pub fn map_spec(&self, ordering: OrderingKind, nbhd_order: u8) -> Result<MapSpec, CliError> {
        let nbhd = NeighborhoodSpec::new(nbhd_order).map_err(CliError::usage)?;
        Ok(MapSpec::new(self.extent()?, ordering, self.map.mode, nbhd)
            .with_dim(self.lattice.dim)
            .with_quadrature(self.map.quadrature)
            .with_hidden(&self.map.hidden))
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            resamples: self.compare.resamples,
            level: self.compare.level,
            block: self.compare.block,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is representable in TOML")
    }
}
