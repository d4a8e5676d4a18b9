use std::fmt;

use crate::error::{Error, Result};
use crate::nn::{BackboneConfig, SeparationScheme, SeparationUnit};

/// How separated block sets are enumerated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SweepMode {
    /// Each residual block separated on its own.
    SingleBlock,
    /// The `fixed` blocks plus, in turn, each residual block outside their
    /// stages.
    FixedPlusTraverse { fixed: Vec<String> },
}

/// One manually specified separation scheme.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepScheme {
    pub unit: SeparationUnit,
    /// Separated blocks; empty for the all-shared baseline.
    pub blocks: Vec<String>,
}

impl SweepScheme {
    pub fn is_baseline(&self) -> bool {
        self.blocks.is_empty()
    }

    /// `none` for the baseline, else the `+`-joined block names.
    pub fn label(&self) -> String {
        if self.blocks.is_empty() {
            "none".into()
        } else {
            self.blocks.join("+")
        }
    }

    /// Batch-norm backbone of the given shape with this scheme.
    pub fn backbone(&self, shape: &BackboneConfig) -> BackboneConfig {
        let mut cfg = shape.with_norm_mask(Vec::new());
        cfg.separation = Some(SeparationScheme::Blocks {
            unit: self.unit,
            blocks: self.blocks.clone(),
        });
        cfg
    }
}

impl fmt::Display for SweepScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.label(), self.unit.as_str())
    }
}

/// The all-shared baseline first, then every scheme of `mode` for each unit
/// in `units`, unit-major.
pub fn sweep_enumerate(shape: &BackboneConfig, mode: &SweepMode, units: &[SeparationUnit]) -> Result<Vec<SweepScheme>> {
    let first = *units
        .first()
        .ok_or_else(|| Error::InvalidArgument("sweep needs at least one unit".into()))?;
    let blocks = shape.res_block_names();
    let sets: Vec<Vec<String>> = match mode {
        SweepMode::SingleBlock => blocks.iter().map(|b| vec![b.clone()]).collect(),
        SweepMode::FixedPlusTraverse { fixed } => {
            if fixed.is_empty() {
                return Err(Error::InvalidArgument("no fixed blocks given".into()));
            }
            if let Some(b) = fixed.iter().find(|b| !blocks.contains(b)) {
                return Err(Error::Config(format!("unknown residual block '{b}'")));
            }
            let stages: Vec<&str> = fixed.iter().map(|b| BackboneConfig::stage_of(b)).collect();
            blocks
                .iter()
                .filter(|b| !stages.contains(&BackboneConfig::stage_of(b)))
                .map(|b| {
                    let mut s = fixed.clone();
                    s.push(b.clone());
                    s
                })
                .collect()
        }
    };
    let mut out = vec![SweepScheme {
        unit: first,
        blocks: Vec::new(),
    }];
    for &unit in units {
        out.extend(sets.iter().map(|b| SweepScheme { unit, blocks: b.clone() }));
    }
    Ok(out)
}

/// All residual blocks of a stage, e.g. `s2` -> `[s2_1]`.
pub fn stage_blocks(shape: &BackboneConfig, stage: &str) -> Result<Vec<String>> {
    let v: Vec<String> = shape
        .res_block_names()
        .into_iter()
        .filter(|b| BackboneConfig::stage_of(b) == stage)
        .collect();
    if v.is_empty() {
        return Err(Error::Config(format!("stage '{stage}' has no residual blocks")));
    }
    Ok(v)
}
