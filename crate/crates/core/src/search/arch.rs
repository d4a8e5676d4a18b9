use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, BackboneConfig, Network};

/// Softmax of one layer's `(alpha_separate, alpha_share)`, computed exactly
/// as the tape does so host and graph values agree bit for bit.
pub fn arch_probs(alpha_separate: f64, alpha_share: f64) -> (f64, f64) {
    let m = alpha_separate.max(alpha_share);
    let e1 = (alpha_separate - m).exp();
    let e2 = (alpha_share - m).exp();
    let s = 0.0 + e1 + e2;
    (e1 / s, e2 / s)
}

/// Architecture logits of a searchable network plus their optimizer settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    pub alphas: Vec<(f64, f64)>,
    pub optimizer: AdamConfig,
}

impl ArchParams {
    pub fn from_network(net: &Network) -> Self {
        Self {
            alphas: net.alphas(),
            optimizer: AdamConfig::arch(),
        }
    }

    pub fn probs(&self) -> Vec<(f64, f64)> {
        self.alphas.iter().map(|&(a, b)| arch_probs(a, b)).collect()
    }

    pub fn discretize(&self) -> ArchBitstring {
        discretize(&self.alphas)
    }
}

/// Per-layer `'0'` (separate) / `'1'` (shared) string in topological order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchBitstring(String);

impl ArchBitstring {
    /// All-shared architecture.
    pub fn shared(len: usize) -> Self {
        Self("1".repeat(len))
    }

    pub fn from_mask(separate: &[bool]) -> Self {
        Self(separate.iter().map(|&s| if s { '0' } else { '1' }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// `true` where the layer is separate.
    pub fn mask(&self) -> Vec<bool> {
        self.0.bytes().map(|b| b == b'0').collect()
    }

    pub fn separate_count(&self) -> usize {
        self.0.bytes().filter(|&b| b == b'0').count()
    }

    /// Errors unless the length matches the backbone's layer count.
    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::Architecture(format!(
                "bitstring has {} bits, backbone has {expected} normalization layers",
                self.len()
            )));
        }
        Ok(())
    }

    /// Fixed batch-norm backbone with this routing.
    pub fn backbone(&self, shape: &BackboneConfig) -> Result<BackboneConfig> {
        self.check_len(shape.norm_layer_count())?;
        Ok(shape.with_norm_mask(self.mask()))
    }

    /// File form: `#` comment lines naming the layer ranges of each stage,
    /// then the bit line.
    pub fn to_file(&self, shape: &BackboneConfig) -> Result<String> {
        self.check_len(shape.norm_layer_count())?;
        let blocks = shape.norm_layer_blocks();
        let mut out = format!(
            "# normalization routing, one bit per layer: 0 = separate, 1 = shared ({} layers)\n",
            self.len()
        );
        let mut start = 0;
        while start < blocks.len() {
            let stage = BackboneConfig::stage_of(&blocks[start]);
            let mut end = start;
            while end < blocks.len() && BackboneConfig::stage_of(&blocks[end]) == stage {
                end += 1;
            }
            let mut names: Vec<&str> = blocks[start..end].iter().map(String::as_str).collect();
            names.dedup();
            out.push_str(&format!(
                "# {stage}: bits {start}-{} [{}] ({})\n",
                end - 1,
                &self.0[start..end],
                names.join(", ")
            ));
            start = end;
        }
        out.push_str(&self.0);
        out.push('\n');
        Ok(out)
    }

    /// Parses the file form; comment and blank lines are ignored and exactly
    /// one bit line must remain.
    pub fn from_file(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let bits = lines
            .next()
            .ok_or_else(|| Error::Architecture("architecture file has no bit line".into()))?;
        if lines.next().is_some() {
            return Err(Error::Architecture("architecture file has more than one bit line".into()));
        }
        bits.parse()
    }
}

impl FromStr for ArchBitstring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Architecture("empty bitstring".into()));
        }
        if let Some((i, c)) = s.char_indices().find(|&(_, c)| c != '0' && c != '1') {
            return Err(Error::Architecture(format!("invalid character {c:?} at position {i}")));
        }
        Ok(Self(s.to_string()))
    }
}

impl fmt::Display for ArchBitstring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// `'0'` where `p1 > p2`, else `'1'`; an exact tie goes to sharing.
pub fn discretize(alphas: &[(f64, f64)]) -> ArchBitstring {
    ArchBitstring(
        alphas
            .iter()
            .map(|&(a, b)| {
                let (p1, p2) = arch_probs(a, b);
                if p1 > p2 {
                    '0'
                } else {
                    '1'
                }
            })
            .collect(),
    )
}
