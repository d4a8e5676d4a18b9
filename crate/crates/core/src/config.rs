//! Flat `key = value` run configuration.
//!
//! Every key has a default; unknown or repeated keys are errors, and the
//! whole file is validated before anything runs. [`RunConfig::to_text`]
//! renders the resolved configuration with every key, in a fixed order.

use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{ModalityTransform, SynthConfig};
use crate::error::{Error, Modality, Result};
use crate::eval::Protocol;
use crate::losses::LossConfig;
use crate::nn::{AdamConfig, BackboneConfig};
use crate::search::{SearchConfig, SearchSchedule};
use crate::train::{Schedule, TrainConfig};

/// Retrieval directions to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Directions {
    Both,
    VisToIr,
    IrToVis,
}

impl Directions {
    fn as_str(self) -> &'static str {
        match self {
            Directions::Both => "both",
            Directions::VisToIr => "vis-to-ir",
            Directions::IrToVis => "ir-to-vis",
        }
    }
}

impl FromStr for Directions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Directions::Both),
            "vis-to-ir" => Ok(Directions::VisToIr),
            "ir-to-vis" => Ok(Directions::IrToVis),
            _ => Err(Error::Config(format!("protocol.directions: unknown value '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: SynthConfig,
    /// Identities held out for testing (the last ones generated).
    pub test_identities: usize,
    pub backbone: BackboneConfig,
    pub search_epochs: usize,
    pub retrain_epochs: usize,
    pub sweep_epochs: usize,
    pub weights: AdamConfig,
    pub arch_lr: f64,
    pub p: usize,
    pub k: usize,
    pub flip: bool,
    pub train_ratio: f64,
    pub loss: LossConfig,
    /// Alignment terms during the search phase.
    pub phase1_c3mmd: bool,
    pub shots: usize,
    pub repeats: usize,
    pub directions: Directions,
    pub protocol_seed: u64,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: SynthConfig::default(),
            test_identities: 32,
            backbone: BackboneConfig::default(),
            search_epochs: 8,
            retrain_epochs: 40,
            sweep_epochs: 20,
            weights: AdamConfig::weights(),
            arch_lr: AdamConfig::arch().lr,
            p: 8,
            k: 4,
            flip: true,
            train_ratio: 0.8,
            loss: LossConfig::default(),
            phase1_c3mmd: true,
            shots: 1,
            repeats: 10,
            directions: Directions::Both,
            protocol_seed: 0,
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got '{v}'"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn transform_keys(prefix: &str, t: &ModalityTransform) -> Vec<(String, String)> {
    vec![
        (format!("{prefix}.offset"), t.offset.to_string()),
        (format!("{prefix}.noise"), t.noise.to_string()),
        (format!("{prefix}.pattern_amplitude"), t.pattern_amplitude.to_string()),
        (format!("{prefix}.pattern_period"), t.pattern_period.to_string()),
    ]
}

impl RunConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let d = &self.dataset;
        let b = &self.backbone;
        let mut v: Vec<(String, String)> = vec![
            ("dataset.identities".into(), d.identities.to_string()),
            ("dataset.test_identities".into(), self.test_identities.to_string()),
            ("dataset.images_per_modality".into(), d.images_per_modality.to_string()),
            ("dataset.resolution".into(), d.resolution.to_string()),
            ("dataset.shapes".into(), d.shapes.to_string()),
            ("dataset.jitter".into(), d.jitter.to_string()),
            ("dataset.seed".into(), d.seed.to_string()),
            ("dataset.namespace".into(), d.namespace.to_string()),
        ];
        v.extend(transform_keys("dataset.vis", &d.modality_a));
        v.extend(transform_keys("dataset.ir", &d.modality_b));
        v.extend([
            ("backbone.stem_width".into(), b.stem_width.to_string()),
            ("backbone.stem_stride".into(), b.stem_stride.to_string()),
            ("backbone.stem_pool".into(), b.stem_pool.to_string()),
            ("backbone.widths".into(), list(&b.widths)),
            ("backbone.blocks".into(), list(&b.blocks)),
            ("backbone.embedding_dim".into(), b.embedding_dim.to_string()),
            ("backbone.momentum".into(), b.momentum.to_string()),
            ("backbone.eps".into(), b.eps.to_string()),
            ("schedule.search_epochs".into(), self.search_epochs.to_string()),
            ("schedule.retrain_epochs".into(), self.retrain_epochs.to_string()),
            ("schedule.sweep_epochs".into(), self.sweep_epochs.to_string()),
            ("schedule.lr".into(), self.weights.lr.to_string()),
            ("schedule.beta1".into(), self.weights.beta1.to_string()),
            ("schedule.beta2".into(), self.weights.beta2.to_string()),
            ("schedule.weight_decay".into(), self.weights.weight_decay.to_string()),
            ("schedule.arch_lr".into(), self.arch_lr.to_string()),
            ("schedule.p".into(), self.p.to_string()),
            ("schedule.k".into(), self.k.to_string()),
            ("schedule.flip".into(), self.flip.to_string()),
            ("schedule.train_ratio".into(), self.train_ratio.to_string()),
            ("loss.lambda1".into(), self.loss.lambda1.to_string()),
            ("loss.lambda2".into(), self.loss.lambda2.to_string()),
            ("loss.margin".into(), self.loss.margin.to_string()),
            ("loss.cmmd".into(), self.loss.use_cmmd.to_string()),
            ("loss.cc".into(), self.loss.use_cc.to_string()),
            ("loss.phase1_c3mmd".into(), self.phase1_c3mmd.to_string()),
            ("protocol.shots".into(), self.shots.to_string()),
            ("protocol.repeats".into(), self.repeats.to_string()),
            ("protocol.directions".into(), self.directions.as_str().to_string()),
            ("protocol.seed".into(), self.protocol_seed.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("output_dir".into(), self.output_dir.display().to_string()),
        ]);
        v
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.dataset;
        let b = &mut self.backbone;
        match key {
            "dataset.identities" => d.identities = parse(key, v)?,
            "dataset.test_identities" => self.test_identities = parse(key, v)?,
            "dataset.images_per_modality" => d.images_per_modality = parse(key, v)?,
            "dataset.resolution" => d.resolution = parse(key, v)?,
            "dataset.shapes" => d.shapes = parse(key, v)?,
            "dataset.jitter" => d.jitter = parse(key, v)?,
            "dataset.seed" => d.seed = parse(key, v)?,
            "dataset.namespace" => d.namespace = parse(key, v)?,
            "dataset.vis.offset" => d.modality_a.offset = parse(key, v)?,
            "dataset.vis.noise" => d.modality_a.noise = parse(key, v)?,
            "dataset.vis.pattern_amplitude" => d.modality_a.pattern_amplitude = parse(key, v)?,
            "dataset.vis.pattern_period" => d.modality_a.pattern_period = parse(key, v)?,
            "dataset.ir.offset" => d.modality_b.offset = parse(key, v)?,
            "dataset.ir.noise" => d.modality_b.noise = parse(key, v)?,
            "dataset.ir.pattern_amplitude" => d.modality_b.pattern_amplitude = parse(key, v)?,
            "dataset.ir.pattern_period" => d.modality_b.pattern_period = parse(key, v)?,
            "backbone.stem_width" => b.stem_width = parse(key, v)?,
            "backbone.stem_stride" => b.stem_stride = parse(key, v)?,
            "backbone.stem_pool" => b.stem_pool = parse_bool(key, v)?,
            "backbone.widths" => b.widths = parse_list(key, v)?,
            "backbone.blocks" => b.blocks = parse_list(key, v)?,
            "backbone.embedding_dim" => b.embedding_dim = parse(key, v)?,
            "backbone.momentum" => b.momentum = parse(key, v)?,
            "backbone.eps" => b.eps = parse(key, v)?,
            "schedule.search_epochs" => self.search_epochs = parse(key, v)?,
            "schedule.retrain_epochs" => self.retrain_epochs = parse(key, v)?,
            "schedule.sweep_epochs" => self.sweep_epochs = parse(key, v)?,
            "schedule.lr" => self.weights.lr = parse(key, v)?,
            "schedule.beta1" => self.weights.beta1 = parse(key, v)?,
            "schedule.beta2" => self.weights.beta2 = parse(key, v)?,
            "schedule.weight_decay" => self.weights.weight_decay = parse(key, v)?,
            "schedule.arch_lr" => self.arch_lr = parse(key, v)?,
            "schedule.p" => self.p = parse(key, v)?,
            "schedule.k" => self.k = parse(key, v)?,
            "schedule.flip" => self.flip = parse_bool(key, v)?,
            "schedule.train_ratio" => self.train_ratio = parse(key, v)?,
            "loss.lambda1" => self.loss.lambda1 = parse(key, v)?,
            "loss.lambda2" => self.loss.lambda2 = parse(key, v)?,
            "loss.margin" => self.loss.margin = parse(key, v)?,
            "loss.cmmd" => self.loss.use_cmmd = parse_bool(key, v)?,
            "loss.cc" => self.loss.use_cc = parse_bool(key, v)?,
            "loss.phase1_c3mmd" => self.phase1_c3mmd = parse_bool(key, v)?,
            "protocol.shots" => self.shots = parse(key, v)?,
            "protocol.repeats" => self.repeats = parse(key, v)?,
            "protocol.directions" => self.directions = v.parse()?,
            "protocol.seed" => self.protocol_seed = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key '{k}' given twice", n + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.test_identities == 0 || self.test_identities >= self.dataset.identities {
            return Err(Error::Config("dataset.test_identities must leave training identities".into()));
        }
        let shape = self.backbone_shape();
        if shape.resolution != self.dataset.resolution {
            return Err(Error::Config("backbone input resolution must equal dataset.resolution".into()));
        }
        shape.validate()?;
        self.loss.validate()?;
        let w = &self.weights;
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !pos(w.lr) || !pos(self.arch_lr) || !(0.0..1.0).contains(&w.beta1) || !(0.0..1.0).contains(&w.beta2) {
            return Err(Error::Config("learning rates must be positive and betas in [0, 1)".into()));
        }
        if !(w.weight_decay >= 0.0 && w.weight_decay.is_finite()) {
            return Err(Error::Config("schedule.weight_decay must be non-negative".into()));
        }
        if self.p == 0 || self.k == 0 || self.k > self.dataset.images_per_modality {
            return Err(Error::Config("schedule.p and schedule.k must be positive, k <= images per modality".into()));
        }
        if self.p > self.train_identities() {
            return Err(Error::Config("schedule.p exceeds the number of training identities".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config("schedule.train_ratio must lie in (0, 1)".into()));
        }
        if self.shots == 0 || self.repeats == 0 {
            return Err(Error::Config("protocol.shots and protocol.repeats must be positive".into()));
        }
        Ok(())
    }

    pub fn train_identities(&self) -> usize {
        self.dataset.identities - self.test_identities
    }

    /// Backbone shape; routing is decided per command.
    pub fn backbone_shape(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            resolution: self.dataset.resolution,
            num_classes: self.train_identities(),
            ..self.backbone.clone()
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        let mut loss = self.loss;
        if !self.phase1_c3mmd {
            loss.use_cmmd = false;
            loss.use_cc = false;
        }
        SearchConfig {
            backbone: self.backbone_shape(),
            schedule: SearchSchedule {
                weights: Schedule::scaled(self.search_epochs, self.weights),
                arch: AdamConfig {
                    lr: self.arch_lr,
                    weight_decay: 0.0,
                    ..self.weights
                },
            },
            loss,
            p: self.p,
            k: self.k,
            flip: self.flip,
            train_ratio: self.train_ratio,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            schedule: Schedule::scaled(epochs, self.weights),
            loss: self.loss,
            p: self.p,
            k: self.k,
            flip: self.flip,
        }
    }

    pub fn protocols(&self) -> Vec<Protocol> {
        let mk = |q: Modality| Protocol {
            query: q,
            gallery: q.other(),
            shots: self.shots,
            repeats: self.repeats,
            seed: self.protocol_seed,
        };
        match self.directions {
            Directions::Both => vec![mk(Modality::Vis), mk(Modality::Ir)],
            Directions::VisToIr => vec![mk(Modality::Vis)],
            Directions::IrToVis => vec![mk(Modality::Ir)],
        }
    }
}
