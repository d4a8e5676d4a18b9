//! The two-phase protocol: search on the training identities, retrain the
//! discretized architecture on them, evaluate on held-out identities. Also
//! baselines, manual separation sweeps and architecture export.
//!
//! Every command validates its inputs before creating any output, writes
//! the resolved configuration next to its artifacts, and produces identical
//! bytes for identical configuration and seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{derive_seed, generate_dataset, holdout_identities, Checkpoint, Dataset, Record};
use crate::error::{Error, Modality, Result};
use crate::eval::{embed_dataset, evaluate_embeddings, reports_to_csv, RetrievalReport};
use crate::losses::{cmmd_loss, FeatureBatch, LossConfig, LossValues};
use crate::nn::{Baseline, BackboneConfig, Network, SeparationUnit};
use crate::parallel;
use crate::search::{
    init_search, run_search, ArchBitstring, SearchData, SearchEpoch, SweepMode, SweepScheme, sweep_enumerate,
};
use crate::tensor::Graph;
use crate::train::{train_epoch, ClassIndex, TrainState};

pub const CONFIG_FILE: &str = "config.txt";
pub const ARCH_FILE: &str = "architecture.txt";
pub const SEARCH_LOG: &str = "search_log.csv";
pub const SEARCH_CKPT: &str = "search.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const EVAL_CSV: &str = "eval.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

/// Generated data of a run: training identities and held-out test identities.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: RunConfig,
    pub train: Dataset,
    pub test: Dataset,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let all = generate_dataset(&config.dataset)?;
        let (train, test) = holdout_identities(&all, config.test_identities)?;
        Ok(Self { config, train, test })
    }
}

/// How the normalization layers of a fixed (or searching) network are routed.
#[derive(Clone, Debug, PartialEq)]
pub enum ArchSpec {
    Bits(ArchBitstring),
    Baseline(Baseline),
    Scheme(SweepScheme),
    Searching,
}

impl ArchSpec {
    pub fn backbone(&self, shape: &BackboneConfig) -> Result<BackboneConfig> {
        Ok(match self {
            ArchSpec::Bits(b) => b.backbone(shape)?,
            ArchSpec::Baseline(b) => shape.with_baseline(*b),
            ArchSpec::Scheme(s) => s.backbone(shape),
            ArchSpec::Searching => shape.searchable(),
        })
    }

    pub fn encode(&self) -> String {
        match self {
            ArchSpec::Bits(b) => format!("bits:{b}"),
            ArchSpec::Baseline(b) => format!("baseline:{}", b.name()),
            ArchSpec::Scheme(s) => format!("scheme:{}:{}", s.unit.as_str(), s.blocks.join("+")),
            ArchSpec::Searching => "searching".into(),
        }
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("unknown architecture record '{s}'"));
        if s == "searching" {
            return Ok(ArchSpec::Searching);
        }
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "bits" => Ok(ArchSpec::Bits(rest.parse()?)),
            "baseline" => Ok(ArchSpec::Baseline(Baseline::parse(rest)?)),
            "scheme" => {
                let (unit, blocks) = rest.split_once(':').ok_or_else(bad)?;
                let unit = match unit {
                    "block" => SeparationUnit::Block,
                    "bn" => SeparationUnit::Bn,
                    _ => return Err(bad()),
                };
                let blocks = if blocks.is_empty() {
                    Vec::new()
                } else {
                    blocks.split('+').map(String::from).collect()
                };
                Ok(ArchSpec::Scheme(SweepScheme { unit, blocks }))
            }
            _ => Err(bad()),
        }
    }
}

/// A checkpoint together with what is needed to rebuild its network.
#[derive(Clone, Debug)]
pub struct SavedRun {
    pub config: RunConfig,
    pub arch: ArchSpec,
    /// CSV log accumulated so far.
    pub log: String,
    pub state: TrainState,
}

impl SavedRun {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.state.to_checkpoint();
        c.put("meta/config", Record::Bytes(self.config.to_text().into_bytes()));
        c.put("meta/arch", Record::Bytes(self.arch.encode().into_bytes()));
        c.put("meta/log", Record::Bytes(self.log.clone().into_bytes()));
        c
    }

    /// Rebuilds the network described by the checkpoint and loads its state.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse(c.text("meta/config")?)?;
        let arch = ArchSpec::decode(c.text("meta/arch")?)?;
        let log = c.text("meta/log")?.to_string();
        let mut state = fresh_state(&config, &arch)?;
        state.restore(c)?;
        Ok(Self { config, arch, log, state })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())));
        }
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn fresh_state(cfg: &RunConfig, arch: &ArchSpec) -> Result<TrainState> {
    let bb = arch.backbone(&cfg.backbone_shape())?;
    let net = Network::build(&bb, cfg.seed)?;
    let arch_opt = matches!(arch, ArchSpec::Searching).then(|| cfg.search_config().schedule.arch);
    Ok(TrainState::new(net, cfg.weights, arch_opt, derive_seed(&[cfg.seed, 2])))
}

fn loss_cells(v: &LossValues) -> String {
    format!("{},{},{},{},{}", v.cls, v.triplet, v.cmmd, v.cc, v.total)
}

fn search_log_header(layers: usize) -> String {
    let mut s = String::from("epoch,lr");
    for side in ["train", "val"] {
        for t in ["cls", "triplet", "cmmd", "cc", "total"] {
            let _ = write!(s, ",{side}_{t}");
        }
    }
    for l in 0..layers {
        let _ = write!(s, ",p_sep_{l}");
    }
    s.push('\n');
    s
}

fn search_log_row(e: &SearchEpoch) -> String {
    let mut s = format!("{},{},{},{}", e.epoch, e.lr, loss_cells(&e.train), loss_cells(&e.val));
    for (p1, _) in &e.probs {
        let _ = write!(s, ",{p1}");
    }
    s.push('\n');
    s
}

const TRAIN_LOG_HEADER: &str = "epoch,lr,cls,triplet,cmmd,cc,total\n";

fn prepare_output(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    Ok(dir)
}

/// Result of a search command.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub bits: ArchBitstring,
    pub log: Vec<SearchEpoch>,
}

/// Phase 1 on an experiment, in memory. `resume` continues a saved search.
pub fn search_phase(
    exp: &Experiment,
    resume: Option<SavedRun>,
    mut on_epoch: impl FnMut(&SavedRun) -> Result<()>,
) -> Result<(SearchOutcome, SavedRun)> {
    let cfg = &exp.config;
    let scfg = cfg.search_config();
    let data = SearchData::new(&exp.train, &scfg)?;
    let layers = cfg.backbone_shape().norm_layer_count();
    let (state, mut log) = match resume {
        Some(r) => {
            if r.arch != ArchSpec::Searching {
                return Err(Error::Checkpoint("checkpoint is not a search checkpoint".into()));
            }
            (r.state, r.log)
        }
        None => (init_search(&data, &scfg)?, search_log_header(layers)),
    };
    let mut epochs = Vec::new();
    let res = run_search(&data, &scfg, Some(state), |st, e| {
        log.push_str(&search_log_row(e));
        epochs.push(e.clone());
        on_epoch(&SavedRun {
            config: cfg.clone(),
            arch: ArchSpec::Searching,
            log: log.clone(),
            state: st.clone(),
        })
    })?;
    let saved = SavedRun {
        config: cfg.clone(),
        arch: ArchSpec::Searching,
        log,
        state: res.state,
    };
    Ok((SearchOutcome { bits: res.bits, log: epochs }, saved))
}

/// `search`: writes the architecture file, per-epoch log and a checkpoint
/// after every epoch.
pub fn cmd_search(cfg: &RunConfig, resume: Option<&Path>) -> Result<SearchOutcome> {
    let resume = resume.map(SavedRun::load).transpose()?;
    let exp = Experiment::new(cfg.clone())?;
    let dir = prepare_output(cfg)?;
    let ckpt = dir.join(SEARCH_CKPT);
    let (out, saved) = search_phase(&exp, resume, |s| s.to_checkpoint().save(&ckpt))?;
    saved.to_checkpoint().save(&ckpt)?;
    std::fs::write(dir.join(SEARCH_LOG), &saved.log)?;
    std::fs::write(dir.join(ARCH_FILE), out.bits.to_file(&cfg.backbone_shape())?)?;
    Ok(out)
}

/// Trains a fixed architecture on the training identities for `epochs`.
pub fn train_phase(
    exp: &Experiment,
    arch: &ArchSpec,
    epochs: usize,
    resume: Option<SavedRun>,
    mut on_epoch: impl FnMut(&SavedRun) -> Result<()>,
) -> Result<SavedRun> {
    let cfg = &exp.config;
    if *arch == ArchSpec::Searching {
        return Err(Error::Architecture("a searching network cannot be retrained; discretize it first".into()));
    }
    let mut run = match resume {
        Some(r) => {
            if r.arch != *arch {
                return Err(Error::Checkpoint(format!(
                    "checkpoint holds architecture '{}', expected '{}'",
                    r.arch.encode(),
                    arch.encode()
                )));
            }
            SavedRun { config: cfg.clone(), ..r }
        }
        None => SavedRun {
            config: cfg.clone(),
            arch: arch.clone(),
            log: TRAIN_LOG_HEADER.to_string(),
            state: fresh_state(cfg, arch)?,
        },
    };
    let classes = ClassIndex::new(&exp.train.identities());
    let tc = cfg.train_config(epochs);
    while run.state.epoch < epochs {
        let e = run.state.epoch;
        let v = train_epoch(&mut run.state, &exp.train, &classes, &tc)?;
        let _ = writeln!(run.log, "{e},{},{}", tc.schedule.lr_at(e), loss_cells(&v));
        on_epoch(&run)?;
    }
    Ok(run)
}

/// Loads an architecture file.
pub fn read_arch_file(path: &Path) -> Result<ArchBitstring> {
    ArchBitstring::from_file(&std::fs::read_to_string(path)?)
}

/// `retrain`: phase 2 on the unsplit training identities.
pub fn cmd_retrain(cfg: &RunConfig, arch: &ArchSpec, resume: Option<&Path>) -> Result<SavedRun> {
    arch.backbone(&cfg.backbone_shape())?.validate()?;
    let resume = resume.map(SavedRun::load).transpose()?;
    let exp = Experiment::new(cfg.clone())?;
    let dir = prepare_output(cfg)?;
    let ckpt = dir.join(MODEL_CKPT);
    let run = train_phase(&exp, arch, cfg.retrain_epochs, resume, |r| r.to_checkpoint().save(&ckpt))?;
    run.to_checkpoint().save(&ckpt)?;
    std::fs::write(dir.join(TRAIN_LOG), &run.log)?;
    Ok(run)
}

/// Reports of every configured protocol on the test identities of `test`.
pub fn evaluate_model(net: &Network, test: &Dataset, cfg: &RunConfig) -> Result<Vec<RetrievalReport>> {
    let emb = embed_dataset(net, test)?;
    cfg.protocols().iter().map(|p| evaluate_embeddings(&emb, test, p)).collect()
}

/// `eval`: evaluates a checkpoint on the test identities of `cfg`'s dataset
/// (which may differ from the one it was trained on).
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<RetrievalReport>> {
    let run = SavedRun::load(checkpoint)?;
    if run.arch == ArchSpec::Searching {
        return Err(Error::Architecture("checkpoint holds a searching network; retrain first".into()));
    }
    if run.config.dataset.resolution != cfg.dataset.resolution {
        return Err(Error::Config("model and dataset resolutions differ".into()));
    }
    let exp = Experiment::new(cfg.clone())?;
    let reports = evaluate_model(&run.state.net, &exp.test, cfg)?;
    let dir = prepare_output(cfg)?;
    std::fs::write(dir.join(EVAL_CSV), reports_to_csv(&reports))?;
    Ok(reports)
}

/// Mean Rank-1 and mAP over reports.
pub fn summary(reports: &[RetrievalReport]) -> (f64, f64) {
    let n = reports.len().max(1) as f64;
    (
        reports.iter().map(|r| r.mean.rank1).sum::<f64>() / n,
        reports.iter().map(|r| r.mean.map).sum::<f64>() / n,
    )
}

/// One sweep row.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub scheme: SweepScheme,
    pub rank1: f64,
    pub map: f64,
}

pub const SWEEP_HEADER: &str = "scheme,unit,rank1,mAP";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4}",
            r.scheme.label(),
            r.scheme.unit.as_str(),
            100.0 * r.rank1,
            100.0 * r.map
        );
    }
    s
}

/// Trains every scheme for `sweep_epochs` from the same seed and evaluates it.
pub fn sweep_phase(exp: &Experiment, mode: &SweepMode, units: &[SeparationUnit]) -> Result<Vec<SweepRow>> {
    let schemes = sweep_enumerate(&exp.config.backbone_shape(), mode, units)?;
    let rows = parallel::map_slice(&schemes, |s| -> Result<SweepRow> {
        let run = train_phase(exp, &ArchSpec::Scheme(s.clone()), exp.config.sweep_epochs, None, |_| Ok(()))?;
        let (rank1, map) = summary(&evaluate_model(&run.state.net, &exp.test, &exp.config)?);
        Ok(SweepRow { scheme: s.clone(), rank1, map })
    });
    rows.into_iter().collect()
}

/// `sweep`: one CSV row per scheme, shared baseline first.
pub fn cmd_sweep(cfg: &RunConfig, mode: &SweepMode, units: &[SeparationUnit]) -> Result<Vec<SweepRow>> {
    sweep_enumerate(&cfg.backbone_shape(), mode, units)?;
    let exp = Experiment::new(cfg.clone())?;
    let rows = sweep_phase(&exp, mode, units)?;
    let dir = prepare_output(cfg)?;
    std::fs::write(dir.join(SWEEP_CSV), sweep_to_csv(&rows))?;
    Ok(rows)
}

/// Bitstring of a saved network: discretized α while searching, else the
/// fixed batch-norm routing.
pub fn export_bits(run: &SavedRun) -> Result<ArchBitstring> {
    match &run.arch {
        ArchSpec::Searching => Ok(crate::search::discretize(&run.state.net.alphas())),
        _ => run
            .state
            .net
            .norm_mask()
            .map(|m| ArchBitstring::from_mask(&m))
            .ok_or_else(|| Error::Architecture("instance-norm networks have no bitstring".into())),
    }
}

/// `export-arch`: annotated architecture file of a checkpoint.
pub fn cmd_export_arch(checkpoint: &Path) -> Result<String> {
    let run = SavedRun::load(checkpoint)?;
    export_bits(&run)?.to_file(&run.config.backbone_shape())
}

/// Class-conditional MMD between the inference embeddings of the two
/// modalities over every identity of `data`, on the same features the
/// alignment losses see during training.
pub fn heldout_cmmd(net: &Network, data: &Dataset) -> Result<f64> {
    let emb = embed_dataset(net, data)?;
    let g = Graph::new();
    let f = g.constant(emb);
    let ids: Vec<u32> = data.samples().iter().map(|s| s.identity).collect();
    let mods: Vec<Modality> = data.samples().iter().map(|s| s.modality).collect();
    let v = cmmd_loss(&g, &FeatureBatch::new(f, ids, mods))?;
    Ok(g.scalar(v))
}

/// Loss config with both alignment terms off.
pub fn basic_loss(cfg: &LossConfig) -> LossConfig {
    LossConfig {
        use_cmmd: false,
        use_cc: false,
        ..*cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(dir: &Path) -> RunConfig {
        let text = format!(
            "dataset.identities = 13\ndataset.test_identities = 3\ndataset.images_per_modality = 3\n\
             dataset.resolution = 8\nbackbone.stem_width = 4\nbackbone.widths = 4,8\nbackbone.blocks = 1,1\n\
             backbone.embedding_dim = 8\nschedule.search_epochs = 1\nschedule.retrain_epochs = 2\n\
             schedule.sweep_epochs = 1\nschedule.p = 2\nschedule.k = 2\nprotocol.repeats = 2\noutput_dir = {}\n",
            dir.display()
        );
        RunConfig::parse(&text).unwrap()
    }

    #[test]
    fn arch_spec_roundtrip() {
        for s in [
            ArchSpec::Searching,
            ArchSpec::Bits("0110".parse().unwrap()),
            ArchSpec::Baseline(Baseline::TwoStreamIn),
            ArchSpec::Scheme(SweepScheme { unit: SeparationUnit::Bn, blocks: vec!["s2_1".into(), "s3_1".into()] }),
            ArchSpec::Scheme(SweepScheme { unit: SeparationUnit::Block, blocks: vec![] }),
        ] {
            assert_eq!(ArchSpec::decode(&s.encode()).unwrap(), s);
        }
        assert!(ArchSpec::decode("bits:01x").is_err());
        assert!(ArchSpec::decode("other").is_err());
    }

    #[test]
    fn search_retrain_eval_export() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let out = cmd_search(&cfg, None).unwrap();
        assert_eq!(out.bits.len(), cfg.backbone_shape().norm_layer_count());
        let bits = read_arch_file(&dir.path().join(ARCH_FILE)).unwrap();
        assert_eq!(bits, out.bits);
        assert_eq!(cmd_export_arch(&dir.path().join(SEARCH_CKPT)).unwrap(), std::fs::read_to_string(dir.path().join(ARCH_FILE)).unwrap());
        let run = cmd_retrain(&cfg, &ArchSpec::Bits(bits.clone()), None).unwrap();
        assert_eq!(run.state.epoch, 2);
        assert_eq!(export_bits(&run).unwrap(), bits);
        let reports = cmd_eval(&cfg, &dir.path().join(MODEL_CKPT)).unwrap();
        assert_eq!(reports.len(), 2);
        let csv = std::fs::read(dir.path().join(EVAL_CSV)).unwrap();
        cmd_eval(&cfg, &dir.path().join(MODEL_CKPT)).unwrap();
        assert_eq!(std::fs::read(dir.path().join(EVAL_CSV)).unwrap(), csv);
        assert!(dir.path().join(CONFIG_FILE).exists());
        let log = std::fs::read_to_string(dir.path().join(SEARCH_LOG)).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(cmd_eval(&cfg, &dir.path().join(SEARCH_CKPT)).is_err());
    }

    #[test]
    fn retrain_resume_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let exp = Experiment::new(cfg.clone()).unwrap();
        let arch = ArchSpec::Baseline(Baseline::TwoStreamBn);
        let full = train_phase(&exp, &arch, 2, None, |_| Ok(())).unwrap();
        let mut saved = None;
        let _ = train_phase(&exp, &arch, 2, None, |r| {
            if r.state.epoch == 1 {
                saved = Some(r.to_checkpoint().to_bytes());
            }
            Ok(())
        });
        let back = SavedRun::from_checkpoint(&Checkpoint::from_bytes(&saved.unwrap()).unwrap()).unwrap();
        let resumed = train_phase(&exp, &arch, 2, Some(back), |_| Ok(())).unwrap();
        assert_eq!(resumed.state, full.state);
        assert_eq!(resumed.log, full.log);
    }

    #[test]
    fn wrong_length_bits_rejected_before_output() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("o"));
        assert!(cmd_retrain(&cfg, &ArchSpec::Bits("0".parse().unwrap()), None).is_err());
        assert!(!dir.path().join("o").exists());
    }

    #[test]
    fn heldout_cmmd_nonnegative() {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::new(tiny_config(dir.path())).unwrap();
        let net = Network::build(&exp.config.backbone_shape().with_baseline(Baseline::OneStream), 0).unwrap();
        assert!(heldout_cmmd(&net, &exp.test).unwrap() >= 0.0);
    }
}
