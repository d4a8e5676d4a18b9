//! A toy two-modality ResNet-style backbone.
//!
//! Stage 1 is a ConvBlock stem (`s1`): conv, norm, ReLU. Stages 2 and up
//! stack bottleneck ResBlocks (`s2_1`, `s3_1`, `s3_2`, ...), each with three
//! conv/norm pairs and a projected shortcut when the shape changes. The head
//! is global average pooling, a linear embedding and a linear classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::norm::{
    norm_forward, BufferUpdate, ModalityRouting, NormKind, NormLayer, NormParams, NormRouting,
    SearchableNormLayer,
};
use super::params::{ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Modality, Result};
use crate::tensor::{Graph, OpStats, Tensor, Var};

/// Normalization family of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Every normalization layer is a searchable batch-norm unit.
    Searchable,
    /// Batch normalization; routing fixed by the separation scheme.
    Batch,
    /// Instance normalization everywhere; routing fixed by the scheme.
    Instance,
}

/// What is duplicated per modality inside a separated block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SeparationUnit {
    /// Convolutions and normalizations.
    Block,
    /// Normalization layers only.
    Bn,
}

impl SeparationUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            SeparationUnit::Block => "block",
            SeparationUnit::Bn => "bn",
        }
    }
}

/// Which layers get per-modality parameters in a fixed architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SeparationScheme {
    /// Named blocks are separated in the given unit.
    Blocks {
        unit: SeparationUnit,
        blocks: Vec<String>,
    },
    /// One flag per normalization layer in topological order (`true` =
    /// separate). Convolutions are always shared.
    NormMask(Vec<bool>),
}

/// The fixed baseline family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// Everything shared.
    OneStream,
    /// Everything shared, instance normalization.
    OneStreamIn,
    /// Stage 1 and stage 2 blocks fully separated.
    TwoStream,
    /// Two-stream with instance normalization.
    TwoStreamIn,
    /// Only the normalization layers of stage 1 and stage 2 separated.
    TwoStreamBn,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [
        Baseline::OneStream,
        Baseline::OneStreamIn,
        Baseline::TwoStream,
        Baseline::TwoStreamIn,
        Baseline::TwoStreamBn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::OneStream => "one-stream",
            Baseline::OneStreamIn => "one-stream-in",
            Baseline::TwoStream => "two-stream",
            Baseline::TwoStreamIn => "two-stream-in",
            Baseline::TwoStreamBn => "two-stream-bn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline '{s}'")))
    }
}

/// Shape and normalization routing of a backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Square input side length.
    pub resolution: usize,
    pub stem_width: usize,
    pub stem_stride: usize,
    /// 2x2 max pooling after the stem.
    pub stem_pool: bool,
    /// Output width of each residual stage.
    pub widths: Vec<usize>,
    /// Block count of each residual stage.
    pub blocks: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub norm_mode: NormMode,
    pub separation: Option<SeparationScheme>,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            resolution: 32,
            stem_width: 16,
            stem_stride: 2,
            stem_pool: false,
            widths: vec![16, 16, 32, 64],
            blocks: vec![1, 2, 2, 2],
            embedding_dim: 64,
            num_classes: 64,
            norm_mode: NormMode::Searchable,
            separation: None,
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// `(block name, stage name, stride, in width, out width)` for each ResBlock.
type BlockPlan = Vec<(String, String, usize, usize, usize)>;

impl BackboneConfig {
    /// Same shape, with the routing of a baseline.
    pub fn with_baseline(&self, b: Baseline) -> Self {
        let mut cfg = self.clone();
        let stage12 = || {
            let mut v = vec!["s1".to_string()];
            v.extend(
                self.block_plan()
                    .into_iter()
                    .filter(|(_, stage, ..)| stage == "s2")
                    .map(|(name, ..)| name),
            );
            v
        };
        let (mode, sep) = match b {
            Baseline::OneStream => (NormMode::Batch, None),
            Baseline::OneStreamIn => (NormMode::Instance, None),
            Baseline::TwoStream => (
                NormMode::Batch,
                Some(SeparationScheme::Blocks {
                    unit: SeparationUnit::Block,
                    blocks: stage12(),
                }),
            ),
            Baseline::TwoStreamIn => (
                NormMode::Instance,
                Some(SeparationScheme::Blocks {
                    unit: SeparationUnit::Block,
                    blocks: stage12(),
                }),
            ),
            Baseline::TwoStreamBn => (
                NormMode::Batch,
                Some(SeparationScheme::Blocks {
                    unit: SeparationUnit::Bn,
                    blocks: stage12(),
                }),
            ),
        };
        cfg.norm_mode = mode;
        cfg.separation = sep;
        cfg
    }

    /// Same shape, all normalization layers searchable.
    pub fn searchable(&self) -> Self {
        let mut cfg = self.clone();
        cfg.norm_mode = NormMode::Searchable;
        cfg.separation = None;
        cfg
    }

    /// Same shape, batch normalization with a per-layer mask.
    pub fn with_norm_mask(&self, mask: Vec<bool>) -> Self {
        let mut cfg = self.clone();
        cfg.norm_mode = NormMode::Batch;
        cfg.separation = Some(SeparationScheme::NormMask(mask));
        cfg
    }

    fn block_plan(&self) -> BlockPlan {
        let mut plan = Vec::new();
        let mut in_w = self.stem_width;
        for (si, (&w, &n)) in self.widths.iter().zip(&self.blocks).enumerate() {
            let stage = format!("s{}", si + 2);
            for bi in 0..n {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                plan.push((format!("{stage}_{}", bi + 1), stage.clone(), stride, in_w, w));
                in_w = w;
            }
        }
        plan
    }

    /// Names of all blocks, stem first.
    pub fn block_names(&self) -> Vec<String> {
        let mut v = vec!["s1".to_string()];
        v.extend(self.block_plan().into_iter().map(|b| b.0));
        v
    }

    /// Names of the residual blocks only.
    pub fn res_block_names(&self) -> Vec<String> {
        self.block_plan().into_iter().map(|b| b.0).collect()
    }

    /// Stage name (`s1`, `s2`, ...) of a block.
    pub fn stage_of(block: &str) -> &str {
        block.split('_').next().unwrap_or(block)
    }

    /// Normalization layer count, in topological order.
    pub fn norm_layer_count(&self) -> usize {
        1 + self
            .block_plan()
            .iter()
            .map(|&(_, _, stride, i, o)| if stride != 1 || i != o { 4 } else { 3 })
            .sum::<usize>()
    }

    /// Owning block of each normalization layer, in topological order.
    pub fn norm_layer_blocks(&self) -> Vec<String> {
        let mut v = vec!["s1".to_string()];
        for (name, _, stride, i, o) in self.block_plan() {
            let n = if stride != 1 || i != o { 4 } else { 3 };
            v.extend(std::iter::repeat_n(name, n));
        }
        v
    }

    /// Spatial side after the stem and every stage.
    pub fn final_resolution(&self) -> usize {
        let mut r = self.resolution / self.stem_stride.max(1);
        if self.stem_pool {
            r /= 2;
        }
        for _ in 1..self.widths.len() {
            r /= 2;
        }
        r
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return bad("backbone widths and blocks must be non-empty and of equal length".into());
        }
        if self.blocks.iter().any(|&b| b < 1) {
            return bad("every stage needs at least one block".into());
        }
        if self.widths.iter().any(|&w| w < 2) || self.stem_width < 1 {
            return bad("stage widths must be at least 2".into());
        }
        if self.in_channels < 1 || self.embedding_dim < 1 || self.num_classes < 1 {
            return bad("channels, embedding dim and class count must be positive".into());
        }
        if !(1..=2).contains(&self.stem_stride) {
            return bad("stem stride must be 1 or 2".into());
        }
        if self.final_resolution() < 1 {
            return bad(format!("resolution {} is too small for the stage count", self.resolution));
        }
        if self.norm_mode == NormMode::Instance && self.final_resolution() < 2 {
            return bad("instance normalization needs at least 2x2 maps in the last stage".into());
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) || !(self.eps > 0.0) {
            return bad("norm momentum must lie in (0, 1) and eps must be positive".into());
        }
        match (&self.norm_mode, &self.separation) {
            (NormMode::Searchable, Some(_)) => {
                return bad("a searchable backbone takes no separation scheme".into())
            }
            (_, Some(SeparationScheme::NormMask(m))) if m.len() != self.norm_layer_count() => {
                return Err(Error::Architecture(format!(
                    "mask has {} entries, backbone has {} normalization layers",
                    m.len(),
                    self.norm_layer_count()
                )))
            }
            (_, Some(SeparationScheme::Blocks { blocks, .. })) => {
                let names = self.block_names();
                if let Some(b) = blocks.iter().find(|b| !names.contains(b)) {
                    return bad(format!("unknown block '{b}'"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum ConvWeights {
    Shared(ParamId),
    Separate { vis: ParamId, ir: ParamId },
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    weights: ConvWeights,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct ResBlock {
    convs: [usize; 3],
    norms: [usize; 3],
    shortcut: Option<(usize, usize)>,
}

/// Outputs of one forward pass.
pub struct ForwardOutput {
    /// `[N, embedding_dim]`.
    pub embedding: Var,
    /// `[N, num_classes]`.
    pub logits: Var,
    /// Running-statistic writes queued by training-mode normalization.
    pub updates: Vec<BufferUpdate>,
}

/// A built backbone: its parameters and wiring.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: BackboneConfig,
    pub store: ParamStore,
    convs: Vec<ConvLayer>,
    norms: Vec<NormLayer>,
    stem: (usize, usize),
    blocks: Vec<ResBlock>,
    embedding: ParamId,
    /// Batch norm between the embedding and the classifier; always shared.
    neck: NormParams,
    classifier: ParamId,
}

struct Builder<'a> {
    cfg: &'a BackboneConfig,
    store: ParamStore,
    convs: Vec<ConvLayer>,
    norms: Vec<NormLayer>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn block_separated(&self, block: &str, unit: SeparationUnit) -> bool {
        match &self.cfg.separation {
            Some(SeparationScheme::Blocks { unit: u, blocks }) => {
                blocks.iter().any(|b| b == block)
                    && (*u == SeparationUnit::Block || unit == SeparationUnit::Bn)
            }
            _ => false,
        }
    }

    fn conv(&mut self, block: &str, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> usize {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data: Vec<f64> = (0..cout * cin * k * k).map(|_| normal.sample(&mut self.rng)).collect();
        let w = Tensor::new(vec![cout, cin, k, k], data).expect("conv init");
        let full = format!("{block}.{name}.weight");
        // the per-modality copies start from identical weights
        let weights = if self.block_separated(block, SeparationUnit::Block) {
            ConvWeights::Separate {
                vis: self.store.add(format!("{full}.vis"), w.clone(), ParamGroup::Weight),
                ir: self.store.add(format!("{full}.ir"), w, ParamGroup::Weight),
            }
        } else {
            ConvWeights::Shared(self.store.add(full, w, ParamGroup::Weight))
        };
        self.convs.push(ConvLayer {
            weights,
            stride,
            pad: k / 2,
        });
        self.convs.len() - 1
    }

    fn norm(&mut self, block: &str, name: &str, channels: usize) -> usize {
        let index = self.norms.len();
        let (m, e) = (self.cfg.momentum, self.cfg.eps);
        let full = format!("{block}.{name}");
        let kind = match self.cfg.norm_mode {
            NormMode::Instance => NormKind::Instance,
            _ => NormKind::Batch,
        };
        let routing = match self.cfg.norm_mode {
            NormMode::Searchable => {
                let shared = NormParams::alloc(&mut self.store, &format!("{full}.shared"), channels, kind, m, e);
                let vis = NormParams::alloc(&mut self.store, &format!("{full}.vis"), channels, kind, m, e);
                let ir = NormParams::alloc(&mut self.store, &format!("{full}.ir"), channels, kind, m, e);
                let alpha_separate =
                    self.store.add(format!("{full}.alpha_separate"), Tensor::scalar(0.0), ParamGroup::Arch);
                let alpha_share =
                    self.store.add(format!("{full}.alpha_share"), Tensor::scalar(0.0), ParamGroup::Arch);
                NormRouting::Searchable(SearchableNormLayer {
                    shared,
                    vis,
                    ir,
                    alpha_separate,
                    alpha_share,
                    layer_index: index,
                })
            }
            NormMode::Batch | NormMode::Instance => {
                let separate = match &self.cfg.separation {
                    Some(SeparationScheme::NormMask(mask)) => mask[index],
                    Some(SeparationScheme::Blocks { .. }) => self.block_separated(block, SeparationUnit::Bn),
                    None => false,
                };
                if separate {
                    NormRouting::Separate {
                        vis: NormParams::alloc(&mut self.store, &format!("{full}.vis"), channels, kind, m, e),
                        ir: NormParams::alloc(&mut self.store, &format!("{full}.ir"), channels, kind, m, e),
                    }
                } else {
                    NormRouting::Shared(NormParams::alloc(&mut self.store, &full, channels, kind, m, e))
                }
            }
        };
        self.norms.push(NormLayer {
            name: full,
            block: block.to_string(),
            kind,
            routing,
        });
        index
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut self.rng)).collect();
        self.store.add(
            name,
            Tensor::new(vec![fan_in, fan_out], data).expect("linear init"),
            ParamGroup::Weight,
        )
    }
}

impl Network {
    /// Builds and initializes a backbone; weights are a pure function of
    /// `(cfg, seed)`.
    pub fn build(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            cfg,
            store: ParamStore::new(),
            convs: Vec::new(),
            norms: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let stem_conv = b.conv("s1", "conv", cfg.in_channels, cfg.stem_width, 3, cfg.stem_stride);
        let stem_norm = b.norm("s1", "bn", cfg.stem_width);
        let mut blocks = Vec::new();
        for (name, _, stride, cin, cout) in cfg.block_plan() {
            let mid = (cout / 2).max(1);
            let c1 = b.conv(&name, "conv1", cin, mid, 1, 1);
            let n1 = b.norm(&name, "bn1", mid);
            let c2 = b.conv(&name, "conv2", mid, mid, 3, stride);
            let n2 = b.norm(&name, "bn2", mid);
            let c3 = b.conv(&name, "conv3", mid, cout, 1, 1);
            let n3 = b.norm(&name, "bn3", cout);
            let shortcut = (stride != 1 || cin != cout).then(|| {
                let c = b.conv(&name, "down", cin, cout, 1, stride);
                let n = b.norm(&name, "down_bn", cout);
                (c, n)
            });
            blocks.push(ResBlock {
                convs: [c1, c2, c3],
                norms: [n1, n2, n3],
                shortcut,
            });
        }
        let last = *cfg.widths.last().expect("validated");
        let embedding = b.linear("head.embedding", last, cfg.embedding_dim);
        let neck = NormParams::alloc(
            &mut b.store,
            "head.neck",
            cfg.embedding_dim,
            NormKind::Batch,
            cfg.momentum,
            cfg.eps,
        );
        let classifier = b.linear("head.classifier", cfg.embedding_dim, cfg.num_classes);
        debug_assert_eq!(b.norms.len(), cfg.norm_layer_count());
        Ok(Self {
            config: cfg.clone(),
            store: b.store,
            convs: b.convs,
            norms: b.norms,
            stem: (stem_conv, stem_norm),
            blocks,
            embedding,
            neck,
            classifier,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn norm_layers(&self) -> &[NormLayer] {
        &self.norms
    }

    pub fn norm_layer_count(&self) -> usize {
        self.norms.len()
    }

    pub fn searchable_layers(&self) -> Vec<&SearchableNormLayer> {
        self.norms
            .iter()
            .filter_map(|n| match &n.routing {
                NormRouting::Searchable(l) => Some(l),
                _ => None,
            })
            .collect()
    }

    pub fn searchable_layer_count(&self) -> usize {
        self.searchable_layers().len()
    }

    /// `(alpha_separate, alpha_share)` per searchable layer.
    pub fn alphas(&self) -> Vec<(f64, f64)> {
        self.searchable_layers()
            .iter()
            .map(|l| (self.store.get(l.alpha_separate).item(), self.store.get(l.alpha_share).item()))
            .collect()
    }

    pub fn set_alphas(&mut self, alphas: &[(f64, f64)]) -> Result<()> {
        let ids: Vec<(ParamId, ParamId)> = self
            .searchable_layers()
            .iter()
            .map(|l| (l.alpha_separate, l.alpha_share))
            .collect();
        if ids.len() != alphas.len() {
            return Err(Error::Architecture(format!(
                "{} alpha pairs for {} searchable layers",
                alphas.len(),
                ids.len()
            )));
        }
        for ((a, b), &(x, y)) in ids.into_iter().zip(alphas) {
            *self.store.get_mut(a) = Tensor::scalar(x);
            *self.store.get_mut(b) = Tensor::scalar(y);
        }
        Ok(())
    }

    /// Per-layer separate flag of a fixed batch-norm network; `None` for
    /// searchable or instance-norm networks.
    pub fn norm_mask(&self) -> Option<Vec<bool>> {
        (self.config.norm_mode == NormMode::Batch).then(|| self.norms.iter().map(|n| n.is_separate()).collect())
    }

    /// Trainable weight count (excludes architecture parameters and buffers).
    pub fn weight_count(&self) -> usize {
        self.store.numel(ParamGroup::Weight)
    }

    /// Trainable weights that exist only for one modality.
    pub fn modality_specific_weight_count(&self) -> usize {
        let convs: usize = self
            .convs
            .iter()
            .map(|c| match c.weights {
                ConvWeights::Shared(_) => 0,
                ConvWeights::Separate { vis, ir } => self.store.get(vis).len() + self.store.get(ir).len(),
            })
            .sum();
        let norms: usize = self
            .norms
            .iter()
            .map(|n| match &n.routing {
                NormRouting::Shared(_) => 0,
                NormRouting::Separate { vis, ir } => vis.trainable_len() + ir.trainable_len(),
                NormRouting::Searchable(l) => l.vis.trainable_len() + l.ir.trainable_len(),
            })
            .sum();
        convs + norms
    }

    /// Number of convolutions with per-modality weights.
    pub fn separate_conv_count(&self) -> usize {
        self.convs
            .iter()
            .filter(|c| matches!(c.weights, ConvWeights::Separate { .. }))
            .count()
    }

    fn conv_forward(&self, g: &Graph, x: Var, idx: usize, routing: &ModalityRouting) -> Result<Var> {
        let c = &self.convs[idx];
        match c.weights {
            ConvWeights::Shared(w) => {
                let wv = g.param(w.0, self.store.get(w));
                Ok(g.conv2d(x, wv, c.stride, c.pad))
            }
            ConvWeights::Separate { vis, ir } => routing.split_apply(g, x, |m, sub| {
                let id = if m == Modality::Vis { vis } else { ir };
                let wv = g.param(id.0, self.store.get(id));
                Ok(g.conv2d(sub, wv, c.stride, c.pad))
            }),
        }
    }

    fn norm_forward(
        &self,
        g: &Graph,
        x: Var,
        idx: usize,
        routing: &ModalityRouting,
        training: bool,
        updates: &mut Vec<BufferUpdate>,
    ) -> Result<Var> {
        let layer = &self.norms[idx];
        let probs = match &layer.routing {
            NormRouting::Searchable(l) => {
                let a1 = g.param(l.alpha_separate.0, self.store.get(l.alpha_separate));
                let a2 = g.param(l.alpha_share.0, self.store.get(l.alpha_share));
                Some(g.softmax(g.concat(&[a1, a2])))
            }
            _ => None,
        };
        layer.forward(g, &self.store, x, routing, probs, training, updates)
    }

    /// Runs the network on `images: [N, C, H, W]` with per-sample modality.
    pub fn forward(&self, g: &Graph, images: &Tensor, modality: &[Modality], training: bool) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.resolution || s[3] != cfg.resolution {
            return Err(Error::Shape(format!(
                "expected images [N, {}, {r}, {r}], got {s:?}",
                cfg.in_channels,
                r = cfg.resolution
            )));
        }
        if modality.len() != s[0] {
            return Err(Error::Shape(format!("{} modality labels for {} images", modality.len(), s[0])));
        }
        let routing = ModalityRouting::new(modality);
        let mut updates = Vec::new();
        let x = g.constant(images.clone());

        let mut h = self.conv_forward(g, x, self.stem.0, &routing)?;
        h = self.norm_forward(g, h, self.stem.1, &routing, training, &mut updates)?;
        h = g.relu(h);
        if cfg.stem_pool {
            h = g.max_pool(h, 2);
        }
        for b in &self.blocks {
            let mut y = h;
            for i in 0..3 {
                y = self.conv_forward(g, y, b.convs[i], &routing)?;
                y = self.norm_forward(g, y, b.norms[i], &routing, training, &mut updates)?;
                if i < 2 {
                    y = g.relu(y);
                }
            }
            let sc = match b.shortcut {
                Some((c, n)) => {
                    let t = self.conv_forward(g, h, c, &routing)?;
                    self.norm_forward(g, t, n, &routing, training, &mut updates)?
                }
                None => h,
            };
            h = g.relu(g.add(y, sc));
        }
        let pooled = g.global_avg_pool(h);
        let e = g.param(self.embedding.0, self.store.get(self.embedding));
        let embedding = g.matmul(pooled, e);
        let d = cfg.embedding_dim;
        let n = s[0];
        let x4 = g.reshape(embedding, &[n, d, 1, 1]);
        let necked = norm_forward(g, &self.store, x4, &self.neck, NormKind::Batch, training, &mut updates)?;
        let necked = g.reshape(necked, &[n, d]);
        let w = g.param(self.classifier.0, self.store.get(self.classifier));
        let logits = g.matmul(necked, w);
        Ok(ForwardOutput {
            embedding,
            logits,
            updates,
        })
    }

    /// Writes queued running statistics.
    pub fn apply_updates(&mut self, updates: Vec<BufferUpdate>) {
        for u in updates {
            *self.store.get_mut(u.id) = u.value;
        }
    }

    /// Embeddings in inference mode, `[N, embedding_dim]`.
    pub fn embed(&self, images: &Tensor, modality: &[Modality]) -> Result<Tensor> {
        let g = Graph::new();
        let out = self.forward(&g, images, modality, false)?;
        g.check_finite(out.embedding, "embedding")?;
        Ok(g.value(out.embedding))
    }

    /// Op counts of one inference pass on a two-image (vis, ir) batch.
    pub fn inference_stats(&self) -> Result<OpStats> {
        let cfg = &self.config;
        let imgs = Tensor::zeros(&[2, cfg.in_channels, cfg.resolution, cfg.resolution]);
        let g = Graph::new();
        self.forward(&g, &imgs, &[Modality::Vis, Modality::Ir], false)?;
        Ok(g.stats())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::OpKind;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            resolution: 8,
            stem_width: 4,
            widths: vec![4, 4, 8],
            blocks: vec![1, 2, 1],
            embedding_dim: 6,
            num_classes: 3,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn default_layer_count_by_walking() {
        let cfg = BackboneConfig::default();
        let net = Network::build(&cfg, 0).unwrap();
        // stem + 7 blocks x 3 + projections in s3_1, s4_1, s5_1 (s2_1 keeps 16 -> 16, stride 1)
        assert_eq!(cfg.norm_layer_count(), 1 + 7 * 3 + 3);
        assert_eq!(net.searchable_layer_count(), 25);
        assert_eq!(net.norm_layer_count(), 25);
        assert_eq!(cfg.res_block_names().len(), 7);
        assert_eq!(cfg.final_resolution(), 2);
    }

    #[test]
    fn all_shared_has_no_modality_specific_params() {
        let cfg = BackboneConfig::default().with_baseline(Baseline::OneStream);
        let net = Network::build(&cfg, 0).unwrap();
        assert_eq!(net.modality_specific_weight_count(), 0);
        assert_eq!(net.store.numel(ParamGroup::Arch), 0);
    }

    #[test]
    fn bn_only_stage2_scheme_separates_only_stage2_norms() {
        let cfg = BackboneConfig::default().with_baseline(Baseline::OneStream);
        let blocks: Vec<String> = cfg.res_block_names().into_iter().filter(|b| b.starts_with("s2_")).collect();
        let cfg = BackboneConfig {
            separation: Some(SeparationScheme::Blocks {
                unit: SeparationUnit::Bn,
                blocks,
            }),
            ..cfg
        };
        let net = Network::build(&cfg, 0).unwrap();
        assert_eq!(net.separate_conv_count(), 0);
        for n in net.norm_layers() {
            assert_eq!(n.is_separate(), n.block.starts_with("s2_"), "{}", n.name);
        }
    }

    #[test]
    fn mask_length_mismatch_rejected() {
        let cfg = tiny().with_norm_mask(vec![true; 3]);
        assert!(matches!(Network::build(&cfg, 0), Err(Error::Architecture(_))));
    }

    #[test]
    fn unknown_block_rejected() {
        let mut cfg = tiny().with_baseline(Baseline::OneStream);
        cfg.separation = Some(SeparationScheme::Blocks {
            unit: SeparationUnit::Bn,
            blocks: vec!["s9_1".into()],
        });
        assert!(Network::build(&cfg, 0).is_err());
    }

    #[test]
    fn searchable_param_structure() {
        let base = tiny();
        let shared = Network::build(&base.with_baseline(Baseline::OneStream), 0).unwrap();
        let search = Network::build(&base.searchable(), 0).unwrap();
        let extra: usize = shared.norm_layers().iter().map(|n| n.trainable_len()).sum();
        // shared + vis + ir per layer: two extra sets each
        assert_eq!(search.weight_count(), shared.weight_count() + 2 * extra);
        assert_eq!(search.store.numel(ParamGroup::Arch), 2 * search.searchable_layer_count());

        let mut mask = vec![false; base.norm_layer_count()];
        mask[0] = true;
        mask[3] = true;
        let disc = Network::build(&base.with_norm_mask(mask.clone()), 0).unwrap();
        let one_set: usize = [0, 3].iter().map(|&i| shared.norm_layers()[i].trainable_len()).sum();
        assert_eq!(disc.weight_count(), shared.weight_count() + one_set);
        assert_eq!(disc.norm_mask().unwrap(), mask);
    }

    #[test]
    fn discretized_network_has_no_mixing_and_same_macs() {
        let base = tiny();
        let shared = Network::build(&base.with_baseline(Baseline::OneStream), 0).unwrap();
        let all_one = Network::build(&base.with_norm_mask(vec![false; base.norm_layer_count()]), 0).unwrap();
        let s1 = shared.inference_stats().unwrap();
        let s2 = all_one.inference_stats().unwrap();
        assert_eq!(s1, s2);
        let mut mask = vec![true; base.norm_layer_count()];
        mask[1] = false;
        let mixed = Network::build(&base.with_norm_mask(mask), 0).unwrap().inference_stats().unwrap();
        assert_eq!(mixed.count(OpKind::Softmax), 0);
        assert_eq!(mixed.macs, s1.macs);
        let search = Network::build(&base.searchable(), 0).unwrap().inference_stats().unwrap();
        assert_eq!(search.count(OpKind::Softmax), base.norm_layer_count());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = tiny();
        let net = Network::build(&cfg, 5).unwrap();
        let again = Network::build(&cfg, 5).unwrap();
        assert_eq!(net, again);
        let imgs = Tensor::new(vec![4, 3, 8, 8], (0..4 * 3 * 64).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        use Modality::*;
        let g = Graph::new();
        let out = net.forward(&g, &imgs, &[Vis, Ir, Vis, Ir], true).unwrap();
        assert_eq!(g.shape(out.embedding), vec![4, 6]);
        assert_eq!(g.shape(out.logits), vec![4, 3]);
        assert!(!out.updates.is_empty());
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = tiny();
        let net = Network::build(&cfg, 1).unwrap();
        let imgs = Tensor::new(vec![4, 3, 8, 8], (0..4 * 3 * 64).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        use Modality::*;
        let mods = [Vis, Ir, Ir, Vis];
        let perm = [2, 0, 3, 1];
        let pimgs = imgs.select_rows(&perm);
        let pmods: Vec<Modality> = perm.iter().map(|&i| mods[i]).collect();
        for training in [true, false] {
            let g = Graph::new();
            let a = g.value(net.forward(&g, &imgs, &mods, training).unwrap().embedding);
            let g = Graph::new();
            let b = g.value(net.forward(&g, &pimgs, &pmods, training).unwrap().embedding);
            let a = a.select_rows(&perm);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
