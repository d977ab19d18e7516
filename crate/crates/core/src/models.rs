//! The five sentence classifiers: a parameter-matched linear baseline,
//! shallow convolutional models (standard and group-equivariant), and deep
//! pyramid models (standard and group-equivariant region embedding).
//!
//! A model owns its parameter store and a static layer structure; forward
//! passes lease parameters onto a caller-provided tape, so gradient checks
//! can run the same structure against perturbed parameter copies.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Batch, EmbeddingMatrix, PAD_ID};
use crate::lieconv::{Boundary, KernelArg, KernelKind, LieConvLayer, LieConvError, Quadrature, pool_and_concat};
use crate::liegroup::Group;
use crate::ndtensor::{Params, Tape, TensorError, TensorId};
use crate::real::Real;
use crate::rng::{stream, RngStream};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    LieConv(#[from] LieConvError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("embedding table is {got_rows}x{got_dim}, model needs {want_rows}x{want_dim}")]
    EmbeddingMismatch {
        got_rows: usize,
        got_dim: usize,
        want_rows: usize,
        want_dim: usize,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Linear,
    Scnn,
    Sclie,
    Dpcnn,
    Dpclie,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Linear => "linear",
            Arch::Scnn => "scnn",
            Arch::Sclie => "sclie",
            Arch::Dpcnn => "dpcnn",
            Arch::Dpclie => "dpclie",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GroupChoice {
    #[default]
    T1,
    T2,
    So2,
}

impl From<GroupChoice> for Group {
    fn from(g: GroupChoice) -> Group {
        match g {
            GroupChoice::T1 => Group::T1,
            GroupChoice::T2 => Group::T2,
            GroupChoice::So2 => Group::So2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureChoice {
    #[default]
    Lattice,
    MonteCarlo {
        nodes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryChoice {
    #[default]
    Valid,
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelArgChoice {
    #[default]
    Relative,
    Absolute,
}

fn d_300() -> usize {
    300
}
fn d_widths() -> Vec<usize> {
    vec![3, 4, 5]
}
fn d_100() -> usize {
    100
}
fn d_250() -> usize {
    250
}
fn d_1() -> usize {
    1
}
fn d_half() -> f64 {
    0.5
}
fn d_one() -> f64 {
    1.0
}
fn d_hidden() -> Vec<usize> {
    vec![32, 12]
}

/// Architecture hyperparameters. Class count is not here: it always comes
/// from the dataset, which removes one way for config and data to drift
/// apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default = "d_300")]
    pub embedding_dim: usize,
    /// Window widths for the shallow models; the deep models use the
    /// first entry for the region embedding and block convolutions.
    #[serde(default = "d_widths")]
    pub widths: Vec<usize>,
    /// Feature maps per width (shallow models).
    #[serde(default = "d_100")]
    pub filters: usize,
    /// Channels of the deep models.
    #[serde(default = "d_250")]
    pub channels: usize,
    /// Residual block count of the deep models.
    #[serde(default = "d_1")]
    pub blocks: usize,
    #[serde(default = "d_half")]
    pub dropout: f64,
    /// Scales `filters`/`channels` for the parameter-control experiment.
    #[serde(default = "d_one")]
    pub channel_multiplier: f64,
    #[serde(default)]
    pub group: GroupChoice,
    /// Hidden widths of the group-convolution kernel network.
    #[serde(default = "d_hidden")]
    pub kernel_hidden: Vec<usize>,
    #[serde(default)]
    pub quadrature: QuadratureChoice,
    #[serde(default)]
    pub boundary: BoundaryChoice,
    #[serde(default)]
    pub kernel_arg: KernelArgChoice,
    #[serde(default = "d_one")]
    pub position_scale: f64,
    /// Hidden width of the linear baseline. Left unset, it is solved at
    /// build time so the baseline's non-embedding parameter count matches
    /// the equivalent shallow convolutional model within one percent.
    #[serde(default)]
    pub linear_hidden: Option<usize>,
}

impl ModelConfig {
    pub fn new(arch: Arch) -> Self {
        ModelConfig {
            arch,
            embedding_dim: d_300(),
            widths: d_widths(),
            filters: d_100(),
            channels: d_250(),
            blocks: d_1(),
            dropout: d_half(),
            channel_multiplier: d_one(),
            group: GroupChoice::default(),
            kernel_hidden: d_hidden(),
            quadrature: QuadratureChoice::default(),
            boundary: BoundaryChoice::default(),
            kernel_arg: KernelArgChoice::default(),
            position_scale: d_one(),
            linear_hidden: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return bad(format!("widths must be nonempty and positive, got {:?}", self.widths));
        }
        if self.filters == 0 || self.channels == 0 {
            return bad("filters and channels must be positive".into());
        }
        if self.blocks == 0 {
            return bad("blocks must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.channel_multiplier > 0.0 && self.channel_multiplier.is_finite()) {
            return bad(format!("channel_multiplier {} must be positive", self.channel_multiplier));
        }
        if !(self.position_scale.is_finite() && self.position_scale != 0.0) {
            return bad(format!("position_scale {} must be finite and nonzero", self.position_scale));
        }
        if let QuadratureChoice::MonteCarlo { nodes } = self.quadrature {
            if nodes == 0 {
                return bad("monte carlo quadrature needs at least one node".into());
            }
        }
        if let Some(h) = self.linear_hidden {
            if h == 0 {
                return bad("linear_hidden must be positive".into());
            }
        }
        Ok(())
    }

    /// Feature maps per width after the channel multiplier.
    pub fn effective_filters(&self) -> usize {
        ((self.filters as f64 * self.channel_multiplier).round() as usize).max(1)
    }

    /// Deep-model channels after the channel multiplier.
    pub fn effective_channels(&self) -> usize {
        ((self.channels as f64 * self.channel_multiplier).round() as usize).max(1)
    }

    fn quadrature_spec(&self) -> Quadrature {
        match &self.quadrature {
            QuadratureChoice::Lattice => Quadrature::WindowLattice,
            QuadratureChoice::MonteCarlo { nodes } => Quadrature::MonteCarlo { nodes: *nodes },
        }
    }

    fn boundary_spec(&self) -> Boundary {
        match self.boundary {
            BoundaryChoice::Valid => Boundary::Valid,
            BoundaryChoice::Circular => Boundary::Circular,
        }
    }

    fn kernel_arg_spec(&self) -> KernelArg {
        match self.kernel_arg {
            KernelArgChoice::Relative => KernelArg::Relative,
            KernelArgChoice::Absolute => KernelArg::Absolute,
        }
    }

    fn conv_layer(&self, name: &str, width: usize, feature_dim: usize, filters: usize, lie: bool) -> LieConvLayer {
        let mut layer = LieConvLayer::new(name, self.group.into(), width, feature_dim, filters);
        layer.position_scale = self.position_scale;
        layer.boundary = self.boundary_spec();
        if lie {
            layer.kernel = KernelKind::Mlp {
                hidden: self.kernel_hidden.clone(),
            };
            layer.quadrature = self.quadrature_spec();
            layer.kernel_arg = self.kernel_arg_spec();
        } else {
            layer.kernel = KernelKind::Lookup;
            layer.quadrature = Quadrature::WindowLattice;
            layer.kernel_arg = KernelArg::Relative;
        }
        layer
    }
}

/// Non-embedding parameter count of the shallow convolutional model, used
/// both for reporting and for solving the linear baseline's width.
fn shallow_conv_param_target(d: usize, classes: usize, widths: &[usize], filters: usize) -> usize {
    let convs: usize = widths.iter().map(|&w| w * d * filters + filters).sum();
    let rep = filters * widths.len();
    convs + rep * classes + classes
}

/// Hidden width giving the linear baseline the same non-embedding count as
/// the shallow convolutional model, to rounding.
pub fn solve_linear_hidden(d: usize, classes: usize, widths: &[usize], filters: usize) -> usize {
    let target = shallow_conv_param_target(d, classes, widths, filters);
    let h = (target.saturating_sub(classes)) as f64 / (d + 1 + classes) as f64;
    (h.round() as usize).max(1)
}

enum Structure {
    Linear { hidden: usize },
    Shallow { convs: Vec<LieConvLayer> },
    Deep {
        region: LieConvLayer,
        blocks: Vec<(LieConvLayer, LieConvLayer)>,
    },
}

/// A built model: config, dataset-derived sizes, parameters, layers.
pub struct Model<R: Real> {
    pub config: ModelConfig,
    pub vocab_len: usize,
    pub n_classes: usize,
    pub params: Params<R>,
    structure: Structure,
}

/// Exact trainable-scalar counts, embedding table split out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub embedding: usize,
}

impl ParamCount {
    pub fn non_embedding(&self) -> usize {
        self.total - self.embedding
    }
}

fn build_structure(config: &ModelConfig, n_classes: usize) -> Structure {
    let d = config.embedding_dim;
    match config.arch {
        Arch::Linear => Structure::Linear {
            hidden: config.linear_hidden.unwrap_or_else(|| {
                solve_linear_hidden(d, n_classes, &config.widths, config.effective_filters())
            }),
        },
        Arch::Scnn | Arch::Sclie => {
            let lie = config.arch == Arch::Sclie;
            let convs = config
                .widths
                .iter()
                .enumerate()
                .map(|(i, &w)| config.conv_layer(&format!("conv{i}_w{w}"), w, d, config.effective_filters(), lie))
                .collect();
            Structure::Shallow { convs }
        }
        Arch::Dpcnn | Arch::Dpclie => {
            let lie = config.arch == Arch::Dpclie;
            let c = config.effective_channels();
            let w = config.widths[0];
            let region = config.conv_layer("region", w, d, c, lie);
            let blocks = (0..config.blocks)
                .map(|b| {
                    (
                        config.conv_layer(&format!("block{b}.a"), w, c, c, false),
                        config.conv_layer(&format!("block{b}.b"), w, c, c, false),
                    )
                })
                .collect();
            Structure::Deep { region, blocks }
        }
    }
}

impl<R: Real> Model<R> {
    /// Assemble the architecture and register every trainable tensor,
    /// embedding table included, under a seeded init.
    pub fn build(
        config: &ModelConfig,
        n_classes: usize,
        embeddings: &EmbeddingMatrix,
        seed: u64,
    ) -> Result<Model<R>> {
        config.validate()?;
        if n_classes < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 classes, dataset has {n_classes}"
            )));
        }
        let vocab_len = embeddings.vocab_len();
        if embeddings.dim != config.embedding_dim || vocab_len == 0 {
            return Err(ModelError::EmbeddingMismatch {
                got_rows: vocab_len,
                got_dim: embeddings.dim,
                want_rows: vocab_len.max(1),
                want_dim: config.embedding_dim,
            });
        }
        let structure = build_structure(config, n_classes);
        let mut params = Params::new();
        let mut rng = stream(seed, "init");
        params.register(
            "embed",
            &[vocab_len, config.embedding_dim],
            embeddings.to_real::<R>(),
        )?;
        let rep = rep_dim(config, &structure);
        match &structure {
            Structure::Linear { hidden } => {
                let d = config.embedding_dim;
                params.register("fc.w", &[d, *hidden], glorot::<R>(d, *hidden, &mut rng))?;
                params.register("fc.b", &[*hidden], vec![R::zero(); *hidden])?;
            }
            Structure::Shallow { convs } => {
                for layer in convs {
                    layer.register_params(&mut params, &mut rng)?;
                }
            }
            Structure::Deep { region, blocks } => {
                region.register_params(&mut params, &mut rng)?;
                for (a, b) in blocks {
                    a.register_params(&mut params, &mut rng)?;
                    b.register_params(&mut params, &mut rng)?;
                }
            }
        }
        params.register(
            "head.w",
            &[rep, n_classes],
            glorot::<R>(rep, n_classes, &mut rng),
        )?;
        params.register("head.b", &[n_classes], vec![R::zero(); n_classes])?;
        Ok(Model {
            config: config.clone(),
            vocab_len,
            n_classes,
            params,
            structure,
        })
    }

    /// Width every batch must be padded to so the widest window fits.
    pub fn min_width(&self) -> usize {
        match &self.structure {
            Structure::Linear { .. } => 1,
            Structure::Shallow { convs } => convs.iter().map(|c| c.width).max().unwrap_or(1),
            Structure::Deep { region, .. } => region.width,
        }
    }

    /// Length of the pre-classifier sentence representation.
    pub fn rep_dim(&self) -> usize {
        rep_dim(&self.config, &self.structure)
    }

    /// Rows of the embedding table whose gradient is pinned to zero.
    pub fn frozen_rows(&self) -> &'static [usize] {
        &[PAD_ID]
    }

    /// Logits `[batch, classes]` using the model's own parameters.
    pub fn forward(
        &self,
        tape: &mut Tape<R>,
        batch: &Batch,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        self.forward_with(tape, &self.params, batch, training, rng)
    }

    /// Logits against an explicit parameter store (the model only provides
    /// structure). Gradient checks perturb copies of the store through
    /// this entry point.
    pub fn forward_with(
        &self,
        tape: &mut Tape<R>,
        params: &Params<R>,
        batch: &Batch,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        let rep = self.represent_with(tape, params, batch, training, rng)?;
        let rep = tape.dropout(rep, self.config.dropout, training, rng)?;
        let w = tape.param(params, "head.w")?;
        let b = tape.param(params, "head.b")?;
        let logits = tape.matmul(rep, w)?;
        Ok(tape.add_bias(logits, b)?)
    }

    /// Pre-classifier representations `[batch, rep_dim]`, dropout off.
    pub fn represent(
        &self,
        tape: &mut Tape<R>,
        batch: &Batch,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        self.represent_with(tape, &self.params, batch, false, rng)
    }

    fn represent_with(
        &self,
        tape: &mut Tape<R>,
        params: &Params<R>,
        batch: &Batch,
        _training: bool,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        if batch.is_empty() {
            return Err(TensorError::EmptyInput { op: "forward" }.into());
        }
        if batch.width < self.min_width() {
            return Err(TensorError::TooShort {
                op: "forward",
                n: batch.width,
                l: self.min_width(),
            }
            .into());
        }
        let mut rows = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let ids = batch.row(b);
            if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_len) {
                return Err(TensorError::IndexOutOfRange {
                    op: "forward",
                    index: bad,
                    len: self.vocab_len,
                }
                .into());
            }
            let x = tape.param_rows(params, "embed", ids)?;
            rows.push(self.represent_sentence(tape, params, x, batch.lengths[b], rng)?);
        }
        Ok(tape.stack_rows(&rows)?)
    }

    fn represent_sentence(
        &self,
        tape: &mut Tape<R>,
        params: &Params<R>,
        x: TensorId,
        length: usize,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        let t = tape.shape(x)[0];
        match &self.structure {
            Structure::Linear { hidden: _ } => {
                // mean over real tokens; an all-pad row degenerates to zero
                let inv = if length > 0 { 1.0 / length as f64 } else { 0.0 };
                let mut w = vec![R::zero(); t];
                for v in w.iter_mut().take(length.min(t)) {
                    *v = R::from_f64(inv);
                }
                let w = tape.constant(&[1, t], w)?;
                let mean = tape.matmul(w, x)?;
                let fcw = tape.param(params, "fc.w")?;
                let fcb = tape.param(params, "fc.b")?;
                let h = tape.matmul(mean, fcw)?;
                let h = tape.add_bias(h, fcb)?;
                let h = tape.relu(h)?;
                let hidden = tape.shape(h)[1];
                Ok(tape.reshape(h, &[hidden])?)
            }
            Structure::Shallow { convs } => {
                let mut maps = Vec::with_capacity(convs.len());
                for layer in convs {
                    let map = layer.forward(tape, params, x, rng)?;
                    maps.push(tape.relu(map)?);
                }
                Ok(pool_and_concat(tape, &maps)?)
            }
            Structure::Deep { region, blocks } => {
                let x = self.same_pad(tape, x, region.width)?;
                let mut z = region.forward(tape, params, x, rng)?;
                for (a, b) in blocks {
                    let h = tape.relu(z)?;
                    let h = self.same_pad(tape, h, a.width)?;
                    let h = a.forward(tape, params, h, rng)?;
                    let h = tape.relu(h)?;
                    let h = self.same_pad(tape, h, b.width)?;
                    let h = b.forward(tape, params, h, rng)?;
                    z = tape.add(z, h)?;
                    z = tape.max_pool_rows(z, 3, 2)?;
                }
                Ok(tape.max_over_time(z)?)
            }
        }
    }

    /// Zero-pad rows so a valid convolution of `width` preserves length.
    /// Circular boundaries preserve length on their own.
    fn same_pad(&self, tape: &mut Tape<R>, x: TensorId, width: usize) -> Result<TensorId> {
        if self.config.boundary == BoundaryChoice::Circular {
            return Ok(x);
        }
        let before = (width - 1) / 2;
        let after = width / 2;
        Ok(tape.pad_rows(x, before, after)?)
    }

    /// Mean softmax cross-entropy over a batch.
    pub fn loss_with(
        &self,
        tape: &mut Tape<R>,
        params: &Params<R>,
        batch: &Batch,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        let logits = self.forward_with(tape, params, batch, training, rng)?;
        Ok(tape.softmax_cross_entropy(logits, &batch.labels)?)
    }

    pub fn count_parameters(&self) -> ParamCount {
        let total = self.params.total_scalars();
        let embedding = self.params.scalars_with_prefix("embed");
        ParamCount { total, embedding }
    }
}

fn rep_dim(config: &ModelConfig, structure: &Structure) -> usize {
    match structure {
        Structure::Linear { hidden } => *hidden,
        Structure::Shallow { .. } => config.effective_filters() * config.widths.len(),
        Structure::Deep { .. } => config.effective_channels(),
    }
}

fn glorot<R: Real>(fin: usize, fout: usize, rng: &mut RngStream) -> Vec<R> {
    use rand::Rng;
    let a = (6.0 / (fin + fout) as f64).sqrt();
    (0..fin * fout)
        .map(|_| R::from_f64(rng.gen_range(-a..a)))
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"LTXC";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialize a model to the flat checkpoint layout: magic and version,
/// architecture tag, dataset-derived sizes, the config as canonical JSON,
/// then every parameter in registry order as name, shape, and 32-bit
/// little-endian values. Bytes are a pure function of the model state.
pub fn checkpoint_bytes<R: Real>(model: &Model<R>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let tag = model.config.arch.name().as_bytes();
    out.push(tag.len() as u8);
    out.extend_from_slice(tag);
    out.extend_from_slice(&(model.vocab_len as u64).to_le_bytes());
    out.extend_from_slice(&(model.n_classes as u64).to_le_bytes());
    let config = serde_json::to_string(&model.config).expect("config serializes");
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for (name, p) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.data {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<R: Real>(model: &Model<R>, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint<R: Real>(path: &std::path::Path) -> Result<Model<R>> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    model_from_checkpoint_bytes(&bytes, &path.display().to_string())
}

pub fn model_from_checkpoint_bytes<R: Real>(bytes: &[u8], label: &str) -> Result<Model<R>> {
    let bad = |reason: String| ModelError::Checkpoint {
        path: label.to_string(),
        reason,
    };
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if at + n > bytes.len() {
            return Err(bad(format!("truncated at byte {at}")));
        }
        let s = &bytes[at..at + n];
        at += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let tag_len = take(1)?[0] as usize;
    let tag = String::from_utf8_lossy(take(tag_len)?).to_string();
    let vocab_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let n_classes = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let cfg_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let cfg_bytes = take(cfg_len)?;
    let config: ModelConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| bad(format!("config block unparseable: {e}")))?;
    if config.arch.name() != tag {
        return Err(bad(format!(
            "architecture tag {tag:?} disagrees with config {:?}",
            config.arch.name()
        )));
    }
    config.validate()?;

    // rebuild the structure, then overwrite every parameter from the file
    let structure = build_structure(&config, n_classes);
    let mut skeleton = Model::<R> {
        config: config.clone(),
        vocab_len,
        n_classes,
        params: Params::new(),
        structure,
    };
    {
        let zero = EmbeddingMatrix {
            dim: config.embedding_dim,
            data: vec![0.0; vocab_len * config.embedding_dim],
            found: vec![false; vocab_len],
        };
        let rebuilt = Model::<R>::build(&config, n_classes, &zero, 0)?;
        skeleton.params = rebuilt.params;
    }

    let n_params = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if n_params != skeleton.params.len() {
        return Err(bad(format!(
            "parameter record count {n_params} does not match architecture ({})",
            skeleton.params.len()
        )));
    }
    for _ in 0..n_params {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8_lossy(take(name_len)?).to_string();
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(numel * 4)?;
        let p = skeleton
            .params
            .get_mut(&name)
            .map_err(|_| bad(format!("unexpected parameter {name:?}")))?;
        if p.shape != shape {
            return Err(bad(format!(
                "parameter {name:?} has shape {shape:?}, architecture wants {:?}",
                p.shape
            )));
        }
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(bad(format!("non-finite value in parameter {name:?}")));
            }
            p.data[i] = R::from_f64(v as f64);
        }
        p.grad = None;
    }
    if at != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok(skeleton)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_batch, random_embeddings, Example};

    fn batch_of(texts: &[&str], labels: &[usize], vocab_words: &[&str], min_w: usize) -> (Batch, usize) {
        let mut examples = Vec::new();
        for (t, &l) in texts.iter().zip(labels) {
            examples.push(Example {
                label: l,
                tokens: t.split_whitespace().map(|s| s.to_string()).collect(),
            });
        }
        let vocab_ex = Example {
            label: 0,
            tokens: vocab_words.iter().map(|s| s.to_string()).collect(),
        };
        let vocab = crate::corpus::build_vocab(std::slice::from_ref(&vocab_ex), 1);
        let refs: Vec<&Example> = examples.iter().collect();
        let b = make_batch(&refs, &vocab, min_w).unwrap();
        (b, vocab.len())
    }

    fn tiny_config(arch: Arch) -> ModelConfig {
        let mut c = ModelConfig::new(arch);
        c.embedding_dim = 8;
        c.widths = vec![2, 3];
        c.filters = 4;
        c.channels = 5;
        c.kernel_hidden = vec![6];
        c.dropout = 0.0;
        c
    }

    fn all_archs() -> [Arch; 5] {
        [Arch::Linear, Arch::Scnn, Arch::Sclie, Arch::Dpcnn, Arch::Dpclie]
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let (batch, v) = batch_of(
            &["a b c d e", "c d e"],
            &[0, 1],
            &["a", "b", "c", "d", "e"],
            3,
        );
        for arch in all_archs() {
            let config = tiny_config(arch);
            let emb = random_embeddings(v, 8, 1);
            let model = Model::<f64>::build(&config, 2, &emb, 7).unwrap();
            let run = || {
                let mut tape = Tape::new();
                let mut rng = stream(0, "fwd");
                let y = model.forward(&mut tape, &batch, false, &mut rng).unwrap();
                (tape.shape(y).to_vec(), tape.value(y).to_vec())
            };
            let (shape, a) = run();
            let (_, b) = run();
            assert_eq!(shape, vec![2, 2], "{arch:?}");
            assert_eq!(a, b, "{arch:?} must be bit-reproducible");
            assert!(a.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn identical_sentences_get_identical_logits() {
        let (batch, v) = batch_of(
            &["a b c", "a b c"],
            &[0, 1],
            &["a", "b", "c"],
            3,
        );
        for arch in all_archs() {
            let model =
                Model::<f64>::build(&tiny_config(arch), 2, &random_embeddings(v, 8, 1), 3).unwrap();
            let mut tape = Tape::new();
            let mut rng = stream(0, "fwd");
            let y = model.forward(&mut tape, &batch, false, &mut rng).unwrap();
            let vals = tape.value(y);
            assert_eq!(&vals[..2], &vals[2..], "{arch:?}");
        }
    }

    #[test]
    fn all_pad_batch_is_finite_and_uniform() {
        let batch = Batch {
            ids: vec![PAD_ID; 2 * 4],
            labels: vec![0, 1],
            lengths: vec![0, 0],
            width: 4,
        };
        for arch in all_archs() {
            let model =
                Model::<f64>::build(&tiny_config(arch), 2, &random_embeddings(6, 8, 1), 3).unwrap();
            let mut tape = Tape::new();
            let mut rng = stream(0, "fwd");
            let y = model.forward(&mut tape, &batch, false, &mut rng).unwrap();
            let vals = tape.value(y);
            assert!(vals.iter().all(|v| v.is_finite()), "{arch:?}");
            assert_eq!(&vals[..2], &vals[2..], "{arch:?}");
        }
    }

    #[test]
    fn representation_ignores_extra_padding() {
        // windows of pure pad rows contribute conv bias only; with positive
        // real-token activations the max-pool ignores them
        let (b1, v) = batch_of(&["a b c d"], &[0], &["a", "b", "c", "d"], 4);
        let (b2, _) = batch_of(&["a b c d"], &[0], &["a", "b", "c", "d"], 9);
        assert_eq!(b2.width, 9);
        let mut config = tiny_config(Arch::Sclie);
        config.dropout = 0.0;
        let model = Model::<f64>::build(&config, 2, &random_embeddings(v, 8, 1), 5).unwrap();
        let run = |batch: &Batch| {
            let mut tape = Tape::new();
            let mut rng = stream(0, "fwd");
            let r = model.represent(&mut tape, batch, &mut rng).unwrap();
            tape.value(r).to_vec()
        };
        let r1 = run(&b1);
        let r2 = run(&b2);
        // constructed instance: confirm the real windows win the max
        let close = r1
            .iter()
            .zip(&r2)
            .all(|(x, y)| (x - y).abs() < 1e-12 || *y >= *x - 1e-12);
        assert!(close);
        let wins = r1.iter().zip(&r2).filter(|(x, y)| (*x - *y).abs() < 1e-12).count();
        assert!(wins * 2 >= r1.len(), "most features should be pad-insensitive: {wins}/{}", r1.len());
    }

    #[test]
    fn scnn_and_sclie_share_shapes() {
        let (batch, v) = batch_of(&["a b c d e f"], &[1], &["a", "b", "c", "d", "e", "f"], 5);
        let emb = random_embeddings(v, 8, 1);
        let scnn = Model::<f64>::build(&tiny_config(Arch::Scnn), 2, &emb, 3).unwrap();
        let sclie = Model::<f64>::build(&tiny_config(Arch::Sclie), 2, &emb, 3).unwrap();
        assert_eq!(scnn.rep_dim(), sclie.rep_dim());
        let shapes = |m: &Model<f64>| {
            let mut tape = Tape::new();
            let mut rng = stream(0, "fwd");
            let r = m.represent(&mut tape, &batch, &mut rng).unwrap();
            tape.shape(r).to_vec()
        };
        assert_eq!(shapes(&scnn), shapes(&sclie));
    }

    #[test]
    fn default_parameter_arithmetic_matches_hand_counts() {
        // d=300, 2 classes, vocab 100
        let emb = random_embeddings(100, 300, 1);
        let scnn = Model::<f32>::build(&ModelConfig::new(Arch::Scnn), 2, &emb, 1).unwrap();
        let n = scnn.count_parameters();
        assert_eq!(n.embedding, 100 * 300);
        // (3+4+5)*300*100 + 3*100 + 300*2 + 2
        assert_eq!(n.non_embedding(), 360_902);

        let linear = Model::<f32>::build(&ModelConfig::new(Arch::Linear), 2, &emb, 1).unwrap();
        let ln = linear.count_parameters().non_embedding() as f64;
        let sn = n.non_embedding() as f64;
        assert!((ln - sn).abs() / sn < 0.01, "linear {ln} vs scnn {sn}");

        let dpcnn = Model::<f32>::build(&ModelConfig::new(Arch::Dpcnn), 2, &emb, 1).unwrap();
        assert_eq!(dpcnn.count_parameters().non_embedding(), 601_252);
        let dpclie = Model::<f32>::build(&ModelConfig::new(Arch::Dpclie), 2, &emb, 1).unwrap();
        assert_eq!(dpclie.count_parameters().non_embedding(), 1_351_712);
        let ratio = dpclie.count_parameters().non_embedding() as f64
            / dpcnn.count_parameters().non_embedding() as f64;
        assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn doubling_filters_doubles_conv_count() {
        let emb = random_embeddings(50, 300, 1);
        let count_convs = |filters: usize| {
            let mut c = ModelConfig::new(Arch::Scnn);
            c.filters = filters;
            let m = Model::<f32>::build(&c, 2, &emb, 1).unwrap();
            let total = m.count_parameters().non_embedding();
            // strip the head to isolate conv layers
            let head = m.rep_dim() * 2 + 2;
            total - head
        };
        assert_eq!(count_convs(200), 2 * count_convs(100));
    }

    #[test]
    fn sclie_default_representation_is_300() {
        let emb = random_embeddings(50, 300, 1);
        let m = Model::<f32>::build(&ModelConfig::new(Arch::Sclie), 2, &emb, 1).unwrap();
        assert_eq!(m.rep_dim(), 300);
    }

    #[test]
    fn training_step_reduces_loss() {
        let (batch, v) = batch_of(
            &[
                "a b c d", "b c d e", "c d e f", "d e f a",
                "f e d c", "e d c b", "d c b a", "a f e d",
            ],
            &[0, 0, 0, 0, 1, 1, 1, 1],
            &["a", "b", "c", "d", "e", "f"],
            3,
        );
        for arch in all_archs() {
            let model =
                Model::<f64>::build(&tiny_config(arch), 2, &random_embeddings(v, 8, 2), 11).unwrap();
            let mut model = model;
            let mut opt = crate::ndtensor::Adadelta::new(1.0, 0.95, 1e-6, 0.0);
            let mut first = 0.0;
            let mut last = 0.0;
            for step in 0..50 {
                let mut tape = Tape::new();
                let mut rng = stream(100 + step as u64, "fwd");
                let loss = model
                    .loss_with(&mut tape, &model.params, &batch, true, &mut rng)
                    .unwrap();
                let lv = tape.scalar_value(loss).unwrap().to_f64();
                if step == 0 {
                    first = lv;
                }
                last = lv;
                let grads = tape.backward(loss).unwrap();
                model.params.clear_grads();
                tape.accumulate_param_grads(&grads, &mut model.params).unwrap();
                for p in ["embed"] {
                    model.params.zero_grad_rows(p, &[PAD_ID]).unwrap();
                }
                opt.step(&mut model.params).unwrap();
            }
            assert!(last < first, "{arch:?}: {first} -> {last}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let emb = random_embeddings(20, 8, 3);
        let model = Model::<f32>::build(&tiny_config(Arch::Dpclie), 2, &emb, 9).unwrap();
        let bytes = checkpoint_bytes(&model);
        let loaded = model_from_checkpoint_bytes::<f32>(&bytes, "mem").unwrap();
        assert_eq!(loaded.vocab_len, model.vocab_len);
        assert_eq!(loaded.n_classes, model.n_classes);
        assert_eq!(loaded.config, model.config);
        let again = checkpoint_bytes(&loaded);
        assert_eq!(bytes, again);
        // values match exactly
        for (name, p) in model.params.iter() {
            let q = loaded.params.get(name).unwrap();
            assert_eq!(p.shape, q.shape);
            assert_eq!(p.data, q.data, "{name}");
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let emb = random_embeddings(10, 8, 3);
        let model = Model::<f32>::build(&tiny_config(Arch::Scnn), 2, &emb, 9).unwrap();
        let bytes = checkpoint_bytes(&model);
        assert!(model_from_checkpoint_bytes::<f32>(&bytes[..bytes.len() - 2], "mem").is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(model_from_checkpoint_bytes::<f32>(&wrong_magic, "mem").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(model_from_checkpoint_bytes::<f32>(&extra, "mem").is_err());
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut c = ModelConfig::new(Arch::Scnn);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(Arch::Scnn);
        c.widths = vec![];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(Arch::Dpcnn);
        c.channel_multiplier = 0.0;
        assert!(c.validate().is_err());
    }
}
