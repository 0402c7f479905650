//! The image-only and image+text calorie regressors.
//!
//! Both share one image branch (stem conv, inverted-residual stages, optional
//! 1×1 head conv) and one dense head. The multimodal model adds a text branch
//! whose token embeddings serve as keys/values for cross-attention from the
//! image feature grid.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::nn::{
    embed_and_pool, ConvBn, Dense, Dropout, EmbeddingTable, ForwardCtx, Init, InvertedResidual, MultiHeadAttention,
    ParamStore, TokenBatch,
};
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Unimodal,
    Multimodal,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Unimodal => "unimodal",
            ModelKind::Multimodal => "multimodal",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unimodal" => Ok(ModelKind::Unimodal),
            "multimodal" => Ok(ModelKind::Multimodal),
            other => Err(arg_err!("unknown model kind {other:?}")),
        }
    }
}

/// Architecture hyperparameters shared by both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Input height and width in pixels.
    pub image_size: usize,
    pub stem_channels: usize,
    /// Output channels of each inverted-residual stage.
    pub backbone_widths: Vec<usize>,
    /// Number of blocks in each stage.
    pub backbone_blocks: Vec<usize>,
    /// Stride of the first block of each stage.
    pub stage_strides: Vec<usize>,
    /// Expansion factor of each stage.
    pub expansions: Vec<usize>,
    /// Channels of a final 1×1 conv after the stages; 0 disables it.
    pub head_channels: usize,
    pub dense_units: Vec<usize>,
    pub dropout_rate: f64,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub embed_dim: usize,
    pub attention_heads: usize,
    pub key_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::micro()
    }
}

impl ArchConfig {
    /// Desk-scale configuration that trains in seconds on one core.
    pub fn micro() -> Self {
        ArchConfig {
            image_size: 64,
            stem_channels: 8,
            backbone_widths: vec![8, 16],
            backbone_blocks: vec![1, 1],
            stage_strides: vec![1, 2],
            expansions: vec![6, 6],
            head_channels: 0,
            dense_units: vec![16, 8],
            dropout_rate: 0.2,
            vocab_size: 64,
            max_tokens: 8,
            embed_dim: 16,
            attention_heads: 2,
            key_dim: 8,
        }
    }

    /// Full-width MobileNetV2 layout at 224×224, used to check parameter
    /// scale rather than for training.
    pub fn paper_scale() -> Self {
        ArchConfig {
            image_size: 224,
            stem_channels: 32,
            backbone_widths: vec![16, 24, 32, 64, 96, 160, 320],
            backbone_blocks: vec![1, 2, 3, 4, 3, 3, 1],
            stage_strides: vec![1, 2, 2, 2, 1, 2, 1],
            expansions: vec![1, 6, 6, 6, 6, 6, 6],
            head_channels: 1280,
            dense_units: vec![64, 32],
            dropout_rate: 0.2,
            vocab_size: 2000,
            max_tokens: 16,
            embed_dim: 1280,
            attention_heads: 2,
            key_dim: 64,
        }
    }

    /// Channel count of the image feature grid.
    pub fn feature_channels(&self) -> usize {
        if self.head_channels > 0 {
            self.head_channels
        } else {
            self.backbone_widths.last().copied().unwrap_or(self.stem_channels)
        }
    }

    /// Side length of the image feature grid (same padding rounds up).
    pub fn feature_grid(&self) -> usize {
        let mut side = self.image_size.div_ceil(2);
        for &s in &self.stage_strides {
            side = side.div_ceil(s.max(1));
        }
        side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.stem_channels == 0 {
            return bad("image_size and stem_channels must be positive".into());
        }
        let stages = self.backbone_widths.len();
        if stages == 0 {
            return bad("backbone_widths must name at least one stage".into());
        }
        for (name, len) in [
            ("backbone_blocks", self.backbone_blocks.len()),
            ("stage_strides", self.stage_strides.len()),
            ("expansions", self.expansions.len()),
        ] {
            if len != stages {
                return bad(format!("{name} has {len} entries but there are {stages} stages"));
            }
        }
        if self.backbone_widths.contains(&0) || self.backbone_blocks.contains(&0) || self.expansions.contains(&0) {
            return bad("stage widths, block counts and expansions must be positive".into());
        }
        if let Some(s) = self.stage_strides.iter().find(|s| !matches!(s, 1 | 2)) {
            return bad(format!("stage stride must be 1 or 2, got {s}"));
        }
        if self.dense_units.len() != 2 || self.dense_units.contains(&0) {
            return bad(format!(
                "dense_units must hold two positive widths, got {:?}",
                self.dense_units
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.vocab_size < 2 || self.max_tokens == 0 || self.attention_heads == 0 || self.key_dim == 0 {
            return bad("vocab_size ≥ 2 and positive max_tokens, attention_heads, key_dim required".into());
        }
        if self.embed_dim != self.feature_channels() {
            return bad(format!(
                "embed_dim {} must equal the image feature channels {}",
                self.embed_dim,
                self.feature_channels()
            ));
        }
        Ok(())
    }
}

/// Affine map applied to the final linear unit: `kcal = raw·scale + offset`.
///
/// Fixed before training from the training targets so the network works on
/// standardized outputs; not a trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputScale {
    pub offset: f64,
    pub scale: f64,
}

impl Default for OutputScale {
    fn default() -> Self {
        OutputScale {
            offset: 0.0,
            scale: 1.0,
        }
    }
}

impl OutputScale {
    /// Mean and population standard deviation of `targets` (scale 1 when
    /// they are constant).
    pub fn from_targets(targets: &[f64]) -> Self {
        if targets.is_empty() {
            return OutputScale::default();
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        OutputScale {
            offset: mean,
            scale: if sd > 0.0 && sd.is_finite() { sd } else { 1.0 },
        }
    }
}

/// Type and shape of one layer, for structural comparison of the models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSignature {
    pub kind: &'static str,
    pub shape: Vec<usize>,
}

impl LayerSignature {
    fn new(kind: &'static str, shape: Vec<usize>) -> Self {
        LayerSignature { kind, shape }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBranch {
    pub stem: ConvBn,
    pub blocks: Vec<InvertedResidual>,
    pub head: Option<ConvBn>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextBranch {
    pub embedding: EmbeddingTable,
    pub attention: MultiHeadAttention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead {
    pub hidden: [Dense; 2],
    pub output: Dense,
    pub dropout: Dropout,
}

/// Independent generator streams so the image branch initializes
/// identically in both models.
const STREAM_IMAGE: u64 = 0;
const STREAM_TEXT: u64 = 1;
const STREAM_HEAD: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    kind: ModelKind,
    cfg: ArchConfig,
    pub image: ImageBranch,
    pub text: Option<TextBranch>,
    pub head: DenseHead,
    pub store: ParamStore<T>,
    pub output_scale: OutputScale,
}

pub fn build_unimodal<T: Scalar>(cfg: &ArchConfig, seed: u64) -> Result<Model<T>> {
    Model::build(ModelKind::Unimodal, cfg, seed)
}

pub fn build_multimodal<T: Scalar>(cfg: &ArchConfig, seed: u64) -> Result<Model<T>> {
    Model::build(ModelKind::Multimodal, cfg, seed)
}

impl<T: Scalar> Model<T> {
    pub fn build(kind: ModelKind, cfg: &ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();

        let mut rng = stream(seed, STREAM_IMAGE);
        let stem = ConvBn::full(&mut store, "stem", 3, 3, cfg.stem_channels, 2, true, &mut rng);
        let mut blocks = Vec::new();
        let mut c_in = cfg.stem_channels;
        for (s, &width) in cfg.backbone_widths.iter().enumerate() {
            for b in 0..cfg.backbone_blocks[s] {
                let stride = if b == 0 { cfg.stage_strides[s] } else { 1 };
                let name = format!("stage{s}.block{b}");
                blocks.push(InvertedResidual::new(
                    &mut store,
                    &name,
                    c_in,
                    width,
                    stride,
                    cfg.expansions[s],
                    &mut rng,
                )?);
                c_in = width;
            }
        }
        let head_conv = (cfg.head_channels > 0)
            .then(|| ConvBn::full(&mut store, "head_conv", 1, c_in, cfg.head_channels, 1, true, &mut rng));
        let d = cfg.feature_channels();

        let text = match kind {
            ModelKind::Unimodal => None,
            ModelKind::Multimodal => {
                let mut rng = stream(seed, STREAM_TEXT);
                let embedding = EmbeddingTable::new(&mut store, "embedding", cfg.vocab_size, cfg.embed_dim, &mut rng);
                let attention =
                    MultiHeadAttention::new(&mut store, "attention", d, cfg.attention_heads, cfg.key_dim, &mut rng)?;
                Some(TextBranch { embedding, attention })
            }
        };

        let grid = cfg.feature_grid();
        let fused = match kind {
            ModelKind::Unimodal => d,
            ModelKind::Multimodal => d + cfg.embed_dim + grid * grid * d,
        };
        let mut rng = stream(seed, STREAM_HEAD);
        let [u1, u2] = [cfg.dense_units[0], cfg.dense_units[1]];
        let h1 = Dense::new(
            &mut store,
            "dense1",
            fused,
            u1,
            Init::HeUniform { fan_in: fused },
            &mut rng,
        );
        let h2 = Dense::new(&mut store, "dense2", u1, u2, Init::HeUniform { fan_in: u1 }, &mut rng);
        let output = Dense::new(&mut store, "output", u2, 1, Init::LecunUniform { fan_in: u2 }, &mut rng);
        let head = DenseHead {
            hidden: [h1, h2],
            output,
            dropout: Dropout::new(cfg.dropout_rate)?,
        };

        Ok(Model {
            kind,
            cfg: cfg.clone(),
            image: ImageBranch {
                stem,
                blocks,
                head: head_conv,
            },
            text,
            head,
            store,
            output_scale: OutputScale::default(),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    /// Total trainable scalars.
    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Image feature map `B×h×w×D`.
    pub fn image_features(&self, ctx: &mut ForwardCtx<'_, T>, image: Var) -> Result<Var> {
        let s = self.cfg.image_size;
        let shape = ctx.tape.shape(image);
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != 3 {
            return Err(dim_err!("model expects B×{s}×{s}×3 images, got {shape:?}"));
        }
        let mut h = self.image.stem.forward(ctx, image)?;
        for block in &self.image.blocks {
            h = block.forward(ctx, h)?;
        }
        if let Some(head) = &self.image.head {
            h = head.forward(ctx, h)?;
        }
        Ok(h)
    }

    /// Calorie predictions `B×1` in kcal.
    ///
    /// `text` must be present exactly when the model is multimodal.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_, T>, image: Var, text: Option<&TokenBatch>) -> Result<Var> {
        let features = self.image_features(ctx, image)?;
        let fshape = ctx.tape.shape(features).to_vec();
        let (b, gh, gw, d) = (fshape[0], fshape[1], fshape[2], fshape[3]);
        let pooled_image = ctx.tape.mean(features, &[1, 2])?;

        let fused = match (&self.text, text) {
            (None, None) => pooled_image,
            (Some(branch), Some(ids)) => {
                if ids.rows != b {
                    return Err(dim_err!("{} token rows for a batch of {b} images", ids.rows));
                }
                let (seq, pooled_text) = embed_and_pool(ctx, &branch.embedding, ids)?;
                let queries = ctx.tape.reshape(features, &[b, gh * gw, d])?;
                let attended = branch.attention.forward(ctx, queries, seq)?;
                let flat = ctx.tape.flatten(attended)?;
                ctx.tape.concat(&[pooled_image, pooled_text, flat])?
            }
            (None, Some(_)) => return Err(arg_err!("the unimodal model takes no text input")),
            (Some(_), None) => return Err(arg_err!("the multimodal model requires text input")),
        };

        let mut h = fused;
        for dense in &self.head.hidden {
            h = dense.forward(ctx, h)?;
            h = ctx.tape.relu(h);
            h = self.head.dropout.forward(ctx, h);
        }
        let raw = self.head.output.forward(ctx, h)?;
        let scaled = ctx.tape.scale(raw, lit(self.output_scale.scale));
        let offset = ctx.tape.constant(Tensor::full([1], lit(self.output_scale.offset)));
        ctx.tape.add(scaled, offset)
    }

    /// Evaluation-mode predictions as a flat vector.
    pub fn predict(&self, images: &Tensor<T>, text: Option<&TokenBatch>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval(&mut tape, &self.store);
        let x = ctx.tape.constant(images.clone());
        let y = self.forward(&mut ctx, x, text)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Layer sequence along the prediction path. The unimodal sequence is a
    /// subsequence of the multimodal one for the same config.
    pub fn layer_signatures(&self) -> Vec<LayerSignature> {
        let mut out = Vec::new();
        let push_convbn = |out: &mut Vec<LayerSignature>, c: &ConvBn| {
            let (kind, shape) = c.signature();
            out.push(LayerSignature::new(kind, shape));
            out.push(LayerSignature::new("batch_norm", vec![c.norm.channels]));
            if c.relu6 {
                out.push(LayerSignature::new("relu6", vec![]));
            }
        };
        push_convbn(&mut out, &self.image.stem);
        for block in &self.image.blocks {
            for stage in block.stages() {
                push_convbn(&mut out, stage);
            }
            if block.has_skip() {
                out.push(LayerSignature::new("residual_add", vec![block.c_out]));
            }
        }
        if let Some(h) = &self.image.head {
            push_convbn(&mut out, h);
        }
        out.push(LayerSignature::new(
            "global_average_pool",
            vec![self.cfg.feature_channels()],
        ));
        if let Some(t) = &self.text {
            out.push(LayerSignature::new(
                "embedding",
                vec![t.embedding.vocab_size, t.embedding.dim],
            ));
            out.push(LayerSignature::new("global_average_pool", vec![t.embedding.dim]));
            out.push(LayerSignature::new(
                "attention",
                vec![t.attention.heads, t.attention.key_dim, t.attention.model_dim],
            ));
            out.push(LayerSignature::new("flatten", vec![]));
            out.push(LayerSignature::new("concat", vec![]));
        }
        // Dense layers are identified by width; their fan-in necessarily
        // differs after fusion.
        for dense in &self.head.hidden {
            out.push(LayerSignature::new("dense", vec![dense.out_dim]));
            out.push(LayerSignature::new("relu", vec![]));
            out.push(LayerSignature::new("dropout", vec![]));
        }
        out.push(LayerSignature::new("dense", vec![self.head.output.out_dim]));
        out
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for p in self.store.params() {
            store.add_param(p.name.clone(), p.tensor.cast());
        }
        for b in self.store.buffers() {
            store.add_buffer(b.name.clone(), b.tensor.cast());
        }
        Model {
            kind: self.kind,
            cfg: self.cfg.clone(),
            image: self.image.clone(),
            text: self.text.clone(),
            head: self.head.clone(),
            store,
            output_scale: self.output_scale,
        }
    }
}
