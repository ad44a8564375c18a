//! The residual 3D CNN classifier with switchable normalization.
//!
//! Layer order:
//! Conv → Norm → ReLU → MaxPool → Conv → Norm → ReLU → Conv →
//! [ResidualBlock × n] → Norm → ReLU → GAP → FC (→ softmax).
//!
//! Each residual block is `skip(x) + (Conv→Norm→ReLU)∘(Conv→Norm→ReLU)(x)`
//! where the skip is identity, or a strided 1×1×1 projection when the
//! channel count or stride changes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::RngStream;
use crate::tensor::{BatchStats, ConvGeom, NormMode, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// (channels, depth, height, width) of one input volume.
    pub input_shape: [usize; 4],
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub pool_window: usize,
    pub n_residual_blocks: usize,
    pub channel_schedule: Vec<BlockSpec>,
    pub norm_kind: NormKind,
    pub eps: f64,
    pub num_classes: usize,
    /// Weight of the newest batch in batch-norm running averages.
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        let widths = [8, 8, 16, 16, 32, 32, 64, 64];
        let channel_schedule = widths
            .iter()
            .enumerate()
            .map(|(i, &channels)| BlockSpec {
                channels,
                stride: if matches!(i, 2 | 4 | 6) { 2 } else { 1 },
            })
            .collect();
        Self {
            input_shape: [1, 16, 32, 32],
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: 1,
            pool_window: 2,
            n_residual_blocks: 8,
            channel_schedule,
            norm_kind: NormKind::Batch,
            eps: 1e-5,
            num_classes: 2,
            bn_momentum: 0.1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(NetworkError::Config(m));
        if self.n_residual_blocks < 1 {
            return err("n_residual_blocks must be >= 1".into());
        }
        if self.channel_schedule.len() != self.n_residual_blocks {
            return err(format!(
                "channel_schedule has {} entries but n_residual_blocks is {}",
                self.channel_schedule.len(),
                self.n_residual_blocks
            ));
        }
        if self.num_classes < 2 {
            return err("num_classes must be >= 2".into());
        }
        if self.input_shape.iter().any(|&d| d == 0) || self.stem_channels == 0 {
            return err("input_shape and stem_channels must be positive".into());
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 || self.pool_window == 0 {
            return err("stem_kernel, stem_stride and pool_window must be positive".into());
        }
        if self.channel_schedule.iter().any(|b| b.channels == 0 || b.stride == 0) {
            return err("block channels and strides must be positive".into());
        }
        if !(self.eps > 0.0) {
            return err(format!("eps must be > 0, got {}", self.eps));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return err(format!("bn_momentum must lie in [0, 1], got {}", self.bn_momentum));
        }
        self.spatial_trace().map(|_| ())
    }

    /// Spatial extent after every downsampling stage, or a configuration
    /// error naming the stage that does not fit.
    pub fn spatial_trace(&self) -> Result<Vec<[usize; 3]>> {
        use crate::tensor::kernels::out_len;
        let mut dims = [self.input_shape[1], self.input_shape[2], self.input_shape[3]];
        let mut trace = vec![dims];
        let step = |dims: &mut [usize; 3], k: usize, p: usize, s: usize, what: &str| {
            for d in dims.iter_mut() {
                *d = out_len(*d, k, p, s)
                    .ok_or_else(|| NetworkError::Config(format!("spatial dims too small for the {what}")))?;
            }
            Ok::<_, NetworkError>(())
        };
        step(
            &mut dims,
            self.stem_kernel,
            self.stem_kernel / 2,
            self.stem_stride,
            "stem convolution",
        )?;
        trace.push(dims);
        step(&mut dims, self.pool_window, 0, self.pool_window, "stem pooling")?;
        trace.push(dims);
        for (i, b) in self.channel_schedule.iter().enumerate() {
            if b.stride > 1 {
                step(&mut dims, 3, 1, b.stride, &format!("residual block {i}"))?;
                trace.push(dims);
            }
        }
        Ok(trace)
    }

    /// Stable digest of the configuration, stored in checkpoint headers.
    pub fn digest(&self) -> [u8; 32] {
        let text = toml::to_string(self).expect("NetConfig serializes");
        Sha256::digest(text.as_bytes()).into()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: usize,
    b: usize,
    geom: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
struct NormLayer {
    gamma: usize,
    beta: usize,
    slot: usize,
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv_a: ConvLayer,
    norm_a: NormLayer,
    conv_b: ConvLayer,
    norm_b: NormLayer,
    projection: Option<ConvLayer>,
}

impl ResidualBlock {
    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }
}

/// Per-channel running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average; the variance uses the unbiased batch
    /// estimate.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let unbias = if batch.count > 1 {
            batch.count as f64 / (batch.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * unbias;
        }
    }
}

/// Parameter and running-stat snapshot of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<Tensor>,
    pub running: Vec<RunningStats>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: NetConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    running: Vec<RunningStats>,
    stem: [ConvLayer; 3],
    stem_norms: [NormLayer; 2],
    blocks: Vec<ResidualBlock>,
    head_norm: NormLayer,
    fc: (usize, usize),
}

/// Outputs of one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// Pre-softmax class scores `[N, K]`.
    pub logits: Var,
    /// L2-normalized global-average-pool features `[N, F]`.
    pub embedding: Var,
    /// Tape handles of the parameters, in declaration order.
    pub params: Vec<Var>,
    /// Batch statistics of every batch-norm layer (training mode only).
    pub batch_stats: Vec<BatchStats>,
}

struct Builder<'r> {
    params: Vec<Tensor>,
    names: Vec<String>,
    norms: usize,
    rng: &'r mut RngStream,
}

impl Builder<'_> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, geom: ConvGeom) -> ConvLayer {
        let std = (2.0 / (cin * k * k * k) as f64).sqrt();
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&[cout, cin, k, k, k], |_| std * rng.normal());
        let w = self.push(format!("{name}.weight"), w);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvLayer { w, b, geom }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormLayer {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.norms += 1;
        NormLayer {
            gamma,
            beta,
            slot: self.norms - 1,
        }
    }
}

/// Normalization dispatch for one forward pass.
struct NormCtx<'a> {
    kind: NormKind,
    training: bool,
    eps: f64,
    running: &'a [RunningStats],
    stats: Vec<BatchStats>,
}

impl NormCtx<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var, layer: NormLayer, bound: &[Var]) -> Result<Var> {
        let (gamma, beta) = (bound[layer.gamma], bound[layer.beta]);
        match self.kind {
            NormKind::Instance => Ok(tape.instance_norm(x, gamma, beta, self.eps)?),
            NormKind::Batch => {
                let mode = if self.training {
                    NormMode::Train
                } else {
                    let rs = &self.running[layer.slot];
                    NormMode::Eval {
                        mean: &rs.mean,
                        var: &rs.var,
                    }
                };
                let (y, stats) = tape.batch_norm(x, gamma, beta, self.eps, mode)?;
                if let Some(s) = stats {
                    self.stats.push(s);
                }
                Ok(y)
            }
        }
    }
}

fn conv(tape: &mut Tape, x: Var, layer: ConvLayer, bound: &[Var]) -> Result<Var> {
    Ok(tape.conv3d(x, bound[layer.w], bound[layer.b], layer.geom)?)
}

impl Model {
    /// Builds the network with fan-in-scaled Gaussian weights, zero biases,
    /// and unit/zero normalization affine parameters.
    pub fn build(config: &NetConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            norms: 0,
            rng,
        };
        let sc = config.stem_channels;
        let k = config.stem_kernel;
        let cin = config.input_shape[0];
        let c1 = b.conv(
            "stem.conv1",
            cin,
            sc,
            k,
            ConvGeom::new([config.stem_stride; 3], [k / 2; 3]),
        );
        let n1 = b.norm("stem.norm1", sc);
        let c2 = b.conv("stem.conv2", sc, sc, 3, ConvGeom::same(3));
        let n2 = b.norm("stem.norm2", sc);
        let c3 = b.conv("stem.conv3", sc, sc, 3, ConvGeom::same(3));

        let mut blocks = Vec::with_capacity(config.n_residual_blocks);
        let mut ch = sc;
        for (i, spec) in config.channel_schedule.iter().enumerate() {
            let name = format!("block{i}");
            let geom_a = ConvGeom::new([spec.stride; 3], [1; 3]);
            let conv_a = b.conv(&format!("{name}.conv_a"), ch, spec.channels, 3, geom_a);
            let norm_a = b.norm(&format!("{name}.norm_a"), spec.channels);
            let conv_b = b.conv(
                &format!("{name}.conv_b"),
                spec.channels,
                spec.channels,
                3,
                ConvGeom::same(3),
            );
            let norm_b = b.norm(&format!("{name}.norm_b"), spec.channels);
            let projection = (spec.stride != 1 || spec.channels != ch).then(|| {
                b.conv(
                    &format!("{name}.proj"),
                    ch,
                    spec.channels,
                    1,
                    ConvGeom::new([spec.stride; 3], [0; 3]),
                )
            });
            blocks.push(ResidualBlock {
                conv_a,
                norm_a,
                conv_b,
                norm_b,
                projection,
            });
            ch = spec.channels;
        }
        let head_norm = b.norm("head.norm", ch);
        let std = (1.0 / ch as f64).sqrt();
        let rng = &mut *b.rng;
        let fw = Tensor::from_fn(&[config.num_classes, ch], |_| std * rng.normal());
        let fw = b.push("head.fc.weight".into(), fw);
        let fb = b.push("head.fc.bias".into(), Tensor::zeros(&[config.num_classes]));

        let running = match config.norm_kind {
            NormKind::Batch => {
                let mut channels = vec![sc, sc];
                for s in &config.channel_schedule {
                    channels.extend([s.channels, s.channels]);
                }
                channels.push(ch);
                channels.into_iter().map(RunningStats::new).collect()
            }
            NormKind::Instance => Vec::new(),
        };
        debug_assert!(config.norm_kind == NormKind::Instance || running.len() == b.norms);

        Ok(Self {
            config: config.clone(),
            params: b.params,
            names: b.names,
            running,
            stem: [c1, c2, c3],
            stem_norms: [n1, n2],
            blocks,
            head_norm,
            fc: (fw, fb),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    /// Binds every parameter as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Runs the whole network on `x` (`[N, C, D, H, W]`).
    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<Forward> {
        let shape = tape.value(x).shape().to_vec();
        let c = &self.config;
        if shape.len() != 5 || shape[1..] != c.input_shape[..] {
            return Err(NetworkError::Tensor(TensorError::Dimension {
                op: "forward",
                detail: format!(
                    "input {:?} does not match [N, {}, {}, {}, {}]",
                    shape, c.input_shape[0], c.input_shape[1], c.input_shape[2], c.input_shape[3]
                ),
            }));
        }
        let bound = self.bind(tape);
        let mut norm = NormCtx {
            kind: c.norm_kind,
            training,
            eps: c.eps,
            running: &self.running,
            stats: Vec::new(),
        };

        let mut h = conv(tape, x, self.stem[0], &bound)?;
        h = norm.apply(tape, h, self.stem_norms[0], &bound)?;
        h = tape.relu(h);
        let pw = c.pool_window;
        h = tape.max_pool3d(h, [pw; 3], [pw; 3])?;
        h = conv(tape, h, self.stem[1], &bound)?;
        h = norm.apply(tape, h, self.stem_norms[1], &bound)?;
        h = tape.relu(h);
        h = conv(tape, h, self.stem[2], &bound)?;
        for block in &self.blocks {
            h = Self::run_block(tape, h, block, &bound, &mut norm)?;
        }
        h = norm.apply(tape, h, self.head_norm, &bound)?;
        h = tape.relu(h);
        let pooled = tape.global_avg_pool(h)?;
        let logits = tape.linear(pooled, bound[self.fc.0], bound[self.fc.1])?;
        let embedding = tape.l2_normalize(pooled)?;
        Ok(Forward {
            logits,
            embedding,
            params: bound,
            batch_stats: norm.stats,
        })
    }

    /// One residual block applied to `x`, with parameters already bound on
    /// the tape. Returns the block output and any batch statistics.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        index: usize,
        x: Var,
        bound: &[Var],
        training: bool,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let mut norm = NormCtx {
            kind: self.config.norm_kind,
            training,
            eps: self.config.eps,
            running: &self.running,
            stats: Vec::new(),
        };
        let y = Self::run_block(tape, x, &self.blocks[index], bound, &mut norm)?;
        Ok((y, norm.stats))
    }

    fn run_block(tape: &mut Tape, x: Var, block: &ResidualBlock, bound: &[Var], norm: &mut NormCtx<'_>) -> Result<Var> {
        let mut h = conv(tape, x, block.conv_a, bound)?;
        h = norm.apply(tape, h, block.norm_a, bound)?;
        h = tape.relu(h);
        h = conv(tape, h, block.conv_b, bound)?;
        h = norm.apply(tape, h, block.norm_b, bound)?;
        h = tape.relu(h);
        let skip = match block.projection {
            Some(p) => conv(tape, x, p, bound)?,
            None => x,
        };
        Ok(tape.add(skip, h)?)
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        if self.config.norm_kind != NormKind::Batch {
            return;
        }
        let m = self.config.bn_momentum;
        for (rs, s) in self.running.iter_mut().zip(stats) {
            rs.update(s, m);
        }
    }

    /// Class probabilities in inference mode.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, x, false)?;
        let probs = tape.softmax(out.logits)?;
        Ok(tape.value(probs).clone())
    }

    pub fn snapshot(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            running: self.running.clone(),
        }
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.params.len() != self.params.len()
            || ckpt
                .params
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.shape() != b.shape())
            || ckpt.running.len() != self.running.len()
        {
            return Err(NetworkError::Checkpoint("snapshot does not match model layout".into()));
        }
        self.params = ckpt.params.clone();
        self.running = ckpt.running.clone();
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, &self.config, &self.snapshot())?;
        w.flush()?;
        Ok(())
    }

    /// Loads parameters written by [`Model::save_checkpoint`] into a model
    /// built from the same configuration.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let mut r = BufReader::new(File::open(path)?);
        let ckpt = read_checkpoint(&mut r, &self.config)?;
        self.restore(&ckpt)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"DGCK";
const CKPT_VERSION: u32 = 1;

/// Layout: magic `DGCK`, u32 version, 32-byte config digest, u32 tensor
/// count, then per tensor a u64 element count and its values; then u32
/// running-stat layer count and per layer u64 channel count, means,
/// variances. All integers and floats little-endian; floats are f64.
pub fn write_checkpoint(w: &mut impl Write, config: &NetConfig, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&config.digest())?;
    w.write_all(&(ckpt.params.len() as u32).to_le_bytes())?;
    for p in &ckpt.params {
        w.write_all(&(p.numel() as u64).to_le_bytes())?;
        for v in p.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&(ckpt.running.len() as u32).to_le_bytes())?;
    for rs in &ckpt.running {
        w.write_all(&(rs.mean.len() as u64).to_le_bytes())?;
        for v in rs.mean.iter().chain(&rs.var) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read, config: &NetConfig) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(NetworkError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CKPT_VERSION {
        return Err(NetworkError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    if digest != config.digest() {
        return Err(NetworkError::Checkpoint("configuration digest does not match".into()));
    }
    // shapes come from a freshly built model with this configuration
    let template = Model::build(config, &mut RngStream::new(0, "checkpoint-template"))?;
    let n = read_u32(r)? as usize;
    if n != template.params.len() {
        return Err(NetworkError::Checkpoint(format!(
            "{n} tensors, expected {}",
            template.params.len()
        )));
    }
    let mut params = Vec::with_capacity(n);
    for t in &template.params {
        let len = read_u64(r)? as usize;
        if len != t.numel() {
            return Err(NetworkError::Checkpoint(format!(
                "tensor of {len} values where {} expected",
                t.numel()
            )));
        }
        let data = read_f64s(r, len)?;
        params.push(Tensor::new(t.shape().to_vec(), data)?);
    }
    let layers = read_u32(r)? as usize;
    if layers != template.running.len() {
        return Err(NetworkError::Checkpoint("running-stat layer count mismatch".into()));
    }
    let mut running = Vec::with_capacity(layers);
    for t in &template.running {
        let c = read_u64(r)? as usize;
        if c != t.mean.len() {
            return Err(NetworkError::Checkpoint("running-stat width mismatch".into()));
        }
        running.push(RunningStats {
            mean: read_f64s(r, c)?,
            var: read_f64s(r, c)?,
        });
    }
    Ok(Checkpoint { params, running })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
