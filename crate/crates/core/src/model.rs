//! Desk-scale encoder E(·) and projection head g(·); the embedding network
//! is f = g∘E. Linear evaluation attaches to the encoder output h with the
//! projection head removed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::Image;
use crate::autodiff::{Graph, NodeId, RunningStats};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("input image {index} is {got_h}x{got_w}, expected {want}x{want}")]
    ResolutionMismatch { index: usize, got_h: usize, got_w: usize, want: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint missing tensor {0}")]
    MissingTensor(String),
}

type Result<V> = std::result::Result<V, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Mlp,
    Smallconv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Encoder output width; for smallconv, the channel count of the last block.
    #[serde(default = "default_h_dim")]
    pub h_dim: usize,
    /// Channel widths of the 4 smallconv blocks; the last must equal h_dim.
    #[serde(default = "default_conv_widths")]
    pub conv_widths: Vec<usize>,
    /// Square input resolution in pixels.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
}

fn default_h_dim() -> usize {
    256
}

fn default_conv_widths() -> Vec<usize> {
    vec![32, 64, 128, 256]
}

fn default_resolution() -> usize {
    32
}

impl EncoderConfig {
    pub fn mlp(h_dim: usize, resolution: usize) -> Self {
        Self { kind: EncoderKind::Mlp, h_dim, conv_widths: default_conv_widths(), resolution }
    }

    pub fn smallconv(resolution: usize) -> Self {
        Self {
            kind: EncoderKind::Smallconv,
            h_dim: default_h_dim(),
            conv_widths: default_conv_widths(),
            resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_dim == 0 {
            return Err(ModelError::BadConfig("h_dim must be positive".into()));
        }
        if self.resolution == 0 {
            return Err(ModelError::BadConfig("resolution must be positive".into()));
        }
        if self.kind == EncoderKind::Smallconv {
            if self.conv_widths.len() != 4 {
                return Err(ModelError::BadConfig(format!(
                    "smallconv takes exactly 4 block widths, got {}",
                    self.conv_widths.len()
                )));
            }
            if *self.conv_widths.last().unwrap() != self.h_dim {
                return Err(ModelError::BadConfig(format!(
                    "last conv width {} must equal h_dim {}",
                    self.conv_widths.last().unwrap(),
                    self.h_dim
                )));
            }
            if self.resolution % 16 != 0 {
                return Err(ModelError::BadConfig(format!(
                    "smallconv downsamples 16x; resolution {} is not divisible by 16",
                    self.resolution
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    pub out_dim: usize,
}

fn default_hidden_dim() -> usize {
    1024
}

impl ProjectorConfig {
    pub fn new(out_dim: usize) -> Self {
        Self { hidden_dim: default_hidden_dim(), out_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 || self.hidden_dim == 0 {
            return Err(ModelError::BadConfig("projector dims must be positive".into()));
        }
        if self.out_dim > self.hidden_dim {
            return Err(ModelError::BadConfig(format!(
                "out_dim {} exceeds hidden_dim {}",
                self.out_dim, self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// The embedding network: configs plus named parameters and BN buffers.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub params: BTreeMap<String, Matrix<T>>,
    pub buffers: BTreeMap<String, RunningStats>,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

/// Fan-in-scaled uniform sample of an r×c matrix: bound = 1/sqrt(fan_in).
fn uniform_init<T: Scalar, R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<T> = (0..rows * cols).map(|_| T::cast_from(rng.gen_range(-bound..bound))).collect();
    Matrix::from_vec(rows, cols, data)
}

impl<T: Scalar> Model<T> {
    /// Deterministic per-seed initialization of all parameters and buffers.
    pub fn init(encoder: EncoderConfig, projector: ProjectorConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        projector.validate()?;
        if encoder.h_dim < projector.out_dim {
            return Err(ModelError::BadConfig(format!(
                "h_dim {} must be at least the embedding size {}",
                encoder.h_dim, projector.out_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let bn = |params: &mut BTreeMap<String, Matrix<T>>,
                      buffers: &mut BTreeMap<String, RunningStats>,
                      name: &str,
                      width: usize| {
            params.insert(format!("{name}.scale"), Matrix::from_vec(1, width, vec![T::one(); width]));
            params.insert(format!("{name}.shift"), Matrix::zeros(1, width));
            buffers.insert(name.to_string(), RunningStats { mean: vec![0.0; width], var: vec![1.0; width] });
        };
        match encoder.kind {
            EncoderKind::Mlp => {
                let in_dim = 3 * encoder.resolution * encoder.resolution;
                let h = encoder.h_dim;
                for (i, (fan_in, fan_out)) in [(in_dim, h), (h, h)].into_iter().enumerate() {
                    let i = i + 1;
                    params.insert(format!("enc.fc{i}.w"), uniform_init(fan_in, fan_out, fan_in, &mut rng));
                    params.insert(format!("enc.fc{i}.b"), uniform_init(1, fan_out, fan_in, &mut rng));
                    bn(&mut params, &mut buffers, &format!("enc.bn{i}"), fan_out);
                }
            }
            EncoderKind::Smallconv => {
                let mut cin = 3;
                for (i, &cout) in encoder.conv_widths.iter().enumerate() {
                    let i = i + 1;
                    let fan_in = cin * 9;
                    params.insert(format!("enc.conv{i}.w"), uniform_init(fan_in, cout, fan_in, &mut rng));
                    bn(&mut params, &mut buffers, &format!("enc.bn{i}"), cout);
                    cin = cout;
                }
            }
        }
        params.insert(
            "proj.fc1.w".into(),
            uniform_init(encoder.h_dim, projector.hidden_dim, encoder.h_dim, &mut rng),
        );
        params.insert("proj.fc1.b".into(), uniform_init(1, projector.hidden_dim, encoder.h_dim, &mut rng));
        bn(&mut params, &mut buffers, "proj.bn", projector.hidden_dim);
        params.insert(
            "proj.fc2.w".into(),
            uniform_init(projector.hidden_dim, projector.out_dim, projector.hidden_dim, &mut rng),
        );
        params.insert(
            "proj.fc2.b".into(),
            uniform_init(1, projector.out_dim, projector.hidden_dim, &mut rng),
        );
        Ok(Self { encoder, projector, params, buffers })
    }

    /// Lay a batch of images out as the encoder's input matrix: flat
    /// channel-major rows for the MLP, (n·y·x)-row/channel-column for conv.
    /// Errors if any image is off the configured resolution.
    pub fn batch_input(&self, images: &[Image]) -> Result<Matrix<T>> {
        let res = self.encoder.resolution;
        for (index, img) in images.iter().enumerate() {
            if img.height != res || img.width != res {
                return Err(ModelError::ResolutionMismatch {
                    index,
                    got_h: img.height,
                    got_w: img.width,
                    want: res,
                });
            }
        }
        let n = images.len();
        match self.encoder.kind {
            EncoderKind::Mlp => {
                let mut data = Vec::with_capacity(n * 3 * res * res);
                for img in images {
                    data.extend(img.flat().iter().map(|&v| T::cast_from(v)));
                }
                Ok(Matrix::from_vec(n, 3 * res * res, data))
            }
            EncoderKind::Smallconv => {
                // rows = (image, y, x), cols = channels
                let mut data = Vec::with_capacity(n * res * res * 3);
                for img in images {
                    for y in 0..res {
                        for x in 0..res {
                            for c in 0..3 {
                                data.push(T::cast_from(img.get(c, y, x)));
                            }
                        }
                    }
                }
                Ok(Matrix::from_vec(n * res * res, 3, data))
            }
        }
    }

    fn graph_bn(&self, g: &mut Graph<T>, x: NodeId, name: &str) -> NodeId {
        let scale = g.parameter(&format!("{name}.scale"), self.params[&format!("{name}.scale")].clone());
        let shift = g.parameter(&format!("{name}.shift"), self.params[&format!("{name}.shift")].clone());
        g.batch_standardize(
            x,
            Some(scale),
            Some(shift),
            BN_EPS,
            BN_MOMENTUM,
            Some(name.to_string()),
            Some(self.buffers[name].clone()),
        )
    }

    fn graph_linear(&self, g: &mut Graph<T>, x: NodeId, name: &str) -> NodeId {
        let w = g.parameter(&format!("{name}.w"), self.params[&format!("{name}.w")].clone());
        let b = g.parameter(&format!("{name}.b"), self.params[&format!("{name}.b")].clone());
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }

    /// Build h = E(x) on the graph. `x` must carry a `batch_input` layout.
    pub fn encoder_forward(&self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        match self.encoder.kind {
            EncoderKind::Mlp => {
                let mut cur = x;
                for i in 1..=2 {
                    cur = self.graph_linear(g, cur, &format!("enc.fc{i}"));
                    cur = self.graph_bn(g, cur, &format!("enc.bn{i}"));
                    cur = g.relu(cur);
                }
                cur
            }
            EncoderKind::Smallconv => {
                let mut cur = x;
                let mut hw = (self.encoder.resolution, self.encoder.resolution);
                let mut cin = 3;
                for (i, &cout) in self.encoder.conv_widths.iter().enumerate() {
                    let i = i + 1;
                    let w = g.parameter(
                        &format!("enc.conv{i}.w"),
                        self.params[&format!("enc.conv{i}.w")].clone(),
                    );
                    cur = g.conv2d(cur, w, hw, cin, 3, 2, 1);
                    cur = self.graph_bn(g, cur, &format!("enc.bn{i}"));
                    cur = g.relu(cur);
                    hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
                    cin = cout;
                }
                g.global_avg_pool(cur, hw)
            }
        }
    }

    /// Build v = g(h) on the graph: linear → batch_standardize → relu → linear.
    pub fn projector_forward(&self, g: &mut Graph<T>, h: NodeId) -> NodeId {
        let mut cur = self.graph_linear(g, h, "proj.fc1");
        cur = self.graph_bn(g, cur, "proj.bn");
        cur = g.relu(cur);
        self.graph_linear(g, cur, "proj.fc2")
    }

    /// Fold running-statistic updates from a train-mode forward back into the
    /// model's buffers.
    pub fn apply_bn_updates(&mut self, g: &Graph<T>) {
        for (name, stats) in &g.bn_updates {
            self.buffers.insert(name.clone(), stats.clone());
        }
    }

    /// Copy (possibly updated) parameter values out of a graph.
    pub fn pull_params(&mut self, g: &Graph<T>) {
        for name in g.param_names() {
            if let Some(id) = g.param_id(&name) {
                if let Some(v) = g.value(id) {
                    self.params.insert(name.clone(), v.clone());
                }
            }
        }
    }

    /// Flatten into the named-tensor map used by the checkpoint container.
    /// BN buffers appear as `<name>.running_mean` / `<name>.running_var`.
    pub fn to_tensors(&self) -> BTreeMap<String, Matrix<f64>> {
        let mut out = BTreeMap::new();
        for (name, m) in &self.params {
            out.insert(name.clone(), m.cast::<f64>());
        }
        for (name, s) in &self.buffers {
            let w = s.mean.len();
            out.insert(
                format!("{name}.running_mean"),
                Matrix::from_vec(1, w, s.mean.clone()),
            );
            out.insert(
                format!("{name}.running_var"),
                Matrix::from_vec(1, w, s.var.clone()),
            );
        }
        out
    }

    /// Reassemble a model from checkpoint tensors; shapes are re-derived by
    /// a fresh init so missing or misshapen tensors are caught.
    pub fn from_tensors(
        encoder: EncoderConfig,
        projector: ProjectorConfig,
        tensors: &BTreeMap<String, Matrix<f64>>,
    ) -> Result<Self> {
        let mut model = Self::init(encoder, projector, 0)?;
        for (name, m) in model.params.iter_mut() {
            let t = tensors.get(name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if t.shape() != m.shape() {
                return Err(ModelError::BadCheckpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    m.shape()
                )));
            }
            *m = t.cast::<T>();
        }
        for (name, s) in model.buffers.iter_mut() {
            let mean = tensors
                .get(&format!("{name}.running_mean"))
                .ok_or_else(|| ModelError::MissingTensor(format!("{name}.running_mean")))?;
            let var = tensors
                .get(&format!("{name}.running_var"))
                .ok_or_else(|| ModelError::MissingTensor(format!("{name}.running_var")))?;
            s.mean = mean.data().to_vec();
            s.var = var.data().to_vec();
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|m| m.rows() * m.cols()).sum()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Write a checkpoint: a little-endian u32 header length, a JSON header
/// listing (name, shape, dtype, offset) per tensor plus free-form metadata,
/// then the flat f64 little-endian tensor data.
pub fn save_checkpoint(
    path: &Path,
    tensors: &BTreeMap<String, Matrix<f64>>,
    meta: serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            dtype: "f64".into(),
            offset,
        });
        offset += m.rows() * m.cols() * 8;
    }
    let header = serde_json::to_vec(&CheckpointHeader { tensors: entries, meta })
        .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    let io_err = |source| ModelError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&(header.len() as u32).to_le_bytes()).map_err(io_err)?;
    f.write_all(&header).map_err(io_err)?;
    for m in tensors.values() {
        for &v in m.data() {
            f.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`]; returns the tensor map
/// and the metadata value.
pub fn load_checkpoint(path: &Path) -> Result<(BTreeMap<String, Matrix<f64>>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 4 {
        return Err(ModelError::BadCheckpoint("file shorter than header length field".into()));
    }
    let hlen = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + hlen {
        return Err(ModelError::BadCheckpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[4..4 + hlen])
        .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    let data = &bytes[4 + hlen..];
    let mut out = BTreeMap::new();
    for e in &header.tensors {
        if e.dtype != "f64" {
            return Err(ModelError::BadCheckpoint(format!("tensor {}: dtype {}", e.name, e.dtype)));
        }
        let count = e.shape[0] * e.shape[1];
        let end = e.offset + count * 8;
        if end > data.len() {
            return Err(ModelError::BadCheckpoint(format!("tensor {} overruns file", e.name)));
        }
        let vals: Vec<f64> = data[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(e.name.clone(), Matrix::from_vec(e.shape[0], e.shape[1], vals));
    }
    Ok((out, header.meta))
}
