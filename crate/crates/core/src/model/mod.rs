//! The dual auto-encoder and its training losses.
//!
//! Each branch (FPV, TPV) owns a conv encoder to a latent `z = [h, v]` and a
//! mirrored transposed-conv decoder back to the frame. In the shared
//! variant both branches use one auto-encoder, the single-encoder
//! baseline.

mod losses;

pub use losses::{
    critic_d, derangement, infonce, loss_permute, loss_recon, loss_tc, loss_vmatch, total_loss,
    BatchForward, LossBatch, LossBreakdown, LossConfig, StreamRef, TcItem, ViewLoss,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::Frame;
use crate::tensor::{Checkpoint, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("checkpoint does not match this architecture: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Fpv,
    Tpv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Frame side length.
    pub resolution: usize,
    pub in_channels: usize,
    pub layers: Vec<ConvLayer>,
    pub dim_h: usize,
    pub dim_v: usize,
    /// One auto-encoder for both branches.
    pub shared: bool,
}

impl Default for ArchConfig {
    /// 32×32×3 → 15×15×16 → 7×7×32 → 3×3×64 → 1×1×64 → z, every step exact
    /// under valid padding so the decoder mirrors it without cropping.
    fn default() -> Self {
        let l = |out_channels, kernel, stride| ConvLayer {
            out_channels,
            kernel,
            stride,
        };
        ArchConfig {
            resolution: 32,
            in_channels: 3,
            layers: vec![l(16, 4, 2), l(32, 3, 2), l(64, 3, 2), l(64, 3, 1)],
            dim_h: 16,
            dim_v: 8,
            shared: false,
        }
    }
}

impl ArchConfig {
    /// 8×8 frames, two 2-channel convs, `dim_h = 4`, `dim_v = 2`.
    pub fn tiny() -> Self {
        let l = ConvLayer {
            out_channels: 2,
            kernel: 2,
            stride: 2,
        };
        ArchConfig {
            resolution: 8,
            in_channels: 3,
            layers: vec![l, l],
            dim_h: 4,
            dim_v: 2,
            shared: false,
        }
    }

    pub fn dim_z(&self) -> usize {
        self.dim_h + self.dim_v
    }

    /// Spatial side after each encoder layer, input first.
    pub fn spatial_sizes(&self) -> Result<Vec<usize>> {
        let mut sizes = vec![self.resolution];
        let mut s = self.resolution;
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0
                || l.stride == 0
                || l.kernel > s
                || !(s - l.kernel).is_multiple_of(l.stride)
            {
                return Err(ModelError::Arch(format!(
                    "layer {i}: kernel {} stride {} does not tile a {s}×{s} input exactly",
                    l.kernel, l.stride
                )));
            }
            s = (s - l.kernel) / l.stride + 1;
            sizes.push(s);
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(ModelError::Arch("at least one conv layer".into()));
        }
        if self.dim_h == 0 {
            return Err(ModelError::Arch("dim_h must be positive".into()));
        }
        if self.layers.iter().any(|l| l.out_channels == 0) || self.in_channels == 0 {
            return Err(ModelError::Arch("channel counts must be positive".into()));
        }
        self.spatial_sizes().map(|_| ())
    }

    fn flat_dim(&self) -> Result<usize> {
        let s = *self.spatial_sizes()?.last().expect("nonempty");
        Ok(s * s * self.layers.last().expect("nonempty").out_channels)
    }
}

/// Parameter indices of one auto-encoder.
#[derive(Debug, Clone, PartialEq)]
struct AeLayout {
    enc_conv: Vec<(usize, usize)>,
    enc_fc: (usize, usize),
    dec_fc: (usize, usize),
    dec_deconv: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualAe {
    pub arch: ArchConfig,
    pub params: ParamStore,
    fpv: AeLayout,
    tpv: AeLayout,
}

const RELU_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)

fn build_ae(
    arch: &ArchConfig,
    prefix: &str,
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<AeLayout> {
    let flat = arch.flat_dim()?;
    let dz = arch.dim_z();
    let mut chans = vec![arch.in_channels];
    chans.extend(arch.layers.iter().map(|l| l.out_channels));
    let mut enc_conv = Vec::new();
    for (i, l) in arch.layers.iter().enumerate() {
        let fan_in = chans[i] * l.kernel * l.kernel;
        let w = params.push_uniform(
            format!("{prefix}.enc.conv{i}.w"),
            &[chans[i + 1], chans[i], l.kernel, l.kernel],
            fan_in,
            RELU_GAIN,
            rng,
        );
        let b = params.push(
            format!("{prefix}.enc.conv{i}.b"),
            Tensor::zeros(&[chans[i + 1]]),
        );
        enc_conv.push((w, b));
    }
    let enc_fc = (
        params.push_uniform(
            format!("{prefix}.enc.fc.w"),
            &[flat, dz],
            flat,
            1.7320508,
            rng,
        ),
        params.push(format!("{prefix}.enc.fc.b"), Tensor::zeros(&[dz])),
    );
    let dec_fc = (
        params.push_uniform(
            format!("{prefix}.dec.fc.w"),
            &[dz, flat],
            dz,
            RELU_GAIN,
            rng,
        ),
        params.push(format!("{prefix}.dec.fc.b"), Tensor::zeros(&[flat])),
    );
    let mut dec_deconv = Vec::new();
    for (i, l) in arch.layers.iter().enumerate().rev() {
        // Mirror of encoder layer i: chans[i+1] → chans[i].
        let fan_in = chans[i + 1] * l.kernel * l.kernel / (l.stride * l.stride).max(1);
        let gain = if i == 0 { 1.7320508 } else { RELU_GAIN };
        let w = params.push_uniform(
            format!("{prefix}.dec.deconv{i}.w"),
            &[chans[i + 1], chans[i], l.kernel, l.kernel],
            fan_in.max(1),
            gain,
            rng,
        );
        let b = params.push(
            format!("{prefix}.dec.deconv{i}.b"),
            Tensor::zeros(&[chans[i]]),
        );
        dec_deconv.push((w, b));
    }
    Ok(AeLayout {
        enc_conv,
        enc_fc,
        dec_fc,
        dec_deconv,
    })
}

impl DualAe {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (fpv, tpv) = if arch.shared {
            let ae = build_ae(&arch, "shared", &mut params, &mut rng)?;
            (ae.clone(), ae)
        } else {
            let f = build_ae(&arch, "fpv", &mut params, &mut rng)?;
            let t = build_ae(&arch, "tpv", &mut params, &mut rng)?;
            (f, t)
        };
        Ok(DualAe {
            arch,
            params,
            fpv,
            tpv,
        })
    }

    /// Rebuild from a checkpoint whose `meta.arch` holds the architecture.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch: ArchConfig = serde_json::from_value(ckpt.meta["arch"].clone())
            .map_err(|e| ModelError::Checkpoint(format!("meta.arch: {e}")))?;
        let mut model = DualAe::new(arch, 0)?;
        if model.params.names() != ckpt.params.names() {
            return Err(ModelError::Checkpoint("parameter names differ".into()));
        }
        for (dst, src) in model
            .params
            .tensors_mut()
            .iter_mut()
            .zip(ckpt.params.tensors())
        {
            if dst.shape() != src.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(model)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            meta: serde_json::json!({ "kind": "repr", "arch": self.arch, "extra": extra }),
        }
    }

    fn layout(&self, branch: Branch) -> &AeLayout {
        match branch {
            Branch::Fpv => &self.fpv,
            Branch::Tpv => &self.tpv,
        }
    }

    /// Names of the parameters a branch's encoder/decoder uses.
    pub fn branch_param_indices(&self, branch: Branch) -> Vec<usize> {
        let l = self.layout(branch);
        let mut v = Vec::new();
        for (w, b) in l.enc_conv.iter().chain(l.dec_deconv.iter()) {
            v.extend([*w, *b]);
        }
        v.extend([l.enc_fc.0, l.enc_fc.1, l.dec_fc.0, l.dec_fc.1]);
        v.sort_unstable();
        v
    }

    /// Indices of one branch's encoder parameters.
    pub fn encoder_param_indices(&self, branch: Branch) -> Vec<usize> {
        let l = self.layout(branch);
        let mut v: Vec<usize> = l.enc_conv.iter().flat_map(|(w, b)| [*w, *b]).collect();
        v.extend([l.enc_fc.0, l.enc_fc.1]);
        v
    }

    /// Index of the decoder's input layer weight `[dim_z, flat]`.
    pub fn decoder_input_weight(&self, branch: Branch) -> usize {
        self.layout(branch).dec_fc.0
    }

    /// `x: [N, C, H, W]` → `z: [N, dim_z]`.
    pub fn encode_var(&self, tape: &Tape, vars: &[Var], x: Var, branch: Branch) -> Result<Var> {
        let shape = tape.shape(x);
        let r = self.arch.resolution;
        if shape.len() != 4 || shape[1..] != [self.arch.in_channels, r, r] {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: shape,
                rhs: vec![self.arch.in_channels, r, r],
            }
            .into());
        }
        let n = shape[0];
        let l = self.layout(branch);
        let mut h = x;
        for ((w, b), cfg) in l.enc_conv.iter().zip(&self.arch.layers) {
            h = tape.conv2d(h, vars[*w], Some(vars[*b]), cfg.stride)?;
            h = tape.relu(h)?;
        }
        let flat = tape.reshape(h, &[n, self.arch.flat_dim()?])?;
        let z = tape.matmul(flat, vars[l.enc_fc.0])?;
        Ok(tape.add_bias(z, vars[l.enc_fc.1])?)
    }

    /// `z: [N, dim_z]` → frames `[N, C, H, W]` in (0, 1).
    pub fn decode_var(&self, tape: &Tape, vars: &[Var], z: Var, branch: Branch) -> Result<Var> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[1] != self.arch.dim_z() {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: shape,
                rhs: vec![self.arch.dim_z()],
            }
            .into());
        }
        let n = shape[0];
        let l = self.layout(branch);
        let sizes = self.arch.spatial_sizes()?;
        let s = *sizes.last().expect("nonempty");
        let c = self.arch.layers.last().expect("nonempty").out_channels;
        let mut h = tape.matmul(z, vars[l.dec_fc.0])?;
        h = tape.add_bias(h, vars[l.dec_fc.1])?;
        h = tape.relu(h)?;
        h = tape.reshape(h, &[n, c, s, s])?;
        let last = l.dec_deconv.len() - 1;
        for (j, (w, b)) in l.dec_deconv.iter().enumerate() {
            let layer = &self.arch.layers[self.arch.layers.len() - 1 - j];
            h = tape.conv_transpose2d(h, vars[*w], Some(vars[*b]), layer.stride)?;
            h = if j == last {
                tape.sigmoid(h)?
            } else {
                tape.relu(h)?
            };
        }
        Ok(h)
    }

    /// Stack frames into an `[N, C, H, W]` tensor.
    pub fn frames_tensor(&self, frames: &[&Frame]) -> Result<Tensor> {
        let r = self.arch.resolution;
        let mut data = Vec::with_capacity(frames.len() * 3 * r * r);
        for f in frames {
            if f.height != r || f.width != r {
                return Err(TensorError::ShapeMismatch {
                    op: "frames_tensor",
                    lhs: vec![f.height, f.width],
                    rhs: vec![r, r],
                }
                .into());
            }
            data.extend(f.to_chw());
        }
        Ok(Tensor::new(
            vec![frames.len(), self.arch.in_channels, r, r],
            data,
        )?)
    }

    /// Latent codes of `frames` (no gradient), one row per frame.
    pub fn encode_frames(&self, frames: &[&Frame], branch: Branch) -> Result<Vec<LatentSplit>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(64) {
            let tape = Tape::new();
            let vars = self.params.attach_frozen(&tape);
            let x = tape.constant(self.frames_tensor(chunk)?);
            let z = self.encode_var(&tape, &vars, x, branch)?;
            let zv = tape.value(z);
            for i in 0..chunk.len() {
                out.push(LatentSplit::from_z(zv.row(i), self.arch.dim_h));
            }
        }
        Ok(out)
    }

    pub fn encode(&self, frame: &Frame, branch: Branch) -> Result<LatentSplit> {
        Ok(self.encode_frames(&[frame], branch)?.remove(0))
    }

    /// Decode latent vectors to frames (no gradient).
    pub fn decode(&self, zs: &[Vec<f64>], branch: Branch) -> Result<Vec<Frame>> {
        let dz = self.arch.dim_z();
        if let Some(bad) = zs.iter().find(|z| z.len() != dz) {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: vec![bad.len()],
                rhs: vec![dz],
            }
            .into());
        }
        let tape = Tape::new();
        let vars = self.params.attach_frozen(&tape);
        let z = tape.constant(Tensor::from_rows(zs)?);
        let x = self.decode_var(&tape, &vars, z, branch)?;
        let xv = tape.value(x);
        let r = self.arch.resolution;
        let plane = r * r;
        let kind = match branch {
            Branch::Fpv => crate::sim::FrameKind::Fpv,
            Branch::Tpv => crate::sim::FrameKind::Tpv,
        };
        Ok((0..zs.len())
            .map(|i| {
                let chw = xv.row(i);
                let mut f = Frame::blank(r, r, kind);
                for p in 0..plane {
                    for c in 0..3 {
                        f.data[p * 3 + c] = chw[c * plane + p] as f32;
                    }
                }
                f
            })
            .collect())
    }
}

/// Latent vector split into state `h` and viewpoint `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSplit {
    pub h: Vec<f64>,
    pub v: Vec<f64>,
}

impl LatentSplit {
    pub fn from_z(z: &[f64], dim_h: usize) -> Self {
        LatentSplit {
            h: z[..dim_h].to_vec(),
            v: z[dim_h..].to_vec(),
        }
    }

    pub fn z(&self) -> Vec<f64> {
        let mut z = self.h.clone();
        z.extend_from_slice(&self.v);
        z
    }
}
