use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::Denoiser;
use crate::error::{Error, Result};
use crate::wavelet::SubbandStack;

/// Per-time-bin affine model:
/// `x0_hat[c] = gain[b][c] * x_t[c] + bias[b][c] + sum_k cond_gain[b][c][k] * cond[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDenoiserParams {
    pub bins: usize,
    /// Diffusion steps `T` the bins partition.
    pub steps: usize,
    pub data_channels: usize,
    pub cond_channels: usize,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub cond_gain: Vec<f64>,
}

impl AffineDenoiserParams {
    /// Identity initialization: unit gain, zero bias and zero conditioning gain.
    pub fn identity(
        bins: usize,
        steps: usize,
        data_channels: usize,
        cond_channels: usize,
    ) -> Result<Self> {
        if bins == 0 || steps == 0 || data_channels == 0 {
            return Err(Error::BinOutOfRange { bin: 0, bins });
        }
        Ok(Self {
            bins,
            steps,
            data_channels,
            cond_channels,
            gain: vec![1.0; bins * data_channels],
            bias: vec![0.0; bins * data_channels],
            cond_gain: vec![0.0; bins * data_channels * cond_channels],
        })
    }

    /// Time bin of step `t`: `floor((t - 1) * B / T)`.
    pub fn bin(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(Error::BinOutOfRange {
                bin: usize::MAX,
                bins: self.bins,
            });
        }
        let b = (t - 1) * self.bins / self.steps;
        if b >= self.bins {
            return Err(Error::BinOutOfRange {
                bin: b,
                bins: self.bins,
            });
        }
        Ok(b)
    }

    pub fn gain_at(&self, bin: usize, c: usize) -> f64 {
        self.gain[bin * self.data_channels + c]
    }

    pub fn bias_at(&self, bin: usize, c: usize) -> f64 {
        self.bias[bin * self.data_channels + c]
    }

    pub fn cond_gain_index(&self, bin: usize, c: usize, k: usize) -> usize {
        (bin * self.data_channels + c) * self.cond_channels + k
    }

    pub fn param_count(&self) -> usize {
        self.gain.len() + self.bias.len() + self.cond_gain.len()
    }

    /// All parameters as one flat vector: gains, then biases, then conditioning gains.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(&self.gain);
        v.extend_from_slice(&self.bias);
        v.extend_from_slice(&self.cond_gain);
        v
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let (g, rest) = flat.split_at(self.gain.len());
        let (b, k) = rest.split_at(self.bias.len());
        self.gain.copy_from_slice(g);
        self.bias.copy_from_slice(b);
        self.cond_gain.copy_from_slice(k);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

pub fn affine_predict_x0(
    params: &AffineDenoiserParams,
    x_t: &SubbandStack,
    t: usize,
    cond: Option<&SubbandStack>,
) -> Result<SubbandStack> {
    let b = params.bin(t)?;
    if x_t.channels() != params.data_channels {
        return Err(Error::ChannelContractMismatch(format!(
            "model expects {} data channels, got {}",
            params.data_channels,
            x_t.channels()
        )));
    }
    let cond = match (params.cond_channels, cond) {
        (0, _) => None,
        (k, Some(c)) if c.channels() == k && c.dims() == x_t.dims() => Some(c),
        (k, other) => {
            return Err(Error::ChannelContractMismatch(format!(
                "model expects {k} conditioning channels, got {:?}",
                other.map(|c| c.channels())
            )))
        }
    };
    let n = x_t.voxels();
    let mut out = vec![0.0; x_t.len()];
    for c in 0..params.data_channels {
        let (g, bias) = (params.gain_at(b, c), params.bias_at(b, c));
        let dst = &mut out[c * n..(c + 1) * n];
        for (o, &x) in dst.iter_mut().zip(x_t.channel(c)) {
            *o = g * x + bias;
        }
        if let Some(cs) = cond {
            for k in 0..params.cond_channels {
                let w = params.cond_gain[params.cond_gain_index(b, c, k)];
                if w != 0.0 {
                    for (o, &m) in dst.iter_mut().zip(cs.channel(k)) {
                        *o += w * m;
                    }
                }
            }
        }
    }
    x_t.with_data(out)
}

/// JSON sidecar describing a checkpoint blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub data_channels: usize,
    pub cond_channels: usize,
    pub bins: usize,
    pub steps: usize,
    pub objective: String,
    pub pipeline: Option<String>,
    pub schedule_hash: String,
    pub param_count: usize,
    pub blob: String,
}

const CHECKPOINT_FORMAT: &str = "affine-f64le-v1";

#[derive(Debug, Clone)]
pub struct AffineDenoiser {
    pub params: AffineDenoiserParams,
    pub label: String,
}

impl AffineDenoiser {
    pub fn new(params: AffineDenoiserParams) -> Self {
        Self {
            params,
            label: "affine".into(),
        }
    }

    /// Writes `<stem>.bin` (little-endian f64 parameters) and `<stem>.json`.
    /// Returns the sidecar path.
    pub fn save(
        &self,
        stem: &Path,
        objective: &str,
        pipeline: Option<&str>,
        schedule_hash: &str,
    ) -> Result<PathBuf> {
        let flat = self.params.flatten();
        let mut blob = vec![0u8; flat.len() * 8];
        LittleEndian::write_f64_into(&flat, &mut blob);
        let bin_path = stem.with_extension("bin");
        let json_path = stem.with_extension("json");
        fs::write(&bin_path, &blob)?;
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            data_channels: self.params.data_channels,
            cond_channels: self.params.cond_channels,
            bins: self.params.bins,
            steps: self.params.steps,
            objective: objective.into(),
            pipeline: pipeline.map(str::to_string),
            schedule_hash: schedule_hash.into(),
            param_count: flat.len(),
            blob: bin_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        fs::write(&json_path, serde_json::to_string_pretty(&meta)?)?;
        Ok(json_path)
    }

    /// Loads from a sidecar path (or a stem; `.json` is appended when missing).
    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let json_path = if path.extension().is_some_and(|e| e == "json") {
            path.to_path_buf()
        } else {
            path.with_extension("json")
        };
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {}", meta.format)));
        }
        let bin_path = json_path.with_file_name(&meta.blob);
        let blob = fs::read(&bin_path)?;
        if blob.len() != meta.param_count * 8 {
            return Err(Error::Checkpoint(format!(
                "blob has {} bytes, expected {}",
                blob.len(),
                meta.param_count * 8
            )));
        }
        let mut flat = vec![0.0; meta.param_count];
        LittleEndian::read_f64_into(&blob, &mut flat);
        let mut params = AffineDenoiserParams::identity(
            meta.bins,
            meta.steps,
            meta.data_channels,
            meta.cond_channels,
        )?;
        params.unflatten(&flat)?;
        Ok((
            Self {
                params,
                label: format!("affine:{}", json_path.display()),
            },
            meta,
        ))
    }
}

impl Denoiser for AffineDenoiser {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn channel_contract(&self) -> Option<(usize, usize)> {
        Some((self.params.data_channels, self.params.cond_channels))
    }

    fn predict_x0(
        &self,
        x_t: &SubbandStack,
        t: usize,
        cond: Option<&SubbandStack>,
    ) -> Result<SubbandStack> {
        affine_predict_x0(&self.params, x_t, t, cond)
    }
}
