//! Binary weights format.
//!
//! ```text
//! "YLTW" | version: u32 = 1 | layer count: u32
//! per convolution:
//!   filters: u32 | channels: u32 | kernel: u32
//!   batch-normalized: gamma[F] beta[F] running_mean[F] running_var[F]
//!   otherwise:        bias[F]
//!   kernel weights[F·C·k·k]
//! ```
//!
//! All integers and floats are little-endian. Whether a layer carries batch
//! norm is not stored; it comes from the network description the file is
//! read against.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{BatchNormParams, ConvLayer, Network, NetworkConfig};
use crate::tensor::{Parameter, Tensor};

pub const MAGIC: &[u8; 4] = b"YLTW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormArrays {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

/// Serialized parameters of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub filters: usize,
    pub channels: usize,
    pub kernel: usize,
    pub batch_norm: Option<BatchNormArrays>,
    pub bias: Option<Vec<f32>>,
    pub kernel_weights: Vec<f32>,
}

impl LayerWeights {
    pub fn from_layer(layer: &ConvLayer) -> Self {
        LayerWeights {
            filters: layer.spec.filters,
            channels: layer.channels,
            kernel: layer.spec.size,
            batch_norm: layer.batch_norm.as_ref().map(|bn| BatchNormArrays {
                gamma: bn.gamma.value.data().to_vec(),
                beta: bn.beta.value.data().to_vec(),
                running_mean: bn.running_mean.clone(),
                running_var: bn.running_var.clone(),
            }),
            bias: layer.bias.as_ref().map(|b| b.value.data().to_vec()),
            kernel_weights: layer.weights.value.data().to_vec(),
        }
    }

    fn dims(&self) -> (usize, usize, usize, bool) {
        (self.filters, self.channels, self.kernel, self.batch_norm.is_some())
    }

    /// Overwrites `layer` with these values; momentum and gradients reset.
    pub fn write_into(&self, layer: &mut ConvLayer) -> Result<()> {
        let want = (layer.spec.filters, layer.channels, layer.spec.size, layer.batch_norm.is_some());
        if self.dims() != want {
            return Err(Error::Format(format!(
                "stored dims (filters, channels, kernel, bn) {:?} but layer expects {want:?}",
                self.dims()
            )));
        }
        let shape = [self.filters, self.channels, self.kernel, self.kernel];
        layer.weights = Parameter::new(Tensor::from_vec(&shape, self.kernel_weights.clone())?);
        if let (Some(b), Some(dst)) = (&self.bias, layer.bias.as_mut()) {
            *dst = Parameter::new(Tensor::from_vec(&[self.filters], b.clone())?);
        }
        if let (Some(bn), Some(dst)) = (&self.batch_norm, layer.batch_norm.as_mut()) {
            *dst = BatchNormParams {
                gamma: Parameter::new(Tensor::from_vec(&[self.filters], bn.gamma.clone())?),
                beta: Parameter::new(Tensor::from_vec(&[self.filters], bn.beta.clone())?),
                running_mean: bn.running_mean.clone(),
                running_var: bn.running_var.clone(),
            };
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightsFile {
    pub layers: Vec<LayerWeights>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "file truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl WeightsFile {
    pub fn from_network(network: &Network) -> Self {
        WeightsFile {
            layers: network.conv_layers().map(LayerWeights::from_layer).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        let put = |out: &mut Vec<u8>, v: &[f32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for l in &self.layers {
            for d in [l.filters, l.channels, l.kernel] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            if let Some(bn) = &l.batch_norm {
                put(&mut out, &bn.gamma);
                put(&mut out, &bn.beta);
                put(&mut out, &bn.running_mean);
                put(&mut out, &bn.running_var);
            } else if let Some(b) = &l.bias {
                put(&mut out, b);
            }
            put(&mut out, &l.kernel_weights);
        }
        out
    }

    /// Decodes `bytes`; `batch_norm[i]` tells whether layer `i` stores
    /// batch-norm arrays or a bias.
    pub fn from_bytes(bytes: &[u8], batch_norm: &[bool]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a weights file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        if count != batch_norm.len() {
            return Err(Error::Format(format!(
                "file has {count} convolutional layers, description has {}",
                batch_norm.len()
            )));
        }
        let mut layers = Vec::with_capacity(count);
        for &bn in batch_norm {
            let filters = r.u32()? as usize;
            let channels = r.u32()? as usize;
            let kernel = r.u32()? as usize;
            let (batch_norm, bias) = if bn {
                let bn = BatchNormArrays {
                    gamma: r.f32s(filters)?,
                    beta: r.f32s(filters)?,
                    running_mean: r.f32s(filters)?,
                    running_var: r.f32s(filters)?,
                };
                (Some(bn), None)
            } else {
                (None, Some(r.f32s(filters)?))
            };
            let n = filters
                .checked_mul(channels)
                .and_then(|v| v.checked_mul(kernel * kernel))
                .ok_or_else(|| Error::Format("layer dimensions overflow".into()))?;
            let kernel_weights = r.f32s(n)?;
            layers.push(LayerWeights {
                filters,
                channels,
                kernel,
                batch_norm,
                bias,
                kernel_weights,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last layer",
                bytes.len() - r.pos
            )));
        }
        Ok(WeightsFile { layers })
    }

    /// Reads a file whose batch-norm layout follows `config`.
    pub fn load(path: impl AsRef<Path>, config: &NetworkConfig) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let layout: Vec<bool> = config.conv_specs().map(|c| c.batch_normalize).collect();
        Self::from_bytes(&bytes, &layout)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn save_weights(network: &Network, path: impl AsRef<Path>) -> Result<()> {
    WeightsFile::from_network(network).save(path)
}

/// Loads a complete network; every layer's dimensions must match `config`.
pub fn load_weights(path: impl AsRef<Path>, config: &NetworkConfig) -> Result<Network> {
    let file = WeightsFile::load(path, config)?;
    network_from_weights(&file, config)
}

pub fn network_from_weights(file: &WeightsFile, config: &NetworkConfig) -> Result<Network> {
    let mut net = Network::new(config, 0)?;
    for (i, (src, layer)) in file.layers.iter().zip(net.conv_layers_mut()).enumerate() {
        src.write_into(layer)
            .map_err(|e| Error::Format(format!("convolutional layer {i}: {e}")))?;
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, RegionHeadSpec};

    fn config(classes: usize) -> NetworkConfig {
        NetworkConfig::compact(64, [4, 4, 8, 8, 8, 8], RegionHeadSpec::new(classes, vec![(1.0, 1.0); 5]))
    }

    #[test]
    fn round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(20);
        let mut net = build_network(&cfg, 3).unwrap();
        // non-trivial running stats
        for l in net.conv_layers_mut() {
            if let Some(bn) = l.batch_norm.as_mut() {
                bn.running_mean.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.1);
            }
        }
        let p = dir.path().join("a.ylw");
        save_weights(&net, &p).unwrap();
        let back = load_weights(&p, &cfg).unwrap();
        assert_eq!(back.checksum(), net.checksum());
        let q = dir.path().join("b.ylw");
        save_weights(&back, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        // 125 final filters load against a config expecting 125
        assert_eq!(back.conv_layers().last().unwrap().spec.filters, 125);
    }

    #[test]
    fn truncated_and_corrupt_files() {
        let cfg = config(2);
        let bytes = WeightsFile::from_network(&build_network(&cfg, 0).unwrap()).to_bytes();
        let layout: Vec<bool> = cfg.conv_specs().map(|c| c.batch_normalize).collect();
        for cut in [0, 3, 11, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(WeightsFile::from_bytes(&bytes[..cut], &layout), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(WeightsFile::from_bytes(&bad, &layout).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(WeightsFile::from_bytes(&bad, &layout).unwrap_err().to_string().contains("version"));
        let mut long = bytes;
        long.push(0);
        assert!(WeightsFile::from_bytes(&long, &layout).is_err());
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ylw");
        save_weights(&build_network(&config(20), 0).unwrap(), &p).unwrap();
        let err = load_weights(&p, &config(14)).unwrap_err().to_string();
        assert!(err.contains("layer 6"), "{err}");
    }
}
