//! Model container: `b"CVPR"`, u32 LE version, u64 LE metadata length, JSON
//! metadata describing the layer list, then every parameter as LE f64 in layer
//! order (conv/linear: weights row-major then bias; normalize: μ′ then σ′).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AvgPool, Conv, LayerSpec, Linear, NetworkSpec, Normalize, Residual, Shape3};
use crate::error::{FormatError, Result};
use crate::numkit::Matrix;

pub const MAGIC: [u8; 4] = *b"CVPR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    input_shape: Shape3,
    class_count: usize,
    layers: Vec<LayerMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerMeta {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
    AvgPool {
        kernel: usize,
    },
    Relu,
    Residual {
        branch: Vec<LayerMeta>,
    },
    Flatten,
    Normalize {
        mu_len: usize,
        sigma_len: usize,
        enabled: bool,
    },
}

fn describe(layers: &[LayerSpec], blob: &mut Vec<u8>) -> Vec<LayerMeta> {
    let put = |xs: &[f64], blob: &mut Vec<u8>| {
        for x in xs {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    };
    layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv(c) => {
                put(c.weights.data(), blob);
                put(&c.bias, blob);
                LayerMeta::Conv {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    padding: c.padding,
                }
            }
            LayerSpec::Linear(lin) => {
                put(lin.weights.data(), blob);
                put(&lin.bias, blob);
                LayerMeta::Linear {
                    in_dim: lin.in_dim,
                    out_dim: lin.out_dim,
                }
            }
            LayerSpec::AvgPool(p) => LayerMeta::AvgPool { kernel: p.kernel },
            LayerSpec::Relu => LayerMeta::Relu,
            LayerSpec::Flatten => LayerMeta::Flatten,
            LayerSpec::ResidualAdd(r) => LayerMeta::Residual {
                branch: describe(&r.branch, blob),
            },
            LayerSpec::Normalize(n) => {
                put(&n.mu_prime, blob);
                put(&n.sigma_prime, blob);
                LayerMeta::Normalize {
                    mu_len: n.mu_prime.len(),
                    sigma_len: n.sigma_prime.len(),
                    enabled: n.enabled,
                }
            }
        })
        .collect()
}

pub fn save(net: &NetworkSpec) -> Vec<u8> {
    let mut blob = Vec::with_capacity(8 * net.param_count());
    let meta = Meta {
        input_shape: net.input_shape,
        class_count: net.class_count,
        layers: describe(&net.layers, &mut blob),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serialises");
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated { needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn floats(&mut self, n: usize) -> std::result::Result<Vec<f64>, FormatError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| {
            FormatError::ShapeInconsistency(format!("parameter count {n} overflows"))
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn rebuild(metas: Vec<LayerMeta>, r: &mut Reader<'_>) -> std::result::Result<Vec<LayerSpec>, FormatError> {
    metas
        .into_iter()
        .map(|m| {
            Ok(match m {
                LayerMeta::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let rows = kernel * kernel * in_channels;
                    let w = r.floats(rows * out_channels)?;
                    let bias = r.floats(out_channels)?;
                    LayerSpec::Conv(Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        weights: Matrix::from_vec(rows, out_channels, w).expect("length checked"),
                        bias,
                    })
                }
                LayerMeta::Linear { in_dim, out_dim } => {
                    let w = r.floats(in_dim * out_dim)?;
                    let bias = r.floats(out_dim)?;
                    LayerSpec::Linear(Linear {
                        in_dim,
                        out_dim,
                        weights: Matrix::from_vec(in_dim, out_dim, w).expect("length checked"),
                        bias,
                    })
                }
                LayerMeta::AvgPool { kernel } => LayerSpec::AvgPool(AvgPool { kernel }),
                LayerMeta::Relu => LayerSpec::Relu,
                LayerMeta::Flatten => LayerSpec::Flatten,
                LayerMeta::Residual { branch } => LayerSpec::ResidualAdd(Residual {
                    branch: rebuild(branch, r)?,
                }),
                LayerMeta::Normalize {
                    mu_len,
                    sigma_len,
                    enabled,
                } => LayerSpec::Normalize(Normalize {
                    mu_prime: r.floats(mu_len)?,
                    sigma_prime: r.floats(sigma_len)?,
                    enabled,
                }),
            })
        })
        .collect()
}

pub fn load(bytes: &[u8]) -> Result<NetworkSpec> {
    let mut r = Reader { bytes, pos: 0 };
    let header = r.take(16).map_err(|_| FormatError::Version {
        found: bytes.get(..4).and_then(|b| b.try_into().ok()).unwrap_or([0; 4]),
        version: 0,
    })?;
    let found: [u8; 4] = header[..4].try_into().unwrap();
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if found != MAGIC || version != FORMAT_VERSION {
        return Err(FormatError::Version { found, version }.into());
    }
    let json_len = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let json_len = usize::try_from(json_len).map_err(|_| FormatError::Truncated {
        needed: usize::MAX,
        available: bytes.len() - 16,
    })?;
    let meta: Meta = serde_json::from_slice(r.take(json_len)?).map_err(FormatError::from)?;
    let layers = rebuild(meta.layers, &mut r)?;
    if r.pos != bytes.len() {
        return Err(FormatError::ShapeInconsistency(format!(
            "{} trailing bytes after parameters",
            bytes.len() - r.pos
        ))
        .into());
    }
    NetworkSpec::new(meta.input_shape, layers, meta.class_count)
        .map_err(|e| FormatError::ShapeInconsistency(e.to_string()).into())
}

pub fn save_file(net: &NetworkSpec, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, save(net))?;
    Ok(())
}

pub fn load_file(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    load(&std::fs::read(path)?)
}
