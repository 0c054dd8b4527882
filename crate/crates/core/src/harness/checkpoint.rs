//! Binary checkpoint format.
//!
//! Layout: magic `LODS`, version (u32 LE), entry count (u32 LE), then per
//! entry: name length (u32 LE), UTF-8 name, rank (u32 LE), extents (u64 LE
//! each), dtype tag (u8: f32=1, f64=2), raw values little-endian. A file is
//! either loaded whole or rejected; there is no partial load.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::denoiser::{make_analytic, make_network, Denoiser, DenoiserKind, NetConfig};
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::{Error, Result};

use super::config::ScheduleConfig;

pub const MAGIC: [u8; 4] = *b"LODS";
pub const VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(path: &Path, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        buf.push(T::DTYPE.tag());
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                reading: what.into(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            got: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::BadVersion {
            found: version,
            supported: VERSION,
        });
    }
    let count = cur.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("entry {i}");
        let name_len = cur.u32(&what)? as usize;
        let name = String::from_utf8(cur.take(name_len, &what)?.to_vec()).map_err(|_| {
            Error::Invalid {
                what: format!("checkpoint entry {i} name"),
                expected: "UTF-8".into(),
                got: "invalid bytes".into(),
            }
        })?;
        let rank = cur.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64(&name)? as usize);
        }
        let tag = cur.take(1, &name)?[0];
        let dtype = Dtype::from_tag(tag).ok_or(Error::BadDtype { tag })?;
        if dtype != T::DTYPE {
            return Err(Error::Invalid {
                what: format!("checkpoint tensor `{name}` dtype"),
                expected: format!("{:?}", T::DTYPE),
                got: format!("{dtype:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * dtype.byte_width(), &name)?;
        let data: Vec<T> = raw
            .chunks_exact(dtype.byte_width())
            .map(T::read_le)
            .collect();
        entries.push((name, Tensor::from_vec(data, &shape)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Invalid {
            what: "checkpoint".into(),
            expected: "no trailing bytes".into(),
            got: format!("{} extra bytes", bytes.len() - cur.pos),
        });
    }
    Ok(entries)
}

pub fn find_tensor<T: Scalar>(
    entries: &[(String, Tensor<T>)],
    name: &str,
) -> Result<Tensor<T>> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::MissingTensor { name: name.into() })
}

/// Sidecar describing how to rebuild a model around a tensor table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dtype: String,
    pub schedule: ScheduleConfig,
    pub model: ModelMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelMeta {
    Network { net: NetConfig },
    Analytic { n_classes: usize, vars: Vec<f64> },
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("meta.json")
}

fn dtype_name(d: Dtype) -> &'static str {
    match d {
        Dtype::F32 => "f32",
        Dtype::F64 => "f64",
    }
}

/// Tensor table of a denoiser, names matching the tape's trainable labels.
pub fn denoiser_tensors<T: Scalar>(d: &Denoiser<T>) -> Vec<(String, Tensor<T>)> {
    match d.kind() {
        DenoiserKind::Network(p) => vec![
            ("net.w1".into(), p.w1.clone()),
            ("net.b1".into(), p.b1.clone()),
            ("net.w2".into(), p.w2.clone()),
            ("net.b2".into(), p.b2.clone()),
            ("net.w3".into(), p.w3.clone()),
            ("net.b3".into(), p.b3.clone()),
            ("net.wout".into(), p.wout.clone()),
            ("net.bout".into(), p.bout.clone()),
            ("net.cond_table".into(), p.cond_table.clone()),
        ],
        DenoiserKind::Analytic(p) => p
            .means
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("analytic.mean.{i}"), m.clone()))
            .collect(),
    }
}

pub fn save_model<T: Scalar>(
    path: &Path,
    d: &Denoiser<T>,
    schedule: ScheduleConfig,
) -> Result<()> {
    save_checkpoint(path, &denoiser_tensors(d))?;
    let model = match d.kind() {
        DenoiserKind::Network(p) => ModelMeta::Network { net: p.cfg },
        DenoiserKind::Analytic(p) => ModelMeta::Analytic {
            n_classes: d.n_classes(),
            vars: p.vars.clone(),
        },
    };
    let meta = CheckpointMeta {
        dtype: dtype_name(T::DTYPE).into(),
        schedule,
        model,
    };
    let file = File::create(meta_path(path))?;
    serde_json::to_writer_pretty(file, &meta)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Denoiser<T>> {
    let meta_file = File::open(meta_path(path))?;
    let meta: CheckpointMeta = serde_json::from_reader(meta_file)?;
    if meta.dtype != dtype_name(T::DTYPE) {
        return Err(Error::Invalid {
            what: "checkpoint precision".into(),
            expected: dtype_name(T::DTYPE).into(),
            got: meta.dtype,
        });
    }
    let sched = Arc::new(meta.schedule.build()?);
    let entries = load_checkpoint::<T>(path)?;
    match meta.model {
        ModelMeta::Network { net } => {
            let mut d = make_network::<T>(net, sched, 0);
            let DenoiserKind::Network(p) = d.kind_mut() else {
                unreachable!("make_network builds a network");
            };
            for (name, slot) in [
                ("net.w1", &mut p.w1),
                ("net.b1", &mut p.b1),
                ("net.w2", &mut p.w2),
                ("net.b2", &mut p.b2),
                ("net.w3", &mut p.w3),
                ("net.b3", &mut p.b3),
                ("net.wout", &mut p.wout),
                ("net.bout", &mut p.bout),
                ("net.cond_table", &mut p.cond_table),
            ] {
                let found = find_tensor(&entries, name)?;
                if found.shape() != slot.shape() {
                    return Err(Error::ShapeMismatch {
                        op: format!("load `{name}`"),
                        lhs: found.shape().to_vec(),
                        rhs: slot.shape().to_vec(),
                    });
                }
                *slot = found;
            }
            Ok(d)
        }
        ModelMeta::Analytic { n_classes, vars } => {
            if vars.len() != n_classes + 1 {
                return Err(Error::Invalid {
                    what: "analytic checkpoint".into(),
                    expected: format!("{} variances", n_classes + 1),
                    got: vars.len().to_string(),
                });
            }
            let mut means = Vec::with_capacity(n_classes + 1);
            for i in 0..=n_classes {
                means.push(find_tensor(&entries, &format!("analytic.mean.{i}"))?);
            }
            let null_mean = means.pop().expect("null mean present");
            let null_var = vars[n_classes];
            make_analytic(means, vars[..n_classes].to_vec(), null_mean, null_var, sched)
        }
    }
}

/// Single-tensor convenience for generator parameters.
pub fn save_theta<T: Scalar>(path: &Path, theta: &Tensor<T>) -> Result<()> {
    save_checkpoint(path, &[("theta".into(), theta.clone())])
}

pub fn load_theta<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    find_tensor(&load_checkpoint::<T>(path)?, "theta")
}
