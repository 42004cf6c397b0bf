//! Binary checkpoint serialization and parameter-space averaging.
//!
//! File layout: magic bytes, format version, a JSON metadata block echoing
//! the architecture, then named tensor records. Each record is
//! (name length: u16, name, dtype tag: u8, rank: u8, extents: u64 each,
//! values little-endian). An optional trailing section stores the optimizer
//! moments in the same record format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::data::manifest::ViewKind;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CXRCKPT\0";
const FORMAT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub view: String,
    pub mean_pixel: f64,
    pub epoch: u64,
    pub val_loss: Option<f64>,
}

impl CheckpointMeta {
    pub fn view_kind(&self) -> Result<ViewKind> {
        ViewKind::parse(&self.view)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub step: u64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Model parameters followed by batch-norm running buffers, in model
    /// order.
    pub tensors: Vec<NamedTensor>,
    pub opt: Option<AdamSnapshot>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        opt: Option<&AdamState>,
        view: ViewKind,
        mean_pixel: f64,
        epoch: u64,
        val_loss: Option<f64>,
    ) -> Checkpoint {
        let mut tensors: Vec<NamedTensor> = model
            .params()
            .iter()
            .map(|p| NamedTensor { name: p.name.clone(), value: p.value.clone() })
            .collect();
        for layer in model.bn_layers() {
            tensors.push(NamedTensor {
                name: format!("{}.running_mean", layer.name),
                value: Tensor::new(vec![layer.running.mean.len()], layer.running.mean.clone())
                    .expect("bn buffer shape"),
            });
            tensors.push(NamedTensor {
                name: format!("{}.running_var", layer.name),
                value: Tensor::new(vec![layer.running.var.len()], layer.running.var.clone())
                    .expect("bn buffer shape"),
            });
        }
        let opt = opt.map(|state| AdamSnapshot {
            step: state.step,
            m: model
                .params()
                .iter()
                .zip(&state.m)
                .map(|(p, t)| NamedTensor { name: p.name.clone(), value: t.clone() })
                .collect(),
            v: model
                .params()
                .iter()
                .zip(&state.v)
                .map(|(p, t)| NamedTensor { name: p.name.clone(), value: t.clone() })
                .collect(),
        });
        Checkpoint {
            meta: CheckpointMeta {
                model: model.config.clone(),
                view: view.to_string(),
                mean_pixel,
                epoch,
                val_loss,
            },
            tensors,
            opt,
        }
    }

    /// Rebuild a model carrying exactly this checkpoint's parameters and
    /// batch-norm buffers.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::build(&self.meta.model, 0)?;
        for nt in &self.tensors {
            if let Some(idx) = model.param_index(&nt.name) {
                if model.params()[idx].value.shape() != nt.value.shape() {
                    return Err(Error::Format(format!(
                        "checkpoint tensor {} has shape {:?}, model expects {:?}",
                        nt.name,
                        nt.value.shape(),
                        model.params()[idx].value.shape()
                    )));
                }
                model.param_mut(idx).value = nt.value.clone();
            } else if let Some(base) = nt.name.strip_suffix(".running_mean") {
                set_bn(&mut model, base, &nt.value, true)?;
            } else if let Some(base) = nt.name.strip_suffix(".running_var") {
                set_bn(&mut model, base, &nt.value, false)?;
            } else {
                return Err(Error::Format(format!("unknown checkpoint tensor {}", nt.name)));
            }
        }
        Ok(model)
    }

    /// Restore the optimizer moments, aligned with the given model's
    /// parameter order.
    pub fn to_adam_state(&self, model: &Model) -> Result<Option<AdamState>> {
        let Some(snap) = &self.opt else { return Ok(None) };
        let mut state = AdamState::new(
            &model.params().iter().map(|p| p.value.shape()).collect::<Vec<_>>(),
        );
        state.step = snap.step;
        for (slot, list) in [(&mut state.m, &snap.m), (&mut state.v, &snap.v)] {
            for nt in list.iter() {
                let idx = model.param_index(&nt.name).ok_or_else(|| {
                    Error::Format(format!("optimizer tensor {} has no matching param", nt.name))
                })?;
                slot[idx] = nt.value.clone();
            }
        }
        Ok(Some(state))
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        if self.meta != other.meta || self.tensors.len() != other.tensors.len() {
            return false;
        }
        let tensors_eq = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value));
        let opt_eq = match (&self.opt, &other.opt) {
            (None, None) => true,
            (Some(a), Some(b)) => {
                a.step == b.step
                    && a.m.len() == b.m.len()
                    && a.m.iter().zip(&b.m).all(|(x, y)| x.name == y.name && x.value.bit_eq(&y.value))
                    && a.v.iter().zip(&b.v).all(|(x, y)| x.name == y.name && x.value.bit_eq(&y.value))
            }
            _ => false,
        };
        tensors_eq && opt_eq
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_dtype(path, Dtype::F64)
    }

    pub fn save_with_dtype(&self, path: &Path, dtype: Dtype) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Format(format!("meta encode: {e}")))?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;

        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for nt in &self.tensors {
            write_record(&mut w, nt, dtype)?;
        }
        match &self.opt {
            None => w.write_all(&[0u8])?,
            Some(snap) => {
                w.write_all(&[1u8])?;
                w.write_all(&snap.step.to_le_bytes())?;
                w.write_all(&(snap.m.len() as u32).to_le_bytes())?;
                for nt in snap.m.iter().chain(&snap.v) {
                    write_record(&mut w, nt, dtype)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{}: bad magic bytes", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)
            .map_err(|e| Error::Format(format!("meta decode: {e}")))?;

        let n = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            tensors.push(read_record(&mut r)?);
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let opt = if flag[0] == 1 {
            let mut step_bytes = [0u8; 8];
            r.read_exact(&mut step_bytes)?;
            let step = u64::from_le_bytes(step_bytes);
            let count = read_u32(&mut r)? as usize;
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                m.push(read_record(&mut r)?);
            }
            for _ in 0..count {
                v.push(read_record(&mut r)?);
            }
            Some(AdamSnapshot { step, m, v })
        } else {
            None
        };
        Ok(Checkpoint { meta, tensors, opt })
    }
}

fn set_bn(model: &mut Model, base: &str, value: &Tensor, is_mean: bool) -> Result<()> {
    let layer = model
        .bn_layers_mut()
        .iter_mut()
        .find(|l| l.name == base)
        .ok_or_else(|| Error::Format(format!("unknown batch-norm layer {base}")))?;
    let buf = if is_mean { &mut layer.running.mean } else { &mut layer.running.var };
    if buf.len() != value.numel() {
        return Err(Error::Format(format!("batch-norm buffer {base} length mismatch")));
    }
    buf.copy_from_slice(value.data());
    Ok(())
}

fn write_record(w: &mut impl Write, nt: &NamedTensor, dtype: Dtype) -> Result<()> {
    let name = nt.name.as_bytes();
    if name.len() > u16::MAX as usize {
        return Err(Error::Format(format!("tensor name too long: {}", nt.name)));
    }
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name)?;
    let shape = nt.value.shape();
    match dtype {
        Dtype::F64 => w.write_all(&[DTYPE_F64])?,
        Dtype::F32 => w.write_all(&[DTYPE_F32])?,
    }
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        Dtype::F64 => {
            for &v in nt.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for &v in nt.value.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_record(r: &mut impl Read) -> Result<NamedTensor> {
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let name_len = u16::from_le_bytes(b2) as usize;
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let dtype = b1[0];
    r.read_exact(&mut b1)?;
    let rank = b1[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        DTYPE_F64 => {
            let mut b8 = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b8)?;
                data.push(f64::from_le_bytes(b8));
            }
        }
        DTYPE_F32 => {
            let mut b4 = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut b4)?;
                data.push(f32::from_le_bytes(b4) as f64);
            }
        }
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    }
    Ok(NamedTensor { name, value: Tensor::new(shape, data)? })
}

/// Elementwise mean of every tensor across checkpoints. Optimizer state is
/// discarded; batch-norm buffers are averaged too and should be re-estimated
/// by a stat-collection pass before serious use.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Config("cannot average zero checkpoints".into()))?;
    for c in &checkpoints[1..] {
        if c.meta.model != first.meta.model {
            return Err(Error::Config("checkpoint architectures differ".into()));
        }
        if c.tensors.len() != first.tensors.len() {
            return Err(Error::Config("checkpoint tensor lists differ".into()));
        }
        for (a, b) in first.tensors.iter().zip(&c.tensors) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor mismatch at {} vs {}",
                    a.name, b.name
                )));
            }
        }
    }

    // mean as first + mean(deltas): bit-exact when all inputs are equal
    let k = checkpoints.len() as f64;
    let tensors = first
        .tensors
        .iter()
        .enumerate()
        .map(|(i, nt)| {
            let base = nt.value.data();
            let mut acc = vec![0.0; nt.value.numel()];
            for c in &checkpoints[1..] {
                for ((a, &v), &b) in acc.iter_mut().zip(c.tensors[i].value.data()).zip(base) {
                    *a += v - b;
                }
            }
            let data: Vec<f64> = base
                .iter()
                .zip(&acc)
                .map(|(&b, &d)| if d == 0.0 { b } else { b + d / k })
                .collect();
            NamedTensor {
                name: nt.name.clone(),
                value: Tensor::new(nt.value.shape().to_vec(), data).expect("avg shape"),
            }
        })
        .collect();

    Ok(Checkpoint {
        meta: CheckpointMeta { epoch: 0, val_loss: None, ..first.meta.clone() },
        tensors,
        opt: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset_micro;

    fn tiny_model(seed: u64) -> Model {
        let mut cfg = preset_micro();
        cfg.input_size = 64;
        cfg.block_layer_counts = vec![1, 1];
        cfg.growth_rate = 4;
        cfg.stem_channels = 4;
        Model::build(&cfg, seed).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bit_exact_with_optimizer_state() {
        let model = tiny_model(7);
        let shapes: Vec<&[usize]> = model.params().iter().map(|p| p.value.shape()).collect();
        let mut state = AdamState::new(&shapes);
        state.step = 42;
        state.m[0].data_mut()[0] = 0.123456789e-3;

        let ckpt = Checkpoint::from_model(&model, Some(&state), ViewKind::Frontal, 99.5, 7, Some(0.25));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert!(ckpt.bit_eq(&loaded));

        let restored = loaded.to_model().unwrap();
        assert_eq!(restored.param_count(), model.param_count());
        let adam = loaded.to_adam_state(&restored).unwrap().unwrap();
        assert_eq!(adam.step, 42);
        assert_eq!(adam.m[0].data()[0], 0.123456789e-3);
    }

    #[test]
    fn averaging_identical_checkpoints_is_bit_identity() {
        let model = tiny_model(3);
        let ckpt = Checkpoint::from_model(&model, None, ViewKind::Frontal, 0.0, 1, Some(1.0));
        let avg = average_checkpoints(&vec![ckpt.clone(); 5]).unwrap();
        for (a, b) in avg.tensors.iter().zip(&ckpt.tensors) {
            assert!(a.value.bit_eq(&b.value), "{}", a.name);
        }
    }

    #[test]
    fn averaging_two_scalars_means_them() {
        let model = tiny_model(3);
        let mut a = Checkpoint::from_model(&model, None, ViewKind::Frontal, 0.0, 1, None);
        let mut b = a.clone();
        a.tensors[0].value.data_mut()[0] = 1.0;
        b.tensors[0].value.data_mut()[0] = 3.0;
        let avg = average_checkpoints(&[a, b]).unwrap();
        assert_eq!(avg.tensors[0].value.data()[0], 2.0);
        assert!(avg.opt.is_none());
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let a = Checkpoint::from_model(&tiny_model(0), None, ViewKind::Frontal, 0.0, 1, None);
        let other = {
            let mut cfg = preset_micro();
            cfg.input_size = 64;
            cfg.block_layer_counts = vec![1, 2];
            cfg.growth_rate = 4;
            cfg.stem_channels = 4;
            Model::build(&cfg, 0).unwrap()
        };
        let b = Checkpoint::from_model(&other, None, ViewKind::Frontal, 0.0, 1, None);
        assert!(average_checkpoints(&[a, b]).is_err());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let model = tiny_model(1);
        let ckpt = Checkpoint::from_model(&model, None, ViewKind::Lateral, 0.0, 1, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn f32_storage_loads_with_expected_precision() {
        let model = tiny_model(5);
        let ckpt = Checkpoint::from_model(&model, None, ViewKind::Frontal, 0.0, 1, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.ckpt");
        ckpt.save_with_dtype(&path, Dtype::F32).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        for (a, b) in ckpt.tensors.iter().zip(&loaded.tensors) {
            for (&x, &y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - y).abs() <= x.abs().max(1.0) * 1e-6);
            }
        }
    }
}
