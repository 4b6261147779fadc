//! `DSEG` checkpoint files.
//!
//! Little-endian throughout:
//!
//! ```text
//! b"DSEG"  u32 version  u32 record_count
//! record:  u16 name_len  name (utf-8)  u8 ndim  u32 × ndim extents  f32 × numel
//! ```
//!
//! Records appear in a fixed order (model meta, parameters and buffers in
//! registry order, optimizer state, training progress), so saving a loaded
//! checkpoint reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ModelConfig, UNet, Variant};
use crate::tensor::Tensor;

use super::adam::{Adam, BETA1, BETA2, EPSILON};

pub const MAGIC: &[u8; 4] = b"DSEG";
pub const VERSION: u32 = 1;

/// Largest integer every f32 holds exactly.
const F32_EXACT: u64 = 1 << 24;

/// One finished epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: Option<f32>,
    pub val_miou: Option<f32>,
    pub train_miou: Option<f32>,
    /// Rate used during the epoch.
    pub lr: f32,
}

const HISTORY_COLS: usize = 6;

impl EpochRecord {
    fn to_row(self) -> [f32; HISTORY_COLS] {
        let o = |v: Option<f32>| v.unwrap_or(f32::NAN);
        [self.epoch as f32, self.train_loss, o(self.val_loss), o(self.val_miou), o(self.train_miou), self.lr]
    }

    fn from_row(r: &[f32]) -> Self {
        let o = |v: f32| (!v.is_nan()).then_some(v);
        Self {
            epoch: r[0] as usize,
            train_loss: r[1],
            val_loss: o(r[2]),
            val_miou: o(r[3]),
            train_miou: o(r[4]),
            lr: r[5],
        }
    }
}

/// Where a run stands after `history.len()` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Progress {
    /// Rate for the next epoch.
    pub lr: f32,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Every registry entry, parameters and buffers, in registry order.
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<Adam<f32>>,
    pub progress: Option<Progress>,
}

fn scalar(v: f32) -> Tensor<f32> {
    Tensor::new(vec![1], vec![v]).expect("shape")
}

impl Checkpoint {
    pub fn capture(model: &UNet<f32>, optimizer: Option<&Adam<f32>>, progress: Option<&Progress>) -> Self {
        Self {
            model: *model.config(),
            tensors: model.store().entries().map(|(_, e)| (e.name.clone(), e.value.clone())).collect(),
            optimizer: optimizer.cloned(),
            progress: progress.cloned(),
        }
    }

    /// Rebuilds the model and loads every stored tensor into it.
    pub fn restore_model(&self) -> Result<UNet<f32>> {
        let mut model = UNet::build(&self.model, 0)?;
        let expected = model.store().len();
        if expected != self.tensors.len() {
            return Err(Error::Checkpoint {
                path: Default::default(),
                reason: format!("model has {expected} tensors, checkpoint {}", self.tensors.len()),
            });
        }
        for (name, t) in &self.tensors {
            model.store_mut().set_value(name, t.clone())?;
        }
        Ok(model)
    }

    fn records(&self) -> Result<Vec<(String, Tensor<f32>)>> {
        let m = &self.model;
        let mut out = vec![
            ("meta.variant".to_string(), scalar(m.variant.code() as f32)),
            ("meta.base_channels".to_string(), scalar(m.base_channels as f32)),
            ("meta.depth".to_string(), scalar(m.depth as f32)),
            ("meta.num_classes".to_string(), scalar(m.num_classes as f32)),
            ("meta.modulated".to_string(), scalar(m.modulated as u8 as f32)),
            ("meta.in_channels".to_string(), scalar(m.in_channels as f32)),
        ];
        out.extend(self.tensors.iter().cloned());
        if let Some(opt) = &self.optimizer {
            if opt.t >= F32_EXACT {
                return Err(Error::State(format!("step count {} too large to store", opt.t)));
            }
            out.push(("optim.t".into(), scalar(opt.t as f32)));
            for (name, mv, vv) in &opt.moments {
                let shape = self
                    .tensors
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| t.shape().to_vec())
                    .unwrap_or_else(|| vec![mv.len()]);
                out.push((format!("optim.m.{name}"), Tensor::new(shape.clone(), mv.clone())?));
                out.push((format!("optim.v.{name}"), Tensor::new(shape, vv.clone())?));
            }
        }
        if let Some(p) = &self.progress {
            out.push(("train.lr".into(), scalar(p.lr)));
            let rows: Vec<f32> = p.history.iter().flat_map(|r| r.to_row()).collect();
            out.push(("train.history".into(), Tensor::new(vec![p.history.len(), HISTORY_COLS], rows)?));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let records = self.records()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in &records {
            let len = u16::try_from(name.len()).map_err(|_| Error::State(format!("record name too long: {name}")))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a DSEG checkpoint".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "record name is not utf-8")?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or("tensor too large")?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            records.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Self::from_records(records)
    }

    fn from_records(records: Vec<(String, Tensor<f32>)>) -> std::result::Result<Self, String> {
        let meta = |key: &str| -> std::result::Result<usize, String> {
            let (_, t) = records
                .iter()
                .find(|(n, _)| n == key)
                .ok_or_else(|| format!("missing record {key}"))?;
            Ok(t.data()[0] as usize)
        };
        let variant = Variant::from_code(meta("meta.variant")? as u8).ok_or("unknown variant code")?;
        let model = ModelConfig {
            variant,
            base_channels: meta("meta.base_channels")?,
            depth: meta("meta.depth")?,
            num_classes: meta("meta.num_classes")?,
            modulated: meta("meta.modulated")? != 0,
            in_channels: meta("meta.in_channels")?,
        };
        let mut tensors = Vec::new();
        let mut t_opt = None;
        let mut moments: Vec<(String, Vec<f32>, Vec<f32>)> = Vec::new();
        let mut lr = None;
        let mut history = None;
        for (name, t) in records {
            if name.starts_with("meta.") {
                continue;
            } else if name == "optim.t" {
                t_opt = Some(t.data()[0] as u64);
            } else if let Some(p) = name.strip_prefix("optim.m.") {
                moments.push((p.to_string(), t.into_data(), Vec::new()));
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                let slot = moments
                    .iter_mut()
                    .find(|(n, _, v)| n == p && v.is_empty())
                    .ok_or_else(|| format!("second moment for {p} without a first"))?;
                slot.2 = t.into_data();
            } else if name == "train.lr" {
                lr = Some(t.data()[0]);
            } else if name == "train.history" {
                let rows = t.data().chunks_exact(HISTORY_COLS).map(EpochRecord::from_row).collect();
                history = Some(rows);
            } else {
                tensors.push((name, t));
            }
        }
        let optimizer = t_opt.map(|t| Adam { beta1: BETA1, beta2: BETA2, eps: EPSILON, t, moments });
        let progress = match (lr, history) {
            (Some(lr), Some(history)) => Some(Progress { lr, history }),
            (None, None) => None,
            _ => return Err("incomplete training progress records".into()),
        };
        Ok(Self { model, tensors, optimizer, progress })
    }

    /// Writes atomically (temporary file, then rename), so an interrupted
    /// save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint { path: path.to_path_buf(), reason })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(v: Variant, seed: u64) -> UNet<f32> {
        UNet::build(&ModelConfig::new(v, 2, 2), seed).unwrap()
    }

    #[test]
    fn same_seed_builds_are_byte_identical() {
        let a = Checkpoint::capture(&model(Variant::VDeUNet, 3), None, None).to_bytes().unwrap();
        let b = Checkpoint::capture(&model(Variant::VDeUNet, 3), None, None).to_bytes().unwrap();
        let c = Checkpoint::capture(&model(Variant::VDeUNet, 4), None, None).to_bytes().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(&a[..4], b"DSEG");
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(Variant::RUNet, 1);
        let mut opt = Adam::new(m.store());
        opt.t = 17;
        opt.moments[0].1[0] = 0.25;
        opt.moments[3].2[1] = 1e-9;
        let progress = Progress {
            lr: 5e-5,
            history: vec![
                EpochRecord { epoch: 1, train_loss: 2.0, val_loss: Some(1.5), val_miou: Some(0.1), train_miou: None, lr: 1e-4 },
                EpochRecord { epoch: 2, train_loss: 1.0, val_loss: None, val_miou: None, train_miou: Some(0.3), lr: 1e-4 },
            ],
        };
        let ck = Checkpoint::capture(&m, Some(&opt), Some(&progress));
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        ck.save(&p1).unwrap();
        let back = Checkpoint::load(&p1).unwrap();
        assert_eq!(back, ck);
        back.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let restored = back.restore_model().unwrap();
        assert_eq!(Checkpoint::capture(&restored, None, None).tensors, ck.tensors);
    }

    #[test]
    fn corrupt_files_are_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let bytes = Checkpoint::capture(&model(Variant::VUNet, 0), None, None).to_bytes().unwrap();
        for bad in [&b"NOPE"[..], &bytes[..bytes.len() - 3], &[bytes.as_slice(), &[0]].concat()] {
            fs::write(&p, bad).unwrap();
            assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint { .. })));
        }
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io(_))));
    }
}
