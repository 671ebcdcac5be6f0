//! The `CALR` binary checkpoint container.
//!
//! Layout (little-endian): magic `CALR`, `u32` version, then records
//! `{name_len u32, name, dtype u8, ndim u8, dims u32[ndim], payload}` where
//! i8 payloads are followed by one f32 scale per leading-axis row. The file
//! ends with a CRC-64/XZ of every preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use super::{
    Activation, Block, Granularity, LayerNorm, LinearSlot, MoeFfn, PruneMask, QuantState,
    RouterMode, SlotKind, SlotPath, TransformerConfig, TransformerModel,
};
use crate::adapters::{AdapterSet, LoraAdapter, RecoveryAdapter, Sigma};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"CALR";
pub const VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8 { codes: Vec<i8>, scales: Vec<f32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn float<T: Element>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => RecordData::F32(t.data().iter().map(|x| x.as_f64() as f32).collect()),
            DType::F64 => RecordData::F64(t.data().iter().map(|x| x.as_f64()).collect()),
        };
        Self {
            name: name.into(),
            dims: t.shape().to_vec(),
            data,
        }
    }

    pub fn meta(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims: vec![values.len().max(1)],
            data: RecordData::F64(if values.is_empty() { vec![0.0] } else { values }),
        }
    }

    /// 0/1 flags as an i8 record with unit scales.
    pub fn flags(name: impl Into<String>, dims: Vec<usize>, flags: &[bool]) -> Self {
        let rows = dims[0];
        Self {
            name: name.into(),
            dims,
            data: RecordData::I8 {
                codes: flags.iter().map(|&f| f as i8).collect(),
                scales: vec![1.0; rows],
            },
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match &self.data {
            RecordData::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            RecordData::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            RecordData::I8 { .. } => {
                return Err(Error::Format(format!(
                    "record `{}` is not a float tensor",
                    self.name
                )))
            }
        };
        Tensor::new(self.dims.clone(), data)
    }

    pub fn values_f64(&self) -> Vec<f64> {
        match &self.data {
            RecordData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            RecordData::F64(v) => v.clone(),
            RecordData::I8 { codes, .. } => codes.iter().map(|&c| c as f64).collect(),
        }
    }

    fn as_flags(&self) -> Result<Vec<bool>> {
        match &self.data {
            RecordData::I8 { codes, .. } => Ok(codes.iter().map(|&c| c != 0).collect()),
            _ => Err(Error::Format(format!(
                "record `{}` is not a flag record",
                self.name
            ))),
        }
    }
}

pub fn write_records(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        out.extend_from_slice(
            &u32::try_from(name.len())
                .map_err(|_| Error::Format("name too long".into()))?
                .to_le_bytes(),
        );
        out.extend_from_slice(name);
        let dtype: u8 = match r.data {
            RecordData::F32(_) => 0,
            RecordData::F64(_) => 1,
            RecordData::I8 { .. } => 2,
        };
        out.push(dtype);
        out.push(u8::try_from(r.dims.len()).map_err(|_| Error::Format("too many axes".into()))?);
        for &d in &r.dims {
            out.extend_from_slice(
                &u32::try_from(d)
                    .map_err(|_| Error::Format("axis too long".into()))?
                    .to_le_bytes(),
            );
        }
        let n = r.len();
        match &r.data {
            RecordData::F32(v) => {
                check_len(&r.name, v.len(), n)?;
                v.iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
            RecordData::F64(v) => {
                check_len(&r.name, v.len(), n)?;
                v.iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
            RecordData::I8 { codes, scales } => {
                check_len(&r.name, codes.len(), n)?;
                check_len(&r.name, scales.len(), r.dims[0])?;
                out.extend(codes.iter().map(|&c| c as u8));
                scales
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
        }
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Format(format!(
            "record `{name}` holds {got} values, dims say {want}"
        )));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated record".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parses a checkpoint, verifying magic, version and checksum first.
pub fn read_records(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a CALR checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if CRC64.checksum(body) != stored {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let mut rd = Reader {
        bytes: body,
        pos: 4,
    };
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let mut out = Vec::new();
    while rd.pos < body.len() {
        let name_len = rd.u32()? as usize;
        let name = std::str::from_utf8(rd.take(name_len)?)
            .map_err(|_| Error::Format("record name is not utf-8".into()))?
            .to_string();
        let dtype = rd.u8()?;
        let ndim = rd.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| rd.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Format(format!("record `{name}` has empty dims")));
        }
        let n: usize = dims.iter().product();
        let data = match dtype {
            0 => RecordData::F32(
                rd.take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => RecordData::F64(
                rd.take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => {
                let codes = rd.take(n)?.iter().map(|&b| b as i8).collect();
                let scales = rd
                    .take(dims[0] * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                RecordData::I8 { codes, scales }
            }
            d => return Err(Error::Format(format!("unknown dtype tag {d}"))),
        };
        out.push(Record { name, dims, data });
    }
    Ok(out)
}

pub fn write_file(path: &Path, records: &[Record]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, write_records(records)?)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<Record>> {
    read_records(&std::fs::read(path)?)
}

type Index<'a> = BTreeMap<&'a str, &'a Record>;

fn index(records: &[Record]) -> Index<'_> {
    records.iter().map(|r| (r.name.as_str(), r)).collect()
}

fn get<'a>(idx: &Index<'a>, name: &str) -> Result<&'a Record> {
    idx.get(name)
        .copied()
        .ok_or_else(|| Error::Format(format!("missing record `{name}`")))
}

fn tensor<T: Element>(idx: &Index<'_>, name: &str) -> Result<Tensor<T>> {
    get(idx, name)?.to_tensor()
}

const CONFIG: &str = "meta/config";

impl<T: Element> TransformerModel<T> {
    /// Backbone records followed by every attached adapter set.
    pub fn to_records(&self) -> Vec<Record> {
        let c = &self.config;
        let mut out = vec![Record::meta(
            CONFIG,
            [
                c.n_layers,
                c.d_model,
                c.n_heads,
                c.d_ff,
                c.vocab_size,
                c.max_seq_len,
            ]
            .iter()
            .map(|&x| x as f64)
            .collect(),
        )];
        for (name, t) in self.backbone_tensors() {
            let slot_path = name
                .strip_suffix(".weight")
                .and_then(|p| p.parse::<SlotPath>().ok());
            match slot_path {
                Some(path) => out.extend(slot_records(
                    self.slot(&path).expect("exists"),
                    &name,
                    &path,
                )),
                None => out.push(Record::float(name, t)),
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(keep) = &b.head_keep {
                out.push(Record::flags(
                    format!("layers.{i}.head_keep"),
                    vec![keep.len()],
                    keep,
                ));
            }
            if let Some(m) = &b.moe {
                let mode = match m.mode {
                    RouterMode::Oracle => 0.0,
                    RouterMode::Learned => 1.0,
                };
                out.push(Record::meta(
                    format!("layers.{i}.moe"),
                    vec![m.n_experts as f64, m.top_k as f64, mode],
                ));
                out.push(Record::meta(
                    format!("layers.{i}.moe.assignment"),
                    m.assignment.iter().map(|&e| e as f64).collect(),
                ));
            }
        }
        for set in &self.adapter_sets {
            out.extend(set.to_records());
        }
        out
    }

    /// Rebuilds a model from records. Backbone tensors come back frozen;
    /// adapter sets come back attached and trainable.
    pub fn from_records(records: &[Record]) -> Result<Self> {
        let idx = index(records);
        let cfg = get(&idx, CONFIG)?.values_f64();
        if cfg.len() != 6 {
            return Err(Error::Format("config record has the wrong length".into()));
        }
        let u = |i: usize| cfg[i] as usize;
        let config = TransformerConfig {
            n_layers: u(0),
            d_model: u(1),
            n_heads: u(2),
            d_ff: u(3),
            vocab_size: u(4),
            max_seq_len: u(5),
            activation: Activation::Relu,
        };
        config
            .validate()
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let ln = |n: &str| -> Result<LayerNorm<T>> {
                Ok(LayerNorm {
                    gamma: tensor(&idx, &format!("layers.{i}.{n}.gamma"))?,
                    beta: tensor(&idx, &format!("layers.{i}.{n}.beta"))?,
                })
            };
            let slot = |k: SlotKind| read_slot::<T>(&idx, &SlotPath::new(i, k));
            let head_keep = match idx.get(format!("layers.{i}.head_keep").as_str()) {
                Some(r) => Some(r.as_flags()?),
                None => None,
            };
            let moe = match idx.get(format!("layers.{i}.moe").as_str()) {
                Some(r) => {
                    let v = r.values_f64();
                    if v.len() != 3 {
                        return Err(Error::Format("moe record has the wrong length".into()));
                    }
                    let assignment: Vec<usize> = get(&idx, &format!("layers.{i}.moe.assignment"))?
                        .values_f64()
                        .iter()
                        .map(|&e| e as usize)
                        .collect();
                    let n_experts = v[0] as usize;
                    if assignment.iter().any(|&e| e >= n_experts) {
                        return Err(Error::Format("expert assignment out of range".into()));
                    }
                    let router = match idx.get(format!("layers.{i}.router").as_str()) {
                        Some(r) => Some(r.to_tensor()?),
                        None => None,
                    };
                    Some(MoeFfn {
                        n_experts,
                        top_k: v[1] as usize,
                        assignment,
                        mode: if v[2] == 1.0 {
                            RouterMode::Learned
                        } else {
                            RouterMode::Oracle
                        },
                        router,
                    })
                }
                None => None,
            };
            blocks.push(Block {
                ln1: ln("ln1")?,
                q: slot(SlotKind::Query)?,
                k: slot(SlotKind::Key)?,
                v: slot(SlotKind::Value)?,
                o: slot(SlotKind::Output)?,
                ln2: ln("ln2")?,
                ffn_in: slot(SlotKind::FfnIn)?,
                ffn_out: slot(SlotKind::FfnOut)?,
                head_keep,
                moe,
            });
        }
        let mut model = TransformerModel::from_parts(
            config,
            tensor(&idx, "tok_emb")?,
            tensor(&idx, "pos_emb")?,
            blocks,
            LayerNorm {
                gamma: tensor(&idx, "ln_f.gamma")?,
                beta: tensor(&idx, "ln_f.beta")?,
            },
            tensor(&idx, "head")?,
        );
        for task in adapter_tasks(records) {
            let set = AdapterSet::from_records(records, &task)?;
            model
                .attach_set(set)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&read_file(path)?)
    }
}

fn slot_records<T: Element>(slot: &LinearSlot<T>, name: &str, path: &SlotPath) -> Vec<Record> {
    let mut out = Vec::new();
    match &slot.quant {
        Some(q) => {
            out.push(Record {
                name: name.to_string(),
                dims: slot.weight.shape().to_vec(),
                data: RecordData::I8 {
                    codes: q.codes.clone(),
                    scales: q.scales.clone(),
                },
            });
            out.push(Record::meta(format!("{path}.qbits"), vec![q.bits as f64]));
        }
        None => out.push(Record::float(name, &slot.weight)),
    }
    out.push(Record::float(format!("{path}.bias"), &slot.bias));
    if let Some(m) = &slot.mask {
        out.push(Record::flags(
            format!("{path}.mask"),
            slot.weight.shape().to_vec(),
            m.keep(),
        ));
        out.push(Record::meta(
            format!("{path}.mask_meta"),
            vec![m.granularity().code() as f64, m.target()],
        ));
    }
    out
}

fn read_slot<T: Element>(idx: &Index<'_>, path: &SlotPath) -> Result<LinearSlot<T>> {
    let wrec = get(idx, &format!("{path}.weight"))?;
    let bias = tensor(idx, &format!("{path}.bias"))?;
    let (weight, quant) = match &wrec.data {
        RecordData::I8 { codes, scales } => {
            if wrec.dims.len() != 2 {
                return Err(Error::Format(format!("quantized `{path}` is not a matrix")));
            }
            let bits = get(idx, &format!("{path}.qbits"))?.values_f64()[0] as u8;
            let q = QuantState {
                bits,
                codes: codes.clone(),
                scales: scales.clone(),
            };
            let w = Tensor::new(wrec.dims.clone(), q.dequantize(wrec.dims[0], wrec.dims[1]))?;
            (w, Some(q))
        }
        _ => (wrec.to_tensor()?, None),
    };
    let mut slot = LinearSlot::new(weight, bias).map_err(|e| Error::Format(e.to_string()))?;
    slot.quant = quant;
    if let Some(m) = idx.get(format!("{path}.mask").as_str()) {
        let meta = get(idx, &format!("{path}.mask_meta"))?.values_f64();
        let gran = Granularity::from_code(meta[0] as i8)?;
        slot.apply_mask(PruneMask::new(m.as_flags()?, gran, meta[1]))?;
    }
    Ok(slot)
}

const ADAPTER_PREFIX: &str = "adapter/";

/// Task ids of every adapter set present, in first-seen order.
pub fn adapter_tasks(records: &[Record]) -> Vec<String> {
    let mut tasks: Vec<String> = Vec::new();
    for r in records {
        if let Some(rest) = r.name.strip_prefix(ADAPTER_PREFIX) {
            if let Some((task, _)) = rest.split_once('/') {
                if !tasks.iter().any(|t| t == task) {
                    tasks.push(task.to_string());
                }
            }
        }
    }
    tasks
}

impl<T: Element> AdapterSet<T> {
    /// Records named `adapter/<task>/<slot_path>/{A,B,D,U}` plus a
    /// provenance record.
    pub fn to_records(&self) -> Vec<Record> {
        let base = format!("{ADAPTER_PREFIX}{}", self.task);
        let mut out = vec![Record::meta(
            format!("{base}/provenance/{}", self.provenance),
            vec![1.0],
        )];
        for (p, l) in &self.lora {
            out.push(Record::float(format!("{base}/{p}/A"), &l.a));
            out.push(Record::float(format!("{base}/{p}/B"), &l.b));
            if l.scaling != 1.0 {
                out.push(Record::meta(format!("{base}/{p}/scaling"), vec![l.scaling]));
            }
        }
        for (p, r) in &self.recovery {
            out.push(Record::float(format!("{base}/{p}/D"), &r.d));
            out.push(Record::float(format!("{base}/{p}/U"), &r.u));
            if r.sigma != Sigma::Relu {
                out.push(Record::meta(
                    format!("{base}/{p}/sigma"),
                    vec![r.sigma.code()],
                ));
            }
        }
        out
    }

    pub fn from_records(records: &[Record], task: &str) -> Result<Self> {
        let base = format!("{ADAPTER_PREFIX}{task}/");
        let idx = index(records);
        let mut set = AdapterSet::new(task);
        let mut found = false;
        for r in records {
            let Some(rest) = r.name.strip_prefix(&base) else {
                continue;
            };
            found = true;
            if let Some(p) = rest.strip_prefix("provenance/") {
                set.provenance = p.parse()?;
                continue;
            }
            let Some((path, leaf)) = rest.rsplit_once('/') else {
                return Err(Error::Format(format!(
                    "malformed adapter record `{}`",
                    r.name
                )));
            };
            let slot: SlotPath = path
                .parse()
                .map_err(|_| Error::Format(format!("bad slot in `{}`", r.name)))?;
            match leaf {
                "A" => {
                    let b = tensor::<T>(&idx, &format!("{base}{path}/B"))?.with_grad();
                    let scaling = match idx.get(format!("{base}{path}/scaling").as_str()) {
                        Some(s) => s.values_f64()[0],
                        None => 1.0,
                    };
                    let l = LoraAdapter::from_parts(r.to_tensor::<T>()?.with_grad(), b, scaling)
                        .map_err(|e| Error::Format(e.to_string()))?;
                    set.lora.insert(slot, l);
                }
                "D" => {
                    let u = tensor::<T>(&idx, &format!("{base}{path}/U"))?.with_grad();
                    let sigma = match idx.get(format!("{base}{path}/sigma").as_str()) {
                        Some(s) => Sigma::from_code(s.values_f64()[0])?,
                        None => Sigma::Relu,
                    };
                    let rec =
                        RecoveryAdapter::from_parts(r.to_tensor::<T>()?.with_grad(), u, sigma)
                            .map_err(|e| Error::Format(e.to_string()))?;
                    set.recovery.insert(slot, rec);
                }
                "B" | "U" | "scaling" | "sigma" => {}
                other => {
                    return Err(Error::Format(format!("unknown adapter tensor `{other}`")));
                }
            }
        }
        if !found {
            return Err(Error::Format(format!(
                "no adapter records for task `{task}`"
            )));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_records())
    }

    /// Loads the single adapter set stored in an adapter checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let records = read_file(path)?;
        let tasks = adapter_tasks(&records);
        match tasks.as_slice() {
            [task] => Self::from_records(&records, task),
            _ => Err(Error::Format(format!(
                "expected one adapter set, found {}",
                tasks.len()
            ))),
        }
    }
}
