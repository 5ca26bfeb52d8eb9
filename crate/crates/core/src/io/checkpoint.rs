//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TAQM" | version u16 | config | plan | tensor count u32 | tensors...
//! config  = n_layers, d_model, n_heads, vocab, max_seq, d_ff: u32 each; seed: u64
//! plan    = 0u8 | 1u8, n_layers bits bytes, budget flag u8 [, budget u64]
//! tensor  = name_len u16, name, rows u32, cols u32, mode u8, payload
//! mode 0  = rows·cols f64 values, row-major
//! mode 1  = group_size u32, then per group: bits u8, scale f64, zero f64, packed codes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::alloc::{BitPlan, CostModel, LayerBits};
use crate::error::{Result, TaqError};
use crate::linalg::Matrix;
use crate::model::{init_model, ModelConfig, NamedTensor, ToyModel, Weight, WeightKind};
use crate::quant::pack::{pack_codes, packed_len, unpack_codes};
use crate::quant::{QTensor, QuantParams};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"TAQM";
pub const FORMAT_VERSION: u16 = 1;

const MODE_DENSE: u8 = 0;
const MODE_QUANTIZED: u8 = 1;

/// A loaded checkpoint: the model and, for quantized checkpoints, the plan it was built from.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar = f64> {
    pub model: ToyModel<T>,
    pub plan: Option<BitPlan>,
}

pub fn cost_model(cfg: &ModelConfig) -> CostModel {
    CostModel::uniform(cfg.n_layers, cfg.weights_per_layer())
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| TaqError::InvalidInput(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes `model` (and `plan`, if any) to bytes.
pub fn encode_checkpoint<T: Scalar>(
    model: &ToyModel<T>,
    plan: Option<&BitPlan>,
) -> Result<Vec<u8>> {
    let cfg = &model.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, FORMAT_VERSION);
    for v in [
        cfg.n_layers,
        cfg.d_model,
        cfg.n_heads,
        cfg.vocab,
        cfg.max_seq,
        cfg.d_ff,
    ] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    match plan {
        None => out.push(0),
        Some(p) => {
            if p.n_layers() != cfg.n_layers {
                return Err(TaqError::InvalidPlan(format!(
                    "plan has {} layers, model has {}",
                    p.n_layers(),
                    cfg.n_layers
                )));
            }
            out.push(1);
            out.extend(p.bits().iter().map(|b| b.to_byte()));
            match p.budget() {
                None => out.push(0),
                Some(b) => {
                    out.push(1);
                    out.extend_from_slice(&b.to_le_bytes());
                }
            }
        }
    }
    let tensors = model.named_tensors();
    put_u32(&mut out, tensors.len())?;
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| TaqError::InvalidInput(format!("tensor name too long: {name}")))?;
        put_u16(&mut out, name_len);
        out.extend_from_slice(name.as_bytes());
        match t {
            NamedTensor::Dense(m) => write_dense(&mut out, &m)?,
            NamedTensor::Weight(Weight::Dense(m)) => write_dense(&mut out, m)?,
            NamedTensor::Weight(Weight::Quantized(q)) => write_quantized(&mut out, q)?,
        }
    }
    Ok(out)
}

fn write_dense<T: Scalar>(out: &mut Vec<u8>, m: &Matrix<T>) -> Result<()> {
    put_u32(out, m.rows())?;
    put_u32(out, m.cols())?;
    out.push(MODE_DENSE);
    for &x in m.as_slice() {
        put_f64(out, x.as_f64());
    }
    Ok(())
}

fn write_quantized<T: Scalar>(out: &mut Vec<u8>, q: &QTensor<T>) -> Result<()> {
    let (r, c) = q.shape();
    put_u32(out, r)?;
    put_u32(out, c)?;
    out.push(MODE_QUANTIZED);
    put_u32(out, q.group_size())?;
    for (g, p) in q.params().iter().enumerate() {
        out.push(p.bits);
        put_f64(out, p.scale);
        put_f64(out, p.zero_point);
        out.extend_from_slice(&pack_codes(q.group_codes(g), p.bits)?);
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            TaqError::Format(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

enum Record {
    Dense(Vec<f64>),
    Quantized {
        group_size: usize,
        codes: Vec<u16>,
        params: Vec<QuantParams>,
    },
}

fn read_record(cur: &mut Cursor<'_>, rows: usize, cols: usize) -> Result<Record> {
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n <= cur.buf.len())
        .ok_or_else(|| TaqError::Format(format!("tensor of {rows}x{cols} exceeds the file")))?;
    match cur.u8()? {
        MODE_DENSE => {
            let bytes = cur.take(n * 8)?;
            Ok(Record::Dense(
                bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8")))
                    .collect(),
            ))
        }
        MODE_QUANTIZED => {
            let group_size = cur.u32()?;
            if group_size == 0 {
                return Err(TaqError::Format("zero group size".into()));
            }
            let mut codes = Vec::with_capacity(n);
            let mut params = Vec::with_capacity(n.div_ceil(group_size));
            let mut lo = 0;
            while lo < n {
                let len = group_size.min(n - lo);
                let bits = cur.u8()?;
                let scale = cur.f64()?;
                let zero = cur.f64()?;
                params.push(QuantParams::new(scale, zero, bits)?);
                codes.extend(unpack_codes(cur.take(packed_len(len, bits))?, bits, len)?);
                lo += len;
            }
            Ok(Record::Quantized {
                group_size,
                codes,
                params,
            })
        }
        m => Err(TaqError::Format(format!("unknown tensor mode {m}"))),
    }
}

fn dense<T: Scalar>(rec: Record, rows: usize, cols: usize, name: &str) -> Result<Matrix<T>> {
    match rec {
        Record::Dense(v) => Matrix::from_vec(rows, cols, v.into_iter().map(T::of).collect()),
        Record::Quantized { .. } => Err(TaqError::Format(format!("{name} must be stored dense"))),
    }
}

fn fill_vec<T: Scalar>(
    dst: &mut Vec<T>,
    rec: Record,
    rows: usize,
    cols: usize,
    name: &str,
) -> Result<()> {
    let m = dense::<T>(rec, rows, cols, name)?;
    if rows != 1 || cols != dst.len() {
        return Err(TaqError::Format(format!(
            "{name}: {rows}x{cols}, expected 1x{}",
            dst.len()
        )));
    }
    *dst = m.into_vec();
    Ok(())
}

fn fill_mat<T: Scalar>(
    dst: &mut Matrix<T>,
    rec: Record,
    rows: usize,
    cols: usize,
    name: &str,
) -> Result<()> {
    if (rows, cols) != dst.shape() {
        return Err(TaqError::Format(format!(
            "{name}: {rows}x{cols}, expected {:?}",
            dst.shape()
        )));
    }
    *dst = dense(rec, rows, cols, name)?;
    Ok(())
}

fn assign<T: Scalar>(
    model: &mut ToyModel<T>,
    name: &str,
    rec: Record,
    rows: usize,
    cols: usize,
) -> Result<()> {
    match name {
        "tok_emb" => return fill_mat(&mut model.tok_emb, rec, rows, cols, name),
        "pos_emb" => return fill_mat(&mut model.pos_emb, rec, rows, cols, name),
        "head" => return fill_mat(&mut model.head, rec, rows, cols, name),
        "lnf.gain" => return fill_vec(&mut model.lnf_gain, rec, rows, cols, name),
        "lnf.bias" => return fill_vec(&mut model.lnf_bias, rec, rows, cols, name),
        _ => {}
    }
    let unknown = || TaqError::Format(format!("unknown tensor {name}"));
    let rest = name.strip_prefix("blocks.").ok_or_else(unknown)?;
    let (idx, field) = rest.split_once('.').ok_or_else(unknown)?;
    let l: usize = idx.parse().map_err(|_| unknown())?;
    if l >= model.n_layers() {
        return Err(unknown());
    }
    let block = &mut model.blocks[l];
    match field {
        "ln1.gain" => return fill_vec(&mut block.ln1_gain, rec, rows, cols, name),
        "ln1.bias" => return fill_vec(&mut block.ln1_bias, rec, rows, cols, name),
        "ln2.gain" => return fill_vec(&mut block.ln2_gain, rec, rows, cols, name),
        "ln2.bias" => return fill_vec(&mut block.ln2_bias, rec, rows, cols, name),
        _ => {}
    }
    let kind = WeightKind::ALL
        .into_iter()
        .find(|k| k.name() == field)
        .ok_or_else(unknown)?;
    let w = match rec {
        Record::Dense(v) => Weight::Dense(Matrix::from_vec(
            rows,
            cols,
            v.into_iter().map(T::of).collect(),
        )?),
        Record::Quantized {
            group_size,
            codes,
            params,
        } => Weight::Quantized(QTensor::from_parts(
            rows, cols, group_size, codes, params, false,
        )?),
    };
    model
        .set_weight(l, kind, w)
        .map_err(|e| TaqError::Format(format!("{name}: {e}")))
}

/// Parses checkpoint bytes. Every tensor of the configured model must be present exactly once.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(TaqError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(TaqError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = cur.u32()?;
    }
    let [n_layers, d_model, n_heads, vocab, max_seq, d_ff] = dims;
    let cfg = ModelConfig {
        n_layers,
        d_model,
        n_heads,
        vocab,
        max_seq,
        d_ff,
        seed: cur.u64()?,
    };
    cfg.validate()
        .map_err(|e| TaqError::Format(format!("checkpoint config: {e}")))?;
    let plan_bits = match cur.u8()? {
        0 => None,
        1 => {
            let bits = (0..n_layers)
                .map(|_| cur.u8().and_then(LayerBits::from_byte))
                .collect::<Result<Vec<_>>>()?;
            let budget = match cur.u8()? {
                0 => None,
                1 => Some(cur.u64()?),
                f => return Err(TaqError::Format(format!("budget flag {f}"))),
            };
            Some((bits, budget))
        }
        f => return Err(TaqError::Format(format!("plan flag {f}"))),
    };
    let mut model = init_model::<T>(&cfg)?;
    let expected: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let count = cur.u32()?;
    if count != expected.len() {
        return Err(TaqError::Format(format!(
            "{count} tensors, expected {}",
            expected.len()
        )));
    }
    for want in &expected {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| TaqError::Format("tensor name is not UTF-8".into()))?;
        if name != want {
            return Err(TaqError::Format(format!(
                "tensor {name} where {want} was expected"
            )));
        }
        let rows = cur.u32()?;
        let cols = cur.u32()?;
        let rec = read_record(&mut cur, rows, cols)?;
        assign(&mut model, name, rec, rows, cols)?;
    }
    if cur.pos != bytes.len() {
        return Err(TaqError::Format(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    let plan = match plan_bits {
        None => None,
        Some((bits, budget)) => {
            for (l, b) in bits.iter().enumerate() {
                let stored = match model.weight(l, WeightKind::Query) {
                    Weight::Dense(_) => LayerBits::Full,
                    Weight::Quantized(q) => LayerBits::Quantized(q.bits()),
                };
                if stored != *b {
                    return Err(TaqError::Format(format!(
                        "layer {l}: plan says {b}, tensors say {stored}"
                    )));
                }
            }
            let pinned = bits
                .iter()
                .enumerate()
                .filter(|(_, b)| **b == LayerBits::Full)
                .map(|(i, _)| i)
                .collect();
            Some(BitPlan::new(bits, pinned, budget, &cost_model(&cfg))?)
        }
    };
    Ok(Checkpoint { model, plan })
}

pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    model: &ToyModel<T>,
    plan: Option<&BitPlan>,
) -> Result<()> {
    let bytes = encode_checkpoint(model, plan)?;
    let mut w = BufWriter::new(File::create(path).map_err(super::at_path(path))?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(super::at_path(path))?)
        .read_to_end(&mut bytes)
        .map_err(super::at_path(path))?;
    decode_checkpoint(&bytes)
}
