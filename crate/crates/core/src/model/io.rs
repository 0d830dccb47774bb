//! `.ltm` model files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "LTM1" | u32 version
//! u32 input_dim | u32 dense_width | u32 n_blstm | u32 × n_blstm widths
//! u32 × 4 head dims (mcep, lf0, bap, uv)
//! (n_blstm + 1) × { u8 slot kind: 0 empty, 1 full, 2 lrpd | u32 rank }
//! u8 has_norm | [norm stats]
//! u32 n_blocks | n_blocks × { u16 name_len | name | u32 len | f64 × len }
//! ```
//!
//! Norm stats are `input` then each stream in order, each as
//! `u32 dim | f64 × dim means | f64 × dim stds`, followed by
//! `u32 n_floored | n_floored × { u16 len | utf-8 }`.

use std::fs;
use std::path::Path;

use crate::adapters::{init_adapter, AdapterKind};
use crate::corpus::{FeatureStats, NormStats};
use crate::error::{Error, Result};
use crate::streams::{HeadDims, Stream};

use super::{build_model, ModelConfig, MultiTaskModel};

pub const MODEL_MAGIC: &[u8; 4] = b"LTM1";
const VERSION: u32 = 1;

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u16(u16::try_from(s.len()).expect("short name"));
        self.buf.extend_from_slice(s.as_bytes());
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "unexpected end of data: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect(&mut self, magic: &[u8]) -> Result<()> {
        let at = self.pos;
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(Error::Parse {
                offset: at,
                detail: format!("bad magic {got:?}"),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| self.err("length overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            detail: "name is not utf-8".into(),
        })
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn write_stats(w: &mut Writer, stats: &NormStats) {
    let mut one = |f: &FeatureStats| {
        w.u32(f.mean.len());
        w.f64s(&f.mean);
        w.f64s(&f.std);
    };
    one(&stats.input);
    for s in Stream::ALL {
        one(&stats.streams[s.index()]);
    }
    w.u32(stats.floored.len());
    for f in &stats.floored {
        w.str(f);
    }
}

pub(crate) fn read_stats(r: &mut Reader<'_>) -> Result<NormStats> {
    let one = |r: &mut Reader<'_>| -> Result<FeatureStats> {
        let n = r.u32()?;
        let mean = r.f64s(n)?;
        let std = r.f64s(n)?;
        Ok(FeatureStats { mean, std })
    };
    let input = one(r)?;
    let streams = [one(r)?, one(r)?, one(r)?, one(r)?];
    let n = r.u32()?;
    let floored = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    Ok(NormStats {
        input,
        streams,
        floored,
    })
}

pub fn write_model(m: &MultiTaskModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MODEL_MAGIC);
    w.u32(VERSION as usize);
    let cfg = m.config();
    w.u32(cfg.input_dim);
    w.u32(cfg.dense_width);
    w.u32(cfg.n_blstm());
    for &b in &cfg.blstm_widths {
        w.u32(b);
    }
    for s in Stream::ALL {
        w.u32(cfg.head_dims.get(s));
    }
    for slot in m.slots() {
        match slot.as_ref().map(|a| a.kind()) {
            None => {
                w.u8(0);
                w.u32(0);
            }
            Some(AdapterKind::Full) => {
                w.u8(1);
                w.u32(0);
            }
            Some(AdapterKind::Lrpd { rank }) => {
                w.u8(2);
                w.u32(rank);
            }
        }
    }
    match &m.norm {
        Some(stats) => {
            w.u8(1);
            write_stats(&mut w, stats);
        }
        None => w.u8(0),
    }
    let entries = m.block_entries();
    w.u32(entries.len());
    for e in entries {
        w.str(&e.name);
        w.u32(e.values.len());
        w.f64s(e.values);
    }
    w.buf
}

pub fn read_model(bytes: &[u8]) -> Result<MultiTaskModel> {
    let mut r = Reader::new(bytes);
    r.expect(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let input_dim = r.u32()?;
    let dense_width = r.u32()?;
    let n_blstm = r.u32()?;
    if n_blstm > 1024 {
        return Err(r.err(format!("implausible blstm count {n_blstm}")));
    }
    let blstm_widths = (0..n_blstm).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let head_dims = HeadDims {
        mcep: r.u32()?,
        lf0: r.u32()?,
        bap: r.u32()?,
        uv: r.u32()?,
    };
    let cfg = ModelConfig {
        input_dim,
        dense_width,
        blstm_widths,
        head_dims,
    };
    let at = r.pos;
    let mut model = build_model(&cfg, 0).map_err(|e| Error::Parse {
        offset: at,
        detail: format!("invalid stored config: {e}"),
    })?;

    for slot in 0..cfg.n_slots() {
        let at = r.pos;
        let code = r.u8()?;
        let rank = r.u32()?;
        let kind = match code {
            0 => continue,
            1 => AdapterKind::Full,
            2 => AdapterKind::Lrpd { rank },
            other => {
                return Err(Error::Parse {
                    offset: at,
                    detail: format!("unknown slot kind {other}"),
                })
            }
        };
        let adapter = init_adapter(kind, cfg.slot_width(slot), 0).map_err(|e| Error::Parse {
            offset: at,
            detail: e.to_string(),
        })?;
        model.set_slot(slot, adapter).map_err(|e| Error::Parse {
            offset: at,
            detail: e.to_string(),
        })?;
    }

    model.norm = match r.u8()? {
        0 => None,
        1 => Some(read_stats(&mut r)?),
        other => return Err(r.err(format!("bad norm flag {other}"))),
    };

    let n_blocks = r.u32()?;
    let mut entries = model.block_entries_mut();
    if n_blocks != entries.len() {
        return Err(r.err(format!(
            "expected {} parameter blocks, file has {n_blocks}",
            entries.len()
        )));
    }
    for e in entries.iter_mut() {
        let at = r.pos;
        let name = r.str()?;
        if name != e.name {
            return Err(Error::Parse {
                offset: at,
                detail: format!("expected block {}, found {name}", e.name),
            });
        }
        let len = r.u32()?;
        if len != e.values.len() {
            return Err(r.err(format!(
                "block {name} has {len} values, expected {}",
                e.values.len()
            )));
        }
        let vals = r.f64s(len)?;
        e.values.copy_from_slice(&vals);
    }
    drop(entries);
    r.finish()?;
    Ok(model)
}

pub fn save_model(m: &MultiTaskModel, path: &Path) -> Result<()> {
    fs::write(path, write_model(m)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<MultiTaskModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::InsertionPolicy;
    use crate::nn::Matrix;

    fn sample() -> MultiTaskModel {
        build_model(&ModelConfig::desk(), 7)
            .unwrap()
            .insert_adapters(
                &InsertionPolicy::default(),
                AdapterKind::Lrpd { rank: 10 },
                3,
            )
            .unwrap()
    }

    #[test]
    fn bytes_are_idempotent() {
        let m = sample();
        let a = write_model(&m);
        let back = read_model(&a).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_model(&back), a);
    }

    #[test]
    fn round_tripped_forward_is_bitwise_identical() {
        let m = sample();
        let back = read_model(&write_model(&m)).unwrap();
        let x = Matrix::uniform(6, 24, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = write_model(&sample());
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            match read_model(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn corrupt_magic_and_trailing_bytes() {
        let mut bytes = write_model(&sample());
        bytes.push(0);
        assert!(matches!(read_model(&bytes), Err(Error::Parse { .. })));
        bytes[0] = b'X';
        assert!(matches!(
            read_model(&bytes),
            Err(Error::Parse { offset: 0, .. })
        ));
    }
}
