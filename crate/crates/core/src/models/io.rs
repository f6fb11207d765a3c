//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "TRJPARM1"
//! hlen      u32      length of the JSON header
//! header    hlen     {"config", "layout", "calibration"}
//! count     u32      number of tensors
//! per tensor:
//!   nlen u32, name (UTF-8), ndim u32, dims u64 * ndim, values f64 * numel
//! ```
//!
//! Loading rebuilds the architecture from the header and requires every
//! stored tensor to match it by name and shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Calibration, Model, ModelConfig, OutputLayout};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TRJPARM1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    layout: OutputLayout,
    calibration: Calibration,
}

pub fn write_model<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: model.config,
        layout: model.layout.clone(),
        calibration: model.calibration.clone(),
    })?;
    let io = |e| Error::Format(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(model, BufWriter::new(f))
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated parameter file".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

/// Upper bound on any length field, so a corrupt file cannot request an
/// absurd allocation.
const MAX_LEN: u64 = 1 << 28;

pub fn read_model<R: Read>(r: R) -> Result<Model> {
    let mut c = Cursor { r };
    if c.bytes(8)? != MAGIC {
        return Err(Error::Format("not a parameter file (bad magic)".into()));
    }
    let hlen = c.u32()? as u64;
    if hlen > MAX_LEN {
        return Err(Error::Format("header length out of range".into()));
    }
    let header: Header = serde_json::from_slice(&c.bytes(hlen as usize)?)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let mut model = Model::new(header.config, header.layout)
        .map_err(|e| Error::Format(format!("header describes an invalid model: {e}")))?;
    if header.calibration.noise_scale.len() != model.layout.n_numeric {
        return Err(Error::Format("calibration does not match the output layout".into()));
    }
    model.calibration = header.calibration;

    let count = c.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Format(format!(
            "file holds {count} tensors, architecture needs {}",
            model.params.len()
        )));
    }
    for i in 0..count {
        let nlen = c.u32()? as u64;
        if nlen > MAX_LEN {
            return Err(Error::Format("name length out of range".into()));
        }
        let name = String::from_utf8(c.bytes(nlen as usize)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != model.params.names[i] {
            return Err(Error::Format(format!(
                "tensor {i} is `{name}`, expected `{}`",
                model.params.names[i]
            )));
        }
        let ndim = c.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("`{name}` has {ndim} dimensions")));
        }
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let expected = model.params.tensors[i].shape().to_vec();
        if shape != expected {
            return Err(Error::Format(format!("`{name}` has shape {shape:?}, expected {expected:?}")));
        }
        let numel = model.params.tensors[i].numel();
        let raw = c.bytes(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("`{name}` holds non-finite values")));
        }
        model.params.tensors[i] = Tensor::new(shape, data)?;
    }
    let mut trailing = [0u8; 1];
    if c.r.read(&mut trailing).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::make_schema;
    use crate::models::ModelKind;

    fn model(kind: ModelKind) -> Model {
        let layout = OutputLayout::from_schema(&make_schema("art_hiv").unwrap());
        let mut m = Model::new(ModelConfig::for_kind(kind, 19, 60, 7), layout).unwrap();
        m.calibration.dt_scale = 10;
        m.calibration.noise_scale = vec![0.25, 0.5];
        m
    }

    #[test]
    fn round_trip_is_exact() {
        for kind in [ModelKind::LstmSeq2seq, ModelKind::EthosLite] {
            let m = model(kind);
            let mut buf = Vec::new();
            write_model(&m, &mut buf).unwrap();
            let back = read_model(buf.as_slice()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.params.checksum(), m.params.checksum());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = model(ModelKind::LstmSeq2seq);
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_model(bad_magic.as_slice()), Err(Error::Format(_))));

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(read_model(truncated), Err(Error::Format(_))));

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(read_model(trailing.as_slice()), Err(Error::Format(_))));

        let mut nan = buf.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(read_model(nan.as_slice()), Err(Error::Format(_))));
    }
}
