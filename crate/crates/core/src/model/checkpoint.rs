//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "TOYVLM\0\x01"
//! header     u32 LE length, then the ModelConfig as JSON
//! count      u32 LE number of tensors
//! tensor     u16 LE name length, UTF-8 name, u32 LE rows, u32 LE cols,
//!            rows*cols f64 LE values (row-major)
//! ```
//!
//! Vectors are stored as `1 × n` tensors. Values are written bit-for-bit,
//! so a save/load round trip is exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Block, ModelConfig, ToyVLM};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &[u8; 8] = b"TOYVLM\0\x01";

fn named_tensors(model: &ToyVLM) -> Vec<(String, Matrix)> {
    let row = |v: &[f64]| Matrix::from_vec(1, v.len(), v.to_vec()).expect("finite parameters");
    let mut out = vec![
        ("projector".to_string(), model.projector.clone()),
        ("embed".to_string(), model.embed.clone()),
        ("pos".to_string(), model.pos.clone()),
    ];
    for (b, block) in model.blocks.iter().enumerate() {
        let p = |name: &str| format!("blocks.{b}.{name}");
        out.push((p("ln1_gain"), row(&block.ln1_gain)));
        out.push((p("ln1_bias"), row(&block.ln1_bias)));
        out.push((p("wq"), block.wq.clone()));
        out.push((p("wk"), block.wk.clone()));
        out.push((p("wv"), block.wv.clone()));
        out.push((p("wo"), block.wo.clone()));
        out.push((p("ln2_gain"), row(&block.ln2_gain)));
        out.push((p("ln2_bias"), row(&block.ln2_bias)));
        out.push((p("w_up"), block.w_up.clone()));
        out.push((p("w_down"), block.w_down.clone()));
    }
    out.push(("lnf_gain".to_string(), row(&model.lnf_gain)));
    out.push(("lnf_bias".to_string(), row(&model.lnf_bias)));
    out.push(("head".to_string(), model.head.clone()));
    out
}

pub fn write_checkpoint(model: &ToyVLM, mut w: impl Write) -> Result<()> {
    let header = serde_json::to_vec(&model.config)?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let tensors = named_tensors(model);
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in &tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ToyVLM> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let config: ModelConfig = serde_json::from_slice(&header)?;
    config.validate()?;
    let count = read_u32(&mut r)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let mut nl = [0u8; 2];
        r.read_exact(&mut nl)?;
        let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let m = Matrix::from_vec(rows, cols, data).map_err(|e| bad(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), m).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }

    let mut take = |name: String, rows: usize, cols: usize| -> Result<Matrix> {
        let m = tensors.remove(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if m.shape() != (rows, cols) {
            return Err(bad(format!("{name} has shape {:?}, expected {:?}", m.shape(), (rows, cols))));
        }
        Ok(m)
    };
    let d = config.d_model;
    let ff = config.d_ff;
    let projector = take("projector".into(), d, config.d_vision)?;
    let embed = take("embed".into(), config.vocab_size, d)?;
    let pos = take("pos".into(), config.seq_len, d)?;
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for b in 0..config.n_blocks {
        let p = |name: &str| format!("blocks.{b}.{name}");
        blocks.push(Block {
            ln1_gain: take(p("ln1_gain"), 1, d)?.into_vec(),
            ln1_bias: take(p("ln1_bias"), 1, d)?.into_vec(),
            wq: take(p("wq"), d, d)?,
            wk: take(p("wk"), d, d)?,
            wv: take(p("wv"), d, d)?,
            wo: take(p("wo"), d, d)?,
            ln2_gain: take(p("ln2_gain"), 1, d)?.into_vec(),
            ln2_bias: take(p("ln2_bias"), 1, d)?.into_vec(),
            w_up: take(p("w_up"), ff, d)?,
            w_down: take(p("w_down"), d, ff)?,
        });
    }
    let lnf_gain = take("lnf_gain".into(), 1, d)?.into_vec();
    let lnf_bias = take("lnf_bias".into(), 1, d)?.into_vec();
    let head = take("head".into(), config.vocab_size, d)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(ToyVLM {
        config,
        projector,
        embed,
        pos,
        blocks,
        lnf_gain,
        lnf_bias,
        head,
    })
}

pub fn save_checkpoint(model: &ToyVLM, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyVLM> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig { n_blocks: 2, ..ModelConfig::default() };
        let mut m = init_model(cfg, 17).unwrap();
        m.blocks[1].wq.set(0, 0, 0.0);
        m.lnf_bias[3] = -1.0e-300;
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_corruption() {
        let m = init_model(ModelConfig { n_blocks: 1, ..ModelConfig::default() }, 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(bad_magic.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
