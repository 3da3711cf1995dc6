//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `TINYLM\0\0` |
//! | 4     | format version (`u32`, currently 1) |
//! | 6 × 8 | `vocab_size`, `d_model`, `n_layers`, `n_heads`, `max_positions`, `ffn_mult` (`u64`) |
//! | 8     | number of parameter tensors (`u64`) |
//! | …     | per tensor: element count (`u64`) then that many `f64` bit patterns |
//!
//! Tensors appear in [`ModelConfig::param_shapes`] order. Values are stored
//! as raw IEEE-754 bits, so a save/load round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, TinyLM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TINYLM\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &TinyLM, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TinyLM> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

pub(crate) fn write_checkpoint(model: &TinyLM, w: &mut impl Write) -> Result<()> {
    let c = model.config();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.max_positions, c.ffn_mult] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&(model.params().len() as u64).to_le_bytes())?;
    for t in model.params() {
        w.write_all(&(t.len() as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_checkpoint(r: &mut impl Read) -> Result<TinyLM> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::data("not a model checkpoint (bad magic)"));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let ver = u32::from_le_bytes(ver);
    if ver != CHECKPOINT_VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {ver}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = usize::try_from(read_u64(r)?).map_err(|_| Error::data("dimension overflows usize"))?;
    }
    let cfg = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        max_positions: dims[4],
        ffn_mult: dims[5],
    };
    cfg.validate()?;
    let shapes = cfg.param_shapes();
    let count = read_u64(r)? as usize;
    if count != shapes.len() {
        return Err(Error::data(format!(
            "checkpoint holds {count} tensors, config implies {}",
            shapes.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in shapes {
        let n = read_u64(r)? as usize;
        let want: usize = shape.iter().product();
        if n != want {
            return Err(Error::data(format!("{name}: {n} values stored, {want} expected")));
        }
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    TinyLM::from_params(cfg, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 6,
            n_layers: 2,
            n_heads: 2,
            max_positions: 5,
            ffn_mult: 3,
        };
        let m = TinyLM::init(cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), m.config());
        let bits = |m: &TinyLM| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn rejects_garbage() {
        let mut bytes: &[u8] = b"NOTAMODEL...";
        assert!(read_checkpoint(&mut bytes).is_err());
        let m = TinyLM::init(ModelConfig { n_layers: 1, ..ModelConfig::default() }, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
