//! Single-file weight container.
//!
//! Layout: the 8-byte magic `HYSPWTS\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the header as canonical
//! JSON (`schema_version`, `config`, and a tensor index of name, shape and
//! element offset), then every tensor's data as little-endian `f64` in
//! index order.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HYSPWTS\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config: ModelConfig,
    tensors: Vec<Entry>,
}

pub fn write_weights(w: &mut impl Write, cfg: &ModelConfig, params: &Params) -> Result<()> {
    let mut offset = 0;
    let tensors = params
        .iter()
        .map(|(name, t)| {
            let e = Entry { name: name.to_string(), shape: t.shape().to_vec(), offset };
            offset += t.numel();
            e
        })
        .collect();
    let header = Header { schema_version: FORMAT_VERSION, config: cfg.clone(), tensors };
    // Through Value so object keys come out sorted.
    let json = serde_json::to_vec(&serde_json::to_value(&header)?)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_weights(r: &mut impl Read) -> Result<(ModelConfig, Params)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::Format("header too large".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    header.config.validate()?;
    let stack = header.config.stack()?;

    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() % 8 != 0 {
        return Err(Error::Format("trailing partial value".into()));
    }
    let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut tensors = BTreeMap::new();
    let mut expected = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || e.offset + n > values.len() {
            return Err(Error::Format(format!("tensor {} at offset {} is out of place", e.name, e.offset)));
        }
        expected += n;
        tensors.insert(e.name, Tensor::new(&e.shape, values[e.offset..e.offset + n].to_vec())?);
    }
    if expected != values.len() {
        return Err(Error::Format(format!("{} values stored, index covers {expected}", values.len())));
    }
    let params = Params::from_map(tensors);
    params.check_against(&header.config, &stack)?;
    Ok((header.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_shape_validation() {
        let cfg = ModelConfig::tiny();
        let params = Params::init(&cfg, &cfg.stack().unwrap(), 3).unwrap();
        let mut buf = Vec::new();
        write_weights(&mut buf, &cfg, &params).unwrap();
        let (cfg2, params2) = read_weights(&mut buf.as_slice()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params, params2);

        let mut other = cfg.clone();
        other.hidden = 16;
        let mut bad = Vec::new();
        write_weights(&mut bad, &other, &params).unwrap();
        assert!(read_weights(&mut bad.as_slice()).is_err());
        assert!(read_weights(&mut &buf[1..]).is_err());
    }
}
