//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `MIAACKPT`, a little-endian `u64` header length,
//! the JSON header, then every tensor's values as little-endian `f64` in
//! header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MIAACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    /// Model configuration needed to rebuild the network.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes named parameter stores; names are prefixed `<group>/<param>`.
pub fn write_checkpoint<W: Write>(
    mut out: W,
    kind: &str,
    meta: serde_json::Value,
    groups: &[(&str, &ParameterStore)],
) -> Result<()> {
    let mut tensors = Vec::new();
    for (group, store) in groups {
        for (name, value) in store.iter() {
            tensors.push(TensorEntry {
                name: format!("{group}/{name}"),
                shape: value.shape().to_vec(),
            });
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        meta,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, store) in groups {
        for (_, value) in store.iter() {
            for v in value.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads a checkpoint back into one store per group, in header order.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(CheckpointHeader, Vec<(String, ParameterStore)>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {CHECKPOINT_VERSION})",
            header.format_version
        )));
    }
    let mut groups: Vec<(String, ParameterStore)> = Vec::new();
    for entry in &header.tensors {
        let (group, name) = entry
            .name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` has no group", entry.name)))?;
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        match groups.iter_mut().find(|(g, _)| g == group) {
            Some((_, store)) => store.insert(name, tensor)?,
            None => {
                let mut store = ParameterStore::new();
                store.insert(name, tensor)?;
                groups.push((group.to_string(), store));
            }
        }
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((header, groups))
}

pub(crate) fn take_group(groups: &mut Vec<(String, ParameterStore)>, name: &str) -> Result<ParameterStore> {
    let pos = groups
        .iter()
        .position(|(g, _)| g == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter group `{name}`")))?;
    Ok(groups.remove(pos).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(-1e300f64..1e300, 1..40), extra in -1.0f64..1.0) {
            let mut store = ParameterStore::new();
            store.insert("w", Tensor::vector(values.clone()).unwrap()).unwrap();
            store.insert("b", Tensor::scalar(extra).unwrap()).unwrap();
            let mut other = ParameterStore::new();
            other.insert("z", Tensor::matrix(1, 2, vec![f64::MIN_POSITIVE, -0.0]).unwrap()).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, "test", serde_json::json!({"k": 1}), &[("a", &store), ("c", &other)]).unwrap();
            let (header, mut groups) = read_checkpoint(buf.as_slice()).unwrap();
            prop_assert_eq!(header.kind, "test");
            let a = take_group(&mut groups, "a").unwrap();
            let c = take_group(&mut groups, "c").unwrap();
            for (x, y) in a.flatten().iter().zip(store.flatten()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(c.flatten()[1].to_bits(), (-0.0f64).to_bits());
        }
    }

    #[test]
    fn rejects_wrong_version_and_magic() {
        let store = ParameterStore::new();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "x", serde_json::Value::Null, &[("g", &store)]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let text = String::from_utf8_lossy(&buf[16..]).replace("\"format_version\":1", "\"format_version\":9");
        let mut v2 = buf[..16].to_vec();
        v2.extend_from_slice(text.as_bytes());
        assert!(matches!(read_checkpoint(v2.as_slice()), Err(Error::Checkpoint(_))));
    }
}
