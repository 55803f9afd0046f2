//! Versioned binary tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic    4 bytes  "FLXL"
//!   version  u32      currently 1
//!   hlen     u64      header byte length
//!   header   UTF-8 text block:
//!              precision f32|f64
//!              payload_sha256 <hex>
//!              tensor <name> <d0>x<d1>...   (one line per tensor, payload order)
//!   payload  raw scalar arrays in header order (f32 or f64 per precision)
//!
//! Tensors are stored sorted by name, so save(load(x)) is byte-identical.

use crate::error::{Error, Result};
use crate::numcore::Precision;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FLXL";
const VERSION: u32 = 1;

pub type NamedTensors = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn payload_bytes(tensors: &NamedTensors, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, (_, data)) in tensors.iter() {
        match precision {
            Precision::F32 => {
                for &v in data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Precision::F64 => {
                for &v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

/// Save named tensors; names must be unique (the map enforces it for the
/// caller that builds from a list — see `collect_named`).
pub fn save_checkpoint(tensors: &NamedTensors, precision: Precision, path: &Path) -> Result<()> {
    let payload = payload_bytes(tensors, precision);
    let hash = hex_string(&Sha256::digest(&payload));
    let mut header = String::new();
    header.push_str(&format!("precision {}\n", precision.name()));
    header.push_str(&format!("payload_sha256 {hash}\n"));
    for (name, (shape, _)) in tensors.iter() {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} {}\n", dims.join("x")));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header.len() as u64).to_le_bytes())?;
    file.write_all(header.as_bytes())?;
    file.write_all(&payload)?;
    Ok(())
}

/// Build the map from (name, shape, data) triples, rejecting duplicates.
pub fn collect_named<I>(triples: I) -> Result<NamedTensors>
where
    I: IntoIterator<Item = (String, Vec<usize>, Vec<f64>)>,
{
    let mut map = NamedTensors::new();
    for (name, shape, data) in triples {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        if map.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
    }
    Ok(map)
}

pub fn load_checkpoint(path: &Path) -> Result<(Precision, NamedTensors)> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Checkpoint(format!("{}: truncated file", path.display())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(Error::Checkpoint(format!("{}: truncated header", path.display())));
    }
    let header = std::str::from_utf8(&bytes[16..16 + hlen])
        .map_err(|_| Error::Checkpoint(format!("{}: header is not UTF-8", path.display())))?;
    let payload = &bytes[16 + hlen..];

    let mut precision = None;
    let mut expected_hash = None;
    let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
    for line in header.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("precision") => {
                let p = parts.next().ok_or_else(|| bad_header(path, line))?;
                precision = Some(Precision::parse(p).map_err(|_| bad_header(path, line))?);
            }
            Some("payload_sha256") => {
                expected_hash = Some(parts.next().ok_or_else(|| bad_header(path, line))?.to_string());
            }
            Some("tensor") => {
                let name = parts.next().ok_or_else(|| bad_header(path, line))?.to_string();
                let dims_str = parts.next().ok_or_else(|| bad_header(path, line))?;
                let shape: Vec<usize> = dims_str
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad_header(path, line)))
                    .collect::<Result<_>>()?;
                entries.push((name, shape));
            }
            Some(other) => {
                return Err(Error::Checkpoint(format!(
                    "{}: unknown header field '{other}'",
                    path.display()
                )))
            }
            None => {}
        }
    }
    let precision =
        precision.ok_or_else(|| Error::Checkpoint(format!("{}: missing precision", path.display())))?;
    let expected_hash = expected_hash
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing payload hash", path.display())))?;

    let actual_hash = hex_string(&Sha256::digest(payload));
    if actual_hash != expected_hash {
        return Err(Error::Checkpoint(format!(
            "{}: payload hash mismatch (stored {expected_hash}, computed {actual_hash})",
            path.display()
        )));
    }

    let elem = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let total: usize = entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != total * elem {
        return Err(Error::Checkpoint(format!(
            "{}: payload holds {} bytes, header describes {}",
            path.display(),
            payload.len(),
            total * elem
        )));
    }

    let mut map = NamedTensors::new();
    let mut offset = 0;
    for (name, shape) in entries {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = offset + i * elem;
            let v = match precision {
                Precision::F32 => {
                    f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()) as f64
                }
                Precision::F64 => f64::from_le_bytes(payload[at..at + 8].try_into().unwrap()),
            };
            data.push(v);
        }
        offset += numel * elem;
        if map.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
    }
    Ok((precision, map))
}

fn bad_header(path: &Path, line: &str) -> Error {
    Error::Checkpoint(format!("{}: malformed header line '{line}'", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::StreamRng;

    fn sample_tensors(precision: Precision) -> NamedTensors {
        let mut rng = StreamRng::new(5, "ckpt");
        let mut a = rng.normal_vec(12, 0.0, 1.0);
        let mut b = rng.normal_vec(5, 0.0, 1.0);
        precision.round_slice(&mut a);
        precision.round_slice(&mut b);
        collect_named([
            ("alpha".to_string(), vec![3, 4], a),
            ("beta".to_string(), vec![5], b),
        ])
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_in_both_precisions() {
        for precision in [Precision::F32, Precision::F64] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.ckpt");
            let tensors = sample_tensors(precision);
            save_checkpoint(&tensors, precision, &path).unwrap();
            let (p2, loaded) = load_checkpoint(&path).unwrap();
            assert_eq!(p2, precision);
            for (name, (shape, data)) in &tensors {
                let (ls, ld) = &loaded[name];
                assert_eq!(ls, shape);
                let bits: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
                let lbits: Vec<u64> = ld.iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits, lbits, "{name} differs in {precision:?}");
            }
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let tensors = sample_tensors(Precision::F32);
        save_checkpoint(&tensors, Precision::F32, &p1).unwrap();
        let (prec, loaded) = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, prec, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn flipped_payload_byte_is_caught_by_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&sample_tensors(Precision::F64), Precision::F64, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("hash mismatch"), "{err}");
    }

    #[test]
    fn partial_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&sample_tensors(Precision::F64), Precision::F64, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn wrong_magic_and_version_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&sample_tensors(Precision::F64), Precision::F64, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("magic"));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'F';
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn empty_tensor_set_is_a_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        save_checkpoint(&NamedTensors::new(), Precision::F32, &path).unwrap();
        let (_, loaded) = load_checkpoint(&path).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let err = collect_named([
            ("x".to_string(), vec![1], vec![1.0]),
            ("x".to_string(), vec![1], vec![2.0]),
        ]);
        assert!(err.is_err());
    }
}
