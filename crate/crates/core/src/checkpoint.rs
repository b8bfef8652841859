//! Per-snapshot checkpoints.
//!
//! `snapshot_<i>/manifest.json` describes what snapshot `i` learned: the
//! origin tables (snapshot 0, or every snapshot when training dense) or one
//! adapter group. Each matrix lives in its own little-endian file: `u64`
//! rows, `u64` cols, then the `f64` values row-major. Factors are stored as
//! factors; views are recomposed on load.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::matrix::Matrix;
use crate::store::{AdapterStore, LoraFactor, LoraGroup};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * m.len());
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if buf.len() < 16 {
        return Err(bad("truncated header".into()));
    }
    let word = |i: usize| u64::from_le_bytes(buf[i..i + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (word(0) as usize, word(8) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| bad(format!("{rows}x{cols} overflows")))?;
    if buf.len() != expected {
        return Err(bad(format!("{rows}x{cols} needs {expected} bytes, found {}", buf.len())));
    }
    let data = buf[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorEntry {
    pub a_file: String,
    pub b_file: String,
    pub a_shape: [usize; 2],
    pub b_shape: [usize; 2],
    pub rank: usize,
    pub row_offset: usize,
    pub trainable: bool,
    pub dense_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub entity_order: Vec<EntityId>,
    pub entity_factors: Vec<FactorEntry>,
    pub relation_factor: Option<FactorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginEntry {
    pub entities_file: String,
    pub relations_file: String,
    pub entities_shape: [usize; 2],
    pub relations_shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub snapshot: usize,
    pub dim: usize,
    pub seed: u64,
    pub origin: Option<OriginEntry>,
    pub group: Option<GroupEntry>,
    /// Checksum of the composed view after this snapshot.
    pub view_checksum: u64,
}

pub fn snapshot_checkpoint_dir(root: &Path, snapshot: usize) -> PathBuf {
    root.join(format!("snapshot_{snapshot}"))
}

fn shape(m: &Matrix) -> [usize; 2] {
    [m.rows(), m.cols()]
}

fn write_factor(dir: &Path, stem: &str, f: &LoraFactor) -> Result<FactorEntry> {
    let entry = FactorEntry {
        a_file: format!("{stem}_a.bin"),
        b_file: format!("{stem}_b.bin"),
        a_shape: shape(&f.a),
        b_shape: shape(&f.b),
        rank: f.rank,
        row_offset: f.row_offset,
        trainable: f.trainable,
        dense_fallback: f.dense_fallback,
    };
    write_matrix(&dir.join(&entry.a_file), &f.a)?;
    write_matrix(&dir.join(&entry.b_file), &f.b)?;
    Ok(entry)
}

fn read_checked(dir: &Path, file: &str, expect: [usize; 2]) -> Result<Matrix> {
    let m = read_matrix(&dir.join(file))?;
    if shape(&m) != expect {
        return Err(Error::Checkpoint(format!(
            "{file} is {:?}, manifest says {expect:?}",
            shape(&m)
        )));
    }
    Ok(m)
}

fn read_factor(dir: &Path, e: &FactorEntry) -> Result<LoraFactor> {
    let a = read_checked(dir, &e.a_file, e.a_shape)?;
    let b = read_checked(dir, &e.b_file, e.b_shape)?;
    let mut f = if e.dense_fallback {
        LoraFactor::dense(b, e.row_offset)
    } else {
        LoraFactor::low_rank(a, b, e.row_offset)?
    };
    if f.rank != e.rank {
        return Err(Error::Checkpoint(format!("factor {} has rank {}, manifest says {}", e.a_file, f.rank, e.rank)));
    }
    f.trainable = e.trainable;
    Ok(f)
}

/// Writes what snapshot `snapshot` contributed to `store` under `root`.
///
/// The origin tables are written when `snapshot` is 0 or when no group
/// belongs to `snapshot` (dense training); otherwise the group is written.
pub fn save_snapshot(root: &Path, store: &AdapterStore, snapshot: usize, seed: u64) -> Result<PathBuf> {
    let dir = snapshot_checkpoint_dir(root, snapshot);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let group = store.groups.iter().find(|g| g.snapshot_index == snapshot);
    let origin = if group.is_none() {
        let entry = OriginEntry {
            entities_file: "origin_entities.bin".into(),
            relations_file: "origin_relations.bin".into(),
            entities_shape: shape(&store.origin_entities),
            relations_shape: shape(&store.origin_relations),
        };
        write_matrix(&dir.join(&entry.entities_file), &store.origin_entities)?;
        write_matrix(&dir.join(&entry.relations_file), &store.origin_relations)?;
        Some(entry)
    } else {
        None
    };
    let group = group
        .map(|g| -> Result<GroupEntry> {
            Ok(GroupEntry {
                entity_order: g.entity_order.clone(),
                entity_factors: g
                    .entity_factors
                    .iter()
                    .enumerate()
                    .map(|(k, f)| write_factor(&dir, &format!("layer_{k}"), f))
                    .collect::<Result<_>>()?,
                relation_factor: g
                    .relation_factor
                    .as_ref()
                    .map(|f| write_factor(&dir, "relations", f))
                    .transpose()?,
            })
        })
        .transpose()?;
    let manifest = CheckpointManifest {
        snapshot,
        dim: store.dim,
        seed,
        origin,
        group,
        view_checksum: store.view()?.checksum(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

pub fn read_manifest(root: &Path, snapshot: usize) -> Result<CheckpointManifest> {
    let path = snapshot_checkpoint_dir(root, snapshot).join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuilds the store as it was after snapshot `up_to` and checks the
/// recomposed view against the recorded checksum.
pub fn load_store(root: &Path, up_to: usize) -> Result<AdapterStore> {
    let mut store: Option<AdapterStore> = None;
    let mut last_checksum = 0;
    for i in 0..=up_to {
        let m = read_manifest(root, i)?;
        if m.snapshot != i {
            return Err(Error::Checkpoint(format!("snapshot_{i} manifest names snapshot {}", m.snapshot)));
        }
        let dir = snapshot_checkpoint_dir(root, i);
        let s = store.get_or_insert_with(|| AdapterStore::new(m.dim));
        if s.dim != m.dim {
            return Err(Error::Checkpoint(format!("snapshot {i} has width {}, expected {}", m.dim, s.dim)));
        }
        if let Some(o) = &m.origin {
            if !s.groups.is_empty() {
                return Err(Error::Checkpoint(format!("snapshot {i} rewrites origin tables after adapters")));
            }
            s.origin_entities = read_checked(&dir, &o.entities_file, o.entities_shape)?;
            s.origin_relations = read_checked(&dir, &o.relations_file, o.relations_shape)?;
        }
        if let Some(g) = &m.group {
            s.groups.push(LoraGroup {
                snapshot_index: i,
                entity_order: g.entity_order.clone(),
                entity_factors: g.entity_factors.iter().map(|e| read_factor(&dir, e)).collect::<Result<_>>()?,
                relation_factor: g.relation_factor.as_ref().map(|e| read_factor(&dir, e)).transpose()?,
            });
        }
        last_checksum = m.view_checksum;
    }
    let store = store.expect("at least one snapshot read");
    let found = store.view()?.checksum();
    if found != last_checksum {
        return Err(Error::Checkpoint(format!(
            "recomposed view checksum {found:#x} differs from recorded {last_checksum:#x}"
        )));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_fn(3, 4, |i, j| (i as f64 - 1.3) * (j as f64 + 0.1).powi(3));
        let p = dir.path().join("m.bin");
        write_matrix(&p, &m).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), m);
        fs::write(&p, [0u8; 10]).unwrap();
        assert!(matches!(read_matrix(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn special_values_survive() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_vec(1, 4, vec![-0.0, f64::MIN_POSITIVE, 1e308, -1.0 / 3.0]).unwrap();
        let p = dir.path().join("m.bin");
        write_matrix(&p, &m).unwrap();
        let back = read_matrix(&p).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }
}
