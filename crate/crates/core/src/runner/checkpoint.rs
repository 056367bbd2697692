//! "TDMCL1" checkpoint: a JSON manifest with the graph skeleton, choice
//! matrices, config and progress, followed by every weight tensor and
//! bit-packed mask, then a CRC32.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::container::{read_file, Reader, Writer};
use crate::evolution::ChoiceMatrix;
use crate::snn::LayerParams;
use crate::topology::ColumnGraph;
use crate::{Result, Scalar};

pub const CHECKPOINT_MAGIC: &[u8] = b"TDMCL1";
pub const CHECKPOINT_FILE: &str = "checkpoint.tdmcl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<S> {
    pub config: RunConfig,
    /// Index of the next protocol phase to run.
    pub progress: usize,
    /// Ledger records belonging to the state.
    pub ledger_len: usize,
    /// `matrices[t-1]` holds task t's finalized choice matrix, if any.
    pub matrices: Vec<Option<ChoiceMatrix>>,
    pub graph: ColumnGraph<S>,
}

fn layers_mut<S>(g: &mut ColumnGraph<S>) -> Vec<&mut LayerParams<S>> {
    let mut out = Vec::new();
    for c in &mut g.columns {
        for b in &mut c.blocks {
            out.push(&mut b.conv1);
            out.push(&mut b.conv2);
            out.push(&mut b.shortcut);
        }
        out.push(&mut c.head);
    }
    for e in &mut g.edges {
        out.push(&mut e.adapter);
    }
    out
}

fn write_values<S: Scalar>(w: &mut Writer, v: &[S]) {
    if std::mem::size_of::<S>() == 4 {
        w.f32s(&v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>());
    } else {
        w.f64s(&v.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
    }
}

fn read_values<S: Scalar>(r: &mut Reader<'_>, n: usize) -> Result<Vec<S>> {
    Ok(if std::mem::size_of::<S>() == 4 {
        r.f32s(n)?.into_iter().map(|x| S::of(x as f64)).collect()
    } else {
        r.f64s(n)?.into_iter().map(S::of).collect()
    })
}

impl<S: Scalar + Serialize + DeserializeOwned> Checkpoint<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut skeleton = self.clone();
        let mut tensors = Writer::default();
        for l in layers_mut(&mut skeleton.graph) {
            tensors.u64(l.weights.len() as u64);
            write_values(&mut tensors, &l.weights);
            tensors.bits(&l.mask);
            tensors.u64(l.bias.len() as u64);
            write_values(&mut tensors, &l.bias);
            l.weights.clear();
            l.mask.clear();
            l.bias.clear();
        }
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.u8(std::mem::size_of::<S>() as u8);
        w.bytes(&serde_json::to_vec(&skeleton).expect("manifest serializes"));
        let mut out = w.finish();
        // splice tensors before the checksum
        out.truncate(out.len() - 4);
        out.extend_from_slice(&tensors.finish()[..]);
        let body = out.len() - 4;
        let crc = crc32fast::hash(&out[..body]);
        out[body..].copy_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| crate::Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| crate::Error::io(path, e))
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(path, bytes, CHECKPOINT_MAGIC)?;
        let width = r.u8()? as usize;
        if width != std::mem::size_of::<S>() {
            return Err(r.corrupt(format!("checkpoint stores {}-byte scalars", width)));
        }
        let manifest = r.bytes()?;
        let mut ck: Checkpoint<S> = serde_json::from_slice(manifest).map_err(|e| r.corrupt(format!("bad manifest: {e}")))?;
        for l in layers_mut(&mut ck.graph) {
            let n = r.len()?;
            if n != l.geom.weight_len() {
                return Err(r.corrupt("weight count does not match layer geometry"));
            }
            l.weights = read_values(&mut r, n)?;
            l.mask = r.bits(n)?;
            let nb = r.len()?;
            if nb != 0 && nb != l.geom.out_c {
                return Err(r.corrupt("bias length does not match layer geometry"));
            }
            l.bias = read_values(&mut r, nb)?;
        }
        r.finish()?;
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(crate::Error::Missing(format!("no checkpoint at {}", path.display())));
        }
        let bytes = read_file(path)?;
        Self::from_bytes(path, &bytes)
    }
}
