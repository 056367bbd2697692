//! "TDMD1" dataset container and suite directory layout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Split, TaskSpec, Targets, NUM_TASKS, SIDE};
use crate::container::{read_file, Reader, Writer};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8] = b"TDMD1";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: TaskSpec,
    seed: u64,
}

fn write_split(w: &mut Writer, s: &Split, in_c: usize) {
    let n = s.images.len() / s.image_len.max(1);
    w.u64(n as u64);
    w.u32(in_c as u32);
    w.u32((s.image_len / in_c.max(1) / SIDE) as u32);
    w.u32(SIDE as u32);
    w.u32(s.state_dim as u32);
    w.f32s(&s.images);
    w.f32s(&s.states);
    match &s.targets {
        Targets::Classes(c) => {
            w.u8(0);
            w.u32(1);
            w.u32s(c);
        }
        Targets::Values { dim, data } => {
            w.u8(1);
            w.u32(*dim as u32);
            w.f32s(data);
        }
    }
}

fn read_split(r: &mut Reader<'_>) -> Result<Split> {
    let n = r.len()?;
    let (c, h, w, sd) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let image_len = c * h * w;
    let images = r.f32s(n * image_len)?;
    let states = r.f32s(n * sd)?;
    let kind = r.u8()?;
    let dim = r.u32()? as usize;
    let targets = match kind {
        0 => Targets::Classes(r.u32s(n)?),
        1 => Targets::Values { dim, data: r.f32s(n * dim)? },
        k => return Err(r.corrupt(format!("unknown target kind {k}"))),
    };
    Ok(Split {
        image_len,
        state_dim: sd,
        images,
        states,
        targets,
    })
}

pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let mut w = Writer::new(DATASET_MAGIC);
    let header = serde_json::to_vec(&Header { spec: d.spec.clone(), seed: d.seed }).expect("spec serializes");
    w.bytes(&header);
    for s in [&d.train, &d.val, &d.test] {
        write_split(&mut w, s, d.spec.in_c);
    }
    w.write_to(path)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let mut r = Reader::open(path, &bytes, DATASET_MAGIC)?;
    let raw = r.bytes()?;
    let header: Header = serde_json::from_slice(raw).map_err(|e| r.corrupt(format!("bad header: {e}")))?;
    let train = read_split(&mut r)?;
    let val = read_split(&mut r)?;
    let test = read_split(&mut r)?;
    r.finish()?;
    Ok(Dataset {
        spec: header.spec,
        seed: header.seed,
        train,
        val,
        test,
    })
}

pub fn dataset_path(dir: &Path, task: usize) -> PathBuf {
    dir.join(format!("task{task}.tdmd"))
}

/// CSV: task_id, family, input shape, output shape, metric, baseline
/// (constant-predictor metric on the test split).
pub fn write_manifest(path: &Path, suite: &[Dataset]) -> Result<()> {
    let mut out = String::from("task_id,family,style,input_shape,output_shape,metric,baseline\n");
    for d in suite {
        let s = &d.spec;
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6}",
            s.task_id,
            s.family.name(),
            s.style.name(),
            s.input_shape(),
            s.output_shape(),
            s.metric.name(),
            d.chance_level()
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_suite(dir: &Path, suite: &[Dataset]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for d in suite {
        write_dataset(&dataset_path(dir, d.spec.task_id), d)?;
    }
    write_manifest(&dir.join("manifest.csv"), suite)
}

pub fn read_suite(dir: &Path) -> Result<Vec<Dataset>> {
    (1..=NUM_TASKS)
        .map(|t| {
            let p = dataset_path(dir, t);
            if !p.exists() {
                return Err(Error::Missing(format!("suite file {} not found", p.display())));
            }
            read_dataset(&p)
        })
        .collect()
}
