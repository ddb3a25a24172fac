//! Binary model checkpoints and resumable run state.
//!
//! Model file (little-endian):
//!
//! ```text
//! "MFNGCKPT"  u32 version
//! u32 n_layers, u32 size per layer
//! u32 n_blocks, per block: u32 name_len, name bytes, u32 rows, u32 cols
//! f64 offset per unit
//! u64 n_params, f64 per parameter
//! ```
//!
//! Run-state file: `"MFNGSTAT"`, u32 version, u64 epoch, u64 update,
//! f64 elapsed training seconds, u8 has_previous, then (if set) u64 length
//! and the previous direction as f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::inference::{ByteReader, ChainPool};
use crate::model::DbmModel;
use crate::optim::StepState;

const MODEL_MAGIC: &[u8; 8] = b"MFNGCKPT";
const STATE_MAGIC: &[u8; 8] = b"MFNGSTAT";
const VERSION: u32 = 1;

pub fn write_model<W: Write>(model: &DbmModel, mut w: W) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(model.num_layers() as u32).to_le_bytes())?;
    for &n in model.layer_sizes() {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    let layout = model.param_vector().layout();
    w.write_all(&(layout.blocks().len() as u32).to_le_bytes())?;
    for b in layout.blocks() {
        w.write_all(&(b.name.len() as u32).to_le_bytes())?;
        w.write_all(b.name.as_bytes())?;
        w.write_all(&(b.rows as u32).to_le_bytes())?;
        w.write_all(&(b.cols as u32).to_le_bytes())?;
    }
    for &c in model.offsets() {
        w.write_all(&c.to_le_bytes())?;
    }
    let params = model.param_vector().values();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for &p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model<R: Read>(r: R) -> Result<DbmModel> {
    let mut r = ByteReader::new(r);
    if &r.array::<8>()? != MODEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error(&format!("unsupported checkpoint version {version}")));
    }
    let n_layers = r.u32()? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(r.error(&format!("implausible layer count {n_layers}")));
    }
    let sizes = (0..n_layers)
        .map(|_| r.u32().map(|n| n as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut model = DbmModel::new(&sizes).map_err(|e| r.error(&e.to_string()))?;
    let expected: Vec<(String, usize, usize)> = model
        .param_vector()
        .layout()
        .blocks()
        .iter()
        .map(|b| (b.name.clone(), b.rows, b.cols))
        .collect();
    let n_blocks = r.u32()? as usize;
    if n_blocks != expected.len() {
        return Err(r.error(&format!(
            "expected {} parameter blocks, found {n_blocks}",
            expected.len()
        )));
    }
    for (name, rows, cols) in &expected {
        let len = r.u32()? as usize;
        if len > 256 {
            return Err(r.error("implausible block name length"));
        }
        let got = String::from_utf8(r.bytes(len)?).map_err(|_| r.error("block name is not UTF-8"))?;
        let (gr, gc) = (r.u32()? as usize, r.u32()? as usize);
        if &got != name || gr != *rows || gc != *cols {
            return Err(r.error(&format!(
                "block {got} ({gr}x{gc}) does not match expected {name} ({rows}x{cols})"
            )));
        }
    }
    let units: usize = sizes.iter().sum();
    let offsets = (0..units).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    model = DbmModel::with_offsets(&sizes, offsets).map_err(|e| r.error(&e.to_string()))?;
    let n_params = r.u64()? as usize;
    if n_params != model.param_vector().len() {
        return Err(r.error(&format!(
            "expected {} parameters, found {n_params}",
            model.param_vector().len()
        )));
    }
    let params = (0..n_params).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    model.set_params(&params)?;
    if !r.at_end() {
        return Err(r.error("trailing bytes after checkpoint"));
    }
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &DbmModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DbmModel> {
    read_model(BufReader::new(File::open(path)?))
}

/// Position of a run at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub step: StepState,
    /// Training time accumulated so far, excluding evaluation.
    pub elapsed_seconds: f64,
}

pub fn write_run_state<W: Write>(state: &RunState, mut w: W) -> Result<()> {
    w.write_all(STATE_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(state.step.epoch as u64).to_le_bytes())?;
    w.write_all(&state.step.update.to_le_bytes())?;
    w.write_all(&state.elapsed_seconds.to_le_bytes())?;
    match &state.step.previous {
        None => w.write_all(&[0])?,
        Some(p) => {
            w.write_all(&[1])?;
            w.write_all(&(p.len() as u64).to_le_bytes())?;
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_run_state<R: Read>(r: R) -> Result<RunState> {
    let mut r = ByteReader::new(r);
    if &r.array::<8>()? != STATE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad run-state magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error(&format!("unsupported run-state version {version}")));
    }
    let epoch = r.u64()? as usize;
    let update = r.u64()?;
    let elapsed_seconds = r.f64()?;
    let previous = match r.array::<1>()?[0] {
        0 => None,
        1 => {
            let n = r.u64()? as usize;
            Some((0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?)
        }
        b => return Err(r.error(&format!("bad previous-direction flag {b}"))),
    };
    if !r.at_end() {
        return Err(r.error("trailing bytes after run state"));
    }
    Ok(RunState {
        step: StepState {
            epoch,
            update,
            previous,
        },
        elapsed_seconds,
    })
}

/// Files making up the checkpoint written after `epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointPaths {
    pub model: PathBuf,
    pub pool: PathBuf,
    pub state: PathBuf,
}

impl CheckpointPaths {
    pub fn new(dir: impl AsRef<Path>, epoch: usize) -> Self {
        let stem = dir.as_ref().join(format!("epoch_{epoch:05}"));
        Self {
            model: stem.with_extension("model"),
            pool: stem.with_extension("pool"),
            state: stem.with_extension("state"),
        }
    }
}

/// Writes model, chain pool and run state for `state.step.epoch`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &DbmModel,
    pool: &ChainPool,
    state: &RunState,
) -> Result<CheckpointPaths> {
    std::fs::create_dir_all(&dir)?;
    let paths = CheckpointPaths::new(&dir, state.step.epoch);
    save_model(&paths.model, model)?;
    let mut w = BufWriter::new(File::create(&paths.pool)?);
    pool.write_snapshot(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(&paths.state)?);
    write_run_state(state, &mut w)?;
    w.flush()?;
    Ok(paths)
}

pub fn load_checkpoint(paths: &CheckpointPaths) -> Result<(DbmModel, ChainPool, RunState)> {
    let model = load_model(&paths.model)?;
    let pool = ChainPool::read_snapshot(BufReader::new(File::open(&paths.pool)?))?;
    let state = read_run_state(BufReader::new(File::open(&paths.state)?))?;
    Ok((model, pool, state))
}

/// Epoch of the newest complete checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: impl AsRef<Path>) -> Result<Option<usize>> {
    let dir = dir.as_ref();
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let Some(epoch) = name
            .to_str()
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.strip_suffix(".state"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        let p = CheckpointPaths::new(dir, epoch);
        if p.model.exists() && p.pool.exists() && best.is_none_or(|b| epoch > b) {
            best = Some(epoch);
        }
    }
    Ok(best)
}
