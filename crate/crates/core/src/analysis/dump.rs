use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{pooled_embedding, ModelDims};
use crate::params::ParamStore;
use crate::synthenv::Dataset;
use crate::tensor::Tensor;

/// Pooled adapter embeddings paired with normalized proprio states.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub x: Tensor,
    pub q: Tensor,
    pub checkpoint: String,
    /// Dataset indices of the sampled trajectories.
    pub trajectories: Vec<usize>,
    pub window: usize,
}

/// Picks the first `per_task` trajectories of every task id, in dataset order.
pub fn select_trajectories(ds: &Dataset, per_task: usize) -> Vec<usize> {
    let mut counts = std::collections::BTreeMap::new();
    let mut out = Vec::new();
    for (i, t) in ds.trajectories.iter().enumerate() {
        let c = counts.entry(t.task_id).or_insert(0usize);
        if *c < per_task {
            *c += 1;
            out.push(i);
        }
    }
    out
}

/// Encodes steps `0, window, 2·window, …` of the selected trajectories
/// without augmentation.
pub fn dump_embeddings(
    params: &ParamStore,
    dims: &ModelDims,
    ds: &Dataset,
    per_task: usize,
    window: usize,
    checkpoint: &str,
) -> Result<EmbeddingDump> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be positive".into()));
    }
    if ds.stats.views != dims.encoder.views || ds.stats.view_dim != dims.encoder.view_dim {
        return Err(Error::InvalidArgument(format!(
            "dataset has {}×{} views, checkpoint expects {}×{}",
            ds.stats.views, ds.stats.view_dim, dims.encoder.views, dims.encoder.view_dim
        )));
    }
    let trajectories = select_trajectories(ds, per_task);
    let v = dims.encoder.views;
    let mut view_rows: Vec<Vec<f64>> = vec![Vec::new(); v];
    let mut instructions = Vec::new();
    let mut q = Vec::new();
    for &i in &trajectories {
        let t = &ds.trajectories[i];
        for s in (0..t.len()).step_by(window) {
            for (vi, rows) in view_rows.iter_mut().enumerate() {
                rows.extend_from_slice(&t.views[s][vi]);
            }
            instructions.push(t.task_id);
            q.extend_from_slice(&ds.stats.normalize(&t.proprio[s]));
        }
    }
    let n = instructions.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no samples selected".into()));
    }
    let views = view_rows
        .into_iter()
        .map(|r| Tensor::new(vec![n, dims.encoder.view_dim], r))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let input = crate::encoder::EncoderInput { views, instructions };
    let x = pooled_embedding(params, dims, &input)?;
    Ok(EmbeddingDump {
        x,
        q: Tensor::new(vec![n, 3], q)?,
        checkpoint: checkpoint.to_string(),
        trajectories,
        window,
    })
}

#[derive(Serialize, Deserialize)]
struct EncodedArray {
    shape: Vec<usize>,
    /// Base64 of the little-endian f64 bytes.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct DumpFile {
    checkpoint: String,
    trajectories: Vec<usize>,
    window: usize,
    x: EncodedArray,
    q: EncodedArray,
}

fn encode(t: &Tensor) -> EncodedArray {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    EncodedArray {
        shape: t.shape().to_vec(),
        data: B64.encode(bytes),
    }
}

fn decode(a: &EncodedArray) -> Result<Tensor> {
    let bytes = B64.decode(&a.data).map_err(|e| Error::format("embedding dump", e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format("embedding dump", "array byte length is not a multiple of 8"));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::new(a.shape.clone(), data)?)
}

impl EmbeddingDump {
    pub fn write(&self, path: &Path) -> Result<()> {
        let f = DumpFile {
            checkpoint: self.checkpoint.clone(),
            trajectories: self.trajectories.clone(),
            window: self.window,
            x: encode(&self.x),
            q: encode(&self.q),
        };
        let s = serde_json::to_string_pretty(&f).map_err(|e| Error::format("embedding dump", e))?;
        fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: DumpFile = serde_json::from_str(&raw).map_err(|e| Error::format("embedding dump", e))?;
        let x = decode(&f.x)?;
        let q = decode(&f.q)?;
        if x.rows() != q.rows() {
            return Err(Error::format("embedding dump", "x and q row counts differ"));
        }
        Ok(EmbeddingDump {
            x,
            q,
            checkpoint: f.checkpoint,
            trajectories: f.trajectories,
            window: f.window,
        })
    }
}
