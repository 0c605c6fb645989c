//! Checkpoint directories:
//!
//! - `config.toml`: the [`ModelConfig`].
//! - `params.bin`: magic `EGCK`, `u32` version 1, `u32` tensor count, then
//!   every parameter's values as little-endian `f64`, row-major, in
//!   registration order.
//! - `params.tsv`: `name`, `shape` (dims joined by `x`, empty for scalars),
//!   `offset` (byte offset of the first value in `params.bin`) and `len`
//!   (number of values), tab-separated with a header line.

use std::fmt::Write as _;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EGCK";
const VERSION: u32 = 1;
const HEADER: usize = 12;

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = toml::to_string(&model.config).map_err(|e| Error::invalid("model config", e.to_string()))?;
    write(&dir.join("config.toml"), config.as_bytes())?;

    let mut bin = Vec::with_capacity(HEADER + 8 * model.store.num_scalars());
    bin.extend_from_slice(CHECKPOINT_MAGIC);
    bin.extend_from_slice(&VERSION.to_le_bytes());
    bin.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    let mut table = String::from("name\tshape\toffset\tlen\n");
    for (_, name, t) in model.store.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(table, "{name}\t{}\t{}\t{}", shape.join("x"), bin.len(), t.numel());
        for v in t.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    write(&dir.join("params.bin"), &bin)?;
    write(&dir.join("params.tsv"), table.as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model from `config.toml` and overwrites every parameter
/// with the stored values.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let cfg_path = dir.join("config.toml");
    let text = String::from_utf8(read(&cfg_path)?).map_err(|_| Error::Format {
        path: cfg_path.clone(),
        msg: "not UTF-8".into(),
    })?;
    let config: ModelConfig = toml::from_str(&text).map_err(|e| Error::Format {
        path: cfg_path,
        msg: e.to_string(),
    })?;
    let mut model = Model::build(config, 0)?;

    let bin_path = dir.join("params.bin");
    let bin = read(&bin_path)?;
    let bad = |msg: String| Error::Format {
        path: bin_path.clone(),
        msg,
    };
    if bin.len() < HEADER || &bin[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(bin[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bin[8..12].try_into().expect("4 bytes")) as usize;

    let tsv_path = dir.join("params.tsv");
    let tsv = String::from_utf8(read(&tsv_path)?).map_err(|_| Error::Format {
        path: tsv_path.clone(),
        msg: "not UTF-8".into(),
    })?;
    let bad_tsv = |line: usize, msg: String| Error::Format {
        path: tsv_path.clone(),
        msg: format!("line {line}: {msg}"),
    };
    let mut filled = vec![false; model.store.len()];
    let mut rows = 0;
    for (i, line) in tsv.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        rows += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, shape, offset, len] = cols[..] else {
            return Err(bad_tsv(i + 1, "expected 4 columns".into()));
        };
        let shape: Vec<usize> = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split('x')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| bad_tsv(i + 1, format!("bad shape `{shape}`")))?
        };
        let offset: usize = offset.parse().map_err(|_| bad_tsv(i + 1, "bad offset".into()))?;
        let len: usize = len.parse().map_err(|_| bad_tsv(i + 1, "bad length".into()))?;
        let id = model
            .store
            .find(name)
            .ok_or_else(|| bad_tsv(i + 1, format!("parameter `{name}` does not exist in this model")))?;
        if model.store.get(id).shape() != shape.as_slice() || shape.iter().product::<usize>() != len {
            return Err(bad_tsv(
                i + 1,
                format!("`{name}` has shape {shape:?}, model expects {:?}", model.store.get(id).shape()),
            ));
        }
        let end = offset + 8 * len;
        if offset < HEADER || end > bin.len() {
            return Err(bad(format!("`{name}` lies outside the file")));
        }
        let data = bin[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *model.store.get_mut(id) = Tensor::new(shape, data).expect("checked length");
        filled[id.index()] = true;
    }
    if rows != count {
        return Err(bad(format!("header says {count} tensors, table lists {rows}")));
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        let id = model.store.ids().nth(missing).expect("in range");
        return Err(bad_tsv(0, format!("parameter `{}` is missing", model.store.name(id))));
    }
    Ok(model)
}
