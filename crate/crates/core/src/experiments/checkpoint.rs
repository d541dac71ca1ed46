//! Single-file checkpoints.
//!
//! ```text
//! sparse-memory-lab checkpoint v1
//! step <u64>
//! params <count>
//! <name> <offset> <dim>x<dim>...
//! payload <scalars>
//! <scalars * 8 bytes of little-endian f64>
//! ```
//!
//! Offsets count scalars from the start of the payload.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor_nn::params::ParamStore;
use crate::tensor_nn::tensor::Tensor;

pub const MAGIC: &str = "sparse-memory-lab checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }
}

pub fn save(path: &Path, params: &ParamStore, step: u64) -> Result<()> {
    let mut header = format!("{MAGIC}\nstep {step}\nparams {}\n", params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        if name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("parameter name '{name}' contains whitespace")));
        }
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{name} {offset} {}\n", shape.join("x")));
        offset += t.len();
    }
    header.push_str(&format!("payload {offset}\n"));
    let mut bytes = header.into_bytes();
    bytes.reserve(offset * 8);
    for (_, t) in params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bad = |detail: String| Error::Checkpoint { path: path.to_path_buf(), detail };
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of header".into()));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut reader)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic line)".into()));
    }
    let field = |text: &str, key: &str| -> Result<usize> {
        text.strip_prefix(key)
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| bad(format!("expected '{key} <n>', got '{text}'")))
    };
    let step = field(&next_line(&mut reader)?, "step")? as u64;
    let count = field(&next_line(&mut reader)?, "params")?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let entry = next_line(&mut reader)?;
        let parts: Vec<&str> = entry.split(' ').collect();
        let [name, offset, shape] = parts.as_slice() else {
            return Err(bad(format!("bad manifest line '{entry}'")));
        };
        let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in '{entry}'")))?;
        let shape: Vec<usize> = shape
            .split('x')
            .map(|s| s.parse().map_err(|_| bad(format!("bad shape in '{entry}'"))))
            .collect::<Result<_>>()?;
        manifest.push((name.to_string(), offset, shape));
    }
    let total = field(&next_line(&mut reader)?, "payload")?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != total * 8 {
        return Err(bad(format!("payload has {} bytes, expected {}", payload.len(), total * 8)));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut tensors = Vec::with_capacity(count);
    for (name, offset, shape) in manifest {
        let len: usize = shape.iter().product();
        let slice = values
            .get(offset..offset + len)
            .ok_or_else(|| bad(format!("tensor {name} runs past the payload")))?;
        tensors.push((name, Tensor::new(shape, slice.to_vec())?));
    }
    Ok(Checkpoint { step, tensors })
}

/// Copies checkpoint tensors into a store with the same names and shapes.
pub fn restore(path: &Path, params: &mut ParamStore) -> Result<u64> {
    let ckpt = load(path)?;
    if ckpt.tensors.len() != params.len() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("{} tensors for a model with {}", ckpt.tensors.len(), params.len()),
        });
    }
    for (name, t) in ckpt.tensors {
        let id = params.find(&name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("unknown parameter {name}"),
        })?;
        params.set(id, t)?;
    }
    Ok(ckpt.step)
}
