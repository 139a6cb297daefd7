//! Model checkpoints in the `LREL` container.

use std::path::Path;

use super::config::ModelConfig;
use super::params::{param_specs, Parameters};
use crate::container::Container;
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "checkpoint";

pub fn to_container(params: &Parameters) -> Container {
    let meta = serde_json::to_value(params.config()).expect("config serializes");
    let mut c = Container::new(CHECKPOINT_KIND, meta);
    for (spec, t) in param_specs(params.config()).iter().zip(params.tensors()) {
        c.push(spec.name.clone(), t.clone());
    }
    c
}

pub fn from_container(c: Container) -> Result<Parameters> {
    if c.kind != CHECKPOINT_KIND {
        return Err(Error::Format(format!(
            "expected a {CHECKPOINT_KIND} container, found {:?}",
            c.kind
        )));
    }
    let config: ModelConfig = serde_json::from_value(c.meta)
        .map_err(|e| Error::Format(format!("bad model config in header: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint config invalid: {e}")))?;
    let specs = param_specs(&config);
    if specs.len() != c.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, config requires {}",
            c.tensors.len(),
            specs.len()
        )));
    }
    let mut tensors = Vec::with_capacity(specs.len());
    for (spec, (name, t)) in specs.iter().zip(c.tensors) {
        if spec.name != name {
            return Err(Error::Format(format!(
                "tensor {name:?} found where {:?} was expected",
                spec.name
            )));
        }
        if t.dim() != (spec.rows, spec.cols) {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, config requires ({}, {})",
                t.dim(),
                spec.rows,
                spec.cols
            )));
        }
        tensors.push(t);
    }
    Parameters::from_tensors(&config, tensors)
}

pub fn save(params: &Parameters, path: &Path) -> Result<()> {
    to_container(params).write(path)
}

pub fn load(path: &Path) -> Result<Parameters> {
    from_container(Container::read(path)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Parameters> {
    from_container(Container::from_bytes(bytes)?)
}
