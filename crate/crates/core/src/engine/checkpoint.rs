use std::collections::HashMap;
use std::path::Path;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{ChangeNet, NetConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "1";

/// Writes parameters, buffers and the run configuration to a safetensors
/// archive.
pub fn save_checkpoint<T: Scalar>(net: &ChangeNet<T>, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let to_json = |v: serde_json::Result<String>| v.map_err(|e| Error::Checkpoint(e.to_string()));
    let meta = HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("config".to_string(), to_json(serde_json::to_string(cfg))?),
        ("net_config".to_string(), to_json(serde_json::to_string(&net.config))?),
        ("seed".to_string(), cfg.seed.to_string()),
        ("precision".to_string(), T::NAME.to_string()),
    ]);
    net.params.save(path, meta)
}

/// Reads a checkpoint into a network of element type `T`, whatever
/// precision it was stored in.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ChangeNet<T>, ExperimentConfig)> {
    let (params, meta) = ParamStore::<T>::load(path)?;
    let field = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata {k:?}", path.display())));
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {}", field("format")?)));
    }
    let cfg: ExperimentConfig = serde_json::from_str(field("config")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let net_cfg: NetConfig = serde_json::from_str(field("net_config")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let reference = ChangeNet::<T>::new(net_cfg.clone())?;
    for (name, t) in reference.params.iter() {
        let got = params.get(name).map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", got.shape(), t.shape())));
        }
    }
    Ok((ChangeNet::from_parts(net_cfg, params), cfg))
}
