//! Checkpoints: one MTF1 file per parameter, a JSON manifest of names and
//! shapes, and the resolved config that produced them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::config::{RunConfig, VERSION};
use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::{read_tensor, write_tensor, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub step: usize,
    pub params: Vec<ParamEntry>,
}

fn groups(model: &mut Model) -> [(&'static str, &mut dyn Parameterized); 2] {
    [("denoiser", &mut model.denoiser), ("fuser", &mut model.fuser)]
}

pub fn save_checkpoint(model: &Model, dir: impl AsRef<Path>, step: usize) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut model = model.clone();
    let mut params = Vec::new();
    for (group, part) in groups(&mut model) {
        for (name, tensor) in part.named_params() {
            let name = format!("{group}.{name}");
            let file = format!("{name}.mtf");
            write_tensor(&tensor, dir.join(&file))?;
            params.push(ParamEntry { name, file, shape: tensor.shape().to_vec() });
        }
    }
    let manifest = Manifest { version: VERSION.to_string(), step, params };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    model.config.echo_to(dir)
}

/// Rebuilds a model from its saved config and restores every parameter.
/// Missing, extra or reshaped parameters are load errors.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let config = RunConfig::load(dir.join("config.txt"))?;
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut entries: BTreeMap<String, ParamEntry> = manifest.params.into_iter().map(|p| (p.name.clone(), p)).collect();

    let mut model = Model::new(&config)?;
    let mut failure: Option<Error> = None;
    for (group, part) in groups(&mut model) {
        part.visit_params(&mut |name, slot| {
            if failure.is_some() {
                return;
            }
            let full = format!("{group}.{name}");
            let Some(entry) = entries.remove(&full) else {
                failure = Some(Error::Load(format!("checkpoint has no parameter `{full}`")));
                return;
            };
            if entry.shape != slot.shape() {
                failure = Some(Error::Load(format!(
                    "`{full}` has shape {:?} in the checkpoint but the config needs {:?}",
                    entry.shape,
                    slot.shape()
                )));
                return;
            }
            match read_tensor(dir.join(&entry.file)) {
                Ok(t) if t.shape() == slot.shape() => *slot = Tensor::requires_grad(&t.to_dtype(slot.dtype())),
                Ok(t) => {
                    failure = Some(Error::Load(format!(
                        "`{}` holds shape {:?}, manifest says {:?}",
                        entry.file,
                        t.shape(),
                        entry.shape
                    )))
                }
                Err(e) => failure = Some(e),
            }
        });
    }
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::Load(format!("checkpoint parameter `{extra}` is not part of the model")));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.d_model = 16;
        cfg.model.heads = 2;
        cfg.model.depth = 1;
        cfg
    }

    #[test]
    fn roundtrip_restores_every_parameter() {
        let mut model = Model::new(&small()).unwrap();
        model.fuser.e_l = Tensor::full(model.fuser.e_l.shape(), 0.25, model.fuser.e_l.dtype()).requires_grad();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), 7).unwrap();
        let mut back = load_checkpoint(dir.path()).unwrap();
        let mut orig = model.clone();
        let a: Vec<_> = groups(&mut orig).into_iter().flat_map(|(_, p)| p.named_params()).collect();
        let b: Vec<_> = groups(&mut back).into_iter().flat_map(|(_, p)| p.named_params()).collect();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert!(ta.bit_eq(tb), "{na}");
        }
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest.step, 7);
        assert!(manifest.params.iter().any(|p| p.name == "fuser.e_l" && p.shape == vec![4, 32]));
    }

    #[test]
    fn incompatible_shapes_fail_to_load() {
        let model = Model::new(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), 1).unwrap();
        let mut bigger = small();
        bigger.model.d_model = 32;
        std::fs::write(dir.path().join("config.txt"), bigger.render()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Load(_))));
    }

    #[test]
    fn missing_parameter_fails_to_load() {
        let model = Model::new(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), 1).unwrap();
        let mut deeper = small();
        deeper.model.depth = 2;
        std::fs::write(dir.path().join("config.txt"), deeper.render()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Load(_))));
    }
}
