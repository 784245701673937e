//! Checkpoint container: a versioned JSON document holding the model spec
//! and every named parameter tensor with its shape.
//!
//! Values are serialized as JSON numbers; serde_json emits shortest
//! round-trip decimal for `f64`, so save/load is bit-exact. The format is
//! append-only versioned: readers reject unknown major versions.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{init_params, ModelSpec, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

const FORMAT_NAME: &str = "catequiv-checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Container {
    format: String,
    version: u32,
    spec: ModelSpec,
    tensors: Vec<NamedTensor>,
}

pub fn save_checkpoint(path: &Path, spec: &ModelSpec, params: &Params) -> Result<()> {
    let container = Container {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        spec: spec.clone(),
        tensors: params
            .named()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&container)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, Params)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let container: Container =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("malformed container: {e}")))?;
    if container.format != FORMAT_NAME {
        return Err(Error::Checkpoint(format!("unknown format {:?}", container.format)));
    }
    if container.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (reader supports {FORMAT_VERSION})",
            container.version
        )));
    }
    container.spec.validate().map_err(|e| Error::Checkpoint(format!("invalid spec: {e}")))?;

    // Build the expected parameter skeleton from the spec, then fill by name.
    let mut params = init_params(&container.spec, &mut Rng::seed_from_u64(0))?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    if expected.len() != container.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors for this spec, found {}",
            expected.len(),
            container.tensors.len()
        )));
    }
    for (slot, stored) in params.named_mut().into_iter().zip(&container.tensors) {
        let (name, tensor) = slot;
        if name != stored.name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: expected {name:?}, found {:?}",
                stored.name
            )));
        }
        if tensor.shape() != stored.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name:?}: spec wants {:?}, checkpoint has {:?}",
                tensor.shape(),
                stored.shape
            )));
        }
        *tensor = Tensor::from_vec(&stored.shape, stored.data.clone())
            .map_err(|e| Error::Checkpoint(format!("tensor {name:?}: {e}")))?;
    }
    Ok((container.spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let spec = ModelSpec::tiny(ModelKind::CatEquiv);
        let params = init_params(&spec, &mut Rng::seed_from_u64(42)).unwrap();
        save_checkpoint(&path, &spec, &params).unwrap();
        let (spec2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(spec2.param_count(), spec.param_count());
        for ((n1, t1), (n2, t2)) in params.named().iter().zip(params2.named().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data(), "tensor {n1} not bit-identical");
        }
    }

    #[test]
    fn corrupted_shape_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let spec = ModelSpec::tiny(ModelKind::PlainCnn);
        let params = init_params(&spec, &mut Rng::seed_from_u64(1)).unwrap();
        save_checkpoint(&path, &spec, &params).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        // corrupt the first shape entry
        text = text.replacen("\"shape\":[4,8,3]", "\"shape\":[4,8,5]", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let spec = ModelSpec::tiny(ModelKind::CircCnn);
        let params = init_params(&spec, &mut Rng::seed_from_u64(2)).unwrap();
        save_checkpoint(&path, &spec, &params).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        std::fs::write(&path, text).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
