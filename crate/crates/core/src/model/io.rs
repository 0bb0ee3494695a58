use std::path::Path;

use serde_json::json;

use super::{ModelMeta, ModelSpec, TrainedModel};
use crate::container::Bundle;
use crate::error::{Error, Result};

impl TrainedModel {
    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new("model", json!({ "spec": self.spec, "meta": self.meta }));
        for (name, t) in &self.weights {
            b.push(name.clone(), t.clone());
        }
        b
    }

    pub fn from_bundle(bundle: Bundle, origin: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::Malformed {
            path: origin.to_path_buf(),
            reason,
        };
        if bundle.kind != "model" {
            return Err(malformed(format!("expected a model, found `{}`", bundle.kind)));
        }
        let spec: ModelSpec = serde_json::from_value(bundle.meta["spec"].clone())
            .map_err(|e| malformed(format!("spec: {e}")))?;
        let meta: ModelMeta = serde_json::from_value(bundle.meta["meta"].clone())
            .map_err(|e| malformed(format!("meta: {e}")))?;
        TrainedModel::from_parts(spec, bundle.tensors.into_iter().collect(), meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(Bundle::load(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_bit_exact_logits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cpak");
        let m = TrainedModel::build(Architecture::SmallConvNetA.spec(&[3, 16, 16], 4), 9).unwrap();
        m.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert_eq!(back, m);
        let x = vec![Tensor::full(&[3, 16, 16], 0.3), Tensor::full(&[3, 16, 16], 0.7)];
        assert_eq!(back.logits(&x).unwrap(), m.logits(&x).unwrap());
    }

    #[test]
    fn alternate_architecture_reports_own_spec() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.cpak");
        let m = TrainedModel::build(Architecture::SmallConvNetB.spec(&[3, 32, 32], 6), 2).unwrap();
        m.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert_eq!(back.spec.name, "SmallConvNet-B");
        assert!(back.layer_index("dense1").is_ok());
    }

    #[test]
    fn corrupted_magic_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cpak");
        let m = TrainedModel::build(Architecture::SmallConvNetA.spec(&[3, 8, 8], 2), 1).unwrap();
        m.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'Z';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(TrainedModel::load(&path), Err(Error::BadMagic { .. })));
    }
}
