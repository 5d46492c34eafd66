//! Trained-model serialization: a JSON descriptor next to a little-endian
//! float32 parameter blob.

use crate::error::{CoreError, Result};
use crate::n2n::net::{DenoiserNet, NetDescriptor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    descriptor: NetDescriptor,
    param_count: usize,
    params_file: String,
}

/// Write `<path>` (a .json file) plus a sibling `.bin` parameter blob.
pub fn save_model(net: &DenoiserNet<f32>, path: &Path) -> Result<()> {
    net.desc.validate()?;
    let blob_path = path.with_extension("bin");
    let header = ModelHeader {
        descriptor: net.desc.clone(),
        param_count: net.params.len(),
        params_file: blob_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    fs::write(path, serde_json::to_string_pretty(&header)?)?;
    let mut blob = Vec::with_capacity(net.params.len() * 4);
    for &p in &net.params {
        blob.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(blob_path, blob)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DenoiserNet<f32>> {
    let header: ModelHeader = serde_json::from_str(&fs::read_to_string(path)?)?;
    header.descriptor.validate()?;
    let expected = header.descriptor.param_count();
    if header.param_count != expected {
        return Err(CoreError::MalformedHeader(format!(
            "declared param_count {} does not match descriptor ({expected})",
            header.param_count
        )));
    }
    let blob_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.params_file);
    let blob = fs::read(&blob_path)?;
    if blob.len() != expected * 4 {
        return Err(CoreError::TruncatedData {
            path: blob_path.display().to_string(),
            expected: expected * 4,
            found: blob.len(),
        });
    }
    let params = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(DenoiserNet {
        desc: header.descriptor,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let net = DenoiserNet::<f32>::new_seeded(NetDescriptor::default(), 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&net, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.desc, net.desc);
        assert_eq!(back.params, net.params);
    }

    #[test]
    fn truncated_blob_rejected() {
        let net = DenoiserNet::<f32>::new_seeded(
            NetDescriptor {
                depth: 1,
                channels: vec![4],
                leaky_slope: 0.1,
            },
            1,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&net, &path).unwrap();
        let blob_path = path.with_extension("bin");
        let blob = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &blob[..blob.len() - 4]).unwrap();
        match load_model(&path) {
            Err(CoreError::TruncatedData { expected, found, .. }) => {
                assert_eq!(expected, net.params.len() * 4);
                assert_eq!(found, net.params.len() * 4 - 4);
            }
            other => panic!("expected TruncatedData, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_header_rejected() {
        let net = DenoiserNet::<f32>::new_seeded(NetDescriptor::default(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&net, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mangled = text.replace(
            &format!("\"param_count\": {}", net.params.len()),
            "\"param_count\": 3",
        );
        assert_ne!(text, mangled);
        std::fs::write(&path, mangled).unwrap();
        assert!(matches!(load_model(&path), Err(CoreError::MalformedHeader(_))));
    }
}
