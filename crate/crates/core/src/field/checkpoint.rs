use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::Vec3;

use super::{EncodingConfig, GridField, MlpField, OpacityField};

/// Either field representation, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyField {
    Grid(GridField),
    Mlp(MlpField),
}

impl OpacityField for AnyField {
    fn params(&self) -> &[f64] {
        match self {
            AnyField::Grid(g) => g.params(),
            AnyField::Mlp(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            AnyField::Grid(g) => g.params_mut(),
            AnyField::Mlp(m) => m.params_mut(),
        }
    }

    fn raw(&self, x: &Vec3) -> Option<f64> {
        match self {
            AnyField::Grid(g) => g.raw(x),
            AnyField::Mlp(m) => m.raw(x),
        }
    }

    fn density(&self, x: &Vec3) -> f64 {
        match self {
            AnyField::Grid(g) => g.density(x),
            AnyField::Mlp(m) => m.density(x),
        }
    }

    fn accumulate_grad(&self, x: &Vec3, upstream: f64, grads: &mut [f64]) {
        match self {
            AnyField::Grid(g) => g.accumulate_grad(x, upstream, grads),
            AnyField::Mlp(m) => m.accumulate_grad(x, upstream, grads),
        }
    }
}

impl AnyField {
    pub fn bounds(&self) -> &Aabb {
        match self {
            AnyField::Grid(g) => g.bounds(),
            AnyField::Mlp(m) => m.bounds(),
        }
    }
}

/// JSON header of a checkpoint; parameters live in a little-endian f64
/// sidecar named by `params_file`, relative to the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub resolution: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub layers: Option<Vec<usize>>,
    pub bounds: Aabb,
    pub activation: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub encoding: Option<EncodingConfig>,
    pub param_count: usize,
    pub params_file: String,
}

fn sidecar_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

pub fn save_checkpoint(field: &AnyField, path: &Path) -> Result<()> {
    let bin = sidecar_path(path);
    let params_file = bin
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| crate::error::invalid(format!("bad checkpoint path {}", path.display())))?
        .to_string();
    let header = match field {
        AnyField::Grid(g) => CheckpointHeader {
            kind: "grid".into(),
            resolution: Some(g.resolution()),
            layers: None,
            bounds: *g.bounds(),
            activation: "softplus".into(),
            encoding: None,
            param_count: g.num_params(),
            params_file,
        },
        AnyField::Mlp(m) => CheckpointHeader {
            kind: "mlp".into(),
            resolution: None,
            layers: Some(m.hidden().to_vec()),
            bounds: *m.bounds(),
            activation: "softplus".into(),
            encoding: Some(m.encoding()),
            param_count: m.num_params(),
            params_file,
        },
    };
    let mut bytes = Vec::with_capacity(field.num_params() * 8);
    for p in field.params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&bin, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AnyField> {
    let fmt_err = |reason: String| Error::Format {
        path: path.display().to_string(),
        reason,
    };
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(path)?)?;
    if header.activation != "softplus" {
        return Err(fmt_err(format!(
            "unsupported activation '{}'",
            header.activation
        )));
    }
    let bin = path.with_file_name(&header.params_file);
    let bytes = fs::read(&bin)?;
    if bytes.len() != header.param_count * 8 {
        return Err(fmt_err(format!(
            "parameter file holds {} bytes, header promises {} parameters",
            bytes.len(),
            header.param_count
        )));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    match header.kind.as_str() {
        "grid" => {
            let res = header
                .resolution
                .ok_or_else(|| fmt_err("grid checkpoint without resolution".into()))?;
            Ok(AnyField::Grid(GridField::with_values(
                res,
                header.bounds,
                params,
            )?))
        }
        "mlp" => {
            let layers = header
                .layers
                .ok_or_else(|| fmt_err("mlp checkpoint without layers".into()))?;
            let enc = header
                .encoding
                .ok_or_else(|| fmt_err("mlp checkpoint without encoding".into()))?;
            Ok(AnyField::Mlp(MlpField::with_params(
                &layers,
                enc,
                header.bounds,
                params,
            )?))
        }
        other => Err(fmt_err(format!("unknown field type '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = GridField::new([3, 4, 5], Aabb::cube(2.0)).unwrap();
        g.params_mut()[7] = 1.25;
        let field = AnyField::Grid(g);
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&field, &path).unwrap();
        assert!(dir.path().join("ckpt.bin").exists());
        assert_eq!(load_checkpoint(&path).unwrap(), field);
    }

    #[test]
    fn mlp_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let enc = EncodingConfig {
            num_frequencies: 3,
            include_input: false,
        };
        let field = AnyField::Mlp(MlpField::new(&[8, 8], enc, Aabb::cube(1.0), 9).unwrap());
        let path = dir.path().join("m.json");
        save_checkpoint(&field, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), field);
    }

    #[test]
    fn truncated_params_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let field = AnyField::Grid(GridField::new([2, 2, 2], Aabb::cube(1.0)).unwrap());
        let path = dir.path().join("c.json");
        save_checkpoint(&field, &path).unwrap();
        fs::write(dir.path().join("c.bin"), [0u8; 12]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
