//! Network checkpoints: `<stem>.bin` holds the parameters as little-endian
//! f64 in network order, `<stem>.json` the architecture.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lov_core::sensitivity::{Mlp, MlpShape};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<String>,
    pub normalization: Normalization,
    pub output_scale: f64,
    pub output_shift: bool,
    pub seed: u64,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Time inputs are divided by this.
    pub horizon: f64,
    /// Price inputs are divided by this.
    pub spot: f64,
}

impl Sidecar {
    pub fn from_shape(shape: &MlpShape) -> Self {
        let hidden = shape.sizes.len() - 2;
        let mut activations = vec!["relu".to_string(); hidden];
        activations.push("softplus".into());
        Self {
            format_version: FORMAT_VERSION,
            layer_sizes: shape.sizes.clone(),
            activations,
            normalization: Normalization { horizon: shape.horizon, spot: shape.spot },
            output_scale: shape.output_scale,
            output_shift: shape.output_shift,
            seed: shape.seed,
            n_params: shape.n_params(),
        }
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            sizes: self.layer_sizes.clone(),
            horizon: self.normalization.horizon,
            spot: self.normalization.spot,
            output_scale: self.output_scale,
            output_shift: self.output_shift,
            seed: self.seed,
        }
    }
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn encode(theta: &[f64]) -> Vec<u8> {
    theta.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        bail!("checkpoint length {} is not a multiple of 8", bytes.len());
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Writes `<bin>` and its sidecar.
pub fn save(bin: &Path, net: &Mlp) -> Result<()> {
    save_theta(bin, net.shape(), net.theta())
}

pub fn save_theta(bin: &Path, shape: &MlpShape, theta: &[f64]) -> Result<()> {
    std::fs::write(bin, encode(theta)).with_context(|| format!("cannot write {}", bin.display()))?;
    let side = serde_json::to_string_pretty(&Sidecar::from_shape(shape))?;
    std::fs::write(sidecar_path(bin), side + "\n").with_context(|| format!("cannot write sidecar for {}", bin.display()))?;
    Ok(())
}

pub fn load(bin: &Path) -> Result<Mlp> {
    let side_path = sidecar_path(bin);
    let side: Sidecar = serde_json::from_str(
        &std::fs::read_to_string(&side_path).with_context(|| format!("cannot read checkpoint sidecar {}", side_path.display()))?,
    )
    .with_context(|| format!("malformed sidecar {}", side_path.display()))?;
    if side.format_version != FORMAT_VERSION {
        bail!("unsupported checkpoint format version {}", side.format_version);
    }
    let theta = decode(&std::fs::read(bin).with_context(|| format!("cannot read checkpoint {}", bin.display()))?)?;
    if theta.len() != side.n_params {
        bail!("checkpoint holds {} parameters, sidecar says {}", theta.len(), side.n_params);
    }
    Ok(Mlp::with_theta(side.shape(), theta)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_round_trip() {
        let mut shape = MlpShape::standard(0.5, 231.8, 11);
        shape.output_shift = true;
        shape.output_scale = 0.05;
        let net = Mlp::init(shape).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("theta.bin");
        save(&bin, &net).unwrap();
        let back = load(&bin).unwrap();
        assert_eq!(back, net);
        assert_eq!(std::fs::read(&bin).unwrap().len(), 8 * net.n_params());
    }

    #[test]
    fn truncated_file_is_rejected() {
        assert!(decode(&[0u8; 12]).is_err());
        let net = Mlp::init(MlpShape { sizes: vec![3, 4, 1], ..MlpShape::standard(1.0, 100.0, 0) }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("t.bin");
        save(&bin, &net).unwrap();
        std::fs::write(&bin, encode(&net.theta()[1..])).unwrap();
        assert!(load(&bin).is_err());
    }
}
