//! File layouts owned by the command-line tool.

use std::path::{Path, PathBuf};

use fsaf_core::affordance_net::{ActivationSet, FingerAnnotation, Peak};
use fsaf_core::io::{read_json, read_tensor, write_json, write_tensor};
use fsaf_core::tensorkit::Tensor;
use fsaf_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Fingertip annotations together with the lattice they refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    /// Extent of the lattice the coordinates live on.
    pub h: usize,
    pub w: usize,
    pub fingers: Vec<FingerAnnotation>,
}

/// Heatmap peaks together with the lattice they were extracted from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeakFile {
    pub h: usize,
    pub w: usize,
    pub peaks: Vec<Peak>,
}

/// Maps a pixel-centre coordinate from a lattice of extent `from` to one of
/// extent `to`.
pub fn rescale(x: f64, from: usize, to: usize) -> f64 {
    (x + 0.5) * to as f64 / from as f64 - 0.5
}

impl AnnotationFile {
    pub fn rescaled(&self, size: [usize; 2]) -> Vec<FingerAnnotation> {
        self.fingers
            .iter()
            .map(|a| FingerAnnotation {
                id: a.id,
                row: rescale(a.row, self.h, size[0]),
                col: rescale(a.col, self.w, size[1]),
            })
            .collect()
    }
}

impl PeakFile {
    pub fn rescaled(&self, size: [usize; 2]) -> Vec<Peak> {
        self.peaks
            .iter()
            .map(|p| Peak {
                row: rescale(p.row, self.h, size[0]),
                col: rescale(p.col, self.w, size[1]),
                ..*p
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActivationMeta {
    timesteps: Vec<usize>,
    levels: usize,
    conditioning: Vec<f32>,
}

const ACTS_META: &str = "meta.json";

fn level_path(dir: &Path, l: usize) -> PathBuf {
    dir.join(format!("level{l}.tns"))
}

/// Writes `meta.json` plus one `[S, C, H, W]` tensor per level.
pub fn write_activations(dir: &Path, acts: &ActivationSet) -> Result<()> {
    acts.validate()?;
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for l in 0..acts.level_count() {
        let first = acts.levels[0][l].dims().to_vec();
        let mut data = Vec::new();
        for per_step in &acts.levels {
            data.extend_from_slice(per_step[l].data());
        }
        let mut dims = vec![acts.timesteps.len()];
        dims.extend(first);
        write_tensor(&level_path(dir, l), &Tensor::new(dims, data)?)?;
    }
    write_json(
        &dir.join(ACTS_META),
        &ActivationMeta {
            timesteps: acts.timesteps.clone(),
            levels: acts.level_count(),
            conditioning: acts.conditioning.clone(),
        },
    )
}

pub fn read_activations(dir: &Path) -> Result<ActivationSet> {
    let meta: ActivationMeta = read_json(&dir.join(ACTS_META))?;
    let s = meta.timesteps.len();
    let mut levels: Vec<Vec<Tensor>> = vec![Vec::with_capacity(meta.levels); s];
    for l in 0..meta.levels {
        let t = read_tensor(&level_path(dir, l))?;
        let [steps, c, h, w] = t.dims()[..] else {
            return Err(Error::shape(format!("level {l} must be [S, C, H, W], got {:?}", t.dims())));
        };
        if steps != s {
            return Err(Error::shape(format!("level {l} holds {steps} timesteps, meta lists {s}")));
        }
        let plane = c * h * w;
        for (i, per_step) in levels.iter_mut().enumerate() {
            per_step.push(Tensor::new(vec![c, h, w], t.data()[i * plane..(i + 1) * plane].to_vec())?);
        }
    }
    let acts = ActivationSet {
        timesteps: meta.timesteps,
        levels,
        conditioning: meta.conditioning,
    };
    acts.validate()?;
    Ok(acts)
}

/// Training samples; relative paths resolve against the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub samples: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub acts: PathBuf,
    pub labels: PathBuf,
}

/// Resolves `path` against the directory holding `anchor`.
pub fn relative_to(anchor: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    anchor.parent().map_or_else(|| path.to_path_buf(), |d| d.join(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_maps_pixel_centres() {
        assert_eq!(rescale(-0.5, 320, 80), -0.5);
        assert_eq!(rescale(319.5, 320, 80), 79.5);
        assert!((rescale(rescale(13.25, 320, 80), 80, 320) - 13.25).abs() < 1e-12);
    }

    #[test]
    fn activations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = |v: f32, dims: &[usize]| Tensor::filled(dims, v as f64).unwrap();
        let acts = ActivationSet {
            timesteps: vec![1, 5],
            levels: vec![vec![t(1.0, &[2, 4, 4]), t(2.0, &[3, 2, 2])], vec![t(3.0, &[2, 4, 4]), t(4.0, &[3, 2, 2])]],
            conditioning: vec![0.5; 3],
        };
        write_activations(dir.path(), &acts).unwrap();
        assert_eq!(read_activations(dir.path()).unwrap(), acts);
    }
}
