//! Channel-mean response maps of full LCA layer outputs, one graymap per
//! image segment.

use std::fs;
use std::path::{Path, PathBuf};

use ctxtrack_core::lca::LcaOutput;
use ctxtrack_core::model::TrackerModel;
use ctxtrack_core::position::Segment;
use ctxtrack_core::{Graph, ParamStore};

use crate::error::{HarnessError, Result};
use crate::pnm::write_pgm;
use crate::triplet::Triplet;

/// Gray level written when a map is constant.
const FLAT_GRAY: u8 = 128;

/// Min-max normalizes `values` to `0..=255`.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![FLAT_GRAY; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Per-token channel mean of `segment` in `out`, row-major over its grid.
pub fn channel_means(out: &LcaOutput<'_>, segment: Segment) -> Result<Vec<f64>> {
    let tokens = out.tokens.segment(segment)?.value();
    let c = tokens.shape()[1];
    Ok(tokens.data().chunks(c).map(|row| row.iter().sum::<f64>() / c as f64).collect())
}

/// Number of full LCA layers whose outputs can be dumped.
pub fn layer_count(model: &TrackerModel) -> usize {
    let s = &model.config().stages;
    let backbone = if model.config().backbone_lca { s.n1 } else { 0 };
    backbone + s.n3 - 1
}

/// Writes `layer{i}_{target,previous,search}.pgm` for each selected layer
/// (backbone LCA layers first, then the full neck layers).
pub fn respmap_dump(
    model: &TrackerModel,
    params: &ParamStore,
    triplet: &Triplet,
    layers: &[usize],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let count = layer_count(model);
    if layers.is_empty() {
        return Err(HarnessError::config("no layers selected"));
    }
    if let Some(bad) = layers.iter().find(|&&l| l >= count) {
        return Err(HarnessError::config(format!("layer {bad} out of range, model has {count} full LCA layers")));
    }
    fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    let g = Graph::new(params);
    let out = model.forward(&g, triplet.input())?;
    let full: Vec<&LcaOutput<'_>> = out.full_lca_layers().collect();
    let mut written = Vec::new();
    for &l in layers {
        for seg in Segment::ALL {
            let grid = full[l].tokens.layout.require(seg)?.grid;
            let gray = to_gray(&channel_means(full[l], seg)?);
            let path = dir.join(format!("layer{l}_{}.pgm", seg.name()));
            write_pgm(&path, grid.cols, grid.rows, &gray)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_levels() {
        assert_eq!(to_gray(&[3.0, 3.0, 3.0]), vec![128, 128, 128]);
        assert_eq!(to_gray(&[0.0, 0.5, 1.0]), vec![0, 128, 255]);
        assert_eq!(to_gray(&[-2.0, 2.0]), vec![0, 255]);
    }
}
