//! Connected component labeling on binary masks.

use super::LabelVolume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Face, edge and corner neighbors.
    TwentySix,
}

impl Connectivity {
    fn offsets(&self) -> Vec<(i64, i64, i64)> {
        match self {
            Connectivity::Six => vec![
                (-1, 0, 0),
                (1, 0, 0),
                (0, -1, 0),
                (0, 1, 0),
                (0, 0, -1),
                (0, 0, 1),
            ],
            Connectivity::TwentySix => {
                let mut v = Vec::with_capacity(26);
                for dz in -1..=1i64 {
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            if dx != 0 || dy != 0 || dz != 0 {
                                v.push((dx, dy, dz));
                            }
                        }
                    }
                }
                v
            }
        }
    }
}

/// Label connected components of a binary mask. Component IDs are assigned in
/// ascending order of each component's minimal linear voxel index, so the
/// output is independent of traversal or thread scheduling.
pub fn connected_components(mask: &LabelVolume, connectivity: Connectivity) -> Result<LabelVolume> {
    if !mask.is_binary() {
        return Err(Error::Input("connected_components requires a binary mask".into()));
    }
    let dims = mask.dims;
    let offsets = connectivity.offsets();
    let mut labels = vec![0u16; dims.len()];
    let mut next_id: u16 = 0;
    let mut stack: Vec<usize> = Vec::new();
    // scanning in linear order guarantees the deterministic ID rule: the
    // first unvisited voxel of a component is its minimal linear index
    for start in 0..dims.len() {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        if next_id == u16::MAX {
            return Err(Error::Degenerate("more than 65534 components".into()));
        }
        next_id += 1;
        labels[start] = next_id;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (x, y, z) = dims.coords(idx);
            for &(dx, dy, dz) in &offsets {
                let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if !dims.contains(nx, ny, nz) {
                    continue;
                }
                let nidx = dims.index(nx as usize, ny as usize, nz as usize);
                if mask.data[nidx] != 0 && labels[nidx] == 0 {
                    labels[nidx] = next_id;
                    stack.push(nidx);
                }
            }
        }
    }
    LabelVolume::new(dims, mask.spacing, labels)
}
