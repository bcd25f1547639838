use crate::error::{bail, Result};

/// Input channels of a voxel cell: mean RGB plus an occupancy flag.
pub const VOXEL_CHANNELS: usize = 4;

/// Dense occupancy + mean-color grid and the point-to-cell map.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    /// Cells along (x, y, z).
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// `dims.product() x 4`: mean r, g, b, occupancy.
    pub features: Vec<f64>,
    /// Integer cell coordinates of every point.
    pub point_coords: Vec<[usize; 3]>,
}

impl VoxelGrid {
    pub fn num_cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn cell_index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Flat cell index of each point at `level` (cells merged `2^level` per axis).
    pub fn point_cells_at_level(&self, level: usize) -> Vec<usize> {
        let d = level_dims(self.dims, level);
        self.point_coords
            .iter()
            .map(|c| ((c[0] >> level) * d[1] + (c[1] >> level)) * d[2] + (c[2] >> level))
            .collect()
    }

    pub fn occupied(&self) -> usize {
        self.features.chunks_exact(VOXEL_CHANNELS).filter(|c| c[3] > 0.0).count()
    }
}

/// Extents after `level` stride-2 reductions.
pub fn level_dims<const N: usize>(dims: [usize; N], level: usize) -> [usize; N] {
    dims.map(|d| (0..level).fold(d, |d, _| d.div_ceil(2)))
}

/// Smallest grid covering `room` at `voxel_size`, padded so every axis is a
/// multiple of `2^(levels - 1)`. Fails if an axis exceeds `max_extent`.
pub fn grid_dims(room: [f64; 3], voxel_size: f64, levels: usize, max_extent: usize) -> Result<[usize; 3]> {
    if !(voxel_size > 0.0) {
        bail!(Config, "voxel size must be positive, got {voxel_size}");
    }
    let multiple = 1usize << levels.saturating_sub(1);
    let dims = room.map(|r| {
        let n = ((r / voxel_size) - 1e-9).ceil().max(1.0) as usize;
        n.div_ceil(multiple) * multiple
    });
    if dims.iter().any(|&d| d > max_extent) {
        bail!(
            Config,
            "room {room:?} at voxel size {voxel_size} needs a {dims:?} grid, above the maximum extent {max_extent}"
        );
    }
    Ok(dims)
}

/// Quantizes points into `dims` cells of edge `voxel_size` (origin at 0).
/// Cell features are the mean color of the contained points (accumulated in
/// point order) and occupancy 1; empty cells are all zero.
pub fn voxelize(points: &[[f32; 3]], colors: &[[f32; 3]], voxel_size: f64, dims: [usize; 3]) -> Result<VoxelGrid> {
    if points.len() != colors.len() {
        bail!(Argument, "{} points but {} colors", points.len(), colors.len());
    }
    if !(voxel_size > 0.0) {
        bail!(Config, "voxel size must be positive, got {voxel_size}");
    }
    let mut grid = VoxelGrid {
        dims,
        voxel_size,
        features: vec![0.0; dims.iter().product::<usize>() * VOXEL_CHANNELS],
        point_coords: Vec::with_capacity(points.len()),
    };
    let mut counts = vec![0u32; grid.num_cells()];
    for (p, c) in points.iter().zip(colors) {
        let mut coord = [0usize; 3];
        for a in 0..3 {
            let q = (f64::from(p[a]) / voxel_size).floor();
            if !(q >= 0.0 && q < dims[a] as f64) {
                bail!(Config, "point {p:?} falls outside the {dims:?} grid at voxel size {voxel_size}");
            }
            coord[a] = q as usize;
        }
        let cell = grid.cell_index(coord);
        counts[cell] += 1;
        let f = &mut grid.features[cell * VOXEL_CHANNELS..cell * VOXEL_CHANNELS + 3];
        f.iter_mut().zip(c).for_each(|(a, &b)| *a += f64::from(b));
        grid.point_coords.push(coord);
    }
    for (cell, &n) in counts.iter().enumerate() {
        if n > 0 {
            let f = &mut grid.features[cell * VOXEL_CHANNELS..(cell + 1) * VOXEL_CHANNELS];
            for v in &mut f[..3] {
                *v /= f64::from(n);
            }
            f[3] = 1.0;
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearby_points_share_a_cell() {
        let g = voxelize(&[[0.11, 0.11, 0.11], [0.12, 0.115, 0.12]], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 0.05, [4, 4, 4]).unwrap();
        assert_eq!(g.point_coords[0], g.point_coords[1]);
        let cell = g.cell_index(g.point_coords[0]);
        assert_eq!(&g.features[cell * 4..cell * 4 + 4], &[0.5, 0.5, 0.0, 1.0]);
        assert_eq!(g.occupied(), 1);
        // empty cells are zero
        assert!(g.features[..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_room_grid() {
        assert_eq!(grid_dims([1.6, 1.6, 0.8], 0.05, 3, 32).unwrap(), [32, 32, 16]);
        assert_eq!(grid_dims([1.0, 0.9, 0.5], 0.05, 3, 32).unwrap(), [20, 20, 12]);
        assert!(matches!(grid_dims([1.6, 1.6, 0.8], 0.02, 3, 32), Err(crate::Error::Config(_))));
    }

    #[test]
    fn out_of_grid_point_is_config_error() {
        let r = voxelize(&[[0.3, 0.0, 0.0]], &[[0.0; 3]], 0.05, [4, 4, 4]);
        assert!(matches!(r, Err(crate::Error::Config(_))));
    }

    #[test]
    fn coarse_level_cells() {
        let g = voxelize(&[[0.16, 0.06, 0.01]], &[[0.0; 3]], 0.05, [4, 4, 4]).unwrap();
        assert_eq!(g.point_coords[0], [3, 1, 0]);
        assert_eq!(g.point_cells_at_level(1), vec![(1 * 2 + 0) * 2 + 0]);
    }
}
