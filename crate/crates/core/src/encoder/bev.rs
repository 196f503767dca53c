use crate::voxelizer::{GridSpec, VoxelSet};

/// Dense top-down feature grid, laid out `[x][y][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    nx: usize,
    ny: usize,
    channels: usize,
    data: Vec<f64>,
    grid: GridSpec,
}

impl BevGrid {
    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        let [nx, ny, _] = grid.dims();
        let (nx, ny) = (nx as usize, ny as usize);
        BevGrid {
            nx,
            ny,
            channels,
            data: vec![0.0; nx * ny * channels],
            grid,
        }
    }

    /// Wraps raw `[x][y][channel]` data; `None` if the length is wrong.
    pub fn from_data(grid: GridSpec, channels: usize, data: Vec<f64>) -> Option<Self> {
        let mut bev = BevGrid::zeros(grid, 0);
        if data.len() != bev.nx * bev.ny * channels {
            return None;
        }
        bev.channels = channels;
        bev.data = data;
        Some(bev)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let start = (x * self.ny + y) * self.channels;
        &self.data[start..start + self.channels]
    }

    fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let start = (x * self.ny + y) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Per-channel sums over all cells, accumulated in cell order.
    pub fn channel_sums(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.channels];
        for cell in self.data.chunks_exact(self.channels.max(1)) {
            for (a, &v) in acc.iter_mut().zip(cell) {
                *a += v;
            }
        }
        acc
    }
}

/// Collapses the z axis: each `(x, y)` cell holds the sum of the feature rows
/// of the voxels above it. With a single z layer this is plain placement.
pub fn bev_scatter(voxels: &VoxelSet) -> BevGrid {
    let mut bev = BevGrid::zeros(*voxels.grid(), voxels.channels());
    for (row, c) in voxels.coords().iter().enumerate() {
        let cell = bev.cell_mut(c[0] as usize, c[1] as usize);
        for (dst, &v) in cell.iter_mut().zip(voxels.features().row(row)) {
            *dst += v;
        }
    }
    bev
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    #[test]
    fn single_voxel_lands_in_its_cell() {
        let g = GridSpec::from_dims([8, 8, 1]).unwrap();
        let f = Matrix::from_vec(1, 2, vec![1.5, -2.0]).unwrap();
        let v = VoxelSet::new(f, vec![[3, 5, 0]], g).unwrap();
        let bev = bev_scatter(&v);
        assert_eq!(bev.cell(3, 5), &[1.5, -2.0]);
        let nonzero = bev.data().iter().filter(|&&x| x != 0.0).count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn stacked_voxels_sum() {
        let g = GridSpec::from_dims([4, 4, 3]).unwrap();
        let f = Matrix::from_vec(3, 1, vec![1.0, 2.0, 4.0]).unwrap();
        let v = VoxelSet::new(f, vec![[1, 1, 0], [1, 1, 2], [0, 3, 1]], g).unwrap();
        let bev = bev_scatter(&v);
        assert_eq!(bev.cell(1, 1), &[3.0]);
        assert_eq!(bev.cell(0, 3), &[4.0]);
        assert_eq!(bev.channel_sums(), vec![7.0]);
    }

    #[test]
    fn empty_set_gives_zero_grid() {
        let g = GridSpec::from_dims([3, 2, 1]).unwrap();
        let bev = bev_scatter(&VoxelSet::empty(g, 4));
        assert_eq!(bev.data().len(), 24);
        assert!(bev.data().iter().all(|&x| x == 0.0));
    }
}
