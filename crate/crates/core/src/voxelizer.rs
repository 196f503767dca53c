//! Dynamic voxelization: point clouds in, mean-pooled voxel features out.

use std::collections::HashMap;
use std::io::Read;

use crate::error::{Result, SegtError};
use crate::rng::SeededRng;
use crate::tensor::Matrix;

/// Raw LiDAR returns. Each record is `x, y, z` in meters followed by
/// `extra_count` unitless attributes (intensity, ring, sweep time, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    extra_count: usize,
    values: Vec<f64>,
}

impl PointCloud {
    pub fn new(extra_count: usize) -> Self {
        PointCloud {
            extra_count,
            values: Vec::new(),
        }
    }

    /// Builds a cloud from interleaved records of `stride` values each.
    pub fn from_flat(values: Vec<f64>, stride: usize) -> Result<Self> {
        if stride < 3 {
            return Err(SegtError::config("stride", "must be at least 3 (x, y, z)"));
        }
        if values.len() % stride != 0 {
            return Err(SegtError::config(
                "stride",
                format!("{} values do not split into records of {stride}", values.len()),
            ));
        }
        for (index, rec) in values.chunks_exact(stride).enumerate() {
            check_record(index, rec)?;
        }
        Ok(PointCloud {
            extra_count: stride - 3,
            values,
        })
    }

    pub fn push(&mut self, xyz: [f64; 3], extras: &[f64]) -> Result<()> {
        let index = self.len();
        if extras.len() != self.extra_count {
            return Err(SegtError::Ingest {
                index,
                reason: format!(
                    "carries {} extras, cloud expects {}",
                    extras.len(),
                    self.extra_count
                ),
            });
        }
        let start = self.values.len();
        self.values.extend_from_slice(&xyz);
        self.values.extend_from_slice(extras);
        if let Err(e) = check_record(index, &self.values[start..]) {
            self.values.truncate(start);
            return Err(e);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn extra_count(&self) -> usize {
        self.extra_count
    }

    pub fn stride(&self) -> usize {
        3 + self.extra_count
    }

    /// The full attribute vector `(x, y, z, extras...)` of point `i`.
    pub fn point(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.values[i * s..(i + 1) * s]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.stride())
    }

    /// Reads little-endian `f32` records, `stride` floats per point, x/y/z
    /// first. nuScenes sweeps use stride 5.
    pub fn read_bin<R: Read>(mut reader: R, stride: usize) -> Result<Self> {
        if stride < 3 {
            return Err(SegtError::config("stride", "must be at least 3 (x, y, z)"));
        }
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        let record = 4 * stride;
        if bytes.len() % record != 0 {
            return Err(SegtError::config(
                "stride",
                format!(
                    "file holds {} bytes, not a whole number of {stride}-float records",
                    bytes.len()
                ),
            ));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::from_flat(values, stride)
    }

    /// Reads a CSV whose header starts with `x,y,z`; remaining columns become
    /// extras in header order.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers().map_err(csv_parse_error)?.clone();
        let names: Vec<&str> = header.iter().collect();
        if names.len() < 3 || names[..3] != ["x", "y", "z"] {
            return Err(SegtError::Parse {
                line: 1,
                reason: "header must begin with x,y,z".into(),
            });
        }
        let stride = names.len();
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_parse_error)?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            for field in rec.iter() {
                let v: f64 = field.parse().map_err(|_| SegtError::Parse {
                    line,
                    reason: format!("`{field}` is not a number"),
                })?;
                values.push(v);
            }
        }
        Self::from_flat(values, stride)
    }
}

fn csv_parse_error(e: csv::Error) -> SegtError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SegtError::Io(io),
        kind => SegtError::Parse {
            line,
            reason: format!("{kind:?}"),
        },
    }
}

fn check_record(index: usize, rec: &[f64]) -> Result<()> {
    if let Some(axis) = rec.iter().position(|v| !v.is_finite()) {
        let what = match axis {
            0 => "x".to_string(),
            1 => "y".to_string(),
            2 => "z".to_string(),
            k => format!("extra {}", k - 3),
        };
        return Err(SegtError::Ingest {
            index,
            reason: format!("non-finite {what}"),
        });
    }
    Ok(())
}

/// Axis-aligned detection volume and its voxel lattice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    range_min: [f64; 3],
    range_max: [f64; 3],
    voxel_size: [f64; 3],
    dims: [u32; 3],
}

impl GridSpec {
    /// `dims` is `ceil((max - min) / voxel_size)` per axis. Quotients within
    /// 1e-9 (relative) of an integer snap to it, so `1.0 / 0.1` gives 10
    /// layers rather than 11.
    pub fn new(range_min: [f64; 3], range_max: [f64; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let mut dims = [0u32; 3];
        for a in 0..3 {
            let axis = ["x", "y", "z"][a];
            let (lo, hi, vs) = (range_min[a], range_max[a], voxel_size[a]);
            if !(lo.is_finite() && hi.is_finite() && vs.is_finite()) {
                return Err(SegtError::config("range", format!("{axis} bounds must be finite")));
            }
            if hi <= lo {
                return Err(SegtError::config(
                    "range_max",
                    format!("{axis}: max {hi} must exceed min {lo}"),
                ));
            }
            if vs <= 0.0 {
                return Err(SegtError::config(
                    "voxel_size",
                    format!("{axis}: {vs} must be positive"),
                ));
            }
            let q = (hi - lo) / vs;
            let snapped = if (q - q.round()).abs() <= 1e-9 * q.abs().max(1.0) {
                q.round()
            } else {
                q.ceil()
            };
            if snapped > u32::MAX as f64 {
                return Err(SegtError::config(
                    "voxel_size",
                    format!("{axis}: {snapped} voxels exceed the u32 index range"),
                ));
            }
            dims[a] = snapped as u32;
        }
        Ok(GridSpec {
            range_min,
            range_max,
            voxel_size,
            dims,
        })
    }

    /// Unit voxels anchored at the origin. Used when only the lattice shape
    /// is known, e.g. after reading a voxel container.
    pub fn from_dims(dims: [u32; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(SegtError::config("dims", "every axis needs at least one voxel"));
        }
        Self::new(
            [0.0; 3],
            [dims[0] as f64, dims[1] as f64, dims[2] as f64],
            [1.0; 3],
        )
    }

    /// nuScenes setup: X/Y in [-54, 54] m, Z in [-5, 3] m, 0.28125 x 0.28125 x 8 m
    /// voxels, giving a 384 x 384 x 1 lattice.
    pub fn nuscenes() -> Self {
        Self::new([-54.0, -54.0, -5.0], [54.0, 54.0, 3.0], [0.28125, 0.28125, 8.0])
            .expect("default grid is valid")
    }

    pub fn range_min(&self) -> [f64; 3] {
        self.range_min
    }

    pub fn range_max(&self) -> [f64; 3] {
        self.range_max
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    pub fn cell_count(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    /// Voxel containing `p`, or `None` outside the half-open range.
    pub fn locate(&self, p: [f64; 3]) -> Option<[u32; 3]> {
        let mut out = [0u32; 3];
        for a in 0..3 {
            if !(p[a] >= self.range_min[a] && p[a] < self.range_max[a]) {
                return None;
            }
            let idx = ((p[a] - self.range_min[a]) / self.voxel_size[a]).floor();
            // Rounding can land a point just below max on index `dims`.
            out[a] = (idx.max(0.0) as u32).min(self.dims[a] - 1);
        }
        Some(out)
    }
}

/// Occupied voxels: one feature row per distinct lattice coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelSet {
    features: Matrix<f64>,
    coords: Vec<[u32; 3]>,
    grid: GridSpec,
}

impl VoxelSet {
    pub fn new(features: Matrix<f64>, coords: Vec<[u32; 3]>, grid: GridSpec) -> Result<Self> {
        if features.rows() != coords.len() {
            return Err(SegtError::shape(format!(
                "{} feature rows for {} coordinates",
                features.rows(),
                coords.len()
            )));
        }
        let dims = grid.dims();
        let mut seen = std::collections::HashSet::with_capacity(coords.len());
        for (i, c) in coords.iter().enumerate() {
            if (0..3).any(|a| c[a] >= dims[a]) {
                return Err(SegtError::domain(format!(
                    "voxel {i} at {c:?} lies outside grid {dims:?}"
                )));
            }
            if !seen.insert(*c) {
                return Err(SegtError::domain(format!("voxel {i} repeats coordinate {c:?}")));
            }
        }
        Ok(VoxelSet {
            features,
            coords,
            grid,
        })
    }

    pub fn empty(grid: GridSpec, channels: usize) -> Self {
        VoxelSet {
            features: Matrix::zeros(0, channels),
            coords: Vec::new(),
            grid,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix<f64> {
        &self.features
    }

    pub fn coords(&self) -> &[[u32; 3]] {
        &self.coords
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Same voxels, new features (any channel count).
    pub fn with_features(&self, features: Matrix<f64>) -> Result<Self> {
        if features.rows() != self.len() {
            return Err(SegtError::shape(format!(
                "{} feature rows for {} voxels",
                features.rows(),
                self.len()
            )));
        }
        Ok(VoxelSet {
            features,
            coords: self.coords.clone(),
            grid: self.grid,
        })
    }

    /// Same voxels placed in a different (compatible) grid description.
    pub fn with_grid(mut self, grid: GridSpec) -> Result<Self> {
        if grid.dims() != self.grid.dims() {
            return Err(SegtError::shape(format!(
                "grid dims {:?} differ from voxel dims {:?}",
                grid.dims(),
                self.grid.dims()
            )));
        }
        self.grid = grid;
        Ok(self)
    }

    /// Rows reordered by `perm` (row `i` of the result is row `perm[i]`).
    pub fn reordered(&self, perm: &[usize]) -> Self {
        let features = Matrix::from_fn(perm.len(), self.channels(), |r, c| {
            self.features.get(perm[r], c)
        });
        VoxelSet {
            features,
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
            grid: self.grid,
        }
    }

    pub fn into_parts(self) -> (Matrix<f64>, Vec<[u32; 3]>, GridSpec) {
        (self.features, self.coords, self.grid)
    }
}

/// Bookkeeping from one voxelization pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VoxelStats {
    pub retained: usize,
    pub dropped: usize,
    /// Points pooled into each output row.
    pub point_counts: Vec<u32>,
}

pub fn voxelize(cloud: &PointCloud, grid: &GridSpec) -> Result<VoxelSet> {
    voxelize_with_stats(cloud, grid).map(|(v, _)| v)
}

/// Mean-pools `(x, y, z, extras...)` over the points in each occupied voxel.
///
/// Rows come out sorted by `(z, y, x)`. Inside a voxel the points are summed
/// in a canonical order (by attribute values, then input index), so the
/// output is bitwise independent of input point order.
pub fn voxelize_with_stats(cloud: &PointCloud, grid: &GridSpec) -> Result<(VoxelSet, VoxelStats)> {
    let dims = grid.dims();
    let channels = cloud.stride();
    let mut keyed: Vec<(u64, usize)> = Vec::with_capacity(cloud.len());
    let mut dropped = 0usize;
    for (i, p) in cloud.iter().enumerate() {
        check_record(i, p)?;
        match grid.locate([p[0], p[1], p[2]]) {
            Some(c) => {
                let key = (c[2] as u64 * dims[1] as u64 + c[1] as u64) * dims[0] as u64 + c[0] as u64;
                keyed.push((key, i));
            }
            None => dropped += 1,
        }
    }
    keyed.sort_unstable_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| {
                let (pa, pb) = (cloud.point(a.1), cloud.point(b.1));
                pa.iter()
                    .zip(pb)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| a.1.cmp(&b.1))
    });

    let mut coords = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut counts = Vec::new();
    let mut start = 0;
    while start < keyed.len() {
        let key = keyed[start].0;
        let end = start + keyed[start..].iter().take_while(|k| k.0 == key).count();
        let mut acc = vec![0.0f64; channels];
        for &(_, i) in &keyed[start..end] {
            for (a, &v) in acc.iter_mut().zip(cloud.point(i)) {
                *a += v;
            }
        }
        let n = (end - start) as f64;
        rows.extend(acc.iter().map(|s| s / n));
        let x = key % dims[0] as u64;
        let y = (key / dims[0] as u64) % dims[1] as u64;
        let z = key / (dims[0] as u64 * dims[1] as u64);
        coords.push([x as u32, y as u32, z as u32]);
        counts.push((end - start) as u32);
        start = end;
    }
    let features = Matrix::from_vec(coords.len(), channels, rows)?;
    let stats = VoxelStats {
        retained: keyed.len(),
        dropped,
        point_counts: counts,
    };
    Ok((
        VoxelSet {
            features,
            coords,
            grid: *grid,
        },
        stats,
    ))
}

/// `n` distinct voxels drawn uniformly from `grid` with features uniform in
/// `[-1, 1)`. Rows are in draw order, not sorted.
pub fn random_voxel_set(grid: &GridSpec, n: usize, channels: usize, rng: &mut SeededRng) -> Result<VoxelSet> {
    let total = grid.cell_count();
    if n as u64 > total {
        return Err(SegtError::config(
            "voxels",
            format!("{n} voxels requested from a grid of {total} cells"),
        ));
    }
    let dims = grid.dims();
    // Partial Fisher-Yates over the linear cell index with sparse swaps.
    let mut swapped: HashMap<u64, u64> = HashMap::new();
    let mut coords = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let j = i + rng.below(total - i);
        let vj = *swapped.get(&j).unwrap_or(&j);
        let vi = *swapped.get(&i).unwrap_or(&i);
        swapped.insert(j, vi);
        let x = vj % dims[0] as u64;
        let y = (vj / dims[0] as u64) % dims[1] as u64;
        let z = vj / (dims[0] as u64 * dims[1] as u64);
        coords.push([x as u32, y as u32, z as u32]);
    }
    let features = Matrix::from_fn(n, channels, |_, _| rng.uniform(-1.0, 1.0));
    VoxelSet::new(features, coords, *grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n: f64) -> GridSpec {
        GridSpec::new([0.0; 3], [n; 3], [1.0; 3]).unwrap()
    }

    #[test]
    fn two_points_pool_into_one_voxel() {
        let mut cloud = PointCloud::new(1);
        cloud.push([0.2, 0.2, 0.1], &[0.4]).unwrap();
        cloud.push([0.7, 0.9, 0.3], &[0.6]).unwrap();
        let v = voxelize(&cloud, &unit_grid(4.0)).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.coords(), &[[0, 0, 0]]);
        let want = [0.45, 0.55, 0.2, 0.5];
        for (got, want) in v.features().row(0).iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn out_of_range_points_are_dropped() {
        let mut cloud = PointCloud::new(0);
        cloud.push([-0.1, 1.0, 1.0], &[]).unwrap();
        cloud.push([4.0, 1.0, 1.0], &[]).unwrap();
        let (v, stats) = voxelize_with_stats(&cloud, &unit_grid(4.0)).unwrap();
        assert!(v.is_empty());
        assert_eq!(v.channels(), 3);
        assert_eq!(stats.dropped, 2);

        let empty = voxelize(&PointCloud::new(2), &unit_grid(4.0)).unwrap();
        assert_eq!((empty.len(), empty.channels()), (0, 5));
    }

    #[test]
    fn nuscenes_grid_dims() {
        assert_eq!(GridSpec::nuscenes().dims(), [384, 384, 1]);
    }

    #[test]
    fn dims_snap_near_integers() {
        let g = GridSpec::new([0.0; 3], [1.0; 3], [0.1; 3]).unwrap();
        assert_eq!(g.dims(), [10, 10, 10]);
        let g = GridSpec::new([0.0; 3], [1.0, 1.0, 1.05], [0.5; 3]).unwrap();
        assert_eq!(g.dims(), [2, 2, 3]);
    }

    #[test]
    fn invalid_grids_are_rejected() {
        assert!(GridSpec::new([0.0; 3], [0.0, 1.0, 1.0], [1.0; 3]).is_err());
        assert!(GridSpec::new([0.0; 3], [1.0; 3], [1.0, 0.0, 1.0]).is_err());
        assert!(GridSpec::from_dims([4, 0, 1]).is_err());
    }

    #[test]
    fn non_finite_point_names_index() {
        let err = PointCloud::from_flat(vec![0.0, 0.0, 0.0, 1.0, f64::NAN, 0.0], 3).unwrap_err();
        assert!(matches!(err, SegtError::Ingest { index: 1, .. }), "{err}");
        let mut cloud = PointCloud::new(0);
        let err = cloud.push([0.0, f64::INFINITY, 0.0], &[]).unwrap_err();
        assert!(matches!(err, SegtError::Ingest { index: 0, .. }));
        assert!(cloud.is_empty());
    }

    #[test]
    fn rows_sorted_by_zyx() {
        let mut cloud = PointCloud::new(0);
        for p in [[3.5, 0.5, 0.5], [0.5, 2.5, 0.5], [1.5, 0.5, 1.5], [0.5, 0.5, 0.5]] {
            cloud.push(p, &[]).unwrap();
        }
        let v = voxelize(&cloud, &unit_grid(4.0)).unwrap();
        assert_eq!(v.coords(), &[[0, 0, 0], [3, 0, 0], [0, 2, 0], [1, 0, 1]]);
    }

    #[test]
    fn voxel_set_rejects_duplicates_and_out_of_grid() {
        let g = unit_grid(2.0);
        let f = Matrix::zeros(2, 1);
        assert!(VoxelSet::new(f.clone(), vec![[0, 0, 0], [0, 0, 0]], g).is_err());
        assert!(VoxelSet::new(f.clone(), vec![[0, 0, 0], [2, 0, 0]], g).is_err());
        assert!(VoxelSet::new(f, vec![[0, 0, 0]], g).is_err());
    }

    #[test]
    fn bin_reader_checks_stride() {
        let floats: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0, 5.0]
            .iter()
            .flat_map(|f| f.to_le_bytes())
            .collect();
        let cloud = PointCloud::read_bin(&floats[..], 5).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.point(0), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(matches!(
            PointCloud::read_bin(&floats[..], 4),
            Err(SegtError::Config { .. })
        ));
        assert!(PointCloud::read_bin(&floats[..], 2).is_err());
    }

    #[test]
    fn csv_reader_takes_extras_from_header() {
        let text = "x,y,z,intensity\n0.2,0.2,0.1,0.4\n0.7, 0.9, 0.3, 0.6\n";
        let cloud = PointCloud::read_csv(text.as_bytes()).unwrap();
        assert_eq!((cloud.len(), cloud.extra_count()), (2, 1));
        assert!(PointCloud::read_csv("a,b,c\n1,2,3\n".as_bytes()).is_err());
        let err = PointCloud::read_csv("x,y,z\n1,2,oops\n".as_bytes()).unwrap_err();
        assert!(matches!(err, SegtError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn random_sets_are_distinct_and_seeded() {
        let g = GridSpec::from_dims([8, 8, 1]).unwrap();
        let a = random_voxel_set(&g, 64, 2, &mut SeededRng::new(5)).unwrap();
        let b = random_voxel_set(&g, 64, 2, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(random_voxel_set(&g, 65, 2, &mut SeededRng::new(5)).is_err());
    }
}
