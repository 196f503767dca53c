use rayon::prelude::*;

use super::hilbert::encode_unchecked;
use super::{curve_dims, transform, ExpansionConfig, Strategy};
use crate::error::{Result, SegtError};
use crate::tensor::{Matrix, Real};
use crate::voxelizer::VoxelSet;

/// A voxel ordering: `order[rank]` is the voxel row at position `rank` of the
/// ordered field, `inverse` undoes it, and `keys[row]` holds the
/// `(global, local)` curve indices of voxel `row`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerializationPlan {
    order: Vec<usize>,
    inverse: Vec<usize>,
    keys: Vec<(u64, u64)>,
}

impl SerializationPlan {
    pub fn identity(n: usize) -> Self {
        SerializationPlan {
            order: (0..n).collect(),
            inverse: (0..n).collect(),
            keys: (0..n as u64).map(|i| (i, 0)).collect(),
        }
    }

    /// Plan from an explicit order. Keys are the ranks.
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let inverse = invert(&order)?;
        let keys = inverse.iter().map(|&r| (r as u64, 0)).collect();
        Ok(SerializationPlan {
            order,
            inverse,
            keys,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn keys(&self) -> &[(u64, u64)] {
        &self.keys
    }

    /// `items` rearranged into ordered-field positions.
    pub fn gather_items<X: Copy>(&self, items: &[X]) -> Vec<X> {
        self.order.iter().map(|&i| items[i]).collect()
    }
}

fn invert(order: &[usize]) -> Result<Vec<usize>> {
    let mut inverse = vec![usize::MAX; order.len()];
    for (rank, &row) in order.iter().enumerate() {
        if row >= order.len() || inverse[row] != usize::MAX {
            return Err(SegtError::shape(format!("order is not a permutation (row {row})")));
        }
        inverse[row] = rank;
    }
    Ok(inverse)
}

/// Orders `voxels` along the two-level curve of `strategy`.
pub fn serialize(voxels: &VoxelSet, strategy: Strategy, cfg: &ExpansionConfig) -> Result<SerializationPlan> {
    serialize_coords(voxels.coords(), voxels.grid().dims(), strategy, cfg)
}

/// Each coordinate is moved into the strategy frame, split into a coarse cell
/// (`>> l_lcl`) and an offset (`& (2^l_lcl - 1)`), and keyed by the Hilbert
/// index of each. The order sorts `(global, local)` ascending. Local curves
/// use the base orientation in every coarse cell.
pub fn serialize_coords(
    coords: &[[u32; 3]],
    dims: [u32; 3],
    strategy: Strategy,
    cfg: &ExpansionConfig,
) -> Result<SerializationPlan> {
    cfg.check_covers(dims)?;
    if let Some((i, c)) = coords
        .iter()
        .enumerate()
        .find(|(_, c)| (0..3).any(|a| c[a] >= dims[a]))
    {
        return Err(SegtError::domain(format!("voxel {i} at {c:?} lies outside grid {dims:?}")));
    }
    let n = curve_dims(dims) as u32;
    let side = cfg.padded_side();
    let (l_glb, l_lcl) = (cfg.l_glb(), cfg.l_lcl());
    let local_mask = (1u64 << l_lcl) - 1;

    let keys: Vec<(u64, u64)> = coords
        .par_iter()
        .map(|&c| {
            let t = transform(c, strategy, side);
            let g = [(t[0] >> l_lcl) as u32, (t[1] >> l_lcl) as u32, (t[2] >> l_lcl) as u32];
            let l = [
                (t[0] & local_mask) as u32,
                (t[1] & local_mask) as u32,
                (t[2] & local_mask) as u32,
            ];
            (encode_unchecked(g, l_glb, n), encode_unchecked(l, l_lcl, n))
        })
        .collect();

    let local_bits = n * l_lcl;
    let packed = |(g, l): (u64, u64)| ((g as u128) << local_bits) | l as u128;
    let mut order: Vec<usize> = (0..coords.len()).collect();
    // Keys are distinct for distinct coordinates, so an unstable sort is
    // still deterministic.
    order.par_sort_unstable_by_key(|&i| packed(keys[i]));
    let inverse = invert(&order)?;
    Ok(SerializationPlan {
        order,
        inverse,
        keys,
    })
}

fn check_rows<T>(features: &Matrix<T>, plan: &SerializationPlan, what: &str) -> Result<()>
where
    T: Real,
{
    if features.rows() != plan.len() {
        return Err(SegtError::shape(format!(
            "{what}: {} rows for a plan over {} voxels",
            features.rows(),
            plan.len()
        )));
    }
    Ok(())
}

/// `out[rank] = features[order[rank]]`: voxel field to ordered field.
pub fn gather<T: Real>(features: &Matrix<T>, plan: &SerializationPlan) -> Result<Matrix<T>> {
    check_rows(features, plan, "gather")?;
    let mut out = Matrix::zeros(features.rows(), features.cols());
    out.par_rows_mut()
        .zip(plan.order.par_iter())
        .for_each(|(dst, &src)| dst.copy_from_slice(features.row(src)));
    Ok(out)
}

/// `out[order[rank]] = features[rank]`: ordered field back to voxel rows.
pub fn scatter<T: Real>(features: &Matrix<T>, plan: &SerializationPlan) -> Result<Matrix<T>> {
    check_rows(features, plan, "scatter")?;
    let mut out = Matrix::zeros(features.rows(), features.cols());
    out.par_rows_mut()
        .zip(plan.inverse.par_iter())
        .for_each(|(dst, &rank)| dst.copy_from_slice(features.row(rank)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxelizer::GridSpec;

    fn set(coords: &[[u32; 3]], dims: [u32; 3]) -> VoxelSet {
        let f = Matrix::from_fn(coords.len(), 1, |r, _| r as f64);
        VoxelSet::new(f, coords.to_vec(), GridSpec::from_dims(dims).unwrap()).unwrap()
    }

    #[test]
    fn three_voxel_orders() {
        let v = set(&[[0, 0, 0], [1, 0, 0], [0, 1, 0]], [2, 2, 1]);
        let cfg = ExpansionConfig::new(1, 0).unwrap();
        let plus = serialize(&v, Strategy::Plus, &cfg).unwrap();
        assert_eq!(plus.order(), &[0, 2, 1]);
        assert_eq!(plus.keys(), &[(0, 0), (3, 0), (1, 0)]);
        let minus = serialize(&v, Strategy::Minus, &cfg).unwrap();
        assert_ne!(minus.order(), plus.order());
        assert_eq!(minus.order(), &[2, 1, 0]);
    }

    #[test]
    fn empty_set_gives_empty_plan() {
        let v = set(&[], [4, 4, 1]);
        let plan = serialize(&v, Strategy::Plus, &ExpansionConfig::new(2, 0).unwrap()).unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn coverage_violation_is_config_error() {
        let v = set(&[[0, 0, 0]], [8, 8, 1]);
        let err = serialize(&v, Strategy::Plus, &ExpansionConfig::new(2, 0).unwrap()).unwrap_err();
        assert!(matches!(err, SegtError::Config { .. }));
    }

    #[test]
    fn gather_and_scatter_by_definition() {
        let rows = Matrix::from_vec(3, 2, vec![1., 1., 2., 2., 3., 3.]).unwrap();
        let plan = SerializationPlan::from_order(vec![2, 0, 1]).unwrap();
        let g = gather(&rows, &plan).unwrap();
        assert_eq!(g.as_slice(), &[3., 3., 1., 1., 2., 2.]);
        assert_eq!(scatter(&g, &plan).unwrap(), rows);
        let id = SerializationPlan::identity(3);
        assert_eq!(gather(&rows, &id).unwrap(), rows);
        assert_eq!(scatter(&rows, &id).unwrap(), rows);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let rows = Matrix::<f64>::zeros(2, 2);
        let plan = SerializationPlan::identity(3);
        assert!(matches!(gather(&rows, &plan), Err(SegtError::Shape(_))));
        assert!(matches!(scatter(&rows, &plan), Err(SegtError::Shape(_))));
        assert!(SerializationPlan::from_order(vec![0, 0]).is_err());
        assert!(SerializationPlan::from_order(vec![0, 2]).is_err());
    }

    #[test]
    fn three_dimensional_grid_uses_z() {
        let v = set(&[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]], [4, 4, 4]);
        let plan = serialize(&v, Strategy::Plus, &ExpansionConfig::new(2, 0).unwrap()).unwrap();
        let distinct: std::collections::HashSet<_> = plan.keys().iter().collect();
        assert_eq!(distinct.len(), 4);
    }
}
