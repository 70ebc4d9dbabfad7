use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// A batch of capsule grids held in a graph: `[batch, spatial..., types, dim]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapsuleGrid {
    pub var: Var,
    pub batch: usize,
    pub spatial: Vec<usize>,
    pub types: usize,
    pub dim: usize,
}

impl CapsuleGrid {
    pub fn rank(&self) -> usize {
        self.spatial.len()
    }

    pub fn positions(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch];
        s.extend(&self.spatial);
        s.extend([self.types, self.dim]);
        s
    }

    /// Wraps an existing `[batch, spatial..., types, dim]` node.
    pub fn from_var(g: &Graph, var: Var) -> Result<CapsuleGrid> {
        let s = g.shape(var);
        if s.len() < 4 {
            return Err(Error::ShapeMismatch(format!("capsule grid needs rank >= 4, got {s:?}")));
        }
        Ok(CapsuleGrid {
            var,
            batch: s[0],
            spatial: s[1..s.len() - 2].to_vec(),
            types: s[s.len() - 2],
            dim: s[s.len() - 1],
        })
    }
}

impl Graph {
    /// Reshapes feature maps `[batch, C, spatial...]` into `C / capsule_dim`
    /// capsule types; channel `t * capsule_dim + k` becomes component `k` of type `t`.
    pub fn to_primary_capsules(&mut self, features: Var, capsule_dim: usize) -> Result<CapsuleGrid> {
        let s = self.shape(features).to_vec();
        if s.len() < 3 {
            return Err(Error::ShapeMismatch(format!("features must be [N, C, spatial...], got {s:?}")));
        }
        let channels = s[1];
        if capsule_dim == 0 || !channels.is_multiple_of(capsule_dim) {
            return Err(Error::ShapeMismatch(format!(
                "{channels} channels are not divisible into capsules of dimension {capsule_dim}"
            )));
        }
        let rank = s.len() - 2;
        // [N, C, S...] -> [N, S..., C]
        let mut perm = vec![0];
        perm.extend(2..2 + rank);
        perm.push(1);
        let moved = self.permute(features, &perm)?;
        let mut shape = vec![s[0]];
        shape.extend(&s[2..]);
        shape.extend([channels / capsule_dim, capsule_dim]);
        let var = self.reshape(moved, &shape)?;
        Ok(CapsuleGrid {
            var,
            batch: s[0],
            spatial: s[2..].to_vec(),
            types: channels / capsule_dim,
            dim: capsule_dim,
        })
    }

    /// Inverse of [`Graph::to_primary_capsules`]: `[batch, types * dim, spatial...]`.
    pub fn capsules_to_features(&mut self, grid: &CapsuleGrid) -> Result<Var> {
        let rank = grid.rank();
        let mut flat = vec![grid.batch];
        flat.extend(&grid.spatial);
        flat.push(grid.types * grid.dim);
        let merged = self.reshape(grid.var, &flat)?;
        let mut perm = vec![0, rank + 1];
        perm.extend(1..=rank);
        self.permute(merged, &perm)
    }

    /// Euclidean length of every capsule: `[batch, spatial..., types]`.
    pub fn capsule_lengths(&mut self, grid: &CapsuleGrid) -> Var {
        self.vector_lengths(grid.var)
    }

    /// Concatenates grids along the capsule-type axis.
    pub fn concat_capsules(&mut self, parts: &[&CapsuleGrid]) -> Result<CapsuleGrid> {
        let first = parts[0];
        for p in parts {
            if p.spatial != first.spatial || p.dim != first.dim || p.batch != first.batch {
                return Err(Error::ShapeMismatch(format!(
                    "skip connection joins grids {:?} and {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
        }
        let vars: Vec<Var> = parts.iter().map(|p| p.var).collect();
        let axis = first.rank() + 1;
        let var = self.concat(&vars, axis)?;
        Ok(CapsuleGrid {
            var,
            batch: first.batch,
            spatial: first.spatial.clone(),
            types: parts.iter().map(|p| p.types).sum(),
            dim: first.dim,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Tensor};

    #[test]
    fn sixteen_channels_make_two_eight_dim_types() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[1, 16, 3, 5]));
        let grid = g.to_primary_capsules(f, 8).unwrap();
        assert_eq!((grid.types, grid.dim), (2, 8));
        assert_eq!(grid.shape(), vec![1, 3, 5, 2, 8]);
    }

    #[test]
    fn single_position_reshape_is_identity() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_vec(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let grid = g.to_primary_capsules(f, 4).unwrap();
        assert_eq!(g.value(grid.var).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn round_trip_restores_features_bitwise() {
        let t = Tensor::create(&[2, 6, 3, 4, 2], Init::Normal { seed: 5, mean: 0.0, std: 1.0 }).unwrap();
        let mut g = Graph::new();
        let f = g.constant(t.clone());
        let grid = g.to_primary_capsules(f, 3).unwrap();
        assert_eq!(g.value(grid.var).at(&[1, 2, 3, 1, 1, 2]), t.at(&[1, 5, 2, 3, 1]));
        let back = g.capsules_to_features(&grid).unwrap();
        assert_eq!(g.value(back), &t);
    }

    #[test]
    fn indivisible_channels_rejected() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[1, 10, 2, 2]));
        assert!(matches!(g.to_primary_capsules(f, 4), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn lengths_of_three_four_five() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_vec(&[1, 1, 1, 1, 2], vec![0.6, 0.8]).unwrap());
        let grid = CapsuleGrid::from_var(&g, v).unwrap();
        let l = g.capsule_lengths(&grid);
        assert!((g.value(l).item() - 1.0).abs() < 1e-15);
        let z = g.constant(Tensor::zeros(&[1, 2, 2, 3, 4]));
        let zg = CapsuleGrid::from_var(&g, z).unwrap();
        let zl = g.capsule_lengths(&zg);
        assert!(g.value(zl).data().iter().all(|&x| x == 0.0));
    }
}
