//! Mask sampling by ratio and patch size, and the coordinate layout of the
//! observable vector.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MaeError;
use crate::graph::{DimMap, LatentGraph, Mask, NodeId, NodeSet};
use crate::scalar::Scalar;

/// Draws masks covering `k = clamp(round(r * P), 1, P - 1)` of the `P`
/// contiguous patches of the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSampler {
    r: f64,
    s: usize,
    layout: Vec<NodeId>,
}

impl MaskSampler {
    pub fn new(layout: &[NodeId], r: f64, s: usize) -> Result<Self, MaeError> {
        if !(r > 0.0 && r < 1.0) {
            return Err(MaeError::Config(format!("masking ratio {r} outside (0, 1)")));
        }
        if s == 0 {
            return Err(MaeError::Config("patch size must be positive".into()));
        }
        if layout.len().div_ceil(s) < 2 {
            return Err(MaeError::LayoutTooSmall { observables: layout.len(), patch: s });
        }
        Ok(MaskSampler { r, s, layout: layout.to_vec() })
    }

    pub fn for_graph(g: &LatentGraph, r: f64, s: usize) -> Result<Self, MaeError> {
        MaskSampler::new(g.layout(), r, s)
    }

    pub fn ratio(&self) -> f64 {
        self.r
    }

    pub fn patch_size(&self) -> usize {
        self.s
    }

    pub fn num_patches(&self) -> usize {
        self.layout.len().div_ceil(self.s)
    }

    pub fn patches(&self) -> impl Iterator<Item = &[NodeId]> + '_ {
        self.layout.chunks(self.s)
    }

    /// Number of patches masked per draw.
    pub fn masked_patches(&self) -> usize {
        let p = self.num_patches();
        ((self.r * p as f64).round() as usize).clamp(1, p - 1)
    }

    pub fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Mask {
        let patches: Vec<&[NodeId]> = self.patches().collect();
        let mut picked = sample(rng, patches.len(), self.masked_patches()).into_vec();
        picked.sort_unstable();
        Mask::trusted(picked.into_iter().flat_map(|i| patches[i].iter().cloned()).collect())
    }
}

/// Arrangement of the layout used for boundary adjacency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    /// Neighbours at distance one in layout order.
    #[default]
    Line,
    /// Row-major grid with 4-neighbourhoods.
    Grid { cols: usize },
}

/// Observable nodes in layout order with their coordinate widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservableLayout {
    nodes: Vec<NodeId>,
    widths: Vec<usize>,
    #[serde(default)]
    geometry: Geometry,
}

impl ObservableLayout {
    pub fn new(nodes: Vec<NodeId>, widths: Vec<usize>) -> Result<Self, MaeError> {
        if nodes.len() != widths.len() || widths.contains(&0) {
            return Err(MaeError::Config("every layout node needs a positive width".into()));
        }
        Ok(ObservableLayout { nodes, widths, geometry: Geometry::Line })
    }

    /// Layout of `g` with widths taken from `dims`.
    pub fn from_dims(g: &LatentGraph, dims: &DimMap) -> Result<Self, MaeError> {
        let widths = g
            .layout()
            .iter()
            .map(|id| dims.get(id).copied().ok_or_else(|| MaeError::Config(format!("no width for `{id}`"))))
            .collect::<Result<_, _>>()?;
        ObservableLayout::new(g.layout().to_vec(), widths)
    }

    /// One coordinate per observable.
    pub fn unit(g: &LatentGraph) -> Self {
        ObservableLayout { nodes: g.layout().to_vec(), widths: vec![1; g.layout().len()], geometry: Geometry::Line }
    }

    pub fn with_geometry(mut self, geometry: Geometry) -> Result<Self, MaeError> {
        if let Geometry::Grid { cols } = geometry {
            if cols == 0 || self.nodes.len() % cols != 0 {
                return Err(MaeError::Config(format!("{} observables do not fill a grid with {cols} columns", self.nodes.len())));
            }
        }
        self.geometry = geometry;
        Ok(self)
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    /// Total coordinate count.
    pub fn width(&self) -> usize {
        self.widths.iter().sum()
    }

    /// Coordinate ranges of each node.
    pub fn spans(&self) -> impl Iterator<Item = (&NodeId, std::ops::Range<usize>)> + '_ {
        let mut at = 0;
        self.nodes.iter().zip(&self.widths).map(move |(id, &w)| {
            at += w;
            (id, at - w..at)
        })
    }

    fn check_mask(&self, mask: &Mask) -> Result<(), MaeError> {
        match mask.masked().iter().find(|id| !self.nodes.contains(id)) {
            Some(id) => Err(MaeError::Config(format!("masked node `{id}` is not in the layout"))),
            None => Ok(()),
        }
    }

    /// Coordinates of the masked nodes, in layout order.
    pub fn masked_coords(&self, mask: &Mask) -> Vec<usize> {
        self.spans().filter(|(id, _)| mask.masked().contains(*id)).flat_map(|(_, r)| r).collect()
    }

    pub fn visible_coords(&self, mask: &Mask) -> Vec<usize> {
        self.spans().filter(|(id, _)| !mask.masked().contains(*id)).flat_map(|(_, r)| r).collect()
    }

    /// 1 on masked coordinates, 0 elsewhere.
    pub fn indicator<T: Scalar>(&self, mask: &Mask) -> DVector<T> {
        let mut v = DVector::zeros(self.width());
        for k in self.masked_coords(mask) {
            v[k] = T::one();
        }
        v
    }

    fn neighbours(&self, i: usize) -> Vec<usize> {
        let n = self.nodes.len();
        match self.geometry {
            Geometry::Line => [i.checked_sub(1), (i + 1 < n).then_some(i + 1)].into_iter().flatten().collect(),
            Geometry::Grid { cols } => {
                let (r, c) = (i / cols, i % cols);
                let rows = n / cols;
                let mut out = Vec::with_capacity(4);
                if r > 0 {
                    out.push(i - cols);
                }
                if r + 1 < rows {
                    out.push(i + cols);
                }
                if c > 0 {
                    out.push(i - 1);
                }
                if c + 1 < cols {
                    out.push(i + 1);
                }
                out
            }
        }
    }

    /// Masked nodes with at least one visible neighbour.
    pub fn boundary(&self, mask: &Mask) -> NodeSet {
        let masked = |i: usize| mask.masked().contains(&self.nodes[i]);
        (0..self.nodes.len())
            .filter(|&i| masked(i) && self.neighbours(i).into_iter().any(|j| !masked(j)))
            .map(|i| self.nodes[i].clone())
            .collect()
    }

    /// Coordinates entering the reconstruction loss.
    pub fn loss_coords(&self, mask: &Mask, boundary_exclusion: bool) -> Result<Vec<usize>, MaeError> {
        self.check_mask(mask)?;
        let skip = if boundary_exclusion { self.boundary(mask) } else { NodeSet::new() };
        let coords: Vec<usize> = self
            .spans()
            .filter(|(id, _)| mask.masked().contains(*id) && !skip.contains(*id))
            .flat_map(|(_, r)| r)
            .collect();
        if coords.is_empty() {
            return Err(MaeError::EmptyLoss);
        }
        Ok(coords)
    }

    /// Selects the given columns of a row-per-sample matrix.
    pub fn select<T: Scalar>(m: &DMatrix<T>, cols: &[usize]) -> DMatrix<T> {
        m.select_columns(cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::node_set;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<NodeId> {
        (1..=n).map(|i| NodeId::new(format!("x{i}"))).collect()
    }

    #[test]
    fn clamping() {
        let s = MaskSampler::new(&ids(4), 0.05, 2).unwrap();
        assert_eq!(s.masked_patches(), 1);
        let s = MaskSampler::new(&ids(4), 0.95, 2).unwrap();
        assert_eq!(s.masked_patches(), 1);
        assert!(matches!(MaskSampler::new(&ids(3), 0.5, 2), Ok(_)));
        assert!(matches!(MaskSampler::new(&ids(2), 0.5, 2), Err(MaeError::LayoutTooSmall { .. })));
        assert!(MaskSampler::new(&ids(4), 1.0, 1).is_err());
    }

    #[test]
    fn masks_are_whole_patches() {
        let s = MaskSampler::new(&ids(8), 0.5, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let m = s.sample_mask(&mut rng);
            assert_eq!(m.masked().len(), 4);
            for p in s.patches() {
                let hit = p.iter().filter(|id| m.masked().contains(*id)).count();
                assert!(hit == 0 || hit == p.len());
            }
        }
    }

    #[test]
    fn grid_boundary() {
        let layout = ObservableLayout::new(ids(9), vec![1; 9]).unwrap().with_geometry(Geometry::Grid { cols: 3 }).unwrap();
        // centre pixel only: it touches four visible pixels
        let m = Mask::trusted(node_set(["x5"]));
        assert_eq!(layout.boundary(&m), node_set(["x5"]));
        // everything but a corner: only the corner's two neighbours are on the boundary
        let m = Mask::trusted(ids(8).into_iter().collect());
        assert_eq!(layout.boundary(&m), node_set(["x6", "x8"]));
        assert!(ObservableLayout::new(ids(8), vec![1; 8]).unwrap().with_geometry(Geometry::Grid { cols: 3 }).is_err());
    }
}
