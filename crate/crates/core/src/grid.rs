use crate::error::{LqcError, Result};

/// Relative tolerance used when matching nodes of two grids.
const NODE_TOL: f64 = 1e-12;

/// A partition `0 = t_0 < t_1 < ... < t_N = T` of the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `intervals` equal steps on `[0, horizon]`.
    pub fn uniform(horizon: f64, intervals: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(LqcError::Grid(format!("horizon must be positive, got {horizon}")));
        }
        if intervals == 0 {
            return Err(LqcError::Grid("a grid needs at least one interval".into()));
        }
        let h = horizon / intervals as f64;
        let mut nodes: Vec<f64> = (0..intervals).map(|i| i as f64 * h).collect();
        nodes.push(horizon);
        Ok(Self { nodes })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(LqcError::Grid("a grid needs at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(LqcError::Grid(format!("grid must start at 0, starts at {}", nodes[0])));
        }
        for w in nodes.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(LqcError::Grid(format!(
                    "nodes must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn num_intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Length of interval `i`.
    pub fn step(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    /// Mesh size `max_i (t_{i+1} - t_i)`.
    pub fn mesh(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Split every interval into `factor` equal sub-intervals.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(LqcError::Grid("refinement factor must be positive".into()));
        }
        let mut nodes = Vec::with_capacity(self.num_intervals() * factor + 1);
        for w in self.nodes.windows(2) {
            let h = (w[1] - w[0]) / factor as f64;
            nodes.extend((0..factor).map(|j| w[0] + j as f64 * h));
        }
        nodes.push(self.horizon());
        Ok(Self { nodes })
    }

    /// Index of the node equal to `t` (within tolerance), if any.
    pub fn find_node(&self, t: f64) -> Option<usize> {
        let tol = NODE_TOL * self.horizon().max(1.0);
        let pos = self.nodes.partition_point(|&x| x < t - tol);
        (pos < self.nodes.len() && (self.nodes[pos] - t).abs() <= tol).then_some(pos)
    }

    /// Interval index `i` with `t_i <= t < t_{i+1}`; `T` maps to the last interval.
    pub fn interval_index(&self, t: f64) -> usize {
        let n = self.num_intervals();
        let pos = self.nodes.partition_point(|&x| x <= t);
        pos.saturating_sub(1).min(n - 1)
    }

    /// `true` when every node of `coarse` is a node of `self` and both share the horizon.
    pub fn refines(&self, coarse: &TimeGrid) -> bool {
        let tol = NODE_TOL * self.horizon().max(1.0);
        (self.horizon() - coarse.horizon()).abs() <= tol
            && coarse.nodes.iter().all(|&t| self.find_node(t).is_some())
    }

    /// For each interval of `self`, the index of the interval of `coarse`
    /// containing it. Fails unless `self` refines `coarse`.
    pub fn interval_map(&self, coarse: &TimeGrid) -> Result<Vec<usize>> {
        if !self.refines(coarse) {
            return Err(LqcError::Grid(format!(
                "grid with {} intervals does not refine grid with {} intervals",
                self.num_intervals(),
                coarse.num_intervals()
            )));
        }
        Ok(self
            .nodes
            .windows(2)
            .map(|w| coarse.interval_index(0.5 * (w[0] + w[1])))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_basics() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.mesh(), 0.25);
        assert_eq!(g.interval_index(0.0), 0);
        assert_eq!(g.interval_index(0.3), 1);
        assert_eq!(g.interval_index(1.0), 3);
    }

    #[test]
    fn rejects_bad_nodes() {
        assert!(TimeGrid::from_nodes(vec![0.0]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.1, 1.0]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeGrid::uniform(0.0, 3).is_err());
    }

    #[test]
    fn refinement_maps_back() {
        let coarse = TimeGrid::from_nodes(vec![0.0, 0.3, 1.0]).unwrap();
        let fine = coarse.refine(3).unwrap();
        assert_eq!(fine.num_intervals(), 6);
        assert!(fine.refines(&coarse));
        assert_eq!(fine.interval_map(&coarse).unwrap(), vec![0, 0, 0, 1, 1, 1]);
        assert!(coarse.interval_map(&fine).is_err());
        let u128 = TimeGrid::uniform(1.0, 128).unwrap();
        for m in [8, 16, 32, 64, 128] {
            assert!(u128.refines(&TimeGrid::uniform(1.0, m).unwrap()));
        }
    }
}
