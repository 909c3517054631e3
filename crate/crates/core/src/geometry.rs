//! Space-time grids on the unit torus or on the unit box with rectangular
//! obstacles.
//!
//! Spatial nodes are `x_{i,j} = (i h, j h)`. On the torus `i, j` run over
//! `0..Nh` and are understood modulo `Nh`; on the box they run over `0..=Nh`
//! and nodes strictly inside an obstacle are removed. Every admissible node
//! gets a compact index in `0..n_nodes()`, and grid functions are stored
//! slice by slice in that order.
//!
//! A *link* joins two horizontally or vertically adjacent admissible nodes
//! whose connecting segment does not run through the interior of an
//! obstacle. One-sided differences are only taken along links; channels of
//! the stacked fields that would need a missing link are structural zeros.

use crate::error::{Error, Result};

/// Periodic torus or state-constrained box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GeometryKind {
    Periodic,
    Box,
}

/// Neighbour directions, in the order of the four flux channels
/// `(b, c, b~, c~)`: forward x, backward x, forward y, backward y.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    East = 0,
    West = 1,
    North = 2,
    South = 3,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::East, Dir::West, Dir::North, Dir::South];

    pub fn opposite(self) -> Dir {
        match self {
            Dir::East => Dir::West,
            Dir::West => Dir::East,
            Dir::North => Dir::South,
            Dir::South => Dir::North,
        }
    }
}

/// Axis-aligned obstacle `[x1min, x1max] x [x2min, x2max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x1min: f64,
    pub x1max: f64,
    pub x2min: f64,
    pub x2max: f64,
}

impl Rect {
    pub fn new(x1min: f64, x1max: f64, x2min: f64, x2max: f64) -> Self {
        Rect {
            x1min,
            x1max,
            x2min,
            x2max,
        }
    }

    pub fn square(lo: f64, hi: f64) -> Self {
        Rect::new(lo, hi, lo, hi)
    }

    pub fn contains_closed(&self, x1: f64, x2: f64) -> bool {
        x1 >= self.x1min && x1 <= self.x1max && x2 >= self.x2min && x2 <= self.x2max
    }
}

/// Obstacle in grid units, `[i0, i1] x [j0, j1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct GridRect {
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
}

impl GridRect {
    fn strictly_contains(&self, i: usize, j: usize) -> bool {
        self.i0 < i && i < self.i1 && self.j0 < j && j < self.j1
    }

    fn on_boundary(&self, i: usize, j: usize) -> bool {
        let inside_closed = self.i0 <= i && i <= self.i1 && self.j0 <= j && j <= self.j1;
        inside_closed && !self.strictly_contains(i, j)
    }

    /// Whether the horizontal segment `(i, j) -- (i + 1, j)` runs through the
    /// open interior.
    fn cuts_horizontal(&self, i: usize, j: usize) -> bool {
        self.i0 <= i && i < self.i1 && self.j0 < j && j < self.j1
    }

    fn cuts_vertical(&self, i: usize, j: usize) -> bool {
        self.j0 <= j && j < self.j1 && self.i0 < i && i < self.i1
    }
}

/// Classification of a spatial node.
///
/// Edge and corner names refer to the side of the admissible region the
/// node sits on: an `EdgeLeft` node has no neighbour in the backward x
/// direction. Nodes on an obstacle face get the class of the matching outer
/// side (the left face of an obstacle is an `EdgeRight` of the admissible
/// region). Obstacle corners keep all four links and are `ObstacleCorner`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeClass {
    Interior,
    EdgeLeft,
    EdgeRight,
    EdgeBottom,
    EdgeTop,
    CornerBottomLeft,
    CornerBottomRight,
    CornerTopLeft,
    CornerTopRight,
    ObstacleCorner,
    Excluded,
}

impl NodeClass {
    pub fn is_boundary(self) -> bool {
        !matches!(self, NodeClass::Interior | NodeClass::Excluded)
    }

    pub fn is_corner(self) -> bool {
        matches!(
            self,
            NodeClass::CornerBottomLeft
                | NodeClass::CornerBottomRight
                | NodeClass::CornerTopLeft
                | NodeClass::CornerTopRight
        )
    }
}

/// Which of the four flux channels `(b, c, b~, c~)` exist at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelMask(u8);

impl ChannelMask {
    pub const FULL: ChannelMask = ChannelMask(0b1111);

    pub fn from_dirs(present: [bool; 4]) -> Self {
        let mut bits = 0u8;
        for (k, p) in present.iter().enumerate() {
            if *p {
                bits |= 1 << k;
            }
        }
        ChannelMask(bits)
    }

    pub fn has(self, dir: Dir) -> bool {
        self.0 & (1 << dir as u8) != 0
    }

    /// Whether flux channel `k` (1..=4 in the stacked layout) is present.
    /// Channel 0, the time derivative, is always present.
    pub fn has_channel(self, k: usize) -> bool {
        k == 0 || self.0 & (1 << (k - 1)) != 0
    }

    pub fn is_full(self) -> bool {
        self.0 == 0b1111
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }
}

/// Validated space-time grid.
#[derive(Debug, Clone)]
pub struct Geometry {
    kind: GeometryKind,
    nh: usize,
    nt: usize,
    horizon: f64,
    obstacles: Vec<Rect>,
    grid_obstacles: Vec<GridRect>,
    side: usize,
    /// grid position -> compact node index
    index: Vec<Option<usize>>,
    /// compact node index -> (i, j)
    coords: Vec<(usize, usize)>,
    neighbors: Vec<[Option<usize>; 4]>,
    classes: Vec<NodeClass>,
    masks: Vec<ChannelMask>,
}

fn grid_units(x: f64, nh: usize, what: &str) -> Result<usize> {
    let scaled = x * nh as f64;
    let rounded = scaled.round();
    if (scaled - rounded).abs() > 1e-9 * nh as f64 || rounded < 0.0 {
        return Err(Error::InvalidGeometry(format!(
            "obstacle coordinate {what} = {x} is not a multiple of h = 1/{nh}"
        )));
    }
    Ok(rounded as usize)
}

impl Geometry {
    pub fn new(
        kind: GeometryKind,
        nh: usize,
        nt: usize,
        horizon: f64,
        obstacles: Vec<Rect>,
    ) -> Result<Self> {
        if nh < 2 {
            return Err(Error::InvalidGeometry(format!("Nh must be at least 2, got {nh}")));
        }
        if nt < 2 {
            return Err(Error::InvalidGeometry(format!("NT must be at least 2, got {nt}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "horizon T must be positive, got {horizon}"
            )));
        }
        if kind == GeometryKind::Periodic && !obstacles.is_empty() {
            return Err(Error::InvalidGeometry(
                "obstacles are not allowed on the periodic domain".into(),
            ));
        }

        let mut grid_obstacles = Vec::with_capacity(obstacles.len());
        for rect in &obstacles {
            let g = GridRect {
                i0: grid_units(rect.x1min, nh, "x1min")?,
                i1: grid_units(rect.x1max, nh, "x1max")?,
                j0: grid_units(rect.x2min, nh, "x2min")?,
                j1: grid_units(rect.x2max, nh, "x2max")?,
            };
            if g.i0 >= g.i1 || g.j0 >= g.j1 {
                return Err(Error::InvalidGeometry(format!("obstacle {rect:?} is empty")));
            }
            if g.i0 == 0 || g.j0 == 0 || g.i1 >= nh || g.j1 >= nh {
                return Err(Error::InvalidGeometry(format!(
                    "obstacle {rect:?} must lie strictly inside (0,1)^2"
                )));
            }
            grid_obstacles.push(g);
        }

        let side = match kind {
            GeometryKind::Periodic => nh,
            GeometryKind::Box => nh + 1,
        };

        let mut index = vec![None; side * side];
        let mut coords = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                if grid_obstacles.iter().any(|g| g.strictly_contains(i, j)) {
                    continue;
                }
                index[i * side + j] = Some(coords.len());
                coords.push((i, j));
            }
        }

        let mut geom = Geometry {
            kind,
            nh,
            nt,
            horizon,
            obstacles,
            grid_obstacles,
            side,
            index,
            coords,
            neighbors: Vec::new(),
            classes: Vec::new(),
            masks: Vec::new(),
        };
        geom.build_links()?;
        Ok(geom)
    }

    pub fn periodic(nh: usize, nt: usize, horizon: f64) -> Result<Self> {
        Geometry::new(GeometryKind::Periodic, nh, nt, horizon, Vec::new())
    }

    pub fn unit_box(nh: usize, nt: usize, horizon: f64, obstacles: Vec<Rect>) -> Result<Self> {
        Geometry::new(GeometryKind::Box, nh, nt, horizon, obstacles)
    }

    fn build_links(&mut self) -> Result<()> {
        let n = self.coords.len();
        let mut neighbors = Vec::with_capacity(n);
        let mut classes = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for &(i, j) in &self.coords {
            let mut nb = [None; 4];
            for dir in Dir::ALL {
                nb[dir as usize] = self.link(i, j, dir);
            }
            let present = [nb[0].is_some(), nb[1].is_some(), nb[2].is_some(), nb[3].is_some()];
            if !present[0] && !present[1] || !present[2] && !present[3] {
                return Err(Error::InvalidGeometry(format!(
                    "node ({i}, {j}) is pinched between walls; obstacles must be separated \
                     from each other and from the outer boundary by at least one cell"
                )));
            }
            let on_obstacle = self.grid_obstacles.iter().any(|g| g.on_boundary(i, j));
            classes.push(class_from_links(present, on_obstacle));
            masks.push(ChannelMask::from_dirs(present));
            neighbors.push(nb);
        }
        self.neighbors = neighbors;
        self.classes = classes;
        self.masks = masks;
        Ok(())
    }

    fn link(&self, i: usize, j: usize, dir: Dir) -> Option<usize> {
        match self.kind {
            GeometryKind::Periodic => {
                let n = self.nh;
                let (ii, jj) = match dir {
                    Dir::East => ((i + 1) % n, j),
                    Dir::West => ((i + n - 1) % n, j),
                    Dir::North => (i, (j + 1) % n),
                    Dir::South => (i, (j + n - 1) % n),
                };
                self.index[ii * self.side + jj]
            }
            GeometryKind::Box => {
                let last = self.nh;
                let (ii, jj, cut) = match dir {
                    Dir::East if i < last => (i + 1, j, self.cuts_h(i, j)),
                    Dir::West if i > 0 => (i - 1, j, self.cuts_h(i - 1, j)),
                    Dir::North if j < last => (i, j + 1, self.cuts_v(i, j)),
                    Dir::South if j > 0 => (i, j - 1, self.cuts_v(i, j - 1)),
                    _ => return None,
                };
                if cut {
                    None
                } else {
                    self.index[ii * self.side + jj]
                }
            }
        }
    }

    fn cuts_h(&self, i: usize, j: usize) -> bool {
        self.grid_obstacles.iter().any(|g| g.cuts_horizontal(i, j))
    }

    fn cuts_v(&self, i: usize, j: usize) -> bool {
        self.grid_obstacles.iter().any(|g| g.cuts_vertical(i, j))
    }

    pub fn kind(&self) -> GeometryKind {
        self.kind
    }

    pub fn nh(&self) -> usize {
        self.nh
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn h(&self) -> f64 {
        1.0 / self.nh as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    pub fn obstacles(&self) -> &[Rect] {
        &self.obstacles
    }

    /// Number of grid positions per side (`Nh` on the torus, `Nh + 1` on the box).
    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of admissible spatial nodes.
    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    /// Total number of space-time nodes, `(NT + 1) * n_nodes`.
    pub fn n_total(&self) -> usize {
        (self.nt + 1) * self.n_nodes()
    }

    /// Number of space-time nodes carrying stacked channels, `NT * n_nodes`.
    pub fn n_stacked(&self) -> usize {
        self.nt * self.n_nodes()
    }

    pub fn coords(&self, node: usize) -> (usize, usize) {
        self.coords[node]
    }

    pub fn position(&self, node: usize) -> (f64, f64) {
        let (i, j) = self.coords[node];
        let h = self.h();
        (i as f64 * h, j as f64 * h)
    }

    /// Compact index of grid position `(i, j)`; on the torus the indices are
    /// reduced modulo `Nh`.
    pub fn node_index(&self, i: i64, j: i64) -> Option<usize> {
        let (i, j) = self.reduce(i, j)?;
        self.index[i * self.side + j]
    }

    fn reduce(&self, i: i64, j: i64) -> Option<(usize, usize)> {
        match self.kind {
            GeometryKind::Periodic => {
                let n = self.nh as i64;
                Some((i.rem_euclid(n) as usize, j.rem_euclid(n) as usize))
            }
            GeometryKind::Box => {
                let last = self.nh as i64;
                if (0..=last).contains(&i) && (0..=last).contains(&j) {
                    Some((i as usize, j as usize))
                } else {
                    None
                }
            }
        }
    }

    pub fn neighbor(&self, node: usize, dir: Dir) -> Option<usize> {
        self.neighbors[node][dir as usize]
    }

    pub fn neighbors(&self, node: usize) -> &[Option<usize>; 4] {
        &self.neighbors[node]
    }

    pub fn mask(&self, node: usize) -> ChannelMask {
        self.masks[node]
    }

    pub fn class_of(&self, node: usize) -> NodeClass {
        self.classes[node]
    }

    /// Class of grid position `(i, j)`.
    pub fn classify(&self, i: i64, j: i64) -> NodeClass {
        match self.node_index(i, j) {
            Some(node) => self.classes[node],
            None => NodeClass::Excluded,
        }
    }
}

fn class_from_links(present: [bool; 4], on_obstacle: bool) -> NodeClass {
    let [east, west, north, south] = present;
    match (east, west, north, south) {
        (true, true, true, true) if on_obstacle => NodeClass::ObstacleCorner,
        (true, true, true, true) => NodeClass::Interior,
        (true, false, true, true) => NodeClass::EdgeLeft,
        (false, true, true, true) => NodeClass::EdgeRight,
        (true, true, true, false) => NodeClass::EdgeBottom,
        (true, true, false, true) => NodeClass::EdgeTop,
        (true, false, true, false) => NodeClass::CornerBottomLeft,
        (false, true, true, false) => NodeClass::CornerBottomRight,
        (true, false, false, true) => NodeClass::CornerTopLeft,
        (false, true, false, true) => NodeClass::CornerTopRight,
        // pinched configurations are rejected before classification
        _ => unreachable!("node with opposite links missing"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_grid_is_all_interior() {
        let g = Geometry::periodic(16, 16, 1.0).unwrap();
        assert_eq!(g.n_total(), 16 * 16 * 17);
        assert!((0..g.n_nodes()).all(|k| g.class_of(k) == NodeClass::Interior));
        assert!((0..g.n_nodes()).all(|k| g.mask(k).is_full()));
        assert_eq!(g.classify(-3, 40), NodeClass::Interior);
        assert_eq!(g.node_index(-1, 16), g.node_index(15, 0));
    }

    #[test]
    fn box_without_obstacles_counts() {
        let nh = 10;
        let g = Geometry::unit_box(nh, 4, 1.0, vec![]).unwrap();
        let mut corners = 0;
        let mut edges = 0;
        let mut interior = 0;
        for k in 0..g.n_nodes() {
            match g.class_of(k) {
                c if c.is_corner() => corners += 1,
                NodeClass::Interior => interior += 1,
                c if c.is_boundary() => edges += 1,
                c => panic!("unexpected {c:?}"),
            }
        }
        assert_eq!(corners, 4);
        assert_eq!(edges, 4 * (nh - 1));
        assert_eq!(interior, (nh - 1) * (nh - 1));
        assert_eq!(g.classify(0, 5), NodeClass::EdgeLeft);
        assert_eq!(g.classify(10, 5), NodeClass::EdgeRight);
        assert_eq!(g.classify(5, 0), NodeClass::EdgeBottom);
        assert_eq!(g.classify(5, 10), NodeClass::EdgeTop);
        assert_eq!(g.classify(0, 0), NodeClass::CornerBottomLeft);
        assert_eq!(g.classify(10, 10), NodeClass::CornerTopRight);
        assert_eq!(g.classify(11, 0), NodeClass::Excluded);
    }

    #[test]
    fn obstacle_classification() {
        let g = Geometry::unit_box(10, 4, 1.0, vec![Rect::square(0.4, 0.6)]).unwrap();
        assert_eq!(g.classify(5, 5), NodeClass::Excluded);
        assert_eq!(g.n_nodes(), 121 - 1);
        for (i, j) in [(4, 4), (4, 5), (4, 6), (5, 4), (6, 4), (5, 6), (6, 5), (6, 6)] {
            assert!(g.classify(i, j).is_boundary(), "({i},{j})");
        }
        assert_eq!(g.classify(4, 5), NodeClass::EdgeRight);
        assert_eq!(g.classify(6, 5), NodeClass::EdgeLeft);
        assert_eq!(g.classify(5, 4), NodeClass::EdgeTop);
        assert_eq!(g.classify(5, 6), NodeClass::EdgeBottom);
        assert_eq!(g.classify(4, 4), NodeClass::ObstacleCorner);
        // links along the obstacle faces remain available
        let c = g.node_index(4, 4).unwrap();
        assert_eq!(g.neighbor(c, Dir::North), g.node_index(4, 5));
    }

    #[test]
    fn thin_obstacle_cuts_links_without_excluding_nodes() {
        // one cell wide: no node strictly inside, but the segments through it are cut
        let g = Geometry::unit_box(10, 4, 1.0, vec![Rect::new(0.4, 0.5, 0.3, 0.7)]).unwrap();
        assert_eq!(g.n_nodes(), 121);
        let a = g.node_index(4, 5).unwrap();
        assert_eq!(g.neighbor(a, Dir::East), None);
        let b = g.node_index(4, 3).unwrap();
        assert!(g.neighbor(b, Dir::East).is_some());
    }

    #[test]
    fn rejects_bad_obstacles() {
        let misaligned = Geometry::unit_box(10, 4, 1.0, vec![Rect::square(0.35, 0.6)]);
        assert!(matches!(misaligned, Err(Error::InvalidGeometry(_))));
        let touching = Geometry::unit_box(10, 4, 1.0, vec![Rect::new(0.0, 0.3, 0.4, 0.6)]);
        assert!(matches!(touching, Err(Error::InvalidGeometry(_))));
        let periodic = Geometry::new(GeometryKind::Periodic, 10, 4, 1.0, vec![Rect::square(0.4, 0.6)]);
        assert!(matches!(periodic, Err(Error::InvalidGeometry(_))));
        let pinched = Geometry::unit_box(
            10,
            4,
            1.0,
            vec![Rect::new(0.2, 0.4, 0.2, 0.8), Rect::new(0.4, 0.6, 0.2, 0.8)],
        );
        assert!(matches!(pinched, Err(Error::InvalidGeometry(_))));
        assert!(Geometry::periodic(1, 4, 1.0).is_err());
        assert!(Geometry::periodic(4, 1, 1.0).is_err());
        assert!(Geometry::periodic(4, 4, 0.0).is_err());
    }

    #[test]
    fn links_are_symmetric() {
        let g = Geometry::unit_box(12, 3, 1.0, vec![Rect::new(0.25, 0.5, 0.5, 0.75)]).unwrap();
        for k in 0..g.n_nodes() {
            for dir in Dir::ALL {
                if let Some(other) = g.neighbor(k, dir) {
                    assert_eq!(g.neighbor(other, dir.opposite()), Some(k));
                }
            }
        }
    }
}
