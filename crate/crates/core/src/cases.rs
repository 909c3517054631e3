//! Built-in scenarios and the sampling of their data on a grid.
//!
//! Initial densities are sampled as cell averages
//! `m~0_{ij} = h^{-2} ∫_{|x - x_ij|∞ < h/2} m0`, where the cell is clipped to
//! the admissible region (and wrapped on the torus). Terminal costs are
//! sampled at the nodes.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{Geometry, GeometryKind, Rect};
use crate::model::CostModel;

/// A nonnegative function restricted to a rectangle.
#[derive(Clone)]
pub struct Piece {
    pub support: Rect,
    pub density: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    /// when set, the piece is rescaled to this discrete mass
    pub target_mass: Option<f64>,
    /// constant densities are integrated exactly by area
    pub constant: Option<f64>,
}

impl fmt::Debug for Piece {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Piece")
            .field("support", &self.support)
            .field("target_mass", &self.target_mass)
            .field("constant", &self.constant)
            .finish_non_exhaustive()
    }
}

impl Piece {
    pub fn indicator(support: Rect) -> Self {
        Piece {
            support,
            density: Arc::new(|_, _| 1.0),
            target_mass: None,
            constant: Some(1.0),
        }
    }

    pub fn smooth(support: Rect, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Piece {
            support,
            density: Arc::new(f),
            target_mass: None,
            constant: None,
        }
    }

    pub fn with_mass(mut self, mass: f64) -> Self {
        self.target_mass = Some(mass);
        self
    }
}

#[derive(Debug, Clone)]
pub enum InitialDensity {
    /// sum of pieces
    Pieces(Vec<Piece>),
    /// cell averages given directly on the `(Nh+1)²` (box) or `Nh²` (torus)
    /// grid, row `i` and column `j`
    Grid { nh: usize, values: Vec<f64> },
}

#[derive(Clone)]
pub enum TerminalCost {
    Function(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
    Grid { nh: usize, values: Vec<f64> },
}

impl fmt::Debug for TerminalCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalCost::Function(_) => f.write_str("Function(..)"),
            TerminalCost::Grid { nh, .. } => write!(f, "Grid {{ nh: {nh}, .. }}"),
        }
    }
}

/// Model data of a run: geometry family, cost and boundary data.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub kind: GeometryKind,
    pub obstacles: Vec<Rect>,
    pub horizon: f64,
    pub cost: CostModel,
    pub m0: InitialDensity,
    pub terminal: TerminalCost,
    /// rescale the sampled density to unit mass
    pub normalize: bool,
}

/// Names accepted by [`by_name`].
pub const BUILT_IN: [&str; 5] = ["tc1", "tc2-periodic", "tc2-box", "tc2-obstacle", "tc3"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tc2Variant {
    Periodic,
    Box,
    BoxWithObstacle,
}

fn closed_indicator(rect: Rect, periodic: bool) -> impl Fn(f64, f64) -> f64 {
    move |x, y| {
        let hit = if periodic {
            [0.0, 1.0]
                .iter()
                .any(|dx| [0.0, 1.0].iter().any(|dy| rect.contains_closed(x + dx, y + dy)))
        } else {
            rect.contains_closed(x, y)
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

/// Evacuation of a square: `m0 = u_T = 1_{[1/4,3/4]²}` on the torus,
/// `α = 0.5`, `β = 2`, `ℓ = m`.
pub fn test_case_1() -> Scenario {
    let square = Rect::square(0.25, 0.75);
    Scenario {
        name: "tc1".into(),
        kind: GeometryKind::Periodic,
        obstacles: Vec::new(),
        horizon: 1.0,
        cost: CostModel::linear(0.5, 2.0, 1.0).expect("valid parameters"),
        m0: InitialDensity::Pieces(vec![Piece::indicator(square)]),
        terminal: TerminalCost::Function(Arc::new(closed_indicator(square, true))),
        normalize: true,
    }
}

/// From one corner to the opposite one: `m0 = 1_{[0,0.2]²}`,
/// `u_T = 1 - 1_{[0.8,1]²}`, `α = 0.01`, `β = 2`, `ℓ = coeff · m`.
pub fn test_case_2(variant: Tc2Variant, ell_coeff: f64) -> Result<Scenario> {
    let (name, kind, obstacles) = match variant {
        Tc2Variant::Periodic => ("tc2-periodic", GeometryKind::Periodic, vec![]),
        Tc2Variant::Box => ("tc2-box", GeometryKind::Box, vec![]),
        Tc2Variant::BoxWithObstacle => ("tc2-obstacle", GeometryKind::Box, vec![Rect::square(0.4, 0.6)]),
    };
    let target = closed_indicator(Rect::square(0.8, 1.0), kind == GeometryKind::Periodic);
    Ok(Scenario {
        name: name.into(),
        kind,
        obstacles,
        horizon: 1.0,
        cost: CostModel::linear(0.01, 2.0, ell_coeff)?,
        m0: InitialDensity::Pieces(vec![Piece::indicator(Rect::square(0.0, 0.2))]),
        terminal: TerminalCost::Function(Arc::new(move |x, y| 1.0 - target(x, y))),
        normalize: true,
    })
}

/// Small hump against peaky hump, each of mass 1/2, with
/// `u_T = -exp(-20 |x|²)`.
pub fn test_case_3(alpha: f64, ell_coeff: f64, kind: GeometryKind) -> Result<Scenario> {
    let small = Piece::smooth(Rect::new(0.5, 1.0, 0.0, 0.5), |x, y| {
        (-(2.0 * PI * x).sin() * (2.0 * PI * y).sin() - 0.5).max(0.0)
    })
    .with_mass(0.5);
    let (x0, y0) = (0.25, 0.75);
    let peaky = Piece::smooth(Rect::new(0.0, 0.5, 0.5, 1.0), move |x, y| {
        (-400.0 * ((x - x0).powi(2) + (y - y0).powi(2))).exp()
    })
    .with_mass(0.5);
    Ok(Scenario {
        name: "tc3".into(),
        kind,
        obstacles: Vec::new(),
        horizon: 1.0,
        cost: CostModel::linear(alpha, 2.0, ell_coeff)?,
        m0: InitialDensity::Pieces(vec![small, peaky]),
        terminal: TerminalCost::Function(Arc::new(|x, y| -(-20.0 * (x * x + y * y)).exp())),
        normalize: true,
    })
}

/// Built-in scenario with its default parameters.
pub fn by_name(name: &str) -> Result<Scenario> {
    match name {
        "tc1" => Ok(test_case_1()),
        "tc2-periodic" => test_case_2(Tc2Variant::Periodic, 0.001),
        "tc2-box" => test_case_2(Tc2Variant::Box, 0.001),
        "tc2-obstacle" => test_case_2(Tc2Variant::BoxWithObstacle, 0.001),
        "tc3" => test_case_3(0.3, 0.01, GeometryKind::Box),
        other => Err(Error::InvalidParameter(format!(
            "unknown scenario '{other}' (built-in: {})",
            BUILT_IN.join(", ")
        ))),
    }
}

/// One-line description for listings.
pub fn describe(name: &str) -> &'static str {
    match name {
        "tc1" => "evacuation of a square, torus, alpha=0.5, l(m)=m",
        "tc2-periodic" => "corner to corner, torus, alpha=0.01, l(m)=0.001m",
        "tc2-box" => "corner to corner, state constraints, alpha=0.01, l(m)=0.001m",
        "tc2-obstacle" => "corner to corner around the obstacle [0.4,0.6]^2, state constraints",
        "tc3" => "small hump vs peaky hump, state constraints, alpha=0.3, l(m)=0.01m",
        _ => "",
    }
}

/// Composite 5-point Gauss-Legendre rule on a 4x4 split of each rectangle.
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];
const SPLIT: usize = 4;

fn integrate_rect(f: &dyn Fn(f64, f64) -> f64, r: &Rect) -> f64 {
    let (wx, wy) = ((r.x1max - r.x1min) / SPLIT as f64, (r.x2max - r.x2min) / SPLIT as f64);
    let mut total = 0.0;
    for a in 0..SPLIT {
        for b in 0..SPLIT {
            let cx = r.x1min + (a as f64 + 0.5) * wx;
            let cy = r.x2min + (b as f64 + 0.5) * wy;
            for (xi, wi) in GL_NODES.iter().zip(GL_WEIGHTS) {
                for (yj, wj) in GL_NODES.iter().zip(GL_WEIGHTS) {
                    total += wi * wj * f(cx + 0.5 * wx * xi, cy + 0.5 * wy * yj);
                }
            }
        }
    }
    total * wx * wy / 4.0
}

fn intersect(a: &Rect, b: &Rect) -> Option<Rect> {
    let r = Rect::new(
        a.x1min.max(b.x1min),
        a.x1max.min(b.x1max),
        a.x2min.max(b.x2min),
        a.x2max.min(b.x2max),
    );
    (r.x1max > r.x1min && r.x2max > r.x2min).then_some(r)
}

fn area(r: &Rect) -> f64 {
    (r.x1max - r.x1min) * (r.x2max - r.x2min)
}

fn shifted(r: &Rect, dx: f64, dy: f64) -> Rect {
    Rect::new(r.x1min + dx, r.x1max + dx, r.x2min + dy, r.x2max + dy)
}

/// `∫_{cell ∩ support ∖ obstacles} piece`.
fn piece_integral(geom: &Geometry, piece: &Piece, cell: &Rect) -> f64 {
    let shifts: &[f64] = match geom.kind() {
        GeometryKind::Periodic => &[-1.0, 0.0, 1.0],
        GeometryKind::Box => &[0.0],
    };
    let domain = Rect::square(0.0, 1.0);
    let integral = |r: &Rect, dx: f64, dy: f64| -> f64 {
        match piece.constant {
            Some(c) => c * area(r),
            None => {
                let f = &piece.density;
                integrate_rect(&|x, y| f(x - dx, y - dy), r)
            }
        }
    };
    let mut total = 0.0;
    for &dx in shifts {
        for &dy in shifts {
            // support copy shifted onto the cell's side of the torus
            let support = shifted(&piece.support, dx, dy);
            let Some(region) = intersect(cell, &support) else {
                continue;
            };
            let Some(region) = (if geom.kind() == GeometryKind::Box {
                intersect(&region, &domain)
            } else {
                Some(region)
            }) else {
                continue;
            };
            total += integral(&region, dx, dy);
            for obstacle in geom.obstacles() {
                if let Some(inside) = intersect(&region, obstacle) {
                    total -= integral(&inside, dx, dy);
                }
            }
        }
    }
    total
}

fn grid_position(geom: &Geometry, node: usize, nh: usize) -> usize {
    let (i, j) = geom.coords(node);
    let side = match geom.kind() {
        GeometryKind::Periodic => nh,
        GeometryKind::Box => nh + 1,
    };
    i * side + j
}

fn check_grid(geom: &Geometry, nh: usize, values: &[f64], what: &str) -> Result<()> {
    if nh != geom.nh() {
        return Err(Error::InvalidParameter(format!(
            "{what} grid was given for Nh = {nh} but the geometry has Nh = {}",
            geom.nh()
        )));
    }
    let side = geom.side();
    if values.len() != side * side {
        return Err(Error::ShapeMismatch {
            expected: side * side,
            got: values.len(),
        });
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{what} contains the non-finite value {bad}")));
    }
    Ok(())
}

impl Scenario {
    pub fn geometry(&self, nh: usize, nt: usize) -> Result<Geometry> {
        Geometry::new(self.kind, nh, nt, self.horizon, self.obstacles.clone())
    }

    /// Cell averages of the initial density on the admissible nodes.
    pub fn sample_m0(&self, geom: &Geometry) -> Result<Vec<f64>> {
        let nodes = geom.n_nodes();
        let h = geom.h();
        let h2 = h * h;
        let mut m0 = match &self.m0 {
            InitialDensity::Grid { nh, values } => {
                check_grid(geom, *nh, values, "initial density")?;
                if let Some(bad) = values.iter().find(|v| **v < 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "initial density must be nonnegative, found {bad}"
                    )));
                }
                (0..nodes).map(|p| values[grid_position(geom, p, *nh)]).collect()
            }
            InitialDensity::Pieces(pieces) => {
                let mut total = vec![0.0; nodes];
                for piece in pieces {
                    let mut part: Vec<f64> = (0..nodes)
                        .map(|p| {
                            let (x, y) = geom.position(p);
                            let cell = Rect::new(x - h / 2.0, x + h / 2.0, y - h / 2.0, y + h / 2.0);
                            piece_integral(geom, piece, &cell) / h2
                        })
                        .collect();
                    if let (true, Some(mass)) = (self.normalize, piece.target_mass) {
                        scale_to(&mut part, h2, mass)?;
                    }
                    for (t, v) in total.iter_mut().zip(part) {
                        *t += v.max(0.0);
                    }
                }
                total
            }
        };
        if self.normalize {
            scale_to(&mut m0, h2, 1.0)?;
        }
        Ok(m0)
    }

    /// Terminal cost at the admissible nodes.
    pub fn sample_terminal(&self, geom: &Geometry) -> Result<Vec<f64>> {
        match &self.terminal {
            TerminalCost::Function(f) => Ok((0..geom.n_nodes())
                .map(|p| {
                    let (x, y) = geom.position(p);
                    f(x, y)
                })
                .collect()),
            TerminalCost::Grid { nh, values } => {
                check_grid(geom, *nh, values, "terminal cost")?;
                Ok((0..geom.n_nodes()).map(|p| values[grid_position(geom, p, *nh)]).collect())
            }
        }
    }
}

fn scale_to(values: &mut [f64], h2: f64, mass: f64) -> Result<()> {
    let total = h2 * values.iter().sum::<f64>();
    if !(total > 0.0) {
        return Err(Error::InvalidParameter(
            "initial density has no mass on the admissible region".into(),
        ));
    }
    let s = mass / total;
    values.iter_mut().for_each(|v| *v *= s);
    Ok(())
}
