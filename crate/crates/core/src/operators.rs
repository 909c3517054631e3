//! Grid functions and the finite-difference building blocks: one-sided
//! differences, the space-time operator `Λ` and its adjoint, weighted inner
//! products and the discrete continuity residual.
//!
//! `Λ` maps a grid function `φ` (slices `n = 0..=NT`) to five channels on the
//! slices `n = 1..=NT`:
//!
//! ```text
//! (Λφ)^n = ( (φ^n - φ^{n-1}) / Δt,
//!            (D1+ φ^{n-1})_{i,j}, (D1+ φ^{n-1})_{i-1,j},
//!            (D2+ φ^{n-1})_{i,j}, (D2+ φ^{n-1})_{i,j-1} )
//! ```
//!
//! Channels whose difference would leave the admissible region are stored
//! as zeros. Both spaces carry the same `h² Δt` weight, so the adjoint is the
//! plain transpose.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Dir, Geometry};

/// A real value per space-time node, stored slice by slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    slices: usize,
    nodes: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(slices: usize, nodes: usize) -> Self {
        ScalarField {
            slices,
            nodes,
            data: vec![0.0; slices * nodes],
        }
    }

    /// Zero field on all `NT + 1` time slices of `geom`.
    pub fn on(geom: &Geometry) -> Self {
        ScalarField::zeros(geom.nt() + 1, geom.n_nodes())
    }

    pub fn from_vec(slices: usize, nodes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != slices * nodes {
            return Err(Error::ShapeMismatch {
                expected: slices * nodes,
                got: data.len(),
            });
        }
        Ok(ScalarField { slices, nodes, data })
    }

    /// Repeats one spatial slice on every time slice.
    pub fn constant_in_time(slices: usize, slice: &[f64]) -> Self {
        let nodes = slice.len();
        let mut data = Vec::with_capacity(slices * nodes);
        for _ in 0..slices {
            data.extend_from_slice(slice);
        }
        ScalarField { slices, nodes, data }
    }

    pub fn from_fn(geom: &Geometry, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut out = ScalarField::on(geom);
        for n in 0..out.slices {
            for k in 0..out.nodes {
                out.data[n * out.nodes + k] = f(n, k);
            }
        }
        out
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, n: usize, node: usize) -> f64 {
        self.data[n * self.nodes + node]
    }

    #[inline]
    pub fn set(&mut self, n: usize, node: usize, v: f64) {
        self.data[n * self.nodes + node] = v;
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        &self.data[n * self.nodes..(n + 1) * self.nodes]
    }

    pub fn slice_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.data[n * self.nodes..(n + 1) * self.nodes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same(&self, other: &ScalarField) -> Result<()> {
        if self.slices != other.slices || self.nodes != other.nodes {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(())
    }

    pub fn sub(&self, other: &ScalarField) -> Result<ScalarField> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(ScalarField {
            slices: self.slices,
            nodes: self.nodes,
            data,
        })
    }
}

/// Five channels per node on the slices `n = 1..=NT`; either `(a, b, c, b~, c~)`
/// for `q` and `Λφ`, or `(m, y, z, y~, z~)` for `σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stacked5Field {
    nt: usize,
    nodes: usize,
    data: Vec<[f64; 5]>,
}

impl Stacked5Field {
    pub fn zeros(nt: usize, nodes: usize) -> Self {
        Stacked5Field {
            nt,
            nodes,
            data: vec![[0.0; 5]; nt * nodes],
        }
    }

    pub fn on(geom: &Geometry) -> Self {
        Stacked5Field::zeros(geom.nt(), geom.n_nodes())
    }

    pub fn from_vec(nt: usize, nodes: usize, data: Vec<[f64; 5]>) -> Result<Self> {
        if data.len() != nt * nodes {
            return Err(Error::ShapeMismatch {
                expected: nt * nodes,
                got: data.len(),
            });
        }
        Ok(Stacked5Field { nt, nodes, data })
    }

    /// Random-access builder; `f(n, node)` is called for `n = 1..=NT`.
    /// Channels not present in the node's mask are zeroed.
    pub fn from_fn(geom: &Geometry, mut f: impl FnMut(usize, usize) -> [f64; 5]) -> Self {
        let mut out = Stacked5Field::on(geom);
        for n in 1..=geom.nt() {
            for k in 0..geom.n_nodes() {
                let mut v = f(n, k);
                let mask = geom.mask(k);
                for (c, x) in v.iter_mut().enumerate() {
                    if !mask.has_channel(c) {
                        *x = 0.0;
                    }
                }
                *out.at_mut(n, k) = v;
            }
        }
        out
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Channels at time slice `n` (1-based, `1..=NT`).
    #[inline]
    pub fn at(&self, n: usize, node: usize) -> &[f64; 5] {
        &self.data[(n - 1) * self.nodes + node]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, node: usize) -> &mut [f64; 5] {
        &mut self.data[(n - 1) * self.nodes + node]
    }

    pub fn as_slice(&self) -> &[[f64; 5]] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [[f64; 5]] {
        &mut self.data
    }

    /// Channel `c` on every slice, as a field with `NT` slices.
    pub fn channel(&self, c: usize) -> ScalarField {
        ScalarField {
            slices: self.nt,
            nodes: self.nodes,
            data: self.data.iter().map(|v| v[c]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    fn check_same(&self, other: &Stacked5Field) -> Result<()> {
        if self.nt != other.nt || self.nodes != other.nodes {
            return Err(Error::ShapeMismatch {
                expected: 5 * self.len(),
                got: 5 * other.len(),
            });
        }
        Ok(())
    }

    pub fn sub(&self, other: &Stacked5Field) -> Result<Stacked5Field> {
        self.check_same(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| std::array::from_fn(|c| a[c] - b[c]))
            .collect();
        Ok(Stacked5Field {
            nt: self.nt,
            nodes: self.nodes,
            data,
        })
    }

    /// `self + s * other`
    pub fn axpy(&self, s: f64, other: &Stacked5Field) -> Result<Stacked5Field> {
        self.check_same(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| std::array::from_fn(|c| a[c] + s * b[c]))
            .collect();
        Ok(Stacked5Field {
            nt: self.nt,
            nodes: self.nodes,
            data,
        })
    }
}

fn check_scalar(geom: &Geometry, f: &ScalarField, slices: usize) -> Result<()> {
    if f.nodes != geom.n_nodes() || f.slices != slices {
        return Err(Error::ShapeMismatch {
            expected: slices * geom.n_nodes(),
            got: f.len(),
        });
    }
    Ok(())
}

fn check_stacked(geom: &Geometry, s: &Stacked5Field) -> Result<()> {
    if s.nodes != geom.n_nodes() || s.nt != geom.nt() {
        return Err(Error::ShapeMismatch {
            expected: 5 * geom.n_stacked(),
            got: 5 * s.len(),
        });
    }
    Ok(())
}

fn forward_difference(geom: &Geometry, phi: &ScalarField, i: i64, j: i64, n: usize, dir: Dir) -> Result<f64> {
    let node = geom.node_index(i, j).ok_or(Error::OutOfDomain { i, j })?;
    let next = geom.neighbor(node, dir).ok_or(Error::OutOfDomain { i, j })?;
    Ok((phi.get(n, next) - phi.get(n, node)) / geom.h())
}

/// `(φ_{i+1,j} - φ_{i,j}) / h` on slice `n`.
pub fn d_plus_1(geom: &Geometry, phi: &ScalarField, i: i64, j: i64, n: usize) -> Result<f64> {
    forward_difference(geom, phi, i, j, n, Dir::East)
}

/// `(φ_{i,j+1} - φ_{i,j}) / h` on slice `n`.
pub fn d_plus_2(geom: &Geometry, phi: &ScalarField, i: i64, j: i64, n: usize) -> Result<f64> {
    forward_difference(geom, phi, i, j, n, Dir::North)
}

/// The four one-sided differences of a spatial slice at `node`, with zeros
/// where a link is missing.
#[inline]
pub fn one_sided(geom: &Geometry, slice: &[f64], node: usize, inv_h: f64) -> [f64; 4] {
    let nb = geom.neighbors(node);
    let u = slice[node];
    [
        nb[0].map_or(0.0, |e| (slice[e] - u) * inv_h),
        nb[1].map_or(0.0, |w| (u - slice[w]) * inv_h),
        nb[2].map_or(0.0, |n| (slice[n] - u) * inv_h),
        nb[3].map_or(0.0, |s| (u - slice[s]) * inv_h),
    ]
}

/// `Λφ`.
pub fn lambda_apply(geom: &Geometry, phi: &ScalarField) -> Result<Stacked5Field> {
    check_scalar(geom, phi, geom.nt() + 1)?;
    let nodes = geom.n_nodes();
    let inv_dt = 1.0 / geom.dt();
    let inv_h = 1.0 / geom.h();
    let mut out = Stacked5Field::on(geom);
    out.data
        .par_chunks_mut(nodes)
        .enumerate()
        .for_each(|(slot, chunk)| {
            let n = slot + 1;
            let prev = phi.slice(n - 1);
            let cur = phi.slice(n);
            for (k, v) in chunk.iter_mut().enumerate() {
                let d = one_sided(geom, prev, k, inv_h);
                *v = [(cur[k] - prev[k]) * inv_dt, d[0], d[1], d[2], d[3]];
            }
        });
    Ok(out)
}

/// Flux part of `Λ*` restricted to one time slice: accumulates into `out`
/// the adjoint of the four difference channels of `chan`.
#[inline]
fn add_flux_adjoint(geom: &Geometry, chan: &[[f64; 5]], inv_h: f64, out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let nb = geom.neighbors(k);
        let v = &chan[k];
        let mut acc = -v[1] + v[2] - v[3] + v[4];
        if let Some(w) = nb[Dir::West as usize] {
            acc += chan[w][1];
        }
        if let Some(e) = nb[Dir::East as usize] {
            acc -= chan[e][2];
        }
        if let Some(s) = nb[Dir::South as usize] {
            acc += chan[s][3];
        }
        if let Some(nn) = nb[Dir::North as usize] {
            acc -= chan[nn][4];
        }
        *o += acc * inv_h;
    }
}

/// `Λ* σ`, the unique field with `<Λ*σ, φ> = <σ, Λφ>` for every `φ`.
pub fn lambda_adjoint(geom: &Geometry, sigma: &Stacked5Field) -> Result<ScalarField> {
    check_stacked(geom, sigma)?;
    let nt = geom.nt();
    let nodes = geom.n_nodes();
    let inv_dt = 1.0 / geom.dt();
    let inv_h = 1.0 / geom.h();
    let mut out = ScalarField::on(geom);
    out.data
        .par_chunks_mut(nodes)
        .enumerate()
        .for_each(|(n, chunk)| {
            if n >= 1 {
                let here = &sigma.data[(n - 1) * nodes..n * nodes];
                for (o, v) in chunk.iter_mut().zip(here) {
                    *o += v[0] * inv_dt;
                }
            }
            if n < nt {
                let next = &sigma.data[n * nodes..(n + 1) * nodes];
                for (o, v) in chunk.iter_mut().zip(next) {
                    *o -= v[0] * inv_dt;
                }
                add_flux_adjoint(geom, next, inv_h, chunk);
            }
        });
    Ok(out)
}

/// `h² Δt Σ f g` over every entry.
pub fn inner(geom: &Geometry, f: &ScalarField, g: &ScalarField) -> Result<f64> {
    f.check_same(g)?;
    let w = geom.h() * geom.h() * geom.dt();
    Ok(w * f.data.iter().zip(&g.data).map(|(a, b)| a * b).sum::<f64>())
}

pub fn norm(geom: &Geometry, f: &ScalarField) -> f64 {
    let w = geom.h() * geom.h() * geom.dt();
    (w * f.data.iter().map(|a| a * a).sum::<f64>()).sqrt()
}

/// `h² Δt Σ_k Σ σ_k τ_k` over the five channels.
pub fn inner5(geom: &Geometry, s: &Stacked5Field, t: &Stacked5Field) -> Result<f64> {
    s.check_same(t)?;
    let w = geom.h() * geom.h() * geom.dt();
    let sum: f64 = s
        .data
        .iter()
        .zip(&t.data)
        .map(|(a, b)| (0..5).map(|c| a[c] * b[c]).sum::<f64>())
        .sum();
    Ok(w * sum)
}

pub fn norm5(geom: &Geometry, s: &Stacked5Field) -> f64 {
    let w = geom.h() * geom.h() * geom.dt();
    let sum: f64 = s.data.iter().map(|a| a.iter().map(|x| x * x).sum::<f64>()).sum();
    (w * sum).sqrt()
}

/// Residual of the discrete continuity equation satisfied by `σ = (m, y, z, y~, z~)`
/// with `m^0` pinned to `m0`:
///
/// ```text
/// (m^{n+1}_{ij} - m^n_{ij}) / Δt + (y_{ij} - y_{i-1,j}) / h + (z_{i+1,j} - z_{ij}) / h
///                               + (y~_{ij} - y~_{i,j-1}) / h + (z~_{i,j+1} - z~_{ij}) / h
/// ```
///
/// with fluxes taken on slice `n + 1`, for `n = 0..NT`. Fluxes through missing
/// links are absent. The result has `NT` slices.
pub fn fp_residual(geom: &Geometry, sigma: &Stacked5Field, m0: &[f64]) -> Result<ScalarField> {
    check_stacked(geom, sigma)?;
    let nodes = geom.n_nodes();
    if m0.len() != nodes {
        return Err(Error::ShapeMismatch {
            expected: nodes,
            got: m0.len(),
        });
    }
    let nt = geom.nt();
    let inv_dt = 1.0 / geom.dt();
    let inv_h = 1.0 / geom.h();
    let mut out = ScalarField::zeros(nt, nodes);
    out.data
        .par_chunks_mut(nodes)
        .enumerate()
        .for_each(|(n, chunk)| {
            let next = &sigma.data[n * nodes..(n + 1) * nodes];
            for (k, o) in chunk.iter_mut().enumerate() {
                let prev_m = if n == 0 { m0[k] } else { sigma.data[(n - 1) * nodes + k][0] };
                *o = (next[k][0] - prev_m) * inv_dt;
            }
            // the flux part is minus the flux adjoint
            let mut flux = vec![0.0; nodes];
            add_flux_adjoint(geom, next, inv_h, &mut flux);
            for (o, f) in chunk.iter_mut().zip(flux) {
                *o -= f;
            }
        });
    Ok(out)
}

/// Per-slice totals `h² Σ_{ij} f^n_{ij}`.
pub fn slice_sums(geom: &Geometry, f: &ScalarField) -> Vec<f64> {
    let h2 = geom.h() * geom.h();
    (0..f.slices).map(|n| h2 * f.slice(n).iter().sum::<f64>()).collect()
}
