//! Phase-space state of an N-particle, d-dimensional system.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positions, momenta and masses of `N` particles in `d` dimensions.
///
/// Coordinates are stored particle-major: component `k` of particle `i`
/// lives at index `i * d + k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    positions: Vec<f64>,
    momenta: Vec<f64>,
    masses: Vec<f64>,
    dims: usize,
}

impl PhaseState {
    pub fn new(
        positions: Vec<f64>,
        momenta: Vec<f64>,
        masses: Vec<f64>,
        dims: usize,
    ) -> Result<Self> {
        if !(1..=3).contains(&dims) {
            return Err(Error::InvalidState(format!(
                "dims must be 1, 2 or 3, got {dims}"
            )));
        }
        if masses.is_empty() {
            return Err(Error::InvalidState("at least one particle required".into()));
        }
        let len = masses.len() * dims;
        if positions.len() != len || momenta.len() != len {
            return Err(Error::InvalidState(format!(
                "expected {len} coordinates, got {} positions and {} momenta",
                positions.len(),
                momenta.len()
            )));
        }
        if masses.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(Error::InvalidState(
                "masses must be positive and finite".into(),
            ));
        }
        let state = Self {
            positions,
            momenta,
            masses,
            dims,
        };
        if !state.is_finite() {
            return Err(Error::InvalidState("non-finite coordinate".into()));
        }
        Ok(state)
    }

    /// State at rest with the given positions.
    pub fn at_rest(positions: Vec<f64>, masses: Vec<f64>, dims: usize) -> Result<Self> {
        let momenta = vec![0.0; positions.len()];
        Self::new(positions, momenta, masses, dims)
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn momenta(&self) -> &[f64] {
        &self.momenta
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    pub fn momenta_mut(&mut self) -> &mut [f64] {
        &mut self.momenta
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn count(&self) -> usize {
        self.masses.len()
    }

    /// Number of scalar coordinates, `N * d`.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.positions
            .iter()
            .chain(&self.momenta)
            .all(|v| v.is_finite())
    }

    /// Copy of `self` with momenta replaced. Panics on length mismatch.
    pub fn with_momenta(&self, momenta: Vec<f64>) -> Self {
        assert_eq!(momenta.len(), self.momenta.len());
        Self {
            momenta,
            ..self.clone()
        }
    }

    /// Copy of `self` with positions and momenta replaced. Panics on length mismatch.
    pub fn with_coordinates(&self, positions: Vec<f64>, momenta: Vec<f64>) -> Self {
        assert_eq!(positions.len(), self.positions.len());
        assert_eq!(momenta.len(), self.momenta.len());
        Self {
            positions,
            momenta,
            ..self.clone()
        }
    }

    /// Velocities `p_i / m_i`.
    pub fn velocities(&self) -> Vec<f64> {
        let d = self.dims;
        self.momenta
            .iter()
            .enumerate()
            .map(|(j, p)| p / self.masses[j / d])
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn kinetic_energy(&self) -> f64 {
        let d = self.dims;
        self.momenta
            .iter()
            .enumerate()
            .map(|(j, p)| p * p / (2.0 * self.masses[j / d]))
            .sum()
    }

    /// Sum of momenta, one entry per dimension.
    pub fn total_momentum(&self) -> Vec<f64> {
        let d = self.dims;
        let mut total = vec![0.0; d];
        for (j, p) in self.momenta.iter().enumerate() {
            total[j % d] += p;
        }
        total
    }

    pub fn center_of_mass(&self) -> Vec<f64> {
        let d = self.dims;
        let mut com = vec![0.0; d];
        for (i, m) in self.masses.iter().enumerate() {
            for (c, x) in com.iter_mut().zip(&self.positions[i * d..(i + 1) * d]) {
                *c += m * x;
            }
        }
        let total = self.total_mass();
        com.iter_mut().for_each(|c| *c /= total);
        com
    }

    /// Unweighted mean position, the pivot of the random-rotation filter.
    pub fn mean_position(&self) -> Vec<f64> {
        let d = self.dims;
        let n = self.count() as f64;
        let mut mean = vec![0.0; d];
        for (j, x) in self.positions.iter().enumerate() {
            mean[j % d] += x;
        }
        mean.iter_mut().for_each(|c| *c /= n);
        mean
    }

    /// Positions relative to the center of mass, embedded in 3D.
    pub fn relative_positions3(&self) -> Vec<Vector3<f64>> {
        let com = self.center_of_mass();
        (0..self.count())
            .map(|i| {
                let mut r = Vector3::zeros();
                for k in 0..self.dims {
                    r[k] = self.positions[i * self.dims + k] - com[k];
                }
                r
            })
            .collect()
    }

    /// Momenta embedded in 3D.
    pub fn momenta3(&self) -> Vec<Vector3<f64>> {
        (0..self.count())
            .map(|i| {
                let mut p = Vector3::zeros();
                for k in 0..self.dims {
                    p[k] = self.momenta[i * self.dims + k];
                }
                p
            })
            .collect()
    }

    /// Total angular momentum about the center of mass. For `d = 2` only the
    /// z-component is nonzero; for `d = 1` it vanishes.
    pub fn angular_momentum(&self) -> [f64; 3] {
        let l = self
            .relative_positions3()
            .iter()
            .zip(self.momenta3())
            .fold(Vector3::zeros(), |acc, (r, p)| acc + r.cross(&p));
        [l.x, l.y, l.z]
    }

    /// Inertia tensor about the center of mass.
    pub fn inertia_tensor(&self) -> Matrix3<f64> {
        inertia_tensor(&self.relative_positions3(), &self.masses)
    }
}

pub(crate) fn inertia_tensor(rel: &[Vector3<f64>], masses: &[f64]) -> Matrix3<f64> {
    rel.iter()
        .zip(masses)
        .fold(Matrix3::zeros(), |acc, (r, m)| {
            acc + (Matrix3::identity() * r.norm_squared() - r * r.transpose()) * *m
        })
}

/// Inverse of a symmetric positive semi-definite 3x3 matrix via its
/// eigendecomposition. Fails when the smallest eigenvalue is below
/// `cutoff` times the largest.
pub(crate) fn invert_inertia(inertia: &Matrix3<f64>, cutoff: f64) -> Result<Matrix3<f64>> {
    let eig = SymmetricEigen::new(*inertia);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= cutoff * max {
        let ratio = if max > 0.0 { min / max } else { 0.0 };
        return Err(Error::SingularInertia { ratio });
    }
    let inv = eig.eigenvalues.map(|l| 1.0 / l);
    Ok(eig.eigenvectors * Matrix3::from_diagonal(&inv) * eig.eigenvectors.transpose())
}

/// Rotates every particle's position about `pivot` and its momentum about the origin.
pub fn rotate_state(
    state: &PhaseState,
    rotation: &Matrix3<f64>,
    pivot: &[f64],
) -> Result<PhaseState> {
    if state.dims() != 3 {
        return Err(Error::Unsupported(format!(
            "rotation of a {}D state",
            state.dims()
        )));
    }
    let mut x = state.positions().to_vec();
    let mut p = state.momenta().to_vec();
    for i in 0..state.count() {
        let xi = Vector3::new(
            x[3 * i] - pivot[0],
            x[3 * i + 1] - pivot[1],
            x[3 * i + 2] - pivot[2],
        );
        let pi = Vector3::new(p[3 * i], p[3 * i + 1], p[3 * i + 2]);
        let xr = rotation * xi;
        let pr = rotation * pi;
        for k in 0..3 {
            x[3 * i + k] = xr[k] + pivot[k];
            p[3 * i + k] = pr[k];
        }
    }
    Ok(state.with_coordinates(x, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> PhaseState {
        PhaseState::new(
            vec![1.0, 0.0, 0.0, -0.5, 0.8, 0.0, -0.5, -0.8, 0.0],
            vec![0.0, 1.0, 0.0, -0.8, -0.5, 0.0, 0.8, -0.5, 0.0],
            vec![1.0, 1.0, 1.0],
            3,
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_shapes_and_masses() {
        assert!(PhaseState::new(vec![0.0; 3], vec![0.0; 2], vec![1.0], 3).is_err());
        assert!(PhaseState::new(vec![0.0; 3], vec![0.0; 3], vec![0.0], 3).is_err());
        assert!(PhaseState::new(vec![f64::NAN; 3], vec![0.0; 3], vec![1.0], 3).is_err());
        assert!(PhaseState::new(vec![0.0; 4], vec![0.0; 4], vec![1.0], 4).is_err());
    }

    #[test]
    fn kinetic_energy_and_momentum() {
        let s = PhaseState::new(vec![0.0, 0.0], vec![2.0, -1.0], vec![2.0, 1.0], 1).unwrap();
        assert_eq!(s.kinetic_energy(), 1.0 + 0.5);
        assert_eq!(s.total_momentum(), vec![1.0]);
        assert_eq!(s.velocities(), vec![1.0, -1.0]);
    }

    #[test]
    fn inertia_inverse_matches_nalgebra() {
        let s = triangle();
        let inertia = s.inertia_tensor();
        let inv = invert_inertia(&inertia, 1e-10).unwrap();
        let eye = inertia * inv;
        assert!((eye - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn collinear_inertia_is_singular() {
        let s = PhaseState::at_rest(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0], vec![1.0, 1.0], 3).unwrap();
        assert!(matches!(
            invert_inertia(&s.inertia_tensor(), 1e-10),
            Err(Error::SingularInertia { .. })
        ));
    }

    #[test]
    fn rotation_preserves_kinetic_energy_and_rotates_l() {
        let s = triangle();
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 1.1).into_inner();
        let r = rotate_state(&s, &rot, &s.mean_position()).unwrap();
        assert!((r.kinetic_energy() - s.kinetic_energy()).abs() < 1e-14);
        let l0 = Vector3::from(s.angular_momentum());
        let l1 = Vector3::from(r.angular_momentum());
        assert!((rot * l0 - l1).norm() < 1e-13);
    }
}
