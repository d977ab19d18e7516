//! The symmetry groups under which convolutions are defined: T(1), T(2),
//! and SO(2). All three are abelian with trivial stabilizers, so the lift
//! of a scalar position is a single group element, exp/log are global
//! diffeomorphisms onto the principal domain, and the Haar measure is the
//! Lebesgue measure on algebra coordinates.
//!
//! Elements and algebra vectors are stored as `[f64; 2]`; groups of
//! dimension one use the first slot and leave the second at zero. Angles
//! are always normalized to the principal branch `(-pi, pi]`.

use rand::Rng;
use thiserror::Error;

use crate::rng::RngStream;

/// Group element in canonical coordinates: translation offsets for T(1)
/// and T(2), the rotation angle for SO(2).
pub type GroupElement = [f64; 2];

/// Lie algebra vector in the basis dual to [`GroupElement`] coordinates.
pub type AlgebraVector = [f64; 2];

#[derive(Debug, Error)]
pub enum GroupError {
    #[error("quadrature over so2 requires radius < pi, got {radius}")]
    RadiusOutOfDomain { radius: f64 },
    #[error("quadrature radius must be positive and finite, got {radius}")]
    BadRadius { radius: f64 },
    #[error("quadrature needs at least one node")]
    EmptyQuadrature,
    #[error("deterministic lattice over t2 needs a square node count, got {count}")]
    NonSquareCount { count: usize },
    #[error("lift is unique for this group; {samples} samples requested")]
    LiftNotUnique { samples: usize },
    #[error("non-finite coordinate in group input")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, GroupError>;

/// Wrap an angle onto the principal branch `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let a = theta.rem_euclid(std::f64::consts::TAU);
    if a > std::f64::consts::PI {
        a - std::f64::consts::TAU
    } else {
        a
    }
}

/// How quadrature nodes are placed over a neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadMode {
    /// Inclusive uniform lattice; endpoints are nodes.
    Deterministic,
    /// Uniform draws from the neighborhood.
    MonteCarlo,
}

/// Nodes and Haar weights for integrating over a group neighborhood.
/// Weights are uniform at `volume / nodes.len()` so that they always sum
/// to the neighborhood's Haar volume.
#[derive(Debug, Clone)]
pub struct QuadratureSet {
    pub nodes: Vec<AlgebraVector>,
    pub weights: Vec<f64>,
    pub volume: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    T1,
    T2,
    So2,
}

impl Group {
    pub fn algebra_dim(self) -> usize {
        match self {
            Group::T1 | Group::So2 => 1,
            Group::T2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::T1 => "t1",
            Group::T2 => "t2",
            Group::So2 => "so2",
        }
    }

    pub fn identity(self) -> GroupElement {
        [0.0, 0.0]
    }

    /// Exponential map from the algebra. For the translation groups this is
    /// coordinate identity; for SO(2) the angle wraps onto the principal
    /// branch.
    pub fn exp(self, v: AlgebraVector) -> Result<GroupElement> {
        if !v[0].is_finite() || !v[1].is_finite() {
            return Err(GroupError::NonFinite);
        }
        Ok(match self {
            Group::T1 => [v[0], 0.0],
            Group::T2 => v,
            Group::So2 => [wrap_angle(v[0]), 0.0],
        })
    }

    /// Logarithm map. Total on all three groups; SO(2) angles land on the
    /// principal branch `(-pi, pi]`.
    pub fn log(self, g: GroupElement) -> Result<AlgebraVector> {
        if !g[0].is_finite() || !g[1].is_finite() {
            return Err(GroupError::NonFinite);
        }
        Ok(match self {
            Group::T1 => [g[0], 0.0],
            Group::T2 => g,
            Group::So2 => [wrap_angle(g[0]), 0.0],
        })
    }

    pub fn compose(self, a: GroupElement, b: GroupElement) -> GroupElement {
        match self {
            Group::T1 => [a[0] + b[0], 0.0],
            Group::T2 => [a[0] + b[0], a[1] + b[1]],
            Group::So2 => [wrap_angle(a[0] + b[0]), 0.0],
        }
    }

    pub fn inverse(self, g: GroupElement) -> GroupElement {
        match self {
            Group::T1 => [-g[0], 0.0],
            Group::T2 => [-g[0], -g[1]],
            Group::So2 => [wrap_angle(-g[0]), 0.0],
        }
    }

    /// Relative offset `inverse(a) . b`, i.e. the element carrying `a`
    /// to `b`.
    pub fn relative(self, a: GroupElement, b: GroupElement) -> GroupElement {
        self.compose(self.inverse(a), b)
    }

    /// Lift a scalar sequence position to the group. The stabilizer is
    /// trivial for every supported group, so exactly one sample exists;
    /// asking for more is an error rather than a silent duplicate.
    pub fn lift(self, position: f64, scale: f64, samples: usize) -> Result<Vec<GroupElement>> {
        if samples != 1 {
            return Err(GroupError::LiftNotUnique { samples });
        }
        let x = position * scale;
        if !x.is_finite() {
            return Err(GroupError::NonFinite);
        }
        Ok(vec![match self {
            Group::T1 => [x, 0.0],
            Group::T2 => [x, 0.0],
            Group::So2 => [wrap_angle(x), 0.0],
        }])
    }

    /// Quadrature over the centered neighborhood of algebra radius `r`:
    /// the interval `[-r, r]` for one-dimensional algebras and the max-norm
    /// box `[-r, r]^2` for T(2). SO(2) needs `r < pi` so the neighborhood
    /// stays inside the principal branch.
    ///
    /// Deterministic mode places an inclusive lattice (for T(2) a square
    /// grid, so `count` must be a perfect square); Monte Carlo draws
    /// uniformly. Either way each node carries weight `volume / count`.
    pub fn neighborhood_quadrature(
        self,
        radius: f64,
        count: usize,
        mode: QuadMode,
        rng: &mut RngStream,
    ) -> Result<QuadratureSet> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(GroupError::BadRadius { radius });
        }
        if self == Group::So2 && radius >= std::f64::consts::PI {
            return Err(GroupError::RadiusOutOfDomain { radius });
        }
        if count == 0 {
            return Err(GroupError::EmptyQuadrature);
        }
        let dim = self.algebra_dim();
        let volume = (2.0 * radius).powi(dim as i32);
        let nodes: Vec<AlgebraVector> = match (mode, dim) {
            (QuadMode::Deterministic, 1) => lattice_1d(radius, count)
                .into_iter()
                .map(|x| [x, 0.0])
                .collect(),
            (QuadMode::Deterministic, _) => {
                let side = (count as f64).sqrt().round() as usize;
                if side * side != count {
                    return Err(GroupError::NonSquareCount { count });
                }
                let axis = lattice_1d(radius, side);
                let mut nodes = Vec::with_capacity(count);
                for &x in &axis {
                    for &y in &axis {
                        nodes.push([x, y]);
                    }
                }
                nodes
            }
            (QuadMode::MonteCarlo, 1) => (0..count)
                .map(|_| [rng.gen_range(-radius..=radius), 0.0])
                .collect(),
            (QuadMode::MonteCarlo, _) => (0..count)
                .map(|_| {
                    [
                        rng.gen_range(-radius..=radius),
                        rng.gen_range(-radius..=radius),
                    ]
                })
                .collect(),
        };
        let w = volume / count as f64;
        Ok(QuadratureSet {
            weights: vec![w; nodes.len()],
            nodes,
            volume,
        })
    }
}

/// Inclusive lattice of `count` points over `[-radius, radius]`; a single
/// point degenerates to the center.
fn lattice_1d(radius: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.0];
    }
    (0..count)
        .map(|i| -radius + 2.0 * radius * i as f64 / (count - 1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    const TOL: f64 = 1e-12;

    fn groups() -> [Group; 3] {
        [Group::T1, Group::T2, Group::So2]
    }

    #[test]
    fn inverse_composes_to_identity() {
        for g in groups() {
            for e in [[0.3, -1.2], [2.9, 0.4], [-3.0, 0.0]] {
                let e = g.exp(e).unwrap();
                let back = g.compose(e, g.inverse(e));
                assert!(back[0].abs() < TOL && back[1].abs() < TOL, "{g:?}");
            }
        }
    }

    #[test]
    fn compose_is_associative() {
        for g in groups() {
            let (a, b, c) = ([0.7, 0.2], [-2.9, 1.0], [1.8, -0.5]);
            let a = g.exp(a).unwrap();
            let b = g.exp(b).unwrap();
            let c = g.exp(c).unwrap();
            let left = g.compose(g.compose(a, b), c);
            let right = g.compose(a, g.compose(b, c));
            assert!((left[0] - right[0]).abs() < TOL);
            assert!((left[1] - right[1]).abs() < TOL);
        }
    }

    #[test]
    fn log_exp_round_trip_on_principal_domain() {
        for g in groups() {
            for v in [[0.5, -0.25], [3.1, 1.0], [-3.14, 0.0]] {
                let v = match g {
                    Group::So2 => [wrap_angle(v[0]), 0.0],
                    Group::T1 => [v[0], 0.0],
                    Group::T2 => v,
                };
                let got = g.log(g.exp(v).unwrap()).unwrap();
                assert!((got[0] - v[0]).abs() < TOL && (got[1] - v[1]).abs() < TOL);
            }
        }
    }

    #[test]
    fn so2_angles_stay_on_principal_branch() {
        let g = Group::So2;
        let e = g.exp([7.5 * std::f64::consts::PI, 0.0]).unwrap();
        assert!(e[0] > -std::f64::consts::PI && e[0] <= std::f64::consts::PI);
        // -pi wraps to +pi: the branch is half-open
        let e = g.exp([-std::f64::consts::PI, 0.0]).unwrap();
        assert!((e[0] - std::f64::consts::PI).abs() < TOL);
    }

    #[test]
    fn lift_is_unique() {
        for g in groups() {
            assert_eq!(g.lift(3.0, 1.0, 1).unwrap().len(), 1);
            assert!(matches!(
                g.lift(3.0, 1.0, 2),
                Err(GroupError::LiftNotUnique { samples: 2 })
            ));
        }
    }

    #[test]
    fn t1_lattice_matches_hand_example() {
        // radius 1, three nodes: {-1, 0, 1}, each with Haar weight 2/3
        let mut rng = stream(0, "quad");
        let q = Group::T1
            .neighborhood_quadrature(1.0, 3, QuadMode::Deterministic, &mut rng)
            .unwrap();
        let xs: Vec<f64> = q.nodes.iter().map(|n| n[0]).collect();
        assert_eq!(xs, vec![-1.0, 0.0, 1.0]);
        for &w in &q.weights {
            assert!((w - 2.0 / 3.0).abs() < TOL);
        }
    }

    #[test]
    fn weights_sum_to_haar_volume() {
        let mut rng = stream(7, "quad");
        for (g, count) in [(Group::T1, 5), (Group::T2, 9), (Group::So2, 4)] {
            for mode in [QuadMode::Deterministic, QuadMode::MonteCarlo] {
                let q = g.neighborhood_quadrature(0.8, count, mode, &mut rng).unwrap();
                let total: f64 = q.weights.iter().sum();
                assert!((total - q.volume).abs() < 1e-9, "{g:?} {mode:?}");
                for n in &q.nodes {
                    assert!(n[0].abs() <= 0.8 + TOL && n[1].abs() <= 0.8 + TOL);
                }
            }
        }
    }

    #[test]
    fn so2_radius_at_pi_is_rejected() {
        let mut rng = stream(0, "quad");
        assert!(matches!(
            Group::So2.neighborhood_quadrature(
                std::f64::consts::PI,
                3,
                QuadMode::Deterministic,
                &mut rng
            ),
            Err(GroupError::RadiusOutOfDomain { .. })
        ));
    }

    #[test]
    fn t2_lattice_needs_square_count() {
        let mut rng = stream(0, "quad");
        assert!(matches!(
            Group::T2.neighborhood_quadrature(1.0, 8, QuadMode::Deterministic, &mut rng),
            Err(GroupError::NonSquareCount { count: 8 })
        ));
        let q = Group::T2
            .neighborhood_quadrature(1.0, 9, QuadMode::Deterministic, &mut rng)
            .unwrap();
        assert_eq!(q.nodes.len(), 9);
        assert!((q.volume - 4.0).abs() < TOL);
    }
}
