//! Finite rotation groups used to discretize SO(3).

use serde::{Deserialize, Serialize};

use super::pose::{geodesic_angle, quat_canonical, quat_mul, quat_normalize, quat_to_matrix_unchecked, Mat3, Quat, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    #[default]
    Icosahedral,
    Tetrahedral,
    Trivial,
}

/// A finite rotation group with its composition table.
#[derive(Clone, Debug)]
pub struct RotationGroup {
    kind: GroupKind,
    quats: Vec<Quat>,
    elements: Vec<Mat3>,
    cayley: Vec<usize>,
    inverse: Vec<usize>,
}

const PHI: f64 = 1.618_033_988_749_895;

impl RotationGroup {
    pub fn new(kind: GroupKind) -> Self {
        match kind {
            GroupKind::Icosahedral => icosahedral_group(),
            GroupKind::Tetrahedral => tetrahedral_group(),
            GroupKind::Trivial => Self::from_quats(GroupKind::Trivial, vec![[1.0, 0.0, 0.0, 0.0]]),
        }
    }

    fn from_quats(kind: GroupKind, raw: Vec<Quat>) -> Self {
        let mut quats: Vec<Quat> = Vec::new();
        for q in raw.into_iter().map(|q| quat_canonical(quat_normalize(q))) {
            if !quats.iter().any(|p| same_rotation(p, &q)) {
                quats.push(q);
            }
        }
        // identity first, then by angle, then lexicographically for a fixed order
        let key = |q: &Quat| (geodesic_angle(*q, [1.0, 0.0, 0.0, 0.0]), *q);
        quats.sort_by(|a, b| {
            let (ka, kb) = (key(a), key(b));
            let da = (ka.0 - kb.0).abs();
            if da > 1e-9 {
                return ka.0.partial_cmp(&kb.0).unwrap();
            }
            ka.1.partial_cmp(&kb.1).unwrap().reverse()
        });
        let n = quats.len();
        let elements: Vec<Mat3> = quats.iter().map(|q| quat_to_matrix_unchecked(*q)).collect();
        let find = |q: &Quat| quats.iter().position(|p| same_rotation(p, q)).expect("group is not closed");
        let mut cayley = vec![0; n * n];
        for a in 0..n {
            for b in 0..n {
                cayley[a * n + b] = find(&quat_mul(quats[a], quats[b]));
            }
        }
        let inverse = (0..n).map(|a| (0..n).find(|&b| cayley[a * n + b] == 0).unwrap()).collect();
        Self { kind, quats, elements, cayley, inverse }
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[Mat3] {
        &self.elements
    }

    pub fn element(&self, g: usize) -> &Mat3 {
        &self.elements[g]
    }

    pub fn quaternion(&self, g: usize) -> Quat {
        self.quats[g]
    }

    /// Index of `elements[a] · elements[b]`.
    #[inline]
    pub fn compose(&self, a: usize, b: usize) -> usize {
        self.cayley[a * self.len() + b]
    }

    #[inline]
    pub fn inverse(&self, a: usize) -> usize {
        self.inverse[a]
    }

    /// The identity plus every element at the smallest nonzero rotation angle.
    pub fn neighborhood(&self) -> Vec<usize> {
        let angles: Vec<f64> = self.quats.iter().map(|q| geodesic_angle(*q, self.quats[0])).collect();
        let min = angles.iter().skip(1).copied().fold(f64::INFINITY, f64::min);
        (0..self.len()).filter(|&g| g == 0 || (angles[g] - min).abs() < 1e-9).collect()
    }
}

fn same_rotation(a: &Quat, b: &Quat) -> bool {
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3];
    (d.abs() - 1.0).abs() < 1e-9
}

/// The 60 rotations of the icosahedron, identity first.
pub fn icosahedral_group() -> RotationGroup {
    let mut raw = Vec::with_capacity(120);
    for i in 0..4 {
        let mut q = [0.0; 4];
        q[i] = 1.0;
        raw.push(q);
    }
    for s in 0..16 {
        let sign = |b: usize| if s & (1 << b) != 0 { -0.5 } else { 0.5 };
        raw.push([sign(0), sign(1), sign(2), sign(3)]);
    }
    // even permutations of ½(0, ±1, ±1/φ, ±φ)
    let even: [[usize; 4]; 12] = [
        [0, 1, 2, 3], [0, 2, 3, 1], [0, 3, 1, 2], [1, 0, 3, 2], [1, 2, 0, 3], [1, 3, 2, 0],
        [2, 0, 1, 3], [2, 1, 3, 0], [2, 3, 0, 1], [3, 0, 2, 1], [3, 1, 0, 2], [3, 2, 1, 0],
    ];
    let base = [0.0, 0.5, 0.5 / PHI, 0.5 * PHI];
    for p in even {
        for s in 0..8 {
            let sign = |b: usize| if s & (1 << b) != 0 { -1.0 } else { 1.0 };
            let v = [base[0], base[1] * sign(0), base[2] * sign(1), base[3] * sign(2)];
            let mut q = [0.0; 4];
            for k in 0..4 {
                q[p[k]] = v[k];
            }
            raw.push(q);
        }
    }
    let g = RotationGroup::from_quats(GroupKind::Icosahedral, raw);
    assert_eq!(g.len(), 60);
    g
}

/// The 12 rotations of the tetrahedron, identity first.
pub fn tetrahedral_group() -> RotationGroup {
    let mut raw = Vec::new();
    for i in 0..4 {
        let mut q = [0.0; 4];
        q[i] = 1.0;
        raw.push(q);
    }
    for s in 0..16 {
        let sign = |b: usize| if s & (1 << b) != 0 { -0.5 } else { 0.5 };
        raw.push([sign(0), sign(1), sign(2), sign(3)]);
    }
    let g = RotationGroup::from_quats(GroupKind::Tetrahedral, raw);
    assert_eq!(g.len(), 12);
    g
}

/// The 12 unit vertex directions of the icosahedron.
pub fn icosahedron_vertices() -> Vec<Vec3> {
    let n = (1.0 + PHI * PHI).sqrt();
    let mut out = Vec::with_capacity(12);
    for s1 in [1.0, -1.0] {
        for s2 in [1.0, -1.0] {
            let (a, b) = (s1 / n, s2 * PHI / n);
            out.push([0.0, a, b]);
            out.push([a, b, 0.0]);
            out.push([b, 0.0, a]);
        }
    }
    out
}
