//! Real spherical harmonics, Wigner rotation matrices, and Clebsch-Gordan
//! coupling tables for degrees 0..2, plus the fixed radial basis used by the
//! equivariant kernels.
//!
//! Conventions: type-1 quantities are kept in Cartesian (x, y, z) component
//! order, so the degree-1 rotation matrix is the rotation itself.  Degree-2
//! quantities are expanded in an orthonormal basis of symmetric traceless
//! matrices ordered to match the standard real harmonics (xy, yz, 3z^2-r^2,
//! xz, x^2-y^2).  The scalar accessor [`spherical_harmonic`] exposes the
//! usual m = -J..J indexing on top of this.

use ndarray::{Array2, Array3};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum So3Error {
    #[error("spherical harmonic input must be a unit vector (got |u| = {0})")]
    NotUnit(f64),
    #[error("degree {0} not supported (max 2)")]
    Degree(usize),
    #[error("order {m} out of range for degree {j}")]
    Order { j: usize, m: i32 },
}

/// Y_00, constant over the sphere.
pub const Y00: f64 = 0.282_094_791_773_878_14; // 1 / (2 sqrt(pi))
/// Coefficient of the degree-1 harmonics: sqrt(3 / 4pi).
pub const C1: f64 = 0.488_602_511_902_919_9;
/// Coefficient of the degree-2 harmonics in the matrix form: sqrt(15 / 8pi).
pub const C2: f64 = 0.772_548_404_046_379_3;

const SQRT2_INV: f64 = std::f64::consts::FRAC_1_SQRT_2;
const SQRT6_INV: f64 = 0.408_248_290_463_863_1;

/// Orthonormal symmetric traceless 3x3 matrices; Y_2m(u) = C2 u^T S_m u.
/// Order matches real harmonics m = -2..2: xy, yz, 3z^2-r^2, xz, x^2-y^2.
pub const S_BASIS: [[[f64; 3]; 3]; 5] = [
    [
        [0.0, SQRT2_INV, 0.0],
        [SQRT2_INV, 0.0, 0.0],
        [0.0, 0.0, 0.0],
    ],
    [
        [0.0, 0.0, 0.0],
        [0.0, 0.0, SQRT2_INV],
        [0.0, SQRT2_INV, 0.0],
    ],
    [
        [-SQRT6_INV, 0.0, 0.0],
        [0.0, -SQRT6_INV, 0.0],
        [0.0, 0.0, 2.0 * SQRT6_INV],
    ],
    [
        [0.0, 0.0, SQRT2_INV],
        [0.0, 0.0, 0.0],
        [SQRT2_INV, 0.0, 0.0],
    ],
    [
        [SQRT2_INV, 0.0, 0.0],
        [0.0, -SQRT2_INV, 0.0],
        [0.0, 0.0, 0.0],
    ],
];

/// Degree-1 harmonics in Cartesian order: C1 * (x, y, z).
pub fn sph1(u: [f64; 3]) -> [f64; 3] {
    [C1 * u[0], C1 * u[1], C1 * u[2]]
}

/// Degree-2 harmonics in the S-basis order.
pub fn sph2(u: [f64; 3]) -> [f64; 5] {
    let mut out = [0.0; 5];
    for (m, s) in S_BASIS.iter().enumerate() {
        let mut acc = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                acc += u[a] * s[a][b] * u[b];
            }
        }
        out[m] = C2 * acc;
    }
    out
}

/// Real spherical harmonic Y_Jm in the orthonormal convention, standard
/// m = -J..J indexing (degree 1: m = -1, 0, 1 pick out y, z, x).
pub fn spherical_harmonic(j: usize, m: i32, u: [f64; 3]) -> Result<f64, So3Error> {
    let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(So3Error::NotUnit(norm));
    }
    if j > 2 {
        return Err(So3Error::Degree(j));
    }
    if m.unsigned_abs() as usize > j {
        return Err(So3Error::Order { j, m });
    }
    Ok(match j {
        0 => Y00,
        1 => {
            let v = sph1(u);
            match m {
                -1 => v[1],
                0 => v[2],
                _ => v[0],
            }
        }
        _ => sph2(u)[(m + 2) as usize],
    })
}

/// Rotation matrix for degree-l features: D_0 = 1, D_1 = R, D_2 built from
/// conjugation in the S-basis.
pub fn wigner_d(l: usize, r: &Array2<f64>) -> Array2<f64> {
    assert_eq!(r.dim(), (3, 3));
    match l {
        0 => Array2::eye(1),
        1 => r.clone(),
        2 => {
            let mut d = Array2::zeros((5, 5));
            for mp in 0..5 {
                // R S_m' R^T, then expand in the S basis.
                let mut rs = [[0.0; 3]; 3];
                for a in 0..3 {
                    for b in 0..3 {
                        let mut acc = 0.0;
                        for p in 0..3 {
                            for q in 0..3 {
                                acc += r[[a, p]] * S_BASIS[mp][p][q] * r[[b, q]];
                            }
                        }
                        rs[a][b] = acc;
                    }
                }
                for m in 0..5 {
                    let mut acc = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            acc += S_BASIS[m][a][b] * rs[a][b];
                        }
                    }
                    d[[m, mp]] = acc;
                }
            }
            d
        }
        _ => panic!("degree {l} not supported"),
    }
}

/// Degrees J that couple type-k input to type-l output.
pub fn allowed_j(l: usize, k: usize) -> std::ops::RangeInclusive<usize> {
    l.abs_diff(k)..=(l + k)
}

/// Coupling table Q^{lk}_J with shape [2J+1, 2l+1, 2k+1].  Each table is
/// unit-norm over all entries, and satisfies the intertwining relation
/// sum_m D_J(R)[m, m'] Q[m] = D_l(R) Q[m'] D_k(R)^T.
pub fn intertwiner(l: usize, k: usize, j: usize) -> Array3<f64> {
    assert!(l <= 1 && k <= 1, "degrees above 1 not used");
    assert!(
        allowed_j(l, k).contains(&j),
        "J={j} invalid for (l,k)=({l},{k})"
    );
    let mut q = Array3::zeros((2 * j + 1, 2 * l + 1, 2 * k + 1));
    let s3 = 1.0 / 3f64.sqrt();
    match (l, k, j) {
        (0, 0, 0) => q[[0, 0, 0]] = 1.0,
        (1, 0, 1) => {
            for m in 0..3 {
                q[[m, m, 0]] = s3;
            }
        }
        (0, 1, 1) => {
            for m in 0..3 {
                q[[m, 0, m]] = s3;
            }
        }
        (1, 1, 0) => {
            for a in 0..3 {
                q[[0, a, a]] = s3;
            }
        }
        (1, 1, 1) => {
            let s6 = 1.0 / 6f64.sqrt();
            // Levi-Civita, Cartesian indices throughout.
            q[[0, 1, 2]] = s6;
            q[[0, 2, 1]] = -s6;
            q[[1, 2, 0]] = s6;
            q[[1, 0, 2]] = -s6;
            q[[2, 0, 1]] = s6;
            q[[2, 1, 0]] = -s6;
        }
        (1, 1, 2) => {
            let s5 = 1.0 / 5f64.sqrt();
            for m in 0..5 {
                for a in 0..3 {
                    for b in 0..3 {
                        q[[m, a, b]] = S_BASIS[m][a][b] * s5;
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    q
}

/// Number of Gaussian bumps in the fixed radial basis.
pub const RADIAL_BASIS: usize = 16;
/// Support cutoff of the radial basis in angstroms; activations vanish beyond.
pub const R_CUT: f64 = 6.0;
const CENTER_SPAN: f64 = 5.0;

/// Gaussian bump activations with a smooth cosine envelope that reaches zero
/// exactly at [`R_CUT`].  Centers are uniform on [0, 5], width one spacing.
pub fn radial_basis(r: f64) -> [f64; RADIAL_BASIS] {
    let mut out = [0.0; RADIAL_BASIS];
    if !(0.0..R_CUT).contains(&r) {
        return out;
    }
    let spacing = CENTER_SPAN / (RADIAL_BASIS - 1) as f64;
    let envelope = 0.5 * (1.0 + (std::f64::consts::PI * r / R_CUT).cos());
    for (i, slot) in out.iter_mut().enumerate() {
        let d = r - i as f64 * spacing;
        *slot = (-d * d / (2.0 * spacing * spacing)).exp() * envelope;
    }
    out
}

/// Uniformly distributed rotation matrix (quaternion method).
pub fn random_rotation(rng: &mut impl Rng) -> Array2<f64> {
    loop {
        let q: [f64; 4] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if !(1e-8..=1.0).contains(&n2) {
            continue;
        }
        let n = n2.sqrt();
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        let mut r = Array2::zeros((3, 3));
        r[[0, 0]] = 1.0 - 2.0 * (y * y + z * z);
        r[[0, 1]] = 2.0 * (x * y - z * w);
        r[[0, 2]] = 2.0 * (x * z + y * w);
        r[[1, 0]] = 2.0 * (x * y + z * w);
        r[[1, 1]] = 1.0 - 2.0 * (x * x + z * z);
        r[[1, 2]] = 2.0 * (y * z - x * w);
        r[[2, 0]] = 2.0 * (x * z - y * w);
        r[[2, 1]] = 2.0 * (y * z + x * w);
        r[[2, 2]] = 1.0 - 2.0 * (x * x + y * y);
        return r;
    }
}

/// Uniformly distributed point on the unit sphere.
pub fn random_unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}
