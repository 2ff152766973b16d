//! Minimal (5-point) and non-minimal (8-point) essential matrix solvers
//! over normalized image coordinates.
//!
//! The 5-point solver follows the action-matrix approach: the four-dimensional
//! nullspace of the epipolar system is substituted into the rank and trace
//! constraints, the resulting ten cubic equations are reduced by elimination,
//! and candidate solutions are read off the eigenvectors of the multiplication
//! operator on the quotient basis. The cubic constraint coefficients are
//! expanded numerically with small dense polynomial products rather than
//! hard-coded expansion tables.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use super::{Correspondence, TwoViewError};

/// Monomial order for degree <= 3 polynomials in (x, y, z):
/// the first ten are the eliminated cubics, the last ten form the quotient
/// basis [x^2, xy, y^2, xz, yz, z^2, x, y, z, 1].
fn deg3_index(ex: usize, ey: usize, ez: usize) -> usize {
    match (ex, ey, ez) {
        (3, 0, 0) => 0,
        (2, 1, 0) => 1,
        (1, 2, 0) => 2,
        (0, 3, 0) => 3,
        (2, 0, 1) => 4,
        (1, 1, 1) => 5,
        (0, 2, 1) => 6,
        (1, 0, 2) => 7,
        (0, 1, 2) => 8,
        (0, 0, 3) => 9,
        _ => 10 + deg2_index(ex, ey, ez),
    }
}

fn deg2_index(ex: usize, ey: usize, ez: usize) -> usize {
    match (ex, ey, ez) {
        (2, 0, 0) => 0,
        (1, 1, 0) => 1,
        (0, 2, 0) => 2,
        (1, 0, 1) => 3,
        (0, 1, 1) => 4,
        (0, 0, 2) => 5,
        (1, 0, 0) => 6,
        (0, 1, 0) => 7,
        (0, 0, 1) => 8,
        (0, 0, 0) => 9,
        _ => unreachable!("degree-2 exponent out of range"),
    }
}

const DEG1_EXP: [(usize, usize, usize); 4] = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)];
const DEG2_EXP: [(usize, usize, usize); 10] = [
    (2, 0, 0),
    (1, 1, 0),
    (0, 2, 0),
    (1, 0, 1),
    (0, 1, 1),
    (0, 0, 2),
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (0, 0, 0),
];

/// Degree-1 polynomial over [x, y, z, 1].
type Poly1 = [f64; 4];
/// Degree-2 polynomial over the ten monomials of `DEG2_EXP`.
type Poly2 = [f64; 10];
/// Degree-3 polynomial over the twenty monomials of `deg3_index`.
type Poly3 = [f64; 20];

fn mul11(a: &Poly1, b: &Poly1) -> Poly2 {
    let mut out = [0.0; 10];
    for (i, &(ax, ay, az)) in DEG1_EXP.iter().enumerate() {
        if a[i] == 0.0 {
            continue;
        }
        for (j, &(bx, by, bz)) in DEG1_EXP.iter().enumerate() {
            out[deg2_index(ax + bx, ay + by, az + bz)] += a[i] * b[j];
        }
    }
    out
}

fn mul21(a: &Poly2, b: &Poly1) -> Poly3 {
    let mut out = [0.0; 20];
    for (i, &(ax, ay, az)) in DEG2_EXP.iter().enumerate() {
        if a[i] == 0.0 {
            continue;
        }
        for (j, &(bx, by, bz)) in DEG1_EXP.iter().enumerate() {
            out[deg3_index(ax + bx, ay + by, az + bz)] += a[i] * b[j];
        }
    }
    out
}

fn add2(a: &Poly2, b: &Poly2) -> Poly2 {
    std::array::from_fn(|i| a[i] + b[i])
}

fn sub2(a: &Poly2, b: &Poly2) -> Poly2 {
    std::array::from_fn(|i| a[i] - b[i])
}

/// The four-dimensional (right) nullspace of the 5x9 epipolar system,
/// returned as 3x3 matrices; the last one carries the affine coefficient 1.
fn epipolar_nullspace(sample: &[Correspondence]) -> Result<[Matrix3<f64>; 4], TwoViewError> {
    debug_assert_eq!(sample.len(), 5);
    let mut q = DMatrix::<f64>::zeros(5, 9);
    for (r, c) in sample.iter().enumerate() {
        let (x1, y1) = (c.p[0], c.p[1]);
        let (x2, y2) = (c.p_prime[0], c.p_prime[1]);
        // Coefficients of E11..E33 (row major) in p2^T E p1 = 0.
        q[(r, 0)] = x2 * x1;
        q[(r, 1)] = x2 * y1;
        q[(r, 2)] = x2;
        q[(r, 3)] = y2 * x1;
        q[(r, 4)] = y2 * y1;
        q[(r, 5)] = y2;
        q[(r, 6)] = x1;
        q[(r, 7)] = y1;
        q[(r, 8)] = 1.0;
    }
    let qtq = q.transpose() * &q;
    let eig = SymmetricEigen::new(qtq);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lam_max = eig.eigenvalues[order[8]].abs();
    let lam_rank = eig.eigenvalues[order[4]].abs();
    // The system must have rank 5 (exactly four nullspace directions).
    if lam_max <= 0.0 || lam_rank <= 1e-20 * lam_max {
        return Err(TwoViewError::DegenerateSample);
    }
    let as_matrix = |col: usize| {
        let v = eig.eigenvectors.column(col);
        Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
    };
    // Smallest eigenvector last: it gets the affine coefficient.
    Ok([
        as_matrix(order[3]),
        as_matrix(order[2]),
        as_matrix(order[1]),
        as_matrix(order[0]),
    ])
}

/// Expands det(E) = 0 and 2 E E^T E - tr(E E^T) E = 0 over the nullspace
/// parameterization E = x E1 + y E2 + z E3 + E4 into a 10x20 system.
fn constraint_matrix(basis: &[Matrix3<f64>; 4]) -> DMatrix<f64> {
    // e[r][c] is the degree-1 polynomial for entry (r, c) of E(x, y, z).
    let e: [[Poly1; 3]; 3] = std::array::from_fn(|r| {
        std::array::from_fn(|c| {
            [basis[0][(r, c)], basis[1][(r, c)], basis[2][(r, c)], basis[3][(r, c)]]
        })
    });

    let mut rows: Vec<Poly3> = Vec::with_capacity(10);

    // det(E) via cofactor expansion along the first row.
    let minor = |r0: usize, r1: usize, c0: usize, c1: usize| -> Poly2 {
        sub2(&mul11(&e[r0][c0], &e[r1][c1]), &mul11(&e[r0][c1], &e[r1][c0]))
    };
    let mut det = mul21(&minor(1, 2, 1, 2), &e[0][0]);
    let d1 = mul21(&minor(1, 2, 0, 2), &e[0][1]);
    let d2 = mul21(&minor(1, 2, 0, 1), &e[0][2]);
    for i in 0..20 {
        det[i] = det[i] - d1[i] + d2[i];
    }
    rows.push(det);

    // Gram matrix E E^T and its trace (degree-2 entries).
    let mut gram = [[[0.0; 10]; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let mut acc = [0.0; 10];
            for k in 0..3 {
                acc = add2(&acc, &mul11(&e[r][k], &e[c][k]));
            }
            gram[r][c] = acc;
        }
    }
    let trace = add2(&add2(&gram[0][0], &gram[1][1]), &gram[2][2]);

    // 2 (E E^T) E - tr(E E^T) E, entry by entry.
    for r in 0..3 {
        for c in 0..3 {
            let mut row = [0.0; 20];
            for k in 0..3 {
                let term = mul21(&gram[r][k], &e[k][c]);
                for i in 0..20 {
                    row[i] += 2.0 * term[i];
                }
            }
            let tr_term = mul21(&trace, &e[r][c]);
            for i in 0..20 {
                row[i] -= tr_term[i];
            }
            rows.push(row);
        }
    }

    let mut a = DMatrix::<f64>::zeros(10, 20);
    for (r, row) in rows.iter().enumerate() {
        for c in 0..20 {
            a[(r, c)] = row[c];
        }
    }
    a
}

/// Eigenvector of `m` for eigenvalue `lambda` by inverse iteration, with an
/// SVD nullspace fallback when the iteration fails to lock on.
fn eigenvector_for(m: &DMatrix<f64>, lambda: f64) -> Option<DVector<f64>> {
    let n = m.nrows();
    let shift = lambda + 1e-12 * (1.0 + lambda.abs());
    let mut shifted = m.clone();
    for i in 0..n {
        shifted[(i, i)] -= shift;
    }
    if let Some(lu) = Some(shifted.clone().full_piv_lu()) {
        let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let mut ok = false;
        for _ in 0..4 {
            match lu.solve(&v) {
                Some(next) => {
                    let norm = next.norm();
                    if !norm.is_finite() || norm == 0.0 {
                        break;
                    }
                    v = next / norm;
                    ok = true;
                }
                None => break,
            }
        }
        if ok {
            let resid = (m * &v - lambda * &v).norm();
            if resid < 1e-6 {
                return Some(v);
            }
        }
    }
    // Fallback: smallest singular direction of (m - lambda I).
    let mut shifted = m.clone();
    for i in 0..n {
        shifted[(i, i)] -= lambda;
    }
    let svd = shifted.svd(false, true);
    let v_t = svd.v_t?;
    Some(v_t.row(n - 1).transpose())
}

/// Runs the minimal 5-point solver; returns up to ten essential matrix
/// candidates with unit Frobenius norm.
pub fn solve_essential_minimal(
    sample: &[Correspondence],
) -> Result<Vec<Matrix3<f64>>, TwoViewError> {
    if sample.len() != 5 {
        return Err(TwoViewError::InsufficientMatches { got: sample.len() });
    }
    let basis = epipolar_nullspace(sample)?;
    let a = constraint_matrix(&basis);

    let a1 = a.columns(0, 10).into_owned();
    let a2 = a.columns(10, 10).into_owned();
    let lu = a1.full_piv_lu();
    let a3 = lu.solve(&a2).ok_or(TwoViewError::DegenerateSample)?;

    // Action matrix for multiplication by x on the quotient basis
    // [x^2, xy, y^2, xz, yz, z^2, x, y, z, 1].
    let mut action = DMatrix::<f64>::zeros(10, 10);
    for (dst, src) in [(0, 0), (1, 1), (2, 2), (3, 4), (4, 5), (5, 7)] {
        for c in 0..10 {
            action[(dst, c)] = -a3[(src, c)];
        }
    }
    action[(6, 0)] = 1.0;
    action[(7, 1)] = 1.0;
    action[(8, 3)] = 1.0;
    action[(9, 6)] = 1.0;

    let schur = action.clone().schur();
    let eigvals = schur.complex_eigenvalues();

    let mut candidates = Vec::new();
    for ev in eigvals.iter() {
        if ev.im.abs() > 1e-10 * (1.0 + ev.re.abs()) {
            continue;
        }
        let Some(v) = eigenvector_for(&action, ev.re) else { continue };
        let v9 = v[9];
        if v9.abs() < 1e-12 {
            continue;
        }
        let (x, y, z) = (v[6] / v9, v[7] / v9, v[8] / v9);
        let e = basis[0] * x + basis[1] * y + basis[2] * z + basis[3];
        let norm = e.norm();
        if !norm.is_finite() || norm < 1e-12 {
            continue;
        }
        let e = e / norm;
        if essential_residual(&e) < 1e-8 && max_epipolar_residual(&e, sample) < 1e-8 {
            candidates.push(e);
        }
    }
    Ok(candidates)
}

/// Frobenius-norm violation of the essential matrix constraints
/// (det E = 0 and the trace identity) for a unit-norm matrix.
pub fn essential_residual(e: &Matrix3<f64>) -> f64 {
    let gram = e * e.transpose();
    let trace = gram.trace();
    let cubic = 2.0 * gram * e - trace * e;
    cubic.norm().max(e.determinant().abs())
}

fn max_epipolar_residual(e: &Matrix3<f64>, sample: &[Correspondence]) -> f64 {
    sample
        .iter()
        .map(|c| {
            let p1 = Vector3::new(c.p[0], c.p[1], 1.0);
            let p2 = Vector3::new(c.p_prime[0], c.p_prime[1], 1.0);
            (p2.dot(&(e * p1))).abs()
        })
        .fold(0.0, f64::max)
}

/// Normalized 8-point solve followed by projection onto the essential
/// manifold; used for non-minimal refits on inlier sets.
pub fn eight_point(corrs: &[Correspondence]) -> Result<Matrix3<f64>, TwoViewError> {
    if corrs.len() < 8 {
        return Err(TwoViewError::InsufficientMatches { got: corrs.len() });
    }
    let t1 = hartley_normalization(corrs.iter().map(|c| c.p));
    let t2 = hartley_normalization(corrs.iter().map(|c| c.p_prime));

    let mut a = DMatrix::<f64>::zeros(corrs.len(), 9);
    for (r, c) in corrs.iter().enumerate() {
        let q1 = t1 * Vector3::new(c.p[0], c.p[1], 1.0);
        let q2 = t2 * Vector3::new(c.p_prime[0], c.p_prime[1], 1.0);
        a[(r, 0)] = q2.x * q1.x;
        a[(r, 1)] = q2.x * q1.y;
        a[(r, 2)] = q2.x;
        a[(r, 3)] = q2.y * q1.x;
        a[(r, 4)] = q2.y * q1.y;
        a[(r, 5)] = q2.y;
        a[(r, 6)] = q1.x;
        a[(r, 7)] = q1.y;
        a[(r, 8)] = 1.0;
    }
    let ata = a.transpose() * &a;
    let eig = SymmetricEigen::new(ata);
    let mut min_i = 0;
    for i in 1..9 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
            min_i = i;
        }
    }
    let v = eig.eigenvectors.column(min_i);
    let e_hat = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
    let e = t2.transpose() * e_hat * t1;

    // Project to the essential manifold: equal leading singular values.
    let svd = e.svd(true, true);
    let (u, v_t) = (
        svd.u.ok_or(TwoViewError::DegenerateSample)?,
        svd.v_t.ok_or(TwoViewError::DegenerateSample)?,
    );
    let proj = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * v_t;
    let norm = proj.norm();
    if !norm.is_finite() || norm < 1e-12 {
        return Err(TwoViewError::DegenerateSample);
    }
    Ok(proj / norm)
}

/// Similarity that centers the points and scales their RMS radius to sqrt(2).
fn hartley_normalization(points: impl Iterator<Item = [f64; 2]> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for p in points.clone() {
        mx += p[0];
        my += p[1];
    }
    mx /= n;
    my /= n;
    let mut rms = 0.0;
    for p in points {
        rms += (p[0] - mx).powi(2) + (p[1] - my).powi(2);
    }
    rms = (rms / n).sqrt();
    let s = if rms > 1e-12 { std::f64::consts::SQRT_2 / rms } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}
