//! Minimal 2×2 complex matrix arithmetic for density matrices and
//! single-qubit rotations.

use num_complex::Complex64 as C64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat2 {
    pub e: [[C64; 2]; 2],
}

impl Mat2 {
    pub fn new(a: C64, b: C64, c: C64, d: C64) -> Self {
        Mat2 { e: [[a, b], [c, d]] }
    }

    pub fn zero() -> Self {
        Mat2::new(C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0))
    }

    pub fn identity() -> Self {
        Mat2::new(C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0))
    }

    /// |ψ⟩⟨ψ| for a (possibly unnormalized) two-component state.
    pub fn outer(psi: [C64; 2]) -> Self {
        Mat2::new(
            psi[0] * psi[0].conj(),
            psi[0] * psi[1].conj(),
            psi[1] * psi[0].conj(),
            psi[1] * psi[1].conj(),
        )
    }

    pub fn mul(&self, rhs: &Mat2) -> Mat2 {
        let mut out = Mat2::zero();
        for i in 0..2 {
            for j in 0..2 {
                out.e[i][j] = self.e[i][0] * rhs.e[0][j] + self.e[i][1] * rhs.e[1][j];
            }
        }
        out
    }

    pub fn adjoint(&self) -> Mat2 {
        Mat2::new(
            self.e[0][0].conj(),
            self.e[1][0].conj(),
            self.e[0][1].conj(),
            self.e[1][1].conj(),
        )
    }

    pub fn trace(&self) -> C64 {
        self.e[0][0] + self.e[1][1]
    }

    pub fn apply(&self, psi: [C64; 2]) -> [C64; 2] {
        [
            self.e[0][0] * psi[0] + self.e[0][1] * psi[1],
            self.e[1][0] * psi[0] + self.e[1][1] * psi[1],
        ]
    }

    /// Largest deviation from Hermiticity.
    pub fn hermiticity_error(&self) -> f64 {
        let d = self.e[0][1] - self.e[1][0].conj();
        d.norm()
            .max(self.e[0][0].im.abs())
            .max(self.e[1][1].im.abs())
    }

    /// Eigendecomposition of a Hermitian 2×2 matrix.
    ///
    /// Returns (eigenvalues ascending, eigenvectors as columns).
    pub fn eigh(&self) -> ([f64; 2], [[C64; 2]; 2]) {
        let a = self.e[0][0].re;
        let d = self.e[1][1].re;
        let b = self.e[0][1];
        let tr = a + d;
        let half_gap = ((a - d) * (a - d) / 4.0 + b.norm_sqr()).sqrt();
        let l0 = tr / 2.0 - half_gap;
        let l1 = tr / 2.0 + half_gap;
        if b.norm() < 1e-300 {
            // already diagonal
            if a <= d {
                return ([a, d], [[C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
                                 [C64::new(0.0, 0.0), C64::new(1.0, 0.0)]]);
            } else {
                return ([d, a], [[C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
                                 [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]]);
            }
        }
        // eigenvector for eigenvalue l: (b, l - a) normalized
        let mk = |l: f64| -> [C64; 2] {
            let v = [b, C64::new(l - a, 0.0)];
            let n = (v[0].norm_sqr() + v[1].norm_sqr()).sqrt();
            [v[0] / n, v[1] / n]
        };
        let v0 = mk(l0);
        let v1 = mk(l1);
        ([l0, l1], [[v0[0], v1[0]], [v0[1], v1[1]]])
    }

    /// Principal square root of a Hermitian positive-semidefinite matrix.
    /// Small negative eigenvalues (|λ| ≤ tol) are clamped to zero.
    pub fn sqrt_psd(&self, tol: f64) -> Result<Mat2, String> {
        let (ls, v) = self.eigh();
        for &l in &ls {
            if l < -tol {
                return Err(format!("negative eigenvalue {l:.3e} beyond tolerance"));
            }
        }
        // eigenvalues at rounding-error level are exact zeros of the true
        // matrix; √ε would otherwise pollute the trace at the 1e-8 level
        let floor = 1e-14 * ls[1].abs().max(ls[0].abs());
        let clip = |l: f64| if l <= floor { 0.0 } else { l };
        let s = [clip(ls[0]).sqrt(), clip(ls[1]).sqrt()];
        // V diag(s) V†
        let mut out = Mat2::zero();
        for i in 0..2 {
            for j in 0..2 {
                out.e[i][j] =
                    v[i][0] * s[0] * v[j][0].conj() + v[i][1] * s[1] * v[j][1].conj();
            }
        }
        Ok(out)
    }
}

/// exp(-i (angle/2) (cosφ σx + sinφ σy)): rotation about an equatorial
/// Bloch axis at azimuth `phase`.
pub fn rotation(angle: f64, phase: f64) -> Mat2 {
    let c = (angle / 2.0).cos();
    let s = (angle / 2.0).sin();
    let em = C64::from_polar(1.0, -phase);
    let ep = C64::from_polar(1.0, phase);
    Mat2::new(
        C64::new(c, 0.0),
        C64::new(0.0, -s) * em,
        C64::new(0.0, -s) * ep,
        C64::new(c, 0.0),
    )
}

/// exp(-i (angle/2) σz).
pub fn rotation_z(angle: f64) -> Mat2 {
    Mat2::new(
        C64::from_polar(1.0, -angle / 2.0),
        C64::new(0.0, 0.0),
        C64::new(0.0, 0.0),
        C64::from_polar(1.0, angle / 2.0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eigh_recovers_matrix() {
        let m = Mat2::new(
            C64::new(1.3, 0.0),
            C64::new(0.2, -0.7),
            C64::new(0.2, 0.7),
            C64::new(-0.4, 0.0),
        );
        let (ls, v) = m.eigh();
        assert!(ls[0] <= ls[1]);
        let mut rec = Mat2::zero();
        for i in 0..2 {
            for j in 0..2 {
                rec.e[i][j] =
                    v[i][0] * ls[0] * v[j][0].conj() + v[i][1] * ls[1] * v[j][1].conj();
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(rec.e[i][j].re, m.e[i][j].re, epsilon = 1e-12);
                assert_abs_diff_eq!(rec.e[i][j].im, m.e[i][j].im, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let psi = [C64::new(0.6, 0.1), C64::new(0.3, -0.7)];
        let rho = Mat2::outer(psi);
        let s = rho.sqrt_psd(1e-12).unwrap();
        let sq = s.mul(&s);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(sq.e[i][j].re, rho.e[i][j].re, epsilon = 1e-12);
                assert_abs_diff_eq!(sq.e[i][j].im, rho.e[i][j].im, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rotation_is_unitary() {
        let u = rotation(1.234, 0.7);
        let p = u.mul(&u.adjoint());
        assert_abs_diff_eq!(p.e[0][0].re, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.e[1][1].re, 1.0, epsilon = 1e-14);
        assert!(p.e[0][1].norm() < 1e-14);
    }
}
