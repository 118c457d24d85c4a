//! Field containers and the discrete calculus everything else is built on.

mod fields;
mod fourier;
mod stencils;
mod transfer;

pub use fields::{determinant, ComplexField2D, Field2D, MatrixField2D, VectorField2D};
pub use rustfft::num_complex::Complex;
pub use fourier::{fft2, fft2_real, ifft2, screened_poisson_neumann};
#[cfg(test)]
pub(crate) use fourier::{dct2_2d, idct2_2d};
pub(crate) use stencils::reflect as reflect_index;
pub use stencils::{
    bilinear, centered_gradient, convolve_symmetric, divergence, gaussian_blur, gaussian_kernel,
    gradient, jacobian, laplacian, warp,
};
pub use transfer::{prolong, prolong_to, restrict};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::Deformation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rustfft::num_complex::Complex;
    use std::f64::consts::PI;

    fn random_field(rng: &mut ChaCha8Rng, ny: usize, nx: usize) -> Field2D {
        Field2D::from_fn(ny, nx, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_complex(rng: &mut ChaCha8Rng, ny: usize, nx: usize) -> ComplexField2D {
        let mut f = ComplexField2D::zeros(ny, nx);
        for c in &mut f.data {
            *c = Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        f
    }

    #[test]
    fn gradient_hand_case() {
        let f = Field2D::from_vec(2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        let g = gradient(&f);
        assert_eq!(g.x.data, vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(g.y.data, vec![0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn divergence_is_negative_adjoint_of_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(ny, nx) in &[(5, 5), (8, 3), (1, 9), (16, 16)] {
            let f = random_field(&mut rng, ny, nx);
            let v = VectorField2D::new(random_field(&mut rng, ny, nx), random_field(&mut rng, ny, nx));
            let lhs = gradient(&f).dot(&v);
            let rhs = -f.dot(&divergence(&v));
            assert!(
                (lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()),
                "adjoint identity broken: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn laplacian_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_field(&mut rng, 9, 7);
        let a = laplacian(&f);
        let b = divergence(&gradient(&f));
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn laplacian_of_linear_field_vanishes_inside() {
        let f = Field2D::from_fn(8, 8, |i, j| 2.0 * i as f64 - 3.0 * j as f64);
        let l = laplacian(&f);
        for i in 1..7 {
            for j in 1..7 {
                assert!(l.at(i, j).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn warp_by_identity_is_a_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_field(&mut rng, 6, 6);
        let d = Deformation::identity(6, 6);
        assert_eq!(warp(&f, &d).data, f.data);
    }

    #[test]
    fn warp_by_unit_x_translation_shifts_columns() {
        let f = Field2D::from_fn(3, 3, |i, j| (3 * i + j) as f64);
        let mut d = Deformation::identity(3, 3);
        for a in &mut d.v.x.data {
            *a = 1.0;
        }
        let w = warp(&f, &d);
        for i in 0..3 {
            for j in 0..3 {
                let jj = (j + 1).min(2);
                assert_eq!(w.at(i, j), f.at(i, jj));
            }
        }
    }

    #[test]
    fn jacobian_of_uniform_scaling() {
        // phi(x) = 1.1 x, so v = 0.1 x and the Jacobian is diag(1.1, 1.1)
        // away from the Neumann boundary rows.
        let mut d = Deformation::identity(8, 8);
        for i in 0..8 {
            for j in 0..8 {
                *d.v.y.at_mut(i, j) = 0.1 * i as f64;
                *d.v.x.at_mut(i, j) = 0.1 * j as f64;
            }
        }
        let m = jacobian(&d);
        for i in 0..7 {
            for j in 0..7 {
                assert!((m.m11.at(i, j) - 1.1).abs() < 1e-12);
                assert!((m.m22.at(i, j) - 1.1).abs() < 1e-12);
                assert!(m.m12.at(i, j).abs() < 1e-12);
                assert!(m.m21.at(i, j).abs() < 1e-12);
            }
        }
        let det = determinant(&m);
        assert!((det.at(3, 3) - 1.21).abs() < 1e-12);
    }

    #[test]
    fn fft_round_trip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for &(ny, nx) in &[(8, 8), (16, 4), (5, 7)] {
            let f = random_complex(&mut rng, ny, nx);
            let hat = fft2(&f);
            assert!(
                (hat.norm_sq() - f.norm_sq()).abs() <= 1e-12 * f.norm_sq(),
                "transform is not unitary"
            );
            let back = ifft2(&hat);
            let err: f64 = f.sub(&back).norm_sq();
            assert!(err <= 1e-24 * f.norm_sq());
        }
    }

    #[test]
    fn fft_of_constant_concentrates_at_dc() {
        let f = ComplexField2D::from_real(&Field2D::constant(8, 8, 3.0));
        let hat = fft2(&f);
        assert!((hat.at(0, 0).re - 3.0 * 8.0).abs() < 1e-12);
        let off_dc: f64 = hat.data[1..].iter().map(|c| c.norm_sqr()).sum();
        assert!(off_dc < 1e-24);
    }

    fn naive_dct2(f: &Field2D) -> Field2D {
        let (ny, nx) = (f.ny, f.nx);
        Field2D::from_fn(ny, nx, |k1, k2| {
            let mut s = 0.0;
            for i in 0..ny {
                for j in 0..nx {
                    s += f.at(i, j)
                        * (PI * k1 as f64 * (2 * i + 1) as f64 / (2.0 * ny as f64)).cos()
                        * (PI * k2 as f64 * (2 * j + 1) as f64 / (2.0 * nx as f64)).cos();
                }
            }
            s
        })
    }

    #[test]
    fn dct_matches_direct_sum_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(ny, nx) in &[(4, 4), (5, 3), (8, 7), (1, 6)] {
            let f = random_field(&mut rng, ny, nx);
            let fast = dct2_2d(&f);
            let slow = naive_dct2(&f);
            let scale = slow.norm() + 1.0;
            assert!(fast.sub(&slow).norm() <= 1e-11 * scale, "dct mismatch at {ny}x{nx}");
            let back = idct2_2d(&fast);
            assert!(back.sub(&f).norm() <= 1e-12 * (f.norm() + 1.0));
        }
    }

    #[test]
    fn dct_diagonalises_the_laplacian() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = random_field(&mut rng, 12, 10);
        let mut coef = dct2_2d(&f);
        for k1 in 0..12 {
            for k2 in 0..10 {
                let mu = 4.0 * (PI * k1 as f64 / 24.0).sin().powi(2)
                    + 4.0 * (PI * k2 as f64 / 20.0).sin().powi(2);
                coef.data[k1 * 10 + k2] *= -mu;
            }
        }
        let spectral = idct2_2d(&coef);
        let direct = laplacian(&f);
        assert!(spectral.sub(&direct).norm() <= 1e-11 * (direct.norm() + 1.0));
    }

    #[test]
    fn screened_poisson_satisfies_its_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rhs = random_field(&mut rng, 16, 12);
        let c = 0.005;
        let sol = screened_poisson_neumann(&rhs, c);
        let mut lhs = sol.clone();
        lhs.add_scaled(&laplacian(&sol), -c);
        assert!(lhs.sub(&rhs).norm() <= 1e-11 * rhs.norm());
        let plain = screened_poisson_neumann(&rhs, 0.0);
        assert!(plain.sub(&rhs).norm() <= 1e-12 * rhs.norm());
    }

    #[test]
    fn restrict_block_means_and_odd_edges() {
        let f = Field2D::from_fn(4, 4, |i, j| (4 * i + j) as f64);
        let c = restrict(&f);
        assert_eq!(c.ny, 2);
        assert_eq!(c.data, vec![2.5, 4.5, 10.5, 12.5]);

        let odd = Field2D::from_fn(3, 3, |i, j| (3 * i + j) as f64);
        let co = restrict(&odd);
        assert_eq!((co.ny, co.nx), (2, 2));
        // last row and column replicate
        assert_eq!(co.at(1, 1), 8.0);
    }

    #[test]
    fn transfer_preserves_constants() {
        let c = Field2D::constant(6, 5, 4.25);
        let down = restrict(&c);
        assert!(down.data.iter().all(|&v| (v - 4.25).abs() < 1e-15));
        let up = prolong(&down);
        assert_eq!((up.ny, up.nx), (6, 6));
        assert!(up.data.iter().all(|&v| (v - 4.25).abs() < 1e-15));
        let odd = prolong_to(&down, 7, 5);
        assert!(odd.data.iter().all(|&v| (v - 4.25).abs() < 1e-15));
    }

    #[test]
    fn bilinear_reproduces_grid_values_and_clamps() {
        let f = Field2D::from_fn(3, 4, |i, j| (i * 10 + j) as f64);
        assert_eq!(bilinear(&f, 1.0, 2.0), 12.0);
        assert_eq!(bilinear(&f, -5.0, 0.0), 0.0);
        assert_eq!(bilinear(&f, 2.0, 9.0), 23.0);
        // halfway between two pixels
        assert!((bilinear(&f, 0.0, 0.5) - 0.5).abs() < 1e-15);
    }
}
