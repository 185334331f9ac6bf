//! The velocity field `v_θ(x, t)` and its divergence.

mod field;
mod mlp;

pub use field::{BoundField, DivergenceEstimator, FieldSpec, ProbeSet, VelocityField};
pub use mlp::{Activation, BoundMlp, Layer, Mlp};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use crate::rng::{normal_tensor, seeded};

    fn random_field(d: usize, seed: u64) -> VelocityField {
        // init_near_identity zeroes the output layer; perturb it so the field is non-trivial
        let spec = FieldSpec::new(d).with_hidden(&[7, 5]);
        let mut f = VelocityField::init_near_identity(&spec, seed).unwrap();
        let mut rng = seeded(seed + 100);
        let mut params = f.params();
        let n = params.len();
        params[n - 2] = normal_tensor(&mut rng, d, 5).map(|v| 0.5 * v);
        params[n - 1] = Tensor::vector(normal_tensor(&mut rng, 1, d).into_data());
        f.set_params(&params).unwrap();
        f
    }

    #[test]
    fn fresh_field_is_zero() {
        let f = VelocityField::init_near_identity(&FieldSpec::new(3), 7).unwrap();
        let x = normal_tensor(&mut seeded(1), 5, 3);
        for t in [0.0, 0.3, 1.0] {
            assert!(f.eval_velocity(&x, t).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = FieldSpec::new(2).with_hidden(&[8, 8]);
        let a = VelocityField::init_near_identity(&spec, 42).unwrap();
        let b = VelocityField::init_near_identity(&spec, 42).unwrap();
        let c = VelocityField::init_near_identity(&spec, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn init_rejects_zero_dimension() {
        assert!(VelocityField::init_near_identity(&FieldSpec::new(0), 1).is_err());
    }

    #[test]
    fn affine_layer_by_hand() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let f = VelocityField::affine(&a, &[3.0, -2.0], &[0.0, 0.0], 2.0, (0.0, 2.0)).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        // t̃ = 1.5 / 2 = 0.75
        let v = f.eval_velocity(&x, 1.5).unwrap();
        assert_eq!(v.data(), &[3.0 + 3.0 * 0.75, -0.5 - 2.0 * 0.75]);
    }

    #[test]
    fn batch_matches_pointwise() {
        let f = random_field(3, 5);
        let x = normal_tensor(&mut seeded(9), 6, 3);
        let batch = f.eval_velocity(&x, 0.4).unwrap();
        for i in 0..6 {
            let xi = Tensor::matrix(1, 3, x.row(i).to_vec()).unwrap();
            assert_eq!(f.eval_velocity(&xi, 0.4).unwrap().data(), batch.row(i));
        }
    }

    #[test]
    fn rejects_bad_calls() {
        let f = random_field(2, 1);
        assert!(f.eval_velocity(&Tensor::zeros(&[3, 3]), 0.5).is_err());
        assert!(f.eval_velocity(&Tensor::zeros(&[3, 2]), 1.5).is_err());
        let mut rng = seeded(0);
        assert!(f
            .divergence(
                &Tensor::zeros(&[1, 2]),
                0.5,
                DivergenceEstimator::Hutchinson { probes: 0 },
                &mut rng
            )
            .is_err());
    }

    #[test]
    fn linear_field_divergence() {
        let mut rng = seeded(0);
        let x = normal_tensor(&mut rng, 4, 2);
        let three = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 3.0]).unwrap();
        let f = VelocityField::affine(&three, &[0.0; 2], &[0.0; 2], 1.0, (0.0, 1.0)).unwrap();
        let div = f.divergence(&x, 0.5, DivergenceEstimator::Exact, &mut rng).unwrap();
        assert!(div.iter().all(|&v| (v - 6.0).abs() < 1e-14));

        let a = Tensor::matrix(2, 2, vec![0.5, 0.0, 0.0, -0.5]).unwrap();
        let f = VelocityField::affine(&a, &[0.0; 2], &[0.0; 2], 1.0, (0.0, 1.0)).unwrap();
        let div = f.divergence(&x, 0.5, DivergenceEstimator::Exact, &mut rng).unwrap();
        assert!(div.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn hutchinson_is_unbiased_for_linear_field() {
        // εᵀAε with Rademacher ε has variance 2(‖S‖²_F − Σ S_ii²), S = (A + Aᵀ)/2.
        let a = Tensor::matrix(2, 2, vec![2.0, 1.0, 3.0, 4.0]).unwrap();
        let s01 = 0.5 * (1.0 + 3.0);
        let var = 2.0 * (2.0 * s01 * s01);
        let k = 10_000;
        let se = (var / k as f64).sqrt();
        let f = VelocityField::affine(&a, &[0.0; 2], &[0.0; 2], 1.0, (0.0, 1.0)).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap();
        let est = f
            .divergence(&x, 0.0, DivergenceEstimator::Hutchinson { probes: k }, &mut seeded(3))
            .unwrap()[0];
        assert!((est - 6.0).abs() <= 3.0 * se, "estimate {est}, se {se}");
    }

    #[test]
    fn hutchinson_matches_exact_on_random_linear_fields() {
        let mut rng = seeded(11);
        for trial in 0..5 {
            let d = 3;
            let a = normal_tensor(&mut rng, d, d);
            let f = VelocityField::affine(&a, &[0.0; 3], &[0.0; 3], 1.0, (0.0, 1.0)).unwrap();
            let trace: f64 = (0..d).map(|i| a.get(i, i)).sum();
            let mut off = 0.0;
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        let s = 0.5 * (a.get(i, j) + a.get(j, i));
                        off += s * s;
                    }
                }
            }
            let k = 10_000;
            let se = (2.0 * off / k as f64).sqrt();
            let x = Tensor::matrix(1, d, vec![0.1; 3]).unwrap();
            let est = f
                .divergence(&x, 0.2, DivergenceEstimator::Hutchinson { probes: k }, &mut rng)
                .unwrap()[0];
            assert!((est - trace).abs() <= 3.0 * se.max(1e-12), "trial {trial}: {est} vs {trace}");
        }
    }

    #[test]
    fn exact_divergence_matches_fd_jacobian_trace() {
        for d in [1, 2, 5, 8] {
            let f = random_field(d, d as u64);
            let mut rng = seeded(20 + d as u64);
            let x = normal_tensor(&mut rng, 3, d);
            let t = 0.37;
            let div = f.divergence(&x, t, DivergenceEstimator::Exact, &mut rng).unwrap();
            for i in 0..3 {
                let mut trace = 0.0;
                for j in 0..d {
                    let h = 1e-5;
                    let mut up = Tensor::matrix(1, d, x.row(i).to_vec()).unwrap();
                    let mut dn = up.clone();
                    up.data_mut()[j] += h;
                    dn.data_mut()[j] -= h;
                    let vu = f.eval_velocity(&up, t).unwrap().data()[j];
                    let vd = f.eval_velocity(&dn, t).unwrap().data()[j];
                    trace += (vu - vd) / (2.0 * h);
                }
                let rel = (div[i] - trace).abs() / trace.abs().max(1e-3);
                assert!(rel < 1e-5, "d={d} row {i}: {} vs {trace}", div[i]);
            }
        }
    }

    #[test]
    fn velocity_is_continuous_in_time() {
        let f = random_field(2, 4);
        let x = Tensor::matrix(1, 2, vec![0.4, -1.0]).unwrap();
        let mut prev = f.eval_velocity(&x, 0.0).unwrap();
        for k in 1..=1000 {
            let cur = f.eval_velocity(&x, k as f64 / 1000.0).unwrap();
            let jump = prev.zip_map(&cur, |a, b| (a - b).abs()).max_abs();
            assert!(jump < 1e-2, "jump {jump} at step {k}");
            prev = cur;
        }
    }
}
