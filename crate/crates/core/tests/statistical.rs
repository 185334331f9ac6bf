//! Multi-seed invariants of the trained transports.

use wflow::datasets::{AnalyticDensity, Gaussian};
use wflow::flow::{FlowBlock, FlowChain, ParticleEnsemble};
use wflow::metrics::w2_exact;
use wflow::objectives::{train_jko_block, TrainConfig};
use wflow::rng::{normal_tensor, seeded};
use wflow::transport::{dro_train, ot_train, transport_cost, DroConfig, Marginal, OtConfig, RiskFunction};
use wflow::velocity::FieldSpec;

fn mean_sq_displacement(a: &wflow::Tensor, b: &wflow::Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.rows() as f64
}

// A stronger W2 penalty 1/(2γ) means shorter moves. The exact proximal step
// from N((3, 0), I) moves every particle by 3γ/(1+γ).
#[test]
fn displacement_shrinks_as_the_penalty_grows() {
    let base = AnalyticDensity::Gaussian(Gaussian::standard(2).unwrap());
    for seed in 0..5u64 {
        let mut x = normal_tensor(&mut seeded(100 + seed), 400, 2);
        for i in 0..400 {
            x.data_mut()[2 * i] += 3.0;
        }
        let mut moved = Vec::new();
        for gamma in [10.0, 1.0, 0.1] {
            let mut block = FlowBlock::init(&FieldSpec::new(2).with_hidden(&[16]), 4, seed).unwrap();
            let cfg = TrainConfig {
                learn_rate: 2e-2,
                batch_size: 128,
                iterations: 200,
                seed,
                gamma,
                min_lr_fraction: 0.05,
                train_steps: Some(2),
                ..TrainConfig::default()
            };
            train_jko_block(&mut block, &x, &base, &cfg).unwrap();
            moved.push(mean_sq_displacement(&block.forward(&x).unwrap(), &x));
        }
        assert!(moved[0] >= moved[1] && moved[1] >= moved[2], "seed {seed}: {moved:?}");
        let exact: Vec<f64> = [10.0f64, 1.0, 0.1].iter().map(|g| (3.0 * g / (1.0 + g)).powi(2)).collect();
        for (m, e) in moved.iter().zip(&exact) {
            assert!((m - e).abs() <= 0.25 * e + 0.05, "seed {seed}: {moved:?} vs {exact:?}");
        }
    }
}

// A path's kinetic cost bounds the squared displacement of its endpoint
// coupling, which in turn bounds W₂² between the particles and their images.
#[test]
fn transport_cost_is_at_least_w2() {
    let p = AnalyticDensity::Gaussian(Gaussian::isotropic(vec![0.0], 1.0).unwrap());
    let q = AnalyticDensity::Gaussian(Gaussian::isotropic(vec![2.0], 1.0).unwrap());
    for seed in 0..3u64 {
        let x = p.sample(&mut seeded(200 + seed), 1000);
        let y = q.sample(&mut seeded(300 + seed), 1000);
        let chain = FlowChain::init(2, &FieldSpec::new(1).with_hidden(&[16]), 4, p.clone(), seed).unwrap();
        let cfg = OtConfig {
            train: TrainConfig {
                learn_rate: 2e-2,
                batch_size: 128,
                iterations: 400,
                seed,
                train_steps: Some(2),
                min_lr_fraction: 0.05,
                ..TrainConfig::default()
            },
            ..OtConfig::default()
        };
        let r = ot_train(&Marginal::analytic(p.clone(), x.clone()), &Marginal::analytic(q.clone(), y.clone()), chain, 10.0, &cfg)
            .unwrap();
        let held = x.select_rows(&(0..400).collect::<Vec<_>>());
        let cost = transport_cost(&r.chain, &held).unwrap();
        let fx = r.chain.forward_map(&ParticleEnsemble::new(held.clone()).unwrap()).unwrap();
        let endpoint = mean_sq_displacement(fx.points(), &held);
        let w2_pushed = w2_exact(&held, fx.points()).unwrap().powi(2);
        assert!(cost >= endpoint - 1e-9 && endpoint >= w2_pushed - 1e-9, "seed {seed}: {cost} {endpoint} {w2_pushed}");
        // the map actually moves mass, so the bound is not vacuous
        assert!(w2_pushed > 1.0, "seed {seed}: {w2_pushed}");
    }
}

// With R(x) = cᵀx the worst case moves to x − γc: the risk the adversary
// lowers falls by γ‖c‖², so the severity −R grows with the budget γ.
#[test]
fn worst_case_severity_grows_with_budget() {
    let c = vec![1.0, -0.5];
    for seed in 0..5u64 {
        let x = normal_tensor(&mut seeded(400 + seed), 256, 2);
        let mut severity = Vec::new();
        for gamma in [0.1, 1.0, 10.0] {
            let cfg = DroConfig {
                train: TrainConfig {
                    learn_rate: 3e-2,
                    batch_size: 128,
                    iterations: 600,
                    seed,
                    train_steps: Some(2),
                    min_lr_fraction: 0.01,
                    ..TrainConfig::default()
                },
                hidden: vec![16],
                steps: 4,
                init_seed: seed,
                ..DroConfig::default()
            };
            let r = dro_train(&RiskFunction::Linear { c: c.clone() }, &x, gamma, &cfg).unwrap();
            severity.push(-r.risk);
        }
        assert!(severity[0] <= severity[1] && severity[1] <= severity[2], "seed {seed}: {severity:?}");
    }
}
