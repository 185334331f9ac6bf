//! Evaluation metrics and exact small-instance oracles.

mod fid;
mod mmd;
mod w2;

pub use fid::{gauss_fid, gauss_fid_moments, FidResult};
pub use mmd::{mmd_permutation_test, mmd_rbf, Bandwidth, MmdResult, PermutationTest, FALLBACK_BANDWIDTH};
pub use w2::{hungarian, w2_exact, MAX_ASSIGNMENT_SIZE};

use std::collections::BTreeMap;

use serde::Serialize;

use crate::datasets::Gaussian;
use crate::flow::{FlowChain, ParticleEnsemble};
use crate::numcore::Tensor;
use crate::rng::Rng;
use crate::velocity::DivergenceEstimator;
use crate::{Error, Result};

/// Share of non-finite log-ratio terms above which `kl_mc` aborts.
pub const MAX_NON_FINITE_FRACTION: f64 = 1e-3;

/// `−(1/m) Σ log p_θ(x_i)` over a held-out set.
pub fn nll_eval(
    chain: &FlowChain,
    test: &Tensor,
    est: DivergenceEstimator,
    rng: &mut Rng,
) -> Result<f64> {
    let lp = chain.log_density_batch(test, est, rng)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KlEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
    pub non_finite: usize,
}

/// `(1/m) Σ (log p(x_i) − log q(x_i))` for `x_i ~ p`, with its standard error.
pub fn kl_mc(
    logp: impl Fn(&[f64]) -> f64,
    logq: impl Fn(&[f64]) -> f64,
    samples: &Tensor,
) -> Result<KlEstimate> {
    let terms: Vec<f64> = (0..samples.rows())
        .map(|i| logp(samples.row(i)) - logq(samples.row(i)))
        .collect();
    kl_from_terms(&terms)
}

/// Mean and standard error of per-sample log-ratio terms.
pub fn kl_from_terms(terms: &[f64]) -> Result<KlEstimate> {
    let m = terms.len();
    if m < 2 {
        return Err(Error::invalid("KL estimate needs at least two samples"));
    }
    let finite: Vec<f64> = terms.iter().copied().filter(|v| v.is_finite()).collect();
    let bad = m - finite.len();
    if bad as f64 > MAX_NON_FINITE_FRACTION * m as f64 {
        return Err(Error::NonFinite(format!(
            "{bad} of {m} log-ratio terms are not finite"
        )));
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(KlEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
        samples: m,
        non_finite: bad,
    })
}

/// `KL(N(μ̂, Σ̂) ‖ target)` for the moments of `ens`.
pub fn gaussian_fit_kl(ens: &ParticleEnsemble, target: &Gaussian) -> Result<f64> {
    if ens.len() <= ens.dim() {
        return Err(Error::invalid("moment fit needs more points than dimensions"));
    }
    Gaussian::new(ens.mean(), ens.covariance())?.kl_to(target)
}

/// One metric value with everything needed to reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub sample_sizes: Vec<usize>,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl MetricReport {
    pub fn new(
        name: impl Into<String>,
        value: f64,
        sample_sizes: Vec<usize>,
        seed: u64,
        config: serde_json::Value,
    ) -> Result<Self> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric {name}")));
        }
        Ok(Self {
            name,
            value,
            sample_sizes,
            seed,
            config,
            extra: BTreeMap::new(),
            flags: Vec::new(),
        })
    }

    pub fn with_extra(mut self, key: &str, v: f64) -> Self {
        self.extra.insert(key.to_string(), v);
        self
    }

    pub fn with_flag(mut self, flag: impl Into<String>) -> Self {
        self.flags.push(flag.into());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{AnalyticDensity, Gaussian};
    use crate::rng::{normal_tensor, seeded};
    use crate::velocity::FieldSpec;
    use proptest::prelude::*;

    const LN_2PI: f64 = 1.8378770664093453;

    fn shifted(t: &Tensor, shift: &[f64]) -> Tensor {
        let d = t.cols();
        let mut out = t.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v += shift[k % d];
        }
        out
    }

    #[test]
    fn nll_of_identity_chain() {
        let chain =
            FlowChain::init(1, &FieldSpec::new(2), 4, AnalyticDensity::standard_normal(2).unwrap(), 0)
                .unwrap();
        let origin = Tensor::zeros(&[1, 2]);
        let v = nll_eval(&chain, &origin, DivergenceEstimator::Exact, &mut seeded(0)).unwrap();
        assert!((v - LN_2PI).abs() < 1e-12);
        let x = normal_tensor(&mut seeded(1), 10_000, 2);
        let v = nll_eval(&chain, &x, DivergenceEstimator::Exact, &mut seeded(0)).unwrap();
        assert!((v - (1.0 + LN_2PI)).abs() <= 0.05, "{v}");
    }

    #[test]
    fn fid_examples() {
        let a = normal_tensor(&mut seeded(2), 20_000, 2);
        assert_eq!(gauss_fid(&a, &a).unwrap().value, 0.0);
        let b = shifted(&normal_tensor(&mut seeded(3), 20_000, 2), &[1.0, 0.0]);
        let f = gauss_fid(&a, &b).unwrap();
        assert!((f.value - 1.0).abs() <= 0.05 && !f.clamped, "{f:?}");
        let c = normal_tensor(&mut seeded(4), 20_000, 1);
        let d = normal_tensor(&mut seeded(5), 20_000, 1).map(|v| 2.0 * v);
        assert!((gauss_fid(&c, &d).unwrap().value - 1.0).abs() <= 0.05);
    }

    #[test]
    fn fid_flags_degenerate_covariance() {
        let line = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]])
            .unwrap();
        let cloud = normal_tensor(&mut seeded(6), 50, 2);
        let f = gauss_fid(&line, &cloud).unwrap();
        assert!(f.clamped && f.value >= 0.0);
        assert!(gauss_fid(&Tensor::zeros(&[2, 2]), &cloud).is_err());
    }

    #[test]
    fn fid_is_symmetric() {
        let mut rng = seeded(7);
        for _ in 0..10 {
            let a = normal_tensor(&mut rng, 30, 3).map(|v| 1.3 * v);
            let b = shifted(&normal_tensor(&mut rng, 40, 3), &[0.2, -0.1, 0.5]);
            let (x, y) = (gauss_fid(&a, &b).unwrap().value, gauss_fid(&b, &a).unwrap().value);
            assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn w2_examples() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert!((w2_exact(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        let a = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        assert!((w2_exact(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        let a = normal_tensor(&mut seeded(8), 512, 1);
        let b = shifted(&normal_tensor(&mut seeded(9), 512, 1), &[2.0]);
        assert!((w2_exact(&a, &b).unwrap() - 2.0).abs() <= 0.15);
        assert!(w2_exact(&a, &b.select_rows(&[0, 1])).is_err());
        let big = Tensor::zeros(&[513, 1]);
        assert!(w2_exact(&big, &big).is_err());
    }

    fn brute_force(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row * n + j] + rec(cost, n, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, n, 0, &mut vec![false; n])
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = seeded(10);
        for m in 1..=7 {
            for _ in 0..5 {
                let a = normal_tensor(&mut rng, m, 2);
                let b = normal_tensor(&mut rng, m, 2).map(|v| v + 0.5);
                let cost = w2::sq_cost_matrix(&a, &b);
                let (assign, total) = hungarian(&cost, m);
                let mut seen = assign.clone();
                seen.sort();
                assert_eq!(seen, (0..m).collect::<Vec<_>>());
                let bf = brute_force(&cost, m);
                assert!((total - bf).abs() <= 1e-12 * (1.0 + bf), "m={m}: {total} vs {bf}");
                let w = w2_exact(&a, &b).unwrap();
                assert!((w - (bf / m as f64).sqrt()).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn w2_triangle_inequality(seed in 0u64..10_000, m in 1usize..6) {
            let mut rng = seeded(seed);
            let a = normal_tensor(&mut rng, m, 2);
            let b = normal_tensor(&mut rng, m, 2).map(|v| 2.0 * v);
            let c = normal_tensor(&mut rng, m, 2).map(|v| v - 1.0);
            let (ab, bc, ac) = (
                w2_exact(&a, &b).unwrap(),
                w2_exact(&b, &c).unwrap(),
                w2_exact(&a, &c).unwrap(),
            );
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn mmd_same_distribution_is_within_null() {
        let x = normal_tensor(&mut seeded(11), 400, 2);
        let a = x.select_rows(&(0..200).collect::<Vec<_>>());
        let b = x.select_rows(&(200..400).collect::<Vec<_>>());
        let t = mmd_permutation_test(&a, &b, Bandwidth::Median, 200, &mut seeded(12)).unwrap();
        assert!(t.statistic.mmd2.abs() <= 3.0 * t.null_sd, "{t:?}");
        assert!(!t.statistic.fallback);
    }

    #[test]
    fn mmd_detects_shift() {
        let a = normal_tensor(&mut seeded(13), 200, 2);
        let b = shifted(&normal_tensor(&mut seeded(14), 200, 2), &[3.0, 0.0]);
        let t = mmd_permutation_test(&a, &b, Bandwidth::Median, 200, &mut seeded(15)).unwrap();
        assert!(t.statistic.mmd2 > 10.0 * t.null_sd);
        assert!(t.rejects_at(0.99));
    }

    #[test]
    fn mmd_vanishes_for_wide_kernel() {
        let a = normal_tensor(&mut seeded(16), 50, 2);
        let b = shifted(&normal_tensor(&mut seeded(17), 50, 2), &[3.0, 0.0]);
        let wide = mmd_rbf(&a, &b, Bandwidth::Fixed(1e6)).unwrap();
        assert!(wide.mmd2.abs() < 1e-9);
        let narrow = mmd_rbf(&a, &b, Bandwidth::Fixed(1.0)).unwrap();
        assert!(narrow.mmd2 > 100.0 * wide.mmd2.abs());
    }

    #[test]
    fn mmd_falls_back_on_zero_median() {
        let a = Tensor::zeros(&[5, 2]);
        let r = mmd_rbf(&a, &a, Bandwidth::Median).unwrap();
        assert!(r.fallback && r.bandwidth == FALLBACK_BANDWIDTH);
        assert!(mmd_rbf(&a.select_rows(&[0]), &a, Bandwidth::Median).is_err());
    }

    #[test]
    fn mmd_unbiased_by_hand() {
        // pairs at distance 1 with σ = 1: k = e^{-1/2}
        let a = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let r = mmd_rbf(&a, &b, Bandwidth::Fixed(1.0)).unwrap();
        let k1 = (-0.5f64).exp();
        let want = k1 + k1 - 2.0 * (2.0 + 2.0 * k1) / 4.0;
        assert!((r.mmd2 - want).abs() < 1e-15);
    }

    fn gauss1(mu: f64, var: f64) -> Gaussian {
        Gaussian::isotropic(vec![mu], var).unwrap()
    }

    #[test]
    fn kl_examples() {
        let p = gauss1(0.0, 1.0);
        let x = p.sample(&mut seeded(18), 10_000);
        let same = kl_mc(|v| p.log_pdf(v), |v| p.log_pdf(v), &x).unwrap();
        assert_eq!(same.value, 0.0);
        let q = gauss1(1.0, 1.0);
        let k = kl_mc(|v| p.log_pdf(v), |v| q.log_pdf(v), &x).unwrap();
        assert!((k.value - 0.5).abs() <= 0.02);
        let q = gauss1(0.0, 4.0);
        let k = kl_mc(|v| p.log_pdf(v), |v| q.log_pdf(v), &x).unwrap();
        let want = 0.5 * (0.25 - 1.0 + 4.0f64.ln());
        assert!((k.value - want).abs() <= 0.02);
        assert!((p.kl_to(&q).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn kl_aborts_on_non_finite_terms() {
        let mut terms = vec![0.1; 10_000];
        terms[0] = f64::INFINITY;
        let ok = kl_from_terms(&terms).unwrap();
        assert_eq!(ok.non_finite, 1);
        for t in terms.iter_mut().take(11) {
            *t = f64::NAN;
        }
        assert!(kl_from_terms(&terms).is_err());
    }

    #[test]
    fn kl_matches_closed_form_on_random_pairs() {
        let mut rng = seeded(19);
        for pair in 0..20 {
            let draw = |rng: &mut crate::rng::Rng| {
                let a = normal_tensor(rng, 2, 2);
                let mut cov = Tensor::zeros(&[2, 2]);
                for i in 0..2 {
                    for j in 0..2 {
                        let aa: f64 = (0..2).map(|k| a.get(k, i) * a.get(k, j)).sum();
                        cov.data_mut()[i * 2 + j] = aa + if i == j { 0.5 } else { 0.0 };
                    }
                }
                let mu = normal_tensor(rng, 1, 2).into_data();
                Gaussian::new(mu, cov).unwrap()
            };
            let (p, q) = (draw(&mut rng), draw(&mut rng));
            let x = p.sample(&mut rng, 10_000);
            let k = kl_mc(|v| p.log_pdf(v), |v| q.log_pdf(v), &x).unwrap();
            let exact = p.kl_to(&q).unwrap();
            assert!((k.value - exact).abs() <= 3.0 * k.std_error, "pair {pair}: {k:?} vs {exact}");
        }
    }

    #[test]
    fn report_rejects_non_finite() {
        assert!(MetricReport::new("x", f64::NAN, vec![1], 0, serde_json::Value::Null).is_err());
        let r = MetricReport::new("w2", 1.5, vec![10, 10], 3, serde_json::json!({"m": 10}))
            .unwrap()
            .with_flag("clamped");
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"seed\":3") && s.contains("clamped"));
    }

    // KL(N(μ, I) ‖ N(0, I)) = ‖μ‖²/2
    #[test]
    fn moment_fit_kl_of_shifted_gaussian() {
        let x = shifted(&normal_tensor(&mut seeded(7), 20_000, 2), &[3.0, 0.0]);
        let ens = ParticleEnsemble::new(x).unwrap();
        let k = gaussian_fit_kl(&ens, &Gaussian::standard(2).unwrap()).unwrap();
        assert!((k - 4.5).abs() < 0.05, "{k}");
        let tiny = ParticleEnsemble::new(Tensor::zeros(&[2, 2])).unwrap();
        assert!(gaussian_fit_kl(&tiny, &Gaussian::standard(2).unwrap()).is_err());
    }
}
