//! Helpers shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng as _;

use wflow::datasets::{AnalyticDensity, Gaussian};
use wflow::flow::{FlowBlock, FlowChain};
use wflow::numcore::Tensor;
use wflow::odeint::IntegratorConfig;
use wflow::rng::{seeded, Rng};
use wflow::velocity::{FieldSpec, VelocityField};

pub fn jitter(params: &[Tensor], rng: &mut Rng, scale: f64) -> Vec<Tensor> {
    params
        .iter()
        .map(|t| {
            let noise: Vec<f64> = (0..t.len()).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
            let mut out = t.clone();
            out.data_mut().iter_mut().zip(noise).for_each(|(v, n)| *v += n);
            out
        })
        .collect()
}

pub fn jittered_chain(n: usize, spec: &FieldSpec, steps: usize, seed: u64, scale: f64) -> FlowChain {
    let d = spec.dim;
    let mut chain =
        FlowChain::init(n, spec, steps, AnalyticDensity::standard_normal(d).unwrap(), seed).unwrap();
    let mut rng = seeded(seed + 100);
    for b in chain.blocks_mut() {
        let p = jitter(&b.field.params(), &mut rng, scale);
        b.field.set_params(&p).unwrap();
    }
    chain
}

/// Exact map of an autonomous affine field over unit time:
/// `x ↦ e^A x + φ(A) b` read off the augmented exponential.
pub fn affine_flow(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
    let d = a.nrows();
    let mut aug = DMatrix::zeros(d + 1, d + 1);
    aug.view_mut((0, 0), (d, d)).copy_from(a);
    for i in 0..d {
        aug[(i, d)] = b[i];
    }
    let e = aug.exp();
    let m = e.view((0, 0), (d, d)).into_owned();
    let c = (0..d).map(|i| e[(i, d)]).collect();
    (m, c)
}

pub fn random_affine_chain(d: usize, n: usize, rng: &mut Rng) -> (FlowChain, DMatrix<f64>, Vec<f64>) {
    let mut blocks = Vec::new();
    let mut m_total = DMatrix::identity(d, d);
    let mut c_total = vec![0.0; d];
    for k in 0..n {
        let a: Vec<f64> = (0..d * d).map(|_| 0.6 * (2.0 * rng.random::<f64>() - 1.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let interval = (k as f64, k as f64 + 1.0);
        let field = VelocityField::affine(&Tensor::matrix(d, d, a.clone()).unwrap(), &vec![0.0; d], &b, n as f64, interval)
            .unwrap();
        blocks.push(FlowBlock::new(field, IntegratorConfig::rk4(interval)).unwrap());
        let (m, c) = affine_flow(&DMatrix::from_row_slice(d, d, &a), &b);
        let shifted = &m * nalgebra::DVector::from_vec(c_total.clone());
        c_total = (0..d).map(|i| shifted[i] + c[i]).collect();
        m_total = m * m_total;
    }
    let chain = FlowChain::new(blocks, AnalyticDensity::standard_normal(d).unwrap()).unwrap();
    (chain, m_total, c_total)
}

pub fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    Tensor::matrix(r, c, (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect::<Vec<_>>()).unwrap()
}

pub fn push_gaussian(g: &Gaussian, m: &DMatrix<f64>, c: &[f64]) -> Gaussian {
    let mu = m * nalgebra::DVector::from_column_slice(g.mean());
    let cov = DMatrix::from_row_slice(g.dim(), g.dim(), g.cov().data());
    let pushed = m * cov * m.transpose();
    Gaussian::new((0..g.dim()).map(|i| mu[i] + c[i]).collect(), to_tensor(&pushed)).unwrap()
}

pub fn random_gaussian(d: usize, rng: &mut Rng) -> Gaussian {
    let a: Vec<f64> = (0..d * d).map(|_| rng.random::<f64>() - 0.5).collect();
    let a = DMatrix::from_row_slice(d, d, &a);
    let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.3;
    let mean = (0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
    Gaussian::new(mean, to_tensor(&cov)).unwrap()
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}
