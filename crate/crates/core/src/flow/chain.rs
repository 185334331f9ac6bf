use crate::datasets::AnalyticDensity;
use crate::numcore::Tensor;
use crate::odeint::{integrate, integrate_augmented, Direction, IntegratorConfig};
use crate::rng::Rng;
use crate::velocity::{DivergenceEstimator, FieldSpec, VelocityField};
use crate::{Error, Result};

use super::ParticleEnsemble;

/// One residual block `x ↦ x + ∫ v(x(τ), τ) dτ` over the field's interval.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBlock {
    pub field: VelocityField,
    pub integrator: IntegratorConfig,
    pub trained: bool,
}

impl FlowBlock {
    pub fn new(field: VelocityField, integrator: IntegratorConfig) -> Result<Self> {
        if integrator.interval != field.interval() {
            return Err(Error::invalid(format!(
                "integrator interval {:?} differs from field interval {:?}",
                integrator.interval,
                field.interval()
            )));
        }
        integrator.validate()?;
        Ok(Self {
            field,
            integrator,
            trained: false,
        })
    }

    /// Near-identity block on `[t_a, t_b]` with RK4 and `steps` steps.
    pub fn init(spec: &FieldSpec, steps: usize, seed: u64) -> Result<Self> {
        let field = VelocityField::init_near_identity(spec, seed)?;
        let cfg = IntegratorConfig::rk4(field.interval()).with_steps(steps);
        Self::new(field, cfg)
    }

    pub fn interval(&self) -> (f64, f64) {
        self.integrator.interval
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        integrate(&self.field, x, &self.integrator, Direction::Forward)
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        integrate(&self.field, y, &self.integrator, Direction::Reverse)
    }

    /// Forward map plus per-row `∫ ∇·v dτ`.
    pub fn forward_with_logdet(
        &self,
        x: &Tensor,
        est: DivergenceEstimator,
        rng: &mut Rng,
    ) -> Result<(Tensor, Vec<f64>)> {
        let s = integrate_augmented(&self.field, x, &self.integrator, Direction::Forward, est, rng)?;
        Ok((s.x, s.logdet))
    }

    /// Inverse map plus per-row `∫ ∇·v dτ` accumulated backwards (the
    /// negative of the forward integral along the same path).
    pub fn inverse_with_logdet(
        &self,
        y: &Tensor,
        est: DivergenceEstimator,
        rng: &mut Rng,
    ) -> Result<(Tensor, Vec<f64>)> {
        let s = integrate_augmented(&self.field, y, &self.integrator, Direction::Reverse, est, rng)?;
        Ok((s.x, s.logdet))
    }
}

/// Ordered blocks covering `[0, T]` plus the base density `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowChain {
    blocks: Vec<FlowBlock>,
    base: AnalyticDensity,
}

const JOIN_TOL: f64 = 1e-12;

impl FlowChain {
    pub fn new(blocks: Vec<FlowBlock>, base: AnalyticDensity) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::invalid("a chain needs at least one block"));
        }
        let d = base.dim();
        let mut t = 0.0;
        for (i, b) in blocks.iter().enumerate() {
            if b.dim() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: b.dim(),
                });
            }
            let (ta, tb) = b.interval();
            if (ta - t).abs() > JOIN_TOL {
                return Err(Error::invalid(format!(
                    "block {i} starts at {ta} but the previous block ends at {t}"
                )));
            }
            t = tb;
        }
        Ok(Self { blocks, base })
    }

    /// `n` untrained near-identity blocks on `[k, k+1]` for `k = 0..n`; every
    /// network sees time rescaled by `n`.
    pub fn init(
        n: usize,
        spec: &FieldSpec,
        steps: usize,
        base: AnalyticDensity,
        seed: u64,
    ) -> Result<Self> {
        let blocks = (0..n)
            .map(|k| {
                let s = spec
                    .clone()
                    .with_interval(k as f64, (k + 1) as f64)
                    .with_time_scale(n as f64);
                FlowBlock::init(&s, steps, seed.wrapping_add(k as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(blocks, base)
    }

    pub fn blocks(&self) -> &[FlowBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [FlowBlock] {
        &mut self.blocks
    }

    pub fn base(&self) -> &AnalyticDensity {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn t_total(&self) -> f64 {
        self.blocks[self.blocks.len() - 1].interval().1
    }

    pub fn push_block(&mut self, block: FlowBlock) -> Result<()> {
        let mut blocks = self.blocks.clone();
        blocks.push(block);
        *self = Self::new(blocks, self.base.clone())?;
        Ok(())
    }

    fn check(&self, ens: &ParticleEnsemble) -> Result<()> {
        if ens.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: ens.dim(),
            });
        }
        Ok(())
    }

    /// Data → noise.
    pub fn forward_map(&self, ens: &ParticleEnsemble) -> Result<ParticleEnsemble> {
        self.check(ens)?;
        let mut x = ens.points().clone();
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        ParticleEnsemble::new(x)
    }

    /// Noise → data.
    pub fn inverse_map(&self, ens: &ParticleEnsemble) -> Result<ParticleEnsemble> {
        self.check(ens)?;
        let mut x = ens.points().clone();
        for b in self.blocks.iter().rev() {
            x = b.inverse(&x)?;
        }
        ParticleEnsemble::new(x)
    }

    /// Positions after each block, starting with the input (`N + 1` entries).
    pub fn forward_trajectory(&self, ens: &ParticleEnsemble) -> Result<Vec<Tensor>> {
        self.check(ens)?;
        let mut out = vec![ens.points().clone()];
        for b in &self.blocks {
            let next = b.forward(out.last().expect("non-empty"))?;
            out.push(next);
        }
        Ok(out)
    }

    /// Forward map with the divergence integral accumulated in the ensemble.
    pub fn forward_with_logdet(
        &self,
        ens: &ParticleEnsemble,
        est: DivergenceEstimator,
        rng: &mut Rng,
    ) -> Result<ParticleEnsemble> {
        self.check(ens)?;
        let mut x = ens.points().clone();
        let mut acc = ens.logdet().map_or_else(|| vec![0.0; ens.len()], <[f64]>::to_vec);
        for b in &self.blocks {
            let (y, ld) = b.forward_with_logdet(&x, est, rng)?;
            for (a, l) in acc.iter_mut().zip(ld) {
                *a += l;
            }
            x = y;
        }
        ParticleEnsemble::new(x)?.with_logdet(acc)
    }

    /// Inverse map with the reverse-time divergence integral (`−Σ∫∇·v`).
    pub fn inverse_with_logdet(
        &self,
        ens: &ParticleEnsemble,
        est: DivergenceEstimator,
        rng: &mut Rng,
    ) -> Result<ParticleEnsemble> {
        self.check(ens)?;
        let mut x = ens.points().clone();
        let mut acc = vec![0.0; ens.len()];
        for b in self.blocks.iter().rev() {
            let (y, ld) = b.inverse_with_logdet(&x, est, rng)?;
            for (a, l) in acc.iter_mut().zip(ld) {
                *a += l;
            }
            x = y;
        }
        ParticleEnsemble::new(x)?.with_logdet(acc)
    }

    /// `log q(F(x)) + Σ ∫ ∇·v dτ` for every row.
    pub fn log_density_batch(
        &self,
        x: &Tensor,
        est: DivergenceEstimator,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        let ens = ParticleEnsemble::new(x.clone())?;
        let out = self.forward_with_logdet(&ens, est, rng)?;
        let ld = out.logdet().expect("accumulated");
        let vals: Vec<f64> = (0..out.len())
            .map(|i| self.base.log_pdf(out.row(i)) + ld[i])
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("log-density of row {i}")));
        }
        Ok(vals)
    }

    pub fn log_density(&self, x: &[f64], est: DivergenceEstimator, rng: &mut Rng) -> Result<f64> {
        let t = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.log_density_batch(&t, est, rng)?[0])
    }

    /// Draws `z ~ q` and maps it back to data space.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<ParticleEnsemble> {
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let z = ParticleEnsemble::new(self.base.sample(rng, n))?;
        self.inverse_map(&z)
    }
}
