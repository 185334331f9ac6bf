use super::{NumError, Tape, Tensor, Var};

/// Entries with both gradients below this magnitude are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Largest `|tape − fd| / max(|tape|, |fd|, REL_ERROR_FLOOR)` over all entries.
    pub max_rel_error: f64,
    /// `(slot, flat index)` of the worst entry.
    pub worst: (usize, usize),
    pub rel_tol: f64,
    pub passed: bool,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

fn forward_value<F, E>(loss: &F, params: &[Tensor]) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares tape gradients of a scalar loss with central differences using
/// step `h = 1e-5·(1 + |p|)` per coordinate.
///
/// `loss` must be a deterministic function of the parameter values; any
/// randomness has to be fixed inside the closure.
pub fn check_gradient_fd<F, E>(loss: F, params: &[Tensor], rel_tol: f64) -> Result<FdReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    let analytic = tape.grad_scalar(out)?.into_vec();
    drop(tape);

    let mut numeric = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut worst = (0, 0);
    for slot in 0..params.len() {
        let mut g = Tensor::zeros(params[slot].shape());
        for idx in 0..params[slot].len() {
            let p = params[slot].data()[idx];
            let h = 1e-5 * (1.0 + p.abs());
            work[slot].data_mut()[idx] = p + h;
            let up = forward_value(&loss, &work)?;
            work[slot].data_mut()[idx] = p - h;
            let down = forward_value(&loss, &work)?;
            work[slot].data_mut()[idx] = p;
            if !up.is_finite() || !down.is_finite() {
                return Err(NumError::FiniteDifference { slot, index: idx }.into());
            }
            let fd = (up - down) / (2.0 * h);
            g.data_mut()[idx] = fd;
            let a = analytic[slot].data()[idx];
            let denom = a.abs().max(fd.abs()).max(REL_ERROR_FLOOR);
            let rel = (a - fd).abs() / denom;
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (slot, idx);
            }
        }
        numeric.push(g);
    }
    Ok(FdReport {
        max_rel_error,
        worst,
        rel_tol,
        passed: max_rel_error <= rel_tol,
        analytic,
        numeric,
    })
}
