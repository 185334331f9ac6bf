use super::{NumError, Op, Tape, Tensor, Var};

/// One instruction of a [`Program`]. Operands index the value list, which
/// starts with the program inputs followed by each instruction's output.
#[derive(Clone, Debug, PartialEq)]
pub enum Instr {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScaleShift(usize, f64, f64),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Linear(usize, usize),
    Tanh(usize),
    Softplus(usize),
    Sigmoid(usize),
    Square(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize, usize),
}

/// A straight-line program over the primitive set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Program {
    pub instrs: Vec<Instr>,
    /// Value indices returned as outputs; empty means "the last value".
    pub outputs: Vec<usize>,
}

/// Result of [`record_forward`].
#[derive(Clone, Debug)]
pub struct Recording {
    pub outputs: Vec<Tensor>,
    pub output_vars: Vec<Var>,
    pub tape: Tape,
}

impl Program {
    pub fn new(instrs: Vec<Instr>) -> Self {
        Self {
            instrs,
            outputs: Vec::new(),
        }
    }
}

/// Evaluates `program` on `inputs`, recording every step. Each input becomes a
/// parameter slot, in order.
pub fn record_forward(program: &Program, inputs: &[Tensor]) -> Result<Recording, NumError> {
    let mut tape = Tape::new();
    let mut vals: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    for (pc, instr) in program.instrs.iter().enumerate() {
        let get = |i: usize| {
            vals.get(i).copied().ok_or(NumError::Shape {
                index: pc,
                op: "operand",
                detail: format!("value {i} is not defined before instruction {pc}"),
            })
        };
        let op = match instr {
            Instr::Add(a, b) => Op::Add(get(*a)?, get(*b)?),
            Instr::Sub(a, b) => Op::Sub(get(*a)?, get(*b)?),
            Instr::Mul(a, b) => Op::Mul(get(*a)?, get(*b)?),
            Instr::ScaleShift(a, s, c) => Op::ScaleShift(get(*a)?, *s, *c),
            Instr::MatMul(a, b) => Op::MatMul(get(*a)?, get(*b)?),
            Instr::Affine(x, w, b) => Op::Affine(get(*x)?, get(*w)?, get(*b)?),
            Instr::Linear(x, w) => Op::Linear(get(*x)?, get(*w)?),
            Instr::Tanh(a) => Op::Tanh(get(*a)?),
            Instr::Softplus(a) => Op::Softplus(get(*a)?),
            Instr::Sigmoid(a) => Op::Sigmoid(get(*a)?),
            Instr::Square(a) => Op::Square(get(*a)?),
            Instr::Exp(a) => Op::Exp(get(*a)?),
            Instr::Log(a) => Op::Log(get(*a)?),
            Instr::Sum(a) => Op::Sum(get(*a)?),
            Instr::Mean(a) => Op::Mean(get(*a)?),
            Instr::RowSum(a) => Op::RowSum(get(*a)?),
            Instr::Concat(parts) => {
                Op::Concat(parts.iter().map(|p| get(*p)).collect::<Result<_, _>>()?)
            }
            Instr::SliceCols(a, s, e) => Op::SliceCols(get(*a)?, *s, *e),
        };
        // Report failures against the instruction, not the tape node.
        let v = tape.push(op).map_err(|e| e.at_instruction(pc))?;
        vals.push(v);
    }
    let output_vars: Vec<Var> = if program.outputs.is_empty() {
        vals.last().copied().into_iter().collect()
    } else {
        program
            .outputs
            .iter()
            .map(|&i| {
                vals.get(i).copied().ok_or_else(|| {
                    NumError::Construct(format!("output index {i} out of range"))
                })
            })
            .collect::<Result<_, _>>()?
    };
    let outputs = output_vars.iter().map(|v| tape.value(*v).clone()).collect();
    Ok(Recording {
        outputs,
        output_vars,
        tape,
    })
}
