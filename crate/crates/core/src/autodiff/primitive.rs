use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Dispatchable primitive kinds. Each graph method of the same name is the
/// typed equivalent; this enum exists for table-driven callers.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Matmul,
    ConcatChannels,
    Reshape(Vec<usize>),
    Transpose,
    LeakyRelu(f64),
    Sigmoid,
    ReduceMax(usize),
    ReduceMean(usize),
    Broadcast(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Matmul => "matmul",
            Primitive::ConcatChannels => "concat_channels",
            Primitive::Reshape(_) => "reshape",
            Primitive::Transpose => "transpose",
            Primitive::LeakyRelu(_) => "leaky_relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::ReduceMax(_) => "reduce_max",
            Primitive::ReduceMean(_) => "reduce_mean",
            Primitive::Broadcast(_) => "broadcast",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Matmul => Some(2),
            Primitive::ConcatChannels => None,
            _ => Some(1),
        }
    }
}

impl Graph {
    pub fn apply(&mut self, kind: &Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
                return Err(Error::shape(kind.name(), format!("expected {n} inputs, got {}", inputs.len()), &shapes));
            }
        }
        match kind {
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::Matmul => self.matmul(inputs[0], inputs[1]),
            Primitive::ConcatChannels => self.concat_channels(inputs),
            Primitive::Reshape(s) => self.reshape(inputs[0], s),
            Primitive::Transpose => self.transpose(inputs[0]),
            Primitive::LeakyRelu(a) => self.leaky_relu(inputs[0], *a),
            Primitive::Sigmoid => self.sigmoid(inputs[0]),
            Primitive::ReduceMax(axis) => self.reduce_max(inputs[0], *axis),
            Primitive::ReduceMean(axis) => self.reduce_mean(inputs[0], *axis),
            Primitive::Broadcast(s) => self.broadcast(inputs[0], s),
        }
    }
}
