use std::fmt;

/// Shapes are reported as `[a, b, c]`.
#[derive(Clone, PartialEq, Eq)]
pub struct Shapes(pub Vec<Vec<usize>>);

impl fmt::Debug for Shapes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{s:?}")?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail} (shapes: {shapes:?})")]
    Shape {
        op: &'static str,
        detail: String,
        shapes: Shapes,
    },
    #[error("non-finite value in {op}")]
    Numeric { op: &'static str },
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
            shapes: Shapes(shapes.iter().map(|s| s.to_vec()).collect()),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
