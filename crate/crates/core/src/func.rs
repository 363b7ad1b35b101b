use std::fmt;
use std::sync::Arc;

/// Deterministic real function of time, with constants kept recognisable.
#[derive(Clone)]
pub enum TimeFunction {
    Constant(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl TimeFunction {
    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        TimeFunction::Custom(Arc::new(f))
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeFunction::Constant(c) => *c,
            TimeFunction::Custom(f) => f(t),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            TimeFunction::Constant(c) => Some(*c),
            TimeFunction::Custom(_) => None,
        }
    }
}

impl From<f64> for TimeFunction {
    fn from(c: f64) -> Self {
        TimeFunction::Constant(c)
    }
}

impl fmt::Debug for TimeFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeFunction::Constant(c) => write!(f, "Constant({c})"),
            TimeFunction::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}
