use serde::{Deserialize, Serialize};

/// Working precision requested by the caller. Arithmetic is carried out in
/// `f64` either way; the precision selects the truncation thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

pub const PRECISION_ENV: &str = "VISCOS_PRECISION";

impl Precision {
    /// Reads `VISCOS_PRECISION`; unset means double.
    pub fn from_env() -> Result<Self, String> {
        match std::env::var(PRECISION_ENV) {
            Err(_) => Ok(Precision::Double),
            Ok(v) => match v.trim().to_ascii_lowercase().as_str() {
                "" | "double" => Ok(Precision::Double),
                "single" => Ok(Precision::Single),
                other => Err(format!("{PRECISION_ENV} must be single or double, got {other:?}")),
            },
        }
    }

    /// Neumann-series truncation threshold.
    pub fn neumann_tol(self) -> f64 {
        match self {
            Precision::Single => 1e-5,
            Precision::Double => 1e-10,
        }
    }

    pub fn inverse_tol(self) -> f64 {
        match self {
            Precision::Single => 1e-6,
            Precision::Double => 1e-11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Stop a per-layer Neumann series once a term's ∞-norm drops below this.
    pub neumann: f64,
    /// Target `‖f(x) − y‖∞` for the fixed-point inverse.
    pub inverse: f64,
}

impl Tolerances {
    pub fn for_precision(p: Precision) -> Self {
        Self {
            neumann: p.neumann_tol(),
            inverse: p.inverse_tol(),
        }
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Self::for_precision(Precision::Double)
    }
}

/// `ln(2π)`
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Standard normal log-density of a vector.
pub fn log_std_normal(x: &crate::linalg::Vector) -> f64 {
    -0.5 * (x.norm_squared() + x.len() as f64 * LN_2PI)
}
