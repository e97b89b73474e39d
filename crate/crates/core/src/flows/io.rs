use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, BaseDistribution, Flow, ResidualLayer};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

pub const FLOW_FORMAT_VERSION: u32 = 1;

/// One block as stored on disk; matrices are lists of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDocument {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub lipschitz_bound: f64,
    #[serde(default, skip_serializing_if = "is_default_activation")]
    pub activation: Activation,
}

fn is_default_activation(a: &Activation) -> bool {
    *a == Activation::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDocument {
    pub version: u32,
    pub dim: usize,
    pub layers: Vec<LayerDocument>,
    pub base: BaseDistribution,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<Matrix> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl FlowDocument {
    pub fn from_flow(flow: &Flow) -> Self {
        Self {
            version: FLOW_FORMAT_VERSION,
            dim: flow.dim(),
            layers: flow
                .layers()
                .iter()
                .map(|l| LayerDocument {
                    w1: rows_of(&l.w1),
                    b1: l.b1.iter().copied().collect(),
                    w2: rows_of(&l.w2),
                    b2: l.b2.iter().copied().collect(),
                    lipschitz_bound: l.lipschitz_bound,
                    activation: l.activation,
                })
                .collect(),
            base: flow.base,
        }
    }

    pub fn into_flow(self) -> Result<Flow> {
        if self.version != FLOW_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported flow format version {}",
                self.version
            )));
        }
        let d = self.dim;
        let mut layers = Vec::with_capacity(self.layers.len());
        for doc in self.layers {
            let h = doc.b1.len();
            let values = doc
                .w1
                .iter()
                .chain(&doc.w2)
                .flatten()
                .chain(&doc.b1)
                .chain(&doc.b2);
            if values.into_iter().any(|v| !v.is_finite()) || !doc.lipschitz_bound.is_finite() {
                return Err(Error::Format("non-finite flow parameter".into()));
            }
            layers.push(ResidualLayer {
                w1: matrix_from_rows(&doc.w1, h, d, "w1")?,
                b1: Vector::from_vec(doc.b1),
                w2: matrix_from_rows(&doc.w2, d, h, "w2")?,
                b2: Vector::from_vec(doc.b2),
                lipschitz_bound: doc.lipschitz_bound,
                activation: doc.activation,
            });
        }
        let mut flow = Flow::new(d, layers)?;
        flow.base = self.base;
        Ok(flow)
    }
}

impl Flow {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&FlowDocument::from_flow(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<FlowDocument>(text)?.into_flow()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowShape;
    use crate::rng;

    #[test]
    fn json_round_trip_is_bit_exact() {
        let flow = Flow::random(&FlowShape::new(3), &mut rng::seeded(17));
        let back = Flow::from_json(&flow.to_json().unwrap()).unwrap();
        let a: Vec<u64> = flow.params_flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.params_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(flow, back);
    }

    #[test]
    fn matrices_are_stored_row_major() {
        let mut flow = Flow::identity(2, 1, 3);
        flow.layers_mut()[0].w1[(0, 1)] = 0.25;
        let doc = FlowDocument::from_flow(&flow);
        assert_eq!(doc.layers[0].w1[0], vec![0.0, 0.25]);
        let text = flow.to_json().unwrap();
        assert!(text.contains("\"std_normal\""));
        assert!(!text.contains("activation"));
    }

    #[test]
    fn malformed_documents_are_rejected() {
        let flow = Flow::identity(2, 1, 3);
        let mut doc = FlowDocument::from_flow(&flow);
        doc.layers[0].w2.pop();
        assert!(doc.into_flow().is_err());
        let text = flow.to_json().unwrap().replace("\"version\": 1", "\"version\": 9");
        assert!(Flow::from_json(&text).is_err());
        assert!(Flow::from_json("{\"version\":1,\"dim\":2,\"layers\":[],\"base\":\"std_normal\",\"x\":1}").is_err());
    }
}
