//! Coefficient vector layout: per-box fields first (penalized), then scalar
//! fixed effects.

use crate::error::Error;
use crate::model::{ModelSpec, Mu1, ParameterField, Trend};
use crate::Result;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockName {
    Mu0,
    Mu1,
    Sigma0,
    Sigma1,
    Xi,
    Beta,
}

impl BlockName {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockName::Mu0 => "mu0",
            BlockName::Mu1 => "mu1",
            BlockName::Sigma0 => "sigma0",
            BlockName::Sigma1 => "sigma1",
            BlockName::Xi => "xi",
            BlockName::Beta => "beta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mu0" => Ok(BlockName::Mu0),
            "mu1" => Ok(BlockName::Mu1),
            "sigma0" => Ok(BlockName::Sigma0),
            "sigma1" => Ok(BlockName::Sigma1),
            "xi" => Ok(BlockName::Xi),
            "beta" => Ok(BlockName::Beta),
            other => Err(Error::Domain(format!("unknown coefficient block {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: BlockName,
    pub offset: usize,
    pub len: usize,
    pub penalized: bool,
}

/// Packing order: penalized per-box blocks (mu0, mu1 if varying, sigma0,
/// sigma1 if present, xi), then the homogeneous mu1 slope (when scalar),
/// then beta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub n_boxes: usize,
    pub blocks: Vec<Block>,
    /// Whether the elevation column is part of the parameter vector.
    pub beta_active: bool,
}

impl Layout {
    pub fn new(spec: &ModelSpec, n_boxes: usize, beta_active: bool) -> Self {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: BlockName, len: usize, penalized: bool, offset: &mut usize| {
            blocks.push(Block { name, offset: *offset, len, penalized });
            *offset += len;
        };
        push(BlockName::Mu0, n_boxes, true, &mut offset);
        if spec.mu_trend == Trend::Varying {
            push(BlockName::Mu1, n_boxes, true, &mut offset);
        }
        push(BlockName::Sigma0, n_boxes, true, &mut offset);
        if spec.logsigma_trend == Trend::Varying {
            push(BlockName::Sigma1, n_boxes, true, &mut offset);
        }
        push(BlockName::Xi, n_boxes, true, &mut offset);
        if spec.mu_trend == Trend::Homogeneous {
            push(BlockName::Mu1, 1, false, &mut offset);
        }
        if beta_active {
            push(BlockName::Beta, 1, false, &mut offset);
        }
        Layout { n_boxes, blocks, beta_active }
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    pub fn block(&self, name: BlockName) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn penalized_blocks(&self) -> Vec<&Block> {
        self.blocks.iter().filter(|b| b.penalized).collect()
    }

    pub fn n_penalized(&self) -> usize {
        self.blocks.iter().filter(|b| b.penalized).count()
    }

    /// Names of the penalized blocks, in lambda order.
    pub fn penalized_names(&self) -> Vec<&'static str> {
        self.penalized_blocks().iter().map(|b| b.name.as_str()).collect()
    }

    pub fn pack(&self, field: &ParameterField) -> DVector<f64> {
        let mut theta = DVector::zeros(self.dim());
        for block in &self.blocks {
            let dst = &mut theta.as_mut_slice()[block.offset..block.offset + block.len];
            match block.name {
                BlockName::Mu0 => dst.copy_from_slice(&field.mu0),
                BlockName::Sigma0 => dst.copy_from_slice(&field.sigma0),
                BlockName::Xi => dst.copy_from_slice(&field.xi),
                BlockName::Sigma1 => {
                    dst.copy_from_slice(field.sigma1.as_ref().expect("layout matches field"))
                }
                BlockName::Mu1 => match &field.mu1 {
                    Mu1::PerBox(v) => dst.copy_from_slice(v),
                    Mu1::Scalar(s) => dst[0] = *s,
                    Mu1::Absent => unreachable!("layout has no mu1 block for absent trend"),
                },
                BlockName::Beta => dst[0] = field.beta,
            }
        }
        theta
    }

    pub fn unpack(&self, theta: &DVector<f64>, spec: &ModelSpec) -> ParameterField {
        let mut field = ParameterField::zeros(self.n_boxes, spec);
        for block in &self.blocks {
            let src = &theta.as_slice()[block.offset..block.offset + block.len];
            match block.name {
                BlockName::Mu0 => field.mu0.copy_from_slice(src),
                BlockName::Sigma0 => field.sigma0.copy_from_slice(src),
                BlockName::Xi => field.xi.copy_from_slice(src),
                BlockName::Sigma1 => {
                    field.sigma1 = Some(src.to_vec());
                }
                BlockName::Mu1 => {
                    field.mu1 = if block.len == 1 {
                        Mu1::Scalar(src[0])
                    } else {
                        Mu1::PerBox(src.to_vec())
                    };
                }
                BlockName::Beta => field.beta = src[0],
            }
        }
        field
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    #[test]
    fn mod4_layout_has_five_penalized_blocks() {
        let l = Layout::new(&ModelSpec::mod4(), 10, true);
        assert_eq!(l.dim(), 51);
        assert_eq!(l.n_penalized(), 5);
        assert_eq!(l.penalized_names(), vec!["mu0", "mu1", "sigma0", "sigma1", "xi"]);
        assert_eq!(l.block(BlockName::Beta).unwrap().offset, 50);
    }

    #[test]
    fn mod5_scalar_slope_is_unpenalized() {
        let l = Layout::new(&ModelSpec::mod5(), 4, true);
        assert_eq!(l.dim(), 3 * 4 + 2);
        let mu1 = l.block(BlockName::Mu1).unwrap();
        assert_eq!(mu1.len, 1);
        assert!(!mu1.penalized);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let spec = ModelSpec::mod4();
        let l = Layout::new(&spec, 3, true);
        let mut f = ParameterField::zeros(3, &spec);
        f.mu0 = vec![1.0, 2.0, 3.0];
        f.mu1 = Mu1::PerBox(vec![0.1, 0.2, 0.3]);
        f.sigma0 = vec![-0.1, 0.0, 0.1];
        f.sigma1 = Some(vec![0.01, 0.02, 0.03]);
        f.xi = vec![-0.2, -0.1, 0.0];
        f.beta = -1.7;
        let theta = l.pack(&f);
        let back = l.unpack(&theta, &spec);
        assert_eq!(f, back);
    }
}
