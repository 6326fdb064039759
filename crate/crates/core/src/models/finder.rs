use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::diffcore::{RngStream, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Architecture of the latent finder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinderVariant {
    /// `z + tanh(MLP(z))`, last layer zero-initialized.
    ResidualMlp,
    /// `zW + b`, initialized to the identity.
    Linear,
    /// `MLP(z)` with random initialization.
    PlainMlp,
    /// `z + tanh(zW + b)`, zero-initialized.
    ResidualShallow,
    Identity,
}

impl FinderVariant {
    pub const ALL: [FinderVariant; 5] = [
        FinderVariant::ResidualMlp,
        FinderVariant::Linear,
        FinderVariant::PlainMlp,
        FinderVariant::ResidualShallow,
        FinderVariant::Identity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FinderVariant::ResidualMlp => "residual-mlp",
            FinderVariant::Linear => "linear",
            FinderVariant::PlainMlp => "plain-mlp",
            FinderVariant::ResidualShallow => "residual-shallow",
            FinderVariant::Identity => "identity",
        }
    }

    pub fn is_residual(self) -> bool {
        matches!(self, FinderVariant::ResidualMlp | FinderVariant::ResidualShallow)
    }
}

impl fmt::Display for FinderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FinderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown finder variant {s:?}; expected one of residual-mlp, linear, plain-mlp, residual-shallow, identity"
                ))
            })
    }
}

/// Latent-to-latent map `F_phi`.
#[derive(Clone, Debug, PartialEq)]
pub struct Finder {
    variant: FinderVariant,
    latent_dim: usize,
    params: Vec<Tensor>,
}

impl Finder {
    pub fn new(variant: FinderVariant, latent_dim: usize, rng: &mut RngStream) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::config("latent dimension must be positive"));
        }
        let l = latent_dim;
        let params = match variant {
            FinderVariant::ResidualMlp => {
                let mut m = Mlp::new(&[l, 2 * l, 2 * l, l], false, rng)?;
                m.zero_last_layer();
                m.params().to_vec()
            }
            FinderVariant::PlainMlp => Mlp::new(&[l, 2 * l, 2 * l, l], false, rng)?.params().to_vec(),
            FinderVariant::Linear => vec![Tensor::eye(l), Tensor::zeros(&[1, l])],
            FinderVariant::ResidualShallow => vec![Tensor::zeros(&[l, l]), Tensor::zeros(&[1, l])],
            FinderVariant::Identity => vec![],
        };
        Ok(Finder {
            variant,
            latent_dim,
            params,
        })
    }

    pub fn from_params(variant: FinderVariant, latent_dim: usize, params: Vec<Tensor>) -> Result<Self> {
        let probe = Self::new(variant, latent_dim, &mut RngStream::new(0, "probe"))?;
        let want: Vec<_> = probe.params.iter().map(|p| p.shape().to_vec()).collect();
        let got: Vec<_> = params.iter().map(|p| p.shape().to_vec()).collect();
        if want != got {
            return Err(Error::shape("finder", format!("expected {want:?}, got {got:?}")));
        }
        Ok(Finder {
            variant,
            latent_dim,
            params,
        })
    }

    pub fn variant(&self) -> FinderVariant {
        self.variant
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    pub fn forward<'t>(variant: FinderVariant, params: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>> {
        match variant {
            FinderVariant::ResidualMlp => z.add(Mlp::forward(params, z, false)?.tanh()?),
            FinderVariant::PlainMlp => Mlp::forward(params, z, false),
            FinderVariant::Linear => Mlp::forward(params, z, false),
            FinderVariant::ResidualShallow => z.add(Mlp::forward(params, z, false)?.tanh()?),
            FinderVariant::Identity => Ok(z),
        }
    }

    pub fn find<'t>(&self, params: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>> {
        if z.shape().get(1) != Some(&self.latent_dim) || z.shape().len() != 2 {
            return Err(Error::shape(
                "finder",
                format!("expected (batch, {}), got {:?}", self.latent_dim, z.shape()),
            ));
        }
        Self::forward(self.variant, params, z)
    }

    pub fn eval(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        Ok(self.find(&params, tape.constant(z.clone()))?.value())
    }
}
