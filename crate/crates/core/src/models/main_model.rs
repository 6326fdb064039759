use super::mlp::Mlp;
use crate::diffcore::{RngStream, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Classifier `h_omega(g_psi(x))` with an optional auxiliary head for
/// synthetic samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MainModel {
    pub extractor: Mlp,
    pub head: Mlp,
    pub aux_head: Option<Mlp>,
}

/// Layer sizes of a [`MainModel`].
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub aux_head: bool,
}

impl Architecture {
    pub fn extractor_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim];
        s.extend(&self.hidden);
        s.push(self.feature_dim);
        s
    }

    fn extractor_tensors(&self) -> usize {
        2 * (self.hidden.len() + 1)
    }
}

impl MainModel {
    pub fn new(arch: &Architecture, rng: &mut RngStream) -> Result<Self> {
        if arch.classes < 2 {
            return Err(Error::config("a classifier needs at least 2 classes"));
        }
        let extractor = Mlp::new(&arch.extractor_sizes(), true, rng)?;
        let head = Mlp::new(&[arch.feature_dim, arch.classes], false, rng)?;
        let aux_head = if arch.aux_head {
            Some(Mlp::new(&[arch.feature_dim, arch.classes], false, rng)?)
        } else {
            None
        };
        Ok(MainModel {
            extractor,
            head,
            aux_head,
        })
    }

    pub fn architecture(&self) -> Architecture {
        let s = self.extractor.sizes();
        Architecture {
            input_dim: s[0],
            hidden: s[1..s.len() - 1].to_vec(),
            feature_dim: *s.last().unwrap(),
            classes: self.head.output_dim(),
            aux_head: self.aux_head.is_some(),
        }
    }

    pub fn from_params(arch: &Architecture, params: Vec<Tensor>) -> Result<Self> {
        let n_ext = arch.extractor_tensors();
        let expected = n_ext + 2 + if arch.aux_head { 2 } else { 0 };
        if params.len() != expected {
            return Err(Error::shape(
                "main_model",
                format!("expected {expected} parameter tensors, got {}", params.len()),
            ));
        }
        let mut it = params.into_iter();
        let ext: Vec<_> = it.by_ref().take(n_ext).collect();
        let head: Vec<_> = it.by_ref().take(2).collect();
        let aux: Vec<_> = it.collect();
        let head_sizes = [arch.feature_dim, arch.classes];
        Ok(MainModel {
            extractor: Mlp::from_params(&arch.extractor_sizes(), true, ext)?,
            head: Mlp::from_params(&head_sizes, false, head)?,
            aux_head: if arch.aux_head {
                Some(Mlp::from_params(&head_sizes, false, aux)?)
            } else {
                None
            },
        })
    }

    /// theta = [psi, omega, omega_aux] as one flat list.
    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.extractor.params().to_vec();
        p.extend_from_slice(self.head.params());
        if let Some(a) = &self.aux_head {
            p.extend_from_slice(a.params());
        }
        p
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        *self = Self::from_params(&self.architecture(), params)?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> ModelVars<'t> {
        let vars: Vec<_> = self
            .params()
            .into_iter()
            .map(|p| if trainable { tape.leaf(p) } else { tape.constant(p) })
            .collect();
        ModelVars::from_flat(&self.architecture(), vars).expect("layout matches own parameters")
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.extractor.eval(x)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head.eval(&self.extractor.eval(x)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    pub fn accuracy(&self, x: &Tensor, y: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        if y.is_empty() {
            return Ok(0.0);
        }
        let hits = pred.iter().zip(y).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / y.len() as f64)
    }
}

/// Model parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct ModelVars<'t> {
    pub extractor: Vec<Var<'t>>,
    pub head: Vec<Var<'t>>,
    pub aux_head: Option<Vec<Var<'t>>>,
}

impl<'t> ModelVars<'t> {
    pub fn from_flat(arch: &Architecture, vars: Vec<Var<'t>>) -> Result<Self> {
        let n_ext = arch.extractor_tensors();
        let expected = n_ext + 2 + if arch.aux_head { 2 } else { 0 };
        if vars.len() != expected {
            return Err(Error::shape(
                "main_model",
                format!("expected {expected} parameter variables, got {}", vars.len()),
            ));
        }
        Ok(ModelVars {
            extractor: vars[..n_ext].to_vec(),
            head: vars[n_ext..n_ext + 2].to_vec(),
            aux_head: arch.aux_head.then(|| vars[n_ext + 2..].to_vec()),
        })
    }

    pub fn flat(&self) -> Vec<Var<'t>> {
        let mut v = self.extractor.clone();
        v.extend(&self.head);
        if let Some(a) = &self.aux_head {
            v.extend(a);
        }
        v
    }

    pub fn features(&self, x: Var<'t>) -> Result<Var<'t>> {
        Mlp::forward(&self.extractor, x, true)
    }

    pub fn head_logits(&self, features: Var<'t>) -> Result<Var<'t>> {
        Mlp::forward(&self.head, features, false)
    }

    pub fn logits(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.head_logits(self.features(x)?)
    }

    pub fn aux_logits(&self, x: Var<'t>) -> Result<Var<'t>> {
        let aux = self
            .aux_head
            .as_ref()
            .ok_or_else(|| Error::contract("model has no auxiliary head"))?;
        Mlp::forward(aux, self.features(x)?, false)
    }
}
