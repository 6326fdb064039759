use super::config::{MetaConfig, Method};
use super::hyper::BilevelProblem;
use crate::augment::TransformBatch;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::Result;
use crate::models::{Architecture, Finder, FinderVariant, LeakyGenerator, ModelVars};
use crate::objectives::{kl_penalty, latent_augment_loss, pcr_loss, ssl_consistency_loss, task_loss, KlForm, SslForm};

/// Latent draws and augmentation constants for one synthetic batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDraw {
    pub z: Tensor,
    pub y: Vec<usize>,
    pub transform: TransformBatch,
    pub latent_noise: Tensor,
}

/// Which synthetic-sample term a method adds to the classifier objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PseudoTerm {
    None,
    CrossEntropy,
    AuxCrossEntropy,
    Ssl(SslForm),
    Pcr,
    PcrLatent,
}

impl PseudoTerm {
    pub fn for_method(method: Method, ssl: SslForm) -> Self {
        match method {
            Method::Base => PseudoTerm::None,
            Method::Gda | Method::GdaMps => PseudoTerm::CrossEntropy,
            Method::GdaMh => PseudoTerm::AuxCrossEntropy,
            Method::GdaSsl => PseudoTerm::Ssl(ssl),
            Method::Pcr | Method::Mgr | Method::FHardCe | Method::FHardPcr => PseudoTerm::Pcr,
            Method::MgrLatentaug => PseudoTerm::PcrLatent,
        }
    }
}

/// The per-iteration losses of a training run: real batch, synthetic batch
/// generated through the finder, and a validation batch. Serves both as the
/// bilevel problem of the finder update and as the classifier objective.
pub struct IterationProblem<'a> {
    pub arch: &'a Architecture,
    pub generator: &'a LeakyGenerator,
    pub finder: FinderVariant,
    pub term: PseudoTerm,
    pub real_x: &'a Tensor,
    pub real_y: &'a [usize],
    pub pseudo: &'a PseudoDraw,
    pub val_x: Option<&'a Tensor>,
    pub val_y: &'a [usize],
    pub kl_weight: f64,
    pub kl_form: KlForm,
}

impl<'a> IterationProblem<'a> {
    pub fn new(
        cfg: &MetaConfig,
        arch: &'a Architecture,
        generator: &'a LeakyGenerator,
        real: (&'a Tensor, &'a [usize]),
        pseudo: &'a PseudoDraw,
    ) -> Self {
        IterationProblem {
            arch,
            generator,
            finder: cfg.effective_finder(),
            term: PseudoTerm::for_method(cfg.method, cfg.ssl_form),
            real_x: real.0,
            real_y: real.1,
            pseudo,
            val_x: None,
            val_y: &[],
            kl_weight: cfg.kl_weight(),
            kl_form: cfg.kl_form,
        }
    }

    pub fn with_val(mut self, x: &'a Tensor, y: &'a [usize]) -> Self {
        self.val_x = Some(x);
        self.val_y = y;
        self
    }

    fn model<'t>(&self, theta: &[Var<'t>]) -> Result<ModelVars<'t>> {
        ModelVars::from_flat(self.arch, theta.to_vec())
    }

    /// `F_phi(z)` for the stored latent draw.
    pub fn found<'t>(&self, tape: &'t Tape, phi: &[Var<'t>]) -> Result<Var<'t>> {
        Finder::forward(self.finder, phi, tape.constant(self.pseudo.z.clone()))
    }

    /// Synthetic inputs `G(F_phi(z), y)`.
    pub fn synthetic<'t>(&self, tape: &'t Tape, phi: &[Var<'t>]) -> Result<Var<'t>> {
        self.generator.generate(self.found(tape, phi)?, &self.pseudo.y)
    }

    /// Classifier objective `L + lambda P` with the finder held fixed.
    pub fn objective<'t>(&self, tape: &'t Tape, theta: &[Var<'t>], phi: &[Var<'t>], lambda: f64) -> Result<Var<'t>> {
        let l = self.train_loss(tape, theta)?;
        if self.term == PseudoTerm::None || lambda == 0.0 {
            return Ok(l);
        }
        l.add(self.pseudo_loss(tape, theta, phi)?.scale(lambda)?)
    }
}

impl BilevelProblem for IterationProblem<'_> {
    fn train_loss<'t>(&self, tape: &'t Tape, theta: &[Var<'t>]) -> Result<Var<'t>> {
        let m = self.model(theta)?;
        let x = tape.constant(self.real_x.clone());
        task_loss(m.logits(x)?, self.real_y)
    }

    fn pseudo_loss<'t>(&self, tape: &'t Tape, theta: &[Var<'t>], phi: &[Var<'t>]) -> Result<Var<'t>> {
        if self.pseudo.y.is_empty() || self.term == PseudoTerm::None {
            return Ok(tape.scalar(0.0));
        }
        let m = self.model(theta)?;
        match self.term {
            PseudoTerm::None => Ok(tape.scalar(0.0)),
            PseudoTerm::CrossEntropy => task_loss(m.logits(self.synthetic(tape, phi)?)?, &self.pseudo.y),
            PseudoTerm::AuxCrossEntropy => task_loss(m.aux_logits(self.synthetic(tape, phi)?)?, &self.pseudo.y),
            PseudoTerm::Ssl(form) => ssl_consistency_loss(&m, self.synthetic(tape, phi)?, &self.pseudo.transform, form),
            PseudoTerm::Pcr => pcr_loss(&m, self.synthetic(tape, phi)?, &self.pseudo.transform),
            PseudoTerm::PcrLatent => {
                let z = self.found(tape, phi)?;
                let xp = self.generator.generate(z, &self.pseudo.y)?;
                let pcr = pcr_loss(&m, xp, &self.pseudo.transform)?;
                let lat = latent_augment_loss(&m, self.generator, z, &self.pseudo.y, &self.pseudo.latent_noise)?;
                pcr.add(lat)
            }
        }
    }

    fn val_loss<'t>(&self, tape: &'t Tape, theta: &[Var<'t>]) -> Result<Var<'t>> {
        let m = self.model(theta)?;
        let x = self
            .val_x
            .ok_or_else(|| crate::error::Error::contract("no validation batch attached"))?;
        task_loss(m.logits(tape.constant(x.clone()))?, self.val_y)
    }

    fn penalty<'t>(&self, tape: &'t Tape, phi: &[Var<'t>]) -> Result<Option<Var<'t>>> {
        if self.kl_weight == 0.0 || self.finder == FinderVariant::Identity {
            return Ok(None);
        }
        let out = self.found(tape, phi)?;
        Ok(Some(kl_penalty(out, self.kl_form)?.scale(self.kl_weight)?))
    }
}
