use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::TransformSpec;
use crate::error::{Error, Result};
use crate::models::FinderVariant;
use crate::objectives::{KlForm, SslForm};

/// Training method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Real data only.
    Base,
    /// Cross-entropy on synthetic samples with their conditioning labels.
    Gda,
    /// Like `Gda` but synthetic samples go through a separate head.
    GdaMh,
    /// Prediction consistency on synthetic samples.
    GdaSsl,
    /// Feature consistency on synthetic samples, uniform latent sampling.
    Pcr,
    /// `Gda` with a meta-learned finder.
    GdaMps,
    /// `Pcr` with a meta-learned finder.
    Mgr,
    /// `Pcr`, finder trained to maximize synthetic cross-entropy.
    FHardCe,
    /// `Pcr`, finder trained to maximize the consistency loss.
    FHardPcr,
    /// `Mgr` plus latent-perturbation consistency.
    MgrLatentaug,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Base,
        Method::Gda,
        Method::GdaMh,
        Method::GdaSsl,
        Method::Pcr,
        Method::GdaMps,
        Method::Mgr,
        Method::FHardCe,
        Method::FHardPcr,
        Method::MgrLatentaug,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Gda => "gda",
            Method::GdaMh => "gda-mh",
            Method::GdaSsl => "gda-ssl",
            Method::Pcr => "pcr",
            Method::GdaMps => "gda-mps",
            Method::Mgr => "mgr",
            Method::FHardCe => "f-hard-ce",
            Method::FHardPcr => "f-hard-pcr",
            Method::MgrLatentaug => "mgr-latentaug",
        }
    }

    /// Finder updated by the meta-gradient.
    pub fn uses_mps(self) -> bool {
        matches!(self, Method::GdaMps | Method::Mgr | Method::MgrLatentaug)
    }

    /// Finder updated by loss ascent.
    pub fn uses_hard_finder(self) -> bool {
        matches!(self, Method::FHardCe | Method::FHardPcr)
    }

    pub fn has_finder(self) -> bool {
        self.uses_mps() || self.uses_hard_finder()
    }

    pub fn uses_pseudo(self) -> bool {
        self != Method::Base
    }

    pub fn uses_pcr(self) -> bool {
        matches!(
            self,
            Method::Pcr | Method::Mgr | Method::FHardCe | Method::FHardPcr | Method::MgrLatentaug
        )
    }

    pub fn needs_aux_head(self) -> bool {
        self == Method::GdaMh
    }

    /// Method whose grid-searched lambda this method reuses, if any.
    pub fn lambda_source(self) -> Option<Method> {
        match self {
            Method::Mgr | Method::FHardCe | Method::FHardPcr | Method::MgrLatentaug => Some(Method::Pcr),
            Method::GdaMps => Some(Method::Gda),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// How the finder's meta-gradient is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaMode {
    /// Finite differences around theta (first-order only).
    #[default]
    Fd,
    /// Differentiate through the unrolled inner step.
    Exact,
}

/// Which epoch's model is reported as the run result.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Highest validation accuracy; ties go to the later epoch.
    #[default]
    BestVal,
    Final,
}

/// Every knob of one training run except the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct MetaConfig {
    pub method: Method,
    pub epochs: usize,
    /// Initial learning rate of the classifier.
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// Fractions of `epochs` at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Step size of the virtual update; `None` follows the current classifier
    /// learning rate.
    pub inner_lr: Option<f64>,
    /// Finder learning rate.
    pub finder_lr: f64,
    pub lambda: f64,
    pub lambda_kl: f64,
    pub kl_enabled: bool,
    pub kl_form: KlForm,
    pub eps_const: f64,
    pub batch_size: usize,
    pub pseudo_batch_size: usize,
    pub val_batch_size: usize,
    pub meta_mode: MetaMode,
    pub finder: FinderVariant,
    pub ssl_form: SslForm,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub transform: TransformSpec,
    pub selection: Selection,
    /// Synthetic samples per epoch for the Fréchet distance.
    pub frechet_samples: usize,
    /// Held-out prior draws for the leakage probe.
    pub probe_samples: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            method: Method::Mgr,
            epochs: 200,
            lr: 0.01,
            momentum: 0.9,
            nesterov: true,
            milestones: vec![0.3, 0.6, 0.8],
            lr_decay: 0.1,
            inner_lr: None,
            finder_lr: 1e-4,
            lambda: 1.0,
            lambda_kl: 0.01,
            kl_enabled: true,
            kl_form: KlForm::Variance,
            eps_const: 0.01,
            batch_size: 64,
            pseudo_batch_size: 64,
            val_batch_size: 64,
            meta_mode: MetaMode::Fd,
            finder: FinderVariant::ResidualMlp,
            ssl_form: SslForm::Kl,
            hidden: vec![64, 64],
            feature_dim: 16,
            transform: TransformSpec::default(),
            selection: Selection::BestVal,
            frechet_samples: 1024,
            probe_samples: 10_000,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("finder-lr", self.finder_lr)?;
        positive("eps-const", self.eps_const)?;
        if let Some(eta) = self.inner_lr {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::config(format!("inner-lr must be non-negative, got {eta}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr-decay must lie in (0, 1]"));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("milestones are fractions of the epoch budget in [0, 1]"));
        }
        if !(0.1 - 1e-12..=1.0 + 1e-12).contains(&self.lambda) {
            return Err(Error::config(format!(
                "lambda = {} is outside the search domain [0.1, 1.0] (grid step 0.1)",
                self.lambda
            )));
        }
        if !(self.lambda_kl >= 0.0 && self.lambda_kl.is_finite()) {
            return Err(Error::config("lambda-kl must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 || self.pseudo_batch_size == 0 || self.val_batch_size == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if self.kl_enabled && self.has_kl_term() && self.pseudo_batch_size < 2 {
            return Err(Error::config(
                "pseudo-batch-size must be at least 2 when the KL penalty is on",
            ));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.frechet_samples < 2 {
            return Err(Error::config("frechet-samples must be at least 2"));
        }
        self.transform.validate()
    }

    fn has_kl_term(&self) -> bool {
        self.method.has_finder() && self.lambda_kl > 0.0
    }

    /// Effective KL weight (zero when disabled).
    pub fn kl_weight(&self) -> f64 {
        if self.kl_enabled {
            self.lambda_kl
        } else {
            0.0
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestone_epochs().into_iter().filter(|&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    /// Epoch indices at which the learning rate drops.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self
            .milestones
            .iter()
            .map(|f| (f * self.epochs as f64).round() as usize)
            .filter(|&e| e > 0 && e < self.epochs)
            .collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    /// The finder architecture actually used: methods without a finder sample uniformly.
    pub fn effective_finder(&self) -> FinderVariant {
        if self.method.has_finder() {
            self.finder
        } else {
            FinderVariant::Identity
        }
    }
}
