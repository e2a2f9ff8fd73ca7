//! Accuracy and macro-F1 over the two classes `real` and `fake`.

use serde::{Deserialize, Serialize};
use trustvl_core::Label;

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Real,
    Fake,
    Unparseable,
}

impl From<Label> for Prediction {
    fn from(l: Label) -> Self {
        match l {
            Label::Real => Prediction::Real,
            Label::Fake => Prediction::Fake,
        }
    }
}

/// Counts indexed by gold label and prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub real_as_real: usize,
    pub real_as_fake: usize,
    pub real_unparseable: usize,
    pub fake_as_real: usize,
    pub fake_as_fake: usize,
    pub fake_unparseable: usize,
}

impl Confusion {
    pub fn add(&mut self, gold: Label, pred: Prediction) {
        let slot = match (gold, pred) {
            (Label::Real, Prediction::Real) => &mut self.real_as_real,
            (Label::Real, Prediction::Fake) => &mut self.real_as_fake,
            (Label::Real, Prediction::Unparseable) => &mut self.real_unparseable,
            (Label::Fake, Prediction::Real) => &mut self.fake_as_real,
            (Label::Fake, Prediction::Fake) => &mut self.fake_as_fake,
            (Label::Fake, Prediction::Unparseable) => &mut self.fake_unparseable,
        };
        *slot += 1;
    }

    pub fn total(&self) -> usize {
        self.real_as_real + self.real_as_fake + self.real_unparseable + self.fake_as_real + self.fake_as_fake + self.fake_unparseable
    }

    pub fn unparseable(&self) -> usize {
        self.real_unparseable + self.fake_unparseable
    }

    pub fn correct(&self) -> usize {
        self.real_as_real + self.fake_as_fake
    }

    /// `2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
    pub fn f1(&self, class: Label) -> f64 {
        let (tp, fp, fn_) = match class {
            Label::Real => (self.real_as_real, self.fake_as_real, self.real_as_fake + self.real_unparseable),
            Label::Fake => (self.fake_as_fake, self.real_as_fake, self.fake_as_real + self.fake_unparseable),
        };
        let den = 2 * tp + fp + fn_;
        if den == 0 {
            0.0
        } else {
            (2 * tp) as f64 / den as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: Confusion,
}

impl Metrics {
    pub fn from_confusion(confusion: Confusion) -> Self {
        let total = confusion.total();
        Self {
            accuracy: if total == 0 { 0.0 } else { confusion.correct() as f64 / total as f64 },
            macro_f1: (confusion.f1(Label::Real) + confusion.f1(Label::Fake)) / 2.0,
            confusion,
        }
    }
}

pub fn metrics(preds: &[Prediction], golds: &[Label]) -> Result<Metrics> {
    if preds.len() != golds.len() {
        return Err(PipelineError::LengthMismatch(preds.len(), golds.len()));
    }
    let mut c = Confusion::default();
    for (&p, &g) in preds.iter().zip(golds) {
        c.add(g, p);
    }
    Ok(Metrics::from_confusion(c))
}
