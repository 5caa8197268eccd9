//! Uniform access to anything that maps a sequence to a class score.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::expert::ExpertModel;
use crate::moe::MoEModel;
use crate::seqdata::OneHotSequence;

/// A binary classifier with a differentiable pre-sigmoid score.
pub trait SequenceModel: Sync {
    fn model_id(&self) -> &str;

    /// Pre-sigmoid logit for the positive class.
    fn class_score(&self, x: ArrayView2<'_, f64>) -> Result<f64>;

    /// Logit and its gradient w.r.t. the `L x 4` input.
    fn class_score_gradient(&self, x: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)>;

    fn score_all(&self, seqs: &[OneHotSequence]) -> Result<Vec<f64>> {
        seqs.iter().map(|s| self.class_score(s.view())).collect()
    }
}

impl SequenceModel for ExpertModel {
    fn model_id(&self) -> &str {
        &self.name
    }

    fn class_score(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        self.logit(x)
    }

    fn class_score_gradient(&self, x: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        self.logit_input_gradient(x)
    }
}

impl SequenceModel for MoEModel {
    fn model_id(&self) -> &str {
        &self.name
    }

    fn class_score(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        self.logit(x)
    }

    fn class_score_gradient(&self, x: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        self.logit_input_gradient(x)
    }
}

/// A model file of either kind.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum LoadedModel {
    Expert(ExpertModel),
    Moe(MoEModel),
}

impl LoadedModel {
    /// Dispatches on the document's `kind` field.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        match value.get("kind").and_then(|k| k.as_str()) {
            Some("expert") => Ok(LoadedModel::Expert(ExpertModel::load(path)?)),
            Some("moe") => Ok(LoadedModel::Moe(MoEModel::load(path)?)),
            other => Err(Error::Model(format!(
                "{}: unknown model kind {other:?}",
                path.display()
            ))),
        }
    }

    pub fn as_dyn(&self) -> &dyn SequenceModel {
        match self {
            LoadedModel::Expert(m) => m,
            LoadedModel::Moe(m) => m,
        }
    }
}

impl SequenceModel for LoadedModel {
    fn model_id(&self) -> &str {
        self.as_dyn().model_id()
    }

    fn class_score(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        self.as_dyn().class_score(x)
    }

    fn class_score_gradient(&self, x: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        self.as_dyn().class_score_gradient(x)
    }
}
