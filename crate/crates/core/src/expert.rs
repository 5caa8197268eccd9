//! A single convolutional binding-score model.
//!
//! Forward path: conv -> relu -> global max pool -> embedding `e` (dense)
//! -> hidden `h = relu(e W + b)` -> head logit `o` -> `sigmoid(o)`.
//! Once the head is stripped the model becomes a frozen feature extractor
//! producing `(e, h)` for the mixture.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ConvLayer, DenseLayer};
use crate::seqdata::{seeded_rng, OneHotSequence};

pub const EXPERT_SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_HIDDEN_DIM: usize = 32;
pub const DEFAULT_NUM_FILTERS: usize = 16;
pub const DEFAULT_MOTIF_WIDTH: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertHyperparams {
    pub num_filters: usize,
    pub motif_width: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for ExpertHyperparams {
    fn default() -> Self {
        Self {
            num_filters: DEFAULT_NUM_FILTERS,
            motif_width: DEFAULT_MOTIF_WIDTH,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            learning_rate: 0.01,
            momentum: 0.98,
        }
    }
}

impl ExpertHyperparams {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_filters", self.num_filters),
            ("motif_width", self.motif_width),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Human-readable notes for dimensions that differ from the defaults.
    pub fn non_default_notes(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if self.embed_dim != DEFAULT_EMBED_DIM {
            notes.push(format!(
                "embed_dim {} differs from the default {DEFAULT_EMBED_DIM}",
                self.embed_dim
            ));
        }
        if self.hidden_dim != DEFAULT_HIDDEN_DIM {
            notes.push(format!(
                "hidden_dim {} differs from the default {DEFAULT_HIDDEN_DIM}",
                self.hidden_dim
            ));
        }
        notes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub name: String,
    pub hyperparams: ExpertHyperparams,
    pub conv: ConvLayer,
    pub embed: DenseLayer,
    pub hidden: DenseLayer,
    pub head: Option<DenseLayer>,
    frozen: bool,
}

/// Intermediates of one forward pass, consumed by [`ExpertModel::backward`].
#[derive(Debug, Clone)]
pub struct ExpertTrace {
    conv_pre: Array2<f64>,
    argmax: Vec<usize>,
    pooled: Array1<f64>,
    pub embedding: Array1<f64>,
    hidden_pre: Array1<f64>,
    pub hidden: Array1<f64>,
    pub logit: Option<f64>,
}

impl ExpertTrace {
    /// Smallest distance of any ReLU input or max-pool runner-up from its
    /// switching point. Finite differences with a step well below this
    /// margin see a locally smooth function.
    pub fn nonsmooth_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for (row, &best) in self.conv_pre.rows().into_iter().zip(&self.argmax) {
            let top = row[best];
            margin = margin.min(top.abs());
            for (j, &v) in row.iter().enumerate() {
                if j != best && v > 0.0 {
                    margin = margin.min(top - v);
                }
            }
        }
        self.hidden_pre.iter().fold(margin, |m, v| m.min(v.abs()))
    }
}

/// Batched outputs, one row per input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutputs {
    pub embedding: Array2<f64>,
    pub hidden: Array2<f64>,
    pub logit: Option<Array1<f64>>,
    pub probability: Option<Array1<f64>>,
}

/// Parameter gradients in [`ExpertModel::parameters`] order, plus the
/// optional gradient w.r.t. the input matrix.
#[derive(Debug, Clone)]
pub struct ExpertGrads {
    pub params: Vec<Vec<f64>>,
    pub input: Option<Array2<f64>>,
}

impl ExpertModel {
    /// Deterministic Glorot initialisation for a given seed.
    pub fn init(name: &str, hp: &ExpertHyperparams, seed: u64) -> Result<Self> {
        hp.validate()?;
        let mut rng = seeded_rng(seed);
        Ok(Self {
            name: name.to_string(),
            hyperparams: hp.clone(),
            conv: ConvLayer::init(hp.num_filters, hp.motif_width, &mut rng),
            embed: DenseLayer::init(hp.num_filters, hp.embed_dim, &mut rng),
            hidden: DenseLayer::init(hp.embed_dim, hp.hidden_dim, &mut rng),
            head: Some(DenseLayer::init(hp.hidden_dim, 1, &mut rng)),
            frozen: false,
        })
    }

    /// Model with every parameter zero.
    pub fn zeros(name: &str, hp: &ExpertHyperparams) -> Result<Self> {
        hp.validate()?;
        Ok(Self {
            name: name.to_string(),
            hyperparams: hp.clone(),
            conv: ConvLayer::zeros(hp.num_filters, hp.motif_width),
            embed: DenseLayer::zeros(hp.num_filters, hp.embed_dim),
            hidden: DenseLayer::zeros(hp.embed_dim, hp.hidden_dim),
            head: Some(DenseLayer::zeros(hp.hidden_dim, 1)),
            frozen: false,
        })
    }

    pub fn from_layers(
        name: &str,
        hyperparams: ExpertHyperparams,
        conv: ConvLayer,
        embed: DenseLayer,
        hidden: DenseLayer,
        head: Option<DenseLayer>,
        frozen: bool,
    ) -> Result<Self> {
        let model = Self {
            name: name.to_string(),
            hyperparams,
            conv,
            embed,
            hidden,
            head,
            frozen,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let hp = &self.hyperparams;
        let mismatch = |what: &str| Err(Error::Dimension(format!("expert {}: {what}", self.name)));
        if self.conv.filters() != hp.num_filters || self.conv.width() != hp.motif_width {
            return mismatch("conv shape disagrees with hyperparameters");
        }
        if self.embed.in_dim() != hp.num_filters || self.embed.out_dim() != hp.embed_dim {
            return mismatch("embedding layer shape disagrees with hyperparameters");
        }
        if self.hidden.in_dim() != hp.embed_dim || self.hidden.out_dim() != hp.hidden_dim {
            return mismatch("hidden layer shape disagrees with hyperparameters");
        }
        if let Some(head) = &self.head {
            if head.in_dim() != hp.hidden_dim || head.out_dim() != 1 {
                return mismatch("head shape must be hidden_dim x 1");
            }
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.hyperparams.embed_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hyperparams.hidden_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// Drops the prediction head and freezes the remaining parameters.
    pub fn strip_head(&self) -> Result<ExpertModel> {
        if self.head.is_none() {
            return Err(Error::Model(format!(
                "expert {} has already been stripped",
                self.name
            )));
        }
        let mut out = self.clone();
        out.head = None;
        out.frozen = true;
        Ok(out)
    }

    /// All parameter buffers in a fixed order: conv kernels, conv bias,
    /// embed W, embed b, hidden W, hidden b, then head W, head b if present.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.conv.kernels.as_slice().expect("standard layout"),
            self.conv.bias.as_slice().expect("standard layout"),
            self.embed.weights.as_slice().expect("standard layout"),
            self.embed.bias.as_slice().expect("standard layout"),
            self.hidden.weights.as_slice().expect("standard layout"),
            self.hidden.bias.as_slice().expect("standard layout"),
        ];
        if let Some(head) = &self.head {
            out.push(head.weights.as_slice().expect("standard layout"));
            out.push(head.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.conv.kernels.as_slice_mut().expect("standard layout"),
            self.conv.bias.as_slice_mut().expect("standard layout"),
            self.embed.weights.as_slice_mut().expect("standard layout"),
            self.embed.bias.as_slice_mut().expect("standard layout"),
            self.hidden.weights.as_slice_mut().expect("standard layout"),
            self.hidden.bias.as_slice_mut().expect("standard layout"),
        ];
        if let Some(head) = &mut self.head {
            out.push(head.weights.as_slice_mut().expect("standard layout"));
            out.push(head.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Forward pass for one `L x 4` input, keeping intermediates.
    pub fn trace(&self, x: ArrayView2<'_, f64>) -> Result<ExpertTrace> {
        let conv_pre = self.conv.forward(x)?;
        let (pooled, argmax) = nn::global_max_pool(nn::relu(&conv_pre).view());
        let embedding = self.embed.forward_row(pooled.view());
        let hidden_pre = self.hidden.forward_row(embedding.view());
        let hidden = nn::relu(&hidden_pre);
        let logit = self.head.as_ref().map(|h| h.forward_row(hidden.view())[0]);
        Ok(ExpertTrace {
            conv_pre,
            argmax,
            pooled,
            embedding,
            hidden_pre,
            hidden,
            logit,
        })
    }

    pub fn forward(&self, batch: &[OneHotSequence]) -> Result<ExpertOutputs> {
        let b = batch.len();
        let mut embedding = Array2::zeros((b, self.embed_dim()));
        let mut hidden = Array2::zeros((b, self.hidden_dim()));
        let mut logits = self.head.as_ref().map(|_| Array1::zeros(b));
        for (i, seq) in batch.iter().enumerate() {
            let t = self.trace(seq.view())?;
            embedding.row_mut(i).assign(&t.embedding);
            hidden.row_mut(i).assign(&t.hidden);
            if let (Some(l), Some(o)) = (logits.as_mut(), t.logit) {
                l[i] = o;
            }
        }
        let probability = logits.as_ref().map(|l| l.mapv(nn::sigmoid));
        Ok(ExpertOutputs {
            embedding,
            hidden,
            logit: logits,
            probability,
        })
    }

    /// Head logit for one input; errors on a stripped expert.
    pub fn logit(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        if self.head.is_none() {
            return Err(self.no_head());
        }
        Ok(self.trace(x)?.logit.expect("head present"))
    }

    fn no_head(&self) -> Error {
        Error::Model(format!(
            "expert {} has no prediction head (stripped feature extractor)",
            self.name
        ))
    }

    /// Backward pass through one trace.
    ///
    /// `grad_embedding` and `grad_hidden` are upstream gradients arriving
    /// at `e` and `h` from outside the expert (the mixture), `grad_logit`
    /// arrives at the head output and is ignored when the head is absent.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        trace: &ExpertTrace,
        grad_embedding: Option<ArrayView1<'_, f64>>,
        grad_hidden: Option<ArrayView1<'_, f64>>,
        grad_logit: f64,
        need_input: bool,
    ) -> ExpertGrads {
        let mut g_h = match grad_hidden {
            Some(g) => g.to_owned(),
            None => Array1::zeros(self.hidden_dim()),
        };
        let mut head_grads = None;
        if let Some(head) = &self.head {
            g_h.scaled_add(grad_logit, &head.weights.column(0));
            let gw: Vec<f64> = trace.hidden.iter().map(|h| h * grad_logit).collect();
            head_grads = Some((gw, vec![grad_logit]));
        }
        let g_hpre = nn::relu_backward(&trace.hidden_pre, &g_h);
        let hidden_w = outer(&trace.embedding, &g_hpre);
        let mut g_e = self.hidden.weights.dot(&g_hpre);
        if let Some(g) = grad_embedding {
            g_e += &g;
        }
        let embed_w = outer(&trace.pooled, &g_e);
        let g_pooled = self.embed.weights.dot(&g_e);
        let g_map =
            nn::global_max_pool_backward(&trace.argmax, trace.conv_pre.ncols(), g_pooled.view());
        let g_conv = nn::relu_backward(&trace.conv_pre, &g_map);
        let conv = self.conv.backward(x, g_conv.view(), need_input);

        let mut params = vec![
            conv.kernels.iter().copied().collect(),
            conv.bias.to_vec(),
            embed_w.iter().copied().collect(),
            g_e.to_vec(),
            hidden_w.iter().copied().collect(),
            g_hpre.to_vec(),
        ];
        if let Some((w, b)) = head_grads {
            params.push(w);
            params.push(b);
        }
        ExpertGrads {
            params,
            input: conv.input,
        }
    }

    /// Logit and its gradient w.r.t. the input matrix.
    pub fn logit_input_gradient(&self, x: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        if self.head.is_none() {
            return Err(self.no_head());
        }
        let trace = self.trace(x)?;
        let g = self.backward(x, &trace, None, None, 1.0, true);
        Ok((
            trace.logit.expect("head present"),
            g.input.expect("requested"),
        ))
    }

    /// Mean BCE over the batch and its gradient w.r.t. every parameter.
    pub fn loss_and_gradient(
        &self,
        batch: &[&OneHotSequence],
        labels: &[u8],
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        if self.head.is_none() {
            return Err(self.no_head());
        }
        if batch.len() != labels.len() || batch.is_empty() {
            return Err(Error::Dimension(format!(
                "{} sequences for {} labels",
                batch.len(),
                labels.len()
            )));
        }
        let traces = batch
            .iter()
            .map(|s| self.trace(s.view()))
            .collect::<Result<Vec<_>>>()?;
        let logits: Vec<f64> = traces.iter().map(|t| t.logit.expect("head")).collect();
        let probs: Vec<f64> = logits.iter().map(|&o| nn::sigmoid(o)).collect();
        let loss = nn::bce_loss(&probs, labels);
        let g_logits = nn::bce_logit_grad(&logits, labels);
        let mut total: Vec<Vec<f64>> = self
            .parameters()
            .iter()
            .map(|p| vec![0.0; p.len()])
            .collect();
        for ((seq, trace), g) in batch.iter().zip(&traces).zip(g_logits) {
            let grads = self.backward(seq.view(), trace, None, None, g, false);
            for (acc, part) in total.iter_mut().zip(grads.params) {
                for (a, v) in acc.iter_mut().zip(part) {
                    *a += v;
                }
            }
        }
        Ok((loss, total))
    }

    pub fn to_document(&self) -> ExpertDocument {
        ExpertDocument {
            schema_version: EXPERT_SCHEMA_VERSION,
            kind: "expert".to_string(),
            name: self.name.clone(),
            hyperparams: self.hyperparams.clone(),
            frozen: self.frozen,
            conv: LayerDocument::from_conv(&self.conv),
            embed: LayerDocument::from_dense(&self.embed),
            hidden: LayerDocument::from_dense(&self.hidden),
            head: self.head.as_ref().map(LayerDocument::from_dense),
        }
    }

    pub fn from_document(doc: ExpertDocument) -> Result<Self> {
        if doc.kind != "expert" {
            return Err(Error::Model(format!(
                "document kind {:?} is not an expert",
                doc.kind
            )));
        }
        if doc.schema_version != EXPERT_SCHEMA_VERSION {
            return Err(Error::Model(format!(
                "unsupported expert schema version {}",
                doc.schema_version
            )));
        }
        doc.hyperparams.validate()?;
        let head = doc.head.map(|h| h.to_dense()).transpose()?;
        if doc.frozen == head.is_some() {
            return Err(Error::Model(
                "an expert is frozen exactly when its head has been stripped".into(),
            ));
        }
        Self::from_layers(
            &doc.name,
            doc.hyperparams,
            doc.conv.to_conv()?,
            doc.embed.to_dense()?,
            doc.hidden.to_dense()?,
            head,
            doc.frozen,
        )
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_document()).expect("serializable");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: ExpertDocument = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_document(doc)
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(ndarray::Axis(1));
    let b2 = b.view().insert_axis(ndarray::Axis(0));
    a2.dot(&b2)
}

/// Serialized expert. Parameter arrays are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertDocument {
    pub schema_version: u32,
    pub kind: String,
    pub name: String,
    pub hyperparams: ExpertHyperparams,
    pub frozen: bool,
    pub conv: LayerDocument,
    pub embed: LayerDocument,
    pub hidden: LayerDocument,
    pub head: Option<LayerDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerDocument {
    pub fn from_dense(l: &DenseLayer) -> Self {
        Self {
            shape: vec![l.in_dim(), l.out_dim()],
            weights: l.weights.iter().copied().collect(),
            bias: l.bias.to_vec(),
        }
    }

    pub fn from_conv(l: &ConvLayer) -> Self {
        let (f, m, c) = l.kernels.dim();
        Self {
            shape: vec![f, m, c],
            weights: l.kernels.iter().copied().collect(),
            bias: l.bias.to_vec(),
        }
    }

    pub fn to_dense(&self) -> Result<DenseLayer> {
        match self.shape[..] {
            [i, o] => DenseLayer::new(
                Array2::from_shape_vec((i, o), self.weights.clone())
                    .map_err(|e| Error::Dimension(e.to_string()))?,
                Array1::from(self.bias.clone()),
            ),
            _ => Err(Error::Dimension(format!("dense shape {:?}", self.shape))),
        }
    }

    pub fn to_conv(&self) -> Result<ConvLayer> {
        match self.shape[..] {
            [f, m, c] => ConvLayer::new(
                Array3::from_shape_vec((f, m, c), self.weights.clone())
                    .map_err(|e| Error::Dimension(e.to_string()))?,
                Array1::from(self.bias.clone()),
            ),
            _ => Err(Error::Dimension(format!("conv shape {:?}", self.shape))),
        }
    }
}
