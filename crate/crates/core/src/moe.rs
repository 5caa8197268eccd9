//! N:1 mixture of frozen experts.
//!
//! Every expert sees the whole batch. The gate reads the concatenated
//! embeddings `E = [e_1 .. e_N]`, produces `alpha = softmax(E W_gate + b_gate)`,
//! and the mixture `m = sum_i alpha[:, i] * h_i` feeds a linear classifier
//! whose logit goes through a sigmoid.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{ExpertModel, LayerDocument};
use crate::nn::{self, DenseLayer};
use crate::seqdata::OneHotSequence;

pub const MOE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_NUM_EXPERTS: usize = 3;

/// Row-wise concatenation in expert order: column `j` of expert `i` lands
/// at `i * E + j`.
pub fn concat_embeddings(embeddings: &[ArrayView2<'_, f64>]) -> Result<Array2<f64>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Dimension("no embeddings to concatenate".into()))?;
    let (b, e) = first.dim();
    if let Some(bad) = embeddings.iter().find(|m| m.dim() != (b, e)) {
        return Err(Error::Dimension(format!(
            "embedding shape {:?} differs from {:?}",
            bad.dim(),
            (b, e)
        )));
    }
    ndarray::concatenate(Axis(1), embeddings).map_err(|err| Error::Dimension(err.to_string()))
}

/// `softmax(concat W_gate + b_gate)` per row.
pub fn gate(concat: ArrayView2<'_, f64>, gate_layer: &DenseLayer) -> Result<Array2<f64>> {
    let scores = gate_layer.forward(concat)?;
    Ok(nn::softmax_rows(scores.view()))
}

/// `m[b, :] = sum_i alpha[b, i] * h_i[b, :]`.
pub fn mix(alpha: ArrayView2<'_, f64>, hidden: &[ArrayView2<'_, f64>]) -> Result<Array2<f64>> {
    let (b, n) = alpha.dim();
    if hidden.len() != n {
        return Err(Error::Dimension(format!(
            "{} gating columns for {} experts",
            n,
            hidden.len()
        )));
    }
    let h_dim = hidden.first().map_or(0, |h| h.ncols());
    let mut m = Array2::zeros((b, h_dim));
    for (i, h) in hidden.iter().enumerate() {
        if h.dim() != (b, h_dim) {
            return Err(Error::Dimension(format!(
                "hidden block {i} has shape {:?}, expected {:?}",
                h.dim(),
                (b, h_dim)
            )));
        }
        let weight = alpha.column(i).insert_axis(Axis(1));
        m += &(&weight * h);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEOutputs {
    pub concat: Array2<f64>,
    pub scores: Array2<f64>,
    pub weights: Array2<f64>,
    pub mixture: Array2<f64>,
    pub logit: Array1<f64>,
    pub probability: Array1<f64>,
}

/// Frozen-expert features of a dataset, computed once for gate training.
#[derive(Debug, Clone)]
pub struct MoEFeatures {
    pub concat: Array2<f64>,
    pub hidden: Vec<Array2<f64>>,
}

impl MoEFeatures {
    pub fn len(&self) -> usize {
        self.concat.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.concat.nrows() == 0
    }

    pub fn select(&self, rows: &[usize]) -> MoEFeatures {
        MoEFeatures {
            concat: self.concat.select(Axis(0), rows),
            hidden: self
                .hidden
                .iter()
                .map(|h| h.select(Axis(0), rows))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    pub name: String,
    pub experts: Vec<ExpertModel>,
    pub gate: DenseLayer,
    /// `H x 1` weights and a single broadcast bias.
    pub classifier: DenseLayer,
}

impl MoEModel {
    pub fn new(
        name: &str,
        experts: Vec<ExpertModel>,
        gate: DenseLayer,
        classifier: DenseLayer,
    ) -> Result<Self> {
        Self::check_experts(&experts)?;
        let n = experts.len();
        let e = experts[0].embed_dim();
        let h = experts[0].hidden_dim();
        if gate.in_dim() != e * n || gate.out_dim() != n {
            return Err(Error::Dimension(format!(
                "gate is {}x{}, expected {}x{n}",
                gate.in_dim(),
                gate.out_dim(),
                e * n
            )));
        }
        if classifier.in_dim() != h || classifier.out_dim() != 1 {
            return Err(Error::Dimension(format!(
                "classifier is {}x{}, expected {h}x1",
                classifier.in_dim(),
                classifier.out_dim()
            )));
        }
        Ok(Self {
            name: name.to_string(),
            experts,
            gate,
            classifier,
        })
    }

    fn check_experts(experts: &[ExpertModel]) -> Result<()> {
        let first = experts
            .first()
            .ok_or_else(|| Error::Model("a mixture needs at least one expert".into()))?;
        for ex in experts {
            if ex.has_head() || !ex.is_frozen() {
                return Err(Error::Model(format!(
                    "expert {} still has its prediction head; strip it before mixing",
                    ex.name
                )));
            }
            if ex.embed_dim() != first.embed_dim() || ex.hidden_dim() != first.hidden_dim() {
                return Err(Error::Dimension(format!(
                    "expert {} has E={} H={}, expected E={} H={}",
                    ex.name,
                    ex.embed_dim(),
                    ex.hidden_dim(),
                    first.embed_dim(),
                    first.hidden_dim()
                )));
            }
        }
        Ok(())
    }

    /// Glorot-initialised gate and classifier around the given experts.
    pub fn init(name: &str, experts: Vec<ExpertModel>, seed: u64) -> Result<Self> {
        Self::check_experts(&experts)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = experts.len();
        let e = experts[0].embed_dim();
        let h = experts[0].hidden_dim();
        let gate = DenseLayer::init(e * n, n, &mut rng);
        let classifier = DenseLayer::init(h, 1, &mut rng);
        Self::new(name, experts, gate, classifier)
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.experts[0].embed_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.experts[0].hidden_dim()
    }

    /// Gate W, gate b, classifier W, classifier b. Expert weights are frozen
    /// and never appear here.
    pub fn trainable_parameters(&self) -> Vec<&[f64]> {
        vec![
            self.gate.weights.as_slice().expect("standard layout"),
            self.gate.bias.as_slice().expect("standard layout"),
            self.classifier.weights.as_slice().expect("standard layout"),
            self.classifier.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn trainable_parameters_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.gate.weights.as_slice_mut().expect("standard layout"),
            self.gate.bias.as_slice_mut().expect("standard layout"),
            self.classifier
                .weights
                .as_slice_mut()
                .expect("standard layout"),
            self.classifier
                .bias
                .as_slice_mut()
                .expect("standard layout"),
        ]
    }

    pub fn extract_features(&self, batch: &[OneHotSequence]) -> Result<MoEFeatures> {
        let outs = self
            .experts
            .iter()
            .map(|ex| ex.forward(batch))
            .collect::<Result<Vec<_>>>()?;
        let embeds: Vec<_> = outs.iter().map(|o| o.embedding.view()).collect();
        Ok(MoEFeatures {
            concat: concat_embeddings(&embeds)?,
            hidden: outs.into_iter().map(|o| o.hidden).collect(),
        })
    }

    /// Gate, mix and classify precomputed features.
    pub fn forward_features(&self, features: &MoEFeatures) -> Result<MoEOutputs> {
        let scores = self.gate.forward(features.concat.view())?;
        let weights = nn::softmax_rows(scores.view());
        let hidden: Vec<_> = features.hidden.iter().map(|h| h.view()).collect();
        let mixture = mix(weights.view(), &hidden)?;
        let logit = self
            .classifier
            .forward(mixture.view())?
            .column(0)
            .to_owned();
        let probability = logit.mapv(nn::sigmoid);
        Ok(MoEOutputs {
            concat: features.concat.clone(),
            scores,
            weights,
            mixture,
            logit,
            probability,
        })
    }

    pub fn forward(&self, batch: &[OneHotSequence]) -> Result<MoEOutputs> {
        self.forward_features(&self.extract_features(batch)?)
    }

    /// Mean BCE on feature rows and its gradient w.r.t. the trainable
    /// parameters, in [`Self::trainable_parameters`] order.
    pub fn head_loss_and_gradient(
        &self,
        features: &MoEFeatures,
        labels: &[u8],
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        if features.len() != labels.len() || labels.is_empty() {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} labels",
                features.len(),
                labels.len()
            )));
        }
        let out = self.forward_features(features)?;
        let loss = nn::bce_loss(out.probability.as_slice().expect("contiguous"), labels);
        let g_logit = Array1::from(nn::bce_logit_grad(
            out.logit.as_slice().expect("contiguous"),
            labels,
        ));
        let g_logit2 = g_logit.view().insert_axis(Axis(1));
        let class = self.classifier.backward(out.mixture.view(), g_logit2);
        let g_mix = class.input;
        let g_alpha = self.alpha_gradient(&features.hidden, &g_mix);
        let g_scores = softmax_rows_backward(&out.weights, &g_alpha);
        let gate = self.gate.backward(features.concat.view(), g_scores.view());
        Ok((
            loss,
            vec![
                gate.weights.iter().copied().collect(),
                gate.bias.to_vec(),
                class.weights.iter().copied().collect(),
                class.bias.to_vec(),
            ],
        ))
    }

    fn alpha_gradient(&self, hidden: &[Array2<f64>], g_mix: &Array2<f64>) -> Array2<f64> {
        let mut g = Array2::zeros((g_mix.nrows(), hidden.len()));
        for (i, h) in hidden.iter().enumerate() {
            let col = (h * g_mix).sum_axis(Axis(1));
            g.column_mut(i).assign(&col);
        }
        g
    }

    /// Pre-sigmoid logit for one input.
    pub fn logit(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        let traces = self
            .experts
            .iter()
            .map(|ex| ex.trace(x))
            .collect::<Result<Vec<_>>>()?;
        let (logit, _, _, _) = self.head_from_traces(&traces);
        Ok(logit)
    }

    fn head_from_traces(
        &self,
        traces: &[crate::expert::ExpertTrace],
    ) -> (f64, Array1<f64>, Array1<f64>, Array1<f64>) {
        let concat: Array1<f64> = traces
            .iter()
            .flat_map(|t| t.embedding.iter().copied())
            .collect();
        let alpha = nn::softmax(self.gate.forward_row(concat.view()).view());
        let mut m = Array1::zeros(self.hidden_dim());
        for (a, t) in alpha.iter().zip(traces) {
            m.scaled_add(*a, &t.hidden);
        }
        let logit = self.classifier.forward_row(m.view())[0];
        (logit, concat, alpha, m)
    }

    /// Logit and each expert's contribution to `d logit / d x`; the
    /// contributions sum to the gradient w.r.t. the shared input.
    pub fn input_gradient_contributions(
        &self,
        x: ArrayView2<'_, f64>,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let traces = self
            .experts
            .iter()
            .map(|ex| ex.trace(x))
            .collect::<Result<Vec<_>>>()?;
        let (logit, _, alpha, _) = self.head_from_traces(&traces);
        let g_mix: Array1<f64> = self.classifier.weights.column(0).to_owned();
        let g_alpha: Array1<f64> = traces.iter().map(|t| t.hidden.dot(&g_mix)).collect();
        let g_scores = nn::softmax_backward(alpha.view(), g_alpha.view());
        let g_concat = self.gate.weights.dot(&g_scores);
        let e = self.embed_dim();
        let mut parts = Vec::with_capacity(self.experts.len());
        for (i, (ex, t)) in self.experts.iter().zip(&traces).enumerate() {
            let g_e: ArrayView1<'_, f64> = g_concat.slice(s![i * e..(i + 1) * e]);
            let g_h = &g_mix * alpha[i];
            let g = ex.backward(x, t, Some(g_e), Some(g_h.view()), 0.0, true);
            parts.push(g.input.expect("requested"));
        }
        Ok((logit, parts))
    }

    pub fn logit_input_gradient(&self, x: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        let (logit, parts) = self.input_gradient_contributions(x)?;
        let mut total = Array2::zeros(x.raw_dim());
        for p in &parts {
            total += p;
        }
        Ok((logit, total))
    }

    pub fn to_document(&self, experts: Vec<ExpertRef>) -> Result<MoEDocument> {
        if experts.len() != self.experts.len() {
            return Err(Error::Model(format!(
                "{} expert references for {} experts",
                experts.len(),
                self.experts.len()
            )));
        }
        Ok(MoEDocument {
            schema_version: MOE_SCHEMA_VERSION,
            kind: "moe".to_string(),
            name: self.name.clone(),
            experts,
            gate: LayerDocument::from_dense(&self.gate),
            classifier: LayerDocument::from_dense(&self.classifier),
        })
    }

    /// Writes the mixture document; expert files must already exist at the
    /// given paths (relative paths are taken relative to `path`'s directory).
    pub fn save(&self, path: &Path, expert_paths: &[PathBuf]) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let refs = expert_paths
            .iter()
            .map(|p| {
                let resolved = if p.is_absolute() {
                    p.clone()
                } else {
                    base.join(p)
                };
                let bytes = fs::read(&resolved).map_err(|e| Error::io(&resolved, e))?;
                Ok(ExpertRef {
                    path: p.to_string_lossy().into_owned(),
                    sha256: crate::sha256_hex(&bytes),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let doc = self.to_document(refs)?;
        let mut text = serde_json::to_string_pretty(&doc).expect("serializable");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: MoEDocument = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_document(doc, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    pub fn from_document(doc: MoEDocument, base: &Path) -> Result<Self> {
        if doc.kind != "moe" {
            return Err(Error::Model(format!(
                "document kind {:?} is not a mixture",
                doc.kind
            )));
        }
        if doc.schema_version != MOE_SCHEMA_VERSION {
            return Err(Error::Model(format!(
                "unsupported mixture schema version {}",
                doc.schema_version
            )));
        }
        let experts = doc
            .experts
            .iter()
            .map(|r| {
                let p = Path::new(&r.path);
                let resolved = if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                };
                let bytes = fs::read(&resolved).map_err(|e| Error::io(&resolved, e))?;
                let actual = crate::sha256_hex(&bytes);
                if actual != r.sha256 {
                    return Err(Error::Model(format!(
                        "{}: content hash {actual} does not match recorded {}",
                        resolved.display(),
                        r.sha256
                    )));
                }
                ExpertModel::load(&resolved)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            &doc.name,
            experts,
            doc.gate.to_dense()?,
            doc.classifier.to_dense()?,
        )
    }
}

fn softmax_rows_backward(alpha: &Array2<f64>, g_alpha: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(alpha.raw_dim());
    for ((mut dst, a), g) in out
        .rows_mut()
        .into_iter()
        .zip(alpha.rows())
        .zip(g_alpha.rows())
    {
        dst.assign(&nn::softmax_backward(a, g));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEDocument {
    pub schema_version: u32,
    pub kind: String,
    pub name: String,
    pub experts: Vec<ExpertRef>,
    pub gate: LayerDocument,
    pub classifier: LayerDocument,
}
