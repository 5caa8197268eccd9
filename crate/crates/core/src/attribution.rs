//! Input-gradient attribution: Vanilla Gradient, Saliency and ShiftSmooth.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SequenceModel;
use crate::seqdata::{circular_shift_rows, OneHotSequence};

pub const DEFAULT_SHIFT_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vanilla,
    Saliency,
    #[value(name = "shiftsmooth")]
    ShiftSmooth,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Vanilla => "vanilla",
            Method::Saliency => "saliency",
            Method::ShiftSmooth => "shiftsmooth",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Tsv,
    Svg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// `L x 4` scores per channel.
    pub channel_scores: Array2<f64>,
    /// One score per position, see [`collapse_to_nucleotide`].
    pub nucleotide_scores: Array1<f64>,
    pub method: Method,
    /// Shift radius; 0 unless the method is ShiftSmooth.
    pub shift_radius: usize,
    pub model_id: String,
    /// Logit of the unshifted input.
    pub class_score: f64,
}

impl AttributionMap {
    fn build(
        channel_scores: Array2<f64>,
        seq: &OneHotSequence,
        method: Method,
        shift_radius: usize,
        model: &dyn SequenceModel,
        class_score: f64,
    ) -> Self {
        let nucleotide_scores = collapse_to_nucleotide(channel_scores.view(), seq);
        Self {
            channel_scores,
            nucleotide_scores,
            method,
            shift_radius,
            model_id: model.model_id().to_string(),
            class_score,
        }
    }

    /// `<model>_<method>_N<k>`, with characters outside `[A-Za-z0-9_.-]`
    /// replaced by `_`.
    pub fn artifact_stem(&self) -> String {
        let model: String = self
            .model_id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || "_.-".contains(c) {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        format!("{model}_{}_N{}", self.method, self.shift_radius)
    }
}

/// Pre-sigmoid logit of the positive class.
pub fn class_score(model: &dyn SequenceModel, seq: &OneHotSequence) -> Result<f64> {
    model.class_score(seq.view())
}

/// Signed gradient of the class score w.r.t. the one-hot input.
pub fn vanilla_gradient(model: &dyn SequenceModel, seq: &OneHotSequence) -> Result<AttributionMap> {
    let (score, grad) = model.class_score_gradient(seq.view())?;
    Ok(AttributionMap::build(
        grad,
        seq,
        Method::Vanilla,
        0,
        model,
        score,
    ))
}

pub fn saliency(model: &dyn SequenceModel, seq: &OneHotSequence) -> Result<AttributionMap> {
    let (score, grad) = model.class_score_gradient(seq.view())?;
    Ok(AttributionMap::build(
        grad.mapv(f64::abs),
        seq,
        Method::Saliency,
        0,
        model,
        score,
    ))
}

fn shifted_gradient(
    model: &dyn SequenceModel,
    x: ArrayView2<'_, f64>,
    n: i64,
) -> Result<Array2<f64>> {
    let shifted = circular_shift_rows(x, n);
    let (_, grad) = model.class_score_gradient(shifted.view())?;
    Ok(circular_shift_rows(grad.view(), -n))
}

/// Mean of the back-shifted input gradients over circular shifts
/// `n = -radius..=radius`.
///
/// Per-shift gradients may be computed on `jobs` threads; they are always
/// summed in increasing `n`, so the result does not depend on `jobs`.
pub fn shift_smooth(
    model: &dyn SequenceModel,
    seq: &OneHotSequence,
    radius: usize,
    jobs: usize,
) -> Result<AttributionMap> {
    let r = radius as i64;
    let shifts: Vec<i64> = (-r..=r).collect();
    let x = seq.view();
    let grads: Vec<Array2<f64>> = if jobs > 1 && shifts.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| {
            shifts
                .par_iter()
                .map(|&n| shifted_gradient(model, x, n))
                .collect::<Result<_>>()
        })?
    } else {
        shifts
            .iter()
            .map(|&n| shifted_gradient(model, x, n))
            .collect::<Result<_>>()?
    };
    let mut iter = grads.into_iter();
    let mut sum = iter.next().expect("at least one shift");
    for g in iter {
        sum += &g;
    }
    let avg = sum / shifts.len() as f64;
    let score = model.class_score(x)?;
    Ok(AttributionMap::build(
        avg,
        seq,
        Method::ShiftSmooth,
        radius,
        model,
        score,
    ))
}

/// Dispatches on `method`; `radius` is ignored unless ShiftSmooth.
pub fn explain(
    model: &dyn SequenceModel,
    seq: &OneHotSequence,
    method: Method,
    radius: usize,
    jobs: usize,
) -> Result<AttributionMap> {
    match method {
        Method::Vanilla => vanilla_gradient(model, seq),
        Method::Saliency => saliency(model, seq),
        Method::ShiftSmooth => shift_smooth(model, seq, radius, jobs),
    }
}

/// Score of the active channel at each position; rows without a single
/// active channel (`N`) take the channel average.
pub fn collapse_to_nucleotide(
    channel_scores: ArrayView2<'_, f64>,
    seq: &OneHotSequence,
) -> Array1<f64> {
    seq.active_channels()
        .into_iter()
        .enumerate()
        .map(|(j, c)| match c {
            Some(c) => channel_scores[[j, c]],
            None => channel_scores.row(j).mean().unwrap_or(0.0),
        })
        .collect()
}

/// Mean absolute difference between the nucleotide track of `seq` and
/// that of `circular_shift(seq, shift)` moved back into alignment.
pub fn shift_track_difference(
    model: &dyn SequenceModel,
    seq: &OneHotSequence,
    method: Method,
    radius: usize,
    shift: i64,
) -> Result<f64> {
    let base = explain(model, seq, method, radius, 1)?;
    let moved = explain(model, &seq.circular_shift(shift), method, radius, 1)?;
    let track = moved.nucleotide_scores.view().insert_axis(ndarray::Axis(1));
    let realigned = circular_shift_rows(track, -shift);
    let diff = base
        .nucleotide_scores
        .iter()
        .zip(realigned.column(0))
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>();
    Ok(diff / seq.len() as f64)
}

pub fn to_tsv(map: &AttributionMap, seq_text: &str) -> String {
    let mut out = String::from("position\tnucleotide\tscore\tmethod\tN\n");
    for (j, (c, s)) in seq_text.chars().zip(&map.nucleotide_scores).enumerate() {
        let _ = writeln!(out, "{j}\t{c}\t{s}\t{}\t{}", map.method, map.shift_radius);
    }
    out
}

const BAR_WIDTH: f64 = 12.0;
const PLOT_HEIGHT: f64 = 200.0;
const MARGIN: f64 = 20.0;

/// Bar chart of the nucleotide track; negative bars hang below the axis.
pub fn to_svg(map: &AttributionMap, seq_text: &str) -> String {
    let n = map.nucleotide_scores.len();
    let width = 2.0 * MARGIN + BAR_WIDTH * n as f64;
    let height = PLOT_HEIGHT + 2.0 * MARGIN + 16.0;
    let axis_y = MARGIN + PLOT_HEIGHT / 2.0;
    let peak = map
        .nucleotide_scores
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 {
        PLOT_HEIGHT / 2.0 / peak
    } else {
        0.0
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        out,
        "<title>{} {} N={} score={}</title>",
        xml_escape(&map.model_id),
        map.method,
        map.shift_radius,
        map.class_score
    );
    for (j, (&s, c)) in map
        .nucleotide_scores
        .iter()
        .zip(seq_text.chars())
        .enumerate()
    {
        let x = MARGIN + BAR_WIDTH * j as f64;
        let h = s.abs() * scale;
        let (y, fill) = if s >= 0.0 {
            (axis_y - h, "#2b6cb0")
        } else {
            (axis_y, "#c53030")
        };
        let _ = writeln!(
            out,
            r#"<rect class="bar" x="{x}" y="{y}" width="{}" height="{h}" fill="{fill}"/>"#,
            BAR_WIDTH - 1.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="10" text-anchor="middle">{c}</text>"#,
            x + BAR_WIDTH / 2.0,
            MARGIN + PLOT_HEIGHT + 14.0
        );
    }
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="black" stroke-width="1"/>"#,
        width - MARGIN
    );
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Tsv => "tsv",
            ExportFormat::Svg => "svg",
        }
    }
}

/// Renders `map` in `format` and writes it to `path`.
pub fn export_attribution(
    map: &AttributionMap,
    seq_text: &str,
    path: &Path,
    format: ExportFormat,
) -> Result<()> {
    if seq_text.chars().count() != map.nucleotide_scores.len() {
        return Err(Error::Dimension(format!(
            "sequence text has {} characters, map has {} positions",
            seq_text.chars().count(),
            map.nucleotide_scores.len()
        )));
    }
    let body = match format {
        ExportFormat::Tsv => to_tsv(map, seq_text),
        ExportFormat::Svg => to_svg(map, seq_text),
    };
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<model>_<method>_N<k>.<ext>` and returns the path.
pub fn export_to_dir(
    map: &AttributionMap,
    seq_text: &str,
    dir: &Path,
    format: ExportFormat,
) -> Result<PathBuf> {
    let path = dir.join(format!("{}.{}", map.artifact_stem(), format.extension()));
    export_attribution(map, seq_text, &path, format)?;
    Ok(path)
}
