//! Joint attention and shape-aware modulation of foreground attention maps.
//!
//! The joint stream concatenates image tokens with every conditioning stream
//! and runs one scaled-dot-product attention over all of them. Two sub-blocks
//! of the resulting probability matrix matter here: image queries against the
//! foreground words of the prompt, and image queries against the identity
//! tokens of the foreground object. During training each sub-block is pulled
//! toward its row maximum inside the object shape and toward its row minimum
//! outside it:
//!
//! ```text
//! A' = A + alpha * (M * (A_max - A) - (1 - M) * (A - A_min))
//! ```
//!
//! `A_max` and `A_min` are taken per query row over the keys of the
//! sub-block, and `M` is the object mask value of the query's image token.
//! The modulated values replace the originals in place with no
//! renormalization, so a spliced row may no longer sum to one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Slack allowed when checking that a slice row is part of a softmax row.
const ROW_SUM_SLACK: f64 = 1e-9;

/// Which stream a token of the joint sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Image,
    Text,
    ForegroundText,
    Id,
    Detail,
}

impl Segment {
    pub fn is_text(self) -> bool {
        matches!(self, Segment::Text | Segment::ForegroundText)
    }
}

/// The two modulation formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationVariant {
    /// Bounded by the per-row extrema.
    Residual,
    /// Additive `±alpha`, clamped to `[0, 1]` afterwards.
    NonResidual,
}

impl ModulationVariant {
    pub fn label(self) -> &'static str {
        match self {
            ModulationVariant::Residual => "Residual Strategy",
            ModulationVariant::NonResidual => "Non-residual Strategy",
        }
    }
}

/// One row-block of attention probabilities plus what modulation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSlice {
    probs: Tensor,
    row_max: Vec<f64>,
    row_min: Vec<f64>,
    shape_mask: Vec<f64>,
    alpha: f64,
}

impl AttentionSlice {
    pub fn new(probs: Tensor, shape_mask: Vec<f64>, alpha: f64) -> Result<Self> {
        if !probs.is_2d() || probs.cols() == 0 {
            return Err(Error::Shape(format!("slice shape {:?}", probs.shape())));
        }
        if shape_mask.len() != probs.rows() {
            return Err(Error::Shape(format!(
                "shape mask has {} rows, slice has {}",
                shape_mask.len(),
                probs.rows()
            )));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Parameter(format!("modulation strength must be >= 0, got {alpha}")));
        }
        if let Some(m) = shape_mask.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(Error::Validation(format!("shape mask value {m} outside [0, 1]")));
        }
        let mut row_max = Vec::with_capacity(probs.rows());
        let mut row_min = Vec::with_capacity(probs.rows());
        for i in 0..probs.rows() {
            let row = probs.row(i);
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!("slice row {i} has values outside [0, 1]")));
            }
            if row.iter().sum::<f64>() > 1.0 + ROW_SUM_SLACK {
                return Err(Error::Validation(format!("slice row {i} sums above 1")));
            }
            row_max.push(row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            row_min.push(row.iter().copied().fold(f64::INFINITY, f64::min));
        }
        Ok(Self {
            probs,
            row_max,
            row_min,
            shape_mask,
            alpha,
        })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn row_max(&self) -> &[f64] {
        &self.row_max
    }

    pub fn row_min(&self) -> &[f64] {
        &self.row_min
    }

    pub fn shape_mask(&self) -> &[f64] {
        &self.shape_mask
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn modulate(&self, variant: ModulationVariant) -> Tensor {
        match variant {
            ModulationVariant::Residual => modulate_residual(self),
            ModulationVariant::NonResidual => modulate_nonresidual(self),
        }
    }
}

#[inline]
pub(crate) fn residual_entry(a: f64, a_max: f64, a_min: f64, m: f64, alpha: f64) -> f64 {
    a + alpha * (m * (a_max - a) - (1.0 - m) * (a - a_min))
}

#[inline]
pub(crate) fn nonresidual_entry(a: f64, m: f64, alpha: f64) -> f64 {
    a + alpha * (m - (1.0 - m))
}

/// Residual modulation of every entry, using the slice's row extrema.
pub fn modulate_residual(slice: &AttentionSlice) -> Tensor {
    let mut out = slice.probs.clone();
    let m = out.cols();
    for (i, row) in out.data_mut().chunks_exact_mut(m).enumerate() {
        let (hi, lo, mask) = (slice.row_max[i], slice.row_min[i], slice.shape_mask[i]);
        for a in row {
            *a = residual_entry(*a, hi, lo, mask, slice.alpha);
        }
    }
    out
}

/// Additive modulation before clamping; may leave `[A_min, A_max]` and `[0, 1]`.
pub fn modulate_nonresidual_unclamped(slice: &AttentionSlice) -> Tensor {
    let mut out = slice.probs.clone();
    let m = out.cols();
    for (i, row) in out.data_mut().chunks_exact_mut(m).enumerate() {
        for a in row {
            *a = nonresidual_entry(*a, slice.shape_mask[i], slice.alpha);
        }
    }
    out
}

/// Additive modulation clamped to `[0, 1]`.
pub fn modulate_nonresidual(slice: &AttentionSlice) -> Tensor {
    modulate_nonresidual_unclamped(slice).map(|v| v.clamp(0.0, 1.0))
}

/// Scaled dot-product attention over one joint token stream.
///
/// `labels` tags every key. Returns the aggregated values and the full
/// post-softmax matrix (`queries x keys`).
pub fn joint_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    labels: &[Segment],
) -> Result<(Tensor, Tensor)> {
    if !queries.is_2d() || !keys.is_2d() || !values.is_2d() {
        return Err(Error::Shape("attention inputs must be 2-D".into()));
    }
    if queries.cols() != keys.cols() {
        return Err(Error::Shape(format!(
            "query dim {} != key dim {}",
            queries.cols(),
            keys.cols()
        )));
    }
    if keys.rows() != values.rows() || keys.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} keys, {} values, {} labels",
            keys.rows(),
            values.rows(),
            labels.len()
        )));
    }
    if keys.rows() == 0 || queries.cols() == 0 {
        return Err(Error::Shape("attention needs at least one key".into()));
    }
    let mut scores = Tensor::zeros(&[queries.rows(), keys.rows()]);
    gemm(queries, false, keys, true, 1.0 / (queries.cols() as f64).sqrt(), &mut scores);
    softmax_rows_in_place(&mut scores);
    let out = scores.matmul(values)?;
    Ok((out, scores))
}

pub(crate) fn softmax_rows_in_place(t: &mut Tensor) {
    let m = t.cols();
    for row in t.data_mut().chunks_exact_mut(m) {
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - hi).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Positions of the two foreground sub-blocks inside a joint matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundSlices {
    pub image_rows: Vec<usize>,
    pub text_cols: Vec<usize>,
    pub id_cols: Vec<usize>,
    /// Image queries against foreground words.
    pub text: Tensor,
    /// Image queries against identity tokens.
    pub id: Tensor,
}

/// Locates the image rows, the text columns named by `fg_text_indices`
/// (positions within the text segment) and the identity columns.
pub fn foreground_layout(
    labels: &[Segment],
    fg_text_indices: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if fg_text_indices.is_empty() {
        return Err(Error::Config("empty foreground token index set".into()));
    }
    let image_rows: Vec<usize> = positions(labels, |s| s == Segment::Image);
    let text_positions: Vec<usize> = positions(labels, Segment::is_text);
    let id_cols: Vec<usize> = positions(labels, |s| s == Segment::Id);
    let mut text_cols = Vec::with_capacity(fg_text_indices.len());
    for &i in fg_text_indices {
        let col = text_positions.get(i).ok_or_else(|| {
            Error::Config(format!(
                "foreground token {i} outside the {} text tokens",
                text_positions.len()
            ))
        })?;
        text_cols.push(*col);
    }
    Ok((image_rows, text_cols, id_cols))
}

fn positions(labels: &[Segment], pred: impl Fn(Segment) -> bool) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &s)| pred(s))
        .map(|(i, _)| i)
        .collect()
}

/// Copies `rows x cols` out of a 2-D tensor.
pub fn gather_block(t: &Tensor, rows: &[usize], cols: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        for &c in cols {
            data.push(t.get(r, c));
        }
    }
    Tensor::from_parts(vec![rows.len(), cols.len()], data)
}

/// Extracts the foreground-text and identity sub-blocks of a square joint
/// attention matrix whose rows and columns are both labelled by `labels`.
pub fn extract_fg_slices(
    probs: &Tensor,
    labels: &[Segment],
    fg_text_indices: &[usize],
) -> Result<ForegroundSlices> {
    if !probs.is_2d() || probs.rows() != labels.len() || probs.cols() != labels.len() {
        return Err(Error::Shape(format!(
            "joint matrix {:?} vs {} labels",
            probs.shape(),
            labels.len()
        )));
    }
    let (image_rows, text_cols, id_cols) = foreground_layout(labels, fg_text_indices)?;
    Ok(ForegroundSlices {
        text: gather_block(probs, &image_rows, &text_cols),
        id: gather_block(probs, &image_rows, &id_cols),
        image_rows,
        text_cols,
        id_cols,
    })
}

/// A modulated block together with where it goes back into the joint matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedSlice {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Tensor,
}

/// Splices `slices` into `probs` with no renormalization.
pub fn splice(probs: &Tensor, slices: &[PlacedSlice]) -> Result<Tensor> {
    let mut out = probs.clone();
    let mut taken = vec![false; probs.len()];
    for s in slices {
        if s.values.shape() != [s.rows.len(), s.cols.len()] {
            return Err(Error::Shape(format!(
                "slice values {:?} for {}x{} positions",
                s.values.shape(),
                s.rows.len(),
                s.cols.len()
            )));
        }
        for (i, &r) in s.rows.iter().enumerate() {
            for (j, &c) in s.cols.iter().enumerate() {
                if r >= probs.rows() || c >= probs.cols() {
                    return Err(Error::Shape(format!("slice position ({r}, {c}) out of bounds")));
                }
                let k = r * probs.cols() + c;
                if std::mem::replace(&mut taken[k], true) {
                    return Err(Error::Config(format!("overlapping slice position ({r}, {c})")));
                }
                out.data_mut()[k] = s.values.get(i, j);
            }
        }
    }
    Ok(out)
}

/// Aggregates `values` with the spliced matrix directly (no re-softmax).
pub fn apply_modulated(probs: &Tensor, values: &Tensor, slices: &[PlacedSlice]) -> Result<Tensor> {
    splice(probs, slices)?.matmul(values)
}

/// Modulates the foreground sub-blocks of a joint matrix and returns the
/// spliced matrix. `shape_mask` has one entry per image-query row.
pub fn modulate_joint(
    probs: &Tensor,
    labels: &[Segment],
    fg_text_indices: &[usize],
    shape_mask: &[f64],
    alpha: f64,
    variant: ModulationVariant,
) -> Result<Tensor> {
    let fg = extract_fg_slices(probs, labels, fg_text_indices)?;
    let mut placed = Vec::with_capacity(2);
    for (block, cols) in [(fg.text, fg.text_cols), (fg.id, fg.id_cols)] {
        if cols.is_empty() {
            continue;
        }
        let slice = AttentionSlice::new(block, shape_mask.to_vec(), alpha)?;
        placed.push(PlacedSlice {
            rows: fg.image_rows.clone(),
            cols,
            values: slice.modulate(variant),
        });
    }
    splice(probs, &placed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(values: &[f64], m: f64, alpha: f64) -> Vec<f64> {
        let slice = AttentionSlice::new(
            Tensor::new(vec![1, values.len()], values.to_vec()).unwrap(),
            vec![m],
            alpha,
        )
        .unwrap();
        modulate_residual(&slice).into_data()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn residual_reference_rows() {
        let r = [0.2, 0.3, 0.5];
        assert!(close(&row(&r, 1.0, 0.0), &r, 1e-12));
        assert!(close(&row(&r, 1.0, 1.0), &[0.5, 0.5, 0.5], 1e-12));
        assert!(close(&row(&r, 1.0, 0.5), &[0.35, 0.40, 0.50], 1e-12));
        assert!(close(&row(&r, 0.0, 0.5), &[0.20, 0.25, 0.35], 1e-12));
    }

    #[test]
    fn nonresidual_reference_entries() {
        let s = |a: f64, m: f64, alpha: f64| {
            let sl = AttentionSlice::new(Tensor::new(vec![1, 1], vec![a]).unwrap(), vec![m], alpha)
                .unwrap();
            modulate_nonresidual(&sl).item()
        };
        assert!((s(0.3, 1.0, 0.1) - 0.4).abs() < 1e-12);
        assert_eq!(s(0.05, 0.0, 0.1), 0.0);
        assert_eq!(s(0.3, 0.7, 0.0), 0.3);
    }

    #[test]
    fn slice_rejects_bad_inputs() {
        let t = Tensor::new(vec![1, 2], vec![0.7, 0.6]).unwrap();
        assert!(AttentionSlice::new(t, vec![1.0], 1.0).is_err());
        let t = Tensor::new(vec![1, 2], vec![0.2, 0.3]).unwrap();
        assert!(AttentionSlice::new(t.clone(), vec![1.0], -0.1).is_err());
        assert!(AttentionSlice::new(t, vec![1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn attention_trivial_cases() {
        let q = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (_, p) = joint_attention(&q, &q, &q, &[Segment::Image]).unwrap();
        assert_eq!(p.item(), 1.0);

        let k = Tensor::new(vec![2, 3], vec![0.1, -0.4, 2.0, 0.1, -0.4, 2.0]).unwrap();
        let q = Tensor::new(vec![1, 3], vec![5.0, 1.0, -3.0]).unwrap();
        let (_, p) = joint_attention(&q, &k, &k, &[Segment::Image, Segment::Id]).unwrap();
        assert!(close(p.data(), &[0.5, 0.5], 1e-15));
    }

    #[test]
    fn attention_shape_errors() {
        let q = Tensor::zeros(&[2, 3]);
        let k = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            joint_attention(&q, &k, &k, &[Segment::Image; 2]),
            Err(Error::Shape(_))
        ));
        assert!(joint_attention(&q, &q, &q, &[Segment::Image]).is_err());
    }

    #[test]
    fn extraction_needs_foreground_tokens() {
        let labels = [Segment::Image, Segment::Text, Segment::Id];
        let p = Tensor::full(&[3, 3], 1.0 / 3.0);
        assert!(matches!(extract_fg_slices(&p, &labels, &[]), Err(Error::Config(_))));
        assert!(matches!(extract_fg_slices(&p, &labels, &[4]), Err(Error::Config(_))));
    }

    #[test]
    fn all_id_keys_give_full_rows() {
        let labels = [Segment::Image, Segment::Id, Segment::ForegroundText, Segment::Id];
        let mut p = Tensor::new(vec![4, 4], (0..16).map(|i| i as f64 + 1.0).collect()).unwrap();
        softmax_rows_in_place(&mut p);
        let fg = extract_fg_slices(&p, &labels, &[0]).unwrap();
        assert_eq!(fg.image_rows, vec![0]);
        assert_eq!(fg.id_cols, vec![1, 3]);
        assert_eq!(fg.text.data(), &[p.get(0, 2)]);
    }

    #[test]
    fn overlapping_splice_is_rejected() {
        let p = Tensor::full(&[2, 2], 0.5);
        let s = PlacedSlice {
            rows: vec![0],
            cols: vec![1],
            values: Tensor::full(&[1, 1], 0.0),
        };
        assert!(matches!(splice(&p, &[s.clone(), s]), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn residual_stays_within_row_extrema(
            logits in proptest::collection::vec(-4.0..4.0f64, 2..12),
            tail in 0.0..1.0f64,
            m in 0.0..=1.0f64,
            alpha in 0.0..=1.0f64,
        ) {
            // A sub-block of a softmax row: scale the softmax by the mass left
            // for keys outside the block.
            let mut p = Tensor::new(vec![1, logits.len()], logits).unwrap();
            softmax_rows_in_place(&mut p);
            let p = p.map(|v| v * (1.0 - tail));
            let s = AttentionSlice::new(p, vec![m], alpha).unwrap();
            let out = modulate_residual(&s);
            for &v in out.data() {
                prop_assert!(v >= s.row_min()[0] - 1e-12 && v <= s.row_max()[0] + 1e-12);
            }
        }
    }
}
