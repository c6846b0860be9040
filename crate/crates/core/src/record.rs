//! The composition training example and its on-disk form.
//!
//! On disk a record is one JSON line in `manifest.jsonl` whose image and mask
//! fields are paths relative to the dataset root (`images/`, `masks/`).

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bbox_of_mask, invert_mask, BBox, KeypointSet, Mask};
use crate::image::{load_mask_png, save_mask_png, Image};

/// Supplementary labels that synthetic records carry and real records may lack.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub interaction_type: String,
    pub pose_category: String,
    /// Object pixels in the composite.
    pub object_mask: Mask,
    /// Joints of the person in the composite.
    pub joints: KeypointSet,
}

/// One training example: a person image, an object cutout, their composite,
/// a prompt describing the interaction and the region allowed to change.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub id: String,
    pub background: Image,
    pub foreground: Image,
    pub composite: Image,
    pub prompt: String,
    /// Byte offsets `[start, end)` of the words naming the object in `prompt`.
    pub foreground_span: (usize, usize),
    pub interaction_region: BBox,
    pub object_box: BBox,
    pub unchanged_mask: Mask,
    pub annotations: Option<Annotations>,
}

/// A failed record invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    ImageSizeMismatch,
    MaskSizeMismatch,
    MaskNotBinary,
    RegionMaskMismatch,
    TokenSpanOutOfBounds,
    EmptyPrompt,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Violation::ImageSizeMismatch => "image size mismatch",
            Violation::MaskSizeMismatch => "mask size mismatch",
            Violation::MaskNotBinary => "unchanged mask not binary",
            Violation::RegionMaskMismatch => "region/mask mismatch",
            Violation::TokenSpanOutOfBounds => "token span out of bounds",
            Violation::EmptyPrompt => "empty prompt",
        })
    }
}

/// True when every coordinate of `a` and `b` differs by at most one pixel.
pub fn boxes_within_pixel(a: &BBox, b: &BBox, height: usize, width: usize) -> bool {
    let (tx, ty) = (1.0 / width as f64 + 1e-12, 1.0 / height as f64 + 1e-12);
    (a.x0 - b.x0).abs() <= tx
        && (a.x1 - b.x1).abs() <= tx
        && (a.y0 - b.y0).abs() <= ty
        && (a.y1 - b.y1).abs() <= ty
}

/// Lists every record invariant that does not hold; empty means valid.
pub fn validate_record(record: &InteractionRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let (h, w) = (record.composite.height(), record.composite.width());
    let rgb = |img: &Image| img.channels() == 3 && img.height() == h && img.width() == w;
    if !rgb(&record.background) || !rgb(&record.foreground) || !rgb(&record.composite) {
        out.push(Violation::ImageSizeMismatch);
    }
    let mask = &record.unchanged_mask;
    let mask_fits = mask.height() == h && mask.width() == w;
    if !mask_fits {
        out.push(Violation::MaskSizeMismatch);
    }
    if !mask.is_binary() {
        out.push(Violation::MaskNotBinary);
    } else if mask_fits {
        let consistent = invert_mask(mask)
            .and_then(|m| bbox_of_mask(&m))
            .map(|b| boxes_within_pixel(&b, &record.interaction_region, h, w))
            .unwrap_or(false);
        if !consistent {
            out.push(Violation::RegionMaskMismatch);
        }
    }
    if record.prompt.trim().is_empty() {
        out.push(Violation::EmptyPrompt);
    }
    let (s, e) = record.foreground_span;
    if s >= e
        || e > record.prompt.len()
        || !record.prompt.is_char_boundary(s)
        || !record.prompt.is_char_boundary(e)
    {
        out.push(Violation::TokenSpanOutOfBounds);
    }
    out
}

/// Informational: whether the object box lies inside the interaction region.
pub fn object_inside_region(record: &InteractionRecord) -> bool {
    record.interaction_region.contains_box(&record.object_box)
}

/// A manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub background: PathBuf,
    pub foreground: PathBuf,
    pub composite: PathBuf,
    pub prompt: String,
    pub foreground_span: [usize; 2],
    pub interaction_region: BBox,
    pub object_box: BBox,
    pub unchanged_mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints: Option<KeypointSet>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes the record's images and masks under `root` and returns its manifest line.
pub fn save_record(record: &InteractionRecord, root: &Path) -> Result<ManifestEntry> {
    create_dir(&root.join("images"))?;
    create_dir(&root.join("masks"))?;
    let id = &record.id;
    let rel = |dir: &str, suffix: &str| PathBuf::from(dir).join(format!("{id}_{suffix}.png"));
    let entry = ManifestEntry {
        id: id.clone(),
        background: rel("images", "background"),
        foreground: rel("images", "foreground"),
        composite: rel("images", "composite"),
        prompt: record.prompt.clone(),
        foreground_span: [record.foreground_span.0, record.foreground_span.1],
        interaction_region: record.interaction_region,
        object_box: record.object_box,
        unchanged_mask: rel("masks", "unchanged"),
        interaction_type: record.annotations.as_ref().map(|a| a.interaction_type.clone()),
        pose_category: record.annotations.as_ref().map(|a| a.pose_category.clone()),
        object_mask: record.annotations.as_ref().map(|_| rel("masks", "object")),
        joints: record.annotations.as_ref().map(|a| a.joints.clone()),
    };
    record.background.save_png(root.join(&entry.background))?;
    record.foreground.save_png(root.join(&entry.foreground))?;
    record.composite.save_png(root.join(&entry.composite))?;
    save_mask_png(&record.unchanged_mask, root.join(&entry.unchanged_mask))?;
    if let (Some(a), Some(p)) = (&record.annotations, &entry.object_mask) {
        save_mask_png(&a.object_mask, root.join(p))?;
    }
    Ok(entry)
}

/// Reads the files a manifest line points to.
pub fn load_record(entry: &ManifestEntry, root: &Path) -> Result<InteractionRecord> {
    let annotations = match (&entry.interaction_type, &entry.object_mask, &entry.joints) {
        (Some(t), Some(m), Some(j)) => Some(Annotations {
            interaction_type: t.clone(),
            pose_category: entry.pose_category.clone().unwrap_or_default(),
            object_mask: load_mask_png(root.join(m))?,
            joints: j.clone(),
        }),
        _ => None,
    };
    Ok(InteractionRecord {
        id: entry.id.clone(),
        background: Image::load_png(root.join(&entry.background))?,
        foreground: Image::load_png(root.join(&entry.foreground))?,
        composite: Image::load_png(root.join(&entry.composite))?,
        prompt: entry.prompt.clone(),
        foreground_span: (entry.foreground_span[0], entry.foreground_span[1]),
        interaction_region: entry.interaction_region,
        object_box: entry.object_box,
        unchanged_mask: load_mask_png(root.join(&entry.unchanged_mask))?,
        annotations,
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Parses a manifest; each line yields an entry or the parse error for that line.
pub fn read_manifest_lines(path: &Path) -> Result<Vec<(usize, Result<ManifestEntry>)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, serde_json::from_str(&line).map_err(Error::from)));
    }
    Ok(out)
}

/// Parses a manifest, failing on the first malformed line.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    read_manifest_lines(path)?
        .into_iter()
        .map(|(line, r)| r.map_err(|e| Error::Validation(format!("{}:{line}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize_box;

    fn record() -> InteractionRecord {
        let region = BBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let unchanged = invert_mask(&rasterize_box(&region, 8, 8).unwrap()).unwrap();
        let img = |v: f64| Image::filled(8, 8, &[v, v, v]).unwrap();
        InteractionRecord {
            id: "r0".into(),
            background: img(0.2),
            foreground: img(0.4),
            composite: img(0.6),
            prompt: "A girl is holding a hat".into(),
            foreground_span: (20, 23),
            interaction_region: region,
            object_box: BBox::new(0.3, 0.3, 0.5, 0.5).unwrap(),
            unchanged_mask: unchanged,
            annotations: None,
        }
    }

    #[test]
    fn well_formed_record_is_valid() {
        assert!(validate_record(&record()).is_empty());
        assert!(object_inside_region(&record()));
    }

    #[test]
    fn perturbed_region_is_reported() {
        let mut r = record();
        r.interaction_region = BBox::new(0.25, 0.25, 0.75, 1.0).unwrap();
        let v = validate_record(&r);
        assert_eq!(v, vec![Violation::RegionMaskMismatch]);
        assert_eq!(v[0].to_string(), "region/mask mismatch");
    }

    #[test]
    fn one_pixel_slack_is_tolerated() {
        let mut r = record();
        r.interaction_region = BBox::new(0.25 - 1.0 / 8.0, 0.25, 0.75, 0.75 + 1.0 / 8.0).unwrap();
        assert!(validate_record(&r).is_empty());
    }

    #[test]
    fn span_past_prompt_end_is_reported() {
        let mut r = record();
        r.foreground_span = (20, 40);
        let v = validate_record(&r);
        assert_eq!(v, vec![Violation::TokenSpanOutOfBounds]);
        assert_eq!(v[0].to_string(), "token span out of bounds");
    }

    #[test]
    fn unchanged_everywhere_has_no_region() {
        let mut r = record();
        r.unchanged_mask = Mask::ones(8, 8).unwrap();
        assert_eq!(validate_record(&r), vec![Violation::RegionMaskMismatch]);
    }

    #[test]
    fn soft_mask_is_reported() {
        let mut r = record();
        r.unchanged_mask = Mask::filled(8, 8, 0.5).unwrap();
        assert!(validate_record(&r).contains(&Violation::MaskNotBinary));
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = record();
        let entry = save_record(&r, dir.path()).unwrap();
        let manifest = dir.path().join("manifest.jsonl");
        write_manifest(&manifest, &[entry.clone()]).unwrap();
        let back = read_manifest(&manifest).unwrap();
        assert_eq!(back, vec![entry.clone()]);
        let loaded = load_record(&back[0], dir.path()).unwrap();
        // Gray levels 0.2/0.4/0.6 are exact multiples of 1/255 only after quantization.
        assert_eq!(loaded.background, r.background.quantize_u8());
        assert_eq!(loaded.unchanged_mask, r.unchanged_mask);
        let line = serde_json::to_string(&entry).unwrap();
        assert!(line.contains("\"interaction_region\":[0.25,0.25,0.75,0.75]"));
    }
}
