//! Foreground preprocessing and assembly of the denoiser's conditioning inputs.
//!
//! A [`ConditioningBundle`] carries the prompt embedding (with the positions
//! of the words naming the foreground object), identity tokens and
//! high-frequency detail tokens of the foreground, the interaction region
//! rasterized on the latent grid, the encoded background, and, at training
//! time only, the object shape prior on the token grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{rasterize_box, BBox, Mask};
use crate::image::{gaussian_blur, Image};
use crate::tensor::Tensor;

/// Default blur scale for the detail map.
pub const DEFAULT_DETAIL_SIGMA: f64 = 2.0;

/// Gray level that cut-out objects are matted onto.
pub const NEUTRAL_GRAY: f64 = 0.5;

/// `gray - GaussianBlur(gray)`: a single-channel map of fine texture.
pub fn detail_map(foreground: &Image, sigma: f64) -> Result<Image> {
    let gray = foreground.to_gray();
    let blurred = gaussian_blur(&gray, sigma)?;
    let data = gray
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(g, b)| g - b)
        .collect();
    Image::new(gray.height(), gray.width(), 1, data)
}

/// Separates a foreground object from its surroundings.
pub trait Segmenter {
    fn segment(&self, image: &Image) -> Result<Mask>;
}

/// Uses the alpha channel of an RGBA image, thresholded at 0.5.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlphaSegmenter;

impl Segmenter for AlphaSegmenter {
    fn segment(&self, image: &Image) -> Result<Mask> {
        if image.channels() != 4 {
            return Err(Error::Shape(format!(
                "alpha segmentation needs 4 channels, got {}",
                image.channels()
            )));
        }
        let values = image
            .data()
            .chunks_exact(4)
            .map(|p| if p[3] >= 0.5 { 1.0 } else { 0.0 })
            .collect();
        Mask::from_values(image.height(), image.width(), values)
    }
}

/// Marks every pixel that differs from a flat backdrop color.
#[derive(Debug, Clone)]
pub struct BackdropSegmenter {
    pub backdrop: [f64; 3],
    pub tolerance: f64,
}

impl Segmenter for BackdropSegmenter {
    fn segment(&self, image: &Image) -> Result<Mask> {
        if image.channels() < 3 {
            return Err(Error::Shape("backdrop segmentation needs RGB".into()));
        }
        let values = image
            .data()
            .chunks_exact(image.channels())
            .map(|p| {
                let d = (0..3).map(|k| (p[k] - self.backdrop[k]).abs()).fold(0.0, f64::max);
                if d > self.tolerance {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Mask::from_values(image.height(), image.width(), values)
    }
}

/// Returns a mask known ahead of time, such as a dataset's object mask.
#[derive(Debug, Clone)]
pub struct FixedMaskSegmenter(pub Mask);

impl Segmenter for FixedMaskSegmenter {
    fn segment(&self, image: &Image) -> Result<Mask> {
        if self.0.height() != image.height() || self.0.width() != image.width() {
            return Err(Error::Shape("fixed mask does not match image size".into()));
        }
        Ok(self.0.clone())
    }
}

/// Mattes the segmented object onto neutral gray, pads to a square and
/// shifts it so the mask centroid sits at the image center.
pub fn preprocess_foreground(foreground: &Image, segmenter: &dyn Segmenter) -> Result<Image> {
    let mask = segmenter.segment(foreground)?;
    let count = mask.count_nonzero();
    if count == 0 {
        return Err(Error::EmptyObject);
    }
    let (h, w) = (foreground.height(), foreground.width());
    let side = h.max(w);
    let (pad_y, pad_x) = ((side - h) / 2, (side - w) / 2);
    let (mut cy, mut cx) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) >= 0.5 {
                cy += r as f64 + 0.5 + pad_y as f64;
                cx += c as f64 + 0.5 + pad_x as f64;
            }
        }
    }
    let n = (0..h * w).filter(|&i| mask.values()[i] >= 0.5).count().max(1) as f64;
    let half = side as f64 / 2.0;
    let dy = (half - cy / n).round() as i64 + pad_y as i64;
    let dx = (half - cx / n).round() as i64 + pad_x as i64;

    let mut out = Image::filled(side, side, &[NEUTRAL_GRAY; 3])?;
    for r in 0..h {
        for c in 0..w {
            let m = mask.get(r, c);
            if m == 0.0 {
                continue;
            }
            let (tr, tc) = (r as i64 + dy, c as i64 + dx);
            if tr < 0 || tc < 0 || tr >= side as i64 || tc >= side as i64 {
                continue;
            }
            let src = foreground.pixel(r, c);
            let dst = out.pixel_mut(tr as usize, tc as usize);
            for k in 0..3 {
                dst[k] = m * src[k] + (1.0 - m) * NEUTRAL_GRAY;
            }
        }
    }
    Ok(out)
}

/// Area-weighted average of `mask` over a `rows x cols` token grid.
///
/// Token `(i, j)` covers the pixel-space rectangle
/// `[i * H / rows, (i + 1) * H / rows) x [j * W / cols, (j + 1) * W / cols)`;
/// partially covered pixels contribute by their overlap.
pub fn downsample_mask_to_tokens(mask: &Mask, grid: (usize, usize)) -> Result<Vec<f64>> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 {
        return Err(Error::Parameter(format!("token grid {rows}x{cols}")));
    }
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    let (sy, sx) = (h / rows as f64, w / cols as f64);
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let (y0, y1) = (i as f64 * sy, (i + 1) as f64 * sy);
        for j in 0..cols {
            let (x0, x1) = (j as f64 * sx, (j + 1) as f64 * sx);
            let mut acc = 0.0;
            for r in y0.floor() as usize..(y1.ceil() as usize).min(mask.height()) {
                let oy = (y1.min(r as f64 + 1.0) - y0.max(r as f64)).max(0.0);
                for c in x0.floor() as usize..(x1.ceil() as usize).min(mask.width()) {
                    let ox = (x1.min(c as f64 + 1.0) - x0.max(c as f64)).max(0.0);
                    acc += oy * ox * mask.get(r, c);
                }
            }
            out.push((acc / (sy * sx)).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Produces identity tokens `(M_id, d_model)` for a preprocessed foreground.
pub trait IdEncoder: Send + Sync {
    fn d_model(&self) -> usize;
    fn encode(&self, foreground: &Image) -> Result<Tensor>;
}

/// Embeds a prompt into `(T, d_model)` tokens.
pub trait TextEmbedder: Send + Sync {
    fn d_model(&self) -> usize;
    /// Token embeddings and the character span of each token in `prompt`.
    fn embed(&self, prompt: &str) -> Result<(Tensor, Vec<(usize, usize)>)>;
}

/// Encodes a detail map into `(M_d, d_model)` tokens.
pub trait DetailEncoder: Send + Sync {
    fn d_model(&self) -> usize;
    fn encode(&self, detail: &Image) -> Result<Tensor>;
}

/// Bilinear resize of any image to `size x size` (edge-clamped).
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut data = Vec::with_capacity(out_h * out_w * ch);
    for r in 0..out_h {
        let y = ((r as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for c in 0..out_w {
            let x = ((c as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            for k in 0..ch {
                let v = (1.0 - fy) * ((1.0 - fx) * img.pixel(y0, x0)[k] + fx * img.pixel(y0, x1)[k])
                    + fy * ((1.0 - fx) * img.pixel(y1, x0)[k] + fx * img.pixel(y1, x1)[k]);
                data.push(v);
            }
        }
    }
    Image::new(out_h, out_w, ch, data).expect("resize dimensions")
}

fn seeded(seed: u64, salt: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(bytes)
}

/// Patchify-and-project identity encoder with a fixed random projection.
#[derive(Debug, Clone)]
pub struct PatchIdEncoder {
    input_size: usize,
    patch: usize,
    projection: Tensor,
}

impl PatchIdEncoder {
    pub fn new(d_model: usize, seed: u64) -> Self {
        let (input_size, patch) = (32, 8);
        let fan_in = patch * patch * 3;
        let projection = Tensor::randn(
            &[fan_in, d_model],
            1.0 / (fan_in as f64).sqrt(),
            &mut seeded(seed, "id-encoder"),
        );
        Self {
            input_size,
            patch,
            projection,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.input_size / self.patch).pow(2)
    }
}

impl IdEncoder for PatchIdEncoder {
    fn d_model(&self) -> usize {
        self.projection.cols()
    }

    fn encode(&self, foreground: &Image) -> Result<Tensor> {
        if foreground.channels() != 3 {
            return Err(Error::Shape("identity encoder expects RGB".into()));
        }
        let img = resize_bilinear(foreground, self.input_size, self.input_size);
        let g = self.input_size / self.patch;
        let mut rows = Vec::with_capacity(g * g);
        for pr in 0..g {
            for pc in 0..g {
                let mut v = Vec::with_capacity(self.projection.rows());
                for r in 0..self.patch {
                    for c in 0..self.patch {
                        v.extend(img.pixel(pr * self.patch + r, pc * self.patch + c).iter().map(|x| x - NEUTRAL_GRAY));
                    }
                }
                rows.push(v);
            }
        }
        Tensor::from_rows(&rows)?.matmul(&self.projection)
    }
}

/// Splits a prompt into lowercase alphanumeric words with their byte spans.
pub fn tokenize(prompt: &str) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in prompt.char_indices() {
        if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            out.push((prompt[s..i].to_lowercase(), (s, i)));
        }
    }
    if let Some(s) = start {
        out.push((prompt[s..].to_lowercase(), (s, prompt.len())));
    }
    out
}

/// Each word maps to a fixed pseudo-random vector derived from its hash.
#[derive(Debug, Clone)]
pub struct HashTextEmbedder {
    d_model: usize,
    max_tokens: usize,
    seed: u64,
}

impl HashTextEmbedder {
    pub fn new(d_model: usize, max_tokens: usize, seed: u64) -> Self {
        Self {
            d_model,
            max_tokens,
            seed,
        }
    }
}

impl TextEmbedder for HashTextEmbedder {
    fn d_model(&self) -> usize {
        self.d_model
    }

    fn embed(&self, prompt: &str) -> Result<(Tensor, Vec<(usize, usize)>)> {
        let words = tokenize(prompt);
        if words.is_empty() {
            return Err(Error::Validation("prompt has no words".into()));
        }
        let words = &words[..words.len().min(self.max_tokens)];
        let mut data = Vec::with_capacity(words.len() * self.d_model);
        for (w, _) in words {
            let t = Tensor::randn(&[self.d_model], 1.0, &mut seeded(self.seed, w));
            data.extend_from_slice(t.data());
        }
        let spans = words.iter().map(|(_, s)| *s).collect();
        Ok((Tensor::new(vec![words.len(), self.d_model], data)?, spans))
    }
}

/// Strided 3x3 convolution stack (ReLU between layers) with fixed weights,
/// followed by a projection of each output cell to one token.
#[derive(Debug, Clone)]
pub struct ConvDetailEncoder {
    input_size: usize,
    layers: Vec<(Tensor, usize, usize)>,
    projection: Tensor,
}

impl ConvDetailEncoder {
    /// `depth` stride-2 layers; channel width doubles from 8 each layer.
    pub fn new(d_model: usize, depth: usize, seed: u64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Parameter("detail encoder needs at least one layer".into()));
        }
        let mut rng = seeded(seed, "detail-encoder");
        let mut layers = Vec::with_capacity(depth);
        let mut cin = 1;
        for l in 0..depth {
            let cout = 8 << l;
            let fan_in = 9 * cin;
            let w = Tensor::randn(&[fan_in, cout], (2.0 / fan_in as f64).sqrt(), &mut rng);
            layers.push((w, cin, cout));
            cin = cout;
        }
        let projection = Tensor::randn(&[cin, d_model], 1.0 / (cin as f64).sqrt(), &mut rng);
        Ok(Self {
            input_size: 32,
            layers,
            projection,
        })
    }

    pub fn tokens(&self) -> usize {
        (self.input_size >> self.layers.len()).max(1).pow(2)
    }
}

impl DetailEncoder for ConvDetailEncoder {
    fn d_model(&self) -> usize {
        self.projection.cols()
    }

    fn encode(&self, detail: &Image) -> Result<Tensor> {
        if detail.channels() != 1 {
            return Err(Error::Shape("detail encoder expects a single-channel map".into()));
        }
        let img = resize_bilinear(detail, self.input_size, self.input_size);
        let mut size = self.input_size;
        let mut feat = img.into_data();
        for (li, (w, cin, cout)) in self.layers.iter().enumerate() {
            let out_size = (size / 2).max(1);
            let mut patches = Vec::with_capacity(out_size * out_size);
            for r in 0..out_size {
                for c in 0..out_size {
                    let mut p = Vec::with_capacity(9 * cin);
                    for dr in 0..3i64 {
                        for dc in 0..3i64 {
                            let rr = (2 * r) as i64 + dr - 1;
                            let cc = (2 * c) as i64 + dc - 1;
                            for k in 0..*cin {
                                let inside = rr >= 0 && cc >= 0 && (rr as usize) < size && (cc as usize) < size;
                                p.push(if inside {
                                    feat[(rr as usize * size + cc as usize) * cin + k]
                                } else {
                                    0.0
                                });
                            }
                        }
                    }
                    patches.push(p);
                }
            }
            let mut y = Tensor::from_rows(&patches)?.matmul(w)?;
            if li + 1 < self.layers.len() {
                y = y.map(|v| v.max(0.0));
            }
            debug_assert_eq!(y.cols(), *cout);
            feat = y.into_data();
            size = out_size;
        }
        let cells = Tensor::new(vec![size * size, self.layers.last().unwrap().2], feat)?;
        cells.matmul(&self.projection)
    }
}

/// The three encoders used to build a bundle.
pub struct Encoders {
    pub id: Box<dyn IdEncoder>,
    pub text: Box<dyn TextEmbedder>,
    pub detail: Box<dyn DetailEncoder>,
}

impl Encoders {
    /// Deterministic desk-scale encoders.
    pub fn toy(d_model: usize, max_text_tokens: usize, detail_depth: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            id: Box::new(PatchIdEncoder::new(d_model, seed)),
            text: Box::new(HashTextEmbedder::new(d_model, max_text_tokens, seed)),
            detail: Box::new(ConvDetailEncoder::new(d_model, detail_depth, seed)?),
        })
    }

    fn check(&self) -> Result<usize> {
        let d = self.id.d_model();
        if self.text.d_model() != d || self.detail.d_model() != d {
            return Err(Error::Config(format!(
                "encoder widths disagree: id {}, text {}, detail {}",
                d,
                self.text.d_model(),
                self.detail.d_model()
            )));
        }
        Ok(d)
    }
}

/// Fixed 4x-style patchify codec between images in `[0, 1]` and latent
/// tokens in `[-1, 1]`: each token holds one `patch x patch x 3` block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchCodec {
    pub patch: usize,
}

impl PatchCodec {
    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.patch == 0 || height % self.patch != 0 || width % self.patch != 0 {
            return Err(Error::Dimension(format!(
                "{height}x{width} image is not divisible into {0}x{0} patches",
                self.patch
            )));
        }
        Ok((height / self.patch, width / self.patch))
    }

    /// Flat HWC index of every latent entry, token-major.
    pub fn layout(&self, height: usize, width: usize) -> Result<Vec<usize>> {
        let (gh, gw) = self.grid(height, width)?;
        let p = self.patch;
        let mut idx = Vec::with_capacity(height * width * 3);
        for tr in 0..gh {
            for tc in 0..gw {
                for r in 0..p {
                    for c in 0..p {
                        for k in 0..3 {
                            idx.push(((tr * p + r) * width + tc * p + c) * 3 + k);
                        }
                    }
                }
            }
        }
        Ok(idx)
    }

    pub fn encode(&self, img: &Image) -> Result<Tensor> {
        if img.channels() != 3 {
            return Err(Error::Shape("codec expects RGB".into()));
        }
        let idx = self.layout(img.height(), img.width())?;
        let (gh, gw) = self.grid(img.height(), img.width())?;
        let data = idx.iter().map(|&i| 2.0 * img.data()[i] - 1.0).collect();
        Tensor::new(vec![gh * gw, self.token_dim()], data)
    }

    pub fn decode(&self, latent: &Tensor, height: usize, width: usize) -> Result<Image> {
        let idx = self.layout(height, width)?;
        if latent.len() != idx.len() {
            return Err(Error::Shape(format!(
                "latent {:?} does not decode to {height}x{width}",
                latent.shape()
            )));
        }
        let mut data = vec![0.0; idx.len()];
        for (v, &i) in latent.data().iter().zip(&idx) {
            data[i] = (v + 1.0) / 2.0;
        }
        Image::new(height, width, 3, data)
    }
}

/// Everything the denoiser is conditioned on for one composition.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub text_tokens: Tensor,
    /// Positions within `text_tokens` naming the foreground object.
    pub fg_token_indices: Vec<usize>,
    pub id_tokens: Tensor,
    pub detail_tokens: Tensor,
    /// Rasterized interaction region, one value per latent token.
    pub region_mask: Vec<f64>,
    /// Encoded background image, one row per latent token.
    pub background_latent: Tensor,
    /// Object shape prior per image token; present only for training.
    pub shape_mask: Option<Vec<f64>>,
    pub grid: (usize, usize),
}

impl ConditioningBundle {
    pub fn d_model(&self) -> usize {
        self.text_tokens.cols()
    }

    pub fn image_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Checks the bundle's structural invariants.
    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.id_tokens.cols() != d || self.detail_tokens.cols() != d {
            return Err(Error::Config("token widths disagree".into()));
        }
        if self.fg_token_indices.is_empty() {
            return Err(Error::Config("no foreground tokens".into()));
        }
        if self.fg_token_indices.iter().any(|&i| i >= self.text_tokens.rows()) {
            return Err(Error::Config("foreground token outside the prompt".into()));
        }
        let n = self.image_tokens();
        if self.region_mask.len() != n || self.background_latent.rows() != n {
            return Err(Error::Shape("latent-grid inputs do not match the grid".into()));
        }
        if let Some(m) = &self.shape_mask {
            if m.len() != n || m.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Shape("shape mask must hold one [0, 1] value per image token".into()));
            }
        }
        Ok(())
    }
}

/// Raw inputs for one bundle.
#[derive(Debug, Clone)]
pub struct BundleInputs<'a> {
    pub prompt: &'a str,
    /// Byte span of the foreground words in `prompt`.
    pub foreground_span: (usize, usize),
    pub interaction_region: BBox,
    /// Foreground after [`preprocess_foreground`].
    pub foreground: &'a Image,
    pub background: &'a Image,
    /// Ground-truth object mask in composite pixel space (training only).
    pub object_mask: Option<&'a Mask>,
}

/// Word positions whose spans overlap the character span.
pub fn foreground_token_indices(spans: &[(usize, usize)], fg: (usize, usize)) -> Vec<usize> {
    spans
        .iter()
        .enumerate()
        .filter(|(_, &(s, e))| s < fg.1 && fg.0 < e)
        .map(|(i, _)| i)
        .collect()
}

pub fn build_bundle(
    inputs: &BundleInputs<'_>,
    encoders: &Encoders,
    codec: PatchCodec,
    detail_sigma: f64,
) -> Result<ConditioningBundle> {
    encoders.check()?;
    let (text_tokens, spans) = encoders.text.embed(inputs.prompt)?;
    let fg_token_indices = foreground_token_indices(&spans, inputs.foreground_span);
    if fg_token_indices.is_empty() {
        return Err(Error::Config(format!(
            "foreground span {:?} covers no token of {:?}",
            inputs.foreground_span, inputs.prompt
        )));
    }
    let id_tokens = encoders.id.encode(inputs.foreground)?;
    let detail_tokens = encoders.detail.encode(&detail_map(inputs.foreground, detail_sigma)?)?;
    let bg = inputs.background;
    let grid = codec.grid(bg.height(), bg.width())?;
    let region_mask = rasterize_box(&inputs.interaction_region, grid.0, grid.1)?
        .values()
        .to_vec();
    let background_latent = codec.encode(bg)?;
    let shape_mask = match inputs.object_mask {
        Some(m) => {
            if m.height() != bg.height() || m.width() != bg.width() {
                return Err(Error::Shape("object mask does not match the background".into()));
            }
            Some(downsample_mask_to_tokens(m, grid)?)
        }
        None => None,
    };
    let bundle = ConditioningBundle {
        text_tokens,
        fg_token_indices,
        id_tokens,
        detail_tokens,
        region_mask,
        background_latent,
        shape_mask,
        grid,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detail_of_constant_is_zero() {
        let img = Image::filled(12, 12, &[0.3, 0.6, 0.2]).unwrap();
        let d = detail_map(&img, 2.0).unwrap();
        assert!(d.data().iter().all(|v| v.abs() < 1e-14));
        assert!(detail_map(&img, 0.0).is_err());
    }

    #[test]
    fn detail_plus_blur_reconstructs_gray() {
        let data: Vec<f64> = (0..10 * 14 * 3).map(|i| ((i * 7919) % 97) as f64 / 96.0).collect();
        let img = Image::new(10, 14, 3, data).unwrap();
        let d = detail_map(&img, 1.7).unwrap();
        let gray = img.to_gray();
        let blur = gaussian_blur(&gray, 1.7).unwrap();
        for ((g, b), x) in gray.data().iter().zip(blur.data()).zip(d.data()) {
            assert!((x + b - g).abs() < 1e-14);
            assert!((-1.0..=1.0).contains(x));
        }
    }

    #[test]
    fn step_edge_response_is_antisymmetric_and_local() {
        // 1-D step along columns, constant along rows.
        let w = 40;
        let img = Image::new(
            3,
            w,
            1,
            (0..3 * w).map(|i| if i % w < w / 2 { 0.0 } else { 1.0 }).collect(),
        )
        .unwrap();
        let support = |sigma: f64| {
            let d = detail_map(&img, sigma).unwrap();
            let row: Vec<f64> = (0..w).map(|c| d.pixel(1, c)[0]).collect();
            for k in 0..w / 2 {
                assert!((row[w / 2 - 1 - k] + row[w / 2 + k]).abs() < 1e-12);
            }
            assert!(row[0].abs() < 1e-12 && row[w - 1].abs() < 1e-12);
            row.iter().filter(|v| v.abs() > 1e-6).count()
        };
        assert!(support(2.0) > support(1.0));
        assert!(support(4.0) > support(2.0));
    }

    #[test]
    fn downsample_examples() {
        let ones = Mask::ones(8, 8).unwrap();
        assert_eq!(downsample_mask_to_tokens(&ones, (2, 2)).unwrap(), vec![1.0; 4]);
        let checker = Mask::from_fn(8, 8, |r, c| ((r + c) % 2) as f64).unwrap();
        assert_eq!(downsample_mask_to_tokens(&checker, (2, 2)).unwrap(), vec![0.5; 4]);
        let single = Mask::from_fn(8, 8, |r, c| if (r, c) == (5, 1) { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(
            downsample_mask_to_tokens(&single, (2, 2)).unwrap(),
            vec![0.0, 0.0, 1.0 / 16.0, 0.0]
        );
        let top = Mask::from_fn(4, 4, |r, _| if r < 2 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(downsample_mask_to_tokens(&top, (2, 2)).unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
        assert!(downsample_mask_to_tokens(&ones, (0, 2)).is_err());
    }

    #[test]
    fn downsample_handles_uneven_grids() {
        let ones = Mask::ones(7, 5).unwrap();
        let t = downsample_mask_to_tokens(&ones, (3, 2)).unwrap();
        assert!(t.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let m = Mask::from_fn(7, 5, |r, c| ((r * 5 + c) % 3 == 0) as u8 as f64).unwrap();
        let t = downsample_mask_to_tokens(&m, (3, 2)).unwrap();
        let cell_area = 7.0 * 5.0 / 6.0;
        assert!((t.iter().sum::<f64>() * cell_area - m.sum()).abs() < 1e-9);
    }

    #[test]
    fn centering_moves_object_to_middle() {
        let mut img = Image::filled(16, 16, &[1.0, 1.0, 1.0]).unwrap();
        for r in 1..5 {
            for c in 2..6 {
                img.pixel_mut(r, c).copy_from_slice(&[0.9, 0.1, 0.1]);
            }
        }
        let seg = BackdropSegmenter {
            backdrop: [1.0; 3],
            tolerance: 0.01,
        };
        let out = preprocess_foreground(&img, &seg).unwrap();
        let m = BackdropSegmenter {
            backdrop: [NEUTRAL_GRAY; 3],
            tolerance: 0.01,
        }
        .segment(&out)
        .unwrap();
        let (mut cy, mut cx, mut n) = (0.0, 0.0, 0.0);
        for r in 0..16 {
            for c in 0..16 {
                if m.get(r, c) == 1.0 {
                    cy += r as f64 + 0.5;
                    cx += c as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        assert_eq!(n, 16.0);
        assert!((cy / n - 8.0).abs() <= 0.5 && (cx / n - 8.0).abs() <= 0.5);
    }

    #[test]
    fn centered_square_cutout_is_unchanged() {
        let mut img = Image::filled(8, 8, &[NEUTRAL_GRAY; 3]).unwrap();
        for r in 2..6 {
            for c in 2..6 {
                img.pixel_mut(r, c).copy_from_slice(&[0.1, 0.2, 0.9]);
            }
        }
        let seg = BackdropSegmenter {
            backdrop: [NEUTRAL_GRAY; 3],
            tolerance: 0.01,
        };
        assert_eq!(preprocess_foreground(&img, &seg).unwrap(), img);
    }

    #[test]
    fn transparent_foreground_is_empty() {
        let img = Image::filled(4, 4, &[0.3, 0.3, 0.3, 0.0]).unwrap();
        assert!(matches!(
            preprocess_foreground(&img, &AlphaSegmenter),
            Err(Error::EmptyObject)
        ));
    }

    #[test]
    fn codec_round_trip() {
        let data: Vec<f64> = (0..8 * 12 * 3).map(|i| (i % 255) as f64 / 255.0).collect();
        let img = Image::new(8, 12, 3, data).unwrap();
        let codec = PatchCodec { patch: 4 };
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.shape(), &[6, 48]);
        let back = codec.decode(&z, 8, 12).unwrap();
        assert!(back.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(codec.grid(10, 12).is_err());
    }

    #[test]
    fn tokenizer_spans() {
        let toks = tokenize("A boy is eating a donut.");
        let words: Vec<&str> = toks.iter().map(|t| t.0.as_str()).collect();
        assert_eq!(words, ["a", "boy", "is", "eating", "a", "donut"]);
        assert_eq!(toks[5].1, (18, 23));
        assert_eq!(foreground_token_indices(&toks.iter().map(|t| t.1).collect::<Vec<_>>(), (18, 23)), vec![5]);
    }

    #[test]
    fn mismatched_encoder_widths_are_rejected() {
        let enc = Encoders {
            id: Box::new(PatchIdEncoder::new(16, 1)),
            text: Box::new(HashTextEmbedder::new(8, 8, 1)),
            detail: Box::new(ConvDetailEncoder::new(16, 3, 1).unwrap()),
        };
        let fg = Image::filled(16, 16, &[0.2, 0.4, 0.6]).unwrap();
        let bg = Image::filled(16, 16, &[0.9, 0.9, 0.9]).unwrap();
        let inputs = BundleInputs {
            prompt: "a person holds a ball",
            foreground_span: (17, 21),
            interaction_region: BBox::full(),
            foreground: &fg,
            background: &bg,
            object_mask: None,
        };
        assert!(matches!(
            build_bundle(&inputs, &enc, PatchCodec { patch: 4 }, 2.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bundle_from_toy_encoders() {
        let enc = Encoders::toy(16, 8, 3, 7).unwrap();
        let fg = Image::filled(16, 16, &[0.2, 0.4, 0.6]).unwrap();
        let bg = Image::filled(16, 16, &[0.9, 0.9, 0.9]).unwrap();
        let full = Mask::ones(16, 16).unwrap();
        let inputs = BundleInputs {
            prompt: "a person holds a ball",
            foreground_span: (17, 21),
            interaction_region: BBox::new(0.0, 0.0, 0.5, 0.5).unwrap(),
            foreground: &fg,
            background: &bg,
            object_mask: Some(&full),
        };
        let b = build_bundle(&inputs, &enc, PatchCodec { patch: 4 }, 2.0).unwrap();
        assert_eq!(b.fg_token_indices, vec![4]);
        assert_eq!(b.shape_mask.as_deref(), Some(&[1.0; 16][..]));
        assert_eq!(b.region_mask.iter().sum::<f64>(), 4.0);
        assert_eq!(b.id_tokens.shape(), &[16, 16]);
        assert_eq!(b.detail_tokens.shape(), &[16, 16]);
        let again = build_bundle(&inputs, &enc, PatchCodec { patch: 4 }, 2.0).unwrap();
        assert_eq!(again.id_tokens, b.id_tokens);
        assert_eq!(again.text_tokens, b.text_tokens);
    }
}
