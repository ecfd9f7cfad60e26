//! Synthetic 32x32 concept corpus.
//!
//! Images are procedural: a content glyph rendered under a medium and an
//! optional concept transform. Style concepts (artists) change palette and
//! texture globally; character concepts add a distinctive companion mark.
//! All randomness is jitter drawn from a derived RNG, and every pixel is
//! quantized to the u8 grid, so the in-memory corpus and its PNG round-trip
//! are bit-identical.

use ndarray::{Array3, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use atelier_engine::Real;

use crate::error::{CoreError, Result};
use crate::util::derive_rng;
use crate::vocab::{Medium, ParsedPrompt, Vocabulary};

pub const IMG: usize = 32;

/// One labeled corpus image. `image` is `[3, 32, 32]` in `[-1, 1]`,
/// already quantized to the u8 grid.
#[derive(Debug, Clone)]
pub struct DataItem {
    pub image: Array3<f32>,
    /// Canonical prompt text.
    pub prompt: String,
    pub parsed: ParsedPrompt,
}

impl DataItem {
    /// Class label for feature-embedder training: the concept name, or the
    /// medium for concept-free prompts.
    pub fn class_label(&self) -> String {
        match &self.parsed.concept {
            Some(c) => c.clone(),
            None => match self.parsed.medium {
                Medium::Painting => "painting".to_string(),
                Medium::Cartoon => "cartoon".to_string(),
            },
        }
    }
}

/// A labeled image set.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub items: Vec<DataItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items whose prompt names the given concept.
    pub fn filter_concept(&self, concept: &str) -> Dataset {
        Dataset {
            items: self
                .items
                .iter()
                .filter(|it| it.parsed.concept.as_deref() == Some(concept))
                .cloned()
                .collect(),
        }
    }

    /// Distinct class labels in a stable order.
    pub fn class_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.items.iter().map(|it| it.class_label()).collect();
        labels.sort();
        labels.dedup();
        labels
    }
}

/// Stacks images into a batch tensor `[n, 3, 32, 32]` of the requested
/// precision.
pub fn images_to_batch<T: Real>(images: &[Array3<f32>]) -> ArrayD<T> {
    let n = images.len();
    let (c, h, w) = images.first().map(|im| im.dim()).unwrap_or((3, IMG, IMG));
    let mut out = ArrayD::<T>::zeros(ndarray::IxDyn(&[n, c, h, w]));
    for (i, img) in images.iter().enumerate() {
        let mut dst = out.index_axis_mut(ndarray::Axis(0), i);
        ndarray::Zip::from(&mut dst)
            .and(img.view().into_dyn())
            .for_each(|d, &s| *d = T::from_f64(s as f64));
    }
    out
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

struct Jitter {
    scale: f32,
    rot: f32,
    dx: f32,
    dy: f32,
    bg_jit: [f32; 3],
    fg_jit: [f32; 3],
    noise_seed: u64,
}

fn draw_jitter(rng: &mut ChaCha8Rng) -> Jitter {
    let mut j3 = |amp: f32| {
        [
            rng.random_range(-amp..amp),
            rng.random_range(-amp..amp),
            rng.random_range(-amp..amp),
        ]
    };
    let bg_jit = j3(0.04);
    let fg_jit = j3(0.04);
    Jitter {
        scale: rng.random_range(0.85..1.15),
        rot: rng.random_range(-0.26..0.26),
        dx: rng.random_range(-0.12..0.12),
        dy: rng.random_range(-0.12..0.12),
        bg_jit,
        fg_jit,
        noise_seed: rng.random(),
    }
}

/// Glyph predicate in canonical coordinates (u, v in [-1, 1], v up).
fn glyph_mask(content: &str, p: f32, q: f32) -> bool {
    let r2 = p * p + q * q;
    let r = r2.sqrt();
    match content {
        "circle" => r < 0.55,
        "square" => p.abs().max(q.abs()) < 0.48,
        "triangle" => q > -0.45 && q < 0.55 - 1.6 * p.abs(),
        "star" => {
            let phi = q.atan2(p);
            r < 0.28 + 0.34 * (0.5 + 0.5 * (5.0 * phi).cos())
        }
        "cross" => (p.abs() < 0.17 && q.abs() < 0.6) || (q.abs() < 0.17 && p.abs() < 0.6),
        "ring" => r > 0.32 && r < 0.56,
        "arrow" => {
            let shaft = q.abs() < 0.13 && (-0.6..0.15).contains(&p);
            let head = p >= 0.05 && p < 0.6 && q.abs() < (0.6 - p) * 0.75;
            shaft || head
        }
        "diamond" => p.abs() + q.abs() < 0.6,
        "crescent" => {
            let inner = (p - 0.22) * (p - 0.22) + q * q;
            r < 0.55 && inner > 0.42 * 0.42
        }
        "bolt" => {
            let upper = (0.0..0.6).contains(&q) && (p + 0.35 * (q - 0.3)).abs() < 0.16;
            let lower = (-0.6..0.0).contains(&q) && (p - 0.35 * (q + 0.3) - 0.12).abs() < 0.16;
            upper || lower
        }
        "hexagon" => {
            let a = p.abs();
            let b = (0.5 * p + 0.866 * q).abs();
            let c = (0.5 * p - 0.866 * q).abs();
            a.max(b).max(c) < 0.5
        }
        "spiral" => {
            let phi = q.atan2(p);
            let band = (r * 7.0 - phi / std::f32::consts::PI) % 2.0;
            r < 0.62 && (0.0..0.95).contains(&band)
        }
        "wave" => p.abs() < 0.72 && (q - 0.3 * (4.5 * p).sin()).abs() < 0.16,
        "ladder" => {
            let rail = ((p.abs() - 0.3).abs() < 0.08) && q.abs() < 0.6;
            let rung = p.abs() < 0.3
                && ((q - 0.36).abs() < 0.07 || q.abs() < 0.07 || (q + 0.36).abs() < 0.07);
            rail || rung
        }
        "anchor" => {
            let top = {
                let rr = p * p + (q - 0.38) * (q - 0.38);
                rr > 0.08 * 0.08 && rr < 0.2 * 0.2
            };
            let shaft = p.abs() < 0.08 && (-0.5..0.3).contains(&q);
            let arms = (q + 0.42).abs() < 0.09 && p.abs() < 0.42;
            top || shaft || arms
        }
        "comet" => {
            let head = (p + 0.25) * (p + 0.25) + (q - 0.25) * (q - 0.25) < 0.28 * 0.28;
            let t = (p + 0.1) / 0.7;
            let tail =
                (0.0..1.0).contains(&t) && (q - (0.18 - 0.55 * t)).abs() < 0.2 * (1.0 - t) + 0.02;
            head || tail
        }
        "gate" => {
            let post = (p.abs() - 0.4).abs() < 0.1 && q < 0.45 && q > -0.55;
            let lintel = (0.42..0.6).contains(&q) && p.abs() < 0.52;
            post || lintel
        }
        "fork" => {
            let handle = p.abs() < 0.08 && (-0.62..0.05).contains(&q);
            let tine = (0.0..0.58).contains(&q)
                && (p.abs() < 0.06 || (p.abs() - 0.24).abs() < 0.06);
            handle || tine
        }
        "shell" => {
            let band = (r * 8.0) % 2.0;
            q > -0.1 && r < 0.6 && band < 1.15
        }
        "knot" => {
            let a = (p + 0.18) * (p + 0.18) + q * q;
            let b = (p - 0.18) * (p - 0.18) + q * q;
            let ring_a = a > 0.2 * 0.2 && a < 0.38 * 0.38;
            let ring_b = b > 0.2 * 0.2 && b < 0.38 * 0.38;
            ring_a || ring_b
        }
        _ => r < 0.4, // unreachable for validated prompts
    }
}

struct Palette {
    bg: [f32; 3],
    fg: [f32; 3],
}

fn style_palette(concept: Option<&str>, medium: Medium) -> Palette {
    match concept {
        Some("umbra") => Palette { bg: [0.08, 0.03, 0.06], fg: [0.95, 0.45, 0.10] },
        Some("viridian") => Palette { bg: [0.88, 0.97, 0.90], fg: [0.05, 0.45, 0.20] },
        Some("coralline") => Palette { bg: [0.06, 0.10, 0.35], fg: [0.98, 0.60, 0.42] },
        // Characters keep the plain cartoon palette; the mark carries the concept.
        _ => match medium {
            Medium::Painting => Palette { bg: [0.82, 0.80, 0.78], fg: [0.22, 0.24, 0.30] },
            Medium::Cartoon => Palette { bg: [0.92, 0.92, 0.94], fg: [0.10, 0.10, 0.12] },
        },
    }
}

/// Style-specific multiplicative texture at pixel (x, y).
fn texture(concept: Option<&str>, x: usize, y: usize, u: f32, v: f32) -> f32 {
    match concept {
        Some("umbra") => 1.0 + 0.18 * ((y as f32) * std::f32::consts::PI / 2.0).sin(),
        Some("viridian") => {
            if (x / 2 + y / 2) % 2 == 0 {
                1.1
            } else {
                0.9
            }
        }
        Some("coralline") => {
            let r = (u * u + v * v).sqrt();
            1.0 + 0.15 * (r * 11.0).cos()
        }
        _ => 1.0,
    }
}

/// Companion mark predicate and color for character concepts.
fn character_mark(concept: &str, u: f32, v: f32) -> Option<[f32; 3]> {
    match concept {
        "blimp" => {
            // Sky-blue ellipse with a tail fin, upper-right corner.
            let eu = (u - 0.52) / 0.34;
            let ev = (v - 0.55) / 0.16;
            let body = eu * eu + ev * ev < 1.0;
            let fin = (u - 0.2).abs() < 0.09 && (v - 0.55).abs() < 0.22;
            if body || fin {
                Some([0.30, 0.62, 0.95])
            } else {
                None
            }
        }
        "quill" => {
            // Violet diagonal feather, lower-left corner.
            let along = (u + 0.55) + (v + 0.55); // grows along the diagonal
            let across = (u + 0.55) - (v + 0.55);
            let shaft = (0.0..0.9).contains(&along) && across.abs() < 0.08;
            let barbs = (0.15..0.75).contains(&along)
                && across.abs() < 0.3
                && ((along * 12.0) % 2.0) < 0.9;
            if shaft || barbs {
                Some([0.55, 0.25, 0.78])
            } else {
                None
            }
        }
        _ => None,
    }
}

fn smallrand(seed: u64, x: usize, y: usize, c: usize) -> f32 {
    // Cheap deterministic hash noise in [-1, 1).
    let mut h = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((x as u64) << 32 ^ (y as u64) << 8 ^ c as u64);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    ((h >> 11) as f32 / (1u64 << 53) as f32).mul_add(2.0, -1.0)
}

/// Renders one sample for a parsed prompt. Output is `[3, 32, 32]` in
/// `[-1, 1]`, quantized to the u8 grid.
pub fn render_sample(parsed: &ParsedPrompt, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let jit = draw_jitter(rng);
    let style_concept = match (parsed.medium, &parsed.concept) {
        (Medium::Painting, Some(c)) => Some(c.as_str()),
        _ => None,
    };
    let pal = style_palette(style_concept, parsed.medium);
    let bg = [
        (pal.bg[0] + jit.bg_jit[0]).clamp(0.0, 1.0),
        (pal.bg[1] + jit.bg_jit[1]).clamp(0.0, 1.0),
        (pal.bg[2] + jit.bg_jit[2]).clamp(0.0, 1.0),
    ];
    let fg = [
        (pal.fg[0] + jit.fg_jit[0]).clamp(0.0, 1.0),
        (pal.fg[1] + jit.fg_jit[1]).clamp(0.0, 1.0),
        (pal.fg[2] + jit.fg_jit[2]).clamp(0.0, 1.0),
    ];
    let (sin_r, cos_r) = jit.rot.sin_cos();
    let mark_concept = match (parsed.medium, &parsed.concept) {
        (Medium::Cartoon, Some(c)) => Some(c.as_str()),
        _ => None,
    };

    let mut out = Array3::<f32>::zeros((3, IMG, IMG));
    for y in 0..IMG {
        for x in 0..IMG {
            // Pixel center in [-1, 1], v pointing up.
            let u = (x as f32 + 0.5) / IMG as f32 * 2.0 - 1.0;
            let v = 1.0 - (y as f32 + 0.5) / IMG as f32 * 2.0;
            // Into glyph coordinates.
            let gu = (u - jit.dx) / jit.scale;
            let gv = (v - jit.dy) / jit.scale;
            let p = gu * cos_r + gv * sin_r;
            let q = -gu * sin_r + gv * cos_r;
            let inside = glyph_mask(&parsed.content, p, q);
            let drawn = match parsed.medium {
                Medium::Painting => inside,
                // Cartoons draw outlines: inside but near the boundary.
                Medium::Cartoon => {
                    inside && {
                        let e = 2.2 / (IMG as f32 * jit.scale);
                        !(glyph_mask(&parsed.content, p + e, q)
                            && glyph_mask(&parsed.content, p - e, q)
                            && glyph_mask(&parsed.content, p, q + e)
                            && glyph_mask(&parsed.content, p, q - e))
                    }
                }
            };
            let tex = texture(style_concept, x, y, u, v);
            let mut rgb = if drawn { fg } else { bg };
            if let Some(c) = mark_concept {
                if let Some(mark) = character_mark(c, u, v) {
                    rgb = mark;
                }
            }
            for ch in 0..3 {
                let noise = 0.015 * smallrand(jit.noise_seed, x, y, ch);
                let val = (rgb[ch] * tex + noise).clamp(0.0, 1.0);
                let q8 = (val * 255.0).round() as u8;
                out[(ch, y, x)] = q8 as f32 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Corpus assembly and I/O
// ---------------------------------------------------------------------------

/// Generates `count` samples per prompt. Determinism: sample `j` of prompt
/// `p` depends only on `(seed, p, j)`, not on request order.
pub fn gen_dataset(vocab: &Vocabulary, requests: &[(String, usize)], seed: u64) -> Result<Dataset> {
    let mut items = Vec::new();
    for (text, count) in requests {
        let prompt = vocab.encode(text)?;
        let parsed = vocab.parse(&prompt.text)?;
        for j in 0..*count {
            let mut rng = derive_rng(seed, &format!("data:{}", prompt.text), j as u64);
            let image = render_sample(&parsed, &mut rng);
            items.push(DataItem { image, prompt: prompt.text.clone(), parsed: parsed.clone() });
        }
    }
    Ok(Dataset { items })
}

/// The standard training corpus request list: every concept's target prompt
/// plus concept-free prompts, over the training contents.
pub fn default_train_requests(per_prompt: usize) -> Vec<(String, usize)> {
    let mut reqs = Vec::new();
    for content in crate::vocab::TRAIN_CONTENTS {
        for artist in crate::vocab::ARTISTS {
            reqs.push((format!("painting of {content} by {artist}"), per_prompt));
        }
        reqs.push((format!("painting of {content}"), per_prompt));
        for character in crate::vocab::CHARACTERS {
            reqs.push((format!("cartoon of {content} with {character}"), per_prompt));
        }
        reqs.push((format!("cartoon of {content}"), per_prompt));
    }
    reqs
}

/// Evaluation corpus: same prompt shapes over the held-out contents.
pub fn default_eval_requests(per_prompt: usize) -> Vec<(String, usize)> {
    let mut reqs = Vec::new();
    for content in crate::vocab::EVAL_CONTENTS {
        for artist in crate::vocab::ARTISTS {
            reqs.push((format!("painting of {content} by {artist}"), per_prompt));
        }
        reqs.push((format!("painting of {content}"), per_prompt));
        for character in crate::vocab::CHARACTERS {
            reqs.push((format!("cartoon of {content} with {character}"), per_prompt));
        }
        reqs.push((format!("cartoon of {content}"), per_prompt));
    }
    reqs
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    prompt: String,
}

fn f32_to_u8(v: f32) -> u8 {
    (((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// Encodes an image to PNG bytes (lossless; the corpus lives on the u8 grid).
pub fn image_to_png_bytes(img: &Array3<f32>) -> Result<Vec<u8>> {
    let mut buf = image::RgbImage::new(IMG as u32, IMG as u32);
    for y in 0..IMG {
        for x in 0..IMG {
            let px = image::Rgb([
                f32_to_u8(img[(0, y, x)]),
                f32_to_u8(img[(1, y, x)]),
                f32_to_u8(img[(2, y, x)]),
            ]);
            buf.put_pixel(x as u32, y as u32, px);
        }
    }
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

pub fn png_bytes_to_image(bytes: &[u8]) -> Result<Array3<f32>> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    if img.width() as usize != IMG || img.height() as usize != IMG {
        return Err(CoreError::ShapeMismatch {
            context: "png image".into(),
            expected: format!("{IMG}x{IMG}"),
            actual: format!("{}x{}", img.width(), img.height()),
        });
    }
    let mut out = Array3::<f32>::zeros((3, IMG, IMG));
    for y in 0..IMG {
        for x in 0..IMG {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                out[(ch, y, x)] = px[ch] as f32 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Ok(out)
}

/// Writes `images/NNNNN.png` plus `index.json` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut index = Vec::with_capacity(ds.items.len());
    for (i, item) in ds.items.iter().enumerate() {
        let file = format!("images/{i:05}.png");
        std::fs::write(dir.join(&file), image_to_png_bytes(&item.image)?)?;
        index.push(IndexEntry { file, prompt: item.prompt.clone() });
    }
    let json = serde_json::to_string_pretty(&index)?;
    std::fs::write(dir.join("index.json"), json)?;
    Ok(())
}

/// Loads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path, vocab: &Vocabulary) -> Result<Dataset> {
    let raw = std::fs::read_to_string(dir.join("index.json"))?;
    let index: Vec<IndexEntry> = serde_json::from_str(&raw)?;
    let mut items = Vec::with_capacity(index.len());
    for entry in index {
        let bytes = std::fs::read(dir.join(&entry.file))?;
        let image = png_bytes_to_image(&bytes)?;
        let prompt = vocab.encode(&entry.prompt)?;
        let parsed = vocab.parse(&prompt.text)?;
        items.push(DataItem { image, prompt: prompt.text, parsed });
    }
    Ok(Dataset { items })
}
