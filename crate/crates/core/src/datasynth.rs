//! Procedural captioned scenes: a textured background category plus one
//! colored shape, described by `a <color> <shape> in <background>`.
//!
//! Coordinates are integer pixel centres, `x` along columns and `y` along
//! rows, with images stored as `[3, 32, 32]` (channel, row, column).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::imageio::{png_read, png_write, quantize_tensor};
use crate::nn::{Vocabulary, CATEGORIES, COLORS, IMAGE_SIZE, SHAPES};
use crate::rng::{self, Rng};
use crate::{Error, Result, Tensor};

pub const MANIFEST_FILE: &str = "manifest.tsv";

macro_rules! word_enum {
    ($name:ident, $words:expr, [$($variant:ident),+]) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                $words[self as usize]
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_word(w: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.word() == w)
            }
        }
    };
}

word_enum!(Background, CATEGORIES, [Forest, Ocean, Arid, Mountain, Downtown]);
word_enum!(Shape, SHAPES, [Circle, Square, Triangle]);
word_enum!(Color, COLORS, [Red, Yellow, White]);

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }
}

pub const CENTER_RANGE: (usize, usize) = (8, 24);
pub const RADIUS_RANGE: (usize, usize) = (4, 8);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub background: Background,
    pub shape: Shape,
    pub color: Color,
    pub cx: usize,
    pub cy: usize,
    pub radius: usize,
    pub texture_seed: u64,
}

impl SceneSpec {
    /// Largest radius keeping the subject inside the frame at this centre.
    pub fn max_radius(cx: usize, cy: usize) -> usize {
        let edge = IMAGE_SIZE - 1;
        RADIUS_RANGE.1.min(edge - cx).min(edge - cy).min(cx).min(cy)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = CENTER_RANGE;
        if !(lo..=hi).contains(&self.cx) || !(lo..=hi).contains(&self.cy) {
            return Err(Error::Data(format!(
                "centre ({}, {}) outside [{lo}, {hi}]²",
                self.cx, self.cy
            )));
        }
        if self.radius < RADIUS_RANGE.0 || self.radius > Self::max_radius(self.cx, self.cy) {
            return Err(Error::Data(format!(
                "radius {} invalid at centre ({}, {})",
                self.radius, self.cx, self.cy
            )));
        }
        Ok(())
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} in {}",
            self.color.word(),
            self.shape.word(),
            self.background.word()
        )
    }

    /// Signed distance (pixels, negative inside) from `(x, y)` to the
    /// subject outline.
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx as f64, y - self.cy as f64);
        let r = self.radius as f64;
        match self.shape {
            Shape::Circle => (dx * dx + dy * dy).sqrt() - r,
            Shape::Square => dx.abs().max(dy.abs()) - r,
            Shape::Triangle => {
                // Apex at (0, -r), base corners at (±r, r).
                let s5 = 5f64.sqrt();
                let left = (-2.0 * dx - dy - r) / s5;
                let right = (2.0 * dx - dy - r) / s5;
                left.max(right).max(dy - r)
            }
        }
    }

    /// Coverage `clamp(0.5 − d, 0, 1)`: a one-pixel linear ramp across the
    /// outline.
    pub fn coverage(&self, x: usize, y: usize) -> f64 {
        (0.5 - self.signed_distance(x as f64, y as f64)).clamp(0.0, 1.0)
    }
}

/// Caption parsed back into its three content words.
pub fn parse_caption(caption: &str) -> Result<(Color, Shape, Background)> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let bad = || Error::Data(format!("caption '{caption}' does not match 'a <color> <shape> in <background>'"));
    match words.as_slice() {
        ["a", c, s, "in", b] => Ok((
            Color::from_word(c).ok_or_else(bad)?,
            Shape::from_word(s).ok_or_else(bad)?,
            Background::from_word(b).ok_or_else(bad)?,
        )),
        _ => Err(bad()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedImage {
    pub image: Tensor,
    pub tokens: Vec<usize>,
    pub spec: SceneSpec,
}

/// Smooth noise in `[0, 1]`: bilinear interpolation of a 5×5 lattice of
/// uniform values spaced 8 pixels apart.
fn value_noise(lattice: &[f64; 25], x: usize, y: usize) -> f64 {
    let (gx, gy) = (x / 8, y / 8);
    let (fx, fy) = ((x % 8) as f64 / 8.0, (y % 8) as f64 / 8.0);
    let at = |i: usize, j: usize| lattice[j * 5 + i];
    let top = at(gx, gy) * (1.0 - fx) + at(gx + 1, gy) * fx;
    let bottom = at(gx, gy + 1) * (1.0 - fx) + at(gx + 1, gy + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Per-image random parameters of the background, drawn from the texture
/// seed.
#[derive(Clone, Debug)]
struct Texture {
    lattice: [f64; 25],
    phase: f64,
    tint: f64,
    peaks: [(f64, f64); 2],
    windows: [bool; 64],
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut r = rng::stream(seed, "texture");
        let mut lattice = [0.0; 25];
        lattice.iter_mut().for_each(|v| *v = r.gen::<f64>());
        let phase = r.gen_range(0.0..std::f64::consts::TAU);
        let tint = r.gen_range(-0.05..0.05);
        let peaks = [
            (r.gen_range(4.0..28.0), r.gen_range(6.0..16.0)),
            (r.gen_range(4.0..28.0), r.gen_range(6.0..16.0)),
        ];
        let mut windows = [false; 64];
        windows.iter_mut().for_each(|w| *w = r.gen::<f64>() < 0.4);
        Self {
            lattice,
            phase,
            tint,
            peaks,
            windows,
        }
    }
}

/// Background colour at pixel `(x, y)`:
///
/// - forest: `(0.13, 0.45, 0.15) · (0.7 + 0.6·n)` with `n` the value noise;
/// - ocean: vertical blend from `(0.10, 0.35, 0.70)` to `(0.02, 0.12, 0.35)`
///   plus `0.04·sin(0.8·y + phase)` on every channel;
/// - arid: flat `(0.85, 0.70, 0.45)` shifted by a tint in `[-0.05, 0.05)`;
/// - mountain: grey `(0.45, 0.42, 0.40)` below the ridge formed by two
///   slope-1 peaks, sky `(0.60, 0.75, 0.90)` above;
/// - downtown: 4-pixel grid lines `(0.15, 0.15, 0.18)` over wall
///   `(0.30, 0.30, 0.35)` with some cells lit as windows `(0.55, 0.60, 0.70)`.
fn background_pixel(bg: Background, tex: &Texture, x: usize, y: usize) -> [f64; 3] {
    match bg {
        Background::Forest => {
            let k = 0.7 + 0.6 * value_noise(&tex.lattice, x, y);
            [0.13 * k, 0.45 * k, 0.15 * k]
        }
        Background::Ocean => {
            let f = y as f64 / (IMAGE_SIZE - 1) as f64;
            let wave = 0.04 * (0.8 * y as f64 + tex.phase).sin();
            let top = [0.10, 0.35, 0.70];
            let bottom = [0.02, 0.12, 0.35];
            std::array::from_fn(|c| top[c] * (1.0 - f) + bottom[c] * f + wave)
        }
        Background::Arid => [0.85 + tex.tint, 0.70 + tex.tint, 0.45 + tex.tint],
        Background::Mountain => {
            let ridge = tex
                .peaks
                .iter()
                .map(|&(px, py)| py + (x as f64 - px).abs())
                .fold(f64::INFINITY, f64::min);
            if y as f64 >= ridge {
                [0.45, 0.42, 0.40]
            } else {
                [0.60, 0.75, 0.90]
            }
        }
        Background::Downtown => {
            if x % 4 == 0 || y % 4 == 0 {
                [0.15, 0.15, 0.18]
            } else if tex.windows[(y / 4) * 8 + x / 4] {
                [0.55, 0.60, 0.70]
            } else {
                [0.30, 0.30, 0.35]
            }
        }
    }
}

/// Background only, without the subject.
pub fn render_background(spec: &SceneSpec) -> Tensor {
    let tex = Texture::new(spec.texture_seed);
    let n = IMAGE_SIZE;
    let mut img = Tensor::zeros(&[3, n, n]);
    let d = img.data_mut();
    for y in 0..n {
        for x in 0..n {
            let px = background_pixel(spec.background, &tex, x, y);
            for c in 0..3 {
                d[(c * n + y) * n + x] = px[c].clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Deterministic rendering of `spec`; the subject is alpha-blended over the
/// background with its coverage.
pub fn render(spec: &SceneSpec) -> Result<CaptionedImage> {
    spec.validate()?;
    let mut img = render_background(spec);
    let n = IMAGE_SIZE;
    let rgb = spec.color.rgb();
    let d = img.data_mut();
    for y in 0..n {
        for x in 0..n {
            let a = spec.coverage(x, y);
            if a > 0.0 {
                for c in 0..3 {
                    let i = (c * n + y) * n + x;
                    d[i] = a * rgb[c] + (1.0 - a) * d[i];
                }
            }
        }
    }
    let tokens = Vocabulary::standard().tokenize(&spec.caption())?;
    Ok(CaptionedImage {
        image: img,
        tokens,
        spec: *spec,
    })
}

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.gen_range(0..items.len())]
}

/// Uniform over the enumerations; the radius is uniform over the values
/// that keep the subject in frame.
pub fn sample_spec(rng: &mut Rng) -> SceneSpec {
    let background = pick(rng, Background::ALL);
    let shape = pick(rng, Shape::ALL);
    let color = pick(rng, Color::ALL);
    let cx = rng.gen_range(CENTER_RANGE.0..=CENTER_RANGE.1);
    let cy = rng.gen_range(CENTER_RANGE.0..=CENTER_RANGE.1);
    let radius = rng.gen_range(RADIUS_RANGE.0..=SceneSpec::max_radius(cx, cy));
    SceneSpec {
        background,
        shape,
        color,
        cx,
        cy,
        radius,
        texture_seed: rng.gen(),
    }
}

/// One dataset entry after 8-bit quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub file: String,
    pub image: Tensor,
    pub caption: String,
    pub category: Background,
}

/// Renders `n` scenes with backgrounds cycling through the categories, so
/// every category receives `⌊n/5⌋` or `⌊n/5⌋ + 1` images. Images are
/// quantized exactly as a PNG round trip would leave them.
pub fn synthesize(n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Data("dataset size must be at least 1".into()));
    }
    let mut r = rng::stream(seed, "data");
    (0..n)
        .map(|i| {
            let spec = SceneSpec {
                background: Background::ALL[i % Background::ALL.len()],
                ..sample_spec(&mut r)
            };
            let ci = render(&spec)?;
            Ok(Sample {
                file: format!("img_{i:05}.png"),
                image: quantize_tensor(&ci.image),
                caption: spec.caption(),
                category: spec.background,
            })
        })
        .collect()
}

pub fn manifest_text(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        let _ = writeln!(out, "{}\t{}\t{}", s.file, s.caption, s.category.word());
    }
    out
}

/// Writes the PNGs and `manifest.tsv` into `out_dir` and returns the
/// manifest text.
pub fn make_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<String> {
    let samples = synthesize(n, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for s in &samples {
        png_write(&out_dir.join(&s.file), &s.image)?;
    }
    let text = manifest_text(&samples);
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok(text)
}

/// Reads a directory written by [`make_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            let [file, caption, category] = fields.as_slice() else {
                return Err(Error::Data(format!(
                    "{}:{}: expected 3 tab-separated fields",
                    path.display(),
                    i + 1
                )));
            };
            let (_, _, bg) = parse_caption(caption)?;
            if bg.word() != *category {
                return Err(Error::Data(format!(
                    "{}:{}: category '{category}' disagrees with caption",
                    path.display(),
                    i + 1
                )));
            }
            Ok(Sample {
                file: file.to_string(),
                image: png_read(&dir.join(file))?,
                caption: caption.to_string(),
                category: bg,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: Shape, background: Background) -> SceneSpec {
        SceneSpec {
            background,
            shape,
            color: Color::Red,
            cx: 16,
            cy: 16,
            radius: 6,
            texture_seed: 9,
        }
    }

    #[test]
    fn render_is_deterministic() {
        let s = spec(Shape::Triangle, Background::Forest);
        assert_eq!(render(&s).unwrap(), render(&s).unwrap());
    }

    #[test]
    fn centre_is_subject_colour_and_corner_is_background() {
        let s = spec(Shape::Circle, Background::Arid);
        let img = render(&s).unwrap().image;
        for (c, want) in [1.0, 0.0, 0.0].into_iter().enumerate() {
            assert!((img.at(&[c, 16, 16]) - want).abs() <= 0.1);
        }
        // Flat sand plus the seed's tint, identical on all channels.
        let tint = img.at(&[0, 1, 1]) - 0.85;
        assert!(tint.abs() <= 0.05);
        assert!((img.at(&[1, 1, 1]) - (0.70 + tint)).abs() < 1e-12);
        assert!((img.at(&[2, 1, 1]) - (0.45 + tint)).abs() < 1e-12);

        let s = spec(Shape::Circle, Background::Ocean);
        let img = render(&s).unwrap().image;
        let f = 1.0 / 31.0;
        let base = 0.35 * (1.0 - f) + 0.12 * f;
        let wave = img.at(&[1, 1, 1]) - base;
        assert!(wave.abs() <= 0.04 + 1e-12);
        assert!((img.at(&[2, 1, 1]) - (0.70 * (1.0 - f) + 0.35 * f + wave)).abs() < 1e-12);
    }

    #[test]
    fn circle_area_matches_disc() {
        for r in 4..=8 {
            let s = SceneSpec { radius: r, ..spec(Shape::Circle, Background::Forest) };
            let count = (0..32)
                .flat_map(|y| (0..32).map(move |x| (x, y)))
                .filter(|&(x, y)| s.coverage(x, y) >= 0.5)
                .count() as f64;
            let area = std::f64::consts::PI * (r * r) as f64;
            assert!((count - area).abs() / area < 0.15, "r={r}: {count} vs {area}");
        }
    }

    #[test]
    fn subject_stays_in_frame() {
        let mut r = rng::stream(3, "test");
        for _ in 0..500 {
            let s = sample_spec(&mut r);
            s.validate().unwrap();
            let r = s.radius;
            assert!(s.cx >= r && s.cx + r <= 31 && s.cy >= r && s.cy + r <= 31);
        }
    }

    #[test]
    fn captions_round_trip() {
        for s in synthesize(30, 4).unwrap() {
            let (c, sh, bg) = parse_caption(&s.caption).unwrap();
            assert_eq!(bg, s.category);
            let toks = Vocabulary::standard().tokenize(&s.caption).unwrap();
            assert_eq!(Vocabulary::standard().detokenize(&toks), s.caption);
            assert_eq!(format!("a {} {} in {}", c.word(), sh.word(), bg.word()), s.caption);
        }
        assert!(parse_caption("a red blob in forest").is_err());
    }

    #[test]
    fn dataset_is_stratified_and_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = make_dataset(12, 5, d1.path()).unwrap();
        let m2 = make_dataset(12, 5, d2.path()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(fs::read(d1.path().join(MANIFEST_FILE)).unwrap(), m1.as_bytes());
        for bg in Background::ALL {
            let count = m1.lines().filter(|l| l.ends_with(bg.word())).count();
            assert!(count == 2 || count == 3);
        }
        let loaded = load_dataset(d1.path()).unwrap();
        assert_eq!(loaded, synthesize(12, 5).unwrap());
    }

    #[test]
    fn unwritable_directory_rejected() {
        let d = tempfile::tempdir().unwrap();
        let file = d.path().join("plain");
        fs::write(&file, b"x").unwrap();
        assert!(make_dataset(2, 0, &file.join("sub")).is_err());
    }
}
