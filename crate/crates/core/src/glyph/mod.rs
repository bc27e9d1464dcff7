//! Synthetic typeface corpus: stroke skeletons (contents), rendering
//! parameters (styles), a rasterizer, and the known/novel dataset split.

mod dataset;

pub use dataset::{
    build_eval_sets, make_partition, sample_training_batch, training_triplet, Cell, Corpus, DatasetPartition, EvalSuites,
    RefKind, ReferenceSet, Triplet,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest renderable image side.
pub const MIN_SIZE: usize = 16;

/// Number of hand-drawn skeletons; higher ids are generated.
pub const HANDCRAFTED: usize = 40;

type Point = (f64, f64);

/// Skeletons on a 5×5 lattice. Each polyline is a run of `xy` digit pairs,
/// polylines are separated by `|`, and `y` grows downward.
const ALPHABET: [&str; HANDCRAFTED] = [
    "04 20 44|12 32",
    "00 04 44",
    "00 40|20 24",
    "00 04|00 40|02 32|04 44",
    "00 04|00 40|02 32",
    "00 04|40 44|02 42",
    "00 40|20 24|04 44",
    "00 40 04 44",
    "00 22 40|22 24",
    "00 44|40 04",
    "00 24 40",
    "04 00 44 40",
    "04 00 22 40 44",
    "00 04 44 40 00",
    "00 04 44 40",
    "40 00 02 42 44 04",
    "00 40 44 04 00|02 42",
    "20 24|02 42",
    "00 44",
    "40 04",
    "00 40|04 44",
    "00 40|02 42|04 44",
    "00 04|20 24|40 44",
    "40 00 04 44 42 22",
    "00 04|00 30 41 32 02",
    "04 00 40 44|20 22",
    "00 20 24|40 44",
    "02 20 42 24 02",
    "04 22 44|00 40",
    "00 04 44|20 23",
    "00 02 42 44",
    "00 40 42 02 04 44",
    "02 42|20 24|00 11|40 31",
    "04 20 44 04",
    "00 40 24 00",
    "00 04|02 40|02 44",
    "00 30 34 04",
    "40 00 04 44|22 42",
    "00 22 04|22 42",
    "10 14|30 34|01 41|03 43",
];

fn lattice(d: u32) -> f64 {
    0.15 + 0.175 * f64::from(d)
}

/// Stroke skeleton of one content (character).
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSpec {
    pub content_id: usize,
    pub strokes: Vec<Vec<Point>>,
}

impl GlyphSpec {
    pub fn new(content_id: usize) -> Self {
        let strokes = if content_id < HANDCRAFTED {
            parse_skeleton(ALPHABET[content_id])
        } else {
            generated_skeleton(content_id)
        };
        Self { content_id, strokes }
    }
}

fn parse_skeleton(src: &str) -> Vec<Vec<Point>> {
    src.split('|')
        .map(|line| {
            line.split_whitespace()
                .map(|p| {
                    let mut d = p.chars().map(|c| c.to_digit(10).expect("lattice digit"));
                    (lattice(d.next().expect("x")), lattice(d.next().expect("y")))
                })
                .collect()
        })
        .collect()
}

/// Two or three random lattice polylines, seeded by the id alone so every
/// corpus shares the same alphabet.
fn generated_skeleton(id: usize) -> Vec<Vec<Point>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c79_7068);
    rng.set_stream(id as u64);
    let n_lines = rng.random_range(2..=3);
    (0..n_lines)
        .map(|_| {
            let n = rng.random_range(2..=4);
            let mut pts: Vec<(u32, u32)> = Vec::with_capacity(n);
            while pts.len() < n {
                let p = (rng.random_range(0..5), rng.random_range(0..5));
                if pts.last() != Some(&p) {
                    pts.push(p);
                }
            }
            pts.into_iter().map(|(x, y)| (lattice(x), lattice(y))).collect()
        })
        .collect()
}

/// Rendering parameters of one style (typeface).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleSpec {
    pub style_id: usize,
    /// Full stroke width as a fraction of the image side.
    pub thickness: f64,
    /// Horizontal shear; positive leans the top to the right.
    pub slant: f64,
    pub scale: f64,
    /// Ink intensity at full coverage.
    pub darkness: f64,
}

impl StyleSpec {
    pub const THICKNESS: (f64, f64) = (0.03, 0.12);
    pub const SLANT: (f64, f64) = (-0.3, 0.3);
    pub const SCALE: (f64, f64) = (0.7, 1.0);
    pub const DARKNESS: (f64, f64) = (0.4, 1.0);

    /// Parameters drawn from a ChaCha stream keyed by `(seed, style_id)`.
    pub fn derive(seed: u64, style_id: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(style_id as u64);
        let mut draw = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
        Self {
            style_id,
            thickness: draw(Self::THICKNESS),
            slant: draw(Self::SLANT),
            scale: draw(Self::SCALE),
            darkness: draw(Self::DARKNESS),
        }
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (ex, ey) = (p.0 - (a.0 + t * dx), p.1 - (a.1 + t * dy));
    (ex * ex + ey * ey).sqrt()
}

/// Rasterizes `content` in `style` as a `[1, 1, size, size]` image. White
/// background is 1.0; each pixel centre gets `1 − darkness·coverage`, where
/// coverage is 1 within half the stroke width of the skeleton and falls
/// linearly to 0 over the next pixel.
pub fn render_glyph(style: &StyleSpec, content: &GlyphSpec, size: usize) -> Result<Tensor> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!("image size {size} is below {MIN_SIZE}")));
    }
    let n = size as f64;
    let place = |(x, y): Point| {
        let (sx, sy) = (0.5 + style.scale * (x - 0.5), 0.5 + style.scale * (y - 0.5));
        ((sx + style.slant * (0.5 - sy)) * n, sy * n)
    };
    let segments: Vec<(Point, Point)> = content
        .strokes
        .iter()
        .flat_map(|line| {
            let pts: Vec<Point> = line.iter().copied().map(place).collect();
            if pts.len() == 1 {
                vec![(pts[0], pts[0])]
            } else {
                pts.windows(2).map(|w| (w[0], w[1])).collect()
            }
        })
        .collect();
    let half = style.thickness * n / 2.0;
    let mut data = vec![1.0; size * size];
    for py in 0..size {
        for px in 0..size {
            let c = (px as f64 + 0.5, py as f64 + 0.5);
            let d = segments.iter().map(|(a, b)| segment_distance(c, *a, *b)).fold(f64::INFINITY, f64::min);
            let coverage = (1.0 - (d - half)).clamp(0.0, 1.0);
            data[py * size + px] = 1.0 - style.darkness * coverage;
        }
    }
    Tensor::new(vec![1, 1, size, size], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skeletons_stay_in_the_unit_square() {
        for id in 0..200 {
            let g = GlyphSpec::new(id);
            assert!(!g.strokes.is_empty());
            for p in g.strokes.iter().flatten() {
                assert!((0.0..=1.0).contains(&p.0) && (0.0..=1.0).contains(&p.1));
            }
        }
    }

    #[test]
    fn handcrafted_skeletons_render_distinctly() {
        let style = StyleSpec::derive(0, 0);
        let imgs: Vec<Tensor> = (0..HANDCRAFTED).map(|id| render_glyph(&style, &GlyphSpec::new(id), 32).unwrap()).collect();
        for a in 0..HANDCRAFTED {
            for b in a + 1..HANDCRAFTED {
                assert_ne!(imgs[a], imgs[b], "{a} vs {b}");
            }
        }
    }

    #[test]
    fn style_parameters_respect_ranges_and_are_stable() {
        for id in 0..500 {
            let s = StyleSpec::derive(9, id);
            assert!((0.03..=0.12).contains(&s.thickness));
            assert!((-0.3..=0.3).contains(&s.slant));
            assert!((0.7..=1.0).contains(&s.scale));
            assert!((0.4..=1.0).contains(&s.darkness));
            assert_eq!(s, StyleSpec::derive(9, id));
        }
        assert_ne!(StyleSpec::derive(1, 0), StyleSpec::derive(2, 0));
    }

    #[test]
    fn centerline_is_dark_and_far_pixels_are_white() {
        let style = StyleSpec {
            style_id: 0,
            thickness: 0.05,
            slant: 0.0,
            scale: 1.0,
            darkness: 1.0,
        };
        // vertical bar through x = 0.5 from the "T" stem
        let glyph = GlyphSpec::new(2);
        let img = render_glyph(&style, &glyph, 64).unwrap();
        let at = |x: usize, y: usize| img.data()[y * 64 + x];
        assert!(at(31, 32) <= 0.05 && at(32, 32) <= 0.05);
        assert_eq!(at(2, 60), 1.0);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(render_glyph(&style, &glyph, 15).is_err());
    }
}
