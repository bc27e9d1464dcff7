use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{render_glyph, GlyphSpec, StyleSpec, MIN_SIZE};
use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::Tensor;

const MANIFEST: &str = "manifest.txt";
const MANIFEST_MAGIC: &str = "emd-corpus 1";

// Stream offsets keep the independent random draws of one seed apart.
const STREAM_STYLES: u64 = 1 << 60;
const STREAM_CONTENTS: u64 = (1 << 60) + 1;
const STREAM_EVAL: u64 = 1 << 61;

/// One of the four known/novel crossings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cell {
    /// Known style, known content: the training cell.
    D1,
    /// Known style, novel content.
    D2,
    /// Novel style, known content.
    D3,
    /// Novel style, novel content.
    D4,
}

impl Cell {
    pub const ALL: [Cell; 4] = [Cell::D1, Cell::D2, Cell::D3, Cell::D4];

    pub fn name(self) -> &'static str {
        match self {
            Cell::D1 => "D1",
            Cell::D2 => "D2",
            Cell::D3 => "D3",
            Cell::D4 => "D4",
        }
    }
}

/// Style and content ids split into known (trainable) and novel sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetPartition {
    pub known_styles: Vec<usize>,
    pub novel_styles: Vec<usize>,
    pub known_contents: Vec<usize>,
    pub novel_contents: Vec<usize>,
}

fn split(n: usize, seed: u64, stream: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    let mut novel = ids[..n / 4].to_vec();
    let mut known = ids[n / 4..].to_vec();
    novel.sort_unstable();
    known.sort_unstable();
    (known, novel)
}

/// Shuffles each id range with `seed` and puts the first quarter (rounded
/// down) on the novel side.
pub fn make_partition(n_styles: usize, n_contents: usize, seed: u64) -> Result<DatasetPartition> {
    if n_styles < 4 || n_contents < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 styles and 4 contents, got {n_styles} and {n_contents}"
        )));
    }
    let (known_styles, novel_styles) = split(n_styles, seed, STREAM_STYLES);
    let (known_contents, novel_contents) = split(n_contents, seed, STREAM_CONTENTS);
    Ok(DatasetPartition {
        known_styles,
        novel_styles,
        known_contents,
        novel_contents,
    })
}

impl DatasetPartition {
    pub fn n_styles(&self) -> usize {
        self.known_styles.len() + self.novel_styles.len()
    }

    pub fn n_contents(&self) -> usize {
        self.known_contents.len() + self.novel_contents.len()
    }

    pub fn cell(&self, style: usize, content: usize) -> Cell {
        let ks = self.known_styles.binary_search(&style).is_ok();
        let kc = self.known_contents.binary_search(&content).is_ok();
        match (ks, kc) {
            (true, true) => Cell::D1,
            (true, false) => Cell::D2,
            (false, true) => Cell::D3,
            (false, false) => Cell::D4,
        }
    }

    /// Every `(style, content)` pair in `cell`, style-major.
    pub fn members(&self, cell: Cell) -> Vec<(usize, usize)> {
        let (s, c) = match cell {
            Cell::D1 => (&self.known_styles, &self.known_contents),
            Cell::D2 => (&self.known_styles, &self.novel_contents),
            Cell::D3 => (&self.novel_styles, &self.known_contents),
            Cell::D4 => (&self.novel_styles, &self.novel_contents),
        };
        s.iter().flat_map(|&a| c.iter().map(move |&b| (a, b))).collect()
    }

    /// Checks that each axis is split into disjoint, exhaustive, sorted sets.
    pub fn validate(&self) -> Result<()> {
        for (what, known, novel) in [
            ("styles", &self.known_styles, &self.novel_styles),
            ("contents", &self.known_contents, &self.novel_contents),
        ] {
            let all: BTreeSet<usize> = known.iter().chain(novel).copied().collect();
            let n = known.len() + novel.len();
            if all.len() != n || all.iter().next_back().is_some_and(|m| *m + 1 != n) {
                return Err(Error::Data(format!("{what} split is not a partition of 0..{n}")));
            }
            if !known.windows(2).all(|w| w[0] < w[1]) || !novel.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Data(format!("{what} split lists must be sorted")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefKind {
    /// Images sharing the anchor style, one per counterpart content.
    Style,
    /// Images sharing the anchor content, one per counterpart style.
    Content,
}

/// `r` images sharing one factor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferenceSet {
    pub kind: RefKind,
    pub anchor: usize,
    /// Distinct ids of the other factor, in sampling order.
    pub counterparts: Vec<usize>,
}

impl ReferenceSet {
    /// `(style, content)` ids of the member images.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.counterparts
            .iter()
            .map(|&c| match self.kind {
                RefKind::Style => (self.anchor, c),
                RefKind::Content => (c, self.anchor),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.counterparts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counterparts.is_empty()
    }
}

/// A target image with its style and content reference sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub style: usize,
    pub content: usize,
    pub style_refs: ReferenceSet,
    pub content_refs: ReferenceSet,
}

fn pick(pool: &[usize], r: usize, rng: &mut ChaCha8Rng, what: &str) -> Result<Vec<usize>> {
    if r == 0 || r > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "r = {r} but only {} {what} are available for reference sets",
            pool.len()
        )));
    }
    Ok(index::sample(rng, pool.len(), r).into_iter().map(|i| pool[i]).collect())
}

/// Training triplet number `k`: target drawn from the known×known cell,
/// references drawn from known ids without replacement. The target's own
/// image may appear among its references.
pub fn training_triplet(p: &DatasetPartition, r: usize, seed: u64, k: usize) -> Result<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    if p.known_styles.is_empty() || p.known_contents.is_empty() {
        return Err(Error::InvalidArgument("partition has no known cell".into()));
    }
    let style = p.known_styles[rng.random_range(0..p.known_styles.len())];
    let content = p.known_contents[rng.random_range(0..p.known_contents.len())];
    let sc = pick(&p.known_contents, r, &mut rng, "known contents")?;
    let cs = pick(&p.known_styles, r, &mut rng, "known styles")?;
    Ok(Triplet {
        style,
        content,
        style_refs: ReferenceSet {
            kind: RefKind::Style,
            anchor: style,
            counterparts: sc,
        },
        content_refs: ReferenceSet {
            kind: RefKind::Content,
            anchor: content,
            counterparts: cs,
        },
    })
}

/// The mini-batch for optimizer step `step`: triplets `step·batch ..
/// (step+1)·batch`, wrapping modulo `n_t`.
pub fn sample_training_batch(
    p: &DatasetPartition,
    n_t: usize,
    r: usize,
    batch: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<Triplet>> {
    if n_t == 0 || batch == 0 {
        return Err(Error::InvalidArgument("n_t and batch size must be positive".into()));
    }
    (0..batch)
        .map(|i| {
            let k = ((step as u128 * batch as u128 + i as u128) % n_t as u128) as usize;
            training_triplet(p, r, seed, k)
        })
        .collect()
}

/// Evaluation triplets for the four cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSuites {
    pub sets: [Vec<Triplet>; 4],
}

impl EvalSuites {
    pub fn get(&self, cell: Cell) -> &[Triplet] {
        &self.sets[cell as usize]
    }
}

/// Up to `per_set` targets per cell, chosen by a seeded shuffle. D1 uses
/// the training reference rule. Elsewhere references come from every id of
/// the other factor except the target's own, so the target image is never
/// among them.
pub fn build_eval_sets(p: &DatasetPartition, r: usize, seed: u64, per_set: usize) -> Result<EvalSuites> {
    let all_styles: Vec<usize> = (0..p.n_styles()).collect();
    let all_contents: Vec<usize> = (0..p.n_contents()).collect();
    let mut sets: [Vec<Triplet>; 4] = Default::default();
    for cell in Cell::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_EVAL + cell as u64);
        let mut members = p.members(cell);
        members.shuffle(&mut rng);
        members.truncate(per_set);
        for (style, content) in members {
            let (sc, cs) = if cell == Cell::D1 {
                (
                    pick(&p.known_contents, r, &mut rng, "known contents")?,
                    pick(&p.known_styles, r, &mut rng, "known styles")?,
                )
            } else {
                let other_c: Vec<usize> = all_contents.iter().copied().filter(|c| *c != content).collect();
                let other_s: Vec<usize> = all_styles.iter().copied().filter(|s| *s != style).collect();
                (
                    pick(&other_c, r, &mut rng, "other contents")?,
                    pick(&other_s, r, &mut rng, "other styles")?,
                )
            };
            sets[cell as usize].push(Triplet {
                style,
                content,
                style_refs: ReferenceSet {
                    kind: RefKind::Style,
                    anchor: style,
                    counterparts: sc,
                },
                content_refs: ReferenceSet {
                    kind: RefKind::Content,
                    anchor: content,
                    counterparts: cs,
                },
            });
        }
    }
    Ok(EvalSuites { sets })
}

/// Every style × content image, quantized to bytes as in the exported PGM
/// files, plus the partition derived from the same seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub size: usize,
    pub n_styles: usize,
    pub n_contents: usize,
    pub partition: DatasetPartition,
    pub styles: Vec<StyleSpec>,
    pixels: Vec<u8>,
}

impl Corpus {
    pub fn render(n_styles: usize, n_contents: usize, size: usize, seed: u64) -> Result<Self> {
        if size < MIN_SIZE {
            return Err(Error::InvalidArgument(format!("image size {size} is below {MIN_SIZE}")));
        }
        let partition = make_partition(n_styles, n_contents, seed)?;
        let styles: Vec<StyleSpec> = (0..n_styles).map(|i| StyleSpec::derive(seed, i)).collect();
        let glyphs: Vec<GlyphSpec> = (0..n_contents).map(GlyphSpec::new).collect();
        let mut pixels = Vec::with_capacity(n_styles * n_contents * size * size);
        for s in &styles {
            for g in &glyphs {
                let img = render_glyph(s, g, size)?;
                pixels.extend(img.data().iter().map(|v| pnm::quantize(*v)));
            }
        }
        Ok(Self {
            seed,
            size,
            n_styles,
            n_contents,
            partition,
            styles,
            pixels,
        })
    }

    fn offset(&self, style: usize, content: usize) -> Result<usize> {
        if style >= self.n_styles || content >= self.n_contents {
            return Err(Error::InvalidArgument(format!(
                "image ({style}, {content}) outside the {}×{} corpus",
                self.n_styles, self.n_contents
            )));
        }
        Ok((style * self.n_contents + content) * self.size * self.size)
    }

    pub fn image_bytes(&self, style: usize, content: usize) -> Result<&[u8]> {
        let o = self.offset(style, content)?;
        Ok(&self.pixels[o..o + self.size * self.size])
    }

    /// `[1, 1, size, size]` image with values `byte / 255`.
    pub fn image(&self, style: usize, content: usize) -> Result<Tensor> {
        let b = self.image_bytes(style, content)?;
        Tensor::new(vec![1, 1, self.size, self.size], b.iter().map(|v| f64::from(*v) / 255.0).collect())
    }

    /// The reference images stacked on the channel axis, `[1, r, size, size]`.
    pub fn reference_images(&self, refs: &ReferenceSet) -> Result<Tensor> {
        let mut data = Vec::with_capacity(refs.len() * self.size * self.size);
        for (s, c) in refs.pairs() {
            data.extend(self.image_bytes(s, c)?.iter().map(|v| f64::from(*v) / 255.0));
        }
        Tensor::new(vec![1, refs.len(), self.size, self.size], data)
    }

    /// Batched `(style refs, content refs, targets)` tensors.
    pub fn batch_tensors(&self, batch: &[Triplet]) -> Result<(Tensor, Tensor, Tensor)> {
        let mut s = Vec::with_capacity(batch.len());
        let mut c = Vec::with_capacity(batch.len());
        let mut t = Vec::with_capacity(batch.len());
        for tr in batch {
            s.push(self.reference_images(&tr.style_refs)?);
            c.push(self.reference_images(&tr.content_refs)?);
            t.push(self.image(tr.style, tr.content)?);
        }
        Ok((Tensor::stack_batch(&s)?, Tensor::stack_batch(&c)?, Tensor::stack_batch(&t)?))
    }

    pub fn file_name(style: usize, content: usize) -> String {
        format!("style{style:04}_content{content:04}.pgm")
    }

    pub fn manifest(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let p = &self.partition;
        let mut m = String::new();
        let _ = writeln!(m, "{MANIFEST_MAGIC}");
        let _ = writeln!(m, "seed {}", self.seed);
        let _ = writeln!(m, "size {}", self.size);
        let _ = writeln!(m, "styles {}", self.n_styles);
        let _ = writeln!(m, "contents {}", self.n_contents);
        let _ = writeln!(m, "known_styles {}", list(&p.known_styles));
        let _ = writeln!(m, "novel_styles {}", list(&p.novel_styles));
        let _ = writeln!(m, "known_contents {}", list(&p.known_contents));
        let _ = writeln!(m, "novel_contents {}", list(&p.novel_contents));
        for s in &self.styles {
            let _ = writeln!(m, "style {} {:?} {:?} {:?} {:?}", s.style_id, s.thickness, s.slant, s.scale, s.darkness);
        }
        m
    }

    /// Writes every image as P5 plus the manifest.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in 0..self.n_styles {
            for c in 0..self.n_contents {
                let bytes = pnm::encode_pgm(self.size, self.size, self.image_bytes(s, c)?)?;
                pnm::write(&dir.join(Self::file_name(s, c)), &bytes)?;
            }
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, self.manifest()).map_err(|e| Error::io(path, e))
    }

    /// Reads a directory written by [`Corpus::export`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, what: &str| Error::Data(format!("{}:{}: {what}", path.display(), line + 1));
        match lines.next() {
            Some((_, MANIFEST_MAGIC)) => {}
            _ => return Err(bad(0, "not a corpus manifest")),
        }
        let mut field = |key: &str| -> Result<(usize, Vec<String>)> {
            let (i, line) = lines.next().ok_or_else(|| bad(usize::MAX - 1, "manifest ends early"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(i, &format!("expected `{key}`")));
            }
            Ok((i, parts.map(str::to_string).collect()))
        };
        let num = |(i, v): (usize, Vec<String>)| -> Result<u64> {
            match v.as_slice() {
                [x] => x.parse().map_err(|_| bad(i, "expected one integer")),
                _ => Err(bad(i, "expected one integer")),
            }
        };
        let ids = |(i, v): (usize, Vec<String>)| -> Result<Vec<usize>> {
            v.iter().map(|x| x.parse().map_err(|_| bad(i, "expected integer ids"))).collect()
        };
        let seed = num(field("seed")?)?;
        let size = num(field("size")?)? as usize;
        let n_styles = num(field("styles")?)? as usize;
        let n_contents = num(field("contents")?)? as usize;
        let partition = DatasetPartition {
            known_styles: ids(field("known_styles")?)?,
            novel_styles: ids(field("novel_styles")?)?,
            known_contents: ids(field("known_contents")?)?,
            novel_contents: ids(field("novel_contents")?)?,
        };
        partition.validate()?;
        if partition.n_styles() != n_styles || partition.n_contents() != n_contents {
            return Err(Error::Data(format!("{}: split lists disagree with counts", path.display())));
        }
        let mut styles = Vec::with_capacity(n_styles);
        for id in 0..n_styles {
            let (i, v) = field("style")?;
            let vals: Vec<f64> = v.iter().map(|x| x.parse().map_err(|_| bad(i, "bad style tuple"))).collect::<Result<_>>()?;
            match vals.as_slice() {
                [sid, t, sl, sc, d] if *sid as usize == id => styles.push(StyleSpec {
                    style_id: id,
                    thickness: *t,
                    slant: *sl,
                    scale: *sc,
                    darkness: *d,
                }),
                _ => return Err(bad(i, &format!("bad tuple for style {id}"))),
            }
        }
        let mut pixels = Vec::with_capacity(n_styles * n_contents * size * size);
        for s in 0..n_styles {
            for c in 0..n_contents {
                let file = dir.join(Self::file_name(s, c));
                let img = pnm::read(&file)?;
                if img.channels != 1 || img.width != size || img.height != size || img.maxval != 255 {
                    return Err(Error::Data(format!(
                        "{}: expected an 8-bit {size}×{size} P5 image",
                        file.display()
                    )));
                }
                pixels.extend(img.samples.iter().map(|v| *v as u8));
            }
        }
        Ok(Self {
            seed,
            size,
            n_styles,
            n_contents,
            partition,
            styles,
            pixels,
        })
    }
}
