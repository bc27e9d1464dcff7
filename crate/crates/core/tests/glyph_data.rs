use std::collections::HashSet;

use emd_core::glyph::{
    build_eval_sets, make_partition, render_glyph, sample_training_batch, training_triplet, Cell, Corpus, GlyphSpec,
    RefKind, StyleSpec, Triplet,
};
use emd_core::pnm::quantize;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

const GOLDEN: &str = "60146d357d63534363bdc49d08d70ddd4f49a4d57cc3c9a27ee49aa1857ab37b";

#[test]
fn golden_render_hash() {
    let img = render_glyph(&StyleSpec::derive(7, 3), &GlyphSpec::new(5), 64).unwrap();
    let bytes: Vec<u8> = img.data().iter().map(|v| quantize(*v)).collect();
    let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, GOLDEN);
}

#[test]
fn style_tuples_are_unique_over_a_thousand_ids() {
    let mut seen = HashSet::new();
    for id in 0..1000 {
        let s = StyleSpec::derive(11, id);
        let key = [s.thickness, s.slant, s.scale, s.darkness].map(f64::to_bits);
        assert!(seen.insert(key), "style {id} repeats");
    }
}

#[test]
fn partition_of_eight_and_rejection_below_four() {
    let p = make_partition(8, 8, 1).unwrap();
    assert_eq!((p.known_styles.len(), p.novel_styles.len()), (6, 2));
    assert_eq!((p.known_contents.len(), p.novel_contents.len()), (6, 2));
    assert_eq!(p, make_partition(8, 8, 1).unwrap());
    assert!(make_partition(3, 8, 1).is_err());
    assert!(make_partition(8, 3, 1).is_err());
}

proptest! {
    #[test]
    fn partition_cells_cover_the_grid(ns in 4usize..40, nc in 4usize..40, seed in any::<u64>()) {
        let p = make_partition(ns, nc, seed).unwrap();
        prop_assert_eq!(p.novel_styles.len(), ns / 4);
        prop_assert_eq!(p.novel_contents.len(), nc / 4);
        let mut styles: Vec<usize> = p.known_styles.iter().chain(&p.novel_styles).copied().collect();
        styles.sort_unstable();
        prop_assert_eq!(styles, (0..ns).collect::<Vec<_>>());
        let mut contents: Vec<usize> = p.known_contents.iter().chain(&p.novel_contents).copied().collect();
        contents.sort_unstable();
        prop_assert_eq!(contents, (0..nc).collect::<Vec<_>>());
        let total: usize = Cell::ALL.iter().map(|c| p.members(*c).len()).sum();
        prop_assert_eq!(total, ns * nc);
        for cell in Cell::ALL {
            for (s, c) in p.members(cell) {
                prop_assert_eq!(p.cell(s, c), cell);
            }
        }
    }

    #[test]
    fn renders_stay_in_range(style in 0usize..200, content in 0usize..120, size in 16usize..48) {
        let img = render_glyph(&StyleSpec::derive(3, style), &GlyphSpec::new(content), size).unwrap();
        prop_assert_eq!(img.shape(), &[1, 1, size, size]);
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(img.data().iter().any(|v| *v < 1.0));
    }
}

fn audit(t: &Triplet, r: usize) {
    assert_eq!(t.style_refs.kind, RefKind::Style);
    assert_eq!(t.content_refs.kind, RefKind::Content);
    assert_eq!(t.style_refs.anchor, t.style);
    assert_eq!(t.content_refs.anchor, t.content);
    for set in [&t.style_refs, &t.content_refs] {
        assert_eq!(set.len(), r);
        let distinct: HashSet<_> = set.counterparts.iter().collect();
        assert_eq!(distinct.len(), r);
    }
    assert!(t.style_refs.pairs().iter().all(|(s, _)| *s == t.style));
    assert!(t.content_refs.pairs().iter().all(|(_, c)| *c == t.content));
}

#[test]
fn training_triplets_come_from_the_known_cell() {
    let p = make_partition(40, 60, 0).unwrap();
    let mut covered = HashSet::new();
    for k in 0..10_000 {
        let t = training_triplet(&p, 4, 9, k).unwrap();
        assert_eq!(p.cell(t.style, t.content), Cell::D1);
        for (s, c) in t.style_refs.pairs().into_iter().chain(t.content_refs.pairs()) {
            assert_eq!(p.cell(s, c), Cell::D1);
        }
        audit(&t, 4);
        covered.insert((t.style, t.content));
    }
    assert!(covered.len() > p.members(Cell::D1).len() * 9 / 10);
    let single = training_triplet(&p, 1, 9, 0).unwrap();
    audit(&single, 1);
    assert!(training_triplet(&p, 46, 9, 0).is_err());
}

#[test]
fn batches_cycle_through_the_triplet_pool() {
    let p = make_partition(12, 12, 0).unwrap();
    let a = sample_training_batch(&p, 10, 2, 4, 5, 0).unwrap();
    assert_eq!(a, sample_training_batch(&p, 10, 2, 4, 5, 0).unwrap());
    // step 3 covers triplets 12..16, i.e. 2..6 after wrapping at 10
    let wrapped = sample_training_batch(&p, 10, 2, 4, 5, 3).unwrap();
    let direct: Vec<Triplet> = (2..6).map(|k| training_triplet(&p, 2, 5, k).unwrap()).collect();
    assert_eq!(wrapped, direct);
    assert!(sample_training_batch(&p, 0, 2, 4, 5, 0).is_err());
}

#[test]
fn eval_suites_respect_cells_and_exclude_the_target() {
    let p = make_partition(40, 60, 0).unwrap();
    let suites = build_eval_sets(&p, 4, 2, 40).unwrap();
    assert_eq!(suites, build_eval_sets(&p, 4, 2, 40).unwrap());
    for cell in Cell::ALL {
        let set = suites.get(cell);
        assert_eq!(set.len(), 40);
        for t in set {
            assert_eq!(p.cell(t.style, t.content), cell);
            audit(t, 4);
            if cell != Cell::D1 {
                assert!(!t.style_refs.counterparts.contains(&t.content));
                assert!(!t.content_refs.counterparts.contains(&t.style));
            }
        }
    }
    assert!(suites.get(Cell::D4).iter().all(|t| p.novel_styles.contains(&t.style) && p.novel_contents.contains(&t.content)));
}

#[test]
fn corpus_images_match_their_styles_and_survive_export() {
    let c = Corpus::render(6, 5, 24, 4).unwrap();
    assert_eq!(c, Corpus::render(6, 5, 24, 4).unwrap());
    for s in 0..6 {
        assert_eq!(c.styles[s], StyleSpec::derive(4, s));
        let fresh = render_glyph(&c.styles[s], &GlyphSpec::new(3), 24).unwrap();
        let bytes: Vec<u8> = fresh.data().iter().map(|v| quantize(*v)).collect();
        assert_eq!(c.image_bytes(s, 3).unwrap(), &bytes[..]);
    }
    let dir = tempfile::tempdir().unwrap();
    c.export(dir.path()).unwrap();
    assert_eq!(Corpus::load(dir.path()).unwrap(), c);
    std::fs::write(dir.path().join(Corpus::file_name(2, 2)), b"P5\n3 3\n255\n").unwrap();
    assert!(Corpus::load(dir.path()).is_err());
}
