use std::collections::BTreeSet;
use std::path::PathBuf;

use cfaudit::caption::{detect_gender, edit_caption, validate_lexicon, CaptionGender, GenderLexicon, TargetGender};
use cfaudit::dist::{cmmd, fid, CmmdParams};
use cfaudit::embedding::EmbeddingMatrix;
use cfaudit::manifest::{
    build_partition, dataset_version, select_occupations, Gender, ManifestRecord, OccupationRecord, PartitionCode,
    Provenance, SourceGender,
};
use cfaudit::mask::{combine, compose_inpaint_mask, dilate, dilate_3x3, BinaryMask, CombineMode};
use cfaudit::report::self_similarity;
use cfaudit::zeroshot::{classify_zero_shot, recall_at_k, PromptSet};
use proptest::prelude::*;

fn record(id: String, provenance: Provenance, gender: Gender, source: SourceGender) -> ManifestRecord {
    ManifestRecord {
        image_path: PathBuf::from(format!("{id}.jpg")),
        id,
        caption: "a photo".into(),
        has_person: gender != Gender::Unknown,
        gender,
        provenance,
        source_gender: source,
        mask_path: None,
        embedding_ref: None,
        source_id: None,
        occupation: None,
    }
}

fn arb_record() -> impl Strategy<Value = (Provenance, Gender, SourceGender)> {
    prop_oneof![
        prop_oneof![Just(Gender::Man), Just(Gender::Woman), Just(Gender::Unknown)].prop_map(|g| (
            Provenance::Real,
            g,
            SourceGender::NotApplicable
        )),
        (
            prop_oneof![Just(Gender::Man), Just(Gender::Woman)],
            prop_oneof![Just(SourceGender::Man), Just(SourceGender::Woman)]
        )
            .prop_map(|(g, s)| (Provenance::Synthetic, g, s)),
    ]
}

fn arb_manifest() -> impl Strategy<Value = Vec<ManifestRecord>> {
    prop::collection::vec(arb_record(), 0..40).prop_map(|cells| {
        cells
            .into_iter()
            .enumerate()
            .map(|(i, (p, g, s))| record(format!("r{i:03}"), p, g, s))
            .collect()
    })
}

fn ids(records: &[ManifestRecord]) -> Vec<&str> {
    records.iter().map(|r| r.id.as_str()).collect()
}

fn matrix(rows: usize, dim: usize) -> impl Strategy<Value = EmbeddingMatrix> {
    prop::collection::vec(-10.0f32..10.0, rows * dim)
        .prop_map(move |data| EmbeddingMatrix::new(dim, data, (0..rows).map(|i| i.to_string()).collect()).unwrap())
}

fn nonzero_rows(rows: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(
        prop::collection::vec(-5.0f32..5.0, dim).prop_filter("non-zero", |r| r.iter().any(|v| v.abs() > 1e-3)),
        rows,
    )
}

fn mask(w: u32, h: u32) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), (w * h) as usize).prop_map(move |b| BinaryMask::new(w, h, b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_are_ordered_subsets(records in arb_manifest()) {
        for code in PartitionCode::ALL {
            let part = build_partition(&records, code);
            let expected: Vec<&str> = records.iter().filter(|r| code.matches(r)).map(|r| r.id.as_str()).collect();
            prop_assert_eq!(ids(&part), expected);
        }
        let c1: BTreeSet<_> = build_partition(&records, PartitionCode::C1).into_iter().map(|r| r.id).collect();
        let c2: BTreeSet<_> = build_partition(&records, PartitionCode::C2).into_iter().map(|r| r.id).collect();
        let c3: BTreeSet<_> = build_partition(&records, PartitionCode::C3).into_iter().map(|r| r.id).collect();
        let c8: BTreeSet<_> = build_partition(&records, PartitionCode::C8).into_iter().map(|r| r.id).collect();
        prop_assert!(c1.is_disjoint(&c2));
        prop_assert_eq!(&c3, &c1.union(&c2).cloned().collect());
        prop_assert!(c8.is_superset(&c3));
    }

    #[test]
    fn dataset_version_is_deterministic(n in 0usize..20, fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut records = Vec::new();
        for i in 0..n {
            let gender = if i % 2 == 0 { Gender::Man } else { Gender::Woman };
            let src = format!("p{i:02}");
            records.push(record(src.clone(), Provenance::Real, gender, SourceGender::NotApplicable));
            let source = if gender == Gender::Man { SourceGender::Man } else { SourceGender::Woman };
            for g in [Gender::Man, Gender::Woman] {
                let mut s = record(format!("s{i:02}{}", g.as_str()), Provenance::Synthetic, g, source);
                s.source_id = Some(src.clone());
                records.push(s);
            }
        }
        let a = dataset_version(&records, fraction, seed).unwrap();
        let b = dataset_version(&records, fraction, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let k = (fraction * n as f64).floor() as usize;
        prop_assert_eq!(a.len(), n + k);
        prop_assert_eq!(a.iter().filter(|r| r.provenance == Provenance::Synthetic).count(), 2 * k);
        if k == 0 {
            prop_assert!(a.iter().all(|r| r.provenance == Provenance::Real));
        }
    }

    #[test]
    fn occupation_selection_monotone(
        counts in prop::collection::vec((0u64..200, 0u64..200, 0u64..3, any::<bool>()), 0..12),
        t1 in 0u64..200,
        t2 in 0u64..200,
    ) {
        let occs: Vec<OccupationRecord> = counts
            .iter()
            .enumerate()
            .map(|(i, &(m, w, a, single))| OccupationRecord::new(&format!("o{i}"), m, w, a, single))
            .collect();
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let kept_lo: BTreeSet<String> = select_occupations(&occs, lo).into_iter().map(|o| o.name).collect();
        let kept_hi: BTreeSet<String> = select_occupations(&occs, hi).into_iter().map(|o| o.name).collect();
        prop_assert!(kept_hi.is_subset(&kept_lo));
        for o in &occs {
            let want = o.count_men > lo && o.count_women > lo && o.caption_appearances > 0 && o.single_person_only;
            prop_assert_eq!(kept_lo.contains(&o.name), want);
        }
    }

    #[test]
    fn codec_round_trip_is_bitwise(n in 0usize..8, d in 1usize..6, seed in any::<u64>()) {
        let data: Vec<f32> = (0..n * d).map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32) & 0x3fff_ffff)).collect();
        let m = EmbeddingMatrix::new(d, data, (0..n).map(|i| format!("x{i}")).collect()).unwrap();
        let bytes = m.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), 12 + 4 * n * d);
        let back = EmbeddingMatrix::from_bytes(&bytes, m.ids().to_vec()).unwrap();
        prop_assert_eq!(back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.dim(), d);
    }

    #[test]
    fn normalize_is_idempotent(rows in nonzero_rows(1..6, 4)) {
        let m = EmbeddingMatrix::from_rows_anonymous(&rows).unwrap();
        let once = m.l2_normalize().unwrap();
        let twice = once.l2_normalize().unwrap();
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
        for r in once.rows() {
            let n: f64 = r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn slicing_is_bit_exact(m in matrix(6, 3), order in Just((0usize..6).collect::<Vec<_>>()).prop_shuffle(), take in 0usize..=6) {
        let picks = &order[..take];
        let wanted: Vec<String> = picks.iter().map(|i| i.to_string()).collect();
        let s = m.slice_by_ids(&wanted).unwrap();
        prop_assert_eq!(s.ids(), &wanted[..]);
        for (k, &i) in picks.iter().enumerate() {
            prop_assert_eq!(s.row(k).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            m.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mask_algebra(a in mask(9, 7), b in mask(9, 7)) {
        let c = compose_inpaint_mask(&a, &b).unwrap();
        prop_assert!(c.is_subset_of(&a));
        prop_assert!(c.is_subset_of(&b));
        prop_assert_eq!(&c, &compose_inpaint_mask(&b, &a).unwrap());
        prop_assert_eq!(&compose_inpaint_mask(&a, &a).unwrap(), &a);
        let u = combine(&a, &b, CombineMode::Union).unwrap();
        prop_assert!(a.is_subset_of(&u) && b.is_subset_of(&u));
        let da = dilate_3x3(&a);
        prop_assert!(a.is_subset_of(&da));
        prop_assert!(dilate_3x3(&c).is_subset_of(&da));
        prop_assert!(da.is_subset_of(&dilate(&a, 2)));
        prop_assert_eq!(&dilate(&a, 0), &a);
    }

    #[test]
    fn self_similarity_invariances(rows in nonzero_rows(2..7, 3), scales in prop::collection::vec(0.1f32..10.0, 7), rot in 0usize..7) {
        let base = self_similarity(&EmbeddingMatrix::from_rows_anonymous(&rows).unwrap(), false).unwrap();
        let mut perm = rows.clone();
        perm.rotate_left(rot % rows.len());
        perm.reverse();
        let p = self_similarity(&EmbeddingMatrix::from_rows_anonymous(&perm).unwrap(), false).unwrap();
        prop_assert!((base - p).abs() < 1e-9);
        let scaled: Vec<Vec<f32>> = rows.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
        let s = self_similarity(&EmbeddingMatrix::from_rows_anonymous(&scaled).unwrap(), false).unwrap();
        prop_assert!((base - s).abs() < 1e-6);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
    }

    #[test]
    fn zero_shot_scale_invariant(imgs in nonzero_rows(1..8, 4), prompts in nonzero_rows(2..5, 4), scale in 0.01f32..100.0) {
        let labels: Vec<String> = (0..prompts.len()).map(|i| format!("c{i}")).collect();
        let ps = PromptSet::new(labels, &EmbeddingMatrix::from_rows_anonymous(&prompts).unwrap()).unwrap();
        let a = classify_zero_shot(&EmbeddingMatrix::from_rows_anonymous(&imgs).unwrap(), &ps).unwrap();
        let scaled: Vec<Vec<f32>> = imgs.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let b = classify_zero_shot(&EmbeddingMatrix::from_rows_anonymous(&scaled).unwrap(), &ps).unwrap();
        for (x, y) in a.predictions.iter().zip(&b.predictions) {
            // only a near-tie may flip under f32 rounding
            let s = &x.similarities;
            let gap = s[x.index] - s.iter().enumerate().filter(|&(i, _)| i != x.index).map(|(_, &v)| v).fold(f64::MIN, f64::max);
            if gap > 1e-5 {
                prop_assert_eq!(x.index, y.index);
            }
        }
    }

    #[test]
    fn recall_at_k_monotone(q in nonzero_rows(1..6, 3), g in nonzero_rows(2..8, 3), t in prop::collection::vec(0usize..100, 6)) {
        let truth: Vec<usize> = (0..q.len()).map(|i| t[i] % g.len()).collect();
        let qm = EmbeddingMatrix::from_rows_anonymous(&q).unwrap();
        let gm = EmbeddingMatrix::from_rows_anonymous(&g).unwrap();
        let mut prev = 0.0;
        for k in 1..=g.len() {
            let r = recall_at_k(&qm, &gm, &truth, k).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn fid_symmetric_nonnegative(x in nonzero_rows(3..12, 3), y in nonzero_rows(3..12, 3)) {
        let (a, b) = (EmbeddingMatrix::from_rows_anonymous(&x).unwrap(), EmbeddingMatrix::from_rows_anonymous(&y).unwrap());
        let f1 = fid(&a, &b).unwrap();
        let f2 = fid(&b, &a).unwrap();
        prop_assert!(f1 >= 0.0);
        prop_assert!((f1 - f2).abs() <= 1e-6 * f1.max(1.0));
        prop_assert_eq!(fid(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn cmmd_permutation_invariant(x in nonzero_rows(1..8, 3), y in nonzero_rows(1..8, 3), rot in 0usize..8) {
        let p = CmmdParams::default();
        let (a, b) = (EmbeddingMatrix::from_rows_anonymous(&x).unwrap(), EmbeddingMatrix::from_rows_anonymous(&y).unwrap());
        let base = cmmd(&a, &b, p).unwrap();
        let mut xr = x.clone();
        xr.rotate_left(rot % x.len());
        let permuted = cmmd(&EmbeddingMatrix::from_rows_anonymous(&xr).unwrap(), &b, p).unwrap();
        prop_assert!((base - permuted).abs() < 1e-9);
        prop_assert!(base >= 0.0);
        prop_assert_eq!(cmmd(&a, &a, p).unwrap(), 0.0);
    }
}

fn lexicon_words(lex: &GenderLexicon) -> Vec<String> {
    lex.masculine_terms.iter().chain(&lex.feminine_terms).cloned().collect()
}

const NEUTRAL: [&str; 8] = ["a", "the", "photo", "of", "standing", "near", "table", "kitchen"];

fn arb_caption(words: Vec<String>) -> impl Strategy<Value = String> {
    let pool: Vec<String> = words.into_iter().chain(NEUTRAL.iter().map(|s| s.to_string())).collect();
    prop::collection::vec(
        (
            prop::sample::select(pool),
            any::<bool>(),
            prop::sample::select(vec![" ", ", ", ". ", "-", " ("]),
        ),
        0..10,
    )
    .prop_map(|toks| {
        toks.into_iter()
            .map(|(w, cap, sep)| {
                let w = if cap {
                    let mut c = w.chars();
                    c.next()
                        .map(|f| f.to_uppercase().chain(c).collect())
                        .unwrap_or_default()
                } else {
                    w
                };
                format!("{w}{sep}")
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn caption_edits(caption in arb_caption(lexicon_words(&GenderLexicon::builtin()))) {
        let lex = GenderLexicon::builtin();
        for target in [TargetGender::Masculine, TargetGender::Feminine] {
            let once = edit_caption(&caption, target, &lex);
            prop_assert_eq!(&edit_caption(&once, target, &lex), &once);
            let want = match target {
                TargetGender::Masculine => CaptionGender::Masculine,
                TargetGender::Feminine => CaptionGender::Feminine,
            };
            let got = detect_gender(&once, &lex);
            prop_assert!(got == want || got == CaptionGender::Neutral);
            prop_assert_eq!(got == CaptionGender::Neutral, detect_gender(&caption, &lex) == CaptionGender::Neutral);
        }
    }

    #[test]
    fn bijective_round_trip(caption in arb_caption(
        validate_lexicon(&GenderLexicon::builtin()).unwrap().bijective_pairs.into_iter().map(|(m, _)| m).collect()
    )) {
        let lex = GenderLexicon::builtin();
        let f = edit_caption(&caption, TargetGender::Feminine, &lex);
        prop_assert_eq!(edit_caption(&f, TargetGender::Masculine, &lex), caption);
    }

    #[test]
    fn neutral_text_untouched(caption in arb_caption(Vec::new()), junk in "[ 0-9.,!?'\"()-]{0,12}") {
        let lex = GenderLexicon::builtin();
        let text = format!("{junk}{caption}{junk}");
        prop_assert_eq!(&edit_caption(&text, TargetGender::Feminine, &lex), &text);
        prop_assert_eq!(&edit_caption(&text, TargetGender::Masculine, &lex), &text);
    }
}
