//! Randomized structural properties of the interleaved-stream builder:
//! round-trip, visibility rules, target-mask counting, and packing.

use mmiv::sequence::{
    build, ntp_targets, pack, parse_back, visibility, Element, Slot, Vocab,
};
use proptest::prelude::*;

const V: Vocab = Vocab { text: 32 };

/// Random element list: nonempty texts and images with distinct ids.
fn elements_strategy() -> impl Strategy<Value = Vec<Element>> {
    prop::collection::vec(
        prop_oneof![
            prop::collection::vec(0usize..V.text, 1..6).prop_map(Element::Text),
            Just(Element::Image(0)),
        ],
        1..8,
    )
    .prop_map(|mut els| {
        // merge adjacent texts (parse_back cannot distinguish them) and
        // assign distinct image ids
        let mut out: Vec<Element> = Vec::new();
        let mut next_img = 0usize;
        for el in els.drain(..) {
            match el {
                Element::Text(mut ids) => match out.last_mut() {
                    Some(Element::Text(prev)) => prev.append(&mut ids),
                    _ => out.push(Element::Text(ids)),
                },
                Element::Image(_) => {
                    out.push(Element::Image(next_img));
                    next_img += 1;
                }
            }
        }
        out
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip_and_structure(els in elements_strategy(), n in 1usize..5) {
        let seq = build(&els, n).unwrap();
        prop_assert_eq!(parse_back(&seq), els.clone());
        prop_assert_eq!(seq.stream[0], Slot::Bos);
        prop_assert_eq!(*seq.stream.last().unwrap(), Slot::Eos);
        // every image block: BoI then exactly n slots with indices 0..n
        let mut p = 0;
        while p < seq.len() {
            if seq.stream[p] == Slot::Boi {
                for k in 0..n {
                    match seq.stream[p + 1 + k] {
                        Slot::ImgSlot { index, .. } => prop_assert_eq!(index, k),
                        other => prop_assert!(false, "expected slot, got {:?}", other),
                    }
                }
                p += 1 + n;
            } else {
                p += 1;
            }
        }
    }

    #[test]
    fn visibility_rules(els in elements_strategy(), n in 1usize..5) {
        let seq = build(&els, n).unwrap();
        let vis = visibility(&seq);
        // independent oracle: image visible at p iff its BoI position < p
        let mut boi_of = std::collections::HashMap::new();
        for (p, s) in seq.stream.iter().enumerate() {
            if let Slot::ImgSlot { image, index: 0 } = s {
                boi_of.insert(*image, p - 1);
            }
        }
        for (p, seen) in vis.per_position.iter().enumerate() {
            let expect: Vec<usize> = seq
                .images
                .iter()
                .copied()
                .filter(|img| boi_of[img] < p)
                .collect();
            prop_assert_eq!(seen.clone(), expect);
        }
        // monotone: each position's set contains the previous one
        for w in vis.per_position.windows(2) {
            prop_assert!(w[0].iter().all(|i| w[1].contains(i)));
        }
    }

    #[test]
    fn mask_counts(els in elements_strategy(), n in 1usize..5) {
        let seq = build(&els, n).unwrap();
        let (targets, mask) = ntp_targets(&seq, V);
        prop_assert_eq!(targets.len(), seq.len());
        // brute force over successors
        for p in 0..seq.len() {
            let expect = match seq.stream.get(p + 1) {
                Some(Slot::TextTok(_)) | Some(Slot::Boi) | Some(Slot::Eos) => true,
                _ => false,
            };
            prop_assert_eq!(mask[p], expect, "position {}", p);
            if mask[p] {
                prop_assert!(targets[p] < V.total());
            }
        }
        // closed form: every text token, one BoI per image, one EoS
        let text_count = seq.stream.iter().filter(|s| matches!(s, Slot::TextTok(_))).count();
        let unmasked = mask.iter().filter(|&&m| m).count();
        prop_assert_eq!(unmasked, text_count + seq.images.len() + 1);
    }

    #[test]
    fn packing_properties(lens in prop::collection::vec(1usize..12, 1..12), max_extra in 0usize..8) {
        let samples: Vec<_> = lens
            .iter()
            .map(|&t| build(&[Element::Text(vec![0; t])], 1).unwrap())
            .collect();
        let max_len = samples.iter().map(|s| s.len()).max().unwrap() + max_extra;
        let total: usize = samples.iter().map(|s| s.len()).sum();
        let ctxs = pack(samples.clone(), max_len).unwrap();
        // capacity respected, nothing lost, nothing split
        let mut recovered = Vec::new();
        for c in &ctxs {
            prop_assert!(c.len() <= max_len);
            prop_assert!(!c.samples.is_empty());
            recovered.extend(c.samples.iter().cloned());
        }
        prop_assert_eq!(recovered.iter().map(|s| s.len()).sum::<usize>(), total);
        let mut sorted_in: Vec<_> = samples.iter().map(|s| s.len()).collect();
        let mut sorted_out: Vec<_> = recovered.iter().map(|s| s.len()).collect();
        sorted_in.sort_unstable();
        sorted_out.sort_unstable();
        prop_assert_eq!(sorted_in, sorted_out);
        // first-fit: no sample could fit in an earlier context given the
        // final occupancies minus itself
        for (ci, c) in ctxs.iter().enumerate() {
            for s in &c.samples {
                for earlier in &ctxs[..ci] {
                    prop_assert!(earlier.len() + s.len() > max_len);
                }
            }
        }
    }
}
