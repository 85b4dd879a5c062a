//! Interleaved image-text streams: construction with special tokens and
//! per-image visual slots, per-position image visibility, next-token
//! prediction targets, and greedy context packing.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

/// One source element of an interleaved document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Element {
    Text(Vec<usize>),
    Image(usize),
}

/// One stream slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Bos,
    Eos,
    Boi,
    TextTok(usize),
    /// Visual slot `index` (0-based) of `image`.
    ImgSlot { image: usize, index: usize },
}

/// Token-id layout: text ids `0..text`, then `BoS`, `EoS`, `BoI`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Vocab {
    pub text: usize,
}

impl Vocab {
    pub fn bos(&self) -> usize {
        self.text
    }
    pub fn eos(&self) -> usize {
        self.text + 1
    }
    pub fn boi(&self) -> usize {
        self.text + 2
    }
    /// Embedding-table size (text plus the three specials).
    pub fn total(&self) -> usize {
        self.text + 3
    }
}

/// A built stream: `BoS`, interleaved text tokens and image blocks
/// (`BoI` + N contiguous slots each), `EoS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub stream: Vec<Slot>,
    /// Image ids in stream order.
    pub images: Vec<usize>,
    /// Visual tokens per image (N).
    pub n_visual: usize,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.stream.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stream.is_empty()
    }
}

/// Per-position visible images, in stream order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMap {
    pub per_position: Vec<Vec<usize>>,
}

/// Build the slot stream from source elements.
pub fn build(elements: &[Element], n_visual: usize) -> Result<PackedSequence> {
    if elements.is_empty() {
        return Err(Error::EmptyInput("build: no elements".to_string()));
    }
    if n_visual == 0 {
        return Err(Error::Dimension("build: n_visual must be >= 1".to_string()));
    }
    let mut stream = vec![Slot::Bos];
    let mut images = Vec::new();
    for el in elements {
        match el {
            Element::Text(ids) => stream.extend(ids.iter().map(|&t| Slot::TextTok(t))),
            Element::Image(id) => {
                stream.push(Slot::Boi);
                for index in 0..n_visual {
                    stream.push(Slot::ImgSlot { image: *id, index });
                }
                images.push(*id);
            }
        }
    }
    stream.push(Slot::Eos);
    Ok(PackedSequence {
        stream,
        images,
        n_visual,
    })
}

/// Recover the source elements from a built stream (inverse of [`build`]).
pub fn parse_back(seq: &PackedSequence) -> Vec<Element> {
    let mut out: Vec<Element> = Vec::new();
    for slot in &seq.stream {
        match slot {
            Slot::Bos | Slot::Eos => {}
            Slot::TextTok(t) => match out.last_mut() {
                Some(Element::Text(ids)) => ids.push(*t),
                _ => out.push(Element::Text(vec![*t])),
            },
            Slot::Boi => {}
            Slot::ImgSlot { image, index: 0 } => out.push(Element::Image(*image)),
            Slot::ImgSlot { .. } => {}
        }
    }
    out
}

/// Image `j` is visible at position `p` iff its `BoI` sits at a position
/// before `p`; an image's own slot positions therefore see it.
pub fn visibility(seq: &PackedSequence) -> VisibilityMap {
    let mut per_position = Vec::with_capacity(seq.len());
    let mut seen: Vec<usize> = Vec::new();
    for slot in &seq.stream {
        if let Slot::ImgSlot { image, index: 0 } = slot {
            // this position sits right after the image's BoI, so the image
            // is visible from here on
            seen.push(*image);
        }
        per_position.push(seen.clone());
    }
    VisibilityMap { per_position }
}

/// Next-token targets and mask. Position `p` targets the slot at `p + 1`
/// mapped into the prediction vocabulary (text ∪ {BoI, EoS}); positions
/// whose successor is an image slot or `BoS` are masked, as is the final
/// position.
pub fn ntp_targets(seq: &PackedSequence, vocab: Vocab) -> (Vec<usize>, Vec<bool>) {
    let len = seq.len();
    let mut targets = vec![0usize; len];
    let mut mask = vec![false; len];
    for p in 0..len.saturating_sub(1) {
        match seq.stream[p + 1] {
            Slot::TextTok(t) => {
                targets[p] = t;
                mask[p] = true;
            }
            Slot::Boi => {
                targets[p] = vocab.boi();
                mask[p] = true;
            }
            Slot::Eos => {
                targets[p] = vocab.eos();
                mask[p] = true;
            }
            Slot::ImgSlot { .. } | Slot::Bos => {}
        }
    }
    (targets, mask)
}

/// One training context: whole samples packed back to back. Visibility and
/// attention never cross sample boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainContext {
    pub samples: Vec<PackedSequence>,
}

impl TrainContext {
    pub fn len(&self) -> usize {
        self.samples.iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Flat slot stream with the owning sample index per position.
    pub fn flatten(&self) -> (Vec<Slot>, Vec<usize>) {
        let mut slots = Vec::with_capacity(self.len());
        let mut segment = Vec::with_capacity(self.len());
        for (si, s) in self.samples.iter().enumerate() {
            slots.extend(s.stream.iter().copied());
            segment.extend(std::iter::repeat(si).take(s.len()));
        }
        (slots, segment)
    }
}

/// Greedy first-fit packing; samples are never split across contexts.
pub fn pack(samples: Vec<PackedSequence>, max_len: usize) -> Result<Vec<TrainContext>> {
    for s in &samples {
        if s.len() > max_len {
            return Err(Error::Oversize {
                len: s.len(),
                max: max_len,
            });
        }
    }
    let mut contexts: Vec<TrainContext> = Vec::new();
    for s in samples {
        match contexts
            .iter_mut()
            .find(|c| c.len() + s.len() <= max_len)
        {
            Some(c) => c.samples.push(s),
            None => contexts.push(TrainContext { samples: vec![s] }),
        }
    }
    Ok(contexts)
}

/// One corpus line: `{"elements": [{"text": [ids]} | {"image": "path.ppm"}]}`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CorpusSample {
    pub elements: Vec<CorpusElement>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum CorpusElement {
    Text { text: Vec<usize> },
    Image { image: String },
}

/// Parse a JSON-lines corpus file (blank lines skipped).
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusSample>> {
    let body = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in body.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const V: Vocab = Vocab { text: 16 };

    #[test]
    fn text_only_build() {
        let seq = build(&[Element::Text(vec![5, 6])], 4).unwrap();
        assert_eq!(
            seq.stream,
            vec![Slot::Bos, Slot::TextTok(5), Slot::TextTok(6), Slot::Eos]
        );
        assert!(seq.images.is_empty());
    }

    #[test]
    fn single_image_layout() {
        let seq = build(&[Element::Image(0), Element::Text(vec![7])], 2).unwrap();
        assert_eq!(
            seq.stream,
            vec![
                Slot::Bos,
                Slot::Boi,
                Slot::ImgSlot { image: 0, index: 0 },
                Slot::ImgSlot { image: 0, index: 1 },
                Slot::TextTok(7),
                Slot::Eos,
            ]
        );
        assert_eq!(seq.images, vec![0]);
    }

    #[test]
    fn interleaved_length_arithmetic() {
        // 2 specials + T text + sum over images of (1 + N)
        let seq = build(
            &[
                Element::Text(vec![1]),
                Element::Image(0),
                Element::Text(vec![2]),
                Element::Image(1),
            ],
            2,
        )
        .unwrap();
        assert_eq!(seq.len(), 10);
    }

    #[test]
    fn empty_elements_error() {
        assert!(matches!(build(&[], 2), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn visibility_basics() {
        let seq = build(
            &[Element::Image(0), Element::Text(vec![7]), Element::Image(1)],
            2,
        )
        .unwrap();
        let vis = visibility(&seq);
        // BoS sees nothing
        assert!(vis.per_position[0].is_empty());
        // BoI of image 0 (position 1) still sees nothing
        assert!(vis.per_position[1].is_empty());
        // image 0's own slots see image 0
        assert_eq!(vis.per_position[2], vec![0]);
        assert_eq!(vis.per_position[3], vec![0]);
        // text token after image 0's block
        assert_eq!(vis.per_position[4], vec![0]);
        // image 1's slots see both
        assert_eq!(vis.per_position[6], vec![0, 1]);
        // EoS sees both
        assert_eq!(vis.per_position[8], vec![0, 1]);
    }

    #[test]
    fn ntp_text_only() {
        let seq = build(&[Element::Text(vec![5, 6])], 4).unwrap();
        let (targets, mask) = ntp_targets(&seq, V);
        assert_eq!(&targets[..3], &[5, 6, V.eos()]);
        assert_eq!(mask, vec![true, true, true, false]);
    }

    #[test]
    fn ntp_image_masking() {
        let seq = build(&[Element::Image(0), Element::Text(vec![7])], 2).unwrap();
        let (targets, mask) = ntp_targets(&seq, V);
        // BoS -> BoI unmasked; BoI -> slot masked; slot0 -> slot masked;
        // slot1 -> 7 unmasked; 7 -> EoS unmasked
        assert_eq!(targets[0], V.boi());
        assert_eq!(mask, vec![true, false, false, true, true, false]);
        assert_eq!(targets[3], 7);
        assert_eq!(targets[4], V.eos());
    }

    #[test]
    fn ntp_all_image() {
        let seq = build(&[Element::Image(3)], 2).unwrap();
        let (targets, mask) = ntp_targets(&seq, V);
        assert_eq!(mask, vec![true, false, false, true, false]);
        assert_eq!(targets[0], V.boi());
        assert_eq!(targets[3], V.eos());
    }

    #[test]
    fn round_trip() {
        let elements = vec![
            Element::Text(vec![1, 2, 3]),
            Element::Image(9),
            Element::Text(vec![4]),
            Element::Image(2),
            Element::Image(5),
            Element::Text(vec![0]),
        ];
        let seq = build(&elements, 3).unwrap();
        assert_eq!(parse_back(&seq), elements);
    }

    #[test]
    fn pack_first_fit() {
        let mk = |t: usize| build(&[Element::Text(vec![0; t])], 1).unwrap();
        // bodies of length 10 each, max 32 -> one context of 30
        let ctxs = pack(vec![mk(8), mk(8), mk(8)], 32).unwrap();
        assert_eq!(ctxs.len(), 1);
        assert_eq!(ctxs[0].len(), 30);
        // lengths [20, 20, 10] -> [20+10, 20]
        let ctxs = pack(vec![mk(18), mk(18), mk(8)], 32).unwrap();
        assert_eq!(ctxs.len(), 2);
        assert_eq!(ctxs[0].len(), 30);
        assert_eq!(ctxs[1].len(), 20);
        // exact fit
        let ctxs = pack(vec![mk(30)], 32).unwrap();
        assert_eq!(ctxs.len(), 1);
        assert_eq!(ctxs[0].len(), 32);
        // oversize
        assert!(matches!(
            pack(vec![mk(40)], 32),
            Err(Error::Oversize { len: 42, max: 32 })
        ));
    }

    #[test]
    fn corpus_round_trip() {
        let dir = std::env::temp_dir().join("mmiv-corpus-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.jsonl");
        std::fs::write(
            &path,
            "{\"elements\":[{\"text\":[1,2]},{\"image\":\"a.ppm\"}]}\n\n{\"elements\":[{\"text\":[3]}]}\n",
        )
        .unwrap();
        let samples = load_corpus(&path).unwrap();
        assert_eq!(samples.len(), 2);
        match &samples[0].elements[1] {
            CorpusElement::Image { image } => assert_eq!(image, "a.ppm"),
            other => panic!("{other:?}"),
        }
    }
}
