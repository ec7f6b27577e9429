//! Token vocabularies, layout sequences, embedding lookups, nearest-neighbor
//! projection with gradient pass-through, and decoding back to labels.

use ndarray::{Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_rows, gather_rows, straight_through_op, Tensor};
use crate::error::{DiveError, Result};

pub const TOKENS_PER_OBJECT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VocabKind {
    Class,
    Coordinate,
}

impl VocabKind {
    fn name(&self) -> &'static str {
        match self {
            VocabKind::Class => "class",
            VocabKind::Coordinate => "coordinate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Cosine,
    Euclidean,
}

/// Frozen table of token embeddings with a reserved [none] entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    kind: VocabKind,
    embeddings: Array2<f64>,
    none_index: usize,
}

impl Vocabulary {
    pub fn new(kind: VocabKind, embeddings: Array2<f64>, none_index: usize) -> Result<Vocabulary> {
        let v = embeddings.nrows();
        if none_index >= v {
            return Err(DiveError::InvalidVocabulary(format!(
                "none_index {none_index} out of range for {v} entries"
            )));
        }
        if embeddings.iter().any(|x| !x.is_finite()) {
            return Err(DiveError::InvalidVocabulary("non-finite embedding entry".into()));
        }
        for i in 0..v {
            for j in (i + 1)..v {
                if embeddings.row(i) == embeddings.row(j) {
                    return Err(DiveError::InvalidVocabulary(format!(
                        "entries {i} and {j} are identical; nearest-neighbor would be ambiguous"
                    )));
                }
            }
        }
        Ok(Vocabulary { kind, embeddings, none_index })
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn none_index(&self) -> usize {
        self.none_index
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn entry(&self, index: usize) -> Result<ndarray::ArrayView1<'_, f64>> {
        if index >= self.len() {
            return Err(DiveError::InvalidToken {
                index,
                kind: self.kind.name().into(),
                size: self.len(),
            });
        }
        Ok(self.embeddings.row(index))
    }

    /// Nearest entry to `query` under `metric`; ties break to the lowest index.
    /// `exclude_none` removes the [none] entry from the search.
    pub fn nearest(
        &self,
        query: ndarray::ArrayView1<'_, f64>,
        metric: Metric,
        exclude_none: bool,
        position: usize,
    ) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        let qnorm = query.dot(&query).sqrt();
        if metric == Metric::Cosine && qnorm == 0.0 {
            return Err(DiveError::ZeroVector { position });
        }
        for (i, row) in self.embeddings.rows().into_iter().enumerate() {
            if exclude_none && i == self.none_index {
                continue;
            }
            let key = match metric {
                Metric::Cosine => {
                    let enorm = row.dot(&row).sqrt();
                    if enorm == 0.0 {
                        // zero entry has no direction; never the nearest
                        f64::INFINITY
                    } else {
                        1.0 - query.dot(&row) / (qnorm * enorm)
                    }
                }
                Metric::Euclidean => {
                    let mut d = 0.0;
                    for (a, b) in query.iter().zip(row.iter()) {
                        d += (a - b) * (a - b);
                    }
                    d
                }
            };
            match best {
                Some((_, bk)) if key >= bk => {}
                _ => best = Some((i, key)),
            }
        }
        Ok(best.expect("vocabulary is never empty").0)
    }
}

/// The class vocabulary plus, for detection, the coordinate vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabSet {
    pub class: Vocabulary,
    pub coord: Option<Vocabulary>,
}

impl VocabSet {
    pub fn dim(&self) -> usize {
        self.class.dim()
    }

    /// Number of real classes (excluding [none]).
    pub fn num_classes(&self) -> usize {
        self.class.len() - 1
    }

    /// Coordinate grid upper bound R (coordinates live in [0, R]).
    pub fn coord_max(&self) -> Option<usize> {
        self.coord.as_ref().map(|v| v.len() - 2)
    }

    pub fn vocab(&self, kind: VocabKind) -> &Vocabulary {
        match kind {
            VocabKind::Class => &self.class,
            VocabKind::Coordinate => self.coord.as_ref().expect("coordinate vocabulary missing"),
        }
    }

    /// Class id c maps to vocabulary index c + 1 ([none] holds index 0).
    pub fn class_token(&self, class_id: usize) -> usize {
        class_id + 1
    }

    /// Coordinate value k in [0, R] maps to vocabulary index k + 1.
    pub fn coord_token(&self, value: u32) -> usize {
        value as usize + 1
    }
}

/// Which vocabulary owns each position of an embedding sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    kinds: Vec<VocabKind>,
}

impl SequenceLayout {
    /// Detection: L object slots of (class, m_min, n_min, m_max, n_max).
    pub fn detection(max_objects: usize) -> SequenceLayout {
        let mut kinds = Vec::with_capacity(max_objects * TOKENS_PER_OBJECT);
        for _ in 0..max_objects {
            kinds.push(VocabKind::Class);
            kinds.extend([VocabKind::Coordinate; 4]);
        }
        SequenceLayout { kinds }
    }

    /// Classification: a single class token.
    pub fn classification() -> SequenceLayout {
        SequenceLayout { kinds: vec![VocabKind::Class] }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn kinds(&self) -> &[VocabKind] {
        &self.kinds
    }

    pub fn num_slots(&self) -> usize {
        match self.kinds.len() {
            1 => 1,
            n => n / TOKENS_PER_OBJECT,
        }
    }

    pub fn is_detection(&self) -> bool {
        self.kinds.len() > 1
    }
}

/// Integer-pixel bounding box with exclusive max corner, coordinates in [0, R].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub m_min: u32,
    pub n_min: u32,
    pub m_max: u32,
    pub n_max: u32,
}

impl BBox {
    pub fn new(m_min: u32, n_min: u32, m_max: u32, n_max: u32) -> Result<BBox> {
        if m_max <= m_min || n_max <= n_min {
            return Err(DiveError::IllegalBox { m_min, n_min, m_max, n_max });
        }
        Ok(BBox { m_min, n_min, m_max, n_max })
    }

    pub fn area(&self) -> f64 {
        (self.m_max - self.m_min) as f64 * (self.n_max - self.n_min) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetObject {
    pub class: usize,
    pub bbox: BBox,
}

/// Decoded (class, box) objects for one image.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DetectionLabel {
    pub objects: Vec<DetObject>,
}

impl DetectionLabel {
    pub fn validate(&self, coord_max: u32, num_classes: usize) -> Result<()> {
        for o in &self.objects {
            if o.class >= num_classes {
                return Err(DiveError::InvalidToken {
                    index: o.class,
                    kind: "class".into(),
                    size: num_classes,
                });
            }
            let b = &o.bbox;
            if b.m_max <= b.m_min || b.n_max <= b.n_min || b.m_max > coord_max || b.n_max > coord_max
            {
                return Err(DiveError::IllegalBox {
                    m_min: b.m_min,
                    n_min: b.n_min,
                    m_max: b.m_max,
                    n_max: b.n_max,
                });
            }
        }
        Ok(())
    }
}

/// Fixed-length tokenized layout: one (class, 4 coordinates) token group per
/// object slot, padded with [none] tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutSequence {
    tokens: Vec<usize>,
    layout: SequenceLayout,
}

impl LayoutSequence {
    pub fn new(tokens: Vec<usize>, layout: SequenceLayout, vocabs: &VocabSet) -> Result<LayoutSequence> {
        if tokens.len() != layout.len() {
            return Err(DiveError::ShapeMismatch {
                expected: vec![layout.len()],
                got: vec![tokens.len()],
            });
        }
        for (&tok, &kind) in tokens.iter().zip(layout.kinds()) {
            let vocab = vocabs.vocab(kind);
            if tok >= vocab.len() {
                return Err(DiveError::InvalidToken {
                    index: tok,
                    kind: kind.name().into(),
                    size: vocab.len(),
                });
            }
        }
        Ok(LayoutSequence { tokens, layout })
    }

    /// Tokenize a detection label into L slots; unused slots become all-[none].
    pub fn from_label(
        label: &DetectionLabel,
        max_objects: usize,
        vocabs: &VocabSet,
    ) -> Result<LayoutSequence> {
        if label.objects.len() > max_objects {
            return Err(DiveError::InvalidRange(format!(
                "{} objects exceed the {} slots",
                label.objects.len(),
                max_objects
            )));
        }
        let layout = SequenceLayout::detection(max_objects);
        let class_none = vocabs.class.none_index();
        let coord_vocab = vocabs.vocab(VocabKind::Coordinate);
        let coord_none = coord_vocab.none_index();
        let mut tokens = Vec::with_capacity(layout.len());
        for slot in 0..max_objects {
            match label.objects.get(slot) {
                Some(obj) => {
                    tokens.push(vocabs.class_token(obj.class));
                    for c in [obj.bbox.m_min, obj.bbox.n_min, obj.bbox.m_max, obj.bbox.n_max] {
                        tokens.push(vocabs.coord_token(c));
                    }
                }
                None => {
                    tokens.push(class_none);
                    tokens.extend([coord_none; 4]);
                }
            }
        }
        LayoutSequence::new(tokens, layout, vocabs)
    }

    pub fn classification(class_id: usize, vocabs: &VocabSet) -> Result<LayoutSequence> {
        LayoutSequence::new(vec![vocabs.class_token(class_id)], SequenceLayout::classification(), vocabs)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    /// Reorder object slots (each slot moves as a 5-token group).
    pub fn permute_slots(&self, perm: &[usize]) -> LayoutSequence {
        assert!(self.layout.is_detection());
        let slots = self.layout.num_slots();
        assert_eq!(perm.len(), slots);
        let mut tokens = Vec::with_capacity(self.tokens.len());
        for &s in perm {
            let start = s * TOKENS_PER_OBJECT;
            tokens.extend_from_slice(&self.tokens[start..start + TOKENS_PER_OBJECT]);
        }
        LayoutSequence { tokens, layout: self.layout.clone() }
    }
}

/// Per-token embedding lookup; output is (sequence length, d).
pub fn embed(seq: &LayoutSequence, vocabs: &VocabSet) -> Array2<f64> {
    let d = vocabs.dim();
    let mut out = Array2::zeros((seq.tokens.len(), d));
    for (r, (&tok, &kind)) in seq.tokens.iter().zip(seq.layout.kinds()).enumerate() {
        out.row_mut(r).assign(&vocabs.vocab(kind).entry(tok).expect("validated token"));
    }
    out
}

/// Graph version of `embed` for training: gradients flow into the vocabulary
/// tables. `class_table`/`coord_table` are the bound vocabulary leaves.
pub fn embed_graph(
    seq: &LayoutSequence,
    class_table: &Tensor,
    coord_table: Option<&Tensor>,
) -> Tensor {
    let mut class_pos = Vec::new();
    let mut coord_pos = Vec::new();
    for (p, &kind) in seq.layout.kinds().iter().enumerate() {
        match kind {
            VocabKind::Class => class_pos.push(p),
            VocabKind::Coordinate => coord_pos.push(p),
        }
    }
    let class_rows = gather_rows(
        class_table,
        &class_pos.iter().map(|&p| seq.tokens[p]).collect::<Vec<_>>(),
    );
    if coord_pos.is_empty() {
        return class_rows;
    }
    let coord_rows = gather_rows(
        coord_table.expect("coordinate table required"),
        &coord_pos.iter().map(|&p| seq.tokens[p]).collect::<Vec<_>>(),
    );
    // Reassemble interleaved order from the grouped (class then coord) rows.
    let grouped = concat_rows(&[class_rows, coord_rows]);
    let mut perm = vec![0usize; seq.tokens.len()];
    for (i, &p) in class_pos.iter().enumerate() {
        perm[p] = i;
    }
    for (i, &p) in coord_pos.iter().enumerate() {
        perm[p] = class_pos.len() + i;
    }
    gather_rows(&grouped, &perm)
}

/// Per-position nearest vocabulary entry; returns replacement values and indices.
pub fn nn_project(
    v: &Array2<f64>,
    layout: &SequenceLayout,
    vocabs: &VocabSet,
    metric: Metric,
) -> Result<(Array2<f64>, Vec<usize>)> {
    assert_eq!(v.nrows(), layout.len(), "sequence length mismatch");
    let mut values = Array2::zeros(v.raw_dim());
    let mut indices = Vec::with_capacity(v.nrows());
    for (p, &kind) in layout.kinds().iter().enumerate() {
        let vocab = vocabs.vocab(kind);
        let idx = vocab.nearest(v.row(p), metric, false, p)?;
        values.row_mut(p).assign(&vocab.entry(idx)?);
        indices.push(idx);
    }
    Ok((values, indices))
}

/// v' = sg[NN_value(v) - v] + v: forward equals the projection, backward is
/// the identity into `v`.
pub fn straight_through(
    v: &Tensor,
    layout: &SequenceLayout,
    vocabs: &VocabSet,
    metric: Metric,
) -> Result<Tensor> {
    let v2 = v
        .value()
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("conditioning must be 2-d");
    let (values, _) = nn_project(&v2.to_owned(), layout, vocabs, metric)?;
    Ok(straight_through_op(v, values.into_dyn()))
}

/// Decode an optimized detection sequence: project to indices, then drop
/// none-contaminated objects and illegal boxes.
pub fn decode(
    v: &Array2<f64>,
    layout: &SequenceLayout,
    vocabs: &VocabSet,
    metric: Metric,
) -> Result<DetectionLabel> {
    assert!(layout.is_detection(), "decode expects a detection layout");
    let (_, indices) = nn_project(v, layout, vocabs, metric)?;
    let coord_vocab = vocabs.vocab(VocabKind::Coordinate);
    let class_none = vocabs.class.none_index();
    let coord_none = coord_vocab.none_index();
    let mut objects = Vec::new();
    for slot in 0..layout.num_slots() {
        let toks = &indices[slot * TOKENS_PER_OBJECT..(slot + 1) * TOKENS_PER_OBJECT];
        if toks[0] == class_none || toks[1..].iter().any(|&t| t == coord_none) {
            continue;
        }
        let coords: Vec<u32> = toks[1..].iter().map(|&t| (t - 1) as u32).collect();
        let (m_min, n_min, m_max, n_max) = (coords[0], coords[1], coords[2], coords[3]);
        if m_max <= m_min || n_max <= n_min {
            continue;
        }
        objects.push(DetObject {
            class: toks[0] - 1,
            bbox: BBox { m_min, n_min, m_max, n_max },
        });
    }
    Ok(DetectionLabel { objects })
}

/// Decode a classification sequence to a class id; [none] is excluded from the
/// search so a class is always emitted.
pub fn decode_class(v: &Array2<f64>, vocabs: &VocabSet, metric: Metric) -> Result<usize> {
    let idx = vocabs.class.nearest(v.row(0), metric, true, 0)?;
    Ok(idx - 1)
}

/// Project every position, then restore the fixed sequence shape for
/// evaluation: slots dropped by the decode rules are re-padded with [none]
/// embeddings so both loss terms always see a full-length sequence.
pub fn project_and_repad(
    v: &Array2<f64>,
    layout: &SequenceLayout,
    vocabs: &VocabSet,
    metric: Metric,
) -> Result<Array2<f64>> {
    let (values, indices) = nn_project(v, layout, vocabs, metric)?;
    if !layout.is_detection() {
        return Ok(values);
    }
    let mut out = values;
    let coord_vocab = vocabs.vocab(VocabKind::Coordinate);
    let class_none = vocabs.class.none_index();
    let coord_none = coord_vocab.none_index();
    for slot in 0..layout.num_slots() {
        let base = slot * TOKENS_PER_OBJECT;
        let toks = &indices[base..base + TOKENS_PER_OBJECT];
        let contaminated = toks[0] == class_none || toks[1..].iter().any(|&t| t == coord_none);
        let illegal = if contaminated {
            false
        } else {
            let c: Vec<usize> = toks[1..].iter().map(|&t| t - 1).collect();
            c[2] <= c[0] || c[3] <= c[1]
        };
        if contaminated || illegal {
            out.row_mut(base).assign(&vocabs.class.entry(class_none)?);
            for k in 1..TOKENS_PER_OBJECT {
                out.row_mut(base + k).assign(&coord_vocab.entry(coord_none)?);
            }
        }
    }
    Ok(out)
}

/// The optimized embedding sequence of one inversion run.
#[derive(Debug, Clone)]
pub struct LearnableConditioning {
    pub v: Array2<f64>,
    pub grad: Array2<f64>,
}

impl LearnableConditioning {
    pub fn new(v: Array2<f64>) -> LearnableConditioning {
        let grad = Array2::zeros(v.raw_dim());
        LearnableConditioning { v, grad }
    }
}

/// Convenience: the embedding of a bare class id as a (1, d) sequence.
pub fn class_embedding(vocabs: &VocabSet, class_id: usize) -> Result<Array2<f64>> {
    let entry = vocabs.class.entry(vocabs.class_token(class_id))?;
    Ok(entry.insert_axis(Axis(0)).to_owned())
}

pub fn to_dyn(v: &Array2<f64>) -> ArrayD<f64> {
    v.clone().into_dyn()
}
