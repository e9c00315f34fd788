//! Deterministic synthetic multimodal corpus: shape-grid images, templated
//! captions and QA pairs over a closed word-level vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod corpus;
mod ppm;
mod render;
mod templates;

pub use corpus::{generate_corpus, load_corpus, Corpus, DataConfig, Sample};
pub use ppm::{read_ppm, write_ppm};
pub use render::render;
pub use templates::{caption, qa_templates, QaKind};

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const GRID: usize = 3;
pub const NUM_CLASSES: usize = SHAPES.len() * COLORS.len();

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("token id {0} out of range for vocab of {1}")]
    TokenOutOfRange(u32, usize),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {msg}")]
    Malformed { what: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One placed object: shape and color indices plus a cell on the 3x3 grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub cell: usize,
}

impl SceneObject {
    /// Combined (shape, color) class in `[0, 16)`.
    pub fn class_id(&self) -> usize {
        self.shape * COLORS.len() + self.color
    }
}

/// Ground-truth scene: 1-3 objects on distinct cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    objects: Vec<SceneObject>,
}

impl Scene {
    pub fn new(mut objects: Vec<SceneObject>) -> Result<Scene> {
        if objects.is_empty() || objects.len() > 3 {
            return Err(DataError::InvalidScene(format!(
                "object count {} outside [1,3]",
                objects.len()
            )));
        }
        let mut cells: Vec<usize> = objects.iter().map(|o| o.cell).collect();
        cells.sort_unstable();
        cells.dedup();
        if cells.len() != objects.len() {
            return Err(DataError::InvalidScene("two objects share a cell".into()));
        }
        for o in &objects {
            if o.shape >= SHAPES.len() || o.color >= COLORS.len() || o.cell >= GRID * GRID {
                return Err(DataError::InvalidScene(format!("object out of range: {o:?}")));
            }
        }
        objects.sort_by_key(|o| o.cell);
        Ok(Scene { objects })
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    /// Distinct (shape,color) classes present, ascending.
    pub fn class_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.objects.iter().map(|o| o.class_id()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Canonical string for train/eval disjointness checks.
    pub fn signature(&self) -> String {
        self.objects
            .iter()
            .map(|o| format!("{}:{}:{}", o.shape, o.color, o.cell))
            .collect::<Vec<_>>()
            .join("|")
    }

    /// Shapes that occur exactly once, as shape indices.
    pub fn unique_shapes(&self) -> Vec<usize> {
        let mut counts = [0usize; 4];
        for o in &self.objects {
            counts[o.shape] += 1;
        }
        (0..SHAPES.len()).filter(|&s| counts[s] == 1).collect()
    }

    pub fn has_shape(&self, shape: usize) -> bool {
        self.objects.iter().any(|o| o.shape == shape)
    }
}

// ── Manifest JSON shapes ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QaRecord {
    pub q: String,
    pub a: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObjectRecord {
    pub shape: String,
    pub color: String,
    pub cell: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub caption: String,
    pub qa: Vec<QaRecord>,
    pub scene: Vec<SceneObjectRecord>,
}

impl ManifestRecord {
    pub fn scene_struct(&self) -> Result<Scene> {
        let objects = self
            .scene
            .iter()
            .map(|o| {
                let shape = SHAPES
                    .iter()
                    .position(|s| *s == o.shape)
                    .ok_or_else(|| DataError::InvalidScene(format!("unknown shape {:?}", o.shape)))?;
                let color = COLORS
                    .iter()
                    .position(|c| *c == o.color)
                    .ok_or_else(|| DataError::InvalidScene(format!("unknown color {:?}", o.color)))?;
                Ok(SceneObject {
                    shape,
                    color,
                    cell: o.cell,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Scene::new(objects)
    }
}

pub fn scene_records(scene: &Scene) -> Vec<SceneObjectRecord> {
    scene
        .objects()
        .iter()
        .map(|o| SceneObjectRecord {
            shape: SHAPES[o.shape].to_string(),
            color: COLORS[o.color].to_string(),
            cell: o.cell,
        })
        .collect()
}

// ── Vocabulary ──────────────────────────────────────────────────────────

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const BOI: u32 = 3;
pub const EOI: u32 = 4;
pub const SEP: u32 = 5;

const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<boi>", "<eoi>", "<sep>"];

/// Every word the caption and QA templates can emit, in a fixed order.
const TEMPLATE_WORDS: [&str; 32] = [
    "a", "red", "green", "blue", "yellow", "circle", "square", "triangle", "cross", "in", "the",
    ",", ".", "?", "what", "color", "is", "there", "how", "many", "shapes", "yes", "no", "one",
    "two", "three", "top", "bottom", "middle", "left", "right", "center",
];

/// Closed word-level vocabulary. Index in `words` is the token id; the six
/// specials always occupy ids 0-5.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn template() -> Vocab {
        let words: Vec<String> = SPECIALS
            .iter()
            .chain(TEMPLATE_WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        Vocab::from_words(words).expect("template vocab is well-formed")
    }

    pub fn from_words(words: Vec<String>) -> Result<Vocab> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if words.get(i).map(String::as_str) != Some(*s) {
                return Err(DataError::Malformed {
                    what: "vocab",
                    msg: format!("special {s:?} missing at index {i}"),
                });
            }
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(DataError::Malformed {
                    what: "vocab",
                    msg: format!("duplicate word {w:?}"),
                });
            }
        }
        Ok(Vocab { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| DataError::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .ok_or(DataError::TokenOutOfRange(id, self.words.len()))
    }

    /// Whitespace-delimited encoding; every word must be in the vocab.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let words: Vec<&str> = ids
            .iter()
            .map(|&id| self.word(id))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

pub fn number_word(n: usize) -> &'static str {
    match n {
        1 => "one",
        2 => "two",
        3 => "three",
        _ => unreachable!("scene object count outside [1,3]"),
    }
}

/// Human-readable name of a 3x3 grid cell, used by captions.
pub fn cell_name(cell: usize) -> &'static str {
    match cell {
        0 => "top left",
        1 => "top middle",
        2 => "top right",
        3 => "middle left",
        4 => "center",
        5 => "middle right",
        6 => "bottom left",
        7 => "bottom middle",
        8 => "bottom right",
        _ => unreachable!("cell outside 3x3 grid"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_roundtrip() {
        let v = Vocab::template();
        let ids = v.tokenize("a red circle").unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(v.detokenize(&ids).unwrap(), "a red circle");
    }

    #[test]
    fn tokenize_empty() {
        let v = Vocab::template();
        let ids = v.tokenize("").unwrap();
        assert!(ids.is_empty());
        assert_eq!(v.detokenize(&ids).unwrap(), "");
    }

    #[test]
    fn tokenize_unknown_word_names_it() {
        let v = Vocab::template();
        let err = v.tokenize("a purple circle").unwrap_err();
        assert!(err.to_string().contains("purple"), "{err}");
    }

    #[test]
    fn detokenize_out_of_range() {
        let v = Vocab::template();
        let err = v.detokenize(&[9999]).unwrap_err();
        assert!(matches!(err, DataError::TokenOutOfRange(9999, _)));
    }

    #[test]
    fn specials_fixed() {
        let v = Vocab::template();
        assert_eq!(v.word(PAD).unwrap(), "<pad>");
        assert_eq!(v.word(BOS).unwrap(), "<bos>");
        assert_eq!(v.word(EOS).unwrap(), "<eos>");
        assert_eq!(v.word(BOI).unwrap(), "<boi>");
        assert_eq!(v.word(EOI).unwrap(), "<eoi>");
        assert_eq!(v.word(SEP).unwrap(), "<sep>");
    }

    #[test]
    fn scene_rejects_shared_cells_and_bad_counts() {
        let o = |cell| SceneObject {
            shape: 0,
            color: 0,
            cell,
        };
        assert!(Scene::new(vec![]).is_err());
        assert!(Scene::new(vec![o(1), o(1)]).is_err());
        assert!(Scene::new(vec![o(0), o(1), o(2), o(3)]).is_err());
        assert!(Scene::new(vec![o(0), o(4), o(8)]).is_ok());
    }
}
