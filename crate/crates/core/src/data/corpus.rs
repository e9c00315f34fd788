//! Corpus generation and loading. Generation is a pure function of
//! (seed, counts): a single ChaCha stream drives every choice, files are
//! written in a fixed order, so reruns are byte-identical.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::templates::{caption, qa_templates, QaKind};
use super::{
    io_err, render, scene_records, write_ppm, DataError, ManifestRecord, QaRecord, Result, Scene,
    SceneObject, Vocab, COLORS, GRID, NUM_CLASSES, SHAPES,
};
use crate::rng;

/// Corpus-shape settings; `image_px / patch_px` gives the patch grid side.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub image_px: usize,
    pub patch_px: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 7,
            n_train: 5000,
            n_eval: 1000,
            image_px: 48,
            patch_px: 16,
        }
    }
}

impl DataConfig {
    /// Visual positions per image (patch grid cells).
    pub fn num_patches(&self) -> usize {
        let side = self.image_px / self.patch_px;
        side * side
    }

    pub fn grid_side(&self) -> usize {
        self.image_px / self.patch_px
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(DataError::Malformed {
                what: "data config",
                msg: "sample counts must be positive".into(),
            });
        }
        if self.image_px % self.patch_px != 0 || self.image_px % GRID != 0 {
            return Err(DataError::Malformed {
                what: "data config",
                msg: format!(
                    "image_px {} must divide by patch_px {} and by {}",
                    self.image_px, self.patch_px, GRID
                ),
            });
        }
        Ok(())
    }
}

/// Draw a scene; the first object's (shape, color) may be forced for
/// class-coverage stratification.
fn sample_scene(rng: &mut ChaCha8Rng, forced_class: usize) -> Scene {
    let count = rng.gen_range(1..=3usize);
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    rng::shuffle(rng, &mut cells);
    let mut objects = Vec::with_capacity(count);
    for i in 0..count {
        let (shape, color) = if i == 0 {
            (forced_class / COLORS.len(), forced_class % COLORS.len())
        } else {
            (rng.gen_range(0..SHAPES.len()), rng.gen_range(0..COLORS.len()))
        };
        objects.push(SceneObject {
            shape,
            color,
            cell: cells[i],
        });
    }
    Scene::new(objects).expect("sampled scene is valid")
}

fn build_record(
    id: String,
    image_rel: String,
    scene: &Scene,
    rng: &mut ChaCha8Rng,
) -> ManifestRecord {
    ManifestRecord {
        id,
        image: image_rel,
        caption: caption(scene),
        qa: qa_templates(scene, rng),
        scene: scene_records(scene),
    }
}

fn write_split(
    out_dir: &Path,
    split: &str,
    records: &[(ManifestRecord, Vec<f64>)],
    image_px: usize,
) -> Result<()> {
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| io_err(&images_dir, e))?;
    for (rec, pixels) in records {
        write_ppm(&out_dir.join(&rec.image), pixels, image_px, image_px)?;
    }
    let manifest_path = out_dir.join(format!("{split}.jsonl"));
    let mut f = fs::File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    for (rec, _) in records {
        let line = serde_json::to_string(rec).expect("manifest record serializes");
        writeln!(f, "{line}").map_err(|e| io_err(&manifest_path, e))?;
    }
    Ok(())
}

/// Generate the corpus under `out_dir`: `images/*.ppm`, `train.jsonl`,
/// `eval.jsonl`, `vocab.json` and `data-config.json`. Returns the two
/// manifest paths.
pub fn generate_corpus(cfg: &DataConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut stream = rng::seeded(cfg.seed);
    let mut train_signatures: HashSet<String> = HashSet::new();

    let mut train = Vec::with_capacity(cfg.n_train);
    for i in 0..cfg.n_train {
        let scene = sample_scene(&mut stream, i % NUM_CLASSES);
        train_signatures.insert(scene.signature());
        let rec = build_record(
            format!("train-{i:05}"),
            format!("images/train_{i:05}.ppm"),
            &scene,
            &mut stream,
        );
        let pixels = render(&scene, cfg.image_px);
        train.push((rec, pixels));
    }

    let mut eval = Vec::with_capacity(cfg.n_eval);
    for i in 0..cfg.n_eval {
        // Keep eval scenes unseen in train where possible.
        let mut scene = sample_scene(&mut stream, i % NUM_CLASSES);
        for _ in 0..50 {
            if !train_signatures.contains(&scene.signature()) {
                break;
            }
            scene = sample_scene(&mut stream, i % NUM_CLASSES);
        }
        let rec = build_record(
            format!("eval-{i:05}"),
            format!("images/eval_{i:05}.ppm"),
            &scene,
            &mut stream,
        );
        let pixels = render(&scene, cfg.image_px);
        eval.push((rec, pixels));
    }

    write_split(out_dir, "train", &train, cfg.image_px)?;
    write_split(out_dir, "eval", &eval, cfg.image_px)?;

    let vocab = Vocab::template();
    let vocab_path = out_dir.join("vocab.json");
    let vocab_json = serde_json::to_string_pretty(vocab.words()).expect("vocab serializes");
    fs::write(&vocab_path, vocab_json).map_err(|e| io_err(&vocab_path, e))?;

    let cfg_path = out_dir.join("data-config.json");
    let cfg_json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&cfg_path, cfg_json).map_err(|e| io_err(&cfg_path, e))?;

    Ok((out_dir.join("train.jsonl"), out_dir.join("eval.jsonl")))
}

/// A loaded sample: pixels plus tokenized text and ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Vec<f64>,
    pub caption_text: String,
    pub caption_ids: Vec<u32>,
    pub qa: Vec<QaItem>,
    pub scene: Scene,
}

#[derive(Debug, Clone)]
pub struct QaItem {
    pub question: String,
    pub answer: String,
    pub question_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
    pub kind: QaKind,
}

#[derive(Debug)]
pub struct Corpus {
    pub cfg: DataConfig,
    pub vocab: Vocab,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

fn load_split(dir: &Path, split: &str, vocab: &Vocab) -> Result<Vec<Sample>> {
    let manifest_path = dir.join(format!("{split}.jsonl"));
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut samples = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| DataError::Malformed {
                what: "manifest",
                msg: e.to_string(),
            })?;
        let (image, _, _) = super::read_ppm(&dir.join(&rec.image))?;
        let caption_ids = vocab.tokenize(&rec.caption)?;
        let qa = rec
            .qa
            .iter()
            .map(|QaRecord { q, a }| {
                Ok(QaItem {
                    question_ids: vocab.tokenize(q)?,
                    answer_ids: vocab.tokenize(a)?,
                    kind: QaKind::classify(q).ok_or(DataError::Malformed {
                        what: "manifest",
                        msg: format!("unclassifiable question {q:?}"),
                    })?,
                    question: q.clone(),
                    answer: a.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            scene: rec.scene_struct()?,
            id: rec.id,
            image,
            caption_text: rec.caption,
            caption_ids,
            qa,
        });
    }
    Ok(samples)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let vocab_path = dir.join("vocab.json");
    let vocab_text = fs::read_to_string(&vocab_path).map_err(|e| io_err(&vocab_path, e))?;
    let words: Vec<String> = serde_json::from_str(&vocab_text).map_err(|e| DataError::Malformed {
        what: "vocab",
        msg: e.to_string(),
    })?;
    let vocab = Vocab::from_words(words)?;

    let cfg_path = dir.join("data-config.json");
    let cfg_text = fs::read_to_string(&cfg_path).map_err(|e| io_err(&cfg_path, e))?;
    let cfg: DataConfig = serde_json::from_str(&cfg_text).map_err(|e| DataError::Malformed {
        what: "data config",
        msg: e.to_string(),
    })?;

    let train = load_split(dir, "train", &vocab)?;
    let eval = load_split(dir, "eval", &vocab)?;
    Ok(Corpus {
        cfg,
        vocab,
        train,
        eval,
    })
}
