//! Datasets and the binary `(label, text) -> True/False` task formulation.
//!
//! A C-way dataset becomes a set of binary pairs for training and is decoded
//! by asking every class label the same question and taking the most
//! confident `True`.
//!
//! Canonical dataset format is JSONL: an optional header line
//! `{"name": ..., "classes": [...]}` followed by one
//! `{"text": ..., "label": ..., "split": "train"|"test"}` object per line
//! (`split` defaults to `train`).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::base_lm::{tokenize, BaseLM, Encoding, CLS, SEP};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub class_name: String,
}

impl LabeledExample {
    pub fn new(text: impl Into<String>, class_name: impl Into<String>) -> Self {
        LabeledExample {
            text: text.into(),
            class_name: class_name.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryTaskExample {
    /// Verbalized class label.
    pub label_text: String,
    pub input_text: String,
    pub target: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    /// Fixed order; decoding ties resolve to the earliest class.
    pub classes: Vec<String>,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Class identifier to label text: lowercase, underscores to spaces.
pub fn verbalize(class_name: &str) -> String {
    class_name.to_lowercase().replace('_', " ")
}

/// `[CLS] label [SEP] text`, truncated to the base's maximum length.
pub fn pair_token_ids(base: &BaseLM, label_text: &str, input_text: &str) -> Vec<usize> {
    let mut ids = vec![CLS];
    ids.extend(tokenize(label_text, &base.vocab));
    ids.push(SEP);
    ids.extend(tokenize(input_text, &base.vocab));
    ids
}

pub fn encode_pair(base: &BaseLM, label_text: &str, input_text: &str) -> Result<Encoding> {
    base.encode(&pair_token_ids(base, label_text, input_text))
}

#[derive(Deserialize)]
struct Header {
    #[serde(default)]
    name: Option<String>,
    classes: Vec<String>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledExample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<LabeledExample> {
        match split {
            Split::Train => &mut self.train,
            Split::Test => &mut self.test,
        }
    }

    /// Builds a dataset whose classes are the sorted distinct labels of its examples.
    pub fn from_examples(name: impl Into<String>, train: Vec<LabeledExample>, test: Vec<LabeledExample>) -> Result<Self> {
        let classes: BTreeSet<&str> = train.iter().chain(&test).map(|e| e.class_name.as_str()).collect();
        let classes: Vec<String> = classes.into_iter().map(String::from).collect();
        let ds = Dataset {
            name: name.into(),
            classes,
            train,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Data(format!("dataset {:?} has no classes", self.name)));
        }
        let known: BTreeSet<&str> = self.classes.iter().map(String::as_str).collect();
        if known.len() != self.classes.len() {
            return Err(Error::Data("duplicate class names".into()));
        }
        for e in self.train.iter().chain(&self.test) {
            if e.class_name.is_empty() {
                return Err(Error::Data("empty class name".into()));
            }
            if !known.contains(e.class_name.as_str()) {
                return Err(Error::Data(format!("example label {:?} not among the classes", e.class_name)));
            }
        }
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut header: Option<Header> = None;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: Value = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            let obj = v
                .as_object()
                .ok_or_else(|| parse_err(lineno, "expected a JSON object".into()))?;
            if obj.contains_key("classes") && !obj.contains_key("text") {
                if header.is_some() || !train.is_empty() || !test.is_empty() {
                    return Err(parse_err(lineno, "header must be the first line".into()));
                }
                header = Some(
                    serde_json::from_value(v.clone())
                        .map_err(|e| Error::Data(format!("{}:{lineno}: bad header: {e}", path.display())))?,
                );
                continue;
            }
            let field = |name: &str| -> Result<Option<String>> {
                match obj.get(name) {
                    None | Some(Value::Null) => Ok(None),
                    Some(Value::String(s)) => Ok(Some(s.clone())),
                    Some(other) => Err(Error::Data(format!(
                        "{}:{lineno}: field {name:?} must be a string, got {other}",
                        path.display()
                    ))),
                }
            };
            let text = field("text")?.ok_or_else(|| parse_err(lineno, "missing \"text\"".into()))?;
            let label = field("label")?.ok_or_else(|| parse_err(lineno, "missing \"label\"".into()))?;
            let example = LabeledExample::new(text, label);
            match field("split")?.as_deref() {
                None | Some("train") => train.push(example),
                Some("test") => test.push(example),
                Some(other) => {
                    return Err(Error::Data(format!("{}:{lineno}: unknown split {other:?}", path.display())))
                }
            }
        }
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let ds = match header {
            Some(h) => {
                let ds = Dataset {
                    name: h.name.unwrap_or(name),
                    classes: h.classes,
                    train,
                    test,
                };
                ds.validate()?;
                ds
            }
            None => Dataset::from_examples(name, train, test)?,
        };
        Ok(ds)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut w, &serde_json::json!({ "name": self.name, "classes": self.classes }))?;
        writeln!(w)?;
        for (split, examples) in [("train", &self.train), ("test", &self.test)] {
            for e in examples {
                serde_json::to_writer(
                    &mut w,
                    &serde_json::json!({ "text": e.text, "label": e.class_name, "split": split }),
                )?;
                writeln!(w)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One `True` pair per training example plus `negatives_per_example` `False`
/// pairs whose labels are drawn without replacement from the other classes.
/// The result is shuffled by `seed`.
pub fn make_binary_pairs(ds: &Dataset, negatives_per_example: usize, seed: u64) -> Result<Vec<BinaryTaskExample>> {
    make_pairs_from(&ds.train, &ds.classes, negatives_per_example, seed)
}

pub fn make_pairs_from(
    examples: &[LabeledExample],
    classes: &[String],
    negatives_per_example: usize,
    seed: u64,
) -> Result<Vec<BinaryTaskExample>> {
    if negatives_per_example >= classes.len().max(1) {
        return Err(Error::Config(format!(
            "{negatives_per_example} negatives per example needs more than {} classes",
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(examples.len() * (1 + negatives_per_example));
    for e in examples {
        pairs.push(BinaryTaskExample {
            label_text: verbalize(&e.class_name),
            input_text: e.text.clone(),
            target: true,
        });
        if negatives_per_example == 0 {
            continue;
        }
        let others: Vec<&String> = classes.iter().filter(|c| **c != e.class_name).collect();
        for c in others.choose_multiple(&mut rng, negatives_per_example) {
            pairs.push(BinaryTaskExample {
                label_text: verbalize(c),
                input_text: e.text.clone(),
                target: false,
            });
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Exactly `k` examples per class from `split`, in original order. Each class
/// is drawn from its own seeded permutation, so for a fixed seed the result
/// for `k` is contained in the result for any larger `k`. The other split is
/// kept unchanged.
pub fn subsample_per_class(ds: &Dataset, split: Split, k: usize, seed: u64) -> Result<Dataset> {
    let examples = ds.split(split);
    let mut by_class: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_class.entry(e.class_name.as_str()).or_default().push(i);
    }
    let mut keep = vec![false; examples.len()];
    for (ci, class) in ds.classes.iter().enumerate() {
        let mut idx = by_class.remove(class.as_str()).unwrap_or_default();
        if idx.len() < k {
            return Err(Error::Data(format!(
                "class {class:?} has {} examples in the {split:?} split, {k} requested",
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(ci as u64));
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            keep[i] = true;
        }
    }
    let mut out = ds.clone();
    *out.split_mut(split) = examples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: String,
    pub confidence: f32,
    /// Every class with its `P(True)`, most confident first; ties keep class order.
    pub ranking: Vec<(String, f32)>,
}

/// Evaluates `confidence(class)` once per class and returns the argmax,
/// breaking exact ties in favour of the earlier class.
pub fn predict_class<F>(mut confidence: F, classes: &[String]) -> Result<Prediction>
where
    F: FnMut(&str) -> Result<f32>,
{
    if classes.is_empty() {
        return Err(Error::Data("cannot decode over an empty class list".into()));
    }
    let mut ranking = Vec::with_capacity(classes.len());
    for c in classes {
        ranking.push((c.clone(), confidence(c)?));
    }
    let mut best = 0;
    for (i, (_, p)) in ranking.iter().enumerate() {
        if *p > ranking[best].1 {
            best = i;
        }
    }
    let (class, conf) = ranking[best].clone();
    ranking.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    Ok(Prediction {
        class,
        confidence: conf,
        ranking,
    })
}

/// `PlayMusic` / `playMusic` to `play_music`.
pub fn snake_case(name: &str) -> String {
    let mut out = String::new();
    for (i, ch) in name.chars().enumerate() {
        if ch.is_uppercase() && i > 0 && !out.ends_with('_') {
            out.push('_');
        }
        out.extend(ch.to_lowercase());
    }
    out
}

/// Reads the SNIPS benchmark layout: `train_<Intent>_full.json` (train) and
/// `validate_<Intent>.json` (test) files anywhere under `dir`, each mapping the
/// intent name to a list of `{"data": [{"text": ...}, ...]}` utterances.
pub fn convert_snips(dir: &Path) -> Result<Dataset> {
    let mut files = Vec::new();
    collect_json(dir, &mut files)?;
    files.sort();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for f in files {
        let stem = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let split = if stem.starts_with("train_") {
            Split::Train
        } else if stem.starts_with("validate_") {
            Split::Test
        } else {
            continue;
        };
        // the raw files are not always valid UTF-8
        let raw = fs::read(&f)?;
        let v: Value = serde_json::from_str(&String::from_utf8_lossy(&raw))
            .map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Data(format!("{}: expected an object", f.display())))?;
        for (intent, utterances) in obj {
            let label = snake_case(intent);
            let list = utterances
                .as_array()
                .ok_or_else(|| Error::Data(format!("{}: {intent} is not a list", f.display())))?;
            for u in list {
                let text: String = u["data"]
                    .as_array()
                    .ok_or_else(|| Error::Data(format!("{}: utterance without data", f.display())))?
                    .iter()
                    .filter_map(|chunk| chunk["text"].as_str())
                    .collect();
                let example = LabeledExample::new(text.trim(), label.clone());
                match split {
                    Split::Train => train.push(example),
                    Split::Test => test.push(example),
                }
            }
        }
    }
    if train.is_empty() && test.is_empty() {
        return Err(Error::Data(format!("no SNIPS intent files under {}", dir.display())));
    }
    Dataset::from_examples("snips", train, test)
}

fn collect_json(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_json(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Reads the CLINC150 `data_full.json` layout (`{"train": [[text, label], ...],
/// "test": [...], ...}`). Out-of-scope splits are skipped unless `include_oos`.
pub fn convert_clinc(path: &Path, include_oos: bool) -> Result<Dataset> {
    let v: Value = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let read = |key: &str| -> Result<Vec<LabeledExample>> {
        let Some(list) = v.get(key) else {
            return Ok(Vec::new());
        };
        let list = list
            .as_array()
            .ok_or_else(|| Error::Data(format!("{}: {key} is not a list", path.display())))?;
        list.iter()
            .map(|item| match item.as_array().map(Vec::as_slice) {
                Some([Value::String(t), Value::String(l)]) => Ok(LabeledExample::new(t.clone(), l.clone())),
                _ => Err(Error::Data(format!("{}: {key}: expected [text, label], got {item}", path.display()))),
            })
            .collect()
    };
    let mut train = read("train")?;
    let mut test = read("test")?;
    if include_oos {
        train.extend(read("oos_train")?);
        test.extend(read("oos_test")?);
    }
    if train.is_empty() {
        return Err(Error::Data(format!("{}: no training examples", path.display())));
    }
    Dataset::from_examples("clinc150", train, test)
}
