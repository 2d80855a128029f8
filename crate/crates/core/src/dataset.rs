//! Medical samples and the JSONL dataset format.
//!
//! Each line of a dataset file is an object
//! `{"id", "query", "answer", "task", "image", "heatmap"?}` where `image` and
//! `heatmap` are paths relative to the dataset file's directory.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_heatmap, read_tensor, ImageTensor, LesionHeatmap};
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ClosedQa,
    OpenQa,
    Report,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::ClosedQa => "closed_qa",
            Task::OpenQa => "open_qa",
            Task::Report => "report",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_qa" => Ok(Task::ClosedQa),
            "open_qa" => Ok(Task::OpenQa),
            "report" => Ok(Task::Report),
            other => Err(Error::validation(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedicalSample {
    pub id: String,
    pub image: ImageTensor,
    pub heatmap: Option<LesionHeatmap>,
    pub query: String,
    pub answer: String,
    pub task: Task,
}

impl MedicalSample {
    pub fn validate(&self) -> Result<()> {
        if tokenize(&self.query).is_empty() {
            return Err(Error::validation(format!(
                "sample {}: empty query",
                self.id
            )));
        }
        if tokenize(&self.answer).is_empty() {
            return Err(Error::validation(format!(
                "sample {}: empty answer",
                self.id
            )));
        }
        if let Some(h) = &self.heatmap {
            if !h.matches(&self.image) {
                return Err(Error::validation(format!(
                    "sample {}: heatmap is {}x{} but image is {}x{}",
                    self.id,
                    h.height(),
                    h.width(),
                    self.image.height(),
                    self.image.width()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    query: String,
    answer: String,
    task: Task,
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heatmap: Option<String>,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Load a JSONL dataset. Samples are returned in file order.
pub fn load_dataset(path: &Path) -> Result<Vec<MedicalSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let dir = base_dir(path);
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::validation(format!(
                "duplicate sample id '{}' at line {}",
                record.id,
                idx + 1
            )));
        }
        let image = read_tensor(&dir.join(&record.image)).map_err(|e| e.for_sample(&record.id))?;
        let heatmap = record
            .heatmap
            .as_ref()
            .map(|p| read_heatmap(&dir.join(p)))
            .transpose()
            .map_err(|e| e.for_sample(&record.id))?;
        let sample = MedicalSample {
            id: record.id,
            image,
            heatmap,
            query: record.query,
            answer: record.answer,
            task: record.task,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// File-system safe stem for a sample id.
pub(crate) fn file_stem(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if safe == id {
        safe
    } else {
        format!(
            "{safe}-{:08x}",
            crate::rng::stable_hash(id.as_bytes()) as u32
        )
    }
}

/// Write `samples` as a JSONL file at `path`, with tensors under
/// `images/` and `heatmaps/` next to it.
pub fn save_dataset(samples: &[MedicalSample], path: &Path) -> Result<()> {
    let dir = base_dir(path);
    for sub in ["images", "heatmaps"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut out = Vec::new();
    for s in samples {
        let stem = file_stem(&s.id);
        let image_rel = format!("images/{stem}.bin");
        crate::tensor::write_tensor(&dir.join(&image_rel), &s.image)?;
        let heatmap_rel = match &s.heatmap {
            Some(h) => {
                let rel = format!("heatmaps/{stem}.bin");
                crate::tensor::write_heatmap(&dir.join(&rel), h)?;
                Some(rel)
            }
            None => None,
        };
        let record = SampleRecord {
            id: s.id.clone(),
            query: s.query.clone(),
            answer: s.answer.clone(),
            task: s.task,
            image: image_rel,
            heatmap: heatmap_rel,
        };
        serde_json::to_writer(&mut out, &record).expect("record serializes");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::write_tensor;

    fn write_image(dir: &Path, name: &str, img: &ImageTensor) {
        write_tensor(&dir.join(name), img).unwrap();
    }

    #[test]
    fn loads_lines_in_order() {
        let tmp = tempfile::tempdir().unwrap();
        let img = ImageTensor::zeros(2, 2, 1).unwrap();
        write_image(tmp.path(), "a.bin", &img);
        let jsonl = tmp.path().join("d.jsonl");
        let lines: Vec<String> = ["s1", "s2", "s3"]
            .iter()
            .map(|id| {
                format!(r#"{{"id":"{id}","query":"is it?","answer":"yes","task":"closed_qa","image":"a.bin"}}"#)
            })
            .collect();
        std::fs::write(&jsonl, lines.join("\n")).unwrap();
        let samples = load_dataset(&jsonl).unwrap();
        let ids: Vec<_> = samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["s1", "s2", "s3"]);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let tmp = tempfile::tempdir().unwrap();
        let jsonl = tmp.path().join("d.jsonl");
        std::fs::write(&jsonl, "").unwrap();
        assert!(load_dataset(&jsonl).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_names_line_number() {
        let tmp = tempfile::tempdir().unwrap();
        let img = ImageTensor::zeros(1, 1, 1).unwrap();
        write_image(tmp.path(), "a.bin", &img);
        let jsonl = tmp.path().join("d.jsonl");
        std::fs::write(
            &jsonl,
            "{\"id\":\"s1\",\"query\":\"q\",\"answer\":\"a\",\"task\":\"open_qa\",\"image\":\"a.bin\"}\n{not json\n",
        )
        .unwrap();
        match load_dataset(&jsonl) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_tensor_length_names_id() {
        let tmp = tempfile::tempdir().unwrap();
        let mut bytes = ImageTensor::zeros(2, 2, 1).unwrap().to_bytes();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(tmp.path().join("bad.bin"), bytes).unwrap();
        let jsonl = tmp.path().join("d.jsonl");
        std::fs::write(
            &jsonl,
            r#"{"id":"broken-7","query":"q","answer":"a","task":"open_qa","image":"bad.bin"}"#,
        )
        .unwrap();
        let err = load_dataset(&jsonl).unwrap_err();
        assert!(matches!(err.root(), Error::Format(_)));
        assert!(err.to_string().contains("broken-7"));
    }

    #[test]
    fn duplicate_id_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write_image(tmp.path(), "a.bin", &ImageTensor::zeros(1, 1, 1).unwrap());
        let line = r#"{"id":"x","query":"q","answer":"a","task":"open_qa","image":"a.bin"}"#;
        let jsonl = tmp.path().join("d.jsonl");
        std::fs::write(&jsonl, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(load_dataset(&jsonl), Err(Error::Validation(_))));
    }

    #[test]
    fn save_then_load_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let img = ImageTensor::new(1, 2, 1, vec![0.25, -1.5]).unwrap();
        let hm = LesionHeatmap::new(1, 2, vec![0.0, 1.0], 0.5).unwrap();
        let samples = vec![MedicalSample {
            id: "case/1".into(),
            image: img,
            heatmap: Some(hm),
            query: "Where is the lesion?".into(),
            answer: "Left lung.".into(),
            task: Task::OpenQa,
        }];
        let path = tmp.path().join("out.jsonl");
        save_dataset(&samples, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, samples);
        let again = tmp.path().join("again").join("out.jsonl");
        std::fs::create_dir_all(again.parent().unwrap()).unwrap();
        save_dataset(&back, &again).unwrap();
        let stem = file_stem("case/1");
        let a = std::fs::read(tmp.path().join(format!("images/{stem}.bin"))).unwrap();
        let b = std::fs::read(tmp.path().join(format!("again/images/{stem}.bin"))).unwrap();
        assert_eq!(a, b);
    }
}
