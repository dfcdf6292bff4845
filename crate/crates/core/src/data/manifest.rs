use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grayscale image with 8-bit intensities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Validation(format!(
                "image of {height}x{width} cannot hold {} pixels",
                pixels.len()
            )));
        }
        Ok(ImageGrid { height, width, pixels })
    }

    /// Intensities rescaled to `[-1, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 127.5 - 1.0).collect()
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    fn rows(&self) -> Vec<Vec<u8>> {
        self.pixels.chunks(self.width).map(<[u8]>::to_vec).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image: ImageGrid,
    pub text: String,
    /// 1 = sarcastic, 0 = non-sarcastic.
    pub label: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub name: String,
    pub image_size: usize,
    #[serde(default)]
    pub vocab: Option<String>,
}

/// Ordered collection of samples with unique ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub meta: ManifestMeta,
    pub samples: Vec<Sample>,
}

/// Line layout, in serialization order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    image: Vec<Vec<i64>>,
    text: String,
    label: i64,
}

impl Manifest {
    pub fn new(name: &str, samples: Vec<Sample>) -> Result<Self> {
        let image_size = samples.first().map(|s| s.image.height).unwrap_or(0);
        let m = Manifest {
            meta: ManifestMeta {
                name: name.to_string(),
                image_size,
                vocab: None,
            },
            samples,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id `{}`", s.id)));
            }
            if s.label > 1 {
                return Err(Error::Validation(format!("sample `{}` has label {}", s.id, s.label)));
            }
        }
        Ok(())
    }

    /// Checks every image against the square size the encoder expects.
    pub fn check_image_size(&self, size: usize) -> Result<()> {
        match self
            .samples
            .iter()
            .find(|s| s.image.height != size || s.image.width != size)
        {
            Some(s) => Err(Error::Validation(format!(
                "sample `{}` in `{}` is {}x{}, encoder expects {size}x{size}",
                s.id, self.meta.name, s.image.height, s.image.width
            ))),
            None => Ok(()),
        }
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0, 0];
        for s in &self.samples {
            c[s.label as usize] += 1;
        }
        c
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let line = Line {
                id: s.id.clone(),
                image: s
                    .image
                    .rows()
                    .into_iter()
                    .map(|r| r.into_iter().map(i64::from).collect())
                    .collect(),
                text: s.text.clone(),
                label: s.label as i64,
            };
            out.push_str(&serde_json::to_string(&line).expect("manifest line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(name: &str, text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let line: Line = serde_json::from_str(raw).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            let height = line.image.len();
            let width = line.image.first().map(Vec::len).unwrap_or(0);
            if height == 0 || width == 0 || line.image.iter().any(|r| r.len() != width) {
                return Err(Error::Validation(format!(
                    "line {line_no}: image must be a non-empty rectangular grid"
                )));
            }
            let mut pixels = Vec::with_capacity(height * width);
            for &p in line.image.iter().flatten() {
                if !(0..=255).contains(&p) {
                    return Err(Error::Validation(format!(
                        "line {line_no}: pixel value {p} outside 0..=255"
                    )));
                }
                pixels.push(p as u8);
            }
            if !(0..=1).contains(&line.label) {
                return Err(Error::Validation(format!(
                    "line {line_no}: label {} must be 0 or 1",
                    line.label
                )));
            }
            samples.push(Sample {
                id: line.id,
                image: ImageGrid::new(height, width, pixels)?,
                text: line.text,
                label: line.label as u8,
            });
        }
        Manifest::new(name, samples)
    }
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(manifest.to_jsonl().as_bytes())?;
    Ok(())
}

/// Loads a JSON Lines manifest; the manifest is named after the file stem.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Manifest::from_jsonl(&name, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, label: u8) -> Sample {
        Sample {
            id: id.into(),
            image: ImageGrid::new(2, 2, vec![0, 10, 200, 255]).unwrap(),
            text: "so nice".into(),
            label,
        }
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let m = Manifest::new("pool", vec![sample("a", 0), sample("b", 1)]).unwrap();
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_jsonl(), fs::read_to_string(&path).unwrap());
    }

    #[test]
    fn line_layout_is_fixed() {
        let m = Manifest::new("x", vec![sample("a", 1)]).unwrap();
        assert_eq!(
            m.to_jsonl(),
            "{\"id\":\"a\",\"image\":[[0,10],[200,255]],\"text\":\"so nice\",\"label\":1}\n"
        );
    }

    #[test]
    fn missing_label_reports_line() {
        let text = "{\"id\":\"a\",\"image\":[[1]],\"text\":\"t\",\"label\":0}\n{\"id\":\"b\",\"image\":[[1]],\"text\":\"t\"}\n";
        match Manifest::from_jsonl("m", text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_pixel_is_a_validation_error() {
        let text = "{\"id\":\"a\",\"image\":[[1,256]],\"text\":\"t\",\"label\":0}\n";
        assert!(matches!(Manifest::from_jsonl("m", text), Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        assert!(Manifest::new("m", vec![sample("a", 0), sample("a", 1)]).is_err());
    }
}
