//! Tab-separated manifest files.
//!
//! Classification:
//!
//! ```text
//! image<TAB>class_a,class_b,class_c
//! images/0001.png<TAB>0,1,0
//! ```
//!
//! Segmentation:
//!
//! ```text
//! image<TAB>mask
//! images/0001.png<TAB>masks/0001.png
//! ```
//!
//! Lines end with `\n`, paths are relative to the manifest's directory and
//! label vectors have exactly one `0`/`1` entry per header class.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Image, Targets};
use crate::error::{input_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassificationEntry {
    pub image: String,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassificationManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ClassificationEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationEntry {
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SegmentationManifest {
    pub entries: Vec<SegmentationEntry>,
}

fn check_path(p: &str, line: usize) -> Result<()> {
    if p.is_empty() || p.contains('\t') || p.contains('\n') {
        return Err(input_err!("line {line}: invalid path `{p}`"));
    }
    Ok(())
}

impl ClassificationManifest {
    pub fn render(&self) -> String {
        let mut s = format!("image\t{}\n", self.class_names.join(","));
        for e in &self.entries {
            let labels: Vec<String> = e.labels.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{}\t{}\n", e.image, labels.join(",")));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| input_err!("empty manifest"))?;
        let (first, classes) = header
            .split_once('\t')
            .ok_or_else(|| input_err!("header must be `image<TAB>class,...`"))?;
        if first != "image" || classes.is_empty() {
            return Err(input_err!("header must be `image<TAB>class,...`, got `{header}`"));
        }
        let class_names: Vec<String> = classes.split(',').map(str::to_string).collect();
        let mut entries = Vec::new();
        for (i, line) in lines {
            let ln = i + 1;
            if line.is_empty() {
                continue;
            }
            let (path, labels) = line
                .split_once('\t')
                .ok_or_else(|| input_err!("line {ln}: expected `path<TAB>labels`"))?;
            check_path(path, ln)?;
            let labels = labels
                .split(',')
                .map(|v| match v {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(input_err!("line {ln}: label `{other}` is not 0/1")),
                })
                .collect::<Result<Vec<_>>>()?;
            if labels.len() != class_names.len() {
                return Err(input_err!(
                    "line {ln}: {} labels for {} classes",
                    labels.len(),
                    class_names.len()
                ));
            }
            entries.push(ClassificationEntry {
                image: path.to_string(),
                labels,
            });
        }
        Ok(Self {
            class_names,
            entries,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    /// Reads every image, resolving paths against `root`.
    pub fn load(&self, root: &Path, source: &str) -> Result<Dataset> {
        let images = self
            .entries
            .iter()
            .map(|e| Image::load_gray(root.join(&e.image)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            images,
            targets: Targets::Labels(self.entries.iter().map(|e| e.labels.clone()).collect()),
            class_names: self.class_names.clone(),
            source: source.to_string(),
        })
    }
}

impl SegmentationManifest {
    pub fn render(&self) -> String {
        let mut s = String::from("image\tmask\n");
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\n", e.image, e.mask));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| input_err!("empty manifest"))?;
        if header != "image\tmask" {
            return Err(input_err!("header must be `image<TAB>mask`, got `{header}`"));
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let ln = i + 1;
            if line.is_empty() {
                continue;
            }
            let (image, mask) = line
                .split_once('\t')
                .ok_or_else(|| input_err!("line {ln}: expected `image<TAB>mask`"))?;
            check_path(image, ln)?;
            check_path(mask, ln)?;
            entries.push(SegmentationEntry {
                image: image.to_string(),
                mask: mask.to_string(),
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    /// Reads images and masks; masks are binarized at 0.5 and must match image size.
    pub fn load(&self, root: &Path, source: &str) -> Result<Dataset> {
        let mut images = Vec::with_capacity(self.entries.len());
        let mut masks = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let img = Image::load_gray(root.join(&e.image))?;
            let mut mask = Image::load_gray(root.join(&e.mask))?;
            if (mask.height, mask.width) != (img.height, img.width) {
                return Err(input_err!(
                    "mask {} is {}x{} but image is {}x{}",
                    e.mask,
                    mask.height,
                    mask.width,
                    img.height,
                    img.width
                ));
            }
            for v in &mut mask.data {
                *v = if *v >= 0.5 { 1.0 } else { 0.0 };
            }
            images.push(img);
            masks.push(mask);
        }
        Ok(Dataset {
            images,
            targets: Targets::Masks(masks),
            class_names: vec!["lesion".to_string()],
            source: source.to_string(),
        })
    }
}

/// Directory containing a manifest file, used to resolve its relative paths.
pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_text_format_is_exact() {
        let m = ClassificationManifest {
            class_names: vec!["a".into(), "b".into()],
            entries: vec![
                ClassificationEntry {
                    image: "img/0.png".into(),
                    labels: vec![0, 1],
                },
                ClassificationEntry {
                    image: "img/1.png".into(),
                    labels: vec![1, 1],
                },
            ],
        };
        let text = m.render();
        assert_eq!(text, "image\ta,b\nimg/0.png\t0,1\nimg/1.png\t1,1\n");
        assert_eq!(ClassificationManifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn segmentation_text_format_is_exact() {
        let m = SegmentationManifest {
            entries: vec![SegmentationEntry {
                image: "x.png".into(),
                mask: "x_mask.png".into(),
            }],
        };
        assert_eq!(m.render(), "image\tmask\nx.png\tx_mask.png\n");
        assert_eq!(SegmentationManifest::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(ClassificationManifest::parse("image\ta,b\nx.png\t0\n").is_err());
        assert!(ClassificationManifest::parse("image\ta\nx.png\t2\n").is_err());
        assert!(ClassificationManifest::parse("path\ta\n").is_err());
        assert!(SegmentationManifest::parse("image\tmask\nx.png\n").is_err());
    }
}
