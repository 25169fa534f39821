use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::DataError;

/// Default expression classes: six basic emotions plus neutral.
pub const DEFAULT_CLASSES: [&str; 7] = [
    "anger",
    "disgust",
    "fear",
    "happiness",
    "sadness",
    "surprise",
    "neutral",
];

const HEADER: &str = "path,label";
const CLASSES_DIRECTIVE: &str = "#classes:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub label: usize,
}

/// A labelled image list read from a `path,label` CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub root: PathBuf,
}

impl RunManifest {
    /// Reads a manifest; relative image paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let manifest = Self::parse(&text, root, true)?;
        log::info!(
            "manifest {}: {} samples, class histogram {:?}",
            path.display(),
            manifest.samples.len(),
            manifest
                .class_names
                .iter()
                .zip(manifest.histogram())
                .collect::<Vec<_>>()
        );
        Ok(manifest)
    }

    /// Parses manifest text. With `check_files`, every listed image must exist
    /// under `root`.
    pub fn parse(text: &str, root: PathBuf, check_files: bool) -> Result<Self, DataError> {
        let text = text.strip_prefix('\u{feff}').unwrap_or(text);
        let mut lines = text
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());

        let (header_line, header) = lines.next().ok_or(DataError::Manifest {
            line: 1,
            msg: "empty manifest".into(),
        })?;
        if header.trim() != HEADER {
            return Err(DataError::Manifest {
                line: header_line,
                msg: format!("expected header `{HEADER}`, found `{}`", header.trim()),
            });
        }

        let mut declared: Option<Vec<String>> = None;
        let mut class_names: Vec<String> = Vec::new();
        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        let mut first_data = true;

        for (line_no, line) in lines {
            let line = line.trim();
            if let Some(list) = line.strip_prefix(CLASSES_DIRECTIVE) {
                if !first_data {
                    return Err(DataError::Manifest {
                        line: line_no,
                        msg: "`#classes:` must be the first line after the header".into(),
                    });
                }
                first_data = false;
                let names: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();
                if names.iter().any(String::is_empty) {
                    return Err(DataError::Manifest {
                        line: line_no,
                        msg: "empty class name in `#classes:`".into(),
                    });
                }
                let unique: HashSet<_> = names.iter().collect();
                if unique.len() != names.len() {
                    return Err(DataError::Manifest {
                        line: line_no,
                        msg: "duplicate class name in `#classes:`".into(),
                    });
                }
                class_names = names.clone();
                declared = Some(names);
                continue;
            }
            first_data = false;
            if line.starts_with('#') {
                continue;
            }
            let (path, label) = line.rsplit_once(',').ok_or_else(|| DataError::Manifest {
                line: line_no,
                msg: format!("expected `path,label`, found `{line}`"),
            })?;
            let (path, label) = (path.trim(), label.trim());
            if path.is_empty() || label.is_empty() {
                return Err(DataError::Manifest {
                    line: line_no,
                    msg: "path and label must be non-empty".into(),
                });
            }
            let index = match &declared {
                Some(names) => names.iter().position(|n| n == label).ok_or_else(|| {
                    DataError::Manifest {
                        line: line_no,
                        msg: format!("unknown label `{label}`"),
                    }
                })?,
                None => match class_names.iter().position(|n| n == label) {
                    Some(i) => i,
                    None => {
                        class_names.push(label.to_string());
                        class_names.len() - 1
                    }
                },
            };
            if !seen.insert(path.to_string()) {
                return Err(DataError::Manifest {
                    line: line_no,
                    msg: format!("duplicate path `{path}`"),
                });
            }
            if check_files && !root.join(path).is_file() {
                return Err(DataError::Manifest {
                    line: line_no,
                    msg: format!("image not found: {}", root.join(path).display()),
                });
            }
            samples.push(Sample {
                path: PathBuf::from(path),
                label: index,
            });
        }
        if samples.is_empty() {
            return Err(DataError::Manifest {
                line: header_line,
                msg: "manifest lists no samples".into(),
            });
        }
        Ok(RunManifest {
            class_names,
            samples,
            root,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample count per class index.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    pub fn resolve(&self, sample: &Sample) -> PathBuf {
        self.root.join(&sample.path)
    }

    /// Serializes with a `#classes:` line so label order survives a reload.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "{CLASSES_DIRECTIVE}{}", self.class_names.join(","));
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{}",
                s.path.to_string_lossy().replace('\\', "/"),
                self.class_names[s.label]
            );
        }
        out
    }
}
