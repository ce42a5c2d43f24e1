//! The catalog of enrolled animals and its on-disk format.
//!
//! Files are TOML: a header with the format version, template id and grid
//! dimensions, then one `[[entry]]` table per animal with its barcode in hex.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SubsecRound, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::is_enrollable;
use crate::annotations::{AnnotationStream, FrameImageError, FrameImages};
use crate::barcode::{bitwise_mode, hamming, Barcode, GRID_COLS, GRID_ROWS};
use crate::pipeline::{frame_barcode, PipelineConfig};
use crate::template::TemplateShape;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CattlogError {
    #[error("conflict: cow id `{0}` is already enrolled")]
    Conflict(String),
    #[error("missing cow id `{0}`")]
    MissingId(String),
    #[error("cow id must be nonempty")]
    EmptyId,
    #[error("template mismatch: catalog uses {catalog} but entry uses {entry}")]
    TemplateMismatch { catalog: String, entry: String },
    #[error("no enrollable frame in clip `{0}`: enrollment needs at least one frame showing the full back")]
    NoEnrollableFrame(String),
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("unsupported catalog format_version {found} (expected {FORMAT_VERSION})")]
    Version { found: i64 },
    #[error("corrupt catalog {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] FrameImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CattlogEntry {
    pub cow_id: String,
    pub barcode: Barcode,
    pub frames_used: usize,
    pub source_ref: String,
    pub enrolled_at: DateTime<Utc>,
    pub template_id: String,
}

/// A ranked catalog hit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Match {
    pub cow_id: String,
    pub distance: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cattlog {
    format_version: u32,
    template_id: String,
    grid_rows: u32,
    grid_cols: u32,
    entries: BTreeMap<String, CattlogEntry>,
}

impl Default for Cattlog {
    fn default() -> Self {
        Self::new()
    }
}

/// Inputs describing one enrollment clip.
#[derive(Debug, Clone)]
pub struct Enrollment<'a> {
    pub cow_id: &'a str,
    pub source_ref: &'a str,
    pub enrolled_at: DateTime<Utc>,
}

impl Cattlog {
    /// Empty catalog bound to the standard template.
    pub fn new() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            template_id: TemplateShape::standard().id().to_string(),
            grid_rows: GRID_ROWS,
            grid_cols: GRID_COLS,
            entries: BTreeMap::new(),
        }
    }

    pub fn template_id(&self) -> &str {
        &self.template_id
    }

    pub fn grid(&self) -> (u32, u32) {
        (self.grid_rows, self.grid_cols)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, cow_id: &str) -> Option<&CattlogEntry> {
        self.entries.get(cow_id)
    }

    pub fn contains(&self, cow_id: &str) -> bool {
        self.entries.contains_key(cow_id)
    }

    /// Entries in cow id order.
    pub fn entries(&self) -> impl Iterator<Item = &CattlogEntry> {
        self.entries.values()
    }

    /// Builds (without inserting) an entry from a single-animal clip: every
    /// enrollable frame contributes a barcode and the entry keeps their
    /// bitwise mode.
    pub fn enroll(
        &self,
        stream: &AnnotationStream,
        images: &dyn FrameImages,
        req: &Enrollment<'_>,
        cfg: &PipelineConfig,
    ) -> Result<CattlogEntry, CattlogError> {
        if req.cow_id.is_empty() {
            return Err(CattlogError::EmptyId);
        }
        if self.contains(req.cow_id) {
            return Err(CattlogError::Conflict(req.cow_id.to_string()));
        }
        let template = TemplateShape::standard();
        if template.id() != self.template_id {
            return Err(CattlogError::TemplateMismatch {
                catalog: self.template_id.clone(),
                entry: template.id().to_string(),
            });
        }

        let per_frame: Vec<Option<Barcode>> = stream
            .frames()
            .par_iter()
            .map(|f| {
                if !is_enrollable(f, &cfg.align) {
                    return Ok(None);
                }
                let image = images.frame_image(f)?;
                Ok(frame_barcode(f, &image, template, cfg).ok())
            })
            .collect::<Result<_, FrameImageError>>()?;
        let codes: Vec<Barcode> = per_frame.into_iter().flatten().collect();
        let barcode =
            bitwise_mode(&codes).map_err(|_| CattlogError::NoEnrollableFrame(req.source_ref.to_string()))?;

        Ok(CattlogEntry {
            cow_id: req.cow_id.to_string(),
            barcode,
            frames_used: codes.len(),
            source_ref: req.source_ref.to_string(),
            enrolled_at: req.enrolled_at.trunc_subsecs(0),
            template_id: self.template_id.clone(),
        })
    }

    pub fn add_entry(&mut self, entry: CattlogEntry) -> Result<(), CattlogError> {
        if entry.cow_id.is_empty() {
            return Err(CattlogError::EmptyId);
        }
        if entry.template_id != self.template_id {
            return Err(CattlogError::TemplateMismatch {
                catalog: self.template_id.clone(),
                entry: entry.template_id,
            });
        }
        if self.contains(&entry.cow_id) {
            return Err(CattlogError::Conflict(entry.cow_id));
        }
        self.entries.insert(entry.cow_id.clone(), entry);
        Ok(())
    }

    pub fn remove_entry(&mut self, cow_id: &str) -> Result<CattlogEntry, CattlogError> {
        self.entries
            .remove(cow_id)
            .ok_or_else(|| CattlogError::MissingId(cow_id.to_string()))
    }

    /// Exact scan: ascending distance, ties broken by cow id.
    pub fn match_top_k(&self, query: &Barcode, k: usize) -> Result<Vec<Match>, CattlogError> {
        if self.entries.is_empty() {
            return Err(CattlogError::EmptyCatalog);
        }
        if k == 0 {
            return Err(CattlogError::ZeroK);
        }
        let mut scored: Vec<(u32, &str)> = self
            .entries
            .values()
            .map(|e| (hamming(query, &e.barcode), e.cow_id.as_str()))
            .collect();
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable(k - 1);
            scored.truncate(k);
        }
        scored.sort_unstable();
        Ok(scored
            .into_iter()
            .map(|(distance, id)| Match {
                cow_id: id.to_string(),
                distance,
            })
            .collect())
    }

    pub fn to_toml(&self) -> String {
        let file = CattlogFile {
            format_version: self.format_version as i64,
            template_id: self.template_id.clone(),
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            entry: self
                .entries
                .values()
                .map(|e| EntryRepr {
                    cow_id: e.cow_id.clone(),
                    frames_used: e.frames_used as u64,
                    source_ref: e.source_ref.clone(),
                    enrolled_at: e.enrolled_at,
                    barcode: e.barcode.to_hex(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("catalog serializes")
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self, CattlogError> {
        let corrupt = |message: String| CattlogError::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| corrupt(e.to_string()))?;
        match table.get("format_version").and_then(|v| v.as_integer()) {
            Some(v) if v == FORMAT_VERSION as i64 => {}
            Some(v) => return Err(CattlogError::Version { found: v }),
            None => return Err(corrupt("missing format_version".into())),
        }
        let file: CattlogFile = table.try_into().map_err(|e: toml::de::Error| corrupt(e.to_string()))?;
        if (file.grid_rows, file.grid_cols) != (GRID_ROWS, GRID_COLS) {
            return Err(corrupt(format!(
                "grid {}x{} unsupported (expected {GRID_ROWS}x{GRID_COLS})",
                file.grid_rows, file.grid_cols
            )));
        }
        let mut catalog = Cattlog {
            format_version: FORMAT_VERSION,
            template_id: file.template_id,
            grid_rows: file.grid_rows,
            grid_cols: file.grid_cols,
            entries: BTreeMap::new(),
        };
        for e in file.entry {
            let barcode = Barcode::from_hex(&e.barcode).map_err(|err| corrupt(format!("entry `{}`: {err}", e.cow_id)))?;
            if e.frames_used == 0 {
                return Err(corrupt(format!("entry `{}`: frames_used must be >= 1", e.cow_id)));
            }
            let entry = CattlogEntry {
                cow_id: e.cow_id,
                barcode,
                frames_used: e.frames_used as usize,
                source_ref: e.source_ref,
                enrolled_at: e.enrolled_at,
                template_id: catalog.template_id.clone(),
            };
            catalog.add_entry(entry).map_err(|err| corrupt(err.to_string()))?;
        }
        Ok(catalog)
    }

    pub fn save(&self, path: &Path) -> Result<(), CattlogError> {
        fs::write(path, self.to_toml()).map_err(|source| CattlogError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CattlogError> {
        let text = fs::read_to_string(path).map_err(|source| CattlogError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }
}

#[derive(Serialize, Deserialize)]
struct CattlogFile {
    format_version: i64,
    template_id: String,
    grid_rows: u32,
    grid_cols: u32,
    #[serde(default)]
    entry: Vec<EntryRepr>,
}

#[derive(Serialize, Deserialize)]
struct EntryRepr {
    cow_id: String,
    frames_used: u64,
    source_ref: String,
    enrolled_at: DateTime<Utc>,
    barcode: String,
}
