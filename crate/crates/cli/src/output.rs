use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const PALETTE_JSON: &str = include_str!("../palette.json");

#[derive(Debug, Deserialize)]
pub struct PaletteEntry {
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Debug, Deserialize)]
pub struct Palette {
    pub ignore: [u8; 3],
    pub classes: Vec<PaletteEntry>,
}

impl Palette {
    pub fn builtin() -> Self {
        serde_json::from_str(PALETTE_JSON).expect("palette.json is valid")
    }

    pub fn color(&self, label: u8) -> [u8; 3] {
        self.classes.get(label as usize).map_or(self.ignore, |e| e.color)
    }
}

/// Reproducibility record written beside every run's outputs.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a, C: Serialize> {
    pub command: &'a str,
    pub argv: &'a [String],
    pub seed: Option<u64>,
    pub version: &'static str,
    pub config: C,
}

pub fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))
}

pub fn write_run<C: Serialize>(out: &Path, command: &str, argv: &[String], seed: Option<u64>, config: C) -> Result<()> {
    let rec = RunRecord {
        command,
        argv,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        config,
    };
    write_json(&out.join("run.json"), &rec)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// JSON-lines sink that also echoes each record to the log.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl JsonLines {
    pub fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
            error: None,
        })
    }

    pub fn push(&mut self, record: &impl Serialize) {
        let line = serde_json::to_string(record).expect("log records serialize");
        log::info!("{line}");
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{line}") {
                self.error = Some(e);
            }
        }
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e).with_context(|| format!("cannot write {}", self.path.display()));
        }
        self.out.flush().with_context(|| format!("cannot write {}", self.path.display()))
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}
