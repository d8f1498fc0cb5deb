//! Corpus manifest: one image per line, tab-separated
//! `id  image  scribble  [gt]  [global]`.
//!
//! Empty or `-` fields mean absent. Lines starting with `#` and blank lines
//! are skipped. Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub image: PathBuf,
    pub scribble: PathBuf,
    pub gt: Option<PathBuf>,
    pub global: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in manifest {}", path.display()))
    }

    pub fn parse(text: &str, base: &Path) -> anyhow::Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if fields.len() < 3 || fields.len() > 5 {
                bail!("line {}: expected 3 to 5 tab-separated fields, found {}", n + 1, fields.len());
            }
            let opt = |k: usize| fields.get(k).filter(|f| !f.is_empty() && **f != "-").map(|f| base.join(f));
            let id = fields[0].to_string();
            if id.is_empty() || id.contains(['/', '\\']) {
                bail!("line {}: invalid image id {id:?}", n + 1);
            }
            if !seen.insert(id.clone()) {
                bail!("line {}: duplicate image id {id:?}", n + 1);
            }
            let (Some(image), Some(scribble)) = (opt(1), opt(2)) else {
                bail!("line {}: image and scribble paths are required", n + 1);
            };
            records.push(Record { id, image, scribble, gt: opt(3), global: opt(4) });
        }
        Ok(Manifest { records })
    }

    /// Serializes with paths relative to `base` where possible.
    pub fn to_tsv(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = String::from("# id\timage\tscribble\tgt\tglobal\n");
        for r in &self.records {
            let opt = |p: &Option<PathBuf>| p.as_deref().map(rel).unwrap_or_else(|| "-".into());
            writeln!(out, "{}\t{}\t{}\t{}\t{}", r.id, rel(&r.image), rel(&r.scribble), opt(&r.gt), opt(&r.global))
                .unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::write(path, self.to_tsv(base)).with_context(|| format!("writing manifest {}", path.display()))
    }
}
