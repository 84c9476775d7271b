use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eeg2img::evalsuite::{reports_csv, MetricReport};
use eeg2img::Result;

use crate::config::RunConfig;
use crate::pipeline::EmbeddingRow;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// An output directory holding the resolved config and tool version.
#[derive(Clone, Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(path)?;
        let dir = Self { path: path.to_path_buf() };
        dir.write("config.toml", cfg.to_toml())?;
        dir.write("VERSION", format!("eeg2img {VERSION}\n"))?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(p, contents)?;
        Ok(())
    }

    pub fn write_metrics(&self, reports: &[MetricReport]) -> Result<()> {
        self.write("metrics.csv", reports_csv(reports))
    }
}

pub fn embeddings_csv(rows: &[EmbeddingRow]) -> String {
    let d = rows.first().map_or(0, |r| r.vector.len());
    let mut s = String::from("source,offset,label");
    for j in 0..d {
        let _ = write!(s, ",z{j}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{}", r.source, r.offset, r.label);
        for v in &r.vector {
            let _ = write!(s, ",{v:.8e}");
        }
        s.push('\n');
    }
    s
}

pub fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:.10e}");
    }
    s
}

/// Quotes a CSV field when it holds a comma, quote or newline.
pub fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}
