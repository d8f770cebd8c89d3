//! Result CSV schema: one row per (case, method, user, seed).

use std::path::Path;

use anyhow::{bail, Context, Result};

pub const HEADER: &str = "scenario,channel,case,method,user,seed,snr_db,similarity,bleu1,bleu2,bleu3,bleu4,min_similarity,min_bleu1,min_bleu2,min_bleu3,min_bleu4,pass,wall_secs_per_iter";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scenario: String,
    pub channel: String,
    pub case: usize,
    pub method: String,
    pub user: usize,
    pub seed: u64,
    pub snr_db: f64,
    pub similarity: f64,
    pub bleu: [f64; 4],
    pub min_similarity: f64,
    pub min_bleu: [f64; 4],
    pub pass: bool,
    pub wall_secs_per_iter: f64,
}

impl ResultRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.2},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{},{:.6}",
            self.scenario,
            self.channel,
            self.case,
            self.method,
            self.user,
            self.seed,
            self.snr_db,
            self.similarity,
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.min_similarity,
            self.min_bleu[0],
            self.min_bleu[1],
            self.min_bleu[2],
            self.min_bleu[3],
            self.pass,
            self.wall_secs_per_iter,
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 19 {
            bail!("expected 19 columns, got {}", f.len());
        }
        Ok(ResultRow {
            scenario: f[0].to_string(),
            channel: f[1].to_string(),
            case: f[2].parse()?,
            method: f[3].to_string(),
            user: f[4].parse()?,
            seed: f[5].parse()?,
            snr_db: f[6].parse()?,
            similarity: f[7].parse()?,
            bleu: [f[8].parse()?, f[9].parse()?, f[10].parse()?, f[11].parse()?],
            min_similarity: f[12].parse()?,
            min_bleu: [
                f[13].parse()?,
                f[14].parse()?,
                f[15].parse()?,
                f[16].parse()?,
            ],
            pass: f[17].parse()?,
            wall_secs_per_iter: f[18].parse()?,
        })
    }
}

/// Writes rows with a config-hash header comment.
pub fn write_csv(path: &Path, config_hash: &str, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={config_hash}\n"));
    out.push_str(HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads a results CSV, returning the config hash and rows.
pub fn read_csv(path: &Path) -> Result<(String, Vec<ResultRow>)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let hash = match lines.next() {
        Some(l) if l.starts_with("# config_hash=") => {
            l.trim_start_matches("# config_hash=").to_string()
        }
        _ => bail!("missing config hash header"),
    };
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => bail!("schema mismatch: header {other:?}"),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(ResultRow::parse(line).with_context(|| format!("row {}", i + 1))?);
    }
    if rows.is_empty() {
        bail!("empty results file {}", path.display());
    }
    Ok((hash, rows))
}
