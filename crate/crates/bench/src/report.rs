use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use flowgs_core::{Error, Result};

/// Metrics selectable for an evaluation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Ssim,
    Rpfd,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            "rpfd" => Ok(Metric::Rpfd),
            other => Err(Error::Config(format!("unknown metric '{other}' (expected psnr, ssim or rpfd)"))),
        }
    }
}

/// Parses a comma-separated metric list such as `psnr,ssim,rpfd`.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let mut out = Vec::new();
    for m in list.split(',').filter(|s| !s.trim().is_empty()) {
        let m: Metric = m.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no metrics requested".into()));
    }
    Ok(out)
}

/// Scores of one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub path: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

/// Per-image fidelity, corpus-level distribution distance and cost accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub scale: f64,
    pub seed: u64,
    pub images: Vec<ImageScore>,
    pub rpfd: Option<f64>,
    pub nfe: usize,
    pub sec_per_image: f64,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

impl MetricReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        mean(self.images.iter().map(|i| i.psnr))
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        mean(self.images.iter().map(|i| i.ssim))
    }

    /// Report text without the wall-clock field, for reproducibility checks.
    pub fn metrics_text(&self) -> String {
        self.render(false)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    fn render(&self, timing: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# scale {} nfe {} seed {}", self.scale, self.nfe, self.seed);
        let _ = writeln!(
            s,
            "# desk metrics: rpfd is a random-projection Frechet distance standing in for FID; no LPIPS"
        );
        let _ = writeln!(s, "# path psnr ssim");
        for img in &self.images {
            let _ = writeln!(s, "{} {} {}", img.path, cell(img.psnr), cell(img.ssim));
        }
        let time = if timing {
            format!("{:.6}", self.sec_per_image)
        } else {
            "-".to_string()
        };
        let _ = writeln!(s, "rpfd {} nfe {} sec_per_image {time}", cell(self.rpfd), self.nfe);
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(true))
    }
}
