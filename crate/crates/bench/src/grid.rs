use std::path::{Path, PathBuf};

use flowgs_core::{Error, Image, Result};

use crate::eval::EvalSample;

/// LR (nearest-enlarged to the output grid), bicubic, output and ground truth
/// side by side.
pub fn comparison_grid(sample: &EvalSample) -> Result<Image> {
    let (h, w) = sample.output.dims();
    let lr = sample.lr.nearest(h, w);
    Image::hconcat(&[&lr, &sample.bicubic, &sample.output, &sample.hr])
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Writes one grid PNG per sample into `dir`; returns the written paths.
pub fn write_grids(samples: &[EvalSample], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    samples
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.png", file_stem(&s.name)));
            comparison_grid(s)?.save_png(&path)?;
            Ok(path)
        })
        .collect()
}
