use std::path::Path;

use flowgs_core::imaging::{degrade, read_manifest, synth_dataset, Image};
use flowgs_core::metrics::{psnr, rp_frechet, ssim};
use flowgs_core::pipeline::{bicubic_baseline, TrainedModel};
use flowgs_core::{Error, Result};

use crate::report::{ImageScore, Metric, MetricReport};

/// A named ground-truth image.
#[derive(Clone, Debug)]
pub struct EvalImage {
    pub name: String,
    pub hr: Image,
}

impl EvalImage {
    /// Synthetic images named `synth/<split>/<index>`.
    pub fn synthetic(split: &str, seed: u64, count: usize, size: usize) -> Result<Vec<Self>> {
        Ok(synth_dataset(seed, count, size)?
            .into_iter()
            .enumerate()
            .map(|(i, hr)| EvalImage {
                name: format!("synth/{split}/{i:04}"),
                hr,
            })
            .collect())
    }

    /// Images listed in a manifest, named by their paths.
    pub fn from_manifest(path: &Path) -> Result<Vec<Self>> {
        read_manifest(path)?
            .into_iter()
            .map(|p| {
                Ok(EvalImage {
                    hr: Image::load_png(&p)?,
                    name: p.display().to_string(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub scale: f64,
    pub nfe: usize,
    pub seed: u64,
    pub metrics: Vec<Metric>,
}

/// Everything shown in one comparison grid.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub name: String,
    pub lr: Image,
    pub bicubic: Image,
    pub output: Image,
    pub hr: Image,
}

#[derive(Clone, Debug)]
pub struct EvalRun {
    pub report: MetricReport,
    /// Same metrics for the bicubic baseline.
    pub baseline: MetricReport,
    pub samples: Vec<EvalSample>,
}

/// Seed of the RP-Fréchet feature projection.
pub const RPFD_SEED: u64 = 7;

fn score(name: &str, out: &Image, hr: &Image, metrics: &[Metric]) -> Result<ImageScore> {
    Ok(ImageScore {
        path: name.to_string(),
        psnr: metrics.contains(&Metric::Psnr).then(|| psnr(out, hr)).transpose()?,
        ssim: metrics.contains(&Metric::Ssim).then(|| ssim(out, hr)).transpose()?,
    })
}

fn corpus_distance(outs: &[&Image], hrs: &[&Image], metrics: &[Metric]) -> Result<Option<f64>> {
    if !metrics.contains(&Metric::Rpfd) {
        return Ok(None);
    }
    Ok(Some(rp_frechet(outs, hrs, RPFD_SEED)?.distance))
}

/// Degrades each image at the evaluation scale, super-resolves it with image
/// `i` seeded by `seed + i`, and scores output and bicubic baseline against the
/// HR image cropped to the output grid. Wall-clock covers inference only.
pub fn evaluate(model: &TrainedModel, images: &[EvalImage], opts: &EvalOptions) -> Result<EvalRun> {
    if images.is_empty() {
        return Err(Error::invalid("evaluate", "no images to evaluate"));
    }
    let mut samples = Vec::with_capacity(images.len());
    let mut seconds = 0.0;
    let mut nfe = 0;
    for (i, img) in images.iter().enumerate() {
        let pair = degrade(&img.hr, opts.scale)?;
        let out = model.infer(&pair.lr, opts.scale, opts.nfe, opts.seed + i as u64)?;
        seconds += out.seconds;
        nfe = out.nfe;
        let (h, w) = out.image.dims();
        samples.push(EvalSample {
            name: img.name.clone(),
            bicubic: bicubic_baseline(&pair.lr, opts.scale)?,
            lr: pair.lr,
            output: out.image,
            hr: img.hr.crop(h, w)?,
        });
    }
    let build = |pick: fn(&EvalSample) -> &Image, nfe: usize, sec: f64| -> Result<MetricReport> {
        let images = samples
            .iter()
            .map(|s| score(&s.name, pick(s), &s.hr, &opts.metrics))
            .collect::<Result<Vec<_>>>()?;
        let outs: Vec<&Image> = samples.iter().map(pick).collect();
        let hrs: Vec<&Image> = samples.iter().map(|s| &s.hr).collect();
        Ok(MetricReport {
            scale: opts.scale,
            seed: opts.seed,
            images,
            rpfd: corpus_distance(&outs, &hrs, &opts.metrics)?,
            nfe,
            sec_per_image: sec,
        })
    };
    let report = build(|s| &s.output, nfe, seconds / images.len() as f64)?;
    let baseline = build(|s| &s.bicubic, 0, 0.0)?;
    Ok(EvalRun {
        report,
        baseline,
        samples,
    })
}

/// Quality and cost at one step count.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub nfe: usize,
    pub psnr: f64,
    pub sec_per_image: f64,
}

/// Mean PSNR and inference time per image for each step count.
pub fn nfe_sweep(model: &TrainedModel, images: &[EvalImage], scale: f64, nfes: &[usize], seed: u64) -> Result<Vec<SweepPoint>> {
    nfes.iter()
        .map(|&nfe| {
            let run = evaluate(
                model,
                images,
                &EvalOptions {
                    scale,
                    nfe,
                    seed,
                    metrics: vec![Metric::Psnr],
                },
            )?;
            Ok(SweepPoint {
                nfe,
                psnr: run.report.mean_psnr().unwrap_or(f64::NAN),
                sec_per_image: run.report.sec_per_image,
            })
        })
        .collect()
}

/// Plot data for a sweep: a header and one `nfe psnr sec_per_image` row per point.
pub fn sweep_table(points: &[SweepPoint]) -> String {
    let mut s = String::from("nfe psnr sec_per_image\n");
    for p in points {
        s += &format!("{} {:.6} {:.6}\n", p.nfe, p.psnr, p.sec_per_image);
    }
    s
}

/// Parses a comma-separated step-count list such as `1,2,4,8,128`.
pub fn parse_nfe_list(list: &str) -> Result<Vec<usize>> {
    let v = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("invalid step count '{}'", s.trim()))),
        })
        .collect::<Result<Vec<_>>>()?;
    if v.is_empty() {
        return Err(Error::Config("empty step-count list".into()));
    }
    Ok(v)
}
