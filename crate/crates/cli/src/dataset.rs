//! On-disk and generated pair datasets.
//!
//! A dataset directory holds `NNNN_img0.pgm`, `NNNN_img1.pgm` and
//! `NNNN_flow.flo` per pair (PPM images are also accepted).

use std::path::{Path, PathBuf};

use deepmatch::descriptors::GrayImage;
use deepmatch::io::{generate_pair, read_flow, read_image, write_flow, write_image, SyntheticPair};
use deepmatch::training::PairSample;

use crate::config::RunConfig;
use crate::CliError;

/// Generates pairs `first..first + count` of the configured synthetic set.
pub fn generate(cfg: &RunConfig, first: usize, count: usize) -> Result<Vec<SyntheticPair>, CliError> {
    (first..first + count)
        .map(|i| Ok(generate_pair(&cfg.gen.spec(cfg.seed, i, cfg.max_displacement()))?))
        .collect()
}

pub fn to_sample(pair: &SyntheticPair) -> PairSample {
    PairSample {
        image0: GrayImage::from(&pair.image0),
        image1: GrayImage::from(&pair.image1),
        flow: pair.flow.clone(),
    }
}

pub fn write_dataset(dir: &Path, pairs: &[SyntheticPair]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    for (i, p) in pairs.iter().enumerate() {
        write_image(dir.join(format!("{i:04}_img0.pgm")), &p.image0)?;
        write_image(dir.join(format!("{i:04}_img1.pgm")), &p.image1)?;
        write_flow(dir.join(format!("{i:04}_flow.flo")), &p.flow)?;
    }
    Ok(())
}

fn pair_stems(dir: &Path) -> Result<Vec<(PathBuf, PathBuf, PathBuf)>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Io(format!("cannot read {}: {e}", dir.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    let mut out = Vec::new();
    for name in &names {
        for ext in ["pgm", "ppm"] {
            if let Some(stem) = name.strip_suffix(&format!("_img0.{ext}")) {
                let img1 = dir.join(format!("{stem}_img1.{ext}"));
                let flow = dir.join(format!("{stem}_flow.flo"));
                out.push((dir.join(name), img1, flow));
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Io(format!("no *_img0.pgm pairs found in {}", dir.display())));
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<PairSample>, CliError> {
    pair_stems(dir)?
        .into_iter()
        .map(|(a, b, f)| {
            let image0 = GrayImage::from(&read_image(&a)?);
            let image1 = GrayImage::from(&read_image(&b)?);
            let flow = read_flow(&f)?;
            if flow.width() != image0.width || flow.height() != image0.height {
                return Err(CliError::Io(format!("{} does not match the size of {}", f.display(), a.display())));
            }
            Ok(PairSample { image0, image1, flow })
        })
        .collect()
}
