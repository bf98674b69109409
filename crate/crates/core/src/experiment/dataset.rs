use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Contour;
use crate::grid::Image;
use crate::io::{read_contour, read_pgm, write_contour, write_json, write_mask_pgm, write_pgm};
use crate::rng::{derive_seed, stream};
use crate::shape_model::{generate_phantom, make_virtual_sample, PhantomConfig, PhantomSample, ShapeModel};
use crate::tensor::{load_checkpoint, save_checkpoint, Tensor};

/// Index of a generated corpus: which sample ids went to which split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub fn sample_id(i: usize) -> String {
    format!("{i:04}")
}

/// Generates `count` phantoms in parallel, sample `i` from stream `i`.
pub fn generate_corpus(seed: u64, count: usize, cfg: &PhantomConfig) -> Vec<PhantomSample> {
    let seed = derive_seed(seed, "phantom");
    (0..count)
        .into_par_iter()
        .map(|i| generate_phantom(&mut stream(seed, i as u64), cfg))
        .collect()
}

/// Writes `images/`, `masks/`, `contours/` and `dataset.json` under `dir`.
/// The first `n_train` samples form the training split.
pub fn write_corpus(dir: &Path, seed: u64, cfg: &PhantomConfig, samples: &[PhantomSample], n_train: usize) -> Result<DatasetIndex> {
    for sub in ["images", "masks", "contours"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    samples.par_iter().enumerate().try_for_each(|(i, s)| -> Result<()> {
        let id = sample_id(i);
        write_pgm(&dir.join("images").join(format!("{id}.pgm")), &s.image)?;
        write_mask_pgm(&dir.join("masks").join(format!("{id}.pgm")), &s.seg)?;
        write_contour(&dir.join("contours").join(format!("{id}.txt")), &s.contour)
    })?;
    let ids: Vec<String> = (0..samples.len()).map(sample_id).collect();
    let index = DatasetIndex {
        seed,
        phantom: cfg.clone(),
        train: ids[..n_train].to_vec(),
        test: ids[n_train..].to_vec(),
    };
    write_json(&dir.join("dataset.json"), &index)?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let p = dir.join("dataset.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads samples back from their PGM images and contour files. Masks are
/// re-rasterized from the contours.
pub fn read_split(dir: &Path, ids: &[String]) -> Result<Vec<PhantomSample>> {
    ids.par_iter()
        .map(|id| {
            let image = read_pgm(&dir.join("images").join(format!("{id}.pgm")))?;
            let contour = read_contour(&dir.join("contours").join(format!("{id}.txt")))?;
            PhantomSample::new(image, contour)
        })
        .collect()
}

/// Saves samples as one binary pack (`image.{i}` as `[H, W]`, `contour.{i}` as `[P, 2]`).
pub fn save_samples(path: &Path, samples: &[PhantomSample]) -> Result<()> {
    let mut tensors = Vec::with_capacity(samples.len() * 2);
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = s.image.dims();
        tensors.push((format!("image.{i}"), Tensor::new(vec![h, w], s.image.data().to_vec())?));
        tensors.push((format!("contour.{i}"), Tensor::new(vec![s.contour.len(), 2], s.contour.to_flat())?));
    }
    save_checkpoint(path, &tensors)
}

pub fn load_samples(path: &Path) -> Result<Vec<PhantomSample>> {
    let tensors = load_checkpoint(path)?;
    if tensors.len() % 2 != 0 {
        return Err(Error::Format {
            what: "sample pack",
            detail: format!("odd tensor count {}", tensors.len()),
        });
    }
    tensors
        .par_chunks(2)
        .enumerate()
        .map(|(i, pair)| {
            let (img, con) = (&pair[0], &pair[1]);
            if img.0 != format!("image.{i}") || con.0 != format!("contour.{i}") || img.1.shape().len() != 2 {
                return Err(Error::Format {
                    what: "sample pack",
                    detail: format!("unexpected entries `{}`, `{}` at position {i}", img.0, con.0),
                });
            }
            let (h, w) = (img.1.shape()[0], img.1.shape()[1]);
            let image = Image::from_vec(h, w, img.1.data().to_vec())?;
            PhantomSample::new(image, Contour::from_flat(con.1.data())?)
        })
        .collect()
}

/// Draws `count` virtual samples: shape coefficients from N(0, 1) (clamped
/// by the model) and textures warped from `pool`.
pub fn augment(ssm: &ShapeModel, pool: &[PhantomSample], count: usize, seed: u64) -> Result<Vec<PhantomSample>> {
    if pool.is_empty() {
        return Err(Error::Empty("warp pool".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let coeffs: Vec<f64> = (0..ssm.num_components()).map(|_| StandardNormal.sample(&mut rng)).collect();
            make_virtual_sample(&ssm.sample_shape(&coeffs), pool, &mut rng)?.into_sample()
        })
        .collect()
}

/// Dumps the first `n` samples as PGM image, PGM mask and contour text.
pub fn write_preview(dir: &Path, samples: &[PhantomSample], n: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().take(n).enumerate() {
        let id = sample_id(i);
        write_pgm(&dir.join(format!("{id}.pgm")), &s.image)?;
        write_mask_pgm(&dir.join(format!("{id}_mask.pgm")), &s.seg)?;
        write_contour(&dir.join(format!("{id}.txt")), &s.contour)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape_model::build_ssm;

    #[test]
    fn pack_round_trip_is_exact() {
        let cfg = PhantomConfig::scaled(16, 12);
        let samples = generate_corpus(3, 4, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.samples");
        save_samples(&p, &samples).unwrap();
        assert_eq!(load_samples(&p).unwrap(), samples);
    }

    #[test]
    fn corpus_round_trip_quantizes_images_only() {
        let cfg = PhantomConfig::scaled(16, 12);
        let samples = generate_corpus(3, 5, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let index = write_corpus(dir.path(), 3, &cfg, &samples, 4).unwrap();
        assert_eq!(index.train.len(), 4);
        assert_eq!(index.test, vec!["0004".to_string()]);
        assert_eq!(read_index(dir.path()).unwrap(), index);
        let back = read_split(dir.path(), &index.train).unwrap();
        for (a, b) in back.iter().zip(&samples) {
            assert_eq!(a.contour, b.contour);
            assert_eq!(a.seg, b.seg);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn augmentation_is_deterministic_and_consistent() {
        let cfg = PhantomConfig::scaled(16, 12);
        let pool = generate_corpus(1, 12, &cfg);
        let shapes: Vec<_> = pool.iter().map(|s| s.contour.clone()).collect();
        let ssm = build_ssm(&shapes, 3).unwrap();
        let a = augment(&ssm, &pool, 5, 9).unwrap();
        assert_eq!(a, augment(&ssm, &pool, 5, 9).unwrap());
        assert_ne!(a, augment(&ssm, &pool, 5, 10).unwrap());
        for s in &a {
            assert_eq!(s.image.dims(), (16, 16));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
