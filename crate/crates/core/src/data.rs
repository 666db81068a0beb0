//! Hierarchical synthetic paired data with known class similarity.
//!
//! Classes are grouped into superclasses. Every class prototype is a unit vector in a latent
//! space mixing its superclass direction with a class-specific direction, so prototypes of
//! the same superclass have cosine similarity `within_super_corr` and all others are
//! orthogonal. Each pair draws independent latent noise for its image and its text, then
//! maps the noisy latent through a fixed random linear map per modality.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"RCLD";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_superclasses: usize,
    pub subclasses_per_superclass: usize,
    pub latent_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    /// Cosine similarity between prototypes sharing a superclass, in `[0, 1)`.
    pub within_super_corr: f64,
    pub noise_std: f64,
    /// Training pairs per class.
    pub pairs_per_class: usize,
    /// Held-out pairs, assigned to classes round-robin.
    pub eval_pairs: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        self.num_superclasses * self.subclasses_per_superclass
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {c}")));
        }
        if !(0.0..1.0).contains(&self.within_super_corr) {
            return Err(Error::invalid(format!(
                "within_super_corr must lie in [0, 1), got {}",
                self.within_super_corr
            )));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::invalid(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        if self.image_dim == 0 || self.text_dim == 0 || self.pairs_per_class == 0 {
            return Err(Error::invalid("image_dim, text_dim and pairs_per_class must be >= 1"));
        }
        // Superclass directions plus one fresh direction per class, all orthonormal.
        let needed = self.num_superclasses + c;
        if self.latent_dim < needed {
            return Err(Error::invalid(format!(
                "latent_dim {} too small to host {needed} orthogonal prototype directions",
                self.latent_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Split {
    Train = 0,
    Eval = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub image_raw: Tensor,
    pub text_raw: Tensor,
    pub labels: Vec<u32>,
    /// Ground-truth `C × C` cosine similarity of the latent prototypes.
    pub class_prototype_sim: Tensor,
    /// One noiseless text input per class (`C × text_dim`), used for zero-shot classification.
    pub class_texts: Tensor,
    pub splits: Vec<Split>,
}

/// A materialised mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub image: Tensor,
    pub text: Tensor,
    pub labels: Vec<u32>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_prototype_sim.rows()
    }

    pub fn image_dim(&self) -> usize {
        self.image_raw.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.text_raw.cols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            indices: indices.to_vec(),
            image: self.image_raw.select_rows(indices),
            text: self.text_raw.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&DATASET_MAGIC);
        w.u16(DATASET_VERSION);
        w.u32(self.image_dim() as u32);
        w.u32(self.text_dim() as u32);
        w.u64(self.len() as u64);
        w.u32(self.num_classes() as u32);
        w.f64s(self.image_raw.data());
        w.f64s(self.text_raw.data());
        for &l in &self.labels {
            w.u32(l);
        }
        w.f64s(self.class_prototype_sim.data());
        w.f64s(self.class_texts.data());
        for &s in &self.splits {
            w.u8(s as u8);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        r.magic(DATASET_MAGIC)?;
        let version = r.u16()?;
        if version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion {
                expected: DATASET_VERSION,
                found: version,
            });
        }
        let image_dim = r.u32()? as usize;
        let text_dim = r.u32()? as usize;
        let m = usize::try_from(r.u64()?).map_err(|_| Error::Truncated { what: "dataset" })?;
        let c = r.u32()? as usize;
        let size = |a: usize, b: usize| a.checked_mul(b).ok_or(Error::Truncated { what: "dataset" });
        let image_raw = Tensor::matrix(m, image_dim, r.f64s(size(m, image_dim)?)?)?;
        let text_raw = Tensor::matrix(m, text_dim, r.f64s(size(m, text_dim)?)?)?;
        let mut labels = Vec::with_capacity(m.min(bytes.len() / 4));
        for _ in 0..m {
            let l = r.u32()?;
            if l as usize >= c {
                return Err(Error::Malformed {
                    what: "dataset",
                    detail: format!("label {l} out of range for {c} classes"),
                });
            }
            labels.push(l);
        }
        let class_prototype_sim = Tensor::matrix(c, c, r.f64s(size(c, c)?)?)?;
        let class_texts = Tensor::matrix(c, text_dim, r.f64s(size(c, text_dim)?)?)?;
        let mut splits = Vec::with_capacity(m.min(bytes.len()));
        for _ in 0..m {
            splits.push(match r.u8()? {
                0 => Split::Train,
                1 => Split::Eval,
                t => {
                    return Err(Error::Malformed {
                        what: "dataset",
                        detail: format!("unknown split tag {t}"),
                    })
                }
            });
        }
        r.finish()?;
        Ok(PairedDataset {
            image_raw,
            text_raw,
            labels,
            class_prototype_sim,
            class_texts,
            splits,
        })
    }
}

pub fn save_dataset(ds: &PairedDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ds.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<PairedDataset> {
    PairedDataset::from_bytes(&fs::read(path)?)
}

/// The fixed random structure behind a dataset: prototypes and modality maps.
struct Generator {
    /// `C × latent_dim`, unit rows.
    prototypes: Tensor,
    /// `latent_dim × image_dim`
    image_map: Tensor,
    /// `latent_dim × text_dim`
    text_map: Tensor,
    rng: ChaCha8Rng,
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

/// `count` orthonormal vectors in `dim` dimensions (Gram–Schmidt, applied twice).
fn orthonormal_basis(rng: &mut impl Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(rng, dim, 1.0);
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

impl Generator {
    fn new(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(spec.seed, Stream::Dataset, 0, 0);
        let (s, c, dim) = (spec.num_superclasses, spec.num_classes(), spec.latent_dim);
        let basis = orthonormal_basis(&mut rng, s + c, dim);
        let (shared_w, own_w) = (spec.within_super_corr.sqrt(), (1.0 - spec.within_super_corr).sqrt());
        let mut protos = Vec::with_capacity(c * dim);
        for class in 0..c {
            let sup = &basis[class / spec.subclasses_per_superclass];
            let own = &basis[s + class];
            protos.extend(sup.iter().zip(own).map(|(a, b)| shared_w * a + own_w * b));
        }
        let map_std = 1.0 / (dim as f64).sqrt();
        let image_map = Tensor::matrix(
            dim,
            spec.image_dim,
            gaussian_vec(&mut rng, dim * spec.image_dim, map_std),
        )?;
        let text_map = Tensor::matrix(dim, spec.text_dim, gaussian_vec(&mut rng, dim * spec.text_dim, map_std))?;
        Ok(Generator {
            prototypes: Tensor::matrix(c, dim, protos)?,
            image_map,
            text_map,
            rng,
        })
    }
}

/// Generates the dataset; also returns the noisy image-side latents (`M × latent_dim`).
pub fn generate_dataset_with_latents(spec: &DatasetSpec) -> Result<(PairedDataset, Tensor)> {
    let mut gen = Generator::new(spec)?;
    let c = spec.num_classes();
    let dim = spec.latent_dim;

    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for class in 0..c {
        for _ in 0..spec.pairs_per_class {
            labels.push(class as u32);
            splits.push(Split::Train);
        }
    }
    for j in 0..spec.eval_pairs {
        labels.push((j % c) as u32);
        splits.push(Split::Eval);
    }

    let m = labels.len();
    let mut image_latents = Vec::with_capacity(m * dim);
    let mut text_latents = Vec::with_capacity(m * dim);
    for &l in &labels {
        let proto = gen.prototypes.row(l as usize);
        let img_noise = gaussian_vec(&mut gen.rng, dim, spec.noise_std);
        let txt_noise = gaussian_vec(&mut gen.rng, dim, spec.noise_std);
        image_latents.extend(proto.iter().zip(&img_noise).map(|(p, n)| p + n));
        text_latents.extend(proto.iter().zip(&txt_noise).map(|(p, n)| p + n));
    }
    let image_latents = Tensor::matrix(m, dim, image_latents)?;
    let text_latents = Tensor::matrix(m, dim, text_latents)?;

    let ds = PairedDataset {
        image_raw: image_latents.matmul(&gen.image_map)?,
        text_raw: text_latents.matmul(&gen.text_map)?,
        labels,
        class_prototype_sim: gen.prototypes.matmul_t(&gen.prototypes)?,
        class_texts: gen.prototypes.matmul(&gen.text_map)?,
        splits,
    };
    Ok((ds, image_latents))
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<PairedDataset> {
    generate_dataset_with_latents(spec).map(|(ds, _)| ds)
}

/// Noiseless text input of every class (`C × text_dim`): each prototype pushed through the
/// text map. Used as the class "captions" for zero-shot classification.
pub fn class_text_anchors(spec: &DatasetSpec) -> Result<Tensor> {
    let gen = Generator::new(spec)?;
    gen.prototypes.matmul(&gen.text_map)
}

/// Training-split indices grouped into shuffled batches for one epoch.
///
/// A trailing remainder smaller than two pairs is dropped; a batch size larger than the split
/// yields a single batch.
pub fn batch_indices(ds: &PairedDataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let mut train = ds.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("dataset has no training pairs"));
    }
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(train
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Iterator over materialised batches of one epoch.
pub fn batch_iter(ds: &PairedDataset, batch_size: usize, epoch_seed: u64) -> Result<impl Iterator<Item = Batch> + '_> {
    let batches = batch_indices(ds, batch_size, epoch_seed)?;
    Ok(batches.into_iter().map(move |idx| ds.batch(&idx)))
}
