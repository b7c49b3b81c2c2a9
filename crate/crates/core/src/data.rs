//! Image datasets: the seeded `synth-cls` generator and the on-disk
//! directory format (`images.lastd` plus `labels.csv`).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::Tensor;
use crate::weights::{self, DATASET_MAGIC};

pub const IMAGES_FILE: &str = "images.lastd";
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, C, H, W]`, every value `f32`-representable.
    images: Tensor,
    labels: Vec<usize>,
    splits: Vec<Split>,
    num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    id: usize,
    label: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, splits: Vec<Split>, num_classes: usize) -> Result<Self> {
        let n = labels.len();
        if images.rank() != 4 || images.shape()[0] != n || splits.len() != n {
            return Err(Error::shape("dataset", images.shape(), &[n]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            images,
            labels,
            splits,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Sample ids in `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Images at `indices` stacked to `[b, C, H, W]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    index: i,
                    len: self.len(),
                });
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Tensor::new(shape, data)
    }

    /// SHA-256 over the image and label files' contents.
    pub fn checksum(&self) -> String {
        let mut bytes = self.images_bytes();
        bytes.extend_from_slice(self.labels_csv().as_bytes());
        crate::io::sha256_hex(&bytes)
    }

    fn images_bytes(&self) -> Vec<u8> {
        let meta = serde_json::json!({ "num_classes": self.num_classes });
        weights::encode(DATASET_MAGIC, &meta, &[("images", &self.images)])
    }

    fn labels_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (id, (&label, &split)) in self.labels.iter().zip(&self.splits).enumerate() {
            w.serialize(LabelRow { id, label, split }).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("ascii csv")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::io::write_atomic(&dir.join(IMAGES_FILE), &self.images_bytes())?;
        crate::io::write_atomic(&dir.join(LABELS_FILE), self.labels_csv().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let images_path = dir.join(IMAGES_FILE);
        let file = weights::read_file(&images_path, DATASET_MAGIC)?;
        let images = file
            .get("images")
            .cloned()
            .ok_or_else(|| Error::format(&images_path, "missing tensor images"))?;
        let num_classes = file
            .meta
            .get("num_classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::format(&images_path, "missing num_classes"))? as usize;

        let labels_path = dir.join(LABELS_FILE);
        let text = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for (row, rec) in csv::Reader::from_reader(text.as_slice())
            .deserialize::<LabelRow>()
            .enumerate()
        {
            let rec = rec.map_err(|e| Error::format(&labels_path, e.to_string()))?;
            if rec.id != row {
                return Err(Error::format(
                    &labels_path,
                    format!("row {row} has id {}, ids must be 0..n in order", rec.id),
                ));
            }
            labels.push(rec.label);
            splits.push(rec.split);
        }
        Dataset::new(images, labels, splits, num_classes).map_err(|e| Error::format(dir, e.to_string()))
    }
}

/// Parameters of the `synth-cls` task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train: usize,
    pub eval: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Seed for the class patterns; the sample seed is separate.
    pub task_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 2,
            train: 800,
            eval: 200,
            noise: 2.0,
            task_seed: 7,
        }
    }
}

/// Generates the `synth-cls` task.
///
/// Every class `c` owns a fixed random patch pattern `P_c` (unit-variance
/// pixels). An image of class `c` tiles the patch grid with `s_j·P_c +
/// noise`, each patch `j` carrying an independent random sign `s_j = ±1`.
/// The label is therefore an even function of each patch: the
/// class-conditional distribution of any linear feature of the image is
/// symmetric about the same point for every class, so a linear readout of
/// pooled features sits at chance while attention, which can weigh
/// patches by content, separates the classes.
///
/// Labels cycle `0, 1, .., K-1` within each split; samples `0..train` are
/// the training split.
pub fn synth_cls(config: &SynthConfig, backbone: &BackboneConfig, seed: u64) -> Result<Dataset> {
    if config.num_classes < 2 || config.num_classes > 10 {
        return Err(Error::Config(format!(
            "synth-cls needs 2..=10 classes, got {}",
            config.num_classes
        )));
    }
    if config.train + config.eval == 0 {
        return Err(Error::Config("synth-cls needs at least one sample".into()));
    }
    if !(config.noise.is_finite() && config.noise >= 0.0) {
        return Err(Error::Config("synth-cls noise must be non-negative".into()));
    }
    backbone.validate()?;
    let (c, s, p) = (backbone.channels, backbone.image_size, backbone.patch_size);
    let grid = s / p;
    let patch_dim = c * p * p;

    let mut task_rng = nn::seeded_rng(config.task_seed, 0x7A5C);
    let patterns: Vec<Vec<f64>> = (0..config.num_classes)
        .map(|_| (0..patch_dim).map(|_| StandardNormal.sample(&mut task_rng)).collect())
        .collect();

    let n = config.train + config.eval;
    let mut rng = nn::seeded_rng(seed, 0xDA7A);
    let mut data = vec![0.0; n * c * s * s];
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for i in 0..n {
        let (split, k) = if i < config.train {
            (Split::Train, i)
        } else {
            (Split::Eval, i - config.train)
        };
        let label = k % config.num_classes;
        let img = &mut data[i * c * s * s..(i + 1) * c * s * s];
        for gy in 0..grid {
            for gx in 0..grid {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for (e, &pat) in patterns[label].iter().enumerate() {
                    let (ch, rest) = (e / (p * p), e % (p * p));
                    let (y, x) = (gy * p + rest / p, gx * p + rest % p);
                    let z: f64 = StandardNormal.sample(&mut rng);
                    img[ch * s * s + y * s + x] = (sign * pat + config.noise * z) as f32 as f64;
                }
            }
        }
        labels.push(label);
        splits.push(split);
    }
    let images = Tensor::new(vec![n, c, s, s], data)?;
    Dataset::new(images, labels, splits, config.num_classes)
}
