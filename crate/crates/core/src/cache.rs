//! Persisted backbone taps.
//!
//! A cache directory holds `manifest.json` and `taps.lastc`. The record
//! file is a 24-byte header followed by fixed-stride records, so record `i`
//! starts at `24 + i * record_bytes`:
//!
//! ```text
//! header  magic "LASTC\0" | u16 version | u16 0 | u32 taps | u32 L | u32 d | u32 samples
//! record  u32 sample_id | u32 label | taps·L·d f32, tap-major then token then channel
//! ```
//!
//! All integers and floats are little-endian. Taps are stored as `f32` and
//! widened to `f64` on load; [`LiveSource`] applies the same rounding so
//! cache-fed and live training see identical inputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, TapSchedule};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "taps.lastc";
pub const RECORD_MAGIC: [u8; 6] = *b"LASTC\0";
pub const RECORD_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 24;
const FORMAT: &str = "last-cache";

/// Images forwarded through the backbone per extraction step.
const EXTRACT_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    pub format: String,
    pub version: u16,
    pub backbone_checksum: String,
    pub backbone: BackboneConfig,
    pub dataset_checksum: String,
    pub gap: usize,
    pub samples: usize,
    /// `m + 1`.
    pub taps: usize,
    /// `[L, d]`.
    pub tap_shape: [usize; 2],
    pub dtype: String,
    pub record_bytes: usize,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl CacheManifest {
    pub fn tap_elements(&self) -> usize {
        self.tap_shape[0] * self.tap_shape[1]
    }

    /// Bytes of the record file.
    pub fn records_len(&self) -> usize {
        HEADER_BYTES + self.samples * self.record_bytes
    }

    /// Taps a run at `gap` reads: every `gap / self.gap`-th stored tap.
    pub fn tap_stride(&self, gap: usize) -> Result<usize> {
        if gap == 0 || !gap.is_multiple_of(self.gap) || !self.backbone.depth.is_multiple_of(gap) {
            return Err(Error::Config(format!(
                "cache extracted at gap {} cannot serve gap {gap} (needs a multiple of {} dividing depth {})",
                self.gap, self.gap, self.backbone.depth
            )));
        }
        Ok(gap / self.gap)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractStatus {
    Written,
    UpToDate,
}

#[derive(Clone, Debug)]
pub struct ExtractOutcome {
    pub manifest: CacheManifest,
    pub status: ExtractStatus,
    /// Bytes of manifest plus record file.
    pub bytes: u64,
}

fn record_header(taps: usize, l: usize, d: usize, samples: usize) -> [u8; HEADER_BYTES] {
    let mut h = [0u8; HEADER_BYTES];
    h[..6].copy_from_slice(&RECORD_MAGIC);
    h[6..8].copy_from_slice(&RECORD_VERSION.to_le_bytes());
    for (k, v) in [taps, l, d, samples].into_iter().enumerate() {
        h[8 + 4 * k..12 + 4 * k].copy_from_slice(&(v as u32).to_le_bytes());
    }
    h
}

fn read_manifest(path: &Path) -> Result<CacheManifest> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m: CacheManifest =
        serde_json::from_slice(&text).map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    if m.format != FORMAT || m.version != RECORD_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported cache {} v{}", m.format, m.version),
        ));
    }
    Ok(m)
}

fn manifest_for(dataset: &Dataset, backbone: &Backbone, sched: TapSchedule) -> CacheManifest {
    let cfg = backbone.config();
    let (l, d) = (cfg.seq_len(), cfg.width);
    let taps = sched.tap_count();
    CacheManifest {
        format: FORMAT.into(),
        version: RECORD_VERSION,
        backbone_checksum: backbone.checksum().to_string(),
        backbone: cfg.clone(),
        dataset_checksum: dataset.checksum(),
        gap: sched.gap(),
        samples: dataset.len(),
        taps,
        tap_shape: [l, d],
        dtype: "f32le".into(),
        record_bytes: 8 + 4 * taps * l * d,
        num_classes: dataset.num_classes(),
        labels: dataset.labels().to_vec(),
        splits: dataset.splits().to_vec(),
    }
}

fn is_complete(dir: &Path, manifest: &CacheManifest) -> bool {
    let path = dir.join(RECORDS_FILE);
    let Ok(meta) = fs::metadata(&path) else {
        return false;
    };
    if meta.len() != manifest.records_len() as u64 {
        return false;
    }
    let [l, d] = manifest.tap_shape;
    let mut head = [0u8; HEADER_BYTES];
    File::open(&path)
        .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut head))
        .is_ok()
        && head == record_header(manifest.taps, l, d, manifest.samples)
}

/// Runs every sample through the frozen backbone once and stores the taps
/// at `gap`. Re-running with the same backbone, dataset and gap returns
/// [`ExtractStatus::UpToDate`] without touching the backbone. An existing
/// cache built from a different backbone is refused.
pub fn extract(dataset: &Dataset, backbone: &Backbone, gap: usize, dir: &Path) -> Result<ExtractOutcome> {
    let cfg = backbone.config();
    let sched = TapSchedule::new(gap, cfg.depth)?;
    if dataset.image_shape() != cfg.image_shape() {
        return Err(Error::shape("extract", dataset.image_shape(), &cfg.image_shape()));
    }
    let manifest = manifest_for(dataset, backbone, sched);
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let old = read_manifest(&manifest_path)?;
        if old.backbone_checksum != manifest.backbone_checksum {
            return Err(Error::ChecksumMismatch {
                cached: old.backbone_checksum,
                current: manifest.backbone_checksum,
            });
        }
        if old == manifest && is_complete(dir, &manifest) {
            let bytes = cache_bytes(dir)?;
            return Ok(ExtractOutcome {
                manifest,
                status: ExtractStatus::UpToDate,
                bytes,
            });
        }
    }

    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    json.push(b'\n');
    crate::io::write_atomic(&manifest_path, &json)?;
    write_records(dataset, backbone, sched, dir, &manifest)?;
    let bytes = cache_bytes(dir)?;
    Ok(ExtractOutcome {
        manifest,
        status: ExtractStatus::Written,
        bytes,
    })
}

fn write_records(
    dataset: &Dataset,
    backbone: &Backbone,
    sched: TapSchedule,
    dir: &Path,
    manifest: &CacheManifest,
) -> Result<()> {
    let path = dir.join(RECORDS_FILE);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    let [l, d] = manifest.tap_shape;
    w.write_all(&record_header(manifest.taps, l, d, manifest.samples))
        .map_err(|e| Error::io(&tmp, e))?;

    let ids: Vec<usize> = (0..dataset.len()).collect();
    let per = l * d;
    for chunk in ids.chunks(EXTRACT_CHUNK) {
        let images = dataset.gather(chunk)?;
        let taps = backbone.forward_with_taps(&images, sched)?;
        for (b, &id) in chunk.iter().enumerate() {
            let mut rec = Vec::with_capacity(manifest.record_bytes);
            rec.extend_from_slice(&(id as u32).to_le_bytes());
            rec.extend_from_slice(&(dataset.labels()[id] as u32).to_le_bytes());
            for t in &taps {
                for &v in &t.data()[b * per..(b + 1) * per] {
                    rec.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            w.write_all(&rec)
                .map_err(|source| Error::SampleIo { sample: id, source })?;
        }
    }
    let file = w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

fn cache_bytes(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for name in [MANIFEST_FILE, RECORDS_FILE] {
        let p = dir.join(name);
        total += fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
    }
    Ok(total)
}

/// Taps and labels for a mini-batch. `taps[i]` is `[B, L, d]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub taps: Vec<Tensor>,
    pub labels: Vec<usize>,
}

/// Anything that can hand out taps for sample ids.
pub trait TapSource: Sync {
    fn backbone_config(&self) -> &BackboneConfig;
    fn labels(&self) -> &[usize];
    fn splits(&self) -> &[Split];
    fn num_classes(&self) -> usize;
    /// Taps for a run at `gap` for the samples `indices`.
    fn load_batch(&self, indices: &[usize], gap: usize) -> Result<Batch>;

    fn len(&self) -> usize {
        self.labels().len()
    }

    fn is_empty(&self) -> bool {
        self.labels().is_empty()
    }

    fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits()[i] == split).collect()
    }
}

/// Read-only memory-mapped view of an extracted cache.
#[derive(Debug)]
pub struct FeatureCache {
    dir: PathBuf,
    manifest: CacheManifest,
    map: Mmap,
}

impl FeatureCache {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
        let path = dir.join(RECORDS_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        // SAFETY: the record file is only ever replaced by rename, never
        // written in place, so the mapped bytes cannot change under us.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(&path, e))?;
        if map.len() != manifest.records_len() {
            return Err(Error::format(
                &path,
                format!("expected {} bytes, found {}", manifest.records_len(), map.len()),
            ));
        }
        let [l, d] = manifest.tap_shape;
        if map[..HEADER_BYTES] != record_header(manifest.taps, l, d, manifest.samples) {
            return Err(Error::format(&path, "record header does not match manifest"));
        }
        Ok(FeatureCache {
            dir: dir.to_path_buf(),
            manifest,
            map,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    fn record_bytes(&self, index: usize) -> Result<&[u8]> {
        if index >= self.manifest.samples {
            return Err(Error::Index {
                index,
                len: self.manifest.samples,
            });
        }
        let start = HEADER_BYTES + index * self.manifest.record_bytes;
        Ok(&self.map[start..start + self.manifest.record_bytes])
    }

    /// Stored sample id and label of record `index`.
    pub fn record_meta(&self, index: usize) -> Result<(u32, u32)> {
        let r = self.record_bytes(index)?;
        let word = |k: usize| u32::from_le_bytes(r[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        Ok((word(0), word(1)))
    }

    /// All stored taps of one record, each `[L, d]`.
    pub fn record(&self, index: usize) -> Result<Vec<Tensor>> {
        let r = self.record_bytes(index)?;
        let per = self.manifest.tap_elements();
        let [l, d] = self.manifest.tap_shape;
        (0..self.manifest.taps)
            .map(|t| Tensor::new(vec![l, d], decode_f32(&r[8 + 4 * t * per..8 + 4 * (t + 1) * per])))
            .collect()
    }
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect()
}

impl TapSource for FeatureCache {
    fn backbone_config(&self) -> &BackboneConfig {
        &self.manifest.backbone
    }

    fn labels(&self) -> &[usize] {
        &self.manifest.labels
    }

    fn splits(&self) -> &[Split] {
        &self.manifest.splits
    }

    fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    fn load_batch(&self, indices: &[usize], gap: usize) -> Result<Batch> {
        let stride = self.manifest.tap_stride(gap)?;
        let per = self.manifest.tap_elements();
        let [l, d] = self.manifest.tap_shape;
        let wanted: Vec<usize> = (0..self.manifest.taps).step_by(stride).collect();
        let mut data: Vec<Vec<f64>> = wanted.iter().map(|_| Vec::with_capacity(indices.len() * per)).collect();
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = self.record_bytes(i)?;
            for (buf, &t) in data.iter_mut().zip(&wanted) {
                buf.extend(decode_f32(&r[8 + 4 * t * per..8 + 4 * (t + 1) * per]));
            }
            labels.push(self.manifest.labels[i]);
        }
        let taps = data
            .into_iter()
            .map(|buf| Tensor::new(vec![indices.len(), l, d], buf))
            .collect::<Result<_>>()?;
        Ok(Batch { taps, labels })
    }
}

/// Taps computed on demand by the backbone, rounded to `f32` exactly as the
/// cache stores them.
#[derive(Debug)]
pub struct LiveSource<'a> {
    pub backbone: &'a Backbone,
    pub dataset: &'a Dataset,
}

impl TapSource for LiveSource<'_> {
    fn backbone_config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    fn labels(&self) -> &[usize] {
        self.dataset.labels()
    }

    fn splits(&self) -> &[Split] {
        self.dataset.splits()
    }

    fn num_classes(&self) -> usize {
        self.dataset.num_classes()
    }

    fn load_batch(&self, indices: &[usize], gap: usize) -> Result<Batch> {
        let sched = TapSchedule::new(gap, self.backbone.config().depth)?;
        let images = self.dataset.gather(indices)?;
        let taps = self
            .backbone
            .forward_with_taps(&images, sched)?
            .iter()
            .map(Tensor::round_to_f32)
            .collect();
        let labels = indices.iter().map(|&i| self.dataset.labels()[i]).collect();
        Ok(Batch { taps, labels })
    }
}
