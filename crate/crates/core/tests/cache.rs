mod common;

use std::path::Path;
use std::sync::Mutex;

use common::*;
use last_core::backbone::{BackboneConfig, TapSchedule};
use last_core::cache::{self, Batch, ExtractStatus, FeatureCache, LiveSource, TapSource, HEADER_BYTES};
use last_core::data::Split;
use last_core::error::{Error, Result};
use last_core::train::{self, RunSpec, TrainConfig};

fn files_hash(dir: &Path) -> (String, String) {
    (
        sha256_file(&dir.join(cache::MANIFEST_FILE)),
        sha256_file(&dir.join(cache::RECORDS_FILE)),
    )
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

fn spec(id: &str, gap: usize, stack: usize, seed: u64) -> RunSpec {
    RunSpec {
        id: id.into(),
        side: last_core::side::SideConfig {
            gap,
            stack,
            ..toy_side(2)
        },
        train: quick_train(),
        seed,
    }
}

#[test]
fn ten_samples_three_taps() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(6, 4, 2, 1);
    let bb = toy_frozen(4, 1);
    let out = cache::extract(&data, &bb, 2, dir.path()).unwrap();
    assert_eq!(out.status, ExtractStatus::Written);
    let m = &out.manifest;
    assert_eq!((m.samples, m.taps, m.tap_shape), (10, 3, [5, 8]));
    assert_eq!(m.record_bytes, 8 + 4 * 3 * 5 * 8);
    let records = std::fs::metadata(dir.path().join(cache::RECORDS_FILE)).unwrap().len();
    assert_eq!(records as usize, HEADER_BYTES + 10 * m.record_bytes);
    assert_eq!(
        out.bytes,
        records + std::fs::metadata(dir.path().join(cache::MANIFEST_FILE)).unwrap().len()
    );

    let c = FeatureCache::open(dir.path()).unwrap();
    for i in 0..10 {
        let taps = c.record(i).unwrap();
        assert_eq!(taps.len(), 3);
        assert!(taps.iter().all(|t| t.shape() == [5, 8]));
        assert_eq!(c.record_meta(i).unwrap(), (i as u32, data.labels()[i] as u32));
    }
}

#[test]
fn records_hold_rounded_backbone_taps() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(3, 2, 2, 2);
    let bb = toy_frozen(4, 2);
    cache::extract(&data, &bb, 1, dir.path()).unwrap();
    let c = FeatureCache::open(dir.path()).unwrap();
    let sched = TapSchedule::new(1, 4).unwrap();
    for i in 0..5 {
        let live = bb.forward_with_taps(&data.gather(&[i]).unwrap(), sched).unwrap();
        for (stored, t) in c.record(i).unwrap().iter().zip(&live) {
            assert_eq!(stored.data(), t.round_to_f32().data());
        }
    }
}

#[test]
fn extraction_is_byte_deterministic_and_idempotent() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let data = toy_dataset(6, 4, 2, 3);
    cache::extract(&data, &toy_frozen(4, 3), 2, a.path()).unwrap();
    let bb = toy_frozen(4, 3);
    cache::extract(&data, &bb, 2, b.path()).unwrap();
    assert_eq!(files_hash(a.path()), files_hash(b.path()));

    let before = bb.forward_count();
    let again = cache::extract(&data, &bb, 2, b.path()).unwrap();
    assert_eq!(again.status, ExtractStatus::UpToDate);
    assert_eq!(bb.forward_count(), before);
    assert_eq!(files_hash(a.path()), files_hash(b.path()));

    // a truncated record file is rebuilt to the same bytes
    let rec = b.path().join(cache::RECORDS_FILE);
    let bytes = std::fs::read(&rec).unwrap();
    std::fs::write(&rec, &bytes[..bytes.len() / 2]).unwrap();
    let redo = cache::extract(&data, &bb, 2, b.path()).unwrap();
    assert_eq!(redo.status, ExtractStatus::Written);
    assert_eq!(files_hash(a.path()), files_hash(b.path()));
}

#[test]
fn foreign_backbone_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(4, 2, 2, 4);
    cache::extract(&data, &toy_frozen(4, 4), 2, dir.path()).unwrap();
    let before = files_hash(dir.path());
    let err = cache::extract(&data, &toy_frozen(4, 5), 2, dir.path()).unwrap_err();
    assert!(matches!(err, Error::ChecksumMismatch { .. }), "{err}");
    assert_eq!(files_hash(dir.path()), before);
}

#[test]
fn gap_must_divide_depth() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(4, 2, 2, 4);
    let err = cache::extract(&data, &toy_frozen(4, 4), 3, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn file_in_place_of_directory_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(4, 2, 2, 4);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = cache::extract(&data, &toy_frozen(4, 4), 2, &blocker.join("cache")).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn load_batch_reads() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(6, 4, 2, 6);
    cache::extract(&data, &toy_frozen(4, 6), 1, dir.path()).unwrap();
    let c = FeatureCache::open(dir.path()).unwrap();

    let a = c.load_batch(&[3, 7, 1], 2).unwrap();
    let b = c.load_batch(&[3, 7, 1], 2).unwrap();
    assert_eq!(a.labels, b.labels);
    assert!(a.taps.iter().zip(&b.taps).all(|(x, y)| x.bit_eq(y)));
    assert_eq!(a.labels, vec![data.labels()[3], data.labels()[7], data.labels()[1]]);

    // batch of one equals the record, read at stride gap / cache gap
    let one = c.load_batch(&[7], 2).unwrap();
    let rec = c.record(7).unwrap();
    assert_eq!(one.taps.len(), 3);
    for (k, t) in one.taps.iter().enumerate() {
        assert_eq!(t.shape(), [1, 5, 8]);
        assert_eq!(t.data(), rec[2 * k].data());
    }

    let err = c.load_batch(&[0, 10], 1).unwrap_err();
    assert!(matches!(err, Error::Index { index: 10, len: 10 }), "{err}");
    assert!(err.to_string().contains("10"));
    assert!(matches!(c.load_batch(&[0], 3), Err(Error::Config(_))));
}

#[test]
fn fine_cache_serves_coarse_gap() {
    let (fine, coarse) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let data = toy_dataset(4, 2, 2, 7);
    let bb = toy_frozen(4, 7);
    cache::extract(&data, &bb, 1, fine.path()).unwrap();
    cache::extract(&data, &bb, 2, coarse.path()).unwrap();
    let (f, c) = (
        FeatureCache::open(fine.path()).unwrap(),
        FeatureCache::open(coarse.path()).unwrap(),
    );
    let ids: Vec<usize> = (0..6).collect();
    let a = f.load_batch(&ids, 2).unwrap();
    let b = c.load_batch(&ids, 2).unwrap();
    assert!(a.taps.iter().zip(&b.taps).all(|(x, y)| x.bit_eq(y)));
}

/// Forwards to a cache and logs every requested index.
struct Audit<'a> {
    inner: &'a FeatureCache,
    seen: Mutex<Vec<usize>>,
}

impl TapSource for Audit<'_> {
    fn backbone_config(&self) -> &BackboneConfig {
        self.inner.backbone_config()
    }
    fn labels(&self) -> &[usize] {
        self.inner.labels()
    }
    fn splits(&self) -> &[Split] {
        self.inner.splits()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn load_batch(&self, indices: &[usize], gap: usize) -> Result<Batch> {
        self.seen.lock().unwrap().extend_from_slice(indices);
        self.inner.load_batch(indices, gap)
    }
}

#[test]
fn each_epoch_visits_every_training_record_once() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(10, 3, 2, 8);
    cache::extract(&data, &toy_frozen(4, 8), 2, dir.path()).unwrap();
    let c = FeatureCache::open(dir.path()).unwrap();
    let audit = Audit {
        inner: &c,
        seen: Mutex::new(Vec::new()),
    };
    let run = spec("audit", 2, 1, 8);
    train::train(&run, &audit).unwrap();
    let seen = audit.seen.into_inner().unwrap();
    let train_ids = c.indices(Split::Train);
    let eval_ids = c.indices(Split::Eval);
    let per_epoch = train_ids.len() + eval_ids.len();
    assert_eq!(seen.len(), run.train.epochs * per_epoch);
    let mut orders = Vec::new();
    for epoch in seen.chunks(per_epoch) {
        let mut order = epoch[..train_ids.len()].to_vec();
        orders.push(order.clone());
        order.sort_unstable();
        assert_eq!(order, train_ids);
        assert_eq!(&epoch[train_ids.len()..], eval_ids.as_slice());
    }
    assert!(orders.windows(2).any(|w| w[0] != w[1]), "epochs reuse one order");
}

#[test]
fn cache_and_live_training_are_bitwise_equal() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(12, 4, 2, 9);
    let bb = toy_frozen(4, 9);
    cache::extract(&data, &bb, 1, dir.path()).unwrap();
    let c = FeatureCache::open(dir.path()).unwrap();
    let live = LiveSource {
        backbone: &bb,
        dataset: &data,
    };
    for gap in [1, 2, 4] {
        let run = spec("eq", gap, 2, 9);
        let a = train::train(&run, &c).unwrap();
        let b = train::train(&run, &live).unwrap();
        assert_eq!(a.log, b.log, "gap {gap}");
        assert_eq!(a.side.to_bytes(), b.side.to_bytes());
    }
}

#[test]
fn sweep_over_cache_needs_one_forward_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(12, 4, 2, 10);
    let bb = toy_frozen(4, 10);
    cache::extract(&data, &bb, 1, dir.path()).unwrap();
    assert_eq!(bb.forward_count(), data.len());
    let c = FeatureCache::open(dir.path()).unwrap();
    let plan: Vec<RunSpec> = [(1, 1), (2, 1), (2, 2), (4, 3)]
        .iter()
        .map(|&(g, t)| spec(&format!("g{g}-t{t}"), g, t, 10))
        .collect();
    let results = train::sweep(&plan, &c, 3);
    assert!(results.iter().all(|r| r.is_ok()));
    assert_eq!(bb.forward_count(), data.len());
}

#[test]
fn concurrent_readers_leave_files_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(12, 4, 2, 11);
    cache::extract(&data, &toy_frozen(4, 11), 1, dir.path()).unwrap();
    let before = files_hash(dir.path());
    let c = FeatureCache::open(dir.path()).unwrap();
    let reference = c.load_batch(&(0..16).collect::<Vec<_>>(), 1).unwrap();
    std::thread::scope(|s| {
        for t in 0..8 {
            let (c, reference) = (&c, &reference);
            s.spawn(move || {
                for k in 0..50 {
                    let i = (t * 7 + k * 3) % 16;
                    let b = c.load_batch(&[i], 1).unwrap();
                    for (x, r) in b.taps.iter().zip(&reference.taps) {
                        assert_eq!(x.data(), &r.data()[i * 40..(i + 1) * 40]);
                    }
                }
            });
        }
        let plan: Vec<RunSpec> = (0..4).map(|k| spec(&format!("r{k}"), 2, 1, k)).collect();
        assert!(train::sweep(&plan, &c, 4).iter().all(|r| r.is_ok()));
    });
    // a second handle opened afterwards sees the same bytes
    drop(c);
    assert_eq!(files_hash(dir.path()), before);
    FeatureCache::open(dir.path()).unwrap();
}

#[test]
fn corrupt_header_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(4, 2, 2, 12);
    cache::extract(&data, &toy_frozen(4, 12), 2, dir.path()).unwrap();
    let rec = dir.path().join(cache::RECORDS_FILE);
    let mut bytes = std::fs::read(&rec).unwrap();
    bytes[0] = b'X';
    std::fs::write(&rec, &bytes).unwrap();
    let err = FeatureCache::open(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}
