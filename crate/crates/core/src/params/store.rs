//! Disk-backed checkpoint collection with residency accounting.
//!
//! Every full-size vector held in memory on behalf of a soup computation is
//! either a [`CheckpointHandle`] (loaded from disk, read-only) or a
//! [`ScratchVector`] (working buffer). Both carry a residency token that is
//! returned to the store on drop, so `peak_resident` counts every full-size
//! vector that was simultaneously alive.

use std::fs;
use std::ops::{Deref, DerefMut};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::checkpoint::{read_checkpoint, read_layout, write_checkpoint};
use super::{LayerMap, ParamVector};
use crate::error::{Error, Result};

/// 1-based position of a checkpoint in the manifest.
pub type CheckpointId = usize;

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug)]
struct Residency {
    resident: AtomicUsize,
    peak: AtomicUsize,
    ceiling: AtomicUsize,
}

impl Residency {
    fn new() -> Self {
        Residency {
            resident: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            ceiling: AtomicUsize::new(usize::MAX),
        }
    }

    fn reserve(self: &Arc<Self>, n: usize) -> Result<ResidencyToken> {
        let ceiling = self.ceiling.load(Ordering::SeqCst);
        let prev = self
            .resident
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |cur| {
                cur.checked_add(n).filter(|&next| next <= ceiling)
            })
            .map_err(|cur| Error::BudgetViolation {
                requested: n,
                resident: cur,
                ceiling,
            })?;
        self.peak.fetch_max(prev + n, Ordering::SeqCst);
        Ok(ResidencyToken {
            residency: Arc::clone(self),
            count: n,
        })
    }
}

#[derive(Debug)]
struct ResidencyToken {
    residency: Arc<Residency>,
    count: usize,
}

impl ResidencyToken {
    fn split_one(&mut self) -> ResidencyToken {
        debug_assert!(self.count > 0);
        self.count -= 1;
        ResidencyToken {
            residency: Arc::clone(&self.residency),
            count: 1,
        }
    }
}

impl Drop for ResidencyToken {
    fn drop(&mut self) {
        if self.count > 0 {
            self.residency.resident.fetch_sub(self.count, Ordering::SeqCst);
        }
    }
}

/// Read-only view of a loaded checkpoint (or a vector derived from it at load time).
#[derive(Debug)]
pub struct CheckpointHandle {
    id: CheckpointId,
    vec: ParamVector,
    _token: ResidencyToken,
}

impl CheckpointHandle {
    pub fn id(&self) -> CheckpointId {
        self.id
    }
}

impl Deref for CheckpointHandle {
    type Target = ParamVector;

    fn deref(&self) -> &ParamVector {
        &self.vec
    }
}

/// A counted, mutable full-size working buffer.
#[derive(Debug)]
pub struct ScratchVector {
    vec: ParamVector,
    _token: ResidencyToken,
}

impl ScratchVector {
    /// Copies the contents out; the copy is not counted.
    pub fn to_param_vector(&self) -> ParamVector {
        self.vec.clone()
    }

    /// Releases the residency slot and returns the vector uncounted.
    pub fn into_inner(self) -> ParamVector {
        self.vec
    }
}

impl Deref for ScratchVector {
    type Target = ParamVector;

    fn deref(&self) -> &ParamVector {
        &self.vec
    }
}

impl DerefMut for ScratchVector {
    fn deref_mut(&mut self) -> &mut ParamVector {
        &mut self.vec
    }
}

#[derive(Debug)]
pub struct CheckpointStore {
    root: PathBuf,
    entries: Vec<PathBuf>,
    layout: LayerMap,
    residency: Arc<Residency>,
}

impl CheckpointStore {
    /// Opens a manifest: one checkpoint filename per line, relative to the
    /// manifest's directory. Line order defines ids `1..=K`.
    pub fn open(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let entries: Vec<PathBuf> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .map(|l| root.join(l))
            .collect();
        Self::from_paths(root, entries)
    }

    /// Builds a store over explicit checkpoint paths, validating that every
    /// file shares the first one's layer map.
    pub fn from_paths(root: impl Into<PathBuf>, entries: Vec<PathBuf>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::InvalidArgument("manifest lists no checkpoints".into()))?;
        let layout = read_layout(first)?;
        for path in &entries[1..] {
            if read_layout(path)? != layout {
                return Err(Error::InconsistentLayout { path: path.clone() });
            }
        }
        Ok(CheckpointStore {
            root: root.into(),
            entries,
            layout,
            residency: Arc::new(Residency::new()),
        })
    }

    /// Writes `vectors` as `model_001.soup`, … plus a manifest into `dir` and opens the result.
    pub fn create(dir: impl AsRef<Path>, layout: &LayerMap, vectors: &[ParamVector]) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::with_capacity(vectors.len());
        for (i, v) in vectors.iter().enumerate() {
            let name = format!("model_{:03}.soup", i + 1);
            write_checkpoint(layout, v, dir.join(&name))?;
            names.push(name);
        }
        let manifest = dir.join(MANIFEST_NAME);
        write_manifest(&manifest, &names)?;
        Self::open(manifest)
    }

    /// A new store over a subset of this one's checkpoints, with fresh counters
    /// and the same ceiling. Ids are renumbered `1..=ids.len()` in the given order.
    pub fn subset(&self, ids: &[CheckpointId]) -> Result<Self> {
        let mut entries = Vec::with_capacity(ids.len());
        for &id in ids {
            entries.push(self.path(id)?.to_path_buf());
        }
        let store = Self::from_paths(self.root.clone(), entries)?;
        store.set_ceiling(self.ceiling());
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = CheckpointId> {
        1..=self.entries.len()
    }

    pub fn layout(&self) -> &LayerMap {
        &self.layout
    }

    pub fn path(&self, id: CheckpointId) -> Result<&Path> {
        id.checked_sub(1)
            .and_then(|i| self.entries.get(i))
            .map(PathBuf::as_path)
            .ok_or(Error::NotFound(id))
    }

    pub fn set_ceiling(&self, ceiling: Option<usize>) {
        self.residency
            .ceiling
            .store(ceiling.unwrap_or(usize::MAX), Ordering::SeqCst);
    }

    pub fn ceiling(&self) -> Option<usize> {
        match self.residency.ceiling.load(Ordering::SeqCst) {
            usize::MAX => None,
            c => Some(c),
        }
    }

    pub fn resident(&self) -> usize {
        self.residency.resident.load(Ordering::SeqCst)
    }

    pub fn peak_resident(&self) -> usize {
        self.residency.peak.load(Ordering::SeqCst)
    }

    /// Restarts peak tracking from the current resident count.
    pub fn reset_peak(&self) {
        self.residency.peak.store(self.resident(), Ordering::SeqCst);
    }

    pub fn acquire(&self, ids: &[CheckpointId]) -> Result<Vec<CheckpointHandle>> {
        self.acquire_with(ids, |_| Ok(()))
    }

    pub fn acquire_one(&self, id: CheckpointId) -> Result<CheckpointHandle> {
        Ok(self.acquire(&[id])?.pop().expect("one handle"))
    }

    /// Loads each checkpoint and subtracts `mean` in place, yielding `θ_k − mean`.
    pub fn acquire_centered(&self, ids: &[CheckpointId], mean: &[f64]) -> Result<Vec<CheckpointHandle>> {
        if mean.len() != self.layout.total_len() {
            return Err(Error::ShapeMismatch {
                expected: self.layout.total_len(),
                actual: mean.len(),
            });
        }
        self.acquire_with(ids, |v| {
            for (x, m) in v.iter_mut().zip(mean) {
                *x -= m;
            }
            Ok(())
        })
    }

    fn acquire_with(
        &self,
        ids: &[CheckpointId],
        mut transform: impl FnMut(&mut ParamVector) -> Result<()>,
    ) -> Result<Vec<CheckpointHandle>> {
        for &id in ids {
            self.path(id)?;
        }
        let mut token = self.residency.reserve(ids.len())?;
        let mut handles = Vec::with_capacity(ids.len());
        for &id in ids {
            let path = self.path(id)?;
            let (layout, mut vec) = read_checkpoint(path)?;
            if layout != self.layout {
                return Err(Error::InconsistentLayout {
                    path: path.to_path_buf(),
                });
            }
            transform(&mut vec)?;
            handles.push(CheckpointHandle {
                id,
                vec,
                _token: token.split_one(),
            });
        }
        Ok(handles)
    }

    /// Explicit release; equivalent to dropping the handles.
    pub fn release(&self, handles: Vec<CheckpointHandle>) {
        drop(handles);
    }

    /// Counts `vec` as a resident working buffer.
    pub fn scratch(&self, vec: ParamVector) -> Result<ScratchVector> {
        if vec.len() != self.layout.total_len() {
            return Err(Error::ShapeMismatch {
                expected: self.layout.total_len(),
                actual: vec.len(),
            });
        }
        let token = self.residency.reserve(1)?;
        Ok(ScratchVector { vec, _token: token })
    }

    pub fn scratch_zeros(&self) -> Result<ScratchVector> {
        self.scratch(ParamVector::zeros(self.layout.total_len()))
    }
}

pub fn write_manifest(path: &Path, names: &[String]) -> Result<()> {
    let mut text = String::new();
    for n in names {
        text.push_str(n);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Streaming mean of every checkpoint in the store.
///
/// Uses the running update `m ← m + (θ_k − m)/k`, so K copies of one vector
/// average back to that vector exactly. At most two full vectors are resident.
pub fn mean_vector(store: &CheckpointStore) -> Result<ScratchVector> {
    let mut acc = store.scratch_zeros()?;
    for id in store.ids() {
        let theta = store.acquire_one(id)?;
        let k = id as f64;
        for (m, x) in acc.iter_mut().zip(theta.iter()) {
            *m += (x - *m) / k;
        }
    }
    if !acc.is_finite() {
        return Err(Error::NonFinite("mean_vector"));
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout2() -> LayerMap {
        LayerMap::new([("w", vec![2])]).unwrap()
    }

    #[test]
    fn mean_of_small_stores() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::create(dir.path().join("a"), &layout2(), &[vec![3.0, -1.0].into()]).unwrap();
        assert_eq!(mean_vector(&store).unwrap().as_slice(), &[3.0, -1.0]);

        let store = CheckpointStore::create(
            dir.path().join("b"),
            &layout2(),
            &[vec![0.0, 0.0].into(), vec![2.0, 4.0].into()],
        )
        .unwrap();
        assert_eq!(mean_vector(&store).unwrap().as_slice(), &[1.0, 2.0]);
        assert!(store.peak_resident() <= 2);
        assert_eq!(store.resident(), 0);
    }

    #[test]
    fn mean_of_copies_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v: ParamVector = vec![0.1, 1.0 / 3.0].into();
        let store = CheckpointStore::create(dir.path(), &layout2(), &vec![v.clone(); 7]).unwrap();
        assert!(mean_vector(&store).unwrap().bit_eq(&v));
    }

    #[test]
    fn mean_is_permutation_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let vs: Vec<ParamVector> = vec![
            vec![0.1, 7.3].into(),
            vec![-2.9, 1e-3].into(),
            vec![5.5, -0.7].into(),
        ];
        let a = mean_vector(&CheckpointStore::create(dir.path().join("a"), &layout2(), &vs).unwrap()).unwrap();
        let rev: Vec<ParamVector> = vs.iter().rev().cloned().collect();
        let b = mean_vector(&CheckpointStore::create(dir.path().join("b"), &layout2(), &rev).unwrap()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn acquire_release_brackets_residency() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::create(dir.path(), &layout2(), &vec![vec![1.0, 2.0].into(); 5]).unwrap();
        let _keep = store.scratch_zeros().unwrap();
        let before = store.resident();
        let handles = store.acquire(&[1, 2, 3, 4]).unwrap();
        assert_eq!(store.resident(), before + 4);
        store.release(handles);
        assert_eq!(store.resident(), before);
        assert_eq!(store.peak_resident(), before + 4);
    }

    #[test]
    fn unknown_id_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::create(dir.path(), &layout2(), &[vec![1.0, 2.0].into()]).unwrap();
        assert!(matches!(store.acquire(&[2]), Err(Error::NotFound(2))));
        assert!(matches!(store.acquire(&[0]), Err(Error::NotFound(0))));
        assert_eq!(store.resident(), 0);
    }

    #[test]
    fn ceiling_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::create(dir.path(), &layout2(), &vec![vec![1.0, 2.0].into(); 4]).unwrap();
        store.set_ceiling(Some(3));
        let held = store.acquire(&[1, 2]).unwrap();
        let err = store.acquire(&[3, 4]).unwrap_err();
        assert!(matches!(err, Error::BudgetViolation { requested: 2, resident: 2, ceiling: 3 }));
        assert_eq!(store.resident(), 2);
        drop(held);
        assert_eq!(store.acquire(&[3, 4]).unwrap().len(), 2);
    }

    #[test]
    fn centered_acquire_subtracts_mean() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::create(
            dir.path(),
            &layout2(),
            &[vec![1.0, 0.0].into(), vec![0.0, 1.0].into()],
        )
        .unwrap();
        let mean = mean_vector(&store).unwrap();
        let d = store.acquire_centered(&[1, 2], &mean).unwrap();
        assert_eq!(d[0].as_slice(), &[0.5, -0.5]);
        assert_eq!(d[1].as_slice(), &[-0.5, 0.5]);
    }

    #[test]
    fn mismatched_layouts_are_rejected_at_open() {
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(&layout2(), &[1.0, 2.0], dir.path().join("a.soup")).unwrap();
        let other = LayerMap::new([("v", vec![2])]).unwrap();
        write_checkpoint(&other, &[1.0, 2.0], dir.path().join("b.soup")).unwrap();
        write_manifest(&dir.path().join("m.txt"), &["a.soup".into(), "b.soup".into()]).unwrap();
        assert!(matches!(
            CheckpointStore::open(dir.path().join("m.txt")),
            Err(Error::InconsistentLayout { .. })
        ));
    }

    #[test]
    fn concurrent_acquire_keeps_counters_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::create(dir.path(), &layout2(), &vec![vec![1.0, 2.0].into(); 8]).unwrap();
        std::thread::scope(|s| {
            for w in 0..4 {
                let store = &store;
                s.spawn(move || {
                    for _ in 0..20 {
                        let h = store.acquire(&[w + 1, w + 5]).unwrap();
                        assert_eq!(h.len(), 2);
                    }
                });
            }
        });
        assert_eq!(store.resident(), 0);
        assert!(store.peak_resident() <= 8);
    }
}
