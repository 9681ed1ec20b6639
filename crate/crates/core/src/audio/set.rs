//! K systems x M utterances of homologous enhanced clips.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_wav, write_wav, AudioClip};
use crate::error::{Error, Result};

/// System id under which unprocessed noisy inputs are registered, and the
/// directory name holding them on disk.
pub const NOISY_SYSTEM_ID: &str = "noisy";

const MOS_FILE: &str = "mos.csv";

/// Everything a comparator may look at for one cell of a [`SystemSet`].
#[derive(Debug, Clone, Copy)]
pub struct ClipRef<'a> {
    pub system_id: &'a str,
    pub utterance_id: &'a str,
    pub clip: &'a AudioClip,
    pub mos: Option<f64>,
    pub path: Option<&'a Path>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSet {
    system_ids: Vec<String>,
    utterance_ids: Vec<String>,
    /// `clips[k][i]`: output of system `k` for noisy source `i`.
    clips: Vec<Vec<Option<AudioClip>>>,
    mos: Option<Vec<Vec<f64>>>,
    noisy: Option<Vec<AudioClip>>,
    noisy_mos: Option<Vec<f64>>,
    paths: Option<Vec<Vec<Option<PathBuf>>>>,
    noisy_paths: Option<Vec<PathBuf>>,
    noisy_included: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct MosRow {
    system_id: String,
    utterance_id: String,
    mos: f64,
}

fn check_mos(value: f64, system: &str, utt: &str) -> Result<()> {
    if !(1.0..=5.0).contains(&value) {
        return Err(Error::Label(format!(
            "MOS {value} for ({system}, {utt}) outside [1, 5]"
        )));
    }
    Ok(())
}

impl SystemSet {
    /// Builds a fully populated set. `clips` is indexed `[system][utterance]`.
    pub fn new(
        system_ids: Vec<String>,
        utterance_ids: Vec<String>,
        clips: Vec<Vec<AudioClip>>,
        mos: Option<Vec<Vec<f64>>>,
        noisy: Option<Vec<AudioClip>>,
        noisy_mos: Option<Vec<f64>>,
    ) -> Result<Self> {
        let clips = clips
            .into_iter()
            .map(|row| row.into_iter().map(Some).collect())
            .collect();
        let set = Self {
            system_ids,
            utterance_ids,
            clips,
            mos,
            noisy,
            noisy_mos,
            paths: None,
            noisy_paths: None,
            noisy_included: false,
        };
        set.validate_shape()?;
        Ok(set)
    }

    fn validate_shape(&self) -> Result<()> {
        let k = self.system_ids.len();
        let m = self.utterance_ids.len();
        if k == 0 || m == 0 {
            return Err(Error::Data("system set needs at least one system and one utterance".into()));
        }
        let unique_sys: BTreeSet<_> = self.system_ids.iter().collect();
        let unique_utt: BTreeSet<_> = self.utterance_ids.iter().collect();
        if unique_sys.len() != k || unique_utt.len() != m {
            return Err(Error::Data("duplicate system or utterance id".into()));
        }
        if self.clips.len() != k || self.clips.iter().any(|row| row.len() != m) {
            return Err(Error::Shape(format!("clip grid must be {k}x{m}")));
        }
        if let Some(mos) = &self.mos {
            if mos.len() != k || mos.iter().any(|row| row.len() != m) {
                return Err(Error::Shape(format!("MOS grid must be {k}x{m}")));
            }
            for (kk, row) in mos.iter().enumerate() {
                for (i, &v) in row.iter().enumerate() {
                    check_mos(v, &self.system_ids[kk], &self.utterance_ids[i])?;
                }
            }
        }
        if let Some(noisy) = &self.noisy {
            if noisy.len() != m {
                return Err(Error::Shape(format!("expected {m} noisy clips, got {}", noisy.len())));
            }
        }
        if let Some(nm) = &self.noisy_mos {
            if self.noisy.is_none() || nm.len() != m {
                return Err(Error::Shape("noisy MOS requires one value per noisy clip".into()));
            }
            for (i, &v) in nm.iter().enumerate() {
                check_mos(v, NOISY_SYSTEM_ID, &self.utterance_ids[i])?;
            }
        }
        Ok(())
    }

    pub fn num_systems(&self) -> usize {
        self.system_ids.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.utterance_ids.len()
    }

    pub fn system_ids(&self) -> &[String] {
        &self.system_ids
    }

    pub fn utterance_ids(&self) -> &[String] {
        &self.utterance_ids
    }

    pub fn has_mos(&self) -> bool {
        self.mos.is_some()
    }

    pub fn mos(&self) -> Option<&Vec<Vec<f64>>> {
        self.mos.as_ref()
    }

    pub fn noisy(&self) -> Option<&[AudioClip]> {
        self.noisy.as_deref()
    }

    pub fn noisy_mos(&self) -> Option<&[f64]> {
        self.noisy_mos.as_deref()
    }

    pub fn noisy_included(&self) -> bool {
        self.noisy_included
    }

    pub fn clip(&self, k: usize, i: usize) -> Result<&AudioClip> {
        self.clips
            .get(k)
            .and_then(|row| row.get(i))
            .and_then(Option::as_ref)
            .ok_or_else(|| {
                Error::Data(format!(
                    "missing clip for system {} ({}) utterance {} ({})",
                    k,
                    self.system_ids.get(k).map_or("?", String::as_str),
                    i,
                    self.utterance_ids.get(i).map_or("?", String::as_str),
                ))
            })
    }

    pub fn mos_at(&self, k: usize, i: usize) -> Option<f64> {
        self.mos.as_ref().map(|m| m[k][i])
    }

    pub fn path_at(&self, k: usize, i: usize) -> Option<&Path> {
        self.paths
            .as_ref()
            .and_then(|p| p[k][i].as_deref())
    }

    pub fn noisy_path(&self, i: usize) -> Option<&Path> {
        self.noisy_paths.as_ref().map(|p| p[i].as_path())
    }

    pub fn item(&self, k: usize, i: usize) -> Result<ClipRef<'_>> {
        Ok(ClipRef {
            system_id: &self.system_ids[k],
            utterance_id: &self.utterance_ids[i],
            clip: self.clip(k, i)?,
            mos: self.mos_at(k, i),
            path: self.path_at(k, i),
        })
    }

    /// Fails with a data error naming the first unpopulated cell.
    pub fn ensure_complete(&self) -> Result<()> {
        for k in 0..self.num_systems() {
            for i in 0..self.num_utterances() {
                self.clip(k, i)?;
            }
        }
        Ok(())
    }

    /// Per-system mean MOS over utterances.
    pub fn mean_mos(&self) -> Result<Vec<f64>> {
        let mos = self
            .mos
            .as_ref()
            .ok_or_else(|| Error::Label("system set has no MOS labels".into()))?;
        Ok(mos
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect())
    }

    /// Restricts the set to the given utterance indices, in the given order.
    pub fn select_utterances(&self, indices: &[usize]) -> Result<SystemSet> {
        if indices.is_empty() {
            return Err(Error::Config("utterance selection is empty".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.num_utterances()) {
            return Err(Error::Config(format!("utterance index {bad} out of range")));
        }
        fn pick<T: Clone>(row: &[T], indices: &[usize]) -> Vec<T> {
            indices.iter().map(|&i| row[i].clone()).collect()
        }
        Ok(SystemSet {
            system_ids: self.system_ids.clone(),
            utterance_ids: indices.iter().map(|&i| self.utterance_ids[i].clone()).collect(),
            clips: self.clips.iter().map(|r| pick(r, indices)).collect(),
            mos: self.mos.as_ref().map(|m| m.iter().map(|r| pick(r, indices)).collect()),
            noisy: self.noisy.as_ref().map(|r| pick(r, indices)),
            noisy_mos: self.noisy_mos.as_ref().map(|r| pick(r, indices)),
            paths: self.paths.as_ref().map(|p| p.iter().map(|r| pick(r, indices)).collect()),
            noisy_paths: self.noisy_paths.as_ref().map(|r| pick(r, indices)),
            noisy_included: self.noisy_included,
        })
    }

    /// Returns a copy with MOS labels replaced.
    pub fn with_mos(&self, mos: Option<Vec<Vec<f64>>>) -> Result<SystemSet> {
        let mut out = self.clone();
        out.mos = mos;
        out.validate_shape()?;
        Ok(out)
    }

    /// Registers the unprocessed noisy inputs as an additional system.
    ///
    /// MOS labels survive only if the noisy clips carry their own labels;
    /// otherwise the result is unlabeled.
    pub fn include_noisy_system(&self) -> Result<SystemSet> {
        if self.noisy_included {
            return Err(Error::Data("noisy system already included".into()));
        }
        if self.system_ids.iter().any(|s| s == NOISY_SYSTEM_ID) {
            return Err(Error::Data(format!(
                "a system named '{NOISY_SYSTEM_ID}' already exists"
            )));
        }
        let noisy = self
            .noisy
            .as_ref()
            .ok_or_else(|| Error::Data("system set has no noisy inputs".into()))?;

        let mut out = self.clone();
        out.system_ids.push(NOISY_SYSTEM_ID.to_string());
        out.clips.push(noisy.iter().cloned().map(Some).collect());
        out.mos = match (&self.mos, &self.noisy_mos) {
            (Some(mos), Some(nm)) => {
                let mut mos = mos.clone();
                mos.push(nm.clone());
                Some(mos)
            }
            (Some(_), None) => {
                log::warn!("noisy inputs have no MOS labels; dropping labels from the extended set");
                None
            }
            (None, _) => None,
        };
        out.paths = match (&self.paths, &self.noisy_paths) {
            (Some(paths), Some(np)) => {
                let mut paths = paths.clone();
                paths.push(np.iter().cloned().map(Some).collect());
                Some(paths)
            }
            _ => None,
        };
        out.noisy_included = true;
        Ok(out)
    }

    /// Loads `<root>/<system_id>/<utterance_id>.wav`, optional `mos.csv` and
    /// optional `noisy/` (whose own `mos.csv` labels the noisy inputs). Every clip is resampled to the canonical rate.
    /// Missing cells are kept as holes and reported when accessed.
    pub fn load_dir(root: impl AsRef<Path>) -> Result<SystemSet> {
        let root = root.as_ref();
        let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut system_dirs = BTreeMap::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().is_dir() && name != NOISY_SYSTEM_ID && !name.starts_with('.') {
                system_dirs.insert(name, entry.path());
            }
        }
        if system_dirs.is_empty() {
            return Err(Error::Data(format!("no system directories under {}", root.display())));
        }

        let mut per_system: Vec<BTreeMap<String, PathBuf>> = Vec::new();
        let mut all_utts = BTreeSet::new();
        for dir in system_dirs.values() {
            let wavs = list_wavs(dir)?;
            all_utts.extend(wavs.keys().cloned());
            per_system.push(wavs);
        }
        let system_ids: Vec<String> = system_dirs.keys().cloned().collect();
        let utterance_ids: Vec<String> = all_utts.into_iter().collect();
        if utterance_ids.is_empty() {
            return Err(Error::Data(format!("no wav files under {}", root.display())));
        }

        let mut clips = Vec::with_capacity(system_ids.len());
        let mut paths = Vec::with_capacity(system_ids.len());
        for wavs in &per_system {
            let mut row = Vec::with_capacity(utterance_ids.len());
            let mut path_row = Vec::with_capacity(utterance_ids.len());
            for utt in &utterance_ids {
                match wavs.get(utt) {
                    Some(p) => {
                        row.push(Some(read_wav(p)?.to_canonical()?));
                        path_row.push(Some(p.clone()));
                    }
                    None => {
                        row.push(None);
                        path_row.push(None);
                    }
                }
            }
            clips.push(row);
            paths.push(path_row);
        }

        let noisy_dir = root.join(NOISY_SYSTEM_ID);
        let (noisy, noisy_paths) = if noisy_dir.is_dir() {
            let wavs = list_wavs(&noisy_dir)?;
            let mut noisy = Vec::with_capacity(utterance_ids.len());
            let mut np = Vec::with_capacity(utterance_ids.len());
            for utt in &utterance_ids {
                let p = wavs.get(utt).ok_or_else(|| {
                    Error::Data(format!("noisy input missing for utterance {utt}"))
                })?;
                noisy.push(read_wav(p)?.to_canonical()?);
                np.push(p.clone());
            }
            (Some(noisy), Some(np))
        } else {
            (None, None)
        };

        let mos_path = root.join(MOS_FILE);
        let (mos, noisy_mos) = if mos_path.is_file() {
            let noisy_mos_path = noisy_dir.join(MOS_FILE);
            let mut sources = vec![mos_path];
            if noisy.is_some() && noisy_mos_path.is_file() {
                sources.push(noisy_mos_path);
            }
            read_mos_csv(&sources, &system_ids, &utterance_ids, noisy.is_some())?
        } else {
            (None, None)
        };

        let set = SystemSet {
            system_ids,
            utterance_ids,
            clips,
            mos,
            noisy,
            noisy_mos,
            paths: Some(paths),
            noisy_paths,
            noisy_included: false,
        };
        set.validate_shape()?;
        Ok(set)
    }

    /// Writes the on-disk layout read by [`SystemSet::load_dir`].
    pub fn save_dir(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for (k, sys) in self.system_ids.iter().enumerate() {
            if self.noisy_included && sys == NOISY_SYSTEM_ID {
                continue;
            }
            let dir = root.join(sys);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, utt) in self.utterance_ids.iter().enumerate() {
                if let Some(clip) = &self.clips[k][i] {
                    write_wav(clip, dir.join(format!("{utt}.wav")))?;
                }
            }
        }
        if let Some(noisy) = &self.noisy {
            let dir = root.join(NOISY_SYSTEM_ID);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (clip, utt) in noisy.iter().zip(&self.utterance_ids) {
                write_wav(clip, dir.join(format!("{utt}.wav")))?;
            }
        }
        if let Some(mos) = &self.mos {
            let mut rows = Vec::new();
            for (k, sys) in self.system_ids.iter().enumerate() {
                if self.noisy_included && sys == NOISY_SYSTEM_ID {
                    continue;
                }
                for (i, utt) in self.utterance_ids.iter().enumerate() {
                    rows.push(MosRow {
                        system_id: sys.clone(),
                        utterance_id: utt.clone(),
                        mos: mos[k][i],
                    });
                }
            }
            write_mos_csv(&root.join(MOS_FILE), rows)?;
        }
        if let (Some(_), Some(nm)) = (&self.noisy, &self.noisy_mos) {
            let rows = self
                .utterance_ids
                .iter()
                .zip(nm)
                .map(|(utt, &v)| MosRow {
                    system_id: NOISY_SYSTEM_ID.to_string(),
                    utterance_id: utt.clone(),
                    mos: v,
                })
                .collect();
            write_mos_csv(&root.join(NOISY_SYSTEM_ID).join(MOS_FILE), rows)?;
        }
        Ok(())
    }
}

fn list_wavs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            if let Some(stem) = path.file_stem() {
                out.insert(stem.to_string_lossy().into_owned(), path);
            }
        }
    }
    Ok(out)
}

type MosTables = (Option<Vec<Vec<f64>>>, Option<Vec<f64>>);

fn write_mos_csv(path: &Path, rows: Vec<MosRow>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn read_mos_csv(
    sources: &[PathBuf],
    system_ids: &[String],
    utterance_ids: &[String],
    has_noisy: bool,
) -> Result<MosTables> {
    let mut table: BTreeMap<(String, String), f64> = BTreeMap::new();
    for path in sources {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Label(format!("{}: {e}", path.display())))?;
        for row in reader.deserialize() {
            let row: MosRow = row.map_err(|e| Error::Label(format!("{}: {e}", path.display())))?;
            check_mos(row.mos, &row.system_id, &row.utterance_id)?;
            if table
                .insert((row.system_id.clone(), row.utterance_id.clone()), row.mos)
                .is_some()
            {
                return Err(Error::Label(format!(
                    "duplicate MOS row for ({}, {})",
                    row.system_id, row.utterance_id
                )));
            }
        }
    }
    let path = &sources[0];

    let mut mos = Vec::with_capacity(system_ids.len());
    for sys in system_ids {
        let mut row = Vec::with_capacity(utterance_ids.len());
        for utt in utterance_ids {
            let v = table.get(&(sys.clone(), utt.clone())).ok_or_else(|| {
                Error::Label(format!("{}: no MOS for ({sys}, {utt})", path.display()))
            })?;
            row.push(*v);
        }
        mos.push(row);
    }

    let noisy_mos = if has_noisy {
        let values: Option<Vec<f64>> = utterance_ids
            .iter()
            .map(|utt| table.get(&(NOISY_SYSTEM_ID.to_string(), utt.clone())).copied())
            .collect();
        values
    } else {
        None
    };
    Ok((Some(mos), noisy_mos))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(v: f64) -> AudioClip {
        AudioClip::new(vec![v; 160], 16_000).unwrap()
    }

    fn tiny_set() -> SystemSet {
        SystemSet::new(
            vec!["a".into(), "b".into()],
            vec!["u1".into(), "u2".into()],
            vec![vec![clip(0.1), clip(0.2)], vec![clip(0.3), clip(0.4)]],
            Some(vec![vec![4.0, 3.5], vec![2.0, 2.5]]),
            Some(vec![clip(0.5), clip(0.6)]),
            Some(vec![1.5, 1.2]),
        )
        .unwrap()
    }

    #[test]
    fn rejects_out_of_range_mos() {
        let err = SystemSet::new(
            vec!["a".into()],
            vec!["u".into()],
            vec![vec![clip(0.0)]],
            Some(vec![vec![5.5]]),
            None,
            None,
        );
        assert!(matches!(err, Err(Error::Label(_))));
    }

    #[test]
    fn mean_mos_per_system() {
        assert_eq!(tiny_set().mean_mos().unwrap(), vec![3.75, 2.25]);
    }

    #[test]
    fn include_noisy_adds_one_system_once() {
        let set = tiny_set();
        let with = set.include_noisy_system().unwrap();
        assert_eq!(with.num_systems(), 3);
        assert_eq!(with.system_ids()[2], NOISY_SYSTEM_ID);
        assert_eq!(with.mos().unwrap()[2], vec![1.5, 1.2]);
        assert!(matches!(with.include_noisy_system(), Err(Error::Data(_))));
    }

    #[test]
    fn include_noisy_requires_noisy_inputs() {
        let set = SystemSet::new(
            vec!["a".into()],
            vec!["u".into()],
            vec![vec![clip(0.0)]],
            None,
            None,
            None,
        )
        .unwrap();
        assert!(matches!(set.include_noisy_system(), Err(Error::Data(_))));
    }

    #[test]
    fn disk_round_trip_and_holes() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny_set();
        set.save_dir(dir.path()).unwrap();
        let loaded = SystemSet::load_dir(dir.path()).unwrap();
        assert_eq!(loaded.system_ids(), set.system_ids());
        assert_eq!(loaded.utterance_ids(), set.utterance_ids());
        assert_eq!(loaded.mos(), set.mos());
        assert_eq!(loaded.noisy_mos(), set.noisy_mos());
        assert!(loaded.path_at(1, 1).is_some());

        fs::remove_file(dir.path().join("b").join("u2.wav")).unwrap();
        let holed = SystemSet::load_dir(dir.path()).unwrap();
        let err = holed.clip(1, 1).unwrap_err().to_string();
        assert!(err.contains("b") && err.contains("u2"), "{err}");
        assert!(holed.ensure_complete().is_err());
    }

    #[test]
    fn incomplete_mos_csv_is_a_label_error() {
        let dir = tempfile::tempdir().unwrap();
        tiny_set().save_dir(dir.path()).unwrap();
        fs::write(dir.path().join("mos.csv"), "system_id,utterance_id,mos\na,u1,3.0\n").unwrap();
        assert!(matches!(SystemSet::load_dir(dir.path()), Err(Error::Label(_))));
    }

    #[test]
    fn select_utterances_keeps_alignment() {
        let sub = tiny_set().select_utterances(&[1]).unwrap();
        assert_eq!(sub.utterance_ids(), &["u2".to_string()]);
        assert_eq!(sub.mos().unwrap(), &vec![vec![3.5], vec![2.5]]);
        assert_eq!(sub.clip(0, 0).unwrap(), &clip(0.2));
    }
}
