use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::{Family, Sample};
use crate::error::{IaplError, Result};
use crate::imaging::load_image;

/// Optional per-root listing with columns `path,label,family`; paths are
/// relative to the root.
pub const MANIFEST: &str = "manifest.csv";

fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(IaplError::Data(msg.into()))
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

fn list_class(root: &Path, class: &str) -> Result<Vec<PathBuf>> {
    let dir = root.join(class);
    if !dir.is_dir() {
        return data_err(format!("missing class folder {}", dir.display()));
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(&dir).sort_by_file_name() {
        let entry = entry.map_err(|e| IaplError::Data(e.to_string()))?;
        if entry.file_type().is_file() && is_image(entry.path()) {
            files.push(entry.into_path());
        }
    }
    if files.is_empty() {
        return data_err(format!("class folder {} has no images", dir.display()));
    }
    Ok(files)
}

#[derive(serde::Deserialize)]
struct ManifestRow {
    path: String,
    label: u8,
    family: String,
}

/// Loads `<root>/real` and `<root>/fake` (searched recursively, sorted by
/// path). With a manifest the families and order come from it; otherwise
/// fakes are tagged `external`.
pub fn load_directory(root: &Path) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return data_err(format!("dataset root {} does not exist", root.display()));
    }
    let reals = list_class(root, "real")?;
    let fakes = list_class(root, "fake")?;
    let manifest = root.join(MANIFEST);
    if manifest.is_file() {
        let mut rd = csv::Reader::from_path(&manifest).map_err(|e| IaplError::Data(format!("{}: {e}", manifest.display())))?;
        let mut out = Vec::new();
        for row in rd.deserialize::<ManifestRow>() {
            let row = row.map_err(|e| IaplError::Data(format!("{}: {e}", manifest.display())))?;
            let family: Family = row
                .family
                .parse()
                .map_err(|_| IaplError::Data(format!("unknown family `{}` in manifest", row.family)))?;
            if family.label() != row.label {
                return data_err(format!("manifest label {} contradicts family {family}", row.label));
            }
            let path = root.join(&row.path);
            let in_class = if row.label == 0 { &reals } else { &fakes };
            if !in_class.contains(&path) {
                return data_err(format!("manifest entry {} is not under the {} folder", row.path, if row.label == 0 { "real" } else { "fake" }));
            }
            out.push(Sample::new(load_image(&path)?, family));
        }
        if out.is_empty() {
            return data_err("manifest lists no samples");
        }
        return Ok(out);
    }
    let mut out = Vec::with_capacity(reals.len() + fakes.len());
    for p in &reals {
        out.push(Sample::new(load_image(p)?, Family::Real));
    }
    for p in &fakes {
        out.push(Sample::new(load_image(p)?, Family::External));
    }
    Ok(out)
}

/// Writes `real/<family>_NNNNN.png` and `fake/<family>_NNNNN.png` (index per
/// family) plus the manifest.
pub fn write_dataset(samples: &[Sample], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out.join("real"))?;
    std::fs::create_dir_all(out.join("fake"))?;
    let mut w = csv::Writer::from_path(out.join(MANIFEST)).map_err(|e| IaplError::Data(e.to_string()))?;
    w.write_record(["path", "label", "family"]).map_err(|e| IaplError::Data(e.to_string()))?;
    let mut counters = std::collections::HashMap::new();
    for s in samples {
        let n = counters.entry(s.family).or_insert(0usize);
        let class = if s.label == 0 { "real" } else { "fake" };
        let rel = format!("{class}/{}_{:05}.png", s.family, n);
        *n += 1;
        s.image.save_png(out.join(&rel))?;
        w.write_record([rel, s.label.to_string(), s.family.to_string()])
            .map_err(|e| IaplError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, ArtifactConfig, DatasetSpec};
    use crate::imaging::Image;

    fn write_png(path: &Path, v: f64) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        Image::filled(8, 8, v).unwrap().save_png(path).unwrap();
    }

    #[test]
    fn folder_enumeration_without_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for i in 0..3 {
            write_png(&root.join(format!("real/r{i}.png")), 0.2);
        }
        write_png(&root.join("fake/a.png"), 0.8);
        write_png(&root.join("fake/sub/b.png"), 0.8);
        std::fs::write(root.join("fake/notes.txt"), "x").unwrap();
        let s = load_directory(root).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.iter().map(|x| x.label).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1]);
        assert_eq!(s[4].family, Family::External);
    }

    #[test]
    fn missing_or_empty_folders_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_directory(&dir.path().join("nope")), Err(IaplError::Data(_))));
        write_png(&dir.path().join("real/r.png"), 0.2);
        assert!(matches!(load_directory(dir.path()), Err(IaplError::Data(_))));
        std::fs::create_dir_all(dir.path().join("fake")).unwrap();
        assert!(matches!(load_directory(dir.path()), Err(IaplError::Data(_))));
    }

    #[test]
    fn written_dataset_reloads_with_families() {
        let spec = DatasetSpec::Synthetic {
            counts: vec![(Family::Real, 3), (Family::FakeA, 2), (Family::FakeB, 2)],
            size: 16,
            seed: 1,
            artifacts: ArtifactConfig::default(),
        };
        let samples = build_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples, dir.path()).unwrap();
        assert!(dir.path().join("real/real_00000.png").is_file());
        assert!(dir.path().join("fake/fakeB_00001.png").is_file());
        let back = load_directory(dir.path()).unwrap();
        assert_eq!(back.len(), 7);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!((a.family, a.label), (b.family, b.label));
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        let text = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.starts_with("path,label,family\nreal/real_00000.png,0,real\n"));
    }

    #[test]
    fn inconsistent_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("real/r.png"), 0.2);
        write_png(&dir.path().join("fake/f.png"), 0.8);
        std::fs::write(dir.path().join(MANIFEST), "path,label,family\nreal/r.png,1,fakeA\n").unwrap();
        assert!(matches!(load_directory(dir.path()), Err(IaplError::Data(_))));
        std::fs::write(dir.path().join(MANIFEST), "path,label,family\nfake/f.png,0,real\n").unwrap();
        assert!(matches!(load_directory(dir.path()), Err(IaplError::Data(_))));
    }
}
