//! Noisy/clean pair discovery and train/validation/test splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::image::{load_grayscale, resize_bilinear, ImageBuffer};
use crate::data::patches::{extract_patches, PAGE_COLS, PAGE_INPUT, PAGE_ROWS, PATCH_SIZE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Fractions held out for validation and test; the rest trains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub name: String,
    pub noisy: PathBuf,
    pub clean: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairManifest {
    /// Sorted by name.
    pub pairs: Vec<Pair>,
    pub warnings: Vec<String>,
}

impl PairManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split(&self, s: Split) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(move |p| p.split == s)
    }
}

pub(crate) fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm"))
}

/// Image files in `dir` keyed by file stem.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Matches files by stem, then assigns splits with a seeded shuffle.
/// Noisy files without a clean counterpart are reported in `warnings`.
pub fn scan_pairs(
    noisy_dir: impl AsRef<Path>,
    clean_dir: impl AsRef<Path>,
    split: SplitSpec,
) -> Result<PairManifest> {
    let f = |x: f64| (0.0..=1.0).contains(&x);
    if !f(split.val_fraction)
        || !f(split.test_fraction)
        || split.val_fraction + split.test_fraction > 1.0
    {
        return Err(Error::Config(format!("invalid split fractions {split:?}")));
    }
    let noisy = list_images(noisy_dir.as_ref())?;
    let clean = list_images(clean_dir.as_ref())?;
    let mut m = PairManifest::default();
    for (name, path) in noisy {
        match clean.get(&name) {
            Some(c) => m.pairs.push(Pair {
                name,
                noisy: path,
                clean: c.clone(),
                split: Split::Train,
            }),
            None => m
                .warnings
                .push(format!("{}: no clean counterpart", path.display())),
        }
    }
    for w in &m.warnings {
        log::warn!("{w}");
    }
    let n = m.pairs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split.seed));
    let n_val = (n as f64 * split.val_fraction).round() as usize;
    let n_test = ((n as f64 * split.test_fraction).round() as usize).min(n - n_val);
    for (rank, &i) in order.iter().enumerate() {
        m.pairs[i].split = if rank < n_val {
            Split::Val
        } else if rank < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(m)
}

/// How training inputs are cut from pages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    /// `256 x 256` tiles of the page resized to `1024 x 768`.
    Patch,
    /// Whole page resized to `864 x 480`.
    Page,
}

/// Network-ready samples from one page. In patch mode an image that is
/// already a single tile is passed through unchanged.
pub fn prepare(img: &ImageBuffer, mode: InputMode) -> Result<Vec<ImageBuffer>> {
    match mode {
        InputMode::Patch if img.dims() == (PATCH_SIZE, PATCH_SIZE) => Ok(vec![img.clone()]),
        InputMode::Patch => {
            Ok(extract_patches(&resize_bilinear(img, PAGE_ROWS, PAGE_COLS))?.patches)
        }
        InputMode::Page => Ok(vec![resize_bilinear(img, PAGE_INPUT.0, PAGE_INPUT.1)]),
    }
}

/// Loads and prepares every pair of one split as `(noisy, clean)` samples.
pub fn load_samples(
    m: &PairManifest,
    split: Split,
    mode: InputMode,
) -> Result<Vec<(ImageBuffer, ImageBuffer)>> {
    let mut out = Vec::new();
    for p in m.split(split) {
        let noisy = prepare(&load_grayscale(&p.noisy)?, mode)?;
        let clean = prepare(&load_grayscale(&p.clean)?, mode)?;
        if noisy.len() != clean.len() {
            return Err(Error::pre(
                "load_samples",
                format!("{}: noisy and clean pages differ in size", p.name),
            ));
        }
        out.extend(noisy.into_iter().zip(clean));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::save_image;

    fn write(dir: &Path, name: &str) {
        save_image(&ImageBuffer::filled(4, 4, 0.5), dir.join(name)).unwrap();
    }

    fn trees(n: usize) -> tempfile::TempDir {
        let root = tempfile::tempdir().unwrap();
        for d in ["noisy", "clean"] {
            fs::create_dir(root.path().join(d)).unwrap();
            for i in 0..n {
                write(&root.path().join(d), &format!("page{i:03}.pgm"));
            }
        }
        root
    }

    #[test]
    fn matched_pairs_and_split_sizes() {
        let root = trees(20);
        let m = scan_pairs(
            root.path().join("noisy"),
            root.path().join("clean"),
            SplitSpec::default(),
        )
        .unwrap();
        assert_eq!(m.len(), 20);
        assert_eq!(m.split(Split::Val).count(), 2);
        assert_eq!(m.split(Split::Train).count(), 18);
        assert!(m.pairs.windows(2).all(|w| w[0].name < w[1].name));
        let again = scan_pairs(
            root.path().join("noisy"),
            root.path().join("clean"),
            SplitSpec::default(),
        )
        .unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn orphan_noisy_file_is_warned_and_skipped() {
        let root = trees(5);
        write(&root.path().join("noisy"), "orphan.png");
        let m = scan_pairs(
            root.path().join("noisy"),
            root.path().join("clean"),
            SplitSpec::default(),
        )
        .unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.warnings.len(), 1);
        assert!(m.warnings[0].contains("orphan"));
    }

    #[test]
    fn empty_dirs_give_empty_manifest() {
        let root = trees(0);
        let m = scan_pairs(
            root.path().join("noisy"),
            root.path().join("clean"),
            SplitSpec::default(),
        )
        .unwrap();
        assert!(m.is_empty() && m.warnings.is_empty());
    }

    #[test]
    fn prepare_modes() {
        let page = ImageBuffer::filled(600, 400, 0.25);
        assert_eq!(prepare(&page, InputMode::Patch).unwrap().len(), 12);
        let whole = prepare(&page, InputMode::Page).unwrap();
        assert_eq!(whole[0].dims(), (864, 480));
        let tile = ImageBuffer::filled(256, 256, 0.25);
        assert_eq!(prepare(&tile, InputMode::Patch).unwrap(), vec![tile]);
    }
}
