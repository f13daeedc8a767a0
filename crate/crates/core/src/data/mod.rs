//! Procedural real and fake image families for cross-generator experiments,
//! and loading of image folders from disk.

mod dir;
mod synth;

pub use self::dir::{load_directory, write_dataset, MANIFEST};
pub use self::synth::{gen_fake, gen_real, sample_rng, ArtifactConfig};

use crate::error::{arg_err, IaplError, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Real,
    FakeA,
    FakeB,
    External,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Real, Family::FakeA, Family::FakeB, Family::External];

    pub fn name(self) -> &'static str {
        match self {
            Family::Real => "real",
            Family::FakeA => "fakeA",
            Family::FakeB => "fakeB",
            Family::External => "external",
        }
    }

    pub fn label(self) -> u8 {
        u8::from(self != Family::Real)
    }

    pub(crate) fn code(self) -> u64 {
        self as u64
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = IaplError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| IaplError::Argument(format!("unknown family `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// 0 real, 1 fake.
    pub label: u8,
    pub family: Family,
}

impl Sample {
    pub fn new(image: Image, family: Family) -> Self {
        Self {
            image,
            label: family.label(),
            family,
        }
    }

    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic {
        /// Families in emission order with their sample counts.
        counts: Vec<(Family, usize)>,
        size: usize,
        seed: u64,
        artifacts: ArtifactConfig,
    },
    Directory {
        root: std::path::PathBuf,
    },
}

/// Parses `real=N,fakeA=N,...`.
pub fn parse_counts(s: &str) -> Result<Vec<(Family, usize)>> {
    let mut out: Vec<(Family, usize)> = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let Some((name, n)) = part.split_once('=') else {
            return arg_err(format!("count `{part}` is not family=N"));
        };
        let fam: Family = name.trim().parse()?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| IaplError::Argument(format!("bad count in `{part}`")))?;
        if out.iter().any(|(f, _)| *f == fam) {
            return arg_err(format!("family `{fam}` listed twice"));
        }
        out.push((fam, n));
    }
    if out.is_empty() {
        return arg_err("no family counts given");
    }
    Ok(out)
}

/// Materializes a dataset. Synthetic samples come out family by family in
/// the listed order; each depends only on `(seed, family, index)`.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    match spec {
        DatasetSpec::Synthetic {
            counts,
            size,
            seed,
            artifacts,
        } => {
            use rayon::prelude::*;
            let jobs: Vec<(Family, usize)> = counts
                .iter()
                .flat_map(|&(f, n)| (0..n).map(move |i| (f, i)))
                .collect();
            jobs.par_iter()
                .map(|&(family, i)| {
                    let mut rng = sample_rng(*seed, family, i as u64);
                    let image = match family {
                        Family::Real => gen_real(&mut rng, *size)?,
                        Family::FakeA | Family::FakeB => gen_fake(&mut rng, family, *size, artifacts)?,
                        Family::External => return arg_err("external samples cannot be synthesized"),
                    };
                    Ok(Sample::new(image, family))
                })
                .collect()
        }
        DatasetSpec::Directory { root } => load_directory(root),
    }
}
