use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_slide, SlideRecord};
use crate::error::{Error, Result};

/// Lists the slide files of a dataset split. Paths are relative to the
/// directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub d: usize,
    #[serde(rename = "G")]
    pub n_genes: usize,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<(Manifest, PathBuf)> {
        let path = path.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(path)?)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, root))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    fn load(&self, root: &Path, files: &[PathBuf]) -> Result<Vec<SlideRecord>> {
        files
            .iter()
            .map(|f| {
                let slide = read_slide(root.join(f))?;
                if slide.d() != self.d || slide.n_genes() != self.n_genes {
                    return Err(Error::InvalidArgument(format!(
                        "{}: slide has d = {}, G = {}; manifest says d = {}, G = {}",
                        f.display(),
                        slide.d(),
                        slide.n_genes(),
                        self.d,
                        self.n_genes
                    )));
                }
                Ok(slide)
            })
            .collect()
    }

    pub fn load_train(&self, root: &Path) -> Result<Vec<SlideRecord>> {
        self.load(root, &self.train)
    }

    pub fn load_test(&self, root: &Path) -> Result<Vec<SlideRecord>> {
        self.load(root, &self.test)
    }
}
