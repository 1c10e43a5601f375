//! Dataset splits on disk: `{train,id_eval,ood_eval}.{pairs,attrs}.tsv`.

use std::path::{Path, PathBuf};

use smorm_core::rng::derive_seed;
use smorm_core::world::{
    gen_multiattr, gen_pairwise, read_attrs, read_pairs, write_attrs, write_pairs, AttributeRecord,
    PairwiseRecord, RecordHeader,
};

use crate::config::{BuiltWorld, RunConfig};
use crate::error::{CliError, Result};

pub const SPLITS: [&str; 3] = ["train", "id_eval", "ood_eval"];

pub fn pairs_file(split: &str) -> String {
    format!("{split}.pairs.tsv")
}

pub fn attrs_file(split: &str) -> String {
    format!("{split}.attrs.tsv")
}

/// One split; a file that was not supplied is `None`.
#[derive(Clone, Debug, Default)]
pub struct Split {
    pub name: String,
    pub pairs: Option<Vec<PairwiseRecord>>,
    pub attrs: Option<Vec<AttributeRecord>>,
    source: Option<PathBuf>,
}

impl Split {
    fn missing(&self, file: String) -> CliError {
        match &self.source {
            Some(dir) => {
                CliError::config(format!("missing data file {}", dir.join(file).display()))
            }
            None => CliError::config(format!("split `{}` has no {file}", self.name)),
        }
    }

    pub fn pairs(&self) -> Result<&[PairwiseRecord]> {
        self.pairs
            .as_deref()
            .ok_or_else(|| self.missing(pairs_file(&self.name)))
    }

    pub fn attrs(&self) -> Result<&[AttributeRecord]> {
        self.attrs
            .as_deref()
            .ok_or_else(|| self.missing(attrs_file(&self.name)))
    }
}

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Split,
    pub id_eval: Split,
    pub ood_eval: Split,
}

impl Datasets {
    /// Draws every split from the config's seeds.
    pub fn generate(cfg: &RunConfig, bw: &BuiltWorld) -> Result<Self> {
        let s = cfg.seeds();
        let d = &cfg.data;
        let w = &bw.world;
        let split = |name: &str, pairs, attrs| Split {
            name: name.into(),
            pairs: Some(pairs),
            attrs: Some(attrs),
            source: None,
        };
        Ok(Self {
            train: split(
                "train",
                gen_pairwise(w, d.train_pairs, &bw.train_dist, s.pairs)?,
                gen_multiattr(w, d.train_attrs, &bw.attr_dist, s.attrs)?,
            ),
            id_eval: split(
                "id_eval",
                gen_pairwise(w, d.eval_pairs, &bw.train_dist, s.id_eval)?,
                gen_multiattr(
                    w,
                    d.eval_attrs,
                    &bw.train_dist,
                    derive_seed(s.id_eval, "attrs"),
                )?,
            ),
            ood_eval: split(
                "ood_eval",
                gen_pairwise(w, d.eval_pairs, &bw.ood_dist, s.ood_eval)?,
                gen_multiattr(
                    w,
                    d.eval_attrs,
                    &bw.ood_dist,
                    derive_seed(s.ood_eval, "attrs"),
                )?,
            ),
        })
    }

    /// Reads whichever split files exist in `dir`, checking their headers
    /// against the world.
    pub fn load(dir: &Path, bw: &BuiltWorld) -> Result<Self> {
        if !dir.is_dir() {
            return Err(CliError::config(format!(
                "data directory {} does not exist",
                dir.display()
            )));
        }
        let expected = header(bw);
        let check = |path: &Path, h: RecordHeader| {
            if h != expected {
                return Err(CliError::config(format!(
                    "{} has d_z={} K={}, but the configured world has d_z={} K={}",
                    path.display(),
                    h.latent_dim,
                    h.num_attributes,
                    expected.latent_dim,
                    expected.num_attributes
                )));
            }
            Ok(())
        };
        let load_split = |name: &str| -> Result<Split> {
            let pp = dir.join(pairs_file(name));
            let ap = dir.join(attrs_file(name));
            let pairs = if pp.exists() {
                let (h, r) = read_pairs(&pp)?;
                check(&pp, h)?;
                Some(r)
            } else {
                None
            };
            let attrs = if ap.exists() {
                let (h, r) = read_attrs(&ap)?;
                check(&ap, h)?;
                Some(r)
            } else {
                None
            };
            Ok(Split {
                name: name.into(),
                pairs,
                attrs,
                source: Some(dir.to_path_buf()),
            })
        };
        Ok(Self {
            train: load_split("train")?,
            id_eval: load_split("id_eval")?,
            ood_eval: load_split("ood_eval")?,
        })
    }

    /// From `--data` when given, else generated in memory.
    pub fn resolve(cfg: &RunConfig, bw: &BuiltWorld, dir: Option<&Path>) -> Result<Self> {
        match dir {
            Some(d) => Self::load(d, bw),
            None => Self::generate(cfg, bw),
        }
    }

    pub fn splits(&self) -> [&Split; 3] {
        [&self.train, &self.id_eval, &self.ood_eval]
    }
}

pub fn header(bw: &BuiltWorld) -> RecordHeader {
    RecordHeader {
        latent_dim: bw.world.latent_dim(),
        num_attributes: bw.world.num_attributes(),
    }
}

/// Writes every present file of every split into `dir`; returns the file
/// names written.
pub fn write_all(dir: &Path, bw: &BuiltWorld, data: &Datasets) -> Result<Vec<String>> {
    let h = header(bw);
    let mut names = Vec::new();
    for split in data.splits() {
        if let Some(p) = &split.pairs {
            let name = pairs_file(&split.name);
            write_pairs(&dir.join(&name), h, p)?;
            names.push(name);
        }
        if let Some(a) = &split.attrs {
            let name = attrs_file(&split.name);
            write_attrs(&dir.join(&name), h, a)?;
            names.push(name);
        }
    }
    Ok(names)
}
