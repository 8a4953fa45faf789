//! Files written by `prepare` and read by the other commands.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use namedis::nnmf::{Basis, NnlsOptions};
use namedis::pipeline::{read_latent, write_latent, Embedder, LatentRow, Prepared, SplitManifest};
use namedis::records::FeatureVocabulary;

use crate::error::{CliError, CliResult};

pub const VOCABULARY: &str = "vocabulary.jsonl";
pub const BASIS: &str = "basis.txt";
pub const TRAIN: &str = "train_latent.jsonl";
pub const TEST: &str = "test_latent.jsonl";
pub const MANIFEST: &str = "split.json";

/// Loaded artifacts of one prepared dataset.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub embedder: Embedder,
    pub manifest: SplitManifest,
    pub train: Vec<LatentRow>,
    pub test: Vec<LatentRow>,
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn open(dir: &Path, name: &str) -> CliResult<BufReader<File>> {
    let path = dir.join(name);
    File::open(&path)
        .map(BufReader::new)
        .map_err(|e| CliError::usage(format!("{}: {e} (run `prepare` first?)", path.display())))
}

pub fn write(dir: &Path, p: &Prepared) -> CliResult<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    let mut w = create(dir, VOCABULARY)?;
    p.vocabulary.write(&mut w)?;
    w.flush()?;
    let mut w = create(dir, BASIS)?;
    p.basis.write(&mut w)?;
    w.flush()?;
    let mut w = create(dir, TRAIN)?;
    write_latent(&mut w, &p.train)?;
    w.flush()?;
    let mut w = create(dir, TEST)?;
    write_latent(&mut w, &p.test)?;
    w.flush()?;
    let mut w = create(dir, MANIFEST)?;
    serde_json::to_writer_pretty(&mut w, &p.manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok([VOCABULARY, BASIS, TRAIN, TEST, MANIFEST]
        .iter()
        .map(|n| dir.join(n))
        .collect())
}

pub fn read(dir: &Path) -> CliResult<Artifacts> {
    let ctx = |name: &str| format!("{}", dir.join(name).display());
    let vocabulary =
        FeatureVocabulary::read(open(dir, VOCABULARY)?).map_err(|e| CliError::from(e).context(ctx(VOCABULARY)))?;
    let basis = Basis::read(open(dir, BASIS)?).map_err(|e| CliError::from(e).context(ctx(BASIS)))?;
    let train = read_latent(open(dir, TRAIN)?).map_err(|e| CliError::from(e).context(ctx(TRAIN)))?;
    let test = read_latent(open(dir, TEST)?).map_err(|e| CliError::from(e).context(ctx(TEST)))?;
    let manifest: SplitManifest =
        serde_json::from_reader(open(dir, MANIFEST)?).map_err(|e| CliError::data(format!("{}: {e}", ctx(MANIFEST))))?;
    if basis.dim() != vocabulary.len() {
        return Err(CliError::data(format!(
            "basis has {} columns but the vocabulary has {} tokens",
            basis.dim(),
            vocabulary.len()
        )));
    }
    if let Some(r) = train.iter().chain(&test).find(|r| r.x.len() != basis.rank()) {
        return Err(CliError::data(format!(
            "record `{}` has {} latent coordinates, expected {}",
            r.id,
            r.x.len(),
            basis.rank()
        )));
    }
    Ok(Artifacts {
        embedder: Embedder {
            vocabulary,
            basis,
            nnls: NnlsOptions::default(),
        },
        manifest,
        train,
        test,
    })
}
