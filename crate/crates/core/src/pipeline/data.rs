//! The corpora a run consumes, generated from the config or read from disk.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::synthdata::{read_jsonl, write_jsonl, Generator, MMSample, ProbeItem, Register, Vocab};

pub const DATA_FILES: [&str; 6] = [
    "base.jsonl",
    "captions.jsonl",
    "instruct.jsonl",
    "probe.jsonl",
    "analysis.jsonl",
    "vocab.json",
];

#[derive(Clone, Debug)]
pub struct DataBundle {
    pub vocab: Vocab,
    pub base: Vec<MMSample>,
    pub captions: Vec<MMSample>,
    pub instruct: Vec<MMSample>,
    pub probe: Vec<ProbeItem>,
    /// Held-out labeled captions for the word-level analyses.
    pub analysis: Vec<MMSample>,
}

impl DataBundle {
    pub fn generator(cfg: &RunConfig) -> Generator {
        Generator::new(cfg.data.noise_std, cfg.data.split_words)
    }

    pub fn generate(cfg: &RunConfig) -> Self {
        let g = Self::generator(cfg);
        let d = &cfg.data;
        let seed = cfg.data_seed();
        let analysis_seed = cfg.stream().child("data").child("analysis").as_u64();
        Self {
            base: g.base_corpus_mixed(d.base_register, d.n_base, d.base_other_fraction, seed),
            captions: g.caption_corpus(d.caption_register, d.n_captions, seed),
            instruct: g.instruct_corpus(d.n_instruct, seed),
            probe: g.probe_set(d.n_probe, seed),
            analysis: g.caption_corpus(d.caption_register, d.n_analysis, analysis_seed),
            vocab: g.vocab,
        }
    }

    /// Text corpus in `register` for a base LM, as used by the paradox grid.
    pub fn base_corpus_in(cfg: &RunConfig, register: Register) -> Vec<MMSample> {
        Self::generator(cfg).base_corpus_mixed(register, cfg.data.n_base, cfg.data.base_other_fraction, cfg.data_seed())
    }

    /// Captions of the training images in `register`.
    pub fn captions_in(cfg: &RunConfig, register: Register) -> Vec<MMSample> {
        Self::generator(cfg).caption_corpus(register, cfg.data.n_captions, cfg.data_seed())
    }

    pub fn bos(&self) -> u32 {
        self.vocab.bos()
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths: Vec<PathBuf> = DATA_FILES.iter().map(|f| dir.join(f)).collect();
        write_jsonl(&paths[0], &self.base)?;
        write_jsonl(&paths[1], &self.captions)?;
        write_jsonl(&paths[2], &self.instruct)?;
        write_jsonl(&paths[3], &self.probe)?;
        write_jsonl(&paths[4], &self.analysis)?;
        self.vocab.write_json(&paths[5])?;
        Ok(paths)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        if let Some(missing) = DATA_FILES.iter().map(|f| dir.join(f)).find(|p| !p.is_file()) {
            return Err(Error::Invalid(format!(
                "missing data file {} (run gen-data first)",
                missing.display()
            )));
        }
        Ok(Self {
            base: read_jsonl(&dir.join(DATA_FILES[0]))?,
            captions: read_jsonl(&dir.join(DATA_FILES[1]))?,
            instruct: read_jsonl(&dir.join(DATA_FILES[2]))?,
            probe: read_jsonl(&dir.join(DATA_FILES[3]))?,
            analysis: read_jsonl(&dir.join(DATA_FILES[4]))?,
            vocab: Vocab::read_json(&dir.join(DATA_FILES[5]))?,
        })
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        if self.vocab.len() > vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} words but dims.vocab_size is {vocab_size}",
                self.vocab.len()
            )));
        }
        Ok(())
    }
}
