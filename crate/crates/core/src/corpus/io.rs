//! Corpus directories: a TOML `manifest` plus one binary file per
//! utterance under `utt/<id>.bin`.
//!
//! Utterance files, little-endian:
//!
//! ```text
//! magic "LNUT" | u32 version | u32 frames | u32 input_dim
//! u32 × 4 stream dims (mcep, lf0, bap, uv)
//! f64 × frames·input_dim inputs, then each stream row-major
//! u8 × frames voicing flags (0 or 1)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusConfig, NormStats, SpeakerRef, Utterance};
use crate::error::{Error, Result};
use crate::model::io::{Reader, Writer};
use crate::nn::Matrix;
use crate::streams::{Stream, Streams};

pub const MANIFEST_FILE: &str = "manifest";
pub const UTT_DIR: &str = "utt";
pub const UTT_MAGIC: &[u8; 4] = b"LNUT";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SplitIds {
    train: Vec<String>,
    valid: Vec<String>,
    test: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    corpus_seed: u64,
    speaker: SpeakerRef,
    config: CorpusConfig,
    splits: SplitIds,
    stats: NormStats,
}

pub(crate) fn encode_utterance(u: &Utterance) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(UTT_MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.u32(u.frames());
    w.u32(u.inputs.cols());
    for s in Stream::ALL {
        w.u32(u.targets[s].cols());
    }
    w.f64s(u.inputs.as_slice());
    for s in Stream::ALL {
        w.f64s(u.targets[s].as_slice());
    }
    w.buf.extend(u.voiced.iter().map(|&v| v as u8));
    w.buf
}

pub(crate) fn decode_utterance(id: &str, bytes: &[u8]) -> Result<Utterance> {
    let mut r = Reader::new(bytes);
    r.expect(UTT_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(r.err(format!("unsupported utterance format {version}")));
    }
    let frames = r.u32()?;
    let input_dim = r.u32()?;
    let dims: Vec<usize> = (0..4).map(|_| r.u32()).collect::<Result<_>>()?;
    let inputs = Matrix::from_vec(frames, input_dim, r.f64s(frames * input_dim)?)?;
    let mut streams = Vec::with_capacity(4);
    for &d in &dims {
        streams.push(Matrix::from_vec(frames, d, r.f64s(frames * d)?)?);
    }
    let mut voiced = Vec::with_capacity(frames);
    for _ in 0..frames {
        voiced.push(match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(r.err(format!("voicing flag {other} is not 0 or 1"))),
        });
    }
    r.finish()?;
    let [a, b, c, d]: [Matrix; 4] = streams.try_into().expect("four streams");
    Ok(Utterance {
        id: id.to_string(),
        inputs,
        targets: Streams::new(a, b, c, d)?,
        voiced,
    })
}

fn manifest_text(c: &Corpus) -> Result<String> {
    let ids = |v: &[Utterance]| v.iter().map(|u| u.id.clone()).collect();
    let m = Manifest {
        format_version: FORMAT_VERSION,
        corpus_seed: c.seed,
        speaker: c.speaker,
        config: c.config.clone(),
        splits: SplitIds {
            train: ids(&c.train),
            valid: ids(&c.valid),
            test: ids(&c.test),
        },
        stats: c.stats.clone(),
    };
    toml::to_string(&m).map_err(|e| Error::config(format!("manifest serialization: {e}")))
}

/// Writes `dir/manifest` and `dir/utt/<id>.bin`, creating directories.
pub fn save_corpus(c: &Corpus, dir: &Path) -> Result<()> {
    let utt_dir = dir.join(UTT_DIR);
    fs::create_dir_all(&utt_dir).map_err(|e| Error::io(&utt_dir, e))?;
    for u in c.train.iter().chain(&c.valid).chain(&c.test) {
        let p = utt_dir.join(format!("{}.bin", u.id));
        fs::write(&p, encode_utterance(u)).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, manifest_text(c)?).map_err(|e| Error::io(&p, e))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::Load {
        what: format!("manifest {}", p.display()),
        detail: e.to_string(),
    })?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Load {
        what: format!("manifest {}", p.display()),
        detail: e.to_string(),
    })?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Load {
            what: "manifest".into(),
            detail: format!("unsupported format version {}", m.format_version),
        });
    }
    let load = |ids: &[String]| -> Result<Vec<Utterance>> {
        ids.iter()
            .map(|id| {
                let path = dir.join(UTT_DIR).join(format!("{id}.bin"));
                let bytes = fs::read(&path).map_err(|e| Error::Load {
                    what: format!("utterance {id}"),
                    detail: e.to_string(),
                })?;
                decode_utterance(id, &bytes).map_err(|e| Error::Load {
                    what: format!("utterance {id}"),
                    detail: e.to_string(),
                })
            })
            .collect()
    };
    Ok(Corpus {
        speaker: m.speaker,
        seed: m.corpus_seed,
        config: m.config,
        train: load(&m.splits.train)?,
        valid: load(&m.splits.valid)?,
        test: load(&m.splits.test)?,
        stats: m.stats,
    })
}
