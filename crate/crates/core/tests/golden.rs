//! Byte-level pins on the on-disk formats and the seeded generators.

use std::fs;

use lnadapt_core::model::{read_model, write_model};
use lnadapt_core::{
    build_model, load_corpus, make_speaker, save_corpus, synthesize_corpus, AdapterKind,
    CorpusConfig, InsertionPolicy, ModelConfig,
};
use sha2::{Digest, Sha256};

const MODEL_SHA: &str = "730dff570a1dd3ebc81db1940467bb150ee7a87672b7611d6d7ce7c1bd01c16c";
const ADAPTED_MODEL_SHA: &str = "2cfcc44129ccb09dadbb92a38bb8ac458a2f26765093da853d84fb82e22c1a70";
const MANIFEST_SHA: &str = "ebf9d21e42ebbbcdcded87bccbec38fe8f7d35be81dcbc2a7968339db57a86bf";
const FIRST_UTT_SHA: &str = "9384ecadc55f2746253d499aab6d354f13ce25a42aadd354cbcc48f6a37f8272";

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn fresh_model_bytes_are_pinned() {
    let model = build_model(&ModelConfig::desk(), 1).unwrap();
    let bytes = write_model(&model);
    assert_eq!(&bytes[..4], b"LTM1");
    assert_eq!(sha(&bytes), MODEL_SHA);
    assert_eq!(read_model(&bytes).unwrap(), model);
}

#[test]
fn adapted_model_bytes_are_pinned() {
    let model = build_model(&ModelConfig::desk(), 1)
        .unwrap()
        .insert_adapters(
            &InsertionPolicy::default(),
            AdapterKind::Lrpd { rank: 2 },
            5,
        )
        .unwrap();
    let bytes = write_model(&model);
    assert_eq!(sha(&bytes), ADAPTED_MODEL_SHA);
    assert_eq!(write_model(&read_model(&bytes).unwrap()), bytes);
}

#[test]
fn corpus_files_are_pinned() {
    let cfg = CorpusConfig::default();
    let spk = make_speaker(3, 0.4).unwrap();
    let corpus = synthesize_corpus(&spk, 70, 3, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&corpus, dir.path()).unwrap();
    assert_eq!(
        sha(&fs::read(dir.path().join("manifest")).unwrap()),
        MANIFEST_SHA
    );
    let first = &corpus.train[0];
    let utt = fs::read(dir.path().join("utt").join(format!("{}.bin", first.id))).unwrap();
    assert_eq!(&utt[..4], b"LNUT");
    assert_eq!(sha(&utt), FIRST_UTT_SHA);
    assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
}
