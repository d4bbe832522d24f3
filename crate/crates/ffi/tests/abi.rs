use std::ffi::{CStr, CString};
use std::ptr;

use mart_core::dsp::{synth_corpus, SynthConfig};
use mart_core::eval::{embed_tracks, EmbeddingSet};
use mart_core::model::ModelConfig;
use mart_core::train::{pretrain_tracks, save_checkpoint, TrainConfig};
use mart_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mart_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn tree_spans_through_handles() {
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { mart_tree_build(8, 2, 3, &mut t) }, MartStatus::Ok);
    assert_eq!(unsafe { mart_tree_node_count(t) }, 7);
    let (mut s, mut e) = (0, 0);
    assert_eq!(unsafe { mart_tree_span(t, 2, 3, &mut s, &mut e) }, MartStatus::Ok);
    assert_eq!((s, e), (6, 8));
    assert_eq!(unsafe { mart_tree_span(t, 3, 0, &mut s, &mut e) }, MartStatus::OutOfRange);
    assert!(last_error().contains("level 3"));
    unsafe { mart_tree_free(t) };
    unsafe { mart_tree_free(ptr::null_mut()) };
}

#[test]
fn errors_map_to_status_codes() {
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { mart_tree_build(8, 1, 3, &mut t) }, MartStatus::Usage);
    assert!(t.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { mart_tree_build(3, 2, 3, &mut t) }, MartStatus::Data);
    assert_eq!(unsafe { mart_tree_build(8, 2, 3, ptr::null_mut()) }, MartStatus::NullPointer);
    let mut out = 0.0;
    let scores = [1.0, 2.0];
    assert_eq!(unsafe { mart_roc_auc(scores.as_ptr(), [1u8, 1].as_ptr(), 2, &mut out) }, MartStatus::Numeric);
    let missing = CString::new("/nonexistent/file.emb").unwrap();
    let mut set = ptr::null_mut();
    assert_eq!(unsafe { mart_embeddings_read(missing.as_ptr(), &mut set) }, MartStatus::Data);
    assert_eq!(unsafe { mart_embeddings_len(ptr::null()) }, 0);
}

#[test]
fn roc_auc_matches_core() {
    let scores = [0.9, 0.8, 0.3, 0.2];
    let labels = [1u8, 0, 1, 0];
    let mut out = 0.0;
    assert_eq!(unsafe { mart_roc_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut out) }, MartStatus::Ok);
    assert_eq!(out, 0.75);
}

#[test]
fn embeddings_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.emb");
    let mut s = EmbeddingSet::new(3);
    s.push("a".into(), vec![1.0, 2.0, 3.0]).unwrap();
    s.push("b".into(), vec![-1.0, 0.5, 0.0]).unwrap();
    s.write(&path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { mart_embeddings_read(c.as_ptr(), &mut h) }, MartStatus::Ok);
    assert_eq!(unsafe { (mart_embeddings_len(h), mart_embeddings_dim(h)) }, (2, 3));
    let mut row = [0f32; 3];
    assert_eq!(unsafe { mart_embeddings_row(h, 1, row.as_mut_ptr(), 3) }, MartStatus::Ok);
    assert_eq!(row, [-1.0, 0.5, 0.0]);
    assert_eq!(unsafe { mart_embeddings_row(h, 2, row.as_mut_ptr(), 3) }, MartStatus::OutOfRange);
    assert_eq!(unsafe { mart_embeddings_row(h, 0, row.as_mut_ptr(), 2) }, MartStatus::OutOfRange);
    unsafe { mart_embeddings_free(h) };
}

#[test]
fn checkpoint_embedding_matches_core() {
    let mut cfg = TrainConfig::desk();
    cfg.model = ModelConfig {
        mel_bands: 32,
        frames: 16,
        channels: vec![4, 8, 8, 16],
        d_t: 6,
        head_hidden: 16,
        contrastive_dim: 8,
        n: 3,
        blocks: 1,
        lambda_down: vec![1.0; 2],
        lambda_up: vec![1.0; 2],
        ..ModelConfig::desk()
    };
    cfg.root_seconds = 0.2;
    cfg.batch = 4;
    cfg.epochs = 1;
    let corpus = synth_corpus(&SynthConfig {
        tracks: 4,
        cliques: 2,
        classes: 2,
        seconds: 0.25,
        ..Default::default()
    })
    .unwrap();
    let audio: Vec<_> = corpus.tracks.iter().map(|t| t.audio.clone()).collect();
    let ck = pretrain_tracks(&cfg, &audio, None).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.mart");
    save_checkpoint(&path, &ck).unwrap();
    let want = embed_tracks(&cfg, &ck.store, &[&audio[0]]).unwrap().remove(0);

    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { mart_checkpoint_load(c.as_ptr(), &mut h) }, MartStatus::Ok);
    let dim = unsafe { mart_checkpoint_embedding_dim(h) };
    assert_eq!(dim, want.len());
    let mut got = vec![0f32; dim];
    let x = audio[0].samples();
    let st = unsafe { mart_embed(h, x.as_ptr(), x.len(), audio[0].sample_rate(), got.as_mut_ptr(), dim) };
    assert_eq!(st, MartStatus::Ok, "{}", last_error());
    assert_eq!(got, want);
    let st = unsafe { mart_embed(h, x.as_ptr(), x.len(), 16_000, got.as_mut_ptr(), dim - 1) };
    assert_eq!(st, MartStatus::OutOfRange);
    unsafe { mart_checkpoint_free(h) };
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mart.h")).unwrap();
    for f in [
        "mart_last_error",
        "mart_tree_build",
        "mart_tree_free",
        "mart_tree_node_count",
        "mart_tree_span",
        "mart_checkpoint_load",
        "mart_checkpoint_free",
        "mart_checkpoint_embedding_dim",
        "mart_embed",
        "mart_embeddings_read",
        "mart_embeddings_free",
        "mart_embeddings_len",
        "mart_embeddings_dim",
        "mart_embeddings_row",
        "mart_roc_auc",
        "MART_STATUS_OK",
        "typedef struct MartTree MartTree",
    ] {
        assert!(header.contains(f), "header lacks {f}");
    }
}
