mod common;

use skillbase::kb::{read_envelope, KnowledgeBase, MAGIC};
use skillbase::{Error, Mat};

fn assert_f32_close(a: &Mat, b: &Mat) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let kb = common::synthetic_kb(3, 1);
    let first = dir.path().join("a.kb");
    let second = dir.path().join("b.kb");
    kb.save(&first).unwrap();
    let loaded = KnowledgeBase::load(&first, &kb.fingerprint).unwrap();
    loaded.save(&second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn loaded_records_match_at_f32_precision() {
    let kb = common::synthetic_kb(3, 2);
    let back = KnowledgeBase::from_bytes(&kb.to_bytes().unwrap()).unwrap();
    assert_eq!(back.fingerprint, kb.fingerprint);
    assert_eq!(back.embedding, kb.embedding);
    assert_eq!(back.embedding_digest, kb.embedding_digest);
    assert_eq!(back.method, kb.method);
    assert_eq!(back.len(), 3);
    for (a, b) in kb.records.iter().zip(&back.records) {
        assert_eq!(a.skill_id, b.skill_id);
        assert_eq!(a.name, b.name);
        assert_eq!(a.instruction_digest, b.instruction_digest);
        assert_eq!(a.sr_gt, b.sr_gt);
        assert_eq!(a.adapter.gate_decisions, b.adapter.gate_decisions);
        for (p, q) in a.adapter.pairs.iter().zip(&b.adapter.pairs) {
            assert_f32_close(&p.a, &q.a);
            assert_f32_close(&p.b, &q.b);
        }
        for (g, h) in a.adapter.gate_logits.iter().zip(&b.adapter.gate_logits) {
            assert_f32_close(g, h);
        }
        assert_f32_close(&a.subspace.basis, &b.subspace.basis);
    }
    assert!(back.gate_mismatches().is_empty());
}

#[test]
fn file_layout_is_self_describing() {
    let kb = common::synthetic_kb(2, 3);
    let bytes = kb.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    let (env, blob_start) = read_envelope(&bytes).unwrap();
    let env_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    assert_eq!(blob_start, 12 + env_len);
    let section = &bytes[blob_start..];
    let mut covered = 0u64;
    for entry in &env.records {
        assert_eq!(entry.blobs.len(), 3 * kb.fingerprint.layers + 1);
        for (name, blob) in &entry.blobs {
            assert_eq!(blob.length, (blob.shape[0] * blob.shape[1] * 4) as u64, "{name}");
            assert!(blob.offset + blob.length <= section.len() as u64);
            covered += blob.length;
        }
        let a0 = &entry.blobs["a.0"];
        assert_eq!(a0.shape, [kb.fingerprint.rank, kb.fingerprint.hidden]);
        let first = f32::from_le_bytes(section[a0.offset as usize..a0.offset as usize + 4].try_into().unwrap());
        let rec = kb.record(entry.meta.skill_id).unwrap();
        assert_eq!(first, rec.adapter.pairs[0].a[(0, 0)] as f32);
    }
    assert_eq!(covered, section.len() as u64);
}

#[test]
fn malformed_files_are_rejected() {
    let kb = common::synthetic_kb(2, 4);
    let bytes = kb.to_bytes().unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(KnowledgeBase::from_bytes(&bad_magic), Err(Error::Format(_))));

    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(KnowledgeBase::from_bytes(truncated), Err(Error::Corruption(_))));

    let mut padded = bytes.clone();
    padded.extend_from_slice(&[0, 0, 0, 0]);
    assert!(matches!(KnowledgeBase::from_bytes(&padded), Err(Error::Corruption(_))));

    let mut huge = bytes.clone();
    huge[4..12].copy_from_slice(&(1u64 << 40).to_le_bytes());
    assert!(matches!(KnowledgeBase::from_bytes(&huge), Err(Error::Corruption(_))));
    assert!(matches!(KnowledgeBase::from_bytes(&bytes[..7]), Err(Error::Corruption(_))));
}

#[test]
fn fingerprint_mismatch_is_a_compatibility_error() {
    let dir = tempfile::tempdir().unwrap();
    let kb = common::synthetic_kb(1, 5);
    let path = dir.path().join("kb.bin");
    kb.save(&path).unwrap();
    let mut other = kb.fingerprint;
    other.hidden += 5;
    let err = KnowledgeBase::load(&path, &other).unwrap_err();
    assert!(matches!(err, Error::Compatibility(_)));
    assert_eq!(err.exit_code(), 3);
    assert!(KnowledgeBase::load_unchecked(&path).is_ok());
    let missing = KnowledgeBase::load(dir.path().join("nope"), &kb.fingerprint).unwrap_err();
    assert!(matches!(missing, Error::Io { .. }));
}

#[test]
fn appending_keeps_the_original() {
    let kb = common::synthetic_kb(3, 6);
    let base = common::synthetic_kb(2, 6);
    let grown = base.append_record(kb.records[2].clone()).unwrap();
    assert_eq!(base.len(), 2);
    assert_eq!(grown.len(), 3);
    let dup = grown.append_record(kb.records[0].clone()).unwrap_err();
    assert!(matches!(dup, Error::Usage(_)));
}

#[test]
fn summary_lists_every_record() {
    let kb = common::synthetic_kb(3, 7);
    let s = kb.summary();
    assert_eq!(s.records.len(), 3);
    assert!(s.records.iter().all(|r| r.gates.len() == kb.fingerprint.layers && r.subspace_rank == 3));
    let text = s.to_string();
    assert!(text.contains("records:     3"));
    assert!(text.contains(&kb.fingerprint.to_string()));
}
