use voxmind::nn::{Graph, Tensor};
use voxmind::persist::{
    decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor, load_checkpoint, probe_activation,
    read_tensor, save_checkpoint, weights_hash, CheckpointMeta, PersistError,
};
use voxmind::zoo::ModelName;
use voxmind_oracles::Fixture;

const SHAPE: [usize; 3] = [1, 32, 33];

fn meta() -> CheckpointMeta {
    CheckpointMeta {
        phase: 2,
        seed: 9,
        created_at: "2026-01-01T00:00:00Z".into(),
        source_manifest_hash: "ab".repeat(32),
        model: Some("test".into()),
    }
}

/// A model whose every parameter and buffer holds random non-default values.
fn scrambled(model: ModelName, seed: u64) -> Graph<f32> {
    let mut g: Graph<f32> = model.build(&SHAPE, 2, seed).unwrap();
    let mut r = Fixture::new(seed);
    let names: Vec<(String, Vec<usize>)> =
        g.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    for (name, shape) in names {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.uniform(0.5, 1.5) as f32 * if r.below(2) == 0 { 1.0 } else { 0.2 }).collect();
        g.set_tensor(&name, Tensor::from_vec(&shape, data).unwrap()).unwrap();
    }
    g
}

fn batch(seed: u64, n: usize) -> Tensor<f32> {
    let mut r = Fixture::new(seed);
    let len = n * SHAPE.iter().product::<usize>();
    Tensor::from_vec(&[n, 1, 32, 33], (0..len).map(|_| r.uniform(0.0, 1.0) as f32).collect()).unwrap()
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn round_trip_is_bit_exact_for_every_family() {
    let dir = tempfile::tempdir().unwrap();
    for (k, model) in ModelName::ALL.iter().enumerate() {
        let g = scrambled(*model, 40 + k as u64);
        let path = dir.path().join(format!("{model}.vsmc"));
        let probe = save_checkpoint(&g, &path, &meta()).unwrap();
        assert!(!dir.path().join(format!("{model}.vsmc.tmp")).exists());
        let back = load_checkpoint(&path).unwrap();

        assert_eq!(back.meta, meta());
        assert_eq!(back.probe, probe);
        assert_eq!(back.graph.spec(), g.spec());
        assert_eq!(weights_hash(&back.graph, None), weights_hash(&g, None));
        let x = batch(7, 5);
        assert_eq!(bits(&back.graph.predict(&x, 2).unwrap()), bits(&g.predict(&x, 2).unwrap()));

        // The probe sits at the transfer cut point and is reproduced exactly.
        assert_eq!(Some(probe.layer.as_str()), g.cut_point());
        assert_eq!(
            bits(&probe_activation(&back.graph, &probe.layer).unwrap()),
            bits(&probe_activation(&g, &probe.layer).unwrap())
        );
        // Encoding is a pure function of graph and metadata.
        assert_eq!(std::fs::read(&path).unwrap(), encode_checkpoint(&back.graph, &meta()).unwrap());
    }
}

#[test]
fn any_flipped_byte_is_rejected() {
    let bytes = encode_checkpoint(&scrambled(ModelName::MiniVgg, 3), &meta()).unwrap();
    let mut r = Fixture::new(5);
    let mut positions: Vec<usize> = (0..300).map(|_| r.below(bytes.len())).collect();
    positions.extend([0, 4, 8, bytes.len() - 1, bytes.len() / 2]);
    for pos in positions {
        for bit in [0u8, 7] {
            let mut bad = bytes.clone();
            bad[pos] ^= 1 << bit;
            assert!(decode_checkpoint(&bad).is_err(), "flip of bit {bit} at byte {pos} accepted");
        }
    }
}

#[test]
fn truncation_and_trailing_bytes_are_rejected() {
    let bytes = encode_checkpoint(&scrambled(ModelName::MiniDense, 4), &meta()).unwrap();
    for len in [0, 3, 11, 12, 100, bytes.len() / 2, bytes.len() - 5, bytes.len() - 1] {
        assert!(decode_checkpoint(&bytes[..len]).is_err(), "truncated to {len} accepted");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode_checkpoint(&longer).is_err());
}

/// Recompute the trailing CRC so that only the semantic checks remain.
fn reseal(bytes: &mut Vec<u8>) {
    bytes.truncate(bytes.len() - 4);
    let crc = crc32fast::hash(bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
}

/// Byte offset in the payload of `tensor`, found by walking the header.
fn payload_offset(bytes: &[u8], tensor: &str) -> usize {
    let u64_at = |p: usize| u64::from_le_bytes(bytes[p..p + 8].try_into().unwrap()) as usize;
    let mut p = 8;
    for _ in 0..3 {
        p += 8 + u64_at(p);
    }
    let count = u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap());
    p += 4;
    let mut found = None;
    for _ in 0..count {
        let nlen = u16::from_le_bytes(bytes[p..p + 2].try_into().unwrap()) as usize;
        let name = std::str::from_utf8(&bytes[p + 2..p + 2 + nlen]).unwrap().to_string();
        p += 2 + nlen + 1;
        let ndim = bytes[p] as usize;
        p += 1 + 8 * ndim;
        if name == tensor {
            found = Some(u64_at(p));
        }
        p += 16;
    }
    p + found.expect("tensor present")
}

#[test]
fn backbone_tampering_fails_the_probe() {
    let g = scrambled(ModelName::MiniInception, 6);
    let mut bytes = encode_checkpoint(&g, &meta()).unwrap();
    let first = g.layers()[0].name().to_string();
    let at = payload_offset(&bytes, &format!("{first}/weight"));
    bytes[at] ^= 0x10;
    reseal(&mut bytes);
    match decode_checkpoint(&bytes) {
        Err(PersistError::ProbeMismatch { layer }) => assert_eq!(Some(layer.as_str()), g.cut_point()),
        other => panic!("expected probe mismatch, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn future_version_is_reported() {
    let mut bytes = encode_checkpoint(&scrambled(ModelName::MiniVgg, 8), &meta()).unwrap();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    reseal(&mut bytes);
    assert!(matches!(decode_checkpoint(&bytes), Err(PersistError::UnsupportedVersion(2))));
}

#[test]
fn tensor_files_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Fixture::new(9);
    for case in 0..20 {
        let dims = vec![1 + r.below(5), 1 + r.below(7)];
        let data: Vec<f32> = (0..dims[0] * dims[1]).map(|_| r.uniform(-1.0, 1.0) as f32).collect();
        let path = dir.path().join(format!("{case}.vstn"));
        voxmind::persist::write_tensor(&path, &dims, &data).unwrap();
        let (d, v) = read_tensor(&path).unwrap();
        assert_eq!((d, bits(&v)), (dims.clone(), bits(&data)));

        let bytes = encode_tensor(&dims, &data);
        let mut bad = bytes.clone();
        let pos = r.below(bad.len());
        bad[pos] ^= 0x01;
        assert!(decode_tensor(&bad).is_err());
        assert!(decode_tensor(&bytes[..bytes.len() - 1]).is_err());
    }
    let mut huge = encode_tensor(&[1], &[0.0]);
    huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
    reseal(&mut huge);
    assert!(decode_tensor(&huge).is_err());
}
