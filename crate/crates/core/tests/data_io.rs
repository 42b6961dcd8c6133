use std::fs;

use cxrseg_core::io::{
    decode_image, decode_pgm, decode_weights, encode_mask_pgm, encode_pgm, encode_png, encode_weights, load_manifest,
    load_weights, load_weights_into, parse_manifest, peek_weights, read_image, read_mask, resize, resize_mask,
    save_weights, synth_dataset, synth_generate, write_image, write_mask, Class, DatasetRecord, GrayImage, Split,
};
use cxrseg_core::{build_model, Arch, BinaryMask, Error, ModelConfig, SegModel32, SegModel64, Tensor64};
use proptest::prelude::*;

fn pgm(header: &str, payload: &[u8]) -> Vec<u8> {
    let mut v = header.as_bytes().to_vec();
    v.extend_from_slice(payload);
    v
}

#[test]
fn pgm_fixture_parses_exactly() {
    let img = decode_pgm(&pgm("P5\n2 2\n255\n", &[0, 255, 128, 7])).unwrap();
    assert_eq!(img.dims(), (2, 2));
    assert_eq!(img.data(), &[0, 255, 128, 7]);
    let commented = decode_pgm(&pgm("P5 # made by hand\n2\t2 # dims\n255\n", &[0, 255, 128, 7])).unwrap();
    assert_eq!(commented, img);
    // Width before height.
    let wide = decode_pgm(&pgm("P5\n3 1\n255\n", &[1, 2, 3])).unwrap();
    assert_eq!(wide.dims(), (1, 3));
}

#[test]
fn pgm_rejections() {
    assert!(matches!(decode_pgm(&pgm("P6\n2 2\n255\n", &[0; 12])), Err(Error::Format(_))));
    match decode_pgm(&pgm("P5\n2 2\n65535\n", &[0; 8])) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, 7),
        other => panic!("{other:?}"),
    }
    match decode_pgm(&pgm("P5\n2 2\n255\n", &[1, 2, 3])) {
        Err(Error::Parse { offset, message }) => {
            assert_eq!(offset, 14);
            assert!(message.contains("truncated"));
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(decode_pgm(b"P5\nx 2\n255\n"), Err(Error::Parse { offset: 3, .. })));
    assert!(matches!(decode_pgm(b"P"), Err(Error::Parse { .. })));
    assert!(matches!(decode_pgm(&pgm("P5\n0 2\n255\n", &[])), Err(Error::Parse { .. })));
}

#[test]
fn image_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = GrayImage::new(3, 5, (0..15).map(|i| (i * 17) as u8).collect()).unwrap();
    let path = dir.path().join("a.pgm");
    write_image(&path, &img).unwrap();
    assert_eq!(read_image(&path).unwrap(), img);
    assert_eq!(fs::read(&path).unwrap(), encode_pgm(&img));
    // PNG is accepted on read.
    assert_eq!(decode_image(&encode_png(&img).unwrap()).unwrap(), img);
}

#[test]
fn mask_nonzero_rule() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    fs::write(&path, pgm("P5\n4 1\n255\n", &[0, 1, 200, 255])).unwrap();
    let m = read_mask(&path).unwrap();
    assert_eq!(m.data(), &[0, 1, 1, 1]);
    write_mask(&path, &m).unwrap();
    assert_eq!(read_image(&path).unwrap().data(), &[0, 255, 255, 255]);
    assert_eq!(read_mask(&path).unwrap(), m);
    assert_eq!(encode_mask_pgm(&m), fs::read(&path).unwrap());
}

#[test]
fn resize_examples() {
    let img = GrayImage::new(3, 3, vec![1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
    assert_eq!(resize(&img, 3), img);
    for size in [8, 13, 64] {
        assert!(resize(&GrayImage::filled(5, 7, 93), size).data().iter().all(|&v| v == 93));
    }
    // Hand-computed half-pixel-centre bilinear upsampling.
    let small = GrayImage::new(2, 2, vec![0, 100, 200, 40]).unwrap();
    let big = resize(&small, 4);
    #[rustfmt::skip]
    let expected = [
        0, 25, 75, 100,
        50, 59, 76, 85,
        150, 126, 79, 55,
        200, 160, 80, 40,
    ];
    assert_eq!(big.data(), &expected);

    let checker = BinaryMask::from_fn(4, 4, |r, c| (r + c) % 2 == 0);
    let up = resize_mask(&checker, 8);
    for r in 0..8 {
        for c in 0..8 {
            assert_eq!(up.get(r, c), checker.get(r / 2, c / 2));
        }
    }
}

#[test]
fn manifest_parsing() {
    assert!(parse_manifest("", None).unwrap().is_empty());
    let text = r#"{"id":"a","image":"a.pgm","class":"covid","split":"test"}

{"id":"b","image":"b.pgm","lung_mask":"bl.pgm","class":"non_covid","fold":2}
"#;
    let recs = parse_manifest(text, None).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].class, Class::Covid);
    assert_eq!(recs[0].split, Some(Split::Test));
    assert_eq!(recs[1].fold, Some(2));
    assert_eq!(recs[1].lung_mask.as_deref(), Some(std::path::Path::new("bl.pgm")));

    let bad = "{\"id\":\"a\",\"image\":\"a.pgm\",\"class\":\"covid\"}\n{\"id\":\"b\",\"image\":\"b.pgm\",\"class\":\"flu\"}\n{\"id\":\"a\",\"image\":\"c.pgm\",\"class\":\"normal\"}\n";
    match parse_manifest(bad, None) {
        Err(Error::Manifest(diags)) => {
            assert_eq!(diags.len(), 2);
            assert_eq!(diags[0].line, 2);
            assert!(diags[0].message.contains("flu"));
            assert_eq!(diags[1].line, 3);
            assert!(diags[1].message.contains("lines 1 and 3"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn manifest_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.pgm"), encode_pgm(&GrayImage::filled(2, 2, 0))).unwrap();
    let text = "{\"id\":\"a\",\"image\":\"a.pgm\",\"class\":\"normal\"}\n{\"id\":\"b\",\"image\":\"nope.pgm\",\"class\":\"normal\"}\n";
    fs::write(dir.path().join("m.jsonl"), text).unwrap();
    match load_manifest(dir.path().join("m.jsonl")) {
        Err(Error::Manifest(diags)) => {
            assert_eq!(diags.len(), 1);
            assert_eq!(diags[0].line, 2);
            assert!(diags[0].message.contains("nope.pgm"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn synth_is_deterministic_and_consistent() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = synth_generate(3, 32, 11, a.path()).unwrap();
    let rb = synth_generate(3, 32, 11, b.path()).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.len(), 9);
    for rec in &ra {
        for rel in [Some(&rec.image), rec.lung_mask.as_ref(), rec.infection_mask.as_ref()].into_iter().flatten() {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }
    assert_eq!(fs::read(a.path().join("manifest.jsonl")).unwrap(), fs::read(b.path().join("manifest.jsonl")).unwrap());
    let loaded = load_manifest(a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(loaded.len(), 9);

    // The in-memory generator draws the same samples.
    let mem = synth_dataset(3, 32, 11);
    for ((id, s), rec) in mem.iter().zip(&loaded) {
        assert_eq!(id, &rec.id);
        assert_eq!(s.class, rec.class);
        assert_eq!(read_image(&rec.image).unwrap(), s.image);
        assert_eq!(read_mask(rec.lung_mask.as_ref().unwrap()).unwrap(), s.lung);
        assert_eq!(read_mask(rec.infection_mask.as_ref().unwrap()).unwrap(), s.infection);
    }
    assert_ne!(synth_dataset(1, 32, 12)[0].1, mem[0].1);
    assert!(synth_generate(1, 30, 0, a.path()).is_err());
}

#[test]
fn synth_class_invariants() {
    for (id, s) in synth_dataset(20, 64, 5) {
        assert!(s.infection.is_subset_of(&s.lung), "{id}");
        assert!(s.lung.count() > 0, "{id}");
        match s.class {
            Class::Covid => assert!(s.infection.count() > 0, "{id}"),
            Class::NonCovid | Class::Normal => assert_eq!(s.infection.count(), 0, "{id}"),
        }
        // Lobes are darker than the body.
        let (mut lung_sum, mut lung_n, mut body_sum, mut body_n) = (0.0, 0.0, 0.0, 0.0);
        for (p, &m) in s.image.data().iter().zip(s.lung.data()) {
            if m == 1 {
                lung_sum += *p as f64;
                lung_n += 1.0;
            } else {
                body_sum += *p as f64;
                body_n += 1.0;
            }
        }
        assert!(lung_sum / lung_n < body_sum / body_n - 40.0, "{id}");
    }
}

fn model64(arch: Arch, seed: u64) -> SegModel64 {
    build_model(ModelConfig::new(arch, 2, 4), seed).unwrap()
}

#[test]
fn weights_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let input = Tensor64::new(vec![1, 1, 8, 8], (0..64).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    for arch in [Arch::Unet, Arch::Unetpp, Arch::Fpn] {
        let model = model64(arch, 9);
        let path = dir.path().join(format!("{arch:?}.w"));
        save_weights(&path, &model).unwrap();
        let back: SegModel64 = load_weights(&path).unwrap();
        assert_eq!(back.config(), model.config());
        for ((na, ta), (nb, tb)) in model.params().iter().zip(back.params()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert!(ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let (ya, yb) = (model.forward(&input).unwrap(), back.forward(&input).unwrap());
        assert!(ya.data().iter().zip(yb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let m32: SegModel32 = build_model(ModelConfig::new(Arch::Unet, 2, 4), 1).unwrap();
    let bytes = encode_weights(&m32);
    assert_eq!(peek_weights(&bytes).unwrap().dtype, Some(0));
    assert_eq!(decode_weights::<f32>(&bytes).unwrap().params(), m32.params());
}

#[test]
fn weights_header_layout() {
    let model = model64(Arch::Fpn, 0);
    let bytes = encode_weights(&model);
    assert_eq!(&bytes[..4], b"SEGW");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(bytes[8], Arch::Fpn.code());
    assert_eq!(bytes[9], 2);
    assert_eq!(u16::from_le_bytes([bytes[10], bytes[11]]), 4);
    assert_eq!(u16::from_le_bytes([bytes[12], bytes[13]]), 1);
    assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize, model.params().len());
    let (first, t) = model.params().first().unwrap();
    let name_len = u16::from_le_bytes([bytes[18], bytes[19]]) as usize;
    assert_eq!(&bytes[20..20 + name_len], first.as_bytes());
    assert_eq!(bytes[20 + name_len], 1);
    assert_eq!(bytes[21 + name_len] as usize, t.rank());
    let expected_len: usize = 18
        + model.params().iter().map(|(n, t)| 2 + n.len() + 2 + 4 * t.rank() + 8 * t.data().len()).sum::<usize>();
    assert_eq!(bytes.len(), expected_len);
}

#[test]
fn weights_rejections() {
    let model = model64(Arch::Unet, 2);
    let bytes = encode_weights(&model);

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(decode_weights::<f64>(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(decode_weights::<f64>(&bad), Err(Error::Format(_))));

    // Cut inside the last tensor's payload.
    let (last, _) = model.params().last().unwrap();
    match decode_weights::<f64>(&bytes[..bytes.len() - 3]) {
        Err(Error::Weights { tensor, message }) => {
            assert_eq!(&tensor, last);
            assert!(message.contains("payload"));
        }
        other => panic!("{other:?}"),
    }
    let (first, _) = model.params().first().unwrap();
    match decode_weights::<f64>(&bytes[..40]) {
        Err(Error::Weights { tensor, .. }) => assert_eq!(&tensor, first),
        other => panic!("{other:?}"),
    }
    match decode_weights::<f32>(&bytes) {
        Err(Error::Weights { tensor, message }) => {
            assert_eq!(&tensor, first);
            assert!(message.contains("dtype"));
        }
        other => panic!("{other:?}"),
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(decode_weights::<f64>(&trailing), Err(Error::Format(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w");
    save_weights(&path, &model).unwrap();
    let mut other = build_model::<f64>(ModelConfig::new(Arch::Unet, 2, 8), 0).unwrap();
    assert!(matches!(load_weights_into(&path, &mut other), Err(Error::Config(_))));
    let mut same = model64(Arch::Unet, 99);
    load_weights_into(&path, &mut same).unwrap();
    assert_eq!(same.params(), model.params());
}

fn arb_image(max: usize) -> impl Strategy<Value = GrayImage> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<u8>(), h * w).prop_map(move |d| GrayImage::new(h, w, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pgm_round_trip(img in arb_image(24)) {
        prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn truncated_pgm_never_parses(img in arb_image(12), cut in 1usize..64) {
        let bytes = encode_pgm(&img);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_pgm(&bytes[..keep]).is_err());
    }

    /// Halving is a 2×2 box average under half-pixel-centre sampling.
    #[test]
    fn halving_is_block_mean(n in 4usize..16, data in prop::collection::vec(any::<u8>(), 1024)) {
        let side = 2 * n;
        let img = GrayImage::new(side, side, data[..side * side].to_vec()).unwrap();
        let half = resize(&img, n);
        for r in 0..n {
            for c in 0..n {
                let sum: u32 = [(0, 0), (0, 1), (1, 0), (1, 1)].iter().map(|&(dr, dc)| img.get(2 * r + dr, 2 * c + dc) as u32).sum();
                prop_assert_eq!(half.get(r, c) as u32, (sum + 2) / 4);
            }
        }
    }

    #[test]
    fn resize_mask_stays_binary(h in 1usize..20, w in 1usize..20, size in 8usize..40, seed in any::<u64>()) {
        let m = BinaryMask::from_fn(h, w, |r, c| (seed.rotate_left((r * w + c) as u32 % 64)) & 1 == 1);
        let out = resize_mask(&m, size);
        prop_assert_eq!(out.dims(), (size, size));
        prop_assert!(out.data().iter().all(|&v| v <= 1));
        if h == size && w == size {
            prop_assert_eq!(out, m);
        }
    }

    #[test]
    fn manifest_write_read(n in 0usize..8, fold in prop::option::of(0u32..5)) {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = Vec::new();
        for i in 0..n {
            let img = format!("i{i}.pgm");
            fs::write(dir.path().join(&img), encode_pgm(&GrayImage::filled(1, 1, 0))).unwrap();
            let mut r = DatasetRecord::new(format!("r{i}"), img, Class::ALL[i % 3]);
            r.fold = fold;
            recs.push(r);
        }
        let path = dir.path().join("m.jsonl");
        cxrseg_core::io::write_manifest(&path, &recs).unwrap();
        prop_assert_eq!(parse_manifest(&fs::read_to_string(&path).unwrap(), None).unwrap(), recs);
        prop_assert_eq!(load_manifest(&path).unwrap().len(), n);
    }
}
