mod common;

use common::rng;
use eqar_core::data_io::checkpoint::{load_checkpoint, load_into_store, read_manifest, save_checkpoint, Checkpoint, Provenance};
use eqar_core::data_io::etb::{decode, encode, read_etb, write_etb, EtbError, EtbTensor};
use eqar_core::data_io::synthetic::{Corpus, SyntheticKind, SyntheticSpec};
use eqar_core::generator::{Conditioning, FlowHeadConfig, Generator, GeneratorConfig};
use eqar_core::numerics::{Tape, Tensor};
use eqar_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn arb_shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..5, 0..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn etb_round_trip_is_bit_exact(shape in arb_shape(), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut s = seed;
        let mut bits = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); s };
        let t32 = Tensor::<f32>::new(shape.clone(), (0..n).map(|_| f32::from_bits(bits() as u32)).collect()).unwrap();
        let t64 = Tensor::<f64>::new(shape.clone(), (0..n).map(|_| f64::from_bits(bits())).collect()).unwrap();
        let back32 = match decode(&encode(&t32)).unwrap() { EtbTensor::F32(t) => t, _ => panic!("dtype") };
        let back64 = match decode(&encode(&t64)).unwrap() { EtbTensor::F64(t) => t, _ => panic!("dtype") };
        prop_assert_eq!(back32.shape(), t32.shape());
        prop_assert!(back32.data().iter().zip(t32.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(back64.data().iter().zip(t64.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn etb_file_round_trip_and_faults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.etb");
    let t = Tensor::<f32>::from_fn([3, 2], |i| i as f32 - 2.5);
    write_etb(&path, &t).unwrap();
    assert_eq!(read_etb(&path).unwrap(), EtbTensor::F32(t.clone()));

    let scalar = Tensor::<f64>::scalar(7.25);
    write_etb(&path, &scalar).unwrap();
    assert_eq!(read_etb(&path).unwrap(), EtbTensor::F64(scalar));

    let bytes = encode(&t);
    assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(EtbError::Truncated { .. })));
    assert!(matches!(decode(&bytes[..3]), Err(EtbError::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(EtbError::BadMagic(_))));
    let mut bad = bytes;
    bad[4] = 9;
    assert!(matches!(decode(&bad), Err(EtbError::UnknownDtype(9))));
}

fn spec(kind: SyntheticKind, size: usize) -> SyntheticSpec {
    SyntheticSpec { kind, size, seed: 11, ..Default::default() }
}

#[test]
fn corpora_are_pure_functions_of_spec_and_index() {
    for kind in [SyntheticKind::ShiftInvariantTexture, SyntheticKind::CenterBiasedBlobs] {
        let a = Corpus::new(spec(kind, 50)).unwrap();
        let b = Corpus::new(spec(kind, 50)).unwrap();
        for i in [0, 7, 49] {
            let (x, cx) = a.get(i).unwrap();
            let (y, cy) = b.get(i).unwrap();
            assert_eq!(cx, cy);
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_ne!(a.get(0).unwrap().0, a.get(10).unwrap().0, "same class, different draw");
    }
}

/// Per-column z-scores of the mean centered column profile `colmean_x − imagemean`.
fn column_profile_z(corpus: &Corpus, n: usize) -> Vec<f64> {
    let (h, w) = (corpus.spec().image_h, corpus.spec().image_w);
    let mut sum = vec![0.0; w];
    let mut sq = vec![0.0; w];
    for i in 0..n {
        let (img, _) = corpus.get(i).unwrap();
        let col: Vec<f64> = (0..w).map(|x| (0..h).map(|y| img.data()[(y * w + x) * 3] as f64).sum::<f64>() / h as f64).collect();
        let m = col.iter().sum::<f64>() / w as f64;
        for x in 0..w {
            let d = col[x] - m;
            sum[x] += d;
            sq[x] += d * d;
        }
    }
    (0..w)
        .map(|x| {
            let mean = sum[x] / n as f64;
            let var = sq[x] / n as f64 - mean * mean;
            mean / (var / n as f64).sqrt()
        })
        .collect()
}

#[test]
fn shift_invariant_corpus_has_flat_column_marginals() {
    let corpus = Corpus::new(spec(SyntheticKind::ShiftInvariantTexture, 10_000)).unwrap();
    let z = column_profile_z(&corpus, 10_000);
    let worst = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // 64 roughly normal z-scores: P(max > 4.5) < 0.05 %.
    assert!(worst < 4.5, "max column z {worst}");
}

#[test]
fn center_biased_corpus_fails_the_column_test() {
    let corpus = Corpus::new(spec(SyntheticKind::CenterBiasedBlobs, 2000)).unwrap();
    let z = column_profile_z(&corpus, 2000);
    assert!(z.iter().any(|v| v.abs() > 10.0));
}

#[test]
fn center_biased_energy_peaks_in_middle_third() {
    let corpus = Corpus::new(spec(SyntheticKind::CenterBiasedBlobs, 1000)).unwrap();
    let (h, w) = (64, 64);
    let (mut s, mut sq) = (vec![0.0; w], vec![0.0; w]);
    for i in 0..1000 {
        let (img, _) = corpus.get(i).unwrap();
        for y in 0..h {
            for x in 0..w {
                let v = img.data()[(y * w + x) * 3] as f64;
                s[x] += v;
                sq[x] += v * v;
            }
        }
    }
    let n = 1000.0 * h as f64;
    let var: Vec<f64> = (0..w).map(|x| sq[x] / n - (s[x] / n).powi(2)).collect();
    let peak = (0..w).max_by(|&a, &b| var[a].total_cmp(&var[b])).unwrap();
    assert!((w / 3..2 * w / 3).contains(&peak), "peak column {peak}");
    let center = var[w / 2 - 4..w / 2 + 4].iter().sum::<f64>() / 8.0;
    let edge = (var[..4].iter().sum::<f64>() + var[w - 4..].iter().sum::<f64>()) / 8.0;
    assert!(center > 2.0 * edge, "center {center}, edge {edge}");
}

#[test]
fn linear_probe_separates_two_classes() {
    let corpus = Corpus::new(spec(SyntheticKind::ShiftInvariantTexture, 1000)).unwrap();
    // 8×8 average pooling is linear, so a linear model on pooled pixels is a
    // linear probe on the image.
    let features = |i: usize| -> Vec<f64> {
        let (img, _) = corpus.get(i).unwrap();
        let mut f = vec![1.0; 65];
        for y in 0..64 {
            for x in 0..64 {
                f[1 + (y / 8) * 8 + x / 8] += img.data()[(y * 64 + x) * 3] as f64 / 64.0;
            }
        }
        f
    };
    // Classes 0 and 1 sit at indices ≡ 0, 1 mod 10.
    let pick = |range: std::ops::Range<usize>| -> Vec<usize> { range.filter(|i| i % 10 < 2).collect() };
    let (train, test) = (pick(0..500), pick(500..1000));
    let label = |i: usize| if i % 10 == 0 { -1.0 } else { 1.0 };
    let x = DMatrix::from_row_iterator(train.len(), 65, train.iter().flat_map(|&i| features(i)));
    let y = DVector::from_iterator(train.len(), train.iter().map(|&i| label(i)));
    let gram = x.transpose() * &x + DMatrix::identity(65, 65) * 1e-3;
    let wts = gram.cholesky().unwrap().solve(&(x.transpose() * y));
    let correct = test.iter().filter(|&&i| DVector::from_vec(features(i)).dot(&wts).signum() == label(i)).count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "probe accuracy {acc}");
}

fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        cond_seq_len: 4,
        n_classes: 3,
        mlp_ratio: 2,
        token_channels: 4,
        max_len: 8,
        head: FlowHeadConfig { mlp_layers: 2, mlp_hidden: 16, t_embed_dim: 8 },
        ..Default::default()
    }
}

fn probe_output(g: &Generator<f32>) -> Tensor<f32> {
    let x = Tensor::<f32>::from_fn([2, 5, 4], |i| ((i * 37 % 11) as f32 - 5.0) / 5.0);
    let mut tape = Tape::new();
    let z = g.forward(&mut tape, &x, true, 0, &Conditioning::new(&[Some(1), None], &[0, 3])).unwrap();
    let zv = tape.value(z).clone();
    let y = Tensor::<f32>::from_fn([12, 4], |i| (i as f32 * 0.1).sin());
    let zf = zv.reshape([12, 16]).unwrap();
    g.head.velocity(&g.store, &y, 0.3, &zf).unwrap()
}

#[test]
fn checkpoint_round_trip_reproduces_forward_bitwise() {
    let cfg = tiny_generator();
    let g = Generator::<f32>::new(cfg.clone(), &mut rng(3)).unwrap();
    let ema: Vec<Tensor<f32>> = g.store.tensors().iter().map(|t| t.scale(0.5)).collect();
    let mut ckpt = Checkpoint::from_store("generator", &cfg, &g.store).unwrap();
    ckpt.ema = Some(ema.clone());
    ckpt.cfg_end = 2.5;
    ckpt.provenance = Provenance { epochs: 4, seed: 9, steps: 100 };
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &ckpt).unwrap();

    let (m, raw) = load_checkpoint(dir.path(), false).unwrap();
    assert_eq!(m.cfg_end, 2.5);
    assert_eq!(m.provenance.seed, 9);
    assert!(m.ema);
    let cfg2: GeneratorConfig = serde_json::from_value(m.config).unwrap();
    let mut g2 = Generator::<f32>::new(cfg2, &mut rng(99)).unwrap();
    load_into_store(&mut g2.store, raw).unwrap();
    let (a, b) = (probe_output(&g), probe_output(&g2));
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));

    let (_, ema_loaded) = load_checkpoint(dir.path(), true).unwrap();
    for ((_, t), e) in ema_loaded.iter().zip(&ema) {
        assert_eq!(t, e);
    }
}

#[test]
fn manifest_is_sorted_and_versioned() {
    let cfg = tiny_generator();
    let g = Generator::<f32>::new(cfg.clone(), &mut rng(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &Checkpoint::from_store("generator", &cfg, &g.store).unwrap()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let top: Vec<&str> = text.lines().filter(|l| l.starts_with("  \"")).map(|l| l.trim().split('"').nth(1).unwrap()).collect();
    let mut sorted = top.clone();
    sorted.sort();
    assert_eq!(top, sorted);
    assert!(text.contains("\"version\": 1"));
    assert!(!read_manifest(dir.path()).unwrap().ema);
    assert!(load_checkpoint(dir.path(), true).is_err());
}

#[test]
fn corrupted_or_missing_files_are_detected() {
    let cfg = tiny_generator();
    let g = Generator::<f32>::new(cfg.clone(), &mut rng(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = save_checkpoint(dir.path(), &Checkpoint::from_store("generator", &cfg, &g.store).unwrap()).unwrap();
    let victim = dir.path().join(&m.params[3].file);
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    assert!(matches!(load_checkpoint(dir.path(), false), Err(Error::Integrity(_))));

    std::fs::remove_file(&victim).unwrap();
    assert!(matches!(load_checkpoint(dir.path(), false), Err(Error::Missing(_))));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(empty.path(), false), Err(Error::Missing(_))));
}

#[test]
fn png_round_trip_and_pixel_mapping() {
    use eqar_core::data_io::image::{decode_png, encode_png, image_png, to_rgb8};
    let img = Tensor::from_fn([3, 5, 3], |i| (i as f32 / 22.0) - 1.0);
    let (h, w, rgb) = to_rgb8(&img).unwrap();
    assert_eq!((h, w, rgb[0], *rgb.last().unwrap()), (3, 5, 0, 255));
    let bytes = image_png(&img).unwrap();
    assert_eq!(bytes, image_png(&img).unwrap(), "encoding is deterministic");
    assert_eq!(decode_png(&bytes).unwrap(), (3, 5, rgb));
    assert!(encode_png(2, 2, &[0; 11]).is_err());
    assert!(decode_png(b"not a png").is_err());
}

#[test]
fn generator_bundle_round_trip_with_learned_codec() {
    use eqar_core::data_io::bundle::{load_generator_bundle, save_generator_bundle, TOKENIZER_SUBDIR};
    use eqar_core::numerics::EmaState;
    use eqar_core::sampler::{generate_sequence, SamplerConfig};
    use eqar_core::tokenizer::{Codec, ConvTokenizer, TokenizerConfig};

    let tok_cfg = TokenizerConfig { image_h: 8, image_w: 16, downsample_f: 2, base_channels: 4, latent_channels: 2, token_channels: 4, groups: 2, ..Default::default() };
    let codec = Codec::Conv(Box::new(ConvTokenizer::new(tok_cfg, &mut rng(1)).unwrap()));
    let gcfg = GeneratorConfig { token_channels: 4, max_len: codec.n_tokens(), ..tiny_generator() };
    let g = Generator::<f32>::new(gcfg, &mut rng(2)).unwrap();
    let mut ema = EmaState::new(&g.store, 0.5);
    ema.shadow[0].data_mut()[0] += 1.0;
    let sampler = SamplerConfig { n_steps: 3, target_len: codec.n_tokens(), cfg_end: 1.5, ..Default::default() };
    let names: Vec<String> = (0..g.config().n_classes).map(|i| format!("c{i}")).collect();
    let dir = tempfile::tempdir().unwrap();
    let m = save_generator_bundle(dir.path(), &g, Some(&ema), &codec, &sampler, &names, Provenance::default(), serde_json::Value::Null).unwrap();
    assert_eq!(m.cfg_end, 1.5);
    assert!(dir.path().join(TOKENIZER_SUBDIR).join("manifest.json").exists());

    let b = load_generator_bundle(dir.path(), false).unwrap();
    assert_eq!(b.class_names(), names);
    assert_eq!(b.config.sampler, sampler);
    assert_eq!(b.codec.config(), codec.config());
    let (a, _) = generate_sequence(&g, &[0], &sampler).unwrap();
    let (c, _) = generate_sequence(&b.generator, &[0], &sampler).unwrap();
    assert_eq!(a, c);
    let tokens = Tensor::from_fn([1, codec.n_tokens(), 4], |i| (i as f32 * 0.37).sin());
    assert_eq!(codec.decode(&tokens).unwrap(), b.codec.decode(&tokens).unwrap());

    let e = load_generator_bundle(dir.path(), true).unwrap();
    assert_eq!(e.generator.store.tensors()[0], ema.shadow[0]);
    assert!(matches!(load_generator_bundle(&dir.path().join(TOKENIZER_SUBDIR), false), Err(Error::Integrity(_))));
}
