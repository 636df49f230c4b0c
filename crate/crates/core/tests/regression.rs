//! Values frozen from an independent numpy implementation that decodes the
//! RDA1 bytes itself and recomputes each quantity from scratch.

use rada::embedio::{encode, synth_gaussian, EmbeddingBatch, RdaFile, SplitTag, SynthConfig};
use rada::eval::evaluate_bundle;
use rada::losses::{adapt_loss, mask_reg, ttt_entropy, EntropyMode, RegNorm};
use rada::numerics::{Tape, Tensor};
use rada::rational::LogitScale;

fn logits() -> Tensor {
    Tensor::from_rows(&[vec![2.0, -1.0, 0.5], vec![0.1, 0.2, -0.3]]).unwrap()
}

#[test]
fn zero_shot_accuracy_seed7() {
    let cfg = SynthConfig {
        seed: 7,
        ..SynthConfig::default()
    };
    let bundle = synth_gaussian(&cfg).unwrap();
    let r = evaluate_bundle(&bundle, None, None, LogitScale::default()).unwrap();
    assert_eq!(r.base_acc, 63.2);
    assert_eq!(r.new_acc, 65.0);
}

#[test]
fn tiny_embedding_file_bytes() {
    let x = Tensor::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap();
    let batch = EmbeddingBatch::new(x, vec![1, 0], SplitTag::BaseTest).unwrap();
    let bytes = encode(&RdaFile::Embeddings(batch)).unwrap();
    assert_eq!(bytes.len(), 62);
    let crc = u32::from_le_bytes(bytes[58..].try_into().unwrap());
    assert_eq!(crc, 0xbc44da00);
}

#[test]
fn cross_entropy_value_and_gradient() {
    let mut tape = Tape::new();
    let z = tape.param(logits());
    let loss = adapt_loss(&mut tape, z, &[0, 2]).unwrap();
    assert!((tape.value(loss).data()[0] - 0.8310694761052082).abs() < 1e-14);
    let grads = tape.backward(loss).unwrap();
    let expected = [
        -0.10720148270536212,
        0.019556286635343725,
        0.08764519607001833,
        0.1801483076202701,
        0.19909467052246804,
        -0.37924297814273805,
    ];
    for (g, e) in grads.get(z).unwrap().data().iter().zip(expected) {
        assert!((g - e).abs() < 1e-14, "{g} vs {e}");
    }
}

#[test]
fn entropy_modes() {
    for (mode, expected) in [
        (EntropyMode::Marginal, 0.9783543367853336),
        (EntropyMode::MeanPerSample, 0.849599471806925),
    ] {
        let mut tape = Tape::new();
        let z = tape.constant(logits());
        let h = ttt_entropy(&mut tape, z, mode).unwrap();
        assert!((tape.value(h).data()[0] - expected).abs() < 1e-14, "{mode}");
    }
}

#[test]
fn regularizer_norms() {
    let m = Tensor::from_rows(&[vec![1.5, 0.5], vec![1.0, 2.0]]).unwrap();
    for (norm, expected) in [(RegNorm::L1, 0.5), (RegNorm::L2, 0.375), (RegNorm::Linf, 1.0)] {
        let mut tape = Tape::new();
        let v = tape.constant(m.clone());
        let r = mask_reg(&mut tape, v, norm);
        assert!((tape.value(r).data()[0] - expected).abs() < 1e-15, "{norm}");
    }
}
