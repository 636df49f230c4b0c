use proptest::prelude::*;

use rada::adapter::{AdapterConfig, AdapterParams, Variant};
use rada::embedio::{decode, encode, ClassMatrix, EmbeddingBatch, RdaFile, SplitTag};
use rada::infotheory::mutual_information_joint;
use rada::numerics::{numerical_gradient, Tape, Tensor, FD_STEP};
use rada::rational::rational_sample;
use rada::ttt::select_confident;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

fn shaped() -> impl Strategy<Value = (Tensor, Tensor, Vec<usize>)> {
    (1usize..4, 2usize..5, 1usize..4).prop_flat_map(|(b, k, d)| {
        (matrix(b, d), matrix(k, d), prop::collection::vec(0..k, b))
    })
}

// x·Wᵀ through normalize, tanh and a softmax cross-entropy.
fn composite(tape: &mut Tape, x: &Tensor, w: &Tensor, labels: &[usize]) -> (rada::numerics::Var, [rada::numerics::Var; 2]) {
    let xv = tape.param(x.clone());
    let wv = tape.param(w.clone());
    let wn = tape.l2_normalize_rows(wv).unwrap();
    let t = tape.tanh(xv);
    let z = tape.matmul_bt(t, wn).unwrap();
    let z = tape.scale(z, 3.0);
    (tape.cross_entropy(z, labels).unwrap(), [xv, wv])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tape_matches_finite_differences((x, w, labels) in shaped()) {
        prop_assume!(rada::numerics::row_norms(&w).iter().all(|&n| n > 0.3));
        let mut tape = Tape::new();
        let (loss, vars) = composite(&mut tape, &x, &w, &labels);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect();
        let f = |p: &[Tensor]| {
            let mut t = Tape::new();
            let (l, _) = composite(&mut t, &p[0], &p[1], &labels);
            Ok(t.value(l).data()[0])
        };
        let numeric = numerical_gradient(f, &[x, w], FD_STEP).unwrap();
        // Mixed bound: some coordinates have exactly zero true gradient
        // (e.g. a normalized 1-D row), where relative error is meaningless.
        for (a, n) in analytic.iter().zip(&numeric) {
            for (a, n) in a.data().iter().zip(n.data()) {
                prop_assert!((a - n).abs() <= 1e-8 + 1e-6 * (a.abs() + n.abs()), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn selection_matches_sort_oracle(ent in prop::collection::vec(0.0f64..3.0, 1..80), frac in 0.01f64..1.0) {
        let keep = ((ent.len() as f64 * frac).ceil() as usize).clamp(1, ent.len());
        let got = select_confident(&ent, keep);
        let mut order: Vec<usize> = (0..ent.len()).collect();
        order.sort_by(|&a, &b| ent[a].total_cmp(&ent[b]).then(a.cmp(&b)));
        let mut expected = order[..keep].to_vec();
        expected.sort_unstable();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn rational_rows_sum_to_cosine(f in prop::collection::vec(-1.0f64..1.0, 6), h in matrix(3, 6)) {
        let r = rational_sample(&f, &h).unwrap();
        for i in 0..3 {
            let dot: f64 = (0..6).map(|j| f[j] * h.data()[i * 6 + j]).sum();
            let sum: f64 = r.data()[i * 6..(i + 1) * 6].iter().sum();
            prop_assert!((dot - sum).abs() <= 1e-12);
        }
    }

    #[test]
    fn embedding_files_round_trip(x in matrix(5, 3), labels in prop::collection::vec(0usize..1000, 5), split in 0u8..4) {
        let batch = EmbeddingBatch::new(x, labels, SplitTag::from_code(split).unwrap()).unwrap();
        let file = RdaFile::Embeddings(batch);
        let bytes = encode(&file).unwrap();
        prop_assert_eq!(decode(&bytes).unwrap(), file);
    }

    #[test]
    fn class_files_round_trip(w in matrix(3, 4), names in prop::collection::hash_set("[a-zé ]{1,12}", 3), learnable: bool) {
        prop_assume!(rada::numerics::row_norms(&w).iter().all(|&n| n > 0.0));
        let classes = ClassMatrix::new(w, names.into_iter().collect(), learnable).unwrap();
        let file = RdaFile::Classes(classes);
        prop_assert_eq!(decode(&encode(&file).unwrap()).unwrap(), file);
    }

    #[test]
    fn adapter_files_round_trip(seed: u64, layers in 1usize..3, v in 0usize..5) {
        let variant = Variant::ALL[v];
        prop_assume!(variant != Variant::Mlp || layers == 1);
        let cfg = AdapterConfig { variant, n_layers: layers, ..AdapterConfig::new(4) };
        let mut p = AdapterParams::new(cfg, seed).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x += i as f64 * 1e-3);
        }
        let back = AdapterParams::decode(&p.encode().unwrap()).unwrap();
        prop_assert_eq!(back.fingerprint(), p.fingerprint());
    }

    #[test]
    fn mutual_information_symmetric_and_nonnegative(
        pts in prop::collection::vec((0.01f64..1.0, 0u8..3, 0u8..4), 1..20)
    ) {
        let total: f64 = pts.iter().map(|p| p.0).sum();
        let joint: Vec<(f64, u8, u8)> = pts.iter().map(|&(p, a, b)| (p / total, a, b)).collect();
        let swapped: Vec<(f64, u8, u8)> = joint.iter().map(|&(p, a, b)| (p, b, a)).collect();
        let i = mutual_information_joint(&joint);
        prop_assert!(i >= -1e-12);
        prop_assert!((i - mutual_information_joint(&swapped)).abs() <= 1e-12);
        // Coarsening the second variable cannot add information.
        let coarse: Vec<(f64, u8, u8)> = joint.iter().map(|&(p, a, b)| (p, a, b / 2)).collect();
        prop_assert!(mutual_information_joint(&coarse) <= i + 1e-12);
    }
}
