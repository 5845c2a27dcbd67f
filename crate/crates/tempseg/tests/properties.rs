//! Randomized invariants: softmax simplex, loss non-negativity and
//! permutation invariance, metric relabel invariance, image round trips.

use proptest::prelude::*;

use tempseg::losses::{
    total_loss, Difference, LabelVolume, LossConfig, PredictionVolume, IGNORE,
};
use tempseg::metrics::{consistency, miou_acc, confusion_matrix, ConsistencyMode};
use tempseg::netpbm::{read_pgm, read_ppm, write_pgm, write_ppm, Image};
use tempseg::{Tape, Tensor};

const T: usize = 3;
const H: usize = 4;
const W: usize = 5;
const S: usize = 4;

fn volume_strategy() -> impl Strategy<Value = (PredictionVolume, LabelVolume)> {
    let logits = proptest::collection::vec(-4.0f64..4.0, T * H * W * S);
    let labels = proptest::collection::vec(
        prop_oneof![4 => 0u8..S as u8, 1 => Just(IGNORE)],
        T * H * W,
    );
    (logits, labels).prop_map(|(logits, labels)| {
        let mut data = logits;
        for pixel in data.chunks_mut(S) {
            let m = pixel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in pixel.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in pixel.iter_mut() {
                *v /= z;
            }
        }
        (
            PredictionVolume::from_vec(T, H, W, S, data).unwrap(),
            LabelVolume::from_vec(T, H, W, labels).unwrap(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_output_is_on_the_simplex(
        logits in proptest::collection::vec(-8.0f64..8.0, S * H * W)
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[S, H, W], logits).unwrap(), false);
        let p = tape.softmax_channels(x).unwrap();
        let probs = tape.value(p);
        for &v in probs.iter() {
            prop_assert!(v > 0.0 && v < 1.0);
        }
        for m in 0..H {
            for n in 0..W {
                let sum: f64 = (0..S).map(|s| probs.data()[(s * H + m) * W + n]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn losses_are_non_negative_and_combine_linearly(
        (preds, labels) in volume_strategy(),
        lambda in 0.0f64..50.0,
        squared in any::<bool>(),
    ) {
        // at least one labeled pixel so cross entropy is defined
        prop_assume!(labels.data().iter().any(|&v| v != IGNORE));
        let config = LossConfig {
            lambda_incons: lambda,
            difference: if squared { Difference::Squared } else { Difference::Absolute },
            ..Default::default()
        };
        let c = total_loss(&preds, &labels, &config).unwrap();
        prop_assert!(c.ce >= 0.0);
        prop_assert!(c.incons >= 0.0);
        prop_assert!((c.total - (config.lambda_ce * c.ce + lambda * c.incons)).abs() < 1e-12);
    }

    #[test]
    fn loss_is_invariant_to_spatial_permutation(
        (preds, labels) in volume_strategy(),
        seed in any::<u64>(),
    ) {
        prop_assume!(labels.data().iter().any(|&v| v != IGNORE));
        // deterministic pixel shuffle applied identically at every frame
        let mut perm: Vec<usize> = (0..H * W).collect();
        let mut state = seed | 1;
        for i in (1..perm.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let mut pdata = vec![0.0; preds.data().len()];
        let mut ldata = vec![0u8; labels.data().len()];
        for t in 0..T {
            for (src, &dst) in perm.iter().enumerate() {
                let (sm, sn) = (src / W, src % W);
                let (dm, dn) = (dst / W, dst % W);
                ldata[(t * H + dm) * W + dn] = labels.get(t, sm, sn);
                let o = ((t * H + dm) * W + dn) * S;
                pdata[o..o + S].copy_from_slice(preds.pixel(t, sm, sn));
            }
        }
        let p2 = PredictionVolume::from_vec(T, H, W, S, pdata).unwrap();
        let l2 = LabelVolume::from_vec(T, H, W, ldata).unwrap();
        let config = LossConfig::default();
        let a = total_loss(&preds, &labels, &config).unwrap();
        let b = total_loss(&p2, &l2, &config).unwrap();
        prop_assert!((a.ce - b.ce).abs() < 1e-12);
        prop_assert!((a.incons - b.incons).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_invariant_to_class_relabeling(
        (preds, labels) in volume_strategy(),
        rot in 1usize..S,
    ) {
        prop_assume!(labels.data().iter().any(|&v| v != IGNORE));
        // rotate class identities in both predictions and labels
        let mut pdata = vec![0.0; preds.data().len()];
        for (k, chunk) in preds.data().chunks(S).enumerate() {
            for s in 0..S {
                pdata[k * S + (s + rot) % S] = chunk[s];
            }
        }
        let ldata: Vec<u8> = labels
            .data()
            .iter()
            .map(|&v| if v == IGNORE { IGNORE } else { ((v as usize + rot) % S) as u8 })
            .collect();
        let p2 = PredictionVolume::from_vec(T, H, W, S, pdata).unwrap();
        let l2 = LabelVolume::from_vec(T, H, W, ldata).unwrap();

        let cm1 = confusion_matrix(&preds.argmax_labels(), &labels, S).unwrap();
        let cm2 = confusion_matrix(&p2.argmax_labels(), &l2, S).unwrap();
        // relabeling may regroup argmax ties; skip the rare tie cases
        let tie = preds.data().chunks(S).any(|px| {
            let mx = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            px.iter().filter(|&&v| v == mx).count() > 1
        });
        prop_assume!(!tie);
        let (miou1, acc1, _) = miou_acc(&cm1).unwrap();
        let (miou2, acc2, _) = miou_acc(&cm2).unwrap();
        prop_assert!((miou1 - miou2).abs() < 1e-9);
        prop_assert!((acc1 - acc2).abs() < 1e-9);
        let (cons1, consw1) = consistency(&preds, &labels, ConsistencyMode::Raw).unwrap();
        let (cons2, consw2) = consistency(&p2, &l2, ConsistencyMode::Raw).unwrap();
        prop_assert!((cons1 - cons2).abs() < 1e-9);
        prop_assert!((consw1 - consw2).abs() < 1e-9);
    }

    #[test]
    fn netpbm_round_trip_any_bytes(
        data in proptest::collection::vec(any::<u8>(), 3 * 4 * 5),
        gray in proptest::collection::vec(any::<u8>(), 4 * 5),
    ) {
        let img = Image { width: 5, height: 4, channels: 3, data };
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        prop_assert_eq!(read_ppm(&mut buf.as_slice()).unwrap(), img);

        let img = Image { width: 5, height: 4, channels: 1, data: gray };
        let mut buf = Vec::new();
        write_pgm(&mut buf, &img).unwrap();
        prop_assert_eq!(read_pgm(&mut buf.as_slice()).unwrap(), img);
    }
}
