use std::path::Path;

use proptest::prelude::*;
use trigait_tensor::{conv, Checkpoint, Tensor};

fn rows() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..7).prop_flat_map(|(r, c)| {
        (Just(r), Just(c), prop::collection::vec(-50.0f64..50.0, r * c))
    })
}

proptest! {
    #[test]
    fn softmax_rows_normalize((r, c, data) in rows()) {
        let y = Tensor::new(data, &[r, c]).unwrap().softmax(1).unwrap();
        for row in y.data().chunks(c) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant((r, c, data) in rows(), shifts in prop::collection::vec(-20.0f64..20.0, 5)) {
        let x = Tensor::new(data.clone(), &[r, c]).unwrap();
        let shifted: Vec<f64> = data.iter().enumerate().map(|(i, v)| v + shifts[i / c]).collect();
        let a = x.softmax(1).unwrap();
        let b = Tensor::new(shifted, &[r, c]).unwrap().softmax(1).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_stays_in_unit_interval(x in -700.0f64..700.0) {
        let y = Tensor::scalar(x).sigmoid().item();
        prop_assert!((0.0..=1.0).contains(&y));
        if x.abs() < 30.0 {
            prop_assert!(y > 0.0 && y < 1.0);
        }
    }

    #[test]
    fn unit_pointwise_conv_is_identity(data in prop::collection::vec(-1e6f64..1e6, 12)) {
        let x = Tensor::new(data, &[1, 1, 3, 4]).unwrap();
        let y = conv(&x, &Tensor::ones(&[1, 1, 1, 1]), None, &[1, 1], &[1, 1], &[0, 0]).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn checkpoint_bytes_roundtrip(
        names in prop::collection::vec("[a-z.]{1,12}", 1..4),
        vals in prop::collection::vec(any::<f64>(), 1..24),
    ) {
        let mut ck = Checkpoint::default();
        for n in &names {
            ck.push(n.clone(), &[vals.len()], vals.clone());
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let x = Tensor::new((0..48).map(|v| (v as f64 * 0.37).sin()).collect(), &[2, 2, 3, 4]).unwrap();
        let k = Tensor::new((0..36).map(|v| (v as f64 * 0.11).cos()).collect(), &[2, 2, 3, 3]).unwrap();
        conv(&x, &k, None, &[1, 1], &[1, 1], &[1, 1]).unwrap().softmax(1).unwrap().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}
