mod common;

use plate_restore::charm::{charm_apply, charm_forward, CharmParams};
use plate_restore::charprior::SpatialMask;
use plate_restore::numerics::{ParamStore, Rng, Tape, Tensor};
use plate_restore::plates::PixelBox;
use proptest::prelude::*;

fn setup(c: usize, seed: u64) -> (ParamStore<f64>, CharmParams) {
    let mut store = ParamStore::new();
    let p = CharmParams::init(&mut store, "charm", c, &mut Rng::new(seed)).unwrap();
    (store, p)
}

fn mask(w: usize, h: usize, cells: Vec<bool>) -> SpatialMask {
    SpatialMask {
        width: w,
        height: h,
        cells,
        source: PixelBox::new(0, 0, 0, 0),
    }
}

fn rows(t: &Tensor<f64>, r: usize) -> Vec<Vec<f64>> {
    t.data().chunks(t.len() / r).map(|c| c.to_vec()).collect()
}

#[test]
fn no_priors_is_identity() {
    let (store, p) = setup(3, 0);
    let f = Rng::new(1).normal_tensor::<f64>(&[3, 2, 2], 1.0);
    let (out, attn) = charm_apply(&store, &p, &f, None, &[], false).unwrap();
    assert_eq!(out, f);
    assert!(attn.is_none());
}

#[test]
fn hand_set_instance_matches_dense_reference() {
    let mut store = ParamStore::new();
    let p = CharmParams::init(&mut store, "charm", 2, &mut Rng::new(0)).unwrap();
    *store.get_mut("charm.wq").unwrap() = Tensor::from_f64(&[2, 2], &[1.0, 0.5, -0.25, 2.0]).unwrap();
    *store.get_mut("charm.wk").unwrap() = Tensor::from_f64(&[2, 2], &[0.3, -1.0, 0.7, 0.1]).unwrap();
    *store.get_mut("charm.wv").unwrap() = Tensor::from_f64(&[2, 2], &[2.0, 0.0, -1.0, 1.5]).unwrap();
    let f = Tensor::from_f64(&[2, 2, 2], &[0.1, -0.4, 0.9, 0.3, -1.2, 0.8, 0.05, 0.6]).unwrap();
    let e = Tensor::from_f64(&[1, 2], &[0.7, -0.2]).unwrap();
    let m = mask(2, 2, vec![true; 4]);
    let (out, attn) = charm_apply(&store, &p, &f, Some(&e), &[m], false).unwrap();
    let want = common::charm_reference(
        &rows(&f, 2),
        &rows(&e, 1),
        store.get("charm.wq").unwrap().data(),
        store.get("charm.wk").unwrap().data(),
        store.get("charm.wv").unwrap().data(),
        &[vec![true; 4]],
    );
    let flat: Vec<f64> = want.concat();
    for (a, b) in out.data().iter().zip(&flat) {
        assert!((a - b).abs() < 1e-6);
    }
    let s: f64 = attn.unwrap().data().iter().sum();
    assert!((s - 1.0).abs() < 1e-12);
}

#[test]
fn singleton_mask_adds_the_value_vector() {
    let (store, p) = setup(3, 2);
    let f = Rng::new(3).normal_tensor::<f64>(&[3, 2, 3], 1.0);
    let e = Rng::new(4).normal_tensor::<f64>(&[1, 3], 1.0);
    let mut cells = vec![false; 6];
    cells[0] = true;
    let (out, _) = charm_apply(&store, &p, &f, Some(&e), &[mask(3, 2, cells)], false).unwrap();
    let wv = store.get("charm.wv").unwrap().data();
    let v: Vec<f64> = (0..3)
        .map(|a| (0..3).map(|j| wv[a * 3 + j] * e.data()[j]).sum())
        .collect();
    for ch in 0..3 {
        for pos in 0..6 {
            let (o, i) = (out.data()[ch * 6 + pos], f.data()[ch * 6 + pos]);
            if pos == 0 {
                assert!((o - i - v[ch]).abs() < 1e-12);
            } else {
                assert_eq!(o.to_bits(), i.to_bits());
            }
        }
    }
}

#[test]
fn disjoint_masks_add_independent_deltas() {
    let (store, p) = setup(4, 5);
    let f = Rng::new(6).normal_tensor::<f64>(&[4, 3, 3], 1.0);
    let e = Rng::new(7).normal_tensor::<f64>(&[2, 4], 1.0);
    let m0 = mask(3, 3, (0..9).map(|i| i % 3 == 0).collect());
    let m1 = mask(3, 3, (0..9).map(|i| i % 3 == 2).collect());
    let (both, _) = charm_apply(&store, &p, &f, Some(&e), &[m0.clone(), m1.clone()], false).unwrap();
    let e0 = e.select(0).unwrap().reshape(&[1, 4]).unwrap();
    let e1 = e.select(1).unwrap().reshape(&[1, 4]).unwrap();
    let (a, _) = charm_apply(&store, &p, &f, Some(&e0), &[m0], false).unwrap();
    let (b, _) = charm_apply(&store, &p, &f, Some(&e1), &[m1], false).unwrap();
    for i in 0..f.len() {
        let want = f.data()[i] + (a.data()[i] - f.data()[i]) + (b.data()[i] - f.data()[i]);
        assert!((both.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn empty_mask_contributes_nothing() {
    let (store, p) = setup(2, 8);
    let mut tape = Tape::no_grad();
    let vars = store.bind(&mut tape);
    let f = tape.constant(Rng::new(9).normal_tensor::<f64>(&[2, 2, 2], 1.0));
    let e = tape.constant(Rng::new(10).normal_tensor::<f64>(&[1, 2], 1.0));
    let r = charm_forward(&mut tape, &p, &vars, f, Some(e), &[mask(2, 2, vec![false; 4])], false).unwrap();
    assert_eq!(r.empty_masks, vec![0]);
    assert_eq!(tape.value(r.out), tape.value(f));
}

#[test]
fn literal_mask_product_leaks_outside_the_region() {
    let (store, p) = setup(2, 11);
    let f = Rng::new(12).normal_tensor::<f64>(&[2, 2, 2], 1.0);
    let e = Rng::new(13).normal_tensor::<f64>(&[1, 2], 1.0);
    let m = mask(2, 2, vec![true, false, false, false]);
    let (out, attn) = charm_apply(&store, &p, &f, Some(&e), &[m], true).unwrap();
    // every position keeps exp(0) weight after the product
    assert!(attn.unwrap().data().iter().all(|&a| a > 0.0));
    assert_ne!(out.data()[3], f.data()[3]);
}

#[test]
fn shape_mismatches_are_errors() {
    let (store, p) = setup(2, 0);
    let f = Tensor::<f64>::zeros(&[2, 2, 2]);
    let e = Tensor::<f64>::zeros(&[1, 2]);
    assert!(charm_apply(&store, &p, &f, Some(&e), &[mask(3, 2, vec![true; 6])], false).is_err());
    assert!(charm_apply(&store, &p, &f, Some(&e), &[], false).is_err());
    assert!(charm_apply(&store, &p, &Tensor::zeros(&[3, 2, 2]), None, &[], false).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let (c, h, w) = (2, 3, 3);
    let (store, p) = setup(c, 14);
    let mut r = Rng::new(15);
    let f = r.normal_tensor::<f64>(&[c, h, w], 1.0);
    let e = r.normal_tensor::<f64>(&[2, c], 1.0);
    let masks = [
        mask(w, h, (0..9).map(|i| i < 5).collect()),
        mask(w, h, (0..9).map(|i| i % 2 == 1).collect()),
    ];
    let mut inputs: Vec<Tensor<f64>> = store.tensors().to_vec();
    inputs.push(f);
    inputs.push(e);
    let (err, checked) = common::gradcheck(&inputs, 1e-5, None, &|tape, vars| {
        let out = charm_forward(tape, &p, &vars[..3], vars[3], Some(vars[4]), &masks, false)?;
        common::weighted_sum(tape, out.out, 16)
    });
    assert_eq!(checked, 3 * c * c + c * h * w + 2 * c);
    assert!(err < 1e-4, "{err}");
}

fn instance(seed: u64) -> (usize, usize, usize, Tensor<f64>, Tensor<f64>, Vec<SpatialMask>) {
    let mut r = Rng::new(seed);
    let c = r.int_in(1, 8);
    let h = r.int_in(1, 8);
    let w = r.int_in(1, 8);
    let n = r.int_in(1, 4);
    let f = r.normal_tensor::<f64>(&[c, h, w], 1.0);
    let e = r.normal_tensor::<f64>(&[n, c], 1.0);
    let masks = (0..n)
        .map(|_| {
            let p = r.uniform();
            mask(w, h, (0..h * w).map(|_| r.bernoulli(p)).collect())
        })
        .collect();
    (c, h, w, f, e, masks)
}

proptest! {
    #[test]
    fn positions_outside_all_masks_are_bit_identical(seed in any::<u64>()) {
        let (c, h, w, f, e, masks) = instance(seed);
        let (store, p) = setup(c, seed ^ 1);
        let (out, attn) = charm_apply(&store, &p, &f, Some(&e), &masks, false).unwrap();
        let attn = attn.unwrap();
        for pos in 0..h * w {
            if masks.iter().all(|m| !m.cells[pos]) {
                for ch in 0..c {
                    prop_assert_eq!(out.data()[ch * h * w + pos].to_bits(), f.data()[ch * h * w + pos].to_bits());
                }
            }
        }
        for (i, m) in masks.iter().enumerate() {
            let row = &attn.data()[i * h * w..(i + 1) * h * w];
            if !m.is_empty() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            for pos in 0..h * w {
                if !m.cells[pos] {
                    prop_assert_eq!(row[pos], 0.0);
                }
            }
        }
    }

    #[test]
    fn prior_order_does_not_matter(seed in any::<u64>()) {
        let (c, _, _, f, e, masks) = instance(seed);
        let (store, p) = setup(c, seed ^ 2);
        let n = masks.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let pe = Tensor::stack(&perm.iter().map(|&i| e.select(i).unwrap()).collect::<Vec<_>>()).unwrap();
        let pm: Vec<SpatialMask> = perm.iter().map(|&i| masks[i].clone()).collect();
        let (a, _) = charm_apply(&store, &p, &f, Some(&e), &masks, false).unwrap();
        let (b, _) = charm_apply(&store, &p, &f, Some(&pe), &pm, false).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn all_ones_masks_match_the_dense_reference(seed in any::<u64>()) {
        let (c, h, w, f, e, masks) = instance(seed);
        let n = masks.len();
        let ones: Vec<SpatialMask> = (0..n).map(|_| mask(w, h, vec![true; h * w])).collect();
        let (store, p) = setup(c, seed ^ 3);
        let (out, _) = charm_apply(&store, &p, &f, Some(&e), &ones, false).unwrap();
        let want = common::charm_reference(
            &rows(&f, c), &rows(&e, n),
            store.get("charm.wq").unwrap().data(),
            store.get("charm.wk").unwrap().data(),
            store.get("charm.wv").unwrap().data(),
            &vec![vec![true; h * w]; n],
        ).concat();
        for (a, b) in out.data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
