//! Whole-pipeline integration at the library level: optimize the matching
//! loss end to end, and verify fusion equivalence through the full model in
//! double precision.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};

use crowdpoint::backbone::image_to_input;
use crowdpoint::data::synth_scenes;
use crowdpoint::decoder::make_anchors;
use crowdpoint::matching::{compute_loss, LossWeights};
use crowdpoint::model::{infer_image, NetConfig, PointNet, ANCHOR_STRIDE};
use crowdpoint::nn::{Adam, ParamStore, Session};
use crowdpoint::ChaCha8Rng;

#[test]
fn optimizing_matching_loss_reduces_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut store = ParamStore::<f32>::new();
    let model = PointNet::new(&mut store, &mut rng, &NetConfig::tiny()).unwrap();
    let mut adam = Adam::<f32>::new(1e-3);
    let scenes = synth_scenes(2, (3, 5), 64, 13).unwrap();
    let anchors = make_anchors(64, 64, ANCHOR_STRIDE).unwrap();
    let weights = LossWeights::default();

    let mut losses = Vec::new();
    for step in 0..60 {
        let scene = &scenes[step % scenes.len()];
        let mut sess = Session::new(&mut store, true);
        let input = sess.input(image_to_input::<f32>(&scene.image));
        let dense = model.forward(&mut sess, input, None).unwrap();
        let (loss, breakdown) =
            compute_loss(&mut sess.tape, &dense, &anchors, &scene.points, &weights).unwrap();
        let grads = sess.grads(loss);
        adam.step(&mut store, &grads);
        losses.push(breakdown.total);
    }
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[55..].iter().sum::<f64>() / 5.0;
    assert!(
        tail < head,
        "loss should fall over 60 steps: first {head:.4}, last {tail:.4}"
    );
}

#[test]
fn fuse_preserves_predictions_in_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let mut store = ParamStore::<f64>::new();
    let mut model = PointNet::new(&mut store, &mut rng, &NetConfig::tiny()).unwrap();

    // Pretend-trained batch norm statistics in the repconvs.
    let names: Vec<String> = store
        .names()
        .into_iter()
        .filter(|n| n.contains(".repconv.bn"))
        .collect();
    for name in names {
        let id = store.lookup(&name).unwrap();
        let dims = store.array(id).raw_dim();
        let (lo, hi) = if name.ends_with("running_var") {
            (0.5, 2.0)
        } else {
            (-0.5, 0.5)
        };
        store.set(
            id,
            ArrayD::from_shape_fn(dims, |_| rng.random_range(lo..hi)),
        );
    }

    let scene = &synth_scenes(1, (6, 6), 64, 17).unwrap()[0];
    let before = infer_image(&model, &mut store, &scene.image, 0.05).unwrap();
    model.fuse(&mut store).unwrap();
    let after = infer_image(&model, &mut store, &scene.image, 0.05).unwrap();
    assert_eq!(before.len(), after.len());
    for (a, b) in before.iter().zip(&after) {
        assert!(
            (a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9,
            "f64 fusion should be exact to solver noise: ({}, {}) vs ({}, {})",
            a.x,
            a.y,
            b.x,
            b.y
        );
    }
}
