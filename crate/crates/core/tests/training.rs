use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use varc::data::{ExamplePair, Grid, Task};
use varc::geometry::{place_input, place_target, ViewTransform};
use varc::nn::AdamState;
use varc::synthetic::micro_training_set;
use varc::train::*;
use varc::vit::{training_step, LossMask, TrainingSample, VitConfig, VitModel};

fn tiny(tasks: usize) -> VitConfig {
    let mut c = VitConfig::tiny(8, 16, 1, 2);
    c.num_task_embeddings = tasks;
    c
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, warmup_epochs: 1, batch_size: 4, base_lr: 3e-3, max_scale: 2, validate_every: 0, ..TrainConfig::offline() }
}

fn pair(a: &[[u8; 2]; 2], b: &[[u8; 2]; 2]) -> ExamplePair {
    ExamplePair { input: Grid::from_rows(a).unwrap(), output: Grid::from_rows(b).unwrap() }
}

fn small_task(id: &str) -> Task {
    let demo = vec![pair(&[[1, 2], [3, 4]], &[[2, 1], [4, 3]]), pair(&[[5, 0], [0, 5]], &[[0, 5], [5, 0]])];
    Task::new(id, demo, vec![varc::data::InferPair { input: Grid::from_rows(&[[7, 8], [9, 1]]).unwrap(), output: None }]).unwrap()
}

#[test]
fn repeated_sample_loss_falls_over_windows() {
    let x = Grid::from_rows(&[[1u8, 2], [3, 4]]).unwrap();
    let v = ViewTransform { offset: (2, 2), ..ViewTransform::identity() };
    let s = TrainingSample { input: place_input(&x, &v, 8).unwrap(), target: place_target(&x, &v, 8).unwrap(), task_index: 0 };
    let mut m = VitModel::new(tiny(1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut adam = AdamState::new(m.params());
    let losses: Vec<f64> =
        (0..200).map(|_| training_step(&mut m, &mut adam, &[s.clone()], 1e-3, LossMask::Full, None).unwrap().loss).collect();
    let windows: Vec<f64> = losses.chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for w in windows.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "window mean rose: {windows:?}");
    }
}

#[test]
fn inference_pairs_never_enter_training() {
    let data = micro_training_set(0, 4, 2, 3);
    let mut pool = demo_pool(&data);
    assert!(pool.iter().all(|p| p.lineage == Lineage::Demo));
    assert_eq!(pool.len(), data.demo_pair_count());
    let t = &data.tasks()[0];
    pool.push(PoolItem {
        pair: ExamplePair { input: t.infer[0].input.clone(), output: t.infer[0].output.clone().unwrap() },
        task_index: 0,
        task_id: Arc::from(t.task_id.as_str()),
        lineage: Lineage::Infer,
    });
    let mut m = VitModel::new(tiny(3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut adam = AdamState::new(m.params());
    let err = run_epochs(&mut m, &mut adam, &pool, &quick_cfg(2), None, &mut no_observer()).unwrap_err();
    assert!(matches!(err, TrainError::LineageViolation { .. }), "{err}");
}

#[test]
fn offline_training_checks_embedding_count() {
    let data = micro_training_set(0, 4, 1, 3);
    let err = train_offline(&data, &tiny(2), &quick_cfg(2), &mut no_observer()).err().unwrap();
    assert!(matches!(err, TrainError::TooFewTaskEmbeddings { needed: 3, have: 2 }));
}

#[test]
fn ttt_copies_are_independent() {
    let base = VitModel::new(tiny(3), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let snapshot = base.params().params().to_vec();
    let cfg = TttConfig { train: quick_cfg(2), num_aux: 4, ..TttConfig::default() };
    let a = test_time_train(&base, &small_task("a"), &cfg, &mut no_observer()).unwrap();
    assert_eq!(base.params().params(), &snapshot[..], "base model mutated");
    let b1 = test_time_train(&base, &small_task("b"), &cfg, &mut no_observer()).unwrap();
    let again = test_time_train(&base, &small_task("b"), &cfg, &mut no_observer()).unwrap();
    assert_eq!(b1.model.params().params(), again.model.params().params(), "adaptation of b depends on history");
    assert!(!Arc::ptr_eq(&a.model, &b1.model));
    assert_eq!(a.model.task_embeddings().shape()[0], 4);
    assert_eq!(a.metrics.len(), 2);
}

#[test]
fn embeddings_only_scope_freezes_the_body() {
    let base = VitModel::new(tiny(1), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let cfg = TttConfig { train: quick_cfg(2), num_aux: 3, scope: TttScope::EmbeddingsOnly, ..TttConfig::default() };
    let a = test_time_train(&base, &small_task("a"), &cfg, &mut no_observer()).unwrap();
    let embed = a.model.task_embed_id();
    for (i, (p, q)) in a.model.params().params().iter().zip(base.params().params()).enumerate() {
        if i == embed.0 {
            continue;
        }
        assert_eq!(p.value, q.value, "{} moved", p.name);
    }
}

#[test]
fn joint_ttt_assigns_disjoint_embedding_blocks() {
    let base = VitModel::new(tiny(1), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let cfg = TttConfig { train: quick_cfg(2), num_aux: 5, ..TttConfig::default() };
    let (ta, tb) = (small_task("a"), small_task("b"));
    let adapted = joint_test_time_train(&base, &[&ta, &tb], &cfg, &mut no_observer()).unwrap();
    assert_eq!(adapted.len(), 2);
    assert_eq!((adapted[0].embed_offset, adapted[1].embed_offset), (0, 5));
    assert!(Arc::ptr_eq(&adapted[0].model, &adapted[1].model));
    assert_eq!(adapted[0].model.task_embeddings().shape()[0], 10);
}

#[test]
fn aux_tasks_are_a_pure_function_of_the_seed() {
    assert_eq!(build_aux_tasks(11), build_aux_tasks(11));
    assert_ne!(build_aux_tasks(11), build_aux_tasks(12));
    let aux = build_aux_tasks(11);
    assert_eq!(aux.len(), NUM_AUX_TASKS);
    let ta = small_task("a");
    for a in &aux {
        let p = a.transform_pair(&ta.demo[0]);
        assert_eq!(a.view().untransform_grid(&p.input), ta.demo[0].input);
    }
}

#[test]
fn ttt_needs_demonstrations() {
    let base = VitModel::new(tiny(1), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let mut t = small_task("a");
    t.demo.clear();
    let err = test_time_train(&base, &t, &TttConfig { train: quick_cfg(2), ..TttConfig::default() }, &mut no_observer());
    assert!(matches!(err, Err(TrainError::NoDemos { .. })));
}
