use std::collections::BTreeMap;

use chase_core::ada::{ForwardCounter, DISC_PREFIX};
use chase_core::augment::AugmentParams;
use chase_core::backbone::{init_backbone, staged_seg_loss, BackboneConfig, Binder, StageOutputs};
use chase_core::heterofusion::{enumerate_views, hetero_forward_batch, HeteroRequest};
use chase_core::model::{Checkpoint, ModelKind, CHECKPOINT_VERSION};
use chase_core::nn::{poly_decay, Graph, Tensor};
use chase_core::pseudolabel::{seg_loss_with_pseudo, HolesRecord, HolesTerm};
use chase_core::synthdata::{generate_datasets, Datasets, LabelMask, PhaseId, SynthConfig, IGNORE};
use chase_core::trainer::{
    chase_gradients, init_cohetero_from_pretrained, labeled_item, run_chase, slice_tensor, ChaseState, StepBatch,
    TrainConfig, UnlabeledItem,
};

const SEG_PREFIX: &str = "seg.";

fn tiny_data() -> Datasets {
    let synth = SynthConfig {
        source_train: 3,
        source_val: 1,
        source_test: 1,
        target_train: 3,
        target_val: 1,
        target_test: 1,
        shape: [8, 16, 16],
        cavity_prob: 1.0,
        ..SynthConfig::default()
    };
    generate_datasets(&synth).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        channels: [2, 3, 3, 3, 3],
        disc_features: 2,
        labeled_batch: 2,
        unlabeled_batch: 2,
        holes_batch: 1,
        steps_per_epoch: 3,
        ..TrainConfig::default()
    }
}

fn hetero_init(tc: &TrainConfig) -> Checkpoint {
    let single = Checkpoint {
        version: CHECKPOINT_VERSION,
        kind: ModelKind::Single,
        stage: "pretrain".into(),
        step: 0,
        backbone: tc.backbone(),
        disc: None,
        params: init_backbone(&tc.backbone(), 11).unwrap(),
        meta: BTreeMap::new(),
    };
    init_cohetero_from_pretrained(&single, &tc.disc(), 11).unwrap()
}

fn one_batch(data: &Datasets) -> StepBatch {
    let study = &data.unlabeled[0];
    let z = study.depth() / 2;
    StepBatch {
        labeled: vec![labeled_item(&data.labeled[0], 3, &AugmentParams::identity(), 0).unwrap()],
        unlabeled: vec![UnlabeledItem {
            images: study.available().into_iter().map(|p| (p, slice_tensor(study, p, z))).collect(),
            combos: enumerate_views(&study.available()).unwrap().into_iter().take(4).collect(),
        }],
        holes: Vec::new(),
    }
}

#[test]
fn alternating_updates_touch_only_their_own_parameters() {
    let tc = tiny_config();
    let data = tiny_data();
    let init = hetero_init(&tc);
    let mut state = ChaseState::new(&init, &tc).unwrap();
    let grads = chase_gradients(&state.params, &state.cfg, &tc, [1.0; 3], &one_batch(&data), 0, &ForwardCounter::new())
        .unwrap();
    assert!(grads.seg.keys().all(|k| k.starts_with(SEG_PREFIX)));
    assert!(grads.disc.keys().all(|k| k.starts_with(DISC_PREFIX)));

    let (seg0, disc0) = (state.params.digest(SEG_PREFIX), state.params.digest(DISC_PREFIX));
    state.apply_seg(&grads.seg);
    let seg1 = state.params.digest(SEG_PREFIX);
    assert_ne!(seg0, seg1);
    assert_eq!(disc0, state.params.digest(DISC_PREFIX));
    state.apply_disc(&grads.disc, tc.disc_lr);
    assert_eq!(seg1, state.params.digest(SEG_PREFIX));
    assert_ne!(disc0, state.params.digest(DISC_PREFIX));
}

#[test]
fn logged_total_is_the_weighted_sum_and_runs_repeat() {
    let tc = tiny_config();
    let data = tiny_data();
    let init = hetero_init(&tc);
    let run = || run_chase(&tc, &init, &data.labeled, &data.unlabeled, &[], 2, &ForwardCounter::new(), |_| {}).unwrap();
    let a = run();
    assert_eq!(a.losses.len(), 2 * tc.steps_per_epoch);
    for l in &a.losses {
        let want = l.l_seg + l.l_cons + tc.lambda_adv * l.l_adv;
        assert!((l.total - want).abs() <= 1e-6, "step {}: {} vs {want}", l.step, l.total);
    }
    let b = run();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.state.params.digest(""), b.state.params.digest(""));
}

#[test]
fn holes_change_only_the_segmentation_term() {
    let tc = tiny_config();
    let data = tiny_data();
    let init = hetero_init(&tc);
    // a fake record marking a block of one study as lesion
    let study = &data.unlabeled[0];
    let [d, h, w] = study.shape();
    let mut labels = vec![IGNORE; d * h * w];
    for z in 1..d - 1 {
        for y in 6..10 {
            for x in 6..10 {
                labels[(z * h + y) * w + x] = 2;
            }
        }
    }
    let rec = HolesRecord {
        id: study.id.clone(),
        pseudo: LabelMask::new(study.shape(), study.spacing(), labels).unwrap(),
        hole_sizes: vec![64],
    };
    let counter = ForwardCounter::new();
    let plain = run_chase(&tc, &init, &data.labeled, &data.unlabeled, &[], 1, &counter, |_| {}).unwrap();
    let with = run_chase(&tc, &init, &data.labeled, &data.unlabeled, std::slice::from_ref(&rec), 1, &counter, |_| {}).unwrap();
    // the first step starts from the same parameters
    assert_eq!(plain.losses[0].l_cons, with.losses[0].l_cons);
    assert_eq!(plain.losses[0].l_adv, with.losses[0].l_adv);
    assert!(with.losses[0].l_seg > plain.losses[0].l_seg);

    let off = TrainConfig {
        lambda_h: 0.0,
        ..tc.clone()
    };
    let zero = run_chase(&off, &init, &data.labeled, &data.unlabeled, &[rec], 1, &counter, |_| {}).unwrap();
    assert_eq!(zero.losses, plain.losses);
}

fn outputs_for(g: &mut Graph, p: &Binder, cfg: &BackboneConfig, image: &Tensor) -> StageOutputs {
    let req = HeteroRequest {
        images: BTreeMap::from([(PhaseId::V, g.input(image.clone()))]),
        combos: vec![chase_core::heterofusion::ViewCombo::single(PhaseId::V)],
    };
    hetero_forward_batch(g, p, cfg, &[req]).unwrap().remove(0).remove(0)
}

#[test]
fn pseudo_label_term_examples() {
    let tc = tiny_config();
    let init = hetero_init(&tc);
    let cfg = tc.backbone();
    let hw = 16 * 16;
    let image = Tensor::image(16, 16, (0..hw).map(|i| (i % 7) as f64 / 7.0).collect());
    let labels: Vec<u8> = (0..hw).map(|i| (i % 3) as u8).collect();
    let weights = [0.5, 1.0, 2.0];
    let mut g = Graph::new();
    let p = Binder::frozen(&init.params);
    let outs = outputs_for(&mut g, &p, &cfg, &image);
    let l_seg = staged_seg_loss(&mut g, &outs, &labels, weights);
    let base = g.value(l_seg).item_scalar();

    let no_items = seg_loss_with_pseudo(&mut g, l_seg, &[], weights, 0.01).unwrap();
    assert_eq!(g.value(no_items).item_scalar(), base);

    let k = 107;
    let mut pseudo = vec![IGNORE; hw];
    pseudo[k] = 2;
    let term = HolesTerm {
        outputs: vec![outs],
        labels: &pseudo,
    };
    let zero = seg_loss_with_pseudo(&mut g, l_seg, std::slice::from_ref(&term), weights, 0.0).unwrap();
    assert_eq!(g.value(zero).item_scalar(), base);

    let with = seg_loss_with_pseudo(&mut g, l_seg, &[term], weights, 0.01).unwrap();
    // hand computation: sum_m (m/5) * w_2 * -ln p_m(2) at pixel k
    let by_hand: f64 = outs
        .probs
        .iter()
        .enumerate()
        .map(|(m, &pv)| (m + 1) as f64 / 5.0 * weights[2] * -g.value(pv).data()[2 * hw + k].ln())
        .sum();
    let got = g.value(with).item_scalar() - base;
    assert!((got - 0.01 * by_hand).abs() < 1e-12, "{got} vs {}", 0.01 * by_hand);
}

#[test]
fn discriminator_rate_follows_the_poly_schedule() {
    let base = 3e-4;
    for (t, total) in [(0, 10), (3, 10), (9, 10), (250, 1000)] {
        let want = base * (1.0 - t as f64 / total as f64).powf(0.9);
        assert!((poly_decay(base, t, total, 0.9) - want).abs() < 1e-9);
    }
}
