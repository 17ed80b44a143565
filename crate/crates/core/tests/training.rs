use stn_icnn::data::{preprocess, synth_face, Preprocessed, Sample, SynthSpec};

use stn_icnn::icnn::IcnnConfig;
use stn_icnn::labels::PartKind;
use stn_icnn::pipeline::{fine_targets, BnStats, ModelSet, PipelineConfig, Trainable};
use stn_icnn::stn::{LocNetConfig, ThetaRow};
use stn_icnn::tensor::{Graph, Mode, ParamStore};
use stn_icnn::train::{
    e2e_objective, prepare, pretrain_coarse, pretrain_locnet, theta_targets, train_end_to_end, Checkpoint, EpochLog,
    Phase, TargetWindow, TrainConfig, TrainState,
};
use stn_icnn::metrics::system_loss;
use stn_icnn::{Error, Result};

const WINDOW: usize = 41;

fn tiny() -> PipelineConfig {
    let icnn = |out, size| IcnnConfig {
        in_channels: 3,
        out_channels: out,
        widths: [2, 2, 2, 2],
        rounds: 1,
        input_size: size,
        interlink: true,
    };
    PipelineConfig {
        coarse: icnn(9, 128),
        loc: LocNetConfig {
            widths: [2; 8],
            ..LocNetConfig::default()
        },
        fine: PartKind::ALL.map(|k| icnn(k.channels(), WINDOW)),
        window: (WINDOW, WINDOW),
        ..PipelineConfig::desk()
    }
}

fn faces(n: usize, offset: u64) -> Vec<Sample> {
    (0..n as u64)
        .map(|i| synth_face(format!("t{i}"), &SynthSpec::random(i + offset, 96, 96).unwrap(), (WINDOW, WINDOW)).unwrap().sample)
        .collect()
}

fn data(n: usize) -> Vec<Preprocessed> {
    prepare(&faces(n, 0), false, 0).unwrap()
}

fn cfg(phase: Phase, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        ..TrainConfig::for_phase(phase)
    }
}

fn collect(logs: &mut Vec<String>) -> impl FnMut(&EpochLog, &TrainState) -> Result<()> + '_ {
    move |l, _| {
        logs.push(l.to_string());
        Ok(())
    }
}

fn pretrained(train: &[Preprocessed]) -> TrainState {
    let c = cfg(Phase::Coarse, 1);
    let mut st = TrainState::new(tiny(), &c).unwrap();
    pretrain_coarse(&mut st, &c, train, None, &mut |_, _| Ok(())).unwrap();
    let l = cfg(Phase::Locnet, 1);
    st.begin(&l).unwrap();
    pretrain_locnet(&mut st, &l, train, None, &mut |_, _| Ok(())).unwrap();
    st
}

#[test]
fn config_rules() {
    let mut c = TrainConfig::for_phase(Phase::EndToEnd);
    assert!(c.lr_pretrained < c.lr_new);
    c.lr_pretrained = c.lr_new * 2.0;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::for_phase(Phase::Coarse);
    c.batch_size = 0;
    assert!(c.validate().is_err());
    for p in [Phase::Coarse, Phase::Locnet, Phase::EndToEnd] {
        assert_eq!(Phase::parse(p.name()), Some(p));
    }
}

#[test]
fn initial_coarse_loss_is_near_ln2() {
    let train = prepare(&faces(8, 0), false, 0).unwrap();
    let c = TrainConfig { epochs: 1, ..TrainConfig::for_phase(Phase::Coarse) };
    let mut st = TrainState::new(PipelineConfig::desk(), &c).unwrap();
    let logs = pretrain_coarse(&mut st, &c, &train, None, &mut |_, _| Ok(())).unwrap();
    let first = logs[0].loss;
    assert!((first - std::f64::consts::LN_2).abs() <= 0.2, "first batch loss {first}");
}

#[test]
fn phases_check_their_prerequisites() {
    let train = data(2);
    let mut st = TrainState::new(tiny(), &cfg(Phase::Coarse, 1)).unwrap();
    match st.begin(&cfg(Phase::Locnet, 1)) {
        Err(Error::Config(m)) => assert!(m.contains("coarse checkpoint required")),
        other => panic!("{other:?}"),
    }
    assert!(st.begin(&cfg(Phase::EndToEnd, 1)).is_err());
    assert!(pretrain_locnet(&mut st, &cfg(Phase::Locnet, 1), &train, None, &mut |_, _| Ok(())).is_err());
}

#[test]
fn seeded_runs_are_bit_identical() {
    let train = data(4);
    let run = || {
        let c = cfg(Phase::Coarse, 2);
        let mut st = TrainState::new(tiny(), &c).unwrap();
        let mut logs = Vec::new();
        pretrain_coarse(&mut st, &c, &train, Some(&train), &mut collect(&mut logs)).unwrap();
        (logs, st.to_checkpoint().to_bytes().unwrap())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert!(a[0].starts_with("epoch 1 phase coarse loss "));
}

#[test]
fn locnet_phase_leaves_coarse_untouched() {
    let train = data(4);
    let c = cfg(Phase::Coarse, 1);
    let mut st = TrainState::new(tiny(), &c).unwrap();
    pretrain_coarse(&mut st, &c, &train, None, &mut |_, _| Ok(())).unwrap();
    let before: Vec<Vec<u32>> = st.models.coarse.store.iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
    let loc_before = st.models.loc.store.iter().next().unwrap().value.clone();
    let l = cfg(Phase::Locnet, 2);
    st.begin(&l).unwrap();
    pretrain_locnet(&mut st, &l, &train, None, &mut |_, _| Ok(())).unwrap();
    let after: Vec<Vec<u32>> = st.models.coarse.store.iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
    assert_eq!(before, after);
    assert_ne!(st.models.loc.store.iter().next().unwrap().value, loc_before);
}

#[test]
fn theta_targets_follow_the_sidecar_formula() {
    for i in 0..6 {
        let f = synth_face("s", &SynthSpec::random(i, 96, 96).unwrap(), (WINDOW, WINDOW)).unwrap();
        let pre = preprocess(&f.sample).unwrap();
        let rows = theta_targets(&pre, (WINDOW, WINDOW));
        for (r, t) in rows.iter().zip(f.truth.theta) {
            assert_eq!(r.unwrap(), t);
        }
        let mut g = Graph::<f64>::new();
        let t = ThetaRow::to_tensor::<f64>(&[f.truth.theta.to_vec()]).unwrap();
        let v = g.constant(t.clone());
        let l = g.smooth_l1(v, &t).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let train = data(4);
    let st0 = pretrained(&train);
    let e = cfg(Phase::EndToEnd, 3);

    let mut full = st0.clone();
    full.begin(&e).unwrap();
    let mut straight = Vec::new();
    train_end_to_end(&mut full, &e, &train, None, &mut collect(&mut straight)).unwrap();

    let mut part = st0;
    let first = TrainConfig { epochs: 1, ..e.clone() };
    part.begin(&first).unwrap();
    let mut resumed = Vec::new();
    train_end_to_end(&mut part, &first, &train, None, &mut collect(&mut resumed)).unwrap();
    let bytes = part.to_checkpoint().to_bytes().unwrap();
    let mut back = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.epoch, 1);
    back.begin(&e).unwrap();
    train_end_to_end(&mut back, &e, &train, None, &mut collect(&mut resumed)).unwrap();
    assert_eq!(straight, resumed);
    assert!(resumed[1].starts_with("epoch 2 phase e2e"));
}

#[test]
fn checkpoint_round_trip_and_failures() {
    let st = TrainState::new(tiny(), &cfg(Phase::Coarse, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    st.to_checkpoint().save(&a).unwrap();
    TrainState::from_checkpoint(&Checkpoint::load(&a).unwrap()).unwrap().to_checkpoint().save(&b).unwrap();
    let (x, y) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(x, y);
    assert_eq!(&x[..4], b"STNI");

    assert!(matches!(Checkpoint::from_bytes(&x[..x.len() - 3]), Err(Error::CorruptCheckpoint(_))));
    let mut wrong = x.clone();
    wrong[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::CheckpointVersion(9))));

    let mut c = Checkpoint::new();
    c.insert_store("loc/", &st.models.coarse.store);
    let mut loc = st.models.loc.clone();
    match c.load_store("loc/", &mut loc.store) {
        Err(Error::ParamShape { name, .. }) => assert_eq!(name, "loc/conv0.weight"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn frozen_and_joint_runs_differ() {
    let train = data(4);
    let st0 = pretrained(&train);
    let mut logs = Vec::new();
    for freeze in [true, false] {
        let mut st = st0.clone();
        let e = TrainConfig { freeze_stn: freeze, ..cfg(Phase::EndToEnd, 2) };
        st.begin(&e).unwrap();
        let out = train_end_to_end(&mut st, &e, &train, None, &mut |_, _| Ok(())).unwrap();
        if freeze {
            assert!(out.iter().all(|l| l.grad_norms[0] == 0.0 && l.grad_norms[1] == 0.0));
            assert_eq!(st.models.coarse.store.iter().next().unwrap().value, st0.models.coarse.store.iter().next().unwrap().value);
        } else {
            assert!(out.iter().all(|l| l.grad_norms[0] > 0.0 && l.grad_norms[1] > 0.0));
        }
        logs.push(out.iter().map(|l| l.loss).collect::<Vec<_>>());
    }
    assert_ne!(logs[0], logs[1]);
}

fn copy_into(src: &ParamStore<f32>, dst: &mut ParamStore<f64>) {
    for (a, b) in src.iter().zip(dst.iter_mut()) {
        assert_eq!(a.name, b.name);
        b.value = a.value.cast();
    }
}

fn f64_models(train: &[Preprocessed]) -> ModelSet<f64> {
    let st = pretrained(train);
    let mut m = ModelSet::<f64>::new(st.models.config.clone(), 0).unwrap();
    copy_into(&st.models.coarse.store, &mut m.coarse.store);
    copy_into(&st.models.loc.store, &mut m.loc.store);
    for (a, b) in st.models.fine.iter().zip(m.fine.iter_mut()) {
        copy_into(&a.store, &mut b.store);
    }
    m
}

#[test]
fn joint_gradient_reaches_coarse_and_targets_are_detached() {
    let train = data(2);
    let models = f64_models(&train);
    let batch: Vec<&Preprocessed> = train.iter().collect();

    let mut rows = Vec::new();
    for window in [TargetWindow::Predicted, TargetWindow::Truth] {
        let mut g = Graph::new();
        let bound = models.bind(&mut g, Trainable { coarse: true, loc: true, fine: true });
        let mut bn = BnStats::default();
        let loss = e2e_objective(&models, &mut g, &bound, &batch, None, window, &mut bn).unwrap();
        let grads = g.backward(loss).unwrap();
        let norm = |vars: &[stn_icnn::tensor::Var]| -> f64 {
            vars.iter().filter_map(|&v| grads.get(v)).flat_map(|t| t.data().iter().map(|x| x * x)).sum::<f64>()
        };
        assert!(norm(&bound.coarse) > 0.0);
        assert!(norm(&bound.loc) > 0.0);

        // the same objective with targets built outside the graph by hand
        let mut h = Graph::new();
        let hb = models.bind(&mut h, Trainable { coarse: true, loc: true, fine: true });
        let mut sink = Vec::new();
        let x = h.constant(stn_icnn::tensor::Tensor::stack(&batch.iter().map(|p| p.resized.cast()).collect::<Vec<_>>()).unwrap());
        let z = models.coarse_forward(&mut h, &hb, Mode::Eval, x, &mut sink).unwrap();
        let rough = models.encode_rough(&mut h, z).unwrap();
        let theta = models.loc_forward(&mut h, &hb, Mode::Eval, rough, &mut sink).unwrap();
        rows = ThetaRow::batch_from_tensor(h.value(theta)).unwrap();
        let padded: Vec<_> = batch.iter().map(|p| p.padded.cast()).collect();
        let crops = models.crop_by_kind(&mut h, &padded, theta).unwrap();
        let targets: Vec<_> = batch
            .iter()
            .zip(&rows)
            .map(|(p, r)| {
                let at: Vec<ThetaRow> = match window {
                    TargetWindow::Predicted => r.clone(),
                    TargetWindow::Truth => theta_targets(p, (WINDOW, WINDOW)).into_iter().map(Option::unwrap).collect(),
                };
                fine_targets(p, &at, (WINDOW, WINDOW)).unwrap()
            })
            .collect();
        let mut groups = Vec::new();
        for kind in PartKind::ALL {
            let parts = kind.parts();
            let t = stn_icnn::tensor::Tensor::stack(
                &parts.iter().flat_map(|p| targets.iter().map(move |ts| ts[p.index()].cast::<f64>())).collect::<Vec<_>>(),
            )
            .unwrap();
            let y = models.fine_forward(&mut h, &hb, kind, Mode::Train, crops[kind.index()], &mut sink).unwrap();
            groups.push((y, t, parts.len()));
        }
        let refs: Vec<_> = groups.iter().map(|(y, t, n)| (*y, t, *n)).collect();
        let hand = system_loss(&mut h, &refs).unwrap();
        assert_eq!(g.value(loss).data(), h.value(hand).data());
        let hgrads = h.backward(hand).unwrap();
        for (a, b) in bound.loc.iter().zip(&hb.loc) {
            assert_eq!(grads.get(*a).map(|t| t.data().to_vec()), hgrads.get(*b).map(|t| t.data().to_vec()));
        }
    }

    // fixed windows cut the path to both upstream networks
    let mut f = Graph::new();
    let fb = models.bind(&mut f, Trainable { coarse: true, loc: true, fine: true });
    let mut bn = BnStats::default();
    let fixed = e2e_objective(&models, &mut f, &fb, &batch, Some(&rows), TargetWindow::Predicted, &mut bn).unwrap();
    let fgrads = f.backward(fixed).unwrap();
    assert!(fb.coarse.iter().chain(&fb.loc).all(|&v| fgrads.get(v).is_none()));
    assert!(fb.fine[0].iter().any(|&v| fgrads.get(v).is_some()));
}
