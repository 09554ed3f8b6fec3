mod common;

use std::collections::HashSet;

use common::{max_abs_diff, model_grad_error, random_tensor};
use posbench::data::synth::{self, Profile, SynthSpec};
use posbench::data::{InteractionDataset, Split, SplitKind};
use posbench::encodings::{EncodingSpec, Variant};
use posbench::model::{
    apply_max_norm, bce_loss, build_sequence, eval_epochs, left_pad, parse_nmax, score, train, Model, ModelConfig,
    Reduction, SequenceRow, PAD,
};
use posbench::numeric::{Graph, ParamStore, Rng, Tensor};
use posbench::Error;
use proptest::prelude::*;

#[test]
fn sequence_rows_shift_by_one_and_pad_left() {
    let exclude: HashSet<usize> = [3, 4, 5, 6].into();
    let row = build_sequence(&[3, 4, 5, 6], 5, &exclude, 10, &mut Rng::new(0, 0)).unwrap();
    assert_eq!(row.inputs, [PAD, PAD, 4, 5, 6]);
    assert_eq!(row.positives, [PAD, PAD, 5, 6, 7]);
    assert_eq!(row.padding, [true, true, false, false, false]);
    assert_eq!(&row.negatives[..2], &[PAD, PAD]);

    // only the most recent max_len transitions are kept
    let row = build_sequence(&[0, 1, 2, 3, 4, 5], 3, &HashSet::new(), 10, &mut Rng::new(0, 0)).unwrap();
    assert_eq!(row.inputs, [3, 4, 5]);
    assert_eq!(row.positives, [4, 5, 6]);
    assert!(row.padding.iter().all(|p| !p));

    assert!(build_sequence(&[7], 4, &HashSet::new(), 10, &mut Rng::new(0, 0)).is_none());
}

#[test]
fn negatives_never_come_from_the_history() {
    let history: Vec<usize> = vec![0, 2, 4, 6, 8, 9, 1];
    let exclude: HashSet<usize> = history.iter().copied().collect();
    let mut rng = Rng::new(17, 3);
    for _ in 0..2000 {
        let row = build_sequence(&history, 6, &exclude, 12, &mut rng).unwrap();
        for (&n, &p) in row.negatives.iter().zip(&row.padding) {
            if !p {
                assert!(n >= 1 && !exclude.contains(&(n - 1)), "{n}");
            }
        }
    }
}

#[test]
fn contexts_are_left_padded_and_truncated() {
    assert_eq!(left_pad(&[4, 7], 4), (vec![0, 0, 5, 8], vec![true, true, false, false]));
    assert_eq!(left_pad(&[1, 2, 3, 4, 5], 3), (vec![4, 5, 6], vec![false; 3]));
}

#[test]
fn score_is_sigmoid_of_dot_product() {
    let mut rng = Rng::new(2, 0);
    let h = random_tensor(&[3, 4, 6], &mut rng, 1.0);
    let t = random_tensor(&[3, 4, 6], &mut rng, 1.0);
    let mut g = Graph::new();
    let (hv, tv) = (g.constant(h.clone()), g.constant(t.clone()));
    let s = score(&mut g, hv, tv).unwrap();
    assert_eq!(g.shape(s), &[3, 4]);
    for k in 0..12 {
        let dot: f64 = h.data()[k * 6..k * 6 + 6].iter().zip(&t.data()[k * 6..k * 6 + 6]).map(|(a, b)| a * b).sum();
        assert!((g.value(s)[k] - 1.0 / (1.0 + (-dot).exp())).abs() < 1e-12);
    }

    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let b = g.constant(Tensor::new(vec![1, 2], vec![0.0, 3.0]).unwrap());
    let s = score(&mut g, a, b).unwrap();
    assert_eq!(g.value(s), &[0.5]);
}

fn loss_of(pos: &[f64], neg: &[f64], valid: &[bool], reduction: Reduction) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![pos.len()], pos.to_vec()).unwrap());
    let n = g.constant(Tensor::new(vec![neg.len()], neg.to_vec()).unwrap());
    let l = bce_loss(&mut g, p, n, valid, reduction).unwrap();
    g.scalar(l)
}

#[test]
fn bce_reference_values() {
    let ln2 = 2f64.ln();
    assert!((loss_of(&[0.5], &[0.5], &[true], Reduction::Sum) - 2.0 * ln2).abs() < 1e-12);
    assert!((loss_of(&[0.5; 3], &[0.5; 3], &[true; 3], Reduction::Mean) - 2.0 * ln2).abs() < 1e-12);
    assert!(loss_of(&[1.0], &[0.0], &[true], Reduction::Sum) < 1e-6);
    // padded positions contribute nothing, however wrong they are
    let with_pad = loss_of(&[0.5, 0.0], &[0.5, 1.0], &[true, false], Reduction::Sum);
    assert!((with_pad - 2.0 * ln2).abs() < 1e-12);
    // clamping keeps the worst case finite
    let worst = loss_of(&[0.0], &[1.0], &[true], Reduction::Sum);
    assert!((worst - 2.0 * -(1e-7f64).ln()).abs() < 1e-6);
}

#[test]
fn bce_rejects_mismatched_shapes() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::zeros(&[2]));
    let n = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(bce_loss(&mut g, p, n, &[true; 2], Reduction::Sum), Err(Error::Shape { .. })));
}

#[test]
fn max_norm_clips_long_rows_only() {
    let mut store = ParamStore::new();
    let id = store.add("t", Tensor::new(vec![3, 2], vec![3.0, 4.0, 0.0, 5e-5, 6e-5, 8e-5]).unwrap());
    apply_max_norm(&mut store, &[id], Some(1e-4)).unwrap();
    let v = store.value(id).data().to_vec();
    assert!(max_abs_diff(&v[..2], &[6e-5, 8e-5]) < 1e-18);
    assert_eq!(&v[2..], &[0.0, 5e-5, 6e-5, 8e-5]);
    apply_max_norm(&mut store, &[id], Some(1e-4)).unwrap();
    assert_eq!(store.value(id).data(), v.as_slice());
    apply_max_norm(&mut store, &[id], None).unwrap();
    assert_eq!(store.value(id).data(), v.as_slice());
    assert!(apply_max_norm(&mut store, &[id], Some(0.0)).is_err());
}

proptest! {
    #[test]
    fn max_norm_bounds_every_row(
        values in prop::collection::vec(-10.0f64..10.0, 12),
        nmax in 1e-4f64..5.0,
    ) {
        let mut store = ParamStore::new();
        let id = store.add("t", Tensor::new(vec![4, 3], values.clone()).unwrap());
        apply_max_norm(&mut store, &[id], Some(nmax)).unwrap();
        let once = store.value(id).data().to_vec();
        for (r, row) in once.chunks(3).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let before = values[r * 3..r * 3 + 3].iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm <= nmax * (1.0 + 1e-12));
            prop_assert!((norm - before.min(nmax)).abs() <= 1e-12 * before.max(1.0));
        }
        apply_max_norm(&mut store, &[id], Some(nmax)).unwrap();
        prop_assert!(max_abs_diff(store.value(id).data(), &once) <= 1e-15);
    }
}

fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        dim: 8,
        ff_hidden: 12,
        blocks: 2,
        heads: 2,
        dropout: 0.0,
        max_len: 5,
        encoding: EncodingSpec::new(variant),
        ..ModelConfig::default()
    }
}

fn sample_rows(model: &Model, seed: u64) -> Vec<SequenceRow> {
    let mut rng = Rng::new(seed, 0);
    let histories = [vec![0, 3, 5, 7, 2, 9], vec![4, 1], vec![10, 11, 6, 8]];
    histories
        .iter()
        .map(|h| {
            let exclude = h.iter().copied().collect();
            build_sequence(h, model.config.max_len, &exclude, model.num_items, &mut rng).unwrap()
        })
        .collect()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for variant in [Variant::None, Variant::AbsCon, Variant::Learnt, Variant::RotatoryCon, Variant::Rmha4, Variant::Rope] {
        let model = Model::new(small_config(variant), 12, None, &mut Rng::new(5, 1)).unwrap();
        let (err, name) = model_grad_error(&model, &sample_rows(&model, 3));
        assert!(err < 1e-4, "{variant} {name}: {err}");
    }
}

#[test]
fn attribute_fusion_gradients_match_finite_differences() {
    let attrs = random_tensor(&[12, 3], &mut Rng::new(8, 0), 1.0);
    let model = Model::new(small_config(Variant::Learnt), 12, Some(&attrs), &mut Rng::new(5, 1)).unwrap();
    assert!(model.attributes.is_some());
    let (err, name) = model_grad_error(&model, &sample_rows(&model, 4));
    assert!(err < 1e-4, "{name}: {err}");
}

#[test]
fn padding_row_receives_no_gradient() {
    let model = Model::new(small_config(Variant::Learnt), 12, None, &mut Rng::new(1, 1)).unwrap();
    let rows = sample_rows(&model, 0);
    let mut g = Graph::new();
    let l = model.batch_loss(&mut g, &rows, None).unwrap();
    g.backward(l).unwrap();
    let grads = g.param_grads();
    let (_, table) = grads.iter().find(|(id, _)| *id == model.item_table).unwrap();
    assert!(table[..model.config.dim].iter().all(|&x| x == 0.0));
    assert!(table[model.config.dim..].iter().any(|&x| x != 0.0));
}

#[test]
fn loss_does_not_depend_on_row_order() {
    let model = Model::new(small_config(Variant::RotatoryCon), 12, None, &mut Rng::new(2, 1)).unwrap();
    let rows = sample_rows(&model, 6);
    let loss = |rows: &[SequenceRow]| {
        let mut g = Graph::new();
        let l = model.batch_loss(&mut g, rows, None).unwrap();
        g.scalar(l)
    };
    let mut reversed = rows.clone();
    reversed.reverse();
    assert!((loss(&rows) - loss(&reversed)).abs() < 1e-12);
}

#[test]
fn eval_schedule_grows_geometrically() {
    assert_eq!(eval_epochs(1), [1]);
    assert_eq!(eval_epochs(10), [1, 2, 3, 4, 6, 8, 10]);
    let long = eval_epochs(200);
    assert_eq!(*long.last().unwrap(), 200);
    for w in long.windows(2) {
        assert!(w[1] as f64 >= 1.3 * w[0] as f64 || w[1] == 200);
    }
}

fn tiny_dataset() -> InteractionDataset {
    synth::generate(&SynthSpec::new(Profile::Memorizable, 40, 20, 3).with_lengths(6, 12)).unwrap()
}

fn tiny_train_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        ff_hidden: 16,
        blocks: 1,
        heads: 1,
        max_len: 10,
        epochs: 3,
        batch_size: 16,
        lr: 5e-3,
        eval_negatives: 20,
        encoding: EncodingSpec::new(Variant::Learnt),
        ..ModelConfig::default()
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let ds = tiny_dataset();
    let cfg = ModelConfig { lr: 0.0, nmax: Some(1e-4), ..tiny_train_config() };
    let out = train(&cfg, &ds).unwrap();
    let fresh = Model::new(cfg.clone(), ds.num_items(), None, &mut Rng::new(cfg.seed, posbench::model::streams::INIT)).unwrap();
    for ((_, a), (_, b)) in out.model.store.iter().zip(fresh.store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn training_is_reproducible_and_logs_every_scheduled_epoch() {
    let ds = tiny_dataset();
    let cfg = tiny_train_config();
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(a.history.to_tsv(), b.history.to_tsv());
    assert_eq!(a.test, b.test);
    let tsv = a.history.to_tsv();
    let mut lines = tsv.lines();
    assert_eq!(lines.next(), Some("epoch\tsplit\tHit@10\tNDCG\tloss"));
    let epochs: Vec<usize> = lines.map(|l| l.split('\t').next().unwrap().parse().unwrap()).collect();
    assert_eq!(&epochs[..3], &[1, 2, 3]);
    assert_eq!(epochs[3], a.best_epoch);
    assert!(a.history.rows.iter().all(|r| (0.0..=1.0).contains(&r.hit_at_10) && r.ndcg <= r.hit_at_10));

    let other = train(&ModelConfig { seed: 43, ..cfg }, &ds).unwrap();
    assert_ne!(a.history.to_tsv(), other.history.to_tsv());
}

#[test]
fn training_reduces_the_loss() {
    let ds = tiny_dataset();
    let out = train(&ModelConfig { epochs: 15, ..tiny_train_config() }, &ds).unwrap();
    let rows = &out.history.rows;
    let first = rows.first().unwrap().loss;
    let last = rows.iter().filter(|r| r.split == SplitKind::Valid).last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn max_norm_holds_after_training() {
    let ds = tiny_dataset();
    let cfg = ModelConfig { nmax: Some(0.05), ..tiny_train_config() };
    let out = train(&cfg, &ds).unwrap();
    for id in out.model.bounded_tables() {
        let t = out.model.store.value(id);
        let w = *t.shape().last().unwrap();
        for row in t.data().chunks(w) {
            assert!(row.iter().map(|x| x * x).sum::<f64>().sqrt() <= 0.05 * (1.0 + 1e-12));
        }
    }
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset();
    let out = train(&tiny_train_config(), &ds).unwrap();
    let path = dir.path().join("model.json");
    out.model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    let split = Split::leave_one_out(&ds);
    assert_eq!(loaded.evaluate(&split, SplitKind::Test).unwrap(), out.test);

    std::fs::write(&path, "{\"version\": 99}").unwrap();
    assert!(Model::load(&path).is_err());
}

#[test]
fn too_short_histories_are_skipped() {
    let ds = InteractionDataset::from_sequences(vec![vec![0, 1, 2, 3], vec![4, 5], vec![1, 2, 3, 4, 5]], 6).unwrap();
    let out = train(&ModelConfig { epochs: 1, ..tiny_train_config() }, &ds).unwrap();
    assert_eq!(out.skipped_users, 1);
    let ds = InteractionDataset::from_sequences(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
    assert!(matches!(train(&tiny_train_config(), &ds), Err(Error::EmptyDataset(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let base = tiny_train_config();
    for bad in [
        ModelConfig { lr: -1.0, ..base.clone() },
        ModelConfig { heads: 3, ..base.clone() },
        ModelConfig { dropout: 1.0, ..base.clone() },
        ModelConfig { nmax: Some(-1.0), ..base.clone() },
        ModelConfig { dim: 7, heads: 1, ..base.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    let json = r#"{"dim": 8, "typo_field": 1}"#;
    assert!(serde_json::from_str::<ModelConfig>(json).is_err());
}

#[test]
fn nmax_accepts_none_spellings() {
    assert_eq!(parse_nmax("none").unwrap(), None);
    assert_eq!(parse_nmax("NaN").unwrap(), None);
    assert_eq!(parse_nmax("0.0001").unwrap(), Some(1e-4));
    assert!(parse_nmax("-3").is_err());
    assert!(parse_nmax("abc").is_err());
}

#[test]
fn presets_carry_the_tuned_values() {
    let men = ModelConfig::preset("men").unwrap();
    assert_eq!((men.lr, men.max_len, men.heads, men.dim, men.ff_hidden), (6e-6, 35, 3, 390, 1950));
    assert_eq!(men.nmax, Some(1e-4));
    let games = ModelConfig::preset("games").unwrap();
    assert_eq!((games.lr, games.max_len, games.dropout, games.nmax), (1e-4, 50, 0.5, None));
    let beauty = ModelConfig::preset("Beauty").unwrap();
    assert_eq!((beauty.max_len, beauty.heads, beauty.dim), (75, 1, 90));
    for name in ModelConfig::PRESETS {
        ModelConfig::preset(name).unwrap().validate().unwrap();
    }
    assert!(ModelConfig::preset("books").is_err());
}
