//! Fusion model: topology, fusion variants, full-loss gradients,
//! checkpoints and stage training on a toy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttt_omics_autodiff::{finite_difference_gradient, relative_error, Tape, Tensor, Var};
use ttt_omics_core::checkpoint;
use ttt_omics_core::embedding::{apply_mask, build_tokens, FeatureOrdering, MaskPlan};
use ttt_omics_core::model::{
    cell_representation, decode_modality, encode_modality, fuse_with_residual, fusion_ttt, fusion_variant,
    pooled_element_add, CellInput, DecoderVars, FeatureSet, FusionMode, FusionOutputs, FusionVars, Modality, Pooling,
};
use ttt_omics_core::training::{cell_loss_and_grads, run_stage, StageConfig, TrainingData};
use ttt_omics_core::ttt::{TttBlockIds, TttBlockVars};
use ttt_omics_core::{CoreError, FusionModel, ModelConfig, ParamStore, Session, Stage};

const N_GENES: usize = 5;
const N_PROTEINS: usize = 3;

fn features(prefix: &str, n: usize) -> FeatureSet {
    FeatureSet::new((0..n).map(|i| format!("{prefix}{i}")).collect(), FeatureOrdering::identity(n)).unwrap()
}

fn toy_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d: 4,
        n_blocks_encoder: 1,
        n_blocks_decoder: 1,
        n_blocks_fusion: 1,
        mask_ratio: 0.4,
        eta_init: Some(0.1),
        seed,
        ..ModelConfig::default()
    }
}

fn toy_model(cfg: ModelConfig) -> FusionModel {
    FusionModel::new(cfg, features("G", N_GENES), features("P", N_PROTEINS)).unwrap()
}

fn toy_cell(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let rna = (0..N_GENES).map(|_| rng.random_range(0.0..3.0)).collect();
    let adt = (0..N_PROTEINS).map(|_| rng.random_range(-1.0..1.0)).collect();
    (rna, adt)
}

fn with_head(mut m: FusionModel) -> FusionModel {
    m.ensure_head(&["a".into(), "b".into(), "c".into()]).unwrap();
    m.stage = Some(Stage::Finetune);
    m
}

/// Worst relative error between backprop and central differences over
/// every parameter, plus the error over the concatenated gradient.
fn full_loss_gradcheck(model: &FusionModel, cell: CellInput, label: Option<usize>, stage: Stage, mask_seed: u64) -> (f64, f64) {
    let cfg = StageConfig::default();
    let (_, grads) = cell_loss_and_grads(model, cell, label, stage, mask_seed, &cfg).unwrap();
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let mut worst: f64 = 0.0;
    for id in model.store.ids() {
        let analytic = grads
            .get(id)
            .map_or_else(|| vec![0.0; model.store.value(id).len()], <[f64]>::to_vec);
        let mut probe = model.clone();
        let numeric = finite_difference_gradient(
            |p| {
                probe.store.value_mut(id).copy_from_slice(p);
                cell_loss_and_grads(&probe, cell, label, stage, mask_seed, &cfg).unwrap().0
            },
            model.store.value(id),
            1e-5,
        );
        let norm = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            worst = worst.max(relative_error(&analytic, &numeric));
        } else {
            assert!(numeric.iter().all(|x| x.abs() < 1e-7), "{}: zero gradient but FD {numeric:?}", model.store.name(id));
        }
        all_a.extend(analytic);
        all_n.extend(numeric);
    }
    (worst, relative_error(&all_a, &all_n))
}

#[test]
fn full_stage_losses_match_finite_differences() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (rna, adt) = toy_cell(&mut rng);
        let cell = CellInput { rna: &rna, adt: Some(&adt) };
        let m = toy_model(toy_config(seed));
        let (w1, g1) = full_loss_gradcheck(&m, cell, None, Stage::Pretrain, seed);
        assert!(w1 <= 1e-4 && g1 <= 1e-4, "stage 1 seed {seed}: {w1:e} {g1:e}");

        let m = with_head(m);
        let (w2, g2) = full_loss_gradcheck(&m, cell, Some(1), Stage::Finetune, seed);
        assert!(w2 <= 1e-4 && g2 <= 1e-4, "stage 2 seed {seed}: {w2:e} {g2:e}");

        let rna_only = CellInput { rna: &rna, adt: None };
        let (w3, g3) = full_loss_gradcheck(&m, rna_only, Some(2), Stage::Transfer, seed);
        assert!(w3 <= 1e-4 && g3 <= 1e-4, "stage 3 seed {seed}: {w3:e} {g3:e}");
    }
}

#[test]
fn ablation_modes_have_exact_gradients() {
    for mode in [FusionMode::Attention, FusionMode::ElementAdd] {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (rna, adt) = toy_cell(&mut rng);
        let cell = CellInput { rna: &rna, adt: Some(&adt) };
        let m = toy_model(ModelConfig {
            fusion_mode: mode,
            ..toy_config(3)
        });
        let (w, g) = full_loss_gradcheck(&m, cell, None, Stage::Pretrain, 4);
        assert!(w <= 1e-4 && g <= 1e-4, "{mode:?}: {w:e} {g:e}");
    }
}

fn block_store(n: usize, d: usize, seed: u64) -> (ParamStore, Vec<TttBlockIds>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..n)
        .map(|i| TttBlockIds::create(&mut store, &format!("b{i}"), d, 0.1, &mut rng).unwrap())
        .collect();
    (store, ids)
}

fn bind_all(s: &mut Session, ids: &[TttBlockIds]) -> Vec<TttBlockVars> {
    ids.iter().map(|b| b.bind(s)).collect()
}

fn random_seq(tape: &mut Tape, rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Var, Vec<f64>) {
    let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    (tape.param(&Tensor::new(&[n, d], data.clone()).unwrap()), data)
}

#[test]
fn zero_blocks_encode_to_the_input() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, data) = random_seq(&mut tape, &mut rng, 6, 4);
    let y = encode_modality(&mut tape, x, &[], 1e-6).unwrap();
    assert_eq!(tape.value(y), &data[..]);
}

#[test]
fn fusion_reads_the_target_rows_causally() {
    let (d, n1, n2) = (4, 3, 5);
    let run = |first: &[f64], second: &[f64]| -> Vec<f64> {
        let (store, ids) = block_store(1, d, 2);
        let mut s = Session::new(&store);
        let blocks = bind_all(&mut s, &ids);
        let tape = &mut s.tape;
        let a = tape.constant_from(&[n1, d], first.to_vec()).unwrap();
        let b = tape.constant_from(&[n2, d], second.to_vec()).unwrap();
        let out = fusion_ttt(tape, a, b, &blocks, 1e-6).unwrap();
        assert_eq!(tape.shape(out).dims(), &[n2, d]);
        tape.value(out).to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let first: Vec<f64> = (0..n1 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let second: Vec<f64> = (0..n2 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = run(&first, &second);

    // Changing target row 3 leaves target rows 0..3 bit-identical.
    let mut later = second.clone();
    later[3 * d] += 0.5;
    let out = run(&first, &later);
    assert_eq!(&out[..3 * d], &base[..3 * d]);
    assert_ne!(&out[3 * d..], &base[3 * d..]);

    // The other modality reaches every target row.
    let mut other = first.clone();
    other[0] += 0.5;
    let out = run(&other, &second);
    for r in 0..n2 {
        assert_ne!(&out[r * d..(r + 1) * d], &base[r * d..(r + 1) * d], "row {r}");
    }
}

#[test]
fn residual_weight_gradient_is_the_fused_sum() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, _) = random_seq(&mut tape, &mut rng, 4, 3);
    let (f, fdata) = random_seq(&mut tape, &mut rng, 4, 3);
    let lambda = tape.param(&Tensor::scalar(0.7));
    let out = fuse_with_residual(&mut tape, t, f, lambda).unwrap();
    let root = tape.sum(out).unwrap();
    tape.backward(root).unwrap();
    let g = tape.grad(lambda).unwrap()[0];
    assert!((g - fdata.iter().sum::<f64>()).abs() < 1e-12);
    assert!(tape.grad(f).unwrap().iter().all(|&x| (x - 0.7).abs() < 1e-15));
}

#[test]
fn attention_with_zero_queries_averages_values() {
    let d = 3;
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (first, fdata) = random_seq(&mut tape, &mut rng, 4, d);
    let (second, _) = random_seq(&mut tape, &mut rng, 2, d);
    let wq = tape.param(&Tensor::new(&[d, d], vec![0.0; d * d]).unwrap());
    let wk = random_seq(&mut tape, &mut rng, d, d).0;
    let mut eye = vec![0.0; d * d];
    (0..d).for_each(|i| eye[i * d + i] = 1.0);
    let wv = tape.param(&Tensor::new(&[d, d], eye).unwrap());
    let out = fusion_variant(&mut tape, first, second, &FusionVars::Attention { wq, wk, wv }, 1e-6).unwrap();
    let mean: Vec<f64> = (0..d).map(|j| (0..4).map(|i| fdata[i * d + j]).sum::<f64>() / 4.0).collect();
    for row in tape.value(out).chunks(d) {
        for (a, b) in row.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn element_add_variants() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, adata) = random_seq(&mut tape, &mut rng, 3, 2);
    let (b, bdata) = random_seq(&mut tape, &mut rng, 4, 2);
    let err = fusion_variant(&mut tape, a, b, &FusionVars::ElementAdd, 1e-6).unwrap_err();
    assert!(matches!(err, CoreError::Contract { .. }), "{err}");

    let out = pooled_element_add(&mut tape, a, b).unwrap();
    let mean = [
        (adata[0] + adata[2] + adata[4]) / 3.0,
        (adata[1] + adata[3] + adata[5]) / 3.0,
    ];
    for (r, row) in tape.value(out).chunks(2).enumerate() {
        assert!((row[0] - bdata[2 * r] - mean[0]).abs() < 1e-12);
        assert!((row[1] - bdata[2 * r + 1] - mean[1]).abs() < 1e-12);
    }

    let (c, cdata) = random_seq(&mut tape, &mut rng, 3, 2);
    let out = fusion_variant(&mut tape, a, c, &FusionVars::ElementAdd, 1e-6).unwrap();
    for (i, v) in tape.value(out).iter().enumerate() {
        assert_eq!(*v, adata[i] + cdata[i]);
    }
}

#[test]
fn decoder_restores_full_length_and_trains_masked_symbols() {
    let (n, d) = (6, 4);
    let (store, ids) = block_store(1, d, 8);
    let mut s = Session::new(&store);
    let blocks = bind_all(&mut s, &ids);
    let mut tape = s.tape;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let expr = random_seq(&mut tape, &mut rng, n, d).0;
    let sym = random_seq(&mut tape, &mut rng, n, d).0;
    let row: Vec<f64> = (0..n).map(|i| i as f64 * 0.3).collect();
    let tokens = build_tokens(&mut tape, &row, &FeatureOrdering::identity(n), expr, sym).unwrap();
    let plan = MaskPlan::new(n, 0.5, 11).unwrap();
    let (vis, rec) = apply_mask(&mut tape, &tokens, &plan).unwrap();
    assert_eq!(tape.shape(vis).rows(), 3);
    let mask: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = DecoderVars {
        mask: tape.param(&Tensor::new(&[d], mask).unwrap()),
        blocks,
        readout_w: random_seq(&mut tape, &mut rng, d, 1).0,
        readout_b: tape.param(&Tensor::new(&[1], vec![0.1]).unwrap()),
    };
    let out = decode_modality(&mut tape, vis, &rec, &p, 1e-6).unwrap();
    assert_eq!(tape.shape(out).dims(), &[n, 1]);
    let root = tape.sum(out).unwrap();
    tape.backward(root).unwrap();
    let g_sym = tape.grad(sym).unwrap();
    for &pos in plan.masked() {
        assert!(g_sym[pos * d..(pos + 1) * d].iter().any(|x| x.abs() > 0.0), "masked row {pos}");
    }
    assert!(tape.grad(p.mask).unwrap().iter().any(|x| x.abs() > 0.0));
    // Masked expression values never reach the loss.
    let g_expr = tape.grad(expr).unwrap();
    for &pos in plan.masked() {
        assert!(g_expr[pos * d..(pos + 1) * d].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn representation_follows_stage_topology() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (ft_rna, r) = random_seq(&mut tape, &mut rng, 3, 2);
    let (ft_adt, a) = random_seq(&mut tape, &mut rng, 1, 2);
    let out = FusionOutputs {
        e_rna: ft_rna,
        e_adt: Some(ft_adt),
        ft_rna,
        ft_adt: Some(ft_adt),
    };
    assert!(cell_representation(&mut tape, &out, Stage::Pretrain, Pooling::Mean).is_err());
    let e = cell_representation(&mut tape, &out, Stage::Finetune, Pooling::Mean).unwrap();
    let want0 = (r[0] + r[2] + r[4] + a[0]) / 4.0;
    assert!((tape.value(e)[0] - want0).abs() < 1e-12);
    let last = cell_representation(&mut tape, &out, Stage::Finetune, Pooling::Last).unwrap();
    assert_eq!(tape.value(last), &a[..]);
    let e3 = cell_representation(&mut tape, &out, Stage::Transfer, Pooling::Last).unwrap();
    assert_eq!(tape.value(e3), &r[4..6]);
}

#[test]
fn later_stages_leave_decoders_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (rna, adt) = toy_cell(&mut rng);
    let m = with_head(toy_model(toy_config(2)));
    let cfg = StageConfig::default();
    let cell = CellInput { rna: &rna, adt: Some(&adt) };
    let (_, g2) = cell_loss_and_grads(&m, cell, Some(0), Stage::Finetune, 0, &cfg).unwrap();
    let (_, g3) = cell_loss_and_grads(&m, CellInput { rna: &rna, adt: None }, Some(0), Stage::Transfer, 0, &cfg).unwrap();
    for id in m.store.ids() {
        let name = m.store.name(id);
        let touched = |g: &ttt_omics_core::Grads| g.get(id).is_some_and(|v| v.iter().any(|x| *x != 0.0));
        if name.starts_with("dec.") || name.ends_with(".mask") {
            assert!(!touched(&g2) && !touched(&g3), "{name}");
        }
        if name.starts_with("embed.adt") || name.starts_with("enc.adt") || name.starts_with("fusion.") {
            assert!(!touched(&g3), "{name} in stage 3");
        }
    }
    let (_, g1) = cell_loss_and_grads(&m, cell, None, Stage::Pretrain, 0, &cfg).unwrap();
    assert!(g1.get(m.store.find("head.w").unwrap()).is_none_or(|v| v.iter().all(|x| *x == 0.0)));
}

#[test]
fn each_modality_informs_the_joint_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (rna, adt) = toy_cell(&mut rng);
    let m = with_head(toy_model(toy_config(5)));
    let base = m.embed_cell(CellInput { rna: &rna, adt: Some(&adt) }, Stage::Finetune).unwrap();
    assert_eq!(base.len(), 4);
    let mut adt2 = adt.clone();
    adt2[0] += 1.0;
    let mut rna2 = rna.clone();
    rna2[0] += 1.0;
    assert_ne!(base, m.embed_cell(CellInput { rna: &rna, adt: Some(&adt2) }, Stage::Finetune).unwrap());
    assert_ne!(base, m.embed_cell(CellInput { rna: &rna2, adt: Some(&adt) }, Stage::Finetune).unwrap());
    let e3 = m.embed_cell(CellInput { rna: &rna, adt: None }, Stage::Transfer).unwrap();
    assert_eq!(e3, m.embed_cell(CellInput { rna: &rna, adt: Some(&adt2) }, Stage::Transfer).unwrap());
    assert!(m.embed_cell(CellInput { rna: &rna, adt: None }, Stage::Finetune).is_err());
    assert!(m.embed_cell(CellInput { rna: &rna[1..], adt: Some(&adt) }, Stage::Finetune).is_err());
}

#[test]
fn every_modality_has_its_own_parameters() {
    let m = toy_model(toy_config(0));
    for t in [Modality::Rna, Modality::Adt] {
        for name in ["embed.{}.expr", "embed.{}.sym", "embed.{}.mask", "lambda.{}", "dec.{}.readout.w"] {
            let name = name.replace("{}", t.tag());
            assert!(m.store.find(&name).is_some(), "{name}");
        }
    }
    assert_eq!(m.store.value(m.ids(Modality::Rna).lambda), &[0.5]);
}

// ---- checkpoints ----------------------------------------------------

fn toy_data(n_cells: usize, seed: u64) -> TrainingData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..N_GENES + N_PROTEINS).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let labels: Vec<usize> = (0..n_cells).map(|i| i % 3).collect();
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| centers[y].iter().map(|c| c + 0.3 * rng.random_range(-1.0..1.0)).collect())
        .collect();
    TrainingData {
        rna: rows.iter().map(|r| r[..N_GENES].to_vec()).collect(),
        adt: Some(rows.iter().map(|r| r[N_GENES..].to_vec()).collect()),
        labels: Some(labels),
        class_names: vec!["a".into(), "b".into(), "c".into()],
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = toy_data(6, 1);
    let mut m = toy_model(toy_config(21));
    let cfg = StageConfig {
        epochs: 2,
        batch_size: 3,
        ..StageConfig::default()
    };
    run_stage(&mut m, &data, Stage::Pretrain, &cfg).unwrap();
    run_stage(&mut m, &data, Stage::Finetune, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&m, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());
    for i in 0..data.n_cells() {
        let a = m.embed_cell(data.cell(i), Stage::Finetune).unwrap();
        let b = back.embed_cell(data.cell(i), Stage::Finetune).unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let m = toy_model(toy_config(0));
    let bytes = checkpoint::to_bytes(&m).unwrap();
    let p = std::path::Path::new("x.ckpt");
    let is_format = |r: Result<FusionModel, CoreError>| matches!(r, Err(CoreError::Format { .. }));
    assert!(is_format(checkpoint::from_bytes(&bytes[..bytes.len() - 8], p)));
    assert!(is_format(checkpoint::from_bytes(&[bytes.clone(), vec![0; 8]].concat(), p)));
    assert!(is_format(checkpoint::from_bytes(b"not a checkpoint", p)));
    assert!(is_format(checkpoint::from_bytes(&bytes[..20], p)));
    let mut bad_header = bytes.clone();
    bad_header[16] = b'[';
    assert!(is_format(checkpoint::from_bytes(&bad_header, p)));
    assert!(matches!(checkpoint::load(std::path::Path::new("/nonexistent/m.ckpt")), Err(CoreError::Io { .. })));
}

// ---- training -------------------------------------------------------

#[test]
fn stage_prerequisites_are_enforced() {
    let data = toy_data(6, 2);
    let cfg = StageConfig {
        epochs: 1,
        ..StageConfig::default()
    };
    let mut m = toy_model(toy_config(0));
    assert!(matches!(run_stage(&mut m, &data, Stage::Finetune, &cfg), Err(CoreError::Config(_))));
    run_stage(&mut m, &data, Stage::Pretrain, &cfg).unwrap();
    let err = run_stage(&mut m, &data, Stage::Transfer, &cfg).unwrap_err();
    assert!(matches!(err, CoreError::Config(_)) && err.to_string().contains("stage-2"), "{err}");
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let data = toy_data(6, 3);
    let mut m = toy_model(toy_config(4));
    let before = m.store.clone();
    let cfg = StageConfig {
        epochs: 0,
        ..StageConfig::default()
    };
    assert!(run_stage(&mut m, &data, Stage::Pretrain, &cfg).unwrap().is_empty());
    assert_eq!(m.store, before);
    assert_eq!(m.stage, Some(Stage::Pretrain));
}

#[test]
fn pretraining_reduces_reconstruction_loss() {
    let data = toy_data(30, 4);
    let mut m = toy_model(ModelConfig {
        d: 8,
        mask_ratio: 0.15,
        ..toy_config(6)
    });
    let cfg = StageConfig {
        epochs: 50,
        batch_size: 10,
        learning_rate: 3e-3,
        ..StageConfig::default()
    };
    let trace = run_stage(&mut m, &data, Stage::Pretrain, &cfg).unwrap();
    let (first, last) = (trace[0].loss, trace.last().unwrap().loss);
    assert!(last < 0.9 * first, "{first} -> {last} over {} epochs", trace.len());
    assert!(trace.iter().enumerate().all(|(i, e)| e.epoch == i && e.stage == Stage::Pretrain));
}

#[test]
fn training_is_deterministic() {
    let data = toy_data(9, 5);
    let cfg = StageConfig {
        epochs: 3,
        batch_size: 4,
        ..StageConfig::default()
    };
    let run = || {
        let mut m = toy_model(toy_config(8));
        let t1 = run_stage(&mut m, &data, Stage::Pretrain, &cfg).unwrap();
        let t2 = run_stage(&mut m, &data, Stage::Finetune, &cfg).unwrap();
        (checkpoint::to_bytes(&m).unwrap(), t1, t2)
    };
    assert_eq!(run(), run());
}
