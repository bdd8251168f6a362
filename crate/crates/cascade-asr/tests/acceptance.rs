//! Acceptance gate: eleven system-level criteria covering loss
//! oracles, distillation algebra, blocking, causality, multi-task
//! composition, an end-to-end training run, decoding, and
//! determinism.  Each test prints one PASS line with its evidence;
//! a failed assertion is the FAIL.

use cascade_asr::blocking::{owning_block, segment_blocks, visibility_end, BlockSpec};
use cascade_asr::decode::{cer, cerr, rnnt_beam_search, rnnt_greedy};
use cascade_asr::distill::DistillMode;
use cascade_asr::harness::config::{DecodeConfig, Overrides, RunConfig};
use cascade_asr::harness::corpus::{generate_corpus, CorpusConfig};
use cascade_asr::harness::runner::{cli_latency, cli_train};
use cascade_asr::losses::{offline_loss, Loss, LossWeights};
use cascade_asr::model::{Branch, Model, ModelConfig};
use cascade_asr::numerics::{GradTape, Tensor};
use cascade_asr::trainer::{corpus_cer, fit, lr_schedule, total_loss, MtlWeights, TrainConfig};
use cascade_asr::verify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn pass(criterion: usize, evidence: &str) {
    println!("[acceptance] criterion {criterion:02} PASS: {evidence}");
}

fn expect_pass(r: &verify::CheckResult) {
    assert!(r.pass, "{} failed: {}", r.name, r.detail);
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn criterion_01_loss_oracles_match_enumeration() {
    let start = Instant::now();
    let ctc = verify::check_ctc_oracle();
    let rnnt = verify::check_rnnt_oracle();
    expect_pass(&ctc);
    expect_pass(&rnnt);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "oracle sweep took {elapsed:?}");
    pass(1, &format!("ctc+transducer enumeration sweep in {elapsed:?}; {}", ctc.detail));
}

#[test]
fn criterion_02_ctc_total_probability_is_one() {
    let r = verify::check_ctc_normalization();
    expect_pass(&r);
    pass(2, &r.detail.to_string());
}

#[test]
fn criterion_03_spkd_matches_dense_reference() {
    let dense = verify::check_spkd_dense_reference();
    let hand = verify::check_spkd_hand_case();
    expect_pass(&dense);
    expect_pass(&hand);
    pass(3, &format!("dense reference: {}; hand case: {}", dense.detail, hand.detail));
}

#[test]
fn criterion_04_spkd_invariances_hold() {
    for r in [
        verify::check_spkd_scale_invariance(),
        verify::check_spkd_rotation_invariance(),
        verify::check_spkd_permutation_invariance(),
        verify::check_spkd_pair_bound(),
    ] {
        expect_pass(&r);
    }
    pass(4, "scale, rotation, and batch-permutation invariance plus the 4/B bound");
}

#[test]
fn criterion_05_gradients_match_finite_differences() {
    for r in [
        verify::check_ctc_gradient(),
        verify::check_rnnt_gradient(),
        verify::check_attention_ce_gradient(),
        verify::check_mlm_gradient(),
        verify::check_offline_composite_gradient(),
        verify::check_spkd_student_gradient(),
        verify::check_mse_ed_gradient(),
        verify::check_spkd_teacher_grad_zero(),
        verify::check_mse_ed_reference(),
    ] {
        expect_pass(&r);
    }
    pass(5, "all loss gradients within 1e-6 of central differences; teacher side exactly zero");
}

#[test]
fn criterion_06_blocking_and_delay_table() {
    expect_pass(&verify::check_block_count_coverage());
    expect_pass(&verify::check_delay_table());

    let table = cli_latency(&repo_config("default.json"), &Overrides::default()).unwrap();
    for needle in ["800 ms", "1600 ms", "2400 ms", "note"] {
        assert!(table.contains(needle), "latency table missing {needle:?}:\n{table}");
    }
    pass(6, "block count/coverage sweep to T=200; delays 800/1600/2400 ms with block-60 note");
}

#[test]
fn criterion_07_streaming_causality_and_offline_sensitivity() {
    let cfg = ModelConfig {
        input_dim: 6,
        dim: 8,
        heads: 2,
        streaming_layers: 2,
        full_context_layers: 1,
        vocab: 3,
        subsample: 2,
    };
    let spec = BlockSpec { block: 4, hop: 2, look_ahead: 0, frame_period_ms: 10.0 };
    let frames = 13usize;

    for seed in 0..5u64 {
        let model = Model::new(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00AD_BEEF);
        let data: Vec<f64> = (0..frames * cfg.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let feats = Tensor::new(frames, cfg.input_dim, data.clone()).unwrap();

        let run_streaming = |f: &Tensor| -> Tensor {
            let mut tape = GradTape::new();
            let lifted = model.lift(&mut tape, false).unwrap();
            let st = lifted.streaming_encode(&mut tape, f, &spec).unwrap();
            tape.value(st.output)
        };
        let run_offline = |f: &Tensor| -> Tensor {
            let mut tape = GradTape::new();
            let lifted = model.lift(&mut tape, false).unwrap();
            let st = lifted.streaming_encode(&mut tape, f, &spec).unwrap();
            let fc = lifted.full_context_encode(&mut tape, st.output).unwrap();
            tape.value(fc.output())
        };

        let base = run_streaming(&feats);
        let n_blocks = segment_blocks(frames, &spec).unwrap().len();

        for perturbed_frame in [frames - 1, 7] {
            let mut bumped = data.clone();
            for c in 0..cfg.input_dim {
                bumped[perturbed_frame * cfg.input_dim + c] += 0.75;
            }
            let bumped = Tensor::new(frames, cfg.input_dim, bumped).unwrap();
            let got = run_streaming(&bumped);

            let mut changed_inside = false;
            for r in 0..base.rows() {
                let owner = owning_block(r * cfg.subsample, &spec, n_blocks);
                let visible = perturbed_frame < visibility_end(owner, &spec, frames);
                let delta = (0..base.cols())
                    .map(|c| (base.get(r, c) - got.get(r, c)).abs())
                    .fold(0.0_f64, f64::max);
                if visible {
                    changed_inside |= delta > 0.0;
                } else {
                    assert!(
                        delta < 1e-12,
                        "seed {seed}: row {r} leaked frame {perturbed_frame} (delta {delta:e})"
                    );
                }
            }
            assert!(changed_inside, "seed {seed}: perturbation had no effect inside horizon");
        }

        // The cascaded full-context pass must see everything: bumping
        // the last frame moves the first output row.
        let base_off = run_offline(&feats);
        let mut bumped = data.clone();
        for c in 0..cfg.input_dim {
            bumped[(frames - 1) * cfg.input_dim + c] += 0.75;
        }
        let bumped = Tensor::new(frames, cfg.input_dim, bumped).unwrap();
        let got_off = run_offline(&bumped);
        let first_row_delta = (0..base_off.cols())
            .map(|c| (base_off.get(0, c) - got_off.get(0, c)).abs())
            .fold(0.0_f64, f64::max);
        assert!(
            first_row_delta > 1e-9,
            "seed {seed}: full-context encoder ignored the future (delta {first_row_delta:e})"
        );
    }
    pass(7, "5 seeded models: no leakage past the visibility horizon; offline path sees the future");
}

#[test]
fn criterion_08_multitask_composition_and_schedule() {
    let mut tape = GradTape::new();
    let as_loss = |tape: &mut GradTape, v: f64| -> Loss {
        let node = tape.constant_scalar(v).unwrap();
        Loss { node: Some(node), value: v }
    };

    let onl = as_loss(&mut tape, 1.0);
    let off = as_loss(&mut tape, 2.0);
    let dist = as_loss(&mut tape, 0.001);
    let weights = MtlWeights { onl: 1.0, off: 1.0, dist: 3000.0 };
    let total = total_loss(&mut tape, &weights, onl, off, dist).unwrap();
    assert_eq!(total.value, 6.0);

    let parts: Vec<Loss> = (0..4).map(|_| as_loss(&mut tape, 1.0)).collect();
    let off_combined = offline_loss(
        &mut tape,
        &LossWeights::default(),
        parts[0],
        parts[1],
        parts[2],
        parts[3],
    )
    .unwrap();
    assert_eq!(off_combined.value, 1.0);

    assert_eq!(lr_schedule(0.0015, 1500, 1500), 0.0015);
    assert_eq!(lr_schedule(0.0015, 1500, 6000), 0.00075);
    pass(8, "total 6.0 exact; unit offline mix 1.0 exact; lr pins 0.0015@1500 and 0.00075@6000");
}

#[test]
fn criterion_09_training_smoke_reaches_cer_20() {
    let cfg = RunConfig::load(&repo_config("acceptance.json")).unwrap();
    cfg.validate().unwrap();
    // The bundled corpus is pinned.
    assert_eq!(cfg.corpus.seed, 7);
    assert_eq!(cfg.corpus.vocab, 8);
    assert_eq!(cfg.corpus.utterances, 200);
    assert_eq!(cfg.corpus.input_dim, 16);
    assert_eq!(cfg.corpus.noise_std, 0.1);
    assert_eq!(cfg.train.epochs, 30);
    assert_eq!(cfg.train.distill_mode, DistillMode::SpEd);
    assert_eq!(cfg.train.mtl.dist, 3000.0);

    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let out = tempfile::tempdir().unwrap();

    let start = Instant::now();
    let mut model = Model::new(&cfg.model, cfg.train.seed).unwrap();
    fit(
        &mut model,
        corpus.train(),
        corpus.dev(),
        &cfg.blocking,
        &cfg.train,
        out.path(),
    )
    .unwrap();
    let st = corpus_cer(&model, corpus.test(), &cfg.blocking, Branch::Streaming, 10).unwrap();
    let off = corpus_cer(&model, corpus.test(), &cfg.blocking, Branch::Offline, 10).unwrap();
    let elapsed = start.elapsed();

    assert!(elapsed.as_secs() < 300, "training took {elapsed:?}");
    assert!(st <= 0.20, "streaming test error {st:.4} above 0.20");
    assert!(off <= 0.20, "non-streaming test error {off:.4} above 0.20");

    // Identical run with the distillation weight zeroed must end on
    // different parameters: the distillation gradient really flows.
    let mut twin_cfg = cfg.train.clone();
    twin_cfg.mtl.dist = 0.0;
    let twin_out = tempfile::tempdir().unwrap();
    let mut twin = Model::new(&cfg.model, cfg.train.seed).unwrap();
    assert!(
        params_equal(&model_params(&twin), &model_params(&Model::new(&cfg.model, cfg.train.seed).unwrap())),
        "equal seeds must initialize identically"
    );
    fit(
        &mut twin,
        corpus.train(),
        corpus.dev(),
        &cfg.blocking,
        &twin_cfg,
        twin_out.path(),
    )
    .unwrap();
    assert!(
        !params_equal(&model_params(&model), &model_params(&twin)),
        "zeroing the distillation weight changed nothing"
    );

    pass(
        9,
        &format!(
            "30-epoch distilled run in {elapsed:.1?}: test error streaming {st:.4}, non-streaming {off:.4}; zero-weight twin diverges"
        ),
    );
}

fn model_params(m: &Model) -> Vec<(String, Vec<f64>)> {
    m.store()
        .iter()
        .map(|(name, t)| (name.to_string(), t.data().to_vec()))
        .collect()
}

fn params_equal(a: &[(String, Vec<f64>)], b: &[(String, Vec<f64>)]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.0 == y.0
                && x.1.len() == y.1.len()
                && x.1.iter().zip(&y.1).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

#[test]
fn criterion_10_decoding_properties() {
    let cfg = ModelConfig {
        input_dim: 4,
        dim: 8,
        heads: 2,
        streaming_layers: 1,
        full_context_layers: 1,
        vocab: 4,
        subsample: 2,
    };
    let spec = BlockSpec { block: 4, hop: 2, look_ahead: 0, frame_period_ms: 10.0 };

    for seed in 0..50u64 {
        let model = Model::new(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9));
        let frames = rng.gen_range(6..=14);
        let data: Vec<f64> = (0..frames * cfg.input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let feats = Tensor::new(frames, cfg.input_dim, data).unwrap();

        for branch in [Branch::Streaming, Branch::Offline] {
            let mut tape = GradTape::new();
            let lifted = model.lift(&mut tape, false).unwrap();
            let st = lifted.streaming_encode(&mut tape, &feats, &spec).unwrap();
            let h = match branch {
                Branch::Streaming => st.output,
                Branch::Offline => {
                    lifted.full_context_encode(&mut tape, st.output).unwrap().output()
                }
            };
            let greedy = rnnt_greedy(&mut tape, &lifted, branch, h).unwrap();
            let beam1 = rnnt_beam_search(&mut tape, &lifted, branch, h, 1).unwrap();
            assert_eq!(greedy.ids, beam1.ids, "seed {seed}: beam-1 disagrees with greedy");

            let beam10 = rnnt_beam_search(&mut tape, &lifted, branch, h, 10).unwrap();
            assert!(
                beam10.score >= beam1.score - 1e-12,
                "seed {seed}: beam-10 score {} below greedy {}",
                beam10.score,
                beam1.score
            );
        }
    }

    // "kitten" vs "sitting" over a byte alphabet.
    let kitten: Vec<usize> = "kitten".bytes().map(usize::from).collect();
    let sitting: Vec<usize> = "sitting".bytes().map(usize::from).collect();
    assert_eq!(cer(&kitten, &sitting).unwrap(), 0.5);

    // Relative error-rate reduction from 6.84 to 6.66 is 2.63%.
    let reduction = cerr(6.84, 6.66).unwrap();
    assert_eq!(reduction, 100.0 * (6.84 - 6.66) / 6.84);
    assert!((reduction - 2.63).abs() < 5e-3, "{reduction}");

    pass(10, "beam-1 == greedy on 50 models x 2 paths; beam-10 never worse; edit-distance pins hold");
}

#[test]
fn criterion_11_train_runs_are_byte_identical() {
    let cfg = RunConfig {
        model: ModelConfig {
            input_dim: 4,
            dim: 8,
            heads: 2,
            streaming_layers: 1,
            full_context_layers: 1,
            vocab: 4,
            subsample: 2,
        },
        blocking: BlockSpec { block: 4, hop: 2, look_ahead: 0, frame_period_ms: 10.0 },
        train: TrainConfig {
            epochs: 2,
            batch_size: 4,
            peak_lr: 0.002,
            warmup_steps: 20,
            seed: 11,
            mask_ratio: 0.5,
            mtl: MtlWeights::default(),
            offline: LossWeights::default(),
            distill_mode: DistillMode::SpEd,
            distill_every_k: None,
        },
        corpus: CorpusConfig {
            vocab: 4,
            utterances: 20,
            min_tokens: 2,
            max_tokens: 4,
            frames_per_token: 3,
            input_dim: 4,
            noise_std: 0.05,
            seed: 3,
        },
        decode: DecodeConfig { beam: 2 },
    };
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    cli_train(&cfg_path, &Overrides::default(), &out_a).unwrap();
    cli_train(&cfg_path, &Overrides::default(), &out_b).unwrap();

    for file in ["model.ckpt", "train_log.ndjson", "val_log.ndjson", "summary.json"] {
        let a = std::fs::read(out_a.join(file)).unwrap();
        let b = std::fs::read(out_b.join(file)).unwrap();
        assert!(!a.is_empty(), "{file} is empty");
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    pass(11, "checkpoint, both logs, and summary byte-identical across two identical runs");
}
