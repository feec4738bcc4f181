//! Objective-side checks: the analytic cost model against an instrumented
//! multiply-accumulate counter, monotonicity, and evaluation determinism.

use lenopt::encoder::{EncoderArch, EncoderModel, LengthConfig};
use lenopt::eval::{cost_flops, decode_span, evaluate_model, f1_span, measure_wall_clock, speedup};
use lenopt::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_config(rng: &mut ChaCha8Rng, layers: usize, max_len: usize) -> Vec<usize> {
    let mut lengths: Vec<usize> = (0..layers).map(|_| rng.gen_range(1..=max_len)).collect();
    lengths.sort_unstable_by(|a, b| b.cmp(a));
    lengths
}

#[test]
fn cost_strictly_decreases_when_any_layer_shrinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut tested = 0usize;
    while tested < 1000 {
        let layers = rng.gen_range(2..=8);
        let arch = EncoderArch {
            num_layers: layers,
            hidden: 8 * rng.gen_range(1..=8),
            ff: 16 * rng.gen_range(1..=8),
            heads: 2,
            vocab: 16,
            max_seq: 512,
        };
        let lengths = random_config(&mut rng, layers, 384);
        let layer = rng.gen_range(0..layers);
        // decrementing must keep the sequence non-increasing and positive
        let lower_ok = layer + 1 == layers || lengths[layer] - 1 >= lengths[layer + 1];
        if lengths[layer] == 1 || !lower_ok {
            continue;
        }
        let base = LengthConfig::new(lengths.clone()).unwrap();
        let mut dec = lengths.clone();
        dec[layer] -= 1;
        let smaller = LengthConfig::new(dec).unwrap();
        let a = cost_flops(&arch, &base).unwrap();
        let b = cost_flops(&arch, &smaller).unwrap();
        assert!(b < a, "cost must strictly drop: {lengths:?} layer {layer}: {a} -> {b}");
        tested += 1;
    }
}

#[test]
fn instrumented_mac_counter_agrees_with_the_formula() {
    // inputs exactly x0 long, so the first layer's full-input attention
    // matches the formula's first term; the 2-unit output head is the only
    // uncounted matmul
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..25 {
        let layers = rng.gen_range(2..=5);
        let heads = 2;
        let arch = EncoderArch {
            num_layers: layers,
            hidden: 8 * rng.gen_range(1..=3),
            ff: 16 * rng.gen_range(1..=3),
            heads,
            vocab: 11,
            max_seq: 16,
        };
        let model = EncoderModel::new(arch, 1000 + trial).unwrap();
        let lengths = random_config(&mut rng, layers, 12);
        let n = lengths[0];
        let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..arch.vocab)).collect();
        let config = LengthConfig::new(lengths).unwrap();

        let tape = Tape::new();
        let pv = model.register(&tape, false);
        model.forward_on_tape(&tape, &pv, &tokens, Some(&config), None).unwrap();
        let measured = tape.matmul_macs() as f64;
        let formula = cost_flops(&arch, &config).unwrap();
        let rel = (measured - formula).abs() / formula;
        assert!(
            rel < 0.05,
            "trial {trial}: measured {measured} vs formula {formula} (rel {rel:.4})"
        );
    }
}

#[test]
fn full_config_evaluation_matches_a_direct_forward_loop() {
    let arch = EncoderArch { num_layers: 3, hidden: 16, ff: 32, heads: 2, vocab: 12, max_seq: 10 };
    let model = EncoderModel::new(arch, 55).unwrap();
    let task = lenopt::eval::generate_task(7, 40, 10, 12).unwrap();
    let config = LengthConfig::full(3, 10);
    let result = evaluate_model(&model, &config, &task).unwrap();

    let mut f1_sum = 0.0;
    let mut em = 0.0;
    for ex in &task.examples {
        let trace = model.forward_full(&ex.tokens).unwrap();
        let (ps, pe) = decode_span(&trace.logits);
        f1_sum += f1_span(ps, pe, ex.start, ex.end).unwrap();
        if (ps, pe) == (ex.start, ex.end) {
            em += 1.0;
        }
    }
    let n = task.examples.len() as f64;
    assert_eq!(result.f1.to_bits(), (f1_sum / n).to_bits());
    assert_eq!(result.exact_match.to_bits(), (em / n).to_bits());
    assert_eq!(result.cost_flops, cost_flops(&arch, &config).unwrap());
}

#[test]
fn evaluation_is_deterministic() {
    let arch = EncoderArch { num_layers: 4, hidden: 8, ff: 16, heads: 2, vocab: 10, max_seq: 9 };
    let model = EncoderModel::new(arch, 66).unwrap();
    let task = lenopt::eval::generate_task(8, 30, 9, 10).unwrap();
    let config = LengthConfig::new(vec![9, 7, 4, 2]).unwrap();
    let a = evaluate_model(&model, &config, &task).unwrap();
    let b = evaluate_model(&model, &config, &task).unwrap();
    assert_eq!(a.f1.to_bits(), b.f1.to_bits());
    assert_eq!(a.exact_match.to_bits(), b.exact_match.to_bits());
    assert_eq!(a.cost_flops.to_bits(), b.cost_flops.to_bits());
}

#[test]
fn all_zero_model_decodes_to_origin_and_scores_the_base_rate() {
    let arch = EncoderArch { num_layers: 2, hidden: 8, ff: 16, heads: 2, vocab: 10, max_seq: 9 };
    let mut model = EncoderModel::new(arch, 77).unwrap();
    for name in model.param_names() {
        // zeroed head and biases collapse every logit to the same value, so
        // argmax decode falls back to the lowest index
        if name.contains("head") {
            for v in model.param_mut(&name).data_mut() {
                *v = 0.0;
            }
        }
    }
    let task = lenopt::eval::generate_task(9, 25, 9, 10).unwrap();
    let config = LengthConfig::full(2, 9);
    let result = evaluate_model(&model, &config, &task).unwrap();

    let mut want = 0.0;
    for ex in &task.examples {
        let trace = model.forward_full(&ex.tokens).unwrap();
        let (ps, pe) = decode_span(&trace.logits);
        assert_eq!((ps, pe), (0, 0), "flat logits must decode to the origin");
        want += f1_span(0, 0, ex.start, ex.end).unwrap();
    }
    want /= task.examples.len() as f64;
    assert_eq!(result.f1.to_bits(), want.to_bits());
    // spans never include position 0 by construction, so the base rate is 0
    assert_eq!(result.f1, 0.0);
    assert_eq!(result.exact_match, 0.0);
}

#[test]
fn speedup_of_the_reference_itself_is_one() {
    let arch = EncoderArch { num_layers: 3, hidden: 16, ff: 32, heads: 2, vocab: 10, max_seq: 12 };
    let full = LengthConfig::full(3, 12);
    let s = speedup(&arch, 12, &arch, &full).unwrap();
    assert!((s - 1.0).abs() < 1e-15);

    let half = LengthConfig::new(vec![12, 6, 6]).unwrap();
    assert!(speedup(&arch, 12, &arch, &half).unwrap() > 1.0);
}

#[test]
fn wall_clock_summary_is_ordered_and_clamped() {
    let arch = EncoderArch { num_layers: 2, hidden: 8, ff: 16, heads: 2, vocab: 10, max_seq: 9 };
    let model = EncoderModel::new(arch, 88).unwrap();
    let task = lenopt::eval::generate_task(10, 5, 9, 10).unwrap();
    let config = LengthConfig::full(2, 9);
    let summary = measure_wall_clock(&model, &config, &task, 1).unwrap();
    assert_eq!(summary.repeats, 3, "repeats are clamped up to 3");
    assert!(summary.median_ms > 0.0);
    assert!(summary.p95_ms >= summary.median_ms);
}
