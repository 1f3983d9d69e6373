//! Temperature, top-k, and top-p filtering step by step on a hand-built
//! logit vector, then seeded decoding from an untrained model.

use distill::divergence::softmax;
use distill::model::{filter_candidates, sample_next, Model, ModelSpec, SamplingParams};

fn main() -> anyhow::Result<()> {
    let logits = [5.0, 4.0, 3.0, 2.0, 1.0, 0.0];
    println!("logits            : {logits:?}");

    let params = SamplingParams::default(); // temperature 0.6, top_k 5, top_p 0.5
    println!(
        "params            : temperature {}, top_k {}, top_p {}",
        params.temperature, params.top_k, params.top_p
    );
    let scaled: Vec<f64> = logits.iter().map(|l| l / params.temperature).collect();
    let full = softmax(&scaled[..params.top_k]);
    println!("after top-5 + softmax(logits / T): {:?}", round3(&full));
    let mut cum = 0.0;
    for (i, p) in full.iter().enumerate() {
        cum += p;
        println!("  token {i}: p = {p:.4}, cumulative = {cum:.4}");
    }
    let candidates = filter_candidates(&logits, &params)?;
    println!(
        "candidate set     : {:?} (smallest prefix with cumulative mass >= top_p)",
        candidates.iter().map(|(t, _)| *t).collect::<Vec<_>>()
    );

    let flat = SamplingParams {
        temperature: 2.5,
        top_k: 6,
        top_p: 0.9,
    };
    let candidates = filter_candidates(&logits, &flat)?;
    println!(
        "\nflatter settings (T {}, k {}, p {}): candidates {:?}",
        flat.temperature,
        flat.top_k,
        flat.top_p,
        candidates.iter().map(|(t, p)| (*t, (p * 1000.0).round() / 1000.0)).collect::<Vec<_>>()
    );

    let model = Model::new(ModelSpec {
        layers: 2,
        hidden_dim: 16,
        heads: 2,
        vocab_size: 24,
        max_seq: 32,
        seed: 9,
    })?;
    let prefix = vec![1u32, 5, 3];
    print!("\nseeded decoding from an untrained model, prefix {prefix:?}: ");
    let mut tokens = prefix.clone();
    for step in 0..10 {
        let next = sample_next(&model, &tokens, &params, 1000 + step)?;
        print!("{next} ");
        tokens.push(next);
    }
    println!();

    let greedy = SamplingParams {
        temperature: 0.6,
        top_k: 1,
        top_p: 1.0,
    };
    let a = sample_next(&model, &prefix, &greedy, 0)?;
    let b = sample_next(&model, &prefix, &greedy, 12345)?;
    println!("top_k = 1 is argmax under any seed: {a} == {b}");
    Ok(())
}

fn round3(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
