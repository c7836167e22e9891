// Scratch throughput/learnability probe (temporary).

use std::time::Instant;

use lenctl::eval::{control_error_suite, EvalSetting, EvalSuiteConfig, TestSet};
use lenctl::infer::InferenceConfig;
use lenctl::nn::model::{ModelDims, PolicyModel};
use lenctl::scp::ControlType;
use lenctl::sft::{build_sft_dataset, train_sft, SftConfig};
use lenctl::templates::{bundled_templates, gen_synthetic_corpus, SyntheticCorpusParams};
use lenctl::tokenizer::Tokenizer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env_f(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn env_u(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let n_corpus = env_u("N_CORPUS", 4000);
    let steps = env_u("STEPS", 300);
    let batch = env_u("BATCH", 8);
    let lr = env_f("LR", 1e-3);
    let layers = env_u("LAYERS", 2);
    let heads = env_u("HEADS", 4);
    let d_model = env_u("DMODEL", 64);
    let article = env_f("ARTICLE", 48.0);
    let n_eval = env_u("NEVAL", 40);

    let params = SyntheticCorpusParams {
        n_examples: n_corpus,
        summary_len_mean: 71.0,
        summary_len_sd: 28.0,
        article_len_mean: article,
        vocab_size: 100,
        seed: 1,
    };
    let corpus = gen_synthetic_corpus(&params).unwrap();
    let tok = Tokenizer::for_corpus_vocab(100);
    println!("vocab size: {}", tok.vocab_size());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ds = build_sft_dataset(&corpus, bundled_templates(), &mut rng).unwrap();

    let dims = ModelDims {
        n_layers: layers,
        n_heads: heads,
        d_model,
        max_context: 384,
    };
    let model = PolicyModel::new(dims, tok, 7).unwrap();
    println!("params: {}", model.params.n_values());

    let cfg = SftConfig {
        steps,
        batch_size: batch,
        lr,
        validate_every: (steps / 6).max(1),
        val_generations: 8,
        ..Default::default()
    };
    let t0 = Instant::now();
    let (model, curve) = train_sft(model, &ds, &cfg).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    println!(
        "sft: {steps} steps x batch {batch} in {train_secs:.1}s ({:.1} ms/step)",
        1000.0 * train_secs / steps as f64
    );
    for p in &curve {
        println!(
            "  step {:4}  loss {:.4}  R1 {:.1} RL {:.1}  err {:.1}",
            p.step, p.loss, p.rouge1, p.rougel, p.control_error
        );
    }

    // Prompt-setting eval (greedy-ish single sample).
    let t1 = Instant::now();
    let suite = EvalSuiteConfig {
        setting: EvalSetting::Prompt,
        types: ControlType::CONSTRAINED.to_vec(),
        n_per_type: n_eval,
        seed: 99,
        inference: InferenceConfig {
            n_candidates: 1,
            use_filter: false,
            temperature: 0.8,
            ..Default::default()
        },
    };
    let report = control_error_suite(
        &model,
        None,
        &TestSet {
            corpus: &corpus[..500.min(corpus.len())],
            templates: bundled_templates(),
        },
        &suite,
    )
    .unwrap();
    println!("eval in {:.1}s", t1.elapsed().as_secs_f64());
    print!("{}", report.to_csv());

    // Length-follow diagnostics: mean generated length per target bucket.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for target in [60u32, 100, 140] {
        let scp = lenctl::scp::StandardControlPrompt::equal(target).unwrap();
        let mut lens = Vec::new();
        for i in 0..8 {
            let row = &corpus[i * 7];
            let tpl = &bundled_templates()[i % 18];
            let ex = lenctl::templates::fill_template(tpl, &scp, &row.article).unwrap();
            let ids = lenctl::sft::prompt_ids(
                &model.tokenizer,
                &lenctl::sft::prompt_text(&scp, &ex.utterance),
                model.dims.max_context,
                200,
            );
            let gen = lenctl::nn::model::generate(
                &model,
                &ids,
                &lenctl::nn::model::Sampling {
                    temperature: 0.8,
                    top_k: Some(50),
                    max_new_tokens: 200,
                },
                &mut rng,
            )
            .unwrap();
            lens.push(model.tokenizer.content_len(&gen.ids));
        }
        println!("target {target}: lens {lens:?}");
    }
}
