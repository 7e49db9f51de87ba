//! Scratch calibration probe, not part of the suite.

use enclap_desk::audio::AudioClip;
use enclap_desk::captioner::{
    generate_from_codes, prepare_items, CaptionerConfig, CaptionerModel, TrainDriver,
};
use enclap_desk::codec::{codec_encode, train_codec, CodeMatrix, CodecConfig};
use enclap_desk::data::Vocab;
use enclap_desk::joint::{train_joint, JointConfig};
use enclap_desk::metrics::{cider_d, tokenize_caption};
use enclap_desk::synth::{make_corpus, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[test]
#[ignore]
fn ablation_regime_probe() {
    let seed = 3u64;
    let pre_synth = SynthConfig {
        train: 960,
        val: 16,
        test: 16,
        min_duration_s: 0.8,
        max_duration_s: 1.2,
        min_events: 1,
        max_events: 2,
        ..SynthConfig::default()
    };
    let synth = SynthConfig {
        train: 768,
        val: 16,
        test: 64,
        min_duration_s: 1.5,
        max_duration_s: 1.9,
        min_events: 2,
        max_events: 5,
        ..SynthConfig::default()
    };
    let t0 = Instant::now();
    let pre_corpus = make_corpus(&pre_synth, seed + 100_003).unwrap();
    let pre_pairs: Vec<(AudioClip, String)> = pre_corpus
        .train
        .iter()
        .map(|i| (i.clip.clone(), i.captions[0].clone()))
        .collect();
    let pre_clips: Vec<AudioClip> = pre_pairs.iter().map(|(c, _)| c.clone()).collect();
    let corpus = make_corpus(&synth, seed).unwrap();
    let train_pairs: Vec<(AudioClip, String)> = corpus
        .train
        .iter()
        .map(|i| (i.clip.clone(), i.captions[0].clone()))
        .collect();
    let codec = train_codec(
        &pre_clips,
        &CodecConfig { epochs: 6, frame_hz: 20, ..CodecConfig::default() },
        seed,
    )
    .unwrap();
    let clap = train_joint(&pre_pairs, &JointConfig { epochs: 40, ..JointConfig::default() }, seed)
        .unwrap();
    println!("front ends done at {:.0}s", t0.elapsed().as_secs_f64());

    let captions: Vec<String> = train_pairs.iter().map(|(_, c)| c.clone()).collect();
    let vocab = Vocab::build(&captions);
    let base = CaptionerConfig {
        model_dim: 64,
        ffn_dim: 256,
        peak_lr: 1.3e-3,
        warmup_steps: 200,
        ..CaptionerConfig::default()
    };
    let probe = CaptionerModel::new(base.clone(), vocab.clone(), &mut ChaCha8Rng::seed_from_u64(seed));
    let prepared_all = prepare_items(&train_pairs, &codec, &clap, &probe.vocab).unwrap();
    let test_prepared: Vec<(CodeMatrix, Vec<f64>, Vec<String>)> = corpus
        .test
        .iter()
        .map(|i| {
            (
                codec_encode(&i.clip, &codec).unwrap(),
                clap.embed_audio(&i.clip).unwrap(),
                i.captions.clone(),
            )
        })
        .collect();

    let variants: [(&str, f64, f64, bool, bool); 4] = [
        ("full", 0.35, 0.15, false, false),
        ("no_mcm", 0.0, 0.15, false, false),
        ("no_clap", 0.35, 0.15, true, false),
        ("no_codec", 0.35, 0.15, false, true),
    ];
    for subset in [768usize] {
        let prepared = &prepared_all[..subset];
        let half = (subset * 6) as u64; // phases: 6, 12, 18, 24 epochs
        for (name, lambda, ratio, no_clap, no_codec) in variants {
            let mut vcfg = base.clone();
            vcfg.lambda_mcm = lambda;
            vcfg.mask_ratio = ratio;
            vcfg.ablate_clap = no_clap;
            vcfg.ablate_codec = no_codec;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = CaptionerModel::new(vcfg, vocab.clone(), &mut rng);
            let mut driver = TrainDriver::new(model, rng);
            for phase in 1..=4u64 {
                let tt = Instant::now();
                driver.run_steps(prepared, half).unwrap();
                let train_s = tt.elapsed().as_secs_f64();
                let empty = CodeMatrix {
                    codes: vec![Vec::new(); driver.model.config.num_codebooks],
                    frame_hz: 0,
                    source_duration_s: 0.0,
                };
                let mut cands = Vec::new();
                let mut refs = Vec::new();
                for (codes, clap_embedding, references) in &test_prepared {
                    let codes = if driver.model.config.ablate_codec { &empty } else { codes };
                    let gen = generate_from_codes(codes, clap_embedding, &driver.model, 4).unwrap();
                    cands.push(tokenize_caption(&gen.text));
                    refs.push(references.iter().map(|r| tokenize_caption(r)).collect());
                }
                let (score, _) = cider_d(&cands, &refs).unwrap();
                let recent = &driver.losses[driver.losses.len().saturating_sub(100)..];
                let mean_loss: f64 = recent.iter().sum::<f64>() / recent.len() as f64;
                println!(
                    "n={subset} {name} @{} steps: cider {score:.4}, loss {mean_loss:.3}, train {train_s:.0}s, elapsed {:.0}s",
                    phase * half,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
    }
}
