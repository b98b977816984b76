//! The trained toy models and the samplers running on them.

mod common;

use std::io::Read;

use embed_langevin::constraint::{disc_constraint, KeywordConstraint, DEFAULT_DELTA, DEFAULT_TAU};
use embed_langevin::model::checkpoint::{self, Checkpoint};
use embed_langevin::model::corpus::sentiment_corpus;
use embed_langevin::sampler::{sample, simplex_sample, write_trace, ChainSeeds, SamplerConfig};

#[test]
fn sentiment_models_learn_their_tasks() {
    let s = common::sentiment();
    assert!(s.lm_summary.heldout_nll < 0.6 * s.lm_summary.uniform_nll, "{:?}", s.lm_summary);
    assert_eq!(s.lm_summary.separation_violations, 0);
    assert!(s.classifier_summary.heldout_accuracy > 0.95);
    assert!(s.judge_summary.heldout_accuracy > 0.95);

    // The judge agrees with the templates on fresh lines.
    let lex = s.lm.table().lexicon();
    let fresh = sentiment_corpus(200, 77);
    let right = fresh
        .iter()
        .filter(|(text, label)| {
            let mut tokens = vec![embed_langevin::model::BOS_ID];
            tokens.extend(lex.encode(text).unwrap());
            let p = s.judge.probs_for_tokens(&tokens).unwrap();
            (p[1] > 0.5) == (*label == 1)
        })
        .count();
    assert!(right >= 190, "{right}/200");
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let s = common::sentiment();
    let dir = tempfile::tempdir().unwrap();
    let lm_path = dir.path().join("lm.ckpt");
    checkpoint::save(&lm_path, &Checkpoint::Lm(s.lm.clone())).unwrap();
    let lm = checkpoint::load_lm(&lm_path).unwrap();
    assert_eq!(lm.table().content_hash(), s.lm.table().content_hash());
    let prompt = lm.table().lexicon().encode("the movie").unwrap();
    let out = lm.table().lexicon().encode("was great").unwrap();
    assert_eq!(
        lm.discrete_nll(&prompt, &out).unwrap().to_bits(),
        s.lm.discrete_nll(&prompt, &out).unwrap().to_bits()
    );

    let clf_path = dir.path().join("clf.ckpt");
    checkpoint::save(&clf_path, &Checkpoint::Classifier((*s.classifier).clone())).unwrap();
    let clf = checkpoint::load_classifier(&clf_path).unwrap();
    let tokens = [0, 3, 4, 5];
    assert_eq!(clf.probs_for_tokens(&tokens).unwrap(), s.classifier.probs_for_tokens(&tokens).unwrap());
    assert!(checkpoint::load_lm(&clf_path).is_err());
}

#[test]
fn both_parameterizations_satisfy_a_keyword() {
    let s = common::sentiment();
    let lex = s.lm.table().lexicon();
    let prompt = lex.encode("the show").unwrap();
    let word = lex.encode("fun").unwrap();
    let k = KeywordConstraint::new(s.lm.table(), word.clone(), DEFAULT_TAU, DEFAULT_DELTA)
        .unwrap()
        .into_spec("kw")
        .unwrap();
    let cfg = SamplerConfig {
        seed: 12,
        ..SamplerConfig::default()
    };
    let mut hits = [0, 0];
    for chain in 0..6 {
        let seeds = ChainSeeds::derive(cfg.seed, chain);
        let a = sample(&s.lm, &prompt, 4, std::slice::from_ref(&k), &cfg, seeds).unwrap();
        let b = simplex_sample(&s.lm, &prompt, 4, std::slice::from_ref(&k), &cfg, seeds).unwrap();
        for (h, r) in hits.iter_mut().zip([a, b]) {
            if r.termination.is_constrained() {
                assert!(r.output_ids.contains(&word[0]), "{}", r.output_text);
                *h += 1;
            }
            assert_eq!(r.output_ids.len(), 4);
        }
    }
    assert!(hits[0] >= 4, "{hits:?}");
}

#[test]
fn traces_record_every_iteration_and_compress() {
    let s = common::sentiment();
    let lex = s.lm.table().lexicon();
    let prompt = lex.encode("the room").unwrap();
    let c = disc_constraint(s.classifier.clone(), 0, 0.9).unwrap();
    let cfg = SamplerConfig {
        seed: 3,
        ..SamplerConfig::default()
    };
    let r = sample(&s.lm, &prompt, 4, &[c], &cfg, ChainSeeds::derive(3, 0)).unwrap();
    assert_eq!(r.trace.len(), r.iterations);
    assert!(r.trace.iter().all(|e| e.lambda.iter().all(|&l| l >= 0.0) && e.f.len() == 1));
    let mut plain = Vec::new();
    write_trace(&mut plain, std::slice::from_ref(&r), false).unwrap();
    let mut gz = Vec::new();
    write_trace(&mut gz, std::slice::from_ref(&r), true).unwrap();
    assert!(gz.len() < plain.len());
    let mut back = Vec::new();
    flate2::read::GzDecoder::new(gz.as_slice()).read_to_end(&mut back).unwrap();
    assert_eq!(back, plain);
    assert_eq!(String::from_utf8(plain).unwrap().lines().count(), r.iterations);
}
