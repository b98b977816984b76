//! Trained toy models shared by the integration tests.

#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use embed_langevin::model::corpus::{multimodal_corpus, sentiment_corpus, SENTIMENT_LABELS};
use embed_langevin::model::train::{train_classifier, train_lm, ClassifierTrainSummary, LmTrainSummary, TrainConfig};
use embed_langevin::model::{AttributeClassifier, CausalLM, Lexicon, LmConfig};

pub struct Sentiment {
    pub lm: CausalLM,
    pub lm_summary: LmTrainSummary,
    /// Classifier used inside the constraint.
    pub classifier: Arc<AttributeClassifier>,
    pub classifier_summary: ClassifierTrainSummary,
    /// Independently trained judge (different data and seed).
    pub judge: AttributeClassifier,
    pub judge_summary: ClassifierTrainSummary,
}

pub fn lm_config() -> LmConfig {
    LmConfig {
        layers: 1,
        heads: 2,
        ffn_hidden: 64,
        context_limit: 32,
        position_scale: 0.5,
    }
}

pub fn sentiment() -> &'static Sentiment {
    static S: OnceLock<Sentiment> = OnceLock::new();
    S.get_or_init(|| {
        let data = sentiment_corpus(2000, 1);
        let lex = Lexicon::build(data.iter().map(|(t, _)| t.as_str()), &[]);
        let corpus: Vec<Vec<usize>> = data.iter().map(|(t, _)| lex.encode(t).unwrap()).collect();
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 16,
            learning_rate: 0.01,
            optimizer: embed_langevin::model::train::OptimizerKind::Adam,
            embed_dim: 32,
            seed: 1,
            ..TrainConfig::default()
        };
        let (lm, lm_summary) = train_lm(&lex, &corpus, lm_config(), &cfg).unwrap();
        let labels: Vec<String> = SENTIMENT_LABELS.iter().map(|s| s.to_string()).collect();
        let labeled = |n, seed| -> Vec<(Vec<usize>, usize)> {
            sentiment_corpus(n, seed)
                .into_iter()
                .map(|(t, l)| (lex.encode(&t).unwrap(), l))
                .collect()
        };
        let clf_cfg = TrainConfig {
            epochs: 10,
            learning_rate: 0.01,
            optimizer: embed_langevin::model::train::OptimizerKind::Adam,
            seed: 2,
            ..TrainConfig::default()
        };
        let (classifier, classifier_summary) =
            train_classifier(lm.table().clone(), labels.clone(), 16, &labeled(1500, 2), &clf_cfg).unwrap();
        let judge_cfg = TrainConfig { seed: 3, ..clf_cfg };
        let (judge, judge_summary) =
            train_classifier(lm.table().clone(), labels, 16, &labeled(1500, 3), &judge_cfg).unwrap();
        Sentiment {
            lm,
            lm_summary,
            classifier: Arc::new(classifier),
            classifier_summary,
            judge,
            judge_summary,
        }
    })
}

/// LM over `start` followed by one of a few fixed continuations.
pub fn multimodal() -> &'static CausalLM {
    static M: OnceLock<CausalLM> = OnceLock::new();
    M.get_or_init(|| {
        let lines = multimodal_corpus(4, 4, 12, 400, 5);
        let lex = Lexicon::build(lines.iter().map(String::as_str), &[]);
        let corpus: Vec<Vec<usize>> = lines.iter().map(|l| lex.encode(l).unwrap()).collect();
        let cfg = TrainConfig {
            epochs: 15,
            learning_rate: 0.01,
            optimizer: embed_langevin::model::train::OptimizerKind::Adam,
            embed_dim: 16,
            seed: 4,
            ..TrainConfig::default()
        };
        let config = LmConfig {
            ffn_hidden: 32,
            ..lm_config()
        };
        train_lm(&lex, &corpus, config, &cfg).unwrap().0
    })
}
