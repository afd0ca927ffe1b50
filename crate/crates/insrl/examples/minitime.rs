use insrl::config::{Config, DataKind};
use insrl::data::toygen::{write_toy_corpus, ToyCorpusConfig};
use insrl::fusion::FusionStrategy;
use insrl::runner::{encode_corpora, evaluate_model, load_corpora, train_text};

fn main() {
    let dir = std::env::temp_dir().join(format!("insrl_mt_{}", std::process::id()));
    let toy = write_toy_corpus(&dir, &ToyCorpusConfig {
        n_relations: 10,
        n_train_facts: 400, n_train_na: 180,
        n_test_facts: 140, n_test_na: 140,
        ..ToyCorpusConfig::default()
    }).unwrap();

    let mut cfg = Config::default();
    cfg.data.kind = DataKind::Text;
    cfg.data.train = Some(toy.train.sentences.clone());
    cfg.data.test = Some(toy.test.sentences.clone());
    cfg.data.descriptions = Some(toy.train.descriptions.clone());
    cfg.data.types = Some(toy.train.types.clone());
    cfg.data.relations = Some(toy.train.relations.clone());
    cfg.data.max_sentence_len = 16;
    cfg.data.max_types = 5;
    cfg.data.position_clip = 8;
    cfg.model.d_model = 16;
    cfg.model.d_word = 8;
    cfg.model.d_position = 4;
    cfg.model.d_type = 4;
    cfg.model.d_intact = 24;
    cfg.model.heads = 4;
    cfg.model.conv_layers = 2;
    cfg.model.conv_width = 5;
    cfg.train.epochs = 80;
    cfg.train.batch_size = 50;
    cfg.train.learning_rate = 0.05;

    let raw = load_corpora(&cfg).unwrap();
    for strategy in [FusionStrategy::Insrl, FusionStrategy::MvAvg] {
        let mut c = cfg.clone();
        c.model.fusion = strategy;
        let mut aucs = Vec::new();
        for seed in 1u64..=5 {
            let prepared = encode_corpora(&raw, &c, seed).unwrap();
            let (model, _) = train_text::<f32, _>(&c, &prepared, None, seed, |_, _| Ok(())).unwrap();
            let (_, m, _) = evaluate_model(&model, &prepared.eval_pairs, None).unwrap();
            aucs.push(((m.auc * 1000.0).round()) / 1000.0);
        }
        let mut sorted = aucs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!("{strategy:?}: aucs {aucs:?} median {}", sorted[2]);
    }
}
