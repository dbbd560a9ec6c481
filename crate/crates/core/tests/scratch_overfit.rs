use pivotnmt::corpus::{MultiRow, MultiWayCorpus, Sentence};
use pivotnmt::nmt::{
    loss_and_gradients, sgd_step, Hyperparams, MsnmtModel, TrainingBatch, Vocabulary,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn single_batch_overfit() {
    let vocab = Vocabulary::from_symbols((0..8).map(|i| format!("t{i}")));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut corpus = MultiWayCorpus::new(vec!["a".to_string()], "t".to_string());
    for _ in 0..16 {
        let len = rng.random_range(1..=8);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(4..12u32)).collect();
        let text =
            ids.iter().map(|&i| vocab.symbol(i).unwrap().to_string()).collect::<Vec<_>>().join(" ");
        corpus
            .push_row(MultiRow {
                sources: vec![Some(Sentence::new(text.clone()).unwrap())],
                target: Sentence::new(text).unwrap(),
            })
            .unwrap();
    }
    let hp = Hyperparams {
        emb_dim: 16,
        hidden_dim: 32,
        enc_layers: 1,
        vocab_size_src: vec![12],
        vocab_size_tgt: 12,
        learning_rate: 1.0,
        epochs: 1,
        grad_clip_norm: 5.0,
        seed: 7,
    };
    let rows: Vec<&MultiRow> = corpus.rows().iter().collect();
    let batch = TrainingBatch::from_rows(&rows, &[vocab.clone()], &vocab).unwrap();
    for lr in [2.0, 4.0, 8.0, 16.0, 32.0] {
        let mut model = MsnmtModel::init(hp.clone(), 1).unwrap();
        let mut final_loss = 0.0;
        for _ in 0..200 {
            let (loss, grads) = loss_and_gradients(&model, &batch).unwrap();
            final_loss = loss;
            sgd_step(&mut model, &grads, lr, 5.0);
        }
        println!("lr {lr:5}  loss after 200 steps: {final_loss:.4}");
    }
}
