// scratch probe: copy-only learnability at scale
use flexilora::model::*;
use flexilora::numcore::Precision;
use flexilora::tasks::generate_copy_samples;

fn main() {
    let corpus = generate_copy_samples(2000, 11);
    let tok = Tokenizer::build(corpus.iter().map(|s| s.prompt.as_str())).unwrap();
    for (lr, steps, bs) in [(1e-2, 1500usize, 32usize), (3e-3, 3000, 32)] {
        let cfg = ModelConfig {
            vocab_size: tok.vocab_size(),
            d_model: 64, n_layers: 4, n_heads: 4, d_ff: 128, max_seq_len: 24,
        };
        let opts = PretrainOpts { steps, batch_size: bs, lr, seed: 1, precision: Precision::F32 };
        let t0 = std::time::Instant::now();
        let out = pretrain_base(cfg, &corpus, &tok, &opts).unwrap();
        let acc = next_token_accuracy(&out.weights, &corpus[..150], &tok, Supervision::AnswerOnly, Precision::F32).unwrap();
        let decoded = greedy_decode(&out.weights, &tok, None, "~q7xp=?", 8, Precision::F32).unwrap();
        println!("lr={lr} steps={steps} bs={bs}: loss {:.3}->{:.3} answer-acc {:.3} decode={:?} [{:.0}s]",
            out.loss_trace[0], out.loss_trace.last().unwrap(), acc, decoded, t0.elapsed().as_secs_f64());
    }
}
