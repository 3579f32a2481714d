use regionlab::corpus::{build_language_suite, generate as gen, unigram_baseline_ppl};
use regionlab::model::ModelConfig;
use regionlab::trainer::*;

#[test]
fn learnability_probe() {
    let config = ModelConfig::desk();
    let suite = build_language_suite(0);
    let train: Vec<_> = suite[..6].iter().map(|s| gen(s, 20000, 64, 1000 + 7)).collect();
    let refs: Vec<&_> = train.iter().collect();
    let evals: Vec<_> = suite.iter().map(|s| gen(s, 200, 64, 2000 + 13)).collect();

    let t0 = std::time::Instant::now();
    let cfg = TrainConfig::pretrain(1200, 0);
    let out = pretrain(&config, &cfg, &refs, &[]).unwrap();
    println!("1200 steps in {:.0}s", t0.elapsed().as_secs_f64());
    for (i, s) in suite.iter().enumerate() {
        let ppl = eval_ppl(&out.store, &evals[i]).unwrap();
        let uni = unigram_baseline_ppl(&evals[i]);
        println!("{:10} ppl {:8.2}  unigram {:6.2}  ratio {:.2}", s.id, ppl, uni, ppl / uni);
    }
    let losses = &out.record.train_loss;
    println!("loss: start {:.3} mid {:.3} end {:.3}", losses[0], losses[losses.len()/2], losses[losses.len()-1]);
}
