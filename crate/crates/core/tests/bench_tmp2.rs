use regionlab::corpus::{build_language_suite, generate};
use regionlab::model::{loss_on_tape, ModelConfig, ParameterStore};
use regionlab::tensor::Tape;

#[test]
fn bench_parts() {
    let config = ModelConfig::desk();
    let suite = build_language_suite(0);
    let corpus = generate(&suite[0], 64, 64, 1);
    let store = ParameterStore::init(&config).unwrap();

    // forward only
    let t0 = std::time::Instant::now();
    for seq in &corpus.sequences {
        let mut tape = Tape::<f32>::new();
        let _ = loss_on_tape(&mut tape, &store, seq).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / 64.0;

    // forward + backward
    let t1 = std::time::Instant::now();
    for seq in &corpus.sequences {
        let mut tape = Tape::<f32>::new();
        let (loss, _) = loss_on_tape(&mut tape, &store, seq).unwrap();
        tape.backward(loss).unwrap();
    }
    let both = t1.elapsed().as_secs_f64() / 64.0;

    // raw matmul throughput [63,64]x[64,512]
    let a = vec![0.5f32; 63 * 64];
    let b = vec![0.25f32; 64 * 512];
    let mut tape = Tape::<f32>::new();
    let ta = tape.leaf(&[63, 64], a).unwrap();
    let tb = tape.leaf(&[64, 512], b).unwrap();
    let t2 = std::time::Instant::now();
    for _ in 0..200 {
        let _ = tape.matmul(ta, tb).unwrap();
    }
    let mm = t2.elapsed().as_secs_f64() / 200.0;
    let gf = (63.0 * 64.0 * 512.0 * 2.0) / mm / 1e9;
    println!("fwd={:.2}ms fwd+bwd={:.2}ms  matmul63x64x512={:.3}ms ({gf:.1} GF/s)", fwd*1e3, both*1e3, mm*1e3);
}
