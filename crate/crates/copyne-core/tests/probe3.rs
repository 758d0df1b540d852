use copyne_core::autodiff::Graph;
use copyne_core::checkpoint;
use copyne_core::corpus::load_utterances;
use copyne_core::dict::{build_copy_targets, load_dict};
use copyne_core::vocab::BOS;
use std::path::Path;

#[test]
#[ignore]
fn copy_mass_probe() {
    let model = checkpoint::load(Path::new("/tmp/tune8/copy30/checkpoint.best.cpne")).unwrap();
    let utts = load_utterances(Path::new("/tmp/tune8/corpus/train.tsv")).unwrap();
    let (dict, _) = load_dict(Path::new("/tmp/tune8/corpus/dict-train.txt"), &model.vocab).unwrap();
    let mut rows_out: Vec<(f64, f64, f64, bool)> = Vec::new(); // (p_null, p_correct, p_best_other, argmax_ok)
    for u in utts.iter().take(100) {
        let tokens = model.vocab.encode(&u.transcript).unwrap();
        let sigma = build_copy_targets(&tokens, &dict).sigma;
        let frames = model.frames_to_tensor(&u.frames).unwrap();
        let mut g = Graph::new(&model.params);
        let h = model.encode_audio(&mut g, &frames).unwrap();
        let mut history = vec![BOS];
        history.extend_from_slice(&tokens);
        let d = model.decoder_states(&mut g, &history, h).unwrap();
        let z = model.encode_entities(&mut g, &dict).unwrap();
        let (_, pc) = model.copy_attention(&mut g, d, z).unwrap();
        let v = g.value(pc);
        for (step, &sig) in sigma.iter().enumerate() {
            if sig == 0 { continue; }
            let row = v.row_slice(step);
            let p_null = row[0];
            let p_corr = row[sig];
            let mut p_other = 0.0f64;
            let mut best_other = 0usize;
            for (e, &p) in row.iter().enumerate().skip(1) {
                if e != sig && p > p_other { p_other = p; best_other = e; }
            }
            let ok = p_corr > p_other;
            let _ = best_other;
            rows_out.push((p_null, p_corr, p_other, ok));
        }
    }
    let n = rows_out.len() as f64;
    let mean = |f: &dyn Fn(&(f64,f64,f64,bool)) -> f64| rows_out.iter().map(|r| f(r)).sum::<f64>() / n;
    eprintln!("copy points: {}", rows_out.len());
    eprintln!("mean P(null) {:.3}  mean P(correct) {:.3}  mean P(best other) {:.3}", mean(&|r| r.0), mean(&|r| r.1), mean(&|r| r.2));
    let ok_rows: Vec<_> = rows_out.iter().filter(|r| r.3).collect();
    let k = ok_rows.len() as f64;
    eprintln!("argmax-correct points: {} — mean P(null) {:.3} mean P(correct) {:.3}", ok_rows.len(),
        ok_rows.iter().map(|r| r.0).sum::<f64>()/k, ok_rows.iter().map(|r| r.1).sum::<f64>()/k);
    // relative confidence correct vs null only
    let m2 = rows_out.iter().filter(|r| r.1 / (r.1 + r.0) > 0.9).count();
    eprintln!("frac with P(correct)/(P(correct)+P(null)) > 0.9: {:.3}", m2 as f64 / n);
}
