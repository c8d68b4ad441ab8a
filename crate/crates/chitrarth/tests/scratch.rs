use chitrarth::data::{synth, ImageRef};
use chitrarth::model::{answer, ChitrarthModel, ModelConfig};
use chitrarth::trainer::{run_stage, StageConfig};

#[test]
fn calibrate_overfit() {
    let t0 = std::time::Instant::now();
    let config = ModelConfig::desk_default();  // 48/8 encoder d64 2L, mlp2, lm d64 2L 4H ctx512
    let mut model = ChitrarthModel::init(config, 9).unwrap();

    let items = synth::synth_corpus(32, 4242);
    let data: Vec<_> = items
        .iter()
        .map(|i| synth::caption_to_single_turn(ImageRef::Spec(i.spec), &i.caption, "en", &i.id).unwrap())
        .collect();

    let mut s1 = StageConfig::stage1();
    s1.batch_size = 8; s1.accumulation_steps = 1; s1.epochs = 25; s1.peak_lr = 2e-3; s1.seed = 9;
    let log1 = run_stage(&mut model, &data, &s1).unwrap();
    eprintln!("stage1: {} steps, loss {:?} ({:.0?})", log1.metrics.len(), log1.final_loss(), t0.elapsed());

    let mut total_steps = log1.metrics.len();
    let mut chunk = 0;
    loop {
        chunk += 1;
        let mut s2 = StageConfig::stage2();
        s2.batch_size = 8; s2.accumulation_steps = 1; s2.epochs = 25; s2.peak_lr = 1e-3; s2.seed = 9 + chunk;
        let log2 = run_stage(&mut model, &data, &s2).unwrap();
        total_steps += log2.metrics.len();
        let loss = log2.final_loss().unwrap();
        eprintln!("stage2 chunk {chunk}: total {total_steps} steps, loss {loss:.4} ({:.0?})", t0.elapsed());
        if loss < 0.1 || total_steps >= 1900 { break; }
    }

    let mut exact = 0;
    for (item, sample) in items.iter().zip(&data) {
        let pred = answer(&model, Some(&ImageRef::Spec(item.spec)), &sample.turns[0].text, 64).unwrap();
        if pred == item.caption { exact += 1; }
    }
    eprintln!("exact reproductions: {exact}/32 at {total_steps} steps ({:.0?})", t0.elapsed());
}
