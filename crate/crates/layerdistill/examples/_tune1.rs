use layerdistill::distiller::{distill, Distiller};
use layerdistill::encoder::{build_encoder, EncoderConfig};
use layerdistill::features::{Corpus, SynthCorpusSpec, SynthParams};
use layerdistill::losses::{DistillConfig, LossKind, ProjectionKind};
use layerdistill::encoder::TapKind;
use layerdistill::optim::Schedule;
use layerdistill::probe::{extract_frozen, train_linear_probe_at};
use layerdistill::rng::SeedTree;
use std::time::Instant;

fn teacher_cfg() -> EncoderConfig {
    EncoderConfig { layers: 4, dim: 32, ffn: 64, heads: 2, conv_kernel: 7, input_dim: 160, preset_name: None }
}
fn student_cfg() -> EncoderConfig {
    EncoderConfig { layers: 2, dim: 32, ffn: 64, heads: 2, conv_kernel: 7, input_dim: 160, preset_name: None }
}
fn corpus_spec() -> SynthCorpusSpec {
    SynthCorpusSpec { utterances: 48, frames_min: 120, frames_max: 200, dim: 80, classes: 4, stack_factor: 2, params: SynthParams::default() }
}
fn cfg(steps: u64) -> DistillConfig {
    DistillConfig {
        loss_kind: LossKind::Contrastive, temperature: 0.1, distractors: 100,
        tap_kind: TapKind::Ffn2, target_instance_norm: false,
        projection: ProjectionKind::LinearPerLayer, normalized: true,
        mask_prob: 0.065, mask_span: 10,
        schedule: Schedule { peak_lr: 2e-3, warmup_steps: 50, total_steps: steps },
        adam: Default::default(), clip_norm: Some(10.0),
        batch_utterances: 4, collapse_every: 10, checkpoint_every: 1000,
        init_from_teacher: layerdistill::encoder::TeacherInit::Random,
    }
}

fn main() {
    let seed = 1u64;
    let tree = SeedTree::new(seed);
    let corpus = Corpus::synthesize(&corpus_spec(), &tree.subtree("corpus", &[])).unwrap();
    let teacher = build_encoder::<f32>(&teacher_cfg(), tree.derive("teacher", &[])).unwrap();
    let student = build_encoder::<f32>(&student_cfg(), tree.derive("student", &[])).unwrap();

    let t0 = Instant::now();
    let mut d = Distiller::new(cfg(500), &teacher, student, &corpus, seed).unwrap();
    let align0 = d.alignment_per_layer(8).unwrap();
    for _ in 0..50 { d.step().unwrap(); }
    let dt = t0.elapsed().as_secs_f64();
    println!("50 steps in {dt:.1}s -> 500 steps ~{:.0}s", dt * 10.0);
    let m = &d.state().metrics;
    println!("loss first 10 mean: {:.4}, last 10 mean: {:.4}",
        m[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0,
        m[m.len()-10..].iter().map(|r| r.loss).sum::<f64>() / 10.0);
    let align50 = d.alignment_per_layer(8).unwrap();
    println!("alignment step0 {align0:?} -> step50 {align50:?}");
    let collapse: Vec<f64> = m.iter().filter_map(|r| r.collapse).collect();
    println!("collapse trace: {collapse:?}");

    // Probe baseline vs raw input features. How separable is the data?
    let rand_student = build_encoder::<f32>(&student_cfg(), tree.derive("student", &[])).unwrap();
    let reps = extract_frozen(&rand_student, &corpus, 2).unwrap();
    let pr = train_linear_probe_at(&reps, 7, 2).unwrap();
    println!("random-student probe acc: {:.3}", pr.accuracy);
}
