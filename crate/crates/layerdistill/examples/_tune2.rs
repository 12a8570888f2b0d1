use layerdistill::distiller::distill;
use layerdistill::encoder::{build_encoder, EncoderConfig, TapKind};
use layerdistill::features::{Corpus, SynthCorpusSpec, SynthParams};
use layerdistill::losses::{DistillConfig, LossKind, ProjectionKind};
use layerdistill::optim::Schedule;
use layerdistill::probe::{extract_frozen, train_linear_probe_at, ProbeUtterance};
use layerdistill::rng::SeedTree;
use layerdistill::autodiff::Tensor;
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

fn raw_probe(corpus: &Corpus, seed: u64) -> f64 {
    let data: Vec<ProbeUtterance> = corpus.items.iter().map(|it| ProbeUtterance {
        reps: Tensor::matrix(it.seq.frames, it.seq.dim, it.seq.values().to_vec()).unwrap(),
        labels: it.labels.clone().unwrap(),
    }).collect();
    train_linear_probe_at(&data, seed, 0).unwrap().accuracy
}

fn main() {
    let t0 = Instant::now();
    let mut margins = Vec::new();
    for seed in [1u64, 2, 3] {
        let tree = SeedTree::new(seed);
        let corpus = Corpus::synthesize(&corpus_spec(), &tree.subtree("corpus", &[])).unwrap();
        let teacher = build_encoder::<f32>(&teacher_cfg(), tree.derive("teacher", &[])).unwrap();
        let student = build_encoder::<f32>(&student_cfg(), tree.derive("student", &[])).unwrap();
        let rand_student = student.clone();
        let state = distill(&cfg(500), &teacher, student, &corpus, 500, seed, None).unwrap();
        let m = &state.metrics;
        let first50: f64 = m[..50].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        let last50: f64 = m[450..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        let max_collapse = m.iter().filter_map(|r| r.collapse).fold(0.0f64, f64::max);

        let probe_seed = 100 + seed;
        let distilled = train_linear_probe_at(&extract_frozen(&state.student, &corpus, 2).unwrap(), probe_seed, 2).unwrap().accuracy;
        let random = train_linear_probe_at(&extract_frozen(&rand_student, &corpus, 2).unwrap(), probe_seed, 2).unwrap().accuracy;
        let raw = raw_probe(&corpus, probe_seed);
        let teacher_probe = train_linear_probe_at(&extract_frozen(&teacher, &corpus, 4).unwrap(), probe_seed, 4).unwrap().accuracy;
        println!("seed {seed}: loss {first50:.3}->{last50:.3} maxcollapse {max_collapse:.3} | probe distilled {distilled:.3} random {random:.3} raw {raw:.3} teacher {teacher_probe:.3}");
        margins.push(distilled - random);
    }
    let mean_margin = margins.iter().sum::<f64>() / 3.0;
    println!("mean probe margin: {:.3} (need >= 0.05)", mean_margin);
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
