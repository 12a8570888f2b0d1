use layerdistill::distiller::distill;
use layerdistill::encoder::{build_encoder, EncoderConfig, TapKind};
use layerdistill::features::{Corpus, SynthCorpusSpec, SynthParams};
use layerdistill::losses::{DistillConfig, LossKind, ProjectionKind};
use layerdistill::optim::Schedule;
use layerdistill::probe::{extract_frozen, train_linear_probe_at, ProbeUtterance};
use layerdistill::rng::SeedTree;
use layerdistill::autodiff::Tensor;

fn teacher_cfg() -> EncoderConfig {
    EncoderConfig { layers: 4, dim: 32, ffn: 64, heads: 2, conv_kernel: 7, input_dim: 160, preset_name: None }
}
fn student_cfg() -> EncoderConfig {
    EncoderConfig { layers: 2, dim: 32, ffn: 64, heads: 2, conv_kernel: 7, input_dim: 160, preset_name: None }
}

fn run(noise: f64, smooth: usize, sep: f64, lr: f64, batch: usize, probe_layer: usize) {
    let mut margins = Vec::new();
    let mut d_accs = Vec::new();
    let mut r_accs = Vec::new();
    let mut raw_accs = Vec::new();
    for seed in [1u64, 2, 3] {
        let spec = SynthCorpusSpec {
            utterances: 48, frames_min: 120, frames_max: 200, dim: 80, classes: 4,
            stack_factor: 2,
            params: SynthParams { class_sep: sep, noise, smooth_window: smooth, segment_min: 30, segment_max: 80, rate_hz: 100 },
        };
        let cfg = DistillConfig {
            loss_kind: LossKind::Contrastive, temperature: 0.1, distractors: 100,
            tap_kind: TapKind::Ffn2, target_instance_norm: false,
            projection: ProjectionKind::LinearPerLayer, normalized: true,
            mask_prob: 0.065, mask_span: 10,
            schedule: Schedule { peak_lr: lr, warmup_steps: 50, total_steps: 500 },
            adam: Default::default(), clip_norm: Some(10.0),
            batch_utterances: batch, collapse_every: 50, checkpoint_every: 1000,
            init_from_teacher: layerdistill::encoder::TeacherInit::Random,
        };
        let tree = SeedTree::new(seed);
        let corpus = Corpus::synthesize(&spec, &tree.subtree("corpus", &[])).unwrap();
        let teacher = build_encoder::<f32>(&teacher_cfg(), tree.derive("teacher", &[])).unwrap();
        let student = build_encoder::<f32>(&student_cfg(), tree.derive("student", &[])).unwrap();
        let rand_student = student.clone();
        let state = distill(&cfg, &teacher, student, &corpus, 500, seed, None).unwrap();
        let ps = 100 + seed;
        let d = train_linear_probe_at(&extract_frozen(&state.student, &corpus, probe_layer).unwrap(), ps, probe_layer).unwrap().accuracy;
        let r = train_linear_probe_at(&extract_frozen(&rand_student, &corpus, probe_layer).unwrap(), ps, probe_layer).unwrap().accuracy;
        let raw: Vec<ProbeUtterance> = corpus.items.iter().map(|it| ProbeUtterance {
            reps: Tensor::matrix(it.seq.frames, it.seq.dim, it.seq.values().to_vec()).unwrap(),
            labels: it.labels.clone().unwrap(),
        }).collect();
        let raw_acc = train_linear_probe_at(&raw, ps, 0).unwrap().accuracy;
        margins.push(d - r);
        d_accs.push(d); r_accs.push(r); raw_accs.push(raw_acc);
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    println!("noise={noise} smooth={smooth} sep={sep} lr={lr} batch={batch} layer={probe_layer}: margin={:+.3} (d={:.3} r={:.3} raw={:.3}) per-seed {:?}",
        mean(&margins), mean(&d_accs), mean(&r_accs), mean(&raw_accs),
        margins.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>());
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let idx: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    match idx {
        0 => {
            run(3.0, 3, 0.3, 2e-3, 4, 2);
            run(3.0, 3, 0.3, 2e-3, 4, 1);
            run(4.0, 3, 0.3, 2e-3, 4, 2);
            run(4.0, 3, 0.3, 2e-3, 4, 1);
        }
        1 => {
            run(3.0, 1, 0.3, 2e-3, 4, 2);
            run(3.0, 1, 0.3, 2e-3, 4, 1);
            run(5.0, 3, 0.4, 2e-3, 4, 2);
            run(5.0, 3, 0.4, 2e-3, 4, 1);
        }
        _ => {}
    }
}
