// Scratch probe: per-batch sign consistency of the t-row logit gradient.
use diffquant::calibration::{build_calibration_round, CalibState, Strategy};
use diffquant::diffusion::make_schedule;
use diffquant::groupsearch::{search_objective, GroupSearchState, SearchGraph};
use diffquant::harness::load_checkpoint;
use diffquant::numerics::rng::stream_rng;
use diffquant::numerics::{Graph, Tensor};
use diffquant::quantizer::{quantize_weights, Bitwidth};

fn main() {
    let fp = load_checkpoint(std::path::Path::new("/tmp/dq/fp.json")).unwrap();
    let teacher = fp.params().unwrap();
    let sched = make_schedule(100, 1e-3, 0.2).unwrap();
    let (student, _) = quantize_weights(&teacher, Bitwidth::Bits(8), 2.4).unwrap();
    let mut rng = stream_rng(7, 3);
    let t_probe = 5usize;
    let mut grad_sum = vec![0.0f64; 8];
    let mut sign_sum = vec![0.0f64; 8];
    let n_batches = 12;
    for _ in 0..n_batches {
        let mut calib = CalibState::new(100, 1.5, Strategy::Active);
        build_calibration_round(&teacher, &sched, t_probe, 64, &mut calib, &mut rng).unwrap();
        let state = GroupSearchState::new(100, 8, 0.8, Bitwidth::Bits(8), vec![1, 2, 3], &[0.1, 0.1, 0.1]).unwrap();
        let d = 2;
        let mut x = Vec::new();
        let mut ts = Vec::new();
        let mut tg = Vec::new();
        for s in &calib.samples {
            x.extend_from_slice(&s.x);
            tg.extend_from_slice(&s.teacher_eps);
            ts.push(s.t);
        }
        let x = Tensor::new(vec![64, d], x).unwrap();
        let tg = Tensor::new(vec![64, d], tg).unwrap();
        let graph = Graph::new();
        let sg = SearchGraph::build(&graph, &state);
        let obj = search_objective(&graph, &sg, &state, &teacher, &student, &x, &ts, Some(&tg)).unwrap();
        let grads = graph.backward(obj.j).unwrap();
        let gl = grads.get(sg.logits).unwrap();
        let row = &gl.data()[(t_probe - 1) * 8..t_probe * 8];
        for g in 0..8 {
            grad_sum[g] += row[g];
            sign_sum[g] += row[g].signum();
        }
    }
    println!("mean grad per group: {:?}", grad_sum.iter().map(|v| format!("{:.2e}", v / n_batches as f64)).collect::<Vec<_>>());
    println!("mean sign per group: {:?}", sign_sum.iter().map(|v| format!("{:+.2}", v / n_batches as f64)).collect::<Vec<_>>());
}
