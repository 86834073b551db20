//! Times one forward/backward pass of the main and pretext paths.

use std::time::Instant;

use ssda_core::data::Task;
use ssda_core::losses::{classification_loss, pretext_loss, segmentation_loss, Reduction};
use ssda_core::data::LabelMap;
use ssda_core::model::{build_networks, ArchitectureSpec, NetSet};
use ssda_core::nn::{Mode, Tensor};

fn main() {
    let width: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let ch = if width.len() == 4 { [width[0], width[1], width[2], width[3]] } else { [32, 64, 128, 128] };
    for (task, size, batch) in [(Task::Classification, 32, 32), (Task::Segmentation, 48, 8)] {
        let arch = ArchitectureSpec { encoder_channels: ch, ..ArchitectureSpec::new(task, 4, 4) };
        let mut nets = build_networks::<f32>(&arch, 0).unwrap();
        let x = Tensor::<f32>::from_vec(3, batch, size, size, vec![0.3; 3 * batch * size * size]).unwrap();
        let reps = 5;
        let t = Instant::now();
        for _ in 0..reps {
            let y = nets.forward_main(&x, Mode::Train, true).unwrap();
            let d = match task {
                Task::Classification => classification_loss(&y, &vec![1; batch]).unwrap().1,
                Task::Segmentation => {
                    let m = LabelMap { height: size, width: size, data: vec![1; size * size] };
                    segmentation_loss(&y, &vec![&m; batch], Reduction::Mean).unwrap().1
                }
            };
            nets.backward_main(&d, NetSet::ALL).unwrap();
        }
        let main_ms = t.elapsed().as_secs_f64() * 1e3 / reps as f64;
        let p = Tensor::<f32>::from_vec(3, 32, 16, 16, vec![0.3; 3 * 32 * 256]).unwrap();
        let t = Instant::now();
        for _ in 0..reps {
            let y = nets.forward_pretext(&p, Mode::Train, true).unwrap();
            let d = pretext_loss(&y, &[0usize, 1, 2, 3].repeat(8), 4).unwrap().1;
            nets.backward_pretext(&d, NetSet::ALL).unwrap();
        }
        let pre_ms = t.elapsed().as_secs_f64() * 1e3 / reps as f64;
        println!("{task:?}: main {main_ms:.1} ms/step (batch {batch}), pretext {pre_ms:.1} ms/step (32 crops 16px)");
    }
}
