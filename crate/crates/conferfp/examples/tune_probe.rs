// temporary probe
use conferfp::data::{split_dataset, Dataset};
use conferfp::nn::Arch;
use conferfp::zoo::*;

fn main() {
    let ds = Dataset::load("synth10", None).unwrap();
    let split = split_dataset(&ds, 0, 0.5).unwrap();
    for (epochs, lr) in [(6usize, 0.02f32), (10, 0.02), (10, 0.05), (15, 0.02)] {
        let cfg = TrainConfig { epochs, batch_size: 64, lr, momentum: 0.9 };
        let t0 = std::time::Instant::now();
        let (rec, victim) = train_victim(&ds, &split, Arch::TinyCnn, &cfg, 0, "v").unwrap();
        let tv = t0.elapsed().as_secs_f32();
        let t0 = std::time::Instant::now();
        let (erec, _) = train_positive_extraction(&victim, "v", &ds, &split, Arch::TinyCnn, &cfg, 11, "p", None).unwrap();
        let te = t0.elapsed().as_secs_f32();
        let agree = erec.metadata["victim_agreement"].as_f64().unwrap();
        let (nrec, _) = train_negative(&ds, &split, Arch::SmallResnet20, &cfg, 21, "n").unwrap();
        println!("epochs={epochs} lr={lr}: victim_acc={:.3} ({tv:.1}s) extract_acc={:.3} agree={agree:.3} ({te:.1}s) neg_resnet_acc={:.3}", rec.test_accuracy, erec.test_accuracy, nrec.test_accuracy);
    }
}
