use std::time::Instant;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repsnet_core::groundtruth::{synth_sample, SynthSpec, SynthSample};
use repsnet_core::losses::{IsoheightConfig, LossWeights};
use repsnet_core::metrics::mpq;
use repsnet_core::network::{
    train_epoch, validate_loss, AdamOpt, PlateauScheduler, RepSNet, RepSNetConfig, TrainSettings,
};
use repsnet_core::postprocess::{segment, SegmentConfig};
use repsnet_core::network::build_batch;

fn eval_pq(net: &RepSNet, samples: &[SynthSample]) -> (f64, f64) {
    let mut pq_sum = 0.0;
    let mut mpq_sum = 0.0;
    for s in samples {
        let (x, _) = build_batch(&[s], 5).unwrap();
        let out = net.forward(&x).unwrap();
        let (pred, classes) = segment(&out.np_logits, &out.nt_logits, &out.bd, &SegmentConfig::default()).unwrap();
        let gt_classes: Vec<u8> = {
            let mut v = vec![0u8; s.inst.max_label() as usize];
            for (i, &l) in s.inst.labels.iter().enumerate() {
                if l > 0 { v[l as usize - 1] = s.types.types[i]; }
            }
            v
        };
        let pred_classes: Vec<u8> = classes.iter().map(|c| c.class).collect();
        let r = mpq(&s.inst, &gt_classes, &pred, &pred_classes).unwrap();
        pq_sum += r.pq;
        mpq_sum += r.mpq;
    }
    (pq_sum / samples.len() as f64, mpq_sum / samples.len() as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let t0 = Instant::now();
    let spec = SynthSpec::default();
    let samples: Vec<SynthSample> = (0..200).map(|i| synth_sample(i, &spec).unwrap()).collect();
    let train = &samples[..140];
    let val = &samples[140..160];
    let test = &samples[160..];
    println!("synth done at {:?}", t0.elapsed());

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut net = RepSNet::new(RepSNetConfig::default(), &mut rng).unwrap();
    let mut opt = AdamOpt::new(lr);
    let weights = LossWeights::default();
    let iso = IsoheightConfig::default();
    let settings = TrainSettings { batch_size: 4, augment: true, tau: 5 };
    let mut sched = PlateauScheduler::new(5, 0.5, 1e-7);

    for epoch in 0..epochs {
        let te = Instant::now();
        let stats = train_epoch(&mut net, train, &mut opt, &weights, &iso, &settings, &mut rng).unwrap();
        let vl = validate_loss(&net, val, &weights, &iso, 5).unwrap();
        opt.lr = sched.observe(vl.total, opt.lr);
        let (pq, mpqv) = eval_pq(&net, test);
        println!(
            "epoch {epoch}: train {:.4} (np {:.3} nt {:.3} bd {:.3} nb {:.3}) val {:.4} | test PQ {:.4} mPQ {:.4} | {:.1}s epoch, {:.1}s total",
            stats.losses.total, stats.losses.np, stats.losses.nt, stats.losses.bd, stats.losses.nb,
            vl.total, pq, mpqv, te.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64()
        );
    }
}
