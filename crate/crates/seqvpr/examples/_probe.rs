// scratch probe: desk-scale training dynamics
use seqvpr::autodiff::Precision;
use seqvpr::dataset::{self, DatasetConfig, GroundTruth};
use seqvpr::evaluation::{recall_at_k, RetrievalIndex};
use seqvpr::model::{Model, ModelConfig};
use seqvpr::recurrent::Variant;
use seqvpr::training::{train, TripletConfig};
use std::collections::BTreeSet;
use std::time::Instant;

fn eval_r(model: &Model, ds: &seqvpr::dataset::SyntheticDataset, gt: &GroundTruth, k: usize) -> f64 {
    let feats = |s: &seqvpr::dataset::SequenceSample| match &s.data {
        seqvpr::dataset::SampleData::Features(f) => f.clone(),
        _ => panic!(),
    };
    let db: Vec<_> = ds.database.iter().map(|s| model.descriptor(&feats(s), Precision::F32).unwrap()).collect();
    let qs: Vec<_> = ds.queries_val.iter().map(|s| model.descriptor(&feats(s), Precision::F32).unwrap()).collect();
    let positives: Vec<BTreeSet<usize>> = ds.queries_val.iter().map(|q| dataset::positives_for(q, &ds.database, gt).unwrap()).collect();
    let index = RetrievalIndex::build(db).unwrap();
    recall_at_k(&qs, &positives, &index, k, false).unwrap().value
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(30);
    let variant = match args.get(4).map(|s| s.as_str()).unwrap_or("recurrent_dte") {
        "dte_only" => Variant::DteOnly,
        _ => Variant::RecurrentDte,
    };
    let strength: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1.0);

    let dcfg = DatasetConfig { n_places: 50, seq_len: 5, noise, condition_strength: strength, ..DatasetConfig::default() };
    let gt = GroundTruth::Frame { tolerance: 1 };
    let mut mcfg = ModelConfig::desk_default();
    mcfg.variant = variant;
    let tcfg = TripletConfig { lr, max_epochs: epochs, ..TripletConfig::default() };

    for seed in [0u64, 1, 2] {
        let t0 = Instant::now();
        let ds = dataset::generate(seed, &dcfg).unwrap();
        let mut model = Model::init(mcfg, seed).unwrap();
        let untrained_r1 = eval_r(&model, &ds, &gt, 1);
        let res = train(&mut model, &ds, &gt, &tcfg, seed).unwrap();
        let trained_r1 = eval_r(&model, &ds, &gt, 1);
        let trained_r5 = eval_r(&model, &ds, &gt, 5);
        println!(
            "seed {seed} variant {:?}: untrained R@1 {untrained_r1:.3} -> trained R@1 {trained_r1:.3} R@5 {trained_r5:.3} best@{} {:?} [{} epochs, {:.1}s]",
            variant, res.best_epoch, res.outcome, res.log.len(), t0.elapsed().as_secs_f64()
        );
        for l in res.log.iter().take(6) {
            println!("   epoch {:2} loss {:.4} valR5 {:.3} ({} ms)", l.epoch, l.mean_loss, l.val_recall_at_5, l.wall_ms);
        }
    }
}
