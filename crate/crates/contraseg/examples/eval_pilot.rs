use contraseg::boundary::ClassMap;
use contraseg::pipeline::{evaluate_miou, export_pseudo_masks, read_dataset};
use contraseg::encoder::{EncoderConfig, EncoderParams};

fn miou(params: &EncoderParams, scenes: &[contraseg::pipeline::SyntheticScene], scales: &[f64]) -> f64 {
    let masks = export_pseudo_masks(params, scenes, scales).unwrap();
    let preds: Vec<ClassMap> = masks.iter().map(|m| m.to_class_map()).collect();
    let gts: Vec<ClassMap> = scenes.iter().map(|s| s.gt_mask.clone()).collect();
    evaluate_miou(&preds, &gts, 5).unwrap().mean
}

fn main() {
    let scenes = read_dataset(std::path::Path::new("/tmp/p6/data/train")).unwrap();
    let cfg = EncoderConfig::default();
    for name in ["enc_full", "enc_hcl"] {
        let p = EncoderParams::load(&cfg, std::path::Path::new(&format!("/tmp/p6/{name}"))).unwrap();
        let single = miou(&p, &scenes, &[1.0]);
        let multi = miou(&p, &scenes, &[0.5, 1.0, 1.5, 2.0]);
        println!("{name}: single {:.4} multi {:.4}", single, multi);
    }
}
