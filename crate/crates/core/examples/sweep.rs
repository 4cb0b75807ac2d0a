//! Train one variant on the synthetic overfit scene and print held-out
//! metrics as it goes.
//!
//! ```text
//! cargo run --release --example sweep -- full eval_every=500 steps=4000 'renderer.depth=4'
//! ```
//!
//! The first argument names the variant; `eval_every=N` sets the evaluation
//! interval; every other argument is a TOML line applied to the config.

use std::time::Instant;

use anr_core::avatar::Avatar;
use anr_core::metrics::evaluate;
use anr_core::scene::{generate_sequence, SceneConfig};
use anr_core::training::{IdentityData, TrainConfig, Trainer, Variant};

fn main() -> anr_core::Result<()> {
    anr_core::parallel::init_from_env();
    let mut args = std::env::args().skip(1);
    let variant = match args.next().as_deref().unwrap_or("full") {
        "full" => Variant::Full,
        "no_split" => Variant::TwoStageNoSplit,
        "single" => Variant::SingleStage,
        "pixel" => Variant::PixelOnly,
        "dnr" => Variant::Dnr,
        other => panic!("unknown variant {other}"),
    };
    let mut every = 500u64;
    let mut toml = String::new();
    let mut scene = SceneConfig::default();
    let mut data_seed = 11;
    for a in args {
        if let Some(v) = a.strip_prefix("eval_every=") {
            every = v.parse().expect("eval_every");
        } else if let Some(v) = a.strip_prefix("misalignment=") {
            scene.misalignment = v.parse().expect("misalignment");
        } else if let Some(v) = a.strip_prefix("overhang=") {
            scene.overhang = v.parse().expect("overhang");
        } else if let Some(v) = a.strip_prefix("data_seed=") {
            data_seed = v.parse().expect("data_seed");
        } else {
            toml.push_str(&a);
            toml.push('\n');
        }
    }
    let base = TrainConfig::from_text(&toml)?;
    let config = base.with_variant(variant);
    let seq = generate_sequence(&scene, data_seed)?;
    let test: Vec<usize> = seq.test_indices().step_by(4).collect();
    let seen: Vec<usize> = seq.train_indices().step_by(20).collect();
    let data = IdentityData::new("a", seq.clone())?;
    let mut t = Trainer::new(config, vec![data])?;
    println!("params {} keyframes {:?}", t.renderer.param_count(), t.keyframes[0].frame_indices);
    let start = Instant::now();
    let mut acc = 0.0;
    let mut n = 0;
    while t.step < t.config.steps {
        let r = t.step()?;
        acc += r.total;
        n += 1;
        if t.step % every == 0 || t.step == t.config.steps {
            let avatar = Avatar::from_checkpoint(&t.to_checkpoint())?;
            let rep = evaluate(&avatar, "a", &seq, &test)?;
            let tr = evaluate(&avatar, "a", &seq, &seen)?;
            println!(
                "step {:6} {:7.1}s loss {:.4} | l1 {:.4} ssim {:.4} feat {:.4} iou {:.4} band {:.4} | train l1 {:.4} ssim {:.4}",
                t.step,
                start.elapsed().as_secs_f64(),
                acc / n as f64,
                rep.aggregate.masked_l1,
                rep.aggregate.ssim,
                rep.aggregate.feature_distance,
                rep.aggregate.mask_iou,
                rep.band_iou,
                tr.aggregate.masked_l1,
                tr.aggregate.ssim
            );
            acc = 0.0;
            n = 0;
        }
    }
    Ok(())
}
