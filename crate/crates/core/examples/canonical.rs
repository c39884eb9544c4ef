//! Train on a synthetic scene and report depth and photometric error as
//! training progresses.
//!
//! ```text
//! cargo run --release -p mbdepth --example canonical -- [scene] [epochs] [stride] [flags...]
//! ```
//! Flags: `no-lidar`, `direct`, `f32`, `clr=<confidence lr>`, `lr=<lr>`, `scale=<m>`,
//! `alpha=<a>`, `decay=<d>`, `every=<n>`, `save=<dir>`.

use mbdepth::bundle_io::{render_synthetic_bundle, LidarModel, RenderParams, SceneSpec, TremorParams};
use mbdepth::eval::{depth_metrics, photometric_error_paired};
use mbdepth::refine::{compute_z_avg, reconstruct, Precision, TrainConfig, Trainer};
use std::time::Instant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let scene = SceneSpec::by_name(args.first().map_or("sphere-on-plane", String::as_str)).ok_or("unknown scene")?;
    let epochs: usize = args.get(1).map_or(Ok(50), |s| s.parse())?;
    let stride: usize = args.get(2).map_or(Ok(1), |s| s.parse())?;
    let flags = &args[args.len().min(3)..];
    let value = |key: &str| flags.iter().find_map(|f| f.strip_prefix(key).and_then(|v| v.strip_prefix('=')).map(str::to_string));
    let mut config = TrainConfig {
        epochs,
        frame_stride: stride,
        ..Default::default()
    };
    if flags.iter().any(|f| f == "no-lidar") {
        config.constant_init_depth = Some(1.0);
        config.alpha = 0.0;
    }
    config.direct_depth = flags.iter().any(|f| f == "direct");
    if flags.iter().any(|f| f == "f32") {
        config.precision = Precision::F32;
    }
    if let Some(v) = value("clr") {
        config.confidence_lr = v.parse()?;
    }
    if let Some(v) = value("lr") {
        config.base_lr = v.parse()?;
    }
    if let Some(v) = value("scale") {
        config.coord_scale = v.parse()?;
    }
    if let Some(v) = value("alpha") {
        config.alpha = v.parse()?;
    }
    if let Some(v) = value("decay") {
        config.decay = v.parse()?;
    }
    let every: usize = value("every").map_or(Ok(10), |v| v.parse())?;

    let t = Instant::now();
    let synth = render_synthetic_bundle(&scene, &TremorParams::default(), &RenderParams::default(), &LidarModel::default())?;
    eprintln!("rendered in {:.1}s", t.elapsed().as_secs_f64());
    if let Some(v) = value("save") {
        std::fs::create_dir_all(&v)?;
        mbdepth::bundle_io::write_blob(&std::path::Path::new(&v).join("gt.bin"), &synth.gt_depth)?;
    }
    let mut trainer = Trainer::new(&synth.bundle, &config)?;
    let base = trainer.bundle().clone();
    let z_avg = compute_z_avg(&base)?;
    let textured = &synth.textured_mask;
    let background = synth.background_mask();
    // Textured pixels within 4 px of a depth step of more than 2 cm.
    let gt = &synth.gt_depth;
    let (h, w) = (gt.height(), gt.width());
    let near_step: Vec<bool> = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let (mut lo, mut hi) = (f32::MAX, f32::MIN);
            for rr in r.saturating_sub(4)..(r + 5).min(h) {
                for cc in c.saturating_sub(4)..(c + 5).min(w) {
                    lo = lo.min(gt.data()[rr * w + cc]);
                    hi = hi.max(gt.data()[rr * w + cc]);
                }
            }
            hi - lo > 0.02
        })
        .collect();
    let edge: Vec<bool> = textured.iter().zip(&near_step).map(|(&t, &e)| t && e).collect();
    let interior: Vec<bool> = textured.iter().zip(&near_step).map(|(&t, &e)| t && !e).collect();
    let report = |label: &str, z: &mbdepth::ImageGrid| -> Result<(), Box<dyn std::error::Error>> {
        let tex = depth_metrics(z, &synth.gt_depth, Some(textured))?;
        let bg = if background.iter().any(|&b| b) { depth_metrics(z, &synth.gt_depth, Some(&background))?.mae } else { f64::NAN };
        let part = |m: &[bool]| if m.iter().any(|&b| b) { depth_metrics(z, gt, Some(m)).map(|d| d.mae) } else { Ok(f64::NAN) };
        let (ed, int) = (part(&edge)?, part(&interior)?);
        let pe = photometric_error_paired(&[&z_avg, z], &synth.bundle)?;
        println!(
            "{label:>10}  tex_mae {:.5} (interior {int:.5}, edges {ed:.5})  bg_mae {:.5}  pe_avg {:.6}  pe {:.6}",
            tex.mae, bg, pe[0].mae, pe[1].mae
        );
        Ok(())
    };
    report("z_avg", &z_avg)?;
    let start = Instant::now();
    for e in 0..epochs {
        let s = trainer.run_epoch()?;
        if (e + 1) % every == 0 || e + 1 == epochs {
            let z = reconstruct(trainer.model(), &base, &z_avg)?;
            let c = trainer.model().confidence.grid().data();
            let cmean = c.iter().map(|&x| x as f64).sum::<f64>() / c.len() as f64;
            println!(
                "epoch {:>3}  loss {:.5e}  geo {:.3e}  drop {}  conf {:.3}  {:.0}s",
                e,
                s.mean_total,
                s.mean_geometric,
                s.dropped,
                cmean,
                start.elapsed().as_secs_f64()
            );
            report(&format!("z* @{}", e + 1), &z)?;
            if let Some(v) = value("save") {
                mbdepth::bundle_io::write_blob(&std::path::Path::new(&v).join("z_star.bin"), &z)?;
            }
        }
    }
    Ok(())
}
