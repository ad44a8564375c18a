//! Draw a few GIN views of one synthetic volume and print their intensity
//! statistics; writes center-slice PGMs to the directory given as the
//! first argument (default `gin-preview`).

use std::path::PathBuf;

use kneedg::cohort::{generate_cohort, write_pgm_center_slice, CohortSpec, Domain, Volume};
use kneedg::gin::{augment_views, GinConfig};
use kneedg::rng::RngStream;

fn stats(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (
        m,
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt(),
    )
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| "gin-preview".into());
    std::fs::create_dir_all(&out)?;
    let spec = CohortSpec {
        n_pairs: 7,
        seed: 5,
        ..CohortSpec::default()
    };
    let records = generate_cohort(&spec)?;
    let rec = records
        .iter()
        .find(|r| r.domain == Domain::Source && r.label == 1)
        .unwrap();
    let x = rec.volume.to_tensor();

    let gin = GinConfig {
        views_per_image: 6,
        ..GinConfig::default()
    };
    let views = augment_views(&x, &RngStream::new(5, "gin-preview"), &gin)?;
    let (m, s) = stats(x.data());
    println!("original       mean {m:+.4} std {s:.4}");
    write_pgm_center_slice(&rec.volume, &out.join("original.pgm"))?;
    for (i, v) in views.iter().enumerate() {
        let (m, s) = stats(v.volume.data());
        println!("view{i} a={:.3}  mean {m:+.4} std {s:.4}", v.alpha);
        write_pgm_center_slice(&Volume::from_tensor(&v.volume)?, &out.join(format!("view{i}.pgm")))?;
    }
    println!("slices in {}", out.display());
    Ok(())
}
