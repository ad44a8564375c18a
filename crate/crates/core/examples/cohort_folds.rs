//! Generate a small paired cohort, split it into folds and print the role
//! sizes and class balance of every fold.

use kneedg::cohort::{generate_cohort, make_folds, CohortSpec};
use kneedg::rng::RngStream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = CohortSpec {
        n_pairs: 35,
        volume_dims: [8, 12, 12],
        seed: 2,
        ..CohortSpec::default()
    };
    let records = generate_cohort(&spec)?;
    println!("{} records ({} pairs, source + target)", records.len(), spec.n_pairs);
    let folds = make_folds(&records, 7, 10, &mut RngStream::new(2, "folds"))?;
    let label = |id: u32| records.iter().find(|r| r.subject_id == id).unwrap().label as usize;
    for f in &folds {
        let roles: Vec<String> = f
            .roles()
            .iter()
            .map(|(name, ids)| {
                let cases: usize = ids.iter().map(|&i| label(i)).sum();
                format!("{name} {}/{}", cases, ids.len())
            })
            .collect();
        println!("fold {}: {}", f.fold_index, roles.join("  "));
    }
    Ok(())
}
