//! Render a small copy of the procedural style corpus and print what
//! ended up in the manifest.

use std::path::Path;
use stylelab::conditioning::SUBJECTS;
use stylelab::data::{
    default_heldout_styles, default_pretrain_styles, generate_corpus, Split,
};

fn main() {
    let root = Path::new("target/example-artifacts/corpus");
    let manifest = generate_corpus(
        root,
        &default_pretrain_styles(),
        &default_heldout_styles(),
        &SUBJECTS.to_vec(),
        2,
        0,
    )
    .unwrap();
    let pre = manifest.entries_for(Split::Pretrain).count();
    let held = manifest.entries_for(Split::HeldoutStyle).count();
    println!("corpus at {}", root.display());
    println!("  {} pretrain images, {} held-out references", pre, held);
    for style in &manifest.styles {
        let n = manifest
            .entries
            .iter()
            .filter(|e| e.style_id == style.id)
            .count();
        println!("  {:<18} {:>3} images, distortion {}", style.id, n, style.distortion);
    }
    println!("manifest hash {}", manifest.sha256_hex());
}
