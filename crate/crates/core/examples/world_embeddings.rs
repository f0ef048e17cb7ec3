//! Generates a synthetic federation, writes its embeddings to disk and
//! reads them back.
//!
//! ```text
//! cargo run --release --example world_embeddings -- [path]
//! ```

use mpft::embeddings::{export_embeddings, import_embeddings};
use mpft::world::{generate_federation, Part, WorldConfig};

fn main() -> mpft::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("mpft-world.emb"));
    let world = WorldConfig::default();
    let federation = generate_federation(&world)?;
    let embedded = federation.embedded()?;
    for d in &embedded {
        println!(
            "client {} (domain {}): {} train, {} validation, {} test",
            d.client_id,
            d.home_domain,
            d.indices(Part::Train).len(),
            d.indices(Part::Validation).len(),
            d.indices(Part::Test).len()
        );
    }
    export_embeddings(&embedded, federation.classes, &path)?;
    let (file, datasets) = import_embeddings(&path, &world.split, world.seed)?;
    println!(
        "{}: {} records, d_emb {}, {} clients re-split",
        path.display(),
        file.header.record_count,
        file.header.d_emb,
        datasets.len()
    );
    Ok(())
}
