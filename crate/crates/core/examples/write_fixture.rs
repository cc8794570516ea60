//! Regenerates `assets/content.ppm` from the procedural scene.

fn main() -> ssmstyle::Result<()> {
    let img = ssmstyle::fixtures::procedural_scene(64, 64)?;
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/content.ppm");
    ssmstyle::imageio::write_atomic(&path, &ssmstyle::imageio::encode_ppm(&img)?)?;
    println!("wrote {}", path.display());
    Ok(())
}
