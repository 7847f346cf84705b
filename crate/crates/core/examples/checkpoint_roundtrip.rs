//! Saves model parameters to the binary checkpoint format and reads them back.

use autoselect::seqmodel::{checkpoint, ModelDims, ModelParams};

fn main() -> anyhow::Result<()> {
    let params = ModelParams::init(ModelDims::new(16, 70)?, 3);
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&params, &path)?;
    let back = checkpoint::load(&path)?;
    anyhow::ensure!(back == params, "round trip changed the parameters");
    println!(
        "{} parameters, {} bytes on disk, round trip exact",
        params.numel(),
        std::fs::metadata(&path)?.len()
    );
    Ok(())
}
