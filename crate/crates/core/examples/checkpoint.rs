//! Builds the default model, lists its parameter shapes, and round-trips it
//! through a checkpoint file.
//!
//! cargo run --release --example checkpoint

use returnformer::autograd::Mode;
use returnformer::checkpoint::{load_checkpoint, read_manifest, save_checkpoint};
use returnformer::model::{count_params, param_shapes, Gpt, ModelConfig};
use returnformer::rng;
use returnformer::tokenizer::TokenId;

fn main() -> returnformer::Result<()> {
    let config = ModelConfig::default();
    for (name, shape) in param_shapes(&config).entries() {
        println!("{name:<28} {shape:?}");
    }
    println!("total parameters: {}", count_params(&config));

    let model = Gpt::<f32>::new(config, &mut rng::stream(0, "init"))?;
    let dir = std::env::temp_dir().join("returnformer-example");
    std::fs::create_dir_all(&dir).map_err(|source| returnformer::Error::Io { path: dir.clone(), source })?;
    let path = dir.join("default.ckpt");
    save_checkpoint(&model, &path)?;
    let manifest = read_manifest(&path)?;
    let restored = load_checkpoint(&path)?;

    let tokens: Vec<TokenId> = (0..32).map(|i| TokenId(190 + i % 20)).collect();
    let mut r = rng::stream(0, "example");
    let a = model.forward(&tokens, Mode::Eval, &mut r)?;
    let b = restored.forward(&tokens, Mode::Eval, &mut r)?;
    println!(
        "wrote {} ({} tensors, {} parameters); reloaded logits identical: {}",
        path.display(),
        manifest.tensors.len(),
        manifest.total_params(),
        a.data() == b.data()
    );
    Ok(())
}
