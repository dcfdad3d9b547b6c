//! Writes the toy dialog corpus used by `configs/toy.toml`.
//!
//! Usage: `cargo run -p latent-dialog --example make_toy_corpus -- <out-dir> [seed]`

use std::path::PathBuf;

use latent_dialog::synthetic::{to_eou_text, toy_dialog_corpus};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> std::io::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "data/toy".to_string()));
    let seed = args
        .next()
        .map_or(0, |s| s.parse().expect("seed must be an integer"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(&out)?;
    for (split, n) in [("train", 300), ("valid", 40), ("test", 40)] {
        let text = to_eou_text(&toy_dialog_corpus(n, &mut rng));
        std::fs::write(out.join(format!("{split}.txt")), text)?;
    }
    Ok(())
}
