//! Train the mel codec and the query classifier, then check reconstruction.

mod common;

use rfsep::dataset::{Dataset, Split};
use rfsep::frontend::Frontend;
use rfsep::train::{read_losses, train_classifier, train_vae, vocab_of, MelCorpus};

fn main() -> anyhow::Result<()> {
    let (cfg, layout) = common::setup()?;
    common::ensure_data(&cfg, &layout)?;
    let vae = train_vae(&cfg, &layout, &common::opts())?;
    let clf = train_classifier(&cfg, &layout, &common::opts())?;
    let losses = read_losses(&layout.loss_csv("vae"))?;
    println!("codec loss: first {:.4}, last {:.4}", losses[0], losses[losses.len() - 1]);

    let ds = Dataset::load(&layout.data())?;
    let fe = Frontend::new(&cfg)?;
    let val = MelCorpus::build(&ds, Split::Val, &fe, &vocab_of(&cfg)?)?;
    let rec = vae.decode_standardized(&vae.encode_standardized(&val.target)?)?;
    let mse = rec.zip_with(&val.target, |a, b| (a - b).powi(2))?.mean_f64();
    println!("validation reconstruction MSE (log-mel): {mse:.4}");
    println!("classifier accuracy on clean validation targets: {:.3}", clf.accuracy(&val.target, &val.target_ids)?);
    Ok(())
}
