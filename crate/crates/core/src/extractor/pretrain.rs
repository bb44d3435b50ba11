//! Colorization pretext: the encoder trunk plus a transposed-convolution
//! decoder learn to reconstruct the visible bands from the configured input
//! bands. Only the encoder survives.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{prepare_batch, BandStats, EncoderPass, ExtractError, ExtractResult, Extractor, ExtractorConfig};
use crate::ingest::{Band, PatchTensor};
use crate::numcore::{derive_seed, init_he, sgd_step, DenseArray, Mode, ParamSet, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.01,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub extractor: Extractor,
    /// Mean reconstruction MSE per epoch.
    pub epoch_losses: Vec<f64>,
    pub corpus_hash: String,
}

/// SHA-256 over the serialised patches, in order.
pub fn corpus_hash(patches: &[PatchTensor]) -> String {
    let mut h = Sha256::new();
    for p in patches {
        h.update(p.to_bytes());
    }
    hex::encode(h.finalize())
}

fn decoder_params(cfg: &ExtractorConfig, seed: u64) -> ExtractResult<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let mut c = cfg.trunk_channels();
    for u in 0..cfg.downsamplings() {
        let out = (c / 2).max(4);
        p.insert(format!("dec.up{u}.w"), init_he(&[c, out, 4, 4], c * 4, &mut rng))?;
        p.insert(format!("dec.up{u}.b"), DenseArray::zeros(&[out]))?;
        c = out;
    }
    // near-zero output layer: reconstructions start close to the bias
    p.insert("dec.out.w", init_he(&[3, c, 3, 3], c * 9, &mut rng).map(|v| 0.01 * v))?;
    p.insert("dec.out.b", DenseArray::zeros(&[3]))?;
    Ok(p)
}

/// Visible bands of `patches` as `B×3×S×S`, NoData pixels filled with the
/// patch's valid-pixel mean of that band.
fn rgb_targets(patches: &[&PatchTensor]) -> ExtractResult<DenseArray> {
    let side = patches[0].side();
    let mut data = Vec::with_capacity(patches.len() * 3 * side * side);
    for p in patches {
        for b in Band::RGB {
            let fill = p.band_mean(b).unwrap_or(0.0);
            data.extend(
                p.band(b)
                    .iter()
                    .zip(p.nodata_mask())
                    .map(|(&v, &m)| if m { fill } else { f64::from(v) }),
            );
        }
    }
    Ok(DenseArray::new(vec![patches.len(), 3, side, side], data)?)
}

pub fn colorize_pretrain(
    patches: &[PatchTensor],
    config: &ExtractorConfig,
    pcfg: &PretrainConfig,
) -> ExtractResult<PretrainOutcome> {
    config.validate()?;
    if patches.is_empty() {
        return Err(ExtractError::MissingRgb("empty corpus".into()));
    }
    if let Some(i) = patches
        .iter()
        .position(|p| Band::RGB.iter().any(|&b| p.band_mean(b).is_none()))
    {
        return Err(ExtractError::MissingRgb(format!("patch {i} has no valid visible pixels")));
    }
    if pcfg.batch_size == 0 || pcfg.epochs == 0 {
        return Err(ExtractError::InvalidConfig("epochs and batch size must be positive".into()));
    }
    let side = patches[0].side();
    if side % (1 << config.downsamplings()) != 0 {
        return Err(ExtractError::InvalidConfig(format!(
            "patch side {side} not divisible by 2^{}",
            config.downsamplings()
        )));
    }

    let mut extractor = Extractor::new(config.clone(), "enc", derive_seed(pcfg.seed, 1))?;
    extractor.input = BandStats::fit(patches);
    let fc = |n: &str| n.starts_with("enc.fc.");
    let mut train = ParamSet::new();
    for (name, v) in extractor.params.iter().filter(|(n, _)| !fc(n)) {
        train.insert(name, v.clone())?;
    }
    for (name, v) in decoder_params(config, derive_seed(pcfg.seed, 2))?.iter() {
        train.insert(name, v.clone())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(pcfg.seed, 3));
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut epoch_losses = Vec::with_capacity(pcfg.epochs);
    for epoch in 0..pcfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(pcfg.batch_size) {
            let batch: Vec<&PatchTensor> = chunk.iter().map(|&i| &patches[i]).collect();
            let months: Vec<u8> = batch.iter().map(|p| p.month()).collect();
            let x = prepare_batch(&batch, config.bands.bands(), &extractor.input)?;
            let target = rgb_targets(&batch)?;

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let mut pass = EncoderPass {
                config,
                prefix: "enc",
                mode: Mode::Train,
                state: &mut extractor.norm,
            };
            let mut h = pass.trunk(&mut tape, &train, xv, &months)?;
            for u in 0..config.downsamplings() {
                let w = tape.param(&train, &format!("dec.up{u}.w"))?;
                let b = tape.param(&train, &format!("dec.up{u}.b"))?;
                let y = tape.conv_transpose2d(h, w, 2, 1)?;
                let y = tape.add_channel_bias(y, b)?;
                h = tape.elu(y);
            }
            let w = tape.param(&train, "dec.out.w")?;
            let b = tape.param(&train, "dec.out.b")?;
            let y = tape.conv2d(h, w, 1, 1)?;
            let y = tape.add_channel_bias(y, b)?;
            let loss = tape.mse(y, target)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(ExtractError::Num(crate::numcore::NumError::NonFinite(
                    "reconstruction loss",
                )));
            }
            let grads = tape.backward(loss)?;
            tape.accumulate_param_grads(&grads, &mut train)?;
            sgd_step(&mut train, pcfg.lr)?;
            total += lv * batch.len() as f64;
            count += batch.len();
        }
        let mean = total / count as f64;
        log::info!("pretrain epoch {} mse {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    if epoch_losses.windows(2).any(|w| w[1] > w[0]) {
        log::warn!("pretraining loss is not monotonically decreasing: {epoch_losses:?}");
    }
    extractor.params.load_matching(&train.to_map());
    Ok(PretrainOutcome {
        extractor,
        epoch_losses,
        corpus_hash: corpus_hash(patches),
    })
}
