use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbnn_core::infer::{classify_kernels, SparseEngine};
use sbnn_core::metrics::{bparams_bits, hamming_histogram, histogram_csv, OpsReport};
use sbnn_core::model::{QLayer, QuantizedModel};
use sbnn_core::model_io::{self, ModelFileError};
use sbnn_core::nn::{self, reference_predict, Network, NetworkSpec, OmegaMode, TrainError};
use sbnn_core::sparsity::binary_entropy;

use crate::config::{worker_threads, DataSource, ResolvedTrain};
use crate::Failure;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn load_model(path: &Path) -> Result<QuantizedModel, Failure> {
    model_io::load(path).map_err(|e| match e {
        ModelFileError::Io(io) => io_err(path, io),
        other => Failure::ModelFile(format!("{}: {other}", path.display())),
    })
}

fn engine_for(model: &QuantizedModel) -> Result<SparseEngine, Failure> {
    SparseEngine::new(model.clone()).map_err(|e| Failure::ModelFile(format!("model cannot run: {e}")))
}

fn argmax(v: &[f64]) -> usize {
    nn::argmax_rows(v, v.len().max(1))[0]
}

/// `train_log.txt` holds one `epoch=...` line per epoch (see
/// `EpochRecord::log_line`), then `expected_connections=` and `snapshot_id=`.
pub fn train(resolved: &ResolvedTrain, out: &Path) -> Result<(), Failure> {
    let resolved_toml = toml::to_string(resolved).map_err(|e| Failure::Config(e.to_string()))?;
    println!("resolved config:\n{resolved_toml}");
    let data = resolved.data.load()?;
    let spec = NetworkSpec::desk(data.shape, data.classes, resolved.width);
    spec.validate().map_err(|e| Failure::Config(format!("network does not fit {:?}: {e}", data.shape)))?;

    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write(&out.join("config.toml"), &resolved_toml)?;
    let (report, net) = nn::train(&spec, &data, &resolved.train).map_err(|e| match e {
        TrainError::Diverged { .. } => Failure::Diverged(e.to_string()),
        TrainError::DataShape { .. } => Failure::Data(e.to_string()),
        other => Failure::Config(other.to_string()),
    })?;

    let mut log = report.log_text();
    let _ = writeln!(log, "expected_connections={:.9}", report.expected_connections);
    let _ = writeln!(log, "snapshot_id={}", report.snapshot_id);
    write(&out.join("train_log.txt"), &log)?;
    let snapshot = serde_json::to_vec(&net).map_err(|e| Failure::Io(e.to_string()))?;
    write(&out.join("snapshot.json"), snapshot)?;

    match report.last() {
        Some(r) => println!("{}", r.log_line()),
        None => println!("no epochs run"),
    }
    println!("snapshot_id={} written to {}", report.snapshot_id, out.display());
    Ok(())
}

pub fn quantize(snapshot: &Path, omega: Option<&str>, out: &Path) -> Result<(), Failure> {
    let bytes = std::fs::read(snapshot).map_err(|e| io_err(snapshot, e))?;
    let net: Network = serde_json::from_slice(&bytes)
        .map_err(|e| Failure::ModelFile(format!("{}: {e}", snapshot.display())))?;
    let net = net.restore().map_err(|e| Failure::ModelFile(format!("{}: {e}", snapshot.display())))?;
    let mode = match omega {
        Some(s) => s.parse::<OmegaMode>().map_err(Failure::Config)?,
        None => net.omega_mode,
    };
    let model = nn::quantize_snapshot(&net, mode);
    model_io::save(&model, out).map_err(|e| match e {
        ModelFileError::Io(io) => io_err(out, io),
        other => Failure::ModelFile(other.to_string()),
    })?;
    let size = std::fs::metadata(out).map_err(|e| io_err(out, e))?.len();
    println!(
        "layers={} binarized_weights={} ones={} bparams_bits={} file_bytes={} -> {}",
        model.layers.len(),
        model.binarized_weight_count(),
        model.ones_count(),
        bparams_bits(&model),
        size,
        out.display()
    );
    Ok(())
}

pub fn eval(model_path: &Path, source: &DataSource) -> Result<(), Failure> {
    let model = load_model(model_path)?;
    let engine = engine_for(&model)?;
    let data = source.load()?;
    if data.shape != engine.input_shape() {
        return Err(Failure::Data(format!(
            "data shape {:?} does not match model input {:?}",
            data.shape,
            engine.input_shape()
        )));
    }
    let (logits, _) = engine.infer_batch(&data.images, worker_threads()?).map_err(|e| Failure::Data(e.to_string()))?;
    let mut correct = 0;
    let mut agree = 0;
    for (i, l) in logits.iter().enumerate() {
        let predicted = argmax(l);
        correct += (predicted == data.labels[i]) as usize;
        let reference = reference_predict(&model, data.image(i)).map_err(|e| Failure::Data(e.to_string()))?;
        agree += (predicted == reference) as usize;
    }
    let n = data.len() as f64;
    println!("samples={} accuracy={:.6} reference_agreement={:.6}", data.len(), correct as f64 / n, agree as f64 / n);
    Ok(())
}

pub fn bench(
    model_path: &Path,
    source: Option<&DataSource>,
    seed: u64,
    inputs: usize,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let model = load_model(model_path)?;
    let engine = engine_for(&model)?;
    let shape = engine.input_shape();
    let images = match source {
        Some(s) => {
            let data = s.load()?;
            if data.shape != shape {
                return Err(Failure::Data(format!("data shape {:?} does not match model input {shape:?}", data.shape)));
            }
            data.images
        }
        None => {
            if inputs == 0 {
                return Err(Failure::Config("--inputs must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..inputs * shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
        }
    };
    let first = engine.infer(&images[..shape.len()]).map_err(|e| Failure::Data(e.to_string()))?;
    let report = OpsReport::build(&model, &first.counters).map_err(|e| Failure::ModelFile(e.to_string()))?;
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write(&dir.join("report.txt"), &text)?;
    }

    let threads = worker_threads()?;
    let start = Instant::now();
    let (logits, _) = engine.infer_batch(&images, threads).map_err(|e| Failure::Data(e.to_string()))?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "inferences={} threads={threads} seconds={secs:.6} per_inference_us={:.3}",
        logits.len(),
        1e6 * secs / logits.len() as f64
    );
    Ok(())
}

/// One line per layer; binarized layers add their domain, ones fraction `p`,
/// entropy in bits per weight and kernel classes.
pub fn inspect_text(model: &QuantizedModel) -> String {
    let mut s = String::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let _ = write!(s, "layer={i} kind={}", layer.name());
        if let (Some(omega), Some(bits)) = (layer.omega(), layer.bits()) {
            let ones = bits.iter().filter(|&&b| b == 1).count();
            let p = ones as f64 / bits.len() as f64;
            let _ = write!(
                s,
                " tau={:.6} phi={:.6} alpha={:.6} beta={:.6} weights={} ones={ones} p={p:.6} entropy_bits={:.6}",
                omega.tau,
                omega.phi,
                omega.alpha(),
                omega.beta(),
                bits.len(),
                binary_entropy(p).unwrap_or(0.0)
            );
            if let QLayer::BinConv { bits, .. } = layer {
                if let Ok(k) = classify_kernels(bits) {
                    let _ = write!(s, " k0={} k1={} kdense={}", k.zero, k.single, k.dense);
                }
            }
        }
        s.push('\n');
    }
    let _ = writeln!(s, "bparams_bits={}", bparams_bits(model));
    s
}

pub fn inspect(model_path: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let model = load_model(model_path)?;
    print!("{}", inspect_text(&model));
    let csv = histogram_csv(&hamming_histogram(&model));
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            write(&dir.join("histogram.csv"), csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use sbnn_core::binquant::OmegaParams;
    use sbnn_core::dataio::ImageShape;
    use sbnn_core::model::{Conv3x3, FoldedBatchNorm};

    #[test]
    fn inspect_reports_one_bit_for_balanced_pm1() {
        let bits: Vec<u8> = (0..2 * 2 * 9).map(|i| (i % 2) as u8).collect();
        let model = QuantizedModel {
            input: Some(ImageShape::new(2, 4, 4)),
            layers: vec![
                QLayer::Sign,
                QLayer::BinConv {
                    geometry: Conv3x3 { in_ch: 2, out_ch: 2, stride: 1, padding: 1 },
                    omega: OmegaParams::PLUS_MINUS_ONE,
                    bits,
                    bn: FoldedBatchNorm::identity(2),
                },
            ],
        };
        let text = inspect_text(&model);
        assert!(text.contains("p=0.500000 entropy_bits=1.000000"), "{text}");
        assert!(text.contains("alpha=-1.000000 beta=1.000000"));
    }
}
