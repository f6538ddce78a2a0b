//! Checkpoint files: the full pipeline configuration (architecture plus
//! training hyperparameters) as structured text, followed by the name-
//! prefixed parameter registry, each payload in the tensor container format.
//! Round-trips are lossless: reloaded models reproduce logits bitwise.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::{param_layout, Model};
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::train::TrainConfig;

const MAGIC: &[u8; 4] = b"FRCK";
const VERSION: u16 = 1;

pub fn save_checkpoint(path: &Path, model: &Model, train_cfg: &TrainConfig) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let cfg = PipelineConfig { model: model.cfg.clone(), train: train_cfg.clone() };
    let config_text = cfg.to_toml();
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(config_text.len() as u32).to_le_bytes())?;
    file.write_all(config_text.as_bytes())?;
    let registry = model.registry();
    file.write_all(&(registry.len() as u32).to_le_bytes())?;
    for (name, tensor) in &registry {
        file.write_all(&(name.len() as u16).to_le_bytes())?;
        file.write_all(name.as_bytes())?;
        write_tensor(&mut file, tensor)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainConfig)> {
    let fail = |reason: String| Error::Format { path: path.display().to_string(), reason };
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fail("bad checkpoint magic".into()));
    }
    let mut u16buf = [0u8; 2];
    file.read_exact(&mut u16buf)?;
    if u16::from_le_bytes(u16buf) != VERSION {
        return Err(fail("unsupported checkpoint version".into()));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)?;
    let config_len = u32::from_le_bytes(u32buf) as usize;
    let mut config_bytes = vec![0u8; config_len];
    file.read_exact(&mut config_bytes)?;
    let config_text =
        String::from_utf8(config_bytes).map_err(|e| fail(format!("config not utf-8: {e}")))?;
    let cfg: PipelineConfig =
        toml::from_str(&config_text).map_err(|e| fail(format!("config parse error: {e}")))?;

    file.read_exact(&mut u32buf)?;
    let n_entries = u32::from_le_bytes(u32buf) as usize;
    let layout = param_layout(&cfg.model);
    if n_entries != layout.len() {
        return Err(fail(format!(
            "checkpoint has {n_entries} parameters, config implies {}",
            layout.len()
        )));
    }
    let mut values = Vec::with_capacity(n_entries);
    for (expected_name, _) in &layout {
        file.read_exact(&mut u16buf)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        file.read_exact(&mut name_bytes)?;
        let name =
            String::from_utf8(name_bytes).map_err(|e| fail(format!("name not utf-8: {e}")))?;
        if &name != expected_name {
            return Err(fail(format!(
                "parameter order mismatch: found {name}, expected {expected_name}"
            )));
        }
        let tensor = read_tensor(&mut file)?;
        values.push(Tensor::param(tensor.shape(), tensor.data().to_vec())?);
    }
    Ok((Model::from_params(cfg.model, values)?, cfg.train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::rng::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            input_size: [16, 16],
            encoder_channels: [4, 6, 8],
            head_channels: 8,
            decoder_lowlevel_channels: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_reproduces_logits_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model(&tiny_config(), 29).unwrap();
        let tcfg = TrainConfig { epochs: 13, ..TrainConfig::default() };
        save_checkpoint(&path, &model, &tcfg).unwrap();
        let (loaded, loaded_tcfg) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded_tcfg, tcfg); // training hyperparameters preserved

        let mut rng = Rng::seed_from_u64(57);
        let image =
            Tensor::from_vec(&[3, 16, 16], (0..768).map(|_| rng.next_f64()).collect()).unwrap();
        let (a, _) = model.forward(&image).unwrap();
        let (b, _) = loaded.forward(&image).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn registry_order_enforced_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model(&tiny_config(), 31).unwrap();
        save_checkpoint(&path, &model, &TrainConfig::default()).unwrap();
        // Flip one byte inside the first parameter name.
        let mut bytes = std::fs::read(&path).unwrap();
        let name_pos = bytes.windows(7).position(|w| w == b"encoder").unwrap();
        bytes[name_pos] = b'x';
        std::fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
