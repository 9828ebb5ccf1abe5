//! Model checkpoints on top of the binary container.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use super::formats::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::error::{bail, Result};
use crate::gpt::{GptConfig, GptModel};
use crate::tokeniser::{Refactor, TokeniserConfig, TokeniserModel};

fn get<T: FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<T> {
    match h.get(key).map(|v| v.parse()) {
        Some(Ok(v)) => Ok(v),
        Some(Err(_)) => bail!(Input, "checkpoint header key '{}' has bad value '{}'", key, h[key]),
        None => bail!(Input, "checkpoint header lacks '{}'", key),
    }
}

fn opt_usize(v: Option<usize>) -> String {
    v.map_or_else(|| "none".into(), |n| n.to_string())
}

fn get_opt_usize(h: &BTreeMap<String, String>, key: &str) -> Result<Option<usize>> {
    if h.get(key).map(String::as_str) == Some("none") {
        return Ok(None);
    }
    get(h, key).map(Some)
}

fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    if ck.kind != kind {
        bail!(Input, "checkpoint holds a {} model, expected {}", ck.kind, kind);
    }
    Ok(())
}

pub fn tokeniser_checkpoint(model: &TokeniserModel) -> Checkpoint {
    let c = &model.config;
    let mut h = BTreeMap::new();
    h.insert("vocab".into(), c.vocab.to_string());
    h.insert("d_token".into(), c.d_token.to_string());
    h.insert("units".into(), c.units.to_string());
    h.insert("seq_len".into(), c.seq_len.to_string());
    h.insert("batch_size".into(), c.batch_size.to_string());
    h.insert("epochs".into(), c.epochs.to_string());
    h.insert("lr".into(), c.lr.to_string());
    h.insert("temperature".into(), c.temperature.to_string());
    h.insert("batches_per_epoch".into(), opt_usize(c.batches_per_epoch));
    if let Some(r) = &model.refactor {
        h.insert("refactor.k_star".into(), r.k_star.to_string());
        h.insert("refactor.map".into(), r.map.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","));
    }
    Checkpoint { kind: "tokeniser".into(), header: h, params: model.params.clone() }
}

pub fn tokeniser_from_checkpoint(ck: Checkpoint) -> Result<TokeniserModel> {
    expect_kind(&ck, "tokeniser")?;
    let h = &ck.header;
    let config = TokeniserConfig {
        vocab: get(h, "vocab")?,
        d_token: get(h, "d_token")?,
        units: get(h, "units")?,
        seq_len: get(h, "seq_len")?,
        batch_size: get(h, "batch_size")?,
        epochs: get(h, "epochs")?,
        lr: get(h, "lr")?,
        temperature: get(h, "temperature")?,
        batches_per_epoch: get_opt_usize(h, "batches_per_epoch")?,
    };
    let refactor = match h.get("refactor.map") {
        None => None,
        Some(m) => {
            let map = m.split(',').map(|v| v.parse::<u16>()).collect::<std::result::Result<Vec<_>, _>>();
            let Ok(map) = map else { bail!(Input, "checkpoint refactor map is malformed") };
            Some(Refactor { map, k_star: get(h, "refactor.k_star")? })
        }
    };
    TokeniserModel::from_params(config, ck.params, refactor)
}

pub fn gpt_checkpoint(model: &GptModel) -> Checkpoint {
    let c = &model.config;
    let mut h = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        h.insert(k.to_string(), v);
    };
    put("k_star", c.k_star.to_string());
    put("channels", c.channels.to_string());
    put("subjects", c.subjects.to_string());
    put("d", c.d.to_string());
    put("d_token", c.d_token.to_string());
    put("d_channel", c.d_channel.to_string());
    put("d_position", c.d_position.to_string());
    put("d_subject", c.d_subject.to_string());
    put("layers", c.layers.to_string());
    put("heads", c.heads.to_string());
    put("ff_units", c.ff_units.to_string());
    put("leaky_slope", c.leaky_slope.to_string());
    put("dropout", c.dropout.to_string());
    put("l", c.l.to_string());
    put("patch_len", c.patch_len.to_string());
    put("unpatched", c.unpatched.to_string());
    put("latent", c.latent.to_string());
    put("loss_len", c.loss_len.to_string());
    put("batch_size", c.batch_size.to_string());
    put("epochs", c.epochs.to_string());
    put("lr", c.lr.to_string());
    put("batches_per_epoch", opt_usize(c.batches_per_epoch));
    put("subjects_discarded", model.subjects_discarded.to_string());
    Checkpoint { kind: "gpt".into(), header: h, params: model.params.clone() }
}

pub fn gpt_from_checkpoint(ck: Checkpoint) -> Result<GptModel> {
    expect_kind(&ck, "gpt")?;
    let h = &ck.header;
    let config = GptConfig {
        k_star: get(h, "k_star")?,
        channels: get(h, "channels")?,
        subjects: get(h, "subjects")?,
        d: get(h, "d")?,
        d_token: get(h, "d_token")?,
        d_channel: get(h, "d_channel")?,
        d_position: get(h, "d_position")?,
        d_subject: get(h, "d_subject")?,
        layers: get(h, "layers")?,
        heads: get(h, "heads")?,
        ff_units: get(h, "ff_units")?,
        leaky_slope: get(h, "leaky_slope")?,
        dropout: get(h, "dropout")?,
        l: get(h, "l")?,
        patch_len: get(h, "patch_len")?,
        unpatched: get(h, "unpatched")?,
        latent: get(h, "latent")?,
        loss_len: get(h, "loss_len")?,
        batch_size: get(h, "batch_size")?,
        epochs: get(h, "epochs")?,
        lr: get(h, "lr")?,
        batches_per_epoch: get_opt_usize(h, "batches_per_epoch")?,
    };
    GptModel::from_params(config, ck.params, get(h, "subjects_discarded")?)
}

pub fn save_tokeniser(path: &Path, model: &TokeniserModel) -> Result<()> {
    write_checkpoint(path, &tokeniser_checkpoint(model))
}

pub fn load_tokeniser(path: &Path) -> Result<TokeniserModel> {
    tokeniser_from_checkpoint(read_checkpoint(path)?)
}

pub fn save_gpt(path: &Path, model: &GptModel) -> Result<()> {
    write_checkpoint(path, &gpt_checkpoint(model))
}

pub fn load_gpt(path: &Path) -> Result<GptModel> {
    gpt_from_checkpoint(read_checkpoint(path)?)
}
