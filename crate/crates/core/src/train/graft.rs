use super::ModelVariant;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::params::{get_param, Parameters};

fn trunk_matches(a: &EncoderConfig, b: &EncoderConfig) -> bool {
    (a.layers, a.d_model, a.attn_heads, a.ffn_dim, a.vocab_size, a.max_len)
        == (b.layers, b.d_model, b.attn_heads, b.ffn_dim, b.vocab_size, b.max_len)
}

fn memory_ffn_prefixes(cfg: &EncoderConfig) -> Vec<String> {
    cfg.memory_layers.iter().map(|l| format!("layers.{}.block.ffn.", l - 1)).collect()
}

/// Builds a memory model of `variant` whose trunk is copied from the memory-free `base`.
///
/// Memory parameters are freshly initialized from `target.memory`. `Pkm` has no FFN at
/// memory positions; `ResmReinitFfn` keeps its freshly drawn FFN there.
pub fn init_from_pretrained(base: &Encoder<f32>, target: &EncoderConfig, variant: ModelVariant, rng: &mut Rng) -> Result<Encoder<f32>> {
    if base.config.has_memory() {
        return Err(Error::InvalidConfig("grafting base must be memory-free".into()));
    }
    let mut cfg = target.clone();
    cfg.memory_block = variant.block();
    if !trunk_matches(&base.config, &cfg) {
        return Err(Error::ShapeMismatch {
            op: "init_from_pretrained",
            expected: vec![base.config.layers, base.config.d_model, base.config.ffn_dim, base.config.vocab_size],
            got: vec![cfg.layers, cfg.d_model, cfg.ffn_dim, cfg.vocab_size],
        });
    }
    cfg.n_classes = base.config.n_classes;
    let mut model = Encoder::<f32>::new(cfg, rng)?;
    let keep_fresh = if variant == ModelVariant::ResmReinitFfn {
        memory_ffn_prefixes(&model.config)
    } else {
        Vec::new()
    };
    let mut result = Ok(());
    model.visit_mut("", &mut |name, _, t| {
        if result.is_err() || keep_fresh.iter().any(|p| name.starts_with(p.as_str())) {
            return;
        }
        if let Some(src) = get_param(base, name) {
            if src.shape() != t.shape() {
                result = Err(Error::ShapeMismatch {
                    op: "init_from_pretrained",
                    expected: t.shape().to_vec(),
                    got: src.shape().to_vec(),
                });
                return;
            }
            *t = src;
        }
    });
    result?;
    Ok(model)
}
