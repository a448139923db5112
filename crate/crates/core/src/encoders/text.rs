use alloc::vec::Vec;

use super::vocab::eos_position;
use super::{layer_norm, transformer_block, Embedding, Modality, ModelConfig};
use crate::error::{bail, Result};
use crate::tape::{Tape, Var};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct TextTrace {
    /// Token-embedding lookups (before position embeddings), one row per
    /// position up to and including EOS.
    pub token_embeddings: Var,
    pub embedding: Var,
    pub eos: usize,
}

/// Causal text transformer read out at the EOS position.
///
/// Positions after EOS cannot influence the readout under the causal mask,
/// so only the prefix through EOS is evaluated.
pub fn text_graph(tape: &mut Tape<'_>, config: &ModelConfig, ids: &[u32]) -> Result<TextTrace> {
    if ids.len() != config.context_length {
        bail!(
            Contract,
            "token sequence has length {}, context length is {}",
            ids.len(),
            config.context_length
        );
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= config.vocab_size) {
        bail!(Domain, "token id {} outside vocabulary of {}", bad, config.vocab_size);
    }
    let Some(eos) = eos_position(ids) else {
        bail!(Contract, "token sequence has no EOS");
    };
    let prefix: Vec<usize> = ids[..=eos].iter().map(|&t| t as usize).collect();
    let table = tape.param("text.token_embedding")?;
    let token_embeddings = tape.gather(table, &prefix)?;
    let pos = tape.param("text.positional_embedding")?;
    let pos = tape.slice_rows(pos, 0, eos + 1)?;
    let mut h = tape.add(token_embeddings, pos)?;
    for i in 0..config.text_layers {
        (h, _) = transformer_block(
            tape,
            &alloc::format!("text.blocks.{i}"),
            h,
            config.text_heads,
            true,
            config,
        )?;
    }
    let readout = tape.slice_rows(h, eos, 1)?;
    let readout = layer_norm(tape, readout, "text.ln_final", config.layer_norm_eps)?;
    let proj = tape.param("text.proj")?;
    let embedding = tape.linear(readout, proj, None)?;
    Ok(TextTrace {
        token_embeddings,
        embedding,
        eos,
    })
}

/// Embed a full-length token sequence.
pub fn encode_text(ids: &[u32], config: &ModelConfig, params: &ParamStore) -> Result<Embedding> {
    let mut tape = Tape::new(params);
    let trace = text_graph(&mut tape, config, ids)?;
    Embedding::new(tape.value(trace.embedding).to_vec(), Modality::Text)
}
