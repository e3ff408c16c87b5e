//! Prompt-to-Label: one learnable prompt token and one linear head per class.
//!
//! Both the pool and the bank keep their entries in canonical order
//! (ascending class id). Row `i` of the prompt output `o_P` is scored only by
//! head `i`, so classes never share classifier parameters.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const PROMPT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub class_id: usize,
    pub vector: Tensor,
    pub frozen: bool,
    pub stage_added: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    dim: usize,
    entries: Vec<PromptEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub class_id: usize,
    pub weight: Tensor,
    pub bias: f64,
    pub frozen: bool,
    pub stage_added: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBank {
    dim: usize,
    entries: Vec<HeadEntry>,
}

impl PromptPool {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PromptEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [PromptEntry] {
        &mut self.entries
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.class_id).collect()
    }

    pub fn position(&self, class_id: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.class_id == class_id)
    }

    /// All prompts stacked as `[n, d]`, or `None` when the pool is empty.
    pub fn matrix(&self) -> Option<Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self
            .entries
            .iter()
            .flat_map(|e| e.vector.data().iter().copied())
            .collect();
        Some(Tensor::new(vec![self.entries.len(), self.dim], data).expect("prompt matrix"))
    }

    /// Reorders entries so that new position `i` holds old entry `order[i]`.
    pub fn reorder(&mut self, order: &[usize]) -> Result<()> {
        self.entries = reorder_entries(&self.entries, order)?;
        Ok(())
    }
}

impl ClassifierBank {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[HeadEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [HeadEntry] {
        &mut self.entries
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.class_id).collect()
    }

    /// Head weights `[n, d]` and biases `[n]`.
    pub fn matrices(&self) -> (Tensor, Tensor) {
        let n = self.entries.len();
        let w = self
            .entries
            .iter()
            .flat_map(|e| e.weight.data().iter().copied())
            .collect();
        let b = self.entries.iter().map(|e| e.bias).collect();
        (
            Tensor::new(vec![n, self.dim], w).expect("head matrix"),
            Tensor::new(vec![n], b).expect("bias vector"),
        )
    }

    pub fn reorder(&mut self, order: &[usize]) -> Result<()> {
        self.entries = reorder_entries(&self.entries, order)?;
        Ok(())
    }
}

fn reorder_entries<E: Clone>(entries: &[E], order: &[usize]) -> Result<Vec<E>> {
    let mut seen = vec![false; entries.len()];
    if order.len() != entries.len()
        || order
            .iter()
            .any(|&i| i >= entries.len() || std::mem::replace(&mut seen[i], true))
    {
        return Err(Error::invalid("reorder", format!("{order:?} is not a permutation")));
    }
    Ok(order.iter().map(|&i| entries[i].clone()).collect())
}

/// Precomputed class-name embeddings standing in for the text encoder output.
///
/// The learnable context that a text encoder would consume never reaches
/// this crate; only the resulting per-class vectors matter here.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticInit {
    dim: usize,
    embeddings: BTreeMap<usize, Vec<f64>>,
}

impl SemanticInit {
    pub fn new(embeddings: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        let dim = embeddings
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("semantic_init", "no embeddings"))?;
        if let Some((c, v)) = embeddings.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::invalid(
                "semantic_init",
                format!("class {c} has dimension {} but expected {dim}", v.len()),
            ));
        }
        Ok(Self { dim, embeddings })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn get(&self, class_id: usize) -> Option<&[f64]> {
        self.embeddings.get(&class_id).map(Vec::as_slice)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (c, v) in &self.embeddings {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            out.push_str(&format!("{c}\t{}\n", vals.join(",")));
        }
        out
    }

    /// Maps embedding `class_id` into the prompt space of width `dim`.
    ///
    /// Identity when the widths agree; otherwise a fixed seeded projection
    /// with orthonormal columns (or rows) taken from the QR factorization of
    /// a Gaussian matrix.
    pub fn project(&self, class_id: usize, dim: usize, seed: u64) -> Result<Tensor> {
        let e = self.get(class_id).ok_or_else(|| {
            Error::invalid("semantic_init", format!("no embedding for class {class_id}"))
        })?;
        if self.dim == dim {
            return Ok(Tensor::from_vec(e.to_vec()));
        }
        let proj = projection_matrix(self.dim, dim, seed);
        let out = (0..dim)
            .map(|j| (0..self.dim).map(|i| e[i] * proj[(i, j)]).sum())
            .collect();
        Ok(Tensor::from_vec(out))
    }
}

fn projection_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e3a_171c);
    let (r, c) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

/// Reads `class_id<TAB>v1,v2,...` rows. Blank lines and `#` comments are
/// skipped.
pub fn load_semantic_embeddings(path: impl AsRef<Path>) -> Result<SemanticInit> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_semantic_embeddings(&text, &path.display().to_string())
}

pub fn parse_semantic_embeddings(text: &str, source: &str) -> Result<SemanticInit> {
    let err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut map = BTreeMap::new();
    let mut dim = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| err(line_no, "expected `class_id<TAB>values`".into()))?;
        let class: usize = id
            .trim()
            .parse()
            .map_err(|_| err(line_no, format!("bad class id {id:?}")))?;
        let vec = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(line_no, format!("class {class}: {e}")))?;
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(err(line_no, format!("class {class}: non-finite value")));
        }
        match dim {
            None => dim = Some(vec.len()),
            Some(d) if d != vec.len() => {
                return Err(err(
                    line_no,
                    format!("class {class} has dimension {} but expected {d}", vec.len()),
                ))
            }
            _ => {}
        }
        if map.insert(class, vec).is_some() {
            return Err(err(line_no, format!("duplicate class {class}")));
        }
    }
    if map.is_empty() {
        return Err(err(0, "no embeddings".into()));
    }
    SemanticInit::new(map)
}

#[derive(Clone, Debug)]
pub enum PromptInit<'a> {
    /// Prompts and head weights drawn from N(0, 0.02²), seeded per class.
    Random { seed: u64 },
    /// Prompts from projected class embeddings; heads as in `Random`.
    Semantic { seed: u64, init: &'a SemanticInit },
}

fn class_rng(seed: u64, class_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (class_id as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Adds one trainable prompt and one trainable head per class, keeping
/// canonical order. Nothing is modified if any class is rejected.
pub fn add_class_prompts(
    pool: &mut PromptPool,
    bank: &mut ClassifierBank,
    class_ids: &[usize],
    stage: usize,
    init: &PromptInit<'_>,
) -> Result<()> {
    let dim = pool.dim;
    if bank.dim != dim {
        return Err(Error::invalid("add_class_prompts", "pool and bank widths differ"));
    }
    let mut incoming: Vec<usize> = class_ids.to_vec();
    incoming.sort_unstable();
    for w in incoming.windows(2) {
        if w[0] == w[1] {
            return Err(Error::invalid("add_class_prompts", format!("duplicate class {}", w[0])));
        }
    }
    if let Some(c) = incoming.iter().find(|c| pool.position(**c).is_some()) {
        return Err(Error::invalid("add_class_prompts", format!("class {c} already present")));
    }
    let mut new_prompts = Vec::with_capacity(incoming.len());
    let mut new_heads = Vec::with_capacity(incoming.len());
    for &c in &incoming {
        let (seed, semantic) = match init {
            PromptInit::Random { seed } => (*seed, None),
            PromptInit::Semantic { seed, init } => (*seed, Some(*init)),
        };
        let mut rng = class_rng(seed, c);
        let random_prompt = Tensor::randn(vec![dim], PROMPT_STD, &mut rng);
        let vector = match semantic {
            Some(s) => s.project(c, dim, seed)?,
            None => random_prompt,
        };
        new_prompts.push(PromptEntry {
            class_id: c,
            vector,
            frozen: false,
            stage_added: stage,
        });
        new_heads.push(HeadEntry {
            class_id: c,
            weight: Tensor::randn(vec![dim], PROMPT_STD, &mut rng),
            bias: 0.0,
            frozen: false,
            stage_added: stage,
        });
    }
    pool.entries.extend(new_prompts);
    pool.entries.sort_by_key(|e| e.class_id);
    bank.entries.extend(new_heads);
    bank.entries.sort_by_key(|e| e.class_id);
    Ok(())
}

/// Freezes every prompt and head added before `current_stage`.
pub fn freeze_previous(pool: &mut PromptPool, bank: &mut ClassifierBank, current_stage: usize) {
    for p in &mut pool.entries {
        if p.stage_added < current_stage {
            p.frozen = true;
        }
    }
    for h in &mut bank.entries {
        if h.stage_added < current_stage {
            h.frozen = true;
        }
    }
}

/// Per-class logits `logit_i = w_i · o_P[i] + b_i`.
///
/// `prompt_out` is `[.., n, d]`, `weights` `[n, d]`, `biases` `[n]`; the
/// result is `[.., n]`. Probabilities are `sigmoid(logit)`.
pub fn classify<'t>(prompt_out: &Var<'t>, weights: &Var<'t>, biases: &Var<'t>) -> Result<Var<'t>> {
    let s = prompt_out.shape();
    let ws = weights.shape();
    if s.len() < 2 || ws.len() != 2 || s[s.len() - 2..] != ws[..] || biases.shape() != [ws[0]] {
        return Err(Error::shape("classify", &s, &ws));
    }
    prompt_out.mul(weights)?.sum_last()?.add(biases)
}

/// Sum of squared off-diagonal entries of the Gram matrix of the
/// L2-normalized prompt rows.
pub fn orthogonality_penalty<'t>(prompts: &Var<'t>) -> Result<Var<'t>> {
    let s = prompts.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::invalid("orthogonality_penalty", format!("needs [n >= 1, d], got {s:?}")));
    }
    let n = s[0];
    let unit = prompts.l2_normalize()?;
    let gram = unit.matmul(&unit.transpose()?)?;
    let mut off = Tensor::full(vec![n, n], 1.0);
    for i in 0..n {
        off.data_mut()[i * n + i] = 0.0;
    }
    let masked = gram.mul(&prompts.tape().constant(off))?;
    Ok(masked.mul(&masked)?.sum())
}

/// Convenience: [`orthogonality_penalty`] on a stored pool.
pub fn pool_orthogonality(pool: &PromptPool) -> Result<f64> {
    let m = pool
        .matrix()
        .ok_or_else(|| Error::invalid("orthogonality_penalty", "empty pool"))?;
    let tape = Tape::new();
    Ok(orthogonality_penalty(&tape.constant(m))?.item())
}
