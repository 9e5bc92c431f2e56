//! Parameter layout and forward passes of the trainable architectures.
//!
//! Every architecture has two forward implementations: [`forward_tape`]
//! builds a differentiable graph for a single sequence, and [`forward_batch`]
//! runs padded, masked batches without recording anything.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{sigmoid_f, sliding_windows, Tape, Var};
use super::vocab::PAD;
use crate::error::{Error, Result};

pub type Params = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    AttnBilstm,
    TopjudgeCnn,
    FewshotAttr,
    ExternalAdapter,
    FetOracle,
}

impl Architecture {
    pub const TRAINABLE: [Architecture; 3] = [
        Architecture::AttnBilstm,
        Architecture::TopjudgeCnn,
        Architecture::FewshotAttr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::AttnBilstm => "attn_bilstm",
            Architecture::TopjudgeCnn => "topjudge_cnn",
            Architecture::FewshotAttr => "fewshot_attr",
            Architecture::ExternalAdapter => "external_adapter",
            Architecture::FetOracle => "fet_oracle",
        }
    }

    pub fn is_trainable(self) -> bool {
        Architecture::TRAINABLE.contains(&self)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn_bilstm" => Ok(Architecture::AttnBilstm),
            "topjudge_cnn" => Ok(Architecture::TopjudgeCnn),
            "fewshot_attr" => Ok(Architecture::FewshotAttr),
            "external_adapter" => Ok(Architecture::ExternalAdapter),
            "fet_oracle" => Ok(Architecture::FetOracle),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected attn_bilstm, topjudge_cnn, fewshot_attr, external_adapter or fet_oracle)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    pub embed: usize,
    /// LSTM state size (per direction for attn_bilstm).
    pub hidden: usize,
    pub attention: usize,
    /// CNN filter count.
    pub filters: usize,
    /// CNN window width; must be odd so the output stays aligned with tokens.
    pub window: usize,
    /// State size of each TopJudge task cell.
    pub task_hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            embed: 16,
            hidden: 16,
            attention: 16,
            filters: 32,
            window: 3,
            task_hidden: 16,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("attention", self.attention),
            ("filters", self.filters),
            ("window", self.window),
            ("task_hidden", self.task_hidden),
        ];
        if let Some((name, _)) = all.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("dims.{name} must be positive")));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("dims.window must be odd, got {}", self.window)));
        }
        Ok(())
    }

    /// Width of the token vectors an architecture produces.
    pub fn encoder_width(&self, arch: Architecture) -> usize {
        match arch {
            Architecture::AttnBilstm => 2 * self.hidden,
            Architecture::TopjudgeCnn => self.filters,
            Architecture::FewshotAttr => self.hidden,
            Architecture::ExternalAdapter | Architecture::FetOracle => 0,
        }
    }
}

/// Output sizes of the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSizes {
    pub labels: usize,
    pub articles: usize,
    pub terms: usize,
    pub attributes: usize,
}

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

fn lstm_params(p: &mut Params, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) {
    p.insert(format!("{prefix}.wx"), glorot(input, 4 * hidden, rng));
    p.insert(format!("{prefix}.wh"), glorot(hidden, 4 * hidden, rng));
    let mut b = Array2::zeros((1, 4 * hidden));
    b.slice_mut(s![0, hidden..2 * hidden]).fill(1.0);
    p.insert(format!("{prefix}.b"), b);
}

fn linear(p: &mut Params, prefix: &str, input: usize, output: usize, rng: &mut impl Rng) {
    p.insert(format!("{prefix}.w"), glorot(input, output, rng));
    p.insert(format!("{prefix}.b"), Array2::zeros((1, output)));
}

pub fn init_params(
    arch: Architecture,
    dims: &Dims,
    vocab: usize,
    heads: HeadSizes,
    rng: &mut impl Rng,
) -> Result<Params> {
    dims.validate()?;
    let mut p = Params::new();
    let mut embed = uniform(vocab, dims.embed, 0.5, rng);
    embed.row_mut(PAD).fill(0.0);
    p.insert("embed".into(), embed);
    match arch {
        Architecture::AttnBilstm => {
            lstm_params(&mut p, "fwd", dims.embed, dims.hidden, rng);
            lstm_params(&mut p, "bwd", dims.embed, dims.hidden, rng);
            p.insert("att.w".into(), glorot(2 * dims.hidden, dims.attention, rng));
            p.insert("att.b".into(), Array2::zeros((1, dims.attention)));
            p.insert("att.v".into(), glorot(dims.attention, 1, rng));
            linear(&mut p, "charge", 2 * dims.hidden, heads.labels, rng);
        }
        Architecture::TopjudgeCnn => {
            p.insert("conv.w".into(), glorot(dims.window * dims.embed, dims.filters, rng));
            p.insert("conv.b".into(), Array2::zeros((1, dims.filters)));
            let k = dims.task_hidden;
            for (task, size) in [
                ("article", heads.articles),
                ("charge", heads.labels),
                ("term", heads.terms),
            ] {
                p.insert(format!("{task}.wx"), glorot(dims.filters, k, rng));
                if task != "article" {
                    p.insert(format!("{task}.wh"), glorot(k, k, rng));
                }
                p.insert(format!("{task}.b"), Array2::zeros((1, k)));
                linear(&mut p, &format!("{task}.out"), k, size, rng);
            }
        }
        Architecture::FewshotAttr => {
            lstm_params(&mut p, "lstm", dims.embed, dims.hidden, rng);
            linear(&mut p, "attr", dims.hidden, heads.attributes, rng);
            linear(&mut p, "charge", dims.hidden + heads.attributes, heads.labels, rng);
        }
        other => {
            return Err(Error::Model(format!("`{other}` has no trainable parameters")));
        }
    }
    Ok(p)
}

/// Head outputs of one differentiable forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TapeHeads {
    pub charge: Var,
    pub article: Option<Var>,
    pub term: Option<Var>,
    pub attributes: Option<Var>,
}

pub type ParamVars = BTreeMap<String, Var>;

pub fn load_params(tape: &mut Tape, params: &Params) -> ParamVars {
    params
        .iter()
        .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
        .collect()
}

fn pv(vars: &ParamVars, name: &str) -> Var {
    *vars
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter `{name}`"))
}

fn lstm_tape(tape: &mut Tape, vars: &ParamVars, prefix: &str, x: Var, reverse: bool) -> Var {
    let wx = pv(vars, &format!("{prefix}.wx"));
    let wh = pv(vars, &format!("{prefix}.wh"));
    let b = pv(vars, &format!("{prefix}.b"));
    let hidden = tape.value(wh).nrows();
    let n = tape.value(x).nrows();
    let xw = tape.matmul(x, wx);
    let xw = tape.add_row(xw, b);
    let mut h = tape.leaf(Array2::zeros((1, hidden)));
    let mut c = tape.leaf(Array2::zeros((1, hidden)));
    let mut outputs = vec![h; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let xt = tape.row(xw, t);
        let hw = tape.matmul(h, wh);
        let z = tape.add(xt, hw);
        let i = tape.slice_cols(z, 0, hidden);
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(z, hidden, hidden);
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(z, 2 * hidden, hidden);
        let g = tape.tanh(g);
        let o = tape.slice_cols(z, 3 * hidden, hidden);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c);
        let write = tape.mul(i, g);
        c = tape.add(keep, write);
        let ct = tape.tanh(c);
        h = tape.mul(o, ct);
        outputs[t] = h;
    }
    tape.stack_rows(&outputs)
}

fn linear_tape(tape: &mut Tape, vars: &ParamVars, prefix: &str, x: Var) -> Var {
    let y = tape.matmul(x, pv(vars, &format!("{prefix}.w")));
    tape.add_row(y, pv(vars, &format!("{prefix}.b")))
}

fn task_cell(tape: &mut Tape, vars: &ParamVars, task: &str, fact: Var, prev: Option<Var>) -> Var {
    let mut z = tape.matmul(fact, pv(vars, &format!("{task}.wx")));
    if let Some(h) = prev {
        let hw = tape.matmul(h, pv(vars, &format!("{task}.wh")));
        z = tape.add(z, hw);
    }
    let z = tape.add_row(z, pv(vars, &format!("{task}.b")));
    tape.tanh(z)
}

/// Differentiable forward pass over one token id sequence (no padding).
pub fn forward_tape(
    arch: Architecture,
    dims: &Dims,
    tape: &mut Tape,
    vars: &ParamVars,
    ids: &[usize],
) -> Result<TapeHeads> {
    if ids.is_empty() {
        return Err(Error::Model("cannot run a model on an empty token sequence".into()));
    }
    let x = tape.gather(pv(vars, "embed"), ids, Some(PAD));
    let heads = match arch {
        Architecture::AttnBilstm => {
            let hf = lstm_tape(tape, vars, "fwd", x, false);
            let hb = lstm_tape(tape, vars, "bwd", x, true);
            let h = tape.concat_cols(&[hf, hb]);
            let proj = linear_tape(tape, vars, "att", h);
            let act = tape.tanh(proj);
            let scores = tape.matmul(act, pv(vars, "att.v"));
            let alpha = tape.softmax_col(scores);
            let alpha_t = tape.transpose(alpha);
            let fact = tape.matmul(alpha_t, h);
            TapeHeads {
                charge: linear_tape(tape, vars, "charge", fact),
                article: None,
                term: None,
                attributes: None,
            }
        }
        Architecture::TopjudgeCnn => {
            let win = tape.windows(x, dims.window);
            let conv = linear_tape(tape, vars, "conv", win);
            let conv = tape.tanh(conv);
            let fact = tape.max_rows(conv);
            let ha = task_cell(tape, vars, "article", fact, None);
            let hc = task_cell(tape, vars, "charge", fact, Some(ha));
            let ht = task_cell(tape, vars, "term", fact, Some(hc));
            TapeHeads {
                article: Some(linear_tape(tape, vars, "article.out", ha)),
                charge: linear_tape(tape, vars, "charge.out", hc),
                term: Some(linear_tape(tape, vars, "term.out", ht)),
                attributes: None,
            }
        }
        Architecture::FewshotAttr => {
            let h = lstm_tape(tape, vars, "lstm", x, false);
            let fact = tape.mean_rows(h);
            let attr = linear_tape(tape, vars, "attr", fact);
            let attr_p = tape.sigmoid(attr);
            let joined = tape.concat_cols(&[fact, attr_p]);
            TapeHeads {
                charge: linear_tape(tape, vars, "charge", joined),
                article: None,
                term: None,
                attributes: Some(attr),
            }
        }
        other => return Err(Error::Model(format!("`{other}` has no differentiable forward pass"))),
    };
    Ok(heads)
}

/// Result of the inference forward pass for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// n x d, one row per real (non-padding) token.
    pub token_vectors: Array2<f64>,
    pub fact: Array1<f64>,
    pub charge_logits: Array1<f64>,
    pub article_logits: Option<Array1<f64>>,
    pub term_logits: Option<Array1<f64>>,
    pub attribute_logits: Option<Array1<f64>>,
}

fn param<'a>(params: &'a Params, name: &str) -> Result<&'a Array2<f64>> {
    params
        .get(name)
        .ok_or_else(|| Error::Model(format!("bundle is missing parameter `{name}`")))
}

fn embed_batch(params: &Params, ids: &[Vec<usize>], len: usize) -> Result<Vec<Array2<f64>>> {
    let table = param(params, "embed")?;
    let width = table.ncols();
    (0..len)
        .map(|t| {
            let mut x = Array2::zeros((ids.len(), width));
            for (b, seq) in ids.iter().enumerate() {
                let id = seq.get(t).copied().unwrap_or(PAD);
                if id >= table.nrows() {
                    return Err(Error::Model(format!("token id {id} outside the embedding table")));
                }
                if id != PAD {
                    x.row_mut(b).assign(&table.row(id));
                }
            }
            Ok(x)
        })
        .collect()
}

/// Masked LSTM over a padded batch; returns per-step hidden states (B x h each).
/// Padded steps leave the state untouched, so a sequence's states do not
/// depend on how much padding follows it.
fn lstm_batch(
    params: &Params,
    prefix: &str,
    steps: &[Array2<f64>],
    lens: &[usize],
    reverse: bool,
) -> Result<Vec<Array2<f64>>> {
    let wx = param(params, &format!("{prefix}.wx"))?;
    let wh = param(params, &format!("{prefix}.wh"))?;
    let bias = param(params, &format!("{prefix}.b"))?.row(0);
    let hidden = wh.nrows();
    let batch = lens.len();
    let mut h = Array2::<f64>::zeros((batch, hidden));
    let mut c = Array2::<f64>::zeros((batch, hidden));
    let mut out = vec![Array2::zeros((batch, hidden)); steps.len()];
    let order: Vec<usize> = if reverse {
        (0..steps.len()).rev().collect()
    } else {
        (0..steps.len()).collect()
    };
    for t in order {
        let z = steps[t].dot(wx) + h.dot(wh) + &bias;
        for b in 0..batch {
            if t >= lens[b] {
                continue;
            }
            let zb = z.row(b);
            for j in 0..hidden {
                let i = sigmoid_f(zb[j]);
                let f = sigmoid_f(zb[hidden + j]);
                let g = zb[2 * hidden + j].tanh();
                let o = sigmoid_f(zb[3 * hidden + j]);
                c[[b, j]] = f * c[[b, j]] + i * g;
                h[[b, j]] = o * c[[b, j]].tanh();
            }
        }
        out[t].assign(&h);
    }
    Ok(out)
}

fn linear_vec(params: &Params, prefix: &str, x: &Array1<f64>) -> Result<Array1<f64>> {
    let w = param(params, &format!("{prefix}.w"))?;
    let b = param(params, &format!("{prefix}.b"))?.row(0);
    Ok(x.dot(w) + &b)
}

fn task_cell_vec(
    params: &Params,
    task: &str,
    fact: &Array1<f64>,
    prev: Option<&Array1<f64>>,
) -> Result<Array1<f64>> {
    let mut z = fact.dot(param(params, &format!("{task}.wx"))?);
    if let Some(h) = prev {
        z += &h.dot(param(params, &format!("{task}.wh"))?);
    }
    z += &param(params, &format!("{task}.b"))?.row(0);
    Ok(z.mapv(f64::tanh))
}

fn collect_rows(steps: &[Array2<f64>], b: usize, len: usize) -> Array2<f64> {
    let width = steps.first().map_or(0, |s| s.ncols());
    let mut out = Array2::zeros((len, width));
    for t in 0..len {
        out.row_mut(t).assign(&steps[t].row(b));
    }
    out
}

/// Inference over a batch of token id sequences, padded internally to the
/// longest one. Output `i` corresponds to `batch[i]`.
pub fn forward_batch(
    arch: Architecture,
    dims: &Dims,
    params: &Params,
    batch: &[Vec<usize>],
) -> Result<Vec<Forward>> {
    if batch.iter().any(Vec::is_empty) {
        return Err(Error::Model("cannot run a model on an empty token sequence".into()));
    }
    let lens: Vec<usize> = batch.iter().map(Vec::len).collect();
    let max_len = lens.iter().copied().max().unwrap_or(0);
    let steps = embed_batch(params, batch, max_len)?;
    let mut out = Vec::with_capacity(batch.len());
    match arch {
        Architecture::AttnBilstm => {
            let hf = lstm_batch(params, "fwd", &steps, &lens, false)?;
            let hb = lstm_batch(params, "bwd", &steps, &lens, true)?;
            let att_w = param(params, "att.w")?;
            let att_b = param(params, "att.b")?.row(0);
            let att_v = param(params, "att.v")?.column(0);
            for (b, &n) in lens.iter().enumerate() {
                let h = ndarray::concatenate(
                    Axis(1),
                    &[collect_rows(&hf, b, n).view(), collect_rows(&hb, b, n).view()],
                )
                .expect("equal row counts");
                let scores = (h.dot(att_w) + &att_b).mapv(f64::tanh).dot(&att_v);
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut alpha = scores.mapv(|z| (z - max).exp());
                alpha /= alpha.sum();
                let fact = alpha.dot(&h);
                out.push(Forward {
                    charge_logits: linear_vec(params, "charge", &fact)?,
                    token_vectors: h,
                    fact,
                    article_logits: None,
                    term_logits: None,
                    attribute_logits: None,
                });
            }
        }
        Architecture::TopjudgeCnn => {
            let conv_w = param(params, "conv.w")?;
            let conv_b = param(params, "conv.b")?.row(0);
            for (b, &n) in lens.iter().enumerate() {
                let x = collect_rows(&steps, b, n);
                let conv = (sliding_windows(&x, dims.window).dot(conv_w) + &conv_b).mapv(f64::tanh);
                let fact = conv.fold_axis(Axis(0), f64::NEG_INFINITY, |a, b| a.max(*b));
                let ha = task_cell_vec(params, "article", &fact, None)?;
                let hc = task_cell_vec(params, "charge", &fact, Some(&ha))?;
                let ht = task_cell_vec(params, "term", &fact, Some(&hc))?;
                out.push(Forward {
                    article_logits: Some(linear_vec(params, "article.out", &ha)?),
                    charge_logits: linear_vec(params, "charge.out", &hc)?,
                    term_logits: Some(linear_vec(params, "term.out", &ht)?),
                    token_vectors: conv,
                    fact,
                    attribute_logits: None,
                });
            }
        }
        Architecture::FewshotAttr => {
            let hs = lstm_batch(params, "lstm", &steps, &lens, false)?;
            for (b, &n) in lens.iter().enumerate() {
                let h = collect_rows(&hs, b, n);
                let fact = h.mean_axis(Axis(0)).expect("non-empty sequence");
                let attr = linear_vec(params, "attr", &fact)?;
                let joined = ndarray::concatenate(Axis(0), &[fact.view(), attr.mapv(sigmoid_f).view()])
                    .expect("1-d concat");
                out.push(Forward {
                    charge_logits: linear_vec(params, "charge", &joined)?,
                    token_vectors: h,
                    fact,
                    article_logits: None,
                    term_logits: None,
                    attribute_logits: Some(attr),
                });
            }
        }
        other => return Err(Error::Model(format!("`{other}` has no native forward pass"))),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(arch: Architecture) -> (Dims, Params) {
        let dims = Dims {
            embed: 4,
            hidden: 3,
            attention: 3,
            filters: 5,
            window: 3,
            task_hidden: 3,
        };
        let heads = HeadSizes {
            labels: 3,
            articles: 3,
            terms: 2,
            attributes: 4,
        };
        let params = init_params(arch, &dims, 9, heads, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        (dims, params)
    }

    #[test]
    fn tape_and_batch_paths_agree() {
        for arch in Architecture::TRAINABLE {
            let (dims, params) = setup(arch);
            let ids = vec![2, 5, 1, 8, 3];
            let mut tape = Tape::new();
            let vars = load_params(&mut tape, &params);
            let heads = forward_tape(arch, &dims, &mut tape, &vars, &ids).unwrap();
            let batch = forward_batch(arch, &dims, &params, &[ids]).unwrap();
            let a = tape.value(heads.charge).row(0).to_owned();
            for (x, y) in a.iter().zip(batch[0].charge_logits.iter()) {
                assert!((x - y).abs() < 1e-12, "{arch}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn batching_with_longer_neighbours_changes_nothing() {
        for arch in Architecture::TRAINABLE {
            let (dims, params) = setup(arch);
            let short = vec![4, 2, 7];
            let alone = forward_batch(arch, &dims, &params, &[short.clone()]).unwrap();
            let padded =
                forward_batch(arch, &dims, &params, &[vec![1, 2, 3, 4, 5, 6, 7, 8], short]).unwrap();
            let diff = (&alone[0].token_vectors - &padded[1].token_vectors)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "{arch}: {diff}");
            assert_eq!(alone[0].charge_logits, padded[1].charge_logits);
        }
    }

    #[test]
    fn unknown_architecture_lists_tags() {
        let err = "bert".parse::<Architecture>().unwrap_err().to_string();
        assert!(err.contains("attn_bilstm"));
    }

    #[test]
    fn even_window_is_rejected() {
        let dims = Dims {
            window: 4,
            ..Dims::default()
        };
        assert!(dims.validate().is_err());
    }
}
