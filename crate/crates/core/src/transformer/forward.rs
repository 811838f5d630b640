use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{LinearIdx, Model, Site, InLayerPos};
use crate::dynamics::Tokenized;
use crate::error::{Error, Result};

/// Overwrites an activation in place during a forward pass.
///
/// `act` is the `len × hidden` activation of `site` for one series. The
/// downstream computation reads whatever the patch leaves there.
pub trait Patch: Sync {
    fn apply(&self, series: usize, site: Site, act: &mut [f64]);
}

/// Which activations to keep: `positions[i]` is the token position stored
/// under context index `ctx[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureSpec {
    pub sites: Vec<Site>,
    pub positions: Vec<usize>,
    pub ctx: Vec<usize>,
}

impl CaptureSpec {
    /// Every site at every prediction position.
    pub fn all(model: &Model, tok: &Tokenized) -> Self {
        let positions = tok.ctx_positions();
        Self {
            sites: model.config.sites(),
            ctx: (0..positions.len()).collect(),
            positions,
        }
    }

    /// Every site at the given context indices.
    pub fn at_contexts(model: &Model, tok: &Tokenized, ctx: &[usize]) -> Result<Self> {
        let all = tok.ctx_positions();
        let positions = ctx
            .iter()
            .map(|&c| {
                all.get(c)
                    .copied()
                    .ok_or_else(|| Error::usage(format!("context index {c} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sites: model.config.sites(),
            positions,
            ctx: ctx.to_vec(),
        })
    }
}

/// Activations indexed by `(site, series, context, hidden)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateCapture {
    pub sites: Vec<Site>,
    pub ctx: Vec<usize>,
    pub n_series: usize,
    pub hidden: usize,
    /// One buffer per site, laid out `[series][ctx][hidden]`.
    pub data: Vec<Vec<f64>>,
}

impl HiddenStateCapture {
    pub fn site_index(&self, site: Site) -> Option<usize> {
        self.sites.iter().position(|s| *s == site)
    }

    pub fn ctx_index(&self, ctx: usize) -> Option<usize> {
        self.ctx.iter().position(|c| *c == ctx)
    }

    pub fn get(&self, site_i: usize, series: usize, ctx_i: usize) -> &[f64] {
        let start = (series * self.ctx.len() + ctx_i) * self.hidden;
        &self.data[site_i][start..start + self.hidden]
    }

    /// `n_series × hidden` matrix for one site and context index.
    pub fn matrix(&self, site_i: usize, ctx_i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_series, self.hidden, |r, c| self.get(site_i, r, ctx_i)[c])
    }
}

const CAPTURE_MAGIC: &[u8] = b"OSCPROBE-HS1\n";

#[derive(serde::Serialize, serde::Deserialize)]
struct CaptureHeader {
    site: Site,
    ctx: Vec<usize>,
    n_series: usize,
    hidden: usize,
}

impl HiddenStateCapture {
    /// File name used for one site inside a capture directory.
    pub fn file_name(site: Site) -> String {
        format!("{}.hs", site.to_string().replace(':', "-"))
    }

    /// Write one file per site: a magic line, a JSON header line, then the
    /// `[series][ctx][hidden]` values as little-endian `f64`.
    pub fn save_dir(&self, dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
        let mut paths = Vec::with_capacity(self.sites.len());
        for (site, data) in self.sites.iter().zip(&self.data) {
            let header = CaptureHeader {
                site: *site,
                ctx: self.ctx.clone(),
                n_series: self.n_series,
                hidden: self.hidden,
            };
            let mut bytes = CAPTURE_MAGIC.to_vec();
            bytes.extend(serde_json::to_vec(&header)?);
            bytes.push(b'\n');
            bytes.reserve(data.len() * 8);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let path = dir.join(Self::file_name(*site));
            crate::io::write_atomic(&path, &bytes)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Read the given sites back from a capture directory.
    pub fn load_dir(dir: &std::path::Path, sites: &[Site]) -> Result<Self> {
        let mut out: Option<Self> = None;
        for &site in sites {
            let path = dir.join(Self::file_name(site));
            let bytes = std::fs::read(&path)?;
            let bad = |detail: &str| Error::Schema {
                path: path.clone(),
                detail: detail.to_string(),
            };
            let rest = bytes.strip_prefix(CAPTURE_MAGIC).ok_or_else(|| bad("not a capture file"))?;
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
            let header: CaptureHeader = serde_json::from_slice(&rest[..nl])?;
            let body = &rest[nl + 1..];
            let expect = header.n_series * header.ctx.len() * header.hidden;
            if header.site != site || body.len() != expect * 8 {
                return Err(bad("header does not match contents"));
            }
            let data: Vec<f64> = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            match out.as_mut() {
                None => {
                    out = Some(Self {
                        sites: vec![site],
                        ctx: header.ctx,
                        n_series: header.n_series,
                        hidden: header.hidden,
                        data: vec![data],
                    })
                }
                Some(c) => {
                    if c.ctx != header.ctx || c.n_series != header.n_series || c.hidden != header.hidden {
                        return Err(bad("capture files disagree on shape"));
                    }
                    c.sites.push(site);
                    c.data.push(data);
                }
            }
        }
        out.ok_or_else(|| Error::usage("no sites requested"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Predictions at the context positions: `n_series × n_ctx × token_dim`.
    pub preds: Vec<f64>,
    pub n_series: usize,
    pub n_ctx: usize,
    pub token_dim: usize,
    pub capture: Option<HiddenStateCapture>,
}

impl RunOutput {
    pub fn pred(&self, series: usize, ctx: usize) -> &[f64] {
        let start = (series * self.n_ctx + ctx) * self.token_dim;
        &self.preds[start..start + self.token_dim]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[t] = W·x[t] + b` for `rows` rows.
pub(crate) fn linear(params: &[f64], li: LinearIdx, x: &[f64], rows: usize) -> Vec<f64> {
    let w = &params[li.w..li.w + li.out * li.inp];
    let b = &params[li.b..li.b + li.out];
    let mut out = vec![0.0; rows * li.out];
    for r in 0..rows {
        let xr = &x[r * li.inp..(r + 1) * li.inp];
        let or = &mut out[r * li.out..(r + 1) * li.out];
        for o in 0..li.out {
            or[o] = b[o] + dot(&w[o * li.inp..(o + 1) * li.inp], xr);
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// Intermediate buffers of one layer, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache {
    pub h_in: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Row-major `len × len`, lower triangle used.
    pub probs: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct SeqCache {
    pub layers: Vec<LayerCache>,
    pub h_final: Vec<f64>,
}

impl Model {
    /// Forward pass over the first `len` tokens of one series. Returns the
    /// `len × token_dim` readout. `hook` sees every site's activation right
    /// after it is computed and may overwrite it.
    pub(crate) fn forward_seq(
        &self,
        tokens: &[f64],
        len: usize,
        hook: &mut dyn FnMut(Site, &mut [f64]),
        mut cache: Option<&mut SeqCache>,
    ) -> Vec<f64> {
        let p = &self.params;
        let h = self.config.hidden;
        let lay = &self.layout;

        let mut hs = linear(p, lay.embed, tokens, len);
        for t in 0..len {
            axpy(&mut hs[t * h..(t + 1) * h], 1.0, &p[lay.pos + t * h..lay.pos + (t + 1) * h]);
        }
        hook(Site::EMBED, &mut hs);

        let scale = 1.0 / (h as f64).sqrt();
        for (l, li) in lay.layers.iter().enumerate() {
            let q = linear(p, li.q, &hs, len);
            let k = linear(p, li.k, &hs, len);
            let v = linear(p, li.v, &hs, len);
            let mut probs = vec![0.0; len * len];
            let mut z = vec![0.0; len * h];
            for i in 0..len {
                let qi = &q[i * h..(i + 1) * h];
                let row = &mut probs[i * len..i * len + i + 1];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k[j * h..(j + 1) * h]) * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let zi = &mut z[i * h..(i + 1) * h];
                for (j, s) in row.iter_mut().enumerate() {
                    *s /= sum;
                    axpy(zi, *s, &v[j * h..(j + 1) * h]);
                }
            }
            let mut a = linear(p, li.o, &z, len);
            hook(Site::new(l, InLayerPos::Attn), &mut a);
            let mut r = hs.clone();
            axpy(&mut r, 1.0, &a);
            hook(Site::new(l, InLayerPos::AttnRes), &mut r);
            let u = linear(p, li.mlp_in, &r, len);
            let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
            let mut m = linear(p, li.mlp_out, &g, len);
            hook(Site::new(l, InLayerPos::Mlp), &mut m);
            let mut out = r.clone();
            axpy(&mut out, 1.0, &m);
            hook(Site::new(l, InLayerPos::MlpRes), &mut out);
            let h_in = std::mem::replace(&mut hs, out);
            if let Some(c) = cache.as_deref_mut() {
                c.layers.push(LayerCache {
                    h_in,
                    q,
                    k,
                    v,
                    probs,
                    z,
                    r,
                    u,
                    g,
                });
            }
        }
        let y = linear(p, lay.readout, &hs, len);
        if let Some(c) = cache {
            c.h_final = hs;
        }
        y
    }

    /// Run every series of `tok`, optionally capturing and/or patching.
    pub fn run(
        &self,
        tok: &Tokenized,
        capture: Option<&CaptureSpec>,
        patch: Option<&dyn Patch>,
    ) -> Result<RunOutput> {
        let len = tok.input_len();
        if tok.seq_len > self.config.max_seq_len {
            return Err(Error::usage(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tok.seq_len, self.config.max_seq_len
            )));
        }
        if tok.token_dim != self.config.token_dim {
            return Err(Error::usage(format!(
                "token width {} but model expects {}",
                tok.token_dim, self.config.token_dim
            )));
        }
        if let Some(spec) = capture {
            if let Some(bad) = spec.sites.iter().find(|s| s.index() > 4 * self.config.layers
                || (s.pos != InLayerPos::Embed && s.layer >= self.config.layers))
            {
                return Err(Error::usage(format!("site {bad} not in model")));
            }
            if spec.positions.iter().any(|&p| p >= len) {
                return Err(Error::usage("capture position beyond the input"));
            }
        }
        let ctx_pos = tok.ctx_positions();
        let d = tok.token_dim;
        let h = self.config.hidden;
        let per_series: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..tok.n_series)
            .into_par_iter()
            .map(|series| {
                let mut captured: Vec<Vec<f64>> = capture
                    .map(|s| vec![Vec::with_capacity(s.positions.len() * h); s.sites.len()])
                    .unwrap_or_default();
                let mut hook = |site: Site, act: &mut [f64]| {
                    if let Some(p) = patch {
                        p.apply(series, site, act);
                    }
                    if let Some(spec) = capture {
                        if let Some(si) = spec.sites.iter().position(|s| *s == site) {
                            for &pos in &spec.positions {
                                captured[si].extend_from_slice(&act[pos * h..(pos + 1) * h]);
                            }
                        }
                    }
                };
                let y = self.forward_seq(tok.series(series), len, &mut hook, None);
                let preds = ctx_pos
                    .iter()
                    .flat_map(|&pos| y[pos * d..(pos + 1) * d].iter().copied())
                    .collect();
                (preds, captured)
            })
            .collect();

        let mut preds = Vec::with_capacity(tok.n_series * ctx_pos.len() * d);
        let capture_out = capture.map(|spec| HiddenStateCapture {
            sites: spec.sites.clone(),
            ctx: spec.ctx.clone(),
            n_series: tok.n_series,
            hidden: h,
            data: vec![Vec::with_capacity(tok.n_series * spec.positions.len() * h); spec.sites.len()],
        });
        let mut capture_out = capture_out;
        for (p, captured) in per_series {
            preds.extend_from_slice(&p);
            if let Some(c) = capture_out.as_mut() {
                for (dst, src) in c.data.iter_mut().zip(captured) {
                    dst.extend_from_slice(&src);
                }
            }
        }
        Ok(RunOutput {
            preds,
            n_series: tok.n_series,
            n_ctx: ctx_pos.len(),
            token_dim: d,
            capture: capture_out,
        })
    }

    /// Readout at every position for one token sequence (no batching).
    pub fn predict_sequence(&self, tokens: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.token_dim;
        if !tokens.len().is_multiple_of(d) {
            return Err(Error::usage("token buffer is not a whole number of tokens"));
        }
        let len = tokens.len() / d;
        if len > self.config.max_seq_len {
            return Err(Error::usage(format!(
                "sequence of {len} tokens exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        Ok(self.forward_seq(tokens, len, &mut |_, _| {}, None))
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use crate::dynamics::{generate_linreg, tokenize, LinregConfig};

    #[test]
    fn future_tokens_do_not_leak() {
        let model = Model::init(ModelConfig::new(2, 4, 1, 12, 3)).unwrap();
        let base: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = model.predict_sequence(&base).unwrap();
        for i in 0..11 {
            let mut changed = base.clone();
            for v in &mut changed[i + 1..] {
                *v = -*v + 0.5;
            }
            let y2 = model.predict_sequence(&changed).unwrap();
            assert_eq!(y[..=i], y2[..=i], "position {i}");
        }
    }

    #[test]
    fn over_length_is_rejected() {
        let model = Model::init(ModelConfig::new(1, 2, 1, 4, 0)).unwrap();
        assert!(matches!(model.predict_sequence(&[0.0; 5]), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_input_gives_finite_output() {
        let model = Model::init(ModelConfig::new(3, 8, 2, 16, 5)).unwrap();
        let y = model.predict_sequence(&[0.0; 32]).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn capture_does_not_change_predictions() {
        let data = generate_linreg(&LinregConfig::train(20, 6), 1).unwrap();
        let tok = tokenize(&data);
        let model = Model::init(ModelConfig::new(2, 4, 1, tok.seq_len, 8)).unwrap();
        let plain = model.run(&tok, None, None).unwrap();
        let spec = CaptureSpec::all(&model, &tok);
        let captured = model.run(&tok, Some(&spec), None).unwrap();
        assert_eq!(plain.preds, captured.preds);
        let cap = captured.capture.unwrap();
        assert_eq!(cap.sites.len(), 4 * 2 + 1);
        assert_eq!(cap.data[0].len(), 20 * 6 * 4);

        let dir = tempfile::tempdir().unwrap();
        cap.save_dir(dir.path()).unwrap();
        let back = HiddenStateCapture::load_dir(dir.path(), &cap.sites).unwrap();
        assert_eq!(back, cap);
        let one = HiddenStateCapture::load_dir(dir.path(), &cap.sites[3..4]).unwrap();
        assert_eq!(one.data[0], cap.data[3]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for u in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(u + 1e-6) - gelu(u - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }
}
