//! Losses (weighted BCE, response-level and feature-level distillation) and
//! the file-based teacher: artifact format, lookup, and mock-teacher
//! training for end-to-end runs without an external network.

use crate::error::{Error, Result};
use crate::model::Params;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::rc::Rc;

pub const TEACHER_MAGIC: &[u8; 6] = b"SNTA1\0";

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

fn clamp_prob<S: Scalar>(p: S) -> S {
    let lo = S::of_f64(PROB_EPS);
    let hi = S::one() - lo;
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

/// Loss mixing weights and softening temperature for the distillation terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { alpha: 1.0, beta: 1.0, temperature: 2.0 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("distill.temperature must be positive".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("distill.alpha and distill.beta must be nonnegative".into()));
        }
        Ok(())
    }
}

// --- per-attribute BCE weights -------------------------------------------

#[derive(Debug, Clone)]
pub struct AttrWeights<S> {
    pub pos: Vec<S>,
    pub neg: Vec<S>,
}

impl<S: Scalar> AttrWeights<S> {
    /// Imbalance weights from training-set positive ratios r_j:
    /// w_pos = exp(1 - r_j), w_neg = exp(r_j).
    pub fn from_ratios(ratios: &[f64]) -> Self {
        AttrWeights {
            pos: ratios.iter().map(|r| S::of_f64((1.0 - r).exp())).collect(),
            neg: ratios.iter().map(|r| S::of_f64(r.exp())).collect(),
        }
    }

    /// Unit weights (plain BCE).
    pub fn uniform(m: usize) -> Self {
        AttrWeights { pos: vec![S::one(); m], neg: vec![S::one(); m] }
    }
}

/// Positive ratio per attribute from a `[N, M]` 0/1 label matrix.
pub fn positive_ratios<S: Scalar>(labels: &Tensor<S>) -> Result<Vec<f64>> {
    if labels.shape.len() != 2 {
        return Err(Error::Dimension {
            op: "positive_ratios",
            msg: format!("expected [N, M] labels, got {:?}", labels.shape),
        });
    }
    let (n, m) = (labels.shape[0], labels.shape[1]);
    let mut r = vec![0.0f64; m];
    for i in 0..n {
        for j in 0..m {
            r[j] += labels.data[i * m + j].as_f64();
        }
    }
    Ok(r.iter().map(|s| s / n.max(1) as f64).collect())
}

impl<S: Scalar> Tape<S> {
    /// Weighted binary cross-entropy over logits `[B, M]` against 0/1
    /// labels, summed over attributes and averaged over the batch.
    pub fn weighted_bce(&self, logits: Var, labels: &Tensor<S>, w: &AttrWeights<S>) -> Result<Var> {
        let vz = self.value(logits);
        if vz.shape != labels.shape || vz.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "weighted_bce",
                lhs: vz.shape.clone(),
                rhs: labels.shape.clone(),
            });
        }
        let (b, m) = (vz.shape[0], vz.shape[1]);
        if w.pos.len() != m || w.neg.len() != m {
            return Err(Error::Dimension {
                op: "weighted_bce",
                msg: format!("{} weights for {} attributes", w.pos.len(), m),
            });
        }
        if labels.data.iter().any(|&y| y != S::zero() && y != S::one()) {
            return Err(Error::Validation("labels must be exactly 0 or 1".into()));
        }
        if !vz.all_finite() {
            return Err(Error::Validation("non-finite logit in weighted_bce".into()));
        }
        let inv_b = S::one() / S::of_usize(b);
        let mut loss = S::zero();
        for i in 0..b {
            for j in 0..m {
                let z = vz.data[i * m + j];
                let y = labels.data[i * m + j];
                loss -= w.pos[j] * y * z.log_sigmoid() + w.neg[j] * (S::one() - y) * (-z).log_sigmoid();
            }
        }
        loss *= inv_b;
        let cz = Rc::clone(&vz);
        let labels = labels.clone();
        let (wp, wn) = (w.pos.clone(), w.neg.clone());
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Some(Box::new(move |g| {
                let go = g[0] * inv_b;
                let mut dz = vec![S::zero(); cz.data.len()];
                for i in 0..b {
                    for j in 0..m {
                        let q = cz.data[i * m + j].sigmoid();
                        let y = labels.data[i * m + j];
                        dz[i * m + j] =
                            go * (wp[j] * y * (q - S::one()) + wn[j] * (S::one() - y) * q);
                    }
                }
                vec![Some(dz)]
            })),
        ))
    }

    /// Response-level distillation: per-attribute Bernoulli KL between the
    /// temperature-softened teacher probability and the student probability
    /// sigma(z / tau), scaled by tau^2; mean over batch and attributes.
    pub fn resp_kd(&self, logits: Var, teacher_probs: &Tensor<S>, tau: S) -> Result<Var> {
        let vz = self.value(logits);
        if vz.shape != teacher_probs.shape || vz.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "resp_kd",
                lhs: vz.shape.clone(),
                rhs: teacher_probs.shape.clone(),
            });
        }
        if tau <= S::zero() {
            return Err(Error::Config("distillation temperature must be positive".into()));
        }
        let (b, m) = (vz.shape[0], vz.shape[1]);
        let inv_bm = S::one() / S::of_usize(b * m);
        let tau2 = tau * tau;
        // soften the teacher through the same temperature: sigma(logit(p)/tau)
        let soft_p: Vec<S> = teacher_probs
            .data
            .iter()
            .map(|&p| {
                let pc = clamp_prob(p);
                clamp_prob(((pc / (S::one() - pc)).ln() / tau).sigmoid())
            })
            .collect();
        let mut loss = S::zero();
        for i in 0..b * m {
            let p = soft_p[i];
            let q = clamp_prob((vz.data[i] / tau).sigmoid());
            // true KL is nonnegative; the max clips rounding at p == q
            let kl = p * (p / q).ln() + (S::one() - p) * ((S::one() - p) / (S::one() - q)).ln();
            loss += tau2 * kl.max(S::zero());
        }
        loss *= inv_bm;
        let cz = Rc::clone(&vz);
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Some(Box::new(move |g| {
                let go = g[0] * inv_bm * tau;
                let dz: Vec<S> = cz
                    .data
                    .iter()
                    .zip(&soft_p)
                    .map(|(&z, &p)| go * ((z / tau).sigmoid() - p))
                    .collect();
                vec![Some(dz)]
            })),
        ))
    }

    /// Batch-mean KL(softmax(teacher_row) || softmax(student_row)) over
    /// `[B, M]` similarity logits.
    pub fn softmax_kl(&self, student: Var, teacher: &Tensor<S>) -> Result<Var> {
        let vs = self.value(student);
        if vs.shape != teacher.shape || vs.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_kl",
                lhs: vs.shape.clone(),
                rhs: teacher.shape.clone(),
            });
        }
        let (b, m) = (vs.shape[0], vs.shape[1]);
        let inv_b = S::one() / S::of_usize(b);
        let softmax_row = |row: &[S]| -> Vec<S> {
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let ex: Vec<S> = row.iter().map(|&x| (x - mx).exp()).collect();
            let z: S = ex.iter().fold(S::zero(), |a, &b| a + b);
            ex.iter().map(|&e| e / z).collect()
        };
        let mut loss = S::zero();
        let mut p_rows = Vec::with_capacity(b * m);
        let mut q_rows = Vec::with_capacity(b * m);
        for i in 0..b {
            let p = softmax_row(&teacher.data[i * m..(i + 1) * m]);
            let q = softmax_row(&vs.data[i * m..(i + 1) * m]);
            for j in 0..m {
                let (pj, qj) = (clamp_prob(p[j]), clamp_prob(q[j]));
                if p[j] > S::zero() {
                    loss += pj * (pj / qj).ln();
                }
            }
            p_rows.extend(p);
            q_rows.extend(q);
        }
        loss *= inv_b;
        Ok(self.push(
            Tensor::scalar(loss),
            &[student],
            Some(Box::new(move |g| {
                let go = g[0] * inv_b;
                let dz: Vec<S> =
                    q_rows.iter().zip(&p_rows).map(|(&q, &p)| go * (q - p)).collect();
                vec![Some(dz)]
            })),
        ))
    }

    /// Cosine similarity of each row of `x: [B, D]` against each row of
    /// `rows: [M, D]` -> `[B, M]`. Zero-norm rows on either side are a
    /// validation error (cosine undefined).
    pub fn cosine_rows(&self, x: Var, rows: &Tensor<S>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape.len() != 2 || rows.shape.len() != 2 || vx.shape[1] != rows.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "cosine_rows",
                lhs: vx.shape.clone(),
                rhs: rows.shape.clone(),
            });
        }
        let (b, d) = (vx.shape[0], vx.shape[1]);
        let m = rows.shape[0];
        let norm = |row: &[S]| -> S {
            row.iter().map(|&v| v * v).fold(S::zero(), |a, c| a + c).sqrt()
        };
        let mut rn = Vec::with_capacity(m);
        for j in 0..m {
            let n = norm(&rows.data[j * d..(j + 1) * d]);
            if n <= S::zero() {
                return Err(Error::Validation(format!("cosine_rows: row {j} has zero norm")));
            }
            rn.push(n);
        }
        let mut xn = Vec::with_capacity(b);
        for i in 0..b {
            let n = norm(&vx.data[i * d..(i + 1) * d]);
            if n <= S::zero() {
                return Err(Error::Validation(format!("cosine_rows: feature {i} has zero norm")));
            }
            xn.push(n);
        }
        let mut out = vec![S::zero(); b * m];
        for i in 0..b {
            for j in 0..m {
                let dot = (0..d).fold(S::zero(), |a, k| a + vx.data[i * d + k] * rows.data[j * d + k]);
                out[i * m + j] = dot / (xn[i] * rn[j]);
            }
        }
        let cx = Rc::clone(&vx);
        let rows = rows.clone();
        let out_t = Tensor::new(vec![b, m], out.clone())?;
        Ok(self.push(
            out_t,
            &[x],
            Some(Box::new(move |g| {
                // d cos(x, r) / dx = r/(|x||r|) - cos * x/|x|^2
                let mut dx = vec![S::zero(); cx.data.len()];
                for i in 0..b {
                    let inv_xn2 = S::one() / (xn[i] * xn[i]);
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == S::zero() {
                            continue;
                        }
                        let scale_r = gij / (xn[i] * rn[j]);
                        let scale_x = gij * out[i * m + j] * inv_xn2;
                        for k in 0..d {
                            dx[i * d + k] +=
                                scale_r * rows.data[j * d + k] - scale_x * cx.data[i * d + k];
                        }
                    }
                }
                vec![Some(dx)]
            })),
        ))
    }

    /// Feature-level distillation: project student features `[B, D_s]` into
    /// the teacher space, take cosine similarities of both feature sets
    /// against the teacher attribute embeddings `F_t: [M, D_t]`, and match
    /// the softmax similarity distributions (temperature 1).
    #[allow(clippy::too_many_arguments)]
    pub fn feat_kd(
        &self,
        features: Var,
        proj_w: Var,
        proj_b: Var,
        attr_embeddings: &Tensor<S>,
        teacher_feats: &Tensor<S>,
    ) -> Result<Var> {
        if attr_embeddings.shape.len() != 2 || teacher_feats.shape.len() != 2 {
            return Err(Error::Dimension {
                op: "feat_kd",
                msg: "attr_embeddings and teacher_feats must be rank 2".into(),
            });
        }
        let (m, dt) = (attr_embeddings.shape[0], attr_embeddings.shape[1]);
        let b = teacher_feats.shape[0];
        if teacher_feats.shape[1] != dt {
            return Err(Error::ShapeMismatch {
                op: "feat_kd",
                lhs: teacher_feats.shape.clone(),
                rhs: attr_embeddings.shape.clone(),
            });
        }
        let projected = self.linear(features, proj_w, proj_b)?;
        let g_s = self.cosine_rows(projected, attr_embeddings)?;
        // teacher side is constant: cos(F_v_b, F_t_j)
        let norm = |row: &[S]| -> S {
            row.iter().map(|&v| v * v).fold(S::zero(), |a, c| a + c).sqrt()
        };
        let mut g_t = vec![S::zero(); b * m];
        for i in 0..b {
            let frow = &teacher_feats.data[i * dt..(i + 1) * dt];
            let fnorm = norm(frow);
            if fnorm <= S::zero() {
                return Err(Error::Validation(format!("teacher feature {i} has zero norm")));
            }
            for j in 0..m {
                let erow = &attr_embeddings.data[j * dt..(j + 1) * dt];
                let enorm = norm(erow);
                if enorm <= S::zero() {
                    return Err(Error::Validation(format!("attribute embedding {j} has zero norm")));
                }
                let dot = frow.iter().zip(erow).fold(S::zero(), |a, (&x, &y)| a + x * y);
                g_t[i * m + j] = dot / (fnorm * enorm);
            }
        }
        self.softmax_kl(g_s, &Tensor::new(vec![b, m], g_t)?)
    }

    /// L_total = CE + alpha * resp + beta * feat. With alpha = beta = 0 this
    /// returns `ce` itself, bit-identical.
    pub fn total_loss(
        &self,
        ce: Var,
        resp: Option<Var>,
        feat: Option<Var>,
        alpha: S,
        beta: S,
    ) -> Result<Var> {
        let mut total = ce;
        if alpha != S::zero() {
            if let Some(r) = resp {
                total = self.add(total, self.scale(r, alpha))?;
            }
        }
        if beta != S::zero() {
            if let Some(f) = feat {
                total = self.add(total, self.scale(f, beta))?;
            }
        }
        Ok(total)
    }
}

// --- teacher artifact ------------------------------------------------------

/// File-based teacher: attribute embeddings plus per-sample probabilities
/// and visual features, keyed by dataset sample id.
#[derive(Debug, Clone)]
pub struct TeacherArtifact<S> {
    /// `[M, D_t]` attribute embedding matrix (classifier rows).
    pub attr_embeddings: Tensor<S>,
    pub sample_ids: Vec<u64>,
    /// `[n, M]` sigmoid probabilities.
    pub probs: Tensor<S>,
    /// `[n, D_t]` penultimate features.
    pub feats: Tensor<S>,
    index: HashMap<u64, usize>,
}

impl<S: Scalar> TeacherArtifact<S> {
    pub fn new(
        attr_embeddings: Tensor<S>,
        sample_ids: Vec<u64>,
        probs: Tensor<S>,
        feats: Tensor<S>,
    ) -> Result<Self> {
        let art = TeacherArtifact {
            index: sample_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
            attr_embeddings,
            sample_ids,
            probs,
            feats,
        };
        art.validate()?;
        Ok(art)
    }

    pub fn num_attributes(&self) -> usize {
        self.attr_embeddings.shape[0]
    }

    pub fn teacher_dim(&self) -> usize {
        self.attr_embeddings.shape[1]
    }

    fn validate(&self) -> Result<()> {
        let n = self.sample_ids.len();
        if self.attr_embeddings.shape.len() != 2 {
            return Err(Error::Integrity("teacher attr_embeddings must be [M, D_t]".into()));
        }
        let (m, dt) = (self.num_attributes(), self.teacher_dim());
        if self.probs.shape != vec![n, m] || self.feats.shape != vec![n, dt] {
            return Err(Error::Integrity(format!(
                "teacher artifact dims inconsistent: {} samples, probs {:?}, feats {:?}",
                n, self.probs.shape, self.feats.shape
            )));
        }
        if self.index.len() != n {
            return Err(Error::Integrity("duplicate sample id in teacher artifact".into()));
        }
        if !self.attr_embeddings.all_finite() || !self.probs.all_finite() || !self.feats.all_finite() {
            return Err(Error::Integrity("non-finite value in teacher artifact".into()));
        }
        for p in &self.probs.data {
            if *p < S::zero() || *p > S::one() {
                return Err(Error::Integrity("teacher probability outside [0, 1]".into()));
            }
        }
        for j in 0..m {
            let row = &self.attr_embeddings.data[j * dt..(j + 1) * dt];
            let norm: S = row.iter().map(|&x| x * x).fold(S::zero(), |a, b| a + b);
            if norm <= S::zero() {
                return Err(Error::Integrity(format!("attribute embedding {j} has zero norm")));
            }
        }
        for i in 0..n {
            let row = &self.feats.data[i * dt..(i + 1) * dt];
            let norm: S = row.iter().map(|&x| x * x).fold(S::zero(), |a, b| a + b);
            if norm <= S::zero() {
                return Err(Error::Integrity(format!(
                    "teacher feature for sample {} has zero norm",
                    self.sample_ids[i]
                )));
            }
        }
        Ok(())
    }

    /// Row index for a sample id; missing ids are an integrity error.
    pub fn index_of(&self, id: u64) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Integrity(format!("sample id {id} missing from teacher artifact")))
    }

    /// Gathers `[B, M]` probabilities and `[B, D_t]` features for a batch.
    pub fn gather(&self, ids: &[u64]) -> Result<(Tensor<S>, Tensor<S>)> {
        let (m, dt) = (self.num_attributes(), self.teacher_dim());
        let mut p = Vec::with_capacity(ids.len() * m);
        let mut f = Vec::with_capacity(ids.len() * dt);
        for &id in ids {
            let i = self.index_of(id)?;
            p.extend_from_slice(&self.probs.data[i * m..(i + 1) * m]);
            f.extend_from_slice(&self.feats.data[i * dt..(i + 1) * dt]);
        }
        Ok((Tensor::new(vec![ids.len(), m], p)?, Tensor::new(vec![ids.len(), dt], f)?))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(TEACHER_MAGIC)?;
        let n = self.sample_ids.len();
        let (m, dt) = (self.num_attributes(), self.teacher_dim());
        for v in [n as u64, m as u64, dt as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for x in &self.attr_embeddings.data {
            w.write_all(&x.as_f32().to_le_bytes())?;
        }
        for i in 0..n {
            w.write_all(&self.sample_ids[i].to_le_bytes())?;
            for x in &self.probs.data[i * m..(i + 1) * m] {
                w.write_all(&x.as_f32().to_le_bytes())?;
            }
            for x in &self.feats.data[i * dt..(i + 1) * dt] {
                w.write_all(&x.as_f32().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != TEACHER_MAGIC {
            return Err(Error::Format(format!("{}: bad teacher artifact magic", path.display())));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let n = read_u64(&mut r)? as usize;
        let m = read_u64(&mut r)? as usize;
        let dt = read_u64(&mut r)? as usize;
        if m == 0 || dt == 0 {
            return Err(Error::Format("teacher artifact with zero attribute or feature dim".into()));
        }
        let read_f32s = |r: &mut dyn Read, count: usize| -> Result<Vec<S>> {
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(4)
                .map(|c| S::of_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect())
        };
        let ft = Tensor::new(vec![m, dt], read_f32s(&mut r, m * dt)?)?;
        let mut ids = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n * m);
        let mut feats = Vec::with_capacity(n * dt);
        for _ in 0..n {
            let mut idb = [0u8; 8];
            r.read_exact(&mut idb)?;
            ids.push(u64::from_le_bytes(idb));
            probs.extend(read_f32s(&mut r, m)?);
            feats.extend(read_f32s(&mut r, dt)?);
        }
        let mut trail = [0u8; 1];
        if r.read(&mut trail)? != 0 {
            return Err(Error::Format("trailing bytes after teacher artifact payload".into()));
        }
        TeacherArtifact::new(
            ft,
            ids,
            Tensor::new(vec![n, m], probs)?,
            Tensor::new(vec![n, dt], feats)?,
        )
    }
}

// --- mock teacher -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MockTeacherConfig {
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MockTeacherConfig {
    fn default() -> Self {
        MockTeacherConfig { feature_dim: 16, epochs: 20, batch_size: 32, lr: 3e-3, seed: 7 }
    }
}

struct MockTeacherNet<S> {
    params: Params<S>,
    feature_dim: usize,
}

impl<S: Scalar> MockTeacherNet<S> {
    /// `rows` is the feature-map height after both stride-2 convolutions;
    /// width is averaged out but the rows are kept, so vertically localized
    /// attributes stay separable after pooling.
    fn new(in_ch: usize, m: usize, feature_dim: usize, rows: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let hidden = 16;
        let mut init = |shape: &[usize], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| S::of_f64(rand::Rng::gen_range(&mut rng, -bound..bound)))
        };
        let w1 = init(&[8, in_ch, 3, 3], in_ch * 9);
        let w2 = init(&[hidden, 8, 3, 3], 8 * 9);
        let wf = init(&[hidden * rows, feature_dim], hidden * rows);
        let wc = init(&[feature_dim, m], feature_dim);
        params.add("conv1", w1);
        params.add("conv2", w2);
        params.add("feat.weight", wf);
        params.add("feat.bias", Tensor::zeros(&[feature_dim]));
        params.add("cls.weight", wc);
        params.add("cls.bias", Tensor::zeros(&[m]));
        MockTeacherNet { params, feature_dim }
    }

    /// Returns (features, logits) for an image batch.
    fn forward(&self, tape: &Tape<S>, bound: &[Var], images: Tensor<S>) -> Result<(Var, Var)> {
        let x = tape.constant(images);
        let h1 = tape.relu(tape.conv2d(x, bound[0], 2, 1)?);
        let h2 = tape.relu(tape.conv2d(h1, bound[1], 2, 1)?);
        // average over width only: view [B, C, H, W] as [B, C*H, 1, W]
        let s = tape.shape(h2);
        let rows = tape.reshape(h2, vec![s[0], s[1] * s[2], 1, s[3]])?;
        let pooled = tape.pool_spatial(rows)?; // [B, C*H]
        let feats = tape.tanh_op(tape.linear(pooled, bound[2], bound[3])?);
        let logits = tape.linear(feats, bound[4], bound[5])?;
        Ok((feats, logits))
    }
}

/// Trains a small dense conv net on (images, labels) and dumps a teacher
/// artifact: per-sample probabilities/features and the classifier rows as
/// attribute embeddings.
pub fn train_mock_teacher<S: Scalar>(
    images: &Tensor<S>,
    labels: &Tensor<S>,
    ids: &[u64],
    cfg: &MockTeacherConfig,
) -> Result<TeacherArtifact<S>> {
    if images.shape.len() != 4 || labels.shape.len() != 2 || images.shape[0] != labels.shape[0] {
        return Err(Error::Dimension {
            op: "train_mock_teacher",
            msg: format!("images {:?} vs labels {:?}", images.shape, labels.shape),
        });
    }
    let n = images.shape[0];
    if ids.len() != n {
        return Err(Error::Dimension {
            op: "train_mock_teacher",
            msg: format!("{} ids for {n} samples", ids.len()),
        });
    }
    let (c, h, w) = (images.shape[1], images.shape[2], images.shape[3]);
    let m = labels.shape[1];
    // feature-map height after two 3x3 stride-2 pad-1 convolutions
    let conv_h = |x: usize| (x + 2 - 3) / 2 + 1;
    let rows = conv_h(conv_h(h));
    let mut net = MockTeacherNet::<S>::new(c, m, cfg.feature_dim, rows, cfg.seed);
    let mut opt = Adam::new(&net.params, AdamConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() });
    let weights = AttrWeights::uniform(m);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let per = c * h * w;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let bound: Vec<Var> = net.params.tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let mut xb = Vec::with_capacity(chunk.len() * per);
            let mut yb = Vec::with_capacity(chunk.len() * m);
            for &i in chunk {
                xb.extend_from_slice(&images.data[i * per..(i + 1) * per]);
                yb.extend_from_slice(&labels.data[i * m..(i + 1) * m]);
            }
            let xb = Tensor::new(vec![chunk.len(), c, h, w], xb)?;
            let yb = Tensor::new(vec![chunk.len(), m], yb)?;
            let (_, logits) = net.forward(&tape, &bound, xb)?;
            let loss = tape.weighted_bce(logits, &yb, &weights)?;
            let grads = tape.backward(loss)?;
            let g: Vec<Option<&[S]>> = bound.iter().map(|&v| grads.get(v)).collect();
            opt.step(&mut net.params, &g, cfg.lr);
        }
    }
    // final pass: collect probabilities and features for every sample
    let mut probs = Vec::with_capacity(n * m);
    let mut feats = Vec::with_capacity(n * cfg.feature_dim);
    for chunk in (0..n).collect::<Vec<_>>().chunks(cfg.batch_size) {
        let tape = Tape::no_grad();
        let bound: Vec<Var> = net.params.tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let mut xb = Vec::with_capacity(chunk.len() * per);
        for &i in chunk {
            xb.extend_from_slice(&images.data[i * per..(i + 1) * per]);
        }
        let xb = Tensor::new(vec![chunk.len(), c, h, w], xb)?;
        let (f, logits) = net.forward(&tape, &bound, xb)?;
        probs.extend(tape.value(logits).data.iter().map(|&z| z.sigmoid()));
        feats.extend_from_slice(&tape.value(f).data);
    }
    // classifier weight [D_t, M] -> embeddings F_t [M, D_t]
    let wc = &net.params.tensors[4];
    let dt = net.feature_dim;
    let ft = Tensor::from_fn(&[m, dt], |i| wc.data[(i % dt) * m + i / dt]);
    TeacherArtifact::new(
        ft,
        ids.to_vec(),
        Tensor::new(vec![n, m], probs)?,
        Tensor::new(vec![n, dt], feats)?,
    )
}
