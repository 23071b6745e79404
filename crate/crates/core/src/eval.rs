//! Evaluation protocols: zero-shot classification against class text
//! embeddings, linear probing with 1-3 FC layers on frozen features,
//! cross-modal retrieval with recall@k, and feature export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::linalg::{self, Mat};
use crate::rng;
use crate::trainer::{adamw_step, AdamWState};

#[derive(Debug, Clone, Serialize)]
pub struct SampleRecord {
    pub id: u64,
    pub true_class: u16,
    pub top_classes: Vec<u16>,
    pub top_scores: Vec<f64>,
    /// Retrieved gallery ids, for retrieval protocols only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_ids: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub protocol: String,
    pub ks: Vec<usize>,
    /// Accuracy (or recall) per k, keyed by k rendered as a string.
    pub overall: BTreeMap<String, f64>,
    /// Per-class top-1 accuracy (recall@max-k for retrieval).
    pub per_class: BTreeMap<String, f64>,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn overall_at(&self, k: usize) -> Option<f64> {
        self.overall.get(&k.to_string()).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Flat CSV: one row per sample, top-k lists joined with '|'.
    pub fn samples_csv(&self) -> String {
        let with_ids = self.samples.iter().any(|s| s.top_ids.is_some());
        let mut out = String::from(if with_ids {
            "id,true_class,top_classes,top_scores,top_ids\n"
        } else {
            "id,true_class,top_classes,top_scores\n"
        });
        for s in &self.samples {
            let classes = s
                .top_classes
                .iter()
                .map(u16::to_string)
                .collect::<Vec<_>>()
                .join("|");
            let scores = s
                .top_scores
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join("|");
            if with_ids {
                let ids = s
                    .top_ids
                    .as_deref()
                    .unwrap_or(&[])
                    .iter()
                    .map(u64::to_string)
                    .collect::<Vec<_>>()
                    .join("|");
                writeln!(out, "{},{},{},{},{}", s.id, s.true_class, classes, scores, ids)
            } else {
                writeln!(out, "{},{},{},{}", s.id, s.true_class, classes, scores)
            }
            .expect("string write");
        }
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json())?;
        std::fs::write(csv_path, self.samples_csv())?;
        Ok(())
    }
}

fn descending_ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort by descending score keeps the smaller index first on ties
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    order
}

fn topk_counts_to_report(
    protocol: &str,
    ks: &[usize],
    labels: &[u16],
    num_classes: u16,
    samples: Vec<SampleRecord>,
    hits_per_k: &BTreeMap<usize, usize>,
    per_class_top1_hits: &BTreeMap<u16, usize>,
) -> EvalReport {
    let n = labels.len() as f64;
    let mut overall = BTreeMap::new();
    for (&k, &hits) in hits_per_k {
        overall.insert(k.to_string(), hits as f64 / n);
    }
    let mut class_counts: BTreeMap<u16, usize> = BTreeMap::new();
    for &l in labels {
        *class_counts.entry(l).or_insert(0) += 1;
    }
    let mut per_class = BTreeMap::new();
    for c in 0..num_classes {
        if let Some(&count) = class_counts.get(&c) {
            let hits = per_class_top1_hits.get(&c).copied().unwrap_or(0);
            per_class.insert(c.to_string(), hits as f64 / count as f64);
        }
    }
    EvalReport {
        protocol: protocol.to_string(),
        ks: ks.to_vec(),
        overall,
        per_class,
        samples,
    }
}

/// Zero-shot classification: rank class embeddings by cosine similarity to
/// each feature row; ties break toward the smaller class index.
pub fn zero_shot(
    features: &Mat,
    labels: &[u16],
    ids: &[u64],
    class_text_embeds: &Mat,
    ks: &[usize],
) -> Result<EvalReport> {
    let num_classes = class_text_embeds.rows as u16;
    if features.cols != class_text_embeds.cols {
        return Err(Error::shape(
            format!("{} dims", class_text_embeds.cols),
            format!("{} dims", features.cols),
        ));
    }
    if features.rows != labels.len() || features.rows != ids.len() {
        return Err(Error::shape(
            format!("{} rows/labels/ids", features.rows),
            format!("{} labels, {} ids", labels.len(), ids.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::domain(format!(
            "label {bad} out of range (C = {num_classes})"
        )));
    }
    let mut ks_sorted = ks.to_vec();
    ks_sorted.sort_unstable();
    ks_sorted.dedup();
    if ks_sorted.is_empty() || *ks_sorted.last().unwrap() > num_classes as usize {
        return Err(Error::domain(format!(
            "ks must be nonempty and at most C = {num_classes}"
        )));
    }
    let max_k = *ks_sorted.last().unwrap();

    let mut hits_per_k: BTreeMap<usize, usize> = ks_sorted.iter().map(|&k| (k, 0)).collect();
    let mut per_class_top1: BTreeMap<u16, usize> = BTreeMap::new();
    let mut samples = Vec::with_capacity(features.rows);
    for r in 0..features.rows {
        let feat = features.row(r);
        let scores: Vec<f64> = (0..class_text_embeds.rows)
            .map(|c| linalg::dot(feat, class_text_embeds.row(c)))
            .collect();
        let ranking = descending_ranking(&scores);
        let top_classes: Vec<u16> = ranking[..max_k].iter().map(|&c| c as u16).collect();
        let top_scores: Vec<f64> = ranking[..max_k].iter().map(|&c| scores[c]).collect();
        for (&k, hits) in hits_per_k.iter_mut() {
            if top_classes[..k].contains(&labels[r]) {
                *hits += 1;
            }
        }
        if top_classes[0] == labels[r] {
            *per_class_top1.entry(labels[r]).or_insert(0) += 1;
        }
        samples.push(SampleRecord {
            id: ids[r],
            true_class: labels[r],
            top_classes,
            top_scores,
            top_ids: None,
        });
    }
    Ok(topk_counts_to_report(
        "zeroshot",
        &ks_sorted,
        labels,
        num_classes,
        samples,
        &hits_per_k,
        &per_class_top1,
    ))
}

/// A small fully-connected head for linear probing.
#[derive(Debug, Clone)]
struct ProbeHead {
    layers: Vec<(Mat, Vec<f64>)>,
}

impl ProbeHead {
    fn init(seed: u64, feature_dim: usize, num_classes: usize, num_fc_layers: usize) -> Self {
        let mut stream = rng::stream(seed, "probe", &[num_fc_layers as u64]);
        let mut dims = Vec::new();
        for _ in 1..num_fc_layers {
            dims.push((feature_dim, feature_dim));
        }
        dims.push((num_classes, feature_dim));
        let layers = dims
            .into_iter()
            .map(|(rows, cols)| {
                let std = (2.0 / cols as f64).sqrt();
                let mut w = Mat::zeros(rows, cols);
                for v in &mut w.data {
                    let g: f64 = StandardNormal.sample(&mut stream);
                    *v = std * g;
                }
                (w, vec![0.0; rows])
            })
            .collect();
        ProbeHead { layers }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let mut z = w.matvec(acts.last().unwrap());
            for (v, bias) in z.iter_mut().zip(b) {
                *v += bias;
            }
            if li < last {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(z);
        }
        (acts.last().unwrap().clone(), acts)
    }

    /// Backprop dL/dlogits through the head for one sample.
    fn backward(&self, acts: &[Vec<f64>], dlogits: &[f64], grads: &mut ProbeHead) {
        let mut delta = dlogits.to_vec();
        for li in (0..self.layers.len()).rev() {
            let input = &acts[li];
            grads.layers[li].0.add_outer(&delta, input, 1.0);
            linalg::axpy(&mut grads.layers[li].1, 1.0, &delta);
            if li > 0 {
                let mut next = self.layers[li].0.matvec_t(&delta);
                // relu mask of the activation feeding this layer
                for (v, &a) in next.iter_mut().zip(input.iter()) {
                    if a <= 0.0 {
                        *v = 0.0;
                    }
                }
                delta = next;
            }
        }
    }

    fn zeros_like(&self) -> ProbeHead {
        ProbeHead {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (Mat::zeros(w.rows, w.cols), vec![0.0; b.len()]))
                .collect(),
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(b);
        }
        out
    }

    fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for (w, b) in &mut self.layers {
            let wl = w.data.len();
            w.data.copy_from_slice(&flat[pos..pos + wl]);
            pos += wl;
            let bl = b.len();
            b.copy_from_slice(&flat[pos..pos + bl]);
            pos += bl;
        }
    }
}

/// Mean softmax cross-entropy and its gradient over a feature matrix.
fn probe_epoch_grads(
    head: &ProbeHead,
    feats: &Mat,
    labels: &[u16],
) -> (f64, ProbeHead) {
    let n = feats.rows;
    let mut grads = head.zeros_like();
    let mut total_loss = 0.0;
    for r in 0..n {
        let (logits, acts) = head.forward(feats.row(r));
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let y = labels[r] as usize;
        total_loss += z.ln() + max - logits[y];
        let mut dlogits: Vec<f64> = exps.iter().map(|&e| e / z / n as f64).collect();
        dlogits[y] -= 1.0 / n as f64;
        head.backward(&acts, &dlogits, &mut grads);
    }
    (total_loss / n as f64, grads)
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub report: EvalReport,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
}

/// Train an FC head (1-3 layers) on frozen train features with full-batch
/// AdamW, then classify the test features.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe(
    train_feats: &Mat,
    train_labels: &[u16],
    test_feats: &Mat,
    test_labels: &[u16],
    test_ids: &[u64],
    num_classes: u16,
    num_fc_layers: usize,
    probe_epochs: usize,
    probe_lr: f64,
    seed: u64,
    ks: &[usize],
) -> Result<ProbeOutcome> {
    if !(1..=3).contains(&num_fc_layers) {
        return Err(Error::domain(format!(
            "probe supports 1-3 FC layers, got {num_fc_layers}"
        )));
    }
    if train_feats.cols != test_feats.cols {
        return Err(Error::shape(
            format!("{} dims", train_feats.cols),
            format!("{} dims", test_feats.cols),
        ));
    }
    if train_feats.rows != train_labels.len() {
        return Err(Error::shape(
            format!("{} train labels", train_feats.rows),
            format!("{}", train_labels.len()),
        ));
    }
    if let Some(&bad) = train_labels.iter().chain(test_labels).find(|&&l| l >= num_classes) {
        return Err(Error::domain(format!(
            "label {bad} out of range (C = {num_classes})"
        )));
    }

    let mut head = ProbeHead::init(seed, train_feats.cols, num_classes as usize, num_fc_layers);
    let mut opt = AdamWState::new(head.flatten().len());
    let mut first_epoch_loss = f64::NAN;
    let mut final_epoch_loss = f64::NAN;
    for epoch in 0..probe_epochs {
        let (loss, grads) = probe_epoch_grads(&head, train_feats, train_labels);
        if epoch == 0 {
            first_epoch_loss = loss;
        }
        let mut flat = head.flatten();
        adamw_step(&mut flat, &grads.flatten(), &mut opt, probe_lr, 0.0)?;
        head.assign_from_flat(&flat);
        final_epoch_loss = probe_epoch_grads(&head, train_feats, train_labels).0;
    }

    // classify test features by logits, ties toward the smaller class
    let mut ks_sorted = ks.to_vec();
    ks_sorted.sort_unstable();
    ks_sorted.dedup();
    ks_sorted.retain(|&k| k >= 1 && k <= num_classes as usize);
    if ks_sorted.is_empty() {
        return Err(Error::domain("no valid ks for the probe report".to_string()));
    }
    let max_k = *ks_sorted.last().unwrap();
    let mut hits_per_k: BTreeMap<usize, usize> = ks_sorted.iter().map(|&k| (k, 0)).collect();
    let mut per_class_top1: BTreeMap<u16, usize> = BTreeMap::new();
    let mut samples = Vec::with_capacity(test_feats.rows);
    for r in 0..test_feats.rows {
        let (logits, _) = head.forward(test_feats.row(r));
        let ranking = descending_ranking(&logits);
        let top_classes: Vec<u16> = ranking[..max_k].iter().map(|&c| c as u16).collect();
        let top_scores: Vec<f64> = ranking[..max_k].iter().map(|&c| logits[c]).collect();
        for (&k, hits) in hits_per_k.iter_mut() {
            if top_classes[..k].contains(&test_labels[r]) {
                *hits += 1;
            }
        }
        if top_classes[0] == test_labels[r] {
            *per_class_top1.entry(test_labels[r]).or_insert(0) += 1;
        }
        samples.push(SampleRecord {
            id: test_ids[r],
            true_class: test_labels[r],
            top_classes,
            top_scores,
            top_ids: None,
        });
    }
    let report = topk_counts_to_report(
        &format!("linear-{num_fc_layers}"),
        &ks_sorted,
        test_labels,
        num_classes,
        samples,
        &hits_per_k,
        &per_class_top1,
    );
    Ok(ProbeOutcome {
        report,
        first_epoch_loss,
        final_epoch_loss,
    })
}

/// Cross-modal retrieval: rank gallery rows by cosine similarity per query;
/// recall@k is the fraction of queries with a same-class item in the top k.
/// Ties break toward the smaller gallery id.
#[allow(clippy::too_many_arguments)]
pub fn retrieval(
    query_feats: &Mat,
    query_labels: &[u16],
    query_ids: &[u64],
    gallery_feats: &Mat,
    gallery_labels: &[u16],
    gallery_ids: &[u64],
    k: usize,
    exclude_self: bool,
) -> Result<EvalReport> {
    if query_feats.cols != gallery_feats.cols {
        return Err(Error::shape(
            format!("{} dims", gallery_feats.cols),
            format!("{} dims", query_feats.cols),
        ));
    }
    let gallery_size = gallery_feats.rows;
    let effective = if exclude_self { gallery_size.saturating_sub(1) } else { gallery_size };
    if k == 0 || k > effective {
        return Err(Error::domain(format!(
            "k must be in [1, {effective}], got {k}"
        )));
    }

    let num_classes = gallery_labels.iter().chain(query_labels).copied().max().unwrap_or(0) + 1;
    let mut hits_per_k: BTreeMap<usize, usize> = (1..=k).map(|kk| (kk, 0)).collect();
    let mut per_class_top1: BTreeMap<u16, usize> = BTreeMap::new();
    let mut samples = Vec::with_capacity(query_feats.rows);
    for q in 0..query_feats.rows {
        let qf = query_feats.row(q);
        // candidates sorted by (descending score, ascending gallery id)
        let mut cand: Vec<usize> = (0..gallery_size)
            .filter(|&g| !(exclude_self && gallery_ids[g] == query_ids[q]))
            .collect();
        let scores: Vec<f64> = (0..gallery_size)
            .map(|g| linalg::dot(qf, gallery_feats.row(g)))
            .collect();
        cand.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("finite scores")
                .then(gallery_ids[a].cmp(&gallery_ids[b]))
        });
        let top: Vec<usize> = cand[..k].to_vec();
        for (&kk, hits) in hits_per_k.iter_mut() {
            if top[..kk].iter().any(|&g| gallery_labels[g] == query_labels[q]) {
                *hits += 1;
            }
        }
        if gallery_labels[top[0]] == query_labels[q] {
            *per_class_top1.entry(query_labels[q]).or_insert(0) += 1;
        }
        samples.push(SampleRecord {
            id: query_ids[q],
            true_class: query_labels[q],
            top_classes: top.iter().map(|&g| gallery_labels[g]).collect(),
            top_scores: top.iter().map(|&g| scores[g]).collect(),
            top_ids: Some(top.iter().map(|&g| gallery_ids[g]).collect()),
        });
    }
    let ks: Vec<usize> = (1..=k).collect();
    Ok(topk_counts_to_report(
        "retrieval",
        &ks,
        query_labels,
        num_classes,
        samples,
        &hits_per_k,
        &per_class_top1,
    ))
}

/// Write id, class, and the feature vector of every cloud as CSV, ordered
/// by id. Uses the shortest-roundtrip float rendering, so re-exports are
/// byte-identical.
pub fn export_features(
    dataset: &[PointCloud],
    params: &EncoderParams,
    path: &Path,
    threads: usize,
) -> Result<()> {
    let feats = crate::trainer::encode_dataset_features(params, dataset, threads)?;
    let mut rows: Vec<(u64, u16, &Vec<f64>)> = dataset
        .iter()
        .zip(&feats)
        .map(|(pc, f)| (pc.id, pc.class_id, f))
        .collect();
    rows.sort_by_key(|&(id, _, _)| id);

    let d = params.dim();
    let mut out = String::from("id,class_id");
    for c in 0..d {
        write!(out, ",f_{c}").expect("string write");
    }
    out.push('\n');
    for (id, class, f) in rows {
        write!(out, "{id},{class}").expect("string write");
        for v in f {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
