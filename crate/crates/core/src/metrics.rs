//! Classification and retrieval metrics.

use crate::error::{Error, Result};

/// Accuracy summary over one evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    /// Correct predictions over all samples.
    pub overall: f64,
    /// Unweighted mean of per-class recalls, zero-sample classes excluded.
    pub mean_class: f64,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<usize>>,
    /// Classes with no samples in the split, left out of `mean_class`.
    pub excluded_classes: Vec<usize>,
}

pub fn classify_metrics(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<ClassMetrics> {
    if truth.len() != pred.len() {
        return Err(Error::dim(format!(
            "{} labels vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::domain("no samples to score"));
    }
    if n_classes == 0 {
        return Err(Error::domain("class count must be nonzero"));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::index(format!("label {} out of {n_classes} classes", t.max(p))));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let overall = correct as f64 / truth.len() as f64;

    let mut excluded_classes = Vec::new();
    let mut recall_sum = 0.0;
    let mut scored = 0usize;
    for (c, row) in confusion.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support == 0 {
            excluded_classes.push(c);
            continue;
        }
        recall_sum += confusion[c][c] as f64 / support as f64;
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::domain("every class has zero samples"));
    }
    if !excluded_classes.is_empty() {
        log::warn!(
            "mean-class accuracy skips {} class(es) with no samples: {:?}",
            excluded_classes.len(),
            excluded_classes
        );
    }
    Ok(ClassMetrics { overall, mean_class: recall_sum / scored as f64, confusion, excluded_classes })
}

/// Gallery indices ranked by ascending Euclidean distance to `query`;
/// ties broken by ascending index, `exclude` (the query itself) left out.
pub fn retrieve(query: &[f64], gallery: &[Vec<f64>], exclude: Option<usize>) -> Result<Vec<usize>> {
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(gallery.len());
    for (i, row) in gallery.iter().enumerate() {
        if row.len() != query.len() {
            return Err(Error::dim(format!(
                "gallery row {i} has width {}, query has {}",
                row.len(),
                query.len()
            )));
        }
        if Some(i) == exclude {
            continue;
        }
        let d2: f64 = query.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
        order.push((d2, i));
    }
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().map(|(_, i)| i).collect())
}

/// Average precision of one ranked relevance list: the mean over relevant
/// ranks r (1-based) of precision-at-r. `None` when nothing is relevant.
pub fn average_precision(ranked_rel: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_rel.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean average precision with every sample as a query against all others.
/// Relevance is label equality; queries whose class has no other member are
/// excluded with a warning.
pub fn map_score(features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut sum = 0.0;
    let mut n_queries = 0usize;
    let mut skipped = 0usize;
    for (q, feat) in features.iter().enumerate() {
        let ranked = retrieve(feat, features, Some(q))?;
        let rel: Vec<bool> = ranked.iter().map(|&i| labels[i] == labels[q]).collect();
        match average_precision(&rel) {
            Some(ap) => {
                sum += ap;
                n_queries += 1;
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("mAP skips {skipped} query(ies) with no relevant gallery item");
    }
    if n_queries == 0 {
        return Err(Error::domain("no query has a relevant gallery item"));
    }
    Ok(sum / n_queries as f64)
}

/// One point of a precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Interpolated precision/recall curve of one ranked relevance list: a
/// point per relevant hit, precision replaced by the maximum precision at
/// that recall or beyond.
pub fn pr_curve(ranked_rel: &[bool]) -> Result<Vec<PrPoint>> {
    let total: usize = ranked_rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::domain("precision/recall needs at least one relevant item"));
    }
    let mut raw = Vec::with_capacity(total);
    let mut hits = 0usize;
    for (i, &rel) in ranked_rel.iter().enumerate() {
        if rel {
            hits += 1;
            raw.push(PrPoint {
                recall: hits as f64 / total as f64,
                precision: hits as f64 / (i + 1) as f64,
            });
        }
    }
    let mut best = 0.0f64;
    for p in raw.iter_mut().rev() {
        best = best.max(p.precision);
        p.precision = best;
    }
    Ok(raw)
}

/// Mean interpolated precision at the eleven standard recall levels
/// 0.0, 0.1, .., 1.0, averaged over queries.
pub fn pr_curve_11pt(queries: &[Vec<bool>]) -> Result<Vec<PrPoint>> {
    if queries.is_empty() {
        return Err(Error::domain("no queries for the averaged curve"));
    }
    let curves: Vec<Vec<PrPoint>> =
        queries.iter().map(|q| pr_curve(q)).collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(11);
    for level in 0..=10 {
        let r = level as f64 / 10.0;
        let mut sum = 0.0;
        for curve in &curves {
            // Interpolated precision at recall r: best precision at or past r.
            sum += curve
                .iter()
                .filter(|p| p.recall >= r - 1e-12)
                .map(|p| p.precision)
                .fold(0.0f64, f64::max);
        }
        points.push(PrPoint { recall: r, precision: sum / curves.len() as f64 });
    }
    Ok(points)
}
