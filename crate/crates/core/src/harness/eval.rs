use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_forward, BackboneConfig, BackboneParams, Mode};
use crate::error::{Error, Result};
use crate::synthdata::DomainData;
use crate::tensor::{Graph, Tensor};

use super::train::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `1 - cos(a, b)`.
    Cosine,
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Contract(format!("unknown metric '{other}'"))),
        }
    }
}

/// Retrieval scores over the queries that had at least one positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub map: f64,
    pub rank1: f64,
    pub valid_queries: usize,
}

/// Label and view id of one side of the retrieval problem.
#[derive(Clone, Copy, Debug)]
pub struct Tags<'a> {
    pub labels: &'a [usize],
    pub views: &'a [usize],
}

/// mAP and CMC Rank-1 from a `Q x G` distance matrix.
///
/// Gallery items sharing both identity and view with the query are
/// dropped from its ranking. Queries without any remaining positive are
/// skipped. Equal distances are ranked by gallery index.
pub fn cmc_map(dist: &[Vec<f64>], query: Tags<'_>, gallery: Tags<'_>) -> Result<Retrieval> {
    if query.labels.len() != dist.len() || query.views.len() != dist.len() {
        return Err(Error::Shape("query tags do not match distance rows".into()));
    }
    let g = gallery.labels.len();
    if gallery.views.len() != g || dist.iter().any(|row| row.len() != g) {
        return Err(Error::Shape("gallery tags do not match distance columns".into()));
    }
    let (mut ap_sum, mut hits, mut valid) = (0.0, 0usize, 0usize);
    for (qi, row) in dist.iter().enumerate() {
        let (ql, qv) = (query.labels[qi], query.views[qi]);
        let mut order: Vec<usize> = (0..g)
            .filter(|&j| !(gallery.labels[j] == ql && gallery.views[j] == qv))
            .collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &j) in order.iter().enumerate() {
            if gallery.labels[j] == ql {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
            }
        }
        if found == 0 {
            continue;
        }
        valid += 1;
        ap_sum += precision_sum / found as f64;
        if gallery.labels[order[0]] == ql {
            hits += 1;
        }
    }
    if valid == 0 {
        return Ok(Retrieval {
            map: 0.0,
            rank1: 0.0,
            valid_queries: 0,
        });
    }
    Ok(Retrieval {
        map: ap_sum / valid as f64,
        rank1: hits as f64 / valid as f64,
        valid_queries: valid,
    })
}

/// Pairwise distances between the rows of `q: [Q, d]` and `g: [G, d]`.
pub fn distance_matrix(q: &Tensor, g: &Tensor, metric: Metric) -> Result<Vec<Vec<f64>>> {
    let (qs, gs) = (q.shape(), g.shape());
    if qs.len() != 2 || gs.len() != 2 || qs[1] != gs[1] {
        return Err(Error::Shape(format!("distance between {qs:?} and {gs:?}")));
    }
    let d = qs[1];
    let unit = |t: &Tensor| -> Vec<Vec<f64>> {
        t.data()
            .chunks(d)
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect()
            })
            .collect()
    };
    let (qr, gr): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match metric {
        Metric::Cosine => (unit(q), unit(g)),
        Metric::Euclidean => (
            q.data().chunks(d).map(<[f64]>::to_vec).collect(),
            g.data().chunks(d).map(<[f64]>::to_vec).collect(),
        ),
    };
    Ok(qr
        .iter()
        .map(|a| {
            gr.iter()
                .map(|b| match metric {
                    Metric::Cosine => 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
                    Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
                })
                .collect()
        })
        .collect())
}

/// Clean (unperturbed) embeddings `v` of `images`, in chunks.
pub fn embed(params: &BackboneParams, config: &BackboneConfig, images: &Tensor) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let n = images.shape().first().copied().unwrap_or(0);
    let mut parts = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let x = g.constant(images.slice_rows(start, (start + CHUNK).min(n))?);
        let out = backbone_forward(&mut g, x, &vars, config, Mode::Eval)?;
        parts.push(g.value(out.embedding).clone());
    }
    Tensor::stack_rows(&parts)
}

/// Query/gallery retrieval within one domain.
pub fn evaluate_domain(
    params: &BackboneParams,
    config: &BackboneConfig,
    domain: &DomainData,
    metric: Metric,
) -> Result<Retrieval> {
    let (qi, gi) = domain.query_gallery_split();
    if gi.is_empty() {
        return Err(Error::Contract("gallery is empty".into()));
    }
    let v = embed(params, config, &domain.images)?;
    let dist = distance_matrix(&v.select_rows(&qi)?, &v.select_rows(&gi)?, metric)?;
    let pick = |idx: &[usize], src: &[usize]| idx.iter().map(|&i| src[i]).collect::<Vec<_>>();
    let (ql, qv) = (pick(&qi, &domain.labels), pick(&qi, &domain.views));
    let (gl, gv) = (pick(&gi, &domain.labels), pick(&gi, &domain.views));
    let r = cmc_map(
        &dist,
        Tags {
            labels: &ql,
            views: &qv,
        },
        Tags {
            labels: &gl,
            views: &gv,
        },
    )?;
    if r.valid_queries == 0 {
        return Err(Error::Contract("no query has a positive in the gallery".into()));
    }
    Ok(r)
}

/// [`evaluate_domain`] with the weights and layout of a checkpoint.
pub fn evaluate(ckpt: &Checkpoint, domain: &DomainData, metric: Metric) -> Result<Retrieval> {
    evaluate_domain(&ckpt.params, &ckpt.config.backbone_config(), domain, metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tags<'a>(l: &'a [usize], v: &'a [usize]) -> Tags<'a> {
        Tags { labels: l, views: v }
    }

    #[test]
    fn positive_at_rank_two_of_five() {
        let dist = vec![vec![0.1, 0.2, 0.3, 0.4, 0.5]];
        let r = cmc_map(&dist, tags(&[7], &[0]), tags(&[1, 7, 2, 3, 4], &[1; 5])).unwrap();
        assert!((r.map - 0.5).abs() < 1e-15);
        assert_eq!(r.rank1, 0.0);
    }

    #[test]
    fn positives_at_ranks_one_and_three() {
        let dist = vec![vec![0.1, 0.2, 0.3, 0.4]];
        let r = cmc_map(&dist, tags(&[0], &[0]), tags(&[0, 1, 0, 2], &[1; 4])).unwrap();
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(r.rank1, 1.0);
    }

    #[test]
    fn perfect_ranking() {
        let dist = vec![vec![0.0, 1.0, 2.0], vec![2.0, 0.0, 1.0]];
        let r = cmc_map(&dist, tags(&[0, 1], &[0, 0]), tags(&[0, 1, 2], &[1, 1, 1])).unwrap();
        assert_eq!((r.map, r.rank1, r.valid_queries), (1.0, 1.0, 2));
    }

    #[test]
    fn reversed_ranking_single_positive() {
        let g = 6;
        for r in 1..=g {
            let labels: Vec<usize> = (0..g).map(|j| if j + 1 == r { 0 } else { 1 + j }).collect();
            let fwd: Vec<f64> = (0..g).map(|j| j as f64).collect();
            let rev: Vec<f64> = (0..g).map(|j| -(j as f64)).collect();
            let views = vec![1; g];
            let a = cmc_map(&[fwd], tags(&[0], &[0]), tags(&labels, &views)).unwrap();
            let b = cmc_map(&[rev], tags(&[0], &[0]), tags(&labels, &views)).unwrap();
            assert!((a.map - 1.0 / r as f64).abs() < 1e-15);
            assert!((b.map - 1.0 / (g - r + 1) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn junk_and_skipped_queries() {
        // the only same-identity item shares the query's view: query skipped
        let dist = vec![vec![0.0, 1.0], vec![0.5, 0.1]];
        let r = cmc_map(&dist, tags(&[0, 1], &[3, 0]), tags(&[0, 1], &[3, 2])).unwrap();
        assert_eq!(r.valid_queries, 1);
        assert_eq!(r.map, 1.0);
        let none = cmc_map(&dist[..1], tags(&[0], &[3]), tags(&[0, 1], &[3, 2])).unwrap();
        assert_eq!(none.valid_queries, 0);
    }

    #[test]
    fn ties_follow_gallery_index() {
        let dist = vec![vec![0.5, 0.5, 0.5]];
        let r = cmc_map(&dist, tags(&[0], &[0]), tags(&[1, 0, 2], &[1; 3])).unwrap();
        assert!((r.map - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cosine_and_euclidean_agree_on_unit_vectors() {
        let mut s = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut unit_rows = |n: usize| {
            let data: Vec<f64> = (0..n * 4).map(|_| s.gen_range(-1.0..1.0)).collect();
            let rows: Vec<f64> = data
                .chunks(4)
                .flat_map(|r| {
                    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    r.iter().map(move |v| v / n).collect::<Vec<_>>()
                })
                .collect();
            Tensor::new(vec![n, 4], rows).unwrap()
        };
        let (q, g) = (unit_rows(5), unit_rows(12));
        let c = distance_matrix(&q, &g, Metric::Cosine).unwrap();
        let e = distance_matrix(&q, &g, Metric::Euclidean).unwrap();
        let order = |row: &Vec<f64>| {
            let mut o: Vec<usize> = (0..row.len()).collect();
            o.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
            o
        };
        for (a, b) in c.iter().zip(&e) {
            assert_eq!(order(a), order(b));
        }
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("cosine".parse::<Metric>().unwrap(), Metric::Cosine);
        assert!(matches!("manhattan".parse::<Metric>(), Err(Error::Contract(_))));
    }
}
