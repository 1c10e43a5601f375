use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffnet::sigmoid;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::linalg::Vec64;
use crate::rng::stream_rng;
use crate::world::{GoldWorld, PromptDistribution};

/// One preference comparison. `label` is the position (in draw order) of
/// the response that was chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRecord {
    pub id: u64,
    pub tag: String,
    pub chosen: Vec64,
    pub rejected: Vec64,
    pub label: u8,
}

/// One response with noisy per-attribute scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub id: u64,
    pub tag: String,
    pub input: Vec64,
    pub scores: Vec64,
}

/// Draws the Bradley–Terry label for responses `a` (position 0) and `b`
/// (position 1) from their noiseless overall scores.
pub fn label_pair<R: Rng + ?Sized>(
    world: &GoldWorld,
    a: &Vec64,
    b: &Vec64,
    rng: &mut R,
) -> Result<u8> {
    let (ra, _) = world.noiseless(a)?;
    let (rb, _) = world.noiseless(b)?;
    let p_first = sigmoid(ra - rb);
    Ok(if rng.random::<f64>() < p_first { 0 } else { 1 })
}

/// `n` comparisons, record `i` drawn from its own stream `(seed, i)`.
pub fn gen_pairwise(
    world: &GoldWorld,
    n: usize,
    dist: &PromptDistribution,
    seed: u64,
) -> Result<Vec<PairwiseRecord>> {
    check_dist(world, dist)?;
    let bound = world.feature_bound();
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let a = dist.sample_bounded(bound, &mut rng);
            let b = dist.sample_bounded(bound, &mut rng);
            let label = label_pair(world, &a, &b, &mut rng)?;
            let (chosen, rejected) = if label == 0 { (a, b) } else { (b, a) };
            Ok(PairwiseRecord {
                id: i,
                tag: dist.name.clone(),
                chosen,
                rejected,
                label,
            })
        })
        .collect()
}

/// `n` attribute-scored responses with `scores = r* + ε`.
pub fn gen_multiattr(
    world: &GoldWorld,
    n: usize,
    dist: &PromptDistribution,
    seed: u64,
) -> Result<Vec<AttributeRecord>> {
    check_dist(world, dist)?;
    let bound = world.feature_bound();
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let input = dist.sample_bounded(bound, &mut rng);
            let g = world.gold_scores(&input, &mut rng)?;
            Ok(AttributeRecord {
                id: i,
                tag: dist.name.clone(),
                input,
                scores: g.g_m,
            })
        })
        .collect()
}

fn check_dist(world: &GoldWorld, dist: &PromptDistribution) -> Result<()> {
    dist.validate()?;
    if dist.dim() != world.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: world.latent_dim(),
            found: dist.dim(),
        });
    }
    Ok(())
}

/// Shape information carried by a dataset header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordHeader {
    pub latent_dim: usize,
    pub num_attributes: usize,
}

const SCHEMA: &str = "#smorm-lab/v1";

fn header_line(kind: &str, h: RecordHeader) -> String {
    format!(
        "{SCHEMA} {kind} d_z={} K={}\n",
        h.latent_dim, h.num_attributes
    )
}

fn push_vec(out: &mut String, v: &[f64]) {
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        // 17 significant digits: exact round trip for every finite f64.
        write!(out, "{x:.16e}").expect("writing to a String");
    }
}

pub fn write_pairs(path: &Path, header: RecordHeader, records: &[PairwiseRecord]) -> Result<()> {
    let mut out = header_line("pairs", header);
    for r in records {
        check_len(r.chosen.len(), header.latent_dim)?;
        check_len(r.rejected.len(), header.latent_dim)?;
        write!(out, "{}\t{}\t{}\t", r.id, r.tag, r.label).expect("writing to a String");
        push_vec(&mut out, &r.chosen);
        out.push('\t');
        push_vec(&mut out, &r.rejected);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn write_attrs(path: &Path, header: RecordHeader, records: &[AttributeRecord]) -> Result<()> {
    let mut out = header_line("attrs", header);
    for r in records {
        check_len(r.input.len(), header.latent_dim)?;
        check_len(r.scores.len(), header.num_attributes)?;
        write!(out, "{}\t{}\t", r.id, r.tag).expect("writing to a String");
        push_vec(&mut out, &r.input);
        out.push('\t');
        push_vec(&mut out, &r.scores);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

fn check_len(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<(RecordHeader, Vec<PairwiseRecord>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = parse_header(lines.next(), "pairs")?;
    let mut out = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let f = fields(line, 5, ln)?;
        let label: u8 = parse_at(f[2], ln, "label")?;
        if label > 1 {
            return Err(parse_err(ln, format!("label must be 0 or 1, got {label}")));
        }
        out.push(PairwiseRecord {
            id: parse_at(f[0], ln, "id")?,
            tag: f[1].to_string(),
            label,
            chosen: parse_vec(f[3], header.latent_dim, ln)?,
            rejected: parse_vec(f[4], header.latent_dim, ln)?,
        });
    }
    Ok((header, out))
}

pub fn read_attrs(path: &Path) -> Result<(RecordHeader, Vec<AttributeRecord>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = parse_header(lines.next(), "attrs")?;
    let mut out = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let f = fields(line, 4, ln)?;
        out.push(AttributeRecord {
            id: parse_at(f[0], ln, "id")?,
            tag: f[1].to_string(),
            input: parse_vec(f[2], header.latent_dim, ln)?,
            scores: parse_vec(f[3], header.num_attributes, ln)?,
        });
    }
    Ok((header, out))
}

fn parse_err(line: usize, message: String) -> Error {
    Error::Parse { line, message }
}

fn parse_header(first: Option<(usize, &str)>, kind: &str) -> Result<RecordHeader> {
    let Some((_, line)) = first else {
        return Err(parse_err(1, "missing header line".into()));
    };
    let parts: Vec<&str> = line.split(' ').collect();
    if parts.len() != 4 || parts[0] != SCHEMA || parts[1] != kind {
        return Err(parse_err(
            1,
            format!("expected header `{SCHEMA} {kind} d_z=<int> K=<int>`, got `{line}`"),
        ));
    }
    let num = |s: &str, key: &str| -> Result<usize> {
        s.strip_prefix(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(1, format!("bad header field `{s}`")))
    };
    Ok(RecordHeader {
        latent_dim: num(parts[2], "d_z=")?,
        num_attributes: num(parts[3], "K=")?,
    })
}

fn fields(line: &str, n: usize, ln: usize) -> Result<Vec<&str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != n {
        return Err(parse_err(
            ln,
            format!("expected {n} tab-separated fields, found {}", f.len()),
        ));
    }
    Ok(f)
}

fn parse_at<T: std::str::FromStr>(s: &str, ln: usize, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| parse_err(ln, format!("invalid {what} `{s}`")))
}

fn parse_vec(s: &str, dim: usize, ln: usize) -> Result<Vec64> {
    let v = s
        .split(',')
        .map(|x| parse_at::<f64>(x, ln, "number"))
        .collect::<Result<Vec<f64>>>()?;
    if v.len() != dim {
        return Err(parse_err(
            ln,
            format!("expected {dim} values, found {}", v.len()),
        ));
    }
    Vec64::new(v).map_err(|e| parse_err(ln, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat64;
    use crate::world::{AttributeMap, GoldWorldSpec, RandomWorldParams};

    fn linear_world(k: usize, noise: f64) -> GoldWorld {
        GoldWorld::new(GoldWorldSpec {
            latent_dim: 2,
            num_attributes: k,
            attribute_map: AttributeMap::Linear {
                weights: Mat64::from_fn(k, 2, |r, c| (r + c) as f64 * 0.5 + 0.5),
            },
            aggregation: Vec64::new(vec![1.0 / k as f64; k]).unwrap(),
            noise_cov: GoldWorld::diagonal_noise(noise, noise, k),
            feature_bound: 10.0,
        })
        .unwrap()
    }

    #[test]
    fn duplicate_inputs_are_a_coin_flip() {
        let w = linear_world(2, 0.0);
        let z = Vec64::new(vec![0.3, -0.2]).unwrap();
        let first = (0..10_000u64)
            .filter(|&i| label_pair(&w, &z, &z, &mut stream_rng(3, i)).unwrap() == 0)
            .count();
        assert!((first as f64 / 1e4 - 0.5).abs() < 0.02);
    }

    #[test]
    fn gap_of_four_matches_sigmoid() {
        // K = 1, weight (0.5, 1.0): the pair below has r_s* gap exactly 4.
        let w = linear_world(1, 0.0);
        let a = Vec64::new(vec![2.0, 3.0]).unwrap();
        let b = Vec64::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(w.noiseless(&a).unwrap().0 - w.noiseless(&b).unwrap().0, 4.0);
        let first = (0..10_000u64)
            .filter(|&i| label_pair(&w, &a, &b, &mut stream_rng(4, i)).unwrap() == 0)
            .count();
        assert!((first as f64 / 1e4 - sigmoid(4.0)).abs() < 0.005);
    }

    #[test]
    fn chosen_rate_tracks_sigmoid_per_gap_bucket() {
        let w = GoldWorld::random_mlp(&RandomWorldParams {
            latent_dim: 4,
            ..Default::default()
        })
        .unwrap();
        let dist = PromptDistribution::standard("id", 4);
        let recs = gen_pairwise(&w, 20_000, &dist, 9).unwrap();
        // Bucket by the gap of the first-drawn minus second-drawn response.
        let mut buckets = vec![(0.0f64, 0.0f64, 0usize); 10];
        for r in &recs {
            let (first, second) = if r.label == 0 {
                (&r.chosen, &r.rejected)
            } else {
                (&r.rejected, &r.chosen)
            };
            let gap = w.noiseless(first).unwrap().0 - w.noiseless(second).unwrap().0;
            let b = (((gap + 2.5) / 0.5).floor().clamp(0.0, 9.0)) as usize;
            buckets[b].0 += sigmoid(gap);
            buckets[b].1 += if r.label == 0 { 1.0 } else { 0.0 };
            buckets[b].2 += 1;
        }
        for (p_sum, hits, n) in buckets {
            if n < 50 {
                continue;
            }
            let p = p_sum / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-3);
            assert!(
                (hits / n as f64 - p).abs() < 3.0 * se + 1e-9,
                "bucket p={p} n={n}"
            );
        }
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let w = GoldWorld::random_mlp(&RandomWorldParams {
            latent_dim: 4,
            feature_bound: 2.0,
            ..Default::default()
        })
        .unwrap();
        let dist = PromptDistribution::standard("id", 4);
        let a = gen_pairwise(&w, 300, &dist, 1).unwrap();
        assert_eq!(a, gen_pairwise(&w, 300, &dist, 1).unwrap());
        assert_ne!(a, gen_pairwise(&w, 300, &dist, 2).unwrap());
        assert!(a
            .iter()
            .all(|r| r.chosen.norm() <= 2.0 + 1e-12 && r.rejected.norm() <= 2.0 + 1e-12));
    }

    #[test]
    fn multiattr_noise_moments() {
        let w = linear_world(3, 0.25);
        let w0 = linear_world(3, 0.0);
        let dist = PromptDistribution::standard("id", 2);
        let clean = gen_multiattr(&w0, 10, &dist, 5).unwrap();
        for r in &clean {
            assert_eq!(r.scores, w0.noiseless(&r.input).unwrap().1);
        }
        let recs = gen_multiattr(&w, 10_000, &dist, 5).unwrap();
        for k in 0..3 {
            let resid: Vec<f64> = recs
                .iter()
                .map(|r| r.scores[k] - w.noiseless(&r.input).unwrap().1[k])
                .collect();
            assert!((crate::stats::variance(&resid) - 0.25).abs() < 0.02);
        }
        let one = gen_multiattr(&linear_world(1, 0.0), 3, &dist, 5).unwrap();
        assert!(one.iter().all(|r| r.scores.len() == 1));
    }

    #[test]
    fn tsv_round_trip_is_bitwise() {
        let w = GoldWorld::random_mlp(&RandomWorldParams {
            latent_dim: 5,
            ..Default::default()
        })
        .unwrap();
        let dist = PromptDistribution::standard("train", 5);
        let h = RecordHeader {
            latent_dim: 5,
            num_attributes: 3,
        };
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let pairs = gen_pairwise(&w, 1000, &dist, 11).unwrap();
        write_pairs(&dir.join("d.pairs.tsv"), h, &pairs).unwrap();
        assert_eq!(read_pairs(&dir.join("d.pairs.tsv")).unwrap(), (h, pairs));
        let attrs = gen_multiattr(&w, 1000, &dist, 12).unwrap();
        write_attrs(&dir.join("d.attrs.tsv"), h, &attrs).unwrap();
        assert_eq!(read_attrs(&dir.join("d.attrs.tsv")).unwrap(), (h, attrs));
        write_pairs(&dir.join("e.pairs.tsv"), h, &[]).unwrap();
        assert!(read_pairs(&dir.join("e.pairs.tsv")).unwrap().1.is_empty());
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let w = GoldWorld::random_mlp(&RandomWorldParams {
            latent_dim: 2,
            ..Default::default()
        })
        .unwrap();
        let h = RecordHeader {
            latent_dim: 2,
            num_attributes: 3,
        };
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("bad.attrs.tsv");
        write_attrs(
            &p,
            h,
            &gen_multiattr(&w, 10, &PromptDistribution::standard("x", 2), 0).unwrap(),
        )
        .unwrap();
        let mut lines: Vec<String> = std::fs::read_to_string(&p)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        lines[6] = lines[6].replacen(',', ",,", 1);
        std::fs::write(&p, lines.join("\n")).unwrap();
        match read_attrs(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
