//! Brute-force oracles for the three aggregation rules over every binary
//! member prediction with up to 4 members and 3 labels.

use imlx::ensemble::{ctp, ptc_lw, ptc_mode, EnsembleOutput, PredictionMatrix};

const THRESHOLD: f64 = 0.5;

/// Every assignment of bits to `members × labels` cells, one sample each.
fn cases(members: usize, labels: usize) -> impl Iterator<Item = Vec<Vec<u8>>> {
    (0u32..1 << (members * labels)).map(move |code| {
        (0..members)
            .map(|m| (0..labels).map(|l| ((code >> (m * labels + l)) & 1) as u8).collect())
            .collect()
    })
}

fn matrices(bits: &[Vec<u8>]) -> Vec<PredictionMatrix> {
    let labels: Vec<String> = (0..bits[0].len()).map(|l| format!("L{l}")).collect();
    bits.iter()
        .enumerate()
        .map(|(m, row)| {
            PredictionMatrix::new(
                format!("m{m}"),
                labels.clone(),
                vec!["s".into()],
                vec![row.iter().map(|&b| b as f64).collect()],
            )
            .unwrap()
        })
        .collect()
}

fn ones(bits: &[Vec<u8>], l: usize) -> usize {
    bits.iter().filter(|row| row[l] == 1).count()
}

fn lex_less(a: &[usize], b: &[usize]) -> bool {
    for i in 0..a.len().min(b.len()) {
        if a[i] != b[i] {
            return a[i] < b[i];
        }
    }
    a.len() < b.len()
}

fn oracle_mode(bits: &[Vec<u8>]) -> Vec<usize> {
    let sets: Vec<Vec<usize>> = bits
        .iter()
        .map(|row| (0..row.len()).filter(|&l| row[l] == 1).collect())
        .collect();
    let mut best: Option<(usize, &Vec<usize>)> = None;
    for s in &sets {
        let count = sets.iter().filter(|t| *t == s).count();
        best = match best {
            None => Some((count, s)),
            Some((c, b)) if count > c || (count == c && lex_less(s, b)) => Some((count, s)),
            keep => keep,
        };
    }
    best.unwrap().1.clone()
}

fn check_agreement(out: &EnsembleOutput, bits: &[Vec<u8>]) {
    for l in 0..bits[0].len() {
        assert_eq!(out.agreement[0][l] as usize, ones(bits, l));
    }
    assert_eq!(out.members, bits.len());
}

#[test]
fn exhaustive_small_ensembles() {
    let mut checked = 0;
    for members in 1..=4 {
        for labels in 1..=3 {
            for bits in cases(members, labels) {
                let m = matrices(&bits);
                let c = ctp(&m, THRESHOLD).unwrap();
                let lw = ptc_lw(&m, THRESHOLD).unwrap();
                let mode = ptc_mode(&m, THRESHOLD).unwrap();
                let want_mode = oracle_mode(&bits);
                for l in 0..labels {
                    let k = ones(&bits, l);
                    assert_eq!(c.scores[0][l], k as f64 / members as f64, "{bits:?}");
                    assert_eq!(lw.scores[0][l], if 2 * k > members { 1.0 } else { 0.0 }, "{bits:?}");
                    assert_eq!(mode.scores[0][l], if want_mode.contains(&l) { 1.0 } else { 0.0 }, "{bits:?}");
                }
                for out in [&c, &lw, &mode] {
                    check_agreement(out, &bits);
                }
                checked += 1;
            }
        }
    }
    // 2^(M·L) summed over M ≤ 4, L ≤ 3
    assert_eq!(checked, (1..=4).flat_map(|m| (1..=3).map(move |l| 1usize << (m * l))).sum::<usize>());
}
