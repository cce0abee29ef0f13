//! Certifies the synthetic dataset construction: a 3-nearest-neighbor
//! baseline on raw pixels must separate the two classes, independent of any
//! network code.

use trigan_core::data::{make_synthetic, SyntheticSpec};

fn knn3_leave_one_out(images: &[f64], labels: &[usize], n: usize) -> f64 {
    let dim = images.len() / n;
    let mut hits = 0usize;
    for i in 0..n {
        let xi = &images[i * dim..(i + 1) * dim];
        // Three smallest distances among all other samples.
        let mut best: Vec<(f64, usize)> = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = &images[j * dim..(j + 1) * dim];
            let d2: f64 = xi
                .iter()
                .zip(xj)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best.push((d2, labels[j]));
        }
        best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let votes: usize = best[..3].iter().filter(|(_, l)| *l == 1).count();
        let pred = usize::from(votes >= 2);
        if pred == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

#[test]
fn knn_separates_classes_at_desk_scale() {
    let ds = make_synthetic(&SyntheticSpec::new(32, 100, 77)).unwrap();
    let acc = knn3_leave_one_out(ds.images.data(), &ds.labels, ds.len());
    assert!(acc > 0.80, "3-NN leave-one-out accuracy {acc}");
}
