use modality_lens::alignment::{normalize_feature, TeacherConfig, TeacherEmbedder, TeacherKind};
use modality_lens::numerics::Tensor;
use modality_lens::params::normal_tensor;
use modality_lens::zeroshot::{
    build_class_embeddings, classify_topk, eval_features, rank_scores, topk_accuracy,
    ClassEmbeddingTable,
};

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i}")).collect()
}

fn table_from(seed: u64, c: usize, d: usize) -> ClassEmbeddingTable {
    let raw = normal_tensor(seed, "table", &[c, d], 1.0);
    let mut data = Vec::new();
    for r in 0..c {
        let row = Tensor::new(vec![d], raw.row(r).to_vec()).unwrap();
        data.extend_from_slice(normalize_feature(&row).unwrap().data());
    }
    ClassEmbeddingTable {
        classes: names(c),
        embeddings: Tensor::new(vec![c, d], data).unwrap(),
        templates: vec!["a {}".into()],
    }
}

#[test]
fn three_template_average_matches_manual_computation() {
    let teacher = TeacherEmbedder::new(TeacherKind::Text, TeacherConfig::default(), 12);
    let templates: Vec<String> = ["a {}.", "a photo of a {}.", "a model of the {}."]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let classes = vec!["chair".to_string(), "lamp".to_string()];
    let table = build_class_embeddings(&classes, &templates, &teacher).unwrap();
    for (ci, class) in classes.iter().enumerate() {
        let mut sum = [0.0f64; 12];
        for t in &templates {
            let e = teacher.embed(&t.replace("{}", class)).unwrap();
            let n = e.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            for (s, x) in sum.iter_mut().zip(e.data()) {
                *s += x / n / 3.0;
            }
        }
        let n = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (j, s) in sum.iter().enumerate() {
            assert!((table.embeddings.row(ci)[j] - s / n).abs() < 1e-12);
        }
    }
}

#[test]
fn ranking_matches_full_sort_for_eight_classes() {
    let table = table_from(11, 8, 6);
    for s in 0..50u64 {
        let f = normal_tensor(s, "feature", &[6], 1.0);
        let unit = normalize_feature(&f).unwrap();
        let mut scored: Vec<(f64, usize)> = (0..8)
            .map(|c| {
                let dot: f64 = table
                    .embeddings
                    .row(c)
                    .iter()
                    .zip(unit.data())
                    .map(|(a, b)| a * b)
                    .sum();
                (dot, c)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let expected: Vec<usize> = scored.iter().map(|p| p.1).collect();
        for k in [1, 3, 5, 8] {
            assert_eq!(
                classify_topk(unit.data(), &table, k).unwrap(),
                expected[..k]
            );
        }
    }
}

#[test]
fn hand_labeled_topk_cases() {
    let classes = names(4);
    // (scores, label, hit@1, hit@2, hit@3)
    let cases: [([f64; 4], usize, [bool; 3]); 10] = [
        ([0.9, 0.1, 0.0, -0.2], 0, [true, true, true]),
        ([0.1, 0.9, 0.0, -0.2], 0, [false, true, true]),
        ([0.1, 0.9, 0.5, -0.2], 0, [false, false, true]),
        ([0.1, 0.9, 0.5, 0.3], 0, [false, false, false]),
        ([0.0, 0.0, 0.0, 0.0], 0, [true, true, true]),
        ([0.0, 0.0, 0.0, 0.0], 3, [false, false, false]),
        ([0.5, 0.5, 0.1, 0.1], 1, [false, true, true]),
        ([-1.0, -2.0, -3.0, -0.5], 3, [true, true, true]),
        ([-1.0, -2.0, -3.0, -0.5], 1, [false, false, true]),
        ([0.2, 0.3, 0.4, 0.1], 2, [true, true, true]),
    ];
    let preds: Vec<Vec<usize>> = cases
        .iter()
        .map(|(s, _, _)| rank_scores(s, &classes))
        .collect();
    let labels: Vec<usize> = cases.iter().map(|c| c.1).collect();
    for (k, col) in [1usize, 2, 3].iter().zip(0..3) {
        let hits = cases.iter().filter(|c| c.2[col]).count();
        let acc = topk_accuracy(&preds, &labels, &[*k]).unwrap()[0];
        assert_eq!(acc, 100.0 * hits as f64 / 10.0, "k={k}");
    }
    assert_eq!(topk_accuracy(&preds, &labels, &[4]).unwrap(), vec![100.0]);
}

#[test]
fn dataset_order_does_not_change_the_report() {
    let table = table_from(3, 5, 8);
    let feats: Vec<Tensor> = (0..23u64)
        .map(|s| normal_tensor(s, "f", &[8], 1.0))
        .collect();
    let labels: Vec<usize> = (0..23).map(|i| (i * 7) % 5).collect();
    let base = eval_features(&feats, &labels, &table, &[1, 3, 5]).unwrap();
    let order: Vec<usize> = (0..23).map(|i| (i * 10) % 23).collect();
    let pf: Vec<Tensor> = order.iter().map(|&i| feats[i].clone()).collect();
    let pl: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    assert_eq!(eval_features(&pf, &pl, &table, &[1, 3, 5]).unwrap(), base);
    assert_eq!(base.top(5), Some(100.0));
}

#[test]
fn feature_scale_does_not_change_predictions() {
    let table = table_from(9, 6, 5);
    let feats: Vec<Tensor> = (0..15u64)
        .map(|s| normal_tensor(s, "g", &[5], 1.0))
        .collect();
    let labels: Vec<usize> = (0..15).map(|i| i % 6).collect();
    let base = eval_features(&feats, &labels, &table, &[1, 2, 3]).unwrap();
    for scale in [1e-6, 0.3, 7.0, 1e6] {
        let scaled: Vec<Tensor> = feats
            .iter()
            .map(|f| Tensor::new(vec![5], f.data().iter().map(|x| x * scale).collect()).unwrap())
            .collect();
        let r = eval_features(&scaled, &labels, &table, &[1, 2, 3]).unwrap();
        assert_eq!(r.confusion, base.confusion);
        assert_eq!(r.topk, base.topk);
    }
}
