//! Text rendering of command output.

use std::fmt::Write;

use crackcnn::net::{LayerKind, LayerSpec};
use crackcnn::train::argmax;
use crackcnn::MetricsRow;

/// `13308032` -> `13,308,032`
pub(crate) fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn volume(dims: &[usize]) -> String {
    dims.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

/// Input, convolution, pooling and fully connected rows plus the total.
pub(crate) fn layer_table(layers: &[LayerSpec]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:<12} {:<8} {:<7} {:<12} {:>12}",
        "layer", "input", "filter", "stride", "output", "parameters"
    );
    for l in layers.iter().filter(|l| l.kind.is_tabulated()) {
        let filter = match (l.kind, l.filter) {
            (LayerKind::Conv, Some((fy, fx))) => format!("{}x{fy}x{fx}", l.output[0]),
            (_, Some((fy, fx))) => format!("{fy}x{fx}"),
            _ => "-".into(),
        };
        let stride = l.stride.map_or("-".into(), |(sy, sx)| format!("{sy}x{sx}"));
        let _ = writeln!(
            s,
            "{:<8} {:<12} {:<8} {:<7} {:<12} {:>12}",
            l.name,
            volume(&l.input),
            filter,
            stride,
            volume(&l.output),
            thousands(l.params)
        );
    }
    let total: usize = layers.iter().map(|l| l.params).sum();
    let _ = writeln!(s, "{:<51} {:>12}", "total", thousands(total));
    s
}

/// One `<label> <probability>` line per class, then the winner.
pub(crate) fn prediction(labels: &[String], probs: &[f32]) -> String {
    let mut s = String::new();
    for (label, p) in labels.iter().zip(probs) {
        let _ = writeln!(s, "{label} {p:.6}");
    }
    let best = argmax(probs);
    let _ = writeln!(s, "prediction: {} {:.6}", labels[best], probs[best]);
    s
}

/// First recorded step at which training accuracy reached `target`.
pub(crate) fn steps_to(metrics: &[MetricsRow], target: f64) -> String {
    match metrics.iter().find(|r| r.train_accuracy >= target) {
        Some(r) => format!("steps to train accuracy {target}: {}", r.step),
        None => format!("steps to train accuracy {target}: not reached"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crackcnn::NetworkConfig;

    #[test]
    fn groups_digits() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(448), "448");
        assert_eq!(thousands(4640), "4,640");
        assert_eq!(thousands(13_308_032), "13,308,032");
        assert_eq!(thousands(100_000), "100,000");
    }

    #[test]
    fn table_lists_tabulated_rows() {
        let table = layer_table(&NetworkConfig::standard(2).layers().unwrap());
        let names: Vec<&str> = table
            .lines()
            .skip(1)
            .map(|l| l.split_whitespace().next().unwrap())
            .collect();
        assert_eq!(
            names,
            ["Input", "C1", "P1", "C2", "P2", "FC1", "FC2", "total"]
        );
        assert!(table.contains("16x3x3"));
        assert!(table.lines().last().unwrap().ends_with("13,313,378"));
    }

    #[test]
    fn prediction_lines() {
        let labels = ["crack".to_string(), "negative".to_string()];
        let out = prediction(&labels, &[0.951548, 0.048452]);
        assert_eq!(
            out,
            "crack 0.951548\nnegative 0.048452\nprediction: crack 0.951548\n"
        );
    }

    #[test]
    fn steps_to_target() {
        let row = |step, train_accuracy| MetricsRow {
            step,
            train_loss: 0.0,
            train_accuracy,
            test_loss: 0.0,
            test_accuracy: 0.0,
            wall_seconds: 0.0,
        };
        let m = [row(10, 0.5), row(20, 0.97), row(30, 1.0)];
        assert_eq!(steps_to(&m, 0.97), "steps to train accuracy 0.97: 20");
        assert!(steps_to(&m[..1], 0.97).ends_with("not reached"));
    }
}
