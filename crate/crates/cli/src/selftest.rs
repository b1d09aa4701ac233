//! Quick gradient and oracle checks against the configured pipeline.

use std::time::Instant;

use elodin::autodiff::Tape;
use elodin::eval::{interpret_similarity, Interpretation};
use elodin::naming::{name_concept, naming_loss, NamingConfig, TargetSpec};
use elodin::pipeline::{Nuisance, Pipeline, SceneParams};
use elodin::prompt::parse;
use elodin::vocabulary::Vocabulary;

type Check = fn(&Pipeline) -> Result<String, String>;

fn fd_error(analytic: &[f64], f: impl Fn(usize, f64) -> f64) -> f64 {
    let h = 1e-6;
    let numeric: Vec<f64> = (0..analytic.len()).map(|j| (f(j, h) - f(j, -h)) / (2.0 * h)).collect();
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn tape_gradients(_: &Pipeline) -> Result<String, String> {
    let x = vec![0.3, -1.2, 0.8, 2.0, -0.4];
    let y = vec![1.1, 0.2, -0.7, 0.5, 0.9];
    let eval = |x: &[f64]| {
        let mut t = Tape::new();
        let a = t.vector(x.to_vec());
        let b = t.vector(y.clone());
        let s = t.sigmoid(a).map_err(|e| e.to_string())?;
        let m = t.mul(s, b).map_err(|e| e.to_string())?;
        let h = t.tanh(m).map_err(|e| e.to_string())?;
        let c = t.cosine(h, a).map_err(|e| e.to_string())?;
        let g = t.backward(c).map_err(|e| e.to_string())?;
        Ok::<_, String>((t.scalar(c), g.wrt(a).to_vec()))
    };
    let (_, grad) = eval(&x)?;
    let err = fd_error(&grad, |j, d| {
        let mut x = x.clone();
        x[j] += d;
        eval(&x).map(|r| r.0).unwrap_or(f64::NAN)
    });
    if err <= 1e-5 {
        Ok(format!("relative error {err:.1e}"))
    } else {
        Err(format!("relative error {err:.3e}"))
    }
}

fn naming_gradients(p: &Pipeline) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    let targets = [
        ("bird", TargetSpec::text("a yellow hawk")),
        ("woman", TargetSpec::Identity(vec![0.85, 0.2, 0.7, 0.3])),
    ];
    for (initial, target) in &targets {
        let list = p.encode(&[*initial]).map_err(|e| e.to_string())?;
        let (_, grad) = naming_loss(p, &list, 1, target, 11, 0.05).map_err(|e| e.to_string())?;
        let err = fd_error(&grad[0], |j, d| {
            let mut l = list.clone();
            let mut row = l.row(0).to_vec();
            row[j] += d;
            l.set_row(0, row);
            naming_loss(p, &l, 1, target, 11, 0.05).map_or(f64::NAN, |r| r.0)
        });
        worst = worst.max(err);
    }
    if worst <= 1e-5 {
        Ok(format!("worst relative error {worst:.1e}"))
    } else {
        Err(format!("relative error {worst:.3e}"))
    }
}

fn identity_round_trip(p: &Pipeline) -> Result<String, String> {
    let v = [0.85, 0.2, 0.7, 0.3];
    let scene = SceneParams {
        face: 1.0,
        identity: v,
        ..Default::default()
    };
    let image = p.render(&scene, &Nuisance::none()).map_err(|e| e.to_string())?.image;
    let got = p.extract_identity(&image).map_err(|e| e.to_string())?;
    let err = v.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if err <= 1e-6 {
        Ok(format!("max error {err:.1e}"))
    } else {
        Err(format!("max error {err:.3e}"))
    }
}

fn prompt_syntax(_: &Pipeline) -> Result<String, String> {
    let prompt = "<a bird | my_hawk> amidst white flowers";
    let ast = parse(prompt).map_err(|e| e.to_string())?;
    if ast.to_string() != prompt || ast.stripped() != "a bird amidst white flowers" {
        return Err(format!("got {ast} / {}", ast.stripped()));
    }
    match parse("x <a bird | k") {
        Err(e) if e.position() == 2 => Ok("bird example and error positions".into()),
        other => Err(format!("unclosed bracket gave {other:?}")),
    }
}

fn norm_and_storage(p: &Pipeline) -> Result<String, String> {
    let target = TargetSpec::text("a yellow hawk");
    let config = NamingConfig {
        steps: 20,
        ..NamingConfig::for_target(&target)
    };
    let n = name_concept(p, &["bird"], &target, "probe", &config).map_err(|e| e.to_string())?;
    let expected = (p.dim() as f64).sqrt();
    let norm = n.embeddings[0].iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - expected).abs() > 1e-9 {
        return Err(format!("norm {norm}, expected {expected}"));
    }
    let mut v = Vocabulary::new(p.dim());
    v.insert(n, false).map_err(|e| e.to_string())?;
    let back = Vocabulary::from_json(&v.to_json().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    if back != v {
        return Err("vocabulary changed after a JSON round trip".into());
    }
    Ok(format!("norm {norm:.6}, JSON round trip exact"))
}

fn thresholds(_: &Pipeline) -> Result<String, String> {
    let ok = interpret_similarity(0.71) == Interpretation::SameIdentity
        && interpret_similarity(0.43) == Interpretation::DifferentIdentity;
    if ok {
        Ok("0.71 same, 0.43 different".into())
    } else {
        Err("threshold misclassifies 0.71 or 0.43".into())
    }
}

/// Prints one line per check; returns the number of failures.
pub fn run(p: &Pipeline) -> usize {
    let checks: [(&str, Check); 6] = [
        ("tape gradients", tape_gradients),
        ("naming loss gradients", naming_gradients),
        ("identity extraction", identity_round_trip),
        ("prompt syntax", prompt_syntax),
        ("namecon norm and storage", norm_and_storage),
        ("identity thresholds", thresholds),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        match check(p) {
            Ok(detail) => println!("PASS {name}: {detail} ({:.0?})", start.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    failed
}
