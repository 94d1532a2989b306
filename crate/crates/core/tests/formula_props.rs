use proptest::prelude::*;
use sddr::formula::{canonical_format, detect_overlap, parse_formula, Term};

const VARS: [&str; 5] = ["x", "z", "u", "w1", "age"];

fn var() -> impl Strategy<Value = String> {
    prop::sample::select(VARS.to_vec()).prop_map(str::to_string)
}

fn num() -> impl Strategy<Value = String> {
    prop_oneof![
        (1u32..20).prop_map(|v| v.to_string()),
        (1u32..200).prop_map(|v| format!("{}", v as f64 / 8.0)),
    ]
}

/// Source text of one term from the formula grammar.
fn term() -> impl Strategy<Value = String> {
    prop_oneof![
        var(),
        (var(), prop::option::of(prop::sample::select(vec!["ps", "tp"])), prop::option::of(num()), prop::option::of(4usize..12))
            .prop_map(|(v, bs, df, k)| {
                let mut s = format!("s({v}");
                if let Some(b) = bs {
                    s.push_str(&format!(", bs=\"{b}\""));
                }
                if let Some(d) = df {
                    s.push_str(&format!(", df={d}"));
                }
                if let Some(k) = k {
                    s.push_str(&format!(", k={k}"));
                }
                s + ")"
            }),
        (var(), var(), prop::option::of(num())).prop_map(|(a, b, df)| match df {
            Some(d) => format!("te({a}, {b}, df={d})"),
            None => format!("te({a}, {b})"),
        }),
        (prop::collection::vec(var(), 1..3), num()).prop_map(|(vs, la)| format!("ridge({}, la={la})", vs.join(", "))),
        (prop::collection::vec(var(), 1..3), num()).prop_map(|(vs, la)| format!("lasso({}, la={la})", vs.join(", "))),
        var().prop_map(|v| format!("offset({v})")),
        (prop::sample::select(vec!["dnn", "deep_model", "net2"]), prop::collection::vec(var(), 1..4))
            .prop_map(|(n, vs)| format!("{n}({})", vs.join(", "))),
        (prop::collection::vec(var(), 1..3), prop::collection::vec(var(), 1..3))
            .prop_map(|(ins, against)| format!("dnn({}) %OZ% ({})", ins.join(", "), against.join(" + "))),
    ]
}

fn formula() -> impl Strategy<Value = String> {
    (prop::sample::select(vec!["", "1 + ", "0 + ", "-1 + "]), prop::collection::vec(term(), 1..6))
        .prop_map(|(lead, terms)| format!("~ {lead}{}", terms.join(" + ")))
}

proptest! {
    #[test]
    fn canonical_format_round_trips(src in formula()) {
        let f = parse_formula(&src).unwrap();
        let g = parse_formula(&canonical_format(&f)).unwrap();
        prop_assert!(f.same_structure(&g), "{src} -> {}", canonical_format(&f));
        prop_assert_eq!(canonical_format(&f), canonical_format(&g));
    }

    #[test]
    fn term_order_follows_source(terms in prop::collection::vec(term(), 1..6)) {
        let f = parse_formula(&format!("~ 0 + {}", terms.join(" + "))).unwrap();
        prop_assert_eq!(f.terms.len(), terms.len());
        for (t, src) in f.terms.iter().zip(&terms) {
            let single = parse_formula(&format!("~ 0 + {src}")).unwrap();
            prop_assert_eq!(t, &single.terms[0]);
        }
    }

    #[test]
    fn overlap_is_invariant_under_renaming(src in formula()) {
        let f = parse_formula(&src).unwrap();
        // prefixing every variable is a consistent renaming
        let mut renamed = src.clone();
        for v in VARS {
            renamed = rename(&renamed, v, &format!("v_{v}"));
        }
        let g = parse_formula(&renamed).unwrap();
        let a = detect_overlap(&f, false);
        let b = detect_overlap(&g, false);
        prop_assert_eq!(a.len(), b.len());
        for (oa, ob) in a.iter().zip(&b) {
            let la: Vec<String> = oa.structured.iter().map(Term::label).collect();
            let lb: Vec<String> = ob.structured.iter().map(Term::label).collect();
            prop_assert_eq!(la.len(), lb.len());
            for (x, y) in la.iter().zip(&lb) {
                let mut x2 = x.clone();
                for v in VARS {
                    x2 = rename(&x2, v, &format!("v_{v}"));
                }
                prop_assert_eq!(&x2, y);
            }
        }
    }
}

/// Replaces whole-word occurrences of `from` that are not function names.
fn rename(src: &str, from: &str, to: &str) -> String {
    let mut out = String::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let is_word = |c: u8| c.is_ascii_alphanumeric() || c == b'_';
        if is_word(bytes[i]) && (i == 0 || !is_word(bytes[i - 1])) {
            let mut j = i;
            while j < bytes.len() && is_word(bytes[j]) {
                j += 1;
            }
            let word = &src[i..j];
            let next = src[j..].trim_start().chars().next();
            let prev = src[..i].trim_end().chars().last();
            if word == from && next != Some('(') && next != Some('=') && prev != Some('=') {
                out.push_str(to);
            } else {
                out.push_str(word);
            }
            i = j;
        } else {
            out.push(bytes[i] as char);
            i += 1;
        }
    }
    out
}

#[test]
fn paper_style_formulas() {
    let f = parse_formula("~ 1 + x + s(z1, bs=\"tp\")").unwrap();
    assert_eq!(f.terms.len(), 3);
    assert!(matches!(f.terms[2], Term::Smooth { .. }));
    let f = parse_formula("~ 0 + s(z2, bs=\"ps\") + dnn(u)").unwrap();
    assert!(!f.has_intercept);
    assert!(matches!(f.terms[1], Term::Network(_)));
    let f = parse_formula("~ -1 + toyX + deep_model(toyXinDisguise) %OZ% (toyX)").unwrap();
    assert!(matches!(&f.terms[1], Term::Orthogonalized { against, .. } if against.len() == 1));
    assert!(parse_formula("~ 1 + + x").is_err());
    assert!(parse_formula("~ x %OZ% (z)").is_err());
}
