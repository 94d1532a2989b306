use super::{BasisTag, FormulaError, NetworkTerm, ParameterFormula, Term};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Tilde,
    Plus,
    Minus,
    LParen,
    RParen,
    Comma,
    Eq,
    Oz,
    Ident(String),
    Num(f64),
    Str(String),
    Eof,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    offset: usize,
}

fn syntax(offset: usize, message: impl Into<String>) -> FormulaError {
    FormulaError::Syntax {
        offset,
        message: message.into(),
    }
}

fn lex(src: &str) -> Result<Vec<Spanned>, FormulaError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let single = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'~' => Some(Tok::Tilde),
            b'+' => Some(Tok::Plus),
            b'-' => Some(Tok::Minus),
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            b',' => Some(Tok::Comma),
            b'=' => Some(Tok::Eq),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Spanned { tok, offset: start });
            i += 1;
            continue;
        }
        if c == b'%' {
            if src[i..].starts_with("%OZ%") {
                out.push(Spanned {
                    tok: Tok::Oz,
                    offset: start,
                });
                i += 4;
                continue;
            }
            return Err(syntax(start, "unknown infix operator (only %OZ% is supported)"));
        }
        if c == b'"' || c == b'\'' {
            let end = src[i + 1..]
                .find(c as char)
                .ok_or_else(|| syntax(start, "unterminated string"))?;
            out.push(Spanned {
                tok: Tok::Str(src[i + 1..i + 1 + end].to_string()),
                offset: start,
            });
            i += end + 2;
            continue;
        }
        if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            while i < bytes.len()
                && (bytes[i].is_ascii_digit()
                    || bytes[i] == b'.'
                    || bytes[i] == b'e'
                    || bytes[i] == b'E'
                    || ((bytes[i] == b'-' || bytes[i] == b'+')
                        && matches!(bytes[i - 1], b'e' | b'E')))
            {
                i += 1;
            }
            let text = &src[start..i];
            let v: f64 = text
                .parse()
                .map_err(|_| syntax(start, format!("invalid number '{text}'")))?;
            out.push(Spanned {
                tok: Tok::Num(v),
                offset: start,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' || c == b'.' {
            while i < bytes.len()
                && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.')
            {
                i += 1;
            }
            out.push(Spanned {
                tok: Tok::Ident(src[start..i].to_string()),
                offset: start,
            });
            continue;
        }
        let ch = src[i..].chars().next().unwrap_or('?');
        return Err(syntax(start, format!("unexpected character '{ch}'")));
    }
    out.push(Spanned {
        tok: Tok::Eof,
        offset: src.len(),
    });
    Ok(out)
}

enum ArgValue {
    Num(f64),
    Text(String),
    NumVec(Vec<f64>),
}

struct Call {
    name: String,
    offset: usize,
    positional: Vec<(String, usize)>,
    named: Vec<(String, ArgValue, usize)>,
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    intercept: Option<(bool, usize)>,
}

/// Parses one formula string (must start with `~`).
pub fn parse_formula(text: &str) -> Result<ParameterFormula, FormulaError> {
    let mut p = Parser {
        toks: lex(text)?,
        pos: 0,
        intercept: None,
    };
    p.expect(&Tok::Tilde, "formula must start with '~'")?;
    let mut terms = Vec::new();
    p.parse_item(&mut terms, true)?;
    loop {
        match p.peek().clone() {
            Tok::Plus => {
                p.bump();
                p.parse_item(&mut terms, false)?;
            }
            Tok::Minus => {
                p.parse_item(&mut terms, true)?;
            }
            Tok::Eof => break,
            _ => return Err(syntax(p.offset(), "expected '+' or end of formula")),
        }
    }
    let has_intercept = match p.intercept {
        Some((flag, _)) => flag,
        None => {
            terms.insert(0, Term::Intercept);
            true
        }
    };
    Ok(ParameterFormula {
        terms,
        has_intercept,
        source_text: text.to_string(),
    })
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].offset
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: &Tok, msg: &str) -> Result<usize, FormulaError> {
        if self.peek() == tok {
            Ok(self.bump().offset)
        } else {
            Err(syntax(self.offset(), msg))
        }
    }

    fn set_intercept(&mut self, flag: bool, offset: usize) -> Result<(), FormulaError> {
        if self.intercept.is_some() {
            return Err(FormulaError::DuplicateIntercept { offset });
        }
        self.intercept = Some((flag, offset));
        Ok(())
    }

    /// One `+`-separated item, optionally prefixed by `-` (only `-1` is allowed).
    fn parse_item(&mut self, terms: &mut Vec<Term>, allow_minus: bool) -> Result<(), FormulaError> {
        if *self.peek() == Tok::Minus {
            let at = self.bump().offset;
            if !allow_minus {
                return Err(syntax(at, "unexpected '-'"));
            }
            match self.peek().clone() {
                Tok::Num(v) if v == 1.0 => {
                    let off = self.bump().offset;
                    return self.set_intercept(false, off);
                }
                _ => return Err(syntax(self.offset(), "only '-1' may be subtracted")),
            }
        }
        let start = self.offset();
        match self.peek().clone() {
            Tok::Num(v) if v == 1.0 => {
                self.bump();
                self.set_intercept(true, start)?;
                terms.push(Term::Intercept);
                Ok(())
            }
            Tok::Num(v) if v == 0.0 => {
                self.bump();
                self.set_intercept(false, start)
            }
            Tok::Num(_) => Err(syntax(start, "only 0 and 1 may appear as bare numbers")),
            Tok::Ident(_) => {
                let term = self.parse_term()?;
                if *self.peek() == Tok::Oz {
                    let oz_at = self.bump().offset;
                    let network = match term {
                        Term::Network(net) => net,
                        _ => return Err(FormulaError::OzLeftNotNetwork { offset: start }),
                    };
                    let against = self.parse_oz_rhs(oz_at)?;
                    terms.push(Term::Orthogonalized { network, against });
                } else {
                    terms.push(term);
                }
                Ok(())
            }
            _ => Err(syntax(start, "expected a term")),
        }
    }

    fn parse_oz_rhs(&mut self, oz_at: usize) -> Result<Vec<Term>, FormulaError> {
        let mut against = Vec::new();
        if *self.peek() == Tok::LParen {
            self.bump();
            loop {
                against.push(self.parse_oz_operand()?);
                match self.peek() {
                    Tok::Plus => {
                        self.bump();
                    }
                    Tok::RParen => {
                        self.bump();
                        break;
                    }
                    _ => return Err(syntax(self.offset(), "expected '+' or ')' in %OZ% list")),
                }
            }
        } else {
            against.push(self.parse_oz_operand()?);
        }
        if against.is_empty() {
            return Err(syntax(oz_at, "%OZ% needs at least one structured term"));
        }
        Ok(against)
    }

    fn parse_oz_operand(&mut self) -> Result<Term, FormulaError> {
        let at = self.offset();
        if matches!(self.peek(), Tok::Num(v) if *v == 1.0) {
            self.bump();
            return Ok(Term::Intercept);
        }
        let term = self.parse_term()?;
        if !term.is_structured() {
            return Err(syntax(at, "right side of %OZ% must contain structured terms only"));
        }
        Ok(term)
    }

    fn parse_term(&mut self) -> Result<Term, FormulaError> {
        let Spanned { tok, offset } = self.bump();
        let name = match tok {
            Tok::Ident(name) => name,
            _ => return Err(syntax(offset, "expected an identifier")),
        };
        if *self.peek() != Tok::LParen {
            return Ok(Term::Linear { vars: vec![name] });
        }
        let call = self.parse_call(name, offset)?;
        build_call(call)
    }

    fn parse_call(&mut self, name: String, offset: usize) -> Result<Call, FormulaError> {
        self.expect(&Tok::LParen, "expected '('")?;
        let mut call = Call {
            name,
            offset,
            positional: Vec::new(),
            named: Vec::new(),
        };
        if *self.peek() == Tok::RParen {
            self.bump();
            return Ok(call);
        }
        loop {
            let Spanned { tok, offset: at } = self.bump();
            let ident = match tok {
                Tok::Ident(s) => s,
                _ => return Err(syntax(at, "expected a variable name or named argument")),
            };
            if *self.peek() == Tok::Eq {
                self.bump();
                let value = self.parse_value()?;
                call.named.push((ident, value, at));
            } else {
                if !call.named.is_empty() {
                    return Err(syntax(at, "positional argument after named argument"));
                }
                call.positional.push((ident, at));
            }
            match self.peek() {
                Tok::Comma => {
                    self.bump();
                }
                Tok::RParen => {
                    self.bump();
                    break;
                }
                _ => return Err(syntax(self.offset(), "expected ',' or ')'")),
            }
        }
        Ok(call)
    }

    fn parse_value(&mut self) -> Result<ArgValue, FormulaError> {
        let Spanned { tok, offset } = self.bump();
        match tok {
            Tok::Num(v) => Ok(ArgValue::Num(v)),
            Tok::Str(s) => Ok(ArgValue::Text(s)),
            Tok::Ident(s) if s == "c" && *self.peek() == Tok::LParen => {
                self.bump();
                let mut vals = Vec::new();
                loop {
                    match self.bump() {
                        Spanned {
                            tok: Tok::Num(v), ..
                        } => vals.push(v),
                        Spanned { offset, .. } => {
                            return Err(syntax(offset, "c(...) accepts numbers only"))
                        }
                    }
                    match self.bump() {
                        Spanned { tok: Tok::Comma, .. } => {}
                        Spanned {
                            tok: Tok::RParen, ..
                        } => break,
                        Spanned { offset, .. } => return Err(syntax(offset, "expected ',' or ')'")),
                    }
                }
                Ok(ArgValue::NumVec(vals))
            }
            Tok::Ident(s) => Ok(ArgValue::Text(s)),
            _ => Err(syntax(offset, "expected an argument value")),
        }
    }
}

fn named_num(name: &str, v: &ArgValue, at: usize) -> Result<f64, FormulaError> {
    match v {
        ArgValue::Num(x) => Ok(*x),
        _ => Err(syntax(at, format!("argument '{name}' must be a number"))),
    }
}

fn named_count(name: &str, v: &ArgValue, at: usize) -> Result<usize, FormulaError> {
    let x = named_num(name, v, at)?;
    if x < 1.0 || x.fract() != 0.0 {
        return Err(syntax(at, format!("argument '{name}' must be a positive integer")));
    }
    Ok(x as usize)
}

fn basis_tag(v: &ArgValue, at: usize) -> Result<BasisTag, FormulaError> {
    match v {
        ArgValue::Text(s) if s == "ps" => Ok(BasisTag::Ps),
        ArgValue::Text(s) if s == "tp" => Ok(BasisTag::Tp),
        ArgValue::Text(s) => Err(syntax(at, format!("unsupported basis '{s}' (use \"ps\" or \"tp\")"))),
        _ => Err(syntax(at, "bs must be a basis name")),
    }
}

fn positive_df(v: &ArgValue, at: usize) -> Result<f64, FormulaError> {
    let df = named_num("df", v, at)?;
    if !(df > 0.0) || !df.is_finite() {
        return Err(syntax(at, "df must be positive"));
    }
    Ok(df)
}

fn build_call(call: Call) -> Result<Term, FormulaError> {
    let Call {
        name,
        offset,
        positional,
        named,
    } = call;
    let vars: Vec<String> = positional.into_iter().map(|(v, _)| v).collect();
    let need_vars = |min: usize, max: Option<usize>| -> Result<(), FormulaError> {
        if vars.len() < min || max.is_some_and(|m| vars.len() > m) {
            let expect = match max {
                Some(m) if m == min => format!("exactly {min}"),
                Some(m) => format!("{min} to {m}"),
                None => format!("at least {min}"),
            };
            return Err(syntax(offset, format!("{name}() takes {expect} variable(s)")));
        }
        Ok(())
    };
    let reject_named = |allowed: &[&str]| -> Result<(), FormulaError> {
        for (arg, _, at) in &named {
            if !allowed.contains(&arg.as_str()) {
                return Err(syntax(*at, format!("{name}() does not accept argument '{arg}'")));
            }
        }
        Ok(())
    };
    match name.as_str() {
        "s" => {
            need_vars(1, Some(1))?;
            reject_named(&["bs", "df", "k", "m"])?;
            let (mut basis, mut df, mut k, mut order) = (None, None, None, None);
            for (arg, v, at) in &named {
                match arg.as_str() {
                    "bs" => basis = Some(basis_tag(v, *at)?),
                    "df" => df = Some(positive_df(v, *at)?),
                    "k" => k = Some(named_count("k", v, *at)?),
                    _ => order = Some(named_count("m", v, *at)?),
                }
            }
            Ok(Term::Smooth {
                var: vars[0].clone(),
                basis,
                df,
                k,
                order,
            })
        }
        "te" | "ti" => {
            need_vars(2, None)?;
            reject_named(&["bs", "df", "k"])?;
            let (mut basis, mut df, mut k) = (None, None, None);
            for (arg, v, at) in &named {
                match arg.as_str() {
                    "bs" => basis = Some(basis_tag(v, *at)?),
                    "df" => df = Some(positive_df(v, *at)?),
                    _ => {
                        let ks = match v {
                            ArgValue::NumVec(xs) => xs
                                .iter()
                                .map(|x| named_count("k", &ArgValue::Num(*x), *at))
                                .collect::<Result<Vec<_>, _>>()?,
                            other => vec![named_count("k", other, *at)?],
                        };
                        if ks.len() != 1 && ks.len() != vars.len() {
                            return Err(syntax(*at, "k must have one entry or one per margin"));
                        }
                        k = Some(ks);
                    }
                }
            }
            Ok(Term::TensorSmooth {
                vars,
                basis,
                k,
                df,
                interaction_only: name == "ti",
            })
        }
        "lin" => {
            need_vars(1, None)?;
            reject_named(&[])?;
            Ok(Term::Linear { vars })
        }
        "ridge" | "lasso" => {
            need_vars(1, None)?;
            reject_named(&["la"])?;
            let (_, v, at) = named
                .iter()
                .find(|(a, _, _)| a == "la")
                .ok_or_else(|| syntax(offset, format!("{name}() requires la=")))?;
            let la = named_num("la", v, *at)?;
            if !(la >= 0.0) || !la.is_finite() {
                return Err(syntax(*at, "la must be non-negative"));
            }
            Ok(if name == "ridge" {
                Term::Ridge { vars, la }
            } else {
                Term::Lasso { vars, la }
            })
        }
        "offset" => {
            need_vars(1, Some(1))?;
            reject_named(&[])?;
            Ok(Term::Offset {
                var: vars[0].clone(),
            })
        }
        _ => {
            need_vars(1, None)?;
            if let Some((arg, _, at)) = named.first() {
                return Err(syntax(*at, format!("network term {name}() does not take '{arg}'")));
            }
            Ok(Term::Network(NetworkTerm { name, inputs: vars }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin(v: &str) -> Term {
        Term::Linear {
            vars: vec![v.to_string()],
        }
    }

    #[test]
    fn location_formula_with_thin_plate() {
        let f = parse_formula("~ 1 + x + s(z1, bs=\"tp\")").unwrap();
        assert!(f.has_intercept);
        assert_eq!(
            f.terms,
            vec![
                Term::Intercept,
                lin("x"),
                Term::Smooth {
                    var: "z1".into(),
                    basis: Some(BasisTag::Tp),
                    df: None,
                    k: None,
                    order: None
                }
            ]
        );
    }

    #[test]
    fn scale_formula_without_intercept() {
        let f = parse_formula("~ 0 + s(z2, bs=\"ps\") + dnn(u)").unwrap();
        assert!(!f.has_intercept);
        assert_eq!(f.terms.len(), 2);
        assert!(matches!(f.terms[0], Term::Smooth { basis: Some(BasisTag::Ps), .. }));
        assert_eq!(
            f.terms[1],
            Term::Network(NetworkTerm {
                name: "dnn".into(),
                inputs: vec!["u".into()]
            })
        );
    }

    #[test]
    fn intercept_only() {
        let f = parse_formula("~ 1").unwrap();
        assert_eq!(f.terms, vec![Term::Intercept]);
        assert!(f.has_intercept);
    }

    #[test]
    fn manual_orthogonalization() {
        let f = parse_formula("~ -1 + toyX + deep_model(toyXinDisguise) %OZ% (toyX)").unwrap();
        assert!(!f.has_intercept);
        assert_eq!(
            f.terms,
            vec![
                lin("toyX"),
                Term::Orthogonalized {
                    network: NetworkTerm {
                        name: "deep_model".into(),
                        inputs: vec!["toyXinDisguise".into()]
                    },
                    against: vec![lin("toyX")]
                }
            ]
        );
    }

    #[test]
    fn oz_with_parenthesised_sum() {
        let f = parse_formula("~ 1 + deep_model(u) %OZ% (x + s(z))").unwrap();
        match &f.terms[1] {
            Term::Orthogonalized { against, .. } => {
                assert_eq!(against.len(), 2);
                assert!(matches!(against[1], Term::Smooth { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
        // %OZ% binds tighter than '+'
        let g = parse_formula("~ 1 + net(u) %OZ% x + z").unwrap();
        assert_eq!(g.terms.len(), 3);
        assert_eq!(g.terms[2], lin("z"));
    }

    #[test]
    fn bare_word_basis_and_named_args() {
        let f = parse_formula("~s(x,bs=ps,df=4.5,k=12,m=3)").unwrap();
        assert_eq!(
            f.terms[1],
            Term::Smooth {
                var: "x".into(),
                basis: Some(BasisTag::Ps),
                df: Some(4.5),
                k: Some(12),
                order: Some(3)
            }
        );
    }

    #[test]
    fn implicit_intercept_goes_first() {
        let f = parse_formula("~ x + ridge(a, b, la = 0.5) + lasso(c, la=1) + offset(o)").unwrap();
        assert_eq!(f.terms[0], Term::Intercept);
        assert_eq!(f.terms.len(), 5);
    }

    #[test]
    fn tensor_with_vector_k() {
        let f = parse_formula("~ 1 + te(latitude, longitude, df = 5, k=c(4, 5))").unwrap();
        assert_eq!(
            f.terms[1],
            Term::TensorSmooth {
                vars: vec!["latitude".into(), "longitude".into()],
                basis: None,
                k: Some(vec![4, 5]),
                df: Some(5.0),
                interaction_only: false
            }
        );
    }

    #[test]
    fn errors_carry_offsets() {
        match parse_formula("~ 1 + x +") {
            Err(FormulaError::Syntax { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
        match parse_formula("~ 1 + x + 1") {
            Err(FormulaError::DuplicateIntercept { offset }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_formula("~ 0 + x - 1"),
            Err(FormulaError::DuplicateIntercept { .. })
        ));
        assert!(matches!(
            parse_formula("~ 1 + s(x) %OZ% z"),
            Err(FormulaError::OzLeftNotNetwork { offset: 6 })
        ));
        assert!(parse_formula("x + 1").is_err());
        assert!(parse_formula("~ s(x, z)").is_err());
        assert!(parse_formula("~ te(x)").is_err());
        assert!(parse_formula("~ ridge(x)").is_err());
        assert!(parse_formula("~ s(x, df=-1)").is_err());
        assert!(parse_formula("~ net(u) %OZ% (x + other(v))").is_err());
        assert!(parse_formula("~ x * z").is_err());
    }

    #[test]
    fn whitespace_insensitive() {
        let a = parse_formula("~1+x+s(z,bs='ps')").unwrap();
        let b = parse_formula("  ~ 1 +  x\n + s( z , bs = \"ps\" ) ").unwrap();
        assert!(a.same_structure(&b));
    }
}
