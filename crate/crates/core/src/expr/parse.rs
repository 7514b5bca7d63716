use num_bigint::BigInt;

use super::{Constant, Decimal, Expr, ExprError, Func};

const GREEK: &[&str] = &[
    "alpha", "beta", "gamma", "delta", "epsilon", "varepsilon", "zeta", "eta", "theta",
    "vartheta", "iota", "kappa", "lambda", "mu", "nu", "xi", "omicron", "rho", "varrho",
    "sigma", "varsigma", "tau", "upsilon", "phi", "varphi", "chi", "psi", "omega", "Gamma",
    "Delta", "Theta", "Lambda", "Xi", "Pi", "Sigma", "Upsilon", "Phi", "Psi", "Omega",
];

/// Spacing and sizing commands that carry no meaning.
const IGNORED: &[&str] = &[
    ",", ";", ":", "!", " ", "quad", "qquad", "left", "right", "big", "Big", "bigg", "Bigg",
    "displaystyle", "limits",
];

/// Commands whose braced argument names a decorated symbol (`\vec{u}`).
const DECORATIONS: &[&str] = &["vec", "hat", "bar", "overline", "tilde", "mathbf", "boldsymbol", "dot"];

/// Commands whose braced argument is upright text (`\mathrm{e}`).
const TEXT_COMMANDS: &[&str] = &["mathrm", "text", "textrm", "operatorname", "mathit", "rm"];

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(String),
    Letter(char),
    Cmd(String),
    Sym(char),
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    offset: usize,
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Num(n) => format!("number {n}"),
        Tok::Letter(c) => format!("letter {c}"),
        Tok::Cmd(c) => format!("\\{c}"),
        Tok::Sym(c) => format!("'{c}'"),
        Tok::End => "end of input".to_string(),
    }
}

fn lex(text: &str) -> Vec<Token> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let mut skip_delim = false;
    while i < bytes.len() {
        let c = text[i..].chars().next().unwrap();
        let start = i;
        if c.is_whitespace() || c == '~' {
            i += c.len_utf8();
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let mut j = i;
            let mut seen_dot = false;
            while j < bytes.len() {
                let b = bytes[j];
                if b.is_ascii_digit() {
                    j += 1;
                } else if b == b'.' && !seen_dot && bytes.get(j + 1).is_some_and(u8::is_ascii_digit) {
                    seen_dot = true;
                    j += 1;
                } else {
                    break;
                }
            }
            out.push(Token { tok: Tok::Num(text[i..j].to_string()), offset: start });
            i = j;
            skip_delim = false;
            continue;
        }
        if c == '\\' {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_alphabetic() {
                j += 1;
            }
            if j == i + 1 && j < bytes.len() {
                // control symbol such as `\,` or `\{`
                j += text[j..].chars().next().unwrap().len_utf8();
            }
            let name = &text[i + 1..j];
            i = j;
            if name == "left" || name == "right" {
                skip_delim = true;
                continue;
            }
            if IGNORED.contains(&name) {
                continue;
            }
            let tok = match name {
                "cdot" | "times" | "ast" => Tok::Sym('*'),
                "div" => Tok::Sym('/'),
                "{" | "lbrace" => Tok::Sym('('),
                "}" | "rbrace" => Tok::Sym(')'),
                "lvert" | "rvert" | "vert" | "|" => Tok::Sym('|'),
                "lbrack" => Tok::Sym('['),
                "rbrack" => Tok::Sym(']'),
                _ => Tok::Cmd(name.to_string()),
            };
            skip_delim = false;
            out.push(Token { tok, offset: start });
            continue;
        }
        i += c.len_utf8();
        if skip_delim && c == '.' {
            // `\left.` is an invisible delimiter
            skip_delim = false;
            continue;
        }
        skip_delim = false;
        let tok = if c.is_ascii_alphabetic() {
            Tok::Letter(c)
        } else {
            Tok::Sym(c)
        };
        out.push(Token { tok, offset: start });
    }
    out.push(Token { tok: Tok::End, offset: text.len() });
    out
}

/// Drops a trailing unit annotation such as `\,\mathrm{m/s^2}` or `\text{ N}`.
///
/// A suffix is only removed when something remains in front of it and it is
/// not a subscript (`P_{\mathrm{top}}` is kept).
pub fn strip_unit_suffix(text: &str) -> &str {
    let mut s = text.trim_end();
    loop {
        let trimmed = trim_spacing(s);
        let Some(stripped) = strip_one_unit(trimmed) else {
            return if trimmed.trim().is_empty() { s } else { trimmed };
        };
        if trim_spacing(stripped).trim().is_empty() {
            return trimmed;
        }
        s = stripped;
    }
}

fn trim_spacing(mut s: &str) -> &str {
    loop {
        let before = s;
        s = s.trim_end();
        for suffix in ["\\,", "\\;", "\\:", "\\!", "\\ ", "~", "\\quad", "\\qquad", "\\"] {
            if let Some(rest) = s.strip_suffix(suffix) {
                s = rest;
            }
        }
        if s == before {
            return s;
        }
    }
}

fn strip_one_unit(s: &str) -> Option<&str> {
    if !s.ends_with('}') {
        return None;
    }
    let bytes = s.as_bytes();
    let mut depth = 0i32;
    let mut open = None;
    for idx in (0..bytes.len()).rev() {
        match bytes[idx] {
            b'}' => depth += 1,
            b'{' => {
                depth -= 1;
                if depth == 0 {
                    open = Some(idx);
                    break;
                }
            }
            _ => {}
        }
    }
    let head = &s[..open?];
    for cmd in ["\\mathrm", "\\text", "\\textrm", "\\mbox", "\\unit"] {
        if let Some(rest) = head.strip_suffix(cmd) {
            if rest.trim_end().ends_with('_') || rest.trim_end().ends_with('^') {
                return None;
            }
            return Some(rest);
        }
    }
    None
}

/// Parses a LaTeX-subset expression.
///
/// Adjacent factors multiply (`mgh` is `(m*g)*h`), `^` is right-associative,
/// and unary minus binds looser than `^` but tighter than `+`/`-`.
pub fn parse_expression(text: &str) -> Result<Expr, ExprError> {
    let text = strip_unit_suffix(text);
    if text.trim().is_empty() {
        return Err(ExprError::Empty);
    }
    let mut p = Parser { toks: lex(text), pos: 0, abs_depth: 0 };
    if matches!(p.peek(), Tok::End) {
        return Err(ExprError::Empty);
    }
    let e = p.sum()?;
    if !matches!(p.peek(), Tok::End) {
        return Err(p.error(&["operator", "end of input"]));
    }
    Ok(e)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    abs_depth: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].offset
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if !matches!(t, Tok::End) {
            self.pos += 1;
        }
        t
    }

    fn eat_sym(&mut self, c: char) -> bool {
        if *self.peek() == Tok::Sym(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn error(&self, expected: &[&str]) -> ExprError {
        ExprError::Parse {
            offset: self.offset(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: describe(self.peek()),
        }
    }

    fn expect_sym(&mut self, c: char) -> Result<(), ExprError> {
        if self.eat_sym(c) {
            Ok(())
        } else {
            Err(self.error(&[&format!("'{c}'")]))
        }
    }

    fn sum(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat_sym('+') {
                lhs = Expr::add(lhs, self.term()?);
            } else if self.eat_sym('-') {
                lhs = Expr::sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat_sym('*') {
                lhs = Expr::mul(lhs, self.unary()?);
            } else if self.eat_sym('/') {
                lhs = Expr::div(lhs, self.unary()?);
            } else if self.starts_factor() {
                lhs = Expr::mul(lhs, self.power()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat_sym('-') {
            Ok(Expr::neg(self.unary()?))
        } else if self.eat_sym('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn starts_factor(&self) -> bool {
        match self.peek() {
            Tok::Num(_) | Tok::Letter(_) | Tok::Cmd(_) => true,
            Tok::Sym('(') | Tok::Sym('[') | Tok::Sym('{') => true,
            Tok::Sym('|') => self.abs_depth == 0,
            _ => false,
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.eat_sym('^') {
            let exp = self.exponent()?;
            Ok(Expr::pow(base, exp))
        } else {
            Ok(base)
        }
    }

    /// Right-hand side of `^`: one braced group or a single atom, itself
    /// optionally raised again (right associativity).
    fn exponent(&mut self) -> Result<Expr, ExprError> {
        let atom = if self.eat_sym('-') {
            Expr::neg(self.exponent_atom()?)
        } else {
            self.exponent_atom()?
        };
        if self.eat_sym('^') {
            Ok(Expr::pow(atom, self.exponent()?))
        } else {
            Ok(atom)
        }
    }

    fn exponent_atom(&mut self) -> Result<Expr, ExprError> {
        if let Tok::Num(n) = self.peek().clone() {
            // LaTeX takes a single character as a bare superscript
            let mut chars = n.chars();
            let first = chars.next().unwrap();
            let rest: String = chars.collect();
            if first.is_ascii_digit() && !rest.is_empty() {
                self.toks[self.pos].tok = Tok::Num(rest);
                self.toks[self.pos].offset += 1;
                return Ok(Expr::Int(BigInt::from(first.to_digit(10).unwrap())));
            }
        }
        self.primary()
    }

    /// Braced or single-token argument, as taken by `\frac` and `\sqrt`.
    fn argument(&mut self) -> Result<Expr, ExprError> {
        if self.eat_sym('{') {
            let e = self.sum()?;
            self.expect_sym('}')?;
            return Ok(e);
        }
        match self.peek().clone() {
            Tok::Num(n) if n.len() > 1 && n.chars().all(|c| c.is_ascii_digit()) => {
                let first = n[..1].to_string();
                self.toks[self.pos].tok = Tok::Num(n[1..].to_string());
                self.toks[self.pos].offset += 1;
                Ok(Expr::Int(first.parse().unwrap()))
            }
            Tok::Num(_) | Tok::Letter(_) | Tok::Cmd(_) => self.primary(),
            _ => Err(self.error(&["'{'", "number", "letter"])),
        }
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let offset = self.offset();
        match self.bump() {
            Tok::Num(n) => Ok(number(&n)),
            Tok::Letter(c) => {
                if self.at_subscript() {
                    let sub = self.subscript()?;
                    Ok(Expr::Var(format!("{c}_{{{sub}}}")))
                } else if c == 'e' {
                    Ok(Expr::Const(Constant::E))
                } else {
                    Ok(Expr::Var(c.to_string()))
                }
            }
            Tok::Sym('(') => self.group(')'),
            Tok::Sym('[') => self.group(']'),
            Tok::Sym('{') => self.group('}'),
            Tok::Sym('|') if self.abs_depth == 0 => {
                self.abs_depth += 1;
                let inner = self.sum();
                self.abs_depth -= 1;
                let inner = inner?;
                self.expect_sym('|')?;
                Ok(Expr::func(Func::Abs, inner))
            }
            Tok::Cmd(name) => self.command(&name, offset),
            Tok::End => {
                self.pos = self.toks.len() - 1;
                Err(self.error(&["number", "variable", "'('", "command"]))
            }
            _ => {
                self.pos -= 1;
                Err(self.error(&["number", "variable", "'('", "command"]))
            }
        }
    }

    fn group(&mut self, close: char) -> Result<Expr, ExprError> {
        let saved = self.abs_depth;
        self.abs_depth = 0;
        let e = self.sum();
        self.abs_depth = saved;
        let e = e?;
        self.expect_sym(close)?;
        Ok(e)
    }

    fn at_subscript(&self) -> bool {
        *self.peek() == Tok::Sym('_')
    }

    /// Reads `_x` or `_{...}` into a normalized label (formatting commands,
    /// braces and spaces removed).
    fn subscript(&mut self) -> Result<String, ExprError> {
        self.expect_sym('_')?;
        let mut out = String::new();
        if self.eat_sym('{') {
            let mut depth = 1;
            loop {
                match self.bump() {
                    Tok::Sym('{') => depth += 1,
                    Tok::Sym('}') => {
                        depth -= 1;
                        if depth == 0 {
                            break;
                        }
                    }
                    Tok::End => return Err(self.error(&["'}'"])),
                    t => push_label(&mut out, &t),
                }
            }
        } else {
            match self.bump() {
                Tok::Num(n) => {
                    let first = &n[..1];
                    out.push_str(first);
                    if n.len() > 1 {
                        self.pos -= 1;
                        self.toks[self.pos].tok = Tok::Num(n[1..].to_string());
                        self.toks[self.pos].offset += 1;
                    }
                }
                t @ (Tok::Letter(_) | Tok::Cmd(_)) => push_label(&mut out, &t),
                _ => {
                    self.pos -= 1;
                    return Err(self.error(&["subscript"]));
                }
            }
        }
        if out.is_empty() {
            return Err(self.error(&["subscript"]));
        }
        Ok(out)
    }

    /// Raw braced text, used by `\mathrm{..}` and decorations.
    fn raw_group(&mut self) -> Result<String, ExprError> {
        let mut out = String::new();
        if !self.eat_sym('{') {
            match self.bump() {
                t @ (Tok::Letter(_) | Tok::Cmd(_) | Tok::Num(_)) => push_label(&mut out, &t),
                _ => {
                    self.pos -= 1;
                    return Err(self.error(&["'{'"]));
                }
            }
            return Ok(out);
        }
        let mut depth = 1;
        loop {
            match self.bump() {
                Tok::Sym('{') => {
                    depth += 1;
                    out.push('{');
                }
                Tok::Sym('}') => {
                    depth -= 1;
                    if depth == 0 {
                        break;
                    }
                    out.push('}');
                }
                Tok::End => return Err(self.error(&["'}'"])),
                t => push_label(&mut out, &t),
            }
        }
        Ok(out)
    }

    fn command(&mut self, name: &str, offset: usize) -> Result<Expr, ExprError> {
        if GREEK.contains(&name) {
            let base = format!("\\{name}");
            if self.at_subscript() {
                let sub = self.subscript()?;
                return Ok(Expr::Var(format!("{base}_{{{sub}}}")));
            }
            return Ok(Expr::Var(base));
        }
        match name {
            "pi" => Ok(Expr::Const(Constant::Pi)),
            "frac" | "dfrac" | "tfrac" => {
                let num = self.argument()?;
                let den = self.argument()?;
                Ok(Expr::div(num, den))
            }
            "sqrt" => {
                if self.eat_sym('[') {
                    let index = self.sum()?;
                    self.expect_sym(']')?;
                    let radicand = self.argument()?;
                    Ok(Expr::pow(radicand, Expr::div(Expr::int(1), index)))
                } else {
                    Ok(Expr::func(Func::Sqrt, self.argument()?))
                }
            }
            "sin" | "cos" | "tan" | "log" | "ln" | "exp" => {
                let func = match name {
                    "sin" => Func::Sin,
                    "cos" => Func::Cos,
                    "tan" => Func::Tan,
                    "log" => Func::Log,
                    "ln" => Func::Ln,
                    _ => Func::Exp,
                };
                self.function(func)
            }
            "abs" => Ok(Expr::func(Func::Abs, self.argument()?)),
            _ if DECORATIONS.contains(&name) => {
                let inner = self.raw_group()?;
                let inner = normalize_symbol(&inner);
                let base = format!("\\{name}{{{inner}}}");
                if self.at_subscript() {
                    let sub = self.subscript()?;
                    return Ok(Expr::Var(format!("{base}_{{{sub}}}")));
                }
                Ok(Expr::Var(base))
            }
            _ if TEXT_COMMANDS.contains(&name) => {
                let inner = self.raw_group()?;
                let inner = inner.trim();
                match inner {
                    "e" => Ok(Expr::Const(Constant::E)),
                    "" => Err(ExprError::Parse {
                        offset,
                        expected: vec!["text".into()],
                        found: "empty group".into(),
                    }),
                    _ => {
                        let mut chars = inner.chars();
                        let c = chars.next().unwrap();
                        if chars.next().is_none() && c.is_ascii_alphabetic() {
                            Ok(Expr::Var(c.to_string()))
                        } else {
                            Ok(Expr::Var(format!("\\mathrm{{{}}}", inner.replace(' ', ""))))
                        }
                    }
                }
            }
            _ => Err(ExprError::UnsupportedCommand { offset, command: name.to_string() }),
        }
    }

    fn function(&mut self, func: Func) -> Result<Expr, ExprError> {
        let mut log_base = None;
        if func == Func::Log && self.at_subscript() {
            self.expect_sym('_')?;
            log_base = Some(self.argument()?);
        }
        let power = if self.eat_sym('^') { Some(self.exponent()?) } else { None };
        let arg = match self.peek() {
            Tok::Sym('(') | Tok::Sym('{') | Tok::Sym('[') => self.primary()?,
            _ => self.power()?,
        };
        let mut applied = Expr::func(func, arg);
        if let Some(base) = log_base {
            applied = Expr::div(applied, Expr::func(Func::Log, base));
        }
        Ok(match power {
            Some(p) => Expr::pow(applied, p),
            None => applied,
        })
    }
}

fn push_label(out: &mut String, t: &Tok) {
    match t {
        Tok::Num(n) => out.push_str(n),
        Tok::Letter(c) => out.push(*c),
        Tok::Cmd(c) if TEXT_COMMANDS.contains(&c.as_str()) => {}
        Tok::Cmd(c) => {
            out.push('\\');
            out.push_str(c);
        }
        Tok::Sym(c) => out.push(*c),
        Tok::End => {}
    }
}

/// `u_z` and `u_{z}` name the same symbol.
fn normalize_symbol(inner: &str) -> String {
    let mut out = String::new();
    let mut chars = inner.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '_' {
            out.push('_');
            match chars.peek() {
                Some('{') => {}
                Some(_) => {
                    let n = chars.next().unwrap();
                    out.push('{');
                    out.push(n);
                    out.push('}');
                }
                None => {}
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn number(text: &str) -> Expr {
    match text.split_once('.') {
        None => Expr::Int(text.parse().expect("lexer yields digits")),
        Some((int_part, frac)) => {
            let digits = format!("{int_part}{frac}");
            Expr::Decimal(Decimal { mantissa: digits.parse().expect("lexer yields digits"), scale: frac.len() as u32 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frac_is_division() {
        assert_eq!(parse_expression("\\frac{1}{2}").unwrap(), Expr::div(Expr::int(1), Expr::int(2)));
    }

    #[test]
    fn implicit_multiplication_is_left_associative() {
        let expected = Expr::mul(Expr::mul(Expr::var("m"), Expr::var("g")), Expr::var("h"));
        assert_eq!(parse_expression("mgh").unwrap(), expected);
    }

    #[test]
    fn power_is_right_associative() {
        let e = parse_expression("2^{3^2}").unwrap();
        assert_eq!(e, Expr::pow(Expr::int(2), Expr::pow(Expr::int(3), Expr::int(2))));
        // 2^(3^2) = 512, (2^3)^2 = 64
        assert_eq!(super::super::evaluate(&e, &Default::default()), Some(512.0));
    }

    #[test]
    fn unary_minus_precedence() {
        assert_eq!(
            parse_expression("-x^2").unwrap(),
            Expr::neg(Expr::pow(Expr::var("x"), Expr::int(2)))
        );
        assert_eq!(
            parse_expression("a-b").unwrap(),
            Expr::sub(Expr::var("a"), Expr::var("b"))
        );
    }

    #[test]
    fn decimals_are_exact() {
        match parse_expression("14.70").unwrap() {
            Expr::Decimal(d) => {
                assert_eq!(d.mantissa, BigInt::from(1470));
                assert_eq!(d.scale, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bare_superscript_takes_one_digit() {
        assert_eq!(
            parse_expression("x^23").unwrap(),
            Expr::mul(Expr::pow(Expr::var("x"), Expr::int(2)), Expr::int(3))
        );
    }

    #[test]
    fn subscripts_and_decorations() {
        assert_eq!(parse_expression("P_0").unwrap(), Expr::var("P_{0}"));
        assert_eq!(parse_expression("P_{\\rm w}").unwrap(), Expr::var("P_{w}"));
        assert_eq!(parse_expression("\\vec{u_z}").unwrap(), Expr::var("\\vec{u_{z}}"));
        assert_eq!(parse_expression("\\rho").unwrap(), Expr::var("\\rho"));
    }

    #[test]
    fn functions() {
        let e = parse_expression("\\sin(x)^2").unwrap();
        assert_eq!(e, Expr::pow(Expr::func(Func::Sin, Expr::var("x")), Expr::int(2)));
        let e = parse_expression("\\sin^2 x").unwrap();
        assert_eq!(e, Expr::pow(Expr::func(Func::Sin, Expr::var("x")), Expr::int(2)));
        let e = parse_expression("\\sqrt{2}").unwrap();
        assert_eq!(e, Expr::func(Func::Sqrt, Expr::int(2)));
        let e = parse_expression("\\left|x\\right|").unwrap();
        assert_eq!(e, Expr::func(Func::Abs, Expr::var("x")));
    }

    #[test]
    fn unit_suffixes_are_stripped() {
        assert_eq!(strip_unit_suffix("14.7\\,\\mathrm{N}"), "14.7");
        assert_eq!(strip_unit_suffix("5.1 \\text{ N}"), "5.1");
        assert_eq!(strip_unit_suffix("P_{\\mathrm{top}}"), "P_{\\mathrm{top}}");
        assert_eq!(strip_unit_suffix("\\mathrm{e}"), "\\mathrm{e}");
        assert_eq!(parse_expression("9.8\\,\\mathrm{m/s^2}").unwrap(), parse_expression("9.8").unwrap());
    }

    #[test]
    fn errors_carry_offsets() {
        match parse_expression("1 + ") {
            Err(ExprError::Parse { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("unexpected {other:?}"),
        }
        match parse_expression("x + \\int y") {
            Err(ExprError::UnsupportedCommand { offset, command }) => {
                assert_eq!(offset, 4);
                assert_eq!(command, "int");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_expression("(1+2"), Err(ExprError::Parse { .. })));
        assert!(matches!(parse_expression("   "), Err(ExprError::Empty)));
        assert!(matches!(parse_expression("a = b"), Err(ExprError::Parse { .. })));
    }
}
