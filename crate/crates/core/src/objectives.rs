//! Motion objectives over interaction profiles.
//!
//! A task is an expression `f(θ, Δp)` over the motion primitives `dtheta`,
//! `dx`, `dy`, where `θ` is the initial orientation (used by the piecewise
//! convergence objective). The design objective `F(m)` sums `f` over every
//! valid grid cell of every target object.

use std::f64::consts::PI;
use std::fmt;

use crate::dynamics::{DynamicsModel, InteractionProfile};
use crate::geometry::{wrap_angle, ControlVector, DeltaPose, ObjectShape, PoseGrid};
use crate::util::ExactSum;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Dtheta,
    Dx,
    Dy,
}

impl Component {
    fn index(self) -> usize {
        match self {
            Component::Dtheta => 0,
            Component::Dx => 1,
            Component::Dy => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Component::Dtheta => "dtheta",
            Component::Dx => "dx",
            Component::Dy => "dy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Prim(Component),
    Neg(Box<Expr>),
    Square(Box<Expr>),
    Sum(Vec<Expr>),
    Scale(f64, Box<Expr>),
    /// `below` applies when `wrap(θ − target) < 0`, `above` otherwise.
    Piecewise { target: f64, below: Box<Expr>, above: Box<Expr> },
}

impl Expr {
    /// Value and gradient with respect to `(Δθ, Δx, Δy)`.
    pub fn eval(&self, theta: f64, d: &[f64; 3]) -> (f64, [f64; 3]) {
        match self {
            Expr::Prim(c) => {
                let mut g = [0.0; 3];
                g[c.index()] = 1.0;
                (d[c.index()], g)
            }
            Expr::Neg(e) => {
                let (v, g) = e.eval(theta, d);
                (-v, g.map(|x| -x))
            }
            Expr::Square(e) => {
                let (v, g) = e.eval(theta, d);
                (v * v, g.map(|x| 2.0 * v * x))
            }
            Expr::Sum(items) => {
                let mut v = 0.0;
                let mut g = [0.0; 3];
                for e in items {
                    let (vi, gi) = e.eval(theta, d);
                    v += vi;
                    for k in 0..3 {
                        g[k] += gi[k];
                    }
                }
                (v, g)
            }
            Expr::Scale(c, e) => {
                let (v, g) = e.eval(theta, d);
                (c * v, g.map(|x| c * x))
            }
            Expr::Piecewise { target, below, above } => {
                if wrap_angle(theta - target) < 0.0 {
                    below.eval(theta, d)
                } else {
                    above.eval(theta, d)
                }
            }
        }
    }

    fn has_square(&self) -> bool {
        match self {
            Expr::Prim(_) => false,
            Expr::Square(_) => true,
            Expr::Neg(e) | Expr::Scale(_, e) => e.has_square(),
            Expr::Sum(v) => v.iter().any(Expr::has_square),
            Expr::Piecewise { below, above, .. } => below.has_square() || above.has_square(),
        }
    }

    fn piecewise_targets(&self, out: &mut Vec<f64>) {
        match self {
            Expr::Prim(_) => {}
            Expr::Neg(e) | Expr::Square(e) | Expr::Scale(_, e) => e.piecewise_targets(out),
            Expr::Sum(v) => v.iter().for_each(|e| e.piecewise_targets(out)),
            Expr::Piecewise { target, below, above } => {
                out.push(*target);
                below.piecewise_targets(out);
                above.piecewise_targets(out);
            }
        }
    }

    fn retarget(&mut self, t: f64) {
        match self {
            Expr::Prim(_) => {}
            Expr::Neg(e) | Expr::Square(e) | Expr::Scale(_, e) => e.retarget(t),
            Expr::Sum(v) => v.iter_mut().for_each(|e| e.retarget(t)),
            Expr::Piecewise { target, below, above } => {
                *target = t;
                below.retarget(t);
                above.retarget(t);
            }
        }
    }

    fn is_converge(&self) -> Option<f64> {
        match self {
            Expr::Piecewise { target, below, above }
                if **below == Expr::Prim(Component::Dtheta) && **above == Expr::Neg(Box::new(Expr::Prim(Component::Dtheta))) =>
            {
                Some(*target)
            }
            _ => None,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(t) = self.is_converge() {
            return if t.is_nan() { f.write_str("converge()") } else { write!(f, "converge(target={t})") };
        }
        match self {
            Expr::Prim(c) => f.write_str(c.name()),
            Expr::Neg(e) => write!(f, "neg({e})"),
            Expr::Square(e) => write!(f, "square({e})"),
            Expr::Sum(v) => {
                f.write_str("sum(")?;
                for (i, e) in v.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{e}")?;
                }
                f.write_str(")")
            }
            Expr::Scale(c, e) => write!(f, "scale({c}, {e})"),
            Expr::Piecewise { target, below, above } => write!(f, "piecewise(target={target}, {below}, {above})"),
        }
    }
}

fn prim(c: Component) -> Expr {
    Expr::Prim(c)
}

fn neg(e: Expr) -> Expr {
    Expr::Neg(Box::new(e))
}

/// The piecewise convergence objective toward `target`.
pub fn converge_expr(target: f64) -> Expr {
    Expr::Piecewise { target: wrap_angle(target), below: Box::new(prim(Component::Dtheta)), above: Box::new(neg(prim(Component::Dtheta))) }
}

/// Names accepted by [`builtin`].
pub const BUILTINS: [&str; 10] = ["up", "down", "left", "right", "clock", "counter", "rotate", "clockup", "clockleft", "converge"];

/// Expression of a named task. `converge` takes its target from `target`;
/// without one the target is left open (see [`TaskSpec::needs_target`]).
pub fn builtin_expr(name: &str, target: Option<f64>) -> Result<Expr> {
    use Component::*;
    Ok(match name {
        "up" => neg(prim(Dx)),
        "down" => prim(Dx),
        "left" => neg(prim(Dy)),
        "right" => prim(Dy),
        "clock" => neg(prim(Dtheta)),
        "counter" => prim(Dtheta),
        "rotate" => Expr::Square(Box::new(prim(Dtheta))),
        "clockup" => Expr::Sum(vec![neg(prim(Dtheta)), neg(prim(Dx))]),
        "clockleft" => Expr::Sum(vec![neg(prim(Dtheta)), neg(prim(Dy))]),
        "converge" => converge_expr(target.unwrap_or(f64::NAN)),
        _ => return Err(Error::UnknownTask(name.to_string())),
    })
}

/// A parsed task: objective expression plus target object ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub expr: Expr,
    pub objects: Vec<String>,
}

impl TaskSpec {
    pub fn new(expr: Expr) -> Self {
        Self { expr, objects: Vec::new() }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        if name == "converge" {
            return Err(Error::UnknownTask("converge needs a target; use converge(target=θ) or converge()".into()));
        }
        Ok(Self::new(builtin_expr(name, None)?))
    }

    pub fn converge(target: f64) -> Self {
        Self::new(converge_expr(target))
    }

    /// Parses task text: one expression and an optional `objects=[...]`
    /// statement, separated by newlines or `;`.
    pub fn parse(text: &str) -> Result<Self> {
        Parser::new(text).task()
    }

    /// True when a convergence target still has to be chosen.
    pub fn needs_target(&self) -> bool {
        let mut t = Vec::new();
        self.expr.piecewise_targets(&mut t);
        t.iter().any(|v| v.is_nan())
    }

    /// The convergence target, when the task has one.
    pub fn target(&self) -> Option<f64> {
        let mut t = Vec::new();
        self.expr.piecewise_targets(&mut t);
        t.first().copied().filter(|v| !v.is_nan())
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.expr.retarget(wrap_angle(target));
        self
    }

    pub fn is_nonlinear(&self) -> bool {
        self.expr.has_square()
    }

    /// `f(θ, Δp)`.
    pub fn value(&self, theta: f64, d: &DeltaPose) -> f64 {
        self.expr.eval(theta, &d.as_array()).0
    }

    /// `∂f/∂(Δθ, Δx, Δy)` at `(θ, Δp)`.
    pub fn weights(&self, theta: f64, d: &DeltaPose) -> [f64; 3] {
        self.expr.eval(theta, &d.as_array()).1
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.expr)?;
        if !self.objects.is_empty() {
            write!(f, "\nobjects=[{}]", self.objects.join(", "))?;
        }
        Ok(())
    }
}

/// `F = Σ_objects Σ_cells f`, over valid cells only.
pub fn evaluate_f(task: &TaskSpec, profiles: &[InteractionProfile]) -> Result<f64> {
    let mut acc = ExactSum::new();
    add_profiles(task, profiles, &mut acc)?;
    Ok(acc.total())
}

fn add_profiles(task: &TaskSpec, profiles: &[InteractionProfile], acc: &mut ExactSum) -> Result<()> {
    if let Some(first) = profiles.first() {
        if profiles.iter().any(|p| p.grid != first.grid) {
            return Err(Error::GridMismatch);
        }
    }
    for p in profiles {
        for (_, pose, d) in p.valid_cells() {
            acc.add(task.value(pose.theta, d));
        }
    }
    Ok(())
}

/// `∇_m F` through the dynamics model.
pub fn grad_f(task: &TaskSpec, model: &DynamicsModel, shapes: &[&ObjectShape], m: &[f64], grid: &PoseGrid) -> Result<Vec<f64>> {
    model.grad_wrt_fingers(shapes, m, grid, |_, _, p, d| task.weights(p.theta, d))
}

/// The objective used to steer sampling and gradient search: the task mean
/// over cells and objects, evaluated on motions divided by the model's
/// per-axis scale, then divided by `√(2N)` so the gradient's norm does not
/// grow with the number of control values.
#[derive(Debug, Clone)]
pub struct ScaledObjective<'a> {
    pub task: &'a TaskSpec,
    pub model: &'a DynamicsModel,
    pub shapes: Vec<&'a ObjectShape>,
    pub grid: PoseGrid,
}

impl<'a> ScaledObjective<'a> {
    pub fn new(task: &'a TaskSpec, model: &'a DynamicsModel, shapes: Vec<&'a ObjectShape>, grid: PoseGrid) -> Self {
        Self { task, model, shapes, grid }
    }

    fn norm(&self) -> f64 {
        let cells = (self.grid.len() * self.shapes.len()).max(1) as f64;
        cells * ((2 * self.model.n_per_finger()) as f64).sqrt()
    }

    fn scaled(&self, d: &DeltaPose) -> DeltaPose {
        let s = self.model.stats.std;
        DeltaPose { dtheta: d.dtheta / s[0], dx: d.dx / s[1], dy: d.dy / s[2] }
    }

    /// Value and gradient at any real vector (noisy diffusion iterates may
    /// leave `[-1, 1]`).
    pub fn value_and_grad(&self, m: &[f64]) -> Result<(f64, Vec<f64>)> {
        let s = self.model.stats.std;
        let n = self.norm();
        let (g, profiles) = self.model.grad_and_profiles(&self.shapes, m, &self.grid, |_, _, p, d| {
            let w = self.task.weights(p.theta, &self.scaled(d));
            [w[0] / (s[0] * n), w[1] / (s[1] * n), w[2] / (s[2] * n)]
        })?;
        let mut acc = ExactSum::new();
        for prof in &profiles {
            for (_, pose, d) in prof.valid_cells() {
                acc.add(self.task.value(pose.theta, &self.scaled(d)));
            }
        }
        Ok((acc.total() / n, g))
    }

    pub fn value(&self, m: &ControlVector) -> Result<f64> {
        let n = self.norm();
        let mut acc = ExactSum::new();
        for shape in &self.shapes {
            let prof = self.model.predict_profile(shape, m, &self.grid)?;
            for (_, pose, d) in prof.valid_cells() {
                acc.add(self.task.value(pose.theta, &self.scaled(d)));
            }
        }
        Ok(acc.total() / n)
    }
}

/// Chooses a convergence target from a position-marginalized rotation
/// profile sampled at increasing orientations `thetas` (a full circle).
///
/// Signs are taken as positive (`Δθ > 0`) or not. Every maximal positive run
/// followed by a non-positive run is a candidate funnel of width equal to
/// both runs; the widest wins, ties going to the smaller target. The target
/// is the linearly interpolated zero crossing between the last positive and
/// the first non-positive sample. Orientations with `None` are skipped.
pub fn select_target_from_pseudo_profile(thetas: &[f64], dtheta: &[Option<f64>]) -> Result<f64> {
    if thetas.len() != dtheta.len() {
        return Err(Error::DimensionMismatch { expected: thetas.len(), got: dtheta.len() });
    }
    let samples: Vec<(f64, f64)> = thetas.iter().zip(dtheta).filter_map(|(t, d)| d.map(|v| (*t, v))).collect();
    let n = samples.len();
    let positive: Vec<bool> = samples.iter().map(|(_, v)| *v > 0.0).collect();
    if n < 2 || positive.iter().all(|p| *p) || positive.iter().all(|p| !*p) {
        return Err(Error::NoConvergenceMode);
    }
    // Start at a run boundary so no run wraps past the end of the scan.
    let start = (0..n).find(|&i| positive[i] && !positive[(i + n - 1) % n]).expect("mixed signs have a rising edge");
    let mut runs: Vec<(bool, usize, usize)> = Vec::new();
    for k in 0..n {
        let i = (start + k) % n;
        match runs.last_mut() {
            Some((sign, _, len)) if *sign == positive[i] => *len += 1,
            _ => runs.push((positive[i], i, 1)),
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for pair in runs.chunks(2) {
        let [(true, pos_start, pos_len), (false, _, neg_len)] = [pair[0], pair[1]] else {
            unreachable!("runs alternate starting with a positive run");
        };
        let last_pos = (pos_start + pos_len - 1) % n;
        let first_neg = (last_pos + 1) % n;
        let (t0, v0) = samples[last_pos];
        let (mut t1, v1) = samples[first_neg];
        if t1 <= t0 {
            t1 += 2.0 * PI;
        }
        let target = wrap_angle(t0 + (t1 - t0) * v0 / (v0 - v1));
        let width = pos_len + neg_len;
        let better = match best {
            None => true,
            Some((w, t)) => width > w || (width == w && target < t),
        };
        if better {
            best = Some((width, target));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// Predicts the probe finger's profile on each shape, averages rotation
/// over positions (and shapes), and selects the convergence target.
pub fn select_convergence_target(model: &DynamicsModel, shapes: &[&ObjectShape], m_probe: &ControlVector, grid: &PoseGrid) -> Result<f64> {
    if grid.n_theta < 36 {
        return Err(Error::InvalidParameter("target selection needs at least 36 orientations".into()));
    }
    if shapes.is_empty() {
        return Err(Error::InvalidParameter("no shapes for target selection".into()));
    }
    let mut sums = vec![0.0; grid.n_theta];
    for shape in shapes {
        let prof = model.predict_profile(shape, m_probe, grid)?;
        for (s, v) in sums.iter_mut().zip(prof.mean_dtheta_per_orientation()) {
            *s += v.unwrap_or(0.0);
        }
    }
    let thetas: Vec<f64> = (0..grid.n_theta).map(|i| grid.theta(i)).collect();
    let pseudo: Vec<Option<f64>> = sums.into_iter().map(|s| Some(s / shapes.len() as f64)).collect();
    select_target_from_pseudo_profile(&thetas, &pseudo)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn err<T>(&self, pos: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse { pos, message: message.into() })
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    /// Skips spaces and tabs (not newlines, which separate statements).
    fn skip_inline_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c == ' ' || c == '\t' || c == '\r' {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else if c == '#' {
                while let Some(c) = self.peek() {
                    if c == '\n' {
                        break;
                    }
                    self.pos += c.len_utf8();
                }
            } else {
                break;
            }
        }
    }

    fn eat(&mut self, ch: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(ch) {
            self.pos += ch.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, ch: char) -> Result<()> {
        if self.eat(ch) {
            Ok(())
        } else {
            let found = self.peek().map_or("end of input".to_string(), |c| format!("{c:?}"));
            self.err(self.pos, format!("expected {ch:?}, found {found}"))
        }
    }

    fn ident(&mut self) -> Result<(usize, &'a str)> {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' || (c == '.' && self.pos > start) || (c == '-' && self.pos > start) {
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            let found = self.peek().map_or("end of input".to_string(), |c| format!("{c:?}"));
            return self.err(start, format!("expected a name, found {found}"));
        }
        Ok((start, &self.src[start..self.pos]))
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E') {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = &self.src[start..self.pos];
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => self.err(start, format!("expected a number, found {text:?}")),
        }
    }

    fn starts_number(&mut self) -> bool {
        self.skip_ws();
        matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == '-' || c == '+' || c == '.')
    }

    fn task(&mut self) -> Result<TaskSpec> {
        let mut expr = None;
        let mut objects = None;
        loop {
            self.skip_ws();
            while self.eat(';') {}
            self.skip_ws();
            if self.pos >= self.src.len() {
                break;
            }
            let stmt_start = self.pos;
            let save = self.pos;
            let (_, name) = self.ident()?;
            if name == "objects" && self.eat('=') {
                if objects.is_some() {
                    return self.err(stmt_start, "duplicate objects list");
                }
                objects = Some(self.object_list()?);
            } else {
                self.pos = save;
                if expr.is_some() {
                    return self.err(stmt_start, "only one objective expression is allowed");
                }
                expr = Some(self.expr()?);
            }
            self.skip_inline_ws();
            match self.peek() {
                None => break,
                Some('\n') | Some(';') | Some('#') => {}
                Some(c) => return self.err(self.pos, format!("unexpected {c:?} after statement")),
            }
        }
        match expr {
            Some(expr) => Ok(TaskSpec { expr, objects: objects.unwrap_or_default() }),
            None => self.err(self.pos, "missing objective expression"),
        }
    }

    fn object_list(&mut self) -> Result<Vec<String>> {
        self.expect('[')?;
        let mut out = Vec::new();
        if self.eat(']') {
            return Ok(out);
        }
        loop {
            let (_, id) = self.ident()?;
            out.push(id.to_string());
            if self.eat(']') {
                return Ok(out);
            }
            self.expect(',')?;
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let (start, name) = self.ident()?;
        let has_args = self.eat('(');
        let expr = match name {
            "dtheta" | "dx" | "dy" => {
                if has_args {
                    return self.err(start, format!("{name} takes no arguments"));
                }
                prim(match name {
                    "dtheta" => Component::Dtheta,
                    "dx" => Component::Dx,
                    _ => Component::Dy,
                })
            }
            "neg" | "square" => {
                if !has_args {
                    return self.err(start, format!("{name} needs one argument"));
                }
                let inner = self.expr()?;
                self.expect(')')?;
                if name == "neg" {
                    neg(inner)
                } else {
                    Expr::Square(Box::new(inner))
                }
            }
            "sum" => {
                if !has_args {
                    return self.err(start, "sum needs arguments");
                }
                let mut items = vec![self.expr()?];
                while self.eat(',') {
                    items.push(self.expr()?);
                }
                self.expect(')')?;
                Expr::Sum(items)
            }
            "scale" => {
                if !has_args {
                    return self.err(start, "scale needs (factor, expression)");
                }
                let c = self.number()?;
                self.expect(',')?;
                let inner = self.expr()?;
                self.expect(')')?;
                Expr::Scale(c, Box::new(inner))
            }
            "converge" => {
                let target = if has_args { self.optional_target()? } else { None };
                if has_args {
                    self.expect(')')?;
                }
                converge_expr(target.unwrap_or(f64::NAN))
            }
            "piecewise" => {
                if !has_args {
                    return self.err(start, "piecewise needs (target=θ, below, above)");
                }
                let target = match self.optional_target()? {
                    Some(t) => t,
                    None => return self.err(self.pos, "piecewise needs a target"),
                };
                self.expect(',')?;
                let below = self.expr()?;
                self.expect(',')?;
                let above = self.expr()?;
                self.expect(')')?;
                Expr::Piecewise { target: wrap_angle(target), below: Box::new(below), above: Box::new(above) }
            }
            other if BUILTINS.contains(&other) => {
                if has_args {
                    return self.err(start, format!("{other} takes no arguments"));
                }
                builtin_expr(other, None)?
            }
            other => return self.err(start, format!("unknown function or task {other:?}")),
        };
        Ok(expr)
    }

    /// `target=<number>`, a bare number, or nothing.
    fn optional_target(&mut self) -> Result<Option<f64>> {
        self.skip_ws();
        if self.peek() == Some(')') {
            return Ok(None);
        }
        if self.starts_number() {
            return Ok(Some(self.number()?));
        }
        let (start, key) = self.ident()?;
        if key != "target" {
            return self.err(start, format!("expected `target=`, found {key:?}"));
        }
        self.expect('=')?;
        Ok(Some(self.number()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ProfileSource;
    use proptest::prelude::*;

    fn d(t: f64, x: f64, y: f64) -> DeltaPose {
        DeltaPose { dtheta: t, dx: x, dy: y }
    }

    #[test]
    fn builtin_examples() {
        assert_eq!(TaskSpec::builtin("right").unwrap().value(0.0, &d(0.1, 2.0, 3.0)), 3.0);
        assert!((TaskSpec::builtin("rotate").unwrap().value(0.0, &d(0.2, 0.0, 0.0)) - 0.04).abs() < 1e-15);
        let c = TaskSpec::converge(0.0);
        assert_eq!(c.value(-PI / 2.0, &d(0.1, 0.0, 0.0)), 0.1);
        assert_eq!(c.value(PI / 2.0, &d(0.1, 0.0, 0.0)), -0.1);
        assert_eq!(TaskSpec::builtin("clockup").unwrap().value(0.0, &d(0.1, 2.0, 3.0)), -2.1);
        assert_eq!(TaskSpec::builtin("up").unwrap().weights(0.0, &d(0.0, 0.0, 0.0)), [0.0, -1.0, 0.0]);
        assert_eq!(TaskSpec::builtin("rotate").unwrap().weights(0.0, &d(0.3, 0.0, 0.0)), [0.6, 0.0, 0.0]);
        assert!(matches!(TaskSpec::builtin("spin"), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn evaluate_uniform_and_additive() {
        let grid = PoseGrid::new(360, 5, 5, 3.0).unwrap();
        let p = InteractionProfile::from_deltas(grid, vec![d(0.0, 0.0, 0.5); 9000], ProfileSource::GroundTruth).unwrap();
        let right = TaskSpec::builtin("right").unwrap();
        assert_eq!(evaluate_f(&right, std::slice::from_ref(&p)).unwrap(), 4500.0);
        let q = InteractionProfile::from_deltas(grid, (0..9000).map(|i| d(0.0, 0.0, (i as f64).sin())).collect(), ProfileSource::Predicted).unwrap();
        let both = evaluate_f(&right, &[p.clone(), q.clone()]).unwrap();
        let parts = evaluate_f(&right, std::slice::from_ref(&p)).unwrap() + evaluate_f(&right, &[q]).unwrap();
        assert!((both - parts).abs() <= 1e-12 * parts.abs());
        let other = InteractionProfile::from_deltas(PoseGrid::new(9000, 1, 1, 0.0).unwrap(), vec![d(0.0, 0.0, 0.5); 9000], ProfileSource::Predicted).unwrap();
        assert!(matches!(evaluate_f(&right, &[p, other]), Err(Error::GridMismatch)));
    }

    #[test]
    fn converge_on_odd_profile() {
        let target = 0.7;
        let grid = PoseGrid::orientations(360);
        let deltas: Vec<DeltaPose> = (0..360).map(|i| d(-(grid.theta(i) - target).sin(), 0.0, 0.0)).collect();
        let prof = InteractionProfile::from_deltas(grid, deltas, ProfileSource::Predicted).unwrap();
        let f = evaluate_f(&TaskSpec::converge(target), &[prof]).unwrap();
        let oracle: f64 = (0..360).map(|i| (grid.theta(i) - target).sin().abs()).sum();
        assert!((f - oracle).abs() < 1e-9, "{f} vs {oracle}");
        assert!(f > 0.0);
    }

    #[test]
    fn converge_weights_are_odd_about_target() {
        let t = 0.4;
        let c = TaskSpec::converge(t);
        for delta in [0.1, 0.5, 1.0, 2.5, 3.0] {
            let a = c.weights(t + delta, &d(0.0, 0.0, 0.0));
            let b = c.weights(t - delta, &d(0.0, 0.0, 0.0));
            assert_eq!(a[0], -b[0]);
        }
    }

    #[test]
    fn parse_examples() {
        let t = TaskSpec::parse("sum(neg(dtheta), neg(dx))").unwrap();
        assert_eq!(t.expr, builtin_expr("clockup", None).unwrap());
        let t = TaskSpec::parse("converge(target=0.75)\nobjects=[square_25, tee_30]").unwrap();
        assert_eq!(t.target(), Some(0.75));
        assert_eq!(t.objects, vec!["square_25", "tee_30"]);
        assert_eq!(TaskSpec::parse("right").unwrap().expr, prim(Component::Dy));
        assert!(TaskSpec::parse("converge()").unwrap().needs_target());
        let t = TaskSpec::parse("scale(2.5, square(dy)); objects=[a]").unwrap();
        assert_eq!(t.value(0.0, &d(0.0, 0.0, 2.0)), 10.0);
        let round = TaskSpec::parse(&t.to_string()).unwrap();
        assert_eq!(round, t);
    }

    #[test]
    fn parse_errors_have_positions() {
        let pos = |s: &str| match TaskSpec::parse(s) {
            Err(Error::Parse { pos, .. }) => pos,
            other => panic!("{s:?}: {other:?}"),
        };
        assert_eq!(pos("sum(dx, dz)"), 8);
        assert_eq!(pos("neg(dx"), 6);
        assert_eq!(pos("converge(goal=1)"), 9);
        assert_eq!(pos("dx dy"), 3);
        assert_eq!(pos("objects=[a]"), 11);
        assert_eq!(pos("scale(x, dy)"), 6);
    }

    fn fd_fixture() -> (Vec<ObjectShape>, DynamicsModel, ControlVector, PoseGrid) {
        use crate::dynamics::{DeltaStats, DynamicsConfig};
        use crate::geometry::{make_shape, ShapePreset};
        let shapes = vec![make_shape(ShapePreset::Square, 25.0).unwrap(), make_shape(ShapePreset::Tee, 25.0).unwrap()];
        let stats = DeltaStats { mean: [0.05, -0.3, 0.4], std: [0.4, 1.5, 2.5] };
        let cfg = DynamicsConfig { width: 8, trunk_layers: 3, bands: 2, epochs: 2, lr: 1e-3, batch: 16, augment: false };
        let model = DynamicsModel::new(4, 3.0, stats, &cfg, 21).unwrap();
        let m = ControlVector::new((0..8).map(|i| ((i * 5) % 7) as f64 / 5.0 - 0.6).collect(), 4).unwrap();
        (shapes, model, m, PoseGrid::new(6, 2, 2, 3.0).unwrap())
    }

    fn f_at(task: &TaskSpec, model: &DynamicsModel, shapes: &[ObjectShape], v: Vec<f64>, grid: &PoseGrid) -> f64 {
        let m = ControlVector::new(v, 4).unwrap();
        let profiles: Vec<_> = shapes.iter().map(|s| model.predict_profile(s, &m, grid).unwrap()).collect();
        evaluate_f(task, &profiles).unwrap()
    }

    #[test]
    fn grad_f_matches_finite_differences() {
        let (shapes, model, m, grid) = fd_fixture();
        let refs: Vec<&ObjectShape> = shapes.iter().collect();
        for task in [TaskSpec::builtin("right").unwrap(), TaskSpec::builtin("clockup").unwrap(), TaskSpec::builtin("rotate").unwrap(), TaskSpec::converge(0.3)] {
            let g = grad_f(&task, &model, &refs, m.values(), &grid).unwrap();
            let h = 1e-5;
            for i in 0..m.values().len() {
                let mut vp = m.values().to_vec();
                vp[i] += h;
                let mut vm = m.values().to_vec();
                vm[i] -= h;
                let fd = (f_at(&task, &model, &shapes, vp, &grid) - f_at(&task, &model, &shapes, vm, &grid)) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
                assert!(rel <= 1e-6, "{task} component {i}: fd {fd} analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn grad_f_is_linear_in_the_task() {
        let (shapes, model, m, grid) = fd_fixture();
        let refs: Vec<&ObjectShape> = shapes.iter().collect();
        let (a, b) = (1.7, -0.4);
        let t1 = TaskSpec::builtin("right").unwrap();
        let t2 = TaskSpec::builtin("clockup").unwrap();
        let combo = TaskSpec::parse(&format!("sum(scale({a}, {}), scale({b}, {}))", t1.expr, t2.expr)).unwrap();
        let g1 = grad_f(&t1, &model, &refs, m.values(), &grid).unwrap();
        let g2 = grad_f(&t2, &model, &refs, m.values(), &grid).unwrap();
        let g = grad_f(&combo, &model, &refs, m.values(), &grid).unwrap();
        for i in 0..g.len() {
            let want = a * g1[i] + b * g2[i];
            assert!((g[i] - want).abs() <= 1e-10 * want.abs().max(1.0), "component {i}: {} vs {want}", g[i]);
        }
    }

    #[test]
    fn scaled_objective_matches_its_value() {
        let (shapes, model, m, grid) = fd_fixture();
        let task = TaskSpec::builtin("rotate").unwrap();
        let obj = ScaledObjective::new(&task, &model, shapes.iter().collect(), grid);
        let (v, _) = obj.value_and_grad(m.values()).unwrap();
        assert!((v - obj.value(&m).unwrap()).abs() <= 1e-12 * v.abs().max(1.0));
    }

    #[test]
    fn target_selection_examples() {
        let n = 360;
        let thetas: Vec<f64> = (0..n).map(|i| -PI + 2.0 * PI * i as f64 / n as f64).collect();
        let sample = |f: &dyn Fn(f64) -> f64| thetas.iter().map(|t| Some(f(*t))).collect::<Vec<_>>();
        let t = select_target_from_pseudo_profile(&thetas, &sample(&|t| -t.sin())).unwrap();
        assert!(t.abs() < 2.0 * PI / n as f64, "{t}");
        // Two equal funnels (half-step grid keeps samples off the zeros);
        // the smaller target wins.
        let half: Vec<f64> = (0..n).map(|i| -PI + 2.0 * PI * (i as f64 + 0.5) / n as f64).collect();
        let vals: Vec<Option<f64>> = half.iter().map(|t| Some(-(2.0 * (t - 0.3)).sin())).collect();
        let t = select_target_from_pseudo_profile(&half, &vals).unwrap();
        assert!((t - (0.3 - PI)).abs() < 1e-6, "{t}");
        assert!(matches!(select_target_from_pseudo_profile(&thetas, &sample(&|_| 0.3)), Err(Error::NoConvergenceMode)));
    }

    /// Independent scan: for every rising-to-falling crossing, measure the
    /// funnel by walking outward while signs match.
    fn brute_force_target(thetas: &[f64], v: &[f64]) -> f64 {
        let n = v.len();
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            let j = (i + 1) % n;
            if v[i] > 0.0 && v[j] <= 0.0 {
                let mut left = 0;
                while left < n && v[(i + n - left) % n] > 0.0 {
                    left += 1;
                }
                let mut right = 0;
                while right < n && v[(j + right) % n] <= 0.0 {
                    right += 1;
                }
                let t1 = if j == 0 { thetas[0] + 2.0 * PI } else { thetas[j] };
                let target = wrap_angle(thetas[i] + (t1 - thetas[i]) * v[i] / (v[i] - v[j]));
                let w = left + right;
                if best.is_none_or(|(bw, bt)| w > bw || (w == bw && target < bt)) {
                    best = Some((w, target));
                }
            }
        }
        best.unwrap().1
    }

    proptest! {
        #[test]
        fn selection_matches_brute_force(vals in prop::collection::vec(-1.0f64..1.0, 36..80)) {
            let n = vals.len();
            let thetas: Vec<f64> = (0..n).map(|i| -PI + 2.0 * PI * i as f64 / n as f64).collect();
            let opt: Vec<Option<f64>> = vals.iter().map(|v| Some(*v)).collect();
            match select_target_from_pseudo_profile(&thetas, &opt) {
                Ok(t) => prop_assert_eq!(t, brute_force_target(&thetas, &vals)),
                Err(_) => prop_assert!(vals.iter().all(|v| *v > 0.0) || vals.iter().all(|v| *v <= 0.0)),
            }
        }

        #[test]
        fn recovers_shifted_sine(target in -PI..PI) {
            let n = 72;
            let thetas: Vec<f64> = (0..n).map(|i| -PI + 2.0 * PI * i as f64 / n as f64).collect();
            let vals: Vec<Option<f64>> = thetas.iter().map(|t| Some(-(t - target).sin())).collect();
            let got = select_target_from_pseudo_profile(&thetas, &vals).unwrap();
            prop_assert!(wrap_angle(got - target).abs() <= 2.0 * PI / n as f64);
        }
    }
}
