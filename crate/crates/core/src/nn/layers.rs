use super::params::{Init, ParamBuilder};
use super::real::Real;
use super::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    pub cout: usize,
    k: usize,
    stride: usize,
}

impl Conv {
    pub fn declare(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::declare_with(pb, name, cin, cout, k, false)
    }

    pub fn declare_with(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        zero: bool,
    ) -> Self {
        let init = if zero { Init::Zeros } else { Init::FanIn(cin * k * k) };
        let w = pb.declare(format!("{name}.weight"), vec![cout, cin, k, k], init);
        let b = pb.declare(format!("{name}.bias"), vec![cout], Init::Zeros);
        Self {
            w,
            b,
            cout,
            k,
            stride: 1,
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &[Vec<T>], x: Var) -> Var {
        let w = tape.param(self.w, &p[self.w]);
        let b = tape.param(self.b, &p[self.b]);
        tape.conv2d(x, w, Some(b), self.cout, self.k, self.stride)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Dense {
    w: usize,
    b: usize,
    cout: usize,
}

impl Dense {
    pub fn declare(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Self {
        let w = pb.declare(format!("{name}.weight"), vec![cout, cin], Init::FanIn(cin));
        let b = pb.declare(format!("{name}.bias"), vec![cout], Init::Zeros);
        Self { w, b, cout }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &[Vec<T>], x: Var) -> Var {
        let w = tape.param(self.w, &p[self.w]);
        let b = tape.param(self.b, &p[self.b]);
        tape.dense(x, w, b, self.cout)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

impl Norm {
    pub fn declare(pb: &mut ParamBuilder, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = pb.declare(format!("{name}.gamma"), vec![channels], Init::Ones);
        let beta = pb.declare(format!("{name}.beta"), vec![channels], Init::Zeros);
        Self { gamma, beta, groups }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &[Vec<T>], x: Var) -> Var {
        let g = tape.param(self.gamma, &p[self.gamma]);
        let b = tape.param(self.beta, &p[self.beta]);
        tape.group_norm(x, g, b, self.groups)
    }
}

/// Norm → SiLU → conv, plus a time-embedding shift, twice, with a residual
/// path (1×1 projection when the width changes).
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn declare(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        groups: usize,
    ) -> Self {
        Self {
            norm1: Norm::declare(pb, &format!("{name}.norm1"), cin, groups),
            conv1: Conv::declare(pb, &format!("{name}.conv1"), cin, cout, 3),
            time: Dense::declare(pb, &format!("{name}.time"), time_dim, cout),
            norm2: Norm::declare(pb, &format!("{name}.norm2"), cout, groups),
            conv2: Conv::declare(pb, &format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| Conv::declare(pb, &format!("{name}.skip"), cin, cout, 1)),
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &[Vec<T>], x: Var, temb: Var) -> Var {
        let h = self.norm1.apply(tape, p, x);
        let h = tape.silu(h);
        let h = self.conv1.apply(tape, p, h);
        let shift = self.time.apply(tape, p, temb);
        let h = tape.add_channel(h, shift);
        let h = self.norm2.apply(tape, p, h);
        let h = tape.silu(h);
        let h = self.conv2.apply(tape, p, h);
        let res = match &self.skip {
            Some(s) => s.apply(tape, p, x),
            None => x,
        };
        tape.add(res, h)
    }
}

/// Residual single-head self-attention over spatial positions.
#[derive(Debug, Clone)]
pub(crate) struct AttnBlock {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
}

impl AttnBlock {
    pub fn declare(pb: &mut ParamBuilder, name: &str, ch: usize, groups: usize) -> Self {
        Self {
            norm: Norm::declare(pb, &format!("{name}.norm"), ch, groups),
            q: Conv::declare(pb, &format!("{name}.q"), ch, ch, 1),
            k: Conv::declare(pb, &format!("{name}.k"), ch, ch, 1),
            v: Conv::declare(pb, &format!("{name}.v"), ch, ch, 1),
            proj: Conv::declare(pb, &format!("{name}.proj"), ch, ch, 1),
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &[Vec<T>], x: Var) -> Var {
        let h = self.norm.apply(tape, p, x);
        let q = self.q.apply(tape, p, h);
        let k = self.k.apply(tape, p, h);
        let v = self.v.apply(tape, p, h);
        let a = tape.attention(q, k, v);
        let a = self.proj.apply(tape, p, a);
        tape.add(x, a)
    }
}
