use crate::diffarray::{Binding, Graph, ResizeMode, Var};
use crate::error::{Error, Result};

use super::model::PatchDiscriminator;

/// Dyadic scales of the gradient-difference proxy.
pub const PROXY_SCALES: usize = 3;

fn check_pair(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb || sa.len() != 4 {
        return Err(Error::shape(op, &sa, &sb));
    }
    Ok(sa)
}

/// Mean absolute error.
pub fn l1_loss(g: &Graph, a: Var, b: Var) -> Result<Var> {
    check_pair(g, "l1_loss", a, b)?;
    Ok(g.mean(g.abs(g.sub(a, b)?)))
}

fn finite_differences(g: &Graph, x: Var, h: usize, w: usize) -> Result<(Option<Var>, Option<Var>)> {
    let dx = if w > 1 {
        Some(g.sub(g.slice(x, 3, 1, w)?, g.slice(x, 3, 0, w - 1)?)?)
    } else {
        None
    };
    let dy = if h > 1 {
        Some(g.sub(g.slice(x, 2, 1, h)?, g.slice(x, 2, 0, h - 1)?)?)
    } else {
        None
    };
    Ok((dx, dy))
}

/// Gradient-difference proxy for perceptual similarity: the mean absolute
/// difference of horizontal and vertical finite differences, averaged over
/// three dyadic scales (2×2 box averaging between scales).
pub fn perceptual_proxy(g: &Graph, a: Var, b: Var) -> Result<Var> {
    let s = check_pair(g, "perceptual_proxy", a, b)?;
    let (mut h, mut w) = (s[2], s[3]);
    let (mut a, mut b) = (a, b);
    let mut terms = Vec::new();
    for level in 0..PROXY_SCALES {
        if level > 0 {
            if h < 2 || w < 2 {
                break;
            }
            (h, w) = (h / 2, w / 2);
            a = g.resize(a, h, w, ResizeMode::Bilinear)?;
            b = g.resize(b, h, w, ResizeMode::Bilinear)?;
        }
        let (ax, ay) = finite_differences(g, a, h, w)?;
        let (bx, by) = finite_differences(g, b, h, w)?;
        let mut parts = Vec::new();
        for (p, q) in [(ax, bx), (ay, by)] {
            if let (Some(p), Some(q)) = (p, q) {
                parts.push(g.mean(g.abs(g.sub(p, q)?)));
            }
        }
        if parts.is_empty() {
            break;
        }
        let k = parts.len() as f64;
        let sum = parts.into_iter().reduce(|x, y| g.add(x, y).expect("scalars")).expect("non-empty");
        terms.push(g.scale(sum, 1.0 / k));
    }
    if terms.is_empty() {
        return Err(Error::invalid("perceptual_proxy", "images need at least 2 pixels along one axis"));
    }
    let k = terms.len() as f64;
    let sum = terms.into_iter().reduce(|x, y| g.add(x, y).expect("scalars")).expect("non-empty");
    Ok(g.scale(sum, 1.0 / k))
}

/// Non-saturating generator term `mean softplus(−D(fake))`.
pub fn generator_adversarial(g: &Graph, fake_logits: Var) -> Var {
    g.mean(g.softplus(g.neg(fake_logits)))
}

/// Logistic discriminator term `mean softplus(−D(real)) + mean softplus(D(fake))`.
pub fn discriminator_adversarial(g: &Graph, real_logits: Var, fake_logits: Var) -> Result<Var> {
    g.add(g.mean(g.softplus(g.neg(real_logits))), g.mean(g.softplus(fake_logits)))
}

/// `(generator term, discriminator term)`. The discriminator term sees a
/// detached copy of `sr`, so its gradient never reaches the generator.
pub fn adversarial_terms(
    g: &Graph,
    disc: &PatchDiscriminator,
    p: &Binding<'_>,
    sr: Var,
    hr: Var,
) -> Result<(Var, Var)> {
    check_pair(g, "adversarial_terms", sr, hr)?;
    let gen = generator_adversarial(g, disc.forward(g, p, sr)?);
    let real = disc.forward(g, p, hr)?;
    let fake = disc.forward(g, p, g.detach(sr))?;
    Ok((gen, discriminator_adversarial(g, real, fake)?))
}
