//! Limited-memory BFGS with Armijo backtracking.

use std::collections::VecDeque;

use super::loss::Objective;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsSettings {
    /// Stop once the gradient ∞-norm is at or below this value.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Number of correction pairs kept.
    pub memory: usize,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iter: 1000,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub params: Vec<f64>,
    pub value: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns `-H·g`.
fn search_direction(g: &[f64], history: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    let gamma = history
        .back()
        .map(|p| dot(&p.s, &p.y) / dot(&p.y, &p.y))
        .unwrap_or_else(|| 1.0 / dot(g, g).sqrt().max(1.0));
    for qi in q.iter_mut() {
        *qi *= gamma;
    }
    for (p, a) in history.iter().zip(alphas.iter().rev()) {
        let beta = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (a - beta) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

pub fn minimize<O: Objective + ?Sized>(obj: &O, x0: Vec<f64>, settings: &LbfgsSettings) -> LbfgsResult {
    const ARMIJO: f64 = 1e-4;
    let n = obj.num_params();
    assert_eq!(x0.len(), n);
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = obj.value_grad(&x, &mut g);
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(settings.memory);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;

    while iterations < settings.max_iter {
        let gnorm = inf_norm(&g);
        if gnorm <= settings.grad_tol {
            break;
        }
        let mut d = search_direction(&g, &history);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = search_direction(&g, &history);
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            let f_try = obj.value_grad(&x_new, &mut g_new);
            let armijo = f_try <= f + ARMIJO * step * slope;
            // near the optimum the decrease can fall below rounding noise;
            // accept flat steps that still shrink the gradient
            let flat = f_try <= f + 4.0 * f64::EPSILON * f.abs() && inf_norm(&g_new) < gnorm;
            if f_try.is_finite() && (armijo || flat) {
                accepted = Some(f_try);
                break;
            }
            step *= 0.5;
        }
        let Some(f_next) = accepted else {
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() && sy > 0.0 {
            if history.len() == settings.memory {
                history.pop_front();
            }
            history.push_back(Pair { s, y: yv, rho: 1.0 / sy });
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_next;
        iterations += 1;
    }

    let grad_inf_norm = inf_norm(&g);
    LbfgsResult {
        params: x,
        value: f,
        grad_inf_norm,
        iterations,
        converged: grad_inf_norm <= settings.grad_tol,
    }
}
