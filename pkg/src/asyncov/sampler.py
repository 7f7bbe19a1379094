"""No-U-turn Hamiltonian sampler with step-size and diagonal-metric adaptation.

The transition is the multinomial variant with the generalised U-turn check
across subtree boundaries.  Warmup follows the usual windowed schedule: a fast
initial buffer, doubling slow windows that estimate the diagonal metric, and a
terminal buffer that only tunes the step size.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError

MAX_DELTA_H = 1000.0
UNRELIABLE_DIVERGENCE_FRACTION = 0.10


@dataclass(frozen=True)
class SamplerSettings:
    chains: int = 4
    warmup_iters: int = 1000
    retained_draws: int = 2000
    target_accept: float = 0.8
    max_leapfrog_depth: int = 10
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.retained_draws < 1:
            raise ConfigError("retained_draws must be at least 1")
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must lie in (0, 1)")
        if self.chains < 1:
            raise ConfigError("chains must be at least 1")
        if self.warmup_iters < 0:
            raise ConfigError("warmup_iters must be non-negative")
        if self.max_leapfrog_depth < 1:
            raise ConfigError("max_leapfrog_depth must be at least 1")

    @property
    def draws_per_chain(self) -> int:
        """``retained_draws`` counts draws over all chains."""
        return -(-self.retained_draws // self.chains)


@dataclass
class ChainResult:
    draws: np.ndarray
    logp: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    divergent: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    warmup_divergences: int = 0

    @property
    def divergence_fraction(self) -> float:
        return float(self.divergent.mean()) if self.divergent.size else 0.0


@dataclass
class PosteriorDraws:
    chains: list
    names: list = field(default_factory=list)

    @property
    def unreliable(self) -> bool:
        return any(c.divergence_fraction > UNRELIABLE_DIVERGENCE_FRACTION for c in self.chains)

    def stacked(self) -> np.ndarray:
        """``(chains, draws, dim)`` array."""
        return np.stack([c.draws for c in self.chains])

    def flat(self) -> np.ndarray:
        return np.concatenate([c.draws for c in self.chains])

    def summary(self) -> dict:
        return {
            "chains": len(self.chains),
            "draws_per_chain": [int(c.draws.shape[0]) for c in self.chains],
            "step_size": [c.step_size for c in self.chains],
            "mean_accept_stat": [float(c.accept_stat.mean()) for c in self.chains],
            "divergences": [int(c.divergent.sum()) for c in self.chains],
            "mean_tree_depth": [float(c.tree_depth.mean()) for c in self.chains],
            "unreliable": self.unreliable,
        }


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(chain)])


# --------------------------------------------------------------------------
# Hamiltonian pieces
# --------------------------------------------------------------------------

class _State:
    __slots__ = ("theta", "p", "logp", "grad")

    def __init__(self, theta, p, logp, grad):
        self.theta = theta
        self.p = p
        self.logp = logp
        self.grad = grad


def _logsumexp(a, b):
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))


class _Integrator:
    def __init__(self, fn, inv_metric):
        self.fn = fn
        self.inv_metric = inv_metric
        self.n_leapfrog = 0

    def evaluate(self, theta):
        try:
            # wild trial points overflow harmlessly; they are rejected below
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                lp, g = self.fn(theta)
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError, OverflowError):
            return -math.inf, np.zeros_like(theta)
        if not np.isfinite(lp) or not np.all(np.isfinite(g)):
            return -math.inf, np.zeros_like(theta)
        return float(lp), g

    def leapfrog(self, s: _State, eps: float) -> _State:
        self.n_leapfrog += 1
        p = s.p + 0.5 * eps * s.grad
        theta = s.theta + eps * self.inv_metric * p
        lp, g = self.evaluate(theta)
        if lp == -math.inf:
            return _State(theta, p, lp, g)
        p = p + 0.5 * eps * g
        return _State(theta, p, lp, g)

    def energy(self, s: _State) -> float:
        if s.logp == -math.inf:
            return math.inf
        return -s.logp + 0.5 * float(s.p @ (self.inv_metric * s.p))

    def sharp(self, p):
        return self.inv_metric * p


@dataclass
class _Tree:
    valid: bool
    end: _State = None
    propose: _State = None
    p_beg: np.ndarray = None
    p_end: np.ndarray = None
    ps_beg: np.ndarray = None
    ps_end: np.ndarray = None
    rho: np.ndarray = None
    log_w: float = -math.inf


def _uturn_ok(ps_minus, ps_plus, rho):
    return float(ps_plus @ rho) > 0 and float(ps_minus @ rho) > 0


class _Transition:
    def __init__(self, integ: _Integrator, rng, eps, max_depth):
        self.integ = integ
        self.rng = rng
        self.eps = eps
        self.max_depth = max_depth
        self.sum_metro = 0.0
        self.divergent = False

    def build(self, depth, start: _State, direction, H0) -> _Tree:
        integ = self.integ
        if depth == 0:
            s = integ.leapfrog(start, direction * self.eps)
            H = integ.energy(s)
            if not math.isfinite(H):
                H = math.inf
            if H - H0 > MAX_DELTA_H:
                self.divergent = True
            dH = H0 - H
            self.sum_metro += 1.0 if dH > 0 else (math.exp(dH) if math.isfinite(dH) else 0.0)
            if self.divergent:
                return _Tree(False)
            ps = integ.sharp(s.p)
            return _Tree(True, s, s, s.p, s.p, ps, ps, s.p.copy(), dH)

        left = self.build(depth - 1, start, direction, H0)
        if not left.valid:
            return left
        right = self.build(depth - 1, left.end, direction, H0)
        if not right.valid:
            return right
        log_w = _logsumexp(left.log_w, right.log_w)
        if right.log_w > log_w:
            propose = right.propose
        elif self.rng.uniform() < math.exp(right.log_w - log_w):
            propose = right.propose
        else:
            propose = left.propose
        rho = left.rho + right.rho
        ok = _uturn_ok(left.ps_beg, right.ps_end, rho)
        ok = ok and _uturn_ok(left.ps_beg, right.ps_beg, left.rho + right.p_beg)
        ok = ok and _uturn_ok(left.ps_end, right.ps_end, right.rho + left.p_end)
        return _Tree(ok, right.end, propose, left.p_beg, right.p_end, left.ps_beg, right.ps_end,
                     rho, log_w)

    def run(self, current: _State):
        integ = self.integ
        H0 = integ.energy(current)
        fwd = bck = current
        ps0 = integ.sharp(current.p)
        p_fwd_bck = p_fwd_fwd = p_bck_fwd = p_bck_bck = current.p
        ps_fwd_bck = ps_fwd_fwd = ps_bck_fwd = ps_bck_bck = ps0
        rho = current.p.copy()
        log_w = 0.0
        sample = current
        depth = 0
        start_leap = integ.n_leapfrog
        while depth < self.max_depth:
            if self.rng.uniform() > 0.5:
                rho_bck = rho
                p_bck_fwd, ps_bck_fwd = p_fwd_bck, ps_fwd_bck
                tree = self.build(depth, fwd, 1, H0)
                if not tree.valid:
                    break
                fwd = tree.end
                rho_fwd = tree.rho
                p_fwd_bck, p_fwd_fwd = tree.p_beg, tree.p_end
                ps_fwd_bck, ps_fwd_fwd = tree.ps_beg, tree.ps_end
            else:
                rho_fwd = rho
                p_fwd_bck, ps_fwd_bck = p_bck_fwd, ps_bck_fwd
                tree = self.build(depth, bck, -1, H0)
                if not tree.valid:
                    break
                bck = tree.end
                rho_bck = tree.rho
                p_bck_fwd, p_bck_bck = tree.p_beg, tree.p_end
                ps_bck_fwd, ps_bck_bck = tree.ps_beg, tree.ps_end
            depth += 1
            if tree.log_w > log_w or self.rng.uniform() < math.exp(tree.log_w - log_w):
                sample = tree.propose
            log_w = _logsumexp(log_w, tree.log_w)
            rho = rho_bck + rho_fwd
            ok = _uturn_ok(ps_bck_bck, ps_fwd_fwd, rho)
            ok = ok and _uturn_ok(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
            ok = ok and _uturn_ok(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)
            if not ok:
                break
        n = integ.n_leapfrog - start_leap
        accept = self.sum_metro / n if n else 0.0
        return sample, accept, depth, n, self.divergent


# --------------------------------------------------------------------------
# Adaptation
# --------------------------------------------------------------------------

class _DualAveraging:
    def __init__(self, delta, gamma=0.05, t0=10.0, kappa=0.75):
        self.delta, self.gamma, self.t0, self.kappa = delta, gamma, t0, kappa
        self.restart(1.0)

    def restart(self, eps):
        self.mu = math.log(10 * eps)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept):
        self.counter += 1
        accept = min(1.0, accept)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1 - eta) * self.s_bar + eta * (self.delta - accept)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        w = self.counter ** -self.kappa
        self.x_bar = (1 - w) * self.x_bar + w * x
        return math.exp(x)

    def final(self):
        return math.exp(self.x_bar)


def warmup_windows(n_warmup, init_buffer=75, term_buffer=None, base_window=25):
    """``(start, end)`` of the slow metric-adaptation windows.

    The terminal buffer defaults to a fifth of warmup (at least 50 iterations);
    a short final step-size phase leaves the realised acceptance well above target.
    """
    if n_warmup < 20:
        return []
    if term_buffer is None:
        term_buffer = max(50, n_warmup // 5)
    if init_buffer + term_buffer + base_window > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - init_buffer - term_buffer
    ends = []
    start, size = init_buffer, base_window
    stop = n_warmup - term_buffer
    while start < stop:
        end = start + size
        if end + 2 * size > stop:
            end = stop
        ends.append((start, end))
        start, size = end, 2 * size
    return ends


def _init_step_size(integ: _Integrator, state: _State, rng, eps):
    """Double or halve ``eps`` until the one-step acceptance crosses 0.8."""
    def one(e):
        p = rng.standard_normal(state.theta.size) / np.sqrt(integ.inv_metric)
        s0 = _State(state.theta, p, state.logp, state.grad)
        H0 = integ.energy(s0)
        s1 = integ.leapfrog(s0, e)
        dH = H0 - integ.energy(s1)
        return dH if math.isfinite(dH) else -math.inf

    dH = one(eps)
    direction = 1 if dH > math.log(0.8) else -1
    for _ in range(100):
        eps = eps * (2.0 ** direction)
        dH = one(eps)
        if direction == 1 and not dH > math.log(0.8):
            break
        if direction == -1 and not dH < math.log(0.8):
            break
    return eps


def nuts(fn, theta0, n_warmup, n_draws, rng, target_accept=0.8, max_depth=10,
         inv_metric=None, adapt_metric=True) -> ChainResult:
    """Run one chain.  ``fn(theta)`` returns ``(log density, gradient)``."""
    theta0 = np.asarray(theta0, dtype=float).copy()
    dim = theta0.size
    inv_metric = np.ones(dim) if inv_metric is None else np.asarray(inv_metric, float).copy()
    integ = _Integrator(fn, inv_metric)
    lp, g = integ.evaluate(theta0)
    if lp == -math.inf:
        raise NumericalError("log density is not finite at the initial point")
    state = _State(theta0, np.zeros(dim), lp, g)
    eps = _init_step_size(integ, state, rng, 1.0)
    da = _DualAveraging(target_accept)
    da.restart(eps)
    windows = warmup_windows(n_warmup) if adapt_metric else []
    ends = {e: s for s, e in windows}
    starts = {s for s, _ in windows}
    acc_mean = acc_m2 = None
    acc_n = 0
    warm_div = 0

    draws = np.empty((n_draws, dim))
    logps = np.empty(n_draws)
    stats = np.empty(n_draws)
    depths = np.empty(n_draws, dtype=int)
    leaps = np.empty(n_draws, dtype=int)
    divs = np.zeros(n_draws, dtype=bool)

    for it in range(n_warmup + n_draws):
        p = rng.standard_normal(dim) / np.sqrt(integ.inv_metric)
        current = _State(state.theta, p, state.logp, state.grad)
        tr = _Transition(integ, rng, eps, max_depth)
        sample, accept, depth, nleap, div = tr.run(current)
        state = _State(sample.theta, None, sample.logp, sample.grad)

        if it < n_warmup:
            warm_div += int(div)
            eps = da.update(accept)
            if it in starts:
                acc_mean, acc_m2, acc_n = np.zeros(dim), np.zeros(dim), 0
            if acc_mean is not None:
                acc_n += 1
                delta = state.theta - acc_mean
                acc_mean += delta / acc_n
                acc_m2 += delta * (state.theta - acc_mean)
            if it + 1 in ends:
                var = acc_m2 / max(acc_n - 1, 1)
                n = acc_n
                integ.inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                acc_mean = None
                eps = _init_step_size(integ, state, rng, eps)
                da.restart(eps)
            if it + 1 == n_warmup:
                eps = da.final()
            continue

        k = it - n_warmup
        draws[k] = state.theta
        logps[k] = state.logp
        stats[k] = accept
        depths[k] = depth
        leaps[k] = nleap
        divs[k] = div

    return ChainResult(draws, logps, stats, depths, leaps, divs, float(eps),
                       integ.inv_metric.copy(), warm_div)


def _chain_job(args):
    fn, theta0, settings, chain = args
    rng = chain_rng(settings.seed, chain)
    return nuts(fn, theta0, settings.warmup_iters, settings.draws_per_chain, rng,
                settings.target_accept, settings.max_leapfrog_depth)


def sample_chains(fn, inits, settings: SamplerSettings, names=None) -> PosteriorDraws:
    """Run ``settings.chains`` independent chains; chain ``c`` uses RNG stream ``(seed, c)``."""
    jobs = [(fn, inits[c], settings, c) for c in range(settings.chains)]
    if settings.workers > 1 and settings.chains > 1:
        with ProcessPoolExecutor(max_workers=min(settings.workers, settings.chains)) as ex:
            results = list(ex.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]
    return PosteriorDraws(results, list(names or []))
