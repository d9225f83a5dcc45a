"""Independent numerical checks of the bridge math and the network wiring.

Each check returns a :class:`CheckResult`. They are hermetic: no dataset or
checkpoint is needed.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .bridge import SamplerConfig, reverse_euler_sample, sample_forward, simulate_forward_em
from .control import ControlBranch, ECDBModel, FusionSchedule, fusion_weight
from .denoiser import DenoiserArch, UNetDenoiser
from .schedule import ProcessSchedule, backward_coeffs
from .training import loss_eq4


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)

    def summary(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}"


# -- closed-form identities ---------------------------------------------------------


def pinning_check(sched: ProcessSchedule, tol: float = 1e-12) -> CheckResult:
    sp0 = float(sched.sigma2_prime(0.0))
    spT = float(sched.sigma2_prime(sched.T))
    x0 = np.linspace(-1, 1, 16).reshape(1, 1, 4, 4)
    xT = x0[..., ::-1].copy() + 0.5
    noise = np.random.default_rng(0).standard_normal(x0.shape)
    at0 = sample_forward(sched, x0, xT, 0.0, noise)
    atT = sample_forward(sched, x0, xT, sched.T, noise)
    exact = bool(np.array_equal(at0, x0) and np.array_equal(atT, xT))
    return CheckResult(
        "bridge_pinning",
        sp0 < tol and spT < tol and exact,
        {"sigma2_prime_0": sp0, "sigma2_prime_T": spT, "sample_forward_exact": exact},
    )


def affine_check(sched: ProcessSchedule, tol: float = 1e-12) -> CheckResult:
    c0, cT = sched.mean_coeffs(sched.grid)
    err = float(np.max(np.abs(c0 + cT - 1.0)))
    return CheckResult("affine_identity", err < tol, {"max_abs_error": err})


def constraint_check(sched: ProcessSchedule, tol: float = 1e-12) -> CheckResult:
    ratio = sched.g2(sched.grid) / sched.theta(sched.grid)
    err = float(np.max(np.abs(ratio - 2 * sched.lambda_sq)))
    return CheckResult("diffusion_constraint", err < tol, {"max_abs_error": err})


# -- Monte-Carlo oracles ------------------------------------------------------------


def forward_marginal_check(
    sched: ProcessSchedule,
    n_paths: int = 100_000,
    n_substeps: int = 1000,
    seed: int = 0,
    x0: float = 0.0,
    xT: float = 1.0,
    z_tol: float = 4.0,
    var_tol: float = 0.10,
) -> CheckResult:
    """Euler-Maruyama moments of the forward SDE vs the closed-form marginal.

    At nodes where the closed-form variance is zero (``t = 0`` and ``t = T``)
    the ratio test is replaced by an absolute bound: the simulated variance
    may not exceed the noise of a single final substep, ``g^2 * h``, and the
    mean must be within 1e-2 of the pinned value.
    """
    paths = simulate_forward_em(
        sched, np.full(n_paths, x0), np.full(n_paths, xT), n_substeps, seed
    )
    h = sched.T / n_substeps
    floor = 2.0 * float(np.max(sched.g2(sched.grid))) * h
    rows = []
    ok = True
    for k, t in enumerate(sched.grid):
        c0, cT = sched.mean_coeffs(t)
        mean = float(c0 * x0 + cT * xT)
        var = float(sched.sigma2_prime(t))
        mc_mean = float(paths[k].mean())
        mc_var = float(paths[k].var(ddof=1))
        se = math.sqrt(mc_var / n_paths) if mc_var > 0 else 0.0
        if var > 0:
            z = (mc_mean - mean) / se
            good = abs(z) <= z_tol and abs(mc_var / var - 1.0) <= var_tol
        else:
            z = (mc_mean - mean) / se if se > 0 else 0.0
            good = abs(mc_mean - mean) <= 1e-2 and mc_var <= floor
        ok &= good
        rows.append({
            "t": float(t), "analytic_mean": mean, "mc_mean": mc_mean,
            "analytic_var": var, "mc_var": mc_var, "z_score": z, "passed": good,
        })
    worst = max(abs(r["z_score"]) for r in rows)
    ratios = [r["mc_var"] / r["analytic_var"] for r in rows if r["analytic_var"] > 0]
    return CheckResult(
        "forward_marginal",
        ok,
        {"max_abs_z": worst, "min_var_ratio": min(ratios), "max_var_ratio": max(ratios),
         "n_paths": n_paths, "n_substeps": n_substeps},
        rows,
    )


def _ou_paths(sched: ProcessSchedule, x0, mu, rng, keep) -> dict[int, np.ndarray]:
    """Unconditioned mean-reverting process toward ``mu``, exact grid transitions."""
    x = x0.copy()
    out = {0: x0.copy()}
    for k in range(1, sched.n_steps + 1):
        s, t = sched.grid[k - 1], sched.grid[k]
        decay = float(np.exp(-sched.theta_bar(s, t)))
        sd = float(np.sqrt(sched.sigma2(s, t)))
        x = decay * x + (1 - decay) * mu + sd * rng.standard_normal(x.shape)
        if k in keep:
            out[k] = x.copy()
    out["end"] = x
    return out


def backward_regression(sched: ProcessSchedule, t_index: int, n_paths: int = 100_000,
                        seed: int = 0) -> dict:
    """Regress ``x_{t-1}`` on ``(x_t, x_0, X_T, mu)`` over unconditioned paths.

    Conditioning the unconditioned process on ``X_T = mu`` gives the bridge,
    so the posterior coefficient on ``x_T`` is the sum of the ``X_T`` and
    ``mu`` coefficients. Returns estimates, standard errors and the values
    implied by :func:`backward_coeffs`.
    """
    rng = np.random.default_rng([seed, t_index])
    x0 = rng.standard_normal(n_paths)
    mu = rng.standard_normal(n_paths)
    p = _ou_paths(sched, x0, mu, rng, {t_index - 1, t_index})
    X = np.stack([p[t_index], x0, p["end"], mu], axis=1)
    y = p[t_index - 1]
    xtx_inv = np.linalg.inv(X.T @ X)
    beta = xtx_inv @ X.T @ y
    resid = y - X @ beta
    dof = n_paths - X.shape[1]
    s2 = float(resid @ resid / dof)
    cov = s2 * xtx_inv
    est = np.array([beta[0], beta[1], beta[2] + beta[3]])
    se = np.sqrt([cov[0, 0], cov[1, 1], cov[2, 2] + cov[3, 3] + 2 * cov[2, 3]])

    a, b, post_var = backward_coeffs(sched, t_index)
    sp2 = float(sched.sigma2_prime(sched.time(t_index)))
    sp2_prev = float(sched.sigma2_prime(sched.time(t_index - 1)))
    c0p, cTp = (float(c) for c in sched.mean_coeffs(sched.time(t_index - 1)))
    w = (sp2 - a * a * sp2_prev) / sp2
    expected = np.array([a * sp2_prev / sp2, w * c0p, -a * b * sp2_prev / sp2 + w * cTp])
    return {
        "estimate": est, "se": se, "expected": expected,
        "z": (est - expected) / se,
        "resid_var": s2, "post_var": post_var,
        "var_z": (s2 - post_var) / (post_var * math.sqrt(2.0 / dof)),
    }


def backward_coeff_check(sched: ProcessSchedule, indices=None, n_paths: int = 100_000,
                         seed: int = 0, z_tol: float = 3.0) -> CheckResult:
    n = sched.n_steps
    indices = indices or (2, n // 4, n // 2, 3 * n // 4, n - 1)
    rows, ok = [], True
    for i in indices:
        r = backward_regression(sched, i, n_paths, seed)
        zs = [*map(float, r["z"]), float(r["var_z"])]
        good = all(abs(z) <= z_tol for z in zs)
        ok &= good
        rows.append({"t_index": i, "z_xt": zs[0], "z_x0": zs[1], "z_xT": zs[2], "z_var": zs[3],
                     "passed": good})
    # endpoints: deterministic collapse, checked exactly
    a1, _, v1 = backward_coeffs(sched, 1)
    an, bn, vn = backward_coeffs(sched, n)
    ends = v1 == 0.0 and an == 0.0 and bn == 1.0 and vn == float(sched.sigma2_prime(sched.time(n - 1)))
    ok &= ends
    return CheckResult("backward_coefficients", ok,
                       {"max_abs_z": max(max(abs(v) for k, v in r.items() if k.startswith("z")) for r in rows),
                        "endpoints_exact": ends}, rows)


class GaussianToyModel(torch.nn.Module):
    """Exact noise predictor when ``x_0 ~ N(mu0, s0^2)`` and ``x_T`` is given.

    ``p(x_t | x_T) = N(c0 mu0 + cT x_T, c0^2 s0^2 + sigma2_prime(t))`` and the
    optimal noise estimate is ``E[z | x_t] = sigma_prime (x_t - m) / var``.
    """

    def __init__(self, sched: ProcessSchedule, mu0: float, s0: float):
        super().__init__()
        self.sched, self.mu0, self.s0 = sched, mu0, s0

    def moments(self, t):
        t = np.asarray(t, dtype=float)
        c0, cT = self.sched.mean_coeffs(t)
        sp2 = self.sched.sigma2_prime(t)
        return c0, cT, sp2, c0 * c0 * self.s0**2 + sp2

    def score(self, x, xT, t):
        c0, cT, _, var = (torch.as_tensor(v, dtype=x.dtype).reshape(-1, *([1] * (x.ndim - 1)))
                          for v in self.moments(t.detach().cpu().numpy()))
        return -(x - (c0 * self.mu0 + cT * xT)) / var

    def forward(self, x, xT, t):
        sp2 = torch.as_tensor(self.moments(t.detach().cpu().numpy())[2], dtype=x.dtype)
        return -torch.sqrt(sp2).reshape(-1, *([1] * (x.ndim - 1))) * self.score(x, xT, t)


def reverse_gaussian_check(sched: ProcessSchedule, n_samples: int = 10_000, mu0: float = 0.3,
                           s0: float = 0.5, xT: float = 1.0, seed: int = 0,
                           z_tol: float = 4.0, var_tol: float = 0.15) -> CheckResult:
    model = GaussianToyModel(sched, mu0, s0)
    x_T = torch.full((n_samples, 1), xT, dtype=torch.float64)
    out = reverse_euler_sample(sched, model, x_T, SamplerConfig(n_steps=sched.n_steps, rng_seed=seed))
    m = float(out.mean())
    v = float(out.var())
    z = (m - mu0) / math.sqrt(v / n_samples)
    ratio = v / s0**2
    return CheckResult("reverse_gaussian", abs(z) <= z_tol and abs(ratio - 1) <= var_tol,
                       {"z_score": z, "var_ratio": ratio, "mean": m, "var": v, "n": n_samples})


# -- network checks ------------------------------------------------------------------


def zero_init_check(arch: DenoiserArch | None = None, n_probes: int = 16, seed: int = 0,
                    size: int = 16) -> CheckResult:
    arch = arch or DenoiserArch(base_width=8, time_embed_dim=16)
    torch.manual_seed(seed)
    dm = UNetDenoiser(arch)
    ecdb = ECDBModel(dm, ControlBranch(dm))
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_probes):
            x_t = torch.randn(2, arch.image_channels, size, size, generator=gen)
            x_T = torch.rand(2, arch.image_channels, size, size, generator=gen)
            t = torch.rand(2, generator=gen) * arch.T
            diff = (ecdb(x_t, x_T, t) - dm(x_t, x_T, t)).abs().max()
            worst = max(worst, float(diff))
    return CheckResult("zero_init_identity", worst == 0.0, {"max_abs_diff": worst, "probes": n_probes})


def fusion_weight_check(a: float = 5.0, n: int = 100) -> CheckResult:
    w0 = fusion_weight(0.0, a)
    w1 = fusion_weight(1.0, a)
    grid = np.linspace(0, 1, n + 1)
    w = fusion_weight(grid, a)
    mono = bool(np.all(np.diff(w) < 0))
    mid = fusion_weight(0.5, a)
    # closed form evaluated independently of fusion_weight
    exact = math.exp(-a / 2) - 0.5 * math.exp(-a)
    ok = (abs(w0 - 1.0) <= 1e-15 and abs(w1) <= 1e-15 and mono
          and abs(mid - exact) <= 1e-9 and (a != 5.0 or round(mid, 6) == 0.078716))
    return CheckResult("fusion_weight", ok, {"W0": w0, "W1": w1, "W_half": mid,
                                             "W_half_error": abs(mid - exact), "monotone": mono})


def _central_difference(f, param: torch.Tensor, index, h: float) -> float:
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + h
        up = float(f())
        param[index] = orig - h
        down = float(f())
        param[index] = orig
    return (up - down) / (2 * h)


def _top_entries(grad: torch.Tensor, k: int):
    flat = grad.abs().flatten()
    picks = torch.argsort(flat, descending=True)[:k]
    return [np.unravel_index(int(i), tuple(grad.shape)) for i in picks]


def grad_check_params(f, named: dict[str, torch.Tensor], h: float = 1e-3, k: int = 2) -> dict[str, float]:
    """Max relative error between autograd and central differences per parameter."""
    for p in named.values():
        p.grad = None
    loss = f()
    grads = torch.autograd.grad(loss, list(named.values()), allow_unused=False)
    out = {}
    for (name, p), g in zip(named.items(), grads):
        worst = 0.0
        for idx in _top_entries(g, k):
            an = float(g[idx])
            num = _central_difference(f, p, idx, h)
            worst = max(worst, abs(an - num) / max(abs(an), abs(num), 1e-12))
        out[name] = worst
    return out


def _randomize_zero_layers(branch: ControlBranch, gen: torch.Generator, scale: float = 0.1):
    with torch.no_grad():
        for mod in [branch.chm.out, branch.dfm.out, *branch.cm.taps]:
            for p in mod.parameters():
                p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def gradient_checks(sched: ProcessSchedule, seed: int = 0, h: float = 1e-3, tol: float = 1e-4) -> CheckResult:
    """Autograd vs finite differences across layer types, in float64.

    Denoiser layers are checked on ``||dm(x_t, x_T, t)||^2``; control-branch
    parameters through the full composed posterior-matching loss, after
    moving the zero layers off zero so gradients reach the inner layers.
    """
    arch = DenoiserArch(image_channels=1, base_width=8, time_embed_dim=16)
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    dm = UNetDenoiser(arch).double()
    x_t = torch.randn(1, 1, 8, 8, generator=gen, dtype=torch.float64, requires_grad=True)
    x_T = torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64)
    t = torch.tensor([0.37], dtype=torch.float64)

    def dm_obj():
        return dm(x_t, x_T, t).pow(2).sum()

    dm_params = {
        "conv:conv_in.weight": dm.conv_in.weight,
        "conv:enc.0.0.conv1.weight": dm.enc[0][0].conv1.weight,
        "mlp:time_mlp.mlp.0.weight": dm.time_mlp.mlp[0].weight,
        "mlp:time_mlp.mlp.2.bias": dm.time_mlp.mlp[2].bias,
        "norm:mid.norm1.weight": dm.mid.norm1.weight,
        "norm:dec.0.blocks.0.norm2.bias": dm.dec[0].blocks[0].norm2.bias,
        "conv:conv_out.weight": dm.conv_out.weight,
    }
    errors = {f"dm/{k}": v for k, v in grad_check_params(dm_obj, dm_params, h).items()}
    errors.update({"dm/silu:input_x_t": v for v in grad_check_params(dm_obj, {"x": x_t}, h).values()})

    frozen = copy.deepcopy(dm)
    branch = ControlBranch(frozen, FusionSchedule()).double()
    ecdb = ECDBModel(frozen, branch)
    _randomize_zero_layers(branch, gen)
    x0 = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    xT = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    noise = torch.randn(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    t_index = torch.tensor([30, 70])

    def ecdb_obj():
        return loss_eq4(sched, ecdb, x0, xT, t_index, noise=noise)

    br_params = {
        "chm:layers.0.weight": branch.chm.layers[0].weight,
        "dfm:layers.2.weight": branch.dfm.layers[2].weight,
        "cm:trunk.0.blocks.0.conv1.weight": branch.cm.trunk[0].blocks[0].conv1.weight,
        "zero_conv:cm.taps.0.weight": branch.cm.taps[0].weight,
        "zero_conv:chm.out.bias": branch.chm.out.bias,
    }
    errors.update({f"ecdb/{k}": v for k, v in grad_check_params(ecdb_obj, br_params, h).items()})
    worst = max(errors.values())
    return CheckResult("gradient_check", worst < tol, {"max_rel_error": worst, **errors})
