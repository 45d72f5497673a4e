"""Experiment driver: configs, the four toy tasks and the verification suite.

Each task writes into its own output directory. Every CSV starts with a
comment line ``# config=<hash> seed=<seed>`` and every PNG carries the same
text in its metadata, so artifacts can be traced back to their config.
Nothing time-dependent is written, so reruns are byte-identical.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io, plotting
from .exact_ot import hungarian_oracle, solve_w1, validate_duals
from .map_recovery import OutsideHypothesesWarning, recover_map, verify_pushforward
from .measures import (
    BLUR,
    NOISE,
    CorruptionSpec,
    bounding_domain,
    corrupt,
    make_empirical,
    psnr,
    synth_dataset,
)
from .potential import (
    DiscretePotential,
    check_affine_on_ray,
    check_grad_lipschitz_Aj,
    check_ray_crossings,
    gradient_fd_error,
    lipschitz_violation,
    rays,
    w1_minibatch_estimate,
)
from .ttc import Backend, advreg_equivalence_check, parse_schedule, train, uniform_step_reduction_check

TASKS = ("gen2d", "denoise", "deblur", "transport")
SUMMARY_HEADER = [
    "task", "seed", "N", "backend", "w1_initial", "w1_final", "psnr_baseline", "psnr_final",
    "corruption", "psnr_baseline_std", "psnr_final_std", "psnr_baseline_pooled", "psnr_final_pooled",
]


class ConfigError(ValueError):
    """Bad experiment configuration (CLI exit code 2)."""


def _floats(text) -> tuple:
    if isinstance(text, (int, float)):
        return (float(text),)
    if isinstance(text, str):
        return tuple(float(s) for s in text.replace(" ", "").split(",") if s)
    return tuple(float(s) for s in text)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "gen2d"
    seed: int = 0
    steps: int = 20
    fit_at: str = "all"
    backend: str = "exact"
    out: str = "out"
    # gen2d / transport clouds
    n_source: int = 500
    source_std: float = 0.5
    n_target: int = 8
    radius: float = 2.0
    grid_k: int = 3
    # image tasks
    image_count: int = 8
    image_size: int = 8
    copies: int = 8
    sigmas: tuple = (0.1, 0.15, 0.2)
    blur_sigma: float = 2.0
    blur_size: int = 5
    plots: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sigmas", _floats(self.sigmas))
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        try:
            parse_schedule(self.fit_at, self.steps)
            Backend.parse(self.backend)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        for name in ("n_source", "n_target", "grid_k", "image_count", "copies"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 4 <= self.image_size <= 32:
            raise ConfigError("image_size must be in [4, 32]")
        if self.source_std <= 0 or self.radius <= 0:
            raise ConfigError("source_std and radius must be > 0")
        if not self.sigmas or any(s <= 0 for s in self.sigmas):
            raise ConfigError("noise sigmas must be > 0")
        if self.blur_sigma <= 0 or self.blur_size < 3 or self.blur_size % 2 == 0:
            raise ConfigError("blur needs sigma > 0 and an odd size >= 3")

    def digest(self) -> str:
        """Short sha256 of every field except the output directory."""
        d = dataclasses.asdict(self)
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def meta(self) -> dict:
        return {"config": self.digest(), "seed": self.seed}

    @classmethod
    def load(cls, path=None, section: str = "experiment", **overrides) -> "ExperimentConfig":
        """Read an INI file (optional) and apply keyword overrides on top; ``None`` overrides are ignored."""
        values: dict = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file {p} does not exist")
            cp = configparser.ConfigParser()
            try:
                cp.read(p)
            except configparser.Error as e:
                raise ConfigError(f"{p}: {e}") from None
            if not cp.has_section(section):
                raise ConfigError(f"{p}: missing [{section}] section")
            values.update(cp.items(section))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in values.items():
            key = k.replace("-", "_")
            if key not in fields:
                raise ConfigError(f"unknown config key {k!r}")
            default = fields[key].default
            try:
                if key == "sigmas":
                    kw[key] = _floats(v)
                elif isinstance(default, bool):
                    kw[key] = v if isinstance(v, bool) else str(v).strip().lower() in ("1", "true", "yes", "on")
                elif isinstance(default, int):
                    kw[key] = int(v)
                elif isinstance(default, float):
                    kw[key] = float(v)
                else:
                    kw[key] = str(v)
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {e}") from None
        return cls(**kw)


@dataclass
class Artifacts:
    out: Path
    summary: list = field(default_factory=list)
    files: list = field(default_factory=list)


def _summary_row(cfg, w1_0, w1_f, base=None, final=None, corruption="", base_pool=None, final_pool=None):
    nan = float("nan")
    return {
        "task": cfg.task,
        "seed": cfg.seed,
        "N": cfg.steps,
        "backend": cfg.backend,
        "w1_initial": w1_0,
        "w1_final": w1_f,
        "psnr_baseline": nan if base is None else float(np.mean(base)),
        "psnr_final": nan if final is None else float(np.mean(final)),
        "corruption": corruption,
        "psnr_baseline_std": nan if base is None else float(np.std(base)),
        "psnr_final_std": nan if final is None else float(np.std(final)),
        "psnr_baseline_pooled": nan if base_pool is None else base_pool,
        "psnr_final_pooled": nan if final_pool is None else final_pool,
    }


def _pooled_psnr(x, y) -> float:
    return float(psnr(np.ravel(x), np.ravel(y)))


def _run_ttc(cfg: ExperimentConfig, mu, nu, out: Path, art: Artifacts, scatter: bool):
    meta = cfg.meta()
    _, metrics = train(mu, nu, cfg.steps, cfg.fit_at, Backend.parse(cfg.backend, cfg.seed), seed=cfg.seed, keep_snapshots=True)
    art.files.append(io.write_dicts(out / "metrics.csv", list(metrics.rows()), meta,
                                    ["stage", "w1_before", "w1_after", "eta", "fraction_long", "fitted"]))
    if cfg.plots:
        curve = [metrics.w1_before[0]] + list(metrics.w1_after)
        art.files.append(plotting.w1_curve(out / "w1_curve.png", curve, meta=meta))
        if scatter:
            dom = bounding_domain(mu, nu)
            lims = (dom.lo, dom.hi)
            for n, snap in enumerate(metrics.snapshots):
                art.files.append(
                    plotting.scatter_stage(out / f"stage_{n:02d}.png", snap, nu.points, f"stage {n}", meta, lims)
                )
    return metrics


def run_gen2d(cfg: ExperimentConfig) -> Artifacts:
    """Gaussian cloud onto a ring of atoms."""
    mu = synth_dataset("gaussian", seed=cfg.seed, n=cfg.n_source, std=cfg.source_std)
    nu = synth_dataset("ring", seed=cfg.seed, n=cfg.n_target, radius=cfg.radius)
    return _cloud_task(cfg, mu, nu)


def run_transport(cfg: ExperimentConfig) -> Artifacts:
    """Noisy ring ("style A") onto a grid of atoms ("style B")."""
    mu = synth_dataset("ring", seed=cfg.seed, n=cfg.n_source, radius=cfg.radius, noise=0.1 * cfg.radius)
    nu = synth_dataset("atom_grid", seed=cfg.seed, k=cfg.grid_k, lo=-cfg.radius / 2, hi=cfg.radius / 2)
    return _cloud_task(cfg, mu, nu)


def _cloud_task(cfg, mu, nu) -> Artifacts:
    out = io.ensure_dir(cfg.out)
    art = Artifacts(out)
    meta = cfg.meta()
    art.files.append(io.write_points(out / "mu.csv", mu, meta))
    art.files.append(io.write_points(out / "nu.csv", nu, meta))
    m = _run_ttc(cfg, mu, nu, out, art, scatter=True)
    art.summary.append(_summary_row(cfg, m.w1_before[0], m.w1_after[-1]))
    art.files.append(io.write_dicts(out / "summary.csv", art.summary, meta, SUMMARY_HEADER))
    return art


def _image_sources(cfg):
    clean = synth_dataset("toy_images", seed=cfg.seed, count=cfg.image_count, size=cfg.image_size)
    # evaluation pairing: particle i started from clean image i // copies
    paired = np.repeat(clean.points, cfg.copies, axis=0)
    return clean, make_empirical(paired, shape=clean.shape)


def _image_task(cfg, corruptions) -> Artifacts:
    out = io.ensure_dir(cfg.out)
    art = Artifacts(out)
    meta = cfg.meta()
    clean, paired = _image_sources(cfg)
    art.files.append(io.write_points(out / "nu.csv", clean, meta))
    for tag, spec in corruptions:
        sub = io.ensure_dir(out / tag)
        src = corrupt(paired, spec)
        art.files.append(io.write_points(sub / "mu.csv", src, meta))
        m = _run_ttc(cfg, src, clean, sub, art, scatter=False)
        final = m.final_particles
        base = psnr(src.points, paired.points)
        rest = psnr(final, paired.points)
        io.write_dicts(
            sub / "psnr.csv",
            [{"particle": i, "source_image": i // cfg.copies, "psnr_corrupted": b, "psnr_restored": r}
             for i, (b, r) in enumerate(zip(base, rest))],
            meta,
        )
        art.files.append(sub / "psnr.csv")
        if cfg.plots:
            k = min(8, len(src))
            idx = np.arange(k) * cfg.copies % len(src)
            art.files.append(plotting.image_tiles(
                sub / "tiles.png", [paired.points[idx], src.points[idx], final[idx]], clean.shape,
                ["clean", "corrupted", "restored"], meta,
            ))
        art.summary.append(_summary_row(
            cfg, m.w1_before[0], m.w1_after[-1], base, rest, tag,
            _pooled_psnr(src.points, paired.points), _pooled_psnr(final, paired.points),
        ))
    art.files.append(io.write_dicts(out / "summary.csv", art.summary, meta, SUMMARY_HEADER))
    return art


def run_denoise(cfg: ExperimentConfig) -> Artifacts:
    """Noisy copies of toy images transported, unpaired, onto the clean set."""
    specs = [(f"sigma_{s:g}", CorruptionSpec(NOISE, s, seed=cfg.seed)) for s in cfg.sigmas]
    return _image_task(cfg, specs)


def run_deblur(cfg: ExperimentConfig) -> Artifacts:
    spec = CorruptionSpec(BLUR, cfg.blur_sigma, cfg.blur_size, cfg.seed)
    return _image_task(dataclasses.replace(cfg, copies=1), [(f"blur_{cfg.blur_size}x{cfg.blur_size}_s{cfg.blur_sigma:g}", spec)])


RUNNERS = {"gen2d": run_gen2d, "denoise": run_denoise, "deblur": run_deblur, "transport": run_transport}


def run(cfg: ExperimentConfig) -> Artifacts:
    return RUNNERS[cfg.task](cfg)


# ---------------------------------------------------------------------------
# Verification suite
# ---------------------------------------------------------------------------

PASS, FAIL, OUTSIDE = "pass", "fail", "outside hypotheses"


@dataclass
class CheckResult:
    check: str
    status: str
    value: float
    tolerance: float
    detail: str = ""


def _uniform_pair(rng, n, d):
    return make_empirical(rng.uniform(-1, 1, (n, d))), make_empirical(rng.uniform(-1, 1, (n, d)))


def _semi_discrete(rng, d, m, k):
    """Uniform source cloud and ``k`` atoms whose weights are multiples of ``1/m``."""
    mu = make_empirical(rng.uniform(-1, 1, (m, d)))
    counts = 1 + rng.multinomial(m - k, np.full(k, 1.0 / k))
    nu = make_empirical(rng.uniform(-1, 1, (k, d)), counts / m)
    return mu, nu


def verify_all(seed: int = 0, out=None, *, inject_dual_perturbation: bool = False, quick: bool = False):
    """Run every numerical check; returns ``(exit_code, results)`` and writes ``verify_report.csv`` if ``out``."""
    rng = np.random.default_rng(seed)
    res: list[CheckResult] = []
    n_inst = 10 if quick else 30

    def add(name, value, tol, ok, detail=""):
        res.append(CheckResult(name, PASS if ok else FAIL, float(value), float(tol), detail))

    # exact solver against brute force, then certificates
    worst_or, worst_gap, worst_slack = 0.0, 0.0, 0.0
    solved = []
    for k in range(n_inst):
        d = 1 + k % 3
        mu, nu = _uniform_pair(rng, int(rng.integers(1, 9)), d)
        plan, duals = solve_w1(mu, nu)
        worst_or = max(worst_or, abs(plan.cost - hungarian_oracle(mu, nu)))
        solved.append((mu, nu, plan, duals))
    for k in range(n_inst // 2):
        m, n = rng.integers(2, 40, size=2)
        mu = make_empirical(rng.uniform(-1, 1, (m, 2)), rng.uniform(0.1, 1, m))
        nu = make_empirical(rng.uniform(-1, 1, (n, 2)), rng.uniform(0.1, 1, n))
        solved.append((mu, nu) + solve_w1(mu, nu))
    if inject_dual_perturbation:
        mu, nu, plan, duals = solved[0]
        bad_v = duals.target_values.copy()
        bad_v[0] += 1e-3
        solved[0] = (mu, nu, plan, dataclasses.replace(duals, target_values=bad_v))
    all_ok = True
    for mu, nu, plan, duals in solved:
        rep = validate_duals(plan, duals, mu, nu)
        worst_gap = max(worst_gap, rep.duality_gap)
        worst_slack = max(worst_slack, rep.slackness, rep.feasibility)
        all_ok &= rep.passed
    add("oracle_equivalence", worst_or, 1e-9, worst_or <= 1e-9, f"{n_inst} uniform instances n<=8 d in 1..3")
    add("duality_gap", worst_gap, 1e-9, worst_gap <= 1e-9 and all_ok, f"{len(solved)} instances")
    add("complementary_slackness", worst_slack, 1e-8, worst_slack <= 1e-8 and all_ok)

    # map recovery from the potential alone
    worst_mis, worst_cost = 0.0, 0.0
    for k in range(3 if quick else 8):
        d = 2 + k % 2
        mu, nu = _semi_discrete(rng, d, int(rng.integers(200, 600)), int(rng.integers(3, 21)))
        plan, duals = solve_w1(mu, nu)
        pot = DiscretePotential(nu.points, duals.target_values, bounding_domain(mu, nu))
        rm = recover_map(pot, mu, plan)
        rep = verify_pushforward(rm, mu, nu, duals.w1)
        worst_mis = max(worst_mis, rm.mismatch_mass, rep.max_mass_deviation)
        worst_cost = max(worst_cost, rep.cost_rel_error)
    add("map_recovery_mismatch", worst_mis, 1e-3, worst_mis <= 1e-3)
    add("map_recovery_cost", worst_cost, 1e-6, worst_cost <= 1e-6)
    mu1, nu1 = _semi_discrete(rng, 1, 50, 4)
    plan1, duals1 = solve_w1(mu1, nu1)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rm1 = recover_map(DiscretePotential(nu1.points, duals1.target_values), mu1, plan1)
    flagged = rm1.outside_hypotheses and any(issubclass(w.category, OutsideHypothesesWarning) for w in caught)
    res.append(CheckResult(
        "map_recovery_d1", OUTSIDE if flagged else FAIL, float(rm1.mismatch_mass), float("nan"),
        "d = 1 fixture: map checks skipped",
    ))

    # potential structure
    aff = fd = lip = 0.0
    ratio_ok, ratio_worst = True, 0.0
    cross_bad = 0
    for k in range(2 if quick else 5):
        mu, nu = _semi_discrete(rng, 2, 200, int(rng.integers(3, 10)))
        _, duals = solve_w1(mu, nu)
        dom = bounding_domain(mu, nu)
        pot = DiscretePotential(nu.points, duals.target_values, dom)
        xs = dom.sample_uniform(40, rng)
        r = rays(pot, xs)
        for x in xs[~r.tie][:20]:
            aff = max(aff, check_affine_on_ray(pot, x))
        fd = max(fd, gradient_fd_error(pot, xs))
        lip = max(lip, lipschitz_violation(pot, dom, 10_000, seed + k))
        for j in (1, 2, 4):
            lr = check_grad_lipschitz_Aj(pot, j, 1000, seed + k, dom)
            ratio_ok &= lr.passed
            ratio_worst = max(ratio_worst, lr.ratio / lr.bound)
        cross_bad += check_ray_crossings(pot, xs[:25]).violations
    add("affine_on_rays", aff, 1e-9, aff <= 1e-9)
    add("gradient_finite_difference", fd, 1e-5, fd <= 1e-5)
    add("lipschitz_pairs", max(lip, 0.0), 1e-12, lip <= 1e-12, "10^4 pairs per instance")
    add("ray_crossings", cross_bad, 0, cross_bad == 0)
    add("gradient_lipschitz_ratio", ratio_worst, 1.0, ratio_ok, "ratio / 4j, j in 1,2,4")

    # one uniform step
    red_fail = 0
    trials = 10 if quick else 30
    for _ in range(trials):
        mu, nu = _semi_discrete(rng, 2, int(rng.integers(20, 80)), int(rng.integers(2, 6)))
        w1 = solve_w1(mu, nu)[1].w1
        rep = uniform_step_reduction_check(mu, nu, float(rng.uniform(0.05, 1.0)) * w1)
        red_fail += not rep.passed
    add("uniform_step_reduction", red_fail, 0, red_fail == 0, f"{trials} trials")

    # regularized denoising step equals a gradient step
    prox_worst, done = 0.0, 0
    while done < (10 if quick else 20):
        mu, nu = _semi_discrete(rng, 2, 40, 4)
        _, duals = solve_w1(mu, nu)
        pot = DiscretePotential(nu.points, duals.target_values)
        x0 = rng.uniform(-1, 1, 2)
        r = rays(pot, x0[None, :])
        if r.tie[0] or r.alpha[0] <= 1e-3:
            continue
        rep = advreg_equivalence_check(pot, x0, float(rng.uniform(0.05, 0.85)) * r.alpha[0])
        prox_worst = max(prox_worst, rep.discrepancy)
        done += 1
    add("prox_equals_gradient_step", prox_worst, 1e-6, prox_worst <= 1e-6)

    # estimator with exact potential on full populations
    est_worst = 0.0
    for _ in range(5):
        mu, nu = _semi_discrete(rng, 2, 60, 5)
        _, duals = solve_w1(mu, nu)
        pot = DiscretePotential(nu.points, duals.target_values)
        ts = rng.uniform(size=60)
        for lam in (10.0, 1000.0):
            e = w1_minibatch_estimate(pot, mu.points, nu.points, ts, lam, mu.weights, nu.weights)
            est_worst = max(est_worst, abs(e - duals.w1))
    add("estimator_exact", est_worst, 1e-9, est_worst <= 1e-9, "lambda in 10, 1000")

    code = 0 if all(r.status != FAIL for r in res) else 3
    if out is not None:
        io.ensure_dir(out)
        io.write_dicts(
            Path(out) / "verify_report.csv",
            [dataclasses.asdict(r) for r in res],
            {"seed": seed, "injected": int(inject_dual_perturbation)},
            ["check", "status", "value", "tolerance", "detail"],
        )
    return code, res
