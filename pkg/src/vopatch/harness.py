"""Experiment orchestration: in-sample, cross-validated and closed-loop runs.

Every run is driven by an :class:`ExperimentConfig` (YAML or JSON) and
writes its outputs under one directory together with a manifest holding
the config hash and seeds. Nothing time- or host-dependent is written, so a
rerun with the same config reproduces the directory byte for byte.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import __version__
from . import attacks as at
from . import navigation as nav
from . import renderer as rd
from .criteria import CriterionKind
from .imaging import permute_patch, random_patch
from .vo import DirectAlignmentVO

log = logging.getLogger(__name__)

SETTINGS = ("in_sample", "out_of_sample", "closed_loop")
BASELINES = ("clean_I0", "clean_I1", "random", "permuted_best")
ALL_COMBINATIONS = (("rms", "rms"), ("rms", "mprms"), ("mprms", "rms"), ("mprms", "mprms"))


class ConfigError(ValueError):
    pass


class InsufficientGroups(ValueError):
    pass


class HeldOutViolation(RuntimeError):
    """A test-fold trajectory was handed to patch optimization."""


class ReportError(OSError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_DEFAULTS = {
    "name": "experiment",
    "setting": "in_sample",
    "dataset": {"path": None, "seed": 0, "spec": {}},
    "folds": 10,
    "vo": {"gn_iterations": 5},
    "attack": {"alpha": 0.05, "K": 100, "seed": 0, "patch_dims": [32, 32], "shrink_fraction": 1.0},
    "combinations": [list(c) for c in ALL_COMBINATIONS],
    "pgd": True,
    "baselines": list(BASELINES),
    "baseline_seed": 0,
    "navigation": {
        "cruise_speed": 1.0,
        "fps": 10.0,
        "lookahead": 2.0,
        "arrival_radius": None,
        "max_steps": 40,
        "n_runs": 8,
        "start_distance": 6.0,
        "start_half_angle_deg": 10.0,
        "approach": 2.0,
    },
    "patches": {},
    "jobs": 1,
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown configuration key {path + key!r}")
        if isinstance(base[key], dict) and base[key] and isinstance(value, dict) and key not in ("spec", "patches"):
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    """Validated experiment description; ``data`` is the full key/value tree."""

    data: dict = field(default_factory=lambda: copy.deepcopy(_DEFAULTS))

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "ExperimentConfig":
        if d is not None and not isinstance(d, dict):
            raise ConfigError("configuration must be a mapping")
        cfg = cls(_merge(_DEFAULTS, d or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from None
        try:
            data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse configuration {path}: {exc}") from None
        return cls.from_dict(data)

    def validate(self) -> None:
        d = self.data
        if d["setting"] not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {d['setting']!r}")
        if d["setting"] == "out_of_sample" and int(d["folds"]) < 2:
            raise ConfigError("out_of_sample needs at least 2 folds")
        combos = [tuple(c) for c in d["combinations"]]
        if len(set(combos)) != len(combos):
            raise ConfigError("every criterion combination may be listed at most once")
        for c in combos:
            if len(c) != 2:
                raise ConfigError(f"combination {c} must be [train, eval]")
            try:
                [CriterionKind(k) for k in c]
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        unknown = set(d["baselines"]) - set(BASELINES)
        if unknown:
            raise ConfigError(f"unknown baselines {sorted(unknown)}")
        if "clean_I0" not in d["baselines"]:
            raise ConfigError("the clean_I0 baseline is required")
        if int(d["jobs"]) < 1:
            raise ConfigError("jobs must be >= 1")
        try:
            self.dataset_spec()
            self.attack_config(CriterionKind.RMS, CriterionKind.RMS)
            self.nav_config()
            DirectAlignmentVO(**d["vo"]).check_params()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = copy.deepcopy(self.data)
        d["dataset"]["seed"] = seed
        d["attack"]["seed"] = seed
        d["baseline_seed"] = seed
        return ExperimentConfig(d)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode()).hexdigest()

    # -- typed views -------------------------------------------------------

    def dataset_spec(self) -> rd.DatasetSpec:
        return rd.DatasetSpec.from_dict(self.data["dataset"]["spec"])

    def combinations(self) -> list:
        return [(CriterionKind(a), CriterionKind(b)) for a, b in self.data["combinations"]]

    def attack_config(self, train, eval_, **overrides) -> at.AttackConfig:
        a = dict(self.data["attack"], **overrides)
        return at.AttackConfig(
            alpha=float(a["alpha"]), K=int(a["K"]), train_criterion=train, eval_criterion=eval_,
            seed=int(a["seed"]), patch_dims=tuple(a["patch_dims"]), shrink_fraction=float(a["shrink_fraction"]),
        )

    def nav_config(self) -> nav.NavConfig:
        n = self.data["navigation"]
        return nav.NavConfig(n["cruise_speed"], n["fps"], n["lookahead"], n["arrival_radius"], int(n["max_steps"]))

    def make_vo(self, intr) -> DirectAlignmentVO:
        return DirectAlignmentVO(intrinsics=intr, **self.data["vo"])


def load_or_generate_dataset(cfg: ExperimentConfig):
    """``(trajectories, spec, scene)`` from ``dataset.path`` or generated in memory."""
    ds = cfg.data["dataset"]
    if ds["path"]:
        trajs, spec, _ = rd.load_dataset(ds["path"])
    else:
        spec = cfg.dataset_spec()
        trajs = rd.generate_dataset(rd.scene_for(spec), spec, int(ds["seed"]))
    return trajs, spec, rd.scene_for(spec)


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


def kfold_split(groups: Sequence[int], k: int, seed: int) -> list:
    """Partition trajectory indices into ``k`` folds without splitting a group.

    Groups are shuffled with ``seed`` and dealt into ``k`` nearly equal runs.
    """
    labels = sorted(set(int(g) for g in groups))
    if k < 2 or len(labels) < k:
        raise InsufficientGroups(f"{len(labels)} groups cannot fill {k} non-empty folds")
    order = np.random.default_rng(seed).permutation(len(labels))
    chunks = np.array_split(np.array(labels)[order], k)
    return [[i for i, g in enumerate(groups) if g in set(int(x) for x in chunk)] for chunk in chunks]


def cv_roles(k: int, i: int) -> tuple[int, int, list]:
    """``(test, eval, train folds)`` of CV iteration ``i``."""
    test, evl = i, (i + 1) % k
    return test, evl, [j for j in range(k) if j not in (test, evl)]


class AccessLog:
    """Records which trajectories each CV iteration hands out, and for what."""

    def __init__(self, trajs: Sequence):
        self._trajs = list(trajs)
        self.records: list = []  # (iteration, role, trajectory id)

    def take(self, iteration: int, role: str, indices: Sequence[int]) -> list:
        out = [self._trajs[i] for i in indices]
        self.records.extend((iteration, role, t.id) for t in out)
        return out

    def check_held_out(self) -> None:
        by_iter: dict = {}
        for it, role, tid in self.records:
            by_iter.setdefault(it, {}).setdefault(role, set()).add(tid)
        for it, roles in by_iter.items():
            leaked = roles.get("test", set()) & (roles.get("train", set()) | roles.get("eval", set()))
            if leaked:
                raise HeldOutViolation(f"iteration {it}: test trajectories {sorted(leaked)} used for optimization")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class DeviationReport:
    """Per-method, per-length statistics of the endpoint deviation.

    ``rows[method]`` is a list of ``(length, mean_m, std_m, mean_pct, std_pct, n)``;
    ``finals[method]`` holds the final-length deviation of every trajectory.
    """

    rows: dict = field(default_factory=dict)
    finals: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)
    fold_finals: dict = field(default_factory=dict)

    @classmethod
    def from_deviations(cls, deviations: dict, path_lengths: np.ndarray, **kw) -> "DeviationReport":
        rows, finals = {}, {}
        for method, dev in deviations.items():
            dev = np.asarray(dev, dtype=np.float64)
            pct = 100.0 * dev / path_lengths
            rows[method] = [
                (l + 1, float(dev[:, l].mean()), float(dev[:, l].std()), float(pct[:, l].mean()),
                 float(pct[:, l].std()), int(dev.shape[0]))
                for l in range(dev.shape[1])
            ]
            finals[method] = [float(v) for v in dev[:, -1]]
        return cls(rows, finals, **kw)

    @property
    def methods(self) -> list:
        return list(self.rows)

    def final_mean(self, method: str) -> float:
        return self.rows[method][-1][1]

    def ratio_to_clean(self, method: str) -> np.ndarray:
        clean = np.array([r[1] for r in self.rows["clean_I0"]])
        return np.array([r[1] for r in self.rows[method]]) / clean


def save_report_csv(report: DeviationReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "length", "mean", "std", "mean_pct", "std_pct", "n"])
        for method, rows in report.rows.items():
            for length, mean, std, mpct, spct, n in rows:
                w.writerow([method, length, repr(mean), repr(std), repr(mpct), repr(spct), n])
    return path


def load_report_csv(path) -> DeviationReport:
    rows: dict = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(r["method"], []).append(
                (int(r["length"]), float(r["mean"]), float(r["std"]), float(r["mean_pct"]), float(r["std_pct"]),
                 int(r["n"]))
            )
    return DeviationReport(rows)


def _plot(report: DeviationReport, path: Path, ratio: bool, xlabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "vopatch", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for method, rows in report.rows.items():
            x = np.array([r[0] for r in rows])
            if ratio:
                ax.plot(x, report.ratio_to_clean(method), label=method)
            else:
                mean = np.array([r[3] for r in rows])
                std = np.array([r[4] for r in rows])
                ax.plot(x, mean, label=method)
                ax.fill_between(x, mean - std, mean + std, alpha=0.15)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("ratio to clean I0" if ratio else "deviation (% of distance travelled)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)


def emit_report(report: DeviationReport, out_dir, xlabel: str = "trajectory length (frames)") -> list:
    """Write ``report.csv``, ``deviation.svg`` and ``ratio.svg`` under ``out_dir``."""
    if not report.rows:
        raise ReportError("report has no methods")
    if "clean_I0" not in report.rows:
        raise ReportError("report lacks the clean_I0 baseline")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = [save_report_csv(report, out / "report.csv")]
        for name, ratio in (("deviation.svg", False), ("ratio.svg", True)):
            _plot(report, out / name, ratio, xlabel)
            files.append(out / name)
        extra = {"tags": report.tags, "finals": report.finals, "fold_finals": report.fold_finals}
        (out / "summary.json").write_text(json.dumps(extra, indent=2, sort_keys=True))
        files.append(out / "summary.json")
    except OSError as exc:
        raise ReportError(f"cannot write report to {out}: {exc}") from None
    return files


def write_manifest(out_dir, cfg: ExperimentConfig, command: str, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_sha256": cfg.hash(),
        "seeds": {
            "dataset": cfg.data["dataset"]["seed"],
            "attack": cfg.data["attack"]["seed"],
            "baseline": cfg.data["baseline_seed"],
        },
        "version": __version__,
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _path_lengths(trajs) -> np.ndarray:
    return np.array([np.cumsum(t.gt_scales) for t in trajs])


def _method(kind: str, train, eval_) -> str:
    return f"{kind}_{CriterionKind(train).value}_{CriterionKind(eval_).value}"


def _by_train(combos) -> dict:
    out: dict = {}
    for train, eval_ in combos:
        out.setdefault(train, []).append(eval_)
    return out


def _parallel_map(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*items)))


def _pgd_job(vo, traj, cfg, evals):
    return at.pgd_attack(vo, traj, cfg, eval_criteria=evals)


def _baseline_patches(cfg: ExperimentConfig, dims, best_patch) -> dict:
    seed = int(cfg.data["baseline_seed"])
    out = {}
    for name in cfg.data["baselines"]:
        if name == "clean_I0":
            out[name] = np.zeros((3,) + tuple(dims))
        elif name == "clean_I1":
            out[name] = np.ones((3,) + tuple(dims))
        elif name == "random":
            out[name] = random_patch(dims, seed)
        elif name == "permuted_best" and best_patch is not None:
            out[name] = permute_patch(best_patch, seed)
    return out


def _best(finals: dict, prefix: str) -> Optional[str]:
    cands = [m for m in finals if m.startswith(prefix)]
    return max(cands, key=lambda m: (float(np.mean(finals[m])), m)) if cands else None


@dataclass
class RunOutput:
    report: DeviationReport
    patches: dict = field(default_factory=dict)  # name -> AttackResult
    extras: dict = field(default_factory=dict)


def run_in_sample(cfg: ExperimentConfig, out_dir=None, trajs=None) -> RunOutput:
    """Universal attacks on the whole dataset, PGD per trajectory, and baselines."""
    if trajs is None:
        trajs, spec, _ = load_or_generate_dataset(cfg)
    vo = cfg.make_vo(trajs_intrinsics(cfg, trajs))
    preps = at.prepare(trajs, vo, cfg.data["attack"]["patch_dims"])
    deviations, results = {}, {}
    for train, evals in _by_train(cfg.combinations()).items():
        log.info("universal attack, train=%s", train.value)
        res = at.universal_attack(vo, preps, preps, cfg.attack_config(train, evals[0]), eval_criteria=evals)
        for eval_, r in res.items():
            name = _method("universal", train, eval_)
            results[name] = r
            deviations[name] = at.prefix_deviations(vo, preps, r.best_patch)
    if cfg.data["pgd"]:
        for train, evals in _by_train(cfg.combinations()).items():
            log.info("PGD attacks, train=%s", train.value)
            acfg = cfg.attack_config(train, evals[0])
            per_traj = _parallel_map(_pgd_job, [(vo, t, acfg, evals) for t in trajs], int(cfg.data["jobs"]))
            for eval_ in evals:
                name = _method("pgd", train, eval_)
                deviations[name] = np.vstack(
                    [at.prefix_deviations(vo, [p], r[eval_].best_patch) for p, r in zip(preps, per_traj)]
                )
                for t, r in zip(trajs, per_traj):
                    results[f"{name}/{t.id}"] = r[eval_]
    finals = {m: d[:, -1] for m, d in deviations.items()}
    best_u = _best(finals, "universal")
    best_patch = results[best_u].best_patch if best_u else None
    for name, patch in _baseline_patches(cfg, cfg.data["attack"]["patch_dims"], best_patch).items():
        deviations[name] = at.prefix_deviations(vo, preps, patch)
    tags = {"best_universal": best_u, "best_pgd": _best(finals, "pgd")}
    report = DeviationReport.from_deviations(_ordered(deviations), _path_lengths(trajs), tags=tags)
    out = RunOutput(report, results)
    if out_dir is not None:
        _write_run(out, out_dir, cfg, "in_sample")
    return out


def trajs_intrinsics(cfg: ExperimentConfig, trajs):
    h, w = trajs[0].frames[0].I0.shape[1:]
    spec = cfg.dataset_spec() if not cfg.data["dataset"]["path"] else rd.load_dataset_spec(cfg.data["dataset"]["path"])
    intr = spec.intrinsics
    if (intr.width, intr.height) != (w, h):
        raise ConfigError(f"dataset frames are {w}x{h}, spec says {intr.width}x{intr.height}")
    return intr


def _ordered(deviations: dict) -> dict:
    """Baselines first (clean_I0 leading), then attacks in insertion order."""
    keys = [b for b in BASELINES if b in deviations] + [k for k in deviations if k not in BASELINES]
    return {k: deviations[k] for k in keys}


def _cv_fold_job(vo, train, evl, test, cfg: ExperimentConfig):
    """One CV iteration: returns ``{method: (n_test, L) deviations}`` and the patches."""
    dims = cfg.data["attack"]["patch_dims"]
    train_p, eval_p, test_p = (at.prepare(s, vo, dims) for s in (train, evl, test))
    deviations, results = {}, {}
    for trn, evals in _by_train(cfg.combinations()).items():
        res = at.universal_attack(vo, train_p, eval_p, cfg.attack_config(trn, evals[0]), eval_criteria=evals)
        for eval_, r in res.items():
            name = _method("universal", trn, eval_)
            results[name] = r
            deviations[name] = at.prefix_deviations(vo, test_p, r.best_patch)
    # the fold's best patch is chosen on the evaluation fold, never on test data
    sel = {m: results[m].best_eval_loss for m in results}
    best = max(sel, key=lambda m: (sel[m], m)) if sel else None
    for name, patch in _baseline_patches(cfg, dims, results[best].best_patch if best else None).items():
        deviations[name] = at.prefix_deviations(vo, test_p, patch)
    return deviations, results


def run_out_of_sample(cfg: ExperimentConfig, out_dir=None, trajs=None) -> RunOutput:
    """k-fold CV over initial-position groups; deviations are measured on test folds."""
    if trajs is None:
        trajs, _, _ = load_or_generate_dataset(cfg)
    vo = cfg.make_vo(trajs_intrinsics(cfg, trajs))
    k = int(cfg.data["folds"])
    folds = kfold_split([t.group for t in trajs], k, int(cfg.data["dataset"]["seed"]))
    access = AccessLog(trajs)
    jobs = []
    for i in range(k):
        test, evl, train = cv_roles(k, i)
        jobs.append((
            vo,
            access.take(i, "train", [j for f in train for j in folds[f]]),
            access.take(i, "eval", folds[evl]),
            access.take(i, "test", folds[test]),
            cfg,
        ))
    access.check_held_out()
    outs = _parallel_map(_cv_fold_job, jobs, int(cfg.data["jobs"]))
    deviations: dict = {}
    fold_finals: dict = {}
    results = {}
    for i, (dev, res) in enumerate(outs):
        for m, d in dev.items():
            deviations.setdefault(m, []).append(d)
            fold_finals.setdefault(m, []).append(float(d[:, -1].mean()))
        for m, r in res.items():
            results[f"fold{i:02d}/{m}"] = r
    test_order = [j for i in range(k) for j in folds[cv_roles(k, i)[0]]]
    deviations = {m: np.vstack(v) for m, v in deviations.items()}
    finals = {m: d[:, -1] for m, d in deviations.items()}
    report = DeviationReport.from_deviations(
        _ordered(deviations), _path_lengths([trajs[j] for j in test_order]),
        tags={"best_universal": _best(finals, "universal")}, fold_finals=fold_finals,
    )
    out = RunOutput(report, results, {"folds": [[trajs[j].id for j in f] for f in folds], "access": access.records})
    if out_dir is not None:
        _write_run(out, out_dir, cfg, "out_of_sample")
    return out


def closed_loop_patches(cfg: ExperimentConfig) -> dict:
    """Patches named in ``cfg.patches`` (name -> saved-result directory/name)."""
    out = {}
    for name, ref in sorted(cfg.data["patches"].items()):
        p = Path(ref)
        out[name] = at.AttackResult.load(p.parent, p.name).best_patch
    return out


def run_closed_loop(cfg: ExperimentConfig, patches: Optional[dict] = None, out_dir=None, vo=None) -> RunOutput:
    """Closed-loop runs from the start ring for clean_I0 and every patch."""
    patches = closed_loop_patches(cfg) if patches is None else patches
    spec = cfg.dataset_spec()
    scene = rd.scene_for(spec)
    intr = spec.intrinsics
    vo = cfg.make_vo(intr) if vo is None else vo
    ncfg = cfg.nav_config()
    n = cfg.data["navigation"]
    starts = nav.closed_loop_starts(scene, int(n["n_runs"]), n["start_distance"], n["start_half_angle_deg"],
                                    n["approach"])
    methods = {"clean_I0": None}
    for name, patch in patches.items():
        if name != "clean_I0":
            methods[name] = patch
    runs = {m: [nav.closed_loop_run(scene, p, pose, tgt, vo, ncfg, intr) for pose, tgt in starts] for m, p in
            methods.items()}
    steps = min(len(r.deviations) for rs in runs.values() for r in rs) - 1
    deviations = {m: np.array([r.deviations[1 : steps + 1] for r in rs]) for m, rs in runs.items()}
    dist = np.array([r.distance_travelled[1 : steps + 1] for r in runs["clean_I0"]])
    report = DeviationReport.from_deviations(deviations, dist)
    out = RunOutput(report, {}, {"runs": runs})
    if out_dir is not None:
        d = Path(out_dir)
        for m, rs in runs.items():
            for i, r in enumerate(rs):
                r.save_csv(d / "closed_loop" / f"{m}_run{i:02d}.csv")
        emit_report(report, d / "report", xlabel="closed-loop step")
        write_manifest(d, cfg, "closed_loop")
    return out


def _write_run(out: RunOutput, out_dir, cfg: ExperimentConfig, command: str) -> None:
    d = Path(out_dir)
    for name, r in sorted(out.patches.items()):
        sub, _, leaf = name.rpartition("/")
        r.save(d / "patches" / sub if sub else d / "patches", leaf)
    emit_report(out.report, d / "report")
    extra = {k: v for k, v in out.extras.items() if k == "folds"}
    write_manifest(d, cfg, command, extra)


def run(cfg: ExperimentConfig, out_dir=None) -> RunOutput:
    setting = cfg.data["setting"]
    if setting == "in_sample":
        return run_in_sample(cfg, out_dir)
    if setting == "out_of_sample":
        return run_out_of_sample(cfg, out_dir)
    return run_closed_loop(cfg, out_dir=out_dir)


def tree_digest(root) -> str:
    """SHA-256 over the relative paths and contents of every file under ``root``."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------


def pipeline_gradient_check(
    seed: int = 0, n_coords: int = 20, criterion=CriterionKind.RMS, n_frames: int = 4, h: float = 1e-5
) -> dict:
    """Autodiff vs central differences for criterion(VO(insert(P))) on a 16x16 patch and 32x24 frames."""
    from . import autodiff as ad

    spec = rd.DatasetSpec(width=32, height=24, patch_px=(16, 16), n_groups=1, per_group=1, n_frames=n_frames)
    traj = rd.generate_dataset(rd.scene_for(spec), spec, seed)[0]
    vo = DirectAlignmentVO(intrinsics=spec.intrinsics)
    prep = at.prepare([traj], vo, (16, 16))[0]
    kind = CriterionKind(criterion)
    rng = np.random.default_rng(seed)
    P = rng.uniform(0.05, 0.95, size=(3, 16, 16))

    def loss(x):
        return at._losses(vo, prep, x, [kind])[kind]

    value, (g,) = ad.grad(loss, P)
    coords = rng.choice(P.size, size=n_coords, replace=False)
    fd = ad.finite_difference(lambda x: float(loss(ad.Tensor(x)).data), P, coords, h)
    return {
        "loss": value,
        "coords": coords.tolist(),
        "autodiff": g.reshape(-1)[coords].tolist(),
        "finite_difference": fd.tolist(),
        "relative_error": ad.relative_error(g.reshape(-1)[coords], fd),
    }


def gradient_check(seed: int = 0) -> dict:
    from . import autodiff as ad

    ops = ad.check_ops(seed)
    pipe = pipeline_gradient_check(seed)
    return {"ops": ops, "ops_max": max(ops.values()), "pipeline": pipe, "pipeline_error": pipe["relative_error"]}
