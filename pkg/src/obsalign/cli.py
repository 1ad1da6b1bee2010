"""Experiment runner: config ingestion, seeded benchmark execution, and
report/trace/histogram emission.

Every artifact is reproducible from (config, seed) alone. Report files are
tab-delimited key/value pairs with JSON-encoded values so they parse back
without loss.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .align import AlignConfig, AlignReport, run_ada, run_ea
from .critics import save_critic
from .densities import DiscreteDist, GaussianMixture, grid_discretize, preset_mixtures
from .diffcore import NumericalError
from .flowgen import FlowGenerator
from .metrics import MetricBlock, cluster_kl, energy_metric, jsd_2d, w1_empirical, w2_empirical
from .observables import (
    ImageSpec,
    Observable,
    coordinate_observable,
    group_com_observable,
    image_observable,
    mean_distance_observable,
    pair_distance_observable,
    project_pair_observable,
    rg_observable,
)
from .oracle import analytic_tilt, grid_align, w1_discrete_1d

REPORT_FORMAT_VERSION = 1
TRACE_FORMAT_VERSION = 1
HIST_FORMAT_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class ConfigError(ValueError):
    """The experiment configuration violates the schema."""


# -- configuration ----------------------------------------------------

_TOP_KEYS = {"seed", "mixture", "observables", "align", "metrics", "oracle", "eval"}
_MIXTURE_KEYS = {"preset", "base", "target"}
_GMM_KEYS = {"means", "variances", "weights"}
_ALIGN_KEYS = {
    "beta", "total_steps", "critic_steps", "batch_size", "lr_gen", "lr_critic",
    "lam_gp", "kl_samples", "flow_blocks", "flow_hidden", "critic_hidden",
    "one_sided_penalty", "moment_order", "reference_samples",
}
_METRIC_KEYS = {"eval_samples", "fes_bins", "hist_bins", "energy_order"}
_ORACLE_KEYS = {"grid_points", "grid_lo", "grid_hi", "betas", "iterations", "base", "target"}
_EVAL_KEYS = {"checkpoint"}
_OBS_KEYS = {
    "project_pair": {"kind", "axes", "name"},
    "coordinate": {"kind", "axis", "name"},
    "rg": {"kind", "masses", "name"},
    "mean_distance": {"kind", "n_atoms", "name"},
    "pair_distance": {"kind", "n_atoms", "i", "j", "name"},
    "group_com": {"kind", "masses", "group_a", "group_b", "name"},
    "splat_image": {"kind", "n_atoms", "side", "kernel_sigma_px", "pixel_size",
                    "snr", "noise_seed", "name"},
}


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in {where}; allowed: {sorted(allowed)}")


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    _reject_unknown(cfg, _TOP_KEYS, "config")
    mix = cfg.get("mixture", {})
    _reject_unknown(mix, _MIXTURE_KEYS, "mixture")
    if "preset" in mix and ("base" in mix or "target" in mix):
        raise ConfigError("mixture: give either a preset or inline definitions, not both")
    for side in ("base", "target"):
        if side in mix:
            _reject_unknown(mix[side], _GMM_KEYS, f"mixture.{side}")
    for i, spec in enumerate(cfg.get("observables", [])):
        kind = spec.get("kind")
        if kind not in _OBS_KEYS:
            raise ConfigError(f"observables[{i}]: unknown kind {kind!r}; "
                              f"allowed: {sorted(_OBS_KEYS)}")
        _reject_unknown(spec, _OBS_KEYS[kind], f"observables[{i}] ({kind})")
    _reject_unknown(cfg.get("align", {}), _ALIGN_KEYS, "align")
    _reject_unknown(cfg.get("metrics", {}), _METRIC_KEYS, "metrics")
    _reject_unknown(cfg.get("oracle", {}), _ORACLE_KEYS, "oracle")
    _reject_unknown(cfg.get("eval", {}), _EVAL_KEYS, "eval")
    if not isinstance(cfg.get("seed", 0), int):
        raise ConfigError("seed must be an integer")


def default_config(preset: str = "synthetic-cube-v1") -> dict:
    """The bundled benchmark configuration (hyperparameters per the synthetic preset)."""
    if preset != "synthetic-cube-v1":
        raise ConfigError(f"unknown preset {preset!r}")
    return {
        "seed": 0,
        "mixture": {"preset": preset},
        "observables": [
            {"kind": "project_pair", "axes": [0, 1]},
            {"kind": "project_pair", "axes": [0, 2]},
            {"kind": "project_pair", "axes": [1, 2]},
        ],
        "align": {
            "beta": 128.0,
            "total_steps": 10000,
            "critic_steps": 1,
            "batch_size": 1024,
            "lr_gen": 1e-4,
            "lr_critic": 1e-3,
            "lam_gp": 1000.0,
            "flow_blocks": 6,
            "flow_hidden": [64, 64],
            "critic_hidden": [128, 128],
            "reference_samples": 65536,
        },
        "metrics": {"eval_samples": 2000, "fes_bins": 50, "hist_bins": 60,
                    "energy_order": "w1"},
        "oracle": {"grid_points": 64, "grid_lo": -4.0, "grid_hi": 4.0,
                   "betas": [1.0, 10.0, 100.0, 1000.0], "iterations": 60000},
    }


def _build_gmm(spec: dict) -> GaussianMixture:
    try:
        return GaussianMixture(spec["means"], spec["variances"], spec["weights"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid mixture definition: {exc}") from exc


def build_mixtures(cfg: dict) -> tuple[GaussianMixture, GaussianMixture]:
    mix = cfg.get("mixture", {})
    if "preset" in mix:
        return preset_mixtures(mix["preset"])
    if "base" not in mix or "target" not in mix:
        raise ConfigError("mixture: need a preset name or inline base and target")
    return _build_gmm(mix["base"]), _build_gmm(mix["target"])


def build_observables(cfg: dict, state_dim: int, seed: int) -> dict[str, Observable]:
    out: dict[str, Observable] = {}
    for i, spec in enumerate(cfg.get("observables", [])):
        kind = spec["kind"]
        try:
            if kind == "project_pair":
                obs = project_pair_observable(*spec["axes"])
            elif kind == "coordinate":
                obs = coordinate_observable(spec["axis"], state_dim)
            elif kind == "rg":
                obs = rg_observable(spec["masses"])
            elif kind == "mean_distance":
                obs = mean_distance_observable(spec["n_atoms"])
            elif kind == "pair_distance":
                obs = pair_distance_observable(spec["n_atoms"], spec["i"], spec["j"])
            elif kind == "group_com":
                obs = group_com_observable(spec["masses"], spec["group_a"], spec["group_b"])
            else:
                ispec = ImageSpec(side=spec.get("side", 16),
                                  kernel_sigma_px=spec.get("kernel_sigma_px", 2.5),
                                  pixel_size=spec.get("pixel_size", 1.0),
                                  snr=spec.get("snr", 1.0),
                                  seed=spec.get("noise_seed", seed + 7919))
                obs = image_observable(spec["n_atoms"], ispec)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"observables[{i}]: {exc}") from exc
        if obs.in_dim != state_dim:
            raise ConfigError(f"observables[{i}]: state width {obs.in_dim} != mixture "
                              f"dimension {state_dim}")
        name = spec.get("name", obs.name)
        if name in out:
            raise ConfigError(f"duplicate observable name {name!r}")
        obs.name = name
        out[name] = obs
    if not out:
        raise ConfigError("at least one observable is required")
    return out


def build_refsets(observables: dict, target: GaussianMixture, n: int,
                  rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Independent per-observable reference sets (marginal access only)."""
    return {name: obs(target.sample(n, rng)) for name, obs in observables.items()}


def _align_config(cfg: dict) -> AlignConfig:
    section = dict(cfg.get("align", {}))
    section.pop("reference_samples", None)
    for key in ("flow_hidden", "critic_hidden"):
        if key in section:
            section[key] = tuple(section[key])
    try:
        return AlignConfig(seed=cfg.get("seed", 0), **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"align section: {exc}") from exc


# -- metrics and reporting --------------------------------------------


def compute_benchmark_metrics(gen: FlowGenerator, target: GaussianMixture,
                              observables: dict, mcfg: dict,
                              rng: np.random.Generator) -> tuple[MetricBlock, dict]:
    """Metric block plus the raw observable sample arrays used for histograms."""
    n = int(mcfg.get("eval_samples", 2000))
    fes_bins = int(mcfg.get("fes_bins", 50))
    model = gen.sample(n, rng)
    ref = target.sample(n, rng)
    block = MetricBlock(eval_samples=n, fes_bins=fes_bins)
    block.energy_w1 = energy_metric(target, model, ref, "w1")
    block.energy_w2 = energy_metric(target, model, ref, "w2")
    if target.d == gen.d:
        block.cluster_kl = cluster_kl(target, model)
    samples = {}
    for name, obs in observables.items():
        um, ur = obs(model), obs(ref)
        samples[name] = (um, ur)
        for j in range(um.shape[1]):
            key = name if um.shape[1] == 1 else f"{name}.d{j}"
            block.per_observable_w1[key] = w1_empirical(um[:, j], ur[:, j])
        if um.shape[1] == 2:
            block.fes_jsd[name] = jsd_2d(um, ur, bins=fes_bins)
    return block, samples


def _flatten(prefix: str, value, out: dict) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    else:
        out[prefix] = value


def emit_report(report: AlignReport, outdir, hist_samples: dict | None = None,
                hist_bins: int = 60) -> dict[str, Path]:
    """Write the key/value report, the per-step trace table, and histogram dumps."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {}

    fields: dict = {"format_version": REPORT_FORMAT_VERSION, "method": report.method,
                    "seed": report.seed, "wall_clock": report.wall_clock,
                    "observables": list(report.observable_names),
                    "trace_rows": int(len(report.kl_trace))}
    _flatten("config", report.config, fields)
    _flatten("metric", report.metrics, fields)
    if len(report.kl_trace):
        fields["final.kl"] = float(report.kl_trace[-1])
        fields["final.lagrangian"] = float(report.lagrangian_trace[-1])
        for name, trace in report.gap_traces.items():
            fields[f"final.gap.{name}"] = float(trace[-1])
    report_path = outdir / "report.txt"
    with report_path.open("w") as fh:
        for key, value in fields.items():
            fh.write(f"{key}\t{json.dumps(value)}\n")
    paths["report"] = report_path

    trace_path = outdir / "trace.tsv"
    names = list(report.gap_traces)
    with trace_path.open("w") as fh:
        fh.write(f"# format_version\t{TRACE_FORMAT_VERSION}\n")
        fh.write("step\tkl\t" + "\t".join(f"gap_{n}" for n in names) + "\tlagrangian\n")
        for i in range(len(report.kl_trace)):
            gaps = "\t".join(f"{report.gap_traces[n][i]:.10g}" for n in names)
            fh.write(f"{i}\t{report.kl_trace[i]:.10g}\t{gaps}\t"
                     f"{report.lagrangian_trace[i]:.10g}\n")
    paths["trace"] = trace_path

    for name, (model_obs, ref_obs) in (hist_samples or {}).items():
        hist_path = outdir / f"hist_{name}.tsv"
        with hist_path.open("w") as fh:
            fh.write(f"# format_version\t{HIST_FORMAT_VERSION}\n")
            fh.write("dim\tbin_lo\tbin_hi\tmodel\treference\n")
            for j in range(model_obs.shape[1]):
                lo = min(model_obs[:, j].min(), ref_obs[:, j].min())
                hi = max(model_obs[:, j].max(), ref_obs[:, j].max())
                if hi <= lo:
                    hi = lo + 1e-9
                edges = np.linspace(lo, hi, hist_bins + 1)
                cm, _ = np.histogram(model_obs[:, j], bins=edges)
                cr, _ = np.histogram(ref_obs[:, j], bins=edges)
                for k in range(hist_bins):
                    fh.write(f"{j}\t{edges[k]:.10g}\t{edges[k + 1]:.10g}\t"
                             f"{cm[k]}\t{cr[k]}\n")
        paths[f"hist_{name}"] = hist_path
    return paths


def parse_report(path) -> dict:
    """Read a report file back into a dict (values JSON-decoded)."""
    out = {}
    with Path(path).open() as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, raw = line.partition("\t")
            out[key] = json.loads(raw)
    return out


# -- subcommands ------------------------------------------------------


def _run_alignment(cfg: dict, outdir: Path, method: str) -> dict:
    base, target = build_mixtures(cfg)
    seed = cfg.get("seed", 0)
    observables = build_observables(cfg, base.d, seed)
    acfg = _align_config(cfg)
    n_ref = int(cfg.get("align", {}).get("reference_samples", 65536))
    data_rng = np.random.default_rng(seed + 1)
    refsets = build_refsets(observables, target, n_ref, data_rng)

    gen0 = FlowGenerator.init_identity(base, acfg.flow_blocks, acfg.flow_hidden,
                                       np.random.default_rng(seed))
    gen0.save(outdir / "gen_init.npz")
    if method == "ada":
        gen, critics, report = run_ada(base, observables, refsets, acfg)
        for name, critic in critics.items():
            save_critic(critic, outdir / f"critic_{name}.npz")
    else:
        gen, report = run_ea(base, observables, refsets, acfg)
    gen.save(outdir / "gen_final.npz")

    metric_rng = np.random.default_rng(seed + 2)
    block, samples = compute_benchmark_metrics(gen, target, observables,
                                               cfg.get("metrics", {}), metric_rng)
    report.metrics = block.to_dict()
    hist_bins = int(cfg.get("metrics", {}).get("hist_bins", 60))
    emit_report(report, outdir, samples, hist_bins)
    return {"metrics": report.metrics, "outdir": str(outdir)}


def _default_oracle_problem(ocfg: dict):
    """A 1-D two-observable grid instance: identity and absolute-value maps."""
    lo = float(ocfg.get("grid_lo", -4.0))
    hi = float(ocfg.get("grid_hi", 4.0))
    n = int(ocfg.get("grid_points", 64))
    base_def = ocfg.get("base", {"means": [[-1.0], [1.0]], "variances": [0.6, 0.6],
                                 "weights": [0.5, 0.5]})
    target_def = ocfg.get("target", {"means": [[-1.2], [0.8]], "variances": [0.35, 0.9],
                                     "weights": [0.7, 0.3]})
    base = grid_discretize(_build_gmm(base_def), [lo], [hi], [n])
    target = grid_discretize(_build_gmm(target_def), [lo], [hi], [n])
    points = np.asarray(base.points)
    obs_values = [points.copy(), np.abs(points)]
    targets = []
    for vals_t in (np.asarray(target.points), np.abs(np.asarray(target.points))):
        uv, inv = np.unique(vals_t, return_inverse=True)
        targets.append(DiscreteDist(uv, np.bincount(inv, weights=target.masses)))
    return base, target, obs_values, targets


def _run_oracle(cfg: dict, outdir: Path) -> dict:
    ocfg = cfg.get("oracle", {})
    betas = [float(b) for b in ocfg.get("betas", [1.0, 10.0, 100.0, 1000.0])]
    iters = int(ocfg.get("iterations", 60000))
    base, target, obs_values, targets = _default_oracle_problem(ocfg)
    kl_ref = float(np.sum(target.masses * (np.log(target.masses) - np.log(base.masses))))

    rows = []
    for beta in betas:
        res = grid_align(base, obs_values, targets, beta, n_iters=iters)
        rows.append((beta, sum(res.gaps), kl_ref / beta, res.converged))

    # single-observable cross-check against the analytic tilt on the same grid
    res1 = grid_align(base, obs_values[:1], targets[:1], max(betas), n_iters=iters)
    from .oracle import tilt_weights  # local import keeps module deps one-way

    w = tilt_weights(base.masses, target.masses)
    tilt_mass = base.masses * w
    tilt_mass = tilt_mass / tilt_mass.sum()
    tv = 0.5 * float(np.abs(res1.dist.masses - tilt_mass).sum())

    outdir.mkdir(parents=True, exist_ok=True)
    table = outdir / "oracle_sweep.tsv"
    with table.open("w") as fh:
        fh.write(f"# format_version\t{TRACE_FORMAT_VERSION}\n")
        fh.write(f"# kl_target_base\t{kl_ref:.10g}\n")
        fh.write(f"# tilt_tv_at_beta_{max(betas):g}\t{tv:.10g}\n")
        fh.write("beta\tw1_gap_sum\tbound_kl_over_beta\tconverged\n")
        for beta, gap, bound, conv in rows:
            fh.write(f"{beta:g}\t{gap:.10g}\t{bound:.10g}\t{int(conv)}\n")
    return {"rows": rows, "tilt_tv": tv, "kl": kl_ref, "table": str(table)}


def _run_eval(cfg: dict, outdir: Path) -> dict:
    ckpt = cfg.get("eval", {}).get("checkpoint")
    if not ckpt:
        raise ConfigError("eval: a checkpoint path is required")
    gen = FlowGenerator.load(ckpt)
    _, target = build_mixtures(cfg)
    seed = cfg.get("seed", 0)
    observables = build_observables(cfg, gen.d, seed)
    block, samples = compute_benchmark_metrics(gen, target, observables,
                                               cfg.get("metrics", {}),
                                               np.random.default_rng(seed + 2))
    report = AlignReport(method="eval", config=cfg, seed=seed,
                         observable_names=list(observables),
                         kl_trace=np.zeros(0), gap_traces={},
                         lagrangian_trace=np.zeros(0), metrics=block.to_dict())
    emit_report(report, outdir, samples, int(cfg.get("metrics", {}).get("hist_bins", 60)))
    return {"metrics": report.metrics, "outdir": str(outdir)}


# -- selftest ---------------------------------------------------------


def _selftest_checks():
    from . import selfchecks

    return selfchecks.all_checks()


def run_selftest() -> int:
    failures = 0
    for name, fn in _selftest_checks():
        t0 = time.perf_counter()
        try:
            fn()
            print(f"ok   {name} ({time.perf_counter() - t0:.2f}s)")
        except Exception as exc:  # noqa: BLE001 - report and count every failure
            failures += 1
            print(f"FAIL {name}: {exc}")
    print(f"selftest: {failures} failure(s)")
    return failures


# -- entry point ------------------------------------------------------


def _load_config(args) -> dict:
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    else:
        cfg = default_config(args.preset or "synthetic-cube-v1")
    if args.seed is not None:
        cfg["seed"] = args.seed
    validate_config(cfg)
    return cfg


def run_experiment(cfg: dict, subcommand: str, outdir) -> dict:
    """Library entry point mirroring the command line."""
    validate_config(cfg)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with (outdir / "config.json").open("w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    if subcommand == "align-ada":
        return _run_alignment(cfg, outdir, "ada")
    if subcommand == "align-ea":
        return _run_alignment(cfg, outdir, "ea")
    if subcommand == "oracle":
        return _run_oracle(cfg, outdir)
    if subcommand == "eval":
        return _run_eval(cfg, outdir)
    raise ConfigError(f"unknown subcommand {subcommand!r}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="obsalign",
                                     description="observable-distribution alignment runner")
    parser.add_argument("--version", action="version", version=f"obsalign {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in ("align-ada", "align-ea", "oracle", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--preset", choices=["synthetic-cube-v1"],
                       help="use the bundled benchmark config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
    sub.add_parser("selftest")
    args = parser.parse_args(argv)

    if args.subcommand == "selftest":
        return EXIT_OK if run_selftest() == 0 else 1
    try:
        cfg = _load_config(args)
        summary = run_experiment(cfg, args.subcommand, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    for key, value in sorted(summary.get("metrics", {}).items()):
        print(f"{key}\t{value}")
    if "rows" in summary:
        for beta, gap, bound, conv in summary["rows"]:
            print(f"beta={beta:g}\tw1_sum={gap:.6g}\tbound={bound:.6g}\tconverged={conv}")
        print(f"tilt_tv={summary['tilt_tv']:.6g}")
    print(f"artifacts in {summary.get('outdir', args.out)}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
