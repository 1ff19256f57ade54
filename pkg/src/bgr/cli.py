"""Command-line entry point: verification, flop models, timing sweeps, training.

Configuration comes from (lowest to highest precedence) built-in defaults, an
INI file given with --config, repeated --set section.key=value overrides, and
explicit command-line flags. Unknown sections or keys are hard errors.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 all training runs diverged.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, graph, reasoning, tensor, trainer
from .autodiff import finite_diff_check
from .reasoning import BgrConfig, LayerParams, QFactors
from .trainer import DivergenceError, TrainConfig


class ConfigError(Exception):
    pass


DEFAULTS: dict[str, dict] = {
    "check": {"cases": 50, "seed": 0, "inject_fault": ""},
    "flops": {"n": 4225, "c": 128, "layers": 2},
    "bench": {
        "ns": "256,512,1024,2048,4096",
        "c": 16,
        "layers": 2,
        "repeats": 5,
        "seed": 0,
        "path": "both",
    },
    "train": {
        "mode": "bgr",
        "seeds": 1,
        "seed": 0,
        "h": 48,
        "w": 48,
        "num_classes": 3,
        "n_train": 200,
        "n_val": 50,
        "iters": 2000,
        "lr0": 0.01,
        "poly_power": 0.9,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "batch": 8,
        "boundary_radius": 1,
        "noise_sigma": 0.1,
        "eval_interval": 500,
        "hidden_dim": 16,
        "num_layers": 2,
        "degree_epsilon": 1e-6,
    },
}


def _coerce(section: str, key: str, raw: str):
    if section not in DEFAULTS:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc


def load_settings(config_path, set_overrides) -> dict[str, dict]:
    settings = {section: dict(values) for section, values in DEFAULTS.items()}
    if config_path:
        parser = configparser.ConfigParser()
        read = parser.read(config_path)
        if not read:
            raise ConfigError(f"config file not found: {config_path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                settings.setdefault(section, {})
                settings[section][key] = _coerce(section, key, raw)
    for item in set_overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        settings[section][key] = _coerce(section, key, raw)
    return settings


def _merge_flags(settings: dict, section: str, args: argparse.Namespace, names) -> dict:
    out = dict(settings[section])
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


# ----------------------------------------------------------------------
# check
# ----------------------------------------------------------------------


def _check_instance(case_seed: int, inject_fault: str):
    """One equivalence/degree/symmetry instance; returns per-suite errors."""
    rng = np.random.Generator(np.random.Philox(case_seed))
    n = int(rng.integers(4, 257))
    c = int(rng.integers(1, 17))
    c_out = int(rng.integers(1, 17))
    feats = rng.uniform(0.0, 1.0, size=(n, c))
    scores = rng.uniform(0.0, 1.0, size=n)
    theta = LayerParams(rng.uniform(-1.0, 1.0, size=(c, c_out)))

    adj_bw = graph.boundary_reweight_dense(graph.similarity(feats), scores)
    deg_dense = graph.degree_dense(adj_bw)
    naive = reasoning.layer_naive(feats, adj_bw, deg_dense, theta, activate=True)

    g = graph.build_graph(feats, scores)
    d_inv_sqrt = reasoning.normalize_degrees(g.degrees, 1e-6)
    q = reasoning.build_q_factors(g.feats, g.boosted, d_inv_sqrt)
    if inject_fault == "q22":
        q = QFactors(q11=q.q11, q12=q.q12, q21=q.q21, q22=q.q22 + 1e-3)
    efficient = reasoning.layer_efficient(feats, q, theta, activate=True)

    eq_err = float(np.abs(naive - efficient).max())
    deg_err = float(np.abs(deg_dense - g.degrees).max())
    sym_err = float(np.abs(adj_bw - adj_bw.T).max())
    return eq_err, deg_err, sym_err


def _cancellation_error(case_seed: int) -> float:
    rng = np.random.Generator(np.random.Philox(case_seed))
    n = int(rng.integers(4, 129))
    c = int(rng.integers(1, 9))
    feats = rng.uniform(0.0, 1.0, size=(n, c))
    beta = float(rng.uniform(0.0, 1.0))

    def prop(scores):
        adj_bw = graph.boundary_reweight_dense(graph.similarity(feats), scores)
        d_inv = reasoning.normalize_degrees(graph.degree_dense(adj_bw), 1e-6)
        p = tensor.row_scale(adj_bw, d_inv)
        return tensor.row_scale(p.T, d_inv).T

    base = prop(np.zeros(n))
    shifted = prop(np.full(n, beta))
    return float(np.abs(base - shifted).max())


def _gradcheck_error(case_seed: int) -> float:
    cfg = TrainConfig(
        seed=case_seed,
        h=3,
        w=4,
        n_train=2,
        n_val=1,
        iters=1,
        bgr=BgrConfig(hidden_dim=4),
    )
    sample = trainer.generate_dataset(cfg)[0]
    state = trainer.init_state(cfg)
    f = trainer.make_loss_fn(sample, cfg, "bgr", state.bn_mean, state.bn_var)
    return finite_diff_check(f, state.params, h=1e-5, max_coords_per_param=6,
                             seed=case_seed)


def run_check(seed: int, cases: int, inject_fault: str = "") -> dict:
    """Equivalence, degree, symmetry, cancellation and gradient suites."""
    suites = []

    def add(name, n_cases, max_error, tol, failing_seed):
        ok = max_error < tol if tol > 0 else max_error == 0.0
        suites.append(
            {
                "suite": name,
                "cases": n_cases,
                "max_error": max_error,
                "tolerance": tol,
                "pass": ok,
                "failing_seed": failing_seed if not ok else None,
            }
        )

    eq = deg = sym = 0.0
    eq_seed = deg_seed = sym_seed = None
    for case in range(cases):
        case_seed = seed * 100003 + case
        e, d, s = _check_instance(case_seed, inject_fault)
        if e > eq:
            eq, eq_seed = e, case_seed
        if d > deg:
            deg, deg_seed = d, case_seed
        if s > sym:
            sym, sym_seed = s, case_seed
    add("equivalence", cases, eq, 1e-9, eq_seed)
    add("degree", cases, deg, 1e-9, deg_seed)
    add("symmetry", cases, sym, 0.0, sym_seed)

    canc = 0.0
    canc_seed = None
    n_canc = max(1, cases // 2)
    for case in range(n_canc):
        case_seed = seed * 100003 + 7 * case + 1
        err = _cancellation_error(case_seed)
        if err > canc:
            canc, canc_seed = err, case_seed
    add("cancellation", n_canc, canc, 1e-10, canc_seed)

    grad = 0.0
    grad_seed = None
    for case in range(2):
        case_seed = seed + case
        err = _gradcheck_error(case_seed)
        if err > grad:
            grad, grad_seed = err, case_seed
    add("gradcheck", 2, grad, 1e-4, grad_seed)

    return {"seed": seed, "pass": all(s["pass"] for s in suites), "suites": suites}


def cmd_check(args, settings) -> int:
    opts = _merge_flags(settings, "check", args, ("cases", "seed", "inject_fault"))
    report = run_check(opts["seed"], opts["cases"], opts["inject_fault"])
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "check_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for suite in report["suites"]:
        status = "pass" if suite["pass"] else "FAIL"
        line = (
            f"{status}  {suite['suite']}: cases={suite['cases']} "
            f"max_error={suite['max_error']:.3e} tol={suite['tolerance']:.1e}"
        )
        if not suite["pass"]:
            line += f" failing_seed={suite['failing_seed']}"
        print(line)
    return 0 if report["pass"] else 1


# ----------------------------------------------------------------------
# flops / bench
# ----------------------------------------------------------------------


def cmd_flops(args, settings) -> int:
    opts = _merge_flags(settings, "flops", args, ("n", "c", "layers"))
    n, c, layers = opts["n"], opts["c"], opts["layers"]
    naive = bench.flops_naive(n, c, layers)
    efficient = bench.flops_efficient(n, c, layers)
    ratio = naive / efficient
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "flops.csv", "w", encoding="utf-8") as handle:
        handle.write("N,c,layers,flops_naive,flops_efficient,ratio\n")
        handle.write(f"{n},{c},{layers},{naive},{efficient},{ratio:.6f}\n")
    print(f"N={n} c={c} layers={layers}")
    print(f"flops_naive     = {naive}")
    print(f"flops_efficient = {efficient}")
    print(f"ratio           = {ratio:.3f}")
    return 0


def cmd_bench(args, settings) -> int:
    opts = _merge_flags(settings, "bench", args, ("ns", "c", "layers", "repeats", "seed", "path"))
    try:
        ns = [int(v) for v in str(opts["ns"]).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad bench.ns list: {opts['ns']!r}") from exc
    if opts["path"] == "both":
        paths = ("naive", "efficient")
    elif opts["path"] in ("naive", "efficient"):
        paths = (opts["path"],)
    else:
        raise ConfigError(f"bench.path must be naive, efficient or both, got {opts['path']!r}")
    reports = bench.timing_sweep(
        ns, c=opts["c"], layers=opts["layers"], repeats=opts["repeats"],
        seed=opts["seed"], paths=paths,
    )
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bench.write_csv(out_dir / "bench.csv", reports)
    slopes = bench.sweep_slopes(reports)
    summary = " ".join(f"{path}_slope={slope:.3f}" for path, slope in sorted(slopes.items()))
    print(f"slopes: {summary}" if summary else "slopes: not enough points")
    (out_dir / "bench_slopes.json").write_text(
        json.dumps(slopes, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return 0


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------


def _train_config(opts, mode: str, seed: int) -> TrainConfig:
    return TrainConfig(
        seed=seed,
        h=opts["h"],
        w=opts["w"],
        num_classes=opts["num_classes"],
        n_train=opts["n_train"],
        n_val=opts["n_val"],
        iters=opts["iters"],
        lr0=opts["lr0"],
        poly_power=opts["poly_power"],
        momentum=opts["momentum"],
        weight_decay=opts["weight_decay"],
        batch=opts["batch"],
        model=mode,
        bgr=BgrConfig(
            num_layers=opts["num_layers"],
            hidden_dim=opts["hidden_dim"],
            degree_epsilon=opts["degree_epsilon"],
        ),
        boundary_radius=opts["boundary_radius"],
        noise_sigma=opts["noise_sigma"],
        eval_interval=opts["eval_interval"],
    )


def cmd_train(args, settings) -> int:
    opts = _merge_flags(settings, "train", args, ("mode", "seeds", "seed", "iters"))
    if opts["mode"] == "both":
        modes = ["baseline", "bgr"]
    elif opts["mode"] in ("baseline", "bgr"):
        modes = [opts["mode"]]
    else:
        raise ConfigError(f"train.mode must be baseline, bgr or both, got {opts['mode']!r}")
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for mode in modes:
        for offset in range(opts["seeds"]):
            seed = opts["seed"] + offset
            cfg = _train_config(opts, mode, seed)
            entry = {"mode": mode, "seed": seed, "diverged": False, "final": None}
            try:
                result = trainer.train(cfg)
            except DivergenceError as exc:
                entry["diverged"] = True
                entry["error"] = str(exc)
                print(f"{mode} seed {seed}: DIVERGED ({exc})")
            else:
                entry["final"] = result.final.to_dict()
                path = out_dir / f"train_{mode}_seed{seed}.jsonl"
                with open(path, "w", encoding="utf-8") as handle:
                    for record in result.history:
                        handle.write(json.dumps(record, sort_keys=True) + "\n")
                print(
                    f"{mode} seed {seed}: miou={result.final.miou:.4f} "
                    f"band_acc={result.final.boundary_band_acc:.4f} "
                    f"seg_loss={result.final.seg_loss:.4f}"
                )
            runs.append(entry)
    (out_dir / "train_summary.json").write_text(
        json.dumps({"runs": runs}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if runs and all(r["diverged"] for r in runs):
        return 3
    return 0


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bgr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--output-dir", default="out", help="directory for reports")
        p.add_argument("--set", action="append", dest="sets", metavar="SECTION.KEY=VALUE",
                       help="override a config value")

    p_check = sub.add_parser("check", help="run the verification suites")
    common(p_check)
    p_check.add_argument("--seed", type=int)
    p_check.add_argument("--cases", type=int)
    p_check.add_argument("--inject-fault", dest="inject_fault", choices=["q22"],
                         help="test hook: perturb one propagation factor")

    p_flops = sub.add_parser("flops", help="closed-form cost model for both paths")
    common(p_flops)
    p_flops.add_argument("--n", type=int)
    p_flops.add_argument("--c", type=int)
    p_flops.add_argument("--layers", type=int)

    p_bench = sub.add_parser("bench", help="timing sweep over N")
    common(p_bench)
    p_bench.add_argument("--ns", help="comma-separated node counts")
    p_bench.add_argument("--c", type=int)
    p_bench.add_argument("--layers", type=int)
    p_bench.add_argument("--repeats", type=int)
    p_bench.add_argument("--seed", type=int)
    p_bench.add_argument("--path", choices=["naive", "efficient", "both"])

    p_train = sub.add_parser("train", help="train the synthetic pipeline")
    common(p_train)
    p_train.add_argument("--mode", choices=["baseline", "bgr", "both"])
    p_train.add_argument("--seeds", type=int, help="number of consecutive seeds")
    p_train.add_argument("--seed", type=int, help="first seed")
    p_train.add_argument("--iters", type=int)
    return parser


COMMANDS = {"check": cmd_check, "flops": cmd_flops, "bench": cmd_bench, "train": cmd_train}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = load_settings(args.config, args.sets)
        return COMMANDS[args.command](args, settings)
    except (ConfigError, tensor.DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
