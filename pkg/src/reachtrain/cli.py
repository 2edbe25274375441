"""Command line entry point: ``reachtrain {train,verify,plot,sweep}``.

Exit codes: 0 run completed, 2 configuration or input error, 3 numeric abort.
Set ``REACHTRAIN_LOG`` (e.g. ``INFO``) for progress logging.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import scenario as sc
from .certify import certify
from .crown import GraphError, ReachTube, rollout_bounds
from .trainer import TrainingAborted, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    pass


# ---- artifacts --------------------------------------------------------------------


def write_tube(path, tube: ReachTube, config_hash: str, seed: int) -> None:
    """One line per timestep: ``t lo_0 .. lo_{n-1} hi_0 .. hi_{n-1}`` at 17 significant digits."""
    tube = tube.numpy()
    n = tube.lo.shape[1]
    lines = [f"# config_hash={config_hash} seed={seed}",
             "# t " + " ".join(f"lo_{i}" for i in range(n)) + " " + " ".join(f"hi_{i}" for i in range(n))]
    for t in range(tube.T + 1):
        vals = " ".join(f"{v:.17g}" for v in np.concatenate([tube.lo[t], tube.hi[t]]))
        lines.append(f"{t} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_tube(path) -> tuple[ReachTube | None, dict]:
    """Tube (``None`` if it has no rows) and the header key/value pairs."""
    meta, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
            continue
        if line.strip():
            rows.append([float(x) for x in line.split()[1:]])
    if not rows:
        return None, meta
    a = np.asarray(rows)
    n = a.shape[1] // 2
    return ReachTube(a[:, :n], a[:, n:]), meta


def sample_trajectories(scenario, params, n: int, seed: int) -> np.ndarray:
    X = scenario.X0.sample(n, np.random.default_rng(seed))
    return scenario.closed_loop().simulate(params, X, scenario.T)


def _write_history(path, history: list[dict]) -> None:
    keys = ["epoch", "loss"] + sorted({k for h in history for k in h} - {"epoch", "loss"})
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for h in history:
            w.writerow({k: (repr(h[k]) if isinstance(h.get(k), float) else h.get(k, "")) for k in keys})


def final_volume(tube: ReachTube) -> float:
    tube = tube.numpy()
    return float(np.prod(tube.hi[-1] - tube.lo[-1]))


# ---- commands ---------------------------------------------------------------------


def _load_scenario(args) -> sc.Scenario:
    try:
        s = sc.load(args.config)
    except FileNotFoundError as e:
        raise InputError(str(e)) from None
    t = s.train
    if getattr(args, "seed", None) is not None:
        t.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 0:
            raise sc.ScenarioError([("--epochs", "must be >= 0")])
        t.epochs = args.epochs
    if getattr(args, "early_stop_on_cert", False):
        t.early_stop_on_cert = True
    if getattr(args, "mode", None):
        b = s.bounds
        s.bounds = dataclasses.replace(b, mode=args.mode)
    return s


def run_training(s: sc.Scenario, out: Path, backend: str = "jax", samples: int = 20, mc: int = 0) -> dict:
    """Train and write every artifact of one run into ``out``; returns the report dict."""
    out.mkdir(parents=True, exist_ok=True)
    sc.dump(s, out / "scenario.yaml")
    r = train(s, backend=backend, checkpoint_path=out / "checkpoint.json")
    if mc:
        r.cert = certify(s, r.params, r.tube, mc_samples=mc, seed=s.train.seed)
    write_tube(out / "tube.txt", r.tube, r.config_hash, r.seed)
    _write_history(out / "history.csv", r.history)
    traj = sample_trajectories(s, r.params, samples, s.train.seed)
    (out / "trajectories.json").write_text(json.dumps(
        {"config_hash": r.config_hash, "seed": r.seed, "trajectories": traj.tolist()}))
    rep = r.to_dict()
    rep.pop("history")
    rep["scenario"] = s.name
    rep["final_step_volume"] = final_volume(r.tube)
    (out / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True))
    return rep


def cmd_train(args) -> int:
    s = _load_scenario(args)
    out = Path(args.out or f"runs/{s.name}-seed{s.train.seed}")
    try:
        rep = run_training(s, out, args.backend, args.samples, args.mc_samples)
    except TrainingAborted as e:
        print(f"training aborted: {e}; last good state saved to {out / 'checkpoint.json'}", file=sys.stderr)
        return EXIT_NUMERIC
    c = rep["cert"]
    print(f"{s.name} seed={rep['seed']} hash={rep['config_hash']} epochs={rep['epochs']} "
          f"stop={rep['stop_reason']} loss={rep['final_loss']} time={rep['wall_clock_s']:.1f}s")
    print(f"avoids_obstacles={c['avoids_obstacles']} goal_step={c['goal_step']} "
          f"invariance={None if c['invariance'] is None else c['invariance']['t']}")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    s = _load_scenario(args)
    try:
        data = ckpt.load(args.checkpoint)
    except (FileNotFoundError, ckpt.CheckpointError) as e:
        raise InputError(f"{args.checkpoint}: {e}") from None
    if data["config_hash"] and data["config_hash"] != s.config_hash():
        print(f"warning: checkpoint config hash {data['config_hash']} differs from scenario {s.config_hash()}",
              file=sys.stderr)
    expected = s.policy.init_params(0)
    if {k: np.shape(v) for k, v in expected.items()} != {k: np.shape(v) for k, v in data["params"].items()}:
        raise InputError("checkpoint parameters do not match the scenario policy")
    tube = rollout_bounds(s.closed_loop().graph, data["params"], s.X0, s.T, s.bounds)
    rep = certify(s, data["params"], tube, mc_samples=args.mc_samples, seed=data["seed"]).to_dict()
    rep.update({"config_hash": data["config_hash"], "seed": data["seed"], "epoch": data["epoch"],
                "final_step_volume": final_volume(tube)})
    text = json.dumps(rep, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_plot(args) -> int:
    run = Path(args.run)
    scen_path = Path(args.config) if args.config else run / "scenario.yaml"
    try:
        s = sc.load(scen_path)
    except FileNotFoundError as e:
        raise InputError(str(e)) from None
    tube_path = run / "tube.txt"
    tube, meta = read_tube(tube_path) if tube_path.exists() else (None, {})
    traj = None
    tp = run / "trajectories.json"
    if tp.exists():
        traj = np.asarray(json.loads(tp.read_text())["trajectories"], dtype=np.float64)
    dims = tuple(args.dims) if args.dims else tuple(s.position_dims[:2])
    if len(dims) != 2 or any(not 0 <= d < s.n_x for d in dims):
        raise InputError(f"--dims needs two state indices in [0, {s.n_x}), got {list(dims)}")
    svg = render_svg(s, tube, traj, dims, meta)
    out = Path(args.out) if args.out else run / "tube.svg"
    out.write_text(svg)
    print(out)
    return EXIT_OK


def _parse_grid(items: list[str]) -> dict:
    grid = {}
    for it in items or []:
        if "=" not in it:
            raise InputError(f"--set expects key=v1,v2,..., got {it!r}")
        k, vals = it.split("=", 1)
        parsed = [_parse_value(v) for v in vals.split(",") if v.strip()]
        if not parsed:
            raise InputError(f"--set {k}: no values")
        grid[k.strip()] = parsed
    if not grid:
        raise InputError("empty parameter grid: give at least one --set key=values")
    return grid


def _parse_value(v: str):
    v = v.strip()
    try:
        return int(v)
    except ValueError:
        return float(v)


def apply_override(s: sc.Scenario, key: str, value) -> None:
    """Set ``key`` (``weights.w_vol``, ``train.seed``, ``horizon`` or a bare field name)."""
    if key == "horizon":
        s.T = int(value)
        return
    sections = {"weights": s.weights, "train": s.train}
    if "." in key:
        sec, name = key.split(".", 1)
        target = sections.get(sec)
    else:
        name = key
        target = next((o for o in sections.values() if hasattr(o, key)), None)
    if target is None or not hasattr(target, name):
        raise InputError(f"unknown sweep key {key!r}")
    cur = getattr(target, name)
    setattr(target, name, int(value) if isinstance(cur, int) and not isinstance(cur, bool) else value)


def _sweep_job(job):
    text, overrides, out, backend = job
    s = sc.loads(text)
    for k, v in overrides.items():
        apply_override(s, k, v)
    try:
        rep = run_training(s, Path(out), backend)
    except TrainingAborted as e:
        return {"point": overrides, "error": str(e)}
    c = rep["cert"]
    return {"point": overrides, "final_step_volume": rep["final_step_volume"], "final_loss": rep["final_loss"],
            "avoids_obstacles": c["avoids_obstacles"], "goal_step": c["goal_step"],
            "invariance_t": None if c["invariance"] is None else c["invariance"]["t"],
            "wall_clock_s": rep["wall_clock_s"], "config_hash": rep["config_hash"], "seed": rep["seed"]}


def cmd_sweep(args) -> int:
    s = _load_scenario(args)
    grid = _parse_grid(args.set)
    keys = list(grid)
    points = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    for p in points:
        for k, v in p.items():
            apply_override(s.replace(), k, v)  # validate keys before launching anything
    root = Path(args.out or f"runs/{s.name}-sweep")
    text = sc.dumps(s)
    jobs = [(text, p, str(root / "_".join(f"{k.split('.')[-1]}={v}" for k, v in p.items())), args.backend)
            for p in points]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs, mp_context=get_context("spawn")) as ex:
            rows = list(ex.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    cols = ["final_step_volume", "avoids_obstacles", "goal_step", "invariance_t", "wall_clock_s"]
    print("\t".join(keys + cols))
    for r in rows:
        vals = [str(r["point"][k]) for k in keys]
        if "error" in r:
            print("\t".join(vals + ["aborted: " + r["error"]]))
            continue
        print("\t".join(vals + [f"{r['final_step_volume']:.6g}", str(r["avoids_obstacles"]), str(r["goal_step"]),
                                 str(r["invariance_t"]), f"{r['wall_clock_s']:.1f}"]))
    return EXIT_NUMERIC if any("error" in r for r in rows) else EXIT_OK


# ---- svg ------------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def render_svg(s: sc.Scenario, tube: ReachTube | None, traj: np.ndarray | None, dims: tuple,
               meta: dict | None = None, size: int = 600) -> str:
    """2D projection of regions, reach rects and sample trajectories; pure function of its inputs."""
    a, b = dims
    pd = list(s.position_dims)
    boxes = []  # (lo, hi, class)
    X0 = s.X0.numpy()
    boxes.append(((X0.lo[a], X0.lo[b]), (X0.hi[a], X0.hi[b]), "initial"))

    def region(r, cls):
        if a in pd and b in pd:
            ia, ib = pd.index(a), pd.index(b)
            boxes.append(((r.lo[ia], r.lo[ib]), (r.hi[ia], r.hi[ib]), cls))

    region(s.goal, "goal")
    for ob in s.box_obstacles:
        region(ob, "obstacle")
    circles = []
    if a in pd and b in pd:
        ia, ib = pd.index(a), pd.index(b)
        circles = [((o.center[ia], o.center[ib]), o.radius) for o in s.sphere_obstacles]
    rects = []
    if tube is not None:
        tube = tube.numpy()
        rects = [((tube.lo[t, a], tube.lo[t, b]), (tube.hi[t, a], tube.hi[t, b])) for t in range(tube.T + 1)]
    lines = [] if traj is None else [traj[i][:, [a, b]] for i in range(traj.shape[0])]

    xs, ys = [], []
    for lo, hi, *_ in boxes + [(lo, hi) for lo, hi in rects]:
        xs += [lo[0], hi[0]]
        ys += [lo[1], hi[1]]
    for (cx, cy), r in circles:
        xs += [cx - r, cx + r]
        ys += [cy - r, cy + r]
    for ln in lines:
        xs += ln[:, 0].tolist()
        ys += ln[:, 1].tolist()
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    span = max(x1 - x0, y1 - y0, 1e-9)
    pad = 0.05 * span
    scale = (size - 20) / (span + 2 * pad)

    def px(x):
        return 10 + (x - x0 + pad) * scale

    def py(y):
        return size - 10 - (y - y0 + pad) * scale

    style = {"initial": 'fill="#4f7cff" fill-opacity="0.35" stroke="#1f3fbf"',
             "goal": 'fill="#3cb371" fill-opacity="0.35" stroke="#1d7a44"',
             "obstacle": 'fill="#e05555" fill-opacity="0.45" stroke="#a11d1d"'}
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">']
    meta = meta or {}
    out.append(f"<!-- scenario={s.name} config_hash={meta.get('config_hash', s.config_hash())} "
               f"seed={meta.get('seed', s.train.seed)} dims={a},{b} -->")
    out.append(f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>')

    def rect(lo, hi, attrs, cls):
        return (f'<rect class="{cls}" x="{_fmt(px(lo[0]))}" y="{_fmt(py(hi[1]))}" '
                f'width="{_fmt((hi[0] - lo[0]) * scale)}" height="{_fmt((hi[1] - lo[1]) * scale)}" {attrs}/>')

    for lo, hi, cls in boxes:
        out.append(rect(lo, hi, style[cls], cls))
    for (cx, cy), r in circles:
        out.append(f'<circle class="obstacle" cx="{_fmt(px(cx))}" cy="{_fmt(py(cy))}" r="{_fmt(r * scale)}" '
                   f'{style["obstacle"]}/>')
    for ln in lines:
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in ln)
        out.append(f'<polyline class="trajectory" points="{pts}" fill="none" stroke="#555" stroke-width="0.6"/>')
    for lo, hi in rects:
        out.append(rect(lo, hi, 'fill="none" stroke="#8a2be2" stroke-width="1"', "reach"))
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reachtrain", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(q, train_flags=True):
        q.add_argument("--config", required=True, help="scenario YAML path or bundled scenario name")
        q.add_argument("--mode", choices=["crown", "ibp"], help="bound propagation mode")
        if train_flags:
            q.add_argument("--seed", type=int)
            q.add_argument("--epochs", type=int)
            q.add_argument("--early-stop-on-cert", action="store_true")
            q.add_argument("--backend", choices=["jax", "diffcore"], default="jax")
        q.add_argument("--out")

    t = sub.add_parser("train", help="train a policy and write run artifacts")
    common(t)
    t.add_argument("--samples", type=int, default=20, help="sample trajectories to store")
    t.add_argument("--mc-samples", type=int, default=1000, help="Monte-Carlo soundness samples (0 disables)")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="recompute the tube of a checkpoint and run all checks")
    common(v, train_flags=False)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--mc-samples", type=int, default=1000)
    v.set_defaults(func=cmd_verify)

    pl = sub.add_parser("plot", help="render a run directory as SVG")
    pl.add_argument("--run", required=True, help="directory written by 'train'")
    pl.add_argument("--config", help="scenario file (default: the run's scenario.yaml)")
    pl.add_argument("--dims", type=int, nargs=2, help="state indices of the projection")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)

    sw = sub.add_parser("sweep", help="train over a parameter grid and tabulate the outcomes")
    common(sw)
    sw.add_argument("--set", action="append", metavar="KEY=V1,V2", help="grid axis, e.g. w_vol=4,0.05")
    sw.add_argument("--jobs", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    level = os.environ.get("REACHTRAIN_LOG")
    if level:
        logging.basicConfig(level=level.upper(), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except sc.ScenarioError as e:
        print("invalid scenario:", file=sys.stderr)
        for path, msg in e.problems:
            print(f"  {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, GraphError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
