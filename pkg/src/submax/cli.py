"""Command-line experiment harness.

Each subcommand reads one flat config, runs one sweep and writes one report
directory (JSON, CSV, two-column .dat plot data and a timings sidecar).
Sweep points run in child processes, at most ``--threads`` at a time, each
under a wall-clock budget; a point past its budget is killed and recorded as
skipped. Every finished point is appended to ``checkpoint.jsonl`` so that
``--resume`` only runs what is missing.

Exit codes: 0 ok, 2 validation, 3 every point over budget, 4 I/O.
"""

import argparse
import json
import math
import multiprocessing as mp
import sys
import time
from multiprocessing.connection import wait
from pathlib import Path

import numpy as np

from .config import KINDS, ExperimentConfig, read_settings
from .errors import BudgetExceeded, ReportIOError, ValidationError
from .scaling import ScalingReport, emit_report, fit_scaling

EXIT_OK, EXIT_VALIDATION, EXIT_BUDGET, EXIT_IO = 0, 2, 3, 4
CHECKPOINT = "checkpoint.jsonl"
POLL = 0.05


# ----------------------------------------------------------------------------
# sweep points; each returns a dict with "value" (positive float or None)


def _point_net(cfg, value, seed):
    from .grassmann import greedy_net
    return {"value": float(len(greedy_net(cfg.d, cfg.n, value, seed=seed)))}


def _point_angles(cfg, value, seed):
    from .grassmann import Subspace, principal_angles
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(int(value)):
        a, b = Subspace.random(cfg.d, cfg.n, rng), Subspace.random(cfg.d, cfg.n, rng)
        svd = principal_angles(a, b).angles
        # eigenvalues of P_a P_b P_a restricted to a are the squared cosines
        m = a.basis.T @ b.basis @ b.basis.T @ a.basis
        cos2 = np.clip(np.sort(np.linalg.eigvalsh(m))[::-1], 0.0, 1.0)
        worst = max(worst, float(np.max(np.abs(np.arccos(np.sqrt(cos2)) - svd))))
    return {"value": worst, "pairs": int(value)}


def _point_intersect(cfg, value, seed):
    from .grassmann import Subspace
    from .plates import Plate, intersection_volume_bound, mc_intersection_volume
    rng = np.random.default_rng(seed)
    pairs = int(cfg.options.get("pairs", 50))
    samples = int(cfg.options.get("samples", 20000))
    ratios = []
    for _ in range(pairs):
        p = Plate(Subspace.random(cfg.d, cfg.n, rng), thickness=value)
        q = Plate(Subspace.random(cfg.d, cfg.n, rng), thickness=value)
        est, _ = mc_intersection_volume(p, q, samples, rng)
        ratios.append(est / intersection_volume_bound(p, q))
    return {"value": float(max(ratios)), "mean_ratio": float(np.mean(ratios)), "pairs": pairs}


def _point_maxavg(cfg, value, seed):
    from .extremals import radial_log_example
    from .grassmann import uniform_line_net
    from .gridops import maximal_subspace_average, norm_estimate
    N = float(value)
    f = radial_log_example(N, cfg.h or 0.5)
    S = cfg.scales or [2.0**k for k in range(int(math.log2(N)) + 1)]
    m = maximal_subspace_average(f, uniform_line_net(1.0 / N), S, density=cfg.density)
    return {"value": norm_estimate(m, f).value, "grid": list(f.shape), "scales": len(S)}


def _point_nikodym(cfg, value, seed):
    from .extremals import nikodym_example
    from .grassmann import line_mesh_net
    from .gridops import nikodym_maximal, norm_estimate
    f, family = nikodym_example(value, cfg.h)
    m = nikodym_maximal(f, value, line_mesh_net(value / 4), density=cfg.density)
    est = norm_estimate(m, f, "weak", 2.0, "perron-tree indicator")
    return {"value": est.value, "level": est.level, "level_measure": est.level_measure, "tubes": len(family),
            "grid": list(f.shape)}


def _point_kakeya(cfg, value, seed):
    from .extremals import nikodym_example
    from .grassmann import uniform_line_net
    from .gridops import kakeya_maximal
    f, family = nikodym_example(value, cfg.h)
    K = kakeya_maximal(f, value, uniform_line_net(value), density=cfg.density)
    return {"value": K.norm(2.0) / f.norm(2.0), "directions": len(K.values), "tubes": len(family)}


def _point_cluster(cfg, value, seed):
    from .grassmann import CandidatePolicy, cluster_decompose, random_direction_set
    delta = float(cfg.options.get("delta", 0.1))
    sigma = random_direction_set(cfg.d, cfg.n, int(value), seed)
    dec = cluster_decompose(sigma, delta, CandidatePolicy(seed=seed))
    return {"value": float(dec.steps) if dec.steps else None, "steps": dec.steps, "clusters": len(dec.clusters),
            "residual": len(dec.sigma0), "threshold": dec.threshold, "step_limit": int(value) ** cfg.d}


def _point_extremal(cfg, value, seed):
    import warnings
    from .extremals import cm_construction
    p = float(cfg.options.get("p", 2.0))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cm = cm_construction(cfg.d, cfg.n, value, seed=seed)
    kw = {k: int(cfg.options[k]) for k in ("nr", "nw") if k in cfg.options}
    return {"value": cm.quotient(p, **kw), "p": p, "flagged": bool(cm.flagged), "warnings": len(caught)}


def _point_carleson(cfg, value, seed):
    from .carleson import adjoint_sequence, build_lattice, embedding_audit, random_directions, random_selection
    delta = float(cfg.options.get("delta", 1.0 / 16))
    depth = int(cfg.options.get("depth", 3))
    density = float(cfg.options.get("density_E", 0.5))
    n = cfg.n
    quotients = []
    for s in range(cfg.seeds):
        rng = np.random.default_rng([seed, s])
        V = random_directions(int(value), n, seed=rng)
        lat = build_lattice(V, delta, (np.zeros(n), np.ones(n)), depth)
        grid = lat.grid([delta / 2] * (n - 1) + [delta / 4])
        E = rng.random(grid.shape) < density
        seq = adjoint_sequence(lat, random_selection(lat, grid, seed=rng), E)
        quotients.append(embedding_audit(seq, grid)["quotient"])
    return {"value": float(np.mean(quotients)), "max": float(np.max(quotients)), "min": float(np.min(quotients)),
            "seeds": cfg.seeds}


RUNNERS = {
    "net": _point_net, "angles": _point_angles, "intersect": _point_intersect, "maxavg": _point_maxavg,
    "nikodym": _point_nikodym, "kakeya": _point_kakeya, "cluster": _point_cluster,
    "extremal": _point_extremal, "carleson": _point_carleson,
}
NAMES = {v: k for k, v in KINDS.items()}


def _comparison(cfg):
    d, n = cfg.d, cfg.n
    kind = NAMES.get(cfg.kind, cfg.kind)
    if kind == "net":
        return {"exponent": d * (n - d), "statement": "cardinality of a maximal delta-net of Gr(d, n) ~ delta^-d(n-d)",
                "provenance": "derived"}
    if kind == "angles":
        return {"exponent": 0, "statement": "SVD and eigenvalue routes to principal angles agree",
                "provenance": "derived"}
    if kind == "intersect":
        return {"exponent": 0, "statement": "|p & q| <= C delta^(n-m) / prod max(delta, theta_j), C independent of delta",
                "provenance": "published-result"}
    if kind == "maxavg":
        return {"exponent": "log N", "statement": "planar maximal subspace average, N directions: norm ~ log N",
                "provenance": "published-result"}
    if kind == "nikodym":
        return {"exponent": "(log 1/delta)^(1/2)",
                "statement": "Nikodym maximal function at d = n - 1: weak (2,2) norm ~ (log 1/delta)^(1/2), sharp",
                "provenance": "published-result"}
    if kind == "kakeya":
        return {"exponent": "(log 1/delta)^(1/2)",
                "statement": "planar Kakeya maximal function: L^2 norm ~ (log 1/delta)^(1/2)",
                "provenance": "published-result"}
    if kind == "cluster":
        return {"exponent": d, "statement": "greedy cluster extraction stops within N^d steps",
                "provenance": "published-result"}
    if kind == "extremal":
        p = float(cfg.options.get("p", 2.0))
        return {"exponent": (n - d + 1 - p) / (p * (n - d)), "p": p,
                "statement": "lower bound for M_{Sigma,{M}} on the C_M construction: quotient ~ M^((n-d+1-p)/(p(n-d)))",
                "provenance": "published-result"}
    if kind == "carleson":
        return {"exponent": 0, "statement": "||T(a)||_2 <= C_n (log #V)^(1/2) mass^(1/2), C_n depending on n only",
                "provenance": "published-result"}
    return {"exponent": None, "statement": "fit of supplied data", "provenance": "none"}


def _x_of(cfg, value):
    return 1.0 / value if cfg.sweep == "delta" else float(value)


def check_kind(cfg):
    """Kind-specific requirements, raised together as one ValidationError."""
    kind = NAMES.get(cfg.kind, cfg.kind)
    p = []
    sweeps = {"net": "delta", "intersect": "delta", "nikodym": "delta", "kakeya": "delta", "maxavg": "N",
              "cluster": "N", "extremal": "M", "carleson": "V", "angles": "pairs"}
    if kind in sweeps and cfg.sweep != sweeps[kind]:
        p.append(f"{kind} sweeps over {sweeps[kind]}, not {cfg.sweep}")
    if kind in ("maxavg", "nikodym", "kakeya") and (cfg.d, cfg.n) != (1, 2):
        p.append(f"{kind} runs in the plane with lines (d = 1, n = 2)")
    if kind == "extremal" and not (cfg.d >= 2 and cfg.n > cfg.d):
        p.append("extremal needs 2 <= d < n")
    if kind == "carleson" and cfg.n not in (2, 3):
        p.append("carleson runs with n in {2, 3}")
    if kind in ("angles", "cluster", "carleson", "maxavg") and any(float(v) != int(v) for v in cfg.values):
        p.append(f"{kind} sweep values must be integers")
    if kind == "scaling" and "input" not in cfg.options:
        p.append("scaling needs 'input' (a two-column data file)")
    if p:
        raise ValidationError(p)


# ----------------------------------------------------------------------------
# running


def _child(conn, cfg, value, seed):
    try:
        conn.send(("ok", RUNNERS[NAMES.get(cfg.kind, cfg.kind)](cfg, value, seed)))
    except Exception as exc:  # reported as a flagged point
        conn.send(("error", f"{type(exc).__name__}: {exc}"))
    finally:
        conn.close()


def point_seed(seed, index):
    """Seed of sweep point ``index``; independent of scheduling and thread count."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def _run_points(cfg, todo, threads, budget, done):
    if budget == 0:
        for i, value, seed in todo:
            t0 = time.monotonic()
            r, w = mp.Pipe(False)
            _child(w, cfg, value, seed)
            status, payload = r.recv()
            done(i, status, payload, time.monotonic() - t0)
        return
    ctx = mp.get_context("fork")
    pending, running = list(todo), {}
    while pending or running:
        while pending and len(running) < max(threads, 1):
            i, value, seed = pending.pop(0)
            r, w = ctx.Pipe(False)
            proc = ctx.Process(target=_child, args=(w, cfg, value, seed), daemon=True)
            proc.start()
            w.close()
            running[i] = (proc, r, time.monotonic())
        ready = wait([r for _, r, _ in running.values()], timeout=POLL)
        now = time.monotonic()
        for i, (proc, r, t0) in list(running.items()):
            if r in ready:
                try:
                    status, payload = r.recv()
                except EOFError:
                    status, payload = "error", f"worker exited with code {proc.exitcode}"
                proc.join()
                del running[i]
                done(i, status, payload, now - t0)
            elif now - t0 > budget:
                proc.kill()
                proc.join()
                del running[i]
                done(i, "budget", f"exceeded {budget:g} s", now - t0)


def _load_checkpoint(path, digest):
    if not path.exists():
        return {}
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ReportIOError(path, exc) from exc
    if not lines or json.loads(lines[0]).get("digest") != digest:
        return {}
    out = {}
    for line in lines[1:]:
        try:
            row = json.loads(line)
        except json.JSONDecodeError:
            break  # a torn final line from an interrupted run
        if row.get("status") == "ok":
            out[row["index"]] = row
    return out


def run_experiment(cfg, out=None, threads=1, resume=False):
    """Run the sweep of ``cfg`` and return its ScalingReport (also written to ``out`` if given)."""
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_settings(cfg)
    cfg.validate()
    check_kind(cfg)
    kind = NAMES.get(cfg.kind, cfg.kind)
    report = ScalingReport(KINDS[kind], cfg.sweep, model=cfg.model, comparison=_comparison(cfg),
                           config=cfg.to_dict())
    if kind == "scaling":
        return _fit_only(cfg, report, out)

    out = Path(out) if out is not None else None
    ckpt = out / CHECKPOINT if out is not None else None
    digest = cfg.digest()
    rows = _load_checkpoint(ckpt, digest) if (resume and ckpt is not None) else {}
    if ckpt is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            if not rows:
                ckpt.write_text(json.dumps({"digest": digest}) + "\n")
        except OSError as exc:
            raise ReportIOError(ckpt, exc) from exc

    todo = [(i, v, point_seed(cfg.seed, i)) for i, v in enumerate(cfg.values) if i not in rows]

    def done(i, status, payload, runtime):
        row = {"index": i, "status": status, "runtime": runtime}
        row["record" if status == "ok" else "reason"] = payload
        rows[i] = row
        if ckpt is not None:
            try:
                with ckpt.open("a") as fh:
                    fh.write(json.dumps(_jsonable(row), sort_keys=True) + "\n")
            except OSError as exc:
                raise ReportIOError(ckpt, exc) from exc

    _run_points(cfg, todo, threads, float(cfg.budget), done)

    skipped = []
    for i, v in enumerate(cfg.values):
        row = rows[i]
        rec = {"parameter": v, "x": _x_of(cfg, v), "seed": point_seed(cfg.seed, i), "flag": row["status"]}
        if row["status"] == "ok":
            rec.update(row["record"])
            if rec.get("value") is not None and not rec["value"] > 0:
                rec["value"] = None
        else:
            rec.update(value=None, reason=row["reason"])
            skipped.append(v)
        report.records.append(rec)
        report.timings[str(v)] = round(float(row["runtime"]), 3)
    report.refit()
    report.meta = {"skipped": skipped, "budget_seconds": cfg.budget, "points": len(cfg.values),
                   "x": "1/delta" if cfg.sweep == "delta" else cfg.sweep}
    if out is not None:
        emit_report(report, out)
    if cfg.values and all(rows[i]["status"] == "budget" for i in range(len(cfg.values))):
        raise BudgetExceeded(f"all {len(cfg.values)} points exceeded the {cfg.budget:g} s budget")
    return report


def _fit_only(cfg, report, out):
    path = Path(cfg.options["input"])
    try:
        text = path.read_text()
    except OSError as exc:
        raise ReportIOError(path, exc) from exc
    pts = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].replace(",", " ").split()
        if len(line) >= 2:
            try:
                pts.append((float(line[0]), float(line[1])))
            except ValueError:
                continue  # header
    report.records = [{"parameter": x, "x": x, "value": y, "flag": "ok"} for x, y in pts]
    if report.model != "none":
        params, r2 = fit_scaling(pts, report.model)
        report.fit = {"model": report.model, **params, "r2": r2}
    report.meta = {"input": str(path), "points": len(pts)}
    if out is not None:
        emit_report(report, out)
    return report


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.item() if hasattr(o, "item") else str(o)))


# ----------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="submax", description="Run maximal-operator scaling experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in KINDS:
        p = sub.add_parser(name, help=f"{KINDS[name]} sweep")
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--out", default=None, help=f"report directory (default reports/{name})")
        p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed overriding the config")
        p.add_argument("--threads", type=int, default=1, help="sweep points run at once")
        p.add_argument("--resume", action="store_true", help="reuse finished points from the checkpoint")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else Path("reports") / args.command
    try:
        settings = read_settings(args.config)
        settings.setdefault("kind", args.command)
        if settings["kind"] not in (args.command, KINDS[args.command]):
            raise ValidationError(f"config kind {settings['kind']!r} does not match subcommand {args.command!r}")
        settings["kind"] = args.command
        if args.seed is not None:
            settings["seed"] = args.seed
        if args.threads < 1:
            raise ValidationError(f"--threads must be >= 1, got {args.threads}")
        cfg = ExperimentConfig.from_settings(settings)
        report = run_experiment(cfg, out, threads=args.threads, resume=args.resume)
    except ValidationError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except BudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ReportIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    fit = report.fit
    summary = f"{report.experiment}: {len(report.records)} points -> {out}"
    if fit:
        summary += f" ({fit['model']} slope {fit['slope']:.4g}, R^2 {fit['r2']:.4f})"
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
