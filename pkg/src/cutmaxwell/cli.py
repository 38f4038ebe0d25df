"""Command-line harness: ``cutmaxwell <subcommand> [--config PATH] [flags]``.

Exit codes: 0 success, 1 a check failed (patch test), 2 configuration error,
3 solver error, 4 mesh assumption violated at every level.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    build_problem,
    condition_number,
    condition_probe,
    convergence_study,
    error_discretization,
    error_norms,
    min_cut_fraction,
    norm_equivalence,
    patch_test,
    problem_infsup,
    random_offsets,
    solve_problem,
)
from .cases import builtin_case
from .config import RunConfig, parse_config
from .cut import Label
from .errors import AssumptionViolated, CutMaxwellError, NoInteriorElement, ParseError, ValidationError
from .forms import write_coo

log = logging.getLogger("cutmaxwell")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER, EXIT_ASSUMPTION = 0, 1, 2, 3, 4
PATCH_TOL = 1e-8


class Outputs:
    """Collects every output file in memory; ``flush`` writes each one atomically."""

    def __init__(self, root):
        self.root = Path(root)
        self.files: dict = {}

    def add(self, rel: str, text: str) -> None:
        self.files[rel] = text

    def flush(self) -> list:
        written = []
        for rel, text in self.files.items():
            path = self.root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            try:
                with os.fdopen(fd, "w") as fh:
                    fh.write(text)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
            written.append(str(path))
        return written


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unversioned"
    except (OSError, subprocess.SubprocessError):
        return "unversioned"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.10e}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


# ------------------------------------------------------------------ dumps


def matrix_dumps(problem, prefix: str = "matrices") -> dict:
    S = problem.system
    out = {}
    blocks = dict(A0=S.A0, A1=S.A1, G=S.G, M=S.M, B=S.B, C=S.C, J=S.J, K=S.matrix())
    for name, mat in blocks.items():
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "m.coo"
            write_coo(p, mat)
            out[f"{prefix}/{name}.coo"] = p.read_text()
    out[f"{prefix}/rhs.txt"] = "".join(f"{v:.17g}\n" for v in S.full_rhs())
    return out


def geometry_dumps(problem, prefix: str = "geometry") -> dict:
    mesh, cls, ext = problem.mesh, problem.cls, problem.ext
    q = problem.disc.quad
    frac = np.ones(mesh.n_cells)
    frac[cls.labels == Label.EXTERIOR] = 0.0
    if len(q.cut.cells):
        frac[q.cut.cells] = q.cut.weights.sum(axis=1) / mesh.areas[q.cut.cells]
    rows = []
    for c in range(mesh.n_cells):
        lab = Label(int(cls.labels[c])).name.lower()
        nb = ext.neighbor.get(c, -1)
        rows.append([c, lab, float(mesh.barycenters[c, 0]), float(mesh.barycenters[c, 1]),
                     float(frac[c]), nb, ext.hops.get(c, 0)])
    cells = _csv(["cell", "label", "x", "y", "inside_fraction", "neighbor", "hops"], rows)
    qrows = []
    for kind, rule in (("volume", q.cut), ("surface", q.surface)):
        for i, c in enumerate(rule.cells):
            for j in np.flatnonzero(rule.weights[i] > 0):
                nx, ny = (rule.normals[i, j] if rule.normals is not None else (0.0, 0.0))
                qrows.append([kind, int(c), float(rule.points[i, j, 0]), float(rule.points[i, j, 1]),
                              float(rule.weights[i, j]), float(nx), float(ny)])
    for i, f in enumerate(q.faces.faces):
        for j in np.flatnonzero(q.faces.weights[i] > 0):
            qrows.append(["face", int(f), float(q.faces.points[i, j, 0]), float(q.faces.points[i, j, 1]),
                          float(q.faces.weights[i, j]), 0.0, 0.0])
    quad = _csv(["kind", "entity", "x", "y", "weight", "nx", "ny"], qrows)
    return {f"{prefix}/cells.csv": cells, f"{prefix}/quadrature.csv": quad}


# ------------------------------------------------------------------ commands


def _case(cfg: RunConfig):
    return builtin_case(cfg.example, k=cfg.k)


def cmd_solve(cfg: RunConfig, out: Outputs, record: dict) -> int:
    case = _case(cfg)
    t0 = time.perf_counter()
    prob = build_problem(case, cfg.r, cfg.m, cfg.single_n, cfg.settings())
    sol = solve_problem(prob)
    rep = error_norms(sol, prob.case, error_discretization(prob))
    result = dict(example=cfg.example, r=cfg.r, m=cfg.m, n=prob.n, h=prob.h, n_dofs=prob.dofmap.n_total,
                  errors=rep.as_dict(), solver=sol.info, c_delta=prob.ext.c_delta,
                  min_cut_fraction=min_cut_fraction(prob), wall_time_s=time.perf_counter() - t0,
                  timings=prob.timings)
    record["c_delta"] = prob.ext.c_delta
    record["assumption_violations"] = [dict(n=prob.n, faces=[int(f) for f in prob.cls.violations])]
    out.add("solve.json", _dump_json(result))
    if cfg.dump_matrices:
        out.files.update(matrix_dumps(prob))
    if cfg.dump_geometry:
        out.files.update(geometry_dumps(prob))
    print(f"n={prob.n} dofs={prob.dofmap.n_total} l2_u={rep.l2_u:.4e} anorm_u={rep.anorm_u:.4e} "
          f"cnorm_p={rep.cnorm_p:.4e} residual={sol.residual:.1e}")
    return EXIT_OK


def cmd_study(cfg: RunConfig, out: Outputs, record: dict) -> int:
    table, diags = convergence_study(_case(cfg), (cfg.r, cfg.m), cfg.n_list, cfg.settings(), cfg.threads)
    record["levels"] = diags
    record["skipped"] = [dict(n=n, reason=why) for n, why in table.skipped]
    record["lsq_slopes_last3"] = table.slopes()
    record["assumption_violations"] = [dict(n=d["n"], faces=d["face_violations"]) for d in diags] + \
        [dict(n=n, error=why) for n, why in table.skipped]
    if not table.rows:
        log.error("every level violated a mesh assumption")
        return EXIT_ASSUMPTION
    if cfg.dump_matrices or cfg.dump_geometry:
        for n in table.column("n"):
            prob = build_problem(_case(cfg), cfg.r, cfg.m, n, cfg.settings())
            if cfg.dump_matrices:
                out.files.update(matrix_dumps(prob, f"n{n}/matrices"))
            if cfg.dump_geometry:
                out.files.update(geometry_dumps(prob, f"n{n}/geometry"))
    record["c_delta"] = {str(d["n"]): d["c_delta"] for d in diags}
    out.add("study.csv", table.to_csv())
    out.add("study.md", table.to_markdown())
    sys.stdout.write(table.to_markdown())
    return EXIT_OK


def _offset_problems(cfg: RunConfig):
    """(offset, problem) over the configured sweep, skipping offsets that violate an assumption."""
    case = _case(cfg)
    offs = random_offsets(cfg.sweep_n, cfg.sweep_count, cfg.seed, cfg.sweep_magnitude)
    for d in offs:
        try:
            yield d, build_problem(case, cfg.r, cfg.m, cfg.sweep_n, cfg.settings(), tuple(d))
        except (AssumptionViolated, NoInteriorElement) as exc:
            log.warning("offset (%.4g, %.4g) skipped: %s", d[0], d[1], exc)
            yield d, exc


def cmd_infsup(cfg: RunConfig, out: Outputs, record: dict) -> int:
    case = _case(cfg)
    rows, betas, sweep, skipped = [], [], [], []
    for n in cfg.infsup_n_list:
        try:
            prob = build_problem(case, cfg.r, cfg.m, n, cfg.settings())
        except (AssumptionViolated, NoInteriorElement) as exc:
            skipped.append(dict(n=n, error=str(exc)))
            continue
        b = problem_infsup(prob)
        betas.append(b)
        rows.append(["refine", n, 0.0, 0.0, b, min_cut_fraction(prob)])
    for d, prob in _offset_problems(cfg):
        if isinstance(prob, Exception):
            skipped.append(dict(offset=list(d), error=str(prob)))
            continue
        b = problem_infsup(prob)
        sweep.append(b)
        rows.append(["offset", cfg.sweep_n, float(d[0]), float(d[1]), b, min_cut_fraction(prob)])
    if not rows:
        return EXIT_ASSUMPTION
    record["assumption_violations"] = skipped
    record["summary"] = dict(refine_min_over_max=min(betas) / max(betas) if betas else None,
                             sweep_max_over_min=max(sweep) / min(sweep) if sweep else None)
    text = _csv(["kind", "n", "offset_x", "offset_y", "beta", "min_cut_fraction"], rows)
    out.add("infsup.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_condition(cfg: RunConfig, out: Outputs, record: dict) -> int:
    rows, skipped = [], []
    worst = None
    for d, prob in _offset_problems(cfg):
        if isinstance(prob, Exception):
            skipped.append(dict(offset=list(d), error=str(prob)))
            continue
        frac = min_cut_fraction(prob)
        cs = condition_number(condition_probe(prob.system, True))
        cu = condition_number(condition_probe(prob.system, False))
        Pu, Pp, dropped = prob.reduction()
        cr = condition_number(condition_probe(prob.system, True, Pu, Pp)) if dropped else cs
        rows.append([float(d[0]), float(d[1]), frac, cs, cu, cr])
        if worst is None or frac < worst[2]:
            worst = rows[-1]
    if not rows:
        return EXIT_ASSUMPTION
    cs = [r[3] for r in rows]
    record["assumption_violations"] = skipped
    record["summary"] = dict(stabilized_max_over_min=max(cs) / min(cs),
                             worst_offset=worst[:2], worst_min_cut_fraction=worst[2],
                             worst_unstabilized_over_stabilized=worst[4] / worst[3])
    text = _csv(["offset_x", "offset_y", "min_cut_fraction", "cond_stabilized", "cond_unstabilized",
                 "cond_stabilized_reduced"], rows)
    out.add("condition.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_patch(cfg: RunConfig, out: Outputs, record: dict) -> int:
    res = patch_test(cfg.r, cfg.m, cfg.single_n, cfg.settings())
    worst = max(res["l2_u"], res["anorm_u"], res["cnorm_p"])
    ok = worst <= PATCH_TOL
    res["pass"] = ok
    out.add("patch.json", _dump_json(res))
    print(f"{'PASS' if ok else 'FAIL'} residual={res['residual']:.2e} l2_u={res['l2_u']:.2e} "
          f"anorm_u={res['anorm_u']:.2e} cnorm_p={res['cnorm_p']:.2e}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_sweep(cfg: RunConfig, out: Outputs, record: dict) -> int:
    rows, skipped = [], []
    for d, prob in _offset_problems(cfg):
        if isinstance(prob, Exception):
            skipped.append(dict(offset=list(d), error=str(prob)))
            continue
        sol = solve_problem(prob)
        rep = error_norms(sol, prob.case, error_discretization(prob))
        ne = norm_equivalence(prob, seed=cfg.seed)
        rows.append([float(d[0]), float(d[1]), min_cut_fraction(prob), prob.ext.c_delta,
                     problem_infsup(prob), ne["u"]["sup"], ne["p"]["sup"], ne["u"]["sample_max"],
                     ne["p"]["sample_max"], rep.l2_u, rep.anorm_u, rep.cnorm_p])
    if not rows:
        return EXIT_ASSUMPTION
    record["assumption_violations"] = skipped
    record["c_delta"] = max(r[3] for r in rows)
    text = _csv(["offset_x", "offset_y", "min_cut_fraction", "c_delta", "beta", "ratio_u_sup",
                 "ratio_p_sup", "ratio_u_sample_max", "ratio_p_sample_max", "l2_u", "anorm_u",
                 "cnorm_p"], rows)
    out.add("sweep.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "solve": (cmd_solve, "single run at n (default: first entry of n_list)"),
    "study": (cmd_study, "convergence table over n_list"),
    "infsup": (cmd_infsup, "inf-sup constants under refinement and over a cut-offset sweep"),
    "condition": (cmd_condition, "condition numbers with and without stabilization over a sweep"),
    "patch-test": (cmd_patch, "reproduce the linear field u = (y, -x) exactly"),
    "sweep": (cmd_sweep, "errors, inf-sup and norm-equivalence ratios over a cut-offset sweep"),
}


def _n_list(s: str) -> list:
    try:
        return [int(v) for v in s.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--threads", type=int, help="worker processes for study levels")
    common.add_argument("--dump-matrices", action="store_true", default=None, help="write blocks as coordinate text")
    common.add_argument("--dump-geometry", action="store_true", default=None, help="write classification and quadrature points")
    common.add_argument("--alpha", type=float, help="penalty parameter (default: auto)")
    common.add_argument("--example", help="circle, star or patch")
    common.add_argument("--r", type=int, help="vector degree")
    common.add_argument("--m", type=int, help="scalar degree")
    common.add_argument("--n-list", type=_n_list, help="mesh resolutions, e.g. 6,12,24")
    common.add_argument("--n", type=int, help="mesh resolution of single runs")
    common.add_argument("--seed", type=int, help="seed of the cut-offset sweep")
    common.add_argument("-v", "--verbose", action="count", default=0)
    p = argparse.ArgumentParser(prog="cutmaxwell", description="Unfitted mixed DG solver for 2D time-harmonic Maxwell.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = dict(out=args.out, threads=args.threads, dump_matrices=args.dump_matrices,
                     dump_geometry=args.dump_geometry, alpha=args.alpha, example=args.example,
                     r=args.r, m=args.m, n_list=args.n_list, n=args.n, seed=args.seed)
    try:
        cfg = parse_config(args.config, overrides)
    except (ParseError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Outputs(cfg.out)
    record = dict(command=args.command, config=cfg.as_dict(), version=__version__, git_describe=_git_describe(),
                  python=platform.python_version(), argv=list(sys.argv[1:] if argv is None else argv))
    t0 = time.perf_counter()
    func = COMMANDS[args.command][0]
    try:
        code = func(cfg, out, record)
    except (AssumptionViolated, NoInteriorElement) as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        code = EXIT_ASSUMPTION
        record["error"] = str(exc)
    except (ParseError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CutMaxwellError as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_SOLVER
        record["error"] = f"{type(exc).__name__}: {exc}"
    record["exit_code"] = code
    record["wall_time_s"] = time.perf_counter() - t0
    out.add("run.json", _dump_json(record))
    out.flush()
    return code


if __name__ == "__main__":
    sys.exit(main())
