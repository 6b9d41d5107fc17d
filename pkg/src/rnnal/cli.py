"""Command-line front end: solve instances, sweep benchmarks, generate
instances, and check exported certificates.

Exit codes: 0 converged / all residues pass, 1 parse or config error,
2 time limit, 3 stalled, 4 partial bench failure.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .alm import SolverOptions, primal_residues, solve
from .cones import proj_p
from .duals import certificate_from_arrays, read_certificate, write_certificate
from .linops import RankDeficient
from .problem import (
    InvalidProblem, ParseError, add_slacks, build_dnn, build_qap, build_theta,
    gen_biq, gen_dqkp, gen_gwd, gen_qkp, parse_generic, parse_gset,
    parse_orlib_biq, parse_qaplib, write_generic,
)

_STATUS_EXIT = {"Converged": 0, "TimeLimit": 2, "Stalled": 3}
_FAMILIES = ("biq", "theta", "qkp", "dqkp", "qap", "gwd", "generic")

_TABLE_HEADER = (f"{'problem':<24} {'alg':<6} {'it':>5} {'itsub':>8} {'r':>4} "
                 f"{'Rp':>9} {'Rd':>9} {'Rc':>9} {'obj':>15} {'time':>8}")


def _sig3(t):
    """Wall times are reported to 3 significant digits."""
    return float(f"{float(t):.3g}")


def _load_problem(family, path, index=0):
    """Parse an instance file into an MbqpProblem.

    qkp/dqkp/gwd have no standard file format of their own; they are
    accepted here as the generic text format (produce one with `gen`).
    """
    if family == "biq":
        probs = parse_orlib_biq(path)
        if not 0 <= index < len(probs):
            raise InvalidProblem(
                f"file holds {len(probs)} instances, index {index} out of range")
        return probs[index]
    if family == "theta":
        n, edges = parse_gset(path)
        return build_theta(n, edges, name=os.path.basename(path))
    if family == "qap":
        w, d = parse_qaplib(path)
        return build_qap(w, d, name=os.path.basename(path))
    prob = parse_generic(path)
    if not prob.name:
        prob.name = os.path.basename(path)
    return prob


def _model_for(prob, slacks):
    """Lift to the DNN model; dependent equality rows fall back to the
    slack form (whose constraint matrix is full rank by construction)."""
    try:
        return build_dnn(prob), []
    except RankDeficient:
        if slacks == "off":
            raise
        return build_dnn(add_slacks(prob)), ["slack_rank_fallback"]


def _report_dict(rep):
    return {
        "problem": rep.name, "n": rep.n, "m": rep.m, "status": rep.status,
        "obj": rep.objective, "Rp": rep.rp, "Rd": rep.rd, "Rc": rep.rc,
        "it": rep.outer_iters, "itsub": rep.sub_iters, "rank": rep.rank,
        "time_secs": _sig3(rep.time_secs), "options": rep.options,
        "flags": rep.flags,
    }


def _table_row(rep, alg="rnnal"):
    return (f"{rep.name[:24]:<24} {alg:<6} {rep.outer_iters:>5} "
            f"{rep.sub_iters:>8} {rep.rank:>4} {rep.rp:>9.1e} {rep.rd:>9.1e} "
            f"{rep.rc:>9.1e} {rep.objective:>15.7e} {_sig3(rep.time_secs):>8g}")


def _write_json(path, payload):
    with open(path, "w") as fh:
        fh.write(json.dumps(payload, sort_keys=True, separators=(",", ":")))
        fh.write("\n")


def _solver_options(args):
    return SolverOptions(
        tol=args.tol, time_limit=args.time_limit, sigma0=args.sigma0,
        rank0=args.rank0, tau=args.tau, seed=args.seed,
        use_slacks=args.slacks)


def cmd_solve(args):
    prob = _load_problem(args.family, args.input, args.index)
    model, extra_flags = _model_for(prob, args.slacks)
    rep = solve(model, _solver_options(args), log_path=args.log,
                condlog_path=args.condlog)
    rep.flags = sorted(set(rep.flags) | set(extra_flags))
    print(_TABLE_HEADER)
    print(_table_row(rep))
    if args.oracle == "auto":
        from .oracle import TooLarge, dense_dnn_solve
        try:
            orc = dense_dnn_solve(build_dnn(prob))
            gap = abs(rep.objective - orc.objective) / (1 + abs(orc.objective))
            print(f"oracle obj={orc.objective:.7e} rel-gap={gap:.2e}")
        except TooLarge:
            print("oracle skipped: instance above the dense cap")
    if args.out:
        _write_json(args.out, _report_dict(rep))
    if args.cert:
        if rep.cert is None:
            print("no certificate recovered (solver stopped early)", file=sys.stderr)
        else:
            write_certificate(args.cert, rep.point, rep.cert, rep.w_matrix)
    return _STATUS_EXIT.get(rep.status, 1)


_GEN_DISPATCH = {
    "biq": (gen_biq, ("n", "density")),
    "qkp": (gen_qkp, ("n", "p")),
    "dqkp": (gen_dqkp, ("n", "d")),
    "gwd": (gen_gwd, ("l", "k")),
}


def _gen_problem(family, spec):
    fn, keys = _GEN_DISPATCH[family]
    missing = [k for k in keys if spec.get(k) is None]
    if missing:
        raise InvalidProblem(f"{family} generator needs {', '.join(keys)}")
    return fn(*(spec[k] for k in keys), seed=spec.get("seed", 0))


def cmd_gen(args):
    if args.family not in _GEN_DISPATCH:
        print(f"no generator for family {args.family!r} "
              f"(choose from {', '.join(sorted(_GEN_DISPATCH))})", file=sys.stderr)
        return 1
    spec = {"n": args.n, "density": args.density, "p": args.p, "d": args.d,
            "l": args.l, "k": args.k, "seed": args.seed}
    prob = _gen_problem(args.family, spec)
    write_generic(prob, args.out)
    print(f"wrote {prob.name}: n={prob.n} m={prob.m} "
          f"|B|={prob.binary_set.size} |E|={len(prob.incompat_set)} -> {args.out}")
    return 0


def cmd_check(args):
    prob = _load_problem(args.family, args.input, args.index)
    model, _ = _model_for(prob, "off")
    data = read_certificate(args.cert)
    dim = model.dim
    tol = args.tol
    if "R" not in data:
        # primal-only export: the cone + affine residue is all we can verify
        y = data["Y"]
        if y.shape != (dim, dim):
            print(f"certificate dim {y.shape[0]} != instance dim {dim}",
                  file=sys.stderr)
            return 1
        z = proj_p(y.copy(), model.zero_pattern)
        rp = primal_residues(model, y, z)
        print(f"Rp={rp:.3e} (missing_certificate: no dual blocks, "
              f"Rd/Rc not checkable)")
        return 0 if rp < tol else 3
    if data["R"].shape[0] != model.n:
        print(f"certificate n {data['R'].shape[0]} != instance n {model.n}",
              file=sys.stderr)
        return 1
    rhat = np.vstack([np.eye(1, data["R"].shape[1]), data["R"]])
    y = rhat @ rhat.T
    z = proj_p(y.copy(), model.zero_pattern)
    rp = primal_residues(model, y, z)
    cert = certificate_from_arrays(model, data)
    rd, _ = cert.psd_residue()
    s_fro = cert.s_fro()
    y_fro = float(np.linalg.norm(y))
    rc = abs(float(np.sum(cert.s_dense() * y))) / (1.0 + y_fro + s_fro)
    # the stationarity assembly identity catches small multiplier drift
    # that the relatively-scaled Rd/Rc can absorb
    ra = cert.assembly_residual()
    ok = max(rp, rd, rc, ra) < tol
    print(f"Rp={rp:.3e} Rd={rd:.3e} Rc={rc:.3e} Ra={ra:.3e} tol={tol:g} "
          f"-> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 3


def _bench_row(row):
    """Worker: build the row's model, solve, optionally cross-check."""
    family = row.get("family", "generic")
    opts_over = dict(row.get("options", {}))
    oracle_mode = row.pop("_oracle", "off")
    if "input" in row:
        prob = _load_problem(family, row["input"], row.get("index", 0))
    else:
        prob = _gen_problem(family, row)
    slacks = opts_over.get("use_slacks", "auto")
    model, extra_flags = _model_for(prob, slacks)
    rep = solve(model, SolverOptions(**opts_over))
    rep.flags = sorted(set(rep.flags) | set(extra_flags))
    out = _report_dict(rep)
    out["_row"] = _table_row(rep)
    if oracle_mode == "auto":
        from .oracle import TooLarge, dense_dnn_solve
        try:
            orc = dense_dnn_solve(build_dnn(prob))
            out["oracle_obj"] = orc.objective
            out["oracle_gap"] = (abs(rep.objective - orc.objective)
                                 / (1 + abs(orc.objective)))
        except TooLarge:
            pass
    return out


def cmd_bench(args):
    try:
        with open(args.manifest) as fh:
            rows = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read manifest: {exc}", file=sys.stderr)
        return 1
    if not isinstance(rows, list) or not rows:
        print("manifest is empty", file=sys.stderr)
        return 1
    for row in rows:
        row["_oracle"] = args.oracle
    workers = min(len(rows), int(os.environ.get("RNNAL_THREADS", "1")))
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_bench_row, row) for row in rows]
            for i, fut in enumerate(futs):
                try:
                    results.append(fut.result())
                except Exception as exc:  # report per-row, keep sweeping
                    results.append({"problem": f"row {i}", "status": "Error",
                                    "error": str(exc)})
    else:
        for i, row in enumerate(rows):
            try:
                results.append(_bench_row(row))
            except Exception as exc:
                results.append({"problem": f"row {i}", "status": "Error",
                                "error": str(exc)})
    print(_TABLE_HEADER + (f" {'oracle':>15}" if args.oracle == "auto" else ""))
    for res in results:
        if res["status"] == "Error":
            print(f"{res['problem']:<24} ERROR  {res['error']}")
            continue
        line = res.pop("_row")
        if "oracle_obj" in res:
            line += f" {res['oracle_obj']:>15.7e}"
        print(line)
    if args.out:
        for res in results:
            res.pop("_row", None)
        _write_json(args.out, {"rows": results})
    bad = sum(1 for res in results if res["status"] != "Converged")
    return 4 if bad else 0


def _add_solver_flags(p):
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--time-limit", type=float, default=3600.0)
    p.add_argument("--sigma0", type=float, default=1.0)
    p.add_argument("--rank0", type=int, default=None)
    p.add_argument("--tau", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slacks", choices=("auto", "on", "off"), default="auto")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="rnnal",
        description="DNN relaxations of mixed-binary QPs by low-rank "
                    "Riemannian augmented Lagrangian descent")
    sub = ap.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("solve", help="solve one instance")
    ps.add_argument("--family", choices=_FAMILIES, required=True)
    ps.add_argument("--input", required=True)
    ps.add_argument("--index", type=int, default=0,
                    help="instance index inside multi-instance files")
    _add_solver_flags(ps)
    ps.add_argument("--out", help="JSON report path")
    ps.add_argument("--log", help="per-outer-iteration JSON-lines log")
    ps.add_argument("--condlog", help="per-iteration regularity CSV")
    ps.add_argument("--cert", help="write the dual certificate here")
    ps.add_argument("--oracle", choices=("off", "auto"), default="off")
    ps.set_defaults(fn=cmd_solve)

    pb = sub.add_parser("bench", help="run a manifest of instances")
    pb.add_argument("--manifest", required=True,
                    help="JSON list of rows: file refs or generator specs")
    pb.add_argument("--out", help="JSON summary path")
    pb.add_argument("--oracle", choices=("off", "auto"), default="off")
    pb.set_defaults(fn=cmd_bench)

    pg = sub.add_parser("gen", help="write a generated instance (generic format)")
    pg.add_argument("--family", choices=_FAMILIES, required=True)
    pg.add_argument("--n", type=int)
    pg.add_argument("--density", type=float, help="biq triplet density")
    pg.add_argument("--p", type=float, help="qkp profit density")
    pg.add_argument("--d", type=float, help="dqkp edge ratio |E| = floor(d*n)")
    pg.add_argument("--l", type=int, help="gwd left support size")
    pg.add_argument("--k", type=int, help="gwd right support size")
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--out", required=True)
    pg.set_defaults(fn=cmd_gen)

    pc = sub.add_parser("check", help="recompute residues of a certificate")
    pc.add_argument("--family", choices=_FAMILIES, required=True)
    pc.add_argument("--input", required=True)
    pc.add_argument("--index", type=int, default=0)
    pc.add_argument("--cert", required=True)
    pc.add_argument("--tol", type=float, default=1e-6)
    pc.set_defaults(fn=cmd_check)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        code = args.fn(args)
    except (ParseError, InvalidProblem, RankDeficient, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    return code


if __name__ == "__main__":
    sys.exit(main())
