"""Command-line driver: ``spfq quantize | verify | experiment``.

Exit codes: 0 success, 1 a verification suite failed, 2 bad flags or I/O/format
error, 3 rank-deficient activations in perfect mode.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from typing import Optional, Sequence

import numpy as np

from . import analysis as an
from .align import RankDeficientError, solve_min_inf
from .alphabet import Alphabet, RandomStream
from .network import FormatError, load_data, load_network, quantize_network, save_network
from .quantize import QuantConfig, _phase2

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RANK = 0, 1, 2, 3
SUITES = ("bounds", "tails", "projections", "stability", "adversarial", "relu")
VERIFY_COLUMNS = ["suite", "claim", "statistic", "allowed", "passed"]

log = logging.getLogger("spfq")


class UsageError(Exception):
    pass


def _bits(text: str):
    if text.lower() in ("inf", "infinite"):
        return None
    try:
        b = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'inf', got {text!r}") from None
    if b < 2:
        raise argparse.ArgumentTypeError(f"bits must be >= 2, got {b}")
    return b


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spfq", description="Stochastic path-following quantization.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a network against calibration data")
    q.add_argument("--network", required=True, help="network JSON")
    q.add_argument("--data", required=True, help="calibration CSV, m rows x N0 columns")
    q.add_argument("--bits", type=_bits, default=4, help="bits per weight, or 'inf'")
    q.add_argument("--step-constant", type=float, default=1.0, help="C in the step-size rule")
    q.add_argument("--delta", type=float, default=None, help="explicit step size (required with --bits inf)")
    q.add_argument("--mode", choices=("fused", "perfect", "order-r"), default="fused")
    q.add_argument("--order", type=int, default=1, help="alignment order for --mode order-r")
    q.add_argument("--p", type=int, default=2, help="probability exponent for the bounds")
    q.add_argument("--seed", type=_seed, default=0)
    q.add_argument("--out", required=True, help="output network JSON")
    q.add_argument("--report", required=True, help="output report JSON")
    q.add_argument("--timing", action="store_true", help="record wall time (reports then differ run to run)")

    v = sub.add_parser("verify", help="run Monte Carlo checks of the error bounds")
    v.add_argument("--suite", choices=SUITES + ("all",), default="all")
    v.add_argument("--trials", type=int, default=200)
    v.add_argument("--seed", type=_seed, default=0)
    v.add_argument("--csv", required=True, help="output CSV")

    e = sub.add_parser("experiment", help="scaling experiments")
    e.add_argument("--kind", choices=("relative-error", "projection-decay", "bit-sizing"), required=True)
    e.add_argument("--m", type=int, default=16)
    e.add_argument("--N-list", dest="N_list", type=_int_list, default=None)
    e.add_argument("--L", type=int, default=1)
    e.add_argument("--p", type=int, default=2)
    e.add_argument("--trials", type=int, default=20)
    e.add_argument("--delta", type=float, default=None)
    e.add_argument("--epsilon", type=float, default=0.0, help="activation perturbation for bit-sizing")
    e.add_argument("--seed", type=_seed, default=0)
    e.add_argument("--csv", default="-", help="output CSV ('-' for stdout)")
    return parser


# ---------------------------------------------------------------------------
# quantize


def cmd_quantize(args) -> int:
    if args.bits is None and args.delta is None:
        raise UsageError("--bits inf requires --delta")
    if args.delta is not None and not args.delta > 0:
        raise UsageError("--delta must be positive")
    if args.order < 1:
        raise UsageError("--order must be >= 1")
    try:
        cfg = QuantConfig(bits=args.bits, step_constant=args.step_constant, explicit_delta=args.delta,
                          mode=args.mode.replace("-", "_"), order=args.order,
                          prob_exponent=args.p, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    net = load_network(args.network)
    X = load_data(args.data)
    if X.shape[1] != net.in_width(0):
        raise FormatError(f"data: has {X.shape[1]} columns, network expects {net.in_width(0)}")
    qnet, report = quantize_network(net, X, cfg, timing=args.timing)
    save_network(qnet, args.out)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    for r in report.per_layer:
        log.info("layer %d: max column error %.6g (bound %s), overflows %d",
                 r.layer, r.max_col_error, r.bound, r.overflow_count)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def _row(suite, claim, statistic, allowed, passed) -> dict:
    return {"suite": suite, "claim": claim, "statistic": float(statistic),
            "allowed": float(allowed), "passed": bool(passed)}


def suite_bounds(trials: int, seed: int) -> list[dict]:
    m, N, p = 16, 256, 2
    bad, _ = an.bound_violations(m, N, p, 0.1, trials, seed)
    allowed = an.binomial_allowance(trials, math.sqrt(2) * m / N ** p)
    return [_row("bounds", "phase-two error within the quantization bound", bad, allowed, bad <= allowed)]


def suite_tails(trials: int, seed: int) -> list[dict]:
    rows = []
    g = an.trial_rng(seed, 20)
    n, gamma = 8, 0.1
    gauss = g.standard_normal((trials, n))
    frac, allowed = an.tail_statistics(gauss, 1.0, gamma)
    rows.append(_row("tails", "gaussian sup-norm tail fraction", frac, allowed, frac <= allowed))
    m, N, delta = 8, 64, 0.5
    Xt = g.standard_normal((m, N))
    w = g.standard_normal((N, trials))
    uni = np.column_stack([RandomStream(seed, 21, k).uniforms(N) for k in range(trials)])
    _, U, _, _, _ = _phase2(Xt, w, Alphabet(delta), uni)
    sigma = delta * math.sqrt(math.pi / 2) * float(np.max(np.linalg.norm(Xt, axis=0)))
    frac, allowed = an.tail_statistics(U.T, sigma, gamma)
    rows.append(_row("tails", "phase-two error sup-norm tail fraction", frac, allowed, frac <= allowed))
    ok = sum(an.covariance_recursion_check(an.trial_rng(seed, 22, k).standard_normal((8, 1 + k % 64)).T, 1.0)
             for k in range(min(trials, 100)))
    rows.append(_row("tails", "covariance recursion dominated by beta_t I", ok, min(trials, 100),
                     ok == min(trials, 100)))
    return rows


def suite_projections(trials: int, seed: int) -> list[dict]:
    Ns = [20, 40, 80]
    a = an.projection_decay_experiment(4, Ns, trials, seed)
    b = an.projection_decay_experiment(8, Ns, trials, seed)
    means = [r.mean_log_norm_sq for r in a.rows]
    dec = all(x > y for x, y in zip(means, means[1:]))
    return [
        _row("projections", "mean log ||P||^2 decreasing in N (m=4)", a.slope, 0.0, dec and a.slope < 0),
        _row("projections", "slope flattens when m doubles", b.slope, a.slope, a.slope < b.slope < 0),
    ]


def suite_stability(trials: int, seed: int) -> list[dict]:
    bad, allowed = an.stability_bound_check(8, 64, 2, 0.05, trials, seed)
    return [_row("stability", "realigned sup-norm within the stability bound", bad, allowed, bad <= allowed)]


def suite_adversarial(trials: int, seed: int) -> list[dict]:
    rows = []
    for gamma in (0.5, 0.25, 0.1):
        inst = an.adversarial_instance(8, 64, gamma, 0.3, seed)
        b = inst.X @ inst.w
        ratio = solve_min_inf(inst.Xt, b).objective / solve_min_inf(inst.X, b).objective
        print(f"adversarial gamma={gamma}: measured ratio {ratio:.9f}, expected {inst.expected_ratio:.9f}")
        rows.append(_row("adversarial", f"ratio equals 1/gamma (gamma={gamma})", ratio, inst.expected_ratio,
                         abs(ratio - inst.expected_ratio) <= 1e-6 * inst.expected_ratio))
    return rows


def suite_relu(trials: int, seed: int) -> list[dict]:
    rows = []
    for spec, n in (("identity", 16), ("random_psd", 8)):
        mean, threshold = an.relu_expectation_stats(spec, n, trials, seed)
        rows.append(_row("relu", f"mean relu norm above its lower bound ({spec})", mean, threshold,
                         mean >= threshold))
    return rows


SUITE_FUNCS = {"bounds": suite_bounds, "tails": suite_tails, "projections": suite_projections,
               "stability": suite_stability, "adversarial": suite_adversarial, "relu": suite_relu}


def cmd_verify(args) -> int:
    if args.trials < 2:
        raise UsageError("--trials must be >= 2")
    names = SUITES if args.suite == "all" else (args.suite,)
    rows = []
    for name in names:
        rows.extend(SUITE_FUNCS[name](args.trials, args.seed))
    an.write_csv(args.csv, rows, VERIFY_COLUMNS)
    failed = [r for r in rows if not r["passed"]]
    for r in failed:
        print(f"FAILED {r['suite']}: {r['claim']} ({r['statistic']} vs {r['allowed']})", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# experiment


def _write_rows(path: str, rows: list[dict], columns: list[str]) -> None:
    if path == "-":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r[c] for c in columns])
    else:
        an.write_csv(path, rows, columns)


def cmd_experiment(args) -> int:
    if args.m < 1 or args.trials < 1 or args.L < 1 or args.p < 2:
        raise UsageError("--m, --trials, --L must be >= 1 and --p >= 2")
    if args.kind == "relative-error":
        Ns = args.N_list or [128, 256, 512, 1024, 2048, 4096]
        if min(Ns) < 2 * args.m:
            raise UsageError("every N must be at least 2m")
        delta = 1.0 if args.delta is None else args.delta
        if not delta > 0:
            raise UsageError("--delta must be positive")
        t = an.relative_error_sweep(args.m, Ns, args.L, args.p, args.trials, args.seed, delta)
        rows = [{"m": t.m, "L": t.L, "N": r.N, "mean": r.mean, "std": r.std, "bound": r.budget,
                 "slope": t.slope} for r in t.rows]
        _write_rows(args.csv, rows, ["m", "L", "N", "mean", "std", "bound", "slope"])
    elif args.kind == "projection-decay":
        Ns = args.N_list or [20, 40, 80]
        if min(Ns) < 10:
            raise UsageError("every N must be at least 10")
        t = an.projection_decay_experiment(args.m, Ns, args.trials, args.seed)
        rows = [{"m": t.m, "N": r.N, "mean": r.mean_log_norm_sq, "std": r.std_log_norm_sq,
                 "max_norm": r.max_norm, "slope": t.slope} for r in t.rows]
        _write_rows(args.csv, rows, ["m", "N", "mean", "std", "max_norm", "slope"])
    else:
        Ns = args.N_list or [2 ** k for k in range(6, 13)]
        if min(Ns) < max(2, args.m):
            raise UsageError("every N must be at least max(2, m)")
        if not 0 <= args.epsilon < 1:
            raise UsageError("--epsilon must lie in [0, 1)")
        delta = 0.5 if args.delta is None else args.delta
        if not delta > 0:
            raise UsageError("--delta must be positive")
        rows = an.bit_sizing_experiment(args.m, Ns, delta, args.p, args.epsilon, args.seed)
        _write_rows(args.csv, rows, ["N", "levels", "bits", "eta"])
    return EXIT_OK


COMMANDS = {"quantize": cmd_quantize, "verify": cmd_verify, "experiment": cmd_experiment}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except RankDeficientError as exc:
        print(f"spfq: {exc}", file=sys.stderr)
        return EXIT_RANK
    except (UsageError, FormatError, OSError) as exc:
        print(f"spfq: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"spfq: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
