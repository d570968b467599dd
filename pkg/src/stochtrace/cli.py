"""Command-line front end: estimate, bench, fig1, check.

Machine-readable output (TSV/CSV) goes to stdout or ``--out``; human
summaries go to stderr. Exit codes: 0 success, 1 numerical or property
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from contextlib import contextmanager

import numpy as np

from .bench import (
    BenchConfig,
    ESTIMATOR_NAMES,
    conditional_mc_check,
    rotation_sweep,
    run_benchmark,
    write_csv,
)
from .errors import EstimationError, InvalidInputError, InvalidSpecError
from .estimators import (
    build_krylov_factors,
    girard_hutchinson,
    leave_one_out,
    leave_one_out_full,
    loo_full_from_factors,
    projected_gh,
    xtrace_full,
    xtrace_full_naive,
    xtrace_naive,
)
from .kernels import economy_qr, sample_gaussian, sample_haar_orthogonal
from .operators import (
    FAMILIES,
    SpectrumSpec,
    exact_trace,
    make_dense_operator,
    make_diagonal_operator,
    make_identity_operator,
    make_spectrum,
)

# Fixed 5x5 rotation-sweep inputs: a diagonal operator with a simple spectrum
# and a two-column test block whose first column is an eigenvector.
SWEEP_EIGENVALUES = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
SWEEP_TEST_BLOCK = np.array(
    [
        [1.0, 0.0],
        [0.0, 0.5],
        [0.0, 0.5],
        [0.0, 0.5],
        [0.0, 0.5],
    ]
)
SWEEP_THETA_POINTS = 65


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(_positive_int(part) for part in text.split(","))


def _estimator_list(text: str) -> tuple[str, ...]:
    names = tuple(part.strip() for part in text.split(","))
    unknown = set(names) - set(ESTIMATOR_NAMES)
    if unknown:
        raise argparse.ArgumentTypeError(
            f"unknown estimator(s) {sorted(unknown)}; choose from {ESTIMATOR_NAMES}"
        )
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stochtrace",
        description="Matrix-free stochastic trace estimation and benchmarks.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    est = sub.add_parser("estimate", help="run one estimator on a synthetic spectrum")
    est.add_argument("--spectrum", required=True, help="family name or 'family:N'")
    est.add_argument("--n", type=_positive_int, default=None,
                     help="dimension (default 1000 when --spectrum is a family)")
    est.add_argument("--m", type=_positive_int, default=8, help="number of test vectors")
    est.add_argument("--k", type=_positive_int, default=1, help="resampling count")
    est.add_argument("--estimator", choices=ESTIMATOR_NAMES, default="xtrace-full")
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--out", default="-", help="output path (default stdout)")
    est.add_argument(
        "--identity-override",
        action="store_true",
        help="replace the operator by the identity (diagnostic)",
    )
    est.set_defaults(func=cmd_estimate)

    ben = sub.add_parser("bench", help="RMS-error benchmark over seeded trials")
    ben.add_argument("--spectrum", default="all", help="family, 'family:N', or 'all'")
    ben.add_argument("--n", type=_positive_int, default=None, help="dimension (default 1000)")
    ben.add_argument("--m", type=_int_list, default=(4, 8, 16, 32, 64),
                     help="comma-separated test-vector counts")
    ben.add_argument("--k", type=_positive_int, default=25, help="resampling count")
    ben.add_argument("--trials", type=_positive_int, default=1000)
    ben.add_argument("--estimator", type=_estimator_list, default=ESTIMATOR_NAMES,
                     help="comma-separated subset of estimators")
    ben.add_argument("--seed", type=int, default=0)
    ben.add_argument("--out", default="-")
    ben.add_argument("--jobs", type=int, default=1, help="parallel trial workers")
    ben.add_argument("--identity-override", action="store_true")
    ben.set_defaults(func=cmd_bench)

    fig = sub.add_parser("fig1", help="rotation sweep on the fixed 5x5 inputs")
    fig.add_argument("--seed", type=int, default=0)  # accepted for uniformity; unused
    fig.add_argument("--out", default="-")
    fig.set_defaults(func=cmd_fig1)

    chk = sub.add_parser("check", help="run the invariance and equivalence suites")
    chk.add_argument("--seed", type=int, default=0)
    chk.add_argument("--out", default="-")
    chk.add_argument("--mc", action="store_true", help="include Monte-Carlo mean checks")
    chk.add_argument("--samples", type=_positive_int, default=100_000,
                     help="sample count for the MC checks")
    chk.set_defaults(func=cmd_check)
    return parser


@contextmanager
def _open_out(path: str):
    if path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _parse_spectrum(args, default_dim: int = 1000) -> SpectrumSpec:
    if ":" in args.spectrum:
        if args.n is not None:
            raise InvalidSpecError("give either 'family:N' or --spectrum with --n, not both")
        return SpectrumSpec.parse(args.spectrum)
    return SpectrumSpec(args.spectrum, args.n if args.n is not None else default_dim)


def cmd_estimate(args) -> int:
    spec = _parse_spectrum(args)
    eigenvalues = make_spectrum(spec)
    if args.identity_override:
        op = make_identity_operator(spec.dim)
        truth = float(spec.dim)
    else:
        op = make_diagonal_operator(eigenvalues)
        truth = exact_trace(eigenvalues)
    rng = np.random.default_rng(args.seed)
    omega = sample_gaussian(rng, spec.dim, args.m)
    name = args.estimator
    if name == "gh":
        report = girard_hutchinson(op, omega, seed=args.seed)
    elif name == "projected-gh":
        report = projected_gh(op, omega, seed=args.seed)
    elif name == "xtrace":
        report = xtrace_naive(op, omega, seed=args.seed)
    else:
        k = args.k if name == "xtrace-full" else max(args.k, 25)
        report = xtrace_full(op, omega=omega, k=k, rng=rng, seed=args.seed)
    rel_error = abs(report.estimate - truth) / abs(truth)
    with _open_out(args.out) as fh:
        fh.write(f"estimate\t{report.estimate:.17e}\n")
        fh.write(f"true_trace\t{truth:.17e}\n")
        fh.write(f"rel_error\t{rel_error:.17e}\n")
        fh.write(f"matvecs\t{report.matvecs_used}\n")
        fh.write(f"seed\t{report.seed}\n")
    return 0


def cmd_bench(args) -> int:
    if args.spectrum == "all":
        dim = args.n if args.n is not None else 1000
        specs = [SpectrumSpec(family, dim) for family in FAMILIES]
    else:
        specs = [_parse_spectrum(args)]
    rows = []
    for spec in specs:
        cfg = BenchConfig(
            spectrum=spec,
            m_values=args.m,
            trials=args.trials,
            resample_k=args.k,
            estimators=args.estimator,
            base_seed=args.seed,
            identity_override=args.identity_override,
            n_jobs=args.jobs,
        )
        spec_rows = run_benchmark(cfg)
        rows.extend(spec_rows)
        worst = max(r.rms_rel_err for r in spec_rows)
        print(
            f"{spec}: {len(spec_rows)} rows, {args.trials} trials, "
            f"worst rms_rel_err {worst:.3e}",
            file=sys.stderr,
        )
    with _open_out(args.out) as fh:
        write_csv(rows, fh)
    return 0


def cmd_fig1(args) -> int:
    op = make_diagonal_operator(SWEEP_EIGENVALUES)
    thetas = np.linspace(0.0, np.pi / 2.0, SWEEP_THETA_POINTS)
    points = rotation_sweep(op, SWEEP_TEST_BLOCK, thetas)
    with _open_out(args.out) as fh:
        fh.write("theta,xtrace,xtrace_full\n")
        for theta, xt, xtf in points:
            fh.write(f"{theta:.17e},{xt:.17e},{xtf:.17e}\n")
    return 0


def _suite_identity_exactness(rng) -> tuple[bool, str]:
    n = 1000
    op = make_identity_operator(n)
    worst = 0.0
    for m in (2, 10):
        omega = sample_gaussian(rng, n, m)
        for estimate in (
            xtrace_naive(op, omega).estimate,
            xtrace_full_naive(op, omega).estimate,
            xtrace_full(op, omega=omega, k=1, rng=rng).estimate,
            xtrace_full(op, omega=omega, k=25, rng=rng).estimate,
        ):
            worst = max(worst, abs(estimate - n) / n)
    return worst <= 1e-10, f"worst rel err {worst:.2e}"


def _suite_block_triangular(rng) -> tuple[bool, str]:
    n, m = 60, 6
    g = rng.standard_normal((n, n))
    op = make_dense_operator(g @ g.T / n)
    omega = sample_gaussian(rng, n, m)
    base = leave_one_out_full(op, omega)
    worst = 0.0
    for _ in range(20):
        r = np.zeros((m, m))
        r[: m - 1, : m - 1] = rng.standard_normal((m - 1, m - 1))
        r[:, m - 1] = rng.standard_normal(m)
        worst = max(worst, abs(leave_one_out_full(op, omega @ r) - base) / abs(base))
    if worst > 1e-10:
        return False, f"full variant moved by {worst:.2e}"
    # counterexample: the plain variant must move for some such r
    ops = make_diagonal_operator(SWEEP_EIGENVALUES)
    pair = SWEEP_TEST_BLOCK[:, [1, 0]]
    r2 = np.array([[1.0, 1.0], [0.0, 1.0]])
    gap = abs(leave_one_out(ops, pair @ r2) - leave_one_out(ops, pair))
    if gap <= 1e-6:
        return False, f"plain variant unexpectedly invariant (gap {gap:.2e})"
    return True, f"full worst {worst:.2e}; plain counterexample gap {gap:.2e}"


def _suite_last_column(rng) -> tuple[bool, str]:
    from .estimators import check_last_column_dependence

    n, m = 40, 5
    g = rng.standard_normal((n, n))
    op = make_dense_operator(g @ g.T / n)
    omega = sample_gaussian(rng, n, m)
    u1 = sample_haar_orthogonal(rng, m)
    v = sample_haar_orthogonal(rng, m - 1)
    u2 = u1 @ np.block(
        [[v, np.zeros((m - 1, 1))], [np.zeros((1, m - 1)), np.ones((1, 1))]]
    )
    if not check_last_column_dependence(op, omega, u1, u2):
        return False, "same last column gave different values"
    u3 = sample_haar_orthogonal(rng, m)
    if check_last_column_dependence(op, omega, u1, u3):
        return False, "different last columns gave equal values"
    return True, "shared-column equality and generic inequality both hold"


def _suite_efficient_equivalence(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(20, 101))
        m = int(rng.integers(2, 11))
        g = rng.standard_normal((n, n))
        op = make_dense_operator(g @ g.T / n)
        omega = sample_gaussian(rng, n, m)
        efficient = xtrace_full(op, omega=omega, k=1, rng=rng).estimate
        naive = xtrace_full_naive(op, economy_qr(omega).q).estimate
        worst = max(worst, abs(efficient - naive) / abs(naive))
    return worst <= 1e-8, f"worst rel gap {worst:.2e}"


def _suite_coefficient_control(rng) -> tuple[bool, str]:
    """A deliberately wrong residual coefficient must break the equivalence."""
    n, m = 80, 6
    g = rng.standard_normal((n, n))
    op = make_dense_operator(g @ g.T / n)
    omega = sample_gaussian(rng, n, m)
    factors = build_krylov_factors(op, economy_qr(omega).q)
    naive = xtrace_full_naive(op, economy_qr(omega).q).estimate
    good = np.mean([loo_full_from_factors(factors, col) for col in np.eye(m).T])
    # shift the residual coefficient from N-2m+1 to N-2m-1
    from .kernels import ql_orthonormalize_pair, solve_transposed_upper

    wrong_vals = []
    for col in np.eye(m).T:
        rhs = np.zeros((2 * m, 2))
        rhs[:m, 0] = col
        rhs[m:, 1] = col
        s_tilde, _ = ql_orthonormalize_pair(solve_transposed_upper(factors.r, rhs))
        hs = factors.h @ s_tilde
        d1 = s_tilde[:, 0] @ hs[:, 0]
        d2 = s_tilde[:, 1] @ hs[:, 1]
        wrong_vals.append(np.trace(factors.h) - d2 + (n - 2 * m - 1) * d1)
    wrong = float(np.mean(wrong_vals))
    if abs(good - naive) > 1e-8 * abs(naive):
        return False, "correct coefficient failed to match"
    if abs(wrong - naive) <= 1e-8 * abs(naive):
        return False, "wrong coefficient went undetected"
    return True, f"wrong-coefficient gap {abs(wrong - naive):.2e} detected"


def _suite_mc_conditional(rng, samples) -> tuple[bool, str]:
    n, m = 100, 5
    op = make_diagonal_operator(make_spectrum(SpectrumSpec("poly", n)))
    q = economy_qr(sample_gaussian(rng, n, m)).q
    report = conditional_mc_check(op, q, samples, rng=rng)
    gh_gap = abs(report.gh_mc_mean - report.projected_value)
    loo_gap = abs(report.xfull_mc_mean - report.loo_haar_mean)
    ok = gh_gap <= 4.0 * report.gh_mc_se and loo_gap <= 4.0 * report.combined_se
    return ok, (
        f"gh gap {gh_gap / report.gh_mc_se:.2f} se; "
        f"basis-invariance gap {loo_gap / report.combined_se:.2f} se"
    )


def cmd_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    suites = [
        ("identity-exactness", lambda: _suite_identity_exactness(rng)),
        ("block-triangular-invariance", lambda: _suite_block_triangular(rng)),
        ("last-column-dependence", lambda: _suite_last_column(rng)),
        ("efficient-naive-equivalence", lambda: _suite_efficient_equivalence(rng)),
        ("wrong-coefficient-control", lambda: _suite_coefficient_control(rng)),
    ]
    if args.mc:
        suites.append(("conditional-mc", lambda: _suite_mc_conditional(rng, args.samples)))
    failures = []
    with _open_out(args.out) as fh:
        for name, fn in suites:
            ok, detail = fn()
            fh.write(f"{name}\t{'PASS' if ok else 'FAIL'}\t{detail}\n")
            if not ok:
                failures.append(name)
    if failures:
        print(f"{len(failures)} suite(s) failed: {', '.join(failures)}", file=sys.stderr)
        return 1
    print(f"all {len(suites)} suites passed", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidSpecError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EstimationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
