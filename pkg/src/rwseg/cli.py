"""The ``seg`` command line tool.

Subcommands: segment (seeded/prior random-walks solve), learn (max-margin
weight training), aci (dual-decomposition constrained inference), serve
(HTTP service for the scribble UI). Exit codes: 0 success, 2 bad flags or
invalid inputs, 3 solver failure.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import aci as aci_mod
from . import learning
from .errors import FormatError, SolverError, ValidationError
from .lattice import build_bank, default_configs
from .rw_solver import (
    PriorTerm,
    RWProblem,
    WeightVector,
    solve_with_info,
)
from .volume import (
    PriorWeighting,
    load_seed_map,
    load_soft_segmentation,
    load_volume,
    normalize_intensities,
    save_soft_segmentation,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SOLVER = 3


def _parse_betas(text: str) -> list[float]:
    try:
        betas = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad --beta list {text!r}: {exc}") from exc
    if not betas or any(b <= 0 for b in betas):
        raise ValidationError(f"bad --beta list {text!r}: betas must be positive")
    return betas


def _load_problem_inputs(args):
    """Shared segment/aci input pipeline: volume, bank, priors, seeds, weights."""
    vol = normalize_intensities(load_volume(args.volume))
    betas = _parse_betas(args.beta) if getattr(args, "beta", None) else None
    recip_beta = getattr(args, "recip_beta", None)
    eps = getattr(args, "eps", 1.0)
    if betas is None and recip_beta is None:
        configs = default_configs()
    else:
        configs = default_configs(
            betas=betas if betas is not None else (),
            recip_beta=recip_beta,
            recip_epsilon=eps,
        )
    if not configs:
        raise ValidationError("no laplacian terms configured")
    bank = build_bank(vol, configs)

    seeds = load_seed_map(args.seeds) if args.seeds else None

    prior_paths = args.prior or []
    prior_weights = [float(x) for x in (args.prior_weight or [])]
    while len(prior_weights) < len(prior_paths):
        prior_weights.append(1.0)
    if len(prior_weights) > len(prior_paths):
        raise ValidationError("more --prior-weight values than --prior files")
    priors = []
    for p in prior_paths:
        target = load_soft_segmentation(p)
        priors.append(PriorTerm(target, PriorWeighting.uniform(target.num_voxels)))

    if seeds is None and not priors:
        raise ValidationError("need --seeds or at least one --prior for a solvable problem")

    if args.weights:
        weights = learning.load_weights(args.weights)
        if weights.prior_weights.size == 0 and priors:
            weights = WeightVector(weights.laplacian_weights, np.array(prior_weights))
    else:
        weights = WeightVector(np.ones(len(bank)), np.array(prior_weights))

    num_labels = seeds.num_labels if seeds is not None else priors[0].target.num_labels
    problem = RWProblem(bank, weights, tuple(priors), seeds, num_labels)
    return problem


def cmd_segment(args) -> int:
    problem = _load_problem_inputs(args)
    t0 = time.perf_counter()
    seg, info = solve_with_info(problem, tol=args.tol)
    elapsed = time.perf_counter() - t0
    save_soft_segmentation(seg, args.out)
    print(
        f"segmented {problem.dims[0]}x{problem.dims[1]}x{problem.dims[2]} "
        f"({problem.num_labels} labels) in {elapsed:.2f}s, "
        f"cg iterations {[int(i) for i in info.iterations]}"
    )
    return EXIT_OK


def cmd_learn(args) -> int:
    dataset = learning.load_dataset(args.manifest)
    config = learning.LearnConfig(
        lam=args.lam, iterations=args.iters, eta0=args.eta0
    )
    weights, trace = learning.train(dataset, config)
    learning.save_weights(weights, args.out)
    trace_path = args.trace or (str(args.out) + ".trace.csv")
    trace.write_csv(trace_path)
    print(
        f"trained on {len(dataset)} samples for {args.iters} iterations; "
        f"final objective {trace.objective[-1]:.6g}, bound {trace.bound[-1]:.6g}, "
        f"risk {trace.risk[-1]:.6g}"
    )
    return EXIT_OK


def cmd_aci(args) -> int:
    problem = _load_problem_inputs(args)
    partition = aci_mod.build_partition(
        problem.bank.terms[0].edges, args.partition
    )
    t0 = time.perf_counter()
    seg, diag = aci_mod.solve_aci(
        problem,
        partition,
        eta0=args.eta0,
        max_iter=args.max_iter,
        gap_tol=args.gap_tol,
        schedule=args.schedule,
    )
    elapsed = time.perf_counter() - t0
    save_soft_segmentation(seg, args.out)
    diag_path = args.diagnostics or (str(args.out) + ".diag.csv")
    diag.write_csv(diag_path)
    status = "converged" if diag.converged else "NOT converged (best consensus kept)"
    print(
        f"aci {status}: {len(diag.iterations)} iterations in {elapsed:.2f}s, "
        f"final disagreement {diag.max_disagreements[-1]:.3e}"
    )
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    vol = load_volume(args.volume)
    app = create_app(vol, args.labels, ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def _add_problem_flags(p: argparse.ArgumentParser, with_betas: bool) -> None:
    p.add_argument("--volume", required=True, help="input RVOL volume")
    p.add_argument("--seeds", help="seed map JSON")
    p.add_argument("--prior", action="append", help="prior RSEG file (repeatable)")
    p.add_argument(
        "--prior-weight",
        action="append",
        type=float,
        help="weight for the matching --prior (default 1.0)",
    )
    p.add_argument("--weights", help="weights JSON from `seg learn`")
    if with_betas:
        p.add_argument("--beta", help="comma-separated gaussian betas (default 50,100,150)")
        p.add_argument("--recip-beta", type=float, help="reciprocal-weight beta (default 100)")
        p.add_argument("--eps", type=float, default=1.0, help="reciprocal epsilon (default 1)")
    p.add_argument("--out", required=True, help="output RSEG path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seg", description="volumetric random-walks segmentation"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_seg = sub.add_parser("segment", help="seeded / prior-driven segmentation")
    _add_problem_flags(p_seg, with_betas=True)
    p_seg.add_argument("--tol", type=float, default=1e-8, help="CG relative residual")
    p_seg.set_defaults(func=cmd_segment)

    p_learn = sub.add_parser("learn", help="learn term weights from a manifest")
    p_learn.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p_learn.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    p_learn.add_argument("--iters", type=int, default=50)
    p_learn.add_argument("--eta0", type=float, default=1.0, help="subgradient step scale")
    p_learn.add_argument("--out", required=True, help="output weights JSON")
    p_learn.add_argument("--trace", help="trace CSV path (default <out>.trace.csv)")
    p_learn.set_defaults(func=cmd_learn)

    p_aci = sub.add_parser("aci", help="simplex-constrained inference")
    _add_problem_flags(p_aci, with_betas=False)
    p_aci.add_argument("--partition", choices=("edge", "line"), default="edge")
    p_aci.add_argument("--eta0", type=float, default=0.1)
    p_aci.add_argument("--max-iter", type=int, default=2000)
    p_aci.add_argument("--gap-tol", type=float, default=1e-5)
    p_aci.add_argument("--schedule", choices=("harmonic", "adaptive"), default="harmonic")
    p_aci.add_argument("--diagnostics", help="diagnostics CSV path (default <out>.diag.csv)")
    p_aci.set_defaults(func=cmd_aci)

    p_serve = sub.add_parser("serve", help="HTTP service for the scribble UI")
    p_serve.add_argument("--port", type=int, default=8080)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--volume", required=True)
    p_serve.add_argument("--labels", type=int, required=True, help="number of labels")
    p_serve.add_argument("--ui-dir", help="static front-end directory to serve at /")
    p_serve.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FormatError, FileNotFoundError) as exc:
        print(f"seg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverError as exc:
        print(f"seg: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
