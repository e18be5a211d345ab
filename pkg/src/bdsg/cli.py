"""Command-line entry point: ``bdsg <subcommand> ...``.

Exit codes: 0 success, 2 validation failure, 3 numeric failure, 4 I/O failure.
"""

import argparse
import json
import logging
import sys

import numpy as np

from . import experiment as ex
from .anomaly import classify_batch, epsilon_from_fraction, generate_strong_anomalies, ood_score
from .boundary import BdsgHyperparams, BoundaryModel, sample_boundary, train_boundary, write_history_csv
from .density import FlowModel, FlowTrainOptions, GaussianMixture, build_flow, train_flow
from .errors import BdsgError, ConfigurationError, NumericError, ParseError
from .evaluation import (EvalReport, GridSpec, bp1, bp2, dispersion, grid_metrics,
                         peak_log_density)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("bdsg")


def load_density(path):
    """A ``bdsg.flow`` checkpoint or a mixture JSON document."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") == "bdsg.flow":
        return FlowModel.from_dict(doc["flow"])
    if "components" in doc:
        return GaussianMixture.from_dict(doc)
    raise ConfigurationError(f"{path} is neither a flow checkpoint nor a mixture document")


def _write_text(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _floats(text):
    return [float(v) for v in text.split(",")]


def _ints(text):
    return [int(v) for v in text.split(",")]


def _model_peak(density, *refs):
    return peak_log_density(density, *refs)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(args):
    mix = GaussianMixture.from_json(args.mixture)
    ex.generate_synthetic(mix, args.M, args.seed, args.out)
    log.info("wrote %d rows to %s", args.M, args.out)


def cmd_train_flow(args):
    data = ex.load_dataset(args.data)
    flow = build_flow(data.shape[1], args.n_blocks, tuple(args.hidden), args.activation,
                      args.lipschitz, seed=args.seed)
    opts = FlowTrainOptions(learning_rate=args.lr, seed=args.seed, schedule=args.schedule)

    def report(epoch, nll, _):
        log.info("epoch %d nll %.5f", epoch, nll)

    flow, _ = train_flow(flow, data, args.epochs, min(args.batch_size, len(data)), opts, report)
    flow.save(args.out)


def cmd_train_boundary(args):
    data = ex.load_dataset(args.data)
    density = load_density(args.density)
    hp = BdsgHyperparams(args.lambda1, args.lambda2, len(data), args.N, args.epochs,
                         args.seed, args.eps_div, args.lr)
    widths = args.widths or [data.shape[1], 8, 8, data.shape[1]]

    def report(rec):
        if args.log_every and rec.epoch % args.log_every == 0:
            log.info("epoch %d L %.5f L0 %.5f L1 %.5f L2 %.5f", rec.epoch, rec.total, rec.l0, rec.l1, rec.l2)

    B = train_boundary(density, data, widths, hp, args.activation, report)
    B.save(args.out)
    if args.history:
        write_history_csv(B.history, args.history)


def _threshold(density, frac, reference):
    return epsilon_from_fraction(_model_peak(density, reference), frac)


def cmd_score(args):
    density = load_density(args.density)
    reference = ex.load_dataset(args.reference) if args.reference else None
    if args.mode == "points":
        pts = ex.load_dataset(args.points)
        ref = pts if reference is None else reference
        eps = _threshold(density, args.epsilon, ref)
        lines = [json.dumps(v.to_record()) for v in classify_batch(density, pts, eps)]
        _write_text(args.out, "".join(line + "\n" for line in lines))
    elif args.mode == "ood":
        B = BoundaryModel.load(args.boundary)
        pts = ex.load_dataset(args.points)
        hp = BdsgHyperparams(args.lambda1, args.lambda2, max(len(pts), args.N), args.N, 0,
                             args.seed, args.eps_div)
        res = ood_score(B, density, pts, hp, seed=args.seed)
        _write_text(args.out, json.dumps(res.__dict__, sort_keys=True) + "\n")
    else:
        if reference is None:
            raise ConfigurationError("strong-anomaly scoring needs --reference data to locate the peak")
        B = BoundaryModel.load(args.boundary)
        eps = _threshold(density, args.epsilon, reference)
        res = generate_strong_anomalies(B, density, args.Q, args.N, eps, args.seed)
        keep = res.log_density < np.log(eps)
        recs = [{"point": [float(v) for v in p], "log_density": float(lp), "epsilon": eps,
                 "verdict": "anomalous" if k else "normal", "flag": None}
                for p, lp, k in zip(res.generated, res.log_density, keep) if k or args.all]
        _write_text(args.out, "".join(json.dumps(r) + "\n" for r in recs))


def cmd_eval(args):
    truth = GaussianMixture.from_json(args.truth)
    model = load_density(args.model) if args.model else truth
    grid = GridSpec(args.lower, args.upper, args.resolution)
    reference = ex.load_dataset(args.reference) if args.reference else None
    report = EvalReport(epsilon=args.epsilon, gamma=args.gamma,
                        backend="flow" if isinstance(model, FlowModel) else "cfs")
    pts = grid.points()
    tl, ml = truth.log_density(pts), model.log_density(pts)
    for e in args.sweep:
        report.grid_sweep.append(grid_metrics(truth, model, grid, e, reference, tl, ml).to_dict())
    gm = grid_metrics(truth, model, grid, args.epsilon, reference, tl, ml)
    report.precision, report.recall, report.f1, report.accuracy = gm.precision, gm.recall, gm.f1, gm.accuracy
    report.counts = {"tp": gm.tp, "fp": gm.fp, "fn": gm.fn, "tn": gm.tn}
    if args.boundary:
        B = BoundaryModel.load(args.boundary)
        samples = np.asarray(sample_boundary(B, args.n_samples, args.seed))
        report.bp1 = bp1(samples, truth, args.gamma, args.epsilon)
        report.bp2 = bp2(samples, model, truth, grid, args.gamma, args.epsilon, reference=reference)
        report.dispersion = dispersion(samples)
    _write_text(args.out, report.to_json() + "\n")


def cmd_run(args):
    overrides = {"seed": args.seed}
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if args.backend:
        overrides.setdefault("density", {})["backend"] = args.backend
    boundary = {k: v for k, v in (("epochs", args.epochs), ("lambda1", args.lambda1),
                                  ("lambda2", args.lambda2), ("N", args.N)) if v is not None}
    if boundary:
        overrides["boundary"] = boundary
    if args.M is not None:
        overrides["data"] = {"M": args.M}
    if args.flow_epochs is not None:
        overrides.setdefault("density", {})["flow"] = {"epochs": args.flow_epochs}
    cfg = ex.load_config(args.config, overrides)
    arts = ex.run_experiment(cfg, progress=log.info)
    print(arts.manifest_path)


def cmd_plot(args):
    data = ex.load_dataset(args.data)
    flow_pts = ex.load_dataset(args.flow_samples) if args.flow_samples else None
    bnd = ex.load_dataset(args.boundary) if args.boundary else None
    ex.emit_scatter(data, flow_pts, bnd, args.out)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_bdsg_flags(p, epochs=True):
    p.add_argument("--lambda1", type=float, default=0.3)
    p.add_argument("--lambda2", type=float, default=0.025)
    p.add_argument("--N", type=int, default=256, help="latent batch size")
    p.add_argument("--eps-div", type=float, default=1e-8)
    if epochs:
        p.add_argument("--epochs", type=int, default=3000)
        p.add_argument("--lr", type=float, default=1e-3)


def build_parser():
    parser = argparse.ArgumentParser(prog="bdsg", description="Boundary-of-support generator toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample a Gaussian mixture to CSV")
    p.add_argument("--mixture", required=True, help="mixture JSON document")
    p.add_argument("--M", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-flow", help="fit a residual flow to a CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--n-blocks", type=int, default=8)
    p.add_argument("--hidden", type=_ints, default=[32, 32])
    p.add_argument("--activation", default="elu")
    p.add_argument("--lipschitz", type=float, default=0.9)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--schedule", choices=("cosine", "constant"), default="cosine")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("train-boundary", help="fit the boundary generator against a frozen density")
    p.add_argument("--data", required=True)
    p.add_argument("--density", required=True, help="mixture JSON or flow checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--widths", type=_ints, default=None)
    p.add_argument("--activation", default="tanh")
    p.add_argument("--history", help="optional loss-history CSV")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    _add_bdsg_flags(p)
    p.set_defaults(func=cmd_train_boundary)

    p = sub.add_parser("score", help="anomaly verdicts, OoD loss, or strong-anomaly generation")
    p.add_argument("mode", choices=("points", "ood", "strong"))
    p.add_argument("--density", required=True)
    p.add_argument("--points", help="CSV of points to score (points/ood)")
    p.add_argument("--boundary", help="boundary checkpoint (ood/strong)")
    p.add_argument("--reference", help="CSV used with the model's modes to locate its peak")
    p.add_argument("--epsilon", type=float, default=0.01, help="fraction of the peak density")
    p.add_argument("--Q", type=int, default=4096)
    p.add_argument("--all", action="store_true", help="strong mode: emit rejected samples too")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    _add_bdsg_flags(p, epochs=False)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="grid metrics and boundary precision")
    p.add_argument("--truth", required=True, help="mixture JSON")
    p.add_argument("--model", help="density to compare (default: the truth itself)")
    p.add_argument("--boundary")
    p.add_argument("--reference")
    p.add_argument("--lower", type=_floats, default=[-10.0, -10.0])
    p.add_argument("--upper", type=_floats, default=[10.0, 10.0])
    p.add_argument("--resolution", type=_ints, default=[200, 200])
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--gamma", type=float, default=0.001)
    p.add_argument("--sweep", type=_floats, default=[0.005, 0.01, 0.02])
    p.add_argument("--n-samples", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="full pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--output-dir")
    p.add_argument("--backend", choices=("cfs", "flow"))
    p.add_argument("--M", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--flow-epochs", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plot", help="SVG scatter of data, flow and boundary samples")
    p.add_argument("--data", required=True)
    p.add_argument("--flow-samples")
    p.add_argument("--boundary")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def exit_code_for(exc):
    if isinstance(exc, ex.StageFailure):
        exc = exc.cause
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (BdsgError, ValueError, json.JSONDecodeError)):
        return EXIT_VALIDATION
    raise exc


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except Exception as exc:
        code = exit_code_for(exc)
        print(f"bdsg {args.command}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
