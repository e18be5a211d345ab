"""Config-driven experiment pipeline: data -> density -> boundary -> report.

A run is described by one JSON document. All randomness flows from a master
seed through :func:`derive_seed`, so a config plus seed pins every number in
the emitted report.
"""

import copy
import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .anomaly import ModeSet, assign_clusters, ood_score, separation_check
from .boundary import BdsgHyperparams, BoundaryModel, sample_boundary, train_boundary, write_history_csv
from .density import FlowModel, FlowTrainOptions, GaussianMixture, build_flow, train_flow
from .errors import BdsgError, ConfigurationError, ParseError
from .evaluation import (EvalReport, GridSpec, auprc, auroc, bp1, bp2, dispersion,
                         grid_metrics, peak_log_density, write_grid_csv)

log = logging.getLogger(__name__)

STAGES = ("data", "flow", "boundary", "evaluate")

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/experiment",
    "data": {"M": 1024, "holdout": 1024},
    "density": {
        "backend": "cfs",
        "reference_flow": False,
        "flow": {"n_blocks": 8, "hidden": [32, 32], "activation": "elu", "lipschitz": 0.9,
                 "epochs": 100, "batch_size": 256, "learning_rate": 1e-3, "schedule": "cosine",
                 "train_size": None},
        "flow_checkpoint": None,
    },
    "boundary": {"widths": [2, 8, 8, 2], "activation": "tanh", "lambda1": 0.3, "lambda2": 0.025,
                 "N": 256, "epochs": 3000, "learning_rate": 1e-3, "eps_div": 1e-8},
    "grid": {"lower": [-10.0, -10.0], "upper": [10.0, 10.0], "resolution": [200, 200]},
    "metrics": {"epsilon": 0.01, "gamma": 0.001, "epsilon_sweep": [0.005, 0.01, 0.02],
                "n_boundary_samples": 1024, "n_anomalies": 1024, "dump_grid": False},
}


def derive_seed(master_seed, stage):
    """Stage seed = first 8 bytes (little endian) of sha256("<master>:<stage>")."""
    digest = hashlib.sha256(f"{int(master_seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: str = "."
    mixture: GaussianMixture = None
    dataset_path: str = None

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def backend(self):
        return self.raw["density"]["backend"]

    @property
    def output_dir(self):
        return os.path.join(self.base_dir, self.raw["output_dir"])

    def hyperparams(self, seed):
        b, m = self.raw["boundary"], self.raw["data"]
        return BdsgHyperparams(lambda1=b["lambda1"], lambda2=b["lambda2"], M=m["M"], N=b["N"],
                               epochs=b["epochs"], seed=seed, eps_div=b["eps_div"],
                               learning_rate=b["learning_rate"])

    def grid(self):
        g = self.raw["grid"]
        return GridSpec(g["lower"], g["upper"], g["resolution"])

    def canonical_bytes(self):
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()


def load_config(source, overrides=None, base_dir=None):
    """Build a validated config from a path, JSON text, or dict plus overrides."""
    if isinstance(source, dict):
        raw, base = source, base_dir or "."
    else:
        try:
            with open(source) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {source} is not valid JSON: {exc}") from exc
        base = base_dir or os.path.dirname(os.path.abspath(source))
    raw = _merge(DEFAULT_CONFIG, raw)
    if overrides:
        raw = _merge(raw, overrides)
    return validate_config(raw, base)


def validate_config(raw, base_dir="."):
    backend = raw["density"].get("backend")
    if backend not in ("cfs", "flow"):
        raise ConfigurationError(f"density backend must be 'cfs' or 'flow', got {backend!r}")
    data = raw["data"]
    sources = [k for k in ("mixture", "mixture_path", "csv") if data.get(k) is not None]
    if len(sources) != 1:
        raise ConfigurationError(f"exactly one of data.mixture / data.mixture_path / data.csv required, got {sources}")
    mixture, dataset_path = None, None
    if "mixture" in sources:
        mixture = GaussianMixture.from_dict(data["mixture"])
    elif "mixture_path" in sources:
        path = os.path.join(base_dir, data["mixture_path"])
        if not os.path.exists(path):
            raise ConfigurationError(f"mixture file {path} not found")
        mixture = GaussianMixture.from_json(path)
    else:
        dataset_path = os.path.join(base_dir, data["csv"])
        if not os.path.exists(dataset_path):
            raise ConfigurationError(f"dataset {dataset_path} not found")
    checkpoint = raw["density"].get("flow_checkpoint")
    if checkpoint and not os.path.exists(os.path.join(base_dir, checkpoint)):
        raise ConfigurationError(f"flow checkpoint {checkpoint} not found")
    if backend == "cfs" and mixture is None:
        raise ConfigurationError("the cfs backend needs a closed-form mixture, not a CSV dataset")
    if int(data["M"]) < 1:
        raise ConfigurationError("M must be at least 1")
    widths = raw["boundary"]["widths"]
    if len(widths) < 2:
        raise ConfigurationError("boundary widths need at least two entries")
    cfg = ExperimentConfig(raw, base_dir, mixture, dataset_path)
    cfg.hyperparams(0)   # N <= M, lambdas, eps_div
    cfg.grid()
    m = raw["metrics"]
    if not 0 < m["gamma"] < m["epsilon"]:
        raise ConfigurationError("metrics need 0 < gamma < epsilon")
    return cfg


# --------------------------------------------------------------------------
# data I/O
# --------------------------------------------------------------------------

def write_dataset(data, path):
    data = np.asarray(data, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k + 1}" for k in range(data.shape[1])])
        for row in data:
            w.writerow([repr(float(v)) for v in row])


def generate_synthetic(spec, M, seed, path=None, return_labels=False):
    """``M`` draws from a mixture; optionally written as CSV with an ``x1..xd`` header."""
    if M < 1:
        raise ConfigurationError(f"M must be at least 1, got {M}")
    data, labels = spec.sample(int(M), np.random.default_rng(seed), return_labels=True)
    if path is not None:
        write_dataset(data, path)
    return (data, labels) if return_labels else data


def _is_number(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def load_dataset(path):
    """Numeric CSV -> ``(n, d)`` array; a non-numeric first row is taken as a header."""
    with open(path, newline="") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path} holds no data", line=1)
    if not all(_is_number(c) for c in rows[0][1]):
        rows = rows[1:]
    if not rows:
        raise ParseError(f"{path} holds a header but no data", line=2)
    width = len(rows[0][1])
    out = np.empty((len(rows), width))
    for k, (line, row) in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"expected {width} columns, found {len(row)}", line=line)
        for j, cell in enumerate(row):
            try:
                out[k, j] = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric cell {cell!r}", line=line) from None
    return out


# --------------------------------------------------------------------------
# scatter plot
# --------------------------------------------------------------------------

SVG_SIZE = 600
COLORS = {"data": "red", "flow": "green", "boundary": "blue"}


def emit_scatter(data, flow_samples, boundary, path=None, radius=2.0):
    """SVG scatter: data red, flow samples green, boundary samples blue."""
    sets = {"data": data, "flow": flow_samples, "boundary": boundary}
    arrays = {}
    for name, pts in sets.items():
        if pts is None:
            continue
        pts = np.asarray(pts, dtype=np.float64)
        if pts.size == 0:
            continue
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ConfigurationError(f"{name} points must be 2-D for plotting, got shape {pts.shape}")
        arrays[name] = pts
    if arrays:
        allpts = np.vstack(list(arrays.values()))
        lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    else:
        lo, hi = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    center = (lo + hi) / 2
    half = max(float((hi - lo).max()) / 2, 1e-9) * 1.05
    scale = SVG_SIZE / (2 * half)

    def to_px(p):
        return (p[:, 0] - center[0] + half) * scale, (center[1] + half - p[:, 1]) * scale

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" '
             f'viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">',
             f'<rect width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>']
    for name in ("data", "flow", "boundary"):
        if name not in arrays:
            continue
        lines.append(f'<g class="{name}">')
        xs, ys = to_px(arrays[name])
        for x, y in zip(xs, ys):
            lines.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="{radius}" fill="{COLORS[name]}"/>')
        lines.append("</g>")
    lines.append("</svg>")
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

class StageFailure(BdsgError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunArtifacts:
    output_dir: str
    files: dict = field(default_factory=dict)
    report: EvalReport = None
    manifest_path: str = None
    boundary: BoundaryModel = None
    flow: FlowModel = None
    data: np.ndarray = None
    samples: np.ndarray = None


def config_hash(config):
    return hashlib.sha256(config.canonical_bytes()).hexdigest()


def _write_manifest(cfg, arts, status, stage=None, error=None):
    manifest = {
        "config_sha256": config_hash(cfg),
        "config": cfg.raw,
        "seed": cfg.seed,
        "stage_seeds": {s: derive_seed(cfg.seed, s) for s in STAGES},
        "artifacts": {k: os.path.basename(v) for k, v in sorted(arts.files.items())},
        "status": status,
    }
    if stage is not None:
        manifest["failed_stage"] = stage
        manifest["error"] = f"{type(error).__name__}: {error}"
    path = os.path.join(arts.output_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    arts.manifest_path = path
    return path


def verify_manifest(manifest_path, config):
    """True when the manifest hash matches ``config`` (an ExperimentConfig or path)."""
    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    return manifest.get("config_sha256") == config_hash(config)


def fit_flow(cfg, data, seed):
    """Train the flow; ``train_size`` above M tops up with fresh mixture draws."""
    f = cfg.raw["density"]["flow"]
    n_train = f.get("train_size") or len(data)
    train = data[:n_train]
    if n_train > len(data):
        if cfg.mixture is None:
            raise ConfigurationError("flow.train_size above the dataset size needs a mixture to sample from")
        extra = generate_synthetic(cfg.mixture, n_train - len(data), derive_seed(cfg.seed, "flow_data"))
        train = np.vstack([data, extra])
    flow = build_flow(data.shape[1], f["n_blocks"], tuple(f["hidden"]), f["activation"],
                      f["lipschitz"], seed=seed)
    opts = FlowTrainOptions(learning_rate=f["learning_rate"], seed=seed, schedule=f["schedule"])
    return train_flow(flow, train, f["epochs"], min(f["batch_size"], len(train)), opts)


def _anomaly_set(truth, grid, n, epsilon_frac, peak, rng):
    """Uniform grid-box points whose true density falls below the threshold."""
    lower, upper = np.array(grid.lower), np.array(grid.upper)
    out, thresh = [], peak + np.log(epsilon_frac)
    while sum(len(o) for o in out) < n:
        cand = rng.uniform(lower, upper, size=(4 * n, grid.dim))
        out.append(cand[truth.log_density(cand) < thresh])
    return np.vstack(out)[:n]


def evaluate_run(cfg, data, labels, holdout, density, flow, B, seed):
    """Assemble the report for a trained run."""
    m = cfg.raw["metrics"]
    rng = np.random.default_rng(seed)
    truth = cfg.mixture
    grid = cfg.grid()
    samples = sample_boundary(B, m["n_boundary_samples"], int(rng.integers(2 ** 63)))
    report = EvalReport(epsilon=m["epsilon"], gamma=m["gamma"], backend=cfg.backend)
    report.dispersion = dispersion(samples)
    hp = cfg.hyperparams(0)
    final = B.history[-1] if B.history else None
    report.losses = {"final_train": None if final is None else final.__dict__}
    if holdout is not None and len(holdout):
        report.losses["holdout"] = ood_score(B, density, holdout, hp, seed=int(rng.integers(2 ** 63))).__dict__
    if truth is not None:
        compare = flow if flow is not None else density
        pts = grid.points()
        truth_log = truth.log_density(pts)
        model_log = compare.log_density(pts)
        for eps in m["epsilon_sweep"]:
            report.grid_sweep.append(grid_metrics(truth, compare, grid, eps, reference=data,
                                                  truth_log=truth_log, model_log=model_log).to_dict())
        gm = grid_metrics(truth, compare, grid, m["epsilon"], reference=data,
                          truth_log=truth_log, model_log=model_log)
        report.precision, report.recall, report.f1, report.accuracy = gm.precision, gm.recall, gm.f1, gm.accuracy
        report.counts = {"tp": gm.tp, "fp": gm.fp, "fn": gm.fn, "tn": gm.tn}
        truth_peak = peak_log_density(truth)
        report.bp1 = bp1(samples, truth, m["gamma"], m["epsilon"], truth_peak=truth_peak)
        report.bp2 = bp2(samples, compare, truth, grid, m["gamma"], m["epsilon"],
                         truth_peak=truth_peak, reference=data)
        anomalies = _anomaly_set(truth, grid, m["n_anomalies"], m["epsilon"], truth_peak, rng)
        normals = holdout if holdout is not None else data
        scores = -np.concatenate([density.log_density(normals), density.log_density(anomalies)])
        y = np.r_[np.zeros(len(normals)), np.ones(len(anomalies))]
        report.auroc, report.auprc = auroc(scores, y), auprc(scores, y)
        if labels is not None and truth.n_components > 1:
            modes = ModeSet.from_labels(data, labels)
            idx, _ = assign_clusters(samples, modes)
            report.cluster_fractions = [float(np.mean(idx == k)) for k in range(modes.K)]
            ok, _, _ = separation_check(samples, modes)
            report.separation_pass_rate = float(np.mean(ok))
        if m.get("dump_grid"):
            report_grid = (pts, np.exp(truth_log), np.exp(model_log))
        else:
            report_grid = None
    else:
        report_grid = None
    return report, samples, report_grid


def run_experiment(config, progress=None):
    """Execute all stages, writing artifacts under ``config.output_dir``.

    On failure a manifest naming the failed stage is written and a
    :class:`StageFailure` is raised.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    arts = RunArtifacts(cfg.output_dir)
    try:
        os.makedirs(cfg.output_dir, exist_ok=True)
    except OSError as exc:
        raise StageFailure("data", exc) from exc
    with open(os.path.join(cfg.output_dir, "config.json"), "w") as fh:
        json.dump(cfg.raw, fh, indent=2, sort_keys=True)
    arts.files["config"] = os.path.join(cfg.output_dir, "config.json")
    stage = "data"
    try:
        labels, holdout = None, None
        data_seed = derive_seed(cfg.seed, "data")
        n = int(cfg.raw["data"]["M"])
        if cfg.mixture is not None:
            path = os.path.join(cfg.output_dir, "data.csv")
            data, labels = generate_synthetic(cfg.mixture, n, data_seed, path, return_labels=True)
            arts.files["data"] = path
            n_hold = int(cfg.raw["data"].get("holdout") or 0)
            if n_hold:
                holdout = generate_synthetic(cfg.mixture, n_hold, derive_seed(cfg.seed, "holdout"))
        else:
            data = load_dataset(cfg.dataset_path)
        arts.data = data

        stage = "flow"
        flow = None
        needs_flow = cfg.backend == "flow" or cfg.raw["density"].get("reference_flow")
        checkpoint = cfg.raw["density"].get("flow_checkpoint")
        if needs_flow and checkpoint:
            flow = FlowModel.load(os.path.join(cfg.base_dir, checkpoint))
            if flow.dim != data.shape[1]:
                raise ConfigurationError(f"flow checkpoint has dimension {flow.dim}, data has {data.shape[1]}")
        elif needs_flow:
            flow, history = fit_flow(cfg, data, derive_seed(cfg.seed, "flow"))
            path = os.path.join(cfg.output_dir, "flow.json")
            flow.save(path)
            arts.files["flow"] = path
            hpath = os.path.join(cfg.output_dir, "flow_history.csv")
            with open(hpath, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "nll"])
                for k, v in enumerate(history):
                    w.writerow([k, repr(v)])
            arts.files["flow_history"] = hpath
        arts.flow = flow
        density = cfg.mixture if cfg.backend == "cfs" else flow
        if progress:
            progress("flow done")

        stage = "boundary"
        bcfg = cfg.raw["boundary"]
        hp = cfg.hyperparams(derive_seed(cfg.seed, "boundary"))
        hp.M = len(data)
        B = train_boundary(density, data, bcfg["widths"], hp, bcfg["activation"])
        path = os.path.join(cfg.output_dir, "boundary.json")
        B.save(path)
        arts.files["boundary"] = path
        hist = os.path.join(cfg.output_dir, "loss_history.csv")
        write_history_csv(B.history, hist)
        arts.files["loss_history"] = hist
        arts.boundary = B
        if progress:
            progress("boundary done")

        stage = "evaluate"
        report, samples, grid_dump = evaluate_run(cfg, data, labels, holdout, density, flow, B,
                                                  derive_seed(cfg.seed, "evaluate"))
        arts.report, arts.samples = report, samples
        path = os.path.join(cfg.output_dir, "report.json")
        with open(path, "w") as fh:
            fh.write(report.to_json())
        arts.files["report"] = path
        bpath = os.path.join(cfg.output_dir, "boundary_samples.csv")
        write_dataset(samples, bpath)
        arts.files["boundary_samples"] = bpath
        if data.shape[1] == 2:
            flow_pts = None if flow is None else flow.sample(len(data), np.random.default_rng(derive_seed(cfg.seed, "plot")))
            spath = os.path.join(cfg.output_dir, "scatter.svg")
            emit_scatter(data, flow_pts, samples, spath)
            arts.files["scatter"] = spath
        if grid_dump is not None:
            gpath = os.path.join(cfg.output_dir, "grid.csv")
            write_grid_csv(gpath, *grid_dump)
            arts.files["grid"] = gpath
    except Exception as exc:
        _write_manifest(cfg, arts, "failed", stage, exc)
        raise StageFailure(stage, exc) from exc
    _write_manifest(cfg, arts, "ok")
    return arts
