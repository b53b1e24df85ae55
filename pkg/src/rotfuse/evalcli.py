"""Evaluation metrics and analysis artifacts for trained fusion models."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from .model import FusionNet, _acos_terms
from .synthdata import Dataset, perturb_rotations


class ConfigMismatch(ValueError):
    pass


@dataclass
class ErrorMatrix:
    """Mean angular error per (target camera, reference camera); NaN where no pairs."""

    cameras: list[int]
    mean: np.ndarray
    count: np.ndarray

    def cell(self, tgt: int, ref: int) -> float | None:
        i, j = self.cameras.index(tgt), self.cameras.index(ref)
        return None if self.count[i, j] == 0 else float(self.mean[i, j])


@dataclass
class EvalResult:
    mean: float
    matrix: ErrorMatrix
    errors: np.ndarray  # per-sample degrees
    cam_tgt: np.ndarray
    cam_ref: np.ndarray


def _predict(model, a: dict, batch: int = 1024) -> np.ndarray:
    out = []
    for s in range(0, len(a["obs_tgt"]), batch):
        sl = slice(s, s + batch)
        out.append(model.predict(a["obs_tgt"][sl], a["obs_ref"][sl], a["R"][sl]))
    return np.concatenate(out) if out else np.zeros((0, 3))


def error_matrix(cameras: list[int], cam_tgt, cam_ref, errors) -> ErrorMatrix:
    n = len(cameras)
    pos = {c: k for k, c in enumerate(cameras)}
    total = np.zeros((n, n))
    count = np.zeros((n, n), dtype=np.int64)
    for t, r, e in zip(cam_tgt, cam_ref, errors):
        total[pos[int(t)], pos[int(r)]] += e
        count[pos[int(t)], pos[int(r)]] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return ErrorMatrix(list(cameras), mean, count)


def evaluate(model, dataset: Dataset, selector: str = "unseen", test_fold: int = 0, rotations=None) -> EvalResult:
    """Final-block target gaze vs ground truth over the selected pairs.

    ``model`` is anything with ``predict(obs_tgt, obs_ref, R) -> (N, 3)``.
    ``rotations`` overrides the dataset rotations (noise sweeps).
    """
    cfg = getattr(model, "config", None)
    if cfg is not None and cfg.obs_dim != dataset.obs_dim:
        raise ConfigMismatch(f"model expects obs_dim {cfg.obs_dim}, dataset has {dataset.obs_dim}")
    a = dataset.arrays(dataset.select(selector, test_fold))
    if rotations is not None:
        a["R"] = rotations
    pred = _predict(model, a)
    errors = geo.angular_error(pred, a["g_tgt"]) if len(pred) else np.zeros(0)
    errors = np.atleast_1d(errors)
    mean = float(errors.mean()) if errors.size else float("nan")
    cams = sorted(set(a["cam_tgt"].tolist()) | set(a["cam_ref"].tolist()))
    return EvalResult(mean, error_matrix(cams, a["cam_tgt"], a["cam_ref"], errors), errors, a["cam_tgt"], a["cam_ref"])


def write_error_grid(matrix: ErrorMatrix, path) -> None:
    """Camera-by-camera grid: rows are targets, columns references, ``-`` where absent."""
    width = 9
    lines = ["tgt\\ref".ljust(width) + "".join(str(c).rjust(width) for c in matrix.cameras)]
    for i, c in enumerate(matrix.cameras):
        cells = ["-".rjust(width) if matrix.count[i, j] == 0 else f"{matrix.mean[i, j]:{width}.3f}" for j in range(len(matrix.cameras))]
        lines.append(str(c).ljust(width) + "".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_matrix_table(matrix: ErrorMatrix, path, delimiter: str = ",") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(["cam_tgt", "cam_ref", "mean_deg", "count"])
        for i, t in enumerate(matrix.cameras):
            for j, r in enumerate(matrix.cameras):
                if matrix.count[i, j]:
                    w.writerow([t, r, repr(float(matrix.mean[i, j])), int(matrix.count[i, j])])


def write_sample_log(result: EvalResult, path, delimiter: str = ",") -> None:
    """Per-sample errors; cell means of the error matrix are recomputable from this file."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(["cam_tgt", "cam_ref", "error_deg"])
        for t, r, e in zip(result.cam_tgt, result.cam_ref, result.errors):
            w.writerow([int(t), int(r), repr(float(e))])


# -- contribution of each view -------------------------------------------------


@dataclass
class ContributionReport:
    """Reference-view share of the gradient reaching the backbone features.

    ``pairs`` maps (target camera, reference camera) to the mean ratio over
    that pair's samples; ``ratio_ref`` holds the per-sample values.
    """

    pairs: dict
    ratio_ref: np.ndarray
    ratio_tgt: np.ndarray
    n_degenerate: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.ratio_ref)) if self.ratio_ref.size else float("nan")


def backbone_gradients(model: FusionNet, obs_tgt, obs_ref, R, gt_tgt, scale: float = 1.0):
    """Per-sample ``dL/df_tgt`` and ``dL/df_ref`` of the final target angular loss."""
    tr = model.forward(obs_tgt, obs_ref, R)
    gt = np.asarray(gt_tgt, dtype=np.float64).reshape(-1, 3)
    _, dv = _acos_terms(tr.final, gt)
    dg = [np.zeros_like(g) for g in tr.g_tgt]
    dg[-1] = scale * dv[:, None] * gt
    _, df_t, df_r = model.backward(tr, dg, None)
    return df_t, df_r


def contribution_from_arrays(model: FusionNet, obs_tgt, obs_ref, R, gt_tgt, scale: float = 1.0):
    """Per-sample ``(ratio_ref, ratio_tgt, degenerate_mask)`` using L1 gradient mass."""
    df_t, df_r = backbone_gradients(model, obs_tgt, obs_ref, R, gt_tgt, scale)
    a_r = np.abs(df_r).sum(axis=1)
    a_t = np.abs(df_t).sum(axis=1)
    total = a_r + a_t
    degenerate = total <= 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio_ref = np.where(degenerate, np.nan, a_r / np.where(degenerate, 1.0, total))
    return ratio_ref, 1.0 - ratio_ref, degenerate


def contribution_ratio(model: FusionNet, dataset: Dataset, selector: str = "unseen", test_fold: int = 0) -> ContributionReport:
    a = dataset.arrays(dataset.select(selector, test_fold))
    ratio_ref, ratio_tgt, degenerate = contribution_from_arrays(model, a["obs_tgt"], a["obs_ref"], a["R"], a["g_tgt"])
    keep = ~degenerate
    pairs = {}
    for t, r, v in zip(a["cam_tgt"][keep], a["cam_ref"][keep], ratio_ref[keep]):
        pairs.setdefault((int(t), int(r)), []).append(float(v))
    pairs = {k: float(np.mean(v)) for k, v in sorted(pairs.items())}
    return ContributionReport(pairs, ratio_ref[keep], ratio_tgt[keep], int(degenerate.sum()))


def write_contribution_table(report: ContributionReport, path, delimiter: str = ",") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(["cam_tgt", "cam_ref", "ratio_ref", "ratio_tgt"])
        for (t, r), v in report.pairs.items():
            w.writerow([t, r, repr(v), repr(1.0 - v)])


# -- rotatability of the initial rotatable features ---------------------------


class DegenerateDenominator(ValueError):
    pass


DEGENERATE_TOL = 1e-12


@dataclass
class RotatabilityStats:
    mean: float
    median: float
    frac_below_one: float
    ratios: np.ndarray
    n_degenerate: int


def rotatability_ratio(F_tgt: np.ndarray, F_ref: np.ndarray, R: np.ndarray) -> float:
    """``|R F_ref - F_tgt| / |F_ref - F_tgt|`` (Frobenius) for one pair."""
    den = float(np.linalg.norm(F_ref - F_tgt))
    if den < DEGENERATE_TOL:
        raise DegenerateDenominator(f"features coincide (|F_ref - F_tgt| = {den:.3g})")
    return float(np.linalg.norm(R @ F_ref - F_tgt)) / den


def rotatability_from_arrays(model: FusionNet, obs_tgt, obs_ref, R) -> RotatabilityStats:
    if model.config.variant == "concat":
        raise ValueError("concat models have no rotatable features")
    tr = model.forward(obs_tgt, obs_ref, R)
    F_t, F_r, R = tr.F_tgt[0], tr.F_ref[0], tr.R
    num = np.linalg.norm(R @ F_r - F_t, axis=(1, 2))
    den = np.linalg.norm(F_r - F_t, axis=(1, 2))
    ok = den >= DEGENERATE_TOL
    ratios = num[ok] / den[ok]
    if ratios.size == 0:
        return RotatabilityStats(float("nan"), float("nan"), float("nan"), ratios, int((~ok).sum()))
    return RotatabilityStats(
        float(ratios.mean()), float(np.median(ratios)), float((ratios < 1.0).mean()), ratios, int((~ok).sum())
    )


def rotatability_metric(model: FusionNet, dataset: Dataset, selector: str = "unseen", test_fold: int = 0) -> RotatabilityStats:
    a = dataset.arrays(dataset.select(selector, test_fold))
    return rotatability_from_arrays(model, a["obs_tgt"], a["obs_ref"], a["R"])


# -- pitch/yaw export of rotatable feature columns ------------------------------


def pitch_yaw_rows(model: FusionNet, obs_tgt, obs_ref, R) -> list[dict]:
    """One row per column of ``F_tgt^(i)`` and ``R F_ref^(i)`` for every stage ``i``.

    Columns with (near) zero norm get ``pitch``/``yaw`` of None.
    """
    if model.config.variant == "concat":
        raise ValueError("concat models have no rotatable features")
    tr = model.forward(np.atleast_2d(obs_tgt)[:1], np.atleast_2d(obs_ref)[:1], R)
    R = tr.R[0]
    rows = []
    for stage, (Ft, Fr) in enumerate(zip(tr.F_tgt, tr.F_ref)):
        for side, F in (("tgt", Ft[0]), ("ref_rotated", R @ Fr[0])):
            for k in range(F.shape[1]):
                v = F[:, k]
                norm = float(np.linalg.norm(v))
                if norm < DEGENERATE_TOL:
                    pitch = yaw = None
                else:
                    pitch, yaw = geo.pitch_yaw_from_vector(v / norm)
                rows.append({"stage": stage, "side": side, "column": k, "pitch": pitch, "yaw": yaw, "norm": norm})
    return rows


def export_pitch_yaw_scatter(model: FusionNet, obs_tgt, obs_ref, R, path, delimiter: str = ",") -> list[dict]:
    rows = pitch_yaw_rows(model, obs_tgt, obs_ref, R)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(["stage", "side", "column", "pitch", "yaw", "norm"])
        for r in rows:
            cells = ["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in ("stage", "side", "column", "pitch", "yaw", "norm")]
            w.writerow(cells)
    return rows


# -- rotation-noise sensitivity -------------------------------------------------


def noise_sensitivity_sweep(
    model: FusionNet,
    dataset: Dataset,
    levels=(0.0, 0.02, 0.05, 0.1),
    seed: int = 0,
    selector: str = "unseen",
    test_fold: int = 0,
) -> list[dict]:
    """Mean error with every pair's rotation perturbed at each noise level (radians)."""
    base = dataset.arrays(dataset.select(selector, test_fold))["R"]
    rows = []
    for k, level in enumerate(levels):
        if level < 0:
            raise ValueError("noise levels must be >= 0")
        rng = np.random.default_rng([seed, k])
        rots = base if level == 0 else perturb_rotations(base, level, rng)
        rows.append({"noise": float(level), "mean": evaluate(model, dataset, selector, test_fold, rotations=rots).mean})
    return rows


# -- geometry verification --------------------------------------------------------


@dataclass
class GeometryReport:
    trials: int
    max_interconversion: float
    max_fixed_point: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_interconversion < self.tol and self.max_fixed_point < self.tol


def verify_geometry_suite(seed: int = 0, trials: int = 1000, d: float = 0.6, identity: bool = False, tol: float = 1e-9) -> GeometryReport:
    """Check both constructions of R agree and the translation fixes the gaze origin, on random rigs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    eye = np.eye(3)
    worst_r = worst_t = 0.0
    for _ in range(trials):
        if identity:
            c_rot = n_ref = n_tgt = h_rot = eye
            c_t = h_t = np.zeros(3)
        else:
            c_rot, n_ref, n_tgt, h_rot = (geo.random_rotation(rng) for _ in range(4))
            c_t, h_t = rng.standard_normal(3), rng.standard_normal(3)
        c = geo.RigidTransform(c_rot, c_t)
        h_ref = geo.RigidTransform(h_rot, h_t)
        h_tgt = c @ h_ref
        worst_r = max(worst_r, geo.verify_rotation_interconvertibility(c, n_ref, n_tgt, h_ref, h_tgt))
        R = n_tgt @ c_rot @ n_ref.T
        worst_t = max(worst_t, geo.fixed_point_residual(R, d))
    return GeometryReport(trials, worst_r, worst_t, tol)


# -- command line ------------------------------------------------------------------

CONFIG_SECTIONS = ("dataset", "model", "train", "eval")


def load_config(path) -> dict:
    """Experiment config in TOML with optional ``[dataset]``, ``[model]``, ``[train]``, ``[eval]`` tables."""
    if path is None:
        return {k: {} for k in CONFIG_SECTIONS}
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return {k: dict(raw.get(k, {})) for k in CONFIG_SECTIONS}


def _synth_config(section: dict):
    from .synthdata import SynthConfig

    fields = {k: v for k, v in section.items() if k not in ("seed", "path", "format")}
    return SynthConfig.from_dict(fields)


def _model_config(section: dict, obs_dim: int):
    from .model import ModelConfig

    section = dict(section)
    section.setdefault("obs_dim", obs_dim)
    return ModelConfig(**section)


def _dataset(args, cfg: dict):
    from .synthdata import generate_dataset, read_dataset

    path = args.dataset or cfg["dataset"].get("path")
    if path:
        return read_dataset(path)
    seed = args.seed if args.seed is not None else cfg["dataset"].get("seed", 0)
    return generate_dataset(_synth_config(cfg["dataset"]), seed)


def _checkpoint(args, cfg: dict):
    from .train import load_checkpoint

    path = args.checkpoint or cfg["eval"].get("checkpoint")
    if not path:
        raise ValueError("no checkpoint given (--checkpoint or [eval].checkpoint)")
    net, _, _ = load_checkpoint(path)
    return net


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _selector(args, cfg: dict) -> tuple[str, int]:
    sel = args.selector or cfg["eval"].get("selector", "unseen")
    return sel, int(cfg["eval"].get("test_fold", cfg["train"].get("test_fold", 0)))


def _write_rows(rows: list[dict], columns, path, delimiter: str = ",") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def _cmd_gen_data(args, cfg):
    from .synthdata import generate_dataset, write_dataset

    seed = args.seed if args.seed is not None else cfg["dataset"].get("seed", 0)
    fmt = args.format or cfg["dataset"].get("format", "binary")
    ds = generate_dataset(_synth_config(cfg["dataset"]), seed)
    out = _out(args)
    path = out / ("dataset.bin" if fmt == "binary" else "dataset.txt")
    write_dataset(ds, path, fmt)
    geo.dump_rig_file(out / "rig.json", ds.rig.d, ds.rig.rig_file_cameras())
    return {"dataset": str(path), "records": int(len(ds.records)), "probe": ds.header.get("probe")}


def _cmd_train(args, cfg):
    from .train import TrainConfig, train_model

    ds = _dataset(args, cfg)
    tsec = dict(cfg["train"])
    if args.seed is not None:
        tsec["seed"] = args.seed
    tcfg = TrainConfig.from_dict(tsec)
    mcfg = _model_config(cfg["model"], ds.obs_dim)
    out = _out(args)
    _, rep = train_model(mcfg, tcfg, ds, out_dir=out)
    rows = [{"epoch": k + 1, "loss": v} for k, v in enumerate(rep.epoch_loss)]
    for row, blocks in zip(rows, rep.block_loss):
        for i, b in enumerate(blocks):
            row[f"block{i + 1}"] = b
    columns = ["epoch", "loss"] + [f"block{i + 1}" for i in range(len(rep.block_loss[0]) if rep.block_loss else 0)]
    _write_rows(rows, columns, out / "train_log.csv")
    return {"checkpoint": rep.checkpoint, "final_loss": rep.epoch_loss[-1] if rep.epoch_loss else None, "config_hash": rep.config_hash}


def _cmd_eval(args, cfg):
    net, ds = _checkpoint(args, cfg), _dataset(args, cfg)
    sel, fold = _selector(args, cfg)
    res = evaluate(net, ds, sel, fold)
    out = _out(args)
    _write_rows([{"selector": sel, "mean_deg": res.mean, "n": int(res.errors.size)}], ["selector", "mean_deg", "n"], out / "eval.csv")
    write_matrix_table(res.matrix, out / "error_matrix.csv")
    write_error_grid(res.matrix, out / "error_matrix.txt")
    if args.dump_samples:
        write_sample_log(res, out / "samples.csv")
    return {"selector": sel, "mean_deg": res.mean, "n": int(res.errors.size)}


def _cmd_analyze(args, cfg):
    net = _checkpoint(args, cfg)
    out = _out(args)
    if args.what == "scatter":
        ds = _dataset(args, cfg)
        sel, fold = _selector(args, cfg)
        a = ds.arrays(ds.select(sel, fold))
        i = args.index
        rows = export_pitch_yaw_scatter(net, a["obs_tgt"][i], a["obs_ref"][i], a["R"][i], out / "pitch_yaw.csv")
        return {"rows": len(rows)}
    ds = _dataset(args, cfg)
    sel, fold = _selector(args, cfg)
    if args.what == "contribution":
        rep = contribution_ratio(net, ds, sel, fold)
        write_contribution_table(rep, out / "contribution.csv")
        return {"mean_ratio_ref": rep.mean, "pairs": len(rep.pairs), "degenerate": rep.n_degenerate}
    if args.what == "rotatability":
        st = rotatability_metric(net, ds, sel, fold)
        row = {"mean": st.mean, "median": st.median, "frac_below_one": st.frac_below_one, "n": int(st.ratios.size), "degenerate": st.n_degenerate}
        _write_rows([row], list(row), out / "rotatability.csv")
        return row
    levels = args.levels or cfg["eval"].get("noise_levels", [0.0, 0.02, 0.05, 0.1])
    seed = args.seed if args.seed is not None else 0
    rows = noise_sensitivity_sweep(net, ds, [float(v) for v in levels], seed, sel, fold)
    _write_rows(rows, ["noise", "mean"], out / "noise.csv")
    return {"levels": len(rows), "mean": [r["mean"] for r in rows]}


def _cmd_verify_geometry(args, cfg):
    seed = args.seed if args.seed is not None else 0
    rep = verify_geometry_suite(seed, args.trials)
    row = {"trials": rep.trials, "max_interconversion": rep.max_interconversion, "max_fixed_point": rep.max_fixed_point, "passed": rep.passed}
    _write_rows([row], list(row), _out(args) / "geometry.csv")
    if not rep.passed:
        raise RuntimeError(f"geometry residuals above {rep.tol}: {row}")
    return row


def _cmd_matrix(args, cfg):
    from .train import TrainConfig, aggregate, run_experiment_matrix, write_table

    ds = _dataset(args, cfg)
    tcfg = TrainConfig.from_dict(cfg["train"])
    mcfg = _model_config(cfg["model"], ds.obs_dim)
    out = _out(args)
    rows = run_experiment_matrix(args.variants.split(","), [int(s) for s in args.seeds.split(",")], mcfg, tcfg, ds, out)
    write_table(rows + aggregate(rows), out / "results.csv")
    return {"rows": len(rows)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rotfuse", description="Two-view rotatable-feature gaze fusion on a synthetic rig.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML experiment config")
        sp.add_argument("--seed", type=int, help="override the seed")
        sp.add_argument("--out", help="output directory")
        return sp

    g = common(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    g.add_argument("--format", choices=("binary", "text"))
    t = common(sub.add_parser("train", help="train one model"))
    t.add_argument("--dataset")
    e = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--selector")
    e.add_argument("--dump-samples", action="store_true", help="write per-sample errors")
    a = common(sub.add_parser("analyze", help="contribution, rotatability, scatter or noise analysis"))
    a.add_argument("what", choices=("contribution", "rotatability", "scatter", "noise"))
    a.add_argument("--checkpoint")
    a.add_argument("--dataset")
    a.add_argument("--selector")
    a.add_argument("--index", type=int, default=0, help="pair index for scatter")
    a.add_argument("--levels", type=float, nargs="+", help="noise levels in radians")
    v = common(sub.add_parser("verify-geometry", help="check rotation/translation identities on random rigs"))
    v.add_argument("--trials", type=int, default=1000)
    m = common(sub.add_parser("matrix", help="train and evaluate variants x seeds"))
    m.add_argument("--dataset")
    m.add_argument("--variants", default="proposed,no_rotation,concat,mlp_encoding")
    m.add_argument("--seeds", default="0,1,2")
    return p


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "verify-geometry": _cmd_verify_geometry,
    "matrix": _cmd_matrix,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        result = COMMANDS[args.command](args, cfg)
    except Exception as exc:  # reported as one machine-readable line
        print(json.dumps({"status": "error", "command": args.command, "error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **(result or {})}, default=str))
    return 0
