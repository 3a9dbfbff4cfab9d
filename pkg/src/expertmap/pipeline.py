"""File-based pipeline steps behind the CLI subcommands.

Every step reads versioned artifacts from the output directory, writes new
ones, and records a sidecar with the config hash and the content hashes of
its inputs.  A step refuses to run when a consumed artifact's recorded
inputs no longer hash the same (stale upstream artifact).
Timestamps live only in sidecars so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from . import cogeometry, expert, netens, spectral, synth as synthmod, validate, whiten
from .dataset import (DataMatrix, ReferenceSet, StandardizationParams,
                      load_matrix, preprocess, save_matrix, select_reference)
from .errors import ValidationError

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# configuration

DEFAULT_CONFIG = {
    "paths": {"out": "out", "data": "data.csv", "schema": None,
              "labels": "labels.csv", "truth": "truth.json"},
    "eta": None,                      # default floor(0.1 * m)
    "tree": {"depth": None, "iters": 2, "beta": 1.0,
             "balance_factor": 1.5, "embed_dim": 10},
    "pseudopoints": {"level": 6, "score_min": 1.0, "score_max": 10.0},
    "net": {"k": 100, "epochs": 220, "learning_rate": 1.0, "pretrain_epochs": 60,
            "master_seed": 7, "h1": [30, 70], "h2": [15, 35],
            "dropout": [0.0, 0.3], "weight_decay": [1e-5, 1e-2], "backprop": True},
    "kernel": {"r": 10},
    "embedding": {"d": 8, "t": 1.0},
    "whiten": {"k": None, "pinv_tol": 1e-6},
    "validate": {"neighbors": 10, "bins": 18},
    "synth": {"n_points": 600, "intrinsic_dim": 2, "n_relevant_features": 40,
              "n_noise_features": 20, "n_clusters": 3,
              "cluster_spread_ratios": [1.0, 1.0, 0.1], "missing_rate": 0.1,
              "polarity_flip_rate": 0.15, "label_noise": 0.0, "seed": 7},
}


def merge_config(overrides: dict | None) -> dict:
    def deep(base, over):
        out = dict(base)
        for key, value in (over or {}).items():
            if isinstance(value, dict) and isinstance(base.get(key), dict):
                out[key] = deep(base[key], value)
            else:
                out[key] = value
        return out
    return deep(DEFAULT_CONFIG, overrides or {})


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    cfg = merge_config(cfg)
    if overrides:
        cfg = merge_config_into(cfg, overrides)
    return cfg


def merge_config_into(cfg: dict, overrides: dict) -> dict:
    out = json.loads(json.dumps(cfg))
    for dotted, value in overrides.items():
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# artifact store

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Output directory with sidecar bookkeeping."""

    def __init__(self, outdir, cfg: dict):
        self.outdir = Path(outdir)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.cfg_hash = config_hash(cfg)

    def path(self, name: str) -> Path:
        return self.outdir / name

    def sidecar(self, name: str) -> Path:
        return self.outdir / f"{name}.meta.json"

    def record(self, name: str, inputs: list[str]) -> None:
        meta = {"schema_version": SCHEMA_VERSION,
                "config_hash": self.cfg_hash,
                "created": datetime.now(timezone.utc).isoformat(),
                "inputs": {inp: file_hash(self.path(inp)) for inp in inputs
                           if self.path(inp).exists()}}
        with open(self.sidecar(name), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True, indent=1)

    def require(self, name: str, producer: str) -> Path:
        """Fetch an artifact, refusing when it is missing or stale."""
        path = self.path(name)
        if not path.exists():
            raise ValidationError(f"missing artifact {name!r}; run '{producer}' first")
        meta_path = self.sidecar(name)
        if meta_path.exists():
            with open(meta_path, "r", encoding="utf-8") as fh:
                meta = json.load(fh)
            for inp, recorded in meta.get("inputs", {}).items():
                inp_path = self.path(inp)
                if inp_path.exists() and file_hash(inp_path) != recorded:
                    raise ValidationError(
                        f"artifact {name!r} is stale: its input {inp!r} changed "
                        f"since it was produced; rerun '{producer}'")
        return path


# ---------------------------------------------------------------------------
# small readers/writers

def _write_table(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_embedding(path_csv, path_json, ids, emb: spectral.Embedding) -> None:
    header = ["point_id"] + [f"coord_{i + 1}" for i in range(emb.dim)]
    coords = emb.coordinates
    rows = [[pid] + [_fmt(v) for v in coords[i]] for i, pid in enumerate(ids)]
    _write_table(path_csv, header, rows)
    with open(path_json, "w", encoding="utf-8") as fh:
        json.dump({"schema_version": SCHEMA_VERSION,
                   "eigenvalues": emb.eigenvalues.tolist(),
                   "t": emb.t, "bandwidth": emb.bandwidth,
                   "standardized": emb.standardized}, fh, sort_keys=True)


def read_embedding(path_csv, path_json) -> tuple[list[str], spectral.Embedding]:
    with open(path_json, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    ids, coords = [], []
    with open(path_csv, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            ids.append(row[0])
            coords.append([float(v) for v in row[1:]])
    coords = np.asarray(coords)
    vals = np.asarray(meta["eigenvalues"])
    vectors = coords / spectral.signed_power(vals, meta["t"])[None, :]
    emb = spectral.Embedding(eigenvalues=vals, eigenvectors=vectors, t=meta["t"],
                             bandwidth=meta.get("bandwidth", {}),
                             standardized=meta.get("standardized", False))
    return ids, emb


def _read_column_csv(path) -> dict[str, list[str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        out: dict[str, list[str]] = {name: [] for name in reader.fieldnames or []}
        for row in reader:
            for key, value in row.items():
                out[key].append(value)
    return out


# ---------------------------------------------------------------------------
# shared loading logic

def _load_preprocessed(ws: Workspace) -> tuple[DataMatrix, ReferenceSet]:
    path = ws.require("preprocessed.csv", "preprocess")
    schema = ws.cfg["paths"].get("schema")
    d = load_matrix(path, schema)
    with open(ws.require("reference.json", "preprocess"), "r", encoding="utf-8") as fh:
        ref = json.load(fh)
    omega = ReferenceSet(indices=np.asarray(ref["indices"], dtype=np.int64),
                         eta=int(ref["eta"]))
    return d, omega


def _load_trees(ws: Workspace):
    points_tree = cogeometry.PartitionTree.load(ws.require("points_tree.json", "organize"))
    obs_tree = cogeometry.PartitionTree.load(ws.require("obs_tree.json", "organize"))
    return points_tree, obs_tree


def _tree_config(cfg: dict) -> cogeometry.TreeConfig:
    t = cfg["tree"]
    return cogeometry.TreeConfig(depth=t["depth"], balance_factor=t["balance_factor"],
                                 embed_dim=t["embed_dim"], beta=t["beta"],
                                 refine_iters=t["iters"])


def _omega_matrix(d: DataMatrix, omega: ReferenceSet, obs_tree) -> tuple[np.ndarray, np.ndarray]:
    """(imputed reference rows, fully-observed row flags)."""
    rows = d.values[omega.indices]
    complete = d.mask[omega.indices].all(axis=1)
    filled = cogeometry.impute_matrix(rows, obs_tree)
    return filled, complete


def _load_label_function(ws: Workspace) -> expert.LabelFunction:
    path = ws.require("label_function.csv", "pseudopoints import")
    cols = _read_column_csv(path)
    values = np.asarray([float(v) for v in cols["g_score"]])
    rescaled = np.asarray([float(v) for v in cols["g_rescaled"]])
    lo = float(values.min())
    hi = float(values.max())
    return expert.LabelFunction(point_ids=tuple(cols["point_id"]), values=values,
                                rescaled=rescaled, degenerate=hi == lo,
                                scale=(lo, hi))


def _ensemble_kernel(ws: Workspace, ensemble, filled: np.ndarray) -> spectral.Kernel:
    rep = netens.representation(ensemble, filled)
    return spectral.gaussian_kernel(rep, r=ws.cfg["kernel"]["r"])


# ---------------------------------------------------------------------------
# pipeline steps

def run_synth(ws: Workspace) -> None:
    cfg = dict(ws.cfg["synth"])
    cfg["cluster_spread_ratios"] = tuple(cfg["cluster_spread_ratios"])
    scfg = synthmod.SynthConfig(**cfg)
    synthmod.emit(scfg, ws.path("data.csv"), ws.path("truth.json"))
    ws.record("data.csv", [])
    ws.record("truth.json", ["data.csv"])


def run_preprocess(ws: Workspace) -> None:
    data_path = ws.cfg["paths"]["data"]
    src = Path(data_path)
    if not src.is_absolute():
        candidate = ws.path(data_path)
        src = candidate if candidate.exists() else src
    if not src.exists():
        raise ValidationError(f"input data file not found: {src}")
    raw = load_matrix(src, ws.cfg["paths"].get("schema"))

    processed, polarity, params = preprocess(raw)
    eta = ws.cfg["eta"]
    if eta is None:
        eta = int(0.1 * raw.n_features)
    omega = select_reference(processed, eta)

    save_matrix(processed, ws.path("preprocessed.csv"))
    with open(ws.path("scaler.json"), "w", encoding="utf-8") as fh:
        json.dump(params.to_json(), fh, sort_keys=True)
    with open(ws.path("reference.json"), "w", encoding="utf-8") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "eta": eta,
                   "indices": omega.indices.tolist(),
                   "polarity_flips": polarity.flip.astype(int).tolist()},
                  fh, sort_keys=True)
    for name in ("preprocessed.csv", "scaler.json", "reference.json"):
        ws.record(name, [])


def run_organize(ws: Workspace) -> None:
    d, omega = _load_preprocessed(ws)
    cfg = _tree_config(ws.cfg)
    points_tree, obs_tree, affinity = cogeometry.coupled_refine(
        omega, d, iters=ws.cfg["tree"]["iters"], cfg=cfg)
    points_tree.save(ws.path("points_tree.json"))
    obs_tree.save(ws.path("obs_tree.json"))
    np.save(ws.path("affinity.npy"), affinity.entries)
    inputs = ["preprocessed.csv", "reference.json"]
    for name in ("points_tree.json", "obs_tree.json", "affinity.npy"):
        ws.record(name, inputs)


def run_pseudopoints_export(ws: Workspace) -> None:
    d, omega = _load_preprocessed(ws)
    points_tree, obs_tree = _load_trees(ws)
    level = min(int(ws.cfg["pseudopoints"]["level"]), points_tree.depth)
    ps = expert.extract_pseudopoints(points_tree, level, omega, d, obs_tree=obs_tree)
    expert.export_centroids(ps, ws.path("pseudopoints.csv"))
    ws.record("pseudopoints.csv", ["points_tree.json", "obs_tree.json",
                                   "preprocessed.csv"])


def _pseudopoints(ws: Workspace):
    d, omega = _load_preprocessed(ws)
    points_tree, obs_tree = _load_trees(ws)
    level = min(int(ws.cfg["pseudopoints"]["level"]), points_tree.depth)
    ps = expert.extract_pseudopoints(points_tree, level, omega, d, obs_tree=obs_tree)
    return d, omega, points_tree, obs_tree, level, ps


def run_pseudopoints_import(ws: Workspace, labels_path=None) -> None:
    d, omega, points_tree, _, level, ps = _pseudopoints(ws)
    ws.require("pseudopoints.csv", "pseudopoints export")
    labels_path = labels_path or ws.cfg["paths"]["labels"]
    labels_file = Path(labels_path)
    if not labels_file.is_absolute() and not labels_file.exists():
        labels_file = ws.path(labels_path)
    if not labels_file.exists():
        raise ValidationError(
            f"labels file not found: {labels_file}; export pseudopoints, have the "
            "expert fill the score column, then import")
    lm = expert.import_labels(labels_file, ps,
                              score_min=ws.cfg["pseudopoints"]["score_min"],
                              score_max=ws.cfg["pseudopoints"]["score_max"])
    lf = expert.propagate_labels(lm, points_tree, level, omega, d)
    _write_table(ws.path("label_function.csv"),
                 ["point_id", "g_score", "g_rescaled"],
                 [[pid, _fmt(lf.values[i]), _fmt(lf.rescaled[i])]
                  for i, pid in enumerate(lf.point_ids)])
    if labels_file != ws.path("labels.csv"):
        with open(labels_file, "rb") as src, open(ws.path("labels.csv"), "wb") as dst:
            dst.write(src.read())
    ws.record("labels.csv", ["pseudopoints.csv"])
    ws.record("label_function.csv", ["labels.csv", "points_tree.json",
                                     "pseudopoints.csv"])


def run_pseudopoints_auto(ws: Workspace) -> None:
    """Label folders from the ground-truth sidecar (synthetic runs only)."""
    d, omega, points_tree, _, level, ps = _pseudopoints(ws)
    truth_path = ws.require("truth.json", "synth")
    with open(truth_path, "r", encoding="utf-8") as fh:
        truth = json.load(fh)
    by_id = dict(zip(truth["point_ids"], truth["ground_truth"]))
    gt = np.asarray([by_id[d.point_ids[i]] for i in omega.indices])

    lo, hi = ws.cfg["pseudopoints"]["score_min"], ws.cfg["pseudopoints"]["score_max"]
    folder_means = np.array([gt[list(folder)].mean()
                             for folder in points_tree.folders_at(level)])
    span = folder_means.max() - folder_means.min()
    if span > 0:
        scores = lo + (folder_means - folder_means.min()) / span * (hi - lo)
    else:
        scores = np.full_like(folder_means, 0.5 * (lo + hi))

    with open(ws.path("labels.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["folder_id", "score"])
        for fid, score in zip(ps.folder_ids, scores):
            writer.writerow([fid, _fmt(score)])
    ws.record("labels.csv", ["pseudopoints.csv", "truth.json"])
    run_pseudopoints_import(ws, labels_path=ws.path("labels.csv"))


def run_train(ws: Workspace) -> None:
    d, omega = _load_preprocessed(ws)
    _, obs_tree = _load_trees(ws)
    lf = _load_label_function(ws)
    filled, complete = _omega_matrix(d, omega, obs_tree)

    net_cfg = ws.cfg["net"]
    ranges = netens.HyperRanges(h1=tuple(net_cfg["h1"]), h2=tuple(net_cfg["h2"]),
                                dropout=tuple(net_cfg["dropout"]),
                                weight_decay=tuple(net_cfg["weight_decay"]))
    ensemble = netens.train_ensemble(
        filled, lf.rescaled, K=int(net_cfg["k"]), hyper_ranges=ranges,
        master_seed=int(net_cfg["master_seed"]), epochs=int(net_cfg["epochs"]),
        learning_rate=float(net_cfg["learning_rate"]),
        pretrain_epochs=int(net_cfg["pretrain_epochs"]),
        train_rows=complete, backprop=bool(net_cfg["backprop"]))
    netens.save_ensemble(ensemble, ws.path("ensemble.json"))

    f01 = netens.ensemble_rank(ensemble, filled)
    f_score = lf.to_label_scale(f01)
    _write_table(ws.path("ranking.csv"), ["point_id", "f_rescaled", "f_score"],
                 [[pid, _fmt(f01[i]), _fmt(f_score[i])]
                  for i, pid in enumerate(lf.point_ids)])
    inputs = ["preprocessed.csv", "label_function.csv", "obs_tree.json"]
    ws.record("ensemble.json", inputs)
    ws.record("ranking.csv", inputs + ["ensemble.json"])


def run_embed(ws: Workspace) -> None:
    d, omega = _load_preprocessed(ws)
    _, obs_tree = _load_trees(ws)
    ensemble = netens.load_ensemble(ws.require("ensemble.json", "train"))
    filled, _ = _omega_matrix(d, omega, obs_tree)
    kernel = _ensemble_kernel(ws, ensemble, filled)
    emb = spectral.diffusion_embed(kernel, d=int(ws.cfg["embedding"]["d"]),
                                   t=float(ws.cfg["embedding"]["t"]))
    ids = [d.point_ids[i] for i in omega.indices]
    write_embedding(ws.path("embedding.csv"), ws.path("embedding.json"), ids, emb)
    inputs = ["preprocessed.csv", "ensemble.json", "obs_tree.json"]
    ws.record("embedding.csv", inputs)
    ws.record("embedding.json", inputs)


def run_standardize(ws: Workspace) -> None:
    ids, emb = read_embedding(ws.require("embedding.csv", "embed"),
                              ws.require("embedding.json", "embed"))
    k = ws.cfg["whiten"]["k"]
    if k is None:
        k = whiten.default_neighborhood(emb.dim)
    lm = whiten.local_moments(emb, k=int(k), pinv_tol=float(ws.cfg["whiten"]["pinv_tol"]))
    std = whiten.standardized_embedding(emb, lm, d=int(ws.cfg["embedding"]["d"]),
                                        t=float(ws.cfg["embedding"]["t"]),
                                        r=int(ws.cfg["kernel"]["r"]))
    write_embedding(ws.path("std_embedding.csv"), ws.path("std_embedding.json"), ids, std)
    inputs = ["embedding.csv", "embedding.json"]
    ws.record("std_embedding.csv", inputs)
    ws.record("std_embedding.json", inputs)


def run_extend(ws: Workspace, new_points_path) -> None:
    """Impute new rows, extend both embeddings, and rank them."""
    d, omega = _load_preprocessed(ws)
    _, obs_tree = _load_trees(ws)
    ensemble = netens.load_ensemble(ws.require("ensemble.json", "train"))
    ids_ref, emb = read_embedding(ws.require("embedding.csv", "embed"),
                                  ws.require("embedding.json", "embed"))
    _, std_emb = read_embedding(ws.require("std_embedding.csv", "standardize"),
                                ws.require("std_embedding.json", "standardize"))
    lf = _load_label_function(ws)

    with open(ws.require("scaler.json", "preprocess"), "r", encoding="utf-8") as fh:
        params = StandardizationParams.from_json(json.load(fh))

    new_raw = load_matrix(new_points_path, ws.cfg["paths"].get("schema"))
    if new_raw.feature_names != d.feature_names:
        raise ValidationError("new-point features do not match the training data")
    new_values = params.transform(new_raw.values, new_raw.mask)
    new_filled = cogeometry.impute_matrix(new_values, obs_tree)

    filled, _ = _omega_matrix(d, omega, obs_tree)
    rep_ref = netens.representation(ensemble, filled)
    rep_new = netens.representation(ensemble, new_filled)
    sigma = emb.bandwidth["value"]
    cross = np.exp(-(cdist(rep_new, rep_ref) ** 2) / sigma ** 2)
    coords_new = spectral.nystrom_extend(emb, cross)

    k = ws.cfg["whiten"]["k"]
    if k is None:
        k = whiten.default_neighborhood(emb.dim)
    lm = whiten.local_moments(emb, k=int(k), pinv_tol=float(ws.cfg["whiten"]["pinv_tol"]))
    psi_new = whiten.extend_standardized(lm, emb, std_emb, coords_new)

    f01 = netens.ensemble_rank(ensemble, new_filled)
    f_score = lf.to_label_scale(f01)

    header = ["point_id"] + [f"coord_{i + 1}" for i in range(coords_new.shape[1])]
    _write_table(ws.path("extended_embedding.csv"), header,
                 [[pid] + [_fmt(v) for v in coords_new[i]]
                  for i, pid in enumerate(new_raw.point_ids)])
    header = ["point_id"] + [f"coord_{i + 1}" for i in range(psi_new.shape[1])]
    _write_table(ws.path("extended_std_embedding.csv"), header,
                 [[pid] + [_fmt(v) for v in psi_new[i]]
                  for i, pid in enumerate(new_raw.point_ids)])
    _write_table(ws.path("extended_ranking.csv"), ["point_id", "f_rescaled", "f_score"],
                 [[pid, _fmt(f01[i]), _fmt(f_score[i])]
                  for i, pid in enumerate(new_raw.point_ids)])
    inputs = ["ensemble.json", "embedding.csv", "std_embedding.csv", "scaler.json"]
    for name in ("extended_embedding.csv", "extended_std_embedding.csv",
                 "extended_ranking.csv"):
        ws.record(name, inputs)


def run_validate(ws: Workspace) -> None:
    d, omega = _load_preprocessed(ws)
    points_tree, obs_tree = _load_trees(ws)
    ensemble = netens.load_ensemble(ws.require("ensemble.json", "train"))
    lf = _load_label_function(ws)
    ids, emb = read_embedding(ws.require("embedding.csv", "embed"),
                              ws.require("embedding.json", "embed"))
    filled, _ = _omega_matrix(d, omega, obs_tree)

    report = validate.ValidationReport(config_hash=ws.cfg_hash)

    dnn_kernel = _ensemble_kernel(ws, ensemble, filled)
    euclid_kernel = spectral.gaussian_kernel(filled, r=ws.cfg["kernel"]["r"])

    # neighborhood concentration under both metrics
    mass_dnn = validate.neighborhood_mass(spectral.markov_normalize(dnn_kernel))
    mass_euc = validate.neighborhood_mass(spectral.markov_normalize(euclid_kernel))
    report.add_section("neighborhood_mass", {
        "dnn": {"mean": mass_dnn.mean, "sd": mass_dnn.sd},
        "euclidean": {"mean": mass_euc.mean, "sd": mass_euc.sd}})
    report.add_table("neighborhood_mass", ["point_id", "dnn_count", "euclid_count"],
                     [[pid, int(mass_dnn.counts[i]), int(mass_euc.counts[i])]
                      for i, pid in enumerate(ids)])

    # spectral dimensions
    dim_dnn, t_dnn, curve_dnn = validate.spectral_dimension(dnn_kernel)
    dim_euc, t_euc, curve_euc = validate.spectral_dimension(euclid_kernel)
    report.add_section("spectral_dimension", {
        "dnn": {"dim": dim_dnn, "t": t_dnn},
        "euclidean": {"dim": dim_euc, "t": t_euc}})
    n_curve = min(len(curve_dnn), len(curve_euc), 60)
    report.add_table("eigencurve", ["index", "dnn", "euclidean"],
                     [[i + 1, _fmt(curve_dnn[i]), _fmt(curve_euc[i])]
                      for i in range(n_curve)])

    # per-feature smoothness in the DNN diffusion space
    features = {name: filled[:, k] for k, name in enumerate(d.feature_names)}
    features["quality_function"] = lf.values
    table = validate.feature_lipschitz(emb.coordinates, features,
                                       n_neighbors=ws.cfg["validate"]["neighbors"])
    report.add_table("lipschitz", ["feature", "lipschitz_constant"],
                     [[name, _fmt(val)] for name, val in table.rows])
    report.add_section("lipschitz", {
        "quality_function": table.constant("quality_function"),
        "degenerate": list(table.degenerate)})

    # affinity histograms split by label agreement
    hist = validate.affinity_histograms(dnn_kernel.entries, lf.values,
                                        bins=ws.cfg["validate"]["bins"])
    report.add_table("histograms", ["threshold", "count_unequal", "ratio"],
                     [[_fmt(hist.thresholds[i]), int(hist.hist_unequal[i]),
                       _fmt(hist.ratio[i]) if np.isfinite(hist.ratio[i]) else ""]
                      for i in range(len(hist.thresholds))])

    # separation bound on the ensemble-averaged ranking
    f01 = netens.ensemble_rank(ensemble, filled)
    scaling = float(np.mean([netens.layer_norm_product(net) for net in ensemble.nets]))
    record = validate.separation_bound_check(f01, lf.rescaled,
                                             layer_norm_product=scaling)
    report.add_section("separation_bound", {
        "lhs": record.lhs, "e_neq_g_gap": record.e_neq_g_gap,
        "s_pairs": record.s_pairs, "max_factor": record.max_factor,
        "cost": record.cost, "rhs": record.rhs, "rhs_scaled": record.rhs_scaled,
        "holds": record.holds})

    # baseline rankings and agreement
    rowsum = validate.row_sum_rank(d)[omega.indices]
    imputed = DataMatrix(values=filled, mask=np.ones_like(filled, dtype=bool),
                         feature_names=d.feature_names,
                         point_ids=tuple(d.point_ids[i] for i in omega.indices),
                         group_of=d.group_of, weight_of=d.weight_of)
    weights, nnls_scores, kkt = validate.nnls_rank(imputed, f01)
    f_score = lf.to_label_scale(f01)
    conf = validate.confusion(lf.values, f_score)
    report.add_section("baselines", {
        "rowsum_corr_f": float(np.corrcoef(rowsum, f01)[0, 1]),
        "nnls_corr_f": float(np.corrcoef(nnls_scores, f01)[0, 1]),
        "nnls_kkt_residual": kkt,
        "nnls_weights": {name: float(weights[k])
                         for k, name in enumerate(d.feature_names)
                         if weights[k] > 0}})
    report.add_table("confusion", ["initial_quartile"] + [f"final_q{j + 1}" for j in range(4)],
                     [[i + 1] + [int(conf[i, j]) for j in range(4)] for i in range(4)])

    smooth = validate.neighbor_smoothness(dnn_kernel, lf.values)
    report.add_section("neighbor_smoothness", {
        "correlation": smooth.correlation if not smooth.degenerate else None,
        "degenerate": smooth.degenerate})

    report.write(ws.outdir)
    inputs = ["preprocessed.csv", "ensemble.json", "embedding.csv",
              "label_function.csv"]
    for name in ("validation.json", "lipschitz.csv", "neighborhood_mass.csv",
                 "eigencurve.csv", "confusion.csv", "histograms.csv"):
        ws.record(name, inputs)


def run_report(ws: Workspace) -> None:
    """Plot-ready per-point join of embeddings, rankings, labels, features."""
    d, omega = _load_preprocessed(ws)
    ids, emb = read_embedding(ws.require("embedding.csv", "embed"),
                              ws.require("embedding.json", "embed"))
    _, std_emb = read_embedding(ws.require("std_embedding.csv", "standardize"),
                                ws.require("std_embedding.json", "standardize"))
    lf = _load_label_function(ws)
    ranking = _read_column_csv(ws.require("ranking.csv", "train"))

    coords = emb.coordinates
    std_coords = std_emb.coordinates
    header = (["point_id", "g_score", "f_score"]
              + [f"coord_{i + 1}" for i in range(coords.shape[1])]
              + [f"std_coord_{i + 1}" for i in range(std_coords.shape[1])]
              + list(d.feature_names))
    rows = []
    values = d.values[omega.indices]
    mask = d.mask[omega.indices]
    for i, pid in enumerate(ids):
        feats = [(_fmt(values[i, k]) if mask[i, k] else "")
                 for k in range(d.n_features)]
        rows.append([pid, _fmt(lf.values[i]), ranking["f_score"][i]]
                    + [_fmt(v) for v in coords[i]]
                    + [_fmt(v) for v in std_coords[i]] + feats)
    _write_table(ws.path("report.csv"), header, rows)
    ws.record("report.csv", ["embedding.csv", "std_embedding.csv",
                             "ranking.csv", "label_function.csv"])
