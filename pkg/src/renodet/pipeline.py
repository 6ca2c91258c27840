"""End-to-end pipeline orchestration.

Each stage reads and writes files under a single run directory, so any
stage can be re-run in isolation and a rerun with the same configuration
reproduces every artifact byte for byte.  Stage outputs are written
through temp-file renames; nothing besides the declared files carries
state between stages.  Scans are processed sequentially in sorted order
(independent scans could be dispatched in parallel without changing any
output, since every artifact is keyed by scan).

Layout of a run directory:

    config.json  provenance.json  manifest.json
    phantoms/    cohort.csv, per-scan grid pairs + truth sidecars
    kidneys.csv  one row per kidney: identity, truth, lesion measurements
    meshes/      index.csv, per-kidney surface meshes + graphs
    features.csv per-kidney feature vectors
    models/      per-fold weights, training.json, scores_shape.csv
    samples/     per-scan sample manifests
    scores/      per-scan sample scores, kidney_scores.csv
    eval/        roc_*.csv, summary.json
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import ensemble, features, mesher, sampler
from . import eval as evalmod
from .neuro import save_weights
from .config import STAGES, PipelineConfig, config_digest, save_config
from .errors import ConfigError, DataError, RenodetError
from .phantom import CohortPlan, cohort_specs, phantom_generate
from .volio import (LABEL_CYST, LABEL_TUMOUR, LabelGrid, VolumeGrid,
                    load_grid, save_grid, split_kidneys)

_KIDNEY_HEADER = ["kidney_id", "scan_id", "patient_id", "side", "arm",
                  "truth", "lesion_volume_mm3", "lesion_diameter_mm"]
_KIDNEY_SCORE_HEADER = ["kidney_id", "patient_id", "truth", "diameter_mm",
                        "kind", "score"]
_SHAPE_SCORE_HEADER = ["kidney_id", "patient_id", "arm", "truth",
                       "lesion_volume_mm3", "lesion_diameter_mm",
                       "p_mlp", "p_gnn", "p_ensemble"]


# ---------------------------------------------------------------------------
# Atomic file helpers
# ---------------------------------------------------------------------------

def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".part")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_file(save_fn, path: Path) -> None:
    """Run a single-file saver against a temp name, then rename."""
    tmp = path.with_name(path.name + ".part")
    save_fn(tmp)
    os.replace(tmp, path)


def _atomic_pair(save_fn, base: Path, suffixes=(".json", ".raw")) -> None:
    """Run a stem-based two-file saver against a temp stem, then rename."""
    tmp = base.with_name(base.name + "__part")
    save_fn(tmp)
    for suffix in suffixes:
        os.replace(tmp.parent / (tmp.name + suffix),
                   base.parent / (base.name + suffix))


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    _atomic_text(path, buf.getvalue())


def _read_csv(path: Path, expected_header):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != expected_header:
        raise DataError(f"unexpected header in {path}")
    return rows[1:]


# ---------------------------------------------------------------------------
# Run layout
# ---------------------------------------------------------------------------

@dataclass
class RunPaths:
    run_dir: Path
    scan_dir: Path          # where grid pairs live

    @classmethod
    def for_config(cls, cfg: PipelineConfig) -> "RunPaths":
        run_dir = Path(cfg.run_dir)
        scan_dir = Path(cfg.input_dir) if cfg.input_dir \
            else run_dir / "phantoms"
        return cls(run_dir=run_dir, scan_dir=scan_dir)

    @property
    def kidneys_csv(self) -> Path:
        return self.run_dir / "kidneys.csv"

    @property
    def mesh_dir(self) -> Path:
        return self.run_dir / "meshes"

    @property
    def features_csv(self) -> Path:
        return self.run_dir / "features.csv"

    @property
    def model_dir(self) -> Path:
        return self.run_dir / "models"

    @property
    def sample_dir(self) -> Path:
        return self.run_dir / "samples"

    @property
    def score_dir(self) -> Path:
        return self.run_dir / "scores"

    @property
    def eval_dir(self) -> Path:
        return self.run_dir / "eval"


def _require(path: Path, stage: str, producer: str) -> None:
    if not path.exists():
        raise DataError(f"missing {path.name}: run the {producer} stage "
                        f"before {stage}")


def _scan_ids(run: RunPaths, stage: str):
    if not run.scan_dir.exists():
        raise DataError(f"scan directory {run.scan_dir} does not exist; "
                        f"generate phantoms or point input_dir at scans "
                        f"before {stage}")
    ids = sorted(p.name[:-len("_labels.json")]
                 for p in run.scan_dir.glob("*_labels.json"))
    if not ids:
        raise DataError(f"no scans (*_labels.json) found in {run.scan_dir}")
    return ids


def _load_scan(run: RunPaths, scan_id: str):
    volume = load_grid(run.scan_dir / f"{scan_id}_volume")
    labels = load_grid(run.scan_dir / f"{scan_id}_labels")
    if not isinstance(volume, VolumeGrid) or not isinstance(labels, LabelGrid):
        raise DataError(f"scan {scan_id}: volume/labels grid pair has "
                        f"swapped kinds")
    return volume, labels


def _load_sidecar(run: RunPaths, scan_id: str) -> dict:
    path = run.scan_dir / f"{scan_id}_truth.json"
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed truth sidecar {path}: {exc}") from None


# ---------------------------------------------------------------------------
# Kidney inventory: identity, truth and lesion measurements per kidney
# ---------------------------------------------------------------------------

def _measure_lesions(labels: LabelGrid, components):
    """Per-kidney (largest lesion volume, largest tumour volume) in mm^3.

    Lesions are connected components of the tumour and cyst labels; each is
    attributed to the kidney whose mask contains its centroid (nearest
    kidney centroid when the centroid voxel itself is unlabeled).
    """
    lesion_any = np.isin(labels.labels, (LABEL_TUMOUR, LABEL_CYST))
    out = [{"lesion": 0.0, "tumour": 0.0} for _ in components]
    if not lesion_any.any():
        return out
    structure = np.ones((3, 3, 3), dtype=bool)
    labelled, n = ndimage.label(lesion_any, structure=structure)
    voxel = labels.voxel_volume
    for comp_id in range(1, n + 1):
        mask = labelled == comp_id
        volume = float(mask.sum()) * voxel
        tumour = bool((labels.labels[mask] == LABEL_TUMOUR).sum()
                      >= (labels.labels[mask] == LABEL_CYST).sum())
        centroid_vox = np.argwhere(mask).mean(axis=0)
        owner = None
        for k, comp in enumerate(components):
            local = np.round(centroid_vox).astype(int) \
                - np.array([s.start for s in comp.bbox])
            if np.all(local >= 0) and np.all(local < comp.mask.shape) \
                    and comp.mask[tuple(local)]:
                owner = k
                break
        if owner is None:
            centroid_mm = labels.origin + (centroid_vox + 0.5) * labels.spacing
            owner = int(np.argmin([np.linalg.norm(c.centroid - centroid_mm)
                                   for c in components]))
        out[owner]["lesion"] = max(out[owner]["lesion"], volume)
        if tumour:
            out[owner]["tumour"] = max(out[owner]["tumour"], volume)
    return out


def _equivalent_diameter(volume_mm3: float) -> float:
    if volume_mm3 <= 0:
        return 0.0
    return float((6.0 * volume_mm3 / np.pi) ** (1.0 / 3.0))


def _kidney_rows_for_scan(run: RunPaths, scan_id: str, labels: LabelGrid,
                          components):
    sidecar = _load_sidecar(run, scan_id)
    patient_id = sidecar.get("patient_id", scan_id)
    arm = sidecar.get("arm", "")
    measured = _measure_lesions(labels, components)
    rows = []
    for comp, m in zip(components, measured):
        truth = "cancerous" if m["tumour"] > 0 else "healthy"
        if len(components) == 1 and sidecar.get("lesion_diameter_mm"):
            diameter = float(sidecar["lesion_diameter_mm"]) \
                if m["tumour"] > 0 else 0.0
        else:
            diameter = _equivalent_diameter(m["tumour"])
        rows.append([f"{scan_id}_{comp.side}", scan_id, patient_id,
                     comp.side, arm, truth,
                     repr(float(m["lesion"])), repr(float(diameter))])
    return rows


def _write_kidney_inventory(run: RunPaths, stage: str):
    """Build kidneys.csv (or reuse an existing one); returns its rows."""
    if run.kidneys_csv.exists():
        return _read_csv(run.kidneys_csv, _KIDNEY_HEADER)
    rows = []
    for scan_id in _scan_ids(run, stage):
        _, labels = _load_scan(run, scan_id)
        components = sorted(split_kidneys(labels), key=lambda c: c.side)
        rows.extend(_kidney_rows_for_scan(run, scan_id, labels, components))
    _write_csv(run.kidneys_csv, _KIDNEY_HEADER, rows)
    return rows


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_phantom(cfg: PipelineConfig, run: RunPaths) -> dict:
    if cfg.input_dir:
        raise ConfigError("the phantom stage generates its own scans; "
                          "clear input_dir or drop the stage")
    ph = cfg.phantoms
    plan = CohortPlan(
        n_healthy=ph.n_healthy, n_bump=ph.n_bump,
        n_endophytic=ph.n_endophytic, n_cyst=ph.n_cyst,
        n_bump_large=ph.n_bump_large, seed=ph.seed,
        spacing_mm=ph.spacing_mm, base_hu=ph.base_hu,
        tumour_hu=ph.tumour_hu, cyst_hu=ph.cyst_hu, noise_hu=ph.noise_hu,
        semi_axis_ranges=ph.semi_axis_ranges,
        large_semi_axis_ranges=ph.large_semi_axis_ranges,
        bump_radius_range=ph.bump_radius_range,
        large_bump_radius_range=ph.large_bump_radius_range,
        endo_radius_range=ph.endo_radius_range,
        cyst_radius_range=ph.cyst_radius_range)
    run.scan_dir.mkdir(parents=True, exist_ok=True)
    cohort_rows = []
    for member in cohort_specs(plan):
        volume, labels, manifest = phantom_generate(member.spec)
        _atomic_pair(lambda p, v=volume: save_grid(v, p),
                     run.scan_dir / f"{member.scan_id}_volume")
        _atomic_pair(lambda p, l=labels: save_grid(l, p),
                     run.scan_dir / f"{member.scan_id}_labels")
        manifest = dict(manifest, scan_id=member.scan_id,
                        patient_id=member.patient_id, arm=member.arm)
        _atomic_text(run.scan_dir / f"{member.scan_id}_truth.json",
                     json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        cohort_rows.append([member.scan_id, member.patient_id, member.arm,
                            member.spec.side, manifest["lesion"],
                            repr(manifest["lesion_radius_mm"]),
                            str(member.spec.seed)])
    _write_csv(run.scan_dir / "cohort.csv",
               ["scan_id", "patient_id", "arm", "side", "lesion",
                "lesion_radius_mm", "seed"], cohort_rows)
    return {"scans": len(cohort_rows)}


def stage_mesh(cfg: PipelineConfig, run: RunPaths) -> dict:
    run.mesh_dir.mkdir(parents=True, exist_ok=True)
    index_rows = []
    for scan_id in _scan_ids(run, "mesh"):
        _, labels = _load_scan(run, scan_id)
        components = sorted(split_kidneys(labels), key=lambda c: c.side)
        for comp in components:
            kidney_id = f"{scan_id}_{comp.side}"
            mesh = mesher.extract_surface(
                comp.mask, comp.spacing, origin=comp.origin,
                voxel_mm=cfg.mesh.extraction_voxel_mm)
            field = mesher.curvature_field(mesh)
            graph = mesher.build_graph(mesh, field.vertex_curvatures)
            _atomic_file(lambda p, m=mesh: mesher.save_obj(m, p),
                         run.mesh_dir / f"{kidney_id}_mesh.obj")
            _atomic_file(lambda p, g=graph: mesher.save_graph_json(g, p),
                         run.mesh_dir / f"{kidney_id}_graph.json")
            index_rows.append([scan_id, kidney_id, comp.side,
                               str(mesh.n_vertices), str(len(mesh.faces))])
    _write_csv(run.mesh_dir / "index.csv",
               ["scan_id", "kidney_id", "side", "n_vertices", "n_faces"],
               index_rows)
    return {"kidneys": len(index_rows)}


def stage_features(cfg: PipelineConfig, run: RunPaths) -> dict:
    _require(run.mesh_dir / "index.csv", "features", "mesh")
    kidney_rows = _write_kidney_inventory(run, "features")
    lesion_volume = {r[0]: float(r[6]) for r in kidney_rows}
    feature_rows = []
    for scan_id in _scan_ids(run, "features"):
        volume, labels = _load_scan(run, scan_id)
        components = sorted(split_kidneys(labels), key=lambda c: c.side)
        for comp in components:
            kidney_id = f"{scan_id}_{comp.side}"
            graph_path = run.mesh_dir / f"{kidney_id}_graph.json"
            _require(graph_path, "features", "mesh")
            graph = mesher.load_graph_json(graph_path)
            shape = features.shape_descriptors(comp)
            curv = features.curvature_histogram(graph.node_features[:, 3])
            mask = np.zeros(volume.values.shape, dtype=bool)
            mask[comp.bbox] = comp.mask
            atten = features.attenuation_histogram(volume, mask)
            vec = features.assemble(shape, curv, atten)
            label = ensemble.assign_labels(lesion_volume[kidney_id], "gnn")
            feature_rows.append((kidney_id, comp.side, label, vec))
    _atomic_file(lambda p: features.save_feature_csv(feature_rows, p),
                 run.features_csv)
    return {"kidneys": len(feature_rows)}


def _shape_dataset(run: RunPaths, stage: str):
    """LabeledShapeRecords plus per-record patient ids, in kidney-id order."""
    _require(run.features_csv, stage, "features")
    _require(run.kidneys_csv, stage, "features")
    feature_rows = {r[0]: r for r in features.load_feature_csv(
        run.features_csv)}
    kidney_rows = sorted(_read_csv(run.kidneys_csv, _KIDNEY_HEADER),
                         key=lambda r: r[0])
    records, patients, meta = [], [], []
    for row in kidney_rows:
        kidney_id = row[0]
        if kidney_id not in feature_rows:
            raise DataError(f"kidney {kidney_id} is in kidneys.csv but has "
                            f"no feature row")
        graph_path = run.mesh_dir / f"{kidney_id}_graph.json"
        _require(graph_path, stage, "mesh")
        records.append(ensemble.LabeledShapeRecord(
            kidney_id=kidney_id, patient_id=row[2],
            features=feature_rows[kidney_id][3],
            graph=mesher.load_graph_json(graph_path),
            lesion_volume=float(row[6])))
        patients.append(row[2])
        meta.append(row)
    return records, patients, meta


def stage_train_shape(cfg: PipelineConfig, run: RunPaths) -> dict:
    st = cfg.shape_training
    records, patients, meta = _shape_dataset(run, "train-shape")
    folds = evalmod.make_folds(patients, k=st.n_folds, seed=st.fold_seed)
    record_folds = evalmod.fold_record_indices(patients, folds)

    mlp_run = ensemble.train_individual(
        "mlp", records, record_folds, seed=st.train_seed,
        epochs=st.individual_epochs, learning_rate=st.mlp_learning_rate,
        batch_size=st.batch_size)
    gnn_run = ensemble.train_individual(
        "gnn", records, record_folds, seed=st.train_seed,
        epochs=st.individual_epochs, learning_rate=st.gnn_learning_rate,
        batch_size=st.batch_size)
    fused_run = ensemble.train_ensemble(
        mlp_run, gnn_run, records, record_folds, seed=st.train_seed,
        stage_a_epochs=st.stage_a_epochs, stage_b_epochs=st.stage_b_epochs,
        learning_rate=st.ensemble_learning_rate, batch_size=st.batch_size)

    run.model_dir.mkdir(parents=True, exist_ok=True)
    for training_run in (mlp_run, gnn_run, fused_run):
        for fold, weights in enumerate(training_run.fold_weights):
            stats = training_run.fold_standardizers[fold]
            meta_dict = {
                "kind": training_run.kind, "fold": fold,
                "standardizer_mean": [repr(float(x)) for x in stats.mean],
                "standardizer_std": [repr(float(x)) for x in stats.std],
            }
            _atomic_pair(
                lambda p, w=weights, m=meta_dict: save_weights(w, p, meta=m),
                run.model_dir / f"{training_run.kind}_fold{fold}")
    _atomic_text(run.model_dir / "training.json", json.dumps(
        {"folds": folds,
         "mlp": mlp_run.manifest, "gnn": gnn_run.manifest,
         "ensemble": fused_run.manifest},
        indent=2, sort_keys=True) + "\n")

    scores = {r.kind: ensemble.out_of_fold_scores(r, records, record_folds)
              for r in (mlp_run, gnn_run, fused_run)}
    score_rows = []
    for i, row in enumerate(meta):
        score_rows.append([row[0], row[2], row[4], row[5], row[6], row[7],
                           repr(float(scores["mlp"][i])),
                           repr(float(scores["gnn"][i])),
                           repr(float(scores["ensemble"][i]))])
    _write_csv(run.model_dir / "scores_shape.csv", _SHAPE_SCORE_HEADER,
               score_rows)
    return {"kidneys": len(records), "folds": st.n_folds}


def stage_sample(cfg: PipelineConfig, run: RunPaths) -> dict:
    _write_kidney_inventory(run, "sample")
    run.sample_dir.mkdir(parents=True, exist_ok=True)
    n_samples = 0
    for scan_id in _scan_ids(run, "sample"):
        volume, labels = _load_scan(run, scan_id)
        scan = sampler.preprocess(volume, labels)
        kidneys = sorted(split_kidneys(scan.labels), key=lambda c: c.side)
        samples = []
        for comp in kidneys:
            for kind in ("tile2d", "block3d"):
                specs = sampler.centralised_samples(comp, kind,
                                                    labels=scan.labels)
                for spec in specs:
                    samples.append(sampler.SampleSpec(
                        kind=spec.kind, scheme=spec.scheme,
                        center=spec.center,
                        kidney_id=f"{scan_id}_{comp.side}",
                        label=spec.label))
        _atomic_file(
            lambda p, s=samples: sampler.save_sample_manifest(
                s, p, scan_id=scan_id),
            run.sample_dir / f"{scan_id}_samples.csv")
        n_samples += len(samples)
    return {"samples": n_samples}


def stage_score(cfg: PipelineConfig, run: RunPaths) -> dict:
    kidney_rows = _write_kidney_inventory(run, "score")
    patient_of = {r[0]: r[2] for r in kidney_rows}
    truth_of = {r[0]: r[5] for r in kidney_rows}
    diameter_of = {r[0]: float(r[7]) for r in kidney_rows}

    scan_ids = _scan_ids(run, "score")
    per_scan = {}
    all_specs = []           # (scan_id, spec, feature_vector)
    for scan_id in scan_ids:
        manifest_path = run.sample_dir / f"{scan_id}_samples.csv"
        _require(manifest_path, "score", "sample")
        volume, labels = _load_scan(run, scan_id)
        scan = sampler.preprocess(volume, labels)
        specs = sampler.load_sample_manifest(manifest_path)
        feats = [sampler.sample_features(scan, s) for s in specs]
        per_scan[scan_id] = specs
        all_specs.extend((scan_id, s, f) for s, f in zip(specs, feats))

    st = cfg.scorer
    patients = sorted({patient_of[s.kidney_id] for _, s, _ in all_specs})
    folds = evalmod.make_folds(patients, k=cfg.shape_training.n_folds,
                               seed=cfg.shape_training.fold_seed)
    fold_of_patient = {p: k for k, fold in enumerate(folds) for p in fold}

    probabilities = np.zeros((len(all_specs), len(sampler.CLASSES)))
    schedule = ((st.epochs_initial, st.lr_initial),
                (st.epochs_refine, st.lr_refine))
    for fold in range(len(folds)):
        train_rows = [i for i, (_, s, _) in enumerate(all_specs)
                      if fold_of_patient[patient_of[s.kidney_id]] != fold]
        held_rows = [i for i, (_, s, _) in enumerate(all_specs)
                     if fold_of_patient[patient_of[s.kidney_id]] == fold]
        if not train_rows or not held_rows:
            continue
        matrix = np.stack([all_specs[i][2] for i in train_rows])
        labels_idx = [sampler.CLASSES.index(all_specs[i][1].label)
                      for i in train_rows]
        scorer = sampler.train_scorer(
            matrix, labels_idx, seed=st.train_seed * 1_000_003 + fold,
            schedule=schedule, batch_size=st.batch_size)
        held_matrix = np.stack([all_specs[i][2] for i in held_rows])
        probabilities[held_rows] = scorer.probabilities(held_matrix)

    run.score_dir.mkdir(parents=True, exist_ok=True)
    offset = 0
    scored_by_kidney = {}
    for scan_id in scan_ids:
        specs = per_scan[scan_id]
        scores = []
        for spec in specs:
            score = sampler.SampleScore(
                sample=spec, probabilities=probabilities[offset])
            scores.append(score)
            scored_by_kidney.setdefault(
                (spec.kidney_id, spec.kind), []).append(
                    score.cancer_probability)
            offset += 1
        _atomic_file(
            lambda p, s=scores: sampler.save_scores_csv(
                s, p, scan_id=scan_id),
            run.score_dir / f"{scan_id}_sample_scores.csv")

    kidney_score_rows = []
    for (kidney_id, kind) in sorted(scored_by_kidney):
        value = evalmod.kidney_score(scored_by_kidney[(kidney_id, kind)],
                                     kind,
                                     top_votes=cfg.evaluation.top_tile_votes)
        kidney_score_rows.append([kidney_id, patient_of[kidney_id],
                                  truth_of[kidney_id],
                                  repr(diameter_of[kidney_id]), kind,
                                  repr(float(value))])
    _write_csv(run.score_dir / "kidney_scores.csv", _KIDNEY_SCORE_HEADER,
               kidney_score_rows)
    return {"samples": len(all_specs),
            "kidneys": len({k for k, _ in scored_by_kidney})}


def _roc_or_none(records):
    try:
        return evalmod.roc_auc(records)
    except DataError:
        return None


def _summarize_model(name: str, records, run: RunPaths, summary: dict,
                     arms=None, cutoff_mm=None):
    curve = _roc_or_none(records)
    if curve is None:
        summary[name] = {"auc": None}
        return
    entry = {"auc": curve.auc, "n": len(records)}
    strata = (evalmod.stratify(records) if cutoff_mm is None
              else evalmod.stratify(records, cutoff_mm))
    for stratum_name, stratum_records in strata.items():
        stratum_curve = _roc_or_none(stratum_records)
        entry[f"auc_{stratum_name}"] = (stratum_curve.auc if stratum_curve
                                        else None)
    if arms:
        healthy = [r for r, arm in arms if r.truth == "healthy"]
        for arm_name in sorted({arm for _, arm in arms if arm}):
            positives = [r for r, arm in arms
                         if arm == arm_name and r.truth == "cancerous"]
            if not positives:
                continue
            arm_curve = _roc_or_none(positives + healthy)
            entry[f"auc_{arm_name}_vs_healthy"] = (arm_curve.auc
                                                   if arm_curve else None)
    summary[name] = entry
    _atomic_file(lambda p, c=curve: evalmod.save_roc_csv(c, p),
                 run.eval_dir / f"roc_{name}.csv")


def stage_evaluate(cfg: PipelineConfig, run: RunPaths) -> dict:
    shape_path = run.model_dir / "scores_shape.csv"
    sample_path = run.score_dir / "kidney_scores.csv"
    if not shape_path.exists() and not sample_path.exists():
        raise DataError("nothing to evaluate: run train-shape or score first")
    run.eval_dir.mkdir(parents=True, exist_ok=True)
    summary = {}

    cutoff = cfg.evaluation.small_cutoff_mm
    if shape_path.exists():
        rows = _read_csv(shape_path, _SHAPE_SCORE_HEADER)
        for column, name in ((6, "mlp"), (7, "gnn"), (8, "ensemble")):
            records = [evalmod.KidneyRecord(
                kidney_id=r[0], patient_id=r[1], truth=r[3],
                tumour_max_diameter=float(r[5]), score=float(r[column]))
                for r in rows]
            arms = [(rec, row[2]) for rec, row in zip(records, rows)]
            _summarize_model(name, records, run, summary, arms=arms,
                             cutoff_mm=cutoff)

    if sample_path.exists():
        rows = _read_csv(sample_path, _KIDNEY_SCORE_HEADER)
        for kind in sorted({r[4] for r in rows}):
            records = [evalmod.KidneyRecord(
                kidney_id=r[0], patient_id=r[1], truth=r[2],
                tumour_max_diameter=float(r[3]), score=float(r[5]))
                for r in rows if r[4] == kind]
            _summarize_model(kind, records, run, summary, cutoff_mm=cutoff)

    _atomic_file(lambda p: evalmod.save_summary_json(summary, p),
                 run.eval_dir / "summary.json")
    return {"models": sorted(summary)}


_STAGE_FUNCS = {
    "phantom": stage_phantom,
    "mesh": stage_mesh,
    "features": stage_features,
    "train-shape": stage_train_shape,
    "sample": stage_sample,
    "score": stage_score,
    "evaluate": stage_evaluate,
}


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def _provenance(cfg: PipelineConfig) -> dict:
    import importlib.metadata
    import scipy
    try:
        package_version = importlib.metadata.version("renodet")
    except importlib.metadata.PackageNotFoundError:
        package_version = "unknown"
    return {
        "config_digest": config_digest(cfg),
        "versions": {"renodet": package_version,
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "seeds": {"phantoms": cfg.phantoms.seed,
                  "folds": cfg.shape_training.fold_seed,
                  "shape_training": cfg.shape_training.train_seed,
                  "sample_cap": cfg.sampling.cap_seed,
                  "scorer": cfg.scorer.train_seed},
    }


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Execute the configured stages in canonical order; returns a report.

    Any stage failure is re-raised with the stage name prefixed, keeping
    the original error class (and thereby its exit code).
    """
    seen = set()
    for stage in cfg.stages:
        if stage in seen:
            raise ConfigError(f"stage {stage!r} listed twice")
        seen.add(stage)
    stages = sorted(cfg.stages, key=STAGES.index)

    run = RunPaths.for_config(cfg)
    run.run_dir.mkdir(parents=True, exist_ok=True)
    _atomic_file(lambda p: save_config(cfg, p), run.run_dir / "config.json")
    _atomic_text(run.run_dir / "provenance.json",
                 json.dumps(_provenance(cfg), indent=2, sort_keys=True)
                 + "\n")

    report = {}
    for stage in stages:
        try:
            report[stage] = _STAGE_FUNCS[stage](cfg, run)
        except RenodetError as exc:
            raise type(exc)(f"stage {stage}: {exc}") from exc

    artifacts = sorted(str(p.relative_to(run.run_dir))
                       for p in run.run_dir.rglob("*") if p.is_file()
                       and p.name != "manifest.json")
    _atomic_text(run.run_dir / "manifest.json",
                 json.dumps({"stages": stages, "report": report,
                             "artifacts": artifacts},
                            indent=2, sort_keys=True) + "\n")
    return {"stages": stages, "report": report, "artifacts": artifacts}
