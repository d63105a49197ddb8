"""Command-line entry points.

Every experiment is a JSON config document validated against a schema
before any work starts (unknown keys are rejected). Commands write their
artifacts under the config's output_dir; wall-clock timings go to a
separate timing.json so every other artifact is byte-identical across
reruns with the same config and seed.

Exit codes: 0 success, 1 runtime failure, 2 invalid config.
"""

from __future__ import annotations

import contextlib
import json
import os
import sys
from pathlib import Path

import click
import jsonschema
import numpy as np

from . import synth
from .data import (
    ColumnSpec,
    LabeledDataset,
    LabelTree,
    TabularEncoding,
    read_embeddings,
    read_label_tree,
    read_tabular_csv,
    split_dataset,
    write_embeddings,
)
from .errors import CometError, SchemaError, SpecError
from .fusion import FusionSpec, ModalitySpec, comet_predict, fit_fusion, save_fusion
from .hierarchy import DEFAULT_BUDGET, evaluate_hier, fit_hier
from .numerics import fit_pca, project, rank_diagnostics
from .pooling import PalFitConfig, PalPooler, fit_pal_pooler, mean_pool, pal_heatmap
from .predictor import (
    ReferencePredictor,
    ReferencePredictorConfig,
    RemotePredictor,
    RemotePredictorConfig,
)

GENERATORS = (
    "gaussian_blobs",
    "planted_token",
    "tabular_dominant",
    "anisotropic",
    "hierarchical",
)

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "output_dir"],
    "properties": {
        "output_dir": {"type": "string"},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["generator"],
                    "properties": {
                        "generator": {"enum": list(GENERATORS)},
                        "params": {"type": "object"},
                    },
                },
                "embeddings": {
                    "type": "object",
                    "additionalProperties": {"type": "string"},
                },
                "tabular": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["path"],
                    "properties": {
                        "path": {"type": "string"},
                        "numeric": {"type": "array", "items": {"type": "string"}},
                        "categorical": {"type": "array", "items": {"type": "string"}},
                        "label": {"type": "string"},
                        "sample_id": {"type": "string"},
                        "encoding": {"type": "string"},
                    },
                },
                "tree": {"type": "string"},
            },
        },
        "fusion": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "modalities": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["name"],
                        "properties": {
                            "name": {"type": "string"},
                            "pooling": {"enum": ["mean", "cls", "pal"]},
                            "cls_index": {"type": "integer", "minimum": 0},
                            "pca_dim": {"type": "integer", "minimum": 0},
                            "pooler_path": {"type": "string"},
                        },
                    },
                },
                "use_tabular": {"type": "boolean"},
                "seed": {"type": "integer"},
            },
        },
        "pal": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "modality": {"type": "string"},
                "iterations": {"type": "integer", "minimum": 1},
                "q_max": {"type": "integer", "minimum": 1},
                "lam": {"type": "number", "minimum": 0},
                "tau": {"type": "number", "exclusiveMinimum": 0},
                "pal_pca_dim": {"type": "integer", "minimum": 1},
                "val_pca_dim": {"type": "integer", "minimum": 1},
                "scorer": {"enum": ["jsd_prior", "correct_class", "entropy"]},
                "group_schedule": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 1},
                },
                "length_weighting": {"type": "boolean"},
                "fit_in_pca_space": {"type": "boolean"},
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "seed": {"type": "integer"},
            },
        },
        "predictor": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["reference", "remote"]},
                "bandwidth_scale": {"type": "number", "exclusiveMinimum": 0},
                "smoothing_alpha": {"type": "number", "minimum": 0},
                "standardize": {"type": "boolean"},
                "seed": {"type": "integer"},
                "endpoint": {"type": "string"},
                "timeout_s": {"type": "number", "exclusiveMinimum": 0},
                "max_batch": {"type": "integer", "minimum": 1},
                "retries": {"type": "integer", "minimum": 0},
                "bearer_token": {"type": "string"},
            },
        },
        "hierarchy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enable": {"type": "boolean"},
                "budget": {"type": "integer", "minimum": 1},
                "shared_pca": {"type": "boolean"},
                "seed": {"type": "integer"},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "stratified": {"type": "boolean"},
                "seed": {"type": "integer"},
            },
        },
        "diagnostics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "modality": {"type": "string"},
                "dims": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"type": "integer", "minimum": 1},
                },
                "seed": {"type": "integer"},
            },
        },
    },
}


def load_config(path) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise SchemaError(f"cannot read config: {exc}")
    except ValueError as exc:
        raise SchemaError(f"config is not valid JSON: {exc}")
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path_str = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"config invalid at {path_str}: {exc.message}")
    return doc


def build_dataset(data_cfg: dict) -> tuple[LabeledDataset, LabelTree | None]:
    """Materialize the dataset (and tree, when configured) from the config."""
    tree = None
    if "synthetic" in data_cfg:
        gen = data_cfg["synthetic"]["generator"]
        params = dict(data_cfg["synthetic"].get("params", {}))
        try:
            if gen == "hierarchical":
                params.setdefault("branching", [2, 2])
                ds, tree = synth.hierarchical_dataset(**params)
            else:
                fn = {
                    "gaussian_blobs": synth.gaussian_blobs,
                    "planted_token": synth.planted_token_dataset,
                    "tabular_dominant": synth.tabular_dominant_dataset,
                    "anisotropic": synth.anisotropic_dataset,
                }[gen]
                ds = fn(**params)
        except TypeError as exc:
            raise SchemaError(f"bad generator params for {gen!r}: {exc}")
    else:
        modalities = {}
        labels = None
        for name, path in data_cfg.get("embeddings", {}).items():
            try:
                block = read_embeddings(path)
            except OSError as exc:
                raise SchemaError(f"embedding {name!r}: {exc}")
            modalities[name] = block
            if labels is None and block.labels is not None:
                labels = block.labels
        tabular = None
        class_names = None
        if "tabular" in data_cfg:
            tcfg = data_cfg["tabular"]
            schema = ColumnSpec(
                numeric=list(tcfg.get("numeric", [])),
                categorical=list(tcfg.get("categorical", [])),
                label=tcfg.get("label"),
                sample_id=tcfg.get("sample_id"),
            )
            enc = None
            try:
                if "encoding" in tcfg:
                    with open(tcfg["encoding"]) as f:
                        enc = TabularEncoding.from_json(f.read())
                tabular, enc = read_tabular_csv(tcfg["path"], schema, enc)
            except OSError as exc:
                raise SchemaError(f"tabular input: {exc}")
            if tabular.labels is not None:
                labels = tabular.labels
                class_names = enc.label_names
        if labels is None:
            raise SchemaError("no labels found in any configured source")
        if class_names is None:
            class_names = [f"c{i}" for i in range(int(labels.max()) + 1)]
        ds = LabeledDataset(modalities, labels, class_names, tabular=tabular)
    if "tree" in data_cfg:
        try:
            tree = read_label_tree(data_cfg["tree"])
        except OSError as exc:
            raise SchemaError(f"tree input: {exc}")
    return ds, tree


def build_predictor(pred_cfg: dict):
    kind = pred_cfg.get("kind", "reference")
    if kind == "reference":
        return ReferencePredictor(
            ReferencePredictorConfig(
                bandwidth_scale=pred_cfg.get("bandwidth_scale", 1.0),
                smoothing_alpha=pred_cfg.get("smoothing_alpha", 1.0),
                standardize=pred_cfg.get("standardize", True),
                seed=pred_cfg.get("seed", 0),
            )
        )
    if "endpoint" not in pred_cfg:
        raise SchemaError("remote predictor needs an endpoint")
    return RemotePredictor(
        RemotePredictorConfig(
            endpoint=pred_cfg["endpoint"],
            timeout=pred_cfg.get("timeout_s", 30.0),
            max_batch=pred_cfg.get("max_batch", 1024),
            retries=pred_cfg.get("retries", 2),
            bearer_token=pred_cfg.get("bearer_token"),
        )
    )


def load_pooler(path) -> PalPooler:
    with open(path) as f:
        doc = json.load(f)
    return PalPooler(np.asarray(doc["theta"], dtype=np.float64), doc["fitted_iteration"])


def build_fusion_spec(fusion_cfg: dict, ds: LabeledDataset) -> FusionSpec:
    mods = fusion_cfg.get("modalities")
    if mods is None:
        # default: every modality mean-pooled at the default projection width
        mods = [{"name": name} for name in sorted(ds.modalities)]
    specs = []
    for m in mods:
        pooler = None
        if "pooler_path" in m:
            pooler = load_pooler(m["pooler_path"])
        specs.append(
            ModalitySpec(
                m["name"],
                m.get("pooling", "pal" if pooler is not None else "mean"),
                m.get("cls_index", 0),
                pooler,
                m.get("pca_dim", 256),
            )
        )
    return FusionSpec(specs, fusion_cfg.get("use_tabular", True), fusion_cfg.get("seed", 0))


def build_pal_config(pal_cfg: dict) -> PalFitConfig:
    return PalFitConfig(
        iterations=pal_cfg.get("iterations", 3),
        q_max=pal_cfg.get("q_max", 500_000),
        lam=pal_cfg.get("lam", 1e4),
        tau=pal_cfg.get("tau"),
        pal_pca_dim=pal_cfg.get("pal_pca_dim", 128),
        val_pca_dim=pal_cfg.get("val_pca_dim"),
        scorer=pal_cfg.get("scorer", "jsd_prior"),
        group_schedule=pal_cfg.get("group_schedule"),
        length_weighting=pal_cfg.get("length_weighting"),
        fit_in_pca_space=pal_cfg.get("fit_in_pca_space", False),
        val_fraction=pal_cfg.get("val_fraction", 0.1),
        seed=pal_cfg.get("seed", 0),
    )


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _split(ds: LabeledDataset, cfg: dict) -> tuple[LabeledDataset, LabeledDataset]:
    eval_cfg = cfg.get("eval", {})
    return split_dataset(
        ds,
        eval_cfg.get("train_fraction", 0.7),
        stratified=eval_cfg.get("stratified", True),
        seed=eval_cfg.get("seed", 0),
    )


@contextlib.contextmanager
def _thread_cap(threads: int | None):
    if threads is None:
        env = os.environ.get("COMET_THREADS")
        threads = int(env) if env else None
    if threads is None:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        # best effort for BLAS pools spawned after this point
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
        yield
        return
    with threadpool_limits(limits=threads):
        yield


def _run(command, config_path, threads):
    try:
        cfg = load_config(config_path)
    except (SchemaError, SpecError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        with _thread_cap(threads):
            command(cfg, out_dir)
    except (SchemaError, SpecError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except CometError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@click.group()
def main():
    """Multimodal fusion pipeline with adaptive pooling and hierarchy support."""


_config_arg = click.argument("config_path", type=click.Path(exists=False))
_threads_opt = click.option(
    "--threads", type=int, default=None,
    help="Cap BLAS worker threads (1 = bit-deterministic mode); COMET_THREADS overrides.",
)


@main.command("fuse-predict")
@_config_arg
@_threads_opt
def fuse_predict_cmd(config_path, threads):
    """Fit the fusion on the train split and predict the held-out split."""

    def run(cfg, out_dir):
        import time

        t0 = time.perf_counter()
        ds, _ = build_dataset(cfg["data"])
        sup, qry = _split(ds, cfg)
        spec = build_fusion_spec(cfg.get("fusion", {}), ds)
        pred = build_predictor(cfg.get("predictor", {}))
        t_fit = time.perf_counter()
        fitted = fit_fusion(sup, spec)
        t_pred = time.perf_counter()
        probs, predicted, metrics = comet_predict(fitted, sup, qry, pred)
        t_end = time.perf_counter()

        write_json(out_dir / "metrics.json", {
            **metrics,
            "fused_dim": fitted.fused_dim,
            "n_support": sup.n,
            "n_query": qry.n,
            "num_classes": ds.num_classes,
            "support_fingerprint": fitted.support_fingerprint,
        })
        from .data import FeatureMatrix

        write_embeddings(
            out_dir / "predictions.cemb",
            FeatureMatrix(probs, qry.sample_ids, predicted, ds.num_classes),
        )
        save_fusion(out_dir / "fusion.cfus", fitted)
        write_json(out_dir / "timing.json", {
            "load_s": t_fit - t0,
            "fit_s": t_pred - t_fit,
            "predict_s": t_end - t_pred,
            "total_s": t_end - t0,
        })

    _run(run, config_path, threads)


@main.command("pal-fit")
@_config_arg
@_threads_opt
def pal_fit_cmd(config_path, threads):
    """Fit the adaptive pooler and persist it with its fit report and heatmaps."""

    def run(cfg, out_dir):
        import time

        t0 = time.perf_counter()
        ds, _ = build_dataset(cfg["data"])
        sup, _ = _split(ds, cfg)
        pal_cfg = cfg.get("pal", {})
        pred = build_predictor(cfg.get("predictor", {}))
        pooler, report = fit_pal_pooler(sup, pred, build_pal_config(pal_cfg))
        t_end = time.perf_counter()

        write_json(out_dir / "pooler.json", {
            "theta": [float(v) for v in pooler.theta],
            "fitted_iteration": pooler.fitted_iteration,
        })
        # wall times live in timing.json so the report is byte-stable
        write_json(out_dir / "fit_report.json", {
            "best_iteration": report.best_iteration,
            "candidates": [
                {"iteration": c["iteration"], "val_accuracy": c["val_accuracy"],
                 "theta": c["theta"]}
                for c in report.candidates
            ],
        })
        modality = pal_cfg.get("modality")
        if modality is None:
            tokens = [
                b for b in sup.modalities.values()
                if not hasattr(b, "values")
            ]
            token_set = tokens[0]
        else:
            token_set = sup.modalities[modality]
        n_heat = min(token_set.n, 16)
        write_json(out_dir / "heatmap.json", pal_heatmap(token_set.subset(range(n_heat)), pooler))
        write_json(out_dir / "timing.json", {
            "per_iteration_s": [c["wall_time_s"] for c in report.candidates],
            "total_s": t_end - t0,
        })

    _run(run, config_path, threads)


@main.command("hier")
@_config_arg
@_threads_opt
def hier_cmd(config_path, threads):
    """Fit one classifier per internal tree node and evaluate greedy routing."""

    def run(cfg, out_dir):
        ds, tree = build_dataset(cfg["data"])
        if tree is None:
            raise SchemaError("hier needs a label tree (data.tree or the hierarchical generator)")
        sup, qry = _split(ds, cfg)
        spec = build_fusion_spec(cfg.get("fusion", {}), ds)
        pred = build_predictor(cfg.get("predictor", {}))
        hcfg = cfg.get("hierarchy", {})
        model = fit_hier(
            sup, tree, spec,
            budget=hcfg.get("budget", DEFAULT_BUDGET),
            seed=hcfg.get("seed", 0),
            shared_pca=hcfg.get("shared_pca", False),
        )
        report = evaluate_hier(model, qry, pred)
        timing = report.pop("timing")
        write_json(out_dir / "hier_report.json", report)
        write_json(out_dir / "timing.json", timing)

    _run(run, config_path, threads)


@main.command("diagnostics")
@_config_arg
@_threads_opt
def diagnostics_cmd(config_path, threads):
    """Sweep the projection width and report accuracy and rank diagnostics."""

    def run(cfg, out_dir):
        ds, _ = build_dataset(cfg["data"])
        sup, qry = _split(ds, cfg)
        diag = cfg.get("diagnostics", {})
        dims = diag.get("dims", [16, 32, 64, 128, 256])
        name = diag.get("modality")
        if name is None:
            name = sorted(ds.modalities)[0]
        if name not in ds.modalities:
            raise SchemaError(f"modality {name!r} absent from dataset")
        sup_block, qry_block = sup.modalities[name], qry.modalities[name]
        if not hasattr(sup_block, "values"):
            sup_block, qry_block = mean_pool(sup_block), mean_pool(qry_block)
        pred = build_predictor(cfg.get("predictor", {}))
        rows = []
        for dim in dims:
            pca = fit_pca(sup_block.values, dim)
            sup_fm = project(pca, sup_block)
            qry_fm = project(pca, qry_block)
            probs = pred.predict(qry_fm.values, sup_fm)
            observed = np.unique(sup_fm.labels)
            acc = float(np.mean(observed[probs.argmax(axis=1)] == qry.labels))
            d = rank_diagnostics(sup_fm.values, reference=pca)
            rows.append({
                "dim": dim,
                "effective_dim": pca.output_dim,
                "accuracy": acc,
                "effective_rank": d.effective_rank,
                "normalized_effective_rank": d.normalized_effective_rank,
                "explained_variance": d.explained_variance,
                "product": d.product,
            })
        write_json(out_dir / "sweep.json", {"modality": name, "rows": rows})

    _run(run, config_path, threads)


@main.command("ingest")
@click.argument("csv_path", type=click.Path(exists=False))
@click.argument("out_path", type=click.Path())
@click.option("--schema", "schema_path", required=True, type=click.Path(exists=False),
              help="JSON file naming numeric/categorical/label/sample_id columns.")
@click.option("--encoding", "encoding_path", type=click.Path(exists=False),
              help="Reuse a persisted encoding (predict-time path).")
def ingest_cmd(csv_path, out_path, schema_path, encoding_path):
    """Encode a tabular CSV into the binary embedding format."""
    try:
        with open(schema_path) as f:
            doc = json.load(f)
        schema = ColumnSpec(
            numeric=list(doc.get("numeric", [])),
            categorical=list(doc.get("categorical", [])),
            label=doc.get("label"),
            sample_id=doc.get("sample_id"),
        )
        enc = None
        if encoding_path and os.path.exists(encoding_path):
            with open(encoding_path) as f:
                enc = TabularEncoding.from_json(f.read())
        fm, enc = read_tabular_csv(csv_path, schema, enc)
        write_embeddings(out_path, fm)
        if encoding_path and not os.path.exists(encoding_path):
            with open(encoding_path, "w") as f:
                f.write(enc.to_json())
    except (SchemaError, SpecError, OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except CometError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@main.command("serve-check")
@click.argument("endpoint")
@click.option("--output", type=click.Path(), default=None,
              help="Write the conformance report to this JSON file.")
@click.option("--bearer-token", default=None)
@click.option("--seed", type=int, default=0)
def serve_check_cmd(endpoint, output, bearer_token, seed):
    """Probe a remote predictor for wire-protocol conformance."""
    report = run_serve_check(endpoint, bearer_token=bearer_token, seed=seed)
    if output:
        write_json(output, report)
    for check in report["checks"]:
        status = "ok" if check["passed"] else "FAIL"
        click.echo(f"{status:4s} {check['name']}: {check['detail']}")
    if not report["passed"]:
        sys.exit(1)


def run_serve_check(endpoint: str, bearer_token: str | None = None, seed: int = 0) -> dict:
    """Session lifecycle, row-stochasticity, and batching-invariance probes."""
    import requests

    from .numerics import seeded_rng

    rng = seeded_rng(seed)
    d, C, n_sup, n_qry = 6, 3, 30, 12
    centers = rng.normal(scale=3.0, size=(C, d))
    sup_labels = np.repeat(np.arange(C), n_sup // C)
    sup = centers[sup_labels] + rng.normal(size=(n_sup, d))
    qry = centers[rng.integers(C, size=n_qry)] + rng.normal(size=(n_qry, d))

    headers = {"Authorization": f"Bearer {bearer_token}"} if bearer_token else {}
    base = endpoint.rstrip("/")
    checks: list[dict] = []

    def check(name, passed, detail=""):
        checks.append({"name": name, "passed": bool(passed), "detail": str(detail)})
        return passed

    session_payload = {
        "d": d,
        "C": C,
        "class_ids": list(range(C)),
        "support": {
            "features": sup.astype(np.float32).tolist(),
            "labels": [int(v) for v in sup_labels],
        },
    }

    def create_session():
        r = requests.post(f"{base}/session", json=session_payload, headers=headers, timeout=30)
        r.raise_for_status()
        return r.json()["session_id"]

    def predict(sid, rows):
        r = requests.post(
            f"{base}/predict",
            json={"session_id": sid, "queries": np.asarray(rows, dtype=np.float32).tolist()},
            headers=headers, timeout=30,
        )
        r.raise_for_status()
        return np.asarray(r.json()["probabilities"], dtype=np.float64)

    try:
        sid = create_session()
        check("session_create", True, f"id {sid[:8]}...")

        full = predict(sid, qry)
        check("predict_shape", full.shape == (n_qry, C), f"shape {full.shape}")
        sums = full.sum(axis=1)
        check("row_stochastic", np.abs(sums - 1.0).max() <= 1e-4,
              f"max |row sum - 1| = {np.abs(sums - 1.0).max():.2e}")

        one_by_one = np.vstack([predict(sid, qry[i : i + 1]) for i in range(n_qry)])
        check("batching_1xm", np.abs(one_by_one - full).max() <= 1e-5,
              f"max diff {np.abs(one_by_one - full).max():.2e}")

        cut = int(rng.integers(1, n_qry))
        parts = np.vstack([predict(sid, qry[:cut]), predict(sid, qry[cut:])])
        check("batching_random_partition", np.abs(parts - full).max() <= 1e-5,
              f"max diff {np.abs(parts - full).max():.2e}")

        again = predict(sid, qry)
        check("determinism", np.abs(again - full).max() <= 1e-12,
              f"max diff {np.abs(again - full).max():.2e}")

        r = requests.delete(f"{base}/session/{sid}", headers=headers, timeout=30)
        check("session_delete", r.status_code in (200, 204), f"status {r.status_code}")

        r = requests.post(
            f"{base}/predict",
            json={"session_id": sid, "queries": qry[:1].astype(np.float32).tolist()},
            headers=headers, timeout=30,
        )
        check("deleted_session_404", r.status_code == 404, f"status {r.status_code}")

        r = requests.post(f"{base}/session", json={**session_payload, "C": 1, "class_ids": [0]},
                          headers=headers, timeout=30)
        check("capability_error", r.status_code == 422, f"status {r.status_code}")
    except Exception as exc:  # network or protocol failure ends the probe
        check("probe_completed", False, repr(exc))

    return {"endpoint": endpoint, "passed": all(c["passed"] for c in checks), "checks": checks}


if __name__ == "__main__":
    main()
