"""Acceptance gate: one test per release criterion, at the stated tolerance.

Property criteria run against independent oracles; directional criteria run
frozen synthetic fixtures with the reference predictor. Each timed criterion
asserts its own wall-clock budget.
"""

import json
import socket
import threading
import time

import numpy as np
import pytest

from comet.data import FeatureMatrix, TokenEmbeddingSet, split_dataset
from comet.hierarchy import fit_hier, hier_predict
from comet.fusion import FusionSpec, ModalitySpec, comet_predict, fit_fusion
from comet.numerics import (
    fit_pca,
    jsd,
    project,
    project_values,
    rank_diagnostics,
    ridge_solve,
    seeded_rng,
)
from comet.pooling import (
    PalFitConfig,
    PalPooler,
    fit_pal_pooler,
    mean_pool,
    pal_pool,
)
from comet.predictor import ReferencePredictor, ReferencePredictorConfig
from comet.synth import (
    anisotropic_dataset,
    hierarchical_dataset,
    planted_token_dataset,
    tabular_dominant_dataset,
)

import scipy.optimize


def _predictor(bw=1.0, standardize=True):
    return ReferencePredictor(
        ReferencePredictorConfig(bandwidth_scale=bw, standardize=standardize)
    )


def _accuracy(probs, sup_labels, true_labels):
    observed = np.unique(sup_labels)
    return float(np.mean(observed[probs.argmax(axis=1)] == true_labels))


class TestMeanPoolIdentity:
    def test_zero_theta_equals_mean_pool(self):
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(100):
            rng = seeded_rng(seed)
            d = int(rng.integers(2, 40))
            samples = [
                (f"s{i}", rng.normal(size=(int(rng.integers(1, 20)), d)))
                for i in range(int(rng.integers(2, 30)))
            ]
            ts = TokenEmbeddingSet(samples)
            a = pal_pool(ts, PalPooler(np.zeros(d)))
            b = mean_pool(ts)
            worst = max(worst, float(np.abs(a.values - b.values).max()))
        assert worst < 1e-6
        assert time.perf_counter() - t0 < 1.0


def _ridge_lbfgs_oracle(Z, s, w, lam):
    """Iterative minimizer of the weighted ridge objective."""

    def objective(theta):
        r = Z @ theta - s
        val = 0.5 * (w * r * r).sum() + 0.5 * lam * (theta @ theta)
        grad = Z.T @ (w * r) + lam * theta
        return val, grad

    res = scipy.optimize.minimize(
        objective, np.zeros(Z.shape[1]), jac=True, method="L-BFGS-B",
        options={"gtol": 1e-12, "ftol": 1e-16, "maxiter": 5000},
    )
    return res.x


class TestRidgeOracle:
    def test_closed_form_matches_iterative_oracle(self):
        t0 = time.perf_counter()
        for trial in range(20):
            rng = seeded_rng(trial)
            Z = rng.normal(size=(50, 8))
            s = rng.normal(size=50)
            w = rng.uniform(0.1, 2.0, size=50)
            for lam in (0.1, 10.0, 1e4):
                closed = ridge_solve(Z, s, w, lam).theta
                oracle = _ridge_lbfgs_oracle(Z, s, w, lam)
                assert np.abs(closed - oracle).max() <= 1e-5
        assert time.perf_counter() - t0 < 5.0


class TestPcaOracle:
    def test_eigenvalues_orthonormality_decorrelation(self):
        t0 = time.perf_counter()
        for seed in range(5):
            rng = seeded_rng(seed)
            X = rng.normal(size=(200, 12)) * rng.uniform(0.2, 3.0, size=12)
            pca = fit_pca(X, 8)
            # dense eigensolver on the sample covariance as the oracle
            cov = np.cov(X, rowvar=False, ddof=1)
            eig = np.linalg.eigvalsh(cov)[::-1]
            assert np.abs(pca.eigenvalues - eig[:8]).max() <= 1e-6
            gram = pca.components.T @ pca.components
            assert np.abs(gram - np.eye(8)).max() <= 1e-8
            proj = project_values(pca, X)
            corr = np.corrcoef(proj, rowvar=False)
            off = corr - np.diag(np.diag(corr))
            assert np.abs(off).max() <= 1e-6
        assert time.perf_counter() - t0 < 5.0


class TestJsdBounds:
    def test_random_simplex_pairs(self):
        t0 = time.perf_counter()
        rng = seeded_rng(0)
        ln2 = np.log(2.0)
        for _ in range(10_000):
            k = int(rng.integers(2, 8))
            p = rng.dirichlet(np.ones(k))
            q = rng.dirichlet(np.ones(k))
            v = jsd(p, q)
            assert 0.0 <= v <= ln2 + 1e-12
            assert abs(v - jsd(q, p)) <= 1e-12
            assert jsd(p, p) <= 1e-12
        assert time.perf_counter() - t0 < 5.0


def _pal_heldout_accuracy(tr, te, pooler, pred):
    sup_pooled = pal_pool(tr.modalities["tokens"], pooler)
    qry_pooled = pal_pool(te.modalities["tokens"], pooler)
    pca = fit_pca(sup_pooled.values, 8)
    sup = project(pca, sup_pooled)
    qry = project(pca, qry_pooled)
    probs = pred.predict(qry.values, sup)
    return _accuracy(probs, sup.labels, te.labels)


class TestPalDirectional:
    def test_pal_beats_mean_pool_by_five_points(self):
        t0 = time.perf_counter()
        diffs = []
        for seed in range(5):
            ds = planted_token_dataset(n=2000, seed=seed, signal_scale=3.5)
            tr, te = split_dataset(ds, 0.7, seed=seed + 100)
            pred = _predictor(bw=1.0)
            pooler, _ = fit_pal_pooler(
                tr, pred, PalFitConfig(iterations=3, seed=seed, val_pca_dim=8)
            )
            mean_acc = _pal_heldout_accuracy(tr, te, PalPooler(np.zeros(32)), pred)
            pal_acc = _pal_heldout_accuracy(tr, te, pooler, pred)
            diffs.append(pal_acc - mean_acc)
        assert np.median(diffs) >= 0.05
        assert time.perf_counter() - t0 < 60.0


class TestSelectionRule:
    def test_best_never_below_iteration_zero(self):
        for seed in range(5):
            ds = planted_token_dataset(n=400, seed=seed, signal_scale=3.5)
            _, report = fit_pal_pooler(
                ds, _predictor(bw=1.0),
                PalFitConfig(iterations=2, seed=seed, val_pca_dim=8),
            )
            accs = [c["val_accuracy"] for c in report.candidates]
            assert accs[report.best_iteration] >= accs[0]


class TestSignalBalancing:
    def test_projected_fusion_matches_or_beats_raw_concat(self):
        t0 = time.perf_counter()
        diffs = []
        for seed in range(5):
            ds = tabular_dominant_dataset(n=300, seed=seed)
            sup, qry = split_dataset(ds, 0.7, seed=seed)
            pred = _predictor(bw=0.5)
            accs = {}
            for dim in (64, 0):
                spec = FusionSpec([ModalitySpec("embedding", pca_dim=dim)])
                fitted = fit_fusion(sup, spec)
                _, _, metrics = comet_predict(fitted, sup, qry, pred)
                accs[dim] = metrics["accuracy"]
            diffs.append(accs[64] - accs[0])
        assert np.median(diffs) >= 0.0
        assert time.perf_counter() - t0 < 30.0


class TestEffectiveRankTrend:
    def test_projection_raises_normalized_rank(self):
        t0 = time.perf_counter()
        ds = anisotropic_dataset(n=800, seed=0)
        X = ds.modalities["embedding"].values
        before = rank_diagnostics(X).normalized_effective_rank
        pca = fit_pca(X, 64)
        after = rank_diagnostics(project_values(pca, X)).normalized_effective_rank
        assert after > before
        assert time.perf_counter() - t0 < 10.0

    def test_isotropic_rank_near_full(self):
        X = seeded_rng(0).normal(size=(2000, 64))
        assert rank_diagnostics(X).normalized_effective_rank >= 0.95


class TestDiagnosticsSweepShape:
    def test_interior_maximum(self):
        t0 = time.perf_counter()
        dims = (16, 32, 64, 128, 256)
        interior = 0
        pred = _predictor(bw=0.3)
        for seed in range(5):
            ds = anisotropic_dataset(n=800, seed=seed)
            sup, qry = split_dataset(ds, 0.7, seed=seed)
            accs = []
            for dim in dims:
                pca = fit_pca(sup.modalities["embedding"].values, dim)
                s = project(pca, sup.modalities["embedding"])
                q = project(pca, qry.modalities["embedding"])
                probs = pred.predict(q.values, s)
                accs.append(_accuracy(probs, s.labels, qry.labels))
            best = max(accs)
            if best > accs[0] and best > accs[-1]:
                interior += 1
        assert interior >= 4
        assert time.perf_counter() - t0 < 120.0


class TestHierarchyInvariants:
    def test_depth_one_equals_flat(self):
        rng = seeded_rng(0)
        from comet.data import LabeledDataset, LabelTree

        n = 80
        labels = np.tile(np.arange(4), n // 4)
        centers = rng.normal(scale=5.0, size=(4, 6))
        fm = FeatureMatrix(
            centers[labels] + rng.normal(size=(n, 6)),
            [f"s{i}" for i in range(n)], labels, 4,
        )
        ds = LabeledDataset({"x": fm}, labels, [f"c{i}" for i in range(4)])
        parents = {"root": None, **{f"c{i}": "root" for i in range(4)}}
        tree = LabelTree(parents, {k: k for k in parents},
                         {f"c{i}": i for i in range(4)})
        sup, qry = split_dataset(ds, 0.6, seed=0)
        spec = FusionSpec([ModalitySpec("x", pca_dim=4)], use_tabular=False)
        pred = _predictor(bw=0.5)
        model = fit_hier(sup, tree, spec)
        leaf, _, _ = hier_predict(model, qry, pred)
        fitted = fit_fusion(sup, spec)
        _, flat, _ = comet_predict(fitted, sup, qry, pred)
        assert np.array_equal(leaf, flat)

    def test_budget_and_containment_on_large_tree(self):
        t0 = time.perf_counter()
        ds, tree = hierarchical_dataset([4, 4, 4], samples_per_leaf=782, seed=0)
        assert ds.n == 50_048
        assert len(tree.internal_nodes()) == 1 + 4 + 16
        sup, qry = split_dataset(ds, 0.96, seed=0)
        spec = FusionSpec([ModalitySpec("embedding", pca_dim=8)], use_tabular=False)
        model = fit_hier(sup, tree, spec, budget=5000)
        assert set(model.subtasks) == set(tree.internal_nodes())
        for task in model.subtasks.values():
            assert task.support_indices.shape[0] <= 5000
        assert model.subtasks[tree.root].budget_applied

        leaf, paths, _ = hier_predict(model, qry, _predictor(bw=0.5))
        class_to_leaf = tree.class_to_leaf
        for cls, path in zip(leaf, paths):
            for parent, child in zip(path, path[1:]):
                assert child in tree.children[parent]
            assert path[-1] == class_to_leaf[int(cls)]
        assert time.perf_counter() - t0 < 120.0


class TestCliDeterminism:
    """Every command rerun with the same config and seed is byte-identical."""

    def _rerun(self, runner, tmp_path, command, doc):
        from test_cli import _artifact_bytes, _write_cfg

        cfg = _write_cfg(tmp_path, doc, f"{command}.json")
        assert runner.invoke(
            __import__("comet.cli", fromlist=["main"]).main,
            [command, cfg, "--threads", "1"],
        ).exit_code == 0
        first = _artifact_bytes(tmp_path / "out")
        assert runner.invoke(
            __import__("comet.cli", fromlist=["main"]).main,
            [command, cfg, "--threads", "1"],
        ).exit_code == 0
        assert first == _artifact_bytes(tmp_path / "out")
        assert first  # at least one non-timing artifact was compared

    @pytest.fixture
    def runner(self):
        from click.testing import CliRunner

        return CliRunner()

    def test_fuse_predict(self, runner, tmp_path):
        self._rerun(runner, tmp_path, "fuse-predict", {
            "data": {"synthetic": {"generator": "tabular_dominant",
                                   "params": {"n": 150, "seed": 0}}},
            "output_dir": str(tmp_path / "out"),
        })

    def test_pal_fit(self, runner, tmp_path):
        self._rerun(runner, tmp_path, "pal-fit", {
            "data": {"synthetic": {"generator": "planted_token",
                                   "params": {"n": 120, "seed": 0}}},
            "pal": {"iterations": 1, "seed": 0},
            "output_dir": str(tmp_path / "out"),
        })

    def test_hier(self, runner, tmp_path):
        self._rerun(runner, tmp_path, "hier", {
            "data": {"synthetic": {"generator": "hierarchical",
                                   "params": {"branching": [2, 2],
                                              "samples_per_leaf": 20, "seed": 0}}},
            "fusion": {"modalities": [{"name": "embedding", "pca_dim": 4}],
                       "use_tabular": False},
            "output_dir": str(tmp_path / "out"),
        })

    def test_diagnostics(self, runner, tmp_path):
        self._rerun(runner, tmp_path, "diagnostics", {
            "data": {"synthetic": {"generator": "anisotropic",
                                   "params": {"n": 200, "seed": 0}}},
            "diagnostics": {"dims": [4, 8]},
            "output_dir": str(tmp_path / "out"),
        })

    def test_ingest(self, runner, tmp_path):
        from comet.cli import main as cli_main

        csv = tmp_path / "t.csv"
        csv.write_text("id,a,color,label\nr0,1,red,x\nr1,2,blue,y\n")
        schema = tmp_path / "schema.json"
        schema.write_text(json.dumps({
            "numeric": ["a"], "categorical": ["color"],
            "label": "label", "sample_id": "id",
        }))
        outs = []
        for name in ("a.cemb", "b.cemb"):
            out = tmp_path / name
            assert runner.invoke(cli_main, [
                "ingest", str(csv), str(out), "--schema", str(schema),
            ]).exit_code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestSidecarConformance:
    """Runs only when the serving sidecar package is installed."""

    @pytest.fixture
    def sidecar_endpoint(self):
        tfm_sidecar = pytest.importorskip("tfm_sidecar")
        uvicorn = pytest.importorskip("uvicorn")

        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        config = uvicorn.Config(
            tfm_sidecar.create_app(), host="127.0.0.1", port=port, log_level="error"
        )
        server = uvicorn.Server(config)
        thread = threading.Thread(target=server.run, daemon=True)
        thread.start()
        deadline = time.time() + 10
        while not server.started:
            if time.time() > deadline:
                raise RuntimeError("sidecar did not start")
            time.sleep(0.05)
        yield f"http://127.0.0.1:{port}"
        server.should_exit = True
        thread.join(timeout=5)

    def test_serve_check_passes(self, sidecar_endpoint):
        from comet.cli import run_serve_check

        report = run_serve_check(sidecar_endpoint, seed=0)
        failed = [c for c in report["checks"] if not c["passed"]]
        assert report["passed"], failed
