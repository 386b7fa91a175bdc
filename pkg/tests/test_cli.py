import json

import numpy as np
import pytest

from gmed.cli import component_set_from_payload, main


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def sim_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    code = run(["simulate", "--sim", 1, "--p", 4, "--n", 60, "--T", 80, "--seed", 5, "--out", out])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def fit_result(sim_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    code = run(
        [
            "fit",
            "--subjects", sim_dataset / "subjects.csv",
            "--mediators", sim_dataset / "mediators",
            "--max-components", 2,
            "--dfd-threshold", 1e9,
            "--h", "pooled",
            "--seed", 7,
            "--random-starts", 3,
            "--out", out,
        ]
    )
    assert code == 0
    return out


class TestSimulate:
    def test_outputs_exist(self, sim_dataset):
        assert (sim_dataset / "subjects.csv").exists()
        assert (sim_dataset / "mediators" / "u00001.csv").exists()
        truth = json.loads((sim_dataset / "truth.json").read_text())
        assert truth["true_aie"] == 1.0
        assert truth["mediation_dims"] == [2, 4]
        assert "manifest" in truth

    def test_misspecify_sidecar_lists_confounder_coefficients(self, tmp_path):
        code = run(
            ["simulate", "--sim", 2, "--misspecify", "--p", 4, "--n", 20, "--T", 10,
             "--out", tmp_path]
        )
        assert code == 0
        truth = json.loads((tmp_path / "truth.json").read_text())
        assert truth["coefficients"]["phi1"] == [0.5, 0.5]
        assert truth["coefficients"]["phi2"] == [-0.5, -0.5]
        assert truth["fit_confounders"] is False

    def test_invalid_t_exits_one(self, tmp_path):
        assert run(["simulate", "--T", 0, "--p", 4, "--n", 10, "--out", tmp_path]) == 1


class TestFit:
    def test_result_structure(self, fit_result):
        payload = json.loads((fit_result / "result.json").read_text())
        assert payload["p"] == 4
        assert len(payload["components"]) <= 2
        comp = payload["components"][0]
        assert len(comp["theta"]) == 4
        est = comp["estimands"]
        assert est["ate"] == pytest.approx(est["aie"] + est["ade"])
        assert payload["manifest"]["command"] == "fit"
        assert payload["manifest"]["config"]["h"] == "pooled"
        assert len(payload["dfd_trace"]) >= len(payload["components"])

    def test_figures_rendered(self, fit_result):
        assert (fit_result / "dfd_trace.png").exists()
        assert (fit_result / "loadings.png").exists()

    def test_missing_subjects_exits_two(self, tmp_path):
        code = run(["fit", "--subjects", tmp_path / "nope.csv", "--mediators", tmp_path,
                    "--out", tmp_path])
        assert code == 2

    def test_h_choice_recorded(self, sim_dataset, tmp_path):
        code = run(
            ["fit", "--subjects", sim_dataset / "subjects.csv",
             "--mediators", sim_dataset / "mediators", "--h", "identity",
             "--max-components", 1, "--no-plots", "--seed", 3, "--random-starts", 2,
             "--out", tmp_path]
        )
        assert code == 0
        payload = json.loads((tmp_path / "result.json").read_text())
        assert payload["manifest"]["config"]["h"] == "identity"
        assert payload["h"]["kind"] == "identity"

    def test_deterministic_modulo_runtime(self, sim_dataset, tmp_path):
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            code = run(
                ["fit", "--subjects", sim_dataset / "subjects.csv",
                 "--mediators", sim_dataset / "mediators", "--max-components", 1,
                 "--seed", 11, "--random-starts", 2, "--no-plots", "--out", out]
            )
            assert code == 0
            payload = json.loads((out / "result.json").read_text())
            payload["manifest"].pop("runtime_seconds")
            outs.append(json.dumps(payload, sort_keys=True))
        assert outs[0] == outs[1]


class TestBootstrap:
    def test_round_trip_and_output(self, fit_result, tmp_path):
        code = run(
            ["bootstrap", "--fit", fit_result / "result.json", "--B", 10,
             "--level", 0.95, "--seed", 11, "--keep-draws", "--out", tmp_path]
        )
        assert code == 0
        payload = json.loads((tmp_path / "bootstrap.json").read_text())
        assert payload["B"] == 10
        comp = payload["components"][0]
        for key in ("aie", "alpha", "beta", "ade", "ate"):
            assert {"estimate", "se", "p_value", "ci"} <= set(comp[key])
        draws = np.array(comp["aie"]["draws"])
        assert draws.size == 10 - payload["n_failed"]

    def test_theta_round_trip_exact(self, fit_result):
        payload = json.loads((fit_result / "result.json").read_text())
        components, h = component_set_from_payload(payload)
        for fit, comp in zip(components.fits, payload["components"]):
            assert np.max(np.abs(fit.theta.theta - np.asarray(comp["theta"]))) <= 1e-15

    def test_zero_replicates_usage_error(self, fit_result, tmp_path):
        code = run(["bootstrap", "--fit", fit_result / "result.json", "--B", 0,
                    "--out", tmp_path])
        assert code == 1

    def test_seeded_determinism(self, fit_result, tmp_path):
        texts = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            code = run(["bootstrap", "--fit", fit_result / "result.json", "--B", 6,
                        "--seed", 2, "--keep-draws", "--out", out])
            assert code == 0
            payload = json.loads((out / "bootstrap.json").read_text())
            payload["manifest"].pop("runtime_seconds")
            texts.append(json.dumps(payload, sort_keys=True))
        assert texts[0] == texts[1]


class TestReplicate:
    def test_metrics_and_figures(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GMED_THREADS", "2")
        code = run(
            ["replicate", "--sim", 1, "--p", 4, "--n", 50, "--T", 40, "--T", 60,
             "--reps", 2, "--seed", 1, "--random-starts", 2, "--max-components", 2,
             "--out", tmp_path]
        )
        assert code == 0
        lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        assert lines[0].startswith("sim,p,n,T,dim,")
        assert len(lines) == 1 + 4  # two T cells x two planted dims
        assert (tmp_path / "similarity.png").exists()
        assert (tmp_path / "aie_bias.png").exists()
        assert (tmp_path / "aie_mse.png").exists()
        payload = json.loads((tmp_path / "metrics.json").read_text())
        assert payload["manifest"]["config"]["threads"] == 2

    def test_invalid_t_exits_one(self, tmp_path):
        assert run(["replicate", "--T", 0, "--reps", 1, "--out", tmp_path]) == 1

    def test_usage_error_without_t(self, tmp_path):
        assert run(["replicate", "--reps", 1, "--out", tmp_path]) == 1


class TestRoundTripDataset:
    def test_simulated_dataset_reload(self, sim_dataset):
        from gmed.data import load_dataset
        from gmed.simulate import SimulationDesign, generate_dataset

        units = load_dataset(sim_dataset / "subjects.csv", sim_dataset / "mediators")
        design = SimulationDesign(p=4, n=60, T=80, q=0, seed=5)
        regenerated, _ = generate_dataset(design)
        for a, b in zip(units, regenerated):
            assert np.array_equal(a.mediator, b.mediator)
            assert a.outcome == b.outcome
