import json

import numpy as np
import pytest

from ccpgmm.cli import main
from ccpgmm.hsi import ImageTensor, load_raster, save_image, save_raster, write_manifest
from ccpgmm.metrics import adjusted_rand_index

FAST = ["--max-iterations", "200", "--parallelism", "1"]


def run(*args):
    return main([str(a) for a in args])


def read(path):
    with open(path) as fh:
        return json.load(fh)


def labels_of(directory):
    out = {}
    for path in sorted((directory).glob("*.labels.json")):
        image_id, raster = load_raster(path)
        out[image_id] = raster
    return out


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("simulate", "--scenario", "low", "--seed", 1, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def fitted(sim, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    code = run(
        "fit", "--images", sim / "images", "--constraints", sim / "constraints.json",
        "--G", 4, "--q", 1, "--M", 3, "--d", 6, "--seed", 2, *FAST, "--out", out,
    )
    assert code == 0
    return out


class TestSimulate:
    def test_outputs(self, sim):
        summary = read(sim / "summary.json")
        assert summary["p"] == 101 and len(summary["images"]) == 3
        assert (sim / "constraints.json").exists()
        assert read(sim / "config.json")["scenario"] == "low"

    def test_high_has_four_classes(self, tmp_path):
        assert run("simulate", "--scenario", "high", "--out", tmp_path) == 0
        classes = set()
        for raster in labels_of(tmp_path / "truth").values():
            classes |= set(np.unique(raster).tolist())
        assert classes == {1, 2, 3, 4}

    def test_paper_scale_pixel_count(self, tmp_path):
        assert run("simulate", "--scenario", "low", "--scale", "paper", "--out", tmp_path) == 0
        assert read(tmp_path / "summary.json")["n_pixels"] == 7825

    def test_heldout_requires_cereal(self, tmp_path):
        assert run("simulate", "--scenario", "low", "--heldout", "--out", tmp_path) == 2


class TestFit:
    def test_outputs(self, fitted, sim):
        summary = read(fitted / "summary.json")
        assert (summary["G"], summary["M"], summary["d"]) == (4, 3, 6)
        assert len(summary["converged"]) == 3
        assert (fitted / "ensemble" / "ensemble.json").exists()
        assert read(fitted / "similarity_summary.json")["cluster_mean_similarity"]
        assert set(labels_of(fitted / "rasters")) == set(read(sim / "summary.json")["images"])
        cfg = read(fitted / "config.json")
        assert cfg["M"] == 3 and cfg["negative_mode"] == "exact"

    def test_missing_constraints_file(self, sim, tmp_path):
        code = run("fit", "--images", sim / "images", "--constraints", tmp_path / "nope.json", "--out", tmp_path)
        assert code == 2

    def test_needs_exactly_one_constraint_choice(self, sim, tmp_path):
        assert run("fit", "--images", sim / "images", "--out", tmp_path) == 2
        code = run(
            "fit", "--images", sim / "images", "--constraints", sim / "constraints.json",
            "--no-constraints", "--out", tmp_path,
        )
        assert code == 2

    @pytest.mark.parametrize("bad", [["--d", "101"], ["--q", "6", "--d", "6"], ["--M", "0"]])
    def test_invalid_parameters(self, sim, tmp_path, bad):
        assert run("fit", "--images", sim / "images", "--no-constraints", *bad, "--out", tmp_path) == 2

    def test_missing_images_dir(self, tmp_path):
        assert run("fit", "--images", tmp_path / "none", "--no-constraints", "--out", tmp_path) == 2

    def test_single_subset_matches_map(self, tmp_path):
        rng = np.random.default_rng(0)
        X = np.vstack([rng.normal(size=(40, 5)), rng.normal(7, 1, size=(40, 5))])
        img = tmp_path / "img"
        save_image(ImageTensor("blob", X.reshape(8, 10, 5)), img / "blob.json")
        write_manifest(img, ["blob"])
        code = run(
            "fit", "--images", img, "--no-constraints", "--G", 2, "--q", 1, "--M", 1, "--d", 4,
            *FAST, "--out", tmp_path / "out",
        )
        assert code == 0
        lab = labels_of(tmp_path / "out" / "rasters")["blob"].ravel()
        z = np.fromfile(tmp_path / "out" / "ensemble" / "posteriors.bin", dtype="<f8").reshape(1, 80, 2)
        assert adjusted_rand_index(lab, z[0].argmax(axis=1)) == 1.0


class TestClassify:
    def test_self_agreement(self, fitted, sim, tmp_path):
        assert run("classify", "--ensemble", fitted, "--images", sim / "images", "--out", tmp_path) == 0
        got, train = labels_of(tmp_path / "rasters"), labels_of(fitted / "rasters")
        agree = np.mean([np.mean(got[k] == train[k]) for k in train])
        assert agree >= 0.9
        assert read(tmp_path / "summary.json")["M"] == 3

    def test_p_mismatch(self, fitted, tmp_path):
        img = tmp_path / "img"
        save_image(ImageTensor("x", np.zeros((2, 2, 7))), img / "x.json")
        assert run("classify", "--ensemble", fitted, "--images", img, "--out", tmp_path / "o") == 2

    def test_single_subset_zero_uncertainty(self, sim, tmp_path):
        code = run(
            "fit", "--images", sim / "images", "--constraints", sim / "constraints.json",
            "--M", 1, "--d", 5, *FAST, "--out", tmp_path / "fit",
        )
        assert code == 0
        assert run("classify", "--ensemble", tmp_path / "fit", "--images", sim / "images", "--out", tmp_path / "c") == 0
        for path in (tmp_path / "c" / "rasters").glob("*.uncertainty.json"):
            assert np.all(load_raster(path)[1] == 0.0)


class TestEvaluate:
    def write_labels(self, directory, rasters):
        for image_id, raster in rasters.items():
            save_raster(directory / f"{image_id}.labels.json", image_id, np.asarray(raster), "u16")

    def test_identical_and_permuted(self, tmp_path):
        truth = {"a": [[1, 1, 2], [3, 3, 2]], "b": [[4, 4]]}
        self.write_labels(tmp_path / "t", truth)
        self.write_labels(tmp_path / "same", truth)
        perm = {k: (np.array(v) % 4) + 1 for k, v in truth.items()}
        self.write_labels(tmp_path / "perm", perm)
        for pred in ("same", "perm"):
            assert run("evaluate", "--pred", tmp_path / pred, "--truth", tmp_path / "t", "--out", tmp_path / f"r{pred}") == 0
            report = read(tmp_path / f"r{pred}" / "report.json")
            assert report["ari"] == 1.0 and report["matched_accuracy"] == 1.0

    def test_matches_metrics_module(self, fitted, sim, tmp_path):
        assert run("evaluate", "--pred", fitted, "--truth", sim, "--out", tmp_path) == 0
        pred, truth = labels_of(fitted / "rasters"), labels_of(sim / "truth")
        ids = sorted(truth)
        want = adjusted_rand_index(
            np.concatenate([truth[i].ravel() for i in ids]), np.concatenate([pred[i].ravel() for i in ids])
        )
        assert read(tmp_path / "report.json")["ari"] == want

    def test_image_sets_differ(self, tmp_path):
        self.write_labels(tmp_path / "t", {"a": [[1, 2]]})
        self.write_labels(tmp_path / "p", {"b": [[1, 2]]})
        assert run("evaluate", "--pred", tmp_path / "p", "--truth", tmp_path / "t", "--out", tmp_path / "r") == 2


class TestConfig:
    def test_config_file_wins_by_default(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 5, "scenario": "mild"}))
        assert run("simulate", "--config", cfg, "--seed", 9, "--out", tmp_path / "o") == 0
        used = read(tmp_path / "o" / "config.json")
        assert used["seed"] == 5 and used["scenario"] == "mild"

    def test_force_flags(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 5, "scenario": "mild"}))
        assert run("simulate", "--config", cfg, "--seed", 9, "--force-flags", "--out", tmp_path / "o") == 0
        used = read(tmp_path / "o" / "config.json")
        assert used["seed"] == 9 and used["scenario"] == "mild"

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"sead": 5}))
        assert run("simulate", "--config", cfg, "--out", tmp_path / "o") == 2

    def test_unreadable_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{")
        assert run("simulate", "--config", cfg, "--out", tmp_path / "o") == 4

    def test_rerun_from_echoed_config(self, sim, tmp_path):
        cfg = read(sim / "config.json")
        cfg["out"] = str(tmp_path / "again")
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert run("simulate", "--config", tmp_path / "c.json", "--out", tmp_path / "ignored") == 0
        a = (sim / "images" / "wheat1.bin").read_bytes()
        assert (tmp_path / "again" / "images" / "wheat1.bin").read_bytes() == a
