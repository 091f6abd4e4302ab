import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from dpmm.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_FAILURE, EXIT_OK, EXIT_SCHEMA, main, read_results_csv
from dpmm.data import load, save

DEFAULT = json.loads((Path(__file__).parents[1] / "configs" / "default.json").read_text())


def write_config(path, **overrides):
    cfg = {**DEFAULT, **overrides}
    path.write_text(json.dumps(cfg))
    return str(path)


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


SMALL = dict(n=200, dims=[4, 5], epochs=2, hidden_dim=8, latent_dim=3, learning_rate=1e-3, missing_ratio=[0.0, 0.3])


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "cfg.json", **SMALL)
    assert main(["generate", "--config", cfg, "--out", str(root / "data")]) == EXIT_OK
    assert main(["fit", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "fit")]) == EXIT_OK
    return root, cfg


class TestGenerate:
    def test_default_sizes(self, tmp_path):
        assert main(["generate", "--config", write_config(tmp_path / "c.json"), "--out", str(tmp_path)]) == 0
        sizes = [len(load(tmp_path / f"{s}.jsonl")) for s in ("train", "valid", "test")]
        assert sizes == [1400, 200, 400]
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["sizes"] == {"train": 1400, "valid": 200, "test": 400} and man["seed"] == 0

    def test_repeatable(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", **SMALL)
        for d in ("a", "b"):
            assert main(["generate", "--config", cfg, "--out", str(tmp_path / d)]) == 0
        for s in ("train", "valid", "test"):
            assert sha(tmp_path / "a" / f"{s}.jsonl") == sha(tmp_path / "b" / f"{s}.jsonl")

    def test_missing_field(self, tmp_path, capsys):
        cfg = {k: v for k, v in DEFAULT.items() if k != "separation"}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert main(["generate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "separation" in capsys.readouterr().err

    @pytest.mark.parametrize("override,field", [
        (dict(clusters=1), "clusters"), (dict(noise="loud"), "noise"), (dict(colour=3), "colour"),
        (dict(missing_ratio=[0.0, 1.0]), "missing_ratio"),
    ])
    def test_bad_values(self, tmp_path, capsys, override, field):
        cfg = write_config(tmp_path / "c.json", **override)
        assert main(["generate", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
        assert field in capsys.readouterr().err

    def test_unknown_command(self):
        assert main(["train"]) == EXIT_CONFIG


class TestFit:
    def test_outputs(self, small_run):
        root, _ = small_run
        rows = read_results_csv(root / "fit" / "history.csv")
        assert [r["epoch"] for r in rows] == ["1", "2"]
        assert set(rows[0]) == {"epoch", "task", "dp", "align", "kl_sticks", "loss", "valid_auroc"}
        man = json.loads((root / "fit" / "manifest.json").read_text())
        assert man["config"]["epochs"] == 2 and len(man["history"]) == 2 and "wall_clock_s" in man
        first = (root / "fit" / "history.csv").read_text().splitlines()[0]
        assert first.startswith("# manifest: ")

    def test_divergence_exit(self, tmp_path, small_run, capsys):
        root, _ = small_run
        cfg = write_config(tmp_path / "c.json", **{**SMALL, "learning_rate": 1e8, "lambda_dp": 1.0})
        assert main(["fit", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path)]) == EXIT_DIVERGED
        assert "diverged" in capsys.readouterr().err

    def test_epoch_timing(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", epochs=1)
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
        t0 = time.perf_counter()
        assert main(["fit", "--config", cfg, "--data", str(tmp_path / "d"), "--out", str(tmp_path / "f")]) == 0
        assert time.perf_counter() - t0 < 60


class TestEval:
    def test_deterministic(self, small_run, tmp_path):
        root, _ = small_run
        ck, data = str(root / "fit" / "checkpoint.json"), str(root / "data" / "test.jsonl")
        for name in ("a.json", "b.json"):
            assert main(["eval", "--checkpoint", ck, "--data", data, "--out", str(tmp_path / name)]) == 0
        assert sha(tmp_path / "a.json") == sha(tmp_path / "b.json")
        out = json.loads((tmp_path / "a.json").read_text())
        assert set(out) == {"auroc", "aupr", "f1", "ci", "manifest"}
        assert out["manifest"]["bootstrap"] == 1000

    def test_schema_mismatch(self, small_run, tmp_path):
        root, _ = small_run
        cfg = write_config(tmp_path / "c.json", **{**SMALL, "dims": [4, 6]})
        assert main(["generate", "--config", cfg, "--out", str(tmp_path)]) == 0
        code = main(["eval", "--checkpoint", str(root / "fit" / "checkpoint.json"),
                     "--data", str(tmp_path / "test.jsonl"), "--out", str(tmp_path / "m.json")])
        assert code == EXIT_SCHEMA

    def test_single_class(self, small_run, tmp_path, capsys):
        root, _ = small_run
        ds = load(root / "data" / "test.jsonl")
        save(ds.subset(np.flatnonzero(ds.labels == 1)), tmp_path / "pos.jsonl")
        code = main(["eval", "--checkpoint", str(root / "fit" / "checkpoint.json"),
                     "--data", str(tmp_path / "pos.jsonl"), "--out", str(tmp_path / "m.json")])
        assert code == EXIT_FAILURE
        assert "undefined metric" in capsys.readouterr().err


class TestAblate:
    def test_minimal_grid(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", **SMALL, grid_alignment_mode=["dp", "none"],
                           grid_seeds=[0], bootstrap=100)
        assert main(["ablate", "--config", cfg, "--out", str(tmp_path)]) == 0
        lines = [ln for ln in (tmp_path / "ablation.csv").read_text().splitlines() if not ln.startswith("#")]
        assert len(lines) == 3
        rows = read_results_csv(tmp_path / "ablation.csv")
        assert [r["alignment_mode"] for r in rows] == ["dp", "none"]
        assert all(r["status"] == "ok" for r in rows)

    def test_failed_cell_is_recorded(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", **{**SMALL, "learning_rate": 1e8, "lambda_dp": 1.0},
                           grid_seeds=[0], bootstrap=100)
        assert main(["ablate", "--config", cfg, "--out", str(tmp_path)]) == 0
        rows = read_results_csv(tmp_path / "ablation.csv")
        assert len(rows) == 1 and rows[0]["status"].startswith("error:")


class TestPriorSim:
    def run(self, tmp_path, name, **kw):
        cfg = {"eta_list": [0.5, 1.0, 2.0, 5.0], "MK": 10, "draws": 5000, "seed": 3, **kw}
        (tmp_path / "p.json").write_text(json.dumps(cfg))
        assert main(["prior-sim", "--config", str(tmp_path / "p.json"), "--out", str(tmp_path / name)]) == 0
        return read_results_csv(tmp_path / name)

    def test_first_weight(self, tmp_path):
        rows = self.run(tmp_path, "a.csv")
        first = {float(r["eta"]): (float(r["mean"]), float(r["se"])) for r in rows if r["r"] == "1"}
        mean, se = first[1.0]
        assert abs(mean - 0.5) <= 3 * se
        means = [first[e][0] for e in sorted(first)]
        assert all(a > b for a, b in zip(means, means[1:]))

    def test_deterministic(self, tmp_path):
        self.run(tmp_path, "a.csv")
        self.run(tmp_path, "b.csv")
        assert sha(tmp_path / "a.csv") == sha(tmp_path / "b.csv")

    def test_too_few_draws(self, tmp_path):
        (tmp_path / "p.json").write_text(json.dumps({"draws": 999}))
        assert main(["prior-sim", "--config", str(tmp_path / "p.json"), "--out", str(tmp_path / "x.csv")]) == 2
