import json
import random
import string

import pytest

from inputdrop import cli
from inputdrop.stats import RunResult
from inputdrop.synthdata import SynthClassTaskSpec, generate_classification_dataset, save_classification_dataset

CONFIG = """\
schema_version: 1
experiment: tiny
task: classification
methods: [rgb_only, input_dropout_addit]
seeds: 2
master_seed: 3
dataset:
  n_train: 24
  n_val: 4
  n_test: 24
  image_size: 16
backbone:
  width: 4
  depth: 2
optimizer:
  steps: 2
  batch_size: 8
"""


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def random_record(rng):
    name = "".join(rng.choice(string.ascii_letters + "-_:+é") for _ in range(rng.randint(1, 12)))
    metrics = {
        rng.choice(["accuracy", "psnr", "ssim", "x"]) + str(i): rng.choice(
            [rng.uniform(-1e6, 1e6), rng.random(), 0.0, 1e-300, -2.5e-12]
        )
        for i in range(rng.randint(1, 3))
    }
    return RunResult(name, rng.randint(0, 10**6), metrics, format(rng.getrandbits(64), "016x"), name[::-1])


class TestRecords:
    def test_round_trip_randomized(self):
        rng = random.Random(0)
        for _ in range(1000):
            rec = random_record(rng)
            stamp = f"2024-01-{rng.randint(1, 28):02d}T00:00:00+00:00"
            parsed, ts = cli.parse_record(cli.render_record(rec, stamp))
            assert parsed == rec and ts == stamp

    def test_record_keys(self):
        line = cli.render_record(RunResult("e", 1, {"accuracy": 0.5}, "h", "m"), "t")
        assert set(json.loads(line)) == set(cli.RECORD_KEYS)

    def test_missing_key(self):
        with pytest.raises(ValueError):
            cli.parse_record('{"experiment": "e"}')

    def test_non_finite_metric_rejected(self):
        with pytest.raises(ValueError):
            RunResult("e", 0, {"a": float("nan")}, "h", "m")


class TestConfig:
    def test_valid(self, tmp_path):
        plan = cli.load_config(write(tmp_path, CONFIG))
        assert plan.seeds == [0, 1] and plan.master_seed == 3
        assert [c.method.value for c in plan.configs] == ["rgb_only", "input_dropout_addit"]
        assert plan.configs[0].dataset.n_train == 24

    @pytest.mark.parametrize(
        "old,new,field,line",
        [
            ("schema_version: 1", "schema_version: 2", "schema_version", 1),
            ("  n_train: 24", "  n_train: 24\n  bogus: 1", "dataset.bogus", 9),
            ("[rgb_only, input_dropout_addit]", "[rgb_only, nope]", "methods.1", 4),
            ("  steps: 2", "  steps: -2", "optimizer.steps", 16),
            ("  width: 4", "  width: 0", "backbone.width", 13),
            ("seeds: 2", "seeds: 0", "seeds", 5),
        ],
    )
    def test_diagnostics(self, tmp_path, old, new, field, line):
        with pytest.raises(cli.ConfigFileError) as err:
            cli.load_config(write(tmp_path, CONFIG.replace(old, new)))
        assert err.value.field == field
        assert err.value.line == line
        assert f":{line}:" in str(err.value)

    def test_dehazing_both_mode(self, tmp_path):
        text = "schema_version: 1\nexperiment: d\ntask: dehazing\nmethods: [rgb_only, input_dropout_both]\n"
        with pytest.raises(cli.ConfigFileError) as err:
            cli.load_config(write(tmp_path, text))
        assert err.value.field == "methods.1"

    def test_yaml_syntax(self, tmp_path):
        with pytest.raises(cli.ConfigFileError) as err:
            cli.load_config(write(tmp_path, "schema_version: 1\nmethods: [a,\n"))
        assert err.value.line is not None

    def test_cli_exit_code(self, tmp_path, capsys):
        p = write(tmp_path, CONFIG.replace("seeds: 2", "seeds: -1"))
        assert cli.main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
        assert "seeds" in capsys.readouterr().err


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write(tmp, CONFIG)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp / "out")]) == 0
    return tmp


class TestRun:
    def test_outputs(self, run_dir):
        out = run_dir / "out"
        lines = (out / cli.RESULTS_FILE).read_text().splitlines()
        # 2 methods x 2 seeds plus the two ensemble rows x 2 pairings
        assert len(lines) == 8
        methods = {json.loads(line)["method"] for line in lines}
        assert {"rgb_only", "input_dropout_addit"} <= methods
        assert not (out / ".runs").exists()
        manifest = json.loads((out / cli.MANIFEST_FILE).read_text())
        assert manifest["master_seed"] == 3
        assert set(manifest["derived_seeds"]) == {"0", "1"}

    def test_summary_matches_raw(self, run_dir):
        out = run_dir / "out"
        stored = cli.read_summary(out / cli.SUMMARY_FILE)
        results = cli.read_results(out / cli.RESULTS_FILE)
        recomputed = cli.summary_rows(results, [0, 1])
        assert stored == recomputed

    def test_idempotent(self, run_dir):
        out2 = run_dir / "out2"
        assert cli.main(["run", "--config", str(run_dir / "cfg.yaml"), "--out", str(out2)]) == 0
        assert (out2 / cli.SUMMARY_FILE).read_bytes() == (run_dir / "out" / cli.SUMMARY_FILE).read_bytes()

        def payload(path):
            return [{k: v for k, v in json.loads(line).items() if k != "timestamp"} for line in path.read_text().splitlines()]

        assert payload(out2 / cli.RESULTS_FILE) == payload(run_dir / "out" / cli.RESULTS_FILE)

    def test_parallel_jobs_match_serial(self, run_dir):
        out = run_dir / "par"
        assert cli.main(["run", "--config", str(run_dir / "cfg.yaml"), "--out", str(out), "--jobs", "2"]) == 0
        assert (out / cli.SUMMARY_FILE).read_bytes() == (run_dir / "out" / cli.SUMMARY_FILE).read_bytes()

    def test_seed_override_changes_results(self, run_dir):
        out3 = run_dir / "out3"
        assert cli.main(["run", "--config", str(run_dir / "cfg.yaml"), "--out", str(out3), "--seed", "4"]) == 0
        assert json.loads((out3 / cli.MANIFEST_FILE).read_text())["master_seed"] == 4

    def test_env_default_out(self, run_dir, monkeypatch):
        target = run_dir / "from_env"
        monkeypatch.setenv(cli.OUT_ENV, str(target))
        assert cli.main(["run", "--config", str(run_dir / "cfg.yaml")]) == 0
        assert (target / cli.RESULTS_FILE).exists()

    def test_missing_dataset(self, tmp_path, capsys):
        text = CONFIG.split("dataset:")[0] + "dataset:\n  path: missing.idds\n"
        p = write(tmp_path, text)
        assert cli.main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) != 0
        assert "dataset not found" in capsys.readouterr().err

    def test_dataset_from_container(self, tmp_path):
        spec = SynthClassTaskSpec(n_train=24, n_val=4, n_test=24, image_size=16)
        save_classification_dataset(generate_classification_dataset(spec), spec, tmp_path / "d.idds")
        text = CONFIG.split("dataset:")[0] + "dataset:\n  path: d.idds\nbackbone:\n  width: 4\n  depth: 2\noptimizer:\n  steps: 1\n"
        p = write(tmp_path, text)
        assert cli.main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 0

    def test_partial_failure(self, tmp_path, monkeypatch):
        import inputdrop.experiments as ex

        real = ex.train_run

        def flaky(config, seed, master_seed=0, data=None):
            if config.method.value == "input_dropout_addit" and seed == 1:
                raise RuntimeError("diverged")
            return real(config, seed, master_seed, data)

        monkeypatch.setattr(ex, "train_run", flaky)
        out = tmp_path / "o"
        assert cli.main(["run", "--config", str(write(tmp_path, CONFIG)), "--out", str(out)]) == 1
        errors = [json.loads(line) for line in (out / cli.ERRORS_FILE).read_text().splitlines()]
        assert errors[0]["method"] == "input_dropout_addit" and errors[0]["seed"] == 1
        rows = {r["method"]: r for r in cli.read_summary(out / cli.SUMMARY_FILE)}
        assert rows["input_dropout_addit"]["missing_seeds"] == "1"


class TestReport:
    def make_results(self, tmp_path, treated_shift=0.1):
        lines = []
        for s in range(5):
            lines.append(cli.render_record(RunResult("e", s, {"accuracy": 0.5 + 0.01 * s}, "h", "rgb_only"), "t"))
            lines.append(
                cli.render_record(
                    RunResult("e", s, {"accuracy": 0.5 + treated_shift + 0.01 * s}, "h", "input_dropout_addit"), "t"
                )
            )
        (tmp_path / cli.RESULTS_FILE).write_text("\n".join(lines) + "\n")
        return tmp_path

    def test_comparison_row(self, tmp_path, capsys):
        d = self.make_results(tmp_path)
        assert cli.main(["report", str(d)]) == 0
        out = capsys.readouterr().out
        row = [l for l in out.splitlines() if l.startswith("input_dropout_addit vs rgb_only")]
        assert len(row) == 1
        assert "0.0079" in row[0] and row[0].rstrip().endswith("*")

    def test_alpha_changes_marks_only(self, tmp_path, capsys):
        d = self.make_results(tmp_path)
        cli.main(["report", str(d), "--alpha", "0.001"])
        row = [l for l in capsys.readouterr().out.splitlines() if l.startswith("input_dropout_addit vs")][0]
        assert "0.0079" in row and not row.rstrip().endswith("*")

    def test_empty_dir(self, tmp_path, capsys):
        assert cli.main(["report", str(tmp_path)]) == 2
        assert "no results" in capsys.readouterr().err

    def test_format_gain(self):
        assert cli.format_gain(43.2, 28.8, lower_is_better=True) == "+33.3%"
        assert cli.format_gain(0.228, 0.271) == "+18.9%"

    def test_tracking_report(self, tmp_path, capsys):
        import numpy as np

        from inputdrop.metrics import rot_z

        rows = []
        for method, err in (("rgb_only", 3.0), ("input_dropout_addit", 2.0)):
            for occ in (0, 15, 30, 45, 60, 75):
                rows.append(
                    {
                        "method": method,
                        "run": 0,
                        "occlusion": occ,
                        "R_pred": rot_z(np.radians(err)).tolist(),
                        "t_pred": [err, 0, 0],
                        "R_gt": np.eye(3).tolist(),
                        "t_gt": [0, 0, 0],
                    }
                )
        p = tmp_path / "track.jsonl"
        p.write_text("\n".join(json.dumps(r) for r in rows))
        table = cli.tracking_table(cli._jsonl(p))
        assert table["rgb_only"]["0-30"]["translation"] == pytest.approx(3.0)
        assert table["input_dropout_addit"]["45-75"]["rotation"] == pytest.approx(2.0)
        assert cli.main(["report", "--tracking", str(p)]) == 0
        assert "+33.3%" in capsys.readouterr().out

    def test_detection_report(self, tmp_path, capsys):
        rows = []
        for run in range(2):
            for method, conf in (("rgb_only", [0.9, 0.8]), ("input_dropout_addit", [0.8, 0.9])):
                rows.append({"method": method, "run": run, "kind": "gt", "class_id": 0, "box": [0, 0, 10, 10], "image_id": "a"})
                # one false positive; its rank decides the AP
                rows.append({"method": method, "run": run, "kind": "det", "class_id": 0, "box": [50, 50, 60, 60], "confidence": conf[0], "image_id": "a"})
                rows.append({"method": method, "run": run, "kind": "det", "class_id": 0, "box": [0, 0, 10, 10], "confidence": conf[1], "image_id": "a"})
        p = tmp_path / "det.jsonl"
        p.write_text("\n".join(json.dumps(r) for r in rows))
        table = cli.detection_table(cli._jsonl(p))
        assert table["rgb_only"] == [0.5, 0.5]
        assert table["input_dropout_addit"] == [1.0, 1.0]
        assert cli.main(["report", "--detection", str(p)]) == 0
        assert "+100.0%" in capsys.readouterr().out


class TestPlot:
    def test_files(self, run_dir):
        assert cli.main(["plot", str(run_dir / "out"), "--plot-dir", str(run_dir / "plots")]) == 0
        names = sorted(p.name for p in (run_dir / "plots").iterdir())
        assert names == sorted(cli.plot_names(cli.read_results(run_dir / "out" / cli.RESULTS_FILE)))
        assert names == ["tiny_bars.png", "tiny_curves.png"]

    def test_empty(self, tmp_path, capsys):
        assert cli.main(["plot", str(tmp_path), "--plot-dir", str(tmp_path / "p")]) == 0
        assert "warning" in capsys.readouterr().err
        assert not (tmp_path / "p").exists()

    def test_plot_leaves_records_alone(self, run_dir):
        before = (run_dir / "out" / cli.RESULTS_FILE).read_bytes()
        cli.main(["plot", str(run_dir / "out"), "--plot-dir", str(run_dir / "plots2")])
        assert (run_dir / "out" / cli.RESULTS_FILE).read_bytes() == before


class TestSeeds:
    def test_golden_vectors(self):
        from pathlib import Path

        from inputdrop.seeding import derive_seed

        data = json.loads((Path(__file__).parent / "data" / "seed_vectors.json").read_text())
        for v in data["vectors"]:
            assert derive_seed(v["master"], v["run"], v["stream"]) == int(v["seed"])


def test_generate_verb(tmp_path):
    spec = tmp_path / "ds.yaml"
    spec.write_text("task: classification\nn_train: 12\nn_val: 2\nn_test: 6\nimage_size: 16\n")
    assert cli.main(["generate", str(tmp_path / "d.idds"), "--config", str(spec)]) == 0
    assert (tmp_path / "d.idds").read_bytes()[:4] == b"IDDS"
