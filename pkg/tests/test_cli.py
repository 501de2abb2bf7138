import csv
import json
import statistics

import numpy as np
import pytest

from xinfid import verify
from xinfid.cli import graymap, main, parse_kernel, parse_perturbation, parse_spec, read_attribution, UsageError
from xinfid.models import linear_model, random_mlp, save_model
from xinfid.numerics import RngStream
from xinfid.verify import CheckResult


def parse_pgm(data):
    """Minimal binary PGM reader: returns (width, height, maxval, pixels)."""
    magic, dims, maxval, rest = data.split(b"\n", 3)
    assert magic == b"P5"
    w, h = map(int, dims.split())
    pixels = np.frombuffer(rest, dtype=np.uint8)
    assert pixels.size == w * h
    return w, h, int(maxval), pixels.reshape(h, w)


@pytest.fixture
def mlp_file(tmp_path):
    path = tmp_path / "mlp.json"
    save_model(random_mlp(RngStream(0), [4, 8, 1], "softplus", 1.0), path)
    return path


@pytest.fixture
def linear_file(tmp_path):
    path = tmp_path / "linear.json"
    save_model(linear_model([1.0, -2.0, 0.5], 0.3), path)
    return path


@pytest.fixture
def inputs_file(tmp_path):
    path = tmp_path / "x.csv"
    np.savetxt(path, RngStream(1).normal(size=(3, 4)), delimiter=",")
    return path


class TestSpecGrammar:
    def test_parse_spec(self):
        assert parse_spec("noisy-baseline:sigma=0.5,x0=1;2") == ("noisy-baseline", {"sigma": "0.5", "x0": "1;2"})
        assert parse_spec("shapley") == ("shapley", {})

    def test_families_and_kernels(self):
        assert parse_perturbation("noisy-baseline:sigma=0.25").sigma == 0.25
        assert parse_perturbation("square:h=4,w=4,smin=1,smax=2").masked
        assert str(parse_kernel("gaussian:sigma=0.3")) == "gaussian:sigma=0.3"

    @pytest.mark.parametrize("text", ["nope", "baseline:x0", "noisy-baseline:sigma=abc", "coord-eps:foo=1"])
    def test_bad_specs(self, text):
        with pytest.raises(UsageError):
            parse_perturbation(text)


class TestExplain:
    def test_toy_gradient(self, tmp_path):
        assert main(["explain", "--model", "toy", "--input", "20,11.9", "--method", "grad",
                     "--out-dir", str(tmp_path)]) == 0
        path = tmp_path / "attr_0000_grad.csv"
        np.testing.assert_array_equal(read_attribution(path), [1.0, 0.0])
        assert path.read_text().startswith("# method=grad locality=local seed=0\n")

    def test_rerun_is_bit_identical(self, tmp_path, mlp_file, inputs_file):
        outs = []
        for k in range(2):
            d = tmp_path / f"run{k}"
            args = ["explain", "--model", str(mlp_file), "--inputs", str(inputs_file), "--seed", "3",
                    "--methods", "grad,ig,grad-sg,optimal,shapley", "--perturbation", "noisy-baseline:sigma=0.5",
                    "--n-opt", "500", "--n-smooth", "20", "--out-dir", str(d)]
            assert main(args) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
        assert len(outs[0]) == 15
        assert outs[0] == outs[1]

    def test_missing_model(self, tmp_path, capsys):
        missing = tmp_path / "absent.json"
        assert main(["explain", "--model", str(missing), "--input", "1,2", "--method", "grad"]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_incompatible_method(self, capsys):
        assert main(["explain", "--model", "toy", "--input", "1,2", "--method", "optimal-masked",
                     "--perturbation", "noisy-baseline"]) == 2
        assert "mask" in capsys.readouterr().err

    def test_unknown_method(self):
        assert main(["explain", "--model", "toy", "--input", "1,2", "--method", "magic"]) == 2


def _evaluate(tmp_path, *extra, name="report.json"):
    out = tmp_path / name
    assert main(["evaluate", "--out", str(out), *extra]) == 0
    return json.loads(out.read_text())


class TestEvaluate:
    def test_linear_model_exact(self, tmp_path, linear_file):
        rep = _evaluate(tmp_path, "--model", str(linear_file), "--input", "1,2,3", "--input=-1,0.5,2",
                        "--methods", "grad,optimal", "--perturbation", "noisy-baseline:sigma=1", "--n-opt", "2000")
        assert len(rep["records"]) == 4
        for r in rep["records"]:
            assert r["infidelity"] <= 1e-8

    def test_reaggregation(self, tmp_path, mlp_file, inputs_file):
        csv_path = tmp_path / "rec.csv"
        rep = _evaluate(tmp_path, "--model", str(mlp_file), "--inputs", str(inputs_file),
                        "--methods", "grad,ig,grad-sg", "--perturbation", "noisy-baseline:sigma=0.5",
                        "--n-infd", "300", "--n-smooth", "20", "--sens-lips", "--csv", str(csv_path))
        # an independent reader: group the CSV rows and average them again
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(rep["records"]) == 9
        for method, entry in rep["summary"].items():
            mine = [r for r in rows if r["method"] == method]
            assert entry["n_inputs"] == len(mine)
            for key in ("infidelity", "sens_max", "sens_lips"):
                assert entry[f"mean_{key}"] == statistics.fmean(float(r[key]) for r in mine)

    def test_records_in_input_order(self, tmp_path, mlp_file, inputs_file):
        rep = _evaluate(tmp_path, "--model", str(mlp_file), "--inputs", str(inputs_file),
                        "--methods", "grad,ig", "--perturbation", "noisy-baseline", "--n-infd", "50", "--threads", "4")
        assert [(r["input_index"], r["method"]) for r in rep["records"]] == \
            [(k, m) for k in range(3) for m in ("grad", "ig")]

    def test_optimal_lowest_with_shared_samples(self, tmp_path, mlp_file, inputs_file):
        rep = _evaluate(tmp_path, "--model", str(mlp_file), "--inputs", str(inputs_file),
                        "--methods", "grad,ig,constant,grad-sg,optimal", "--perturbation", "noisy-baseline:sigma=0.5",
                        "--n-infd", "400", "--n-smooth", "20", "--shared-samples", "--no-scaling")
        for k in range(3):
            recs = {r["method"]: r["infidelity"] for r in rep["records"] if r["input_index"] == k}
            others = min(v for m, v in recs.items() if m != "optimal")
            assert recs["optimal"] <= others * (1 + 1e-9)

    def test_global_method_needs_masks(self, mlp_file):
        assert main(["evaluate", "--model", str(mlp_file), "--input", "1,2,3,4", "--methods", "shapley",
                     "--perturbation", "noisy-baseline"]) == 2

    def test_config_file(self, tmp_path, linear_file):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"model": str(linear_file), "input": [[1.0, 2.0, 3.0]], "methods": ["grad"],
                                   "perturbation": "noisy-baseline:sigma=0.5", "n_infd": 77}))
        rep = _evaluate(tmp_path, "--config", str(cfg))
        assert rep["config"]["n_infd"] == 77 and rep["records"][0]["n_infd"] == 77
        # explicit flags win over the file
        rep = _evaluate(tmp_path, "--config", str(cfg), "--n-infd", "12", "--methods", "optimal", name="b.json")
        assert rep["config"]["n_infd"] == 12 and rep["config"]["methods"] == ["optimal"]

    def test_config_unknown_key(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"colour": "red"}))
        assert main(["evaluate", "--config", str(cfg)]) == 2

    def test_thread_env_does_not_change_output(self, tmp_path, mlp_file, inputs_file, monkeypatch):
        texts = []
        for t in ("1", "2", "8"):
            monkeypatch.setenv("XINFID_THREADS", t)
            out = tmp_path / f"r{t}.json"
            assert main(["evaluate", "--model", str(mlp_file), "--inputs", str(inputs_file), "--seed", "4",
                         "--methods", "grad,grad-sg,optimal", "--perturbation", "noisy-baseline:sigma=0.5",
                         "--n-infd", "200", "--n-opt", "500", "--n-smooth", "20", "--rinfd", "3",
                         "--out", str(out)]) == 0
            texts.append(out.read_bytes())
        assert texts[0] == texts[1] == texts[2]


class TestVerify:
    def test_completeness_suite_seed_7(self, tmp_path):
        out = tmp_path / "v.jsonl"
        assert main(["verify", "--suite", "completeness", "--seed", "7", "--out", str(out)]) == 0
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(records) == 100 and all(r["passed"] for r in records)

    def test_unknown_suite(self):
        assert main(["verify", "--suite", "everything"]) == 2

    def test_forced_failure(self, monkeypatch, capsys):
        def jobs(n):
            return [lambda s: [CheckResult("corrupted_bound", 2.0, 1.0, 0.0)]]

        monkeypatch.setitem(verify.SUITES, "broken", (99, jobs))
        assert main(["verify", "--suite", "broken"]) == 1
        err = capsys.readouterr().err
        assert "FAILED corrupted_bound" in err and "lhs=2.0" in err

    def test_same_seed_identical_across_threads(self, tmp_path, monkeypatch):
        texts = []
        for t in ("1", "2", "8"):
            monkeypatch.setenv("XINFID_THREADS", t)
            out = tmp_path / f"v{t}.jsonl"
            main(["verify", "--suite", "rinfd", "--seed", "2", "--n-models", "6", "--out", str(out)])
            texts.append(out.read_bytes())
        assert texts[0] == texts[1] == texts[2]


class TestSanityCommand:
    def test_constant_flagged(self, tmp_path, mlp_file, inputs_file):
        out = tmp_path / "s.json"
        assert main(["sanity-check", "--model", str(mlp_file), "--inputs", str(inputs_file),
                     "--methods", "constant", "--out", str(out)]) == 0
        (row,) = json.loads(out.read_text())["results"]
        assert row["corr"] == 1.0 and row["passes"] is False

    def test_needs_mlp(self):
        assert main(["sanity-check", "--model", "toy", "--input", "1,2", "--methods", "grad"]) == 2


class TestRender:
    def _attr(self, tmp_path, values):
        path = tmp_path / "a.csv"
        path.write_text("index,value\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(values)))
        return path

    def test_constant_is_mid_gray(self, tmp_path):
        out = tmp_path / "c.pgm"
        assert main(["render", str(self._attr(tmp_path, [0.7] * 6)), "--height", "2", "--width", "3",
                     "--out", str(out)]) == 0
        w, h, maxval, pix = parse_pgm(out.read_bytes())
        assert (w, h, maxval) == (3, 2, 255)
        assert np.all(pix == 128)

    def test_two_values(self, tmp_path):
        # left half -1, right half +1: z = -1 and +1, so floor(2/6*255 + 0.5) and floor(4/6*255 + 0.5)
        values = np.tile([-1.0, -1.0, 1.0, 1.0], 3)
        out = tmp_path / "t.pgm"
        assert main(["render", str(self._attr(tmp_path, values)), "--height", "3", "--width", "4",
                     "--out", str(out)]) == 0
        _, _, _, pix = parse_pgm(out.read_bytes())
        assert set(np.unique(pix)) == {85, 170}
        assert np.all(pix[:, :2] == 85) and np.all(pix[:, 2:] == 170)

    def test_clamped_outlier(self):
        v = np.zeros(100)
        v[0] = 1e6
        _, _, _, pix = parse_pgm(graymap(v, 10, 10))
        assert pix[0, 0] == 255

    def test_dimension_mismatch(self, tmp_path):
        assert main(["render", str(self._attr(tmp_path, [1.0, 2.0, 3.0])), "--height", "2", "--width", "2",
                     "--out", str(tmp_path / "x.pgm")]) == 2
