import csv
import json

import pytest

from couinseg import cli


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_error(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["phantom", "--n", "20", "--dims", "12", "12", "10", "--seed", "3", "--out", str(root)]) == 0
    return root


def test_phantom_split(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    splits = [c["split"] for c in manifest["cases"]]
    assert len(splits) == 20 and [splits.count(s) for s in ("train", "val", "test")] == [10, 3, 7]
    run_record = json.loads((dataset / "run.json").read_text())
    assert run_record["seed"] == 3 and run_record["command"] == "phantom"


def test_eval_identical_dirs_gives_all_ones(dataset, tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--pred", dataset, "--gt", dataset, "--out", tmp_path / "ev")
    assert code == 0
    with open(tmp_path / "ev" / "table.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["dice_mean"]) for r in rows] == [1.0] * 9
    assert [float(r["asd_mean"]) for r in rows] == [0.0] * 9
    assert len(list((tmp_path / "ev").glob("case_*.json"))) == 20


def test_refuses_to_overwrite(dataset, tmp_path, capsys):
    out = tmp_path / "ev"
    assert run(capsys, "eval", "--pred", dataset, "--gt", dataset, "--out", out)[0] == 0
    code, _, err = run(capsys, "eval", "--pred", dataset, "--gt", dataset, "--out", out)
    assert code == 9 and last_error(err)["error"] == "OutputExistsError"
    assert run(capsys, "eval", "--pred", dataset, "--gt", dataset, "--out", out, "--force")[0] == 0


def test_missing_file_and_bad_config(tmp_path, capsys):
    code, _, err = run(capsys, "infer", "--checkpoint", tmp_path / "nope", "--case", tmp_path, "--out", tmp_path / "o")
    assert code == 3 and last_error(err)["exit_code"] == 3
    (tmp_path / "bad.json").write_text("{not json")
    code, _, err = run(capsys, "phantom", "--n", "2", "--config", tmp_path / "bad.json", "--out", tmp_path / "p")
    assert code == 5 and last_error(err)["error"] == "ConfigError"
    (tmp_path / "typo.json").write_text(json.dumps({"model": {"chanels": [4, 4, 4, 4]}}))
    code, _, _ = run(capsys, "bench", "--config", tmp_path / "typo.json", "--out", tmp_path / "b")
    assert code == 5


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 2


def test_gradcheck_exit_codes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--op", "linear", "--op", "softmax", "--seeds", "2")
    assert code == 0
    lines = [json.loads(l) for l in out.splitlines()]
    assert [l["op"] for l in lines] == ["linear", "softmax"] and all(l["passed"] for l in lines)
    # a tolerance no finite-difference estimate can meet
    code, out, _ = run(capsys, "gradcheck", "--op", "mlp", "--seeds", "1", "--tol", "0")
    assert code == 10 and not json.loads(out)["passed"]
    assert run(capsys, "gradcheck", "--op", "conv9d")[0] == 5


def test_pipeline_with_config_file(dataset, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"grid_size_level1": 8, "radius_level1": 0.0625,
                                         "channels": [4, 4, 8, 8]}, "train": {"epochs": 1}}))
    case = dataset / "case_000"
    assert run(capsys, "preprocess", "--image", case / "image.raw", "--mask", case / "mask.raw",
               "--labels", case / "label.raw", "--out", tmp_path / "pts")[0] == 0
    code, _, err = run(capsys, "hierarchy", "--points", tmp_path / "pts", "--config", cfg, "--out", tmp_path / "h")
    assert code == 0 and json.loads(err.splitlines()[-1])["event"] == "hierarchy"
    code, _, _ = run(capsys, "train", "--data", dataset, "--config", cfg, "--seed", 1, "--threads", 1,
                     "--out", tmp_path / "tr")
    assert code == 0
    record = json.loads((tmp_path / "tr" / "run.json").read_text())
    assert record["model"]["channels"] == [4, 4, 8, 8] and record["train"]["epochs"] == 1
    assert record["train"]["seed"] == 1 and len(record["cases"]) == 10
    events = [json.loads(l) for l in (tmp_path / "tr" / "log.jsonl").read_text().splitlines()]
    assert events[0]["event"] == "epoch" and "loss" in events[0]
    code, _, _ = run(capsys, "infer", "--checkpoint", tmp_path / "tr" / "checkpoint_final", "--data", dataset,
                     "--split", "test", "--out", tmp_path / "pred")
    assert code == 0 and len(list((tmp_path / "pred").glob("case_*/label.raw"))) == 7
    code, _, _ = run(capsys, "eval", "--pred", tmp_path / "pred", "--gt", dataset, "--out", tmp_path / "ev")
    assert code == 0
    rep = json.loads((tmp_path / "ev" / "case_019.json").read_text())
    assert len(rep["dice"]) == 8 and 0 <= rep["avg_dice"] <= 1
