import json

import pytest

from pae.cli import main
from pae.trainer import TrainConfig


def write_config(path, **kw):
    path.write_text(TrainConfig(**{"epochs": 2, "batch": 32, **kw}).to_text())
    return str(path)


def tree_digest(directory):
    """Checksums recorded in the manifest plus a check that they match the files."""
    manifest = json.loads((directory / "manifest.json").read_text())
    return manifest["checksums"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, bb = root / "data", root / "bb"
    assert main(["gen-data", "--out", str(data), "--n-train", "64", "--n-val", "32", "--n-test", "0"]) == 0
    assert main(["pretrain-source", "--data", str(data), "--out", str(bb), "--steps", "5"]) == 0
    cfg = write_config(root / "pae.cfg")
    base_cfg = write_config(root / "base.cfg", mpa_on=False, kp_on=False, stab_on=False, lr=1.0)
    return root, data, bb, cfg, base_cfg


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 6 and "FAIL" not in out
    assert "8/8 oracle suites passed" in out


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["fly"]) == 1
    assert main([]) == 1


def test_missing_key_names_it(pipeline, tmp_path, capsys):
    root, data, bb, cfg, _ = pipeline
    bad = tmp_path / "bad.cfg"
    bad.write_text("".join(l + "\n" for l in TrainConfig().to_text().splitlines() if "alpha" not in l))
    code = main(["train", "--config", str(bad), "--backbone", str(bb), "--data", str(data),
                 "--out", str(tmp_path / "run")])
    assert code == 1
    assert "alpha" in capsys.readouterr().err


def test_missing_input_is_validation_error(tmp_path):
    assert main(["analyze", "--run", str(tmp_path / "nowhere")]) == 1


def test_compare_needs_two(pipeline, tmp_path):
    assert main(["compare", str(tmp_path / "a.json")]) == 1


def test_mpa_init_outputs(pipeline, tmp_path):
    root, data, bb, cfg, _ = pipeline
    out = tmp_path / "mpa"
    assert main(["mpa-init", "--config", cfg, "--backbone", str(bb), "--data", str(data), "--out", str(out)]) == 0
    rows = (out / "ranking.csv").read_text().splitlines()
    assert rows[0] == "mask_id,origin_row,origin_col,loss" and len(rows) == 50
    summary = json.loads((out / "mpa_summary.json").read_text())
    assert len(summary["top_ids"]) == 4
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["timings"]["phase1_seconds"] > 0
    assert "init_prompts.paet" in manifest["checksums"]


def test_end_to_end(pipeline, capsys):
    root, data, bb, cfg, base_cfg = pipeline
    for name, c in (("pae", cfg), ("base", base_cfg)):
        assert main(["train", "--config", c, "--backbone", str(bb), "--data", str(data),
                     "--out", str(root / name)]) == 0
    s = json.loads((root / "pae" / "summary.json").read_text())
    assert s["status"] == "ok" and s["epochs"] == 2 and len(s["mpa_top"]) == 4
    assert main(["analyze", "--run", str(root / "pae")]) == 0
    a = json.loads((root / "pae" / "analysis" / "analysis.json").read_text())
    assert len(a["spectral_radius"]) == 1
    cmp = root / "cmp.json"
    assert main(["compare", str(root / "base" / "summary.json"), str(root / "pae" / "summary.json"),
                 "--out", str(cmp)]) == 0
    rows = json.loads(cmp.read_text())["rows"]
    assert rows[0]["speedup"] == 1.0 and rows[1]["speedup"] > 0
    assert "speedup" in capsys.readouterr().out


def test_train_is_checksum_deterministic(pipeline, tmp_path):
    root, data, bb, cfg, _ = pipeline
    digests = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["train", "--config", cfg, "--backbone", str(bb), "--data", str(data), "--out", str(out)]) == 0
        digests.append(tree_digest(out))
    assert digests[0] == digests[1]
    assert "summary.json" in digests[0] and "checkpoint/prompts.paet" in digests[0]


def test_gen_data_is_checksum_deterministic(tmp_path):
    for k in range(2):
        assert main(["gen-data", "--out", str(tmp_path / f"d{k}"), "--n-train", "16", "--n-val", "8",
                     "--n-test", "0", "--seed", "3", "--no-source"]) == 0
    assert tree_digest(tmp_path / "d0") == tree_digest(tmp_path / "d1")


def test_divergence_exits_2(pipeline, tmp_path, capsys):
    root, data, bb, _, _ = pipeline
    cfg = write_config(tmp_path / "hot.cfg", mpa_on=False, alpha=1e9, epochs=1)
    out = tmp_path / "hot"
    assert main(["train", "--config", cfg, "--backbone", str(bb), "--data", str(data), "--out", str(out)]) == 2
    assert "diverged" in json.loads((out / "summary.json").read_text())["status"]
