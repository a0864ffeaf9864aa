import json
import os
import subprocess

import pytest

import tabaconv

TINY = dict(d_model=16, heads=2, ffn_mult=2, batch_size=16)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    info = tabaconv.gen(str(out), users=20, rows=100, seed=7)
    return out, info


def test_gen(data):
    out, info = data
    assert info["rows"] == 2000
    assert len(info["train_users"]) == 16
    assert 0.0 < info["bayes_f1_bound"] <= 1.0
    for name in ("transactions.csv", "train.csv", "test.csv", "manifest.json", "roles.json"):
        assert (out / name).exists()


def test_gen_matches_cli(data, tmp_path):
    exe = os.environ.get("TABACONV_CLI")
    if not exe:
        pytest.skip("TABACONV_CLI not set")
    subprocess.run([exe, "gen", "--users", "20", "--rows", "100", "--seed", "7", "--out", str(tmp_path)], check=True)
    out, _ = data
    assert (tmp_path / "transactions.csv").read_bytes() == (out / "transactions.csv").read_bytes()


def test_pretrain_finetune_evaluate(data, tmp_path):
    out, _ = data
    pre = tabaconv.pretrain(str(out / "train.csv"), str(tmp_path / "pre"), epochs=1, **TINY)
    assert pre["windows"] == 16 * tabaconv.window_count(100, 10, 5)
    assert pre["history"][0]["masked_cat_acc"] is not None
    ft = tabaconv.finetune(str(out / "train.csv"), str(tmp_path / "ft"), ckpt=pre["checkpoint"], epochs=1,
                           batch_size=16)
    report = tabaconv.evaluate(ft["checkpoint"], str(out / "test.csv"))
    assert report["windows"] == 20
    assert 0.0 <= report["f1"] <= 1.0
    assert report["tp"] + report["fp"] + report["fn"] + report["tn"] == 20
    lines = (tmp_path / "ft" / "metrics.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["phase"] == "evaluate"


def test_errors(data, tmp_path):
    out, _ = data
    with pytest.raises(tabaconv.ConfigError):
        tabaconv.gen(str(tmp_path / "x"), fraud_rate=1.5)
    with pytest.raises(tabaconv.ConfigError):
        tabaconv.finetune(str(out / "train.csv"), str(tmp_path / "f"), mode="finetune")
    (tmp_path / "junk").write_bytes(b"not a checkpoint")
    with pytest.raises(tabaconv.Error):
        tabaconv.evaluate(str(tmp_path / "junk"), str(out / "test.csv"))


def test_gradcheck():
    r = tabaconv.gradcheck()
    assert r["pass"]
    assert max(r["max_rel_error"].values()) < 1e-4


def test_calendar_and_masks():
    c = tabaconv.calendar_parts(0)
    assert (c["year"], c["month"], c["day"], c["weekday"]) == (1970, 1, 1, 3)
    assert tabaconv.calendar_parts(1609459200)["iso_week"] == 53  # 2021-01-01
    assert tabaconv.window_count(9, 10, 5) == 0
    cells, rows = tabaconv.sample_mask(50, 3, 2, p_row=1.0, seed=1)
    assert all(rows) and all(all(r) for r in cells)
    assert tabaconv.bayes_f1_bound(users=20, rows=100, label_noise=0.0) == 1.0
