"""Smoke test for the bim_lab extension module.

Install first with `pip install ./crates/py` (or `maturin develop` inside
crates/py), then run `python python/smoke_test.py` or `pytest python/`.
"""

import csv
import tempfile
from pathlib import Path

import pytest

import bim_lab

TINY = (
    "preset=tiny\nnum_blocks=2\nbatch_size=8\ndataset_size=32\n"
    "epochs=2\nwarmup_epochs=0.5\nprobe_epochs=5\n"
)


def test_unknown_key_lists_valid_keys():
    keys = bim_lab.valid_keys()
    assert "mask_schedule" in keys
    with pytest.raises(ValueError) as err:
        bim_lab.normalize_config("learning_rate=0.1\n")
    for k in keys:
        assert k in str(err.value)


def test_normalized_config_round_trips():
    text = bim_lab.normalize_config(TINY)
    assert bim_lab.normalize_config(text) == text


def test_analytic_models():
    assert bim_lab.training_cost_saving("toy", 4, 0.75) == 0.6
    assert abs(bim_lab.linear_saving("toy", [0.75, 0.8, 0.85, 0.9], 0.75) - 0.3) < 1e-12
    one = bim_lab.analytic_peak("toy", [0.75] * 4, 1)
    assert bim_lab.analytic_peak("toy", [0.75] * 4, 8) == 8 * one
    assert bim_lab.analytic_peak("toy", [0.75] * 4, 1, "f64") == 2 * one
    with pytest.raises(ValueError):
        bim_lab.analytic_peak("toy", [0.8, 0.5, 0.5, 0.5], 1)


def test_pretrain_then_probe():
    with tempfile.TemporaryDirectory() as d:
        pre = bim_lab.run("pretrain", TINY, f"{d}/pre", seed=5)
        assert len(pre.losses) == 8
        assert pre.memory_ratio < 1.0
        with open(Path(d) / "pre" / "metrics.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "epoch", "block_id", "loss", "lr", "live_bytes", "peak_bytes"]
        assert sum(r[2] == "-1" for r in rows[1:]) == 8

        ckpt = next(p for p in pre.files if p.endswith("final.bimc"))
        probe = bim_lab.run("probe", TINY + f"checkpoint={ckpt}\n", f"{d}/probe")
        assert [k for k, _ in probe.probes] == [1, 2]
        assert all(0.0 <= acc <= 1.0 for _, acc in probe.probes)

        with pytest.raises(OSError):
            bim_lab.run("probe", TINY + "checkpoint=/nonexistent.bimc\n", f"{d}/bad")
        with pytest.raises(ValueError):
            bim_lab.run("finetune", TINY, d)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
